//! Test-split evaluation of a trained forecaster.

use crate::autodiff::ParamStore;
use crate::decoder::ForecastGrid;
use crate::ensemble::{ensemble, EnsembleSpec};
use crate::error::Result;
use crate::inference::{cross_val_forecast, test_ranges, InferenceScheme};
use crate::metrics::{mae, scrps, sqpc, MetricValue};
use crate::model::Forecaster;
use crate::panel::{standard_scale, TimeSeriesPanel};

/// Forecasts over the test FCDs, on the original scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TestForecast {
    pub raw: ForecastGrid,
    /// `raw` after cross-FCD ensembling, when requested.
    pub ensembled: Option<ForecastGrid>,
}

/// Scale `panel` with its train statistics, forecast every test FCD and
/// map the grid back to the original scale.
pub fn forecast_test<M: Forecaster>(
    model: &M,
    store: &ParamStore,
    panel: &TimeSeriesPanel,
    scheme: InferenceScheme,
    ensemble_spec: Option<&EnsembleSpec>,
) -> Result<TestForecast> {
    let splits = panel.splits()?;
    let (scaled, params) = standard_scale(panel, &splits)?;
    let grid = cross_val_forecast(model, store, &scaled, scheme, &test_ranges(&splits))?;
    let raw = grid.unscale(&params)?;
    let ensembled = ensemble_spec.map(|spec| ensemble(&raw, spec, 1));
    Ok(TestForecast { raw, ensembled })
}

/// `scrps`, `sqpc` (median) and `mae` of a grid against the panel.
pub fn grid_metrics(panel: &TimeSeriesPanel, grid: &ForecastGrid) -> Result<Vec<(&'static str, MetricValue)>> {
    let series: Vec<&[f64]> = panel.series.iter().map(|s| s.values.as_slice()).collect();
    let (y, mask) = grid.targets_from(&series)?;
    Ok(vec![
        ("scrps", scrps(&y, grid, &mask)?),
        ("sqpc", sqpc(grid, 0.5)?),
        ("mae", mae(&y, grid, &mask)?),
    ])
}
