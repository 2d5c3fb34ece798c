//! Temporal cross-validation forecasts: one forecast per FCD in a range,
//! produced by forking-sequences or by re-encoding a window per FCD.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use crate::autodiff::{OpCounters, ParamStore, Tape};
use crate::decoder::ForecastGrid;
use crate::encoders::EncoderFamily;
use crate::error::{shape_err, Error, Result};
use crate::model::Forecaster;
use crate::panel::{SplitSpec, TimeSeriesPanel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InferenceScheme {
    /// Encode each series once, decode every FCD.
    Fs,
    /// Re-encode the trailing `L` observations at every FCD.
    WsRestricted(usize),
    /// Re-encode the whole prefix at every FCD.
    WsFull,
}

impl InferenceScheme {
    pub fn name(&self) -> &'static str {
        match self {
            InferenceScheme::Fs => "fs",
            InferenceScheme::WsRestricted(_) => "ws_restricted",
            InferenceScheme::WsFull => "ws_full",
        }
    }
}

impl fmt::Display for InferenceScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl InferenceScheme {
    /// Parse `fs`, `ws_full` or `ws_restricted` (window `l`).
    pub fn parse(s: &str, l: usize) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fs" => Ok(InferenceScheme::Fs),
            "ws_full" => Ok(InferenceScheme::WsFull),
            "ws_restricted" | "ws" => Ok(InferenceScheme::WsRestricted(l)),
            other => Err(Error::Config(format!("unknown inference scheme `{other}`"))),
        }
    }
}

impl FromStr for InferenceScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(l) = s.strip_prefix("ws_restricted:") {
            let l = l
                .parse()
                .map_err(|_| Error::Config(format!("bad window in `{s}`")))?;
            return Ok(InferenceScheme::WsRestricted(l));
        }
        match s {
            "fs" | "ws_full" => Self::parse(s, 0),
            other => Err(Error::Config(format!(
                "unknown inference scheme `{other}` (fs, ws_full, ws_restricted:<L>)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferenceStats {
    /// Number of encoder passes (one per series under FS, one per FCD otherwise).
    pub encoder_calls: u64,
    pub counters: OpCounters,
}

/// The test FCD range of every split.
pub fn test_ranges(splits: &[SplitSpec]) -> Vec<RangeInclusive<usize>> {
    splits.iter().map(SplitSpec::test_fcds).collect()
}

/// Forecasts for the 1-based FCDs `ranges[b]` of every series of `panel`.
pub fn cross_val_forecast<M: Forecaster>(
    model: &M,
    store: &ParamStore,
    panel: &TimeSeriesPanel,
    scheme: InferenceScheme,
    ranges: &[RangeInclusive<usize>],
) -> Result<ForecastGrid> {
    Ok(cross_val_forecast_with_stats(model, store, panel, scheme, ranges)?.0)
}

pub fn cross_val_forecast_with_stats<M: Forecaster>(
    model: &M,
    store: &ParamStore,
    panel: &TimeSeriesPanel,
    scheme: InferenceScheme,
    ranges: &[RangeInclusive<usize>],
) -> Result<(ForecastGrid, InferenceStats)> {
    if ranges.len() != panel.len() {
        return Err(shape_err("one FCD range per series required"));
    }
    let n_fcd = ranges.first().map_or(0, |r| r.clone().count());
    if n_fcd == 0 || ranges.iter().any(|r| r.clone().count() != n_fcd) {
        return Err(shape_err("FCD ranges must be non-empty and of equal length"));
    }
    for (r, s) in ranges.iter().zip(&panel.series) {
        if *r.start() == 0 || *r.end() > s.len() {
            return Err(shape_err(format!(
                "FCD range {r:?} outside series `{}` of length {}",
                s.id,
                s.len()
            )));
        }
    }
    if let InferenceScheme::WsRestricted(0) = scheme {
        return Err(Error::Config("restricted window length must be positive".into()));
    }
    let h = model.horizon();
    let q = model.quantiles().len();
    let mut grid = ForecastGrid::zeros(
        panel.series.iter().map(|s| s.id.clone()).collect(),
        ranges.iter().map(|r| *r.start()).collect(),
        n_fcd,
        h,
        model.quantiles().to_vec(),
    );
    let mut stats = InferenceStats::default();
    for (b, (s, range)) in panel.series.iter().zip(ranges).enumerate() {
        let values = &s.values;
        let cov = s.static_covariate.as_deref();
        match scheme {
            InferenceScheme::Fs => {
                let mut tape = Tape::inference();
                let out = model.forward_rows(
                    &mut tape,
                    store,
                    &values[..*range.end()],
                    range.start() - 1,
                    n_fcd,
                    cov,
                )?;
                let out = tape.value(out);
                for t in 0..n_fcd {
                    grid.cell_mut(b, t).copy_from_slice(out.row_slice(t));
                }
                stats.encoder_calls += 1;
                stats.counters.merge(&tape.counters());
            }
            InferenceScheme::WsRestricted(_) | InferenceScheme::WsFull => {
                for (t, fcd) in range.clone().enumerate() {
                    let start = match scheme {
                        InferenceScheme::WsRestricted(l) => fcd.saturating_sub(l),
                        _ => 0,
                    };
                    let mut tape = Tape::inference();
                    let out = model.forward_window(&mut tape, store, &values[start..fcd], cov)?;
                    grid.cell_mut(b, t).copy_from_slice(tape.value(out).data());
                    stats.encoder_calls += 1;
                    stats.counters.merge(&tape.counters());
                }
            }
        }
        debug_assert_eq!(grid.cell(b, 0).len(), h * q);
    }
    Ok((grid, stats))
}

/// Leading-order encoder cost of cross-validation inference over `t` FCDs
/// of a length-`t` series (the published complexity table, constants 1).
pub fn analytic_op_count(scheme: InferenceScheme, family: EncoderFamily, t: u64, l: u64) -> u64 {
    use EncoderFamily::*;
    match (scheme, family) {
        (InferenceScheme::Fs, Cnn | Rnn | Lstm) => t,
        (InferenceScheme::Fs, Transformer) => t * t,
        (InferenceScheme::Fs, Mlp) => t * l,
        (InferenceScheme::WsRestricted(_), Cnn | Rnn | Lstm | Mlp) => t * l,
        (InferenceScheme::WsRestricted(_), Transformer) => t * t * l,
        (InferenceScheme::WsFull, Cnn | Rnn | Lstm | Mlp) => t * t,
        (InferenceScheme::WsFull, Transformer) => t * t * t,
    }
}

/// Exponent of `T` in [`analytic_op_count`].
pub fn analytic_exponent(scheme: InferenceScheme, family: EncoderFamily) -> f64 {
    let a = analytic_op_count(scheme, family, 2, 1) as f64;
    let b = analytic_op_count(scheme, family, 4, 1) as f64;
    (b / a).log2()
}
