//! Scaling benchmarks of cross-validation inference.

use std::ops::RangeInclusive;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::OpCounters;
use crate::encoders::EncoderFamily;
use crate::error::{Error, Result};
use crate::inference::{cross_val_forecast_with_stats, InferenceScheme};
use crate::model::{ModelSpec, MqForecaster};
use crate::panel::{FrequencyMeta, SeriesRecord, TimeSeriesPanel};
use crate::theory::{loglog_fit, LogLogFit};

/// Counter that characterizes each family's encoder cost.
pub fn family_op_count(family: EncoderFamily, c: &OpCounters) -> u64 {
    match family {
        EncoderFamily::Cnn => c.conv_positions,
        EncoderFamily::Rnn | EncoderFamily::Lstm => c.recurrent_steps,
        EncoderFamily::Transformer => c.attention_pairs,
        EncoderFamily::Mlp => c.window_inputs,
    }
}

/// Small model used for timing: the published layer structure with narrow
/// widths so that the largest grids run at desk scale.
pub fn bench_model_spec(family: EncoderFamily) -> ModelSpec {
    let horizon = 4;
    let mut spec = ModelSpec::new(family, horizon);
    spec.encoder.hidden = 8;
    spec.encoder.conv_channels = 8;
    spec.encoder.heads = 2;
    spec.encoder.attn_layers = 1;
    spec.encoder.dropout = 0.0;
    spec.decoder.agnostic_dim = 8;
    spec.decoder.specific_dim = 2;
    spec.decoder.quantiles = vec![0.5];
    spec
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub family: EncoderFamily,
    pub scheme: InferenceScheme,
    pub t: usize,
    pub repetitions: usize,
    pub median_seconds: f64,
    pub op_count: u64,
    pub encoder_calls: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub spec: ModelSpec,
    /// Window of the restricted scheme (ignored otherwise).
    pub window: usize,
    /// Skip timing and only record counters.
    pub counters_only: bool,
    /// Largest absolute difference allowed between FS and window forecasts.
    pub equivalence_tol: f64,
}

impl BenchOptions {
    pub fn new(family: EncoderFamily) -> Self {
        let spec = bench_model_spec(family);
        let window = spec.encoder.receptive_field().unwrap_or(64).max(2 * spec.decoder.horizon);
        Self {
            spec,
            window,
            counters_only: false,
            equivalence_tol: 1e-12,
        }
    }
}

fn random_panel(t: usize, seed: u64) -> TimeSeriesPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
    TimeSeriesPanel {
        series: vec![SeriesRecord::new("bench", values)],
        frequency: FrequencyMeta {
            name: "Bench".into(),
            seasonality: 1,
            horizon: 4,
        },
    }
}

/// Check that a window scheme reproduces forking-sequences forecasts at
/// every FCD whose window covers the receptive field.
pub fn check_equivalence(
    model: &MqForecaster,
    store: &crate::autodiff::ParamStore,
    panel: &TimeSeriesPanel,
    scheme: InferenceScheme,
    tol: f64,
) -> Result<f64> {
    let t = panel.series[0].len();
    let covered_from = match scheme {
        InferenceScheme::Fs | InferenceScheme::WsFull => 1,
        InferenceScheme::WsRestricted(l) => match model.encoder().receptive_field() {
            Some(rf) if l >= rf => 1,
            _ => {
                // Unbounded or uncovered receptive field: only FCDs whose
                // window is the whole prefix are comparable.
                return Ok(0.0);
            }
        },
    };
    let range: Vec<RangeInclusive<usize>> = vec![covered_from..=t];
    let (fs, _) = cross_val_forecast_with_stats(model, store, panel, InferenceScheme::Fs, &range)?;
    let (ws, _) = cross_val_forecast_with_stats(model, store, panel, scheme, &range)?;
    let diff = fs
        .values
        .iter()
        .zip(&ws.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if diff > tol {
        return Err(Error::Contract(format!(
            "{scheme} forecasts differ from fs by {diff:e}"
        )));
    }
    Ok(diff)
}

/// Time cross-validation inference over all `T` FCDs of a random series
/// for every `T` in `t_grid`.
///
/// One warm-up call per `T` precedes the timed repetitions; the equivalence
/// check against forking-sequences runs on the smallest `T` before any timing.
pub fn run_scaling_bench(
    family: EncoderFamily,
    scheme: InferenceScheme,
    t_grid: &[usize],
    reps: usize,
    seed: u64,
    opts: &BenchOptions,
) -> Result<BenchResult> {
    if t_grid.len() < 4 || t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("T grid must be strictly increasing with >= 4 points".into()));
    }
    if reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    let mut spec = opts.spec.clone();
    spec.encoder.family = family;
    let (model, store) = MqForecaster::new(spec, seed)?;
    let scheme = match scheme {
        InferenceScheme::WsRestricted(_) => InferenceScheme::WsRestricted(opts.window),
        s => s,
    };
    let check_panel = random_panel(t_grid[0], seed ^ 0x5eed);
    check_equivalence(&model, &store, &check_panel, scheme, opts.equivalence_tol)?;

    // The counter pass doubles as the warm-up call of each T.
    let mut cases = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let panel = random_panel(t, seed.wrapping_add(t as u64));
        let range = vec![1..=t];
        let (_, stats) = cross_val_forecast_with_stats(&model, &store, &panel, scheme, &range)?;
        cases.push((panel, range, stats));
    }
    // Repetitions run round-robin over T so that slow drifts of the machine
    // spread over every grid point instead of biasing the fitted slope.
    let mut times = vec![Vec::with_capacity(reps); t_grid.len()];
    if !opts.counters_only {
        for _ in 0..reps {
            for ((panel, range, _), out) in cases.iter().zip(&mut times) {
                let start = Instant::now();
                let r = cross_val_forecast_with_stats(&model, &store, panel, scheme, range)?;
                out.push(start.elapsed().as_secs_f64());
                std::hint::black_box(r);
            }
        }
    }
    let mut result = BenchResult::default();
    for ((&t, (_, _, stats)), mut tt) in t_grid.iter().zip(&cases).zip(times) {
        tt.sort_by(f64::total_cmp);
        result.rows.push(BenchRow {
            family,
            scheme,
            t,
            repetitions: tt.len(),
            median_seconds: tt.get(tt.len() / 2).copied().unwrap_or(0.0),
            op_count: family_op_count(family, &stats.counters),
            encoder_calls: stats.encoder_calls,
        });
    }
    Ok(result)
}

/// Log-log fit of median wall time against `T`.
pub fn fit_exponent(result: &BenchResult) -> Result<LogLogFit> {
    if result.rows.len() < 4 {
        return Err(Error::Domain("fit needs at least 4 T points".into()));
    }
    let pairs: Vec<(f64, f64)> = result
        .rows
        .iter()
        .map(|r| (r.t as f64, r.median_seconds))
        .collect();
    loglog_fit(&pairs)
}

/// Log-log fit of the op counter against `T`.
pub fn fit_counter_exponent(result: &BenchResult) -> Result<LogLogFit> {
    let pairs: Vec<(f64, f64)> = result
        .rows
        .iter()
        .map(|r| (r.t as f64, r.op_count as f64))
        .collect();
    loglog_fit(&pairs)
}

impl BenchResult {
    /// `family,scheme,T,median_seconds,op_count`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["family", "scheme", "T", "median_seconds", "op_count"])?;
        for r in &self.rows {
            w.write_record([
                r.family.to_string(),
                r.scheme.to_string(),
                r.t.to_string(),
                format!("{:?}", r.median_seconds),
                r.op_count.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// CPU model and clock source, `key=value` per line.
pub fn machine_metadata() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "cpu_model={cpu}\nclock_source=std::time::Instant (monotonic)\nthreads_used=1\navailable_parallelism={threads}\nos={}\narch={}\n",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}
