//! Simulation studies of gradient and forecast variance under serial
//! dependence, and the linear autoregressive convergence ablation.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::decoder::ForecastGrid;
use crate::ensemble::{ensemble, EnsembleMethod, EnsembleSpec};
use crate::error::{Error, Result};
use crate::model::{Forecaster, LinearAr};
use crate::training::{LossTrajectory, TrajectoryRecord};

/// Independent RNG seed for stream `index` of a base seed (splitmix64).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaWeights {
    /// Weights `1/sqrt(M+1)`: marginal variance equals `innovation_std^2`.
    Normalized,
    /// Unit weights: marginal variance `(M+1) innovation_std^2`.
    Unit,
}

/// Equal-weight moving average of order `M` of iid Gaussian innovations,
/// in `P` independent coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MDependentProcess {
    pub order: usize,
    pub dim: usize,
    pub innovation_std: f64,
    pub weights: MaWeights,
    pub seed: u64,
}

impl MDependentProcess {
    pub fn new(order: usize, dim: usize, seed: u64) -> Self {
        Self {
            order,
            dim,
            innovation_std: 1.0,
            weights: MaWeights::Normalized,
            seed,
        }
    }

    fn weight(&self) -> f64 {
        match self.weights {
            MaWeights::Normalized => 1.0 / ((self.order + 1) as f64).sqrt(),
            MaWeights::Unit => 1.0,
        }
    }

    /// Autocovariance `gamma(b)` of each coordinate.
    pub fn autocovariance(&self, lag: usize) -> f64 {
        if lag > self.order {
            return 0.0;
        }
        let w = self.weight();
        w * w * self.innovation_std.powi(2) * (self.order + 1 - lag) as f64
    }

    /// `(1/T) sum_{|b| < T} (1 - |b|/T) gamma(b)`.
    pub fn mean_variance(&self, t: usize) -> f64 {
        let tf = t as f64;
        let mut s = self.autocovariance(0);
        for b in 1..t.min(self.order + 1) {
            s += 2.0 * (1.0 - b as f64 / tf) * self.autocovariance(b);
        }
        s / tf
    }
}

fn generate(proc: &MDependentProcess, t: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (m, p) = (proc.order, proc.dim);
    let w = proc.weight() * proc.innovation_std;
    let innov: Vec<f64> = (0..(t + m) * p).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0; t * p];
    for i in 0..t {
        for j in 0..=m {
            let src = &innov[(i + j) * p..(i + j + 1) * p];
            for (o, &e) in out[i * p..(i + 1) * p].iter_mut().zip(src) {
                *o += w * e;
            }
        }
    }
    out
}

/// `T x P` sample (row-major) of the process.
pub fn gen_mdependent(proc: &MDependentProcess, t: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(proc.seed);
    Tensor::matrix(t, proc.dim, generate(proc, t, &mut rng))
}

/// Sample autocovariance at `lag`, averaged over coordinates.
pub fn empirical_autocovariance(sample: &Tensor, lag: usize) -> f64 {
    let (t, p) = (sample.rows(), sample.cols());
    let d = sample.data();
    let mut total = 0.0;
    for j in 0..p {
        let mean = (0..t).map(|i| d[i * p + j]).sum::<f64>() / t as f64;
        let c: f64 = (0..t - lag)
            .map(|i| (d[i * p + j] - mean) * (d[(i + lag) * p + j] - mean))
            .sum();
        total += c / t as f64;
    }
    total / p as f64
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Variance of the mean of `T` consecutive samples, across `reps`
/// independent realizations, averaged over coordinates.
///
/// Each realization is one path of length `max(T_grid)`; the estimate for
/// `T` uses its first `T` samples.
pub fn mean_estimator_variance(
    proc: &MDependentProcess,
    t_grid: &[usize],
    reps: usize,
) -> Result<Vec<(usize, f64)>> {
    if reps < 50 {
        return Err(Error::Config("mean_estimator_variance needs reps >= 50".into()));
    }
    if t_grid.is_empty() || t_grid.contains(&0) {
        return Err(Error::Config("T grid must be non-empty and positive".into()));
    }
    let t_max = *t_grid.iter().max().expect("non-empty");
    let p = proc.dim;
    // means[k][rep * p + j]
    let mut means = vec![vec![0.0; reps * p]; t_grid.len()];
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(proc.seed, rep as u64));
        let path = generate(proc, t_max, &mut rng);
        let mut prefix = vec![0.0; p];
        let mut filled = 0;
        let mut order: Vec<(usize, usize)> = t_grid.iter().copied().enumerate().map(|(k, t)| (t, k)).collect();
        order.sort_unstable();
        for (t, k) in order {
            while filled < t {
                for (s, &x) in prefix.iter_mut().zip(&path[filled * p..(filled + 1) * p]) {
                    *s += x;
                }
                filled += 1;
            }
            for j in 0..p {
                means[k][rep * p + j] = prefix[j] / t as f64;
            }
        }
    }
    Ok(t_grid
        .iter()
        .zip(&means)
        .map(|(&t, m)| {
            let var = (0..p)
                .map(|j| {
                    let col: Vec<f64> = (0..reps).map(|r| m[r * p + j]).collect();
                    sample_variance(&col)
                })
                .sum::<f64>()
                / p as f64;
            (t, var)
        })
        .collect())
}

/// Least-squares fit of `log y` on `log x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn loglog_fit(pairs: &[(f64, f64)]) -> Result<LogLogFit> {
    if pairs.len() < 3 {
        return Err(Error::Domain("log-log fit needs at least 3 points".into()));
    }
    if pairs.iter().any(|&(x, y)| !(x > 0.0) || !(y > 0.0)) {
        return Err(Error::Domain("log-log fit needs positive values".into()));
    }
    let n = pairs.len() as f64;
    let lx: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("log-log fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LogLogFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

pub fn loglog_slope(pairs: &[(f64, f64)]) -> Result<f64> {
    Ok(loglog_fit(pairs)?.slope)
}

/// Series per repetition in [`forecast_variance_decay`].
const DECAY_SERIES: usize = 8;

/// Variance of moving-average ensembles of unbiased forecasts whose errors
/// are `M`-dependent across FCDs, for each ensemble size `n`.
///
/// For size `n` a grid with `n` FCDs and horizon `n` is filled with
/// `truth + e_t` (error shared by all horizons of FCD `t`); the ensembled
/// one-step cell at the last FCD then averages exactly `n` forecasts of the
/// same target. Each repetition contributes several independent series.
pub fn forecast_variance_decay(
    ensemble_sizes: &[usize],
    order: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if reps < 100 {
        return Err(Error::Config("forecast_variance_decay needs reps >= 100".into()));
    }
    let truth = 10.0;
    let proc = MDependentProcess::new(order, DECAY_SERIES, seed);
    let mut out = Vec::with_capacity(ensemble_sizes.len());
    for (k, &n) in ensemble_sizes.iter().enumerate() {
        if n == 0 {
            return Err(Error::Config("ensemble sizes must be positive".into()));
        }
        let spec = EnsembleSpec::new(EnsembleMethod::MovingAverage, Some(n))?;
        let mut errors = Vec::with_capacity(reps * DECAY_SERIES);
        for rep in 0..reps {
            let stream = derive_seed(seed, (k * reps + rep) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let noise = generate(&proc, n, &mut rng);
            let mut grid = ForecastGrid::zeros(
                (0..DECAY_SERIES).map(|b| b.to_string()).collect(),
                vec![1; DECAY_SERIES],
                n,
                n,
                vec![0.5],
            );
            for b in 0..DECAY_SERIES {
                for t in 0..n {
                    for h in 0..n {
                        grid.set(b, t, h, 0, truth + noise[t * DECAY_SERIES + b]);
                    }
                }
            }
            let e = ensemble(&grid, &spec, 1);
            for b in 0..DECAY_SERIES {
                errors.push(e.get(b, n - 1, 0, 0) - truth);
            }
        }
        out.push((n, sample_variance(&errors)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub window_sample_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub max_steps: usize,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub quantile: f64,
    pub ar_order: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            window_sample_sizes: vec![2, 14, 27, 40, 53, 66, 80, 93, 106, 119, 132],
            learning_rates: vec![0.001, 0.005, 0.01, 0.05],
            max_steps: 15_000,
            lr_decay: 0.1,
            lr_step: 1000,
            batch_size: 1,
            seed: 1,
            quantile: 0.5,
            ar_order: 12,
        }
    }
}

/// Series used by the ablation, each trained on in full.
#[derive(Clone, Debug)]
pub struct AblationData {
    pub series: Vec<Vec<f64>>,
}

impl AblationData {
    /// FCDs (1-based) of series `b` with a full lag vector and a target:
    /// `p + 1 <= t <= len - 1`.
    pub fn fcds(&self, b: usize, lags: usize) -> std::ops::RangeInclusive<usize> {
        lags..=self.series[b].len().saturating_sub(1)
    }

    pub fn num_fcds(&self, lags: usize) -> usize {
        (0..self.series.len())
            .map(|b| self.fcds(b, lags).count())
            .sum()
    }
}

#[derive(Debug)]
pub struct AblationCell {
    pub sample_size: usize,
    pub lr: f64,
    pub result: Result<LossTrajectory>,
}

fn lag_vector(series: &[f64], t: usize, lags: usize) -> impl Iterator<Item = f64> + '_ {
    (0..lags).map(move |i| series[t - 1 - i])
}

/// Pinball loss of the AR model over every FCD of the panel.
fn full_ar_loss(model: &LinearAr, store: &ParamStore, data: &AblationData, q: f64) -> f64 {
    let lags = model.lags();
    let c = store.value(model.intercept_id()).data()[0];
    let theta: Vec<f64> = (0..lags).map(|i| model.theta(store, i, 0, 0)).collect();
    let (mut total, mut n) = (0.0, 0usize);
    for (b, s) in data.series.iter().enumerate() {
        for t in data.fcds(b, lags) {
            let pred = c + lag_vector(s, t, lags).zip(&theta).map(|(y, th)| y * th).sum::<f64>();
            total += crate::training::pinball(s[t], pred, q);
            n += 1;
        }
    }
    total / n.max(1) as f64
}

/// Per-step AR training loss restricted to the chosen FCDs of one series.
fn ar_step_loss(
    model: &LinearAr,
    tape: &mut Tape,
    store: &ParamStore,
    series: &[f64],
    fcds: &[usize],
) -> Result<crate::autodiff::Var> {
    let last = *fcds.iter().max().expect("non-empty");
    let all = model.forward_rows(tape, store, &series[..last], 0, last, None)?;
    let rows: Vec<crate::autodiff::Var> = fcds
        .iter()
        .map(|&t| tape.slice_rows(all, t - 1, 1))
        .collect::<Result<_>>()?;
    let yhat = tape.concat_rows(&rows)?;
    let y = Tensor::column(fcds.iter().map(|&t| series[t]).collect());
    let pin = tape.pinball_elem(&y, yhat, model.quantiles())?;
    let mask = vec![true; fcds.len()];
    tape.masked_mean(pin, &mask)
}

/// Train one AR model with `sample_size` FCDs per step.
///
/// Each step draws `batch_size` series uniformly and, from each, up to
/// `sample_size` distinct FCDs without replacement (all of them when the
/// series has fewer, which is forking-sequences training). The trajectory
/// records the loss over every FCD of the panel before each update.
pub fn train_ar_cell(
    cfg: &AblationConfig,
    data: &AblationData,
    sample_size: usize,
    lr0: f64,
    seed: u64,
) -> Result<LossTrajectory> {
    let (model, mut store) = LinearAr::new(cfg.ar_order, 1, &[cfg.quantile], seed)?;
    let lags = model.lags();
    let eligible: Vec<usize> = (0..data.series.len())
        .filter(|&b| data.fcds(b, lags).count() > 0)
        .collect();
    if eligible.is_empty() || sample_size == 0 {
        return Err(Error::Sampler("no series long enough for the AR order".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectory = LossTrajectory::default();
    for step in 0..cfg.max_steps {
        let lr = lr0 * cfg.lr_decay.powi((step / cfg.lr_step) as i32);
        let loss = full_ar_loss(&model, &store, data, cfg.quantile);
        store.zero_grads();
        for _ in 0..cfg.batch_size {
            let b = eligible[rng.random_range(0..eligible.len())];
            let all: Vec<usize> = data.fcds(b, lags).collect();
            let mut fcds: Vec<usize> = if sample_size >= all.len() {
                all
            } else {
                sample(&mut rng, all.len(), sample_size)
                    .into_iter()
                    .map(|i| all[i])
                    .collect()
            };
            fcds.sort_unstable();
            let mut tape = Tape::new();
            let l = ar_step_loss(&model, &mut tape, &store, &data.series[b], &fcds)?;
            let l = tape.scale(l, 1.0 / cfg.batch_size as f64);
            tape.backward(l, &mut store)?;
        }
        let grad_norm = store.grad_norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step,
                trajectory: Box::new(trajectory),
            });
        }
        store.sgd_step(lr);
        trajectory.records.push(TrajectoryRecord {
            step,
            loss,
            lr,
            grad_norm,
        });
    }
    Ok(trajectory)
}

/// Every `(sample_size, lr)` cell of the ablation grid. A diverging cell
/// reports its error without stopping the others.
pub fn ar_convergence_ablation(cfg: &AblationConfig, data: &AblationData) -> Vec<AblationCell> {
    ar_convergence_ablation_parallel(cfg, data, 1)
}

/// [`ar_convergence_ablation`] with cells spread over `threads` workers.
/// Every cell owns its RNG stream, so the output does not depend on
/// `threads`.
pub fn ar_convergence_ablation_parallel(
    cfg: &AblationConfig,
    data: &AblationData,
    threads: usize,
) -> Vec<AblationCell> {
    let grid: Vec<(f64, usize)> = cfg
        .learning_rates
        .iter()
        .flat_map(|&lr| cfg.window_sample_sizes.iter().map(move |&k| (lr, k)))
        .collect();
    let run = |idx: usize| {
        let (lr, k) = grid[idx];
        AblationCell {
            sample_size: k,
            lr,
            result: train_ar_cell(cfg, data, k, lr, derive_seed(cfg.seed, idx as u64)),
        }
    };
    let threads = threads.clamp(1, grid.len().max(1));
    if threads == 1 {
        return (0..grid.len()).map(run).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut done: Vec<(usize, AblationCell)> = std::thread::scope(|scope| {
        let workers: Vec<_> = (0..threads)
            .map(|_| {
                scope.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if idx >= grid.len() {
                            break mine;
                        }
                        mine.push((idx, run(idx)));
                    }
                })
            })
            .collect();
        workers
            .into_iter()
            .flat_map(|w| w.join().expect("ablation worker panicked"))
            .collect()
    });
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, c)| c).collect()
}

/// Per-FCD gradients of the AR pinball loss at the model's current
/// parameters, one row per FCD of the panel (pooled).
pub fn ar_fcd_gradients(model: &LinearAr, store: &ParamStore, data: &AblationData, q: f64) -> Vec<Vec<f64>> {
    let lags = model.lags();
    let c = store.value(model.intercept_id()).data()[0];
    let theta: Vec<f64> = (0..lags).map(|i| model.theta(store, i, 0, 0)).collect();
    let mut out = Vec::new();
    for (b, s) in data.series.iter().enumerate() {
        for t in data.fcds(b, lags) {
            let pred = c + lag_vector(s, t, lags).zip(&theta).map(|(y, th)| y * th).sum::<f64>();
            // d pinball / d pred
            let d = if s[t] - pred > 0.0 { -q } else { 1.0 - q };
            let mut g: Vec<f64> = lag_vector(s, t, lags).map(|y| d * y).collect();
            g.push(d);
            out.push(g);
        }
    }
    out
}

/// Total variance (trace of the covariance) of the mean gradient over `k`
/// FCDs drawn without replacement from the pooled FCD set, for each `k`.
pub fn frozen_gradient_variance(
    per_fcd: &[Vec<f64>],
    sample_sizes: &[usize],
    draws: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let n = per_fcd.len();
    if n == 0 || draws < 2 {
        return Err(Error::Config("need FCD gradients and at least two draws".into()));
    }
    let dim = per_fcd[0].len();
    let mut out = Vec::new();
    for (i, &k) in sample_sizes.iter().enumerate() {
        if k == 0 || k > n {
            return Err(Error::Config(format!("sample size {k} outside 1..={n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let mut means = vec![vec![0.0; dim]; draws];
        for m in means.iter_mut() {
            for idx in sample(&mut rng, n, k) {
                for (a, g) in m.iter_mut().zip(&per_fcd[idx]) {
                    *a += g / k as f64;
                }
            }
        }
        let total: f64 = (0..dim)
            .map(|j| {
                let col: Vec<f64> = means.iter().map(|m| m[j]).collect();
                sample_variance(&col)
            })
            .sum();
        out.push((k, total));
    }
    Ok(out)
}

/// First step at which the loss is within `ratio` of its final value.
pub fn steps_to_fraction_of_final(trajectory: &LossTrajectory, ratio: f64) -> Option<usize> {
    let last = trajectory.final_loss()?;
    trajectory.first_step_below(ratio * last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slopes_of_exact_power_laws() {
        let inv: Vec<(f64, f64)> = (1..=6).map(|i| (i as f64, 3.0 / i as f64)).collect();
        assert!((loglog_slope(&inv).unwrap() + 1.0).abs() < 1e-12);
        let inv2: Vec<(f64, f64)> = (1..=6).map(|i| (i as f64, 3.0 / (i * i) as f64)).collect();
        assert!((loglog_slope(&inv2).unwrap() + 2.0).abs() < 1e-12);
        assert!(matches!(loglog_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]), Err(Error::Domain(_))));
    }

    #[test]
    fn unit_ma1_autocovariance() {
        let mut p = MDependentProcess::new(1, 1, 0);
        p.weights = MaWeights::Unit;
        assert_eq!(p.autocovariance(0), 2.0);
        assert_eq!(p.autocovariance(1), 1.0);
        assert_eq!(p.autocovariance(2), 0.0);
    }

    #[test]
    fn finite_t_formula_limits() {
        let p = MDependentProcess::new(0, 1, 0);
        assert!((p.mean_variance(10) - 0.1).abs() < 1e-15);
        let p = MDependentProcess::new(2, 1, 0);
        // Normalized MA(2): gamma = 1, 2/3, 1/3.
        let v = (1.0 + 2.0 * (0.5 * 2.0 / 3.0)) / 2.0;
        assert!((p.mean_variance(2) - v).abs() < 1e-15);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = MDependentProcess::new(3, 2, 11);
        assert_eq!(gen_mdependent(&p, 50), gen_mdependent(&p, 50));
    }

    #[test]
    fn table_defaults() {
        let c = AblationConfig::default();
        assert_eq!(c.window_sample_sizes.len(), 11);
        assert_eq!(c.learning_rates, vec![0.001, 0.005, 0.01, 0.05]);
        assert_eq!((c.max_steps, c.lr_step, c.batch_size, c.seed), (15_000, 1000, 1, 1));
    }
}
