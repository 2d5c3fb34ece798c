//! Model estimation under forking-sequences (all FCDs of each sampled
//! series) and window-sampling (independent windows at sampled FCDs).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::decoder::ForecastGrid;
use crate::error::{shape_err, Error, Result};
use crate::model::{Forecaster, ModelSpec, MqForecaster};
use crate::panel::{SplitSpec, TimeSeriesPanel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Forking-sequences.
    Fs,
    /// Window-sampling.
    Ws,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Fs => "fs",
            Scheme::Ws => "ws",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fs" => Ok(Scheme::Fs),
            "ws" => Ok(Scheme::Ws),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::adam()),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub model: ModelSpec,
    /// Series per step (FS) or windows per step (WS).
    pub batch_size: usize,
    pub lr0: f64,
    pub max_steps: usize,
    pub lr_decay: f64,
    pub lr_step: usize,
    /// WS window length; `None` means [`TrainConfig::default_window`].
    pub window_length: Option<usize>,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(scheme: Scheme, model: ModelSpec) -> Self {
        Self {
            scheme,
            model,
            batch_size: 8,
            lr0: 0.001,
            max_steps: 30_000,
            lr_decay: 0.1,
            lr_step: 10_000,
            window_length: None,
            optimizer: Optimizer::Sgd,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.lr_step == 0 {
            return Err(Error::Config("batch_size, max_steps and lr_step must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr0 and lr_decay must be positive".into()));
        }
        if self.window_length == Some(0) {
            return Err(Error::Config("window_length must be positive".into()));
        }
        Ok(())
    }

    /// `max(receptive_field, 2H)`, or `2H` for unbounded receptive fields.
    pub fn default_window(receptive_field: Option<usize>, horizon: usize) -> usize {
        receptive_field.unwrap_or(0).max(2 * horizon)
    }
}

/// `lr0 * decay^floor(step / lr_step)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((step / cfg.lr_step) as i32)
}

/// `max(q (y - yhat), (q - 1)(y - yhat))`.
pub fn pinball(y: f64, yhat: f64, q: f64) -> f64 {
    let d = y - yhat;
    (q * d).max((q - 1.0) * d)
}

/// Mean pinball loss over masked `(b, t, h)` cells and all quantiles.
///
/// `targets` and `mask` are `(B, T, H)` row-major, aligned with `grid`.
pub fn fs_loss(grid: &ForecastGrid, targets: &[f64], mask: &[bool], quantiles: &[f64]) -> Result<f64> {
    let cells = grid.num_series() * grid.n_fcd * grid.horizon;
    if targets.len() != cells || mask.len() != cells || quantiles.len() != grid.num_quantiles() {
        return Err(shape_err("fs_loss: targets, mask and grid disagree"));
    }
    let nq = quantiles.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&y, _)) in targets.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        let preds = &grid.values[i * nq..(i + 1) * nq];
        for (&p, &q) in preds.iter().zip(quantiles) {
            total += pinball(y, p, q);
        }
        count += nq;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrajectory {
    pub records: Vec<TrajectoryRecord>,
}

impl LossTrajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// First step whose loss is at most `threshold`.
    pub fn first_step_below(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.loss <= threshold).map(|r| r.step)
    }

    /// CSV `step,loss,lr,grad_norm`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss", "lr", "grad_norm"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                format!("{:?}", r.loss),
                format!("{:?}", r.lr),
                format!("{:?}", r.grad_norm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let f = |c: usize| -> Result<f64> {
                rec.get(c).and_then(|s| s.parse().ok()).ok_or(Error::Parse {
                    line: i + 2,
                    msg: format!("column {c}"),
                })
            };
            records.push(TrajectoryRecord {
                step: f(0)? as usize,
                loss: f(1)?,
                lr: f(2)?,
                grad_norm: f(3)?,
            });
        }
        Ok(Self { records })
    }
}

/// Training view of a (scaled) panel: values, train boundaries and static
/// covariates per series.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub series: Vec<Vec<f64>>,
    /// 1-based inclusive end of the train segment per series.
    pub train_end: Vec<usize>,
    pub static_covs: Vec<Option<Vec<f64>>>,
    pub horizon: usize,
}

impl TrainData {
    pub fn from_panel(panel: &TimeSeriesPanel, splits: &[SplitSpec]) -> Result<Self> {
        if splits.len() != panel.len() {
            return Err(Error::Contract("one split per series required".into()));
        }
        Ok(Self {
            series: panel.series.iter().map(|s| s.values.clone()).collect(),
            train_end: splits.iter().map(|s| s.train_end).collect(),
            static_covs: panel.series.iter().map(|s| s.static_covariate.clone()).collect(),
            horizon: panel.horizon(),
        })
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

/// Which FCDs of each series enter the forking-sequences loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FcdSelection {
    /// Smallest 1-based FCD used.
    pub min_fcd: usize,
    /// Keep only FCDs whose whole horizon lies in the train segment.
    pub full_horizon: bool,
}

impl Default for FcdSelection {
    fn default() -> Self {
        Self {
            min_fcd: 1,
            full_horizon: false,
        }
    }
}

/// Forking-sequences loss of the given series: each series is encoded once
/// and every selected FCD contributes its masked multi-horizon pinball terms.
pub fn fs_loss_var<M: Forecaster>(
    model: &M,
    tape: &mut Tape,
    store: &ParamStore,
    data: &TrainData,
    series: &[usize],
    sel: FcdSelection,
) -> Result<Var> {
    let h = model.horizon();
    let nq = model.quantiles().len();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    let mut rows = 0;
    for &b in series {
        let values = &data.series[b];
        let end = data.train_end[b];
        let last_fcd = if sel.full_horizon {
            end.saturating_sub(h)
        } else {
            end.saturating_sub(1)
        };
        let first_fcd = sel.min_fcd.max(1);
        if last_fcd < first_fcd {
            continue;
        }
        let count = last_fcd - first_fcd + 1;
        let p = model.forward_rows(
            tape,
            store,
            &values[..last_fcd],
            first_fcd - 1,
            count,
            data.static_covs[b].as_deref(),
        )?;
        preds.push(p);
        for t in first_fcd..=last_fcd {
            for k in 1..=h {
                let inside = t + k <= end;
                targets.push(if inside { values[t + k - 1] } else { 0.0 });
                mask.extend(std::iter::repeat_n(inside, nq));
            }
        }
        rows += count;
    }
    if preds.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let yhat = if preds.len() == 1 {
        preds[0]
    } else {
        tape.concat_rows(&preds)?
    };
    let y = Tensor::matrix(rows, h, targets);
    let pin = tape.pinball_elem(&y, yhat, model.quantiles())?;
    tape.masked_mean(pin, &mask)
}

/// One window-sampling training example.
#[derive(Clone, Debug, PartialEq)]
pub struct WsExample {
    pub series: usize,
    /// 1-based FCD; the window ends at this position.
    pub fcd: usize,
    pub window: Vec<f64>,
    pub target: Vec<f64>,
}

/// Uniform sampler over the pooled valid `(series, FCD)` pairs:
/// `L <= t` and `t + H <= train_end`.
#[derive(Clone, Debug)]
pub struct WsSampler {
    window: usize,
    pairs: Vec<(usize, usize)>,
}

impl WsSampler {
    pub fn new(data: &TrainData, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Sampler("window length must be positive".into()));
        }
        let mut pairs = Vec::new();
        for (b, &end) in data.train_end.iter().enumerate() {
            if end >= data.horizon {
                for t in window..=end - data.horizon {
                    pairs.push((b, t));
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::Sampler(format!(
                "no FCD admits a window of length {window} and a full horizon"
            )));
        }
        Ok(Self { window, pairs })
    }

    /// Valid `(series, FCD)` pairs in series-then-FCD order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn example(&self, data: &TrainData, b: usize, t: usize) -> WsExample {
        let v = &data.series[b];
        WsExample {
            series: b,
            fcd: t,
            window: v[t - self.window..t].to_vec(),
            target: v[t..t + data.horizon].to_vec(),
        }
    }

    /// Draw `batch_size` examples uniformly with replacement.
    pub fn sample(&self, data: &TrainData, batch_size: usize, rng: &mut impl Rng) -> Vec<WsExample> {
        (0..batch_size)
            .map(|_| {
                let (b, t) = self.pairs[rng.random_range(0..self.pairs.len())];
                self.example(data, b, t)
            })
            .collect()
    }
}

pub fn ws_sample(
    data: &TrainData,
    window: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<WsExample>> {
    Ok(WsSampler::new(data, window)?.sample(data, batch_size, rng))
}

/// Mean pinball loss over independently encoded windows.
pub fn ws_loss_var<M: Forecaster>(
    model: &M,
    tape: &mut Tape,
    store: &ParamStore,
    data: &TrainData,
    batch: &[WsExample],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let h = model.horizon();
    let mut preds = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * h);
    for ex in batch {
        preds.push(model.forward_window(
            tape,
            store,
            &ex.window,
            data.static_covs[ex.series].as_deref(),
        )?);
        targets.extend_from_slice(&ex.target);
    }
    let yhat = if preds.len() == 1 {
        preds[0]
    } else {
        tape.concat_rows(&preds)?
    };
    let y = Tensor::matrix(batch.len(), h, targets);
    let pin = tape.pinball_elem(&y, yhat, model.quantiles())?;
    let mask = vec![true; tape.value(pin).len()];
    tape.masked_mean(pin, &mask)
}

#[derive(Clone, Debug)]
struct AdamState {
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn optimizer_step(
    store: &mut ParamStore,
    opt: Optimizer,
    state: &mut Option<AdamState>,
    lr: f64,
) {
    match opt {
        Optimizer::Sgd => store.sgd_step(lr),
        Optimizer::Adam { beta1, beta2, eps } => {
            let st = state.get_or_insert_with(|| AdamState {
                t: 0,
                m: Vec::new(),
                v: Vec::new(),
            });
            st.t += 1;
            let (c1, c2) = (1.0 - beta1.powi(st.t), 1.0 - beta2.powi(st.t));
            store.update_each(|i, value, grad| {
                if st.m.len() <= i {
                    st.m.push(vec![0.0; grad.len()]);
                    st.v.push(vec![0.0; grad.len()]);
                }
                let (m, v) = (&mut st.m[i], &mut st.v[i]);
                for j in 0..grad.len() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
                    value[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                }
            });
        }
    }
}

/// Train `model` in place. The trajectory has one record per step.
pub fn train_model<M: Forecaster>(
    model: &M,
    store: &mut ParamStore,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<LossTrajectory> {
    cfg.validate()?;
    if data.horizon != model.horizon() {
        return Err(Error::Contract("data and model horizons differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let window = cfg
        .window_length
        .unwrap_or_else(|| TrainConfig::default_window(model.receptive_field(), model.horizon()));
    let sampler = match cfg.scheme {
        Scheme::Ws => Some(WsSampler::new(data, window)?),
        Scheme::Fs => None,
    };
    let mut trajectory = LossTrajectory::default();
    let mut adam = None;
    for step in 0..cfg.max_steps {
        let lr = lr_at(step, cfg);
        store.zero_grads();
        let mut tape = Tape::new().with_dropout_seed(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step as u64);
        let loss = match &sampler {
            None => {
                let n = data.len();
                let mut picked = if cfg.batch_size >= n {
                    (0..n).collect::<Vec<_>>()
                } else {
                    sample(&mut rng, n, cfg.batch_size).into_vec()
                };
                picked.sort_unstable();
                fs_loss_var(model, &mut tape, store, data, &picked, FcdSelection::default())?
            }
            Some(s) => {
                let batch = s.sample(data, cfg.batch_size, &mut rng);
                ws_loss_var(model, &mut tape, store, data, &batch)?
            }
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                trajectory: Box::new(trajectory),
            });
        }
        tape.backward(loss, store)?;
        let grad_norm = store.grad_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step,
                trajectory: Box::new(trajectory),
            });
        }
        optimizer_step(store, cfg.optimizer, &mut adam, lr);
        trajectory.records.push(TrajectoryRecord {
            step,
            loss: value,
            lr,
            grad_norm,
        });
    }
    Ok(trajectory)
}

/// Build the encoder-decoder model of `cfg` and train it on a scaled panel.
pub fn train(
    panel: &TimeSeriesPanel,
    cfg: &TrainConfig,
) -> Result<(MqForecaster, ParamStore, LossTrajectory)> {
    let splits = panel.splits()?;
    let data = TrainData::from_panel(panel, &splits)?;
    let (model, mut store) = MqForecaster::new(cfg.model.clone(), cfg.seed)?;
    let trajectory = train_model(&model, &mut store, &data, cfg)?;
    Ok((model, store, trajectory))
}
