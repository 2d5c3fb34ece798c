//! Panel time-series data: loading, synthesis, temporal splits, masking and
//! standard scaling.
//!
//! Series positions are 1-based in every public index (`SplitSpec`, FCDs,
//! target masks), matching how forecast creation dates are usually quoted.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Frequency metadata for a panel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyMeta {
    pub name: String,
    pub seasonality: usize,
    pub horizon: usize,
}

/// Seasonality and horizon of the competition frequencies.
const NAMED_FREQUENCIES: &[(&str, usize, usize)] = &[
    ("Hourly", 24, 48),
    ("Daily", 1, 14),
    ("Weekly", 1, 13),
    ("Monthly", 12, 18),
    ("Quarterly", 4, 8),
    ("Yearly", 1, 6),
    ("Other", 4, 8),
];

impl FrequencyMeta {
    pub fn new(name: &str, seasonality: usize, horizon: usize) -> Result<Self> {
        if seasonality == 0 || horizon == 0 {
            return Err(Error::Config("seasonality and horizon must be positive".into()));
        }
        Ok(Self {
            name: name.to_string(),
            seasonality,
            horizon,
        })
    }

    /// Look up a competition frequency by name (case-insensitive).
    pub fn named(name: &str) -> Option<Self> {
        NAMED_FREQUENCIES
            .iter()
            .find(|(n, _, _)| n.eq_ignore_ascii_case(name))
            .map(|&(n, s, h)| Self {
                name: n.to_string(),
                seasonality: s,
                horizon: h,
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesRecord {
    pub id: String,
    pub values: Vec<f64>,
    pub static_covariate: Option<Vec<f64>>,
    /// Original `ds` labels, one per value (kept for lossless write-back).
    pub timestamps: Vec<String>,
}

impl SeriesRecord {
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Self {
        let timestamps = (1..=values.len()).map(|i| i.to_string()).collect();
        Self {
            id: id.into(),
            values,
            static_covariate: None,
            timestamps,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A collection of univariate series sharing one frequency.
///
/// Future-known covariates are not modelled; static covariates are optional.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesPanel {
    pub series: Vec<SeriesRecord>,
    pub frequency: FrequencyMeta,
}

impl TimeSeriesPanel {
    pub fn new(series: Vec<SeriesRecord>, frequency: FrequencyMeta) -> Result<Self> {
        let mut seen = HashMap::new();
        for s in &series {
            if seen.insert(s.id.clone(), ()).is_some() {
                return Err(Error::Format(format!("duplicate series id `{}`", s.id)));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("series `{}` has non-finite values", s.id)));
            }
        }
        Ok(Self { series, frequency })
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.frequency.horizon
    }

    /// One split per series. Fails if any series is shorter than `3H+1`.
    pub fn splits(&self) -> Result<Vec<SplitSpec>> {
        self.series
            .iter()
            .map(|s| temporal_split(s.len(), self.horizon()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LoadStatus {
    Accepted,
    Dropped,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub entries: Vec<(String, LoadStatus, String)>,
}

impl LoadReport {
    pub fn dropped(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, s, _)| *s == LoadStatus::Dropped)
            .count()
    }

    /// `unique_id,status,reason`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["unique_id", "status", "reason"])?;
        for (id, status, reason) in &self.entries {
            let s = match status {
                LoadStatus::Accepted => "accepted",
                LoadStatus::Dropped => "dropped",
            };
            w.write_record([id.as_str(), s, reason.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, PartialOrd)]
enum DsKey {
    Index(i64),
    Time(NaiveDateTime),
}

fn parse_ds(s: &str) -> Option<DsKey> {
    let s = s.trim();
    if let Ok(i) = s.parse::<i64>() {
        return Some(DsKey::Index(i));
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return d.and_hms_opt(0, 0, 0).map(DsKey::Time);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(DsKey::Time(dt));
        }
    }
    None
}

/// Minimum length accepted at load time for horizon `h`.
pub fn min_load_length(h: usize) -> usize {
    2 * h + 1
}

/// Read a long-format `unique_id,ds,y` CSV.
///
/// Series shorter than `2H+1` are dropped and listed in the report.
pub fn load_long_panel(path: &Path, meta: FrequencyMeta) -> Result<(TimeSeriesPanel, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column `{name}`")))
    };
    let (ci, cd, cy) = (col("unique_id")?, col("ds")?, col("y")?);

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(DsKey, String, f64)>> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let field = |c: usize| {
            record.get(c).ok_or_else(|| Error::Parse {
                line,
                msg: "short row".into(),
            })
        };
        let id = field(ci)?.to_string();
        let ds_raw = field(cd)?.to_string();
        let ds = parse_ds(&ds_raw).ok_or_else(|| Error::Parse {
            line,
            msg: format!("unparseable ds `{ds_raw}`"),
        })?;
        let y_raw = field(cy)?;
        let y: f64 = y_raw.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("non-numeric y `{y_raw}`"),
        })?;
        if !y.is_finite() {
            return Err(Error::Parse {
                line,
                msg: format!("non-finite y `{y_raw}`"),
            });
        }
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        entry.push((ds, ds_raw, y));
    }

    let min_len = min_load_length(meta.horizon);
    let mut series = Vec::new();
    let mut report = LoadReport::default();
    for id in order {
        let mut obs = rows.remove(&id).expect("grouped id");
        let mut mixed = false;
        obs.sort_by(|a, b| {
            a.0.partial_cmp(&b.0).unwrap_or_else(|| {
                mixed = true;
                Ordering::Equal
            })
        });
        if mixed {
            return Err(Error::Format(format!(
                "series `{id}` mixes integer and date timestamps"
            )));
        }
        if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Duplicate {
                id,
                ds: w[1].1.clone(),
            });
        }
        if obs.len() < min_len {
            report.entries.push((
                id,
                LoadStatus::Dropped,
                format!("length {} < {}", obs.len(), min_len),
            ));
            continue;
        }
        report
            .entries
            .push((id.clone(), LoadStatus::Accepted, String::new()));
        series.push(SeriesRecord {
            id,
            values: obs.iter().map(|o| o.2).collect(),
            static_covariate: None,
            timestamps: obs.into_iter().map(|o| o.1).collect(),
        });
    }
    Ok((TimeSeriesPanel::new(series, meta)?, report))
}

/// Write a panel back out as `unique_id,ds,y`.
pub fn write_long_panel(panel: &TimeSeriesPanel, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["unique_id", "ds", "y"])?;
    for s in &panel.series {
        for (ds, y) in s.timestamps.iter().zip(&s.values) {
            w.write_record([s.id.as_str(), ds.as_str(), format!("{y:?}").as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Train / validation / test boundaries, 1-based and inclusive.
///
/// Train is `1..=train_end`, validation `train_end+1..=val_end` (length H),
/// test `val_end+1..=series_end` (length 2H).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_end: usize,
    pub val_end: usize,
    pub series_end: usize,
    pub horizon: usize,
}

impl SplitSpec {
    /// FCDs of the test phase: `H` consecutive dates, each with a full
    /// `H`-step target window.
    pub fn test_fcds(&self) -> std::ops::RangeInclusive<usize> {
        self.val_end + 1..=self.series_end - self.horizon
    }
}

pub fn temporal_split(series_length: usize, horizon: usize) -> Result<SplitSpec> {
    let needed = 3 * horizon + 1;
    if horizon == 0 || series_length < needed {
        return Err(Error::SeriesTooShort {
            length: series_length,
            horizon,
            needed,
        });
    }
    Ok(SplitSpec {
        train_end: series_length - 3 * horizon,
        val_end: series_length - 2 * horizon,
        series_end: series_length,
        horizon,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Validation,
    Test,
}

/// Boolean grid over `(t, h)`, `t in 1..=len`, `h in 1..=horizon`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMask {
    len: usize,
    horizon: usize,
    cells: Vec<bool>,
}

impl TargetMask {
    pub fn new(len: usize, horizon: usize) -> Self {
        Self {
            len,
            horizon,
            cells: vec![false; len * horizon],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn get(&self, t: usize, h: usize) -> bool {
        t >= 1 && h >= 1 && t <= self.len && h <= self.horizon && self.cells[(t - 1) * self.horizon + h - 1]
    }

    pub fn set(&mut self, t: usize, h: usize, v: bool) {
        self.cells[(t - 1) * self.horizon + h - 1] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Row-major `(t, h)` cells, `t` slowest.
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
}

/// Target mask for one phase of a split.
///
/// `(t, h)` is true iff FCD `t` lies in the phase's FCD range and the target
/// `t + h` stays inside the phase (never in a later one).
pub fn build_target_mask(split: &SplitSpec, len: usize, horizon: usize, phase: Phase) -> TargetMask {
    let (first, last, target_end) = match phase {
        Phase::Train => (1, split.train_end, split.train_end),
        Phase::Validation => (split.train_end + 1, split.val_end, split.val_end),
        Phase::Test => (
            split.val_end + 1,
            split.series_end.saturating_sub(split.horizon),
            split.series_end,
        ),
    };
    let mut mask = TargetMask::new(len, horizon);
    for t in first..=last.min(len) {
        for h in 1..=horizon {
            if t + h <= target_end.min(len) {
                mask.set(t, h, true);
            }
        }
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleParams {
    pub mean: f64,
    pub std: f64,
}

impl ScaleParams {
    /// Population mean and std of `train`; a degenerate std
    /// (`<= 1e-8 * |mean| + 1e-8`) is replaced by 1.
    pub fn fit(train: &[f64]) -> Self {
        let n = train.len() as f64;
        let mean = train.iter().sum::<f64>() / n;
        let var = train.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let std = if std <= 1e-8 * mean.abs() + 1e-8 { 1.0 } else { std };
        Self { mean, std }
    }

    pub fn scale(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn unscale(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Standardize each series with statistics of its own train segment.
pub fn standard_scale(
    panel: &TimeSeriesPanel,
    splits: &[SplitSpec],
) -> Result<(TimeSeriesPanel, Vec<ScaleParams>)> {
    if splits.len() != panel.len() {
        return Err(Error::Contract("one split per series required".into()));
    }
    let mut out = panel.clone();
    let mut params = Vec::with_capacity(panel.len());
    for (s, split) in out.series.iter_mut().zip(splits) {
        if split.train_end == 0 || split.train_end > s.len() {
            return Err(Error::Contract(format!("empty train segment for `{}`", s.id)));
        }
        let p = ScaleParams::fit(&s.values[..split.train_end]);
        for v in &mut s.values {
            *v = p.scale(*v);
        }
        params.push(p);
    }
    Ok((out, params))
}

/// Synthetic panel: level + linear trend + sinusoidal seasonality + Gaussian
/// noise, fully determined by `seed`.
///
/// The horizon comes from the competition frequency with the same seasonality
/// (12 -> 18, 4 -> 8, 24 -> 48), otherwise it equals the seasonality.
pub fn synthesize_panel(
    n_series: usize,
    length: usize,
    seasonality: usize,
    noise_std: f64,
    seed: u64,
) -> TimeSeriesPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("valid std");
    let period = seasonality.max(1) as f64;
    let series = (0..n_series)
        .map(|i| {
            let level = rng.random_range(10.0..20.0);
            let slope = rng.random_range(-0.02..0.06);
            let amp = if seasonality > 1 {
                rng.random_range(1.0..4.0)
            } else {
                0.0
            };
            let phase = rng.random_range(0.0..2.0 * PI);
            let values = (0..length)
                .map(|t| {
                    let t = t as f64;
                    let e = if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    level + slope * t + amp * (2.0 * PI * t / period + phase).sin() + e
                })
                .collect();
            SeriesRecord::new(format!("S{i:04}"), values)
        })
        .collect();
    let (name, horizon) = match seasonality {
        12 => ("Monthly", 18),
        4 => ("Quarterly", 8),
        24 => ("Hourly", 48),
        s => ("Synthetic", s.max(1)),
    };
    TimeSeriesPanel {
        series,
        frequency: FrequencyMeta {
            name: name.to_string(),
            seasonality: seasonality.max(1),
            horizon,
        },
    }
}
