//! Ensembling of forecasts that target the same date from different FCDs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::decoder::ForecastGrid;
use crate::error::{Error, Result};

/// All `(t, h)` with `t + h = target`, `h >= min_horizon`, `1 <= t <= T`,
/// `1 <= h <= H`, ordered by `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AvailableSet {
    pub target: usize,
    pub min_horizon: usize,
    pub members: Vec<(usize, usize)>,
}

pub fn available_set(target: usize, min_horizon: usize, t_len: usize, horizon: usize) -> AvailableSet {
    let eta = min_horizon.max(1);
    let mut members = Vec::new();
    if target > eta && eta <= horizon {
        let lo = target.saturating_sub(horizon).max(1);
        let hi = (target - eta).min(t_len);
        for t in lo..=hi {
            members.push((t, target - t));
        }
    }
    AvailableSet {
        target,
        min_horizon,
        members,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnsembleMethod {
    MovingAverage,
    MovingMedian,
    CumulativeAverage,
}

impl fmt::Display for EnsembleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleMethod::MovingAverage => "moving_average",
            EnsembleMethod::MovingMedian => "moving_median",
            EnsembleMethod::CumulativeAverage => "cumulative_average",
        })
    }
}

impl FromStr for EnsembleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving_average" => Ok(EnsembleMethod::MovingAverage),
            "moving_median" => Ok(EnsembleMethod::MovingMedian),
            "cumulative_average" => Ok(EnsembleMethod::CumulativeAverage),
            other => Err(Error::Config(format!("unknown ensemble method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnsembleSpec {
    pub method: EnsembleMethod,
    /// Most recent FCDs considered; `None` is unbounded.
    pub window: Option<usize>,
}

impl EnsembleSpec {
    /// Moving average over the last `H` FCDs.
    pub fn default_for(horizon: usize) -> Self {
        Self {
            method: EnsembleMethod::MovingAverage,
            window: Some(horizon),
        }
    }

    pub fn new(method: EnsembleMethod, window: Option<usize>) -> Result<Self> {
        let window = match method {
            EnsembleMethod::CumulativeAverage => None,
            _ => match window {
                Some(w) if w >= 1 => Some(w),
                _ => return Err(Error::Config("rolling ensembles need window >= 1".into())),
            },
        };
        Ok(Self { method, window })
    }

    /// Sidecar `key=value` description.
    pub fn write_sidecar(&self, path: &Path, min_horizon: usize) -> Result<()> {
        let window = self.window.map_or("unbounded".to_string(), |w| w.to_string());
        std::fs::write(
            path,
            format!(
                "method={}\nwindow={window}\nmin_horizon={min_horizon}\n",
                self.method
            ),
        )?;
        Ok(())
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ensemble forecasts across FCDs within the grid.
///
/// Cell `(t, h)` with `h >= min_horizon` becomes the aggregate of every grid
/// forecast for the same target date `t + h` issued at horizon `h' >= h`
/// (hence at an FCD `t' <= t`), limited to the most recent `window` FCDs.
/// Cells with `h < min_horizon` are copied unchanged. Only forecasts inside
/// the grid are used, so test ensembles never mix in other phases.
pub fn ensemble(grid: &ForecastGrid, spec: &EnsembleSpec, min_horizon: usize) -> ForecastGrid {
    let mut out = grid.clone();
    let (t_len, h_len, nq) = (grid.n_fcd, grid.horizon, grid.num_quantiles());
    let mut buf = Vec::with_capacity(h_len);
    for b in 0..grid.num_series() {
        for t in 1..=t_len {
            for h in min_horizon.max(1)..=h_len {
                let set = available_set(t + h, h, t_len, h_len);
                let members: Vec<(usize, usize)> = set
                    .members
                    .into_iter()
                    .filter(|&(tm, _)| spec.window.is_none_or(|w| tm + w > t))
                    .collect();
                if members.is_empty() {
                    continue;
                }
                for q in 0..nq {
                    buf.clear();
                    buf.extend(members.iter().map(|&(tm, hm)| grid.get(b, tm - 1, hm - 1, q)));
                    let v = match spec.method {
                        EnsembleMethod::MovingMedian => median(&mut buf),
                        _ => buf.iter().sum::<f64>() / buf.len() as f64,
                    };
                    out.set(b, t - 1, h - 1, q, v);
                }
            }
        }
    }
    out
}
