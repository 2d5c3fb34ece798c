//! Forecast accuracy and stability metrics.
//!
//! Targets and masks are `(B, T, H)` row-major arrays aligned with a
//! [`ForecastGrid`] (see [`ForecastGrid::targets_from`]).

use std::collections::BTreeMap;
use std::path::Path;

use crate::decoder::ForecastGrid;
use crate::error::{shape_err, Error, Result};
use crate::training::pinball;

/// `(2 / |Q|) * sum_q pinball(y, yhat_q, q)`.
pub fn crps_from_quantiles(y: f64, yhat_q: &[f64], quantiles: &[f64]) -> f64 {
    let s: f64 = yhat_q
        .iter()
        .zip(quantiles)
        .map(|(&p, &q)| pinball(y, p, q))
        .sum();
    2.0 * s / quantiles.len() as f64
}

fn check_aligned(targets: &[f64], grid: &ForecastGrid, mask: &[bool]) -> Result<()> {
    let n = grid.num_series() * grid.n_fcd * grid.horizon;
    if targets.len() != n || mask.len() != n {
        return Err(shape_err(format!(
            "targets/mask of length {}/{} for a grid with {n} cells",
            targets.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// Metric value together with the number of summed terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub n_terms: usize,
}

/// Summed CRPS over masked cells divided by summed `|y|`.
pub fn scrps(targets: &[f64], grid: &ForecastGrid, mask: &[bool]) -> Result<MetricValue> {
    check_aligned(targets, grid, mask)?;
    let nq = grid.num_quantiles();
    let (mut num, mut den, mut n) = (0.0, 0.0, 0);
    for (i, (&y, _)) in targets.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        num += crps_from_quantiles(y, &grid.values[i * nq..(i + 1) * nq], &grid.quantiles);
        den += y.abs();
        n += 1;
    }
    if n == 0 || den == 0.0 {
        return Err(Error::UndefinedMetric("sCRPS needs a non-zero target".into()));
    }
    Ok(MetricValue {
        value: num / den,
        n_terms: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SqpcNormalization {
    /// Divide by the number of summed terms, `B (T-1) (H-1)`.
    #[default]
    ValidTerms,
    /// Divide by `B T H` as written in the original formula.
    Literal,
}

/// Symmetric percentage revision between consecutive FCDs for quantile `q`:
/// `200/N * sum |yhat_{t+1,h} - yhat_{t,h+1}| / (|yhat_{t+1,h}| + |yhat_{t,h+1}|)`.
/// Terms with a zero denominator contribute 0.
pub fn sqpc(grid: &ForecastGrid, q: f64) -> Result<MetricValue> {
    sqpc_with(grid, q, SqpcNormalization::ValidTerms)
}

pub fn sqpc_with(grid: &ForecastGrid, q: f64, norm: SqpcNormalization) -> Result<MetricValue> {
    let qi = grid
        .quantile_index(q)
        .ok_or_else(|| Error::UndefinedMetric(format!("grid has no quantile {q}")))?;
    if grid.n_fcd < 2 || grid.horizon < 2 || grid.num_series() == 0 {
        return Err(Error::UndefinedMetric("sQPC needs T >= 2 and H >= 2".into()));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for b in 0..grid.num_series() {
        for t in 0..grid.n_fcd - 1 {
            for h in 0..grid.horizon - 1 {
                let a = grid.get(b, t + 1, h, qi);
                let c = grid.get(b, t, h + 1, qi);
                let den = a.abs() + c.abs();
                if den > 0.0 {
                    sum += (a - c).abs() / den;
                }
                n += 1;
            }
        }
    }
    let denom = match norm {
        SqpcNormalization::ValidTerms => n,
        SqpcNormalization::Literal => grid.num_series() * grid.n_fcd * grid.horizon,
    };
    Ok(MetricValue {
        value: 200.0 * sum / denom as f64,
        n_terms: n,
    })
}

/// Mean absolute error of the median forecast over masked cells.
pub fn mae(targets: &[f64], grid: &ForecastGrid, mask: &[bool]) -> Result<MetricValue> {
    check_aligned(targets, grid, mask)?;
    let qi = grid
        .quantile_index(0.5)
        .ok_or_else(|| Error::UndefinedMetric("MAE needs the 0.5 quantile".into()))?;
    let nq = grid.num_quantiles();
    let (mut sum, mut n) = (0.0, 0);
    for (i, (&y, _)) in targets.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        sum += (y - grid.values[i * nq + qi]).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("MAE over an empty mask".into()));
    }
    Ok(MetricValue {
        value: sum / n as f64,
        n_terms: n,
    })
}

/// One metric of one evaluated run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub frequency: String,
    pub model: String,
    pub scheme: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub n_terms: usize,
}

/// Per-seed metric rows with mean/stderr aggregation over seeds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// Aggregated `(dataset, frequency, model, scheme, metric)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub key: [String; 5],
    pub mean: f64,
    /// Standard error of the mean; `None` for a single seed.
    pub stderr: Option<f64>,
    pub n_seeds: usize,
}

impl EvalReport {
    pub fn push(&mut self, row: EvalRow) {
        self.rows.push(row);
    }

    pub fn summarize(&self) -> Vec<EvalSummary> {
        let mut groups: BTreeMap<[String; 5], Vec<f64>> = BTreeMap::new();
        let mut order = Vec::new();
        for r in &self.rows {
            let key = [
                r.dataset.clone(),
                r.frequency.clone(),
                r.model.clone(),
                r.scheme.clone(),
                r.metric.clone(),
            ];
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r.value);
        }
        order
            .into_iter()
            .map(|key| {
                let v = &groups[&key];
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n as f64;
                let stderr = (n > 1).then(|| {
                    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                    (var / n as f64).sqrt()
                });
                EvalSummary {
                    key,
                    mean,
                    stderr,
                    n_seeds: n,
                }
            })
            .collect()
    }

    /// Mean of one `(model, scheme, metric)` over datasets and seeds.
    pub fn mean_of(&self, model: &str, scheme: &str, metric: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.model == model && r.scheme == scheme && r.metric == metric)
            .map(|r| r.value)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `dataset,frequency,model,scheme,metric,mean,stderr`
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["dataset", "frequency", "model", "scheme", "metric", "mean", "stderr"])?;
        for s in self.summarize() {
            let mut rec: Vec<String> = s.key.to_vec();
            rec.push(format!("{:?}", s.mean));
            rec.push(s.stderr.map_or(String::new(), |e| format!("{e:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `dataset,frequency,model,scheme,seed,metric,value,n_terms`
    pub fn write_per_seed_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "dataset", "frequency", "model", "scheme", "seed", "metric", "value", "n_terms",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                r.frequency.clone(),
                r.model.clone(),
                r.scheme.clone(),
                r.seed.to_string(),
                r.metric.clone(),
                format!("{:?}", r.value),
                r.n_terms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(b: usize, t: usize, h: usize, q: Vec<f64>, values: Vec<f64>) -> ForecastGrid {
        let mut g = ForecastGrid::zeros(
            (0..b).map(|i| i.to_string()).collect(),
            vec![1; b],
            t,
            h,
            q,
        );
        g.values = values;
        g
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_from_quantiles(2.0, &[0.0], &[0.5]), 2.0);
        assert_eq!(crps_from_quantiles(1.0, &[1.0, 1.0], &[0.1, 0.9]), 0.0);
    }

    #[test]
    fn sqpc_examples() {
        // One series, T=2, H=2: the single term compares (t=1,h=0) with (t=0,h=1).
        let g = grid(1, 2, 2, vec![0.5], vec![0.0, 1.0, 3.0, 0.0]);
        assert_eq!(sqpc(&g, 0.5).unwrap().value, 100.0);
        let z = grid(1, 2, 2, vec![0.5], vec![0.0; 4]);
        assert_eq!(sqpc(&z, 0.5).unwrap().value, 0.0);
        let lit = sqpc_with(&g, 0.5, SqpcNormalization::Literal).unwrap();
        assert_eq!(lit.value, 25.0);
        let short = grid(1, 1, 2, vec![0.5], vec![0.0; 2]);
        assert!(matches!(sqpc(&short, 0.5), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn mae_example() {
        let g = grid(1, 1, 2, vec![0.5], vec![1.0, 1.0]);
        assert_eq!(mae(&[0.0, 2.0], &g, &[true, true]).unwrap().value, 1.0);
        assert!(mae(&[0.0, 2.0], &g, &[false, false]).is_err());
    }

    #[test]
    fn scrps_all_zero_targets_is_undefined() {
        let g = grid(1, 1, 1, vec![0.5], vec![1.0]);
        assert!(matches!(scrps(&[0.0], &g, &[true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn summary_stderr() {
        let mut r = EvalReport::default();
        for (seed, v) in [(1, 1.0), (2, 3.0)] {
            r.push(EvalRow {
                dataset: "d".into(),
                frequency: "Monthly".into(),
                model: "cnn".into(),
                scheme: "fs".into(),
                seed,
                metric: "scrps".into(),
                value: v,
                n_terms: 4,
            });
        }
        let s = r.summarize();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean, 2.0);
        assert!((s[0].stderr.unwrap() - 1.0).abs() < 1e-12);
        r.rows.truncate(1);
        assert_eq!(r.summarize()[0].stderr, None);
    }
}
