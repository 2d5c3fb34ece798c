//! Multi-quantile decoder and the forecast grid it produces.

use std::path::Path;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::encoders::Linear;
use crate::error::{shape_err, Error, Result};
use crate::panel::ScaleParams;

pub const DEFAULT_QUANTILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSpec {
    pub agnostic_dim: usize,
    pub specific_dim: usize,
    pub horizon: usize,
    pub quantiles: Vec<f64>,
    /// Width of the optional static covariate appended to the trunk input.
    pub static_dim: usize,
}

impl DecoderSpec {
    pub fn new(horizon: usize) -> Self {
        Self {
            agnostic_dim: 100,
            specific_dim: 20,
            horizon,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            static_dim: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agnostic_dim == 0 || self.specific_dim == 0 || self.horizon == 0 {
            return Err(Error::Config("decoder dimensions and horizon must be positive".into()));
        }
        validate_quantiles(&self.quantiles)
    }

    pub fn num_quantiles(&self) -> usize {
        self.quantiles.len()
    }

    /// Index of the median in the quantile list, if present.
    pub fn median_index(&self) -> Option<usize> {
        self.quantiles.iter().position(|&q| (q - 0.5).abs() < 1e-12)
    }
}

pub fn validate_quantiles(quantiles: &[f64]) -> Result<()> {
    if quantiles.is_empty()
        || quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0))
        || quantiles.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::Config(format!(
            "quantiles must be strictly increasing in (0,1): {quantiles:?}"
        )));
    }
    Ok(())
}

/// Horizon-agnostic trunk followed by a local layer shared across horizons.
///
/// The trunk maps each hidden row to an agnostic context of width
/// `agnostic_dim` and one context of width `specific_dim` per horizon. The
/// local layer maps `[agnostic, specific_h]` to the `Q` quantiles of horizon
/// `h`. Output rows are `H*Q` wide with the quantile axis fastest.
#[derive(Clone, Debug)]
pub struct Decoder {
    spec: DecoderSpec,
    input_dim: usize,
    trunk: Linear,
    local: Linear,
}

impl Decoder {
    pub fn new(spec: DecoderSpec, hidden_dim: usize, store: &mut ParamStore) -> Result<Self> {
        spec.validate()?;
        let input_dim = hidden_dim + spec.static_dim;
        let trunk = Linear::new(
            store,
            "dec.trunk",
            input_dim,
            spec.agnostic_dim + spec.horizon * spec.specific_dim,
        )?;
        let local = Linear::new(
            store,
            "dec.local",
            spec.agnostic_dim + spec.specific_dim,
            spec.num_quantiles(),
        )?;
        Ok(Self {
            spec,
            input_dim,
            trunk,
            local,
        })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    /// Decode every row of `hs` (`R x d_h`); `static_cov` is appended to each.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        hs: Var,
        static_cov: Option<&[f64]>,
    ) -> Result<Var> {
        let rows = tape.value(hs).rows();
        let input = match (static_cov, self.spec.static_dim) {
            (None, 0) => hs,
            (Some(s), n) if s.len() == n && n > 0 => {
                let data: Vec<f64> = (0..rows).flat_map(|_| s.iter().copied()).collect();
                let c = tape.constant(Tensor::matrix(rows, n, data));
                tape.concat_cols(&[hs, c])?
            }
            _ => return Err(shape_err("static covariate does not match decoder spec")),
        };
        if tape.value(input).cols() != self.input_dim {
            return Err(shape_err(format!(
                "decoder expects {} input columns, got {}",
                self.input_dim,
                tape.value(input).cols()
            )));
        }
        let (a, s, h, q) = (
            self.spec.agnostic_dim,
            self.spec.specific_dim,
            self.spec.horizon,
            self.spec.num_quantiles(),
        );
        let g = self.trunk.apply(tape, store, input)?;
        let g = tape.relu(g);
        let agnostic = tape.slice_cols(g, 0, a)?;
        let agnostic = tape.repeat_rows(agnostic, h);
        let specific = tape.slice_cols(g, a, h * s)?;
        let specific = tape.reshape(specific, &[rows * h, s])?;
        let local_in = tape.concat_cols(&[agnostic, specific])?;
        let out = self.local.apply(tape, store, local_in)?;
        tape.reshape(out, &[rows, h * q])
    }
}

/// Dense forecasts indexed `(series b, FCD t, horizon h, quantile q)`.
///
/// Grid FCD index `t` (0-based) of series `b` is the absolute 1-based FCD
/// `fcd_start[b] + t`, forecasting positions `fcd + 1 ..= fcd + H`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastGrid {
    pub series_ids: Vec<String>,
    pub fcd_start: Vec<usize>,
    pub n_fcd: usize,
    pub horizon: usize,
    pub quantiles: Vec<f64>,
    pub values: Vec<f64>,
}

impl ForecastGrid {
    pub fn zeros(series_ids: Vec<String>, fcd_start: Vec<usize>, n_fcd: usize, horizon: usize, quantiles: Vec<f64>) -> Self {
        let n = series_ids.len() * n_fcd * horizon * quantiles.len();
        Self {
            series_ids,
            fcd_start,
            n_fcd,
            horizon,
            quantiles,
            values: vec![0.0; n],
        }
    }

    pub fn num_series(&self) -> usize {
        self.series_ids.len()
    }

    pub fn num_quantiles(&self) -> usize {
        self.quantiles.len()
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.num_series(), self.n_fcd, self.horizon, self.num_quantiles()]
    }

    /// Flat offset of `(b, t, h, q)`, all 0-based.
    pub fn index(&self, b: usize, t: usize, h: usize, q: usize) -> usize {
        ((b * self.n_fcd + t) * self.horizon + h) * self.num_quantiles() + q
    }

    pub fn get(&self, b: usize, t: usize, h: usize, q: usize) -> f64 {
        self.values[self.index(b, t, h, q)]
    }

    pub fn set(&mut self, b: usize, t: usize, h: usize, q: usize, v: f64) {
        let i = self.index(b, t, h, q);
        self.values[i] = v;
    }

    /// The `H*Q` block of one `(b, t)` cell.
    pub fn cell(&self, b: usize, t: usize) -> &[f64] {
        let w = self.horizon * self.num_quantiles();
        let start = (b * self.n_fcd + t) * w;
        &self.values[start..start + w]
    }

    pub fn cell_mut(&mut self, b: usize, t: usize) -> &mut [f64] {
        let w = self.horizon * self.num_quantiles();
        let start = (b * self.n_fcd + t) * w;
        &mut self.values[start..start + w]
    }

    pub fn quantile_index(&self, q: f64) -> Option<usize> {
        self.quantiles.iter().position(|&x| (x - q).abs() < 1e-12)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Map every series back to target units.
    pub fn unscale(&self, params: &[ScaleParams]) -> Result<Self> {
        if params.len() != self.num_series() {
            return Err(shape_err("one scale parameter set per series required"));
        }
        let mut out = self.clone();
        let per_series = self.n_fcd * self.horizon * self.num_quantiles();
        for (b, p) in params.iter().enumerate() {
            for v in &mut out.values[b * per_series..(b + 1) * per_series] {
                *v = p.unscale(*v);
            }
        }
        Ok(out)
    }

    /// Targets `(B, T, H)` aligned with the grid, read from `series`, and a
    /// mask marking targets that exist.
    pub fn targets_from(&self, series: &[&[f64]]) -> Result<(Vec<f64>, Vec<bool>)> {
        if series.len() != self.num_series() {
            return Err(shape_err("one target series per grid series required"));
        }
        let n = self.num_series() * self.n_fcd * self.horizon;
        let mut y = vec![0.0; n];
        let mut mask = vec![false; n];
        for (b, s) in series.iter().enumerate() {
            for t in 0..self.n_fcd {
                let fcd = self.fcd_start[b] + t;
                for h in 0..self.horizon {
                    let pos = fcd + h + 1;
                    let i = (b * self.n_fcd + t) * self.horizon + h;
                    if pos >= 1 && pos <= s.len() {
                        y[i] = s[pos - 1];
                        mask[i] = true;
                    }
                }
            }
        }
        Ok((y, mask))
    }

    /// Long CSV `unique_id,fcd,h,q,yhat`, ordered by series, FCD, horizon,
    /// quantile.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["unique_id", "fcd", "h", "q", "yhat"])?;
        for b in 0..self.num_series() {
            for t in 0..self.n_fcd {
                for h in 0..self.horizon {
                    for (qi, q) in self.quantiles.iter().enumerate() {
                        w.write_record([
                            self.series_ids[b].clone(),
                            (self.fcd_start[b] + t).to_string(),
                            (h + 1).to_string(),
                            format!("{q:?}"),
                            format!("{:?}", self.get(b, t, h, qi)),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a grid written by [`ForecastGrid::write_csv`]; cells must be dense.
    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let mut rows: Vec<(String, usize, usize, f64, f64)> = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let p = |c: usize| -> Result<&str> {
                rec.get(c).ok_or(Error::Parse {
                    line: i + 2,
                    msg: "short row".into(),
                })
            };
            let perr = |m: &str| Error::Parse {
                line: i + 2,
                msg: m.to_string(),
            };
            rows.push((
                p(0)?.to_string(),
                p(1)?.parse().map_err(|_| perr("fcd"))?,
                p(2)?.parse().map_err(|_| perr("h"))?,
                p(3)?.parse().map_err(|_| perr("q"))?,
                p(4)?.parse().map_err(|_| perr("yhat"))?,
            ));
        }
        let mut ids: Vec<String> = Vec::new();
        let mut quantiles: Vec<f64> = Vec::new();
        let mut horizon = 0;
        for (id, _, h, q, _) in &rows {
            if ids.last() != Some(id) && !ids.contains(id) {
                ids.push(id.clone());
            }
            if !quantiles.contains(q) {
                quantiles.push(*q);
            }
            horizon = horizon.max(*h);
        }
        quantiles.sort_by(f64::total_cmp);
        let nq = quantiles.len();
        if ids.is_empty() || horizon == 0 || rows.len() % (ids.len() * horizon * nq) != 0 {
            return Err(Error::Format("forecast grid is not dense".into()));
        }
        let n_fcd = rows.len() / (ids.len() * horizon * nq);
        let fcd_start: Vec<usize> = ids
            .iter()
            .map(|id| {
                rows.iter()
                    .filter(|r| &r.0 == id)
                    .map(|r| r.1)
                    .min()
                    .unwrap_or(0)
            })
            .collect();
        let mut grid = ForecastGrid::zeros(ids.clone(), fcd_start.clone(), n_fcd, horizon, quantiles.clone());
        let mut filled = vec![false; grid.values.len()];
        for (id, fcd, h, q, v) in rows {
            let b = ids.iter().position(|x| *x == id).expect("known id");
            let qi = quantiles.iter().position(|x| *x == q).expect("known q");
            if fcd < fcd_start[b] || fcd - fcd_start[b] >= n_fcd || h == 0 {
                return Err(Error::Format("forecast grid is not dense".into()));
            }
            let i = grid.index(b, fcd - fcd_start[b], h - 1, qi);
            grid.values[i] = v;
            filled[i] = true;
        }
        if filled.iter().any(|f| !f) {
            return Err(Error::Format("forecast grid is not dense".into()));
        }
        Ok(grid)
    }
}
