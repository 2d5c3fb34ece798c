//! Forecasting models: the encoder-decoder quantile forecaster and a linear
//! autoregressive model, behind one trait used by training and inference.

use crate::autodiff::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::decoder::{validate_quantiles, Decoder, DecoderSpec};
use crate::encoders::{Encoder, EncoderFamily, EncoderSpec};
use crate::error::{Error, Result};

/// A model producing `H*Q` quantile forecasts (quantile axis fastest) for
/// each position of a univariate input.
pub trait Forecaster {
    fn horizon(&self) -> usize;

    fn quantiles(&self) -> &[f64];

    /// Trailing inputs that influence one forecast, `None` when unbounded.
    fn receptive_field(&self) -> Option<usize>;

    /// Forecasts for positions `first..first+count` (0-based) of `values`,
    /// from a single pass over `values[..first+count]`.
    fn forward_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        values: &[f64],
        first: usize,
        count: usize,
        static_cov: Option<&[f64]>,
    ) -> Result<Var>;

    /// Forecasts for every position of `values`.
    fn forward_full(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        values: &[f64],
        static_cov: Option<&[f64]>,
    ) -> Result<Var> {
        self.forward_rows(tape, store, values, 0, values.len(), static_cov)
    }

    /// Forecast (`1 x H*Q`) issued at the last position of `window`.
    fn forward_window(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        window: &[f64],
        static_cov: Option<&[f64]>,
    ) -> Result<Var> {
        if window.is_empty() {
            return Err(Error::Shape("empty window".into()));
        }
        self.forward_rows(tape, store, window, window.len() - 1, 1, static_cov)
    }
}

fn column(tape: &mut Tape, values: &[f64]) -> Var {
    tape.constant(Tensor::column(values.to_vec()))
}

fn check_rows(len: usize, first: usize, count: usize) -> Result<()> {
    if count == 0 || first + count > len {
        return Err(Error::Shape(format!(
            "rows {first}..{} out of range for length {len}",
            first + count
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
}

impl ModelSpec {
    pub fn new(family: EncoderFamily, horizon: usize) -> Self {
        Self {
            encoder: EncoderSpec::new(family, horizon),
            decoder: DecoderSpec::new(horizon),
        }
    }

    /// Flat `key=value` form used in checkpoints and run configs.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let e = &self.encoder;
        let d = &self.decoder;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        let groups = e
            .rnn_dilations
            .iter()
            .map(|g| join(g))
            .collect::<Vec<_>>()
            .join("|");
        let qs = d
            .quantiles
            .iter()
            .map(|q| format!("{q:?}"))
            .collect::<Vec<_>>()
            .join(";");
        [
            ("encoder.family", e.family.to_string()),
            ("encoder.input_dim", e.input_dim.to_string()),
            ("encoder.hidden", e.hidden.to_string()),
            ("encoder.mlp_layers", e.mlp_layers.to_string()),
            ("encoder.mlp_window", e.mlp_window.to_string()),
            ("encoder.rnn_dilations", groups),
            ("encoder.conv_kernel", e.conv_kernel.to_string()),
            ("encoder.conv_dilations", join(&e.conv_dilations)),
            ("encoder.conv_channels", e.conv_channels.to_string()),
            ("encoder.patch_lengths", join(&e.patch_lengths)),
            ("encoder.attn_layers", e.attn_layers.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.dropout", format!("{:?}", e.dropout)),
            ("decoder.agnostic_dim", d.agnostic_dim.to_string()),
            ("decoder.specific_dim", d.specific_dim.to_string()),
            ("decoder.horizon", d.horizon.to_string()),
            ("decoder.quantiles", qs),
            ("decoder.static_dim", d.static_dim.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Inverse of [`ModelSpec::to_pairs`]; keys not starting with
    /// `encoder.`/`decoder.` are ignored, unknown model keys are rejected.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("missing `{k}`")))
        };
        let family: EncoderFamily = get("encoder.family")?.parse()?;
        let horizon = parse_num(get("decoder.horizon")?, "decoder.horizon")?;
        let mut spec = ModelSpec::new(family, horizon);
        for (k, v) in pairs {
            if k.starts_with("encoder.") || k.starts_with("decoder.") {
                spec.set(k, v)?;
            }
        }
        spec.encoder.validate()?;
        spec.decoder.validate()?;
        Ok(spec)
    }

    /// Set one `encoder.*` / `decoder.*` key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        let d = &mut self.decoder;
        match key {
            "encoder.family" => e.family = value.parse()?,
            "encoder.input_dim" => e.input_dim = parse_num(value, key)?,
            "encoder.hidden" => e.hidden = parse_num(value, key)?,
            "encoder.mlp_layers" => e.mlp_layers = parse_num(value, key)?,
            "encoder.mlp_window" => e.mlp_window = parse_num(value, key)?,
            "encoder.rnn_dilations" => {
                e.rnn_dilations = value
                    .split('|')
                    .map(|g| parse_list(g, key))
                    .collect::<Result<_>>()?
            }
            "encoder.conv_kernel" => e.conv_kernel = parse_num(value, key)?,
            "encoder.conv_dilations" => e.conv_dilations = parse_list(value, key)?,
            "encoder.conv_channels" => e.conv_channels = parse_num(value, key)?,
            "encoder.patch_lengths" => e.patch_lengths = parse_list(value, key)?,
            "encoder.attn_layers" => e.attn_layers = parse_num(value, key)?,
            "encoder.heads" => e.heads = parse_num(value, key)?,
            "encoder.dropout" => e.dropout = parse_num(value, key)?,
            "decoder.agnostic_dim" => d.agnostic_dim = parse_num(value, key)?,
            "decoder.specific_dim" => d.specific_dim = parse_num(value, key)?,
            "decoder.horizon" => d.horizon = parse_num(value, key)?,
            "decoder.quantiles" => {
                d.quantiles = value
                    .split(';')
                    .map(|q| parse_num(q, key))
                    .collect::<Result<_>>()?
            }
            "decoder.static_dim" => d.static_dim = parse_num(value, key)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

pub(crate) fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list(v: &str, key: &str) -> Result<Vec<usize>> {
    v.split(';').map(|x| parse_num(x, key)).collect()
}

/// Encoder followed by the multi-quantile decoder.
#[derive(Clone, Debug)]
pub struct MqForecaster {
    spec: ModelSpec,
    encoder: Encoder,
    decoder: Decoder,
}

impl MqForecaster {
    /// Build the model and a freshly initialized parameter store.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new(seed);
        let model = Self::register(spec, &mut store)?;
        Ok((model, store))
    }

    /// Register the model's parameters in an existing store.
    pub fn register(spec: ModelSpec, store: &mut ParamStore) -> Result<Self> {
        if spec.encoder.input_dim != 1 {
            return Err(Error::Config("univariate models need encoder.input_dim = 1".into()));
        }
        let encoder = Encoder::new(spec.encoder.clone(), store)?;
        let decoder = Decoder::new(spec.decoder.clone(), encoder.hidden_dim(), store)?;
        Ok(Self {
            spec,
            encoder,
            decoder,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn family(&self) -> EncoderFamily {
        self.spec.encoder.family
    }
}

impl Forecaster for MqForecaster {
    fn horizon(&self) -> usize {
        self.spec.decoder.horizon
    }

    fn quantiles(&self) -> &[f64] {
        &self.spec.decoder.quantiles
    }

    fn receptive_field(&self) -> Option<usize> {
        self.encoder.receptive_field()
    }

    fn forward_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        values: &[f64],
        first: usize,
        count: usize,
        static_cov: Option<&[f64]>,
    ) -> Result<Var> {
        check_rows(values.len(), first, count)?;
        let x = column(tape, &values[..first + count]);
        let hs = self.encoder.encode_full(tape, store, x)?;
        let hs = if first == 0 {
            hs
        } else {
            tape.slice_rows(hs, first, count)?
        };
        self.decoder.decode(tape, store, hs, static_cov)
    }
}

/// Direct multi-horizon linear autoregression
/// `yhat_{t+h} = c_h + sum_{i=0..=p} theta_{h,i} y_{t-i}` per quantile.
#[derive(Clone, Debug)]
pub struct LinearAr {
    order: usize,
    horizon: usize,
    quantiles: Vec<f64>,
    theta: ParamId,
    intercept: ParamId,
}

impl LinearAr {
    /// Zero-initialized AR model of order `p` (uses `p + 1` lags).
    pub fn new(order: usize, horizon: usize, quantiles: &[f64], seed: u64) -> Result<(Self, ParamStore)> {
        validate_quantiles(quantiles)?;
        if horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let mut store = ParamStore::new(seed);
        let width = horizon * quantiles.len();
        let theta = store.add_init("ar.theta", &[order + 1, width], Init::Zeros)?;
        let intercept = store.add_init("ar.c", &[1, width], Init::Zeros)?;
        Ok((
            Self {
                order,
                horizon,
                quantiles: quantiles.to_vec(),
                theta,
                intercept,
            },
            store,
        ))
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lags(&self) -> usize {
        self.order + 1
    }

    /// `theta_i` (coefficient of `y_{t-i}`) for horizon `h` and quantile `q`.
    pub fn theta(&self, store: &ParamStore, i: usize, h: usize, q: usize) -> f64 {
        let w = self.horizon * self.quantiles.len();
        store.value(self.theta).data()[(self.order - i) * w + h * self.quantiles.len() + q]
    }

    pub fn set_theta(&self, store: &mut ParamStore, i: usize, h: usize, q: usize, v: f64) {
        let w = self.horizon * self.quantiles.len();
        let nq = self.quantiles.len();
        store.value_mut(self.theta).data_mut()[(self.order - i) * w + h * nq + q] = v;
    }

    pub fn intercept_id(&self) -> ParamId {
        self.intercept
    }
}

impl Forecaster for LinearAr {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn quantiles(&self) -> &[f64] {
        &self.quantiles
    }

    fn receptive_field(&self) -> Option<usize> {
        Some(self.order + 1)
    }

    fn forward_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        values: &[f64],
        first: usize,
        count: usize,
        _static_cov: Option<&[f64]>,
    ) -> Result<Var> {
        check_rows(values.len(), first, count)?;
        let x = column(tape, &values[..first + count]);
        let lags = tape.lag_embed(x, self.order + 1)?;
        let lags = if first == 0 {
            lags
        } else {
            tape.slice_rows(lags, first, count)?
        };
        let w = tape.param(store, self.theta);
        let c = tape.param(store, self.intercept);
        tape.affine(lags, w, c)
    }
}
