//! Causal sequence encoders.
//!
//! Every encoder maps a `T x d_in` input to a `T x d_h` hidden sequence whose
//! row `t` depends only on input rows `0..=t`. [`Encoder::encode_window`] is
//! the last row of the same computation run on a window, so a window that
//! covers the receptive field reproduces the full-sequence row exactly.

mod cnn;
mod mlp;
mod rnn;
mod transformer;

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderFamily {
    Mlp,
    Rnn,
    Lstm,
    Cnn,
    Transformer,
}

impl EncoderFamily {
    pub const ALL: [EncoderFamily; 5] = [
        EncoderFamily::Mlp,
        EncoderFamily::Rnn,
        EncoderFamily::Lstm,
        EncoderFamily::Cnn,
        EncoderFamily::Transformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderFamily::Mlp => "mlp",
            EncoderFamily::Rnn => "rnn",
            EncoderFamily::Lstm => "lstm",
            EncoderFamily::Cnn => "cnn",
            EncoderFamily::Transformer => "transformer",
        }
    }
}

impl fmt::Display for EncoderFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(EncoderFamily::Mlp),
            "rnn" => Ok(EncoderFamily::Rnn),
            "lstm" => Ok(EncoderFamily::Lstm),
            "cnn" => Ok(EncoderFamily::Cnn),
            "transformer" | "attention" => Ok(EncoderFamily::Transformer),
            other => Err(Error::Config(format!("unknown encoder family `{other}`"))),
        }
    }
}

/// Encoder hyperparameters. Only the fields of `family` are used.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub family: EncoderFamily,
    pub input_dim: usize,
    /// Hidden width of MLP, RNN/LSTM and Transformer layers.
    pub hidden: usize,
    pub mlp_layers: usize,
    /// Length of the causal lag window fed to the MLP (2H by default).
    pub mlp_window: usize,
    /// One inner list per layer; each entry is one dilated recurrent cell.
    pub rnn_dilations: Vec<Vec<usize>>,
    pub conv_kernel: usize,
    pub conv_dilations: Vec<usize>,
    pub conv_channels: usize,
    pub patch_lengths: Vec<usize>,
    pub attn_layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl EncoderSpec {
    /// Defaults of the published hyperparameter tables for horizon `h`.
    pub fn new(family: EncoderFamily, horizon: usize) -> Self {
        Self {
            family,
            input_dim: 1,
            hidden: 128,
            mlp_layers: 3,
            mlp_window: 2 * horizon,
            rnn_dilations: vec![vec![1, 2], vec![4, 8]],
            conv_kernel: 2,
            conv_dilations: vec![1, 2, 4, 8, 16, 32],
            conv_channels: 30,
            patch_lengths: vec![2, 6, 8],
            attn_layers: 3,
            heads: 4,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder spec: {m}")));
        if self.input_dim == 0 || self.hidden == 0 {
            return bad("input_dim and hidden must be positive");
        }
        match self.family {
            EncoderFamily::Mlp if self.mlp_layers == 0 || self.mlp_window == 0 => {
                bad("mlp layers and window must be positive")
            }
            EncoderFamily::Rnn | EncoderFamily::Lstm
                if self.rnn_dilations.is_empty()
                    || self.rnn_dilations.iter().any(|l| l.is_empty() || l.contains(&0)) =>
            {
                bad("rnn dilations must be non-empty and positive")
            }
            EncoderFamily::Cnn
                if self.conv_kernel == 0
                    || self.conv_channels == 0
                    || self.conv_dilations.is_empty()
                    || self.conv_dilations.contains(&0) =>
            {
                bad("conv kernel, channels and dilations must be positive")
            }
            EncoderFamily::Transformer
                if self.patch_lengths.is_empty()
                    || self.patch_lengths.contains(&0)
                    || self.heads == 0
                    || self.hidden % self.heads != 0
                    || !(0.0..1.0).contains(&self.dropout) =>
            {
                bad("patch lengths positive, hidden divisible by heads, dropout in [0,1)")
            }
            _ => Ok(()),
        }
    }

    /// Width of each hidden row.
    pub fn hidden_dim(&self) -> usize {
        match self.family {
            EncoderFamily::Cnn => self.conv_channels,
            _ => self.hidden,
        }
    }

    /// Number of trailing inputs that can influence a hidden row, or `None`
    /// when unbounded.
    pub fn receptive_field(&self) -> Option<usize> {
        match self.family {
            EncoderFamily::Cnn => {
                Some(1 + (self.conv_kernel - 1) * self.conv_dilations.iter().sum::<usize>())
            }
            EncoderFamily::Mlp => Some(self.mlp_window),
            EncoderFamily::Rnn | EncoderFamily::Lstm | EncoderFamily::Transformer => None,
        }
    }
}

/// Dense layer `x W + b`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = store.add_init(
            &format!("{name}.w"),
            &[fan_in, fan_out],
            Init::Glorot {
                fan_in,
                fan_out,
                gain: 1.0,
            },
        )?;
        let b = store.add_init(&format!("{name}.b"), &[1, fan_out], Init::Zeros)?;
        Ok(Self { w, b })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Mlp(mlp::Mlp),
    Rnn(rnn::DilatedRnn),
    Cnn(cnn::DilatedCnn),
    Transformer(transformer::PatchTransformer),
}

/// An encoder whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    body: Body,
}

impl Encoder {
    /// Register the encoder's parameters (prefixed `enc.`) in `store`.
    pub fn new(spec: EncoderSpec, store: &mut ParamStore) -> Result<Self> {
        spec.validate()?;
        let body = match spec.family {
            EncoderFamily::Mlp => Body::Mlp(mlp::Mlp::new(&spec, store)?),
            EncoderFamily::Rnn | EncoderFamily::Lstm => Body::Rnn(rnn::DilatedRnn::new(&spec, store)?),
            EncoderFamily::Cnn => Body::Cnn(cnn::DilatedCnn::new(&spec, store)?),
            EncoderFamily::Transformer => {
                Body::Transformer(transformer::PatchTransformer::new(&spec, store)?)
            }
        };
        Ok(Self { spec, body })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn hidden_dim(&self) -> usize {
        self.spec.hidden_dim()
    }

    pub fn receptive_field(&self) -> Option<usize> {
        self.spec.receptive_field()
    }

    /// Hidden sequence for every position of `x` (`T x d_in`) in one pass.
    pub fn encode_full(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (t, d) = dims(tape, x);
        if t == 0 || d != self.spec.input_dim {
            return Err(shape_err(format!(
                "encoder input {t}x{d}, expected Tx{}",
                self.spec.input_dim
            )));
        }
        match &self.body {
            Body::Mlp(m) => m.forward(tape, store, x),
            Body::Rnn(r) => r.forward(tape, store, x),
            Body::Cnn(c) => c.forward(tape, store, x),
            Body::Transformer(tr) => tr.forward(tape, store, x),
        }
    }

    /// Hidden row (`1 x d_h`) of the window's final position.
    pub fn encode_window(&self, tape: &mut Tape, store: &ParamStore, window: Var) -> Result<Var> {
        let hs = self.encode_full(tape, store, window)?;
        let rows = dims(tape, hs).0;
        tape.slice_rows(hs, rows - 1, 1)
    }
}

pub(crate) fn dims(tape: &Tape, v: Var) -> (usize, usize) {
    let t = tape.value(v);
    (t.rows(), t.cols())
}

/// Encode a plain input matrix on an inference tape.
pub fn encode_full(encoder: &Encoder, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let h = encoder.encode_full(&mut tape, store, xv)?;
    Ok(tape.value(h).clone())
}

/// Encode a window on an inference tape; returns the final hidden row.
pub fn encode_window(encoder: &Encoder, store: &ParamStore, window: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xv = tape.constant(window.clone());
    let h = encoder.encode_window(&mut tape, store, xv)?;
    Ok(tape.value(h).clone())
}
