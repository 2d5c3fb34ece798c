use super::{EncoderSpec, Linear};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;

/// Fully connected layers over a causal lag window.
#[derive(Clone, Debug)]
pub(super) struct Mlp {
    window: usize,
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(spec: &EncoderSpec, store: &mut ParamStore) -> Result<Self> {
        let mut fan_in = spec.mlp_window * spec.input_dim;
        let mut layers = Vec::with_capacity(spec.mlp_layers);
        for i in 0..spec.mlp_layers {
            layers.push(Linear::new(store, &format!("enc.mlp{i}"), fan_in, spec.hidden)?);
            fan_in = spec.hidden;
        }
        Ok(Self {
            window: spec.mlp_window,
            layers,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = tape.lag_embed(x, self.window)?;
        for layer in &self.layers {
            let z = layer.apply(tape, store, h)?;
            h = tape.relu(z);
        }
        Ok(h)
    }
}
