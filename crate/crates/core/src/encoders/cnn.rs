use super::EncoderSpec;
use crate::autodiff::{Init, ParamId, ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    dilation: usize,
}

/// Stack of dilated causal convolutions with relu and residual connections
/// (the first layer changes width and has no residual).
#[derive(Clone, Debug)]
pub(super) struct DilatedCnn {
    kernel: usize,
    layers: Vec<ConvLayer>,
}

impl DilatedCnn {
    pub fn new(spec: &EncoderSpec, store: &mut ParamStore) -> Result<Self> {
        let c = spec.conv_channels;
        let k = spec.conv_kernel;
        let mut c_in = spec.input_dim;
        let mut layers = Vec::new();
        for (i, &dilation) in spec.conv_dilations.iter().enumerate() {
            let w = store.add_init(
                &format!("enc.conv{i}.w"),
                &[k * c_in, c],
                Init::Glorot {
                    fan_in: k * c_in,
                    fan_out: c,
                    gain: 1.0,
                },
            )?;
            let b = store.add_init(&format!("enc.conv{i}.b"), &[1, c], Init::Zeros)?;
            layers.push(ConvLayer { w, b, dilation });
            c_in = c;
        }
        Ok(Self { kernel: k, layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(store, layer.w);
            let b = tape.param(store, layer.b);
            let conv = tape.causal_conv1d(h, w, self.kernel, layer.dilation)?;
            let z = tape.add_bias(conv, b)?;
            let a = tape.relu(z);
            tape.release(conv);
            tape.release(z);
            let prev = h;
            h = if i == 0 { a } else { tape.add(a, h)? };
            if i > 0 {
                // `prev` is the caller's input only at layer 0.
                tape.release(a);
                tape.release(prev);
            }
        }
        Ok(h)
    }
}
