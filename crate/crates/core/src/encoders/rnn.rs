use super::{EncoderFamily, EncoderSpec, Linear};
use crate::autodiff::{Init, ParamId, ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
struct Cell {
    input: Linear,
    recurrent: ParamId,
    dilation: usize,
}

/// Stacked dilated recurrent cells (relu RNN or LSTM).
///
/// The state of a cell with dilation `d` at position `t` is computed from
/// the state at `t - d`, so each cell runs `d` interleaved recurrences.
/// Layers are groups of cells; every layer after the first adds its input
/// back to its output.
#[derive(Clone, Debug)]
pub(super) struct DilatedRnn {
    lstm: bool,
    hidden: usize,
    layers: Vec<Vec<Cell>>,
}

impl DilatedRnn {
    pub fn new(spec: &EncoderSpec, store: &mut ParamStore) -> Result<Self> {
        let lstm = spec.family == EncoderFamily::Lstm;
        let d = spec.hidden;
        let gates = if lstm { 4 * d } else { d };
        let mut fan_in = spec.input_dim;
        let mut layers = Vec::new();
        for (l, dilations) in spec.rnn_dilations.iter().enumerate() {
            let mut cells = Vec::new();
            for (c, &dilation) in dilations.iter().enumerate() {
                let name = format!("enc.rnn{l}.{c}");
                let input = Linear::new(store, &name, fan_in, gates)?;
                let recurrent = store.add_init(
                    &format!("{name}.u"),
                    &[d, gates],
                    Init::Glorot {
                        fan_in: d,
                        fan_out: gates,
                        gain: 0.5,
                    },
                )?;
                cells.push(Cell {
                    input,
                    recurrent,
                    dilation,
                });
                fan_in = d;
            }
            layers.push(cells);
        }
        Ok(Self {
            lstm,
            hidden: d,
            layers,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let t_len = tape.value(x).rows();
        let mut seq = x;
        for (l, cells) in self.layers.iter().enumerate() {
            let layer_input = seq;
            for cell in cells {
                let pre = cell.input.apply(tape, store, seq)?;
                let u = tape.param(store, cell.recurrent);
                let mut states: Vec<Var> = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let prev = t.checked_sub(cell.dilation).map(|p| states[p]);
                    let s = if self.lstm {
                        tape.lstm_step(pre, t, prev, u)?
                    } else {
                        tape.rnn_step(pre, t, prev, u)?
                    };
                    states.push(s);
                }
                seq = tape.stack_rows(&states, 0, self.hidden)?;
            }
            if l > 0 {
                seq = tape.add(seq, layer_input)?;
            }
        }
        Ok(seq)
    }
}
