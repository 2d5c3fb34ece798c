use super::{EncoderSpec, Linear};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff1: Linear,
    ff2: Linear,
}

/// Causal self-attention over patch embeddings.
///
/// Each patch length `p` embeds the trailing `p` inputs at every position;
/// the streams are concatenated and projected to the model width, followed
/// by attention blocks with residual connections around attention and the
/// feed-forward layer.
#[derive(Clone, Debug)]
pub(super) struct PatchTransformer {
    patches: Vec<(usize, Linear)>,
    project: Linear,
    blocks: Vec<Block>,
    heads: usize,
    hidden: usize,
    dropout: f64,
}

impl PatchTransformer {
    pub fn new(spec: &EncoderSpec, store: &mut ParamStore) -> Result<Self> {
        let d = spec.hidden;
        let per_stream = d.div_ceil(spec.patch_lengths.len());
        let mut patches = Vec::new();
        for (i, &p) in spec.patch_lengths.iter().enumerate() {
            let lin = Linear::new(store, &format!("enc.patch{i}"), p * spec.input_dim, per_stream)?;
            patches.push((p, lin));
        }
        let project = Linear::new(
            store,
            "enc.proj",
            per_stream * spec.patch_lengths.len(),
            d,
        )?;
        let mut blocks = Vec::new();
        for l in 0..spec.attn_layers {
            let n = |s: &str| format!("enc.attn{l}.{s}");
            blocks.push(Block {
                q: Linear::new(store, &n("q"), d, d)?,
                k: Linear::new(store, &n("k"), d, d)?,
                v: Linear::new(store, &n("v"), d, d)?,
                o: Linear::new(store, &n("o"), d, d)?,
                ff1: Linear::new(store, &n("ff1"), d, d)?,
                ff2: Linear::new(store, &n("ff2"), d, d)?,
            });
        }
        Ok(Self {
            patches,
            project,
            blocks,
            heads: spec.heads,
            hidden: d,
            dropout: spec.dropout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut streams = Vec::with_capacity(self.patches.len());
        for (p, lin) in &self.patches {
            let lag = tape.lag_embed(x, *p)?;
            streams.push(lin.apply(tape, store, lag)?);
        }
        let cat = tape.concat_cols(&streams)?;
        let mut z = self.project.apply(tape, store, cat)?;
        let dh = self.hidden / self.heads;
        for block in &self.blocks {
            let q = block.q.apply(tape, store, z)?;
            let k = block.k.apply(tape, store, z)?;
            let v = block.v.apply(tape, store, z)?;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                heads.push(tape.attention(qh, kh, vh, true, self.dropout)?);
            }
            let att = tape.concat_cols(&heads)?;
            let att = block.o.apply(tape, store, att)?;
            z = tape.add(z, att)?;
            let f = block.ff1.apply(tape, store, z)?;
            let f = tape.relu(f);
            let f = block.ff2.apply(tape, store, f)?;
            z = tape.add(z, f)?;
        }
        Ok(z)
    }
}
