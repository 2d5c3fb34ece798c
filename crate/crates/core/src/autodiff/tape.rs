//! Reverse-mode tape.
//!
//! Every primitive appends a node holding its forward value; `backward` walks
//! the nodes in reverse insertion order, which is a valid topological order
//! because a node can only reference nodes created before it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, matmul_acc, matmul_grad_a, matmul_grad_b, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Exact invocation counters for the encoder-level primitives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Output positions produced by causal convolutions (one per row per call).
    pub conv_positions: u64,
    /// Recurrent (RNN or LSTM) cell steps.
    pub recurrent_steps: u64,
    /// Query-key pairs scored by attention.
    pub attention_pairs: u64,
    /// Input cells gathered by lag embeddings.
    pub window_inputs: u64,
    /// Multiply-accumulates across all dense kernels.
    pub macs: u64,
}

impl OpCounters {
    pub fn merge(&mut self, other: &OpCounters) {
        self.conv_positions += other.conv_positions;
        self.recurrent_steps += other.recurrent_steps;
        self.attention_pairs += other.attention_pairs;
        self.window_inputs += other.window_inputs;
        self.macs += other.macs;
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    CausalConv {
        x: Var,
        w: Var,
        kernel: usize,
        dilation: usize,
    },
    LagEmbed {
        x: Var,
        width: usize,
    },
    RnnStep {
        pre: Var,
        row: usize,
        prev: Option<Var>,
        u: Var,
    },
    LstmStep {
        pre: Var,
        row: usize,
        prev: Option<Var>,
        u: Var,
        // i, f, g, o, tanh(c): 5 * d values
        gates: Vec<f64>,
    },
    StackRows {
        parts: Vec<Var>,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    RepeatRows {
        x: Var,
        times: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
    PinballElem {
        y: Vec<f64>,
        yhat: Var,
        quantiles: Vec<f64>,
    },
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    counters: OpCounters,
    requires_grad: bool,
    track_kinks: bool,
    kink_hash: u64,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Tape that supports `backward`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counters: OpCounters::default(),
            requires_grad: true,
            track_kinks: false,
            kink_hash: FNV_OFFSET,
            dropout_rng: None,
        }
    }

    /// Forward-only tape: skips the bookkeeping that only `backward` needs.
    pub fn inference() -> Self {
        Self {
            requires_grad: false,
            ..Self::new()
        }
    }

    /// Enable training-mode dropout with a seed-deterministic mask stream.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    /// Record the activation pattern of every non-smooth primitive.
    ///
    /// Two evaluations with equal signatures took the same branch at every
    /// relu and pinball kink.
    pub fn with_kink_tracking(mut self) -> Self {
        self.track_kinks = true;
        self
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Free the value of `v` on a forward-only tape once no later op reads
    /// it. Keeps long-series inference within cache; a no-op when the tape
    /// records gradients, since `backward` needs every value.
    pub fn release(&mut self, v: Var) {
        if !self.requires_grad {
            self.nodes[v.0].value = Tensor::zeros(&[0, 0]);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn kink(&mut self, bit: bool) {
        if self.track_kinks {
            self.kink_hash = (self.kink_hash ^ (bit as u64 + 1)).wrapping_mul(FNV_PRIME);
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.counters.macs += (m * k * n) as u64;
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b)))
    }

    /// Row-broadcast bias add: `x (m x n) + b (1 x n)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(b).len() != n {
            return Err(shape_err(format!(
                "bias of length {} for {m}x{n}",
                self.value(b).len()
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out), Op::AddBias(x, b)))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::new(shape, data).expect("same shape"), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.value(x).shape().to_vec();
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(Tensor::new(shape, data).expect("same shape"), op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        if self.track_kinks {
            let bits: Vec<bool> = self.value(x).data().iter().map(|&v| v > 0.0).collect();
            for b in bits {
                self.kink(b);
            }
        }
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// Dilated causal 1-d convolution.
    ///
    /// `x` is `T x c_in`, `w` is `(kernel * c_in) x c_out` with tap `k` in rows
    /// `k*c_in..(k+1)*c_in`; tap `k` reads position `t - k * dilation`, and
    /// positions before the start of the series read zeros.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, kernel: usize, dilation: usize) -> Result<Var> {
        if kernel == 0 || dilation == 0 {
            return Err(shape_err("kernel and dilation must be positive"));
        }
        let (t_len, c_in) = self.dims(x);
        let (wr, c_out) = self.dims(w);
        if wr != kernel * c_in {
            return Err(shape_err(format!(
                "conv weight has {wr} rows, expected {kernel}*{c_in}"
            )));
        }
        let mut out = vec![0.0; t_len * c_out];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for t in 0..t_len {
                let out_row = &mut out[t * c_out..(t + 1) * c_out];
                for k in 0..kernel {
                    let lag = k * dilation;
                    if lag > t {
                        break;
                    }
                    let src = t - lag;
                    matmul_acc(
                        &xd[src * c_in..(src + 1) * c_in],
                        &wd[k * c_in * c_out..(k + 1) * c_in * c_out],
                        out_row,
                        1,
                        c_in,
                        c_out,
                    );
                }
            }
        }
        self.counters.conv_positions += t_len as u64;
        self.counters.macs += (t_len * kernel * c_in * c_out) as u64;
        Ok(self.push(
            Tensor::matrix(t_len, c_out, out),
            Op::CausalConv {
                x,
                w,
                kernel,
                dilation,
            },
        ))
    }

    /// Causal sliding window: row `t` holds rows `t-width+1 ..= t` of `x`
    /// flattened oldest first, zero-padded on the left.
    pub fn lag_embed(&mut self, x: Var, width: usize) -> Result<Var> {
        if width == 0 {
            return Err(shape_err("lag width must be positive"));
        }
        let (t_len, c) = self.dims(x);
        let mut out = vec![0.0; t_len * width * c];
        let xd = self.value(x).data();
        for t in 0..t_len {
            for j in 0..width {
                let offset = width - 1 - j;
                if offset > t {
                    continue;
                }
                let src = t - offset;
                out[(t * width + j) * c..(t * width + j + 1) * c]
                    .copy_from_slice(&xd[src * c..(src + 1) * c]);
            }
        }
        self.counters.window_inputs += (t_len * width) as u64;
        Ok(self.push(
            Tensor::matrix(t_len, width * c, out),
            Op::LagEmbed { x, width },
        ))
    }

    /// One step of a relu recurrent cell: `relu(pre[row] + prev U)`.
    ///
    /// `pre` holds the input projections (`x W + b`) for every position;
    /// `prev` is the state `dilation` steps back, or `None` for a zero state.
    pub fn rnn_step(&mut self, pre: Var, row: usize, prev: Option<Var>, u: Var) -> Result<Var> {
        let (rows, d) = self.dims(pre);
        if row >= rows || self.dims(u) != (d, d) {
            return Err(shape_err("rnn_step: row or recurrent weight shape"));
        }
        let mut z = self.value(pre).row_slice(row).to_vec();
        if let Some(p) = prev {
            if self.value(p).len() != d {
                return Err(shape_err("rnn_step: state width"));
            }
            matmul_acc(self.value(p).data(), self.value(u).data(), &mut z, 1, d, d);
            self.counters.macs += (d * d) as u64;
        }
        if self.track_kinks {
            let bits: Vec<bool> = z.iter().map(|&v| v > 0.0).collect();
            for b in bits {
                self.kink(b);
            }
        }
        for v in &mut z {
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        self.counters.recurrent_steps += 1;
        Ok(self.push(Tensor::row(z), Op::RnnStep { pre, row, prev, u }))
    }

    /// One LSTM step. `pre` rows are the gate pre-activations `[i f g o]`
    /// (width `4d`); `prev` is a `1 x 2d` node `[h c]`. Output is `[h c]`.
    pub fn lstm_step(&mut self, pre: Var, row: usize, prev: Option<Var>, u: Var) -> Result<Var> {
        let (rows, d4) = self.dims(pre);
        if d4 % 4 != 0 || row >= rows {
            return Err(shape_err("lstm_step: pre-activation width"));
        }
        let d = d4 / 4;
        if self.dims(u) != (d, d4) {
            return Err(shape_err("lstm_step: recurrent weight shape"));
        }
        let mut z = self.value(pre).row_slice(row).to_vec();
        let c_prev: Vec<f64> = match prev {
            Some(p) => {
                let pv = self.nodes[p.0].value.data();
                if pv.len() != 2 * d {
                    return Err(shape_err("lstm_step: state width"));
                }
                matmul_acc(&pv[..d], self.nodes[u.0].value.data(), &mut z, 1, d, d4);
                let c = pv[d..].to_vec();
                self.counters.macs += (d * d4) as u64;
                c
            }
            None => vec![0.0; d],
        };
        let mut gates = vec![0.0; 5 * d];
        let mut out = vec![0.0; 2 * d];
        for j in 0..d {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[d + j]);
            let g = z[2 * d + j].tanh();
            let o = sigmoid(z[3 * d + j]);
            let c = f * c_prev[j] + i * g;
            let tc = c.tanh();
            gates[j] = i;
            gates[d + j] = f;
            gates[2 * d + j] = g;
            gates[3 * d + j] = o;
            gates[4 * d + j] = tc;
            out[j] = o * tc;
            out[d + j] = c;
        }
        self.counters.recurrent_steps += 1;
        Ok(self.push(
            Tensor::row(out),
            Op::LstmStep {
                pre,
                row,
                prev,
                u,
                gates,
            },
        ))
    }

    /// Stack columns `start..start+cols` of each (single-row) part into a matrix.
    pub fn stack_rows(&mut self, parts: &[Var], start: usize, cols: usize) -> Result<Var> {
        let mut out = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            let v = self.value(p);
            if v.rows() != 1 || v.cols() < start + cols {
                return Err(shape_err("stack_rows expects single rows wide enough"));
            }
            out.extend_from_slice(&v.data()[start..start + cols]);
        }
        Ok(self.push(
            Tensor::matrix(parts.len(), cols, out),
            Op::StackRows {
                parts: parts.to_vec(),
                start,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows of nothing"));
        }
        let cols = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(shape_err("concat_rows: column mismatch"));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols of nothing"));
        }
        let rows = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(shape_err("concat_cols: row mismatch"));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start + len > cols {
            return Err(shape_err(format!("slice_cols {start}+{len} of {cols}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Tensor::matrix(rows, len, out), Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start + len > rows {
            return Err(shape_err(format!("slice_rows {start}+{len} of {rows}")));
        }
        let out = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor::matrix(len, cols, out), Op::SliceRows { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Repeat each row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (rows, cols) = self.dims(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
            }
        }
        self.push(Tensor::matrix(rows * times, cols, out), Op::RepeatRows { x, times })
    }

    /// Single-head scaled dot-product attention.
    ///
    /// With `causal`, query `i` attends to keys `0..=i` only and the keys
    /// beyond `i` are never read. `dropout` is applied to the attention
    /// weights only when the tape was built with a dropout seed.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool, dropout: f64) -> Result<Var> {
        let (tq, dk) = self.dims(q);
        let (tk, dk2) = self.dims(k);
        let (tv, dv) = self.dims(v);
        if dk != dk2 || tk != tv || (causal && tq != tk) {
            return Err(shape_err("attention operand shapes"));
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let keep_prob = 1.0 - dropout;
        let use_dropout = dropout > 0.0 && self.dropout_rng.is_some();
        let store = self.requires_grad;
        let mut out = vec![0.0; tq * dv];
        let mut probs = if store { vec![0.0; tq * tk] } else { Vec::new() };
        let mut keep = if store && use_dropout {
            Some(vec![0.0; tq * tk])
        } else {
            None
        };
        let mut row = vec![0.0; tk];
        let mut pairs = 0u64;
        for i in 0..tq {
            let n_keys = if causal { i + 1 } else { tk };
            pairs += n_keys as u64;
            let qi = self.nodes[q.0].value.row_slice(i);
            let mut max = f64::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate().take(n_keys) {
                *s = dot(qi, self.nodes[k.0].value.row_slice(j)) * scale;
                max = max.max(*s);
            }
            let mut denom = 0.0;
            for s in row.iter_mut().take(n_keys) {
                *s = (*s - max).exp();
                denom += *s;
            }
            for s in row.iter_mut().take(n_keys) {
                *s /= denom;
            }
            if store {
                probs[i * tk..i * tk + n_keys].copy_from_slice(&row[..n_keys]);
            }
            let out_row = &mut out[i * dv..(i + 1) * dv];
            for j in 0..n_keys {
                let mut w = row[j];
                if use_dropout {
                    let rng = self.dropout_rng.as_mut().expect("dropout rng");
                    let m = if rng.random::<f64>() < keep_prob {
                        1.0 / keep_prob
                    } else {
                        0.0
                    };
                    if let Some(kp) = keep.as_mut() {
                        kp[i * tk + j] = m;
                    }
                    w *= m;
                }
                let vj = self.nodes[v.0].value.row_slice(j);
                for (o, &x) in out_row.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
        self.counters.attention_pairs += pairs;
        self.counters.macs += pairs * (dk + dv) as u64;
        Ok(self.push(
            Tensor::matrix(tq, dv, out),
            Op::Attention {
                q,
                k,
                v,
                causal,
                probs,
                keep,
            },
        ))
    }

    /// Elementwise pinball loss.
    ///
    /// `yhat` is `R x (H*Q)` with quantile fastest; `y` is `R x H` and is
    /// broadcast across the quantile axis.
    pub fn pinball_elem(&mut self, y: &Tensor, yhat: Var, quantiles: &[f64]) -> Result<Var> {
        let nq = quantiles.len();
        let (r, c) = self.dims(yhat);
        if nq == 0 || c != y.cols() * nq || r != y.rows() {
            return Err(shape_err(format!(
                "pinball: yhat {r}x{c} vs targets {}x{} with {nq} quantiles",
                y.rows(),
                y.cols()
            )));
        }
        let yh = self.value(yhat).data().to_vec();
        let mut out = vec![0.0; yh.len()];
        for (idx, (o, &pred)) in out.iter_mut().zip(&yh).enumerate() {
            let q = quantiles[idx % nq];
            let target = y.data()[idx / nq];
            let diff = target - pred;
            self.kink(diff >= 0.0);
            *o = (q * diff).max((q - 1.0) * diff);
        }
        Ok(self.push(
            Tensor::matrix(r, c, out),
            Op::PinballElem {
                y: y.data().to_vec(),
                yhat,
                quantiles: quantiles.to_vec(),
            },
        ))
    }

    /// Mean of the entries selected by `mask`.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(shape_err("masked_mean: mask length"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Accumulate `d loss / d param` into `store`'s gradient slots.
    ///
    /// Gradients accumulate across calls; call [`ParamStore::zero_grads`] to
    /// reset. Parameters not reachable from `loss` receive nothing.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (d, s) in store.grad_mut(*id).data_mut().iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    matmul_grad_a(&g, bv, slot(&mut grads, nodes, *a), m, k, n);
                    matmul_grad_b(av, &g, slot(&mut grads, nodes, *b), m, k, n);
                }
                Op::AddBias(x, b) => {
                    let n = self.dims(*x).1;
                    for (d, s) in slot(&mut grads, nodes, *x).iter_mut().zip(&g) {
                        *d += s;
                    }
                    let db = slot(&mut grads, nodes, *b);
                    for row in g.chunks(n.max(1)) {
                        for (d, s) in db.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (d, s) in slot(&mut grads, nodes, *a).iter_mut().zip(&g) {
                        *d += s;
                    }
                    for (d, s) in slot(&mut grads, nodes, *b).iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::Sub(a, b) => {
                    for (d, s) in slot(&mut grads, nodes, *a).iter_mut().zip(&g) {
                        *d += s;
                    }
                    for (d, s) in slot(&mut grads, nodes, *b).iter_mut().zip(&g) {
                        *d -= s;
                    }
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    for ((d, s), y) in slot(&mut grads, nodes, *a).iter_mut().zip(&g).zip(bv) {
                        *d += s * y;
                    }
                    for ((d, s), x) in slot(&mut grads, nodes, *b).iter_mut().zip(&g).zip(av) {
                        *d += s * x;
                    }
                }
                Op::Scale(x, c) => {
                    for (d, s) in slot(&mut grads, nodes, *x).iter_mut().zip(&g) {
                        *d += s * c;
                    }
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    for ((d, s), &v) in slot(&mut grads, nodes, *x).iter_mut().zip(&g).zip(xv) {
                        if v > 0.0 {
                            *d += s;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.data();
                    for ((d, s), &y) in slot(&mut grads, nodes, *x).iter_mut().zip(&g).zip(yv) {
                        *d += s * y * (1.0 - y);
                    }
                }
                Op::Tanh(x) => {
                    let yv = node.value.data();
                    for ((d, s), &y) in slot(&mut grads, nodes, *x).iter_mut().zip(&g).zip(yv) {
                        *d += s * (1.0 - y * y);
                    }
                }
                Op::CausalConv {
                    x,
                    w,
                    kernel,
                    dilation,
                } => {
                    let (t_len, c_in) = self.dims(*x);
                    let c_out = self.dims(*w).1;
                    let xv = nodes[x.0].value.data();
                    let wv = nodes[w.0].value.data();
                    {
                        let dx = slot(&mut grads, nodes, *x);
                        for t in 0..t_len {
                            let gr = &g[t * c_out..(t + 1) * c_out];
                            for k in 0..*kernel {
                                let lag = k * dilation;
                                if lag > t {
                                    break;
                                }
                                let src = t - lag;
                                matmul_grad_a(
                                    gr,
                                    &wv[k * c_in * c_out..(k + 1) * c_in * c_out],
                                    &mut dx[src * c_in..(src + 1) * c_in],
                                    1,
                                    c_in,
                                    c_out,
                                );
                            }
                        }
                    }
                    let dw = slot(&mut grads, nodes, *w);
                    for t in 0..t_len {
                        let gr = &g[t * c_out..(t + 1) * c_out];
                        for k in 0..*kernel {
                            let lag = k * dilation;
                            if lag > t {
                                break;
                            }
                            let src = t - lag;
                            matmul_grad_b(
                                &xv[src * c_in..(src + 1) * c_in],
                                gr,
                                &mut dw[k * c_in * c_out..(k + 1) * c_in * c_out],
                                1,
                                c_in,
                                c_out,
                            );
                        }
                    }
                }
                Op::LagEmbed { x, width } => {
                    let (t_len, c) = self.dims(*x);
                    let dx = slot(&mut grads, nodes, *x);
                    for t in 0..t_len {
                        for j in 0..*width {
                            let offset = width - 1 - j;
                            if offset > t {
                                continue;
                            }
                            let src = t - offset;
                            for ch in 0..c {
                                dx[src * c + ch] += g[(t * width + j) * c + ch];
                            }
                        }
                    }
                }
                Op::RnnStep { pre, row, prev, u } => {
                    let d = g.len();
                    let h = node.value.data();
                    let dz: Vec<f64> = g
                        .iter()
                        .zip(h)
                        .map(|(&s, &hv)| if hv > 0.0 { s } else { 0.0 })
                        .collect();
                    {
                        let dpre = slot(&mut grads, nodes, *pre);
                        for (dp, z) in dpre[row * d..(row + 1) * d].iter_mut().zip(&dz) {
                            *dp += z;
                        }
                    }
                    if let Some(p) = prev {
                        let pv = nodes[p.0].value.data();
                        let uv = nodes[u.0].value.data();
                        matmul_grad_b(pv, &dz, slot(&mut grads, nodes, *u), 1, d, d);
                        matmul_grad_a(&dz, uv, slot(&mut grads, nodes, *p), 1, d, d);
                    }
                }
                Op::LstmStep {
                    pre,
                    row,
                    prev,
                    u,
                    gates,
                } => {
                    let d = g.len() / 2;
                    let (dh, dc_out) = g.split_at(d);
                    let c_prev: Vec<f64> = match prev {
                        Some(p) => nodes[p.0].value.data()[d..].to_vec(),
                        None => vec![0.0; d],
                    };
                    let mut dz = vec![0.0; 4 * d];
                    let mut dc_prev = vec![0.0; d];
                    for j in 0..d {
                        let (i, f, gg, o, tc) = (
                            gates[j],
                            gates[d + j],
                            gates[2 * d + j],
                            gates[3 * d + j],
                            gates[4 * d + j],
                        );
                        let d_o = dh[j] * tc;
                        let dc = dc_out[j] + dh[j] * o * (1.0 - tc * tc);
                        dz[j] = dc * gg * i * (1.0 - i);
                        dz[d + j] = dc * c_prev[j] * f * (1.0 - f);
                        dz[2 * d + j] = dc * i * (1.0 - gg * gg);
                        dz[3 * d + j] = d_o * o * (1.0 - o);
                        dc_prev[j] = dc * f;
                    }
                    {
                        let dpre = slot(&mut grads, nodes, *pre);
                        for (dp, z) in dpre[row * 4 * d..(row + 1) * 4 * d].iter_mut().zip(&dz) {
                            *dp += z;
                        }
                    }
                    if let Some(p) = prev {
                        let pv = nodes[p.0].value.data();
                        let uv = nodes[u.0].value.data();
                        matmul_grad_b(&pv[..d], &dz, slot(&mut grads, nodes, *u), 1, d, 4 * d);
                        let dp = slot(&mut grads, nodes, *p);
                        matmul_grad_a(&dz, uv, &mut dp[..d], 1, d, 4 * d);
                        for (a, b) in dp[d..].iter_mut().zip(&dc_prev) {
                            *a += b;
                        }
                    }
                }
                Op::StackRows { parts, start } => {
                    let cols = node.value.cols();
                    for (r, &p) in parts.iter().enumerate() {
                        let dp = slot(&mut grads, nodes, p);
                        for (d, s) in dp[*start..start + cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += s;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.len();
                        for (d, s) in slot(&mut grads, nodes, p).iter_mut().zip(&g[offset..offset + n]) {
                            *d += s;
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.cols();
                        let dp = slot(&mut grads, nodes, p);
                        for r in 0..rows {
                            for c in 0..w {
                                dp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, len) = (node.value.rows(), node.value.cols());
                    let cols = self.dims(*x).1;
                    let dx = slot(&mut grads, nodes, *x);
                    for r in 0..rows {
                        for c in 0..len {
                            dx[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let cols = node.value.cols();
                    let dx = slot(&mut grads, nodes, *x);
                    for (d, s) in dx[start * cols..start * cols + g.len()].iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::Reshape(x) => {
                    for (d, s) in slot(&mut grads, nodes, *x).iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::RepeatRows { x, times } => {
                    let (rows, cols) = self.dims(*x);
                    let dx = slot(&mut grads, nodes, *x);
                    for r in 0..rows {
                        for k in 0..*times {
                            let src = (r * times + k) * cols;
                            for c in 0..cols {
                                dx[r * cols + c] += g[src + c];
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    causal,
                    probs,
                    keep,
                } => {
                    let (tq, dk) = self.dims(*q);
                    let (tk, dv) = self.dims(*v);
                    let scale = 1.0 / (dk as f64).sqrt();
                    let qv = nodes[q.0].value.data().to_vec();
                    let kv = nodes[k.0].value.data().to_vec();
                    let vv = nodes[v.0].value.data().to_vec();
                    let mut dq = vec![0.0; tq * dk];
                    let mut dkk = vec![0.0; tk * dk];
                    let mut dvv = vec![0.0; tk * dv];
                    let mut dp = vec![0.0; tk];
                    for i in 0..tq {
                        let n_keys = if *causal { i + 1 } else { tk };
                        let gi = &g[i * dv..(i + 1) * dv];
                        let p = &probs[i * tk..i * tk + n_keys];
                        let mut inner = 0.0;
                        for j in 0..n_keys {
                            let m = keep.as_ref().map_or(1.0, |kp| kp[i * tk + j]);
                            let vj = &vv[j * dv..(j + 1) * dv];
                            dp[j] = dot(gi, vj) * m;
                            let w = p[j] * m;
                            for (d, s) in dvv[j * dv..(j + 1) * dv].iter_mut().zip(gi) {
                                *d += w * s;
                            }
                            inner += p[j] * dp[j];
                        }
                        let qi = &qv[i * dk..(i + 1) * dk];
                        for j in 0..n_keys {
                            let ds = p[j] * (dp[j] - inner) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kv[j * dk..(j + 1) * dk];
                            for (d, x) in dq[i * dk..(i + 1) * dk].iter_mut().zip(kj) {
                                *d += ds * x;
                            }
                            for (d, x) in dkk[j * dk..(j + 1) * dk].iter_mut().zip(qi) {
                                *d += ds * x;
                            }
                        }
                    }
                    for (d, s) in slot(&mut grads, nodes, *q).iter_mut().zip(&dq) {
                        *d += s;
                    }
                    for (d, s) in slot(&mut grads, nodes, *k).iter_mut().zip(&dkk) {
                        *d += s;
                    }
                    for (d, s) in slot(&mut grads, nodes, *v).iter_mut().zip(&dvv) {
                        *d += s;
                    }
                }
                Op::PinballElem { y, yhat, quantiles } => {
                    let nq = quantiles.len();
                    let pred = nodes[yhat.0].value.data();
                    let dy = slot(&mut grads, nodes, *yhat);
                    for (idx, d) in dy.iter_mut().enumerate() {
                        let q = quantiles[idx % nq];
                        let diff = y[idx / nq] - pred[idx];
                        // d/dyhat of max(q*diff, (q-1)*diff)
                        let slope = if diff >= 0.0 { -q } else { 1.0 - q };
                        *d += g[idx] * slope;
                    }
                }
                Op::MaskedMean { x, mask, count } => {
                    let s = g[0] / *count as f64;
                    for (d, &m) in slot(&mut grads, nodes, *x).iter_mut().zip(mask) {
                        if m {
                            *d += s;
                        }
                    }
                }
                Op::Sum(x) => {
                    for d in slot(&mut grads, nodes, *x).iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
        Ok(())
    }
}
