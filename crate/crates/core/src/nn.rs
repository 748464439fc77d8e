//! Layer library on top of the tape: parameter store, initializers, linear /
//! conv / layer-norm blocks, multi-head attention and transformer layers.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Conv2dShape, Tape, Value};

/// Flat, named parameter storage. Models register parameters at init time and
/// address them by [`ParamId`]; checkpoints persist the `(name, array)` pairs.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, init: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.arrays.push(init);
        ParamId(self.arrays.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.arrays[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.arrays.iter())
    }

    pub fn arrays(&self) -> &[Array2<f64>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.arrays
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    /// Put every parameter on a tape as a leaf, in id order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Value> {
        self.arrays.iter().map(|a| tape.leaf(a.clone())).collect()
    }
}

/// Uniform Kaiming-style init for a `[fan_in, fan_out]` weight.
pub fn kaiming(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

pub fn zeros(r: usize, c: usize) -> Array2<f64> {
    Array2::zeros((r, c))
}

pub fn ones(r: usize, c: usize) -> Array2<f64> {
    Array2::from_elem((r, c), 1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming(rng, din, dout));
        let b = store.add(format!("{name}.b"), zeros(1, dout));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, pv: &[Value], x: Value) -> Value {
        let y = tape.matmul(x, pv[self.w.0]);
        tape.add_row(y, pv[self.b.0])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), ones(1, dim));
        let bias = store.add(format!("{name}.bias"), zeros(1, dim));
        Self { gain, bias }
    }

    pub fn apply(&self, tape: &mut Tape, pv: &[Value], x: Value) -> Value {
        tape.layer_norm(x, pv[self.gain.0], pv[self.bias.0], 1e-5)
    }
}

/// 3×3 (or k×k) convolution bound to a fixed kernel/stride; spatial extent is
/// supplied per call since it changes along the backbone.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming(rng, k * k * in_c, out_c));
        let b = store.add(format!("{name}.b"), zeros(1, out_c));
        Self {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    /// Returns the output value and its spatial extent.
    pub fn apply(
        &self,
        tape: &mut Tape,
        pv: &[Value],
        x: Value,
        in_h: usize,
        in_w: usize,
    ) -> (Value, usize, usize) {
        let sh = Conv2dShape {
            in_h,
            in_w,
            in_c: self.in_c,
            out_c: self.out_c,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        let y = tape.conv2d(x, pv[self.w.0], pv[self.b.0], sh);
        (y, sh.out_h(), sh.out_w())
    }
}

/// Multi-head attention; `q_in == kv_in` gives self-attention.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "dim must divide into heads");
        Self {
            wq: Linear::init(store, rng, &format!("{name}.q"), dim, dim),
            wk: Linear::init(store, rng, &format!("{name}.k"), dim, dim),
            wv: Linear::init(store, rng, &format!("{name}.v"), dim, dim),
            wo: Linear::init(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn apply(&self, tape: &mut Tape, pv: &[Value], q_in: Value, kv_in: Value) -> Value {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.apply(tape, pv, q_in);
        let k = self.wk.apply(tape, pv, kv_in);
        let v = self.wv.apply(tape, pv, kv_in);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, a, b);
            let kh = tape.slice_cols(k, a, b);
            let vh = tape.slice_cols(v, a, b);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&heads);
        self.wo.apply(tape, pv, cat)
    }
}

/// Pre-norm transformer encoder layer: self-attention + feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::init(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim),
            ff1: Linear::init(store, rng, &format!("{name}.ff1"), dim, ffn),
            ff2: Linear::init(store, rng, &format!("{name}.ff2"), ffn, dim),
        }
    }

    pub fn apply(&self, tape: &mut Tape, pv: &[Value], x: Value) -> Value {
        let n = self.ln1.apply(tape, pv, x);
        let a = self.attn.apply(tape, pv, n, n);
        let x = tape.add(x, a);
        let n = self.ln2.apply(tape, pv, x);
        let f = self.ff1.apply(tape, pv, n);
        let f = tape.relu(f);
        let f = self.ff2.apply(tape, pv, f);
        tape.add(x, f)
    }
}

/// Pre-norm transformer decoder layer: query self-attention, cross-attention
/// over the encoder memory, feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_mem: LayerNorm,
    pub ln3: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl DecoderLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::init(store, rng, &format!("{name}.self"), dim, heads),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::init(store, rng, &format!("{name}.cross"), dim, heads),
            ln_mem: LayerNorm::init(store, &format!("{name}.lnmem"), dim),
            ln3: LayerNorm::init(store, &format!("{name}.ln3"), dim),
            ff1: Linear::init(store, rng, &format!("{name}.ff1"), dim, ffn),
            ff2: Linear::init(store, rng, &format!("{name}.ff2"), ffn, dim),
        }
    }

    pub fn apply(&self, tape: &mut Tape, pv: &[Value], x: Value, memory: Value) -> Value {
        let n = self.ln1.apply(tape, pv, x);
        let a = self.self_attn.apply(tape, pv, n, n);
        let x = tape.add(x, a);
        let nq = self.ln2.apply(tape, pv, x);
        let nm = self.ln_mem.apply(tape, pv, memory);
        let a = self.cross_attn.apply(tape, pv, nq, nm);
        let x = tape.add(x, a);
        let n = self.ln3.apply(tape, pv, x);
        let f = self.ff1.apply(tape, pv, n);
        let f = tape.relu(f);
        let f = self.ff2.apply(tape, pv, f);
        tape.add(x, f)
    }
}
