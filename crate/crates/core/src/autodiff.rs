//! Minimal reverse-mode automatic differentiation on `f64` matrices.
//!
//! A [`Tape`] is a write-once Wengert list: every operation appends its output
//! value plus a boxed backward closure. Calling [`Tape::backward`] consumes
//! the tape and walks it in reverse, accumulating gradients. All tensors are
//! two-dimensional; feature maps carry their spatial layout out of band (see
//! [`Conv2dShape`]).
//!
//! The engine is deliberately small: only the operations the detectors need,
//! every one of them checked against central finite differences in the tests
//! below.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

type BackFn = Box<dyn FnOnce(&Array2<f64>, &[Array2<f64>], &mut [Option<Array2<f64>>])>;

pub struct Tape {
    values: Vec<Array2<f64>>,
    backs: Vec<Option<BackFn>>,
}

/// Gradients extracted by [`Tape::backward`]. Nodes the loss never touched
/// report zeros of the right shape.
pub struct Grads {
    values: Vec<Array2<f64>>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Value) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.values[v.0].raw_dim()),
        }
    }

    pub fn take(&mut self, v: Value) -> Array2<f64> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Array2::zeros(self.values[v.0].raw_dim()),
        }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

/// Spatial layout for [`Tape::conv2d`]. Feature maps are stored `[h*w, c]`
/// row-major (token index = `row * w + col`).
#[derive(Debug, Clone, Copy)]
pub struct Conv2dShape {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dShape {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }
}

fn im2col(x: &Array2<f64>, sh: &Conv2dShape) -> Array2<f64> {
    let (oh, ow) = (sh.out_h(), sh.out_w());
    let mut cols = Array2::<f64>::zeros((oh * ow, sh.k * sh.k * sh.in_c));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    let ncol = sh.k * sh.k * sh.in_c;
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * ncol;
            for ky in 0..sh.k {
                let iy = (oy * sh.stride + ky) as isize - sh.pad as isize;
                if iy < 0 || iy >= sh.in_h as isize {
                    continue;
                }
                for kx in 0..sh.k {
                    let ix = (ox * sh.stride + kx) as isize - sh.pad as isize;
                    if ix < 0 || ix >= sh.in_w as isize {
                        continue;
                    }
                    let src = (iy as usize * sh.in_w + ix as usize) * sh.in_c;
                    let dst = base + (ky * sh.k + kx) * sh.in_c;
                    cs[dst..dst + sh.in_c].copy_from_slice(&xs[src..src + sh.in_c]);
                }
            }
        }
    }
    cols
}

fn col2im(gcols: &Array2<f64>, sh: &Conv2dShape) -> Array2<f64> {
    let (oh, ow) = (sh.out_h(), sh.out_w());
    let mut gx = Array2::<f64>::zeros((sh.in_h * sh.in_w, sh.in_c));
    let gcols = gcols.as_standard_layout();
    let gs = gcols.as_slice().expect("standard layout");
    let xs = gx.as_slice_mut().expect("standard layout");
    let ncol = sh.k * sh.k * sh.in_c;
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * ncol;
            for ky in 0..sh.k {
                let iy = (oy * sh.stride + ky) as isize - sh.pad as isize;
                if iy < 0 || iy >= sh.in_h as isize {
                    continue;
                }
                for kx in 0..sh.k {
                    let ix = (ox * sh.stride + kx) as isize - sh.pad as isize;
                    if ix < 0 || ix >= sh.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * sh.in_w + ix as usize) * sh.in_c;
                    let src = base + (ky * sh.k + kx) * sh.in_c;
                    for c in 0..sh.in_c {
                        xs[dst + c] += gs[src + c];
                    }
                }
            }
        }
    }
    gx
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::with_capacity(256),
            backs: Vec::with_capacity(256),
        }
    }

    fn push(&mut self, v: Array2<f64>, back: Option<BackFn>) -> Value {
        self.values.push(v);
        self.backs.push(back);
        Value(self.values.len() - 1)
    }

    /// Insert an input node. Gradients accumulate here but do not propagate
    /// further; use this for parameters and constants alike.
    pub fn leaf(&mut self, v: Array2<f64>) -> Value {
        self.push(v, None)
    }

    pub fn value(&self, v: Value) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Value) -> f64 {
        debug_assert_eq!(self.values[v.0].len(), 1);
        self.values[v.0][[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy a value onto the tape with no backward edge.
    pub fn detach(&mut self, x: Value) -> Value {
        let v = self.values[x.0].clone();
        self.leaf(v)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let out = self.values[a.0].dot(&self.values[b.0]);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                accumulate(&mut grads[ai], g.dot(&vals[bi].t()));
                accumulate(&mut grads[bi], vals[ai].t().dot(g));
            })),
        )
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let out = &self.values[a.0] + &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                accumulate(&mut grads[ai], g.clone());
                accumulate(&mut grads[bi], g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        let out = &self.values[a.0] - &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                accumulate(&mut grads[ai], g.clone());
                accumulate(&mut grads[bi], -g);
            })),
        )
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        let out = &self.values[a.0] * &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                accumulate(&mut grads[ai], g * &vals[bi]);
                accumulate(&mut grads[bi], g * &vals[ai]);
            })),
        )
    }

    pub fn div(&mut self, a: Value, b: Value) -> Value {
        let out = &self.values[a.0] / &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                accumulate(&mut grads[ai], g / &vals[bi]);
                let gb = -(g * &vals[ai]) / (&vals[bi] * &vals[bi]);
                accumulate(&mut grads[bi], gb);
            })),
        )
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min2(&mut self, a: Value, b: Value) -> Value {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        let mut out = va.clone();
        let mut take_a = Array2::<f64>::zeros(va.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(&mut take_a)
            .and(vb)
            .for_each(|o, t, &bv| {
                if *o <= bv {
                    *t = 1.0;
                } else {
                    *o = bv;
                }
            });
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                accumulate(&mut grads[ai], g * &take_a);
                accumulate(&mut grads[bi], g * &(1.0 - &take_a));
            })),
        )
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn max2(&mut self, a: Value, b: Value) -> Value {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        let mut out = va.clone();
        let mut take_a = Array2::<f64>::zeros(va.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(&mut take_a)
            .and(vb)
            .for_each(|o, t, &bv| {
                if *o >= bv {
                    *t = 1.0;
                } else {
                    *o = bv;
                }
            });
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                accumulate(&mut grads[ai], g * &take_a);
                accumulate(&mut grads[bi], g * &(1.0 - &take_a));
            })),
        )
    }

    /// Add a `[1,n]` bias row to every row of `x`.
    pub fn add_row(&mut self, x: Value, bias: Value) -> Value {
        let out = &self.values[x.0] + &self.values[bias.0];
        let (xi, bi) = (x.0, bias.0);
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                accumulate(&mut grads[xi], g.clone());
                let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(&mut grads[bi], gb);
            })),
        )
    }

    pub fn scale(&mut self, x: Value, k: f64) -> Value {
        let out = &self.values[x.0] * k;
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                accumulate(&mut grads[xi], g * k);
            })),
        )
    }

    /// Elementwise add of a constant array (no gradient to the constant).
    pub fn add_const(&mut self, x: Value, c: &Array2<f64>) -> Value {
        let out = &self.values[x.0] + c;
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                accumulate(&mut grads[xi], g.clone());
            })),
        )
    }

    /// Elementwise multiply by a constant array.
    pub fn mul_const(&mut self, x: Value, c: &Array2<f64>) -> Value {
        let out = &self.values[x.0] * c;
        let xi = x.0;
        let c = c.clone();
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                accumulate(&mut grads[xi], g * &c);
            })),
        )
    }

    /// Per-column affine map `y[:,j] = x[:,j] * scale[j] + shift[j]`.
    pub fn col_affine(&mut self, x: Value, scale: &[f64], shift: &[f64]) -> Value {
        let v = &self.values[x.0];
        assert_eq!(v.ncols(), scale.len());
        assert_eq!(v.ncols(), shift.len());
        let mut out = v.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|t| t * scale[j] + shift[j]);
        }
        let xi = x.0;
        let scale = scale.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                let mut gx = g.clone();
                for (j, mut col) in gx.axis_iter_mut(Axis(1)).enumerate() {
                    col.mapv_inplace(|t| t * scale[j]);
                }
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let out = self.values[x.0].mapv(|t| t.max(0.0));
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let gx = g * &vals[xi].mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    pub fn abs(&mut self, x: Value) -> Value {
        let out = self.values[x.0].mapv(f64::abs);
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let gx = g * &vals[xi].mapv(|t| {
                    if t > 0.0 {
                        1.0
                    } else if t < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        let out = self.values[x.0].mapv(stable_sigmoid);
        let y = out.clone();
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                let gx = g * &(&y * &(1.0 - &y));
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    /// `ln(1 + e^x)`, numerically stable; smooth positive transform.
    pub fn softplus(&mut self, x: Value) -> Value {
        let out = self.values[x.0].mapv(stable_softplus);
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let gx = g * &vals[xi].mapv(stable_sigmoid);
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    /// Square root with a guarded backward: zero gradient where `x` is ~0.
    pub fn sqrt_safe(&mut self, x: Value) -> Value {
        let out = self.values[x.0].mapv(|t| t.max(0.0).sqrt());
        let y = out.clone();
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                let gx = g * &y.mapv(|t| if t > 1e-150 { 0.5 / t } else { 0.0 });
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    pub fn sum_all(&mut self, x: Value) -> Value {
        let s = self.values[x.0].sum();
        let xi = x.0;
        let dim = self.values[x.0].raw_dim();
        self.push(
            Array2::from_elem((1, 1), s),
            Some(Box::new(move |g, _, grads| {
                accumulate(&mut grads[xi], Array2::from_elem(dim, g[[0, 0]]));
            })),
        )
    }

    pub fn mean_all(&mut self, x: Value) -> Value {
        let n = self.values[x.0].len() as f64;
        let s = self.values[x.0].sum() / n;
        let xi = x.0;
        let dim = self.values[x.0].raw_dim();
        self.push(
            Array2::from_elem((1, 1), s),
            Some(Box::new(move |g, _, grads| {
                accumulate(&mut grads[xi], Array2::from_elem(dim, g[[0, 0]] / n));
            })),
        )
    }

    /// Row-wise sum: `[m,n] -> [m,1]`.
    pub fn row_sum(&mut self, x: Value) -> Value {
        let out = self.values[x.0].sum_axis(Axis(1)).insert_axis(Axis(1));
        let xi = x.0;
        let ncols = self.values[x.0].ncols();
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let mut gx = Array2::zeros(vals[xi].raw_dim());
                for j in 0..ncols {
                    gx.slice_mut(s![.., j]).assign(&g.slice(s![.., 0]));
                }
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    pub fn softmax_rows(&mut self, x: Value) -> Value {
        let v = &self.values[x.0];
        let mut out = v.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|t| (t - m).exp());
            let s = row.sum();
            row.mapv_inplace(|t| t / s);
        }
        let y = out.clone();
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                let mut gx = g.clone();
                for (mut grow, yrow) in gx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    let dot = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>();
                    for (ge, &ye) in grow.iter_mut().zip(yrow.iter()) {
                        *ge = ye * (*ge - dot);
                    }
                }
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    /// Layer normalization over each row with learnable `[1,n]` gain and bias.
    pub fn layer_norm(&mut self, x: Value, gain: Value, bias: Value, eps: f64) -> Value {
        let v = &self.values[x.0];
        let n = v.ncols() as f64;
        let mut xhat = v.clone();
        let mut inv_std = Vec::with_capacity(v.nrows());
        for mut row in xhat.axis_iter_mut(Axis(0)) {
            let mu = row.sum() / n;
            row.mapv_inplace(|t| t - mu);
            let var = row.iter().map(|t| t * t).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            row.mapv_inplace(|t| t * is);
        }
        let out = &xhat * &self.values[gain.0] + &self.values[bias.0];
        let (xi, gi, bi) = (x.0, gain.0, bias.0);
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let gain_row = &vals[gi];
                // gain/bias grads
                let ggain = (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(&mut grads[gi], ggain);
                let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(&mut grads[bi], gbias);
                // input grad
                let gxhat = g * gain_row;
                let mut gx = gxhat.clone();
                for ((mut grow, xrow), &is) in gx
                    .axis_iter_mut(Axis(0))
                    .zip(xhat.axis_iter(Axis(0)))
                    .zip(inv_std.iter())
                {
                    let mean_g = grow.sum() / n;
                    let mean_gx = grow.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (ge, &xe) in grow.iter_mut().zip(xrow.iter()) {
                        *ge = is * (*ge - mean_g - xe * mean_gx);
                    }
                }
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    pub fn transpose(&mut self, x: Value) -> Value {
        let out = self.values[x.0].t().to_owned();
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                accumulate(&mut grads[xi], g.t().to_owned());
            })),
        )
    }

    pub fn slice_cols(&mut self, x: Value, start: usize, end: usize) -> Value {
        let out = self.values[x.0].slice(s![.., start..end]).to_owned();
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let mut gx = Array2::zeros(vals[xi].raw_dim());
                gx.slice_mut(s![.., start..end]).assign(g);
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("column concat");
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let widths: Vec<usize> = parts.iter().map(|p| self.values[p.0].ncols()).collect();
        self.push(
            out,
            Some(Box::new(move |g, _, grads| {
                let mut off = 0;
                for (&i, &w) in idx.iter().zip(widths.iter()) {
                    let gp = g.slice(s![.., off..off + w]).to_owned();
                    accumulate(&mut grads[i], gp);
                    off += w;
                }
            })),
        )
    }

    /// Select rows by index; backward scatter-adds.
    pub fn gather_rows(&mut self, x: Value, idx: &[usize]) -> Value {
        let v = &self.values[x.0];
        let mut out = Array2::zeros((idx.len(), v.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&v.row(i));
        }
        let xi = x.0;
        let idx = idx.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let mut gx = Array2::zeros(vals[xi].raw_dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = gx.row_mut(i);
                    row += &g.row(r);
                }
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    /// 3×3-style convolution on a `[h*w, c]` map via im2col + matmul.
    /// `w` has shape `[k*k*in_c, out_c]`, `bias` is `[1, out_c]`.
    pub fn conv2d(&mut self, x: Value, w: Value, bias: Value, sh: Conv2dShape) -> Value {
        let cols = im2col(&self.values[x.0], &sh);
        let out = cols.dot(&self.values[w.0]) + &self.values[bias.0];
        let (xi, wi, bi) = (x.0, w.0, bias.0);
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                accumulate(&mut grads[wi], cols.t().dot(g));
                accumulate(&mut grads[bi], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gcols = g.dot(&vals[wi].t());
                accumulate(&mut grads[xi], col2im(&gcols, &sh));
            })),
        )
    }

    /// Binary cross-entropy with logits against a constant target matrix.
    /// Output has the same shape as `logits` (per-element losses).
    pub fn bce_logits(&mut self, logits: Value, targets: &Array2<f64>) -> Value {
        let x = &self.values[logits.0];
        let mut out = Array2::zeros(x.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(x)
            .and(targets)
            .for_each(|o, &xv, &tv| {
                // max(x,0) - x*t + ln(1+e^{-|x|})
                *o = xv.max(0.0) - xv * tv + (-xv.abs()).exp().ln_1p();
            });
        let xi = logits.0;
        let t = targets.clone();
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let gx = g * &(vals[xi].mapv(stable_sigmoid) - &t);
                accumulate(&mut grads[xi], gx);
            })),
        )
    }

    /// Focal sigmoid cross-entropy against a constant 0/1 target matrix.
    /// Per-element losses; the standard (alpha, gamma) form.
    pub fn focal_bce_logits(
        &mut self,
        logits: Value,
        targets: &Array2<f64>,
        alpha: f64,
        gamma: f64,
    ) -> Value {
        let x = &self.values[logits.0];
        let mut out = Array2::zeros(x.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(x)
            .and(targets)
            .for_each(|o, &xv, &tv| {
                let (logp, p) = log_sigmoid_pair(xv, tv);
                let a = if tv > 0.5 { alpha } else { 1.0 - alpha };
                // p here is the probability of the TRUE class.
                *o = -a * (1.0 - p).powf(gamma) * logp;
            });
        let xi = logits.0;
        let t = targets.clone();
        self.push(
            out,
            Some(Box::new(move |g, vals, grads| {
                let mut gx = Array2::zeros(vals[xi].raw_dim());
                ndarray::Zip::from(&mut gx)
                    .and(&vals[xi])
                    .and(&t)
                    .for_each(|gd, &xv, &tv| {
                        let (logp, p) = log_sigmoid_pair(xv, tv);
                        let a = if tv > 0.5 { alpha } else { 1.0 - alpha };
                        let q = 1.0 - p;
                        // dL/dz where z is the logit of the true class:
                        // a*q^gamma * (gamma*p*logp - q); flip sign for the
                        // negative class because z = -x there.
                        let dz = a * q.powf(gamma) * (gamma * p * logp - q);
                        *gd = if tv > 0.5 { dz } else { -dz };
                    });
                accumulate(&mut grads[xi], gx * g);
            })),
        )
    }

    /// Reverse pass from a scalar root. Consumes the tape.
    pub fn backward(mut self, root: Value) -> Grads {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar"
        );
        let n = self.values.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..n).rev() {
            let back = match self.backs[i].take() {
                Some(b) => b,
                None => continue,
            };
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            back(&gout, &self.values, &mut grads);
        }
        Grads {
            values: self.values,
            grads,
        }
    }
}

#[inline]
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `(ln p, p)` where `p` is the probability assigned to the true class `t`.
#[inline]
fn log_sigmoid_pair(x: f64, t: f64) -> (f64, f64) {
    let z = if t > 0.5 { x } else { -x };
    // ln sigmoid(z) = -softplus(-z)
    let logp = -stable_softplus(-z);
    (logp, stable_sigmoid(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Check d(scalar f(x))/dx against central differences at every entry.
    fn check_grad<F>(x0: &Array2<f64>, f: F, tol: f64)
    where
        F: Fn(&mut Tape, Value) -> Value,
    {
        let eval = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let out = f(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.leaf(x0.clone());
        let out = f(&mut t, v);
        let mut grads = t.backward(out);
        let analytic = grads.take(v);

        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let mut xp = x0.clone();
                xp[[i, j]] += h;
                let mut xm = x0.clone();
                xm[[i, j]] -= h;
                let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
                let a = analytic[[i, j]];
                let denom = fd.abs().max(a.abs()).max(1e-8);
                assert!(
                    (fd - a).abs() / denom < tol,
                    "grad mismatch at ({i},{j}): fd={fd} analytic={a}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 3, 4);
        let w = randn(&mut rng, 4, 2);
        check_grad(
            &x,
            |t, v| {
                let wv = t.leaf(w.clone());
                let y = t.matmul(v, wv);
                let y = t.relu(y);
                t.sum_all(y)
            },
            1e-4,
        );
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 4, 3).mapv(|v| v + 2.5); // keep away from kinks and zero-division
        let other = randn(&mut rng, 4, 3).mapv(|v| v + 4.0);
        for op in 0..6 {
            let o = other.clone();
            check_grad(
                &x,
                move |t, v| {
                    let ov = t.leaf(o.clone());
                    let y = match op {
                        0 => t.mul(v, ov),
                        1 => t.div(v, ov),
                        2 => t.sub(v, ov),
                        3 => t.min2(v, ov),
                        4 => t.max2(v, ov),
                        _ => t.add(v, ov),
                    };
                    t.mean_all(y)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn grad_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 5, 4);
        check_grad(&x, |t, v| { let y = t.sigmoid(v); t.sum_all(y) }, 1e-4);
        check_grad(&x, |t, v| { let y = t.softplus(v); t.sum_all(y) }, 1e-4);
        let pos = x.mapv(|v| v.abs() + 0.5);
        check_grad(&pos, |t, v| { let y = t.sqrt_safe(v); t.sum_all(y) }, 1e-4);
        check_grad(&x, |t, v| { let y = t.abs(v); t.sum_all(y) }, 1e-3);
    }

    #[test]
    fn grad_softmax_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, 3, 6);
        check_grad(
            &x,
            |t, v| {
                let y = t.softmax_rows(v);
                let w = t.leaf(Array2::from_shape_fn((6, 1), |(i, _)| 0.3 + i as f64 * 0.1));
                let z = t.matmul(y, w);
                t.sum_all(z)
            },
            1e-4,
        );
        let gain = randn(&mut rng, 1, 6).mapv(|v| v + 1.5);
        let bias = randn(&mut rng, 1, 6);
        let (g2, b2) = (gain.clone(), bias.clone());
        check_grad(
            &x,
            move |t, v| {
                let gv = t.leaf(g2.clone());
                let bv = t.leaf(b2.clone());
                let y = t.layer_norm(v, gv, bv, 1e-5);
                let y = t.mul(y, y);
                t.mean_all(y)
            },
            1e-3,
        );
        // and gradients w.r.t. gain/bias
        let x2 = x.clone();
        check_grad(
            &gain,
            move |t, v| {
                let xv = t.leaf(x2.clone());
                let bv = t.leaf(bias.clone());
                let y = t.layer_norm(xv, v, bv, 1e-5);
                let y = t.mul(y, y);
                t.mean_all(y)
            },
            1e-3,
        );
    }

    #[test]
    fn grad_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 4, 6);
        check_grad(
            &x,
            |t, v| {
                let a = t.slice_cols(v, 0, 3);
                let b = t.slice_cols(v, 3, 6);
                let c = t.concat_cols(&[b, a]);
                let d = t.transpose(c);
                let e = t.mul(d, d);
                t.sum_all(e)
            },
            1e-4,
        );
        check_grad(
            &x,
            |t, v| {
                let g = t.gather_rows(v, &[2, 0, 2]);
                let s = t.row_sum(g);
                let s = t.mul(s, s);
                t.sum_all(s)
            },
            1e-4,
        );
        check_grad(
            &x,
            |t, v| {
                let y = t.col_affine(v, &[1.0, -1.0, 2.0, 0.5, 1.0, -2.0], &[0.0, 1.0, 0.0, 0.5, -1.0, 0.0]);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            1e-4,
        );
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sh = Conv2dShape {
            in_h: 5,
            in_w: 4,
            in_c: 2,
            out_c: 3,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x = randn(&mut rng, sh.in_h * sh.in_w, sh.in_c);
        let w = randn(&mut rng, 9 * sh.in_c, sh.out_c);
        let b = randn(&mut rng, 1, sh.out_c);
        let (w2, b2) = (w.clone(), b.clone());
        check_grad(
            &x,
            move |t, v| {
                let wv = t.leaf(w2.clone());
                let bv = t.leaf(b2.clone());
                let y = t.conv2d(v, wv, bv, sh);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            1e-4,
        );
        let x2 = x.clone();
        let b3 = b.clone();
        check_grad(
            &w,
            move |t, v| {
                let xv = t.leaf(x2.clone());
                let bv = t.leaf(b3.clone());
                let y = t.conv2d(xv, v, bv, sh);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            1e-4,
        );
    }

    #[test]
    fn grad_bce_and_focal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, 5, 3).mapv(|v| v * 2.0);
        let t01 = Array2::from_shape_fn((5, 3), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { 0.0 });
        let tt = t01.clone();
        check_grad(
            &x,
            move |t, v| {
                let y = t.bce_logits(v, &tt);
                t.sum_all(y)
            },
            1e-4,
        );
        let tt2 = t01.clone();
        check_grad(
            &x,
            move |t, v| {
                let y = t.focal_bce_logits(v, &tt2, 0.25, 2.0);
                t.sum_all(y)
            },
            1e-3,
        );
    }

    #[test]
    fn focal_matches_bce_at_gamma_zero() {
        let x = array![[0.3, -1.2], [2.0, 0.0]];
        let t01 = array![[1.0, 0.0], [0.0, 1.0]];
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let f = tape.focal_bce_logits(v, &t01, 0.5, 0.0);
        let b = tape.bce_logits(v, &t01);
        let fv = tape.value(f).clone();
        let bv = tape.value(b).clone();
        // alpha=0.5 halves both classes
        for (a, b) in fv.iter().zip(bv.iter()) {
            assert!((a * 2.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        // y = x*x + x -> dy/dx = 2x + 1
        let x = array![[3.0]];
        let mut t = Tape::new();
        let v = t.leaf(x);
        let sq = t.mul(v, v);
        let y = t.add(sq, v);
        let s = t.sum_all(y);
        let mut g = t.backward(s);
        assert!((g.take(v)[[0, 0]] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = array![[2.0]];
        let mut t = Tape::new();
        let v = t.leaf(x);
        let d = t.detach(v);
        let y = t.mul(v, d);
        let s = t.sum_all(y);
        let mut g = t.backward(s);
        // only the live branch contributes: d/dv (v * const 2) = 2
        assert!((g.take(v)[[0, 0]] - 2.0).abs() < 1e-12);
    }
}
