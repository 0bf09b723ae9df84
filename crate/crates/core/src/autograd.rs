//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough state
//! to run its adjoint. [`Tape::backward`] walks the nodes in reverse and
//! returns a [`Gradients`] table indexed by [`Var`]. Nodes whose inputs never
//! reach a gradient-requiring leaf are skipped during the backward sweep.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, padding and dilation of a 2-D convolution, per axis `(h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvGeom {
    pub const fn unit() -> Self {
        Self {
            stride: (1, 1),
            pad: (0, 0),
            dilation: (1, 1),
        }
    }

    /// Stride-1 geometry padded so a `kh x kw` kernel keeps the spatial size.
    pub const fn same(kh: usize, kw: usize, dh: usize, dw: usize) -> Self {
        Self {
            stride: (1, 1),
            pad: ((kh - 1) * dh / 2, (kw - 1) * dw / 2),
            dilation: (dh, dw),
        }
    }

    pub fn out_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let eh = self.dilation.0 * (kh - 1) + 1;
        let ew = self.dilation.1 * (kw - 1) + 1;
        let ph = h + 2 * self.pad.0;
        let pw = w + 2 * self.pad.1;
        if ph < eh || pw < ew {
            return None;
        }
        Some(((ph - eh) / self.stride.0 + 1, (pw - ew) / self.stride.1 + 1))
    }
}

enum Op<T> {
    Constant,
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulMask {
        x: Var,
        mask: Var,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Affine {
        x: Var,
        a: T,
    },
    Concat(Vec<Var>),
    Resize(Var),
    Permute {
        x: Var,
        perm: [usize; 4],
    },
    Reshape(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    Bce {
        p: Var,
        target: Tensor<T>,
        eps: T,
    },
    Dice {
        p: Var,
        target: Tensor<T>,
        smooth: T,
    },
    WeightedSum(Vec<(Var, T)>),
    Dot {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel statistics produced by a batch-statistics normalization pass,
/// used by callers to maintain running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, expected: Shape, got: Shape) -> Error {
    Error::Shape { op, expected, got }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A value whose gradient is requested.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims();
        let (co, wci, kh, kw) = self.value(w).dims();
        if wci != ci {
            return Err(shape_err("conv2d", [co, ci, kh, kw], self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, co, 1, 1] {
                return Err(shape_err("conv2d bias", [1, co, 1, 1], self.shape(b)));
            }
        }
        let (ho, wo) = geom
            .out_size(h, wd, kh, kw)
            .ok_or_else(|| shape_err("conv2d", [n, ci, kh, kw], [n, ci, h, wd]))?;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        let kdim = ci * kh * kw;
        let hw = ho * wo;
        let direct = is_direct(kh, kw, geom);
        let mut cols = if direct {
            Vec::new()
        } else {
            vec![T::zero(); kdim * hw]
        };
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            for s in 0..n {
                let src: &[T] = if direct {
                    xv.sample(s)
                } else {
                    im2col(xv.sample(s), ci, h, wd, kh, kw, ho, wo, geom, &mut cols);
                    &cols
                };
                let dst = out.sample_mut(s);
                if let Some(b) = b {
                    let bv = self.nodes[b.0].value.data();
                    for (c, row) in dst.chunks_mut(hw).enumerate() {
                        row.fill(bv[c]);
                    }
                }
                let beta = if b.is_some() { T::one() } else { T::zero() };
                T::gemm(
                    co,
                    kdim,
                    hw,
                    T::one(),
                    wv,
                    kdim as isize,
                    1,
                    src,
                    hw as isize,
                    1,
                    beta,
                    dst,
                    hw as isize,
                    1,
                );
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, ng))
    }

    /// Normalization with statistics over `(n, h, w)` per channel.
    ///
    /// With `running = None` batch statistics are used and returned; with
    /// `Some((mean, var))` the given statistics are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(x).dims();
        for p in [gamma, beta] {
            if self.shape(p) != [1, c, 1, 1] {
                return Err(shape_err("batch_norm", [1, c, 1, 1], self.shape(p)));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let batch_stats = running.is_none();
        let mut stats = None;
        match running {
            None => {
                let mf = T::from_usize(m).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * hw;
                        for &v in &xv[base..base + hw] {
                            s += v;
                        }
                    }
                    let mu = s / mf;
                    let mut q = T::zero();
                    for s_i in 0..n {
                        let base = (s_i * c + ch) * hw;
                        for &v in &xv[base..base + hw] {
                            q += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / mf;
                }
                let unbiased = if m > 1 {
                    let scale = mf / T::from_usize(m - 1).unwrap();
                    var.iter().map(|&v| v * scale).collect()
                } else {
                    var.clone()
                };
                stats = Some(BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                });
            }
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err("batch_norm stats", [1, c, 1, 1], [1, rm.len(), 1, 1]));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let base = (s_i * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let out = Tensor::from_vec([n, c, h, w], out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Multiplies every channel of `x` by the single-channel `mask`.
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(mask) != [n, 1, h, w] {
            return Err(shape_err("mul_mask", [n, 1, h, w], self.shape(mask)));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mv = self.value(mask).data();
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            let mrow = &mv[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in 0..hw {
                    out[base + i] = xv[base + i] * mrow[i];
                }
            }
        }
        let ng = self.ng(x) || self.ng(mask);
        let out = Tensor::from_vec([n, c, h, w], out)?;
        Ok(self.push(out, Op::MulMask { x, mask }, ng))
    }

    /// Multiplies `x` by a learnable scalar `s` of shape `[1, 1, 1, 1]`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1, 1, 1, 1] {
            return Err(shape_err("scale_by", [1, 1, 1, 1], self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::ScaleBy { x, s }, ng))
    }

    /// `a * x + b` with constant coefficients.
    pub fn affine(&mut self, x: Var, a: T, b: T) -> Var {
        let out = self.value(x).map(|v| a * v + b);
        let ng = self.ng(x);
        self.push(out, Op::Affine { x, a }, ng)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat"))?;
        let [n, _, h, w] = self.shape(first);
        let mut ctot = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(shape_err("concat", [n, s[1], h, w], s));
            }
            ctot += s[1];
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).sample(s));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let out = Tensor::from_vec([n, ctot, h, w], out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Bilinear resampling with half-pixel centers (corner alignment off).
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        if (oh, ow) == (h, w) {
            return x;
        }
        let out = resize_bilinear(self.value(x), oh, ow);
        debug_assert_eq!(out.shape(), [n, c, oh, ow]);
        let ng = self.ng(x);
        self.push(out, Op::Resize(x), ng)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: [usize; 4]) -> Var {
        let out = permute(self.value(x), perm);
        let ng = self.ng(x);
        self.push(out, Op::Permute { x, perm }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        if numel(&shape) != numel(&self.shape(x)) {
            return Err(shape_err("reshape", shape, self.shape(x)));
        }
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Batched matrix product over axis 1: `a` is `[1, B, M, K]`; `b` is
    /// `[1, B, K, N]`, or `[1, B, N, K]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let [one, bs, m, k] = self.shape(a);
        let sb = self.shape(b);
        let (kb, n) = if trans_b { (sb[3], sb[2]) } else { (sb[2], sb[3]) };
        if one != 1 || sb[0] != 1 || sb[1] != bs || kb != k {
            return Err(shape_err("bmm", [1, bs, k, n], sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                ab,
                k as isize,
                1,
                bb,
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        let out = Tensor::from_vec([1, bs, m, n], out)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, ng))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let w = s[3];
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(w) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Mean binary cross-entropy of probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(shape_err("bce", target.shape(), self.shape(p)));
        }
        let value = bce_value(self.value(p), target, eps);
        let ng = self.ng(p);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Bce {
                p,
                target: target.clone(),
                eps,
            },
            ng,
        ))
    }

    /// Soft Dice loss per sample, averaged over the batch.
    pub fn dice(&mut self, p: Var, target: &Tensor<T>, smooth: T) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(shape_err("dice", target.shape(), self.shape(p)));
        }
        let value = dice_value(self.value(p), target, smooth);
        let ng = self.ng(p);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Dice {
                p,
                target: target.clone(),
                smooth,
            },
            ng,
        ))
    }

    /// `sum_i c_i * v_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, c) in terms {
            if self.shape(v) != [1, 1, 1, 1] {
                return Err(shape_err("weighted_sum", [1, 1, 1, 1], self.shape(v)));
            }
            acc += c * self.value(v).data()[0];
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Scalar projection `sum(x * weights)`.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(shape_err("dot", weights.shape(), self.shape(x)));
        }
        let v = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(v), Op::Dot { x, weights }, ng))
    }

    /// Runs the adjoint sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.adjoint(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn adjoint(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Conv { x, w, b, geom } => self.conv_adjoint(*x, *w, *b, *geom, gy, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = gy.dims();
                let hw = h * w;
                let g = self.value(*gamma).data();
                let dy = gy.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for j in base..base + hw {
                            dgamma[ch] += dy[j] * xhat[j];
                            dbeta[ch] += dy[j];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    if *batch_stats {
                        let mf = T::from_usize(n * hw).unwrap();
                        for ch in 0..c {
                            // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                            let k = g[ch] * inv_std[ch] / mf;
                            for s in 0..n {
                                let base = (s * c + ch) * hw;
                                for j in base..base + hw {
                                    dx[j] = k * (mf * dy[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                                }
                            }
                        }
                    } else {
                        for s in 0..n {
                            for ch in 0..c {
                                let k = g[ch] * inv_std[ch];
                                let base = (s * c + ch) * hw;
                                for j in base..base + hw {
                                    dx[j] = k * dy[j];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), dx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::from_vec([1, c, 1, 1], dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec([1, c, 1, 1], dbeta).unwrap());
            }
            Op::Relu(x) => {
                let g = gy.zip_map(&node.value, |d, y| if y > T::zero() { d } else { T::zero() });
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = gy.zip_map(&node.value, |d, y| d * y * (T::one() - y));
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, gy.zip_map(self.value(*b), |d, v| d * v));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, gy.zip_map(self.value(*a), |d, v| d * v));
                }
            }
            Op::MulMask { x, mask } => {
                let (n, c, h, w) = gy.dims();
                let hw = h * w;
                let dy = gy.data();
                let xv = self.value(*x).data();
                let mv = self.value(*mask).data();
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for j in 0..hw {
                                dx[base + j] = dy[base + j] * mv[s * hw + j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), dx).unwrap());
                }
                if self.ng(*mask) {
                    let mut dm = vec![T::zero(); n * hw];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for j in 0..hw {
                                dm[s * hw + j] += dy[base + j] * xv[base + j];
                            }
                        }
                    }
                    self.accumulate(grads, *mask, Tensor::from_vec([n, 1, h, w], dm).unwrap());
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.ng(*x) {
                    self.accumulate(grads, *x, gy.map(|d| d * sv));
                }
                if self.ng(*s) {
                    let ds = gy
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .fold(T::zero(), |acc, (&d, &v)| acc + d * v);
                    self.accumulate(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::Affine { x, a } => {
                let a = *a;
                self.accumulate(grads, *x, gy.map(|d| d * a));
            }
            Op::Concat(parts) => {
                let (n, _, h, w) = gy.dims();
                let hw = h * w;
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.ng(p) {
                        let mut g = Tensor::zeros([n, c, h, w]);
                        for s in 0..n {
                            let src = &gy.sample(s)[off * hw..(off + c) * hw];
                            g.sample_mut(s).copy_from_slice(src);
                        }
                        self.accumulate(grads, p, g);
                    }
                    off += c;
                }
            }
            Op::Resize(x) => {
                let [_, _, h, w] = self.shape(*x);
                self.accumulate(grads, *x, resize_bilinear_adjoint(gy, h, w));
            }
            Op::Permute { x, perm } => {
                let mut inv = [0usize; 4];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, permute(gy, inv));
            }
            Op::Reshape(x) => {
                let g = gy.clone().reshaped(self.shape(*x)).unwrap();
                self.accumulate(grads, *x, g);
            }
            Op::Bmm { a, b, trans_b } => {
                let [_, bs, m, k] = self.shape(*a);
                let n = gy.shape()[3];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let dc = gy.data();
                if self.ng(*a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        let bb = &bv[i * k * n..(i + 1) * k * n];
                        // da = dc * b^T (b: k x n) or dc * b (b: n x k)
                        let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &dc[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            bb,
                            rsb,
                            csb,
                            T::zero(),
                            &mut da[i * m * k..(i + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_vec([1, bs, m, k], da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        let ab = &av[i * m * k..(i + 1) * m * k];
                        let dcb = &dc[i * m * n..(i + 1) * m * n];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // db (n x k) = dc^T a
                            T::gemm(n, m, k, T::one(), dcb, 1, n as isize, ab, k as isize, 1, T::zero(), dst, k as isize, 1);
                        } else {
                            // db (k x n) = a^T dc
                            T::gemm(k, m, n, T::one(), ab, 1, k as isize, dcb, n as isize, 1, T::zero(), dst, n as isize, 1);
                        }
                    }
                    let shape = self.shape(*b);
                    self.accumulate(grads, *b, Tensor::from_vec(shape, db).unwrap());
                }
            }
            Op::Softmax(x) => {
                let w = gy.shape()[3];
                let mut dx = gy.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(w).zip(node.value.data().chunks(w)) {
                    let dotp = drow
                        .iter()
                        .zip(yrow)
                        .fold(T::zero(), |acc, (&d, &y)| acc + d * y);
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dotp);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Bce { p, target, eps } => {
                let seed = gy.data()[0];
                let pv = self.value(*p);
                let m = T::from_usize(pv.len()).unwrap();
                let lo = *eps;
                let hi = T::one() - *eps;
                let g = pv.zip_map(target, |pp, y| {
                    if pp <= lo || pp >= hi {
                        T::zero()
                    } else {
                        -seed * (y / pp - (T::one() - y) / (T::one() - pp)) / m
                    }
                });
                self.accumulate(grads, *p, g);
            }
            Op::Dice { p, target, smooth } => {
                let seed = gy.data()[0];
                let pv = self.value(*p);
                let n = pv.shape()[0];
                let nf = T::from_usize(n).unwrap();
                let mut g = Tensor::zeros(pv.shape());
                for s in 0..n {
                    let ps = pv.sample(s);
                    let ys = target.sample(s);
                    let (inter, sp, sy) = dice_sums(ps, ys);
                    let two = T::lit(2.0);
                    let num = two * inter + *smooth;
                    let den = sp + sy + *smooth;
                    let gs = g.sample_mut(s);
                    for j in 0..ps.len() {
                        gs[j] = -seed * (two * ys[j] * den - num) / (den * den) / nf;
                    }
                }
                self.accumulate(grads, *p, g);
            }
            Op::WeightedSum(terms) => {
                let seed = gy.data()[0];
                for &(v, c) in terms {
                    self.accumulate(grads, v, Tensor::scalar(seed * c));
                }
            }
            Op::Dot { x, weights } => {
                let seed = gy.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * seed));
            }
        }
    }

    fn conv_adjoint(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, ci, h, wd) = self.value(x).dims();
        let (co, _, kh, kw) = self.value(w).dims();
        let (_, _, ho, wo) = gy.dims();
        let hw = ho * wo;
        let kdim = ci * kh * kw;
        let direct = is_direct(kh, kw, geom);
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        if let Some(b) = b {
            if self.ng(b) {
                let mut db = vec![T::zero(); co];
                for s in 0..n {
                    for (c, row) in gy.sample(s).chunks(hw).enumerate() {
                        db[c] += row.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
                self.accumulate(grads, b, Tensor::from_vec([1, co, 1, 1], db).unwrap());
            }
        }
        if !need_x && !need_w {
            return;
        }
        let xv = self.value(x);
        let wv = self.value(w).data();
        let mut dw = if need_w { vec![T::zero(); co * kdim] } else { Vec::new() };
        let mut dx = if need_x {
            Tensor::zeros(xv.shape())
        } else {
            Tensor::zeros([0, 0, 0, 0])
        };
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); kdim * hw] };
        let mut dcols = if need_x && !direct { vec![T::zero(); kdim * hw] } else { Vec::new() };
        for s in 0..n {
            let dys = gy.sample(s);
            if need_w {
                let src: &[T] = if direct {
                    xv.sample(s)
                } else {
                    im2col(xv.sample(s), ci, h, wd, kh, kw, ho, wo, geom, &mut cols);
                    &cols
                };
                // dw += dy (co x hw) * cols^T (hw x kdim)
                T::gemm(co, hw, kdim, T::one(), dys, hw as isize, 1, src, 1, hw as isize, T::one(), &mut dw, kdim as isize, 1);
            }
            if need_x {
                let dst: &mut [T] = if direct { dx.sample_mut(s) } else { &mut dcols };
                // dcols = w^T (kdim x co) * dy (co x hw)
                T::gemm(kdim, co, hw, T::one(), wv, 1, kdim as isize, dys, hw as isize, 1, T::zero(), dst, hw as isize, 1);
                if !direct {
                    col2im(&dcols, ci, h, wd, kh, kw, ho, wo, geom, dx.sample_mut(s));
                }
            }
        }
        if need_w {
            let shape = self.shape(w);
            self.accumulate(grads, w, Tensor::from_vec(shape, dw).unwrap());
        }
        if need_x {
            self.accumulate(grads, x, dx);
        }
    }
}

#[inline]
fn is_direct(kh: usize, kw: usize, geom: ConvGeom) -> bool {
    kh == 1 && kw == 1 && geom.stride == (1, 1) && geom.pad == (0, 0)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: ConvGeom,
    cols: &mut [T],
) {
    let hw = ho * wo;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let (dh, dw) = g.dilation;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * sh + ki * dh) as isize - ph as isize;
                    let seg = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    let off = (kj * dw) as isize - pw as isize;
                    for (ow, v) in seg.iter_mut().enumerate() {
                        let iw = (ow * sw) as isize + off;
                        *v = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: ConvGeom,
    dx: &mut [T],
) {
    let hw = ho * wo;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let (dh, dw) = g.dilation;
    for c in 0..ci {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * sh + ki * dh) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let off = (kj * dw) as isize - pw as isize;
                    for (ow, &v) in src[oh * wo..(oh + 1) * wo].iter().enumerate() {
                        let iw = (ow * sw) as isize + off;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Source taps `(i0, i1, lambda)` of a half-pixel-center bilinear resampler.
pub(crate) fn bilinear_taps<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let lam = pos - i0 as f64;
            (i0, i1, T::lit(lam))
        })
        .collect()
}

pub(crate) fn resize_bilinear<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims();
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let o = &mut dst[p * oh * ow..(p + 1) * oh * ow];
        for (yi, &(y0, y1, ly)) in ty.iter().enumerate() {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for (xi, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * lx;
                o[yi * ow + xi] = top + (bot - top) * ly;
            }
        }
    }
    out
}

fn resize_bilinear_adjoint<T: Real>(gy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = gy.dims();
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let src = gy.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        let g = &src[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for (yi, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (xi, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[yi * ow + xi];
                let top = v * (T::one() - ly);
                let bot = v * ly;
                d[y0 * w + x0] += top * (T::one() - lx);
                d[y0 * w + x1] += top * lx;
                d[y1 * w + x0] += bot * (T::one() - lx);
                d[y1 * w + x1] += bot * lx;
            }
        }
    }
    dx
}

fn permute<T: Real>(x: &Tensor<T>, perm: [usize; 4]) -> Tensor<T> {
    let s = x.shape();
    let os = [s[perm[0]], s[perm[1]], s[perm[2]], s[perm[3]]];
    let in_strides = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let st = [
        in_strides[perm[0]],
        in_strides[perm[1]],
        in_strides[perm[2]],
        in_strides[perm[3]],
    ];
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for a in 0..os[0] {
        for b in 0..os[1] {
            for c in 0..os[2] {
                let base = a * st[0] + b * st[1] + c * st[2];
                for d in 0..os[3] {
                    out.push(src[base + d * st[3]]);
                }
            }
        }
    }
    Tensor::from_vec(os, out).unwrap()
}

pub(crate) fn bce_value<T: Real>(p: &Tensor<T>, y: &Tensor<T>, eps: T) -> T {
    let m = T::from_usize(p.len()).unwrap();
    let s = p
        .data()
        .iter()
        .zip(y.data())
        .fold(T::zero(), |acc, (&pp, &yy)| {
            let c = pp.max(eps).min(T::one() - eps);
            acc - (yy * c.ln() + (T::one() - yy) * (T::one() - c).ln())
        });
    s / m
}

fn dice_sums<T: Real>(p: &[T], y: &[T]) -> (T, T, T) {
    p.iter().zip(y).fold(
        (T::zero(), T::zero(), T::zero()),
        |(i, sp, sy), (&a, &b)| (i + a * b, sp + a, sy + b),
    )
}

pub(crate) fn dice_value<T: Real>(p: &Tensor<T>, y: &Tensor<T>, smooth: T) -> T {
    let n = p.shape()[0];
    let mut total = T::zero();
    for s in 0..n {
        let (inter, sp, sy) = dice_sums(p.sample(s), y.sample(s));
        total += T::one() - (T::lit(2.0) * inter + smooth) / (sp + sy + smooth);
    }
    total / T::from_usize(n).unwrap()
}
