//! Axis context aware module.
//!
//! Five parallel branches of pointwise, asymmetric and dilated convolutions,
//! each finished by an axis-aware attention block; the branch outputs are
//! concatenated, reduced to the inner width and added to a projected
//! shortcut of the input before a final ReLU.

use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{ConvGeom, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BRANCHES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcamConfig {
    pub inner: usize,
    /// Dilation of the `3x3` convolution in branch `k` (index `k - 1`).
    pub dilations: [usize; BRANCHES],
}

impl Default for AcamConfig {
    fn default() -> Self {
        Self {
            inner: 64,
            dilations: [1, 3, 5, 7, 9],
        }
    }
}

impl AcamConfig {
    /// Kernel extent `2k - 1` of the asymmetric pair in branch `k`.
    pub fn kernel_extent(k: usize) -> usize {
        2 * k - 1
    }

    pub fn key_channels(c: usize) -> usize {
        (c / 8).max(8)
    }
}

/// Non-local attention restricted to the vertical and horizontal axes.
///
/// `out = x + gamma * (A_H(x) + A_W(x))`, where `A_H` attends over the rows
/// of each column and `A_W` over the columns of each row. Both axes share the
/// query/key/value projections and read the same input.
#[derive(Clone, Debug)]
pub struct AxisAwareBlock {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub gamma: ParamId,
}

impl AxisAwareBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize) -> Self {
        let ck = AcamConfig::key_channels(c);
        Self {
            query: Conv2d::pointwise(store, rng, &alloc::format!("{name}.query"), c, ck, true),
            key: Conv2d::pointwise(store, rng, &alloc::format!("{name}.key"), c, ck, true),
            value: Conv2d::pointwise(store, rng, &alloc::format!("{name}.value"), c, c, true),
            gamma: store.add(alloc::format!("{name}.gamma"), ParamKind::Trainable, Tensor::zeros([1, 1, 1, 1])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let [n, c, h, w] = g.tape.shape(x);
        if c < 8 {
            return Err(Error::Invalid(alloc::format!("axis-aware block needs at least 8 channels, got {c}")));
        }
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let ck = g.tape.shape(q)[1];

        // columns: batch over (n, w), sequence over h
        let qc = g.tape.permute(q, [0, 3, 2, 1]);
        let qc = g.tape.reshape(qc, [1, n * w, h, ck])?;
        let kc = g.tape.permute(k, [0, 3, 2, 1]);
        let kc = g.tape.reshape(kc, [1, n * w, h, ck])?;
        let vc = g.tape.permute(v, [0, 3, 2, 1]);
        let vc = g.tape.reshape(vc, [1, n * w, h, c])?;
        let sc = g.tape.bmm(qc, kc, true)?;
        let ac = g.tape.softmax(sc);
        let oc = g.tape.bmm(ac, vc, false)?;
        let oc = g.tape.reshape(oc, [n, w, h, c])?;
        let along_h = g.tape.permute(oc, [0, 3, 2, 1]);

        // rows: batch over (n, h), sequence over w
        let qr = g.tape.permute(q, [0, 2, 3, 1]);
        let qr = g.tape.reshape(qr, [1, n * h, w, ck])?;
        let kr = g.tape.permute(k, [0, 2, 3, 1]);
        let kr = g.tape.reshape(kr, [1, n * h, w, ck])?;
        let vr = g.tape.permute(v, [0, 2, 3, 1]);
        let vr = g.tape.reshape(vr, [1, n * h, w, c])?;
        let sr = g.tape.bmm(qr, kr, true)?;
        let ar = g.tape.softmax(sr);
        let or = g.tape.bmm(ar, vr, false)?;
        let or = g.tape.reshape(or, [n, h, w, c])?;
        let along_w = g.tape.permute(or, [0, 3, 1, 2]);

        let both = g.tape.add(along_h, along_w)?;
        let gamma = g.param(self.gamma);
        let scaled = g.tape.scale_by(both, gamma)?;
        g.tape.add(x, scaled)
    }
}

/// Branch `k`: `1x1` reduction, then for `k > 1` a `(2k-1)x1`, `1x(2k-1)`
/// pair and a dilated `3x3`, then attention.
#[derive(Clone, Debug)]
pub struct AcamBranch {
    pub k: usize,
    pub reduce: Conv2d,
    pub convs: Vec<Conv2d>,
    pub attention: AxisAwareBlock,
}

impl AcamBranch {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        k: usize,
        cfg: &AcamConfig,
    ) -> Result<Self> {
        if !(1..=BRANCHES).contains(&k) {
            return Err(Error::Invalid(alloc::format!("branch index {k} outside 1..=5")));
        }
        let c = cfg.inner;
        let reduce = Conv2d::pointwise(store, rng, &alloc::format!("{name}.reduce"), cin, c, true);
        let mut convs = Vec::new();
        if k > 1 {
            let e = AcamConfig::kernel_extent(k);
            let d = cfg.dilations[k - 1];
            convs.push(Conv2d::new(store, rng, &alloc::format!("{name}.vertical"), c, c, (e, 1), ConvGeom::same(e, 1, 1, 1), true));
            convs.push(Conv2d::new(store, rng, &alloc::format!("{name}.horizontal"), c, c, (1, e), ConvGeom::same(1, e, 1, 1), true));
            convs.push(Conv2d::same(store, rng, &alloc::format!("{name}.dilated"), c, c, 3, d, true));
        }
        let attention = AxisAwareBlock::new(store, rng, &alloc::format!("{name}.attention"), c);
        Ok(Self {
            k,
            reduce,
            convs,
            attention,
        })
    }

    /// Everything before the attention block.
    pub fn context<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.reduce.forward(g, x)?;
        for conv in &self.convs {
            y = conv.forward(g, y)?;
        }
        Ok(y)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.context(g, x)?;
        self.attention.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct Acam {
    pub branches: Vec<AcamBranch>,
    pub fuse: Conv2d,
    pub shortcut: Conv2d,
}

impl Acam {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cfg: &AcamConfig,
    ) -> Result<Self> {
        let branches = (1..=BRANCHES)
            .map(|k| AcamBranch::new(store, rng, &alloc::format!("{name}.branch{k}"), cin, k, cfg))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv2d::pointwise(store, rng, &alloc::format!("{name}.fuse"), BRANCHES * cfg.inner, cfg.inner, true);
        let shortcut = Conv2d::pointwise(store, rng, &alloc::format!("{name}.shortcut"), cin, cfg.inner, true);
        Ok(Self {
            branches,
            fuse,
            shortcut,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.tape.concat(&outs)?;
        let fused = self.fuse.forward(g, cat)?;
        let skip = self.shortcut.forward(g, x)?;
        let sum = g.tape.add(fused, skip)?;
        Ok(g.tape.relu(sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn zero_gamma_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let aab = AxisAwareBlock::new(&mut store, &mut rng(), "aab", 16);
        let x = Tensor::from_fn([2, 16, 5, 3], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new(&mut store, Mode::Eval);
        let xv = g.input(x.clone());
        let y = aab.forward(&mut g, xv).unwrap();
        assert_eq!(g.tape.value(y), &x);
    }

    #[test]
    fn constant_input_gives_constant_attention() {
        let mut store = ParamStore::<f64>::new();
        let aab = AxisAwareBlock::new(&mut store, &mut rng(), "aab", 8);
        store.value_mut(aab.gamma).data_mut()[0] = 0.7;
        let x = Tensor::from_fn([1, 8, 4, 6], |i| (i / 24) as f64 * 0.5 - 1.0);
        let mut g = Graph::new(&mut store, Mode::Eval);
        let xv = g.input(x);
        let y = aab.forward(&mut g, xv).unwrap();
        let out = g.tape.value(y);
        for c in 0..8 {
            let first = out.at(0, c, 0, 0);
            for i in 0..4 {
                for j in 0..6 {
                    assert!((out.at(0, c, i, j) - first).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn branches_preserve_spatial_size() {
        let mut store = ParamStore::<f32>::new();
        let cfg = AcamConfig::default();
        let mut r = rng();
        for k in 1..=5 {
            let b = AcamBranch::new(&mut store, &mut r, &alloc::format!("b{k}"), 12, k, &cfg).unwrap();
            let mut g = Graph::new(&mut store, Mode::Train);
            let x = g.input(Tensor::full([1, 12, 7, 5], 0.5));
            let y = b.forward(&mut g, x).unwrap();
            assert_eq!(g.tape.shape(y), [1, 64, 7, 5]);
        }
        assert!(AcamBranch::new(&mut store, &mut r, "bad", 12, 6, &cfg).is_err());
    }

    #[test]
    fn zero_input_zero_output() {
        let mut store = ParamStore::<f32>::new();
        let acam = Acam::new(&mut store, &mut rng(), "acam", 32, &AcamConfig::default()).unwrap();
        let mut g = Graph::new(&mut store, Mode::Train);
        let x = g.input(Tensor::zeros([1, 32, 4, 4]));
        let y = acam.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(y), [1, 64, 4, 4]);
        assert!(g.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_independent_of_level_size() {
        let mut a = ParamStore::<f32>::new();
        Acam::new(&mut a, &mut rng(), "acam", 128, &AcamConfig::default()).unwrap();
        let n = a.count();
        // pointwise reduce + three convs per branch k > 1, attention q/k/v + gamma
        let c = 64;
        let attn = 2 * (c * 8 + 8) + (c * c + c) + 1;
        let mut want = 0;
        for k in 1..=5 {
            want += 128 * c + c + attn;
            if k > 1 {
                let e = 2 * k - 1;
                want += 2 * (c * c * e + c) + c * c * 9 + c;
            }
        }
        want += 5 * c * c + c + 128 * c + c;
        assert_eq!(n, want);
    }
}
