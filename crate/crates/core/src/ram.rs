//! Reverse-aware refinement and the side-output decoder.
//!
//! A refinement stage takes a 64-channel feature and a single-channel
//! guidance logit map at the same resolution and runs two paths:
//!
//! ```text
//! fg      = conv(B_fg(cat(feature, guidance)))
//! bg      = conv(B_bg((1 - sigmoid(guidance)) * feature))
//! refined = fg + bg
//! side    = head(refined) + guidance
//! ```
//!
//! The decoder chains three stages (levels 4, 3, 2), each guided by the
//! previous stage's side logits, starting from the global map.

use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::gam::BCONV_DEPTH;
use crate::nn::{Conv2d, ConvBnRelu, ConvStack, Graph, ParamStore};
use crate::tensor::{Real, Tensor};

/// Levels refined by the cascade, coarse to fine.
pub const CASCADE_LEVELS: [usize; 3] = [4, 3, 2];

/// Intermediate values of one reverse-aware stage.
#[derive(Clone, Copy, Debug)]
pub struct RamOutput {
    pub foreground: Var,
    pub background: Var,
    pub refined: Var,
    pub side: Var,
}

#[derive(Clone, Debug)]
pub struct Ram {
    pub fg_stack: ConvStack,
    pub fg_conv: Conv2d,
    pub bg_stack: ConvStack,
    pub bg_conv: Conv2d,
    pub head: Conv2d,
}

fn check_guidance<T: Real>(g: &Graph<'_, T>, feature: Var, guidance: Var) -> Result<()> {
    let [n, _, h, w] = g.tape.shape(feature);
    let gs = g.tape.shape(guidance);
    if gs != [n, 1, h, w] {
        return Err(Error::Shape {
            op: "guidance",
            expected: [n, 1, h, w],
            got: gs,
        });
    }
    Ok(())
}

impl Ram {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize) -> Self {
        let head = Conv2d::pointwise(store, rng, &alloc::format!("{name}.head"), c, 1, true);
        head.zero(store);
        Self {
            fg_stack: ConvStack::new(store, rng, &alloc::format!("{name}.fg"), c + 1, c, BCONV_DEPTH),
            fg_conv: Conv2d::pointwise(store, rng, &alloc::format!("{name}.fg_out"), c, c, true),
            bg_stack: ConvStack::new(store, rng, &alloc::format!("{name}.bg"), c, c, BCONV_DEPTH),
            bg_conv: Conv2d::pointwise(store, rng, &alloc::format!("{name}.bg_out"), c, c, true),
            head,
        }
    }

    pub fn foreground<T: Real>(&self, g: &mut Graph<'_, T>, feature: Var, guidance: Var) -> Result<Var> {
        let cat = g.tape.concat(&[feature, guidance])?;
        let y = self.fg_stack.forward(g, cat)?;
        self.fg_conv.forward(g, y)
    }

    /// Background path input: the feature with predicted road suppressed.
    pub fn reverse_masked<T: Real>(&self, g: &mut Graph<'_, T>, feature: Var, guidance: Var) -> Result<Var> {
        let p = g.tape.sigmoid(guidance);
        let reverse = g.tape.affine(p, -T::one(), T::one());
        g.tape.mul_mask(feature, reverse)
    }

    pub fn background_from_masked<T: Real>(&self, g: &mut Graph<'_, T>, masked: Var) -> Result<Var> {
        let y = self.bg_stack.forward(g, masked)?;
        self.bg_conv.forward(g, y)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, feature: Var, guidance: Var) -> Result<RamOutput> {
        check_guidance(g, feature, guidance)?;
        let foreground = self.foreground(g, feature, guidance)?;
        let masked = self.reverse_masked(g, feature, guidance)?;
        let background = self.background_from_masked(g, masked)?;
        let refined = g.tape.add(foreground, background)?;
        let delta = self.head.forward(g, refined)?;
        let side = g.tape.add(delta, guidance)?;
        Ok(RamOutput {
            foreground,
            background,
            refined,
            side,
        })
    }
}

/// Stand-in when reverse refinement is switched off: one Conv-BN-ReLU over
/// `cat(feature, guidance)` and the same residual logit head.
#[derive(Clone, Debug)]
pub struct PlainRefiner {
    pub fuse: ConvBnRelu,
    pub head: Conv2d,
}

impl PlainRefiner {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize) -> Self {
        let head = Conv2d::pointwise(store, rng, &alloc::format!("{name}.head"), c, 1, true);
        head.zero(store);
        Self {
            fuse: ConvBnRelu::new(store, rng, &alloc::format!("{name}.fuse"), c + 1, c, 3),
            head,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, feature: Var, guidance: Var) -> Result<Var> {
        check_guidance(g, feature, guidance)?;
        let cat = g.tape.concat(&[feature, guidance])?;
        let refined = self.fuse.forward(g, cat)?;
        let delta = self.head.forward(g, refined)?;
        g.tape.add(delta, guidance)
    }
}

#[derive(Clone, Debug)]
pub enum Refiner {
    Reverse(Ram),
    Plain(PlainRefiner),
}

impl Refiner {
    /// Side logits of the stage.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, feature: Var, guidance: Var) -> Result<Var> {
        match self {
            Self::Reverse(r) => Ok(r.forward(g, feature, guidance)?.side),
            Self::Plain(p) => p.forward(g, feature, guidance),
        }
    }
}

/// Five full-resolution logit maps; index 0 is the fused output.
#[derive(Clone, Copy, Debug)]
pub struct SideOutputs {
    pub maps: [Var; 5],
}

impl SideOutputs {
    pub fn fused(&self) -> Var {
        self.maps[0]
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Projection of `f2` to the decoder width.
    pub project2: Conv2d,
    /// Stages for levels 4, 3, 2.
    pub stages: Vec<Refiner>,
    /// `1x1` fusion of `(D1, D2, D3, D4)` into `D0`.
    pub fuse: Conv2d,
}

impl Decoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c2: usize,
        c: usize,
        reverse: bool,
    ) -> Self {
        let project2 = Conv2d::pointwise(store, rng, &alloc::format!("{name}.project2"), c2, c, true);
        let stages = CASCADE_LEVELS
            .iter()
            .map(|k| {
                let n = alloc::format!("{name}.level{k}");
                if reverse {
                    Refiner::Reverse(Ram::new(store, rng, &n, c))
                } else {
                    Refiner::Plain(PlainRefiner::new(store, rng, &n, c))
                }
            })
            .collect();
        let fuse = Conv2d::pointwise(store, rng, &alloc::format!("{name}.fuse"), 4, 1, true);
        *store.value_mut(fuse.weight) = Tensor::from_vec([1, 4, 1, 1], alloc::vec![T::one(), T::zero(), T::zero(), T::zero()]).expect("4 weights");
        Self {
            project2,
            stages,
            fuse,
        }
    }

    /// Runs the cascade from the global map `global` (level 3) and returns
    /// the side outputs at `out_hw`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        f2: Var,
        f3: Var,
        f4: Var,
        global: Var,
        out_hw: (usize, usize),
    ) -> Result<SideOutputs> {
        let [_, _, h2, w2] = g.tape.shape(f2);
        let (oh, ow) = out_hw;
        if oh != 4 * h2 || ow != 4 * w2 {
            return Err(Error::Invalid(alloc::format!(
                "output size {oh}x{ow} inconsistent with level-2 size {h2}x{w2}"
            )));
        }
        let p2 = self.project2.forward(g, f2)?;
        let features = [f4, f3, p2];
        let mut guidance = global;
        let mut sides = Vec::with_capacity(3);
        for (stage, &feat) in self.stages.iter().zip(&features) {
            let [_, _, h, w] = g.tape.shape(feat);
            let r = g.tape.resize(guidance, h, w);
            let s = stage.forward(g, feat, r)?;
            sides.push(s);
            guidance = s;
        }
        let d4 = g.tape.resize(global, oh, ow);
        let d3 = g.tape.resize(sides[0], oh, ow);
        let d2 = g.tape.resize(sides[1], oh, ow);
        let d1 = g.tape.resize(sides[2], oh, ow);
        let cat = g.tape.concat(&[d1, d2, d3, d4])?;
        let d0 = self.fuse.forward(g, cat)?;
        Ok(SideOutputs {
            maps: [d0, d1, d2, d3, d4],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ram() -> (ParamStore<f64>, Ram) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = Ram::new(&mut store, &mut rng, "ram", 64);
        (store, r)
    }

    fn feature() -> Tensor<f64> {
        Tensor::from_fn([1, 64, 4, 4], |i| ((i * 31 % 17) as f64 - 8.0) / 8.0)
    }

    #[test]
    fn saturated_guidance_blanks_background_input() {
        let (mut store, r) = ram();
        let mut g = Graph::new(&mut store, Mode::Train);
        let f = g.input(feature());
        let guide = g.input(Tensor::full([1, 1, 4, 4], 1e6));
        let masked = r.reverse_masked(&mut g, f, guide).unwrap();
        assert!(g.tape.value(masked).data().iter().all(|&v| v == 0.0));
        let out = r.forward(&mut g, f, guide).unwrap();
        let zero = g.input(Tensor::zeros([1, 64, 4, 4]));
        let bias_only = r.background_from_masked(&mut g, zero).unwrap();
        assert_eq!(g.tape.value(out.background), g.tape.value(bias_only));
    }

    #[test]
    fn zero_guidance_halves_feature() {
        let (mut store, r) = ram();
        let mut g = Graph::new(&mut store, Mode::Train);
        let f = g.input(feature());
        let guide = g.input(Tensor::zeros([1, 1, 4, 4]));
        let masked = r.reverse_masked(&mut g, f, guide).unwrap();
        assert_eq!(g.tape.value(masked), &feature().map(|v| v * 0.5));
    }

    #[test]
    fn refined_is_sum_of_paths_and_head_starts_as_identity() {
        let (mut store, r) = ram();
        let mut g = Graph::new(&mut store, Mode::Train);
        let f = g.input(feature());
        let gt = Tensor::from_fn([1, 1, 4, 4], |i| i as f64 * 0.3 - 2.0);
        let guide = g.input(gt.clone());
        let out = r.forward(&mut g, f, guide).unwrap();
        let fg = r.foreground(&mut g, f, guide).unwrap();
        let m = r.reverse_masked(&mut g, f, guide).unwrap();
        let bg = r.background_from_masked(&mut g, m).unwrap();
        let sum = g.tape.value(fg).zip_map(g.tape.value(bg), |a, b| a + b);
        assert_eq!(g.tape.value(out.refined), &sum);
        assert_eq!(g.tape.value(out.side), &gt);
    }

    #[test]
    fn misaligned_guidance_rejected() {
        let (mut store, r) = ram();
        let mut g = Graph::new(&mut store, Mode::Train);
        let f = g.input(feature());
        let guide = g.input(Tensor::zeros([1, 1, 2, 2]));
        assert!(r.forward(&mut g, f, guide).is_err());
    }
}
