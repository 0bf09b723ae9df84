//! Global aggregation of the three positioned features into a
//! single-channel road logit map at stride 8.
//!
//! ```text
//! f4'' = B1(f4' * up2(f5'))
//! f3'' = B2(f3' * up4(f5')) * up2(f4')
//! f_g  = head(B3(cat(f3'', up2(cat(f4'', up2(f5'))))))
//! ```
//! `*` is the element-wise product, `B_i` a stack of Conv-BN-ReLU layers and
//! `up` bilinear resampling to the next level's size.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, ConvStack, Graph, ParamStore};
use crate::tensor::Real;

/// Depth of every `Bconv_s` stack.
pub const BCONV_DEPTH: usize = 2;

#[derive(Clone, Debug)]
pub struct Gam {
    pub dense4: ConvStack,
    pub dense3: ConvStack,
    pub fuse: ConvStack,
    pub head: Conv2d,
}

/// Outputs of one aggregation pass.
#[derive(Clone, Copy, Debug)]
pub struct GamOutput {
    pub global: Var,
    pub f4_dense: Var,
    pub f3_dense: Var,
}

pub(crate) fn check_levels<T: Real>(g: &Graph<'_, T>, f3: Var, f4: Var, f5: Var) -> Result<()> {
    let s3 = g.tape.shape(f3);
    let s4 = g.tape.shape(f4);
    let s5 = g.tape.shape(f5);
    let want4 = [s3[0], s4[1], s3[2] / 2, s3[3] / 2];
    let want5 = [s3[0], s5[1], s3[2] / 4, s3[3] / 4];
    if s4 != want4 || !s3[2].is_multiple_of(4) || !s3[3].is_multiple_of(4) {
        return Err(Error::Shape {
            op: "level pyramid (f4)",
            expected: want4,
            got: s4,
        });
    }
    if s5 != want5 {
        return Err(Error::Shape {
            op: "level pyramid (f5)",
            expected: want5,
            got: s5,
        });
    }
    Ok(())
}

impl Gam {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize) -> Self {
        Self {
            dense4: ConvStack::new(store, rng, &alloc::format!("{name}.dense4"), c, c, BCONV_DEPTH),
            dense3: ConvStack::new(store, rng, &alloc::format!("{name}.dense3"), c, c, BCONV_DEPTH),
            fuse: ConvStack::new(store, rng, &alloc::format!("{name}.fuse"), 3 * c, c, BCONV_DEPTH),
            head: Conv2d::pointwise(store, rng, &alloc::format!("{name}.head"), c, 1, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f3: Var, f4: Var, f5: Var) -> Result<GamOutput> {
        check_levels(g, f3, f4, f5)?;
        let [_, _, h3, w3] = g.tape.shape(f3);
        let [_, _, h4, w4] = g.tape.shape(f4);

        let f5_at4 = g.tape.resize(f5, h4, w4);
        let prod4 = g.tape.mul(f4, f5_at4)?;
        let f4_dense = self.dense4.forward(g, prod4)?;

        let f5_at3 = g.tape.resize(f5, h3, w3);
        let prod3 = g.tape.mul(f3, f5_at3)?;
        let d3 = self.dense3.forward(g, prod3)?;
        let f4_at3 = g.tape.resize(f4, h3, w3);
        let f3_dense = g.tape.mul(d3, f4_at3)?;

        let inner = g.tape.concat(&[f4_dense, f5_at4])?;
        let inner_at3 = g.tape.resize(inner, h3, w3);
        let cat = g.tape.concat(&[f3_dense, inner_at3])?;
        let fused = self.fuse.forward(g, cat)?;
        let global = self.head.forward(g, fused)?;
        Ok(GamOutput {
            global,
            f4_dense,
            f3_dense,
        })
    }
}

/// Aggregator used when the aggregation module is switched off:
/// upsample, concatenate, one Conv-BN-ReLU, then a pointwise head.
#[derive(Clone, Debug)]
pub struct ConcatAggregator {
    pub fuse: ConvBnRelu,
    pub head: Conv2d,
}

impl ConcatAggregator {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize) -> Self {
        Self {
            fuse: ConvBnRelu::new(store, rng, &alloc::format!("{name}.fuse"), 3 * c, c, 3),
            head: Conv2d::pointwise(store, rng, &alloc::format!("{name}.head"), c, 1, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f3: Var, f4: Var, f5: Var) -> Result<Var> {
        check_levels(g, f3, f4, f5)?;
        let [_, _, h3, w3] = g.tape.shape(f3);
        let f4u = g.tape.resize(f4, h3, w3);
        let f5u = g.tape.resize(f5, h3, w3);
        let cat = g.tape.concat(&[f3, f4u, f5u])?;
        let y = self.fuse.forward(g, cat)?;
        self.head.forward(g, y)
    }
}
