//! Five-level feature pyramid behind a pluggable contract.
//!
//! Level `k` (1-based) has stride `2^k`. The default backbone is a small
//! residual network with one downsampling basic block per stage; the
//! `resnest50-compatible` spec only fixes widths and strides so external
//! weights can be slotted in with the same parameter layout.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::autograd::{ConvGeom, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Graph, ParamStore};
use crate::tensor::Real;

/// Spatial multiple every network input must satisfy.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderVariant {
    Tiny,
    Resnest50Compatible,
}

impl EncoderVariant {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Tiny => "tiny",
            Self::Resnest50Compatible => "resnest50-compatible",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "tiny" => Some(Self::Tiny),
            "resnest50-compatible" => Some(Self::Resnest50Compatible),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub channels: [usize; 5],
    pub blocks: [usize; 5],
    pub variant: EncoderVariant,
}

impl EncoderSpec {
    pub fn tiny() -> Self {
        Self {
            channels: [16, 32, 64, 128, 256],
            blocks: [1; 5],
            variant: EncoderVariant::Tiny,
        }
    }

    pub fn resnest50_compatible() -> Self {
        Self {
            channels: [64, 256, 512, 1024, 2048],
            blocks: [1, 3, 4, 6, 3],
            variant: EncoderVariant::Resnest50Compatible,
        }
    }

    pub fn for_variant(v: EncoderVariant) -> Self {
        match v {
            EncoderVariant::Tiny => Self::tiny(),
            EncoderVariant::Resnest50Compatible => Self::resnest50_compatible(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::Invalid(alloc::format!(
                "encoder channels and block counts must be positive: {self}"
            )));
        }
        Ok(())
    }

    /// Field-by-field differences against `other`, empty when equal.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let mut out = Vec::new();
        if self.variant != other.variant {
            out.push(alloc::format!("variant: {} != {}", self.variant.tag(), other.variant.tag()));
        }
        if self.channels != other.channels {
            out.push(alloc::format!("channels: {:?} != {:?}", self.channels, other.channels));
        }
        if self.blocks != other.blocks {
            out.push(alloc::format!("blocks: {:?} != {:?}", self.blocks, other.blocks));
        }
        out
    }
}

impl fmt::Display for EncoderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} channels={:?} blocks={:?}",
            self.variant.tag(),
            self.channels,
            self.blocks
        )
    }
}

/// Feature maps `f1..f5` of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 5],
}

impl FeaturePyramid {
    /// Level `k` in `1..=5`.
    pub fn level(&self, k: usize) -> Var {
        self.levels[k - 1]
    }
}

/// Anything that maps `B x 3 x h x w` images onto a stride-2..32 pyramid.
pub trait Encoder {
    fn spec(&self) -> &EncoderSpec;
    fn encode<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<FeaturePyramid>;
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::NotMultiple {
            h,
            w,
            multiple: INPUT_MULTIPLE,
        });
    }
    Ok(())
}

/// Verifies the stride/channel contract of a pyramid produced from an
/// `h x w` input.
pub fn check_pyramid<T: Real>(
    g: &Graph<'_, T>,
    p: &FeaturePyramid,
    spec: &EncoderSpec,
    batch: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    for k in 1..=5 {
        let want = [batch, spec.channels[k - 1], h >> k, w >> k];
        let got = g.tape.shape(p.level(k));
        if got != want {
            return Err(Error::Shape {
                op: "feature pyramid",
                expected: want,
                got,
            });
        }
    }
    Ok(())
}

/// `3x3 conv (stride s) -> BN -> ReLU -> 3x3 conv -> BN`, plus a projected
/// shortcut when the shape changes, then ReLU.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let down = ConvGeom {
            stride: (stride, stride),
            pad: (1, 1),
            dilation: (1, 1),
        };
        let conv1 = Conv2d::new(store, rng, &alloc::format!("{name}.conv1"), cin, cout, (3, 3), down, false);
        let bn1 = BatchNorm2d::new(store, &alloc::format!("{name}.bn1"), cout);
        let conv2 = Conv2d::same(store, rng, &alloc::format!("{name}.conv2"), cout, cout, 3, 1, false);
        let bn2 = BatchNorm2d::new(store, &alloc::format!("{name}.bn2"), cout);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            let geom = ConvGeom {
                stride: (stride, stride),
                pad: (0, 0),
                dilation: (1, 1),
            };
            (
                Conv2d::new(store, rng, &alloc::format!("{name}.down.conv"), cin, cout, (1, 1), geom, false),
                BatchNorm2d::new(store, &alloc::format!("{name}.down.bn"), cout),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = self.bn1.forward(g, y)?;
        let y = g.tape.relu(y);
        let y = self.conv2.forward(g, y)?;
        let y = self.bn2.forward(g, y)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, x)?;
                bn.forward(g, s)?
            }
            None => x,
        };
        let y = g.tape.add(y, skip)?;
        Ok(g.tape.relu(y))
    }
}

/// Residual backbone: each of the five stages opens with a stride-2 block.
#[derive(Clone, Debug)]
pub struct ResidualEncoder {
    spec: EncoderSpec,
    stages: Vec<Vec<BasicBlock>>,
}

impl ResidualEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: EncoderSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let mut cin = 3;
        let mut stages = Vec::with_capacity(5);
        for s in 0..5 {
            let cout = spec.channels[s];
            let blocks = (0..spec.blocks[s])
                .map(|b| {
                    let stride = if b == 0 { 2 } else { 1 };
                    let c = if b == 0 { cin } else { cout };
                    BasicBlock::new(store, rng, &alloc::format!("{name}.stage{}.block{b}", s + 1), c, cout, stride)
                })
                .collect();
            stages.push(blocks);
            cin = cout;
        }
        Ok(Self { spec, stages })
    }
}

impl Encoder for ResidualEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<FeaturePyramid> {
        let [n, c, h, w] = g.tape.shape(images);
        if c != 3 {
            return Err(Error::Shape {
                op: "encode",
                expected: [n, 3, h, w],
                got: [n, c, h, w],
            });
        }
        check_input_size(h, w)?;
        let mut x = images;
        let mut levels = [images; 5];
        for (s, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(g, x)?;
            }
            levels[s] = x;
        }
        let p = FeaturePyramid { levels };
        check_pyramid(g, &p, &self.spec, n, h, w)?;
        Ok(p)
    }
}
