//! Named gradient-verification targets shared by the test suite and the
//! command line.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::acam::{Acam, AcamConfig, AxisAwareBlock};
use crate::encoder::{Encoder, EncoderSpec, ResidualEncoder, INPUT_MULTIPLE};
use crate::error::{Error, Result};
use crate::gam::Gam;
use crate::gradcheck::{check_module, GradCheckOptions, GradCheckReport};
use crate::losses::{deep_supervised_graph, LossWeights, DICE_SMOOTH, PROB_EPS};
use crate::nn::ParamStore;
use crate::ram::{Decoder, Ram, SideOutputs};
use crate::tensor::{Real, Tensor};

/// Pass mark for the maximum relative gradient error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Channel width used for feature inputs of the decoder-side targets.
const FEATURE_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CheckTarget {
    Encoder,
    AxisAwareBlock,
    Acam,
    Gam,
    Ram,
    Decode,
    Bce,
    Dice,
    Combined,
    DeepSupervised,
}

impl CheckTarget {
    pub const ALL: [Self; 10] = [
        Self::Encoder,
        Self::AxisAwareBlock,
        Self::Acam,
        Self::Gam,
        Self::Ram,
        Self::Decode,
        Self::Bce,
        Self::Dice,
        Self::Combined,
        Self::DeepSupervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::AxisAwareBlock => "axis_aware_block",
            Self::Acam => "acam",
            Self::Gam => "gam",
            Self::Ram => "ram",
            Self::Decode => "decode",
            Self::Bce => "bce",
            Self::Dice => "dice",
            Self::Combined => "combined",
            Self::DeepSupervised => "deep_supervised",
        }
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown gradient-check target {s:?}")))
    }
}

/// Gives every all-zero trainable tensor (attention scales, zero-initialized
/// heads, biases) random values so no path is trivially switched off.
fn activate<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R) {
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        let v = store.value_mut(id);
        if v.data().iter().all(|&x| x == 0.0) {
            for x in v.data_mut() {
                *x = normal.sample(rng);
            }
        }
    }
}

fn random_input<R: Rng>(rng: &mut R, shape: [usize; 4]) -> Tensor<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn random_mask<R: Rng>(rng: &mut R, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0..2) as f64)
}

/// Spatial size used for a target: `size` itself, except the encoder whose
/// input must be a multiple of the total stride.
pub fn effective_size(target: CheckTarget, size: usize) -> usize {
    match target {
        CheckTarget::Encoder => size.max(1).div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE,
        _ => size,
    }
}

/// Central-difference check of one target at spatial size `size` in 64-bit
/// precision (batch 2, training mode).
pub fn run_gradcheck(target: CheckTarget, size: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if size < 4 || !size.is_multiple_of(4) {
        return Err(Error::Config(alloc::format!("check size {size} must be a positive multiple of 4")));
    }
    let s = effective_size(target, size);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xC0FF_EE00);
    let mut store = ParamStore::<f64>::new();
    let c = FEATURE_CHANNELS;
    let report = match target {
        CheckTarget::Encoder => {
            let enc = ResidualEncoder::new(&mut store, &mut rng, "encoder", EncoderSpec::tiny())?;
            activate(&mut store, &mut rng);
            let x = random_input(&mut rng, [2, 3, s, s]);
            // fixed projections of every level so all stages contribute
            let spec = enc.spec().clone();
            let projections: Vec<_> = (0..5)
                .map(|k| {
                    let stride = 2 << k;
                    random_input(&mut rng, [2, spec.channels[k], s / stride, s / stride])
                })
                .collect();
            check_module(
                &mut store,
                &[x],
                |g, v| {
                    let p = enc.encode(g, v[0])?;
                    let terms = p
                        .levels
                        .iter()
                        .zip(&projections)
                        .map(|(&l, w)| Ok((g.tape.dot(l, w.clone())?, 1.0)))
                        .collect::<Result<Vec<_>>>()?;
                    g.tape.weighted_sum(&terms)
                },
                opts,
            )?
        }
        CheckTarget::AxisAwareBlock => {
            let block = AxisAwareBlock::new(&mut store, &mut rng, "aab", 8);
            activate(&mut store, &mut rng);
            let x = random_input(&mut rng, [2, 8, s, s]);
            check_module(&mut store, &[x], |g, v| block.forward(g, v[0]), opts)?
        }
        CheckTarget::Acam => {
            let acam = Acam::new(&mut store, &mut rng, "acam", c, &AcamConfig::default())?;
            activate(&mut store, &mut rng);
            let x = random_input(&mut rng, [2, c, s, s]);
            check_module(&mut store, &[x], |g, v| acam.forward(g, v[0]), opts)?
        }
        CheckTarget::Gam => {
            let gam = Gam::new(&mut store, &mut rng, "gam", c);
            activate(&mut store, &mut rng);
            let inputs = [
                random_input(&mut rng, [2, c, s, s]),
                random_input(&mut rng, [2, c, s / 2, s / 2]),
                random_input(&mut rng, [2, c, s / 4, s / 4]),
            ];
            check_module(&mut store, &inputs, |g, v| Ok(gam.forward(g, v[0], v[1], v[2])?.global), opts)?
        }
        CheckTarget::Ram => {
            let ram = Ram::new(&mut store, &mut rng, "ram", c);
            activate(&mut store, &mut rng);
            let inputs = [random_input(&mut rng, [2, c, s, s]), random_input(&mut rng, [2, 1, s, s])];
            check_module(&mut store, &inputs, |g, v| Ok(ram.forward(g, v[0], v[1])?.side), opts)?
        }
        CheckTarget::Decode => {
            let dec = Decoder::new(&mut store, &mut rng, "decoder", c, c, true);
            activate(&mut store, &mut rng);
            let inputs = [
                random_input(&mut rng, [2, c, s, s]),
                random_input(&mut rng, [2, c, s / 2, s / 2]),
                random_input(&mut rng, [2, c, s / 4, s / 4]),
                random_input(&mut rng, [2, 1, s / 2, s / 2]),
            ];
            check_module(
                &mut store,
                &inputs,
                |g, v| {
                    let sides = dec.forward(g, v[0], v[1], v[2], v[3], (4 * s, 4 * s))?;
                    g.tape.concat(&sides.maps)
                },
                opts,
            )?
        }
        CheckTarget::Bce | CheckTarget::Dice | CheckTarget::Combined => {
            let logits = random_input(&mut rng, [2, 1, s, s]);
            let y = random_mask(&mut rng, [2, 1, s, s]);
            check_module(
                &mut store,
                &[logits],
                |g, v| {
                    let p = g.tape.sigmoid(v[0]);
                    let eps = f64::lit(PROB_EPS);
                    let smooth = f64::lit(DICE_SMOOTH);
                    match target {
                        CheckTarget::Bce => g.tape.bce(p, &y, eps),
                        CheckTarget::Dice => g.tape.dice(p, &y, smooth),
                        _ => {
                            let b = g.tape.bce(p, &y, eps)?;
                            let d = g.tape.dice(p, &y, smooth)?;
                            g.tape.add(b, d)
                        }
                    }
                },
                opts,
            )?
        }
        CheckTarget::DeepSupervised => {
            let inputs: Vec<_> = (0..5).map(|_| random_input(&mut rng, [2, 1, s, s])).collect();
            let y = random_mask(&mut rng, [2, 1, s, s]);
            let weights = LossWeights::default();
            check_module(
                &mut store,
                &inputs,
                |g, v| {
                    let sides = SideOutputs {
                        maps: [v[0], v[1], v[2], v[3], v[4]],
                    };
                    Ok(deep_supervised_graph(g, &sides, &y, &weights)?.0)
                },
                opts,
            )?
        }
    };
    Ok(report)
}
