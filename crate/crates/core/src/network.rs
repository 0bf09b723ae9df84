//! The assembled three-stage network and its ablation switches.

use alloc::vec::Vec;

use rand::Rng;

use crate::acam::{Acam, AcamConfig};
use crate::autograd::Var;
use crate::encoder::{Encoder, EncoderSpec, FeaturePyramid, ResidualEncoder};
use crate::error::Result;
use crate::gam::{ConcatAggregator, Gam};
use crate::nn::{Conv2d, Graph, ParamStore};
use crate::ram::{Decoder, SideOutputs};
use crate::tensor::Real;

/// Which of the three contributed modules are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub acam: bool,
    pub gam: bool,
    pub ram: bool,
}

impl Toggles {
    pub const FULL: Self = Self {
        acam: true,
        gam: true,
        ram: true,
    };
    pub const BASELINE: Self = Self {
        acam: false,
        gam: false,
        ram: false,
    };

    /// Rows of the module ablation, in order: baseline, +ACAM, +ACAM+GAM,
    /// +ACAM+RAM, full.
    pub fn ablation_grid() -> [Self; 5] {
        [
            Self::BASELINE,
            Self {
                acam: true,
                gam: false,
                ram: false,
            },
            Self {
                acam: true,
                gam: true,
                ram: false,
            },
            Self {
                acam: true,
                gam: false,
                ram: true,
            },
            Self::FULL,
        ]
    }

    pub fn label(&self) -> alloc::string::String {
        let mut parts = Vec::from(["baseline"]);
        if self.acam {
            parts.push("acam");
        }
        if self.gam {
            parts.push("gam");
        }
        if self.ram {
            parts.push("ram");
        }
        parts.join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub acam: AcamConfig,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::tiny(),
            acam: AcamConfig::default(),
            toggles: Toggles::FULL,
        }
    }
}

/// Positioning of one high-level feature: the context module or, when it is
/// switched off, a pointwise projection to the decoder width.
#[derive(Clone, Debug)]
pub enum Positioner {
    Context(Acam),
    Projection(Conv2d),
}

impl Positioner {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            Self::Context(a) => a.forward(g, x),
            Self::Projection(c) => c.forward(g, x),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Aggregator {
    Dense(Gam),
    Concat(ConcatAggregator),
}

/// Every intermediate the forward pass exposes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub pyramid: FeaturePyramid,
    /// Positioned `f3', f4', f5'`.
    pub positioned: [Var; 3],
    pub global: Var,
    pub sides: SideOutputs,
}

#[derive(Clone, Debug)]
pub struct RoadNet<E = ResidualEncoder> {
    pub config: ModelConfig,
    pub encoder: E,
    pub positioners: Vec<Positioner>,
    pub aggregator: Aggregator,
    pub decoder: Decoder,
}

impl RoadNet<ResidualEncoder> {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, config: ModelConfig) -> Result<Self> {
        let encoder = ResidualEncoder::new(store, rng, "encoder", config.encoder.clone())?;
        Self::with_encoder(store, rng, config, encoder)
    }
}

impl<E: Encoder> RoadNet<E> {
    /// Builds the positioning, aggregation and refinement stages around an
    /// existing encoder whose parameters already live in `store`.
    pub fn with_encoder<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: ModelConfig,
        encoder: E,
    ) -> Result<Self> {
        let spec = encoder.spec().clone();
        let c = config.acam.inner;
        let positioners = (3..=5)
            .map(|k| {
                let cin = spec.channels[k - 1];
                let name = alloc::format!("position{k}");
                Ok(if config.toggles.acam {
                    Positioner::Context(Acam::new(store, rng, &name, cin, &config.acam)?)
                } else {
                    Positioner::Projection(Conv2d::pointwise(store, rng, &name, cin, c, true))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let aggregator = if config.toggles.gam {
            Aggregator::Dense(Gam::new(store, rng, "gam", c))
        } else {
            Aggregator::Concat(ConcatAggregator::new(store, rng, "aggregate", c))
        };
        let decoder = Decoder::new(store, rng, "decoder", spec.channels[1], c, config.toggles.ram);
        Ok(Self {
            config,
            encoder,
            positioners,
            aggregator,
            decoder,
        })
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<ForwardTrace> {
        let [_, _, h, w] = g.tape.shape(images);
        let pyramid = self.encoder.encode(g, images)?;
        let mut positioned = [images; 3];
        for (i, p) in self.positioners.iter().enumerate() {
            positioned[i] = p.forward(g, pyramid.level(i + 3))?;
        }
        let [f3, f4, f5] = positioned;
        let global = match &self.aggregator {
            Aggregator::Dense(gam) => gam.forward(g, f3, f4, f5)?.global,
            Aggregator::Concat(agg) => agg.forward(g, f3, f4, f5)?,
        };
        let sides = self.decoder.forward(g, pyramid.level(2), f3, f4, global, (h, w))?;
        Ok(ForwardTrace {
            pyramid,
            positioned,
            global,
            sides,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<SideOutputs> {
        Ok(self.trace(g, images)?.sides)
    }
}
