//! Binary cross-entropy, soft Dice, and the weighted deep-supervision total.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::autograd::{bce_value, dice_value, sigmoid, Var};
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::ram::SideOutputs;
use crate::tensor::{Real, Tensor};

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Per-side-output weights ordered `(D0, D1, D2, D3, D4)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights(pub [f64; 5]);

impl Default for LossWeights {
    fn default() -> Self {
        Self([1.3, 1.0, 0.7, 0.7, 1.0])
    }
}

impl LossWeights {
    pub fn new(w: [f64; 5]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(alloc::format!("loss weights must be finite and nonnegative: {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Invalid("loss weights must not all be zero".into()));
        }
        Ok(Self(w))
    }
}

/// Components of one side output's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SideLoss {
    pub bce: f64,
    pub dice: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub sides: [SideLoss; 5],
}

impl LossReport {
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (i, side) in self.sides.iter().enumerate() {
            let _ = write!(s, "D{i}: bce={:.6} dice={:.6}; ", side.bce, side.dice);
        }
        s
    }
}

fn check_pair<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::Shape {
            op: "loss",
            expected: y.shape(),
            got: p.shape(),
        });
    }
    Ok(())
}

/// Mean negative log-likelihood over all pixels of the batch.
pub fn bce_loss<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    check_pair(p, y)?;
    Ok(bce_value(p, y, T::lit(PROB_EPS)))
}

/// `1 - (2 sum(p y) + s) / (sum p + sum y + s)` per sample, batch mean.
pub fn dice_loss<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    check_pair(p, y)?;
    Ok(dice_value(p, y, T::lit(DICE_SMOOTH)))
}

pub fn combined_loss<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    Ok(bce_loss(p, y)? + dice_loss(p, y)?)
}

/// Weighted sum over side-output logits, evaluated without a tape.
pub fn deep_supervised_loss<T: Real>(sides: &[Tensor<T>; 5], y: &Tensor<T>, weights: &LossWeights) -> Result<LossReport> {
    let mut report = LossReport::default();
    for (i, logits) in sides.iter().enumerate() {
        let p = logits.map(sigmoid);
        let bce = bce_loss(&p, y)?.as_f64();
        let dice = dice_loss(&p, y)?.as_f64();
        report.sides[i] = SideLoss {
            bce,
            dice,
            combined: bce + dice,
        };
        report.total += weights.0[i] * (bce + dice);
    }
    Ok(report)
}

/// Tape version of [`deep_supervised_loss`]; returns the scalar loss node.
pub fn deep_supervised_graph<T: Real>(
    g: &mut Graph<'_, T>,
    sides: &SideOutputs,
    y: &Tensor<T>,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let mut terms = Vec::with_capacity(10);
    let mut report = LossReport::default();
    for (i, &logits) in sides.maps.iter().enumerate() {
        let p = g.tape.sigmoid(logits);
        let b = g.tape.bce(p, y, T::lit(PROB_EPS))?;
        let d = g.tape.dice(p, y, T::lit(DICE_SMOOTH))?;
        let bv = g.tape.value(b).data()[0].as_f64();
        let dv = g.tape.value(d).data()[0].as_f64();
        report.sides[i] = SideLoss {
            bce: bv,
            dice: dv,
            combined: bv + dv,
        };
        let w = T::lit(weights.0[i]);
        terms.push((b, w));
        terms.push((d, w));
    }
    let total = g.tape.weighted_sum(&terms)?;
    report.total = g.tape.value(total).data()[0].as_f64();
    Ok((total, report))
}
