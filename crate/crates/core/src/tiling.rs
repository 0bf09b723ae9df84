//! Sliding-window inference over rasters larger than one network input.

use alloc::vec::Vec;

use crate::autograd::sigmoid;
use crate::data::{Normalization, MIN_EXTENT};
use crate::encoder::{Encoder, INPUT_MULTIPLE};
use crate::error::{Error, Result};
use crate::metrics::{roc_auc, threshold_mask, ConfusionCounts, RocCurve, DEFAULT_ROC_THRESHOLDS};
use crate::network::RoadNet;
use crate::nn::{Graph, Mode, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_WINDOW: usize = 1024;
pub const DEFAULT_STRIDE: usize = 768;

/// Interleaved 8-bit RGB raster of arbitrary size (at least 32 x 32).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbRaster {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

impl RgbRaster {
    pub fn new(height: usize, width: usize, rgb: Vec<u8>) -> Result<Self> {
        if height < MIN_EXTENT || width < MIN_EXTENT {
            return Err(Error::Invalid(alloc::format!("raster {height}x{width} is below {MIN_EXTENT}x{MIN_EXTENT}")));
        }
        if rgb.len() != height * width * 3 {
            return Err(Error::Invalid(alloc::format!(
                "raster buffer holds {} bytes, expected {}",
                rgb.len(),
                height * width * 3
            )));
        }
        Ok(Self { height, width, rgb })
    }

    /// `h x w` window at `(top, left)` of the reflect-padded raster. Padding
    /// mirrors without repeating the edge pixel.
    pub fn padded_window(&self, top: usize, left: usize, h: usize, w: usize) -> Vec<u8> {
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
        let mut out = Vec::with_capacity(h * w * 3);
        for r in top..top + h {
            let sr = reflect(r, self.height);
            for c in left..left + w {
                let i = (sr * self.width + reflect(c, self.width)) * 3;
                out.extend_from_slice(&self.rgb[i..i + 3]);
            }
        }
        out
    }
}

/// Window geometry for one raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    /// Requested window edge and stride.
    pub window: usize,
    pub stride: usize,
    /// Window extent actually used per axis `(rows, cols)`: the requested
    /// window shrunk to the raster rounded up to the input multiple.
    pub extent: (usize, usize),
    /// Raster size after reflect padding.
    pub padded: (usize, usize),
    pub source: (usize, usize),
    /// Top-left corners in padded coordinates.
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(padded: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::from([0]);
    let mut o = 0;
    while o + window < padded {
        o = (o + stride).min(padded - window);
        out.push(o);
    }
    out
}

pub fn plan_windows(height: usize, width: usize, window: usize, stride: usize) -> Result<WindowPlan> {
    if window < INPUT_MULTIPLE || !window.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::Config(alloc::format!(
            "window {window} must be a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    if stride == 0 || stride > window {
        return Err(Error::Config(alloc::format!("stride {stride} must lie in 1..={window}")));
    }
    if height < MIN_EXTENT || width < MIN_EXTENT {
        return Err(Error::Invalid(alloc::format!("raster {height}x{width} is below {MIN_EXTENT}x{MIN_EXTENT}")));
    }
    let round_up = |n: usize| n.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE;
    let eh = window.min(round_up(height));
    let ew = window.min(round_up(width));
    let (ph, pw) = (height.max(eh), width.max(ew));
    let rows = axis_origins(ph, eh, stride.min(eh));
    let cols = axis_origins(pw, ew, stride.min(ew));
    let origins = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(WindowPlan {
        window,
        stride,
        extent: (eh, ew),
        padded: (ph, pw),
        source: (height, width),
        origins,
    })
}

impl WindowPlan {
    /// Number of windows covering each source pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let (h, w) = self.source;
        let (eh, ew) = self.extent;
        let mut count = alloc::vec![0u32; h * w];
        for &(top, left) in &self.origins {
            for r in top..(top + eh).min(h) {
                for c in left..(left + ew).min(w) {
                    count[r * w + c] += 1;
                }
            }
        }
        count
    }
}

/// Running sum and visit count of window probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMosaic {
    pub height: usize,
    pub width: usize,
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl ProbabilityMosaic {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            accum: alloc::vec![0.0; height * width],
            count: alloc::vec![0; height * width],
        }
    }

    /// Adds an `h x w` probability window at `(top, left)`; the part that
    /// falls into the padding is dropped.
    pub fn add_window(&mut self, top: usize, left: usize, h: usize, w: usize, prob: &[f64]) {
        for r in top..(top + h).min(self.height) {
            for c in left..(left + w).min(self.width) {
                let i = r * self.width + c;
                self.accum[i] += prob[(r - top) * w + (c - left)];
                self.count[i] += 1;
            }
        }
    }

    pub fn is_complete(&self) -> bool {
        self.count.iter().all(|&c| c >= 1)
    }

    /// Arithmetic mean of the overlapping window probabilities.
    pub fn prob(&self) -> Vec<f64> {
        self.accum
            .iter()
            .zip(&self.count)
            .map(|(&a, &c)| if c == 0 { 0.0 } else { a / c as f64 })
            .collect()
    }
}

/// Runs `predict` on every planned window. The closure receives the RGB
/// window and its `(rows, cols)` extent and returns row-major road
/// probabilities.
pub fn predict_mosaic<F>(raster: &RgbRaster, plan: &WindowPlan, mut predict: F) -> Result<ProbabilityMosaic>
where
    F: FnMut(&[u8], usize, usize) -> Result<Vec<f64>>,
{
    if plan.source != (raster.height, raster.width) {
        return Err(Error::Shape {
            op: "predict_mosaic",
            expected: [1, 3, plan.source.0, plan.source.1],
            got: [1, 3, raster.height, raster.width],
        });
    }
    let (eh, ew) = plan.extent;
    let mut mosaic = ProbabilityMosaic::new(raster.height, raster.width);
    for &(top, left) in &plan.origins {
        let window = raster.padded_window(top, left, eh, ew);
        let prob = predict(&window, eh, ew)?;
        if prob.len() != eh * ew {
            return Err(Error::Shape {
                op: "predict_mosaic window",
                expected: [1, 1, eh, ew],
                got: [1, 1, prob.len(), 1],
            });
        }
        mosaic.add_window(top, left, eh, ew, &prob);
    }
    Ok(mosaic)
}

/// Normalizes one interleaved RGB window into a `[1, 3, h, w]` tensor.
pub fn window_tensor<T: Real>(rgb: &[u8], h: usize, w: usize, norm: &Normalization) -> Tensor<T> {
    let hw = h * w;
    Tensor::from_fn([1, 3, h, w], |i| {
        let (c, p) = (i / hw, i % hw);
        T::lit(norm.apply(rgb[p * 3 + c], c))
    })
}

/// Evaluation-mode road probabilities `sigmoid(D0)` for a batch of
/// normalized images.
pub fn predict_probabilities<T: Real, E: Encoder>(
    net: &RoadNet<E>,
    store: &mut ParamStore<T>,
    images: Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new(store, Mode::Eval);
    let x = g.input(images);
    let sides = net.forward(&mut g, x)?;
    Ok(g.tape.value(sides.fused()).map(sigmoid))
}

/// Pixel metrics at the decision threshold plus the ROC curve of the raw
/// probabilities.
pub fn evaluate_mosaic(prob: &[f64], gt: &[u8]) -> Result<(ConfusionCounts, RocCurve)> {
    let counts = ConfusionCounts::from_masks(&threshold_mask(prob), gt)?;
    let roc = roc_auc(prob, gt, DEFAULT_ROC_THRESHOLDS)?;
    Ok((counts, roc))
}
