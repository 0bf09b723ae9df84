//! Prediction helpers shared by the commands.

use roadseg_core::data::{center_crop, normalize, RasterSample};
use roadseg_core::tiling::{predict_mosaic, predict_probabilities, window_tensor, RgbRaster, WindowPlan};
use roadseg_core::train::Trainer;

use crate::error::Result;

/// Road probabilities for the centre crop of `sample` whose sides are
/// multiples of 32; returns the crop and its row-major probabilities.
pub fn predict_sample(t: &mut Trainer, sample: &RasterSample) -> Result<(RasterSample, Vec<f64>)> {
    let crop = center_crop(sample, sample.height(), sample.width())?;
    let batch = normalize::<f32>(std::slice::from_ref(&crop), &t.config.normalization)?;
    let prob = predict_probabilities(&t.net, &mut t.store, batch.images)?;
    Ok((crop, prob.data().iter().map(|&p| p as f64).collect()))
}

/// Sliding-window probabilities over a whole raster.
pub fn predict_raster(t: &mut Trainer, raster: &RgbRaster, plan: &WindowPlan) -> Result<Vec<f64>> {
    let norm = t.config.normalization;
    let mosaic = predict_mosaic(raster, plan, |rgb, h, w| {
        let x = window_tensor::<f32>(rgb, h, w, &norm);
        let p = predict_probabilities(&t.net, &mut t.store, x)?;
        Ok(p.data().iter().map(|&v| v as f64).collect())
    })?;
    Ok(mosaic.prob())
}
