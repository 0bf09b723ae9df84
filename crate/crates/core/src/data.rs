//! In-memory samples, augmentation and batch normalization of raw tiles.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Smallest accepted tile edge.
pub const MIN_EXTENT: usize = 32;

/// An 8-bit RGB tile (row-major, interleaved) with its `{0,1}` road mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterSample {
    pub id: String,
    height: usize,
    width: usize,
    image: Vec<u8>,
    mask: Vec<u8>,
}

impl RasterSample {
    pub fn new(id: impl Into<String>, height: usize, width: usize, image: Vec<u8>, mask: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if height < MIN_EXTENT || width < MIN_EXTENT {
            return Err(Error::Invalid(alloc::format!(
                "sample {id}: {height}x{width} is below the {MIN_EXTENT}x{MIN_EXTENT} minimum"
            )));
        }
        if image.len() != height * width * 3 || mask.len() != height * width {
            return Err(Error::Invalid(alloc::format!(
                "sample {id}: buffers ({} image bytes, {} mask bytes) do not match {height}x{width}",
                image.len(),
                mask.len()
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Invalid(alloc::format!("sample {id}: mask values must be 0 or 1")));
        }
        Ok(Self {
            id,
            height,
            width,
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image(&self) -> &[u8] {
        &self.image
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.image[i], self.image[i + 1], self.image[i + 2]]
    }

    pub fn road_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Window `[top, top+h) x [left, left+w)`.
    pub fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Invalid(alloc::format!(
                "window {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height,
                self.width
            )));
        }
        let mut image = Vec::with_capacity(h * w * 3);
        let mut mask = Vec::with_capacity(h * w);
        for r in top..top + h {
            let row = r * self.width + left;
            image.extend_from_slice(&self.image[row * 3..(row + w) * 3]);
            mask.extend_from_slice(&self.mask[row..row + w]);
        }
        Self::new(self.id.clone(), h, w, image, mask)
    }

    fn remap(&self, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut image = Vec::with_capacity(h * w * 3);
        let mut mask = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = src(r, c);
                let i = sr * self.width + sc;
                image.extend_from_slice(&self.image[i * 3..i * 3 + 3]);
                mask.push(self.mask[i]);
            }
        }
        Self {
            id: self.id.clone(),
            height: h,
            width: w,
            image,
            mask,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flip {
    None,
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
    /// Transpose about the main diagonal.
    Diagonal,
}

/// Uniformly placed `size x size` crop; the same window applies to the mask.
pub fn random_crop<R: Rng + ?Sized>(sample: &RasterSample, size: usize, rng: &mut R) -> Result<RasterSample> {
    if size == 0 || !size.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::NotMultiple {
            h: size,
            w: size,
            multiple: INPUT_MULTIPLE,
        });
    }
    if size > sample.height || size > sample.width {
        return Err(Error::Invalid(alloc::format!(
            "crop {size} exceeds sample {} extent {}x{}",
            sample.id,
            sample.height,
            sample.width
        )));
    }
    let top = rng.random_range(0..=sample.height - size);
    let left = rng.random_range(0..=sample.width - size);
    sample.window(top, left, size, size)
}

pub fn augment_flip(sample: &RasterSample, mode: Flip) -> Result<RasterSample> {
    let (h, w) = (sample.height, sample.width);
    Ok(match mode {
        Flip::None => sample.clone(),
        Flip::Horizontal => sample.remap(h, w, |r, c| (r, w - 1 - c)),
        Flip::Vertical => sample.remap(h, w, |r, c| (h - 1 - r, c)),
        Flip::Diagonal => {
            if h != w {
                return Err(Error::Invalid(alloc::format!(
                    "diagonal flip needs a square tile, got {h}x{w}"
                )));
            }
            sample.remap(w, h, |r, c| (c, r))
        }
    })
}

/// Per-sample augmentation stream, independent of worker scheduling.
pub fn sample_rng(seed: u64, index: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.rotate_left(32));
    rng
}

/// Random crop followed by each of the three flips with probability
/// `flip_prob`, applied in the order horizontal, vertical, diagonal.
pub fn augment<R: Rng + ?Sized>(sample: &RasterSample, crop: usize, flip_prob: f64, rng: &mut R) -> Result<RasterSample> {
    let mut s = random_crop(sample, crop, rng)?;
    for mode in [Flip::Horizontal, Flip::Vertical, Flip::Diagonal] {
        if rng.random_bool(flip_prob) {
            s = augment_flip(&s, mode)?;
        }
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "normalization std must be positive and finite: mean {:?} std {:?}",
                self.mean,
                self.std
            )));
        }
        Ok(())
    }

    pub fn apply(&self, raw: u8, channel: usize) -> f64 {
        (raw as f64 / 255.0 - self.mean[channel]) / self.std[channel]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedBatch<T> {
    pub ids: Vec<String>,
    /// `[B, 3, h, w]`.
    pub images: Tensor<T>,
    /// `[B, 1, h, w]`, values in `{0, 1}`.
    pub masks: Tensor<T>,
    /// RNG word stream position after the batch was drawn, for resumption.
    pub seed_state: u128,
}

/// Stacks equally sized samples into network-ready tensors.
pub fn normalize<T: Real>(samples: &[RasterSample], norm: &Normalization) -> Result<NormalizedBatch<T>> {
    norm.validate()?;
    let first = samples.first().ok_or(Error::Empty("batch"))?;
    let (h, w) = (first.height, first.width);
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::NotMultiple {
            h,
            w,
            multiple: INPUT_MULTIPLE,
        });
    }
    let b = samples.len();
    let hw = h * w;
    let mut images = Tensor::zeros([b, 3, h, w]);
    let mut masks = Tensor::zeros([b, 1, h, w]);
    // per-channel lookup tables keep the conversion exact and cheap
    let mut lut = [[T::zero(); 256]; 3];
    for (c, table) in lut.iter_mut().enumerate() {
        for (v, slot) in table.iter_mut().enumerate() {
            *slot = T::lit(norm.apply(v as u8, c));
        }
    }
    for (i, s) in samples.iter().enumerate() {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Shape {
                op: "normalize",
                expected: [1, 3, h, w],
                got: [1, 3, s.height, s.width],
            });
        }
        let img = images.sample_mut(i);
        for p in 0..hw {
            for c in 0..3 {
                img[c * hw + p] = lut[c][s.image[p * 3 + c] as usize];
            }
        }
        for (dst, &m) in masks.sample_mut(i).iter_mut().zip(&s.mask) {
            *dst = T::lit(m as f64);
        }
    }
    Ok(NormalizedBatch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images,
        masks,
        seed_state: 0,
    })
}

/// Center `h x w` region of a tile, rounded down to the input multiple;
/// used for evaluation where random crops are not wanted.
pub fn center_crop(sample: &RasterSample, h: usize, w: usize) -> Result<RasterSample> {
    let h = h.min(sample.height) / INPUT_MULTIPLE * INPUT_MULTIPLE;
    let w = w.min(sample.width) / INPUT_MULTIPLE * INPUT_MULTIPLE;
    sample.window((sample.height - h) / 2, (sample.width - w) / 2, h, w)
}
