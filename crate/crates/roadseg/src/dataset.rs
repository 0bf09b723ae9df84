//! On-disk dataset layout:
//!
//! ```text
//! <root>/images/<id>.png | <id>.tif | <id>.tiff
//! <root>/masks/<id>.png
//! <root>/<split>.txt          one id per line
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use log::warn;
use roadseg_core::data::RasterSample;
use roadseg_core::synth::{generate_sample, SynthConfig};

use crate::error::{IoError, Result};

pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "masks";
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];
/// Provenance file written beside generated splits.
pub const SYNTH_CONFIG_FILE: &str = "synth_config.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    /// Lexicographically sorted.
    pub ids: Vec<String>,
    pub image_dir: String,
    pub mask_dir: String,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        let dir = self.root.join(&self.image_dir);
        let found: Vec<PathBuf> = IMAGE_EXTENSIONS
            .iter()
            .map(|ext| dir.join(format!("{id}.{ext}")))
            .filter(|p| p.is_file())
            .collect();
        match found.len() {
            1 => Ok(found.into_iter().next().expect("one path")),
            0 => Err(IoError::MissingFile {
                id: id.into(),
                what: "image",
            }),
            _ => Err(IoError::Ambiguous { id: id.into() }),
        }
    }

    pub fn mask_path(&self, id: &str) -> Result<PathBuf> {
        let p = self.root.join(&self.mask_dir).join(format!("{id}.png"));
        if p.is_file() {
            Ok(p)
        } else {
            Err(IoError::MissingFile {
                id: id.into(),
                what: "mask",
            })
        }
    }

    pub fn load(&self, id: &str) -> Result<RasterSample> {
        let image = read_rgb(&self.image_path(id)?)?;
        let mask = read_mask(&self.mask_path(id)?)?;
        if image.dimensions() != mask.dimensions() {
            return Err(IoError::SizeMismatch {
                id: id.into(),
                image: image.dimensions(),
                mask: mask.dimensions(),
            });
        }
        let (w, h) = image.dimensions();
        Ok(RasterSample::new(id, h as usize, w as usize, image.into_raw(), mask_to_binary(id, mask.as_raw()))?)
    }

    pub fn load_all(&self) -> Result<Vec<RasterSample>> {
        self.ids.iter().map(|id| self.load(id)).collect()
    }
}

/// Reads `<root>/<split>.txt` and checks every id has an image and a mask.
pub fn load_manifest(root: &Path, split: &str) -> Result<DatasetManifest> {
    let list = root.join(format!("{split}.txt"));
    let text = fs::read_to_string(&list).map_err(|e| IoError::Read {
        path: list.clone(),
        source: e,
    })?;
    let mut ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    ids.sort();
    ids.dedup();
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        split: split.into(),
        ids,
        image_dir: IMAGE_DIR.into(),
        mask_dir: MASK_DIR.into(),
    };
    for id in &manifest.ids {
        manifest.image_path(id)?;
        manifest.mask_path(id)?;
    }
    Ok(manifest)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| IoError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8())
}

pub fn read_mask(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|e| IoError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8())
}

/// `{0,255}` to `{0,1}`; any other nonzero value also counts as road, with
/// a warning.
pub fn mask_to_binary(id: &str, raw: &[u8]) -> Vec<u8> {
    let odd = raw.iter().filter(|&&v| v != 0 && v != 255).count();
    if odd > 0 {
        warn!("mask {id}: {odd} pixels are neither 0 nor 255; treating them as road");
    }
    raw.iter().map(|&v| (v != 0) as u8).collect()
}

pub fn write_png_gray(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, data).expect("buffer matches dimensions");
    img.save(path).map_err(|e| IoError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_png_rgb(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, data).expect("buffer matches dimensions");
    img.save(path).map_err(|e| IoError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes the image as RGB PNG and the mask as `{0,255}` PNG.
pub fn write_sample(root: &Path, sample: &RasterSample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    write_png_rgb(&root.join(IMAGE_DIR).join(format!("{}.png", sample.id)), w, h, sample.image().to_vec())?;
    let mask = sample.mask().iter().map(|&m| m * 255).collect();
    write_png_gray(&root.join(MASK_DIR).join(format!("{}.png", sample.id)), w, h, mask)
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| IoError::Write {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| IoError::Write {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(text.as_bytes()).map_err(|e| IoError::Write {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Generates `n` samples into the dataset layout under `out_root`, lists
/// them in `<split>.txt` and records the generator settings in
/// `synth_config.txt` (later splits append their own section). Sample ids
/// are `<split>_<index>`, so several splits can share one root.
pub fn generate_split(cfg: &SynthConfig, n: usize, out_root: &Path, split: &str) -> Result<DatasetManifest> {
    cfg.validate()?;
    create_dir(&out_root.join(IMAGE_DIR))?;
    create_dir(&out_root.join(MASK_DIR))?;
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = generate_sample(cfg, i as u64)?;
        s.id = format!("{split}_{i:05}");
        write_sample(out_root, &s)?;
        ids.push(s.id);
    }
    let mut list = String::new();
    for id in &ids {
        list.push_str(id);
        list.push('\n');
    }
    write_text(&out_root.join(format!("{split}.txt")), &list)?;
    let provenance_path = out_root.join(SYNTH_CONFIG_FILE);
    let mut provenance = fs::read_to_string(&provenance_path).unwrap_or_default();
    provenance.push_str(&format!("[{split}]\nn = {n}\n"));
    for (k, v) in cfg.pairs() {
        provenance.push_str(&format!("{k} = {v}\n"));
    }
    write_text(&provenance_path, &provenance)?;
    load_manifest(out_root, split)
}
