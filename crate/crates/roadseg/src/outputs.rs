//! Run directories, CSV logs and prediction images.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use roadseg_core::config::TrainConfig;
use roadseg_core::metrics::{threshold_mask, ConfusionCounts, RocCurve};
use roadseg_core::train::{AblationRow, EpochRecord, Trainer};

use crate::checkpoint::{checkpoint_path, Checkpoint};
use crate::dataset::{create_dir, write_png_gray, write_text};
use crate::error::{IoError, Result};

pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const METRICS_CSV: &str = "metrics.csv";
const METRICS_HEADER: &str = "epoch,lr,train_loss,val_iou,val_f1\n";

/// `runs/<name>/` holding the config snapshot, per-epoch metrics and
/// checkpoints.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, config: &TrainConfig) -> Result<Self> {
        create_dir(path)?;
        write_text(&path.join(CONFIG_SNAPSHOT), &config.to_text())?;
        let metrics = path.join(METRICS_CSV);
        if !metrics.exists() {
            write_text(&metrics, METRICS_HEADER)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn append_epoch(&self, r: &EpochRecord) -> Result<()> {
        let path = self.path.join(METRICS_CSV);
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| IoError::Write {
                path: path.clone(),
                source: e,
            })?;
        f.write_all(epoch_line(r).as_bytes()).map_err(|e| IoError::Write { path, source: e })
    }

    /// Saves the trainer state after its latest epoch.
    pub fn save_checkpoint(&self, t: &Trainer) -> Result<PathBuf> {
        let p = checkpoint_path(&self.path, t.epoch);
        Checkpoint::from_trainer(t).save(&p)?;
        Ok(p)
    }
}

pub fn epoch_line(r: &EpochRecord) -> String {
    let (iou, f1) = r.val.map_or((String::new(), String::new()), |s| (s.iou.to_string(), s.f1.to_string()));
    format!("{},{},{},{iou},{f1}\n", r.epoch, r.lr, r.train_loss)
}

/// Writes a `{0,255}` mask PNG from a probability map thresholded at 0.5.
pub fn write_mask_png(path: &Path, width: usize, height: usize, prob: &[f64]) -> Result<()> {
    let mask = threshold_mask(prob).into_iter().map(|m| m * 255).collect();
    write_png_gray(path, width, height, mask)
}

/// Probability map as an 8-bit PNG, `round(p * 255)`.
pub fn write_prob_png(path: &Path, width: usize, height: usize, prob: &[f64]) -> Result<()> {
    let q = prob.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png_gray(path, width, height, q)
}

pub fn metrics_csv(counts: &ConfusionCounts, auc: Option<f64>) -> String {
    let s = counts.scores();
    let mut out = String::from("metric,value\n");
    for (k, v) in [
        ("iou", s.iou),
        ("precision", s.precision),
        ("recall", s.recall),
        ("f1", s.f1),
    ] {
        let _ = writeln!(out, "{k},{v}");
    }
    for (k, v) in [("tp", counts.tp), ("fp", counts.fp), ("fn", counts.fn_), ("tn", counts.tn)] {
        let _ = writeln!(out, "{k},{v}");
    }
    if let Some(a) = auc {
        let _ = writeln!(out, "auc,{a}");
    }
    out
}

pub fn roc_csv(roc: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &roc.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,acam,gam,ram,val_iou,val_precision,val_recall,val_f1,final_train_loss\n");
    for r in rows {
        let t = r.toggles;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            t.label(),
            t.acam,
            t.gam,
            t.ram,
            r.val.iou,
            r.val.precision,
            r.val.recall,
            r.val.f1,
            r.final_train_loss
        );
    }
    out
}

/// Writes `text` to `dir/name`, creating `dir` first.
pub fn write_into(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    create_dir(dir)?;
    let p = dir.join(name);
    write_text(&p, text)?;
    Ok(p)
}

/// Reads a text file with a path-carrying error.
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| IoError::Read {
        path: path.to_path_buf(),
        source: e,
    })
}
