//! Binary training checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "RSEGCKPT" | version u32
//! encoder: variant str | channels 5 x u32 | blocks 5 x u32
//! config snapshot str (key = value lines)
//! next epoch u64
//! history: count u32, then per record epoch u64, lr f64, loss f64,
//!          has_val u8 [, iou f64, precision f64, recall f64, f1 f64]
//! params:  count u32, then per entry name str, kind u8, shape 4 x u32, f32 data
//! adam:    beta1 f64, beta2 f64, eps f64, step u64, slots u32, then per slot
//!          present u8 [, m f32 data, v f32 data]
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8. Data augmentation and
//! sample order derive from `(seed, epoch)` alone, so the seed inside the
//! config snapshot and the epoch counter are the complete RNG state.

use std::fs;
use std::path::{Path, PathBuf};

use roadseg_core::config::{parse_flat, resolve_config, TrainConfig};
use roadseg_core::encoder::{EncoderSpec, EncoderVariant};
use roadseg_core::metrics::Scores;
use roadseg_core::nn::{ParamKind, ParamStore};
use roadseg_core::optim::{Adam, AdamConfig};
use roadseg_core::tensor::Tensor;
use roadseg_core::train::{EpochRecord, Trainer};

use crate::error::{IoError, Result};

pub const MAGIC: &[u8; 8] = b"RSEGCKPT";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderSpec,
    pub config_text: String,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            encoder: t.config.model().encoder,
            config_text: t.config.to_text(),
            epoch: t.epoch,
            history: t.history.clone(),
            params: t.store.clone(),
            adam: t.adam.clone(),
        }
    }

    pub fn config(&self) -> Result<TrainConfig> {
        Ok(resolve_config(&parse_flat(&self.config_text)?, &[])?)
    }

    /// Rebuilds a trainer from the stored configuration and state.
    pub fn into_trainer(self) -> Result<Trainer> {
        let config = self.config()?;
        self.into_trainer_with(config)
    }

    /// Rebuilds a trainer for `config`, which must describe the same
    /// architecture as the checkpoint. Only non-architectural settings
    /// (for example the epoch count) may differ.
    pub fn into_trainer_with(self, config: TrainConfig) -> Result<Trainer> {
        let expected = config.model().encoder;
        let diff = self.encoder.diff(&expected);
        if !diff.is_empty() {
            return Err(IoError::SpecMismatch {
                diff: diff.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"),
            });
        }
        let mut t = Trainer::new(config)?;
        let fresh = t.store.entries();
        let stored = self.params.entries();
        let mismatch = |reason: String| IoError::SpecMismatch { diff: format!("  {reason}") };
        if fresh.len() != stored.len() {
            return Err(mismatch(format!(
                "parameter count: checkpoint {} != configuration {}",
                stored.len(),
                fresh.len()
            )));
        }
        for (a, b) in stored.iter().zip(fresh) {
            if a.name != b.name || a.kind != b.kind || a.value.shape() != b.value.shape() {
                return Err(mismatch(format!(
                    "parameter {} {:?} {:?} != {} {:?} {:?}",
                    a.name,
                    a.kind,
                    a.value.shape(),
                    b.name,
                    b.kind,
                    b.value.shape()
                )));
            }
        }
        t.store = self.params;
        t.adam = self.adam;
        t.epoch = self.epoch;
        t.history = self.history;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(self.encoder.variant.tag());
        for &c in &self.encoder.channels {
            w.u32(c as u32);
        }
        for &b in &self.encoder.blocks {
            w.u32(b as u32);
        }
        w.str(&self.config_text);
        w.u64(self.epoch as u64);
        w.u32(self.history.len() as u32);
        for r in &self.history {
            w.u64(r.epoch as u64);
            w.f64(r.lr);
            w.f64(r.train_loss);
            match r.val {
                None => w.u8(0),
                Some(s) => {
                    w.u8(1);
                    for v in [s.iou, s.precision, s.recall, s.f1] {
                        w.f64(v);
                    }
                }
            }
        }
        let entries = self.params.entries();
        w.u32(entries.len() as u32);
        for e in entries {
            w.str(&e.name);
            w.u8(match e.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            for d in e.value.shape() {
                w.u32(d as u32);
            }
            w.f32s(e.value.data());
        }
        let a = &self.adam;
        w.f64(a.config.beta1);
        w.f64(a.config.beta2);
        w.f64(a.config.eps);
        w.u64(a.step);
        w.u32(a.moments.len() as u32);
        for m in &a.moments {
            match m {
                None => w.u8(0),
                Some((m, v)) => {
                    w.u8(1);
                    w.f32s(m.data());
                    w.f32s(v.data());
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let tag = r.str()?;
        let variant = EncoderVariant::from_tag(&tag).ok_or_else(|| format!("unknown encoder variant {tag:?}"))?;
        let mut channels = [0; 5];
        for c in &mut channels {
            *c = r.u32()? as usize;
        }
        let mut blocks = [0; 5];
        for b in &mut blocks {
            *b = r.u32()? as usize;
        }
        let encoder = EncoderSpec {
            channels,
            blocks,
            variant,
        };
        let config_text = r.str()?;
        let epoch = r.u64()? as usize;
        let n = r.u32()? as usize;
        let mut history = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let epoch = r.u64()? as usize;
            let lr = r.f64()?;
            let train_loss = r.f64()?;
            let val = match r.u8()? {
                0 => None,
                1 => Some(Scores {
                    iou: r.f64()?,
                    precision: r.f64()?,
                    recall: r.f64()?,
                    f1: r.f64()?,
                }),
                k => return Err(format!("bad validation flag {k}")),
            };
            history.push(EpochRecord {
                epoch,
                lr,
                train_loss,
                val,
            });
        }
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut shapes = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str()?;
            let kind = match r.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(format!("parameter {name}: bad kind {k}")),
            };
            let mut shape = [0; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let data = r.f32s(shape.iter().product())?;
            let value = Tensor::from_vec(shape, data).map_err(|e| e.to_string())?;
            if params.find(&name).is_some() {
                return Err(format!("duplicate parameter {name}"));
            }
            params.add(name, kind, value);
            shapes.push(shape);
        }
        let config = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let step = r.u64()?;
        let slots = r.u32()? as usize;
        if slots > shapes.len() {
            return Err(format!("{slots} optimizer slots for {} parameters", shapes.len()));
        }
        let mut moments = Vec::with_capacity(slots);
        for &shape in &shapes[..slots] {
            moments.push(match r.u8()? {
                0 => None,
                1 => {
                    let len = shape.iter().product();
                    let m = Tensor::from_vec(shape, r.f32s(len)?).map_err(|e| e.to_string())?;
                    let v = Tensor::from_vec(shape, r.f32s(len)?).map_err(|e| e.to_string())?;
                    Some((m, v))
                }
                k => return Err(format!("bad moment flag {k}")),
            });
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            encoder,
            config_text,
            epoch,
            history,
            params,
            adam: Adam {
                config,
                step,
                moments,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| IoError::Write {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| IoError::Read {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes).map_err(|reason| IoError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// `ckpt_<epoch>` path inside a run directory, for the state after
/// `epochs_done` completed epochs.
pub fn checkpoint_path(run_dir: &Path, epochs_done: usize) -> PathBuf {
    run_dir.join(format!("ckpt_{epochs_done:04}.bin"))
}

/// Most recent checkpoint in a run directory, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(run_dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".bin"))
        })
        .collect();
    found.sort();
    found.pop()
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.0.reserve(v.len() * 4);
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8 string".to_string())
    }
    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
}
