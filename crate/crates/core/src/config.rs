//! Training configuration, the learning-rate schedule, and flat key/value
//! parsing with `defaults <- file <- overrides` precedence.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::data::Normalization;
use crate::encoder::{EncoderSpec, EncoderVariant, INPUT_MULTIPLE};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{ModelConfig, Toggles};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Profile {
    /// Full-scale recipe.
    Paper,
    /// Desk-scale recipe for synthetic data.
    Tiny,
}

impl Profile {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Paper => "paper",
            Self::Tiny => "tiny",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "tiny" => Ok(Self::Tiny),
            _ => Err(Error::Config(alloc::format!("unknown profile {s:?} (expected paper or tiny)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub crop: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at whose start the learning rate is multiplied by `lr_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_factor: f64,
    pub loss_weights: LossWeights,
    pub toggles: Toggles,
    pub encoder: EncoderVariant,
    pub seed: u64,
    pub normalization: Normalization,
    /// Probability of each of the three flips.
    pub flip_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Paper)
    }
}

/// Every accepted configuration key.
pub const TRAIN_KEYS: [&str; 16] = [
    "profile",
    "crop",
    "batch",
    "epochs",
    "lr",
    "lr_drops",
    "lr_factor",
    "loss_weights",
    "use_acam",
    "use_gam",
    "use_ram",
    "encoder",
    "seed",
    "mean",
    "std",
    "flip_prob",
];

fn parse<V: core::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(alloc::format!("{key}: cannot parse {value:?}")))
}

fn parse_list<V: core::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        v => Err(Error::Config(alloc::format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into()
        .map_err(|v: Vec<f64>| Error::Config(alloc::format!("{key}: expected 3 values, got {}", v.len())))
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let (crop, batch, epochs, lr_drops, encoder) = match profile {
            Profile::Paper => (768, 8, 120, Vec::from([70, 90, 110]), EncoderVariant::Resnest50Compatible),
            Profile::Tiny => (96, 4, 30, Vec::from([15, 22, 27]), EncoderVariant::Tiny),
        };
        Self {
            profile,
            crop,
            batch,
            epochs,
            lr: 2e-4,
            lr_drops,
            lr_factor: 0.2,
            loss_weights: LossWeights::default(),
            toggles: Toggles::FULL,
            encoder,
            seed: 0,
            normalization: Normalization::default(),
            flip_prob: 0.5,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderSpec::for_variant(self.encoder),
            toggles: self.toggles,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(alloc::format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad(alloc::format!("lr_factor must lie in (0, 1], got {}", self.lr_factor));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.crop < INPUT_MULTIPLE || !self.crop.is_multiple_of(INPUT_MULTIPLE) {
            return bad(alloc::format!("crop {} must be a positive multiple of {INPUT_MULTIPLE}", self.crop));
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) {
            return bad(alloc::format!("lr_drops {:?} must be strictly increasing", self.lr_drops));
        }
        if self.lr_drops.iter().any(|&e| e >= self.epochs) {
            return bad(alloc::format!("lr_drops {:?} must be below epochs {}", self.lr_drops, self.epochs));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(alloc::format!("flip_prob {} outside [0,1]", self.flip_prob));
        }
        LossWeights::new(self.loss_weights.0).map_err(|e| Error::Config(e.to_string()))?;
        self.normalization.validate()
    }

    /// Piecewise-constant schedule; drops take effect at the start of the
    /// listed epochs.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::Config(alloc::format!(
                "epoch {epoch} outside the schedule of {} epochs",
                self.epochs
            )));
        }
        let drops = self.lr_drops.iter().filter(|&&d| epoch >= d).count();
        Ok(self.lr * self.lr_factor.powi(drops as i32))
    }

    /// Applies one key/value pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "profile" => self.profile = Profile::from_tag(value.trim())?,
            "crop" => self.crop = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_drops" => self.lr_drops = parse_list(key, value)?,
            "lr_factor" => self.lr_factor = parse(key, value)?,
            "loss_weights" => {
                let w: Vec<f64> = parse_list(key, value)?;
                let w: [f64; 5] = w
                    .try_into()
                    .map_err(|w: Vec<f64>| Error::Config(alloc::format!("loss_weights: expected 5 values, got {}", w.len())))?;
                self.loss_weights = LossWeights(w);
            }
            "use_acam" => self.toggles.acam = parse_bool(key, value)?,
            "use_gam" => self.toggles.gam = parse_bool(key, value)?,
            "use_ram" => self.toggles.ram = parse_bool(key, value)?,
            "encoder" => {
                self.encoder = EncoderVariant::from_tag(value.trim())
                    .ok_or_else(|| Error::Config(alloc::format!("unknown encoder {value:?}")))?
            }
            "seed" => self.seed = parse(key, value)?,
            "mean" => self.normalization.mean = parse_triple(key, value)?,
            "std" => self.normalization.std = parse_triple(key, value)?,
            "flip_prob" => self.flip_prob = parse(key, value)?,
            _ => return Err(Error::Config(alloc::format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Key/value pairs sufficient to rebuild this configuration exactly.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.toggles;
        let values = [
            self.profile.tag().to_string(),
            self.crop.to_string(),
            self.batch.to_string(),
            self.epochs.to_string(),
            self.lr.to_string(),
            join(&self.lr_drops),
            self.lr_factor.to_string(),
            join(&self.loss_weights.0),
            t.acam.to_string(),
            t.gam.to_string(),
            t.ram.to_string(),
            self.encoder.tag().to_string(),
            self.seed.to_string(),
            join(&self.normalization.mean),
            join(&self.normalization.std),
            self.flip_prob.to_string(),
        ];
        TRAIN_KEYS.iter().copied().zip(values).collect()
    }

    /// The flat text form read by [`parse_flat`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(alloc::format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a command-line `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(alloc::format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Resolves defaults, then file pairs, then overrides. The last `profile`
/// among all pairs selects the defaults the remaining keys are applied to.
pub fn resolve_config(file: &[(String, String)], overrides: &[(String, String)]) -> Result<TrainConfig> {
    let all: Vec<&(String, String)> = file.iter().chain(overrides).collect();
    let profile = match all.iter().rev().find(|(k, _)| k == "profile") {
        Some((_, v)) => Profile::from_tag(v)?,
        None => Profile::Paper,
    };
    let mut cfg = TrainConfig::profile(profile);
    for (k, v) in all {
        if k != "profile" {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0).unwrap(), 2e-4);
        assert!((c.lr_at(70).unwrap() - 4e-5).abs() < 1e-18);
        assert!((c.lr_at(110).unwrap() - 1.6e-6).abs() < 1e-18);
        assert_eq!(c.lr_at(69).unwrap(), 2e-4);
        assert!(c.lr_at(120).is_err());
        let lrs: Vec<f64> = (0..c.epochs).map(|e| c.lr_at(e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn empty_file_gives_paper_defaults() {
        let c = resolve_config(&[], &[]).unwrap();
        assert_eq!((c.crop, c.batch, c.epochs, c.lr), (768, 8, 120, 2e-4));
        assert_eq!(c.loss_weights.0, [1.3, 1.0, 0.7, 0.7, 1.0]);
        assert_eq!(c.lr_drops, [70, 90, 110]);
    }

    #[test]
    fn profile_override_and_precedence() {
        let file = pairs(&[("epochs", "40"), ("seed", "3")]);
        let c = resolve_config(&file, &pairs(&[("profile", "tiny"), ("seed", "9")])).unwrap();
        assert_eq!((c.crop, c.batch, c.epochs, c.seed), (96, 4, 40, 9));
        assert_eq!(c.lr_drops, [15, 22, 27]);
        assert_eq!(c.encoder, EncoderVariant::Tiny);
    }

    #[test]
    fn validation_failures() {
        assert!(resolve_config(&[], &pairs(&[("lr", "-1")])).is_err());
        assert!(resolve_config(&[], &pairs(&[("bogus", "1")])).is_err());
        assert!(resolve_config(&[], &pairs(&[("batch", "x")])).is_err());
        assert!(resolve_config(&[], &pairs(&[("lr_drops", "90,70")])).is_err());
        assert!(resolve_config(&[], &pairs(&[("lr_drops", "130")])).is_err());
        assert!(resolve_config(&[], &pairs(&[("std", "0.5,0,0.5")])).is_err());
        assert!(resolve_config(&[], &pairs(&[("loss_weights", "1,1")])).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::profile(Profile::Tiny);
        c.seed = 17;
        c.toggles = Toggles::BASELINE;
        c.normalization.mean = [0.1, 0.2, 0.3];
        let back = resolve_config(&parse_flat(&c.to_text()).unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flat_parser() {
        let p = parse_flat("# comment\n\nlr = 0.1 # trailing\nbatch=2\n").unwrap();
        assert_eq!(p, pairs(&[("lr", "0.1"), ("batch", "2")]));
        assert!(parse_flat("novalue\n").is_err());
        assert!(parse_override("a").is_err());
    }
}
