//! Optimization loop: deterministic batching, training steps, evaluation and
//! the module ablation.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{augment, center_crop, normalize, sample_rng, NormalizedBatch, RasterSample};
use crate::error::{Error, Result};
use crate::losses::{deep_supervised_graph, LossReport};
use crate::metrics::{threshold_mask, ConfusionCounts, Evaluation, Scores};
use crate::network::{RoadNet, Toggles};
use crate::nn::{Graph, Mode, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tiling::predict_probabilities;

/// One line of the per-epoch log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<Scores>,
}

/// Model, parameters and optimizer state of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: RoadNet,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Stream used for the per-epoch sample order, disjoint from the
/// per-sample augmentation streams.
const ORDER_STREAM: u64 = 1 << 63;

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = RoadNet::new(&mut store, &mut rng, config.model())?;
        let adam = Adam::new(AdamConfig::default(), store.len());
        Ok(Self {
            config,
            net,
            store,
            adam,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Forward, deep-supervised loss, backward and one optimizer update.
    /// A non-finite loss aborts before any parameter changes.
    pub fn train_step(&mut self, batch: &NormalizedBatch<f32>, lr: f64) -> Result<LossReport> {
        let (report, grads) = {
            let mut g = Graph::new(&mut self.store, Mode::Train);
            let x = g.input(batch.images.clone());
            let sides = self.net.forward(&mut g, x)?;
            let (loss, report) = deep_supervised_graph(&mut g, &sides, &batch.masks, &self.config.loss_weights)?;
            if !report.total.is_finite() {
                let mut components = String::new();
                let _ = write!(components, "ids {:?}; {}", batch.ids, report.describe());
                return Err(Error::NonFinite {
                    total: report.total,
                    components,
                });
            }
            let grads = g.tape.backward(loss);
            (report, g.param_grads(&grads))
        };
        self.adam.update(&mut self.store, &grads, lr);
        Ok(report)
    }

    /// Augmented, normalized batches of `epoch` in their deterministic order.
    pub fn epoch_batches(&self, samples: &[RasterSample], epoch: usize) -> Result<Vec<NormalizedBatch<f32>>> {
        let cfg = &self.config;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(ORDER_STREAM | epoch as u64);
        order.shuffle(&mut rng);
        order
            .chunks(cfg.batch)
            .map(|chunk| {
                let tiles = chunk
                    .iter()
                    .map(|&i| {
                        let mut r = sample_rng(cfg.seed, i as u64, epoch as u64);
                        augment(&samples[i], cfg.crop, cfg.flip_prob, &mut r)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut b = normalize(&tiles, &cfg.normalization)?;
                b.seed_state = ((epoch as u128) << 64) | chunk[0] as u128;
                Ok(b)
            })
            .collect()
    }

    /// One pass over `samples`; returns the sample-weighted mean total loss.
    pub fn run_epoch(&mut self, samples: &[RasterSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let lr = self.config.lr_at(self.epoch)?;
        let batches = self.epoch_batches(samples, self.epoch)?;
        let mut sum = 0.0;
        for b in &batches {
            let r = self.train_step(b, lr)?;
            sum += r.total * b.ids.len() as f64;
        }
        Ok(sum / samples.len() as f64)
    }

    /// Thresholded evaluation-mode predictions on the centre region of each
    /// sample (the full tile when its sides are multiples of 32).
    pub fn evaluate(&mut self, samples: &[RasterSample]) -> Result<Evaluation> {
        let mut eval = Evaluation::default();
        for chunk in samples.chunks(self.config.batch.max(1)) {
            let tiles = chunk
                .iter()
                .map(|s| center_crop(s, s.height(), s.width()))
                .collect::<Result<Vec<_>>>()?;
            // tiles of different sizes are predicted one by one
            let uniform = tiles.iter().all(|t| (t.height(), t.width()) == (tiles[0].height(), tiles[0].width()));
            let groups: Vec<&[RasterSample]> = if uniform {
                Vec::from([&tiles[..]])
            } else {
                tiles.chunks(1).collect()
            };
            for group in groups {
                let batch = normalize::<f32>(group, &self.config.normalization)?;
                let prob = predict_probabilities(&self.net, &mut self.store, batch.images)?;
                for (i, t) in group.iter().enumerate() {
                    let pred = threshold_mask(prob.sample(i));
                    eval.add_image(ConfusionCounts::from_masks(&pred, t.mask())?);
                }
            }
        }
        Ok(eval)
    }

    /// Trains the remaining epochs. `on_epoch` sees every finished epoch and
    /// may persist state; an error from it stops the run.
    pub fn fit<F>(&mut self, train: &[RasterSample], val: &[RasterSample], mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Self, &EpochRecord) -> Result<()>,
    {
        while self.epoch < self.config.epochs {
            let lr = self.config.lr_at(self.epoch)?;
            let train_loss = self.run_epoch(train)?;
            let val = if val.is_empty() {
                None
            } else {
                Some(self.evaluate(val)?.micro())
            };
            let record = EpochRecord {
                epoch: self.epoch,
                lr,
                train_loss,
                val,
            };
            self.history.push(record);
            self.epoch += 1;
            on_epoch(self, &record)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub val: Scores,
    pub final_train_loss: f64,
}

/// Trains and evaluates one model per toggle set, all other settings equal.
pub fn run_ablation<F>(
    base: &TrainConfig,
    grid: &[Toggles],
    train: &[RasterSample],
    val: &[RasterSample],
    mut on_row: F,
) -> Result<Vec<AblationRow>>
where
    F: FnMut(&AblationRow),
{
    if grid.is_empty() {
        return Err(Error::Empty("ablation grid"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &toggles in grid {
        let mut cfg = base.clone();
        cfg.toggles = toggles;
        let mut t = Trainer::new(cfg)?;
        t.fit(train, &[], |_, _| Ok(()))?;
        let row = AblationRow {
            toggles,
            val: t.evaluate(val)?.micro(),
            final_train_loss: t.history.last().map_or(f64::NAN, |r| r.train_loss),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::synth::{generate_sample, SynthConfig};

    fn tiny(epochs: usize) -> TrainConfig {
        let mut c = TrainConfig::profile(Profile::Tiny);
        c.crop = 64;
        c.batch = 2;
        c.epochs = epochs;
        c.lr_drops.clear();
        c
    }

    fn samples(n: u64) -> Vec<RasterSample> {
        let cfg = SynthConfig {
            size: 64,
            ..Default::default()
        };
        (0..n).map(|i| generate_sample(&cfg, i).unwrap()).collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut t = Trainer::new(tiny(1)).unwrap();
        let data = samples(2);
        let batch = t.epoch_batches(&data, 0).unwrap().remove(0);
        let before: Vec<_> = t.store.trainable().map(|id| t.store.value(id).clone()).collect();
        t.train_step(&batch, 0.0).unwrap();
        let after: Vec<_> = t.store.trainable().map(|id| t.store.value(id).clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn batches_are_reproducible_and_epoch_dependent() {
        let t = Trainer::new(tiny(2)).unwrap();
        let data = samples(4);
        let a = t.epoch_batches(&data, 0).unwrap();
        assert_eq!(a, t.epoch_batches(&data, 0).unwrap());
        assert_ne!(a, t.epoch_batches(&data, 1).unwrap());
        assert!(a.iter().all(|b| b.images.shape()[2] % 32 == 0));
    }

    #[test]
    fn fit_records_every_epoch() {
        let mut t = Trainer::new(tiny(2)).unwrap();
        let data = samples(2);
        let mut seen = Vec::new();
        t.fit(&data, &data, |_, r| {
            seen.push(r.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, [0, 1]);
        assert!(t.history.iter().all(|r| r.train_loss.is_finite() && r.val.is_some()));
    }
}
