//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors (bad flags,
//! unknown configuration keys, missing data, mismatched checkpoints, failed
//! gradient checks), 2 for failures while running.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use roadseg_core::checks::{run_gradcheck, CheckTarget, GRADCHECK_TOLERANCE};
use roadseg_core::config::{parse_flat, parse_override, resolve_config, TrainConfig};
use roadseg_core::gradcheck::GradCheckOptions;
use roadseg_core::metrics::{roc_auc, ConfusionCounts, Evaluation, DEFAULT_ROC_THRESHOLDS};
use roadseg_core::network::Toggles;
use roadseg_core::synth::SynthConfig;
use roadseg_core::tiling::{evaluate_mosaic, plan_windows, DEFAULT_STRIDE, DEFAULT_WINDOW};
use roadseg_core::train::run_ablation;

use crate::checkpoint::{latest_checkpoint, Checkpoint};
use crate::dataset::{generate_split, load_manifest, read_mask, read_rgb, write_text};
use crate::error::{IoError, Result};
use crate::inference::{predict_raster, predict_sample};
use crate::outputs::{
    ablation_csv, metrics_csv, read_text, roc_csv, write_into, write_mask_png, write_prob_png, RunDir,
    CONFIG_SNAPSHOT,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "roadseg", version, about = "Road segmentation: data synthesis, training, evaluation and tiled inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset split.
    Synth(SynthArgs),
    /// Train a model, checkpointing after every epoch.
    Train(TrainArgs),
    /// Pixel metrics of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write probability and mask images for every sample of a split.
    Predict(PredictArgs),
    /// Sliding-window inference on one large raster.
    Mosaic(MosaicArgs),
    /// Pooled ROC curve of a checkpoint on a dataset split.
    Roc(RocArgs),
    /// Train and evaluate the module ablation grid.
    Ablate(AblateArgs),
    /// Finite-difference gradient verification of the network parts.
    Gradcheck(GradcheckArgs),
}

/// `--config` file plus repeatable `--set key=value` overrides.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn provided(&self) -> bool {
        self.config.is_some() || !self.set.is_empty()
    }

    fn overrides(&self) -> Result<Vec<(String, String)>> {
        Ok(self.set.iter().map(|s| parse_override(s)).collect::<std::result::Result<_, _>>()?)
    }

    fn file_pairs(&self) -> Result<Vec<(String, String)>> {
        match &self.config {
            Some(p) => Ok(parse_flat(&read_text(p)?)?),
            None => Ok(Vec::new()),
        }
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        Ok(resolve_config(&self.file_pairs()?, &self.overrides()?)?)
    }

    /// Resolves on top of `base` (e.g. a checkpoint's snapshot).
    fn resolve_over(&self, base: &str) -> Result<TrainConfig> {
        let mut pairs = parse_flat(base)?;
        pairs.extend(self.file_pairs()?);
        Ok(resolve_config(&pairs, &self.overrides()?)?)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset root to write into.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Override one generator setting, e.g. `--set width_max=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub train_split: String,
    /// Validation split; skipped when its list file does not exist.
    #[arg(long, default_value = "val")]
    pub val_split: String,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, default_value = "default")]
    pub name: String,
    /// Continue from the newest checkpoint of the run.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Expected configuration; the checkpoint's architecture must match it.
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory for `metrics.csv` and the config snapshot.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MosaicArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// RGB raster (PNG or TIFF).
    #[arg(long)]
    pub image: PathBuf,
    /// Ground-truth mask; enables metrics and ROC output.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct RocArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long, default_value_t = DEFAULT_ROC_THRESHOLDS)]
    pub thresholds: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub train_split: String,
    #[arg(long, default_value = "val")]
    pub val_split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Target name or `all`.
    #[arg(long, default_value = "all")]
    pub module: String,
    /// Spatial input size (multiple of 4; the encoder rounds up to 32).
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Mosaic(a) => mosaic(a),
        Command::Roc(a) => roc(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<i32> {
    let mut cfg = SynthConfig {
        seed: a.seed,
        ..Default::default()
    };
    for s in &a.set {
        let (k, v) = parse_override(s)?;
        cfg.set(&k, &v)?;
    }
    let m = generate_split(&cfg, a.n, &a.out, &a.split)?;
    info!("wrote {} samples to {} (split {})", m.len(), a.out.display(), a.split);
    Ok(EXIT_OK)
}

fn load_split(root: &Path, split: &str) -> Result<Vec<roadseg_core::data::RasterSample>> {
    let m = load_manifest(root, split)?;
    if m.is_empty() {
        return Err(roadseg_core::error::Error::Empty("dataset split").into());
    }
    m.load_all()
}

fn train(a: TrainArgs) -> Result<i32> {
    let run_path = a.out.join(&a.name);
    let mut trainer = match a.resume.then(|| latest_checkpoint(&run_path)).flatten() {
        Some(p) => {
            let ckpt = Checkpoint::load(&p)?;
            let config = a.config.resolve_over(&ckpt.config_text)?;
            info!("resuming from {} at epoch {}", p.display(), ckpt.epoch);
            ckpt.into_trainer_with(config)?
        }
        None => {
            if a.resume {
                info!("no checkpoint in {}; starting fresh", run_path.display());
            }
            roadseg_core::train::Trainer::new(a.config.resolve()?)?
        }
    };
    let train = load_split(&a.data, &a.train_split)?;
    let val = if a.data.join(format!("{}.txt", a.val_split)).is_file() {
        load_split(&a.data, &a.val_split)?
    } else {
        Vec::new()
    };
    let run = RunDir::create(&run_path, &trainer.config)?;
    info!(
        "training {} samples ({} validation) for epochs {}..{}",
        train.len(),
        val.len(),
        trainer.epoch,
        trainer.config.epochs
    );
    let mut io_error = None;
    let outcome = trainer.fit(&train, &val, |t, r| {
        let saved = run.append_epoch(r).and_then(|_| run.save_checkpoint(t));
        match saved {
            Ok(p) => {
                let v = r.val.map_or(String::new(), |s| format!(" val iou {:.4} f1 {:.4}", s.iou, s.f1));
                info!("epoch {} lr {:.2e} loss {:.4}{v} -> {}", r.epoch, r.lr, r.train_loss, p.display());
                Ok(())
            }
            Err(e) => {
                let msg = e.to_string();
                io_error = Some(e);
                Err(roadseg_core::error::Error::Invalid(msg))
            }
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    outcome?;
    Ok(EXIT_OK)
}

/// Loads a checkpoint, checking it against the configuration given on the
/// command line when there is one.
fn load_model(ckpt: &Path, config: &ConfigArgs) -> Result<roadseg_core::train::Trainer> {
    let c = Checkpoint::load(ckpt)?;
    if config.provided() {
        let cfg = config.resolve()?;
        c.into_trainer_with(cfg)
    } else {
        c.into_trainer()
    }
}

fn eval(a: EvalArgs) -> Result<i32> {
    let mut t = load_model(&a.ckpt, &a.config)?;
    let samples = load_split(&a.data, &a.split)?;
    let mut e = Evaluation::default();
    for s in &samples {
        let (crop, prob) = predict_sample(&mut t, s)?;
        e.add_image(ConfusionCounts::from_masks(
            &roadseg_core::metrics::threshold_mask(&prob),
            crop.mask(),
        )?);
    }
    let m = e.micro();
    let per = e.per_image_mean();
    println!(
        "{} images: iou {:.4} precision {:.4} recall {:.4} f1 {:.4} (per-image mean iou {:.4})",
        e.images(),
        m.iou,
        m.precision,
        m.recall,
        m.f1,
        per.iou
    );
    if let Some(out) = &a.out {
        write_into(out, "metrics.csv", &metrics_csv(&e.pooled, None))?;
        write_text(&out.join(CONFIG_SNAPSHOT), &t.config.to_text())?;
    }
    Ok(EXIT_OK)
}

fn predict(a: PredictArgs) -> Result<i32> {
    let mut t = load_model(&a.ckpt, &ConfigArgs { config: None, set: Vec::new() })?;
    let samples = load_split(&a.data, &a.split)?;
    crate::dataset::create_dir(&a.out)?;
    write_text(&a.out.join(CONFIG_SNAPSHOT), &t.config.to_text())?;
    for s in &samples {
        let (crop, prob) = predict_sample(&mut t, s)?;
        let (h, w) = (crop.height(), crop.width());
        write_prob_png(&a.out.join(format!("{}_prob.png", s.id)), w, h, &prob)?;
        write_mask_png(&a.out.join(format!("{}_mask.png", s.id)), w, h, &prob)?;
    }
    info!("wrote predictions for {} samples to {}", samples.len(), a.out.display());
    Ok(EXIT_OK)
}

fn mosaic(a: MosaicArgs) -> Result<i32> {
    let mut t = load_model(&a.ckpt, &ConfigArgs { config: None, set: Vec::new() })?;
    let img = read_rgb(&a.image)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gt = match &a.gt {
        Some(p) => {
            let m = read_mask(p)?;
            if m.dimensions() != img.dimensions() {
                return Err(IoError::SizeMismatch {
                    id: a.image.display().to_string(),
                    image: img.dimensions(),
                    mask: m.dimensions(),
                });
            }
            Some(crate::dataset::mask_to_binary("ground truth", m.as_raw()))
        }
        None => None,
    };
    let plan = plan_windows(h, w, a.window, a.stride)?;
    info!("{}x{} raster, {} windows of {:?}", h, w, plan.origins.len(), plan.extent);
    let raster = roadseg_core::tiling::RgbRaster::new(h, w, img.into_raw())?;
    let prob = predict_raster(&mut t, &raster, &plan)?;
    crate::dataset::create_dir(&a.out)?;
    write_text(&a.out.join(CONFIG_SNAPSHOT), &t.config.to_text())?;
    write_prob_png(&a.out.join("prob.png"), w, h, &prob)?;
    write_mask_png(&a.out.join("mask.png"), w, h, &prob)?;
    if let Some(gt) = gt {
        let (counts, curve) = evaluate_mosaic(&prob, &gt)?;
        write_text(&a.out.join("metrics.csv"), &metrics_csv(&counts, Some(curve.auc)))?;
        write_text(&a.out.join("roc.csv"), &roc_csv(&curve))?;
        let s = counts.scores();
        println!("iou {:.4} f1 {:.4} auc {:.4}", s.iou, s.f1, curve.auc);
    }
    Ok(EXIT_OK)
}

fn roc(a: RocArgs) -> Result<i32> {
    let mut t = load_model(&a.ckpt, &ConfigArgs { config: None, set: Vec::new() })?;
    let samples = load_split(&a.data, &a.split)?;
    let mut prob = Vec::new();
    let mut gt = Vec::new();
    for s in &samples {
        let (crop, p) = predict_sample(&mut t, s)?;
        prob.extend(p);
        gt.extend_from_slice(crop.mask());
    }
    let curve = roc_auc(&prob, &gt, a.thresholds)?;
    write_into(&a.out, "roc.csv", &roc_csv(&curve))?;
    println!("auc {:.4} over {} pixels", curve.auc, prob.len());
    Ok(EXIT_OK)
}

fn ablate(a: AblateArgs) -> Result<i32> {
    let base = a.config.resolve()?;
    let train = load_split(&a.data, &a.train_split)?;
    let val = load_split(&a.data, &a.val_split)?;
    write_into(&a.out, CONFIG_SNAPSHOT, &base.to_text())?;
    let rows = run_ablation(&base, &Toggles::ablation_grid(), &train, &val, |r| {
        info!("{}: val iou {:.4} f1 {:.4}", r.toggles.label(), r.val.iou, r.val.f1);
    })?;
    let csv = ablation_csv(&rows);
    write_into(&a.out, "ablation.csv", &csv)?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let targets: Vec<CheckTarget> = if a.module == "all" {
        CheckTarget::ALL.to_vec()
    } else {
        vec![a.module.parse()?]
    };
    let opts = GradCheckOptions {
        seed: a.seed,
        ..Default::default()
    };
    let mut all_ok = true;
    for t in targets {
        let r = run_gradcheck(t, a.size, &opts)?;
        let ok = r.max_rel_err < GRADCHECK_TOLERANCE;
        println!(
            "{:<16} max rel err {:.3e} over {} tensors  {}",
            t.name(),
            r.max_rel_err,
            r.tensors.len(),
            if ok { "ok" } else { "FAIL" }
        );
        all_ok &= ok;
    }
    Ok(if all_ok { EXIT_OK } else { EXIT_VALIDATION })
}
