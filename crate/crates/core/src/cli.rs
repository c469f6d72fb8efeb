//! `axunet` command line: synth, preprocess, train, eval, predict, gradcam.
//!
//! Failures print one line `E_<KIND>: message` to stderr and exit with
//! 2 (arguments or configuration), 3 (data) or 4 (numeric).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, store, PreprocessOptions, SlicePair, Split, BRATS_DIMS, DEFAULT_FRACTIONS};
use crate::error::{Error, Result};
use crate::gradcam::{self, GradCamRequest, Region};
use crate::model::{predict_masks, Model, ModelConfig};
use crate::tensor::{io, Tensor};
use crate::train::{self, Checkpoint, TrainConfig, MASK_THRESHOLD};

pub const THREADS_ENV: &str = "AXUNET_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset root holding one directory per case.
    pub root: PathBuf,
    /// Slice cache and split manifest.
    pub cache_dir: PathBuf,
    pub fixed_crop: Option<(usize, usize)>,
    pub tumor_threshold: f64,
    pub image_size: (usize, usize),
}

impl Default for DataSection {
    fn default() -> Self {
        let p = PreprocessOptions::default();
        DataSection { root: "data".into(), cache_dir: "cache".into(), fixed_crop: p.fixed_crop, tumor_threshold: p.tumor_threshold, image_size: p.size }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub checkpoint_dir: PathBuf,
    /// Evaluation report JSON; the text table always goes to stdout.
    pub report_path: Option<PathBuf>,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection { checkpoint_dir: "checkpoints".into(), report_path: None }
    }
}

/// Run configuration. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub io: IoSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.root, &mut cfg.data.cache_dir, &mut cfg.io.checkpoint_dir] {
            *p = base.join(&*p);
        }
        if let Some(r) = &mut cfg.io.report_path {
            *r = base.join(&*r);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.data.tumor_threshold) {
            return Err(Error::Config(format!("data.tumor_threshold {} outside [0,1]", self.data.tumor_threshold)));
        }
        let (h, w) = self.data.image_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("data.image_size {h}x{w} must be positive multiples of 32")));
        }
        self.train.validate()?;
        self.model.encoder()?;
        Ok(())
    }

    pub fn preprocess_options(&self) -> PreprocessOptions {
        PreprocessOptions { tumor_threshold: self.data.tumor_threshold, fixed_crop: self.data.fixed_crop, size: self.data.image_size }
    }
}

#[derive(Debug, Parser)]
#[command(name = "axunet", version, about = "Attention Xception UNet brain tumor segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        cases: usize,
        /// HxWxD
        #[arg(long, default_value = "240x240x155")]
        dims: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Split cases and build the slice cache.
    Preprocess {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed for the split.
        #[arg(long)]
        seed: Option<u64>,
    },
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on one partition of the cache.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to io.checkpoint_dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Threshold the model on one `[3,H,W]` slice and write WT/TC/ET planes.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a Grad-CAM overlay as PPM.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// final_conv, attention1, deblock3_conv or a dotted activation name.
        #[arg(long, default_value = "final_conv")]
        layer: String,
        #[arg(long, default_value = "wt")]
        region: String,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let bad = || Error::Config(format!("dims {s:?} must look like 240x240x155"));
    match parts.as_slice() {
        [h, w, d] => Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

/// Sizes the global rayon pool from `AXUNET_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    // a pool that already exists keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { out: dir, cases, dims, seed, force } => cmd_synth(&dir, cases, parse_dims(&dims)?, seed, force, out),
        Command::Preprocess { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cmd_preprocess(&cfg, out)
        }
        Command::Train { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cmd_train(&cfg, out)
        }
        Command::Eval { config, checkpoint, split } => {
            let cfg = RunConfig::load(&config)?;
            let dir = checkpoint.unwrap_or_else(|| cfg.io.checkpoint_dir.clone());
            cmd_eval(&cfg, &dir, &split, out)
        }
        Command::Predict { checkpoint, input, out: dst } => cmd_predict(&checkpoint, &input, &dst, out),
        Command::Gradcam { checkpoint, input, layer, region, out: dst } => cmd_gradcam(&checkpoint, &input, &layer, region.parse()?, &dst, out),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io { path: PathBuf::from("<stdout>"), source: e }
}

pub fn cmd_synth(dir: &Path, cases: usize, dims: (usize, usize, usize), seed: u64, force: bool, out: &mut dyn Write) -> Result<()> {
    if cases == 0 {
        return Err(Error::Config("--cases must be at least 1".into()));
    }
    if !force && dir.is_dir() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() {
        return Err(Error::Config(format!("{} exists and is not empty; pass --force to write into it", dir.display())));
    }
    if dims == BRATS_DIMS {
        writeln!(out, "generating {cases} cases at BraTS size {}x{}x{}", dims.0, dims.1, dims.2).map_err(io_err)?;
    }
    let stats = data::synth_generate(dir, cases, dims, seed)?;
    writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>8} {:>9}", "case", "edema", "necrotic", "enhance", "tumor", "central%").map_err(io_err)?;
    for s in &stats {
        writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>9.2}",
            s.case_id,
            s.edema_voxels,
            s.necrotic_voxels,
            s.enhancing_voxels,
            s.tumor_voxels(),
            100.0 * s.central_fraction
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Split, preprocess every case and rebuild the slice cache from scratch.
pub fn cmd_preprocess(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let root = &cfg.data.root;
    let cache = &cfg.data.cache_dir;
    let ids = store::list_cases(root)?;
    if ids.is_empty() {
        return Err(Error::Data(format!("no cases under {}", root.display())));
    }
    let split = data::split_cases(&ids, DEFAULT_FRACTIONS, cfg.train.seed)?;
    let opts = cfg.preprocess_options();
    let slices_dir = cache.join(store::SLICE_DIR);
    if slices_dir.exists() {
        fs::remove_dir_all(&slices_dir).map_err(|e| Error::io(&slices_dir, e))?;
    }
    let counts: Vec<(String, usize)> = ids
        .par_iter()
        .map(|id| {
            let v = store::read_case(root, id)?;
            let pairs = data::preprocess_volume(&v, &opts)?;
            for p in &pairs {
                store::write_slice(cache, p)?;
            }
            Ok((id.clone(), pairs.len()))
        })
        .collect::<Result<_>>()?;
    store::write_split(cache, &split)?;
    for part in ["train", "val", "test"] {
        let members = split.partition(part)?;
        let n: usize = counts.iter().filter(|(id, _)| members.contains(id)).map(|(_, n)| n).sum();
        writeln!(out, "{part:<5} {:>5} cases {n:>7} slices", members.len()).map_err(io_err)?;
    }
    Ok(())
}

fn load_partition(cache: &Path, split: &Split, name: &str) -> Result<Vec<SlicePair>> {
    store::load_slices(cache, split.partition(name)?)
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let cache = &cfg.data.cache_dir;
    let split = store::read_split(cache)?;
    let train_set = load_partition(cache, &split, "train")?;
    let val_set = load_partition(cache, &split, "val")?;
    writeln!(out, "train {} slices, val {} slices", train_set.len(), val_set.len()).map_err(io_err)?;
    let model: Model<f32> = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir = Some(cfg.io.checkpoint_dir.clone());
    let mut log_err = None;
    let outcome = train::train(model, &train_set, &val_set, &tc, |r| {
        let line = format!(
            "epoch {:>3}  lr {:.3e}  loss {:.5}  val dice {:.4} (wt {:.4} tc {:.4} et {:.4}){}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val.mean,
            r.val.wt,
            r.val.tc,
            r.val.et,
            if r.improved { "  *" } else { "" }
        );
        if let Err(e) = writeln!(out, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_err(e));
    }
    writeln!(
        out,
        "best epoch {} val dice {:.4}; checkpoint {}",
        outcome.best.epoch,
        outcome.best.best_val_dice,
        cfg.io.checkpoint_dir.display()
    )
    .map_err(io_err)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split_name: &str, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.model.config() != &cfg.model {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match config model {:?}",
            ck.model.config(),
            cfg.model
        )));
    }
    let split = store::read_split(&cfg.data.cache_dir)?;
    let set = load_partition(&cfg.data.cache_dir, &split, split_name)?;
    let report = train::evaluate(&ck.model, &set, cfg.train.batch_size)?;
    write!(out, "{}", report.to_table()).map_err(io_err)?;
    if let Some(path) = &cfg.io.report_path {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, report.to_json()?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let t: Tensor<f32> = io::read(path)?;
    match *t.shape() {
        [3, h, w] if h > 0 && w > 0 => Ok(t),
        ref s => Err(Error::Data(format!("{}: expected a [3,H,W] slice image, got {s:?}", path.display()))),
    }
}

pub fn cmd_predict(checkpoint: &Path, input: &Path, dst: &Path, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let x = read_image(input)?;
    let s = x.shape().to_vec();
    let logits = ck.model.logits(&x.reshape(vec![1, s[0], s[1], s[2]])?)?;
    let mask = predict_masks(&logits, MASK_THRESHOLD)?.remove(0);
    io::write(dst, &mask.to_tensor())?;
    let [wt, tc, et] = mask.foreground_counts();
    writeln!(out, "wt {wt} tc {tc} et {et} pixels -> {}", dst.display()).map_err(io_err)
}

pub fn cmd_gradcam(checkpoint: &Path, input: &Path, layer: &str, region: Region, dst: &Path, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let x = read_image(input)?;
    let heat = gradcam::gradcam(&ck.model, &x, &GradCamRequest::new(layer, region))?;
    let rgb = gradcam::overlay(&x, &heat)?;
    gradcam::write_ppm(dst, &rgb)?;
    let peak = heat.values.iter().copied().fold(0f32, f32::max);
    writeln!(out, "{} {region} {}x{} peak {peak:.3} -> {}", gradcam::resolve_layer(layer), rgb.width, rgb.height, dst.display()).map_err(io_err)
}
