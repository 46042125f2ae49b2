//! Desk-scale optimization: Adam under a triangular cyclic learning rate,
//! seeded patch sampling, periodic validation, checkpoint/resume, the
//! ablation harness and the inference benchmark.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, Container, DType};
use crate::degradation::read_manifest;
use crate::error::{Error, Result};
use crate::imaging::{load_image, AugmentSpec, ImageTensor, Transform};
use crate::losses::{total_loss, FeatureExtractor, LossConfig, EXTRACTOR_SEED};
use crate::metrics::{psnr, ssim};
use crate::model::{count_flops, count_params, AblationSetting, Model, ModelConfig};
use crate::weights::WeightStore;

pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const STATE_CHECKPOINT: &str = "train_state.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const KIND_TRAIN_STATE: &str = "train_state";

/// Reference figures for the default model at 1080x720.
pub const REFERENCE_PARAMS: usize = 110_950;
pub const REFERENCE_FLOPS: f64 = 31.33e9;
pub const REFERENCE_SECONDS: f64 = 0.039;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub horizontal_flip: f64,
    pub rotation_set: Vec<u16>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            horizontal_flip: 0.5,
            rotation_set: vec![0, 90, 180, 270],
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            horizontal_flip: 0.0,
            rotation_set: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Side of the square training patches.
    pub patch: usize,
    pub lr_base: f64,
    pub lr_max: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    /// Epochs from `lr_base` to `lr_max`; a full cycle is twice this.
    pub cycle_epochs: f64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    /// Write checkpoints every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Use only the first `limit` manifest records (0: all).
    pub limit: usize,
    /// Perceptual extractor checkpoint; the seeded default when absent.
    pub extractor: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 8,
            patch: 64,
            lr_base: 1e-5,
            lr_max: 1e-4,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            cycle_epochs: 2.0,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            manifest: PathBuf::from("data/manifest.jsonl"),
            checkpoint_every: 1,
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            validation_fraction: 0.1,
            limit: 0,
            extractor: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0 && self.lr_base <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_base <= lr_max, got {} and {}",
                self.lr_base, self.lr_max
            )));
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config(format!(
                "betas must lie in (0, 1), got {:?}",
                self.betas
            )));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.patch < 16 {
            return Err(Error::Config(format!(
                "patch must be at least 16, got {}",
                self.patch
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.cycle_epochs > 0.0) {
            return Err(Error::Config("cycle_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        self.loss.validate()?;
        self.augment_spec().validate()
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec {
            horizontal_flip: self.augment.horizontal_flip,
            crop_size: self.patch,
            rotation_set: self.augment.rotation_set.clone(),
            seed: self.seed,
        }
    }
}

/// Model and training configuration as stored in one TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path`; relative `manifest` and `out_dir` resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let t = &mut cfg.train;
        for p in [&mut t.manifest, &mut t.out_dir]
            .into_iter()
            .chain(t.extractor.as_mut())
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.patch < self.model.min_size() {
            return Err(Error::Config(format!(
                "patch {} is smaller than the model minimum {}",
                self.train.patch,
                self.model.min_size()
            )));
        }
        Ok(())
    }
}

/// Triangular wave from `lr_base` up to `lr_max` over `cycle_epochs`
/// epochs and back down over the next `cycle_epochs`.
pub fn cyclic_lr(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let half = cfg.cycle_epochs * steps_per_epoch.max(1) as f64;
    let pos = (step as f64 / half) % 2.0;
    let frac = if pos <= 1.0 { pos } else { 2.0 - pos };
    cfg.lr_base + (cfg.lr_max - cfg.lr_base) * frac
}

/// Bias-corrected Adam with first and second moments kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: WeightStore,
    pub v: WeightStore,
}

impl Adam {
    pub fn new(params: &WeightStore, betas: [f64; 2], eps: f64) -> Self {
        Adam {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            t: 0,
            m: WeightStore::zeros_like(params),
            v: WeightStore::zeros_like(params),
        }
    }

    /// Applies one update. Parameters without a gradient entry are left unchanged.
    pub fn step(&mut self, ws: &mut WeightStore, grads: &WeightStore, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (name, w) in ws.iter_mut() {
            let Ok(g) = grads.get(name) else { continue };
            if g.shape() != w.shape() {
                return Err(Error::Shape(format!(
                    "gradient of {name} has shape {:?}",
                    g.shape()
                )));
            }
            let m = self.m.get_mut(name)?;
            ndarray::Zip::from(&mut *m)
                .and(g)
                .for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v.get_mut(name)?;
            ndarray::Zip::from(&mut *v)
                .and(g)
                .for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let m = self.m.get(name)?;
            let v = self.v.get(name)?;
            ndarray::Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
                *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Degraded/clean pairs held in memory.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub names: Vec<String>,
    pub degraded: Vec<ImageTensor>,
    pub clean: Vec<ImageTensor>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Loads the pairs listed in a manifest (at most `limit`, 0 for all).
    pub fn from_manifest(path: &Path, limit: usize) -> Result<Self> {
        let records = read_manifest(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let take = if limit == 0 {
            records.len()
        } else {
            limit.min(records.len())
        };
        let mut set = PairSet {
            names: Vec::with_capacity(take),
            degraded: Vec::with_capacity(take),
            clean: Vec::with_capacity(take),
        };
        for r in records.into_iter().take(take) {
            let d = load_image(base.join(&r.degraded))?;
            let c = load_image(base.join(&r.clean))?;
            if d.data().shape() != c.data().shape() {
                return Err(Error::Dataset(format!(
                    "pair {} has mismatched sizes",
                    r.degraded.display()
                )));
            }
            set.names.push(r.degraded.to_string_lossy().into_owned());
            set.degraded.push(d);
            set.clean.push(c);
        }
        if set.is_empty() {
            return Err(Error::Dataset(format!(
                "manifest {} lists no pairs",
                path.display()
            )));
        }
        Ok(set)
    }

    fn subset(&self, idx: &[usize]) -> PairSet {
        PairSet {
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            degraded: idx.iter().map(|&i| self.degraded[i].clone()).collect(),
            clean: idx.iter().map(|&i| self.clean[i].clone()).collect(),
        }
    }

    /// Seeded split into `(train, validation)`. The validation part holds
    /// `round(fraction * n)` pairs, at least one when `fraction > 0` and `n > 1`.
    pub fn split(&self, fraction: f64, seed: u64) -> (PairSet, PairSet) {
        let n = self.len();
        let mut k = (fraction * n as f64).round() as usize;
        if fraction > 0.0 && n > 1 {
            k = k.clamp(1, n - 1);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
        let mut val = order[..k].to_vec();
        let mut train = order[k..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        (self.subset(&train), self.subset(&val))
    }
}

const SPLIT_STREAM: u64 = 1 << 40;
const EPOCH_STREAM: u64 = 1 << 41;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mean PSNR and SSIM of the enhanced validation images and of the
/// degraded inputs, both against the clean references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

pub fn validate(model: &Model, ws: &WeightStore, set: &PairSet) -> Result<Validation> {
    let mut v = Validation {
        psnr: 0.0,
        ssim: 0.0,
        baseline_psnr: 0.0,
        baseline_ssim: 0.0,
    };
    for (d, c) in set.degraded.iter().zip(&set.clean) {
        let e = model.enhance(ws, d)?;
        v.psnr += psnr(&e, c)?;
        v.ssim += ssim(&e, c)?;
        v.baseline_psnr += psnr(d, c)?;
        v.baseline_ssim += ssim(d, c)?;
    }
    let n = set.len().max(1) as f64;
    v.psnr /= n;
    v.ssim /= n;
    v.baseline_psnr /= n;
    v.baseline_ssim /= n;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub charbonnier: f64,
    pub perceptual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation: Option<Validation>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut log = TrainLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                LogRecord::Step(s) => log.steps.push(s),
                LogRecord::Epoch(e) => log.epochs.push(e),
            }
        }
        Ok(log)
    }
}

struct LogWriter {
    path: PathBuf,
    file: fs::File,
}

impl LogWriter {
    fn open(path: PathBuf, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(LogWriter { path, file })
    }

    fn write(&mut self, r: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Optimizer state and counters written next to the model checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub adam: Adam,
    pub config_hash: String,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(json!({
            "kind": KIND_TRAIN_STATE,
            "epoch": self.epoch,
            "step": self.step,
            "t": self.adam.t,
            "beta1": self.adam.beta1,
            "beta2": self.adam.beta2,
            "eps": self.adam.eps,
            "config_hash": self.config_hash,
        }));
        c.insert_weights("m.", &self.adam.m, DType::F64);
        c.insert_weights("v.", &self.adam.v, DType::F64);
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind() != Some(KIND_TRAIN_STATE) {
            return Err(Error::CorruptCheckpoint(format!(
                "{} is not a training state",
                path.display()
            )));
        }
        let field = |k: &str| {
            c.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::CorruptCheckpoint(format!("training state lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            field(k)?
                .as_f64()
                .ok_or_else(|| Error::CorruptCheckpoint(format!("`{k}` is not a number")))
        };
        let int = |k: &str| -> Result<u64> {
            field(k)?
                .as_u64()
                .ok_or_else(|| Error::CorruptCheckpoint(format!("`{k}` is not an integer")))
        };
        Ok(TrainState {
            epoch: int("epoch")? as usize,
            step: int("step")? as usize,
            adam: Adam {
                beta1: num("beta1")?,
                beta2: num("beta2")?,
                eps: num("eps")?,
                t: int("t")?,
                m: c.weights_with_prefix("m."),
                v: c.weights_with_prefix("v."),
            },
            config_hash: field("config_hash")?
                .as_str()
                .unwrap_or_default()
                .to_string(),
        })
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    pub weights: WeightStore,
    /// Records produced by this call (a resumed run omits earlier ones).
    pub log: TrainLog,
    pub checkpoint: PathBuf,
    pub validation: Option<Validation>,
}

/// One optimization batch: seeded patches from the pairs in `order`.
fn make_batch(
    set: &PairSet,
    order: &[usize],
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let mut raw = Vec::with_capacity(order.len());
    let mut reference = Vec::with_capacity(order.len());
    for &i in order {
        let d = &set.degraded[i];
        let t = Transform::sample(spec, d.height(), d.width(), rng)?;
        raw.push(t.apply(d));
        reference.push(t.apply(&set.clean[i]));
    }
    Ok((
        ImageTensor::stack(&raw)?.into_inner(),
        ImageTensor::stack(&reference)?.into_inner(),
    ))
}

fn save_all(dir: &Path, cfg: &ModelConfig, ws: &WeightStore, state: &TrainState) -> Result<()> {
    checkpoint::save_model(&dir.join(MODEL_CHECKPOINT), cfg, ws)?;
    state.save(&dir.join(STATE_CHECKPOINT))
}

/// Trains from the seed-initialized model.
pub fn train(run: &RunConfig) -> Result<TrainOutcome> {
    run.validate()?;
    let data = PairSet::from_manifest(&run.train.manifest, run.train.limit)?;
    train_on(run, &data, false)
}

/// Continues from `out_dir`'s checkpoints when present, otherwise starts fresh.
pub fn resume(run: &RunConfig) -> Result<TrainOutcome> {
    run.validate()?;
    let data = PairSet::from_manifest(&run.train.manifest, run.train.limit)?;
    train_on(run, &data, true)
}

/// Training loop over pairs already in memory.
pub fn train_on(run: &RunConfig, data: &PairSet, resume: bool) -> Result<TrainOutcome> {
    run.validate()?;
    let tc = &run.train;
    let (train_set, val_set) = data.split(tc.validation_fraction, tc.seed);
    if train_set.is_empty() {
        return Err(Error::Dataset(
            "no training pairs after the validation split".into(),
        ));
    }
    if let Some(small) = train_set
        .degraded
        .iter()
        .find(|d| d.height().min(d.width()) < tc.patch)
    {
        return Err(Error::Dataset(format!(
            "image of {}x{} is smaller than the {} pixel patch",
            small.height(),
            small.width(),
            tc.patch
        )));
    }
    let model = Model::new(&run.model)?;
    let extractor = match &tc.extractor {
        Some(p) => checkpoint::load_extractor(p)?,
        None => FeatureExtractor::seeded(EXTRACTOR_SEED),
    };
    fs::create_dir_all(&tc.out_dir).map_err(|e| Error::io(&tc.out_dir, e))?;
    let model_path = tc.out_dir.join(MODEL_CHECKPOINT);
    let state_path = tc.out_dir.join(STATE_CHECKPOINT);

    let resuming = resume && model_path.exists() && state_path.exists();
    let (mut ws, mut state) = if resuming {
        let (cfg, ws) = checkpoint::load_model(&model_path)?;
        let state = TrainState::load(&state_path)?;
        if cfg != run.model || state.config_hash != run.model.hash() {
            return Err(Error::Config(
                "checkpoint in out_dir was produced by a different model config".into(),
            ));
        }
        (ws, state)
    } else {
        let ws = model.init_weights();
        let state = TrainState {
            epoch: 0,
            step: 0,
            adam: Adam::new(&ws, tc.betas, tc.adam_eps),
            config_hash: run.model.hash(),
        };
        save_all(&tc.out_dir, &run.model, &ws, &state)?;
        (ws, state)
    };
    let mut writer = LogWriter::open(tc.out_dir.join(TRAIN_LOG), resuming)?;
    let mut log = TrainLog::default();
    let spec = tc.augment_spec();
    let steps_per_epoch = train_set.len().div_ceil(tc.batch);
    let mut last_validation = None;

    while state.epoch < tc.epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let mut rng = stream_rng(tc.seed, EPOCH_STREAM + epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch) {
            let (x, y) = make_batch(&train_set, chunk, &spec, &mut rng)?;
            let (pred, cache) = model.forward(&ws, &x)?;
            let loss = total_loss(&pred, &y, &tc.loss, &extractor)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {}; last good checkpoint kept in {}",
                    state.step,
                    tc.out_dir.display()
                )));
            }
            let mut grads = WeightStore::new();
            model.backward(&ws, &cache, &loss.grad, &mut grads)?;
            let lr = cyclic_lr(state.step, steps_per_epoch, tc);
            state.adam.step(&mut ws, &grads, lr).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "{m} at step {}; last good checkpoint kept in {}",
                    state.step,
                    tc.out_dir.display()
                )),
                other => other,
            })?;
            ws.round_to_f32();
            if !ws.all_finite() {
                return Err(Error::NonFinite(format!(
                    "weights after step {}",
                    state.step
                )));
            }
            let rec = StepRecord {
                step: state.step,
                epoch,
                lr,
                total: loss.total,
                charbonnier: loss.charbonnier,
                perceptual: loss.perceptual,
            };
            writer.write(&LogRecord::Step(rec.clone()))?;
            log.steps.push(rec);
            loss_sum += loss.total;
            state.step += 1;
        }
        state.epoch += 1;
        let validation = if val_set.is_empty() {
            None
        } else {
            Some(validate(&model, &ws, &val_set)?)
        };
        last_validation = validation;
        let rec = EpochRecord {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            validation,
            seconds: started.elapsed().as_secs_f64(),
        };
        writer.write(&LogRecord::Epoch(rec.clone()))?;
        log.epochs.push(rec);
        let due = tc.checkpoint_every > 0 && state.epoch % tc.checkpoint_every == 0;
        if due || state.epoch == tc.epochs {
            save_all(&tc.out_dir, &run.model, &ws, &state)?;
        }
    }
    Ok(TrainOutcome {
        model: run.model.clone(),
        weights: ws,
        log,
        checkpoint: model_path,
        validation: last_validation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub params: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>8} {:>9} {:>7}\n",
            "setting", "params", "psnr", "ssim"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>8} {:>9.4} {:>7.4}\n",
                r.setting, r.params, r.psnr, r.ssim
            ));
        }
        out.push_str(&format!(
            "{:<14} {:>8} {:>9.4} {:>7.4}\n",
            "input", "-", self.baseline_psnr, self.baseline_ssim
        ));
        out
    }
}

/// Trains every setting with the same data and schedule, each into
/// `out_dir/<label>`, and tabulates validation metrics.
pub fn run_ablation(run: &RunConfig, settings: &[AblationSetting]) -> Result<AblationTable> {
    run.validate()?;
    let data = PairSet::from_manifest(&run.train.manifest, run.train.limit)?;
    run_ablation_on(run, &data, settings)
}

pub fn run_ablation_on(
    run: &RunConfig,
    data: &PairSet,
    settings: &[AblationSetting],
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(settings.len());
    let mut baseline = (0.0, 0.0);
    for &s in settings {
        let mut r = run.clone();
        r.model = r.model.with_setting(s);
        r.train.out_dir = run.train.out_dir.join(s.label().replace('+', "_"));
        let outcome = train_on(&r, data, false)?;
        let v = match outcome.validation {
            Some(v) => v,
            None => {
                let m = Model::new(&r.model)?;
                validate(&m, &outcome.weights, data)?
            }
        };
        baseline = (v.baseline_psnr, v.baseline_ssim);
        rows.push(AblationRow {
            setting: s.label().to_string(),
            params: count_params(&r.model)?,
            psnr: v.psnr,
            ssim: v.ssim,
        });
    }
    Ok(AblationTable {
        rows,
        baseline_psnr: baseline.0,
        baseline_ssim: baseline.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub height: usize,
    pub width: usize,
    pub params: usize,
    pub macs: u64,
    pub median_seconds: f64,
    pub seconds: Vec<f64>,
    pub reference_params: usize,
    pub reference_flops: f64,
    pub reference_seconds: f64,
}

impl BenchmarkReport {
    pub fn to_text(&self) -> String {
        format!(
            "size (HxW)  {}x{}\nparams      {} (reference {})\nMACs        {:.3}G (reference {:.2}G)\nmedian time {:.4} s over {} runs (reference {} s)\n",
            self.height,
            self.width,
            self.params,
            self.reference_params,
            self.macs as f64 / 1e9,
            self.reference_flops / 1e9,
            self.median_seconds,
            self.seconds.len(),
            self.reference_seconds
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `repetitions` inference passes on one random `h x w` image after
/// `warmup` untimed passes. Weights are the seed initialization unless given.
pub fn benchmark(
    cfg: &ModelConfig,
    weights: Option<&WeightStore>,
    h: usize,
    w: usize,
    repetitions: usize,
    warmup: usize,
) -> Result<BenchmarkReport> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument(
            "repetitions must be at least 1".into(),
        ));
    }
    let model = Model::new(cfg)?;
    let owned;
    let ws = match weights {
        Some(ws) => {
            model.check_weights(ws)?;
            ws
        }
        None => {
            owned = model.init_weights();
            &owned
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let img = ImageTensor::new(Array4::from_shape_simple_fn((1, 3, h, w), || {
        rng.gen_range(0.0..1.0)
    }))?;
    for _ in 0..warmup {
        model.enhance(ws, &img)?;
    }
    let mut seconds = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        let out = model.enhance(ws, &img)?;
        seconds.push(t.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    Ok(BenchmarkReport {
        height: h,
        width: w,
        params: count_params(cfg)?,
        macs: count_flops(cfg, h, w)?,
        median_seconds: median(&seconds),
        seconds,
        reference_params: REFERENCE_PARAMS,
        reference_flops: REFERENCE_FLOPS,
        reference_seconds: REFERENCE_SECONDS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr_base: 1e-5,
            lr_max: 1e-4,
            cycle_epochs: 2.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cyclic_lr_triangle() {
        let c = cfg();
        let spe = 10;
        assert_eq!(cyclic_lr(0, spe, &c), 1e-5);
        assert!((cyclic_lr(20, spe, &c) - 1e-4).abs() < 1e-18);
        assert!((cyclic_lr(40, spe, &c) - 1e-5).abs() < 1e-18);
        assert!((cyclic_lr(10, spe, &c) - 5.5e-5).abs() < 1e-18);
        assert!((cyclic_lr(30, spe, &c) - 5.5e-5).abs() < 1e-18);
        for s in 0..200 {
            let lr = cyclic_lr(s, spe, &c);
            assert!((1e-5..=1e-4).contains(&lr));
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut ws = WeightStore::new();
        ws.insert("w", ndarray::arr1(&[1.0, -2.0, 0.5]).into_dyn());
        let mut g = WeightStore::new();
        g.insert("w", ndarray::arr1(&[0.3, -4.0, 0.0]).into_dyn());
        let mut adam = Adam::new(&ws, [0.9, 0.999], 1e-8);
        adam.step(&mut ws, &g, 0.1).unwrap();
        let w = ws.get("w").unwrap();
        // m_hat = g and v_hat = g^2, so the update is lr g / (|g| + eps).
        assert!((w[0] - (1.0 - 0.1 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let mut ws = WeightStore::new();
        ws.insert("w", ndarray::arr1(&[1.0, 2.0]).into_dyn());
        let g = WeightStore::zeros_like(&ws);
        let before = ws.clone();
        let mut adam = Adam::new(&ws, [0.9, 0.999], 1e-8);
        adam.step(&mut ws, &g, 0.1).unwrap();
        assert_eq!(ws, before);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut ws = WeightStore::new();
        ws.insert("w", ndarray::arr1(&[1.0]).into_dyn());
        let mut g = WeightStore::new();
        g.insert("w", ndarray::arr1(&[f64::NAN]).into_dyn());
        let mut adam = Adam::new(&ws, [0.9, 0.999], 1e-8);
        assert!(matches!(
            adam.step(&mut ws, &g, 0.1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = TrainConfig {
            lr_base: 2e-4,
            ..cfg()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            betas: [0.9, 1.0],
            ..cfg()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { patch: 8, ..cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn run_config_toml_round_trip() {
        let r = RunConfig::default();
        let text = r.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), r);
        assert!(RunConfig::from_toml("[train]\nepochs = 2\nbogus = 1\n").is_err());
        let partial = RunConfig::from_toml("[train]\nepochs = 2\n").unwrap();
        assert_eq!(partial.train.epochs, 2);
        assert_eq!(partial.train.batch, 8);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
