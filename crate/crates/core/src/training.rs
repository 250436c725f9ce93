//! The optimisation loop: schedule, Adam, batching order, validation and
//! checkpoints.
//!
//! Every random draw is keyed by `(seed, epoch)` or `(seed, step)`, so a run
//! resumed from a checkpoint continues exactly as the uninterrupted one.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{sample_fragment, PreparedPair, TrainingSample};
use crate::autodiff::{Graph, Var};
pub use crate::batch::{make_batch, Batch};
use crate::error::{Error, Result};
use crate::eval::mcd;
use crate::features::{FeatureTrack, UtterancePair};
use crate::model::{
    read_checkpoint, write_checkpoint, ModelConfig, Normalizer, ParamKind, ParamStore, Scent,
};
use crate::multitask::{head_losses, total_loss_var, AccuracyCounts, ClassifierHead, LossWeights};
use crate::rng::{derive_seed, hash_str, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "mt")]
    Mt,
    #[serde(rename = "mt-da")]
    MtDa,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Mt, Mode::MtDa];

    pub fn multitask(self) -> bool {
        self != Mode::Baseline
    }

    pub fn augment(self) -> bool {
        self == Mode::MtDa
    }

    pub fn default_warm_epochs(self) -> usize {
        if self.augment() {
            40
        } else {
            20
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Mt => "mt",
            Mode::MtDa => "mt-da",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "mt" => Ok(Mode::Mt),
            "mt-da" => Ok(Mode::MtDa),
            _ => Err(Error::Config(format!(
                "unknown mode `{s}` (baseline, mt, mt-da)"
            ))),
        }
    }
}

/// Validation score that picks `best.ckpt`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Teacher-forced mel loss.
    #[default]
    Mel,
    /// Mean MCD of free-running conversions against the references.
    Mcd,
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mel" => Ok(Selection::Mel),
            "mcd" => Ok(Selection::Mcd),
            _ => Err(Error::Config(format!("unknown selection `{s}` (mel, mcd)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs at the base rate; `None` uses the mode default.
    pub warm_epochs: Option<usize>,
    pub decay: f64,
    pub extra_epochs: usize,
    /// An epoch repeats the training set until it holds at least this many
    /// samples; 0 means a single pass.
    #[serde(default)]
    pub min_epoch_samples: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    #[serde(default)]
    pub select: Selection,
    /// Keep `epoch_NNN.ckpt` for every epoch, not just `last` and `best`.
    pub keep_all_checkpoints: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Baseline,
            batch_size: 4,
            base_lr: 0.001,
            warm_epochs: None,
            decay: 0.95,
            extra_epochs: 50,
            min_epoch_samples: 0,
            seed: 1,
            loss_weights: LossWeights::default(),
            clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            select: Selection::Mel,
            keep_all_checkpoints: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_mode(mode: Mode) -> Self {
        TrainConfig {
            mode,
            ..Default::default()
        }
    }

    pub fn warm(&self) -> usize {
        self.warm_epochs
            .unwrap_or_else(|| self.mode.default_warm_epochs())
    }

    pub fn total_epochs(&self) -> usize {
        self.warm() + self.extra_epochs
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        lr_at(epoch, self.base_lr, self.decay, self.warm())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("decay must be in (0, 1]".into()));
        }
        if !(self.base_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "base_lr and clip_norm must be positive".into(),
            ));
        }
        if self.total_epochs() == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        self.loss_weights.validate()?;
        self.model.validate()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value `{value}` for {key}"));
        let us = || value.parse::<usize>().map_err(|_| bad());
        let fl = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "mode" => self.mode = value.parse()?,
            "batch_size" => self.batch_size = us()?,
            "base_lr" => self.base_lr = fl()?,
            "warm_epochs" => self.warm_epochs = Some(us()?),
            "decay" => self.decay = fl()?,
            "extra_epochs" => self.extra_epochs = us()?,
            "min_epoch_samples" => self.min_epoch_samples = us()?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "clip_norm" => self.clip_norm = fl()?,
            "adam.beta1" => self.adam_beta1 = fl()?,
            "adam.beta2" => self.adam_beta2 = fl()?,
            "adam.eps" => self.adam_eps = fl()?,
            "select" => self.select = value.parse()?,
            "keep_all_checkpoints" => {
                self.keep_all_checkpoints = value.parse().map_err(|_| bad())?
            }
            "mt.lambda_phoneme" => self.loss_weights.phoneme = fl()?,
            "mt.lambda_tone" => self.loss_weights.tone = fl()?,
            "mt.dropout" => self.model.classifier_dropout = fl()?,
            _ => match key.strip_prefix("model.") {
                Some(k) => self.model.set(k, value)?,
                None => return Err(Error::Config(format!("unknown key {key}"))),
            },
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply(&text)?;
        Ok(cfg)
    }
}

/// Learning rate for a 1-based epoch: constant for `warm` epochs, then
/// decaying geometrically.
pub fn lr_at(epoch: usize, base: f64, decay: f64, warm: usize) -> Result<f64> {
    if epoch < 1 {
        return Err(Error::Invalid("epochs are counted from 1".into()));
    }
    Ok(if epoch <= warm {
        base
    } else {
        base * decay.powi((epoch - warm) as i32)
    })
}

/// [`lr_at`] with base rate 0.001 and decay 0.95.
pub fn lr_schedule(epoch: usize, warm: usize) -> Result<f64> {
    lr_at(epoch, 0.001, 0.95, warm)
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || {
            params
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            clip_norm: cfg.clip_norm,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; missing
    /// gradients leave the parameter and its moments untouched. Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [Option<Tensor>], lr: f64) -> f64 {
        let norm = grads
            .iter()
            .flatten()
            .map(Tensor::norm_sq)
            .sum::<f64>()
            .sqrt();
        if norm > self.clip_norm {
            let s = self.clip_norm / norm;
            grads.iter_mut().flatten().for_each(|g| g.scale_in_place(s));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.value_mut(i);
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        norm
    }

    fn export(&self, params: &ParamStore, out: &mut ParamStore) {
        for (i, p) in params.params().iter().enumerate() {
            out.insert(
                &format!("adam.m/{}", p.name),
                ParamKind::Optimizer,
                self.m[i].clone(),
            );
            out.insert(
                &format!("adam.v/{}", p.name),
                ParamKind::Optimizer,
                self.v[i].clone(),
            );
        }
    }

    fn import(&mut self, params: &ParamStore, saved: &ParamStore) -> Result<()> {
        for (i, p) in params.params().iter().enumerate() {
            let get = |pre: &str| {
                saved
                    .get(&format!("{pre}/{}", p.name))
                    .cloned()
                    .ok_or_else(|| {
                        Error::Model(format!("checkpoint lacks optimizer state for {}", p.name))
                    })
            };
            self.m[i] = get("adam.m")?;
            self.v[i] = get("adam.v")?;
        }
        Ok(())
    }
}

/// Validation metrics of one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidMetrics {
    pub mel: f64,
    pub stop: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcd: Option<f64>,
    pub enc_phoneme_acc: Option<f64>,
    pub enc_tone_acc: Option<f64>,
    pub dec_phoneme_acc: Option<f64>,
    pub dec_tone_acc: Option<f64>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_mel: f64,
    pub train_stop: f64,
    pub grad_norm: f64,
    pub valid: Option<ValidMetrics>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and `metrics.jsonl`.
    pub out: Option<PathBuf>,
    /// Continue from `out/last.ckpt` if present.
    pub resume: bool,
    /// Stop after this epoch even if the schedule continues (for interrupted runs).
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    pub model: Scent,
    /// Parameters from the epoch with the best validation mel loss.
    pub best: Scent,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub fn prepare(pairs: &[UtterancePair]) -> Result<Vec<PreparedPair>> {
    pairs.iter().map(PreparedPair::new).collect()
}

/// Model config sized for a corpus: class counts from its labels.
pub fn fit_model_config(
    mut cfg: ModelConfig,
    phonemes: usize,
    tones: usize,
    feat_dim: usize,
    bn_dim: usize,
) -> ModelConfig {
    cfg.phoneme_classes = phonemes;
    cfg.tone_classes = tones;
    cfg.feat_dim = feat_dim;
    cfg.bottleneck_dim = bn_dim;
    cfg
}

fn fresh_model(cfg: &TrainConfig, train: &[PreparedPair]) -> Result<Scent> {
    let mut model = Scent::new(cfg.model.clone(), cfg.seed)?;
    if !cfg.mode.multitask() {
        model = model.strip_classifiers();
    }
    let data: Vec<_> = train.iter().map(|p| (&p.src, &p.src_bn, &p.tgt)).collect();
    model.set_normalizer(&Normalizer::fit(&data)?)?;
    Ok(model)
}

struct StepResult {
    loss: f64,
    mel: f64,
    stop: f64,
}

fn batch_loss(
    model: &Scent,
    g: &mut Graph,
    batch: &Batch,
    heads: Option<&[ClassifierHead; 2]>,
    cfg: &TrainConfig,
    step_seed: Option<(u64, u64)>,
) -> Result<(
    Var,
    Var,
    Var,
    Option<AccuracyCounts>,
    crate::model::Bound,
    Vec<crate::model::SampleLoss>,
)> {
    let b = model.bind(g, step_seed.is_some());
    let dropout = step_seed.map(|(s, step)| derive_seed(&[s, step]));
    let out = model.forward_teacher_forced(g, &b, batch, dropout)?;
    let hl = match heads {
        Some(h) => Some(head_losses(
            g,
            &b,
            h,
            [out.enc_tap, out.dec_tap],
            [&batch.src_labels, &batch.tgt_labels],
            [&batch.src_mask, &batch.tgt_mask],
            step_seed,
        )?),
        None => None,
    };
    let total = total_loss_var(
        g,
        out.mel_loss,
        out.stop_loss,
        hl.as_ref(),
        &cfg.loss_weights,
    );
    Ok((
        total,
        out.mel_loss,
        out.stop_loss,
        hl.map(|h| h.counts),
        b,
        out.per_sample,
    ))
}

fn train_step(
    model: &mut Scent,
    adam: &mut Adam,
    batch: &Batch,
    heads: Option<&[ClassifierHead; 2]>,
    cfg: &TrainConfig,
    step: u64,
    lr: f64,
) -> Result<(StepResult, f64)> {
    let mut g = Graph::new();
    let (total, mel, stop, _, b, _) =
        batch_loss(model, &mut g, batch, heads, cfg, Some((cfg.seed, step)))?;
    let loss = g.value(total).item();
    if !loss.is_finite() {
        return Err(Error::Diverged { step });
    }
    let mut gradients = g.backward(total);
    let mut grads: Vec<Option<Tensor>> = b.vars().iter().map(|&v| gradients.take(v)).collect();
    for (i, p) in model.params.params().iter().enumerate() {
        if !p.kind.trainable() {
            grads[i] = None;
        }
    }
    if grads.iter().flatten().any(|t| !t.is_finite()) {
        return Err(Error::Diverged { step });
    }
    let norm = adam.step(&mut model.params, &mut grads, lr);
    let r = StepResult {
        loss,
        mel: g.value(mel).item(),
        stop: g.value(stop).item(),
    };
    Ok((r, norm))
}

/// Mean per-utterance losses and classifier accuracy over whole utterances.
pub fn evaluate_loss(
    model: &Scent,
    pairs: &[PreparedPair],
    batch_size: usize,
    cfg: &TrainConfig,
) -> Result<ValidMetrics> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no validation pairs".into()));
    }
    let heads = if model.has_classifiers() {
        Some(ClassifierHead::pair(model, cfg.model.classifier_dropout)?)
    } else {
        None
    };
    let (mut mel, mut stop) = (0.0, 0.0);
    let mut counts = AccuracyCounts::default();
    for chunk in pairs.chunks(batch_size.max(1)) {
        let samples: Vec<TrainingSample> = chunk.iter().map(PreparedPair::whole).collect();
        let batch = make_batch(&samples)?;
        let mut g = Graph::new();
        let (_, _, _, acc, _, per) = batch_loss(model, &mut g, &batch, heads.as_ref(), cfg, None)?;
        for s in &per {
            mel += s.mel;
            stop += s.stop;
        }
        if let Some(a) = acc {
            counts.add(&a);
        }
    }
    let n = pairs.len() as f64;
    let acc = |f: fn(&AccuracyCounts) -> f64| heads.as_ref().map(|_| f(&counts));
    Ok(ValidMetrics {
        mel: mel / n,
        stop: stop / n,
        mcd: None,
        enc_phoneme_acc: acc(AccuracyCounts::enc_phoneme_acc),
        enc_tone_acc: acc(AccuracyCounts::enc_tone_acc),
        dec_phoneme_acc: acc(AccuracyCounts::dec_phoneme_acc),
        dec_tone_acc: acc(AccuracyCounts::dec_tone_acc),
    })
}

/// Mean MCD of converting each pair's source against its target.
pub fn conversion_mcd(model: &Scent, pairs: &[PreparedPair]) -> Result<f64> {
    let mut sum = 0.0;
    for p in pairs {
        let (out, _) = model.convert_frames(&p.src, &p.src_bn, p.hop_ms)?;
        sum += mcd(&out, &FeatureTrack::new(p.tgt.clone(), p.hop_ms)?)?;
    }
    Ok(sum / pairs.len().max(1) as f64)
}

/// Training samples of one epoch, in batch order.
pub fn epoch_samples(
    train: &[PreparedPair],
    cfg: &TrainConfig,
    epoch: usize,
) -> Vec<TrainingSample> {
    let passes = cfg.min_epoch_samples.div_ceil(train.len().max(1)).max(1);
    let mut order: Vec<(usize, usize)> = (0..passes)
        .flat_map(|k| (0..train.len()).map(move |i| (k, i)))
        .collect();
    order.shuffle(&mut stream(&[cfg.seed, hash_str("shuffle"), epoch as u64]));
    order
        .into_iter()
        .map(|(k, i)| {
            let p = &train[i];
            if cfg.mode.augment() {
                let mut key = vec![
                    cfg.seed,
                    hash_str("fragment"),
                    hash_str(&p.id),
                    epoch as u64,
                ];
                if k > 0 {
                    key.push(k as u64);
                }
                sample_fragment(p, &mut stream(&key))
            } else {
                p.whole()
            }
        })
        .collect()
}

struct RunState {
    model: Scent,
    adam: Adam,
    epoch: usize,
    step: u64,
    best_valid: f64,
    best_epoch: usize,
    best: Scent,
    log: Vec<EpochLog>,
}

fn save_state(path: &Path, s: &RunState, cfg: &TrainConfig) -> Result<()> {
    let extra = json!({
        "epoch": s.epoch,
        "step": s.step,
        "adam_t": s.adam.t,
        "best_valid": s.best_valid,
        "best_epoch": s.best_epoch,
        "train_config": cfg,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut data = s.model.checkpoint(extra)?;
    s.adam.export(&s.model.params, &mut data.tensors);
    write_checkpoint(path, &data.meta, &data.tensors)
}

fn load_state(dir: &Path, cfg: &TrainConfig) -> Result<Option<RunState>> {
    let path = dir.join("last.ckpt");
    if !path.exists() {
        return Ok(None);
    }
    let (model, extra, opt) = Scent::from_checkpoint(read_checkpoint(&path)?)?;
    let mut adam = Adam::new(&model.params, cfg);
    adam.import(&model.params, &opt)?;
    adam.t = extra["adam_t"].as_u64().unwrap_or(0);
    let num = |k: &str| {
        extra[k]
            .as_u64()
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")))
    };
    let epoch = num("epoch")? as usize;
    let best_epoch = num("best_epoch")? as usize;
    let best_path = dir.join("best.ckpt");
    let best = if best_path.exists() {
        Scent::load(&best_path)?
    } else {
        model.clone()
    };
    let metrics = dir.join("metrics.jsonl");
    let mut log = Vec::new();
    if metrics.exists() {
        let text = fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let entry: EpochLog = serde_json::from_str(line)?;
            if entry.epoch <= epoch {
                log.push(entry);
            }
        }
    }
    Ok(Some(RunState {
        model,
        adam,
        epoch,
        step: num("step")?,
        best_valid: extra["best_valid"].as_f64().unwrap_or(f64::INFINITY),
        best_epoch,
        best,
        log,
    }))
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for e in log {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(entry)?).map_err(|e| Error::io(path, e))
}

/// Trains on `train`, validating on `valid` after every epoch.
pub fn train(
    cfg: &TrainConfig,
    train: &[PreparedPair],
    valid: &[PreparedPair],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training pairs".into()));
    }
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let resumed = match (&opts.out, opts.resume) {
        (Some(dir), true) => load_state(dir, cfg)?,
        _ => None,
    };
    let mut s = match resumed {
        Some(s) => {
            log::info!("resuming after epoch {}", s.epoch);
            s
        }
        None => {
            let model = fresh_model(cfg, train)?;
            if let Some(dir) = &opts.out {
                write_log(&dir.join("metrics.jsonl"), &[])?;
            }
            RunState {
                adam: Adam::new(&model.params, cfg),
                best: model.clone(),
                model,
                epoch: 0,
                step: 0,
                best_valid: f64::INFINITY,
                best_epoch: 0,
                log: Vec::new(),
            }
        }
    };
    let heads = if cfg.mode.multitask() {
        Some(ClassifierHead::pair(
            &s.model,
            cfg.model.classifier_dropout,
        )?)
    } else {
        None
    };
    let last_epoch = opts
        .stop_after
        .map_or(cfg.total_epochs(), |e| e.min(cfg.total_epochs()));
    while s.epoch < last_epoch {
        let epoch = s.epoch + 1;
        let lr = cfg.lr(epoch)?;
        let samples = epoch_samples(train, cfg, epoch);
        let (mut loss, mut mel, mut stop, mut norm, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for chunk in samples.chunks(cfg.batch_size) {
            let batch = make_batch(chunk)?;
            s.step += 1;
            let (r, gn) = train_step(
                &mut s.model,
                &mut s.adam,
                &batch,
                heads.as_ref(),
                cfg,
                s.step,
                lr,
            )?;
            loss += r.loss;
            mel += r.mel;
            stop += r.stop;
            norm += gn;
            n += 1.0;
        }
        let valid_metrics = if valid.is_empty() {
            None
        } else {
            let mut v = evaluate_loss(&s.model, valid, cfg.batch_size, cfg)?;
            if cfg.select == Selection::Mcd {
                v.mcd = Some(conversion_mcd(&s.model, valid)?);
            }
            Some(v)
        };
        let score = valid_metrics
            .as_ref()
            .map_or(loss / n, |v| v.mcd.unwrap_or(v.mel));
        s.epoch = epoch;
        if score < s.best_valid {
            s.best_valid = score;
            s.best_epoch = epoch;
            s.best = s.model.clone();
        }
        let entry = EpochLog {
            epoch,
            step: s.step,
            lr,
            train_loss: loss / n,
            train_mel: mel / n,
            train_stop: stop / n,
            grad_norm: norm / n,
            valid: valid_metrics,
        };
        log::info!(
            "epoch {epoch} lr {lr:.6} train {:.4} valid mel {}",
            entry.train_loss,
            entry
                .valid
                .as_ref()
                .map_or("-".to_string(), |v| format!("{:.4}", v.mel))
        );
        if let Some(dir) = &opts.out {
            append_log(&dir.join("metrics.jsonl"), &entry)?;
            save_state(&dir.join("last.ckpt"), &s, cfg)?;
            if s.best_epoch == epoch {
                s.best.save(&dir.join("best.ckpt"))?;
            }
            if cfg.keep_all_checkpoints {
                s.model.save(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            }
        }
        s.log.push(entry);
    }
    Ok(TrainOutcome {
        model: s.model,
        best: s.best,
        best_epoch: s.best_epoch,
        log: s.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{SynthConfig, SyntheticVoices};

    #[test]
    fn schedule_matches_closed_form() {
        assert_eq!(lr_schedule(20, 20).unwrap(), 0.001);
        assert!((lr_schedule(21, 20).unwrap() - 0.00095).abs() < 1e-15);
        assert_eq!(lr_schedule(40, 40).unwrap(), 0.001);
        assert!(lr_schedule(0, 20).is_err());
        for warm in [20, 40] {
            for e in 1..=warm + 50 {
                let expect = if e <= warm {
                    0.001
                } else {
                    0.001 * 0.95f64.powi((e - warm) as i32)
                };
                assert!((lr_schedule(e, warm).unwrap() - expect).abs() <= 1e-18);
            }
        }
    }

    #[test]
    fn mode_defaults_and_parsing() {
        assert_eq!(TrainConfig::for_mode(Mode::Mt).total_epochs(), 70);
        assert_eq!(TrainConfig::for_mode(Mode::MtDa).total_epochs(), 90);
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("fast".parse::<Mode>().is_err());
    }

    #[test]
    fn config_file_keys() {
        let mut c = TrainConfig::default();
        c.apply("# comment\nmt.lambda_phoneme = 0.2\nmt.lambda_tone=0.1\nmt.dropout = 0.3\nmodel.encoder_hidden = 16\nseed = 9\n")
            .unwrap();
        assert_eq!(
            c.loss_weights,
            LossWeights {
                phoneme: 0.2,
                tone: 0.1
            }
        );
        assert_eq!(c.model.classifier_dropout, 0.3);
        assert_eq!(c.model.encoder_hidden, 16);
        assert_eq!(c.seed, 9);
        assert!(c.apply("nonsense").is_err());
        assert!(c.apply("batch_size = 0").is_ok());
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert(
            "w",
            ParamKind::Inference,
            Tensor::from_vec(1, 2, vec![1.0, -1.0]),
        );
        let cfg = TrainConfig {
            clip_norm: 1e9,
            ..Default::default()
        };
        let mut adam = Adam::new(&store, &cfg);
        let mut grads = vec![Some(Tensor::from_vec(1, 2, vec![0.5, -2.0]))];
        adam.step(&mut store, &mut grads, 0.1);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let mut store = ParamStore::new();
        store.insert("w", ParamKind::Inference, Tensor::zeros(1, 2));
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&store, &cfg);
        let mut grads = vec![Some(Tensor::from_vec(1, 2, vec![30.0, 40.0]))];
        let norm = adam.step(&mut store, &mut grads, 0.1);
        assert_eq!(norm, 50.0);
        let g = grads[0].as_ref().unwrap();
        assert!((g.norm_sq().sqrt() - 1.0).abs() < 1e-12);
    }

    pub(crate) fn tiny_corpus(n: usize) -> (Vec<PreparedPair>, ModelConfig) {
        let sc = SynthConfig {
            feat_dim: 4,
            bottleneck_dim: 3,
            phonemes: 4,
            min_phones: 3,
            max_phones: 4,
            ..Default::default()
        };
        let voices = SyntheticVoices::new(sc.clone()).unwrap();
        let pairs: Vec<UtterancePair> = (0..n).map(|i| voices.pair(i).unwrap()).collect();
        let mc = fit_model_config(
            ModelConfig::tiny(),
            voices.inventory.len(),
            voices.inventory.tone_count(),
            4,
            3,
        );
        (prepare(&pairs).unwrap(), mc)
    }

    fn quick_cfg(mode: Mode, model: ModelConfig) -> TrainConfig {
        TrainConfig {
            mode,
            warm_epochs: Some(1),
            extra_epochs: 2,
            batch_size: 2,
            model,
            ..Default::default()
        }
    }

    #[test]
    fn short_corpora_are_revisited() {
        let (pairs, mc) = tiny_corpus(3);
        let mut cfg = quick_cfg(Mode::MtDa, mc);
        assert_eq!(epoch_samples(&pairs, &cfg, 1).len(), 3);
        cfg.min_epoch_samples = 7;
        let samples = epoch_samples(&pairs, &cfg, 1);
        assert_eq!(samples.len(), 9);
        for p in &pairs {
            assert_eq!(
                samples.iter().filter(|s| s.id.starts_with(&p.id)).count(),
                3
            );
        }
        assert_eq!(samples, epoch_samples(&pairs, &cfg, 1));
        cfg.min_epoch_samples = 2;
        assert_eq!(epoch_samples(&pairs, &cfg, 1).len(), 3);
    }

    #[test]
    fn mcd_selection_picks_the_lowest_conversion_score() {
        let (pairs, mc) = tiny_corpus(4);
        let mut cfg = quick_cfg(Mode::Baseline, mc);
        cfg.set("select", "mcd").unwrap();
        assert!(cfg.set("select", "loss").is_err());
        let out = train(&cfg, &pairs[..3], &pairs[3..], &TrainOptions::default()).unwrap();
        let scores: Vec<f64> = out
            .log
            .iter()
            .map(|e| e.valid.as_ref().unwrap().mcd.unwrap())
            .collect();
        let best = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(scores[out.best_epoch - 1], best);
        assert_eq!(conversion_mcd(&out.best, &pairs[3..]).unwrap(), best);
    }

    #[test]
    fn training_is_deterministic() {
        let (pairs, mc) = tiny_corpus(4);
        let cfg = quick_cfg(Mode::MtDa, mc);
        let a = train(&cfg, &pairs[..3], &pairs[3..], &TrainOptions::default()).unwrap();
        let b = train(&cfg, &pairs[..3], &pairs[3..], &TrainOptions::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.len(), 3);
        assert!(a.log[0].valid.as_ref().unwrap().enc_phoneme_acc.is_some());
    }

    #[test]
    fn zero_lambda_matches_baseline() {
        let (pairs, mc) = tiny_corpus(3);
        let base = quick_cfg(Mode::Baseline, mc.clone());
        let mt = TrainConfig {
            loss_weights: LossWeights::ZERO,
            ..quick_cfg(Mode::Mt, mc)
        };
        let a = train(&base, &pairs, &[], &TrainOptions::default()).unwrap();
        let b = train(&mt, &pairs, &[], &TrainOptions::default()).unwrap();
        let losses = |o: &TrainOutcome| {
            o.log
                .iter()
                .map(|e| (e.train_mel, e.train_stop))
                .collect::<Vec<_>>()
        };
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.model.params, b.model.strip_classifiers().params);
        assert!(!a.model.has_classifiers());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (pairs, mc) = tiny_corpus(4);
        let cfg = quick_cfg(Mode::Mt, mc);
        let full_dir = tempfile::tempdir().unwrap();
        let part_dir = tempfile::tempdir().unwrap();
        let full = train(
            &cfg,
            &pairs[..3],
            &pairs[3..],
            &TrainOptions {
                out: Some(full_dir.path().into()),
                ..Default::default()
            },
        )
        .unwrap();
        let opts = TrainOptions {
            out: Some(part_dir.path().into()),
            resume: true,
            stop_after: Some(1),
        };
        train(&cfg, &pairs[..3], &pairs[3..], &opts).unwrap();
        let rest = train(
            &cfg,
            &pairs[..3],
            &pairs[3..],
            &TrainOptions {
                stop_after: None,
                ..opts
            },
        )
        .unwrap();
        assert_eq!(rest.log.len(), full.log.len());
        for (a, b) in rest.log.iter().zip(&full.log) {
            assert!((a.train_loss - b.train_loss).abs() < 1e-6);
        }
        assert_eq!(rest.model.params, full.model.params);
        let text = fs::read_to_string(part_dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(part_dir.path().join("best.ckpt").exists());
    }

    #[test]
    fn divergence_names_the_step() {
        let (pairs, mc) = tiny_corpus(2);
        let mut cfg = quick_cfg(Mode::Baseline, mc);
        cfg.base_lr = f64::MAX;
        cfg.clip_norm = f64::MAX;
        let err = train(&cfg, &pairs, &[], &TrainOptions::default())
            .err()
            .unwrap();
        assert!(
            matches!(err, Error::Diverged { step } if step >= 1),
            "{err}"
        );
    }

    #[test]
    fn fallback_pairs_match_whole_utterance_training() {
        let (pairs, mc) = tiny_corpus(3);
        // pairs without fragments fall back to the whole utterance
        let fallback: Vec<PreparedPair> = pairs
            .into_iter()
            .map(|mut p| {
                p.fragments.clear();
                p.points = 0;
                p
            })
            .collect();
        let mt = quick_cfg(Mode::Mt, mc.clone());
        let da = TrainConfig {
            warm_epochs: Some(1),
            ..quick_cfg(Mode::MtDa, mc)
        };
        let a = train(&mt, &fallback, &[], &TrainOptions::default()).unwrap();
        let b = train(&da, &fallback, &[], &TrainOptions::default()).unwrap();
        assert_eq!(a.log, b.log);
    }
}
