//! Supervised training on synthetic scenes, evaluation and checkpoints.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::Archive;
use crate::config::ModelConfig;
use crate::error::{EscError, Result};
use crate::escnet::{image_batch, load_encoders, load_pretrained_sam, loss, EscNet};
use crate::harness::metrics::{EvalReport, IouAccumulator};
use crate::harness::pretrain::{ENCODER_ARCHIVE, SAM_ARCHIVE};
use crate::harness::synth::{sample, SyntheticSample};
use crate::nn::{ParamGroup, ParamStore};
use crate::rng::substream_seed;

/// How the two-way blocks are initialised (or whether they exist at all).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// No prompt generator and no two-way blocks.
    None,
    RandomSam,
    PretrainedSam,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::None, Arm::RandomSam, Arm::PretrainedSam];

    pub fn name(self) -> &'static str {
        match self {
            Arm::None => "none",
            Arm::RandomSam => "random_sam",
            Arm::PretrainedSam => "pretrained_sam",
        }
    }

    /// The configuration the arm actually trains.
    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        ModelConfig {
            sam_blocks: self != Arm::None,
            ..cfg.clone()
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = EscError;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| EscError::Invalid(format!("unknown arm `{s}` (none, random_sam, pretrained_sam)")))
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub miou: f64,
    pub wall_time: f64,
    /// Standard error of the epoch's mean step loss (training records only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_band: Option<f64>,
}

/// Standard error of the mean; zero for fewer than two values.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Seeds of the training stream and the held-out set.
pub fn data_seeds(cfg: &ModelConfig) -> (u64, u64) {
    (
        substream_seed(cfg.seed, "data/train"),
        substream_seed(cfg.seed, "data/eval"),
    )
}

pub fn eval_set(cfg: &ModelConfig) -> Vec<SyntheticSample> {
    let (_, seed) = data_seeds(cfg);
    (0..cfg.eval_samples).map(|i| sample(seed, i, cfg.image_size)).collect()
}

/// Class ids the model is trained and evaluated on: the whole vocabulary.
pub fn vocabulary(cfg: &ModelConfig) -> Vec<usize> {
    (0..cfg.n_classes_train).collect()
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:03}.esc")
}

/// Writes every parameter plus the configuration snapshot.
pub fn save_checkpoint(store: &ParamStore, cfg: &ModelConfig, meta: &[(&str, Value)], path: &Path) -> Result<()> {
    let mut archive = store.to_archive(|_| true)?;
    archive.metadata.insert("config".into(), serde_json::to_value(cfg)?);
    for (k, v) in meta {
        archive.metadata.insert((*k).to_string(), v.clone());
    }
    archive.save(path)
}

/// Rebuilds a model from a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore, EscNet)> {
    let archive = Archive::load(path)?;
    let cfg_value = archive
        .metadata
        .get("config")
        .cloned()
        .ok_or_else(|| EscError::Invalid(format!("{}: checkpoint carries no config", path.display())))?;
    let cfg: ModelConfig = serde_json::from_value(cfg_value)?;
    let mut store = ParamStore::new(cfg.seed, DType::F32);
    let model = EscNet::new(&cfg, &mut store)?;
    store.check_no_extras(&archive, |_| true, path)?;
    store.load_archive(&archive, |_| true, path)?;
    Ok((cfg, store, model))
}

/// Mean loss and pooled mIoU of `model` on `samples`.
pub fn evaluate(model: &EscNet, samples: &[SyntheticSample], class_ids: &[usize], batch: usize) -> Result<(f64, EvalReport)> {
    let cfg = &model.cfg;
    let mut acc = IouAccumulator::new(class_ids);
    let mut total = 0.0;
    let dtype = model.dtype();
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<Vec<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
        let gt: Vec<Vec<u8>> = chunk.iter().map(|s| s.gt.clone()).collect();
        let x = image_batch(&images, cfg.image_size, dtype)?;
        let out = model.predict(&x, class_ids)?;
        total += loss(&out.logits, &gt)?.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        for (pred, g) in out.labels.iter().zip(&gt) {
            acc.add(pred, g);
        }
    }
    Ok((total / samples.len() as f64, acc.report()))
}

pub struct TrainOutcome {
    pub cfg: ModelConfig,
    pub arm: Arm,
    pub records: Vec<LogRecord>,
    pub final_eval: EvalReport,
    pub checkpoint: PathBuf,
    pub store: ParamStore,
    pub model: EscNet,
}

/// Per-group learning rates: encoders and two-way blocks move slowly, the
/// fusion stack and decoder at the head rate.
pub fn group_lr(cfg: &ModelConfig, group: ParamGroup) -> f64 {
    match group {
        ParamGroup::Encoder => cfg.lr_encoder,
        ParamGroup::Sam => cfg.lr_backbone,
        ParamGroup::Head => cfg.lr_head,
    }
}

/// Archives that initialise parts of the model before training.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Pretrained {
    /// Aligned vision and text encoders, loaded for every arm when present.
    pub encoders: Option<PathBuf>,
    /// Prompt encoder and two-way blocks; required by [`Arm::PretrainedSam`].
    pub sam: Option<PathBuf>,
}

impl Pretrained {
    /// Both archives under `dir`, with their default names.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            encoders: Some(dir.join(ENCODER_ARCHIVE)),
            sam: Some(dir.join(SAM_ARCHIVE)),
        }
    }
}

/// Trains one arm and writes `metrics.jsonl` plus one checkpoint per epoch
/// under `out_dir`.
pub fn train(cfg: &ModelConfig, arm: Arm, init: &Pretrained, out_dir: &Path) -> Result<TrainOutcome> {
    let cfg = arm.apply(cfg);
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| EscError::io(out_dir, e))?;
    let mut store = ParamStore::new(cfg.seed, DType::F32);
    let model = EscNet::new(&cfg, &mut store)?;
    if let Some(path) = &init.encoders {
        load_encoders(&store, path)?;
    }
    if arm == Arm::PretrainedSam {
        let path = init.sam.as_deref().ok_or_else(|| {
            EscError::Invalid("the pretrained_sam arm needs a pretrained block archive".into())
        })?;
        load_pretrained_sam(&store, path)?;
    }

    let mut optimizers = Vec::new();
    for group in [ParamGroup::Encoder, ParamGroup::Sam, ParamGroup::Head] {
        let vars = store.vars(group);
        if vars.is_empty() {
            continue;
        }
        let params = ParamsAdamW {
            lr: group_lr(&cfg, group),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        };
        optimizers.push(AdamW::new(vars, params)?);
    }

    let classes = vocabulary(&cfg);
    let (train_seed, _) = data_seeds(&cfg);
    let held_out = eval_set(&cfg);
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| EscError::io(&log_path, e))?);
    let meta = |epoch: usize| vec![("arm", Value::from(arm.name())), ("epoch", Value::from(epoch))];

    let start = Instant::now();
    let mut records = Vec::new();
    let mut last_eval = None;
    let mut checkpoint = out_dir.join(checkpoint_name(0));
    save_checkpoint(&store, &cfg, &meta(0), &checkpoint)?;
    let steps = cfg.samples_per_epoch.div_ceil(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        let mut acc = IouAccumulator::new(&classes);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut step_losses: Vec<f64> = Vec::new();
        for step in 0..steps {
            let first = (epoch - 1) * cfg.samples_per_epoch + step * cfg.batch_size;
            let n = cfg.batch_size.min(cfg.samples_per_epoch - step * cfg.batch_size);
            let batch: Vec<SyntheticSample> = (first..first + n)
                .map(|i| sample(train_seed, i, cfg.image_size))
                .collect();
            let images: Vec<Vec<f32>> = batch.iter().map(|s| s.image.clone()).collect();
            let gt: Vec<Vec<u8>> = batch.iter().map(|s| s.gt.clone()).collect();
            let x = image_batch(&images, cfg.image_size, DType::F32)?;
            let logits = model.forward(&x, &classes)?.logits;
            let l = loss(&logits, &gt)?;
            let value = l.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                log.flush().map_err(|e| EscError::io(&log_path, e))?;
                return Err(EscError::Diverged { epoch, step, loss: value });
            }
            let grads = l.backward()?;
            for opt in optimizers.iter_mut() {
                opt.step(&grads)?;
            }
            let labels = crate::escnet::labels_from_logits(&logits.detach())?;
            for (p, g) in labels.labels.iter().zip(&gt) {
                acc.add(p, g);
            }
            epoch_loss += value * n as f64;
            step_losses.push(value);
            seen += n;
        }
        let train_rec = LogRecord {
            epoch,
            split: "train".into(),
            loss: epoch_loss / seen as f64,
            miou: acc.report().miou,
            wall_time: start.elapsed().as_secs_f64(),
            loss_band: Some(standard_error(&step_losses)),
        };
        let (eval_loss, report) = evaluate(&model, &held_out, &classes, cfg.batch_size)?;
        let eval_rec = LogRecord {
            epoch,
            split: "eval".into(),
            loss: eval_loss,
            miou: report.miou,
            wall_time: start.elapsed().as_secs_f64(),
            loss_band: None,
        };
        for rec in [train_rec, eval_rec] {
            log::info!(
                "{} epoch {} {}: loss {:.4} miou {:.4} ({:.0}s)",
                arm, rec.epoch, rec.split, rec.loss, rec.miou, rec.wall_time
            );
            serde_json::to_writer(&mut log, &rec)?;
            log.write_all(b"\n").map_err(|e| EscError::io(&log_path, e))?;
            records.push(rec);
        }
        log.flush().map_err(|e| EscError::io(&log_path, e))?;
        checkpoint = out_dir.join(checkpoint_name(epoch));
        save_checkpoint(&store, &cfg, &meta(epoch), &checkpoint)?;
        last_eval = Some(report);
    }
    let final_eval = match last_eval {
        Some(r) => r,
        None => evaluate(&model, &held_out, &classes, cfg.batch_size)?.1,
    };
    Ok(TrainOutcome {
        cfg,
        arm,
        records,
        final_eval,
        checkpoint,
        store,
        model,
    })
}

/// Reads a metrics log back.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| EscError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
