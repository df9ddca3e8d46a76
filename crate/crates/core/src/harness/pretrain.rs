//! Pretraining on synthetic scenes: image-text alignment of the encoders, then
//! class-agnostic promptable segmentation for the two-way blocks.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use serde_json::Value;

use crate::config::{ModelConfig, PromptKinds};
use crate::correlation::correlate;
use crate::error::{EscError, Result};
use crate::escnet::{image_batch, is_encoder_name, is_pretrained_name, load_encoders, EscNet};
use crate::harness::synth::{sample, Primitive, SyntheticSample, VOCABULARY_SIZE};
use crate::nn::{Linear, ParamGroup, ParamStore, Vb};
use crate::ppg::{ClassPrompts, PseudoPrompts};
use crate::rng::{substream, substream_seed};

pub const ENCODER_ARCHIVE: &str = "encoders.esc";
pub const SAM_ARCHIVE: &str = "sam_blocks.esc";

/// Every non-empty combination of prompt kinds.
pub const ALL_KINDS: [PromptKinds; 7] = [
    PromptKinds { points: true, boxes: false, masks: false },
    PromptKinds { points: false, boxes: true, masks: false },
    PromptKinds { points: false, boxes: false, masks: true },
    PromptKinds { points: true, boxes: true, masks: false },
    PromptKinds { points: true, boxes: false, masks: true },
    PromptKinds { points: false, boxes: true, masks: true },
    PromptKinds { points: true, boxes: true, masks: true },
];

/// Fraction of each grid cell covered by `inside`, row-major `H·W`.
pub fn cell_coverage(
    size: usize,
    height: usize,
    width: usize,
    inside: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let (ch, cw) = (size / height, size / width);
    let mut out = vec![0.0; height * width];
    for row in 0..size {
        for col in 0..size {
            if inside(row, col) {
                out[(row / ch) * width + col / cw] += 1.0;
            }
        }
    }
    let area = (ch * cw) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    out
}

/// Per-cell class fractions of one scene, `(N_c, H·W)` flattened, over `class_ids`.
pub fn class_fractions(s: &SyntheticSample, class_ids: &[usize], height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(class_ids.len() * height * width);
    for &c in class_ids {
        out.extend(cell_coverage(s.size, height, width, |r, col| {
            s.gt[r * s.size + col] as usize == c
        }));
    }
    out
}

fn check_grid(cfg: &ModelConfig) -> Result<()> {
    if cfg.image_size % cfg.height != 0 || cfg.image_size % cfg.width != 0 {
        return Err(EscError::Config(format!(
            "image size {} is not a multiple of the {}x{} grid",
            cfg.image_size, cfg.height, cfg.width
        )));
    }
    Ok(())
}

fn adamw(vars: Vec<candle_core::Var>, lr: f64, cfg: &ModelConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    )?)
}

fn scenes(seed: u64, first: usize, count: usize, size: usize) -> Vec<SyntheticSample> {
    (first..first + count).map(|i| sample(seed, i, size)).collect()
}

fn images_of(batch: &[SyntheticSample], size: usize) -> Result<Tensor> {
    let images: Vec<Vec<f32>> = batch.iter().map(|s| s.image.clone()).collect();
    image_batch(&images, size, DType::F32)
}

fn finite(value: f64, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(EscError::Diverged { epoch: 0, step, loss: value })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EncoderReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Held-out fraction of cells whose majority class has the highest
    /// correlation, over cells with a majority above one half.
    pub cell_accuracy: f64,
    pub wall_time: f64,
    pub archive: PathBuf,
}

/// Soft cross-entropy of `corr / tau` against per-cell class fractions.
fn alignment_loss(corr: &Tensor, targets: &Tensor, tau: f64) -> Result<Tensor> {
    let logits = (corr / tau)?;
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    let (b, _, h, w) = corr.dims4()?;
    Ok(((logp * targets)?.sum_all()?.neg()? / (b * h * w) as f64)?)
}

fn fraction_tensor(batch: &[SyntheticSample], classes: &[usize], cfg: &ModelConfig) -> Result<Tensor> {
    let flat: Vec<f32> = batch
        .iter()
        .flat_map(|s| class_fractions(s, classes, cfg.height, cfg.width))
        .map(|v| v as f32)
        .collect();
    Ok(Tensor::from_vec(
        flat,
        (batch.len(), classes.len(), cfg.height, cfg.width),
        &candle_core::Device::Cpu,
    )?)
}

fn cell_accuracy(model: &EscNet, samples: &[SyntheticSample], classes: &[usize], cfg: &ModelConfig) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    let l = cfg.height * cfg.width;
    for chunk in samples.chunks(cfg.batch_size) {
        let (v, t) = model.encode(&images_of(chunk, cfg.image_size)?, classes)?;
        let corr = correlate(&v, &t)?.values;
        let corr: Vec<f32> = corr.flatten_all()?.to_vec1()?;
        for (b, s) in chunk.iter().enumerate() {
            let frac = class_fractions(s, classes, cfg.height, cfg.width);
            for cell in 0..l {
                let at = |n: usize, buf: &[f64]| buf[n * l + cell];
                let best = (0..classes.len())
                    .max_by(|&a, &c| at(a, &frac).total_cmp(&at(c, &frac)))
                    .expect("non-empty vocabulary");
                if frac[best * l + cell] <= 0.5 {
                    continue;
                }
                let base = b * classes.len() * l;
                let pred = (0..classes.len())
                    .max_by(|&a, &c| corr[base + a * l + cell].total_cmp(&corr[base + c * l + cell]))
                    .expect("non-empty vocabulary");
                total += 1;
                hit += usize::from(pred == best);
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Aligns the vision and text encoders so that the cosine correlation
/// classifies grid cells, and saves both to `out_dir/encoders.esc`.
pub fn pretrain_encoders(cfg: &ModelConfig, out_dir: &Path) -> Result<EncoderReport> {
    cfg.validate()?;
    check_grid(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| EscError::io(out_dir, e))?;
    let cfg = ModelConfig { sam_blocks: false, ..cfg.clone() };
    let mut store = ParamStore::new(cfg.seed, DType::F32);
    let model = EscNet::new(&cfg, &mut store)?;
    let mut opt = adamw(store.vars(ParamGroup::Encoder), cfg.pretrain.encoder_lr, &cfg)?;
    let classes: Vec<usize> = (0..VOCABULARY_SIZE).collect();
    let data_seed = substream_seed(cfg.seed, "data/encoders");
    let batch_size = cfg.pretrain.batch_size;

    let start = Instant::now();
    let mut final_loss = f64::NAN;
    for step in 0..cfg.pretrain.encoder_steps {
        let batch = scenes(data_seed, step * batch_size, batch_size, cfg.image_size);
        let (v, t) = model.encode(&images_of(&batch, cfg.image_size)?, &classes)?;
        let corr = correlate(&v, &t)?.values;
        let l = alignment_loss(&corr, &fraction_tensor(&batch, &classes, &cfg)?, cfg.tau)?;
        final_loss = finite(l.to_scalar::<f32>()? as f64, step)?;
        opt.step(&l.backward()?)?;
        if step % 100 == 0 {
            log::info!("encoders step {step}: loss {final_loss:.4}");
        }
    }
    let held_out = scenes(
        substream_seed(cfg.seed, "data/encoders_eval"),
        0,
        cfg.pretrain.eval_samples.max(1),
        cfg.image_size,
    );
    let cell_accuracy = cell_accuracy(&model, &held_out, &classes, &cfg)?;
    let archive = out_dir.join(ENCODER_ARCHIVE);
    let report = EncoderReport {
        steps: cfg.pretrain.encoder_steps,
        final_loss,
        cell_accuracy,
        wall_time: start.elapsed().as_secs_f64(),
        archive: archive.clone(),
    };
    let mut a = store.to_archive(is_encoder_name)?;
    a.metadata.insert("config".into(), serde_json::to_value(&cfg)?);
    a.metadata.insert("report".into(), serde_json::to_value(&report)?);
    a.save(&archive)?;
    log::info!("encoders: cell accuracy {cell_accuracy:.3}");
    Ok(report)
}

/// One prompted object: its per-cell coverage and the prompts derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectPrompt {
    pub coverage: Vec<f64>,
    pub prompts: ClassPrompts,
}

/// Prompts for one shape: the mask holds the cells at least half covered (or
/// the best covered one), the point is a random mask cell and the box bounds
/// the mask.
pub fn object_prompt(shape: &Primitive, cfg: &ModelConfig, rng: &mut impl Rng) -> ObjectPrompt {
    let (h, w) = (cfg.height, cfg.width);
    let coverage = cell_coverage(cfg.image_size, h, w, |r, c| shape.contains(r, c));
    let mut cells: Vec<usize> = (0..h * w).filter(|&i| coverage[i] >= 0.5).collect();
    if cells.is_empty() {
        let best = (0..h * w)
            .max_by(|&a, &b| coverage[a].total_cmp(&coverage[b]))
            .expect("non-empty grid");
        cells.push(best);
    }
    let mut prompts = ClassPrompts::empty(cfg.prompts_per_class, h * w);
    for &i in &cells {
        prompts.masks[0][i] = true;
    }
    let p = *cells.choose(rng).expect("non-empty mask");
    prompts.points[0] = Some((p / w, p % w));
    let rows = cells.iter().map(|&i| i / w);
    let cols = cells.iter().map(|&i| i % w);
    prompts.boxes[0] = Some((
        rows.clone().min().expect("non-empty"),
        cols.clone().min().expect("non-empty"),
        rows.max().expect("non-empty"),
        cols.max().expect("non-empty"),
    ));
    ObjectPrompt { coverage, prompts }
}

/// Per-block linear probes from a stream's projected refinement to a per-cell
/// object logit.
struct Probes {
    heads: Vec<Linear>,
}

impl Probes {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let heads = (0..cfg.num_blocks)
            .map(|j| Linear::new(Vb::root(store, ParamGroup::Head).pp(format!("probe{j}")), cfg.channels, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    /// Object logits `(S, H·W)` of every block, one row per prompt stream.
    fn logits(&self, model: &EscNet, grid: &Tensor, pseudo: &PseudoPrompts, kinds: PromptKinds) -> Result<Vec<Tensor>> {
        let prompt = model
            .prompt
            .as_ref()
            .ok_or_else(|| EscError::Invalid("pretraining needs the two-way blocks".into()))?;
        let embeds = prompt.encode_as(pseudo, kinds)?;
        let pe = prompt.image_pe()?;
        let mut out = Vec::with_capacity(self.heads.len());
        for (block, head) in model.sam.iter().zip(&self.heads) {
            let per = block.per_class(grid, &embeds, &pe)?;
            let (s, l, _) = per.dims3()?;
            out.push(head.forward(&block.fuse.forward(&per)?)?.reshape((s, l))?);
        }
        Ok(out)
    }
}

fn single_object_prompts(objects: &[ObjectPrompt], cfg: &ModelConfig) -> PseudoPrompts {
    PseudoPrompts {
        height: cfg.height,
        width: cfg.width,
        slots: cfg.prompts_per_class,
        classes: objects.iter().map(|o| o.prompts.clone()).collect(),
    }
}

/// Prompts of every vocabulary class from the frozen correlation, as the
/// blocks see them during training. A stream's target is the coverage of the
/// shapes its points fall on (cells at least half covered).
fn generated_prompts(
    model: &EscNet,
    vision: &crate::encoders::VisionFeature,
    batch: &[SyntheticSample],
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(PseudoPrompts, Vec<f32>)> {
    let classes: Vec<usize> = (0..VOCABULARY_SIZE).collect();
    let corr = correlate(vision, &model.text.forward(&classes)?)?;
    let pseudo = crate::ppg::generate(&corr, cfg, seed)?;
    let l = cfg.height * cfg.width;
    let mut targets = Vec::with_capacity(pseudo.classes.len() * l);
    for (b, s) in batch.iter().enumerate() {
        let coverage: Vec<Vec<f64>> = s
            .shapes
            .iter()
            .map(|sh| cell_coverage(cfg.image_size, cfg.height, cfg.width, |r, c| sh.primitive.contains(r, c)))
            .collect();
        for cp in &pseudo.classes[b * classes.len()..(b + 1) * classes.len()] {
            let mut t = vec![0f32; l];
            for cov in &coverage {
                let hit = cp.points.iter().flatten().any(|&(r, c)| cov[r * cfg.width + c] >= 0.5);
                if hit {
                    t.iter_mut().zip(cov).for_each(|(t, &v)| *t = t.max(v as f32));
                }
            }
            targets.extend(t);
        }
    }
    Ok((pseudo, targets))
}

/// Mean binary cross-entropy of `logits` against soft `targets`.
fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let m = logits.relu()?.detach();
    let softplus = (m.neg()?.exp()? + logits.broadcast_sub(&m)?.exp()?)?.log()?.add(&m)?;
    Ok((softplus - (logits * targets)?)?.mean_all()?)
}

#[derive(Clone, Debug, Serialize)]
pub struct SamReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Held-out probe IoU of each block against cells at least half covered.
    pub probe_iou: Vec<f64>,
    pub mean_probe_iou: f64,
    pub eval_kinds: String,
    pub wall_time: f64,
    pub archive: PathBuf,
}

fn batch_objects(batch: &[SyntheticSample], cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<ObjectPrompt> {
    batch
        .iter()
        .map(|s| {
            let shape = s.shapes.choose(rng).expect("scenes hold at least one shape");
            object_prompt(&shape.primitive, cfg, rng)
        })
        .collect()
}

fn coverage_tensor(objects: &[ObjectPrompt]) -> Result<Tensor> {
    let l = objects[0].coverage.len();
    let flat: Vec<f32> = objects.iter().flat_map(|o| o.coverage.iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(flat, (objects.len(), l), &candle_core::Device::Cpu)?)
}

/// Trains the prompt encoder and two-way blocks to expose the prompted object
/// in their refined features, read out by a linear probe per block. Even
/// steps prompt one shape per stream; odd steps use prompts generated from
/// the correlation map, as the blocks see them inside the model. The encoders
/// are frozen, loaded from `encoders` when given. Saves the prompt encoder
/// and blocks to `out_dir/sam_blocks.esc`.
pub fn pretrain_sam_analog(cfg: &ModelConfig, encoders: Option<&Path>, out_dir: &Path) -> Result<SamReport> {
    cfg.validate()?;
    check_grid(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| EscError::io(out_dir, e))?;
    let cfg = ModelConfig { sam_blocks: true, ..cfg.clone() };
    let mut store = ParamStore::new(cfg.seed, DType::F32);
    let model = EscNet::new(&cfg, &mut store)?;
    if let Some(path) = encoders {
        load_encoders(&store, path)?;
    }
    let mut probe_store = ParamStore::new(substream_seed(cfg.seed, "pretrain/probes"), DType::F32);
    let probes = Probes::new(&mut probe_store, &cfg)?;
    let mut vars = store.vars(ParamGroup::Sam);
    vars.extend(probe_store.vars(ParamGroup::Head));
    let mut opt = adamw(vars, cfg.pretrain.lr, &cfg)?;

    let data_seed = substream_seed(cfg.seed, "data/sam");
    let batch_size = cfg.pretrain.batch_size;
    let start = Instant::now();
    let mut final_loss = f64::NAN;
    for step in 0..cfg.pretrain.steps {
        let mut rng = substream(cfg.seed, &format!("pretrain/sam/{step}"));
        let batch = scenes(data_seed, step * batch_size, batch_size, cfg.image_size);
        let kinds = *ALL_KINDS.choose(&mut rng).expect("non-empty");
        let vision = model.vision.forward(&images_of(&batch, cfg.image_size)?)?.detach();
        // alternate single-shape prompts with prompts generated from the correlation
        let (pseudo, targets) = if step % 2 == 0 {
            let objects = batch_objects(&batch, &cfg, &mut rng);
            (single_object_prompts(&objects, &cfg), coverage_tensor(&objects)?)
        } else {
            let (pseudo, t) = generated_prompts(&model, &vision, &batch, &cfg, rng.gen())?;
            let rows = pseudo.classes.len();
            let t = Tensor::from_vec(t, (rows, cfg.height * cfg.width), &candle_core::Device::Cpu)?;
            (pseudo, t)
        };
        let logits = probes.logits(&model, &vision.grid, &pseudo, kinds)?;
        let mut total = bce_with_logits(&logits[0], &targets)?;
        for l in &logits[1..] {
            total = (total + bce_with_logits(l, &targets)?)?;
        }
        let total = (total / logits.len() as f64)?;
        final_loss = finite(total.to_scalar::<f32>()? as f64, step)?;
        opt.step(&total.backward()?)?;
        if step % 100 == 0 {
            log::info!("two-way blocks step {step} ({}): loss {final_loss:.4}", kinds.label());
        }
    }

    let probe_iou = probe_iou(&model, &probes, &cfg)?;
    let mean_probe_iou = probe_iou.iter().sum::<f64>() / probe_iou.len() as f64;
    let archive = out_dir.join(SAM_ARCHIVE);
    let report = SamReport {
        steps: cfg.pretrain.steps,
        final_loss,
        probe_iou,
        mean_probe_iou,
        eval_kinds: cfg.prompts.label(),
        wall_time: start.elapsed().as_secs_f64(),
        archive: archive.clone(),
    };
    let mut a = store.to_archive(is_pretrained_name)?;
    a.metadata.insert("config".into(), serde_json::to_value(&cfg)?);
    a.metadata.insert("report".into(), serde_json::to_value(&report)?);
    if let Some(path) = encoders {
        a.metadata.insert("encoders".into(), Value::from(path.display().to_string()));
    }
    a.save(&archive)?;
    log::info!("two-way blocks: probe IoU {:?}", report.probe_iou);
    Ok(report)
}

fn probe_iou(model: &EscNet, probes: &Probes, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let samples = scenes(
        substream_seed(cfg.seed, "data/sam_eval"),
        0,
        cfg.pretrain.eval_samples.max(1),
        cfg.image_size,
    );
    let mut rng = substream(cfg.seed, "pretrain/sam_eval");
    let mut inter = vec![0usize; model.sam.len()];
    let mut union = vec![0usize; model.sam.len()];
    for chunk in samples.chunks(cfg.pretrain.batch_size) {
        let objects = batch_objects(chunk, cfg, &mut rng);
        let grid = model.vision.forward(&images_of(chunk, cfg.image_size)?)?.grid;
        let pseudo = single_object_prompts(&objects, cfg);
        for (j, logits) in probes.logits(model, &grid, &pseudo, cfg.prompts)?.iter().enumerate() {
            let values: Vec<f32> = logits.flatten_all()?.to_vec1()?;
            let truth = objects.iter().flat_map(|o| o.coverage.iter().map(|&v| v >= 0.5));
            for (&z, t) in values.iter().zip(truth) {
                let p = z > 0.0;
                inter[j] += usize::from(p && t);
                union[j] += usize::from(p || t);
            }
        }
    }
    Ok(inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| if u == 0 { 0.0 } else { i as f64 / u as f64 })
        .collect())
}
