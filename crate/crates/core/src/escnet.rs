//! The full model: encoders, correlation, a chain of ESC blocks and the
//! upsampling decoder, plus loss and prediction.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::archive::Archive;
use crate::config::ModelConfig;
use crate::correlation::{correlate, CorrelationMap};
use crate::encoders::{TextEncoder, TextFeature, VisionEncoder, VisionFeature};
use crate::error::{EscError, Result};
use crate::nn::{resize_bilinear, Conv3x3, ParamGroup, ParamStore, Pointwise, Vb};
use crate::ppg::{self, PromptEncoder, PseudoPrompts};
use crate::rng::substream_seed;
use crate::samblock::{block_prefix, SamBlock};
use crate::vlf::{vlf_prefix, EmbeddedCorrelation, Vlf};

/// Label used for pixels that carry no ground truth.
pub const IGNORE_INDEX: u8 = 255;

/// Per-class upsampling head with weights shared across classes.
pub struct Decoder {
    pre: Pointwise,
    conv0: Conv3x3,
    conv1: Conv3x3,
    head: Pointwise,
    image_size: usize,
    dtype: DType,
}

impl Decoder {
    pub fn new(mut vb: Vb, cfg: &ModelConfig) -> Result<Self> {
        let [c0, c1, _] = cfg.encoder_widths;
        let [d0, d1] = cfg.decoder_widths;
        let dtype = vb.dtype();
        Ok(Self {
            pre: Pointwise::new(vb.pp("pre"), cfg.channels, d0)?,
            conv0: Conv3x3::new(vb.pp("conv0"), d0 + c1, d0)?,
            conv1: Conv3x3::new(vb.pp("conv1"), d0 + c0, d1)?,
            head: Pointwise::new(vb.pp("head"), d1, 1)?,
            image_size: cfg.image_size,
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Per-class logits `(B, N_c, S, S)` from the final embedded correlation
    /// and the encoder skips (2x grid, then 4x grid).
    pub fn forward(&self, emb: &EmbeddedCorrelation, skips: &[Tensor]) -> Result<Tensor> {
        let (b, n) = (emb.batch, emb.classes);
        let s = b * n;
        let per_class = |t: &Tensor| -> Result<Tensor> {
            let (_, c, h, w) = t.dims4()?;
            Ok(t.unsqueeze(1)?
                .broadcast_as((b, n, c, h, w))?
                .reshape((s, c, h, w))?)
        };
        let c = emb.values.dim(2)?;
        let x = emb
            .values
            .transpose(1, 2)?
            .reshape((s, c, emb.height, emb.width))?;
        let mut x = self.pre.forward(&x)?;
        for (conv, skip) in [&self.conv0, &self.conv1].into_iter().zip(skips) {
            let (_, _, h, w) = x.dims4()?;
            let up = resize_bilinear(&x, 2 * h, 2 * w)?;
            let cat = Tensor::cat(&[&up, &per_class(skip)?], 1)?;
            x = conv.forward(&cat)?.gelu_erf()?;
        }
        let x = resize_bilinear(&x, self.image_size, self.image_size)?;
        let logits = self.head.forward(&x)?;
        Ok(logits.reshape((b, n, self.image_size, self.image_size))?)
    }
}

/// Everything one ESC block produced.
pub struct BlockOutput {
    pub prompts: Option<PseudoPrompts>,
    pub refined: Tensor,
    pub embedded: EmbeddedCorrelation,
    pub scalar: CorrelationMap,
}

pub struct ForwardOutput {
    /// `(B, N_c, S, S)`.
    pub logits: Tensor,
    pub initial: CorrelationMap,
    pub blocks: Vec<BlockOutput>,
}

/// Arg-max label maps, one per image.
#[derive(Clone, Debug)]
pub struct SegmentationOutput {
    pub logits: Tensor,
    pub labels: Vec<Vec<u8>>,
    pub size: usize,
}

pub struct EscNet {
    pub cfg: ModelConfig,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub prompt: Option<PromptEncoder>,
    pub sam: Vec<SamBlock>,
    pub vlf: Vec<Vlf>,
    pub decoder: Decoder,
}

impl EscNet {
    /// Registers every parameter in `store` and builds the model.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let vision = VisionEncoder::new(Vb::root(store, ParamGroup::Encoder).pp("vision"), cfg)?;
        let text = TextEncoder::new(Vb::root(store, ParamGroup::Encoder).pp("text"), cfg)?;
        let (prompt, sam) = if cfg.sam_blocks {
            let prompt = PromptEncoder::new(Vb::root(store, ParamGroup::Sam).pp("prompt"), cfg)?;
            let sam = (0..cfg.num_blocks)
                .map(|j| SamBlock::new(Vb::root(store, ParamGroup::Sam).pp(block_prefix(j)), cfg))
                .collect::<Result<Vec<_>>>()?;
            (Some(prompt), sam)
        } else {
            (None, Vec::new())
        };
        let vlf = (0..cfg.num_blocks)
            .map(|j| Vlf::new(Vb::root(store, ParamGroup::Head).pp(vlf_prefix(j)), cfg))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(Vb::root(store, ParamGroup::Head).pp("decoder"), cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            vision,
            text,
            prompt,
            sam,
            vlf,
            decoder,
        })
    }

    /// Float32 model with freshly initialised parameters.
    pub fn init(cfg: &ModelConfig) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new(cfg.seed, DType::F32);
        let model = Self::new(cfg, &mut store)?;
        Ok((store, model))
    }

    pub fn dtype(&self) -> DType {
        self.decoder.dtype()
    }

    /// Seed of the prompt generator in block `j`.
    pub fn ppg_seed(&self, j: usize) -> u64 {
        substream_seed(self.cfg.seed, &format!("ppg/{j}"))
    }

    pub fn encode(&self, images: &Tensor, class_ids: &[usize]) -> Result<(VisionFeature, TextFeature)> {
        Ok((self.vision.forward(images)?, self.text.forward(class_ids)?))
    }

    /// One refinement stage: prompts from `corr`, refined image feature, fused map.
    pub fn esc_block(
        &self,
        j: usize,
        corr: &CorrelationMap,
        vision: &VisionFeature,
        text: &TextFeature,
    ) -> Result<BlockOutput> {
        self.esc_block_with(j, corr, vision, text, None)
    }

    /// [`EscNet::esc_block`] with optionally fixed prompts instead of ones
    /// generated from `corr`.
    pub fn esc_block_with(
        &self,
        j: usize,
        corr: &CorrelationMap,
        vision: &VisionFeature,
        text: &TextFeature,
        fixed: Option<&PseudoPrompts>,
    ) -> Result<BlockOutput> {
        let (prompts, refined) = match (&self.prompt, self.sam.get(j)) {
            (Some(encoder), Some(block)) => {
                let prompts = match fixed {
                    Some(p) => p.clone(),
                    None => {
                        let detached = CorrelationMap {
                            values: corr.values.detach(),
                        };
                        ppg::generate(&detached, &self.cfg, self.ppg_seed(j))?
                    }
                };
                let embeds = encoder.encode(&prompts)?;
                let pe = encoder.image_pe()?;
                let refined = block.refine_vision(&vision.grid, &embeds, &pe)?;
                (Some(prompts), refined)
            }
            _ => (None, vision.grid.clone()),
        };
        let (embedded, scalar) = self.vlf[j].forward(corr, &refined, text)?;
        Ok(BlockOutput {
            prompts,
            refined,
            embedded,
            scalar,
        })
    }

    /// Forward pass from already encoded features.
    pub fn forward_features(&self, vision: &VisionFeature, text: &TextFeature) -> Result<ForwardOutput> {
        self.forward_features_with(vision, text, None)
    }

    /// Forward pass that reuses the prompts of an earlier pass (one entry per
    /// block). Prompt generation is not differentiable, so this evaluates the
    /// same function the analytic gradient describes.
    pub fn forward_features_with(
        &self,
        vision: &VisionFeature,
        text: &TextFeature,
        fixed: Option<&[PseudoPrompts]>,
    ) -> Result<ForwardOutput> {
        let initial = correlate(vision, text)?;
        let mut blocks: Vec<BlockOutput> = Vec::with_capacity(self.vlf.len());
        for j in 0..self.vlf.len() {
            let corr = blocks.last().map_or(&initial, |b| &b.scalar);
            let out = self.esc_block_with(j, corr, vision, text, fixed.and_then(|p| p.get(j)))?;
            blocks.push(out);
        }
        let last = &blocks.last().expect("at least one block").embedded;
        let logits = self.decoder.forward(last, &vision.skips)?;
        Ok(ForwardOutput {
            logits,
            initial,
            blocks,
        })
    }

    pub fn forward(&self, images: &Tensor, class_ids: &[usize]) -> Result<ForwardOutput> {
        let (v, t) = self.encode(images, class_ids)?;
        self.forward_features(&v, &t)
    }

    pub fn predict(&self, images: &Tensor, class_ids: &[usize]) -> Result<SegmentationOutput> {
        let logits = self.forward(images, class_ids)?.logits;
        labels_from_logits(&logits)
    }
}

/// Arg-max over the class axis of `(B, N_c, S, S)` logits; ties go to the
/// smallest class index.
pub fn labels_from_logits(logits: &Tensor) -> Result<SegmentationOutput> {
    let (b, n, h, w) = logits.dims4()?;
    if n > IGNORE_INDEX as usize {
        return Err(EscError::Invalid(format!("{n} classes do not fit a u8 label map")));
    }
    let v = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    let labels = (0..b)
        .map(|i| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..n {
                        if v[(i * n + k) * plane + p] > v[(i * n + best) * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect();
    Ok(SegmentationOutput {
        logits: logits.clone(),
        labels,
        size: h,
    })
}

/// Mean per-pixel cross-entropy of `(B, N_c, S, S)` logits against label maps
/// (one `S*S` vector per image), skipping [`IGNORE_INDEX`] pixels.
pub fn loss(logits: &Tensor, gt: &[Vec<u8>]) -> Result<Tensor> {
    let (b, n, h, w) = logits.dims4()?;
    if gt.len() != b || gt.iter().any(|g| g.len() != h * w) {
        return Err(EscError::Shape(format!(
            "ground truth must hold {b} maps of {h}x{w} labels"
        )));
    }
    let plane = h * w;
    let mut onehot = vec![0f64; b * n * plane];
    let mut valid = 0usize;
    for (i, g) in gt.iter().enumerate() {
        for (p, &label) in g.iter().enumerate() {
            if label == IGNORE_INDEX {
                continue;
            }
            if label as usize >= n {
                return Err(EscError::Invalid(format!(
                    "label {label} out of range for {n} classes"
                )));
            }
            onehot[(i * n + label as usize) * plane + p] = 1.0;
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(EscError::Invalid("every pixel is ignored".into()));
    }
    let onehot = Tensor::from_vec(onehot, (b, n, h, w), logits.device())?.to_dtype(logits.dtype())?;
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    let total = (logp * onehot)?.sum_all()?;
    Ok((total.neg()? / valid as f64)?)
}

/// Names loaded from a pretrained two-way-block archive.
pub fn is_pretrained_name(name: &str) -> bool {
    name.starts_with("prompt.") || name.starts_with("block")
}

/// Copies the prompt encoder and every two-way block from a pretraining archive.
pub fn load_pretrained_sam(store: &ParamStore, path: &Path) -> Result<usize> {
    let archive = Archive::load(path)?;
    store.check_no_extras(&archive, is_pretrained_name, path)?;
    store.load_archive(&archive, is_pretrained_name, path)
}

/// Names of the vision and text encoder parameters.
pub fn is_encoder_name(name: &str) -> bool {
    name.starts_with("vision.") || name.starts_with("text.")
}

/// Copies both encoders from an alignment-pretraining archive.
pub fn load_encoders(store: &ParamStore, path: &Path) -> Result<usize> {
    let archive = Archive::load(path)?;
    store.check_no_extras(&archive, is_encoder_name, path)?;
    store.load_archive(&archive, is_encoder_name, path)
}

/// Batch of images `(B, 3, S, S)` from flat CHW buffers.
pub fn image_batch(images: &[Vec<f32>], size: usize, dtype: DType) -> Result<Tensor> {
    let flat: Vec<f32> = images.iter().flatten().copied().collect();
    if flat.len() != images.len() * 3 * size * size {
        return Err(EscError::Shape(format!(
            "images must each hold 3x{size}x{size} values"
        )));
    }
    Ok(Tensor::from_vec(flat, (images.len(), 3, size, size), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Softmax over classes, `(B, N_c, S, S)`; handy for visualisation.
pub fn class_probabilities(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?;
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samblock::is_residual_output;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(cfg: &ModelConfig, dtype: DType) -> (ParamStore, EscNet) {
        let mut store = ParamStore::new(cfg.seed, dtype);
        let net = EscNet::new(cfg, &mut store).unwrap();
        (store, net)
    }

    fn images(b: usize, cfg: &ModelConfig, seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * 3 * cfg.image_size * cfg.image_size;
        let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        Tensor::from_vec(v, (b, 3, cfg.image_size, cfg.image_size), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    /// Closed-form parameter count of the architecture, layer by layer.
    fn expected_parameters(cfg: &ModelConfig) -> usize {
        let c = cfg.channels;
        let [e0, e1, e2] = cfg.encoder_widths;
        let [d0, d1] = cfg.decoder_widths;
        let hidden = c * cfg.mlp_ratio;
        let lin = |i: usize, o: usize| i * o + o;
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let s = cfg.stem_stride();
        let stem = if s == 1 { conv(3, e0, 3) } else { conv(3, e0, s) };
        let vision = stem
            + conv(e0, e1, 2)
            + conv(e1, e1, 3)
            + conv(e1, e2, 2)
            + conv(e2, e2, 3)
            + lin(e2, c);
        let text = cfg.n_classes_train * c;
        let prompt = 5 * c + conv(1, 4, 3) + 8 + conv(4, 16, 3) + 32 + lin(16, c);
        let mlp = lin(c, hidden) + lin(hidden, c);
        let ci = c / cfg.attn_downsample;
        let cross = 3 * lin(c, ci) + lin(ci, c);
        let block = 4 * lin(c, c) + 2 * cross + mlp + 4 * 2 * c + lin(c, c);
        let swin = 2 * 2 * c + 4 * lin(c, c) + mlp;
        let class_fusion = 3 * 2 * c + 4 * lin(c, c) + mlp;
        let vlf = lin(1, c) + lin(2 * c, c) + 2 * swin + class_fusion + lin(c, 1);
        let decoder = lin(c, d0) + conv(d0 + e1, d0, 3) + conv(d0 + e0, d1, 3) + lin(d1, 1);
        vision + text + prompt + cfg.num_blocks * (block + vlf) + decoder
    }

    #[test]
    fn reference_scale_parameter_count() {
        let cfg = ModelConfig::reference_scale();
        let (store, _) = model(&cfg, DType::F32);
        assert_eq!(store.num_parameters(), expected_parameters(&cfg));
        assert_eq!(store.num_parameters(), 680_917);
        let (small, _) = model(&ModelConfig::default(), DType::F32);
        assert_eq!(small.num_parameters(), expected_parameters(&ModelConfig::default()));
    }

    #[test]
    fn output_size_and_single_class() {
        let cfg = ModelConfig::tiny();
        let (_, net) = model(&cfg, DType::F32);
        let out = net.predict(&images(2, &cfg, 0, DType::F32), &[3]).unwrap();
        assert_eq!(out.logits.dims(), &[2, 1, cfg.image_size, cfg.image_size]);
        assert!(out.labels.iter().all(|m| m.iter().all(|&l| l == 0)));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let cfg = ModelConfig::tiny();
        let x = images(1, &cfg, 1, DType::F32);
        let (_, a) = model(&cfg, DType::F32);
        let (_, b) = model(&cfg, DType::F32);
        let la = flat(&a.forward(&x, &[0, 2, 4]).unwrap().logits);
        let lb = flat(&b.forward(&x, &[0, 2, 4]).unwrap().logits);
        assert_eq!(la, lb);
    }

    #[test]
    fn duplicate_classes_give_identical_planes() {
        let cfg = ModelConfig::tiny();
        let (_, net) = model(&cfg, DType::F64);
        let out = net.forward(&images(1, &cfg, 2, DType::F64), &[1, 1]).unwrap();
        let l = out.logits.get(0).unwrap();
        assert_eq!(flat(&l.get(0).unwrap()), flat(&l.get(1).unwrap()));
    }

    #[test]
    fn class_permutation_permutes_logits() {
        let cfg = ModelConfig::tiny();
        let (_, net) = model(&cfg, DType::F64);
        let x = images(1, &cfg, 3, DType::F64);
        let ids = [0usize, 3, 5, 7];
        let perm = [2usize, 0, 3, 1];
        let pids: Vec<usize> = perm.iter().map(|&p| ids[p]).collect();
        let a = net.forward(&x, &ids).unwrap().logits;
        let b = net.forward(&x, &pids).unwrap().logits;
        for (k, &p) in perm.iter().enumerate() {
            let pa = flat(&a.get(0).unwrap().get(p).unwrap());
            let pb = flat(&b.get(0).unwrap().get(k).unwrap());
            let d = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-5, "class {k}: {d}");
        }
    }

    #[test]
    fn zeroed_residuals_reduce_to_the_identity_path() {
        let mut cfg = ModelConfig::tiny();
        // mask prompts add to the image by design; points alone leave it untouched
        cfg.prompts = crate::PromptKinds {
            points: true,
            boxes: false,
            masks: false,
        };
        let (store, net) = model(&cfg, DType::F64);
        store.zero_where(is_residual_output).unwrap();
        let x = images(1, &cfg, 4, DType::F64);
        let (v, t) = net.encode(&x, &[0, 1, 2]).unwrap();
        let corr = correlate(&v, &t).unwrap();
        let out = net.esc_block(0, &corr, &v, &t).unwrap();

        let (c, l) = (cfg.channels, cfg.grid_len());
        let no_mask = store.get("prompt.no_mask").unwrap().var.as_tensor().clone();
        let grid = v.grid.reshape((1, c, l)).unwrap().transpose(1, 2).unwrap();
        let image = grid.broadcast_add(&no_mask).unwrap();
        let refined = net.sam[0].fuse.forward(&image).unwrap();
        let vlf = &net.vlf[0];
        let e = vlf.embed.forward(&corr.values.reshape((3, l, 1)).unwrap()).unwrap();
        let cat = Tensor::cat(&[&e, &refined.broadcast_as((3, l, c)).unwrap()], 2).unwrap();
        let scalar = vlf.reduce.forward(&vlf.proj.forward(&cat).unwrap()).unwrap();
        let d = flat(&scalar)
            .iter()
            .zip(flat(&out.scalar.values))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-12, "{d}");

        // and the prompts no longer matter
        let mut other = cfg.clone();
        other.alpha = 0.99;
        other.seed = 17;
        let mut store2 = ParamStore::new(cfg.seed, DType::F64);
        let net2 = EscNet::new(&other, &mut store2).unwrap();
        store2.zero_where(is_residual_output).unwrap();
        let out2 = net2.esc_block(0, &corr, &v, &t).unwrap();
        assert_ne!(out.prompts, out2.prompts);
        assert_eq!(flat(&out.scalar.values), flat(&out2.scalar.values));
    }

    #[test]
    fn loss_closed_forms() {
        let dev = Device::Cpu;
        // uniform logits -> ln N
        let u = Tensor::zeros((1, 5, 2, 2), DType::F64, &dev).unwrap();
        let gt = vec![vec![0u8, 1, 4, 2]];
        let l = loss(&u, &gt).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, 5f64.ln());
        // margin 50 on the true class
        let mut v = vec![0.0; 5 * 4];
        for (p, &g) in gt[0].iter().enumerate() {
            v[g as usize * 4 + p] = 50.0;
        }
        let m = Tensor::from_vec(v, (1, 5, 2, 2), &dev).unwrap();
        assert!(loss(&m, &gt).unwrap().to_scalar::<f64>().unwrap() <= 1e-6);
        // two pixels by hand, one ignored
        let logits = Tensor::new(&[[[[1.0f64, 0.5, 9.0]], [[-1.0, 2.0, 9.0]]]], &dev).unwrap();
        let gt = vec![vec![0u8, 1, IGNORE_INDEX]];
        let p0 = -(1f64.exp() / (1f64.exp() + (-1f64).exp())).ln();
        let p1 = -(2f64.exp() / (0.5f64.exp() + 2f64.exp())).ln();
        let got = loss(&logits, &gt).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - (p0 + p1) / 2.0).abs() < 1e-12);
        // joint relabelling leaves the loss unchanged
        let swapped = Tensor::cat(&[logits.narrow(1, 1, 1).unwrap(), logits.narrow(1, 0, 1).unwrap()], 1).unwrap();
        let gt_sw = vec![vec![1u8, 0, IGNORE_INDEX]];
        let got_sw = loss(&swapped, &gt_sw).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - got_sw).abs() < 1e-12);
        // everything ignored
        assert!(loss(&logits, &[vec![IGNORE_INDEX; 3]]).is_err());
    }

    #[test]
    fn argmax_ties_go_to_the_smallest_class() {
        let logits = Tensor::new(&[[[[1.0f32, 3.0]], [[1.0, 3.0]], [[0.0, 3.5]]]], &Device::Cpu).unwrap();
        let out = labels_from_logits(&logits).unwrap();
        assert_eq!(out.labels, vec![vec![0, 2]]);
    }

    #[test]
    fn argmax_resolves_gaps_below_single_precision() {
        let logits = Tensor::new(&[[[[-0.3f64]], [[-0.3 + 1e-9]]]], &Device::Cpu).unwrap();
        assert_eq!(labels_from_logits(&logits).unwrap().labels, vec![vec![1]]);
    }

    #[test]
    fn no_sam_arm_has_no_prompt_or_block_parameters() {
        let mut cfg = ModelConfig::tiny();
        cfg.sam_blocks = false;
        let (store, net) = model(&cfg, DType::F32);
        assert!(store.names().all(|n| !is_pretrained_name(n)));
        let out = net.forward(&images(1, &cfg, 5, DType::F32), &[0, 1]).unwrap();
        assert!(out.blocks.iter().all(|b| b.prompts.is_none()));
    }

    proptest::proptest! {
        #[test]
        fn labels_are_the_first_maximum(values in proptest::collection::vec(-2i32..3, 1..48), n in 1usize..5) {
            let plane = values.len();
            let data: Vec<f64> = (0..n).flat_map(|k| values.iter().map(move |&v| f64::from((v + k as i32) % 3))).collect();
            let logits = Tensor::from_vec(data.clone(), (1, n, 1, plane), &Device::Cpu).unwrap();
            let labels = &labels_from_logits(&logits).unwrap().labels[0];
            for (p, &l) in labels.iter().enumerate() {
                let l = l as usize;
                proptest::prop_assert!(l < n);
                let best = (0..n).map(|k| data[k * plane + p]).fold(f64::MIN, f64::max);
                proptest::prop_assert_eq!(data[l * plane + p], best);
                proptest::prop_assert!((0..l).all(|k| data[k * plane + p] < best));
            }
        }
    }
}
