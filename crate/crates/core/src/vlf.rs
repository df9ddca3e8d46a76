//! Vision-language fusion: mixes each class's correlation map with the refined
//! image feature spatially (windowed self-attention), then across classes
//! (linear attention against the text embeddings).
//!
//! Class streams are laid out as `(B·N_c, L, C)` with `L = H·W` row-major.

use candle_core::{DType, Device, Tensor, D};

use crate::config::ModelConfig;
use crate::correlation::CorrelationMap;
use crate::encoders::TextFeature;
use crate::error::{EscError, Result};
use crate::nn::{elu_plus_one, in_f64, Attention, LayerNorm, Linear, Mlp, Vb};

/// Additive bias that removes cross-region pairs in shifted windows.
const MASKED: f64 = -1e9;

/// Archive prefix of the j-th fusion module's parameters.
pub fn vlf_prefix(j: usize) -> String {
    format!("vlf{j}")
}

/// Per-class embedded correlation, `(B·N_c, L, C)`.
#[derive(Clone, Debug)]
pub struct EmbeddedCorrelation {
    pub values: Tensor,
    pub batch: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl EmbeddedCorrelation {
    /// `(B, N_c, C, H, W)` view.
    pub fn to_grid(&self) -> Result<Tensor> {
        let c = self.values.dim(2)?;
        Ok(self
            .values
            .transpose(1, 2)?
            .reshape((self.batch, self.classes, c, self.height, self.width))?)
    }
}

/// Pre-norm windowed self-attention + MLP. `shift` is the cyclic offset of the
/// window partition (0 for the regular block).
pub struct SwinBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    window: usize,
    shift: usize,
    height: usize,
    width: usize,
    mask: Option<Tensor>,
}

impl SwinBlock {
    pub fn new(mut vb: Vb, cfg: &ModelConfig, shift: usize) -> Result<Self> {
        let (h, w, ws) = (cfg.height, cfg.width, cfg.window);
        if ws == 0 || h % ws != 0 || w % ws != 0 {
            return Err(EscError::Config(format!(
                "attention window {ws} does not tile the {h}x{w} grid"
            )));
        }
        let c = cfg.channels;
        let dtype = vb.dtype();
        Ok(Self {
            norm1: LayerNorm::new(vb.pp("norm1"), c)?,
            attn: Attention::new(vb.pp("attn"), c, c, cfg.heads)?,
            norm2: LayerNorm::new(vb.pp("norm2"), c)?,
            mlp: Mlp::new(vb.pp("mlp"), c, c * cfg.mlp_ratio)?,
            window: ws,
            shift,
            height: h,
            width: w,
            mask: if shift > 0 {
                Some(shift_mask(h, w, ws, shift, dtype)?)
            } else {
                None
            },
        })
    }

    fn roll(&self, x: &Tensor, by_h: usize, by_w: usize) -> Result<Tensor> {
        // x: (S, H, W, C); out[i] = x[(i + by) mod n]
        let roll_dim = |x: Tensor, dim: usize, by: usize, n: usize| -> Result<Tensor> {
            if by % n == 0 {
                return Ok(x);
            }
            let by = by % n;
            Ok(Tensor::cat(&[x.narrow(dim, by, n - by)?, x.narrow(dim, 0, by)?], dim)?)
        };
        let x = roll_dim(x.clone(), 1, by_h, self.height)?;
        roll_dim(x, 2, by_w, self.width)
    }

    fn partition(&self, x: &Tensor) -> Result<Tensor> {
        let (s, h, w, c) = x.dims4()?;
        let ws = self.window;
        Ok(x.reshape((s, h / ws, ws, w / ws, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((s * (h / ws) * (w / ws), ws * ws, c))?)
    }

    fn merge(&self, x: &Tensor, s: usize) -> Result<Tensor> {
        let (h, w, ws) = (self.height, self.width, self.window);
        let c = x.dim(2)?;
        Ok(x.reshape((s, h / ws, w / ws, ws, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((s, h, w, c))?)
    }

    /// `x`: (S, L, C) -> (S, L, C).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (s, l, c) = x.dims3()?;
        let (h, w) = (self.height, self.width);
        let a = self.norm1.forward(x)?.reshape((s, h, w, c))?;
        let a = self.roll(&a, self.shift, self.shift)?;
        let win = self.partition(&a)?;
        let att = self.attn.forward(&win, &win, &win, self.mask.as_ref())?;
        let att = self.merge(&att, s)?;
        let att = self.roll(&att, h - self.shift % h, w - self.shift % w)?;
        let x = (x + att.reshape((s, l, c))?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// Additive mask (nW, ws², ws²) forbidding attention between positions that
/// came from different regions before the cyclic shift.
fn shift_mask(h: usize, w: usize, ws: usize, shift: usize, dtype: DType) -> Result<Tensor> {
    let region = |i: usize, n: usize| -> usize {
        if i < n - ws {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / ws, w / ws);
    let mut m = Vec::with_capacity(nh * nw * ws.pow(4));
    for wi in 0..nh {
        for wj in 0..nw {
            let ids: Vec<usize> = (0..ws * ws)
                .map(|p| {
                    let (r, c) = (wi * ws + p / ws, wj * ws + p % ws);
                    region(r, h) * 3 + region(c, w)
                })
                .collect();
            for a in &ids {
                for b in &ids {
                    m.push(if a == b { 0.0 } else { MASKED });
                }
            }
        }
    }
    Ok(Tensor::from_vec(m, (nh * nw, ws * ws, ws * ws), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Linear attention across classes at every position, keys and values from text.
pub struct ClassFusion {
    norm: LayerNorm,
    text_norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl ClassFusion {
    pub fn new(mut vb: Vb, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        if c % cfg.heads != 0 {
            return Err(EscError::Config(format!(
                "{c} channels not divisible by {} heads",
                cfg.heads
            )));
        }
        Ok(Self {
            norm: LayerNorm::new(vb.pp("norm1"), c)?,
            text_norm: LayerNorm::new(vb.pp("text_norm"), c)?,
            q: Linear::new(vb.pp("q"), c, c)?,
            k: Linear::new(vb.pp("k"), c, c)?,
            v: Linear::new(vb.pp("v"), c, c)?,
            out: Linear::new(vb.pp("out"), c, c)?,
            norm2: LayerNorm::new(vb.pp("norm2"), c)?,
            mlp: Mlp::new(vb.pp("mlp"), c, c * cfg.mlp_ratio)?,
            heads: cfg.heads,
        })
    }

    /// φ(q) for queries `(B, N, L, C)` as `(B·N·L, heads, d)` and φ(k), v for
    /// text rows `(N, C)` as `(heads, N, d)`.
    fn features(&self, x: &Tensor, text: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let c = x.dim(D::Minus1)?;
        let rows = x.elem_count() / c;
        let (h, d) = (self.heads, c / self.heads);
        let n = text.dim(0)?;
        let q = elu_plus_one(&self.q.forward(&self.norm.forward(x)?)?)?.reshape((rows, h, d))?;
        let t = self.text_norm.forward(text)?;
        let k = elu_plus_one(&self.k.forward(&t)?)?
            .reshape((n, h, d))?
            .transpose(0, 1)?
            .contiguous()?;
        let v = self.v.forward(&t)?.reshape((n, h, d))?.transpose(0, 1)?.contiguous()?;
        Ok((q, k, v))
    }

    /// Implicit attention weights of every query over the text keys,
    /// `(B·N·L, heads, N)`; used to audit the kernel normalization.
    pub fn attention_weights(&self, x: &Tensor, text: &TextFeature) -> Result<Tensor> {
        let rows = text.rows()?;
        let (q, k, _) = self.features(x, &rows)?;
        // (heads, rows, d) x (heads, d, N)
        let s = q.transpose(0, 1)?.contiguous()?.matmul(&k.transpose(1, 2)?.contiguous()?)?;
        let s = s.transpose(0, 1)?;
        Ok(s.broadcast_div(&s.sum_keepdim(D::Minus1)?)?)
    }

    /// Kernelized attention output before the output projection, `(B·N·L, C)`.
    pub fn attend(&self, x: &Tensor, text: &TextFeature) -> Result<Tensor> {
        let c = x.dim(D::Minus1)?;
        let rows = x.elem_count() / c;
        let (q, k, v) = self.features(x, &text.rows()?)?;
        // per head: KV = Σ_m φ(k_m) v_mᵀ (d x d), Z = Σ_m φ(k_m)
        let kt = k.transpose(1, 2)?.contiguous()?;
        let v64 = v.to_dtype(DType::F64)?;
        let kv = in_f64(&kt, |t| t.matmul(&v64))?;
        let z = in_f64(&k, |t| t.sum(1))?;
        let qh = q.transpose(0, 1)?.contiguous()?;
        let num = qh.matmul(&kv)?;
        let den = qh.broadcast_mul(&z.unsqueeze(1)?)?.sum_keepdim(D::Minus1)?;
        Ok(num.broadcast_div(&den)?.transpose(0, 1)?.reshape((rows, c))?)
    }

    /// `x`: (B, N, L, C); text table (C, N). Returns the same shape as `x`.
    pub fn forward(&self, x: &Tensor, text: &TextFeature) -> Result<Tensor> {
        let att = self.attend(x, text)?;
        let x = (x + self.out.forward(&att)?.reshape(x.dims())?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

pub struct Vlf {
    pub embed: Linear,
    pub proj: Linear,
    pub swin: [SwinBlock; 2],
    pub class_fusion: ClassFusion,
    pub reduce: Linear,
}

impl Vlf {
    pub fn new(mut vb: Vb, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        // a window covering the whole grid leaves nothing to shift
        let shift = if cfg.window >= cfg.height && cfg.window >= cfg.width {
            0
        } else {
            cfg.window / 2
        };
        Ok(Self {
            embed: Linear::new(vb.pp("embed"), 1, c)?,
            proj: Linear::new(vb.pp("proj"), 2 * c, c)?,
            swin: [
                SwinBlock::new(vb.pp("swin0"), cfg, 0)?,
                SwinBlock::new(vb.pp("swin1"), cfg, shift)?,
            ],
            class_fusion: ClassFusion::new(vb.pp("class_fusion"), cfg)?,
            reduce: Linear::new(vb.pp("reduce"), c, 1)?,
        })
    }

    /// Shared pointwise 1 -> C embedding of each class map: `(B·N_c, L, C)`.
    pub fn embed_correlation(&self, corr: &CorrelationMap) -> Result<Tensor> {
        let (b, n, h, w) = corr.values.dims4()?;
        self.embed.forward(&corr.values.reshape((b * n, h * w, 1))?)
    }

    /// Concatenates each class embedding with the refined image feature
    /// `(B, C, H, W)`, projects back to C and applies the two window blocks.
    pub fn spatial_fusion(&self, embedded: &Tensor, refined: &Tensor) -> Result<Tensor> {
        let (s, l, c) = embedded.dims3()?;
        let b = refined.dim(0)?;
        if s % b != 0 {
            return Err(EscError::Shape(format!(
                "{s} class streams cannot cover a batch of {b}"
            )));
        }
        let n = s / b;
        let img = refined
            .reshape((b, 1, c, l))?
            .transpose(2, 3)?
            .broadcast_as((b, n, l, c))?
            .reshape((s, l, c))?;
        let x = self.proj.forward(&Tensor::cat(&[embedded, &img], 2)?)?;
        let x = self.swin[0].forward(&x)?;
        self.swin[1].forward(&x)
    }

    pub fn class_fusion(&self, x: &Tensor, text: &TextFeature, batch: usize) -> Result<Tensor> {
        let (s, l, c) = x.dims3()?;
        let n = s / batch;
        if n != text.num_classes() {
            return Err(EscError::Shape(format!(
                "{n} class streams per image but {} text embeddings",
                text.num_classes()
            )));
        }
        Ok(self
            .class_fusion
            .forward(&x.reshape((batch, n, l, c))?, text)?
            .reshape((s, l, c))?)
    }

    /// Shared pointwise C -> 1 map back to a scalar correlation map.
    pub fn reduce_to_scalar(&self, embedded: &EmbeddedCorrelation) -> Result<CorrelationMap> {
        let values = self.reduce.forward(&embedded.values)?.reshape((
            embedded.batch,
            embedded.classes,
            embedded.height,
            embedded.width,
        ))?;
        Ok(CorrelationMap { values })
    }

    pub fn forward(
        &self,
        corr: &CorrelationMap,
        refined: &Tensor,
        text: &TextFeature,
    ) -> Result<(EmbeddedCorrelation, CorrelationMap)> {
        let (b, n, h, w) = corr.values.dims4()?;
        let e = self.embed_correlation(corr)?;
        let x = self.spatial_fusion(&e, refined)?;
        let values = self.class_fusion(&x, text, b)?;
        let embedded = EmbeddedCorrelation {
            values,
            batch: b,
            classes: n,
            height: h,
            width: w,
        };
        let scalar = self.reduce_to_scalar(&embedded)?;
        Ok((embedded, scalar))
    }
}
