//! Parameter storage and the small set of layers the model is built from.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, NamedTensor};
use crate::error::{ArchiveError, EscError, Result};
use crate::rng::substream;

/// Optimizer group a parameter belongs to. Encoders and the two-way blocks
/// (with their prompt encoder) are the "pretrained" parts of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Sam,
    Head,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Owns every parameter of a model under a dotted name.
///
/// Initial values are drawn from a per-name substream of the store seed, so
/// two models built from the same seed share values for every name they
/// have in common.
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            device: Device::Cpu,
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn create(
        &mut self,
        name: String,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
        trainable: bool,
    ) -> Result<Tensor> {
        if self.params.contains_key(&name) {
            return Err(EscError::Invalid(format!("parameter `{name}` registered twice")));
        }
        let n: usize = shape.iter().product();
        let mut rng = substream(self.seed, &format!("init/{name}"));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| EscError::Invalid(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(
            name,
            Param {
                var,
                group,
                trainable,
            },
        );
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable variables of one optimizer group.
    pub fn vars(&self, group: ParamGroup) -> Vec<Var> {
        self.params
            .values()
            .filter(|p| p.trainable && p.group == group)
            .map(|p| p.var.clone())
            .collect()
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.clone(), p.var.clone()))
            .collect()
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.var.elem_count())
            .sum()
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| EscError::Invalid(format!("unknown parameter `{name}`")))?;
        let value = value.to_dtype(self.dtype)?;
        if value.dims() != p.var.dims() {
            return Err(EscError::Shape(format!(
                "parameter `{name}`: expected {:?}, got {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value)?;
        Ok(())
    }

    /// Sets every parameter whose name satisfies `pred` to zero.
    pub fn zero_where(&self, pred: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for (name, p) in &self.params {
            if pred(name) {
                p.var.set(&p.var.zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn to_archive(&self, filter: impl Fn(&str) -> bool) -> Result<Archive> {
        let mut archive = Archive::new();
        for (name, p) in &self.params {
            if filter(name) {
                archive.push(NamedTensor::from_tensor(name.clone(), p.var.as_tensor())?);
            }
        }
        Ok(archive)
    }

    /// Copies every selected parameter from `archive`, after checking that all
    /// of them are present with the right shapes.
    pub fn load_archive(
        &self,
        archive: &Archive,
        filter: impl Fn(&str) -> bool,
        path: &Path,
    ) -> Result<usize> {
        let expected: Vec<(String, Vec<usize>)> = self
            .params
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(k, p)| (k.clone(), p.var.dims().to_vec()))
            .collect();
        archive.check_schema(&expected, path)?;
        for (name, _) in &expected {
            let t = archive.get(name).expect("checked above");
            self.set(name, &t.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(expected.len())
    }

    /// Rejects archive tensors that match `filter` but are unknown to the store.
    pub fn check_no_extras(
        &self,
        archive: &Archive,
        filter: impl Fn(&str) -> bool,
        path: &Path,
    ) -> Result<()> {
        let extras: Vec<String> = archive
            .names()
            .filter(|n| filter(n) && !self.params.contains_key(*n))
            .map(str::to_string)
            .collect();
        if extras.is_empty() {
            Ok(())
        } else {
            Err(ArchiveError::UnexpectedTensor {
                path: path.to_path_buf(),
                names: extras,
            }
            .into())
        }
    }

    /// Flat f32 copy of every parameter, for equality checks.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.params {
            out.insert(
                name.clone(),
                p.var
                    .as_tensor()
                    .to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1::<f32>()?,
            );
        }
        Ok(out)
    }
}

/// Scoped view into a [`ParamStore`] used while constructing layers.
pub struct Vb<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    group: ParamGroup,
}

impl<'a> Vb<'a> {
    pub fn root(store: &'a mut ParamStore, group: ParamGroup) -> Self {
        Self {
            store,
            prefix: String::new(),
            group,
        }
    }

    pub fn pp(&mut self, name: impl Display) -> Vb<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Vb {
            store: &mut *self.store,
            prefix,
            group: self.group,
        }
    }

    /// Same scope, shorter borrow.
    pub fn reborrow(&mut self) -> Vb<'_> {
        let group = self.group;
        self.with_group(group)
    }

    pub fn with_group(&mut self, group: ParamGroup) -> Vb<'_> {
        Vb {
            store: &mut *self.store,
            prefix: self.prefix.clone(),
            group,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full(name);
        self.store.create(full, shape, init, self.group, true)
    }

    /// Registers a fixed (non-trainable) tensor that is still saved and loaded.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full(name);
        self.store.create(full, shape, init, self.group, false)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

/// Affine map over the last dimension; weight stored as (out, in).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(mut vb: Vb, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: vb.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: vb.get("bias", &[out_dim], Init::Zeros)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / in_dim;
        let y = x
            .reshape((rows, in_dim))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        *dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(dims)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(mut vb: Vb, dim: usize) -> Result<Self> {
        Ok(Self {
            scale: vb.get("scale", &[dim], Init::Ones)?,
            shift: vb.get("shift", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

/// Layer normalization over the channel axis of a (B, C, H, W) tensor.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub scale: Tensor,
    pub shift: Tensor,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(mut vb: Vb, dim: usize) -> Result<Self> {
        Ok(Self {
            scale: vb.get("scale", &[dim], Init::Ones)?,
            shift: vb.get("shift", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.scale.dims()[0];
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.shift.reshape((1, c, 1, 1))?)?)
    }
}

/// Two-layer perceptron `mlp.0 -> GELU -> mlp.1`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc0: Linear,
    pub fc1: Linear,
}

impl Mlp {
    pub fn new(mut vb: Vb, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc0: Linear::new(vb.pp("0"), dim, hidden)?,
            fc1: Linear::new(vb.pp("1"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc1.forward(&self.fc0.forward(x)?.gelu_erf()?)
    }
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Multi-head scaled dot-product attention with separate q/k/v projections
/// into an internal width (possibly narrower than the embedding).
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    heads: usize,
    internal: usize,
}

impl Attention {
    pub fn new(mut vb: Vb, embed: usize, internal: usize, heads: usize) -> Result<Self> {
        if internal % heads != 0 {
            return Err(EscError::Config(format!(
                "attention width {internal} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(vb.pp("q"), embed, internal)?,
            k: Linear::new(vb.pp("k"), embed, internal)?,
            v: Linear::new(vb.pp("v"), embed, internal)?,
            out: Linear::new(vb.pp("out"), internal, embed)?,
            heads,
            internal,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (s, l, _) = x.dims3()?;
        let d = self.internal / self.heads;
        Ok(x.reshape((s, l, self.heads, d))?.transpose(1, 2)?.contiguous()?)
    }

    /// Attention weights, shape (S, heads, Lq, Lk). `mask` is an additive
    /// bias of shape (G, Lq, Lk) applied to consecutive groups of G streams.
    pub fn weights(&self, q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let qh = self.split_heads(&self.q.forward(q)?)?;
        let kh = self.split_heads(&self.k.forward(k)?)?;
        let d = (self.internal / self.heads) as f64;
        let mut scores = (qh.matmul(&kh.t()?)? * (1.0 / d.sqrt()))?;
        if let Some(mask) = mask {
            let (s, h, lq, lk) = scores.dims4()?;
            let g = mask.dim(0)?;
            scores = scores
                .reshape((s / g, g, h, lq, lk))?
                .broadcast_add(&mask.reshape((1, g, 1, lq, lk))?)?
                .reshape((s, h, lq, lk))?;
        }
        softmax_last(&scores)
    }

    pub fn forward(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (s, lq, _) = q.dims3()?;
        let p = self.weights(q, k, mask)?;
        let vh = self.split_heads(&self.v.forward(v)?)?;
        let o = p
            .matmul(&vh)?
            .transpose(1, 2)?
            .reshape((s, lq, self.internal))?;
        self.out.forward(&o)
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3x3 {
    pub fn new(mut vb: Vb, in_ch: usize, out_ch: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * 9) as f64).sqrt();
        Ok(Self {
            weight: vb.get("weight", &[out_ch, in_ch, 3, 3], Init::Uniform(bound))?,
            bias: vb.get("bias", &[out_ch], Init::Uniform(bound))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dims()[0];
        Ok(x
            .conv2d(&self.weight, 1, 1, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// 1x1 convolution over (B, C, H, W); weight stored as (out, in).
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Pointwise {
    pub fn new(mut vb: Vb, in_ch: usize, out_ch: usize) -> Result<Self> {
        let bound = 1.0 / (in_ch as f64).sqrt();
        Ok(Self {
            weight: vb.get("weight", &[out_ch, in_ch], Init::Uniform(bound))?,
            bias: vb.get("bias", &[out_ch], Init::Uniform(bound))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let o = self.weight.dims()[0];
        let y = self
            .weight
            .broadcast_left(b)?
            .contiguous()?
            .matmul(&x.reshape((b, c, h * w))?)?
            .broadcast_add(&self.bias.reshape((1, o, 1))?)?;
        Ok(y.reshape((b, o, h, w))?)
    }
}

/// Non-overlapping k x k convolution with stride k.
#[derive(Clone, Debug)]
pub struct PatchConv {
    pub weight: Tensor,
    pub bias: Tensor,
    k: usize,
}

impl PatchConv {
    pub fn new(mut vb: Vb, in_ch: usize, out_ch: usize, k: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        Ok(Self {
            weight: vb.get("weight", &[out_ch, in_ch, k, k], Init::Uniform(bound))?,
            bias: vb.get("bias", &[out_ch], Init::Uniform(bound))?,
            k,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let k = self.k;
        if h % k != 0 || w % k != 0 {
            return Err(EscError::Shape(format!(
                "patch conv of size {k} cannot tile {h}x{w}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let o = self.bias.dims()[0];
        let patches = x
            .reshape((b, c, ho, k, wo, k))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b * ho * wo, c * k * k))?;
        let wm = self.weight.reshape((o, c * k * k))?;
        let y = patches.matmul(&wm.t()?)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, ho, wo, o))?.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

/// Interpolation matrix (n_out, n_in) of half-pixel-centred linear resampling
/// (the `align_corners = false` convention).
pub fn interp_matrix(n_in: usize, n_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let lambda = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - lambda;
        m[o * n_in + i1] += lambda;
    }
    Ok(Tensor::from_vec(m, (n_out, n_in), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of a (B, C, H, W) tensor, built from two matrix products
/// so it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let uh = interp_matrix(h, out_h, x.dtype(), x.device())?;
    let uw = interp_matrix(w, out_w, x.dtype(), x.device())?;
    let rows = x.reshape((b * c * h, w))?.matmul(&uw.t()?)?;
    let y = uh
        .broadcast_left(b * c)?
        .contiguous()?
        .matmul(&rows.reshape((b * c, h, out_w))?)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// Runs `f` on `x` widened to f64 and rounds the result back to `x`'s dtype.
/// Reductions over the class axis go through here so that single-precision
/// results do not depend on the class order.
pub fn in_f64(x: &Tensor, f: impl FnOnce(&Tensor) -> candle_core::Result<Tensor>) -> Result<Tensor> {
    let dtype = x.dtype();
    Ok(f(&x.to_dtype(DType::F64)?)?.to_dtype(dtype)?)
}

/// Kernel feature map of linear attention: elu(x) + 1.
pub fn elu_plus_one(x: &Tensor) -> Result<Tensor> {
    Ok((x.elu(1.0)? + 1.0)?)
}
