//! Toy stand-ins for the vision and language encoders, plus the fixture
//! format for precomputed embeddings.

use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor};

use crate::archive::{Archive, NamedTensor};
use crate::config::ModelConfig;
use crate::error::{ArchiveError, EscError, Result};
use crate::nn::{Conv3x3, Init, ParamStore, PatchConv, Pointwise, Vb};

/// Image features: the (B, C, H, W) grid plus encoder skips ordered
/// `[2x resolution, 4x resolution]`, the order the decoder consumes them.
#[derive(Clone, Debug)]
pub struct VisionFeature {
    pub grid: Tensor,
    pub skips: Vec<Tensor>,
}

impl VisionFeature {
    pub fn batch(&self) -> usize {
        self.grid.dims()[0]
    }

    /// Features of one image of the batch, keeping a unit batch axis.
    pub fn select(&self, b: usize) -> Result<Self> {
        Ok(Self {
            grid: self.grid.narrow(0, b, 1)?,
            skips: self
                .skips
                .iter()
                .map(|s| s.narrow(0, b, 1))
                .collect::<candle_core::Result<_>>()?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            grid: self.grid.detach(),
            skips: self.skips.iter().map(|s| s.detach()).collect(),
        }
    }
}

/// Text features, shape (C, N_c): one column per candidate class.
#[derive(Clone, Debug)]
pub struct TextFeature {
    pub table: Tensor,
}

impl TextFeature {
    pub fn num_classes(&self) -> usize {
        self.table.dims()[1]
    }

    /// Class embeddings as rows, shape (N_c, C).
    pub fn rows(&self) -> Result<Tensor> {
        Ok(self.table.t()?.contiguous()?)
    }
}

enum Stem {
    Conv(Conv3x3),
    Patch(PatchConv),
}

/// Strided convolutional stack: stem at 4H, two stride-2 stages down to H,
/// then a 1x1 projection to C channels.
pub struct VisionEncoder {
    stem: Stem,
    down1: PatchConv,
    conv1: Conv3x3,
    down2: PatchConv,
    conv2: Conv3x3,
    proj: Pointwise,
    image_size: usize,
    channels: usize,
}

impl VisionEncoder {
    pub fn new(mut vb: Vb, cfg: &ModelConfig) -> Result<Self> {
        let [c0, c1, c2] = cfg.encoder_widths;
        let s = cfg.stem_stride();
        let stem = if s == 1 {
            Stem::Conv(Conv3x3::new(vb.pp("stem"), 3, c0)?)
        } else {
            Stem::Patch(PatchConv::new(vb.pp("stem"), 3, c0, s)?)
        };
        Ok(Self {
            stem,
            down1: PatchConv::new(vb.pp("down1"), c0, c1, 2)?,
            conv1: Conv3x3::new(vb.pp("conv1"), c1, c1)?,
            down2: PatchConv::new(vb.pp("down2"), c1, c2, 2)?,
            conv2: Conv3x3::new(vb.pp("conv2"), c2, c2)?,
            proj: Pointwise::new(vb.pp("proj"), c2, cfg.channels)?,
            image_size: cfg.image_size,
            channels: cfg.channels,
        })
    }

    /// Encodes a batch of images (B, 3, S, S) with entries in [0, 1].
    pub fn forward(&self, images: &Tensor) -> Result<VisionFeature> {
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != self.image_size || dims[3] != self.image_size
        {
            return Err(EscError::Shape(format!(
                "expected images of shape (B, 3, {s}, {s}), got {dims:?}",
                s = self.image_size
            )));
        }
        let x0 = match &self.stem {
            Stem::Conv(c) => c.forward(images)?,
            Stem::Patch(p) => p.forward(images)?,
        }
        .gelu_erf()?;
        let x1 = self.down1.forward(&x0)?.gelu_erf()?;
        let x1 = self.conv1.forward(&x1)?.gelu_erf()?;
        let x2 = self.down2.forward(&x1)?.gelu_erf()?;
        let x2 = self.conv2.forward(&x2)?.gelu_erf()?;
        let grid = self.proj.forward(&x2)?;
        debug_assert_eq!(grid.dims()[1], self.channels);
        Ok(VisionFeature {
            grid,
            skips: vec![x1, x0],
        })
    }

    /// Diagnostic mode: makes every spatial kernel symmetric under a
    /// horizontal flip, which turns the encoder into a flip-equivariant map.
    pub fn symmetrize_horizontal(&self, store: &ParamStore, prefix: &str) -> Result<()> {
        for name in ["stem", "down1", "conv1", "down2", "conv2"] {
            let full = format!("{prefix}.{name}.weight");
            let p = store
                .get(&full)
                .ok_or_else(|| EscError::Invalid(format!("missing parameter {full}")))?;
            let w = p.var.as_tensor();
            let k = w.dim(3)?;
            let rev: Vec<u32> = (0..k as u32).rev().collect();
            let idx = Tensor::new(rev.as_slice(), w.device())?;
            let flipped = w.index_select(&idx, 3)?;
            let sym = ((w + flipped)? * 0.5)?;
            store.set(&full, &sym)?;
        }
        Ok(())
    }
}

/// Learned embedding table standing in for a text encoder.
pub struct TextEncoder {
    table: Tensor,
}

impl TextEncoder {
    pub fn new(mut vb: Vb, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            table: vb.get(
                "embedding",
                &[cfg.n_classes_train, cfg.channels],
                Init::Normal(1.0),
            )?,
        })
    }

    pub fn vocabulary(&self) -> usize {
        self.table.dims()[0]
    }

    pub fn forward(&self, class_ids: &[usize]) -> Result<TextFeature> {
        if class_ids.is_empty() {
            return Err(EscError::Invalid("class list is empty".into()));
        }
        let n = self.vocabulary();
        if let Some(&id) = class_ids.iter().find(|&&id| id >= n) {
            return Err(EscError::UnknownClass { id, table: n });
        }
        let idx: Vec<u32> = class_ids.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), self.table.device())?;
        let rows = self.table.index_select(&idx, 0)?;
        Ok(TextFeature { table: rows.t()? })
    }

    pub fn row(&self, id: usize) -> Result<Tensor> {
        Ok(self.table.i(id)?)
    }
}

pub const FIXTURE_NAMES: [&str; 4] = ["F_v", "skip0", "skip1", "F_l"];

/// Writes one image's features and a text table as a named-tensor archive
/// (`F_v`: C×H×W, `skip0`: 2x grid, `skip1`: 4x grid, `F_l`: C×N_c).
pub fn save_fixture(path: &Path, vision: &VisionFeature, text: &TextFeature) -> Result<()> {
    let v = vision.select(0)?;
    let mut a = Archive::new();
    a.push(NamedTensor::from_tensor("F_v", &v.grid.squeeze(0)?)?);
    a.push(NamedTensor::from_tensor("skip0", &v.skips[0].squeeze(0)?)?);
    a.push(NamedTensor::from_tensor("skip1", &v.skips[1].squeeze(0)?)?);
    a.push(NamedTensor::from_tensor("F_l", &text.table)?);
    a.save(path)
}

/// Loads precomputed features, validating shapes against `cfg`.
pub fn load_fixture(
    path: &Path,
    cfg: &ModelConfig,
    dtype: DType,
) -> Result<(VisionFeature, TextFeature)> {
    let archive = Archive::load(path)?;
    let missing: Vec<String> = FIXTURE_NAMES
        .iter()
        .filter(|n| archive.get(n).is_none())
        .map(|n| n.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ArchiveError::MissingTensor {
            path: path.to_path_buf(),
            names: missing,
        }
        .into());
    }
    let n_c = archive.get("F_l").unwrap().shape.get(1).copied().unwrap_or(0);
    let [c0, c1, _] = cfg.encoder_widths;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let expected = vec![
        ("F_v".to_string(), vec![c, h, w]),
        ("skip0".to_string(), vec![c1, 2 * h, 2 * w]),
        ("skip1".to_string(), vec![c0, 4 * h, 4 * w]),
        ("F_l".to_string(), vec![c, n_c.max(1)]),
    ];
    archive.check_schema(&expected, path)?;
    let dev = Device::Cpu;
    let get = |n: &str| -> Result<Tensor> {
        archive.get(n).unwrap().to_tensor(dtype, &dev)
    };
    Ok((
        VisionFeature {
            grid: get("F_v")?.unsqueeze(0)?,
            skips: vec![get("skip0")?.unsqueeze(0)?, get("skip1")?.unsqueeze(0)?],
        },
        TextFeature { table: get("F_l")? },
    ))
}
