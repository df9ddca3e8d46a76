//! Sparse and dense embeddings of pseudo prompts, in the style of a promptable
//! segmentation model's prompt encoder.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use super::{ClassPrompts, PseudoPrompts};
use crate::config::{ModelConfig, PromptKinds};
use crate::error::{EscError, Result};
use crate::nn::{Conv3x3, Init, LayerNorm2d, Pointwise, Vb};

const FOREGROUND: u32 = 0;
const NOT_A_POINT: u32 = 1;
const BOX_TOP_LEFT: u32 = 2;
const BOX_BOTTOM_RIGHT: u32 = 3;

/// Hidden widths of the mask-embedding convolutions.
const MASK_WIDTHS: [usize; 2] = [4, 16];

/// Sparse tokens `(S, T, C)` and dense grids `(S, C, H, W)` for `S` class streams.
#[derive(Clone, Debug)]
pub struct PromptEmbeddings {
    pub sparse: Tensor,
    pub dense: Tensor,
}

impl PromptEmbeddings {
    pub fn streams(&self) -> usize {
        self.sparse.dims()[0]
    }
}

pub struct PromptEncoder {
    gaussian: Tensor,
    /// point_fg, not_a_point, box_corner0, box_corner1 (indexed by token type).
    types: [Tensor; 4],
    no_mask: Tensor,
    conv0: Conv3x3,
    norm0: LayerNorm2d,
    conv1: Conv3x3,
    norm1: LayerNorm2d,
    proj: Pointwise,
    kinds: PromptKinds,
    slots: usize,
    channels: usize,
    height: usize,
    width: usize,
}

impl PromptEncoder {
    pub fn new(mut vb: Vb, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        if c % 2 != 0 {
            return Err(EscError::Config(format!(
                "positional encoding needs an even channel count, got {c}"
            )));
        }
        let gaussian = vb.buffer("pe_gaussian", &[2, c / 2], Init::Normal(1.0))?;
        let fg = vb.get("point_fg", &[c], Init::Normal(1.0))?;
        let nap = vb.get("not_a_point", &[c], Init::Normal(1.0))?;
        let tl = vb.get("box_corner0", &[c], Init::Normal(1.0))?;
        let br = vb.get("box_corner1", &[c], Init::Normal(1.0))?;
        let types = [fg, nap, tl, br];
        let no_mask = vb.get("no_mask", &[c], Init::Normal(1.0))?;
        let mut mvb = vb.pp("mask");
        Ok(Self {
            gaussian,
            types,
            no_mask,
            conv0: Conv3x3::new(mvb.pp("conv0"), 1, MASK_WIDTHS[0])?,
            norm0: LayerNorm2d::new(mvb.pp("norm0"), MASK_WIDTHS[0])?,
            conv1: Conv3x3::new(mvb.pp("conv1"), MASK_WIDTHS[0], MASK_WIDTHS[1])?,
            norm1: LayerNorm2d::new(mvb.pp("norm1"), MASK_WIDTHS[1])?,
            proj: Pointwise::new(mvb.pp("proj"), MASK_WIDTHS[1], c)?,
            kinds: cfg.prompts,
            slots: cfg.prompts_per_class,
            channels: c,
            height: cfg.height,
            width: cfg.width,
        })
    }

    pub fn kinds(&self) -> PromptKinds {
        self.kinds
    }

    /// Tokens per class stream for the configured prompt kinds.
    pub fn tokens_per_class(&self) -> usize {
        self.tokens_for(self.kinds)
    }

    fn tokens_for(&self, kinds: PromptKinds) -> usize {
        let mut t = 0;
        if kinds.points {
            t += self.slots;
        }
        if kinds.boxes {
            t += 2 * self.slots;
        }
        if t == 0 {
            t = self.slots;
        }
        t
    }

    fn device(&self) -> &Device {
        self.gaussian.device()
    }

    fn dtype(&self) -> DType {
        self.gaussian.dtype()
    }

    /// Normalized `[-1, 1]` coordinates of a grid cell centre, as (x, y).
    fn unit_coords(&self, row: usize, col: usize) -> [f64; 2] {
        [
            2.0 * (col as f64 + 0.5) / self.width as f64 - 1.0,
            2.0 * (row as f64 + 0.5) / self.height as f64 - 1.0,
        ]
    }

    /// Fourier features of a batch of (x, y) coordinates, shape (n, C).
    fn fourier(&self, coords: Vec<f64>) -> Result<Tensor> {
        let n = coords.len() / 2;
        let c = Tensor::from_vec(coords, (n, 2), self.device())?.to_dtype(self.dtype())?;
        let proj = (c.matmul(&self.gaussian)? * (2.0 * PI))?;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], 1)?)
    }

    /// Positional encoding of every grid cell in row-major order, shape (H·W, C).
    pub fn image_pe(&self) -> Result<Tensor> {
        let mut coords = Vec::with_capacity(self.height * self.width * 2);
        for r in 0..self.height {
            for c in 0..self.width {
                coords.extend(self.unit_coords(r, c));
            }
        }
        self.fourier(coords)
    }

    /// Closed-form positional encoding of one cell, evaluated on the host.
    pub fn point_pe_reference(&self, row: usize, col: usize) -> Result<Vec<f64>> {
        let g = self.gaussian.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let [x, y] = self.unit_coords(row, col);
        let half = self.channels / 2;
        let proj: Vec<f64> = (0..half)
            .map(|j| 2.0 * PI * (x * g[0][j] + y * g[1][j]))
            .collect();
        Ok(proj
            .iter()
            .map(|p| p.sin())
            .chain(proj.iter().map(|p| p.cos()))
            .collect())
    }

    fn check_cell(&self, (r, c): (usize, usize)) -> Result<()> {
        if r >= self.height || c >= self.width {
            return Err(EscError::Invalid(format!(
                "prompt coordinate ({r}, {c}) outside the {}x{} grid",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn class_tokens(
        &self,
        p: &ClassPrompts,
        kinds: PromptKinds,
        coords: &mut Vec<f64>,
        has_pe: &mut Vec<f64>,
        types: &mut Vec<u32>,
    ) -> Result<()> {
        let mut push = |cell: Option<(usize, usize)>, kind: u32| -> Result<()> {
            match cell {
                Some(cell) => {
                    self.check_cell(cell)?;
                    coords.extend(self.unit_coords(cell.0, cell.1));
                    has_pe.push(1.0);
                    types.push(kind);
                }
                None => {
                    coords.extend([0.0, 0.0]);
                    has_pe.push(0.0);
                    types.push(NOT_A_POINT);
                }
            }
            Ok(())
        };
        if p.points.len() != self.slots || p.boxes.len() != self.slots {
            return Err(EscError::Shape(format!(
                "class prompts carry {} point slots, encoder expects {}",
                p.points.len(),
                self.slots
            )));
        }
        if kinds.points {
            for pt in &p.points {
                push(*pt, FOREGROUND)?;
            }
        }
        if kinds.boxes {
            for bx in &p.boxes {
                push(bx.map(|b| (b.0, b.1)), BOX_TOP_LEFT)?;
                push(bx.map(|b| (b.2, b.3)), BOX_BOTTOM_RIGHT)?;
            }
        }
        if !kinds.points && !kinds.boxes {
            for _ in 0..self.slots {
                push(None, NOT_A_POINT)?;
            }
        }
        Ok(())
    }

    /// Dense embedding of single-channel masks `(S, 1, H, W)`.
    pub fn embed_masks(&self, masks: &Tensor) -> Result<Tensor> {
        let x = self.norm0.forward(&self.conv0.forward(masks)?)?.gelu_erf()?;
        let x = self.norm1.forward(&self.conv1.forward(&x)?)?.gelu_erf()?;
        self.proj.forward(&x)
    }

    pub fn encode(&self, prompts: &PseudoPrompts) -> Result<PromptEmbeddings> {
        self.encode_as(prompts, self.kinds)
    }

    /// Encodes with a different set of prompt kinds than the configured one;
    /// the parameters are shared by every combination.
    pub fn encode_as(&self, prompts: &PseudoPrompts, kinds: PromptKinds) -> Result<PromptEmbeddings> {
        if (prompts.height, prompts.width) != (self.height, self.width) {
            return Err(EscError::Shape(format!(
                "prompts on a {}x{} grid, encoder built for {}x{}",
                prompts.height, prompts.width, self.height, self.width
            )));
        }
        let s = prompts.classes.len();
        let t = self.tokens_for(kinds);
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut coords = Vec::with_capacity(s * t * 2);
        let mut has_pe = Vec::with_capacity(s * t);
        let mut types = Vec::with_capacity(s * t);
        for p in &prompts.classes {
            self.class_tokens(p, kinds, &mut coords, &mut has_pe, &mut types)?;
        }
        let pe = self.fourier(coords)?;
        let has_pe = Tensor::from_vec(has_pe, (s * t, 1), self.device())?.to_dtype(self.dtype())?;
        let ids = Tensor::from_vec(types, s * t, self.device())?;
        let sparse = pe
            .broadcast_mul(&has_pe)?
            .add(&Tensor::stack(&self.types, 0)?.index_select(&ids, 0)?)?
            .reshape((s, t, c))?;
        let dense = if kinds.masks {
            let mut union = Vec::with_capacity(s * h * w);
            for p in &prompts.classes {
                union.extend(p.mask_union().into_iter().map(|m| if m { 1.0 } else { 0.0 }));
            }
            let masks = Tensor::from_vec(union, (s, 1, h, w), self.device())?.to_dtype(self.dtype())?;
            self.embed_masks(&masks)?
        } else {
            self.no_mask
                .reshape((1, c, 1, 1))?
                .broadcast_as((s, c, h, w))?
                .contiguous()?
        };
        Ok(PromptEmbeddings { sparse, dense })
    }
}
