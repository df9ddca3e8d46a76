//! Two-way attention blocks that refine the image feature with prompt tokens,
//! run once per class and fused back into a single grid.

use std::path::Path;

use candle_core::Tensor;

use crate::archive::Archive;
use crate::config::ModelConfig;
use crate::error::{EscError, Result};
use crate::nn::{in_f64, Attention, LayerNorm, Linear, Mlp, ParamStore, Vb};
use crate::ppg::PromptEmbeddings;

/// Archive prefix of the j-th block's parameters.
pub fn block_prefix(j: usize) -> String {
    format!("block{j}")
}

/// Token self-attention, token-to-image attention, token MLP and
/// image-to-token attention, each pre-normalized with a residual.
pub struct TwoWayBlock {
    pub token_self: Attention,
    pub t2i: Attention,
    pub mlp: Mlp,
    pub i2t: Attention,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
    pub norm4: LayerNorm,
}

impl TwoWayBlock {
    pub fn new(mut vb: Vb, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let cross = c / cfg.attn_downsample.max(1);
        Ok(Self {
            token_self: Attention::new(vb.pp("token_self"), c, c, cfg.heads)?,
            t2i: Attention::new(vb.pp("t2i"), c, cross, cfg.heads)?,
            mlp: Mlp::new(vb.pp("mlp"), c, c * cfg.mlp_ratio)?,
            i2t: Attention::new(vb.pp("i2t"), c, cross, cfg.heads)?,
            norm1: LayerNorm::new(vb.pp("norm1"), c)?,
            norm2: LayerNorm::new(vb.pp("norm2"), c)?,
            norm3: LayerNorm::new(vb.pp("norm3"), c)?,
            norm4: LayerNorm::new(vb.pp("norm4"), c)?,
        })
    }

    /// `tokens` (S, T, C); `image` and `dense` (S, L, C); `image_pe` (L, C).
    /// The input tokens double as their own positional encoding.
    /// Returns refined tokens and image, same shapes.
    pub fn forward_flat(
        &self,
        tokens: &Tensor,
        image: &Tensor,
        dense: &Tensor,
        image_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let token_pe = tokens;
        let mut t = tokens.clone();
        let mut im = (image + dense)?;

        let a = self.norm1.forward(&t)?;
        t = (&t + self.token_self.forward(&a, &a, &a, None)?)?;

        let a = self.norm2.forward(&t)?;
        let keys = im.broadcast_add(image_pe)?;
        t = (&t + self.t2i.forward(&(a + token_pe)?, &keys, &im, None)?)?;

        t = (&t + self.mlp.forward(&self.norm3.forward(&t)?)?)?;

        let a = self.norm4.forward(&im)?;
        let q = a.broadcast_add(image_pe)?;
        im = (&im + self.i2t.forward(&q, &(&t + token_pe)?, &t, None)?)?;
        Ok((t, im))
    }

    /// Grid form: `image`, `dense` (S, C, H, W).
    pub fn forward(
        &self,
        tokens: &Tensor,
        image: &Tensor,
        dense: &Tensor,
        image_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (s, c, h, w) = image.dims4()?;
        let flat = |x: &Tensor| -> Result<Tensor> {
            Ok(x.reshape((s, c, h * w))?.transpose(1, 2)?.contiguous()?)
        };
        let (t, im) = self.forward_flat(tokens, &flat(image)?, &flat(dense)?, image_pe)?;
        let im = im.transpose(1, 2)?.reshape((s, c, h, w))?;
        Ok((t, im))
    }
}

/// One ESC block's prompt-driven refinement: a two-way block per class and a
/// shared 1x1 projection averaged over classes.
pub struct SamBlock {
    pub block: TwoWayBlock,
    pub fuse: Linear,
}

impl SamBlock {
    pub fn new(mut vb: Vb, cfg: &ModelConfig) -> Result<Self> {
        let block = TwoWayBlock::new(vb.reborrow(), cfg)?;
        let c = cfg.channels;
        Ok(Self {
            block,
            fuse: Linear::new(vb.pp("fuse"), c, c)?,
        })
    }

    /// Refined grid of every class stream, (B·N_c, L, C), before fusion.
    pub fn per_class(
        &self,
        grid: &Tensor,
        embeds: &PromptEmbeddings,
        image_pe: &Tensor,
    ) -> Result<Tensor> {
        let (b, c, h, w) = grid.dims4()?;
        let s = embeds.streams();
        if s == 0 || s % b != 0 {
            return Err(EscError::Shape(format!(
                "{s} prompt streams cannot cover a batch of {b} images"
            )));
        }
        let n = s / b;
        let l = h * w;
        let image = grid
            .reshape((b, 1, c, l))?
            .transpose(2, 3)?
            .broadcast_as((b, n, l, c))?
            .reshape((s, l, c))?;
        let dense = embeds.dense.reshape((s, c, l))?.transpose(1, 2)?.contiguous()?;
        let (_, im) = self
            .block
            .forward_flat(&embeds.sparse, &image, &dense, image_pe)?;
        Ok(im)
    }

    /// Fused refined feature (B, C, H, W): mean over classes of `fuse` applied
    /// to each class's refined grid.
    pub fn refine_vision(
        &self,
        grid: &Tensor,
        embeds: &PromptEmbeddings,
        image_pe: &Tensor,
    ) -> Result<Tensor> {
        let (b, c, h, w) = grid.dims4()?;
        let per = self.per_class(grid, embeds, image_pe)?;
        let s = per.dim(0)?;
        if s == 0 {
            return Err(EscError::Invalid("refine_vision needs at least one class".into()));
        }
        let n = s / b;
        let per = self.fuse.forward(&per)?.reshape((b, n, h * w, c))?;
        let fused = in_f64(&per, |t| t.mean(1))?;
        Ok(fused.transpose(1, 2)?.reshape((b, c, h, w))?)
    }
}

/// Loads the j-th block's parameters from a weight archive into `store`,
/// checking every tensor's presence and shape first.
pub fn load_block_weights(path: &Path, block_index: usize, store: &ParamStore) -> Result<usize> {
    let archive = Archive::load(path)?;
    let prefix = format!("{}.", block_prefix(block_index));
    store.load_archive(&archive, |n| n.starts_with(&prefix), path)
}

/// Saves the j-th block's parameters under their archive names.
pub fn save_block_weights(path: &Path, block_index: usize, store: &ParamStore) -> Result<()> {
    let prefix = format!("{}.", block_prefix(block_index));
    store.to_archive(|n| n.starts_with(&prefix))?.save(path)
}

/// Output projections whose zeroing turns a residual block into the identity.
pub fn is_residual_output(name: &str) -> bool {
    [".out.weight", ".out.bias", ".mlp.1.weight", ".mlp.1.bias"]
        .iter()
        .any(|s| name.ends_with(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamGroup, ParamStore};
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn build(dtype: DType, seed: u64) -> (ParamStore, SamBlock) {
        let mut store = ParamStore::new(seed, dtype);
        let sb = SamBlock::new(Vb::root(&mut store, ParamGroup::Sam).pp(block_prefix(0)), &cfg()).unwrap();
        (store, sb)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        flat(a)
            .iter()
            .zip(flat(b))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zeroed_outputs_give_the_residual_identity() {
        let (store, sb) = build(DType::F32, 1);
        assert_eq!(store.zero_where(is_residual_output).unwrap(), 8);
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tokens = random(&[3, 2, c.channels], &mut rng, DType::F32);
        let image = random(&[3, c.channels, c.height, c.width], &mut rng, DType::F32);
        let dense = random(&[3, c.channels, c.height, c.width], &mut rng, DType::F32);
        let pe = random(&[c.grid_len(), c.channels], &mut rng, DType::F32);
        let (t, im) = sb.block.forward(&tokens, &image, &dense, &pe).unwrap();
        assert_eq!(flat(&t), flat(&tokens));
        assert_eq!(flat(&im), flat(&(&image + &dense).unwrap()));
    }

    #[test]
    fn token_permutation_is_equivariant() {
        let (_, sb) = build(DType::F64, 2);
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = random(&[1, 4, c.channels], &mut rng, DType::F64);
        let image = random(&[1, c.channels, c.height, c.width], &mut rng, DType::F64);
        let dense = random(&[1, c.channels, c.height, c.width], &mut rng, DType::F64);
        let pe = random(&[c.grid_len(), c.channels], &mut rng, DType::F64);
        let perm = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
        let (t, im) = sb.block.forward(&tokens, &image, &dense, &pe).unwrap();
        let (tp, imp) = sb
            .block
            .forward(&tokens.index_select(&perm, 1).unwrap(), &image, &dense, &pe)
            .unwrap();
        assert!(max_diff(&tp, &t.index_select(&perm, 1).unwrap()) < 1e-12);
        assert!(max_diff(&imp, &im) < 1e-12);
    }

    #[test]
    fn single_token_single_position_closed_form() {
        let (_, sb) = build(DType::F64, 3);
        let c = cfg().channels;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(&[1, 1, c], &mut rng, DType::F64);
        let k = random(&[1, 1, c], &mut rng, DType::F64);
        let v = random(&[1, 1, c], &mut rng, DType::F64);
        for attn in [&sb.block.token_self, &sb.block.t2i, &sb.block.i2t] {
            let w = attn.weights(&q, &k, None).unwrap();
            assert!(flat(&w).iter().all(|&x| x == 1.0));
            let got = attn.forward(&q, &k, &v, None).unwrap();
            // one key: output = out(v_proj(v)), evaluated by hand
            let wv = attn.v.weight.to_vec2::<f64>().unwrap();
            let bv = attn.v.bias.to_vec1::<f64>().unwrap();
            let wo = attn.out.weight.to_vec2::<f64>().unwrap();
            let bo = attn.out.bias.to_vec1::<f64>().unwrap();
            let x = flat(&v);
            let hidden: Vec<f64> = (0..wv.len())
                .map(|i| bv[i] + (0..c).map(|j| wv[i][j] * x[j]).sum::<f64>())
                .collect();
            let expect: Vec<f64> = (0..c)
                .map(|i| bo[i] + hidden.iter().enumerate().map(|(j, h)| wo[i][j] * h).sum::<f64>())
                .collect();
            for (g, e) in flat(&got).iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    fn embeds(classes: usize, rng: &mut ChaCha8Rng) -> PromptEmbeddings {
        let c = cfg();
        PromptEmbeddings {
            sparse: random(&[classes, 2, c.channels], rng, DType::F64),
            dense: random(&[classes, c.channels, c.height, c.width], rng, DType::F64),
        }
    }

    #[test]
    fn one_class_is_the_projected_refinement() {
        let (_, sb) = build(DType::F64, 4);
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = random(&[1, c.channels, c.height, c.width], &mut rng, DType::F64);
        let pe = random(&[c.grid_len(), c.channels], &mut rng, DType::F64);
        let e = embeds(1, &mut rng);
        let fused = sb.refine_vision(&grid, &e, &pe).unwrap();
        let per = sb.per_class(&grid, &e, &pe).unwrap();
        let direct = sb
            .fuse
            .forward(&per)
            .unwrap()
            .transpose(1, 2)
            .unwrap()
            .reshape((1, c.channels, c.height, c.width))
            .unwrap();
        assert!(max_diff(&fused, &direct) < 1e-12);
        // duplicating the class changes nothing
        let twice = PromptEmbeddings {
            sparse: Tensor::cat(&[&e.sparse, &e.sparse], 0).unwrap(),
            dense: Tensor::cat(&[&e.dense, &e.dense], 0).unwrap(),
        };
        assert!(max_diff(&sb.refine_vision(&grid, &twice, &pe).unwrap(), &fused) < 1e-12);
    }

    #[test]
    fn class_order_does_not_matter() {
        let (_, sb) = build(DType::F64, 5);
        let c = cfg();
        for trial in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + trial);
            let n = rng.gen_range(2..6);
            let grid = random(&[2, c.channels, c.height, c.width], &mut rng, DType::F64);
            let pe = random(&[c.grid_len(), c.channels], &mut rng, DType::F64);
            let e = embeds(2 * n, &mut rng);
            // reverse the class order inside each image
            let order: Vec<u32> = (0..2)
                .flat_map(|b| (0..n).rev().map(move |k| (b * n + k) as u32))
                .collect();
            let idx = Tensor::new(order.as_slice(), &Device::Cpu).unwrap();
            let shuffled = PromptEmbeddings {
                sparse: e.sparse.index_select(&idx, 0).unwrap(),
                dense: e.dense.index_select(&idx, 0).unwrap(),
            };
            let a = sb.refine_vision(&grid, &e, &pe).unwrap();
            let b = sb.refine_vision(&grid, &shuffled, &pe).unwrap();
            assert!(max_diff(&a, &b) < 1e-6);
        }
    }

    #[test]
    fn archive_round_trip_and_offenders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("block.esct");
        let (src, sa) = build(DType::F32, 6);
        save_block_weights(&path, 0, &src).unwrap();
        let (dst, sb) = build(DType::F32, 7);
        load_block_weights(&path, 0, &dst).unwrap();
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = random(&[1, c.channels, c.height, c.width], &mut rng, DType::F32);
        let pe = random(&[c.grid_len(), c.channels], &mut rng, DType::F32);
        let e = PromptEmbeddings {
            sparse: random(&[2, 2, c.channels], &mut rng, DType::F32),
            dense: random(&[2, c.channels, c.height, c.width], &mut rng, DType::F32),
        };
        let a = sa.refine_vision(&grid, &e, &pe).unwrap();
        let b = sb.refine_vision(&grid, &e, &pe).unwrap();
        let bits = |t: &Tensor| -> Vec<u32> {
            t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|x| x.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));

        let mut archive = Archive::load(&path).unwrap();
        let t = archive.tensors.iter_mut().find(|t| t.name == "block0.t2i.q.weight").unwrap();
        t.name = "block0.t2i.query.weight".into();
        archive.save(&path).unwrap();
        let err = load_block_weights(&path, 0, &dst).unwrap_err().to_string();
        assert!(err.contains("block0.t2i.q.weight"), "{err}");

        let mut archive = src.to_archive(|n| n.starts_with("block0.")).unwrap();
        let t = archive.tensors.iter_mut().find(|t| t.name == "block0.t2i.q.weight").unwrap();
        t.shape.reverse();
        archive.save(&path).unwrap();
        let err = load_block_weights(&path, 0, &dst).unwrap_err().to_string();
        assert!(err.contains("shape") && err.contains("block0.t2i.q.weight"), "{err}");
    }
}
