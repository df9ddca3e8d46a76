//! Cosine correlation between image positions and class embeddings.

use candle_core::{DType, Tensor};

use crate::encoders::{TextFeature, VisionFeature};
use crate::error::{EscError, Result};

/// Positions whose feature norm falls below this are treated as degenerate
/// and get a correlation of 0 with every class.
pub const NORM_FLOOR: f64 = 1e-12;

/// Per-class spatial similarity map, shape (B, N_c, H, W).
#[derive(Clone, Debug)]
pub struct CorrelationMap {
    pub values: Tensor,
}

impl CorrelationMap {
    pub fn class_count(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }
}

/// Unit-normalizes `x` along `dim`; vectors with norm below [`NORM_FLOOR`]
/// become exactly zero.
fn normalize(x: &Tensor, dim: usize) -> Result<Tensor> {
    let sumsq = x.sqr()?.sum_keepdim(dim)?;
    let keep = sumsq.ge(NORM_FLOOR * NORM_FLOOR)?.to_dtype(x.dtype())?;
    let norm = sumsq.maximum(NORM_FLOOR * NORM_FLOOR)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?.broadcast_mul(&keep)?)
}

pub fn correlate(vision: &VisionFeature, text: &TextFeature) -> Result<CorrelationMap> {
    let (b, c, h, w) = vision.grid.dims4()?;
    let (tc, n) = text.table.dims2()?;
    if tc != c {
        return Err(EscError::Shape(format!(
            "vision features have {c} channels but text features have {tc}"
        )));
    }
    let norms = text
        .table
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(0)?
        .to_vec1::<f64>()?;
    if let Some(j) = norms.iter().position(|&s| s.sqrt() < NORM_FLOOR) {
        return Err(EscError::Invalid(format!(
            "text feature column {j} has zero norm"
        )));
    }
    let v = normalize(&vision.grid.reshape((b, c, h * w))?, 1)?;
    let t = normalize(&text.table, 0)?;
    let corr = t.t()?.broadcast_left(b)?.contiguous()?.matmul(&v)?;
    Ok(CorrelationMap {
        values: corr.reshape((b, n, h, w))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn vision(data: Vec<f64>, c: usize, h: usize, w: usize) -> VisionFeature {
        VisionFeature {
            grid: Tensor::from_vec(data, (1, c, h, w), &Device::Cpu).unwrap(),
            skips: vec![],
        }
    }

    fn text(data: Vec<f64>, c: usize, n: usize) -> TextFeature {
        TextFeature {
            table: Tensor::from_vec(data, (c, n), &Device::Cpu).unwrap(),
        }
    }

    fn values(m: &CorrelationMap) -> Vec<f64> {
        m.values.flatten_all().unwrap().to_vec1().unwrap()
    }

    /// Direct dot/norm evaluation, independent of the tensor path.
    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < NORM_FLOOR {
            0.0
        } else {
            dot / (na * nb)
        }
    }

    #[test]
    fn three_four_example_is_point_six() {
        let c = 4;
        let v = vision(vec![3.0, 4.0, 0.0, 0.0], c, 1, 1);
        let t = text(vec![1.0, 0.0, 0.0, 0.0], c, 1);
        let out = values(&correlate(&v, &t).unwrap());
        assert_eq!(out, vec![0.6]);
    }

    #[test]
    fn self_similarity_and_orthogonality() {
        // every position equals class 0, orthogonal to class 1
        let (c, h, w) = (3, 2, 2);
        let mut data = vec![0.0; c * h * w];
        for i in 0..h * w {
            data[i] = 2.0; // channel 0
            data[h * w + i] = -1.0; // channel 1
        }
        let v = vision(data, c, h, w);
        // columns: class0 = (2,-1,0), class1 = (0,0,5)
        let t = text(vec![2.0, 0.0, -1.0, 0.0, 0.0, 5.0], c, 2);
        let out = values(&correlate(&v, &t).unwrap());
        for i in 0..4 {
            assert!((out[i] - 1.0).abs() < 1e-12);
            assert_eq!(out[4 + i], 0.0);
        }
    }

    #[test]
    fn degenerate_position_is_zero_filled() {
        let v = vision(vec![0.0, 1.0, 0.0, 1.0], 2, 1, 2);
        let t = text(vec![1.0, 1.0], 2, 1);
        let out = values(&correlate(&v, &t).unwrap());
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_text_column_is_rejected() {
        let v = vision(vec![1.0, 1.0], 2, 1, 1);
        let t = text(vec![0.0, 1.0, 0.0, 1.0], 2, 2);
        assert!(correlate(&v, &t).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let v = vision(vec![1.0, 1.0], 2, 1, 1);
        let t = text(vec![1.0, 1.0, 1.0], 3, 1);
        assert!(matches!(correlate(&v, &t), Err(EscError::Shape(_))));
    }

    #[test]
    fn batched_images_match_single_images() {
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let both = VisionFeature {
            grid: Tensor::from_vec(data.clone(), (2, 3, 2, 2), &Device::Cpu).unwrap(),
            skips: vec![],
        };
        let t = text(vec![1.0, 0.5, -2.0, 0.0, 1.0, 3.0], 3, 2);
        let out = values(&correlate(&both, &t).unwrap());
        for b in 0..2 {
            let one = vision(data[b * 12..(b + 1) * 12].to_vec(), 3, 2, 2);
            assert_eq!(values(&correlate(&one, &t).unwrap()), out[b * 8..(b + 1) * 8]);
        }
    }

    proptest! {
        #[test]
        fn matches_direct_cosine_and_invariants(
            fv in proptest::collection::vec(-3.0f64..3.0, 4 * 6),
            fl in proptest::collection::vec(-3.0f64..3.0, 4 * 3),
            a in 0.01f64..50.0,
            d in 0.01f64..50.0,
        ) {
            let (c, h, w, n) = (4, 2, 3, 3);
            prop_assume!((0..n).all(|j| (0..c).map(|k| fl[k * n + j].powi(2)).sum::<f64>() > 1e-6));
            let v = vision(fv.clone(), c, h, w);
            let t = text(fl.clone(), c, n);
            let out = values(&correlate(&v, &t).unwrap());
            for j in 0..n {
                let col: Vec<f64> = (0..c).map(|k| fl[k * n + j]).collect();
                for i in 0..h * w {
                    let px: Vec<f64> = (0..c).map(|k| fv[k * h * w + i]).collect();
                    let got = out[j * h * w + i];
                    prop_assert!((got - cosine(&px, &col)).abs() < 1e-9);
                    prop_assert!(got.abs() <= 1.0 + 1e-6);
                }
            }
            let vs = vision(fv.iter().map(|x| x * a).collect(), c, h, w);
            let ts = text(fl.iter().map(|x| x * d).collect(), c, n);
            let scaled = values(&correlate(&vs, &ts).unwrap());
            for (x, y) in out.iter().zip(&scaled) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            // negating class 0 negates row 0
            let mut neg = fl.clone();
            for k in 0..c { neg[k * n] = -neg[k * n]; }
            let flipped = values(&correlate(&v, &text(neg, c, n)).unwrap());
            for i in 0..h * w {
                prop_assert!((flipped[i] + out[i]).abs() < 1e-12);
                prop_assert_eq!(flipped[h * w + i], out[h * w + i]);
            }
        }
    }
}
