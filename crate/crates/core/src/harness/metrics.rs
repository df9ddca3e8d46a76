//! Intersection-over-union bookkeeping.

use serde::Serialize;

use crate::escnet::IGNORE_INDEX;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Class ids in report order.
    pub class_ids: Vec<usize>,
    /// `None` when a class is absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// Non-ignored pixels counted.
    pub pixels: u64,
}

/// Running intersection / union counts over many label maps; the dataset
/// mIoU is computed from the pooled counts.
#[derive(Clone, Debug)]
pub struct IouAccumulator {
    class_ids: Vec<usize>,
    intersection: Vec<u64>,
    union: Vec<u64>,
    pixels: u64,
}

impl IouAccumulator {
    pub fn new(class_ids: &[usize]) -> Self {
        Self {
            class_ids: class_ids.to_vec(),
            intersection: vec![0; class_ids.len()],
            union: vec![0; class_ids.len()],
            pixels: 0,
        }
    }

    /// Adds one pair of label maps. Pixels whose ground truth is the ignore
    /// index are skipped.
    ///
    /// # Panics
    /// If the maps differ in length.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) {
        assert_eq!(pred.len(), gt.len(), "label maps differ in size");
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_INDEX {
                continue;
            }
            self.pixels += 1;
            for (k, &c) in self.class_ids.iter().enumerate() {
                let in_p = p as usize == c;
                let in_g = g as usize == c;
                if in_p && in_g {
                    self.intersection[k] += 1;
                }
                if in_p || in_g {
                    self.union[k] += 1;
                }
            }
        }
    }

    pub fn report(&self) -> EvalReport {
        let per_class_iou: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        EvalReport {
            class_ids: self.class_ids.clone(),
            per_class_iou,
            miou,
            intersection: self.intersection.clone(),
            union: self.union.clone(),
            pixels: self.pixels,
        }
    }
}

/// mIoU of a single prediction over `class_ids`.
pub fn miou(pred: &[u8], gt: &[u8], class_ids: &[usize]) -> EvalReport {
    let mut acc = IouAccumulator::new(class_ids);
    acc.add(pred, gt);
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_overlap_example() {
        // 4x4, left half class 0, right half class 1; prediction all 0
        let gt: Vec<u8> = (0..16).map(|p| u8::from(p % 4 >= 2)).collect();
        let pred = vec![0u8; 16];
        let r = miou(&pred, &gt, &[0, 1]);
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);
    }

    #[test]
    fn disjoint_and_absent_classes() {
        let gt = vec![0u8, 0, 1, 1];
        let pred = vec![1u8, 1, 0, 0];
        assert_eq!(miou(&pred, &gt, &[0, 1]).miou, 0.0);
        // class 2 never appears, so it is left out of the mean
        let r = miou(&gt, &gt, &[0, 1, 2]);
        assert_eq!(r.per_class_iou[2], None);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let gt = vec![0u8, IGNORE_INDEX, 1];
        let pred = vec![0u8, 1, 1];
        let r = miou(&pred, &gt, &[0, 1]);
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.pixels, 2);
    }

    fn label_map() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..4, n),
                proptest::collection::vec(0u8..4, n),
            )
        })
    }

    proptest! {
        #[test]
        fn self_agreement_is_perfect(p in proptest::collection::vec(0u8..4, 1..40)) {
            prop_assert_eq!(miou(&p, &p, &[0, 1, 2, 3]).miou, 1.0);
        }

        #[test]
        fn joint_relabeling_leaves_miou_unchanged((p, g) in label_map(), shift in 1u8..4) {
            let relabel = |v: &[u8]| v.iter().map(|&x| (x + shift) % 4).collect::<Vec<u8>>();
            let a = miou(&p, &g, &[0, 1, 2, 3]).miou;
            let b = miou(&relabel(&p), &relabel(&g), &[0, 1, 2, 3]).miou;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
