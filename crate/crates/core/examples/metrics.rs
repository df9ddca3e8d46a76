//! Intersection over union on hand-made label maps.
//!
//! ```text
//! cargo run --example metrics
//! ```

use escnet::harness::metrics::{miou, IouAccumulator};

fn main() {
    // left half class 0, right half class 1
    let gt: Vec<u8> = (0..16).map(|i| u8::from(i % 4 >= 2)).collect();
    let all_zero = vec![0u8; 16];
    let r = miou(&all_zero, &gt, &[0, 1]);
    println!("all class 0: per class {:?}, mIoU {}", r.per_class_iou, r.miou);
    println!("perfect: mIoU {}", miou(&gt, &gt, &[0, 1]).miou);

    // dataset mIoU pools counts over images before dividing
    let mut acc = IouAccumulator::new(&[0, 1]);
    acc.add(&all_zero, &gt);
    acc.add(&gt, &gt);
    let pooled = acc.report();
    println!("pooled over both: intersections {:?} unions {:?} mIoU {:.4}", pooled.intersection, pooled.union, pooled.miou);
}
