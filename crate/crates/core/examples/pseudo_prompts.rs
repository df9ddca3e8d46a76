//! Pseudo prompts for one synthetic scene: per class, the region masks,
//! peak points and boxes derived from its correlation map.
//!
//! ```text
//! cargo run --release --example pseudo_prompts -- 3
//! ```

use std::path::Path;

use anyhow::Result;
use candle_core::DType;
use escnet::correlation::correlate;
use escnet::escnet::{image_batch, load_encoders};
use escnet::harness::pretrain::ENCODER_ARCHIVE;
use escnet::harness::synth::{class_names, sample};
use escnet::ppg;
use escnet::{EscNet, ModelConfig};

fn main() -> Result<()> {
    let index: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let cfg = ModelConfig::default();
    let (store, model) = EscNet::init(&cfg)?;
    let archive = Path::new("target/examples-out/pretrain").join(ENCODER_ARCHIVE);
    if archive.exists() {
        load_encoders(&store, &archive)?;
    }
    let s = sample(cfg.seed, index, cfg.image_size);
    let x = image_batch(&[s.image.clone()], cfg.image_size, DType::F32)?;
    let (v, t) = model.encode(&x, &s.class_ids)?;
    let prompts = ppg::generate(&correlate(&v, &t)?, &cfg, model.ppg_seed(0))?;
    let names = class_names();
    let w = prompts.width;
    for (&cid, cp) in s.class_ids.iter().zip(&prompts.classes) {
        println!("{} ({} regions)", names[cid], cp.valid_count());
        for (slot, point) in cp.points.iter().enumerate() {
            if let (Some(p), Some(b)) = (point, cp.boxes[slot]) {
                println!("  region {slot}: point {p:?} box {b:?}");
            }
        }
        for row in 0..prompts.height {
            let line: String = (0..w)
                .map(|col| {
                    cp.masks
                        .iter()
                        .position(|m| m[row * w + col])
                        .map_or('.', |k| char::from(b'0' + k as u8))
                })
                .collect();
            println!("  {line}");
        }
    }
    Ok(())
}
