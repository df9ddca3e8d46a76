//! Cosine correlation between image and class features. Uses the aligned
//! encoders from the `pretrain` example when present, random ones otherwise,
//! and reports how often the best-matching class is the true one per cell.
//!
//! ```text
//! cargo run --release --example correlation
//! ```

use std::path::Path;

use anyhow::Result;
use candle_core::DType;
use escnet::correlation::correlate;
use escnet::escnet::{image_batch, load_encoders};
use escnet::harness::pretrain::{class_fractions, ENCODER_ARCHIVE};
use escnet::harness::synth::{class_names, sample};
use escnet::harness::train::vocabulary;
use escnet::{EscNet, ModelConfig};

fn main() -> Result<()> {
    let cfg = ModelConfig::default();
    let (store, model) = EscNet::init(&cfg)?;
    let archive = Path::new("target/examples-out/pretrain").join(ENCODER_ARCHIVE);
    if archive.exists() {
        load_encoders(&store, &archive)?;
        println!("encoders: {}", archive.display());
    } else {
        println!("encoders: random (run the `pretrain` example to align them)");
    }
    let classes = vocabulary(&cfg);
    let names = class_names();
    let cells = cfg.height * cfg.width;
    let (mut hits, mut total) = (0usize, 0usize);
    for i in 0..16 {
        let s = sample(cfg.seed + 1, i, cfg.image_size);
        let x = image_batch(&[s.image.clone()], cfg.image_size, DType::F32)?;
        let (v, t) = model.encode(&x, &classes)?;
        let corr = correlate(&v, &t)?.values.flatten_all()?.to_vec1::<f32>()?;
        let fractions = class_fractions(&s, &classes, cfg.height, cfg.width);
        for cell in 0..cells {
            let best = (0..classes.len())
                .max_by(|&a, &b| corr[a * cells + cell].total_cmp(&corr[b * cells + cell]))
                .unwrap();
            let truth = (0..classes.len())
                .max_by(|&a, &b| fractions[a * cells + cell].total_cmp(&fractions[b * cells + cell]))
                .unwrap();
            hits += usize::from(best == truth);
            total += 1;
        }
        if i == 0 {
            for (k, &c) in classes.iter().enumerate() {
                let row = &corr[k * cells..(k + 1) * cells];
                let max = row.iter().cloned().fold(f32::MIN, f32::max);
                let mean = row.iter().sum::<f32>() / cells as f32;
                println!("{:>14}: max {max:+.3} mean {mean:+.3}", names[c]);
            }
        }
    }
    println!("cells whose best-matching class is the dominant one: {hits}/{total}");
    Ok(())
}
