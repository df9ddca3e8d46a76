//! Segments held-out scenes with a trained checkpoint and writes predicted
//! and true label maps as PGM files with a JSON legend.
//!
//! ```text
//! cargo run --release --example predict -- target/examples-out/train_toy/pretrained_sam/checkpoint_epoch010.esc
//! ```

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use escnet::escnet::image_batch;
use escnet::export::{write_pgm, Legend, LegendEntry};
use escnet::harness::metrics::miou;
use escnet::harness::synth::{class_names, sample};
use escnet::harness::train::{data_seeds, load_checkpoint, vocabulary};

fn main() -> Result<()> {
    let checkpoint: PathBuf = std::env::args().nth(1).context("usage: predict <checkpoint.esc>")?.into();
    let (cfg, _store, model) = load_checkpoint(&checkpoint)?;
    let out = PathBuf::from("target/examples-out/predict");
    fs::create_dir_all(&out)?;
    let classes = vocabulary(&cfg);
    let (_, eval_seed) = data_seeds(&cfg);
    let size = cfg.image_size;
    let mut images = Vec::new();
    for i in 0..4 {
        let s = sample(eval_seed, i, size);
        let x = image_batch(&[s.image.clone()], size, model.dtype())?;
        let pred = &model.predict(&x, &classes)?.labels[0];
        write_pgm(&out.join(format!("pred_{i:04}.pgm")), size, size, pred)?;
        write_pgm(&out.join(format!("gt_{i:04}.pgm")), size, size, &s.gt)?;
        println!("scene {i}: mIoU {:.4}", miou(pred, &s.gt, &classes).miou);
        images.extend([format!("pred_{i:04}.pgm"), format!("gt_{i:04}.pgm")]);
    }
    let names = class_names();
    let entries = classes
        .iter()
        .map(|&c| LegendEntry { value: c as u8, label: names[c].clone() })
        .collect();
    Legend { images, entries, extra: serde_json::Value::Null }.save(&out.join("legend.json"))?;
    println!("maps in {}", out.display());
    Ok(())
}
