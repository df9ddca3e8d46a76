//! Aligns the encoders, then pretrains the two-way blocks on promptable
//! segmentation of single shapes, and prints both reports.
//!
//! ```text
//! cargo run --release --example pretrain -- pretrain.steps=300
//! ```

use std::path::PathBuf;

use anyhow::Result;
use escnet::harness::pretrain::{pretrain_encoders, pretrain_sam_analog};
use escnet::ModelConfig;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = ModelConfig::default().with_overrides(&overrides)?;
    let out = PathBuf::from("target/examples-out/pretrain");
    let enc = pretrain_encoders(&cfg, &out)?;
    println!("encoders: cell accuracy {:.3} in {:.0}s", enc.cell_accuracy, enc.wall_time);
    let sam = pretrain_sam_analog(&cfg, Some(&enc.archive), &out)?;
    println!(
        "two-way blocks: probe IoU {:?} (mean {:.3}) in {:.0}s",
        sam.probe_iou, sam.mean_probe_iou, sam.wall_time
    );
    println!("archives: {} {}", enc.archive.display(), sam.archive.display());
    Ok(())
}
