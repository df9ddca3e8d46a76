//! Trains one arm on synthetic shapes and prints the held-out mIoU.
//!
//! ```text
//! cargo run --release --example train_toy -- random_sam epochs=2 samples_per_epoch=64
//! ```

use std::path::{Path, PathBuf};

use anyhow::Result;
use escnet::harness::train::{train, Arm, Pretrained};
use escnet::ModelConfig;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let arm: Arm = args.next().as_deref().unwrap_or("random_sam").parse()?;
    let overrides: Vec<String> = args.collect();
    let cfg = ModelConfig::default().with_overrides(&overrides)?;
    let out = PathBuf::from("target/examples-out/train_toy").join(arm.name());
    // archives written by the `pretrain` example
    let init = Pretrained::in_dir(Path::new("target/examples-out/pretrain"));
    let outcome = train(&cfg, arm, &init, &out)?;
    println!("{arm}: held-out mIoU {:.4}", outcome.final_eval.miou);
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}
