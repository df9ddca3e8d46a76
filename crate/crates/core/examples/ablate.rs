//! Trains the block arms and prompt combinations over several seeds and
//! prints the median mIoU table. Needs the archives of the `pretrain`
//! example; the defaults here are a short budget.
//!
//! ```text
//! cargo run --release --example ablate -- epochs=3
//! ```

use std::path::{Path, PathBuf};

use anyhow::Result;
use escnet::harness::ablate::{ablate, AblationPlan};
use escnet::harness::train::Pretrained;
use escnet::{ModelConfig, PromptKinds};

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = ModelConfig { epochs: 2, ..ModelConfig::default() }.with_overrides(&overrides)?;
    let plan = AblationPlan {
        prompt_kinds: ["points", "boxes", "points+masks"]
            .iter()
            .map(|l| PromptKinds::from_label(l))
            .collect::<escnet::Result<_>>()?,
        ..AblationPlan::default()
    };
    let init = Pretrained::in_dir(Path::new("target/examples-out/pretrain"));
    let report = ablate(&cfg, &plan, &init, &PathBuf::from("target/examples-out/ablate"))?;
    print!("{}", report.table());
    Ok(())
}
