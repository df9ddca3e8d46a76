//! Writes model weights to a named-tensor archive, reads them back and lists
//! the manifest.
//!
//! ```text
//! cargo run --release --example archive
//! ```

use std::path::PathBuf;

use anyhow::{ensure, Result};
use escnet::archive::Archive;
use escnet::nn::ParamStore;
use escnet::samblock::{block_prefix, load_block_weights, save_block_weights};
use escnet::{EscNet, ModelConfig};

fn main() -> Result<()> {
    let cfg = ModelConfig::default();
    let (store, _) = EscNet::init(&cfg)?;
    let dir = PathBuf::from("target/examples-out/archive");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("block0.esc");
    save_block_weights(&path, 0, &store)?;

    let archive = Archive::load(&path)?;
    for name in archive.names().take(6) {
        let t = archive.get(name).expect("listed tensor");
        println!("{name:<40} {:?}", t.shape);
    }
    println!("... {} tensors in {}", archive.names().count(), path.display());

    // a differently seeded model takes the saved block verbatim
    let mut other = ParamStore::new(cfg.seed + 1, candle_core::DType::F32);
    EscNet::new(&cfg, &mut other)?;
    let loaded = load_block_weights(&path, 0, &other)?;
    let (a, b) = (store.snapshot()?, other.snapshot()?);
    let prefix = format!("{}.", block_prefix(0));
    ensure!(a.iter().filter(|(n, _)| n.starts_with(&prefix)).all(|(n, v)| b.get(n) == Some(v)));
    println!("loaded {loaded} tensors bit-exactly");
    Ok(())
}
