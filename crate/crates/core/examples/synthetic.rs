//! Generates a few synthetic scenes and writes their label maps as PGM files
//! with a JSON legend.
//!
//! ```text
//! cargo run --release --example synthetic -- 4
//! ```

use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use escnet::export::{write_pgm, Legend, LegendEntry};
use escnet::harness::synth::{class_names, sample};
use escnet::ModelConfig;

fn main() -> Result<()> {
    let count: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(4);
    let cfg = ModelConfig::default();
    let out = PathBuf::from("target/examples-out/synthetic");
    fs::create_dir_all(&out)?;
    let names = class_names();
    let mut images = Vec::new();
    for i in 0..count {
        let s = sample(cfg.seed, i, cfg.image_size);
        let name = format!("gt_{i:04}.pgm");
        write_pgm(&out.join(&name), s.size, s.size, &s.gt)?;
        let present: Vec<&str> = s.shapes.iter().map(|sh| names[sh.class_id].as_str()).collect();
        println!("scene {i}: {}", present.join(", "));
        images.push(name);
    }
    let entries = names
        .iter()
        .enumerate()
        .map(|(v, label)| LegendEntry { value: v as u8, label: label.clone() })
        .collect();
    Legend { images, entries, extra: serde_json::Value::Null }.save(&out.join("legend.json"))?;
    println!("label maps in {}", out.display());
    Ok(())
}
