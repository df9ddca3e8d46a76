//! Splits a binary grid into location clusters and prints the regions.
//!
//! ```text
//! cargo run --release --example kmeans -- 3
//! ```

use anyhow::Result;
use escnet::ppg::kmeans::cluster_regions;
use escnet::ModelConfig;

const GRID: [&str; 8] = [
    "##......",
    "##......",
    "....##..",
    "....###.",
    ".....#..",
    "........",
    "#.......",
    "##......",
];

fn main() -> Result<()> {
    let k: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let cfg = ModelConfig::default();
    let binary: Vec<bool> = GRID.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
    let regions = cluster_regions(&binary, 8, 8, k, cfg.seed, cfg.kmeans_restarts, cfg.kmeans_max_iter)?;
    for row in regions.chunks(8) {
        let line: String = row
            .iter()
            .map(|&l| if l < 0 { '.' } else { char::from(b'a' + l as u8) })
            .collect();
        println!("{line}");
    }
    Ok(())
}
