//! Writes a small compositional dataset and prints which verb/noun pairs
//! land in each split.
//!
//! `cargo run --example synth_dataset -- /tmp/orvit-data`

use std::path::PathBuf;

use orvit::config::Config;
use orvit::synthdata::{write_dataset, SynthConfig};

fn main() -> orvit::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("orvit-synth"));
    let cfg = SynthConfig::from_config(&Config::default().with("data.per_pair", 5))?;
    let (train, val) = write_dataset(&dir, &cfg, 0)?;
    for shard in [&train, &val] {
        let m = &shard.manifest;
        let pairs: Vec<String> = m.pairs.iter().map(|&(v, n)| format!("{} {}", m.verbs[v], m.nouns[n])).collect();
        println!("{:?}: {} clips of {}x{}x{}", m.split, shard.len(), m.frames, m.height, m.width);
        println!("  {}", pairs.join(", "));
    }
    println!("rule: {}", train.manifest.rule);
    println!("written to {}", dir.display());
    Ok(())
}
