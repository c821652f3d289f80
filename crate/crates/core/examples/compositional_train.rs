//! Baseline against object-region model on held-out verb/noun pairs, at a
//! size that finishes in a few minutes. The acceptance target runs the full
//! version.

use orvit::config::Config;
use orvit::harness::run;
use orvit::synthdata::{gen_dataset, SynthConfig};

fn main() -> orvit::Result<()> {
    let cfg = Config::default().with("data.per_pair", 100);
    let (train, val) = gen_dataset(&SynthConfig::from_config(&cfg)?, 0)?;
    println!("{} train / {} val clips", train.len(), val.len());
    for (tag, c) in [("baseline", cfg.clone().with("orvit.layers", "")), ("orvit", cfg.clone())] {
        let r = run(&train, &val, &c, 0, tag)?;
        let last = r.epochs.last().map_or(f64::NAN, |e| e.accuracy);
        println!("{tag:<8} train acc {last:.3}  val top1 {:.3}", r.top1);
    }
    Ok(())
}
