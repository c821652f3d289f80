//! CLS attention of an untrained model on one synthetic clip, written as
//! PGM heatmaps.

use std::path::PathBuf;

use orvit::attention::export_cls_maps;
use orvit::backbone::{Model, ModelConfig};
use orvit::config::Config;
use orvit::harness::fit_objects;
use orvit::synthdata::{gen_clip, SynthConfig};
use orvit::tensor::Tape;

fn main() -> orvit::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("orvit-maps"));
    let cfg = Config::default();
    let sample = gen_clip(1, 0, 5, &SynthConfig::from_config(&cfg)?)?;
    let mc = ModelConfig::from_config(&cfg)?;
    let (model, store) = Model::new(&mc, 0)?;
    let boxes = fit_objects(&sample.gt_boxes, mc.orvit.num_objects);

    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &store, &sample.clip, &boxes, None)?;
    let per_layer: Vec<Vec<_>> = fwd.cls_attention.iter().map(|h| h.iter().map(|&v| tape.value(v).clone()).collect()).collect();
    for path in export_cls_maps(&out, mc.grid(), &per_layer)? {
        println!("{}", path.display());
    }
    Ok(())
}
