//! Tracks the jittered detections of a synthetic clip and scores how well
//! track ids follow the ground-truth objects.

use orvit::config::Config;
use orvit::synthdata::{gen_clip, SynthConfig};
use orvit::tracker::{id_consistency, track_clip, SortParams};

fn main() -> orvit::Result<()> {
    let cfg = SynthConfig::from_config(&Config::default())?;
    for (verb, seed) in [(0, 1), (2, 2), (3, 3)] {
        let s = gen_clip(verb, 1, seed, &cfg)?;
        let frames = s.gt_boxes.frames();
        let tracks = track_clip(&s.detections, frames, SortParams::default())?;
        println!(
            "verb {verb}: {} detections, {} tracks, id consistency {:.3}",
            s.detections.len(),
            tracks.len(),
            id_consistency(&s.gt_boxes, &tracks)
        );
        for t in &tracks {
            let b = t.bbox();
            println!("  track {} ends at ({:.2}, {:.2}, {:.2}, {:.2})", t.id, b.x1, b.y1, b.x2, b.y2);
        }
    }
    Ok(())
}
