//! One object-region block on random tokens: shapes of both streams and how
//! much each moves the residual.

use orvit::attention::AttentionVariant;
use orvit::backbone::GridDims;
use orvit::geometry::{BBox, BoxSet, RoiParams};
use orvit::orvit::{OrvitBlock, OrvitConfig, PoolOrder};
use orvit::params::ParamStore;
use orvit::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn main() -> orvit::Result<()> {
    let dims = GridDims { frames: 4, height: 4, width: 4, dim: 16 };
    let cfg = OrvitConfig {
        dim: 16,
        heads: 4,
        mlp_hidden: 32,
        num_objects: 3,
        d_odm: 8,
        roi: RoiParams { size: 2, samples_per_bin: 2 },
        variant: AttentionVariant::Joint,
        order: PoolOrder::PoolFirst,
        odm: true,
    };
    let mut store = ParamStore::new();
    let block = OrvitBlock::new(&mut store, "block", &cfg, dims.frames, 0)?;
    println!("{} parameter tensors", store.ids().count());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![dims.tokens(), 16], (0..dims.tokens() * 16).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    // Two objects drifting right; the third slot is padding.
    let mut boxes = BoxSet::padding(dims.frames, 3);
    for t in 0..dims.frames {
        let dx = 0.1 * t as f64;
        boxes.set(t, 0, BBox::new(0.05 + dx, 0.1, 0.35 + dx, 0.4));
        boxes.set(t, 1, BBox::new(0.5, 0.55, 0.8, 0.95));
    }

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = block.forward(&mut tape, &store, xv, dims, &boxes)?;
    println!("tokens {:?} -> {:?}", x.shape(), tape.shape(y.out));
    println!("object tokens {:?}", tape.shape(y.object_tokens));
    println!("|X| {:.3}  |R| {:.3}  |D| {:.3}", norm(&x), norm(tape.value(y.region)), y.dynamics.map_or(0.0, |d| norm(tape.value(d))));
    Ok(())
}
