//! Built-in finite-difference gradient checks, one battery per module.
//!
//! Every battery draws inputs uniformly from [−1, 1] with a seeded
//! generator and reduces outputs to a scalar through a fixed random
//! projection so that no gradient is trivially uniform.

use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, AttentionConfig, AttentionVariant, SpaceTimeAttention};
use crate::backbone::{GridDims, Model, ModelConfig};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{box_splat_var, roi_align_var, BBox, BoxSet, RoiParams};
use crate::orvit::{OrvitBlock, OrvitConfig, PoolOrder};
use crate::params::ParamStore;
use crate::tensor::{check_gradients, check_param_gradients, GradCheckReport, RowMix, Tape, Tensor, Var};

/// Finite-difference step used by every battery.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Tensor,
    Geometry,
    Attention,
    Orvit,
    Backbone,
    All,
}

impl FromStr for GradModule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tensor" => GradModule::Tensor,
            "geometry" => GradModule::Geometry,
            "attention" => GradModule::Attention,
            "orvit" => GradModule::Orvit,
            "backbone" => GradModule::Backbone,
            "all" => GradModule::All,
            other => return Err(Error::config(format!("unknown grad-check module {other:?}"))),
        })
    }
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()).expect("shape")
}

/// `sum(x ⊙ w)` for a fixed `w` derived from `seed`, scaled by `1/√n` so
/// the loss stays O(1) and probe rounding stays small whatever the size of
/// `x`.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut w = uniform(tape.shape(x), &mut rng);
    let scale = 1.0 / (w.len() as f64).sqrt();
    w.data_mut().iter_mut().for_each(|v| *v *= scale);
    let y = tape.mul_const(x, w)?;
    Ok(tape.sum(y))
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (a, b): (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let (c, d): (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    BBox::new(a.min(b), c.min(d), a.max(b), c.max(d))
}

fn random_boxes(frames: usize, objects: usize, padding: usize, rng: &mut ChaCha8Rng) -> BoxSet {
    let mut b = BoxSet::padding(frames, objects);
    for t in 0..frames {
        for o in 0..objects.saturating_sub(padding) {
            b.set(t, o, random_box(rng));
        }
    }
    b
}

/// Named single-op checks on random inputs.
pub fn tensor_battery(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| -> Result<()> {
        let r = check_gradients(|t, v| f(t, v).and_then(|y| project(t, y, seed)), &inputs, STEP)?;
        out.push((name.to_string(), r));
        Ok(())
    };
    check("matmul", vec![uniform(&[3, 4], &mut rng), uniform(&[4, 2], &mut rng)], &|t, v| t.matmul(v[0], v[1]))?;
    check("matmul_nt", vec![uniform(&[3, 4], &mut rng), uniform(&[5, 4], &mut rng)], &|t, v| t.matmul_nt(v[0], v[1]))?;
    check("add_row", vec![uniform(&[3, 4], &mut rng), uniform(&[4], &mut rng)], &|t, v| t.add_row(v[0], v[1]))?;
    check("mul", vec![uniform(&[2, 3], &mut rng), uniform(&[2, 3], &mut rng)], &|t, v| t.mul(v[0], v[1]))?;
    check("mul_col", vec![uniform(&[3, 4], &mut rng), uniform(&[3, 1], &mut rng)], &|t, v| t.mul_col(v[0], v[1]))?;
    check("scale", vec![uniform(&[2, 2], &mut rng)], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    check("transpose", vec![uniform(&[2, 3], &mut rng)], &|t, v| t.transpose(v[0]))?;
    check("reshape", vec![uniform(&[2, 3], &mut rng)], &|t, v| t.reshape(v[0], &[3, 2]))?;
    check("softmax", vec![uniform(&[1, 5], &mut rng)], &|t, v| t.softmax(v[0]))?;
    check("softmax_rows", vec![uniform(&[3, 4], &mut rng)], &|t, v| t.softmax(v[0]))?;
    check("layernorm", vec![uniform(&[1, 8], &mut rng), uniform(&[8], &mut rng), uniform(&[8], &mut rng)], &|t, v| {
        t.layernorm(v[0], v[1], v[2], 1e-5)
    })?;
    check("gelu", vec![Tensor::new(vec![1], vec![0.5])?], &|t, v| Ok(t.gelu(v[0])))?;
    check("gelu_rand", vec![uniform(&[2, 4], &mut rng)], &|t, v| Ok(t.gelu(v[0])))?;
    check("concat_rows", vec![uniform(&[2, 3], &mut rng), uniform(&[1, 3], &mut rng)], &|t, v| t.concat_rows(&[v[0], v[1]]))?;
    check("concat_cols", vec![uniform(&[2, 3], &mut rng), uniform(&[2, 2], &mut rng)], &|t, v| t.concat_cols(&[v[0], v[1]]))?;
    check("slice_rows", vec![uniform(&[4, 3], &mut rng)], &|t, v| t.slice_rows(v[0], 1, 2))?;
    check("slice_cols", vec![uniform(&[3, 4], &mut rng)], &|t, v| t.slice_cols(v[0], 1, 2))?;
    check("gather_rows", vec![uniform(&[4, 3], &mut rng)], &|t, v| t.gather_rows(v[0], Rc::new(vec![2, 0, 2, 3])))?;
    let mut mix = RowMix::new(3);
    for (o, i, w) in [(0, 1, 0.5), (0, 2, -1.25), (2, 0, 2.0), (2, 2, 0.3)] {
        mix.push(o, i, w);
    }
    let mix = Rc::new(mix);
    check("row_mix", vec![uniform(&[3, 2], &mut rng)], &move |t, v| t.row_mix(v[0], mix.clone()))?;
    check("group_max", vec![uniform(&[6, 3], &mut rng)], &|t, v| t.group_max(v[0], 3))?;
    check("row_sum", vec![uniform(&[3, 4], &mut rng)], &|t, v| Ok(t.row_sum(v[0])))?;
    check("cross_entropy", vec![uniform(&[1, 5], &mut rng)], &|t, v| t.cross_entropy(v[0], 3))?;
    check("linear", vec![uniform(&[3, 4], &mut rng), uniform(&[4, 2], &mut rng), uniform(&[2], &mut rng)], &|t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    })?;
    Ok(out)
}

pub fn geometry_battery(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in 0..3 {
        let (h, w) = (3 + k, 4);
        let b = random_box(&mut rng);
        let roi = RoiParams { size: 2 + k % 2, samples_per_bin: 2 };
        let r = check_gradients(
            |t, v| {
                let y = roi_align_var(t, v[0], (h, w), &b, roi)?;
                project(t, y, seed)
            },
            &[uniform(&[h * w, 3], &mut rng)],
            STEP,
        )?;
        out.push((format!("roi_align[{k}]"), r));
        let b = random_box(&mut rng);
        let r = check_gradients(
            |t, v| {
                let y = box_splat_var(t, v[0], &b, h, w)?;
                project(t, y, seed)
            },
            &[uniform(&[1, 3], &mut rng)],
            STEP,
        )?;
        out.push((format!("box_splat[{k}]"), r));
    }
    Ok(out)
}

pub fn attention_battery(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = check_gradients(
        |t, v| {
            let a = attend(t, v[0], v[1], v[2], 2)?;
            project(t, a.out, seed)
        },
        &[uniform(&[3, 4], &mut rng), uniform(&[5, 4], &mut rng), uniform(&[5, 4], &mut rng)],
        STEP,
    )?;
    out.push(("attend".into(), r));
    let dims = GridDims { frames: 2, height: 2, width: 2, dim: 4 };
    for variant in [AttentionVariant::Joint, AttentionVariant::Divided, AttentionVariant::Trajectory] {
        let mut store = ParamStore::new();
        let layer = SpaceTimeAttention::new(&mut store, "l", &AttentionConfig { heads: 2, d_model: 4, variant }, seed);
        let x = uniform(&[dims.tokens(), 4], &mut rng);
        let report = check_param_gradients(
            &store,
            |t, s| {
                let xv = t.constant(x.clone());
                let y = layer.forward(t, s, xv, dims, None)?;
                project(t, y.out, seed)
            },
            STEP,
            None,
        )?;
        out.push((format!("{variant}"), report));
    }
    Ok(out)
}

/// The small block configuration used by the ORViT battery.
pub fn tiny_orvit_config(variant: AttentionVariant, order: PoolOrder, d_odm: usize) -> OrvitConfig {
    OrvitConfig {
        dim: 8,
        heads: 2,
        mlp_hidden: 16,
        num_objects: 2,
        d_odm,
        roi: RoiParams { size: 2, samples_per_bin: 2 },
        variant,
        order,
        odm: true,
    }
}

pub fn orvit_battery(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let dims = GridDims { frames: 2, height: 3, width: 3, dim: 8 };
    let cases = [
        ("joint", AttentionVariant::Joint, PoolOrder::PoolFirst, 8),
        ("mlp_first", AttentionVariant::Joint, PoolOrder::MlpFirst, 8),
        ("reduced_odm", AttentionVariant::Joint, PoolOrder::PoolFirst, 4),
        ("divided", AttentionVariant::Divided, PoolOrder::PoolFirst, 8),
        ("trajectory", AttentionVariant::Trajectory, PoolOrder::PoolFirst, 8),
    ];
    for (name, variant, order, d_odm) in cases {
        let mut store = ParamStore::new();
        let cfg = tiny_orvit_config(variant, order, d_odm);
        let block = OrvitBlock::new(&mut store, "b", &cfg, dims.frames, seed)?;
        let x = uniform(&[dims.tokens(), dims.dim], &mut rng);
        let boxes = random_boxes(dims.frames, 2, usize::from(name == "joint"), &mut rng);
        let mut report = check_param_gradients(
            &store,
            |t, s| {
                let xv = t.constant(x.clone());
                let y = block.forward(t, s, xv, dims, &boxes)?;
                project(t, y.out, seed)
            },
            STEP,
            None,
        )?;
        let wrt_x = check_gradients(
            |t, v| {
                let y = block.forward(t, &store, v[0], dims, &boxes)?;
                project(t, y.out, seed)
            },
            std::slice::from_ref(&x),
            STEP,
        )?;
        report.merge(wrt_x);
        out.push((format!("block/{name}"), report));
    }
    Ok(out)
}

/// End-to-end check of a depth-2, width-16 model with one ORViT layer.
/// At most `coords` coordinates are probed per parameter tensor.
pub fn backbone_battery(seed: u64, coords: Option<usize>) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = Config::default()
        .with("data.frames", 4)
        .with("data.height", 8)
        .with("data.width", 8)
        .with("model.dim", 16)
        .with("model.heads", 2)
        .with("model.depth", 2)
        .with("model.patch_t", 2)
        .with("model.dropout", 0.0)
        .with("orvit.layers", "1")
        .with("orvit.roi_size", 2);
    let mc = ModelConfig::from_config(&cfg)?;
    let (model, store) = Model::new(&mc, seed)?;
    let clip = uniform(&[4, 8, 8, 1], &mut rng);
    let boxes = random_boxes(4, 2, 0, &mut rng);
    let report = check_param_gradients(
        &store,
        |t, s| {
            let o = model.forward(t, s, &clip, &boxes, None)?;
            t.cross_entropy(o.logits, 1)
        },
        STEP,
        coords,
    )?;
    Ok(vec![("model".into(), report)])
}

/// Runs one module's battery (or all of them) and merges the reports.
pub fn run_module(module: GradModule, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    Ok(match module {
        GradModule::Tensor => tensor_battery(seed)?,
        GradModule::Geometry => geometry_battery(seed)?,
        GradModule::Attention => attention_battery(seed)?,
        GradModule::Orvit => orvit_battery(seed)?,
        GradModule::Backbone => backbone_battery(seed, Some(6))?,
        GradModule::All => {
            let mut v = tensor_battery(seed)?;
            v.extend(geometry_battery(seed)?);
            v.extend(attention_battery(seed)?);
            v.extend(orvit_battery(seed)?);
            v.extend(backbone_battery(seed, Some(6))?);
            v
        }
    })
}
