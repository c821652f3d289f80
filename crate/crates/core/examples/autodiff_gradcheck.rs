//! Reverse-mode gradients of a small two-layer expression, compared with
//! central differences.

use orvit::tensor::{check_gradients, Tape, Tensor};

fn main() -> orvit::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.3, -0.7, 0.1, 0.9, 0.2, -0.4])?;
    let w = Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.4])?;

    // loss = sum(gelu(x·w)) + 0.1·sum(softmax_rows(x·w))
    let build = |t: &mut Tape, v: &[orvit::tensor::Var]| {
        let h = t.matmul(v[0], v[1])?;
        let g = t.gelu(h);
        let s = t.softmax(h)?;
        let s = t.scale(s, 0.1);
        let a = t.sum(g);
        let b = t.sum(s);
        t.add(a, b)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let wv = tape.leaf(w.clone(), true);
    let loss = build(&mut tape, &[xv, wv])?;
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).data()[0]);
    println!("dL/dw {:?}", grads.get(wv).map(|g| g.data().to_vec()));

    let report = check_gradients(build, &[x, w], 1e-5)?;
    println!("{} coordinates checked, max rel err {:.2e}", report.checked, report.max_rel_err);
    Ok(())
}
