//! Pools a box out of a feature grid and paints a vector back into the
//! cells the box covers.

use orvit::geometry::{box_coverage, box_splat, roi_align, BBox, RoiParams};
use orvit::tensor::Tensor;

fn main() -> orvit::Result<()> {
    let (h, w) = (4, 6);
    // One channel holding the column index, one holding the row index.
    let mut data = Vec::new();
    for i in 0..h {
        for j in 0..w {
            data.extend([j as f64, i as f64]);
        }
    }
    let grid = Tensor::new(vec![h, w, 2], data)?;
    let b = BBox::new(0.25, 0.25, 0.75, 0.9);

    let pooled = roi_align(&grid, &b, RoiParams { size: 2, samples_per_bin: 2 })?;
    println!("roi_align 2x2 bins (col, row):");
    for bin in pooled.data().chunks(2) {
        println!("  ({:.3}, {:.3})", bin[0], bin[1]);
    }

    println!("coverage of {b:?}:");
    let mut cov = vec![0.0; h * w];
    for (cell, wt) in box_coverage(h, w, &b) {
        cov[cell] += wt;
    }
    for row in cov.chunks(w) {
        println!("  {}", row.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "));
    }

    let painted = box_splat(&Tensor::new(vec![1], vec![2.0])?, &b, h, w)?;
    println!("splat total {:.3} = 2 × area × cells", painted.data().iter().sum::<f64>());
    Ok(())
}
