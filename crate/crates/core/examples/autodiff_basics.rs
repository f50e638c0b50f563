//! The tape: build a small conv -> norm -> PReLU -> attention graph, take
//! gradients, and compare them with finite differences.

use fda::autodiff::{cse_block, grad_check, GradCheckConfig, Tape, Tensor5};

fn main() -> fda::Result<()> {
    let x = Tensor5::new([1, 1, 4, 4, 4], (0..64).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w = Tensor5::new([2, 1, 3, 3, 3], (0..54).map(|i| (i as f64 * 0.11).cos() * 0.3).collect())?;

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.param(w.clone());
    let g = tape.param(Tensor5::full([2, 1, 1, 1, 1], 1.0));
    let b = tape.param(Tensor5::zeros([2, 1, 1, 1, 1]));
    let a = tape.param(Tensor5::full([2, 1, 1, 1, 1], 0.25));
    let w1 = tape.param(Tensor5::full([1, 2, 1, 1, 1], 0.5));
    let w2 = tape.param(Tensor5::full([2, 1, 1, 1, 1], -0.5));

    let y = tape.conv3d(xv, wv, None, 1, 1)?;
    let y = tape.instance_norm(y, g, b)?;
    let y = tape.prelu(y, a)?;
    let att = cse_block(&mut tape, y, w1, w2)?;
    let loss = tape.sum(att.out)?;
    tape.backward(loss)?;

    println!("loss {:.6}", tape.value(loss).item());
    println!("channel gate {:?}", tape.value(att.gate).data());
    println!("|dL/dw| max {:.4e}", tape.grad(wv).map(|t| t.max_abs()).unwrap_or(0.0));

    let report = grad_check(
        "conv",
        |t, v| {
            let y = t.conv3d(v[0], v[1], None, 1, 1)?;
            let y = t.tanh(y)?;
            t.sum(y)
        },
        &[x, w],
        &[true, true],
        &GradCheckConfig::f64_mode(),
    )?;
    println!("grad check: {} coordinates, max rel err {:.2e}, pass {}", report.checked, report.max_rel_err, report.pass);
    Ok(())
}
