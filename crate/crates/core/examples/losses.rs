//! Segmentation and signed-distance losses on hand-made predictions.

use fda::autodiff::{Tape, Tensor5};
use fda::loss::{l_reg, l_seg, FocalMode, LossConfig};

fn main() -> fda::Result<()> {
    let shape = [1, 1, 4, 4, 4];
    let g: Vec<f64> = (0..64).map(|i| f64::from(u8::from(i % 4 == 0))).collect();
    let gt = Tensor5::new(shape, g.clone())?;

    for (name, p) in [
        ("perfect", g.clone()),
        ("uncertain", vec![0.5; 64]),
        ("inverted", g.iter().map(|v| 1.0 - v).collect()),
    ] {
        for mode in [FocalMode::TwoSided, FocalMode::Literal] {
            let cfg = LossConfig { focal_mode: mode, ..Default::default() };
            let mut t = Tape::new();
            let pv = t.leaf(Tensor5::new(shape, p.clone())?, true);
            let l = l_seg(&mut t, pv, &gt, &cfg)?;
            println!("l_seg {name:<9} {mode:?}: dice {:+.4} focal {:.4}", l.first, l.second);
        }
    }

    let y: Vec<f64> = (0..64).map(|i| ((i as f64) / 32.0 - 1.0).clamp(-0.9, 0.9)).collect();
    let yt = Tensor5::new(shape, y.clone())?;
    for (name, f) in [("exact", y.clone()), ("sign flipped", y.iter().map(|v| -v).collect()), ("zero", vec![0.0; 64])] {
        let mut t = Tape::new();
        let fv = t.leaf(Tensor5::new(shape, f)?, true);
        let l = l_reg(&mut t, fv, &yt, &LossConfig::default())?;
        println!("l_reg {name:<12}: l1 {:.4} ratio {:+.4}", l.first, l.second);
    }
    Ok(())
}
