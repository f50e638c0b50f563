//! Signed distance map of a phantom airway mask, in voxel units and
//! normalised into [-1, 1].

use fda::phantom::{generate_phantom, PhantomSpec};
use fda::sdm::{sdm_compute, signed_squared_distances, Normalization, SdmOptions};

fn main() -> fda::Result<()> {
    let p = generate_phantom(&PhantomSpec::toy(3))?;
    let shape = p.mask.shape();
    let mask = p.mask.as_mask()?;

    let sq = signed_squared_distances(mask, shape)?;
    let inside = sq.iter().filter(|v| **v < 0).count();
    let surface = sq.iter().filter(|v| **v == 0).count();
    println!("interior {inside}, surface {surface}, exterior {}", sq.len() - inside - surface);

    for mode in [Normalization::TwoSided, Normalization::SingleScale] {
        let s = sdm_compute(&p.mask, SdmOptions { normalization: mode, ..Default::default() })?;
        let (lo, hi) = s.values().iter().fold((f32::MAX, f32::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        println!("{mode:?}: max_in {:.3}, max_out {:.3}, range [{lo:.3}, {hi:.3}]", s.max_in, s.max_out);
    }

    // a line through the root branch
    let s = sdm_compute(&p.mask, SdmOptions::default())?;
    let (z, y) = (6, shape[1] / 2);
    let row: Vec<String> = (0..shape[2]).step_by(3).map(|x| format!("{:+.2}", s.values()[p.mask.index(z, y, x)])).collect();
    println!("z={z} y={y}: {}", row.join(" "));
    Ok(())
}
