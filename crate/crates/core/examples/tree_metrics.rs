//! Thin a phantom airway to its centreline, split it into branches, and
//! score a prediction that misses one subtree.

use fda::metrics::{centerline_from_mask, dsc, evaluate, skeletonize, MetricsConfig};
use fda::phantom::{generate_phantom, PhantomSpec};
use fda::volcore::Volume;

fn main() -> fda::Result<()> {
    let p = generate_phantom(&PhantomSpec::toy(2))?;
    let (shape, spacing) = (p.mask.shape(), p.mask.spacing());
    let mask = p.mask.as_mask()?;

    let skel = skeletonize(mask, shape)?;
    println!("mask {} voxels, skeleton {}", p.mask.foreground_count(), skel.iter().filter(|v| **v != 0).count());
    let branches = centerline_from_mask(mask, shape, spacing, 3.0)?;
    for (i, b) in branches.branches.iter().enumerate() {
        println!("  branch {i}: {} voxels, {:.1} mm", b.voxels.len(), b.length);
    }

    // cut everything below z = 30
    let cut: Vec<u8> = mask.iter().enumerate().map(|(i, &m)| if i / (shape[1] * shape[2]) < 30 { m } else { 0 }).collect();
    let pred = Volume::mask(shape, spacing, cut)?;
    let r = evaluate(&pred, &p.mask, Some(&p.centerline), &MetricsConfig::default())?;
    println!("Length {:.1}%  Branch {:.1}%  DSC {:.1}%", r.length_rate, r.branch_rate, r.dsc);
    println!("detected {:?}", r.branch_detected);
    println!("self DSC {:.1}", dsc(mask, mask));
    Ok(())
}
