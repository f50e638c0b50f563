//! Generate a clean airway phantom and a noisy copy of it.
//!
//! ```bash
//! cargo run --example phantom_generate -- 7 /tmp/phantoms
//! ```

use std::path::PathBuf;

use fda::data::save_sample;
use fda::phantom::{corrupt_to_noisy, generate_phantom, NoiseSpec, PhantomSpec};

fn main() -> fda::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out: Option<PathBuf> = args.next().map(PathBuf::from);

    let spec = PhantomSpec::toy(seed);
    let clean = generate_phantom(&spec)?;
    let noisy = corrupt_to_noisy(&clean, &NoiseSpec::toy(seed))?;

    println!("shape {:?}, depth {}, {} branches", spec.shape, spec.depth, clean.centerline.len());
    println!("airway voxels: {}", clean.mask.foreground_count());
    for (i, b) in clean.centerline.iter().enumerate() {
        println!("  branch {i}: generation {}, parent {:?}, {} points", b.generation, b.parent, b.points.len());
    }
    let mean = |v: &[f32]| v.iter().map(|x| *x as f64).sum::<f64>() / v.len() as f64;
    println!("mean HU clean {:.1}, noisy {:.1}", mean(clean.image.as_f32()?), mean(noisy.image.as_f32()?));

    if let Some(dir) = out {
        save_sample(&dir.join("clean"), &clean)?;
        save_sample(&dir.join("noisy"), &noisy)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
