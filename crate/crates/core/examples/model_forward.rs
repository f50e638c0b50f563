//! Build the toy dual-stream network, list its parameter groups and run the
//! clean and noisy paths on one 32^3 patch.

use fda::autodiff::Tensor5;
use fda::data::Case;
use fda::model::{FdaConfig, FdaModel};
use fda::phantom::{generate_phantom, PhantomSpec};
use fda::train::crop;

fn main() -> fda::Result<()> {
    let model = FdaModel::new(FdaConfig::toy(), 0)?;
    println!("{} parameters in {} tensors", model.params.numel(), model.params.len());
    for (group, names) in model.param_groups() {
        let n: usize = names.iter().map(|n| model.params.get(n).map_or(0, |t| t.numel())).sum();
        println!("  {group:<10} {:>3} tensors {n:>8} values", names.len());
    }

    let case = Case::from_sample("p", &generate_phantom(&PhantomSpec::toy(1))?)?;
    let patch = crop(&case, 0, [8, 8, 8], [32, 32, 32])?;
    let x: Tensor5<f32> = patch.image_tensor();

    let t = std::time::Instant::now();
    let sdm = model.predict_clean(&x)?;
    let prob = model.predict_noisy(&x)?;
    let range = |v: &[f32]| v.iter().fold((f32::MAX, f32::MIN), |(a, b), x| (a.min(*x), b.max(*x)));
    println!("clean path (signed distance) range {:?}", range(sdm.data()));
    println!("noisy path (probability) range {:?}", range(prob.data()));
    println!("both paths in {:.2?}", t.elapsed());

    let single = FdaModel::new(FdaConfig { use_noisy_stream: false, ..FdaConfig::toy() }, 0)?;
    println!("without the noisy encoder: {} parameters", single.params.numel());
    Ok(())
}
