//! Tile a 48^3 volume with 32^3 patches at stride 16, average the overlaps,
//! then threshold and keep the largest component.

use fda::data::Case;
use fda::infer::{postprocess, predict_tiled, tile_origins, InferConfig};
use fda::model::{FdaConfig, FdaModel};
use fda::phantom::{generate_phantom, PhantomSpec};
use fda::volcore::Volume;

fn main() -> fda::Result<()> {
    let cfg = InferConfig::default();
    println!("tile origins per axis: {:?}", tile_origins(48, cfg.patch[0], cfg.stride[0]));

    let sample = generate_phantom(&PhantomSpec::toy(4))?;
    let case = Case::from_sample("p", &sample)?;

    // an untrained model gives a smooth map around 0.5
    let model = FdaModel::new(FdaConfig::toy(), 0)?;
    let prob = predict_tiled(&case.image, case.shape, &cfg, |t| model.predict_noisy(t))?;
    let mean = prob.iter().map(|v| *v as f64).sum::<f64>() / prob.len() as f64;
    println!("untrained mean probability {mean:.3}");

    // the reference mask blurred by tiling is recovered by postprocessing
    let soft: Vec<f32> = case.mask.iter().map(|&m| if m != 0 { 0.9 } else { 0.1 }).collect();
    let tiled = predict_tiled(&soft, case.shape, &cfg, |t| Ok(t.clone()))?;
    let mask = postprocess(&Volume::image(case.shape, case.spacing, tiled)?, cfg.threshold)?;
    println!("recovered {} of {} airway voxels", mask.foreground_count(), sample.mask.foreground_count());
    Ok(())
}
