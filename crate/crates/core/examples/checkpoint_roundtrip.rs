//! Save a model with its optimizer state and load it back.

use fda::autodiff::Checkpoint;
use fda::model::{FdaConfig, FdaModel};
use fda::train::{checkpoint_of, model_from_checkpoint, AdamState};

fn main() -> fda::Result<()> {
    let model = FdaModel::new(FdaConfig::toy(), 11)?;
    let adam = AdamState::new(&model.params);
    let ck = checkpoint_of(&model, &adam, 0)?;

    let dir = std::env::temp_dir().join("fda_checkpoint_example");
    let path = dir.join("ckpt_0.fda");
    ck.save(&path)?;
    let bytes = std::fs::metadata(&path).map_err(|e| fda::FdaError::io(&path, e))?.len();
    println!("wrote {} ({bytes} bytes, {} tensors)", path.display(), ck.manifest.params.len());

    let (back, _) = model_from_checkpoint(&Checkpoint::load(&path)?)?;
    println!("identical after reload: {}", back == model);
    Ok(())
}
