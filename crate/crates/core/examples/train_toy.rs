//! Train the toy model on synthetic phantoms and write checkpoints.
//!
//! ```bash
//! cargo run --release --example train_toy -- 60 /tmp/fda_train
//! ```

use std::path::PathBuf;

use fda::data::Case;
use fda::phantom::{corrupt_to_noisy, generate_phantom, NoiseSpec, PhantomSpec};
use fda::train::{fit_with, TrainConfig};

fn main() -> fda::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);
    let out: Option<PathBuf> = args.next().map(PathBuf::from);

    let clean: Vec<Case> = (0..2)
        .map(|i| Case::from_sample(format!("clean_{i}"), &generate_phantom(&PhantomSpec::toy(i))?))
        .collect::<fda::Result<_>>()?;
    let noisy_src = generate_phantom(&PhantomSpec::toy(50))?;
    let noisy = vec![Case::from_sample("noisy_0", &corrupt_to_noisy(&noisy_src, &NoiseSpec::toy(50))?)?];

    let steps_per_epoch = 10;
    let epochs = steps.div_ceil(steps_per_epoch).max(1);
    let cfg = TrainConfig {
        epochs,
        steps_per_epoch,
        lr_drop_epoch: epochs.saturating_sub(1).max(1),
        checkpoint_every: epochs.max(1),
        ..TrainConfig::toy()
    };
    let outcome = fit_with(&cfg, &clean, &noisy, out.as_deref(), |l| {
        if l.step % 5 == 0 {
            println!("step {:>4} l_seg {:+.4} l_reg {:+.4} ({:.1}s)", l.step, l.l_seg, l.l_reg, l.wall_time);
        }
    })?;
    for p in &outcome.checkpoints {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}
