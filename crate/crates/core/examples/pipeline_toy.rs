//! The whole experiment: phantoms, training, tiled inference and scoring.
//! Pass a step count to shorten training; the default is the full toy
//! schedule (300 steps, a few minutes in release mode).
//!
//! ```bash
//! cargo run --release --example pipeline_toy -- 40
//! ```

use fda::pipeline::{run_pipeline, PipelineConfig};

fn main() -> fda::Result<()> {
    let mut cfg = PipelineConfig::toy(1);
    if let Some(steps) = std::env::args().nth(1).and_then(|s| s.parse::<usize>().ok()) {
        cfg.train.epochs = steps.div_ceil(cfg.train.steps_per_epoch).max(1);
        cfg.train.lr_drop_epoch = cfg.train.epochs;
    }
    let out = run_pipeline(&cfg, None, |l| {
        if l.step % 15 == 0 {
            println!("step {:>4} l_seg {:+.4} l_reg {:+.4}", l.step, l.l_seg, l.l_reg);
        }
    })?;
    for c in &out.report.cases {
        println!("{}: Length {:.1} Branch {:.1} DSC {:.1}", c.name, c.report.length_rate, c.report.branch_rate, c.report.dsc);
    }
    let m = out.report.mean;
    println!("mean: Length {:.1} Branch {:.1} DSC {:.1}", m.length_rate, m.branch_rate, m.dsc);
    Ok(())
}
