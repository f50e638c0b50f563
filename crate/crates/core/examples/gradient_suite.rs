//! Finite-difference check of every primitive, both losses and both network
//! paths.

use fda::autodiff::GradCheckConfig;
use fda::gradsuite::{format_table, run_all};

fn main() -> fda::Result<()> {
    let reports = run_all(&GradCheckConfig::f64_mode())?;
    print!("{}", format_table(&reports));
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(())
}
