//! Langevin bias/variance sweep of the symmetric estimator and the predicted
//! optimal nudge. Writes tables and an SVG plot under ./runs.

use thermoprop::config::sweep_d8;
use thermoprop::experiments::{run_e3_sweep, write_report, Report};

fn main() -> thermoprop::error::Result<()> {
    let report = run_e3_sweep(&sweep_d8())?;
    print!("{}", report.summary());
    println!("{:>10} {:>12} {:>12} {:>12}", "beta", "variance", "bias^2", "mse");
    for i in 0..report.betas.len() {
        println!(
            "{:>10.3e} {:>12.4e} {:>12.4e} {:>12.4e}",
            report.betas[i],
            report.variance[i],
            report.bias_exact[i].powi(2),
            report.mse[i]
        );
    }
    let dir = write_report(std::path::Path::new("runs"), &report)?;
    println!("wrote {}", dir.display());
    Ok(())
}
