//! Estimator bias against the nudge strength with log-log slopes. Runs the
//! D = 16 preset by default; pass a preset name for another.

use thermoprop::config::preset;
use thermoprop::experiments::{run_e2, Report};

fn main() -> thermoprop::error::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "desk-small".into());
    let report = run_e2(&preset(&name)?)?;
    print!("{}", report.summary());
    for c in &report.curves {
        println!("\n{}", c.estimator.as_str());
        for (b, e) in c.betas.iter().zip(&c.bias) {
            println!("  beta {b:.3e}  bias {e:.4e}");
        }
    }
    Ok(())
}
