//! Denoising-score-matching training with symmetric EqProp next to an
//! oracle-gradient baseline on the D = 16 preset.

use thermoprop::config::desk_small;
use thermoprop::experiments::{run_e3_training, Report};

fn main() -> thermoprop::error::Result<()> {
    let mut cfg = desk_small();
    if let Some(n) = std::env::args().nth(1) {
        cfg.train.steps = n.parse().expect("step count");
    }
    let report = run_e3_training(&cfg)?;
    for s in report.steps.iter().step_by(10) {
        println!(
            "step {:>4}  eqprop {:.5}  oracle {:.5}  alignment {}",
            s.step,
            s.loss_eqprop,
            s.loss_oracle_baseline,
            s.alignment.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
    print!("{}", report.summary());
    Ok(())
}
