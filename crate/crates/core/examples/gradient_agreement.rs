//! Cosine between each estimator and the oracle under a 300-step relaxation
//! budget (pass `exact` to use exact equilibria instead).

use thermoprop::config::{paper_e1, paper_exact};
use thermoprop::experiments::{run_e1, Report};

fn main() -> thermoprop::error::Result<()> {
    let cfg = match std::env::args().nth(1).as_deref() {
        Some("exact") => paper_exact(),
        _ => paper_e1(),
    };
    let cfg = thermoprop::config::RunConfig {
        seeds: (0..10).collect(),
        ..cfg
    };
    print!("{}", run_e1(&cfg)?.summary());
    Ok(())
}
