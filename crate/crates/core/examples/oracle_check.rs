//! Implicit-differentiation gradient against central finite differences of
//! the relaxed loss, on a quartic substrate.

use thermoprop::config::desk_small;
use thermoprop::dsm::{sample_batch, TaskConfig};
use thermoprop::dynamics::{free_phase, RelaxationConfig};
use thermoprop::oracle::{compare, oracle_fd, oracle_implicit};
use thermoprop::substrate::PerCoordinate;

fn main() -> thermoprop::error::Result<()> {
    let mut sub = desk_small().substrate_config()?;
    sub.base.kappa = PerCoordinate::Uniform(0.2);
    let spec = sub.build()?;
    let cfg = RelaxationConfig::exact();
    for (i, s) in sample_batch(&TaskConfig::new(4, 3, 5))?.iter().enumerate() {
        let cost = s.cost();
        let eq = free_phase(&spec, s.y_tilde.as_slice(), s.sigma, &cfg, None)?;
        let imp = oracle_implicit(&spec, &cost, &eq)?;
        let fd = oracle_fd(&spec, s.y_tilde.as_slice(), s.sigma, &cost, &cfg, 1e-5)?;
        let r = compare(&imp, &fd)?;
        println!(
            "sample {i}: {} parameters, cosine {:.10}, rel L2 error {:.2e}",
            imp.values.len(),
            r.cosine_similarity.unwrap_or(f64::NAN),
            r.rel_l2_error.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
