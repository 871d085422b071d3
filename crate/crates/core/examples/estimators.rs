//! One-sided and symmetric EqProp estimates against the oracle gradient for
//! one DSM sample, and the local factor update of one coupling plane.

use thermoprop::config::desk_small;
use thermoprop::dsm::{sample_batch, TaskConfig};
use thermoprop::dynamics::{free_phase, RelaxationConfig};
use thermoprop::eqprop::{estimate, local_coupling_update, nudged_phase, Estimator};
use thermoprop::oracle::{compare, oracle_implicit};

fn main() -> thermoprop::error::Result<()> {
    let spec = desk_small().build_substrate()?;
    let sample = &sample_batch(&TaskConfig::new(4, 1, 3))?[0];
    let cost = sample.cost();
    let cfg = RelaxationConfig::exact();
    let free = free_phase(&spec, sample.y_tilde.as_slice(), sample.sigma, &cfg, None)?;
    let oracle = oracle_implicit(&spec, &cost, &free)?;

    println!("sigma = {:.3}", sample.sigma);
    println!("{:>8} {:>12} {:>12} {:>12}", "beta", "estimator", "cosine", "rel error");
    for beta in [1e-1, 1e-2, 1e-3] {
        for kind in [Estimator::OneSided, Estimator::Symmetric] {
            let g = estimate(kind, &spec, &cost, &free, beta, &cfg)?;
            let r = compare(&g, &oracle)?;
            println!(
                "{beta:>8.0e} {:>12} {:>12.8} {:>12.3e}",
                kind.tag().as_str(),
                r.cosine_similarity.unwrap_or(f64::NAN),
                r.rel_l2_error.unwrap_or(f64::NAN)
            );
        }
    }

    // The same coupling gradient from module readouts only.
    let beta = 1e-3;
    let plus = nudged_phase(&spec, &cost, &free, beta, &cfg, 1)?;
    let minus = nudged_phase(&spec, &cost, &free, -beta, &cfg, 2)?;
    let c = &spec.couplings()[0];
    let delta = local_coupling_update(spec.partition(), &plus, &minus, c, 2.0 * beta);
    println!(
        "\ncoupling ({}, {}): |dU| = {:.5}, |dV| = {:.5}",
        c.source,
        c.target,
        delta.du.norm(),
        delta.dv.norm()
    );
    Ok(())
}
