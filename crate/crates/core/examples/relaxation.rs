//! Deterministic and Langevin relaxation of the free phase, with the energy
//! trajectory written as CSV.

use thermoprop::config::desk_small;
use thermoprop::dynamics::{free_phase, write_trajectory, RelaxationConfig};

fn main() -> thermoprop::error::Result<()> {
    let spec = desk_small().build_substrate()?;
    let y_tilde = [0.4, -0.3, 0.2, 0.1];
    let sigma = 0.5;

    let exact = free_phase(&spec, &y_tilde, sigma, &RelaxationConfig::exact(), None)?;
    println!(
        "exact:    steps {:>5}  |grad| {:.2e}  readout {:.5?}",
        exact.steps_used,
        exact.final_grad_norm,
        exact.output_block(&spec).as_slice()
    );

    let finite = RelaxationConfig {
        record_trajectory: true,
        ..RelaxationConfig::finite(300)
    };
    let k300 = free_phase(&spec, &y_tilde, sigma, &finite, None)?;
    println!(
        "K = 300:  step h {:.4}  |grad| {:.2e}  readout {:.5?}",
        k300.step_size,
        k300.final_grad_norm,
        k300.output_block(&spec).as_slice()
    );

    let noisy = RelaxationConfig::langevin(4000, 1e4, 100.0, 7);
    let lang = free_phase(&spec, &y_tilde, sigma, &noisy, None)?;
    println!(
        "Langevin: beta_phys 1e4, tau 100  time-averaged readout {:.5?}",
        lang.output_block(&spec).as_slice()
    );

    println!("\nfirst rows of the K = 300 trajectory:");
    let mut buf = Vec::new();
    write_trajectory(&mut buf, k300.trajectory.as_deref().unwrap_or(&[]))?;
    for line in String::from_utf8_lossy(&buf).lines().take(6) {
        println!("{line}");
    }
    Ok(())
}
