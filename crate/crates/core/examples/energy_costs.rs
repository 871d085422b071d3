//! Analog versus digital energy per training step for the shipped presets and
//! for a MAC count derived from the D = 64 substrate.

use thermoprop::config::paper_e1;
use thermoprop::costs::{cost_preset, cost_report, n_mac_from_substrate, COST_PRESETS};

fn main() -> thermoprop::error::Result<()> {
    for name in COST_PRESETS {
        let r = cost_report(&cost_preset(name)?, Some(name))?;
        println!(
            "{name:<15} analog {:.3e} J  digital {:.3e} J  advantage {:.3e}  in band: {}",
            r.analog_step_joules,
            r.digital_step_joules,
            r.advantage.unwrap_or(f64::NAN),
            r.within_band
        );
    }
    let spec = paper_e1().build_substrate()?;
    let mut p = cost_preset("representative")?;
    p.n_mac = n_mac_from_substrate(&spec);
    p.n_cells = spec.dim() as f64;
    let r = cost_report(&p, Some("D=64 substrate"))?;
    println!(
        "D=64 substrate  n_mac {:.0}  analog {:.3e} J  digital {:.3e} J  advantage {:.3e}",
        p.n_mac,
        r.analog_step_joules,
        r.digital_step_joules,
        r.advantage.unwrap_or(f64::NAN)
    );
    Ok(())
}
