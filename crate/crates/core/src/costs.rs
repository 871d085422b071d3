//! Energy per training step: analog symmetric EqProp versus a digital
//! back-propagation step.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ThermoError};
use crate::substrate::SubstrateSpec;

/// Room-temperature `k_B T` at 300 K, joules.
pub const KB_T_300K: f64 = 4.14e-21;
/// Energy per digital multiply-accumulate, joules.
pub const DEFAULT_E_MAC: f64 = 1e-11;
/// Advantage band the representative preset is checked against.
pub const ADVANTAGE_BAND: [f64; 2] = [1e3, 1e4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalParams {
    /// Noise energy per degree of freedom, joules.
    #[serde(rename = "kB_T", default = "default_kbt")]
    pub kb_t: f64,
    pub lambda_star: f64,
    pub n_cells: f64,
    /// Initial-distance constant of the per-cell form. The step formula
    /// corresponds to `c_init = 2`.
    #[serde(default = "default_c_init")]
    pub c_init: f64,
    pub n_mac: f64,
    #[serde(default = "default_e_mac")]
    pub e_mac: f64,
}

fn default_kbt() -> f64 {
    KB_T_300K
}

fn default_c_init() -> f64 {
    2.0
}

fn default_e_mac() -> f64 {
    DEFAULT_E_MAC
}

impl PhysicalParams {
    /// Positive and finite everywhere, except `n_mac` which may be zero.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kB_T", self.kb_t),
            ("lambda_star", self.lambda_star),
            ("n_cells", self.n_cells),
            ("c_init", self.c_init),
            ("e_mac", self.e_mac),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ThermoError::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.n_mac >= 0.0) || !self.n_mac.is_finite() {
            return Err(ThermoError::InvalidConfig(format!(
                "n_mac must be nonnegative, got {}",
                self.n_mac
            )));
        }
        Ok(())
    }
}

/// `3 · n_cells · kB_T / λ⋆`: free, +β and −β equilibrations.
pub fn analog_step_energy(p: &PhysicalParams) -> Result<f64> {
    p.validate()?;
    Ok(3.0 * p.n_cells * p.kb_t / p.lambda_star)
}

/// `(kB_T / 2λ⋆) · c_init` for one cell and one equilibration.
pub fn per_cell_energy(p: &PhysicalParams) -> Result<f64> {
    p.validate()?;
    Ok(p.kb_t / (2.0 * p.lambda_star) * p.c_init)
}

/// `n_mac · e_mac`.
pub fn digital_step_energy(p: &PhysicalParams) -> Result<f64> {
    p.validate()?;
    Ok(p.n_mac * p.e_mac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRatio {
    /// analog / digital
    pub ratio: f64,
    /// digital / analog
    pub advantage: f64,
}

pub fn advantage_ratio(p: &PhysicalParams) -> Result<AdvantageRatio> {
    let analog = analog_step_energy(p)?;
    let digital = digital_step_energy(p)?;
    if digital <= 0.0 {
        return Err(ThermoError::InvalidArgument(
            "digital step energy is zero; the ratio is undefined".into(),
        ));
    }
    Ok(AdvantageRatio {
        ratio: analog / digital,
        advantage: digital / analog,
    })
}

/// MACs of a matched digital step: forward and backward through every
/// factored coupling, `6 · Σ k (d_m + d_m')`.
pub fn n_mac_from_substrate(spec: &SubstrateSpec) -> f64 {
    let p = spec.partition();
    spec.couplings()
        .iter()
        .map(|c| {
            (6 * c.rank() * (p.module_sizes[c.source] + p.module_sizes[c.target])) as f64
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub preset: Option<String>,
    pub params: PhysicalParams,
    pub analog_step_joules: f64,
    pub per_cell_joules: f64,
    /// `3 · n_cells · per_cell`, the per-cell form summed over the step.
    pub analog_step_from_per_cell_joules: f64,
    pub digital_step_joules: f64,
    pub ratio: Option<f64>,
    pub advantage: Option<f64>,
    pub band: [f64; 2],
    pub within_band: bool,
    pub warnings: Vec<String>,
}

pub fn cost_report(p: &PhysicalParams, preset: Option<&str>) -> Result<CostReport> {
    let analog = analog_step_energy(p)?;
    let per_cell = per_cell_energy(p)?;
    let digital = digital_step_energy(p)?;
    let mut warnings = Vec::new();
    let adv = if digital > 0.0 {
        Some(advantage_ratio(p)?)
    } else {
        warnings.push("n_mac is zero: digital energy is 0 and the ratio is undefined".into());
        None
    };
    let within_band = adv.is_some_and(|a| a.advantage >= ADVANTAGE_BAND[0] && a.advantage <= ADVANTAGE_BAND[1]);
    if let Some(a) = adv {
        if !within_band {
            warnings.push(format!(
                "advantage {:.3e} lies outside [{:e}, {:e}]; these parameters are inconsistent with the projected band",
                a.advantage, ADVANTAGE_BAND[0], ADVANTAGE_BAND[1]
            ));
        }
    }
    if (p.c_init - 2.0).abs() > 1e-12 {
        warnings.push(format!(
            "c_init = {} differs from the value 2 implied by the step formula",
            p.c_init
        ));
    }
    Ok(CostReport {
        preset: preset.map(str::to_string),
        params: p.clone(),
        analog_step_joules: analog,
        per_cell_joules: per_cell,
        analog_step_from_per_cell_joules: 3.0 * p.n_cells * per_cell,
        digital_step_joules: digital,
        ratio: adv.map(|a| a.ratio),
        advantage: adv.map(|a| a.advantage),
        band: ADVANTAGE_BAND,
        within_band,
        warnings,
    })
}

pub const COST_PRESETS: [&str; 2] = ["representative", "thermal-limit"];

/// `representative`: 10⁶ cells at λ⋆ = 0.1 against 10¹⁰ MACs of 10⁻¹¹ J, with
/// an effective cell noise energy of 10⁻¹² J (capacitive-node scale).
/// `thermal-limit`: the same with `kB_T` at 300 K, which is far outside the band.
pub fn cost_preset(name: &str) -> Result<PhysicalParams> {
    let base = PhysicalParams {
        kb_t: 1e-12,
        lambda_star: 0.1,
        n_cells: 1e6,
        c_init: 2.0,
        n_mac: 1e10,
        e_mac: DEFAULT_E_MAC,
    };
    match name {
        "representative" => Ok(base),
        "thermal-limit" => Ok(PhysicalParams {
            kb_t: KB_T_300K,
            ..base
        }),
        _ => Err(ThermoError::InvalidConfig(format!(
            "unknown cost preset {name:?}; available: {}",
            COST_PRESETS.join(", ")
        ))),
    }
}
