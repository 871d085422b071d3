//! Clamped relaxation of the substrate.
//!
//! Explicit Euler–Maruyama on the free coordinates:
//!
//! ```text
//! x ← x − h (∇E(x) + ∇E_extra(x)) + sqrt(2h / β_phys) ξ
//! ```
//!
//! Input coordinates never move. With `beta_phys = None` the update is plain
//! gradient descent; `newton_polish` then finishes with Newton steps so that
//! oracles and theory checks see equilibria at round-off accuracy.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ThermoError};
use crate::rng::normal;
use crate::substrate::{StateVector, SubstrateSpec};

const DIVERGENCE_NORM: f64 = 1e6;

/// Extra energy term added on top of the substrate energy during relaxation.
pub trait ExtraEnergy: Sync {
    fn energy(&self, spec: &SubstrateSpec, x: &DVector<f64>) -> f64;
    /// Adds `∇E_extra(x)` to `grad` (full length D).
    fn add_gradient(&self, spec: &SubstrateSpec, x: &DVector<f64>, grad: &mut DVector<f64>);
    /// Adds the free-block Hessian of the extra term to `hess`.
    fn add_hessian_free(&self, spec: &SubstrateSpec, x: &DVector<f64>, hess: &mut nalgebra::DMatrix<f64>);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxationConfig {
    /// Integrator step. `None` picks `0.1 / λ_max` at the start point.
    #[serde(default)]
    pub step_size: Option<f64>,
    /// Step budget K.
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    /// Physical inverse temperature; `None` means deterministic (β_phys = ∞).
    #[serde(default)]
    pub beta_phys: Option<f64>,
    /// Stop once the free-gradient norm drops to this value (deterministic only).
    #[serde(default)]
    pub convergence_tol: f64,
    /// Readout window τ in time units; 0 reads out the last state.
    #[serde(default)]
    pub readout_window: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub newton_polish: bool,
    #[serde(default)]
    pub record_trajectory: bool,
}

fn default_steps() -> usize {
    300
}

impl Default for RelaxationConfig {
    fn default() -> Self {
        Self::finite(300)
    }
}

impl RelaxationConfig {
    /// Fixed budget of `k` deterministic steps, no early stopping.
    pub fn finite(k: usize) -> Self {
        RelaxationConfig {
            step_size: None,
            max_steps: k,
            beta_phys: None,
            convergence_tol: 0.0,
            readout_window: 0.0,
            seed: 0,
            newton_polish: false,
            record_trajectory: false,
        }
    }

    /// Tight deterministic relaxation finished by Newton steps.
    pub fn exact() -> Self {
        RelaxationConfig {
            step_size: None,
            max_steps: 2_000,
            beta_phys: None,
            convergence_tol: 1e-8,
            readout_window: 0.0,
            seed: 0,
            newton_polish: true,
            record_trajectory: false,
        }
    }

    /// Langevin sampling with a readout window.
    pub fn langevin(k: usize, beta_phys: f64, readout_window: f64, seed: u64) -> Self {
        RelaxationConfig {
            step_size: None,
            max_steps: k,
            beta_phys: Some(beta_phys),
            convergence_tol: 0.0,
            readout_window,
            seed,
            newton_polish: false,
            record_trajectory: false,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.beta_phys.is_none()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RelaxationConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(h) = self.step_size {
            if !(h > 0.0) || !h.is_finite() {
                return Err(ThermoError::InvalidConfig("step_size must be positive".into()));
            }
        }
        if self.max_steps == 0 {
            return Err(ThermoError::InvalidConfig("max_steps must be at least 1".into()));
        }
        if let Some(b) = self.beta_phys {
            if !(b > 0.0) {
                return Err(ThermoError::InvalidConfig("beta_phys must be positive".into()));
            }
        }
        if !(self.readout_window >= 0.0) || !(self.convergence_tol >= 0.0) {
            return Err(ThermoError::InvalidConfig(
                "readout_window and convergence_tol must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Values pinned on input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Clamp {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Clamp {
    pub fn new(spec: &SubstrateSpec, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(ThermoError::DimensionMismatch {
                expected: indices.len(),
                got: values.len(),
            });
        }
        let input = spec.partition().input_range();
        if let Some(bad) = indices.iter().find(|i| !input.contains(i)) {
            return Err(ThermoError::InvalidArgument(format!(
                "clamp index {bad} is outside the input block"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ThermoError::NonFinite("clamp values"));
        }
        Ok(Clamp { indices, values })
    }

    /// Clamp carrying data `y_tilde` and, when the partition has one, `ln σ`.
    pub fn for_input(spec: &SubstrateSpec, y_tilde: &[f64], sigma: f64) -> Result<Self> {
        let p = spec.partition();
        if y_tilde.len() != p.data_dim() {
            return Err(ThermoError::DimensionMismatch {
                expected: p.data_dim(),
                got: y_tilde.len(),
            });
        }
        if !(sigma > 0.0) {
            return Err(ThermoError::InvalidArgument("sigma must be positive".into()));
        }
        let mut values = y_tilde.to_vec();
        if p.sigma_channel {
            values.push(sigma.ln());
        }
        Clamp::new(spec, (0..p.input_dim).collect(), values)
    }

    /// Clamp reproducing the whole input block of `x`.
    pub fn from_state(spec: &SubstrateSpec, x: &StateVector) -> Self {
        let r = spec.partition().input_range();
        Clamp {
            indices: r.clone().collect(),
            values: x.as_slice()[r].to_vec(),
        }
    }

    fn apply(&self, x: &mut DVector<f64>) {
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            x[i] = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub energy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub state: StateVector,
    /// Mean over the readout window; equals `state` when τ = 0.
    pub time_avg_state: StateVector,
    pub final_grad_norm: f64,
    pub steps_used: usize,
    pub converged: bool,
    pub step_size: f64,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
}

impl EquilibriumResult {
    /// State used by estimators: the time average (the state itself when τ = 0).
    pub fn readout(&self) -> &StateVector {
        &self.time_avg_state
    }

    pub fn output_block(&self, spec: &SubstrateSpec) -> DVector<f64> {
        let r = spec.partition().output_range();
        self.state.rows(r.start, r.len()).into_owned()
    }
}

fn free_norm(spec: &SubstrateSpec, g: &DVector<f64>) -> f64 {
    let r = spec.partition().free_range();
    g.rows(r.start, r.len()).norm()
}

fn total_grad(
    spec: &SubstrateSpec,
    extra: Option<&dyn ExtraEnergy>,
    x: &DVector<f64>,
    g: &mut DVector<f64>,
) {
    spec.grad_x_into(x, g);
    if let Some(e) = extra {
        e.add_gradient(spec, x, g);
    }
}

fn total_energy(spec: &SubstrateSpec, extra: Option<&dyn ExtraEnergy>, x: &DVector<f64>) -> f64 {
    spec.energy_raw(x) + extra.map_or(0.0, |e| e.energy(spec, x))
}

/// Relaxes from `init` with the given clamp.
pub fn relax(
    spec: &SubstrateSpec,
    clamp: &Clamp,
    init: &StateVector,
    cfg: &RelaxationConfig,
    extra: Option<&dyn ExtraEnergy>,
) -> Result<EquilibriumResult> {
    cfg.validate()?;
    let d = spec.dim();
    if init.len() != d {
        return Err(ThermoError::DimensionMismatch {
            expected: d,
            got: init.len(),
        });
    }
    let free = spec.partition().free_range();
    let mut x: DVector<f64> = (**init).clone();
    clamp.apply(&mut x);

    let lambda_max = spec.lambda_max_estimate(&x);
    let bound = 2.0 / lambda_max;
    let h = match cfg.step_size {
        Some(h) => {
            if cfg.is_deterministic() && h >= bound {
                return Err(ThermoError::InvalidConfig(format!(
                    "step_size {h:.3e} violates the stability bound 2/lambda_max = {bound:.3e}"
                )));
            }
            h
        }
        None => 0.1 / lambda_max,
    };
    let amp = cfg.beta_phys.map(|b| (2.0 * h / b).sqrt());
    let window = if cfg.readout_window > 0.0 {
        (cfg.readout_window / h).ceil() as usize
    } else {
        0
    };
    if window > cfg.max_steps {
        return Err(ThermoError::InvalidConfig(format!(
            "readout window needs {window} steps but max_steps is {}",
            cfg.max_steps
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = DVector::zeros(d);
    let mut sum = DVector::zeros(d);
    let mut averaged = 0usize;
    let mut steps_used = 0usize;
    let mut trajectory = cfg.record_trajectory.then(Vec::new);
    let mut stopped_early = false;

    for t in 0..cfg.max_steps {
        total_grad(spec, extra, &x, &mut g);
        let gn = free_norm(spec, &g);
        if !gn.is_finite() {
            return Err(ThermoError::NonFinite("gradient"));
        }
        if let Some(tr) = trajectory.as_mut() {
            tr.push(TrajectoryPoint {
                step: t,
                energy: total_energy(spec, extra, &x),
                grad_norm: gn,
            });
        }
        if amp.is_none() && gn <= cfg.convergence_tol {
            stopped_early = true;
            break;
        }
        match amp {
            None => {
                for i in free.clone() {
                    x[i] -= h * g[i];
                }
            }
            Some(a) => {
                for i in free.clone() {
                    x[i] += -h * g[i] + a * normal(&mut rng);
                }
            }
        }
        steps_used = t + 1;
        let norm = x.norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(ThermoError::Divergence {
                step: steps_used,
                norm,
                step_size: h,
                bound,
            });
        }
        if window > 0 && steps_used + window > cfg.max_steps {
            sum += &x;
            averaged += 1;
        }
    }

    if cfg.newton_polish && cfg.is_deterministic() {
        newton_polish(spec, extra, &mut x)?;
    }

    total_grad(spec, extra, &x, &mut g);
    let final_grad_norm = free_norm(spec, &g);
    if let Some(tr) = trajectory.as_mut() {
        tr.push(TrajectoryPoint {
            step: steps_used,
            energy: total_energy(spec, extra, &x),
            grad_norm: final_grad_norm,
        });
    }
    let time_avg = if window > 0 && !stopped_early && averaged > 0 && !cfg.newton_polish {
        let mut avg = sum / averaged as f64;
        // Inputs never move; copy them so the average keeps them bit-exact.
        for i in spec.partition().input_range() {
            avg[i] = x[i];
        }
        avg
    } else {
        x.clone()
    };
    Ok(EquilibriumResult {
        state: StateVector::new(x)?,
        time_avg_state: StateVector::new(time_avg)?,
        final_grad_norm,
        steps_used,
        converged: final_grad_norm <= cfg.convergence_tol,
        step_size: h,
        trajectory,
    })
}

fn newton_polish(
    spec: &SubstrateSpec,
    extra: Option<&dyn ExtraEnergy>,
    x: &mut DVector<f64>,
) -> Result<()> {
    let free = spec.partition().free_range();
    let d = spec.dim();
    let mut g = DVector::zeros(d);
    total_grad(spec, extra, x, &mut g);
    let mut gn = free_norm(spec, &g);
    for _ in 0..50 {
        if gn == 0.0 {
            break;
        }
        let mut hess = spec.hessian_free_raw(x);
        if let Some(e) = extra {
            e.add_hessian_free(spec, x, &mut hess);
        }
        let chol = hess.cholesky().ok_or(ThermoError::NotPositiveDefinite)?;
        let rhs = g.rows(free.start, free.len()).into_owned();
        let delta = chol.solve(&rhs);
        // Halve the step until the gradient norm drops; give up at round-off.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial = x.clone();
            for (f, i) in free.clone().enumerate() {
                trial[i] -= t * delta[f];
            }
            total_grad(spec, extra, &trial, &mut g);
            let next = free_norm(spec, &g);
            if next < gn {
                accepted = Some((trial, next));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, next)) => {
                *x = trial;
                gn = next;
            }
            None => break,
        }
    }
    Ok(())
}

/// Free phase: clamp `ỹ` (and `ln σ`) and relax from zero or a warm start.
pub fn free_phase(
    spec: &SubstrateSpec,
    y_tilde: &[f64],
    sigma: f64,
    cfg: &RelaxationConfig,
    warm_start: Option<&StateVector>,
) -> Result<EquilibriumResult> {
    let clamp = Clamp::for_input(spec, y_tilde, sigma)?;
    let init = match warm_start {
        Some(w) => w.clone(),
        None => StateVector::zeros(spec.dim()),
    };
    relax(spec, &clamp, &init, cfg, None)
}

/// Writes `step,energy,grad_norm` rows.
pub fn write_trajectory_csv(path: &Path, trajectory: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in trajectory {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Same as [`write_trajectory_csv`] but to any writer.
pub fn write_trajectory<W: Write>(out: W, trajectory: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in trajectory {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
