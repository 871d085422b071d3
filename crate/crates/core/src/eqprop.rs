//! Readout cost, nudged phases and the Equilibrium Propagation estimators.
//!
//! One-sided: `g = (∇_θE(x^β) − ∇_θE(x^0)) / β`.
//! Symmetric: `g = (∇_θE(x^β) − ∇_θE(x^−β)) / 2β`.
//!
//! Nudged phases always warm-start from the free-phase state and reuse its
//! integrator step, so the two phases of the symmetric estimator see the same
//! residual drift.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{relax, Clamp, EquilibriumResult, ExtraEnergy, RelaxationConfig};
use crate::error::{Result, ThermoError};
use crate::rng::derive_seed;
use crate::substrate::{BlockPartition, LowRankCoupling, StateVector, SubstrateSpec};

/// `C(x_O) = (σ²/2) ‖x_O − target‖²` with `target = (y − ỹ)/σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutCost {
    pub target: DVector<f64>,
    /// σ²
    pub weight: f64,
}

impl ReadoutCost {
    pub fn new(target: DVector<f64>, sigma: f64) -> Self {
        ReadoutCost {
            target,
            weight: sigma * sigma,
        }
    }

    pub fn value(&self, x_out: &DVector<f64>) -> f64 {
        0.5 * self.weight * (x_out - &self.target).norm_squared()
    }

    pub fn gradient(&self, x_out: &DVector<f64>) -> DVector<f64> {
        (x_out - &self.target) * self.weight
    }

    /// Cost of the output block of a full state.
    pub fn value_at(&self, spec: &SubstrateSpec, x: &DVector<f64>) -> f64 {
        let r = spec.partition().output_range();
        let mut s = 0.0;
        for (i, t) in r.zip(self.target.iter()) {
            let d = x[i] - t;
            s += d * d;
        }
        0.5 * self.weight * s
    }

    fn check(&self, spec: &SubstrateSpec) -> Result<()> {
        let n = spec.partition().output_dim;
        if self.target.len() != n {
            return Err(ThermoError::DimensionMismatch {
                expected: n,
                got: self.target.len(),
            });
        }
        Ok(())
    }
}

/// `β C(x_O)` as an extra relaxation energy.
#[derive(Debug, Clone, Copy)]
pub struct Nudge<'a> {
    pub cost: &'a ReadoutCost,
    pub beta: f64,
}

impl ExtraEnergy for Nudge<'_> {
    fn energy(&self, spec: &SubstrateSpec, x: &DVector<f64>) -> f64 {
        self.beta * self.cost.value_at(spec, x)
    }

    fn add_gradient(&self, spec: &SubstrateSpec, x: &DVector<f64>, grad: &mut DVector<f64>) {
        let s = self.beta * self.cost.weight;
        for (i, t) in spec.partition().output_range().zip(self.cost.target.iter()) {
            grad[i] += s * (x[i] - t);
        }
    }

    fn add_hessian_free(&self, spec: &SubstrateSpec, _x: &DVector<f64>, hess: &mut DMatrix<f64>) {
        let p = spec.partition();
        let s = self.beta * self.cost.weight;
        for i in p.output_range() {
            let f = i - p.input_dim;
            hess[(f, f)] += s;
        }
    }
}

/// Gradient of the nudge term over the free coordinates: `β σ² (x_O − target)`
/// on the output slots and zero on hidden slots.
pub fn nudge_gradient(
    spec: &SubstrateSpec,
    cost: &ReadoutCost,
    x: &StateVector,
    beta: f64,
) -> Result<DVector<f64>> {
    cost.check(spec)?;
    if x.len() != spec.dim() {
        return Err(ThermoError::DimensionMismatch {
            expected: spec.dim(),
            got: x.len(),
        });
    }
    let p = spec.partition();
    let mut out = DVector::zeros(p.free_dim());
    let s = beta * cost.weight;
    for (k, i) in p.output_range().enumerate() {
        out[p.hidden_dim + k] = s * (x[i] - cost.target[k]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    OneSided,
    Symmetric,
    OracleImplicit,
    OracleFd,
}

impl EstimatorTag {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorTag::OneSided => "one_sided",
            EstimatorTag::Symmetric => "symmetric",
            EstimatorTag::OracleImplicit => "oracle_implicit",
            EstimatorTag::OracleFd => "oracle_fd",
        }
    }
}

/// Parameter gradient in canonical θ order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub values: DVector<f64>,
    pub tag: EstimatorTag,
    /// Nudge used; 0 for oracles.
    pub beta: f64,
    /// Leading entries that belong to coupling factors.
    pub coupling_len: usize,
}

impl GradientEstimate {
    pub fn new(
        values: DVector<f64>,
        tag: EstimatorTag,
        beta: f64,
        coupling_len: usize,
    ) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ThermoError::NonFinite("gradient estimate"));
        }
        Ok(GradientEstimate {
            values,
            tag,
            beta,
            coupling_len,
        })
    }

    /// Averages estimates sharing a tag and layout.
    pub fn mean(items: &[GradientEstimate]) -> Result<GradientEstimate> {
        let first = items
            .first()
            .ok_or_else(|| ThermoError::InvalidArgument("empty estimate list".into()))?;
        let mut acc = DVector::zeros(first.values.len());
        for g in items {
            if g.values.len() != acc.len() {
                return Err(ThermoError::DimensionMismatch {
                    expected: acc.len(),
                    got: g.values.len(),
                });
            }
            acc += &g.values;
        }
        acc /= items.len() as f64;
        GradientEstimate::new(acc, first.tag, first.beta, first.coupling_len)
    }
}

/// Which EqProp estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    OneSided,
    Symmetric,
}

impl Estimator {
    pub fn tag(self) -> EstimatorTag {
        match self {
            Estimator::OneSided => EstimatorTag::OneSided,
            Estimator::Symmetric => EstimatorTag::Symmetric,
        }
    }
}

const STREAM_PLUS: u64 = 0x5EED_0001;
const STREAM_MINUS: u64 = 0x5EED_0002;

/// Relaxes `E + βC` from the free-phase state. `stream` separates the noise
/// of different phases that share `cfg.seed`.
pub fn nudged_phase(
    spec: &SubstrateSpec,
    cost: &ReadoutCost,
    free_eq: &EquilibriumResult,
    beta: f64,
    cfg: &RelaxationConfig,
    stream: u64,
) -> Result<EquilibriumResult> {
    cost.check(spec)?;
    let clamp = Clamp::from_state(spec, &free_eq.state);
    let phase_cfg = RelaxationConfig {
        step_size: cfg.step_size.or(Some(free_eq.step_size)),
        seed: derive_seed(cfg.seed, stream),
        record_trajectory: false,
        ..cfg.clone()
    };
    relax(
        spec,
        &clamp,
        &free_eq.state,
        &phase_cfg,
        Some(&Nudge { cost, beta }),
    )
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(ThermoError::InvalidArgument(format!(
            "nudge beta must be positive, got {beta}"
        )));
    }
    Ok(())
}

pub fn estimate_one_sided(
    spec: &SubstrateSpec,
    cost: &ReadoutCost,
    free_eq: &EquilibriumResult,
    beta: f64,
    cfg: &RelaxationConfig,
) -> Result<GradientEstimate> {
    check_beta(beta)?;
    let plus = nudged_phase(spec, cost, free_eq, beta, cfg, STREAM_PLUS)?;
    let g = (spec.grad_theta_raw(plus.readout()) - spec.grad_theta_raw(free_eq.readout())) / beta;
    GradientEstimate::new(g, EstimatorTag::OneSided, beta, spec.layout().coupling_len)
}

pub fn estimate_symmetric(
    spec: &SubstrateSpec,
    cost: &ReadoutCost,
    free_eq: &EquilibriumResult,
    beta: f64,
    cfg: &RelaxationConfig,
) -> Result<GradientEstimate> {
    check_beta(beta)?;
    let (plus, minus) = rayon::join(
        || nudged_phase(spec, cost, free_eq, beta, cfg, STREAM_PLUS),
        || nudged_phase(spec, cost, free_eq, -beta, cfg, STREAM_MINUS),
    );
    let (plus, minus) = (plus?, minus?);
    let g = (spec.grad_theta_raw(plus.readout()) - spec.grad_theta_raw(minus.readout()))
        / (2.0 * beta);
    GradientEstimate::new(g, EstimatorTag::Symmetric, beta, spec.layout().coupling_len)
}

pub fn estimate(
    kind: Estimator,
    spec: &SubstrateSpec,
    cost: &ReadoutCost,
    free_eq: &EquilibriumResult,
    beta: f64,
    cfg: &RelaxationConfig,
) -> Result<GradientEstimate> {
    match kind {
        Estimator::OneSided => estimate_one_sided(spec, cost, free_eq, beta, cfg),
        Estimator::Symmetric => estimate_symmetric(spec, cost, free_eq, beta, cfg),
    }
}

/// Factor-level update of one coupling plane.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingDelta {
    pub du: DMatrix<f64>,
    pub dv: DMatrix<f64>,
}

/// `ΔU = (1/β)[x_a^(m) (x_a^(m')ᵀ V) − x_b^(m) (x_b^(m')ᵀ V)]` and the mirror
/// expression for `ΔV`, using only the two modules' readouts. Pass `2β` for
/// the symmetric prefactor.
pub fn local_coupling_update(
    partition: &BlockPartition,
    x_a: &EquilibriumResult,
    x_b: &EquilibriumResult,
    coupling: &LowRankCoupling,
    beta: f64,
) -> CouplingDelta {
    let rm = partition.module_range(coupling.source);
    let rmp = partition.module_range(coupling.target);
    let block = |x: &StateVector, r: &std::ops::Range<usize>| x.rows(r.start, r.len()).into_owned();
    let (am, amp) = (block(x_a.readout(), &rm), block(x_a.readout(), &rmp));
    let (bm, bmp) = (block(x_b.readout(), &rm), block(x_b.readout(), &rmp));
    let du = (&am * coupling.v.tr_mul(&amp).transpose() - &bm * coupling.v.tr_mul(&bmp).transpose())
        / beta;
    let dv = (&amp * coupling.u.tr_mul(&am).transpose() - &bmp * coupling.u.tr_mul(&bm).transpose())
        / beta;
    CouplingDelta { du, dv }
}

/// Bias–variance optimal nudge for the symmetric estimator:
/// `(C_V ‖M‖² / (K₂² β_phys λ⋆² τ))^(1/6)`.
pub fn optimal_beta_sym(
    c_v: f64,
    m_norm: f64,
    k2_sym: f64,
    beta_phys: f64,
    lambda_star: f64,
    tau: f64,
) -> Result<f64> {
    for (name, v) in [
        ("C_V", c_v),
        ("||M||", m_norm),
        ("K2_sym", k2_sym),
        ("beta_phys", beta_phys),
        ("lambda_star", lambda_star),
        ("tau", tau),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(ThermoError::InvalidArgument(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    let num = c_v * m_norm * m_norm;
    let den = k2_sym * k2_sym * beta_phys * lambda_star * lambda_star * tau;
    Ok((num / den).powf(1.0 / 6.0))
}
