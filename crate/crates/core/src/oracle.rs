//! Reference gradients of the readout loss and gradient comparison metrics.
//!
//! The implicit oracle differentiates through the free-phase equilibrium:
//! with `H` the free Hessian, `M = ∂²E/∂θ∂x_free` and `b = ∇C` embedded on the
//! output slots, `dC/dθ = −M H⁻¹ b`. The finite-difference oracle re-relaxes
//! the substrate for every perturbed parameter and shares no code path with it
//! beyond the relaxation itself.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{free_phase, EquilibriumResult, RelaxationConfig};
use crate::eqprop::{EstimatorTag, GradientEstimate, ReadoutCost};
use crate::error::{Result, ThermoError};
use crate::substrate::SubstrateSpec;

/// Exact `∇_θ C([x⋆⁰]_O)` at a converged free phase.
pub fn oracle_implicit(
    spec: &SubstrateSpec,
    cost: &ReadoutCost,
    free_eq: &EquilibriumResult,
) -> Result<GradientEstimate> {
    if !free_eq.converged {
        return Err(ThermoError::NotConverged(free_eq.final_grad_norm));
    }
    let p = spec.partition();
    if cost.target.len() != p.output_dim {
        return Err(ThermoError::DimensionMismatch {
            expected: p.output_dim,
            got: cost.target.len(),
        });
    }
    let x = &free_eq.state;
    let h = spec.hessian_free(x)?;
    let chol = h.cholesky().ok_or(ThermoError::NotPositiveDefinite)?;
    let mut b = DVector::zeros(p.free_dim());
    let grad_out = cost.gradient(&free_eq.output_block(spec));
    b.rows_mut(p.hidden_dim, p.output_dim).copy_from(&grad_out);
    let z = chol.solve(&b);
    let m = spec.mixed_second(x)?;
    let g = -(m * z);
    GradientEstimate::new(g, EstimatorTag::OracleImplicit, 0.0, spec.layout().coupling_len)
}

/// Loss `C([x⋆⁰(θ)]_O)` for one input.
pub fn readout_loss(
    spec: &SubstrateSpec,
    y_tilde: &[f64],
    sigma: f64,
    cost: &ReadoutCost,
    cfg: &RelaxationConfig,
) -> Result<f64> {
    let eq = free_phase(spec, y_tilde, sigma, cfg, None)?;
    Ok(cost.value(&eq.output_block(spec)))
}

/// Central finite differences of `θ ↦ C([x⋆⁰(θ)]_O)`, each evaluation a fresh
/// relaxation under `cfg` (which should be an exact-equilibrium config).
pub fn oracle_fd(
    spec: &SubstrateSpec,
    y_tilde: &[f64],
    sigma: f64,
    cost: &ReadoutCost,
    cfg: &RelaxationConfig,
    fd_step: f64,
) -> Result<GradientEstimate> {
    if !(fd_step > 0.0) || !fd_step.is_finite() {
        return Err(ThermoError::InvalidArgument(format!(
            "fd_step must be positive, got {fd_step}"
        )));
    }
    let theta = spec.theta();
    let n = theta.len();
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut t = theta.clone();
            t[i] = theta[i] + fd_step;
            let lp = readout_loss(&spec.with_theta(&t)?, y_tilde, sigma, cost, cfg)?;
            t[i] = theta[i] - fd_step;
            let lm = readout_loss(&spec.with_theta(&t)?, y_tilde, sigma, cost, cfg)?;
            Ok((lp - lm) / (2.0 * fd_step))
        })
        .collect::<Result<_>>()?;
    GradientEstimate::new(
        DVector::from_vec(values),
        EstimatorTag::OracleFd,
        0.0,
        spec.layout().coupling_len,
    )
}

/// Cosine and relative error on one slice of θ. `None` marks an undefined value
/// (a zero vector), never a numeric zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockComparison {
    pub cosine: Option<f64>,
    pub rel_l2_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub cosine_similarity: Option<f64>,
    /// `‖a − b‖ / ‖b‖`, with `b` the reference.
    pub rel_l2_error: Option<f64>,
    pub coupling: BlockComparison,
    pub bias: BlockComparison,
}

fn block_compare(a: &[f64], b: &[f64]) -> BlockComparison {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    BlockComparison {
        cosine: (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0)),
        rel_l2_error: (nb > 0.0).then(|| diff / nb),
    }
}

/// Compares `a` against the reference `b`.
pub fn compare(a: &GradientEstimate, b: &GradientEstimate) -> Result<ComparisonReport> {
    if a.values.len() != b.values.len() {
        return Err(ThermoError::DimensionMismatch {
            expected: b.values.len(),
            got: a.values.len(),
        });
    }
    if a.coupling_len != b.coupling_len {
        return Err(ThermoError::InvalidArgument(
            "estimates use different parameter layouts".into(),
        ));
    }
    let (sa, sb) = (a.values.as_slice(), b.values.as_slice());
    let cl = a.coupling_len;
    let all = block_compare(sa, sb);
    Ok(ComparisonReport {
        cosine_similarity: all.cosine,
        rel_l2_error: all.rel_l2_error,
        coupling: block_compare(&sa[..cl], &sb[..cl]),
        bias: block_compare(&sa[cl..], &sb[cl..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::{BaseEnergy, BlockPartition, LowRankCoupling, TrainableMask};
    use rand::Rng;

    fn est(v: Vec<f64>, cl: usize) -> GradientEstimate {
        GradientEstimate::new(DVector::from_vec(v), EstimatorTag::OneSided, 0.1, cl).unwrap()
    }

    #[test]
    fn compare_basic_cases() {
        let a = est(vec![1.0, 2.0, 3.0], 2);
        let r = compare(&a, &a).unwrap();
        assert!((r.cosine_similarity.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(r.rel_l2_error, Some(0.0));
        let neg = est(vec![-1.0, -2.0, -3.0], 2);
        assert!((compare(&neg, &a).unwrap().cosine_similarity.unwrap() + 1.0).abs() < 1e-15);
        let orth = est(vec![2.0, -1.0, 0.0], 2);
        assert_eq!(compare(&orth, &a).unwrap().cosine_similarity, Some(0.0));
    }

    #[test]
    fn compare_zero_vector_is_null_not_zero() {
        let z = est(vec![0.0, 0.0, 0.0], 2);
        let a = est(vec![1.0, 0.0, 1.0], 2);
        let r = compare(&z, &a).unwrap();
        assert_eq!(r.cosine_similarity, None);
        assert_eq!(r.rel_l2_error, Some(1.0));
        let r = compare(&a, &z).unwrap();
        assert_eq!(r.cosine_similarity, None);
        assert_eq!(r.rel_l2_error, None);
        // Bias block of `a` is [1.0], coupling block [1, 0].
        let b = est(vec![0.0, 0.0, 2.0], 2);
        let r = compare(&a, &b).unwrap();
        assert_eq!(r.coupling.cosine, None);
        assert_eq!(r.bias.cosine, Some(1.0));
    }

    #[test]
    fn compare_rejects_mismatched_lengths() {
        assert!(compare(&est(vec![1.0], 0), &est(vec![1.0, 2.0], 0)).is_err());
    }

    /// Two modules: one input coordinate (module 0), one output coordinate
    /// (module 1), no couplings. The readout is b0/a, so dC/db0 = σ²(b0/a − t)/a.
    #[test]
    fn fd_oracle_on_decoupled_chain() {
        let partition = BlockPartition::new(1, 0, 1, vec![1, 1], false).unwrap();
        let mut base = BaseEnergy::quadratic(2, 2.0);
        base.bias[1] = 0.7;
        let spec = SubstrateSpec::new(
            partition,
            base,
            vec![],
            TrainableMask::default(),
            0.1,
        )
        .unwrap();
        let sigma = 0.6;
        let cost = ReadoutCost::new(DVector::from_vec(vec![-0.4]), sigma);
        let cfg = RelaxationConfig::exact();
        let fd = oracle_fd(&spec, &[0.2], sigma, &cost, &cfg, 1e-4).unwrap();
        let expect = sigma * sigma * (0.7 / 2.0 + 0.4) / 2.0;
        assert_eq!(fd.values.len(), 1);
        assert!((fd.values[0] - expect).abs() < 1e-8);
        let eq = free_phase(&spec, &[0.2], sigma, &cfg, None).unwrap();
        let imp = oracle_implicit(&spec, &cost, &eq).unwrap();
        assert!((imp.values[0] - expect).abs() < 1e-14);
    }

    fn random_spec(seed: u64) -> SubstrateSpec {
        let mut rng = crate::rng::rng_from(seed, 9);
        let partition = BlockPartition::new(2, 3, 3, vec![3, 3, 2], true).unwrap();
        let base = BaseEnergy {
            stiffness: DVector::from_fn(8, |_, _| rng.random_range(1.0..2.0)),
            bias: DVector::from_fn(8, |_, _| rng.random_range(-0.5..0.5)),
            quartic: DVector::from_fn(8, |_, _| rng.random_range(0.0..0.5)),
        };
        let cs = vec![
            LowRankCoupling::seeded(0, 1, 3, 3, 2, seed + 1, 1.5),
            LowRankCoupling::seeded(1, 2, 3, 2, 2, seed + 3, 1.5),
        ];
        SubstrateSpec::new_rescaled(partition, base, cs, TrainableMask::default(), 0.1).unwrap()
    }

    #[test]
    fn implicit_matches_fd_and_fd_step_plateau() {
        let spec = random_spec(3);
        let sigma = 0.4;
        let cost = ReadoutCost::new(DVector::from_vec(vec![0.5, -0.3, 0.1]), sigma);
        let cfg = RelaxationConfig::exact();
        let eq = free_phase(&spec, &[0.9], sigma, &cfg, None).unwrap();
        let imp = oracle_implicit(&spec, &cost, &eq).unwrap();
        let errs: Vec<f64> = [1e-2, 1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&h| {
                let fd = oracle_fd(&spec, &[0.9], sigma, &cost, &cfg, h).unwrap();
                compare(&fd, &imp).unwrap().rel_l2_error.unwrap()
            })
            .collect();
        // Truncation error shrinks with the step and then flattens out at the round-off floor.
        assert!(errs[1] < errs[0]);
        assert!(errs[2] <= errs[1]);
        assert!(errs[2] < 1e-5 && errs[3] < 1e-5, "{errs:?}");
    }

    #[test]
    fn implicit_is_zero_without_signal() {
        let spec = random_spec(4);
        let eq = free_phase(&spec, &[0.1], 0.3, &RelaxationConfig::exact(), None).unwrap();
        let cost = ReadoutCost::new(eq.output_block(&spec), 0.3);
        let g = oracle_implicit(&spec, &cost, &eq).unwrap();
        assert_eq!(g.values.norm(), 0.0);
    }

    #[test]
    fn implicit_requires_convergence() {
        let spec = random_spec(5);
        let eq = free_phase(&spec, &[0.1], 0.3, &RelaxationConfig::finite(3), None).unwrap();
        let cost = ReadoutCost::new(DVector::zeros(3), 0.3);
        assert!(matches!(
            oracle_implicit(&spec, &cost, &eq),
            Err(ThermoError::NotConverged(_))
        ));
    }

    #[test]
    fn implicit_is_path_independent() {
        let spec = random_spec(6);
        let sigma = 0.7;
        let cost = ReadoutCost::new(DVector::from_vec(vec![0.2, 0.2, -0.6]), sigma);
        let slow = RelaxationConfig {
            step_size: Some(0.01),
            ..RelaxationConfig::exact()
        };
        let fast = RelaxationConfig::exact();
        let a = free_phase(&spec, &[0.5], sigma, &slow, None).unwrap();
        let b = free_phase(&spec, &[0.5], sigma, &fast, None).unwrap();
        let ga = oracle_implicit(&spec, &cost, &a).unwrap();
        let gb = oracle_implicit(&spec, &cost, &b).unwrap();
        assert!(compare(&ga, &gb).unwrap().rel_l2_error.unwrap() < 1e-10);
    }

    #[test]
    fn fd_rejects_bad_step() {
        let spec = random_spec(7);
        let cost = ReadoutCost::new(DVector::zeros(3), 0.3);
        assert!(oracle_fd(&spec, &[0.1], 0.3, &cost, &RelaxationConfig::exact(), 0.0).is_err());
    }
}
