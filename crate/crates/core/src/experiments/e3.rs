use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{fit_coefficient, fit_loglog, SlopeFit};
use super::plot::{Plot, Scale, Series};
use super::{estimate_means, oracle_mean, records_csv, sci, Artifact, Report, SweepRecord};
use crate::config::RunConfig;
use crate::dsm::{sample_batch, DsmSample};
use crate::dynamics::{free_phase, RelaxationConfig};
use crate::eqprop::{optimal_beta_sym, Estimator};
use crate::error::{Result, ThermoError};
use crate::substrate::SubstrateSpec;

const ID: &str = "e3";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E3Report {
    pub config_hash: String,
    pub seeds: usize,
    pub betas: Vec<f64>,
    /// Trace of the estimator covariance over seeds.
    pub variance: Vec<f64>,
    /// Symmetric-estimator bias at exact equilibria.
    pub bias_exact: Vec<f64>,
    /// `‖seed mean − oracle‖` under the stochastic dynamics.
    pub bias_empirical: Vec<f64>,
    /// `mean over seeds of ‖g − oracle‖²`.
    pub mse: Vec<f64>,
    pub variance_fit: SlopeFit,
    pub bias_fit: SlopeFit,
    /// Bias constant of `bias ≈ K₂ β²`.
    pub k2: f64,
    /// Coefficient of `variance ≈ V / β²`.
    pub variance_coef: f64,
    /// Constant backed out of `V = C_V ‖M‖² / (β_phys λ⋆² τ)`.
    pub c_v: f64,
    pub m_norm: f64,
    pub lambda_star: f64,
    pub beta_phys: f64,
    pub tau: f64,
    pub beta_dagger_pred: f64,
    pub beta_dagger_emp: f64,
    pub u_shaped: bool,
    pub records: Vec<SweepRecord>,
}

/// True when the minimum is interior and the sequence falls before it and
/// rises after it, up to `allowed` out-of-order neighbours.
pub fn is_u_shaped(values: &[f64], allowed: usize) -> bool {
    if values.len() < 3 || values.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let imin = argmin(values);
    if imin == 0 || imin == values.len() - 1 {
        return false;
    }
    let up_before = values[..=imin].windows(2).filter(|w| w[1] > w[0]).count();
    let down_after = values[imin..].windows(2).filter(|w| w[1] < w[0]).count();
    up_before + down_after <= allowed
}

fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc })
        .0
}

/// Batch mean of the operator norm of `∂²E/∂θ∂x` at exact equilibria.
fn mixed_norm(spec: &SubstrateSpec, batch: &[DsmSample]) -> Result<f64> {
    let exact = RelaxationConfig::exact();
    let norms: Vec<f64> = batch
        .par_iter()
        .map(|s| {
            let eq = free_phase(spec, s.y_tilde.as_slice(), s.sigma, &exact, None)?;
            let m = spec.mixed_second(&eq.state)?;
            let gram = m.tr_mul(&m);
            let top = gram.symmetric_eigenvalues().max();
            Ok(top.max(0.0).sqrt())
        })
        .collect::<Result<_>>()?;
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}

/// Symmetric-estimator bias/variance sweep on one fixed batch. Bias comes
/// from exact equilibria, variance from the configured stochastic dynamics.
pub fn run_e3_sweep(cfg: &RunConfig) -> Result<E3Report> {
    cfg.validate()?;
    let dynamics = &cfg.e3.dynamics;
    let beta_phys = dynamics.beta_phys.ok_or_else(|| {
        ThermoError::InvalidConfig("e3 sweep needs a finite beta_phys".into())
    })?;
    let tau = dynamics.readout_window;
    if !(tau > 0.0) {
        return Err(ThermoError::InvalidConfig(
            "e3 sweep needs a positive readout_window".into(),
        ));
    }
    if cfg.seeds.len() < 2 {
        return Err(ThermoError::InvalidConfig(
            "e3 sweep needs at least two seeds".into(),
        ));
    }
    let spec = cfg.build_substrate()?;
    let hash = cfg.config_hash();
    let betas = cfg.e3.betas.values()?;
    let batch = sample_batch(&cfg.task.with_seed(cfg.e3.data_seed))?;
    let oracle = oracle_mean(&spec, &batch)?;
    let sym = [Estimator::Symmetric];

    let exact = estimate_means(&spec, &batch, &RelaxationConfig::exact(), 0, &sym, &betas)?;
    let bias_exact: Vec<f64> = exact[0].iter().map(|g| (g - &oracle).norm()).collect();

    let per_seed: Vec<Vec<DVector<f64>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| Ok(estimate_means(&spec, &batch, dynamics, seed, &sym, &betas)?.remove(0)))
        .collect::<Result<_>>()?;

    let n = cfg.seeds.len() as f64;
    let mut records = Vec::new();
    let (mut variance, mut bias_empirical, mut mse) = (vec![], vec![], vec![]);
    for (bi, &beta) in betas.iter().enumerate() {
        let mut mean = DVector::zeros(spec.num_params());
        for g in &per_seed {
            mean += &g[bi];
        }
        mean /= n;
        let mut var = 0.0;
        let mut sq = 0.0;
        for (si, g) in per_seed.iter().enumerate() {
            var += (&g[bi] - &mean).norm_squared();
            let e = (&g[bi] - &oracle).norm_squared();
            sq += e;
            records.push(SweepRecord::new(ID, beta, Some(cfg.seeds[si]), "sq_error", e, &hash));
        }
        let var = var / (n - 1.0);
        let m = sq / n;
        let b = (&mean - &oracle).norm();
        records.push(SweepRecord::new(ID, beta, None, "variance", var, &hash));
        records.push(SweepRecord::new(ID, beta, None, "bias_exact", bias_exact[bi], &hash));
        records.push(SweepRecord::new(ID, beta, None, "bias_empirical", b, &hash));
        records.push(SweepRecord::new(ID, beta, None, "mse", m, &hash));
        variance.push(var);
        bias_empirical.push(b);
        mse.push(m);
    }

    let pts = |ys: &[f64]| -> Vec<(f64, f64)> { betas.iter().copied().zip(ys.iter().copied()).collect() };
    let variance_fit = fit_loglog(&pts(&variance))?;
    let bias_fit = fit_loglog(&pts(&bias_exact))?;
    let k2 = fit_coefficient(&pts(&bias_exact), 2.0)?;
    let variance_coef = fit_coefficient(&pts(&variance), -2.0)?;
    let m_norm = mixed_norm(&spec, &batch)?;
    let lambda_star = spec.stiffness().lambda_min;
    let c_v = variance_coef * beta_phys * lambda_star * lambda_star * tau / (m_norm * m_norm);
    let beta_dagger_pred = optimal_beta_sym(c_v, m_norm, k2, beta_phys, lambda_star, tau)?;
    let beta_dagger_emp = betas[argmin(&mse)];
    Ok(E3Report {
        config_hash: hash,
        seeds: cfg.seeds.len(),
        u_shaped: is_u_shaped(&mse, 1),
        betas,
        variance,
        bias_exact,
        bias_empirical,
        mse,
        variance_fit,
        bias_fit,
        k2,
        variance_coef,
        c_v,
        m_norm,
        lambda_star,
        beta_phys,
        tau,
        beta_dagger_pred,
        beta_dagger_emp,
        records: super::merge_records(vec![records]),
    })
}

impl Report for E3Report {
    fn experiment_id(&self) -> &'static str {
        ID
    }

    fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn summary(&self) -> String {
        format!(
            "E3 bias/variance sweep, {} seeds, config {}\n  \
             variance slope {:.3} (r^2 {:.4})\n  \
             exact bias slope {:.3}, K2 {}\n  \
             V {}, C_V {}, ||M|| {}, lambda* {}, beta_phys {}, tau {}\n  \
             beta_dagger predicted {} empirical {} (ratio {:.3})\n  \
             MSE U-shaped: {}\n",
            self.seeds,
            self.config_hash,
            self.variance_fit.slope,
            self.variance_fit.r_squared,
            self.bias_fit.slope,
            sci(self.k2),
            sci(self.variance_coef),
            sci(self.c_v),
            sci(self.m_norm),
            sci(self.lambda_star),
            sci(self.beta_phys),
            self.tau,
            sci(self.beta_dagger_pred),
            sci(self.beta_dagger_emp),
            self.beta_dagger_pred / self.beta_dagger_emp,
            self.u_shaped
        )
    }

    fn artifacts(&self) -> Result<Vec<Artifact>> {
        let curve = |name: &str, ys: &[f64], line: bool| Series {
            name: name.to_string(),
            points: self.betas.iter().copied().zip(ys.iter().copied()).collect(),
            line,
        };
        let bias_sq: Vec<f64> = self.bias_exact.iter().map(|b| b * b).collect();
        let plot = Plot {
            title: "Symmetric estimator: bias, variance and MSE".into(),
            x_label: "beta".into(),
            y_label: "squared error".into(),
            x_scale: Scale::Log,
            y_scale: Scale::Log,
            series: vec![
                curve("variance", &self.variance, true),
                curve("bias^2 (exact)", &bias_sq, true),
                curve("MSE", &self.mse, true),
                Series {
                    name: "beta_dagger pred".into(),
                    points: vec![(self.beta_dagger_pred, self.mse.iter().copied().fold(f64::INFINITY, f64::min))],
                    line: false,
                },
            ],
        };
        Ok(vec![
            Artifact::new("table.csv", records_csv(&self.records)?),
            Artifact::json("table.json", self)?,
            Artifact::new("plot.svg", plot.render()),
        ])
    }
}
