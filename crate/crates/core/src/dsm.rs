//! Synthetic denoising-score-matching task.
//!
//! Clean samples come from `N(0, Σ)` with `Σ = F Fᵀ + diag(d)`, a fixed
//! low-rank-plus-diagonal covariance generated from `data_cov_seed`. Noise
//! levels are log-uniform on `sigma_range`; `ỹ = y + σ ε` and the regression
//! target is `(y − ỹ) / σ²`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{free_phase, RelaxationConfig};
use crate::eqprop::ReadoutCost;
use crate::error::{Result, ThermoError};
use crate::rng::{normal, rng_from};
use crate::substrate::SubstrateSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub data_dim: usize,
    #[serde(default)]
    pub data_cov_seed: u64,
    /// Rank of the low-rank part of Σ.
    #[serde(default = "default_rank")]
    pub cov_rank: usize,
    /// Diagonal floor of Σ.
    #[serde(default = "default_diag")]
    pub cov_diag: f64,
    #[serde(default = "default_sigma_range")]
    pub sigma_range: [f64; 2],
    pub batch: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// Test hook: force ε = 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_noise: bool,
}

fn default_rank() -> usize {
    2
}

fn default_diag() -> f64 {
    0.1
}

fn default_sigma_range() -> [f64; 2] {
    [0.1, 1.0]
}

impl TaskConfig {
    pub fn new(data_dim: usize, batch: usize, rng_seed: u64) -> Self {
        TaskConfig {
            data_dim,
            data_cov_seed: 0,
            cov_rank: default_rank(),
            cov_diag: default_diag(),
            sigma_range: default_sigma_range(),
            batch,
            rng_seed,
            zero_noise: false,
        }
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        TaskConfig {
            rng_seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.sigma_range;
        if !(lo > 0.0) || !(lo <= hi) || !hi.is_finite() {
            return Err(ThermoError::InvalidConfig(format!(
                "sigma_range must satisfy 0 < min <= max, got [{lo}, {hi}]"
            )));
        }
        if self.data_dim == 0 || self.batch == 0 {
            return Err(ThermoError::InvalidConfig(
                "data_dim and batch must be positive".into(),
            ));
        }
        if !(self.cov_diag > 0.0) {
            return Err(ThermoError::InvalidConfig("cov_diag must be positive".into()));
        }
        Ok(())
    }

    pub fn covariance(&self) -> DataCovariance {
        DataCovariance::generate(self.data_dim, self.cov_rank, self.cov_diag, self.data_cov_seed)
    }
}

/// `Σ = F Fᵀ + diag(d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCovariance {
    pub factor: DMatrix<f64>,
    pub diag: DVector<f64>,
}

impl DataCovariance {
    pub fn generate(dim: usize, rank: usize, diag: f64, seed: u64) -> Self {
        let mut rng = rng_from(seed, 0xC0F);
        let scale = 1.0 / (rank.max(1) as f64).sqrt();
        let factor = DMatrix::from_fn(dim, rank, |_, _| scale * normal(&mut rng));
        DataCovariance {
            factor,
            diag: DVector::from_element(dim, diag),
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose() + DMatrix::from_diagonal(&self.diag)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.factor.ncols(), |_, _| normal(rng));
        let mut y = &self.factor * z;
        for i in 0..y.len() {
            y[i] += self.diag[i].sqrt() * normal(rng);
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsmSample {
    pub y: DVector<f64>,
    pub sigma: f64,
    pub y_tilde: DVector<f64>,
    pub epsilon: DVector<f64>,
    /// `(y − ỹ) / σ²`
    pub target: DVector<f64>,
}

impl DsmSample {
    /// Builds a sample so that `target·σ² + ỹ == y` holds bit-exactly: `y` is
    /// re-derived from the rounded target and `ε` from the rounded `y`.
    pub fn new(y: DVector<f64>, sigma: f64, epsilon: DVector<f64>) -> Self {
        let s2 = sigma * sigma;
        let y_tilde = &y + &epsilon * sigma;
        let target = (&y - &y_tilde) / s2;
        let y = target.map(|t| t * s2) + &y_tilde;
        let epsilon = (&y_tilde - &y) / sigma;
        DsmSample {
            y,
            sigma,
            y_tilde,
            epsilon,
            target,
        }
    }

    pub fn cost(&self) -> ReadoutCost {
        ReadoutCost::new(self.target.clone(), self.sigma)
    }
}

pub fn sample_batch(cfg: &TaskConfig) -> Result<Vec<DsmSample>> {
    cfg.validate()?;
    let cov = cfg.covariance();
    let mut rng = rng_from(cfg.rng_seed, 0xDA7A);
    let [lo, hi] = cfg.sigma_range;
    let (llo, lhi) = (lo.ln(), hi.ln());
    Ok((0..cfg.batch)
        .map(|_| {
            let y = cov.sample(&mut rng);
            let u: f64 = rng.random();
            let sigma = if lo == hi { lo } else { (llo + u * (lhi - llo)).exp() };
            let eps = DVector::from_fn(cfg.data_dim, |_, _| normal(&mut rng));
            let eps = if cfg.zero_noise { eps * 0.0 } else { eps };
            DsmSample::new(y, sigma, eps)
        })
        .collect())
}

fn check_task(spec: &SubstrateSpec, batch: &[DsmSample]) -> Result<()> {
    let p = spec.partition();
    if p.output_dim != p.data_dim() {
        return Err(ThermoError::InvalidConfig(format!(
            "output block ({}) must match the data dimension ({})",
            p.output_dim,
            p.data_dim()
        )));
    }
    for s in batch {
        if s.y_tilde.len() != p.data_dim() {
            return Err(ThermoError::DimensionMismatch {
                expected: p.data_dim(),
                got: s.y_tilde.len(),
            });
        }
    }
    Ok(())
}

/// Mean of `(σ²/2)‖[x⋆⁰]_O − target‖²` over the batch.
pub fn batch_loss(spec: &SubstrateSpec, batch: &[DsmSample], cfg: &RelaxationConfig) -> Result<f64> {
    check_task(spec, batch)?;
    if batch.is_empty() {
        return Err(ThermoError::InvalidArgument("empty batch".into()));
    }
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|s| {
            let eq = free_phase(spec, s.y_tilde.as_slice(), s.sigma, cfg, None)?;
            Ok(s.cost().value(&eq.output_block(spec)))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Writes one row per sample: `sigma, y_*, y_tilde_*, epsilon_*, target_*`.
pub fn write_batch_csv<W: Write>(out: W, batch: &[DsmSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = batch.first().map_or(0, |s| s.y.len());
    let mut header = vec!["sigma".to_string()];
    for name in ["y", "y_tilde", "epsilon", "target"] {
        header.extend((0..n).map(|i| format!("{name}_{i}")));
    }
    w.write_record(&header)?;
    for s in batch {
        let mut row = vec![s.sigma.to_string()];
        for v in [&s.y, &s.y_tilde, &s.epsilon, &s.target] {
            row.extend(v.iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_batch_csv<R: Read>(input: R) -> Result<Vec<DsmSample>> {
    let mut r = csv::Reader::from_reader(input);
    let width = r.headers()?.len();
    if width == 0 || (width - 1) % 4 != 0 {
        return Err(ThermoError::InvalidConfig(format!(
            "batch csv has {width} columns; expected 1 + 4n"
        )));
    }
    let n = (width - 1) / 4;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| ThermoError::InvalidConfig(format!("bad number {f:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let block = |k: usize| DVector::from_column_slice(&vals[1 + k * n..1 + (k + 1) * n]);
        out.push(DsmSample {
            sigma: vals[0],
            y: block(0),
            y_tilde: block(1),
            epsilon: block(2),
            target: block(3),
        });
    }
    Ok(out)
}
