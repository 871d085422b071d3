//! Experiment drivers: gradient agreement (E1), bias scaling (E2),
//! bias/variance sweep and training dynamics (E3).

mod e1;
mod e2;
mod e3;
pub mod fit;
pub mod plot;
mod train;

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsm::DsmSample;
use crate::dynamics::{free_phase, RelaxationConfig};
use crate::eqprop::{estimate, Estimator};
use crate::error::Result;
use crate::oracle::oracle_implicit;
use crate::rng::derive_seed;
use crate::substrate::SubstrateSpec;

pub use e1::{run_e1, E1Report, EstimatorSummary, SeedComparison};
pub use e2::{run_e2, BiasCurve, E2Report};
pub use e3::{is_u_shaped, run_e3_sweep, E3Report};
pub use fit::{fit_coefficient, fit_loglog, SlopeFit};
pub use train::{run_e3_training, TrainReport, TrainStep};

/// One row of a sweep table. `seed` is empty for seed-aggregated metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub experiment_id: String,
    pub beta: f64,
    pub seed: Option<u64>,
    pub metric_name: String,
    pub metric_value: f64,
    pub config_hash: String,
}

impl SweepRecord {
    pub fn new(
        experiment_id: &str,
        beta: f64,
        seed: Option<u64>,
        metric_name: impl Into<String>,
        metric_value: f64,
        config_hash: &str,
    ) -> Self {
        SweepRecord {
            experiment_id: experiment_id.to_string(),
            beta,
            seed,
            metric_name: metric_name.into(),
            metric_value,
            config_hash: config_hash.to_string(),
        }
    }
}

/// Concatenates record sets and sorts by `(experiment_id, beta, seed, metric_name)`;
/// aggregate rows (no seed) follow the per-seed rows.
pub fn merge_records(parts: Vec<Vec<SweepRecord>>) -> Vec<SweepRecord> {
    let mut all: Vec<SweepRecord> = parts.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        a.experiment_id
            .cmp(&b.experiment_id)
            .then(a.beta.total_cmp(&b.beta))
            .then((a.seed.is_none(), a.seed).cmp(&(b.seed.is_none(), b.seed)))
            .then(a.metric_name.cmp(&b.metric_name))
    });
    all
}

pub fn records_csv(records: &[SweepRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// A named output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(name: &str, bytes: impl Into<Vec<u8>>) -> Self {
        Artifact {
            name: name.to_string(),
            bytes: bytes.into(),
        }
    }

    pub fn json<T: Serialize>(name: &str, value: &T) -> Result<Self> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        Ok(Artifact::new(name, text))
    }
}

/// Common surface of every experiment result.
pub trait Report {
    fn experiment_id(&self) -> &'static str;
    fn config_hash(&self) -> &str;
    /// Human-readable summary.
    fn summary(&self) -> String;
    /// Tables, JSON and plots.
    fn artifacts(&self) -> Result<Vec<Artifact>>;
}

/// Writes `root/{experiment_id}/{config_hash}/…`. Files go to a staging
/// directory first, which is removed if anything fails.
pub fn write_report(root: &Path, report: &dyn Report) -> Result<PathBuf> {
    let mut files = report.artifacts()?;
    files.push(Artifact::new("summary.txt", report.summary()));
    write_artifacts(root, report.experiment_id(), report.config_hash(), &files)
}

pub fn write_artifacts(
    root: &Path,
    experiment_id: &str,
    config_hash: &str,
    files: &[Artifact],
) -> Result<PathBuf> {
    let parent = root.join(experiment_id);
    std::fs::create_dir_all(&parent)?;
    let target = parent.join(config_hash);
    let staging = parent.join(format!(".{config_hash}.partial"));
    let write_all = || -> Result<()> {
        if staging.exists() {
            std::fs::remove_dir_all(&staging)?;
        }
        std::fs::create_dir_all(&staging)?;
        for f in files {
            std::fs::write(staging.join(&f.name), &f.bytes)?;
        }
        if target.exists() {
            std::fs::remove_dir_all(&target)?;
        }
        std::fs::rename(&staging, &target)?;
        Ok(())
    };
    match write_all() {
        Ok(()) => Ok(target),
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

pub(crate) fn noise_config(cfg: &RelaxationConfig, seed: u64, index: usize) -> RelaxationConfig {
    cfg.with_seed(derive_seed(derive_seed(cfg.seed, seed), index as u64))
}

fn mean_of(vs: Vec<DVector<f64>>) -> DVector<f64> {
    let n = vs.len() as f64;
    let mut acc = DVector::zeros(vs.first().map_or(0, |v| v.len()));
    for v in vs {
        acc += v;
    }
    acc / n
}

/// Batch-mean oracle gradient at exact equilibria.
pub(crate) fn oracle_mean(spec: &SubstrateSpec, batch: &[DsmSample]) -> Result<DVector<f64>> {
    let exact = RelaxationConfig::exact();
    let per: Vec<DVector<f64>> = batch
        .par_iter()
        .map(|s| {
            let eq = free_phase(spec, s.y_tilde.as_slice(), s.sigma, &exact, None)?;
            Ok(oracle_implicit(spec, &s.cost(), &eq)?.values)
        })
        .collect::<Result<_>>()?;
    Ok(mean_of(per))
}

/// Batch-mean estimates indexed `[estimator][beta]`. Each sample's free
/// phase is shared by all estimators and nudges.
pub(crate) fn estimate_means(
    spec: &SubstrateSpec,
    batch: &[DsmSample],
    cfg: &RelaxationConfig,
    seed: u64,
    kinds: &[Estimator],
    betas: &[f64],
) -> Result<Vec<Vec<DVector<f64>>>> {
    let per: Vec<Vec<Vec<DVector<f64>>>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let c = noise_config(cfg, seed, i);
            let eq = free_phase(spec, s.y_tilde.as_slice(), s.sigma, &c, None)?;
            let cost = s.cost();
            kinds
                .iter()
                .map(|&k| {
                    betas
                        .iter()
                        .map(|&b| Ok(estimate(k, spec, &cost, &eq, b, &c)?.values))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(kinds.len());
    for ki in 0..kinds.len() {
        let mut row = Vec::with_capacity(betas.len());
        for bi in 0..betas.len() {
            row.push(mean_of(per.iter().map(|p| p[ki][bi].clone()).collect()));
        }
        out.push(row);
    }
    Ok(out)
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    let (na, nb) = (a.norm(), b.norm());
    (na > 0.0 && nb > 0.0).then(|| (a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn sci(v: f64) -> String {
    format!("{v:.4e}")
}
