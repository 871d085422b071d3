use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plot::{Plot, Scale, Series};
use super::{estimate_means, mean_std, oracle_mean, records_csv, sci, Artifact, Report, SweepRecord};
use crate::config::RunConfig;
use crate::dsm::sample_batch;
use crate::eqprop::{Estimator, EstimatorTag, GradientEstimate};
use crate::error::{Result, ThermoError};
use crate::oracle::{compare, ComparisonReport};

const ID: &str = "e1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub estimator: EstimatorTag,
    pub report: ComparisonReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorTag,
    pub mean_cosine: f64,
    pub std_cosine: f64,
    pub mean_rel_l2_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E1Report {
    pub config_hash: String,
    pub beta: f64,
    pub seeds: Vec<u64>,
    pub summaries: Vec<EstimatorSummary>,
    pub comparisons: Vec<SeedComparison>,
    pub records: Vec<SweepRecord>,
}

impl E1Report {
    pub fn summary_for(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.estimator == e.tag())
    }
}

/// For each seed: one batch, the configured dynamics for both estimators and
/// exact equilibria for the oracle, all on the same θ.
pub fn run_e1(cfg: &RunConfig) -> Result<E1Report> {
    cfg.validate()?;
    let spec = cfg.build_substrate()?;
    let hash = cfg.config_hash();
    let kinds = [Estimator::OneSided, Estimator::Symmetric];
    let beta = cfg.e1.beta;
    let cl = spec.layout().coupling_len;
    let per_seed: Vec<Vec<SeedComparison>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let batch = sample_batch(&cfg.task.with_seed(seed))?;
            let oracle = oracle_mean(&spec, &batch)?;
            let oracle = GradientEstimate::new(oracle, EstimatorTag::OracleImplicit, 0.0, cl)?;
            let est = estimate_means(&spec, &batch, &cfg.dynamics, seed, &kinds, &[beta])?;
            kinds
                .iter()
                .zip(est)
                .map(|(&k, mut g)| {
                    let g = GradientEstimate::new(g.remove(0), k.tag(), beta, cl)?;
                    Ok(SeedComparison {
                        seed,
                        estimator: k.tag(),
                        report: compare(&g, &oracle)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let comparisons: Vec<SeedComparison> = per_seed.into_iter().flatten().collect();

    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for k in kinds {
        let rows: Vec<&SeedComparison> =
            comparisons.iter().filter(|c| c.estimator == k.tag()).collect();
        let cos: Vec<f64> = rows
            .iter()
            .map(|c| {
                c.report
                    .cosine_similarity
                    .ok_or(ThermoError::NonFinite("cosine of a zero gradient"))
            })
            .collect::<Result<_>>()?;
        let err: Vec<f64> = rows.iter().filter_map(|c| c.report.rel_l2_error).collect();
        for c in &rows {
            let name = k.tag().as_str();
            if let Some(v) = c.report.cosine_similarity {
                records.push(SweepRecord::new(ID, beta, Some(c.seed), format!("cosine_{name}"), v, &hash));
            }
            if let Some(v) = c.report.rel_l2_error {
                records.push(SweepRecord::new(ID, beta, Some(c.seed), format!("rel_l2_error_{name}"), v, &hash));
            }
        }
        let (m, s) = mean_std(&cos);
        summaries.push(EstimatorSummary {
            estimator: k.tag(),
            mean_cosine: m,
            std_cosine: s,
            mean_rel_l2_error: mean_std(&err).0,
        });
    }
    Ok(E1Report {
        config_hash: hash,
        beta,
        seeds: cfg.seeds.clone(),
        summaries,
        comparisons,
        records: super::merge_records(vec![records]),
    })
}

impl Report for E1Report {
    fn experiment_id(&self) -> &'static str {
        ID
    }

    fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn summary(&self) -> String {
        let mut s = format!(
            "E1 gradient agreement, beta = {}, {} seeds, config {}\n",
            self.beta,
            self.seeds.len(),
            self.config_hash
        );
        for e in &self.summaries {
            s += &format!(
                "  {:<10} cosine {:+.3} +/- {:.3}   rel L2 error {}\n",
                e.estimator.as_str(),
                e.mean_cosine,
                e.std_cosine,
                sci(e.mean_rel_l2_error)
            );
        }
        s
    }

    fn artifacts(&self) -> Result<Vec<Artifact>> {
        let series = self
            .summaries
            .iter()
            .map(|e| Series {
                name: e.estimator.as_str().to_string(),
                points: self
                    .comparisons
                    .iter()
                    .filter(|c| c.estimator == e.estimator)
                    .filter_map(|c| Some((c.seed as f64, c.report.cosine_similarity?)))
                    .collect(),
                line: false,
            })
            .collect();
        let plot = Plot {
            title: "Cosine to oracle gradient per seed".into(),
            x_label: "seed".into(),
            y_label: "cosine".into(),
            x_scale: Scale::Linear,
            y_scale: Scale::Linear,
            series,
        };
        Ok(vec![
            Artifact::new("table.csv", records_csv(&self.records)?),
            Artifact::json("table.json", self)?,
            Artifact::new("plot.svg", plot.render()),
        ])
    }
}
