use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{fit_loglog, SlopeFit};
use super::plot::{Plot, Scale, Series};
use super::{estimate_means, oracle_mean, records_csv, sci, Artifact, Report, SweepRecord};
use crate::config::RunConfig;
use crate::dsm::sample_batch;
use crate::eqprop::EstimatorTag;
use crate::error::Result;

const ID: &str = "e2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCurve {
    pub estimator: EstimatorTag,
    pub betas: Vec<f64>,
    /// `‖mean over seeds of (g_β − oracle)‖` per β.
    pub bias: Vec<f64>,
    pub fit: SlopeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2Report {
    pub config_hash: String,
    pub seeds: usize,
    pub curves: Vec<BiasCurve>,
    pub records: Vec<SweepRecord>,
}

impl E2Report {
    pub fn curve(&self, tag: EstimatorTag) -> Option<&BiasCurve> {
        self.curves.iter().find(|c| c.estimator == tag)
    }
}

/// Bias of each configured estimator over the β grid, with a log-log fit.
pub fn run_e2(cfg: &RunConfig) -> Result<E2Report> {
    cfg.validate()?;
    let spec = cfg.build_substrate()?;
    let hash = cfg.config_hash();
    let betas = cfg.e2.betas.values()?;
    let kinds = &cfg.e2.estimators;
    // [seed][estimator][beta] of g_β − oracle.
    let diffs: Vec<Vec<Vec<DVector<f64>>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let batch = sample_batch(&cfg.task.with_seed(seed))?;
            let oracle = oracle_mean(&spec, &batch)?;
            let est = estimate_means(&spec, &batch, &cfg.dynamics, seed, kinds, &betas)?;
            Ok(est
                .into_iter()
                .map(|row| row.into_iter().map(|g| g - &oracle).collect())
                .collect())
        })
        .collect::<Result<_>>()?;

    let n = cfg.seeds.len() as f64;
    let mut records = Vec::new();
    let mut curves = Vec::new();
    for (ki, k) in kinds.iter().enumerate() {
        let name = k.tag().as_str();
        let mut bias = Vec::with_capacity(betas.len());
        for (bi, &beta) in betas.iter().enumerate() {
            let mut mean = DVector::zeros(spec.num_params());
            for (si, d) in diffs.iter().enumerate() {
                let e = &d[ki][bi];
                records.push(SweepRecord::new(
                    ID,
                    beta,
                    Some(cfg.seeds[si]),
                    format!("error_norm_{name}"),
                    e.norm(),
                    &hash,
                ));
                mean += e;
            }
            let b = (mean / n).norm();
            records.push(SweepRecord::new(ID, beta, None, format!("bias_{name}"), b, &hash));
            bias.push(b);
        }
        let points: Vec<(f64, f64)> = betas
            .iter()
            .zip(&bias)
            .filter(|(_, b)| **b > 0.0 && b.is_finite())
            .map(|(&x, &y)| (x, y))
            .collect();
        curves.push(BiasCurve {
            estimator: k.tag(),
            betas: betas.clone(),
            bias,
            fit: fit_loglog(&points)?,
        });
    }
    Ok(E2Report {
        config_hash: hash,
        seeds: cfg.seeds.len(),
        curves,
        records: super::merge_records(vec![records]),
    })
}

impl Report for E2Report {
    fn experiment_id(&self) -> &'static str {
        ID
    }

    fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn summary(&self) -> String {
        let mut s = format!(
            "E2 bias scaling, {} seeds, config {}\n",
            self.seeds, self.config_hash
        );
        for c in &self.curves {
            s += &format!(
                "  {:<10} slope {:.3}  r^2 {:.4}  beta in [{}, {}]  bias {} .. {}\n",
                c.estimator.as_str(),
                c.fit.slope,
                c.fit.r_squared,
                c.fit.beta_range[0],
                c.fit.beta_range[1],
                sci(c.bias[0]),
                sci(*c.bias.last().unwrap_or(&f64::NAN))
            );
        }
        s
    }

    fn artifacts(&self) -> Result<Vec<Artifact>> {
        let mut series = Vec::new();
        for c in &self.curves {
            series.push(Series {
                name: c.estimator.as_str().to_string(),
                points: c.betas.iter().copied().zip(c.bias.iter().copied()).collect(),
                line: false,
            });
            series.push(Series {
                name: format!("fit {:.2}", c.fit.slope),
                points: c.betas.iter().map(|&b| (b, c.fit.predict(b))).collect(),
                line: true,
            });
        }
        let plot = Plot {
            title: "Estimator bias vs nudge".into(),
            x_label: "beta".into(),
            y_label: "||E[g] - oracle||".into(),
            x_scale: Scale::Log,
            y_scale: Scale::Log,
            series,
        };
        Ok(vec![
            Artifact::new("table.csv", records_csv(&self.records)?),
            Artifact::json("table.json", self)?,
            Artifact::new("plot.svg", plot.render()),
        ])
    }
}
