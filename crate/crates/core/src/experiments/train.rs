use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::plot::{Plot, Scale, Series};
use super::{cosine, estimate_means, oracle_mean, Artifact, Report};
use crate::config::RunConfig;
use crate::dsm::{batch_loss, sample_batch};
use crate::error::{Result, ThermoError};
use crate::rng::derive_seed;
use crate::substrate::SubstrateSpec;

const ID: &str = "train";
const EVAL_STREAM: u64 = 0xE7A1;
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub loss_eqprop: f64,
    pub loss_oracle_baseline: f64,
    /// Cosine between the EqProp update and the oracle gradient at the EqProp
    /// iterate; empty on the final row, where no update is taken.
    pub alignment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub seed: u64,
    pub learning_rate: f64,
    pub beta: f64,
    pub steps: Vec<TrainStep>,
    /// Mean alignment over the last 10% of updates.
    pub late_alignment: f64,
    /// `|loss_eqprop − loss_oracle| / loss_oracle` after the last update.
    pub final_relative_gap: f64,
}

fn check_loss(step: usize, loss: f64) -> Result<f64> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(ThermoError::TrainingDiverged { step, loss });
    }
    Ok(loss)
}

fn sgd(spec: &SubstrateSpec, grad: &DVector<f64>, lr: f64) -> Result<SubstrateSpec> {
    spec.with_theta(&(spec.theta() - grad * lr))
}

/// Two SGD runs from the same θ over the same minibatch stream: one driven by
/// the EqProp estimator, one by the oracle gradient. Uses the first seed.
pub fn run_e3_training(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let tc = &cfg.train;
    let seed = cfg.seeds[0];
    let start = cfg.build_substrate()?;
    let hash = cfg.config_hash();
    let eval = sample_batch(&crate::dsm::TaskConfig {
        batch: tc.eval_batch,
        ..cfg.task.with_seed(derive_seed(seed, EVAL_STREAM))
    })?;
    let (mut eq_spec, mut or_spec) = (start.clone(), start);
    let mut steps = Vec::with_capacity(tc.steps + 1);
    for t in 0..=tc.steps {
        let loss_eqprop = check_loss(t, batch_loss(&eq_spec, &eval, &cfg.dynamics)?)?;
        let loss_oracle_baseline = check_loss(t, batch_loss(&or_spec, &eval, &cfg.dynamics)?)?;
        if t == tc.steps {
            steps.push(TrainStep {
                step: t,
                loss_eqprop,
                loss_oracle_baseline,
                alignment: None,
            });
            break;
        }
        let batch = sample_batch(&cfg.task.with_seed(derive_seed(seed, t as u64)))?;
        let step_seed = derive_seed(seed, (t as u64) << 20);
        let g_eq = estimate_means(&eq_spec, &batch, &cfg.dynamics, step_seed, &[tc.estimator], &[tc.beta])?
            .remove(0)
            .remove(0);
        let oracle_at_eq = oracle_mean(&eq_spec, &batch)?;
        let g_or = oracle_mean(&or_spec, &batch)?;
        steps.push(TrainStep {
            step: t,
            loss_eqprop,
            loss_oracle_baseline,
            alignment: cosine(&g_eq, &oracle_at_eq),
        });
        eq_spec = sgd(&eq_spec, &g_eq, tc.learning_rate)?;
        or_spec = sgd(&or_spec, &g_or, tc.learning_rate)?;
    }
    let aligned: Vec<f64> = steps.iter().filter_map(|s| s.alignment).collect();
    let tail = (aligned.len() / 10).max(1).min(aligned.len());
    let late_alignment = if aligned.is_empty() {
        f64::NAN
    } else {
        aligned[aligned.len() - tail..].iter().sum::<f64>() / tail as f64
    };
    let last = steps.last().expect("at least one row");
    let final_relative_gap =
        (last.loss_eqprop - last.loss_oracle_baseline).abs() / last.loss_oracle_baseline;
    Ok(TrainReport {
        config_hash: hash,
        seed,
        learning_rate: tc.learning_rate,
        beta: tc.beta,
        late_alignment,
        final_relative_gap,
        steps,
    })
}

impl TrainReport {
    fn table_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(w.into_inner().map_err(|e| e.into_error())?)
    }
}

impl Report for TrainReport {
    fn experiment_id(&self) -> &'static str {
        ID
    }

    fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn summary(&self) -> String {
        let first = &self.steps[0];
        let last = self.steps.last().expect("rows");
        format!(
            "E3 training, seed {}, lr {}, beta {}, config {}\n  \
             steps {}\n  \
             loss eqprop {:.5e} -> {:.5e}\n  \
             loss oracle {:.5e} -> {:.5e}\n  \
             final relative gap {:.4}\n  \
             alignment first {:.3}, late {:.3}\n",
            self.seed,
            self.learning_rate,
            self.beta,
            self.config_hash,
            last.step,
            first.loss_eqprop,
            last.loss_eqprop,
            first.loss_oracle_baseline,
            last.loss_oracle_baseline,
            self.final_relative_gap,
            first.alignment.unwrap_or(f64::NAN),
            self.late_alignment
        )
    }

    fn artifacts(&self) -> Result<Vec<Artifact>> {
        let series = |name: &str, f: &dyn Fn(&TrainStep) -> Option<f64>| Series {
            name: name.to_string(),
            points: self
                .steps
                .iter()
                .filter_map(|s| Some((s.step as f64, f(s)?)))
                .collect(),
            line: true,
        };
        let loss = Plot {
            title: "Training loss".into(),
            x_label: "step".into(),
            y_label: "DSM loss".into(),
            x_scale: Scale::Linear,
            y_scale: Scale::Log,
            series: vec![
                series("eqprop", &|s| Some(s.loss_eqprop)),
                series("oracle", &|s| Some(s.loss_oracle_baseline)),
            ],
        };
        let align = Plot {
            title: "Alignment with oracle gradient".into(),
            x_label: "step".into(),
            y_label: "cosine".into(),
            x_scale: Scale::Linear,
            y_scale: Scale::Linear,
            series: vec![series("alignment", &|s| s.alignment)],
        };
        Ok(vec![
            Artifact::new("table.csv", self.table_csv()?),
            Artifact::json("table.json", self)?,
            Artifact::new("plot_loss.svg", loss.render()),
            Artifact::new("plot_alignment.svg", align.render()),
        ])
    }
}
