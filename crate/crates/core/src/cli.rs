//! Command-line front end. The `thermoprop` binary only calls [`main`].

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{self, RunConfig, SubstrateSource};
use crate::costs::{self, cost_report, PhysicalParams};
use crate::eqprop::Estimator;
use crate::error::{Result, ThermoError};
use crate::experiments::{self, Artifact, Report};
use crate::substrate::SubstrateConfig;

pub const EXIT_OK: u8 = 0;
/// Unreadable, malformed or inconsistent configuration (also clap usage errors).
pub const EXIT_CONFIG: u8 = 2;
/// The run started but a numerical step failed (divergence, failed fit, …).
pub const EXIT_NUMERICAL: u8 = 3;
/// Output could not be written.
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "thermoprop",
    version,
    about = "Equilibrium-propagation training experiments on low-rank bilinear Langevin substrates",
    after_help = "Exit status: 0 success, 2 configuration error, 3 numerical failure, 4 output error.\n\
                  THERMOPROP_SEED=<n> replaces the seed list with n, n+1, ... (same length) before --seeds is applied."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gradient agreement of one-sided and symmetric estimators with the oracle gradient.
    E1(E1Args),
    /// Bias of the estimators versus the nudge strength, with log-log slope fits.
    E2(E2Args),
    /// Bias/variance sweep of the symmetric estimator under Langevin noise and the optimal nudge.
    E3(RunArgs),
    /// Train with symmetric EqProp next to an oracle-gradient baseline.
    Train(TrainArgs),
    /// Energy per training step, analog substrate versus digital back-propagation.
    Costs(CostsArgs),
    /// Build a substrate and report its stiffness spectrum.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration (unknown keys are rejected).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named preset: paper-e1 (D=64, k=16, L=4, K=300 steps), paper-exact (same substrate,
    /// exact equilibria), desk-small (D=16), sweep-d8 (D=8 Langevin sweep).
    #[arg(long)]
    pub preset: Option<String>,
    /// Output root; files go to <out>/<experiment>/<config hash>/.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Seed list, e.g. "0..10" or "1,4,7". Each seed picks one data batch and noise stream.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Debug, Args)]
pub struct E1Args {
    #[command(flatten)]
    pub run: RunArgs,
    /// Nudge strength beta of both estimators.
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorChoice {
    /// (grad_theta E at +beta minus at 0) / beta
    OneSided,
    /// (grad_theta E at +beta minus at -beta) / 2 beta
    Symmetric,
    Both,
}

#[derive(Debug, Args)]
pub struct E2Args {
    #[command(flatten)]
    pub run: RunArgs,
    /// Estimators to sweep.
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorChoice>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of SGD updates.
    #[arg(long)]
    pub steps: Option<usize>,
    /// SGD learning rate shared by both runs.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Nudge strength beta of the EqProp run.
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CostsArgs {
    /// JSON physical parameters {kB_T, lambda_star, n_cells, c_init, n_mac, e_mac}.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// representative (effective cell noise energy 1e-12 J) or thermal-limit (kB_T at 300 K).
    #[arg(long)]
    pub preset: Option<String>,
    /// Replace n_mac by 6 * sum k (d_m + d_m') of this run preset's substrate.
    #[arg(long)]
    pub mac_from_preset: Option<String>,
    /// Also write the report to <out>/costs/<name>/report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Run configuration or bare substrate configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named run preset.
    #[arg(long)]
    pub preset: Option<String>,
}

pub fn exit_code(e: &ThermoError) -> u8 {
    match e {
        ThermoError::Io(_) | ThermoError::Csv(_) => EXIT_IO,
        e if e.is_config_error() => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

/// Parses a seed list: `a..b`, `a..=b` or comma-separated values.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || ThermoError::InvalidArgument(format!("cannot parse seed list {text:?}"));
    let t = text.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = t.split_once("..=") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else if let Some((a, b)) = t.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..b).collect()
    } else {
        t.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn load_run_config(args: &RunArgs, default_preset: &str) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => config::preset(name)?,
        (None, None) => config::preset(default_preset)?,
    };
    cfg.apply_seed_env()?;
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_root(args: &RunArgs, cfg: &RunConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => f(),
        Some(0) => Err(ThermoError::InvalidArgument("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ThermoError::InvalidConfig(e.to_string()))?
            .install(f),
    }
}

fn emit(root: &Path, cfg: &RunConfig, report: &dyn Report) -> Result<PathBuf> {
    let canonical = RunConfig {
        out_dir: None,
        ..cfg.clone()
    };
    let mut files = report.artifacts()?;
    files.push(Artifact::new("summary.txt", report.summary()));
    files.push(Artifact::new("config.json", canonical.to_json() + "\n"));
    let dir = experiments::write_artifacts(root, report.experiment_id(), report.config_hash(), &files)?;
    print!("{}", report.summary());
    println!("wrote {}", dir.display());
    Ok(dir)
}

fn run_experiment(
    args: &RunArgs,
    cfg: RunConfig,
    run: impl FnOnce(&RunConfig) -> Result<Box<dyn Report + Send>> + Send,
) -> Result<()> {
    let root = out_root(args, &cfg);
    let report = with_jobs(args.jobs, || run(&cfg))?;
    emit(&root, &cfg, report.as_ref())?;
    Ok(())
}

fn cmd_costs(args: &CostsArgs) -> Result<()> {
    let (mut params, name) = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let p: PhysicalParams = serde_json::from_str(&config::read_config_text(path)?)?;
            let stem = path.file_stem().map_or("custom".to_string(), |s| s.to_string_lossy().into_owned());
            (p, stem)
        }
        (None, Some(n)) => (costs::cost_preset(n)?, n.clone()),
        (None, None) => (costs::cost_preset("representative")?, "representative".to_string()),
    };
    let mut label = name.clone();
    if let Some(run) = &args.mac_from_preset {
        let spec = config::preset(run)?.build_substrate()?;
        params.n_mac = costs::n_mac_from_substrate(&spec);
        label = format!("{name}+{run}");
    }
    let report = cost_report(&params, Some(&label))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    if let Some(root) = &args.out {
        let dir = experiments::write_artifacts(root, "costs", &label, &[Artifact::new("report.json", text)])?;
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> Result<()> {
    let sub: SubstrateConfig = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = config::read_config_text(path)?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            if value.get("partition").is_some() {
                serde_json::from_value(value)?
            } else {
                let cfg = RunConfig::load(path)?;
                match cfg.substrate {
                    SubstrateSource::Inline(s) => s,
                    SubstrateSource::File { .. } => unreachable!("load inlines the substrate"),
                }
            }
        }
        (None, Some(n)) => config::preset(n)?.substrate_config()?,
        (None, None) => {
            return Err(ThermoError::InvalidArgument(
                "validate needs --config or --preset".into(),
            ))
        }
    };
    let spec = sub.build()?;
    let st = spec.stiffness();
    let p = spec.partition();
    println!("substrate ok");
    println!(
        "  D = {} (input {}, hidden {}, output {}), modules {:?}",
        p.dim(),
        p.input_dim,
        p.hidden_dim,
        p.output_dim,
        p.module_sizes
    );
    println!("  couplings {}, parameters {}", spec.couplings().len(), spec.num_params());
    println!(
        "  lambda_min {:.6e} (floor {:.3e}), before rescale {:.6e}, coupling rescale {:.6}",
        st.lambda_min, st.lambda_floor, st.lambda_min_before_rescale, st.coupling_rescale
    );
    Ok(())
}

fn estimators(choice: EstimatorChoice) -> Vec<Estimator> {
    match choice {
        EstimatorChoice::OneSided => vec![Estimator::OneSided],
        EstimatorChoice::Symmetric => vec![Estimator::Symmetric],
        EstimatorChoice::Both => vec![Estimator::OneSided, Estimator::Symmetric],
    }
}

fn boxed<R: Report + Send + 'static>(r: Result<R>) -> Result<Box<dyn Report + Send>> {
    r.map(|r| Box::new(r) as Box<dyn Report + Send>)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::E1(a) => {
            let mut cfg = load_run_config(&a.run, "paper-e1")?;
            if let Some(b) = a.beta {
                cfg.e1.beta = b;
            }
            cfg.validate()?;
            run_experiment(&a.run, cfg, |c| boxed(experiments::run_e1(c)))
        }
        Command::E2(a) => {
            let mut cfg = load_run_config(&a.run, "paper-exact")?;
            if let Some(e) = a.estimator {
                cfg.e2.estimators = estimators(e);
            }
            run_experiment(&a.run, cfg, |c| boxed(experiments::run_e2(c)))
        }
        Command::E3(a) => {
            let cfg = load_run_config(a, "sweep-d8")?;
            run_experiment(a, cfg, |c| boxed(experiments::run_e3_sweep(c)))
        }
        Command::Train(a) => {
            let mut cfg = load_run_config(&a.run, "desk-small")?;
            if let Some(n) = a.steps {
                cfg.train.steps = n;
            }
            if let Some(lr) = a.learning_rate {
                cfg.train.learning_rate = lr;
            }
            if let Some(b) = a.beta {
                cfg.train.beta = b;
            }
            cfg.validate()?;
            run_experiment(&a.run, cfg, |c| boxed(experiments::run_e3_training(c)))
        }
        Command::Costs(a) => cmd_costs(a),
        Command::Validate(a) => cmd_validate(a),
    }
}

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_seeds("5, 1,9").unwrap(), vec![5, 1, 9]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_are_distinct() {
        assert_eq!(exit_code(&ThermoError::InvalidConfig("x".into())), EXIT_CONFIG);
        assert_eq!(
            exit_code(&ThermoError::StiffnessViolation {
                lambda_min: 0.0,
                lambda_floor: 0.1
            }),
            EXIT_CONFIG
        );
        assert_eq!(exit_code(&ThermoError::FitRefused("x".into())), EXIT_NUMERICAL);
        assert_eq!(
            exit_code(&ThermoError::TrainingDiverged { step: 1, loss: 1e7 }),
            EXIT_NUMERICAL
        );
    }
}
