use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use opbm::clicksim::{ClickModel, ClickModelConfig, OutlierPlacement, DEFAULT_DEPTH};
use opbm::corpus::CorpusFormat;
use opbm::eval::{GainMode, DEFAULT_CE_CLAMP};
use opbm::experiment::{preset, run_experiment, ExperimentConfig, SplitSection, PRESETS};
use opbm::learner::{LearnerKind, RegressionConfig};
use opbm::loglab::DEFAULT_MIN_SUPPORT;
use opbm::manifest::verify;
use opbm::outliers::DEFAULT_THRESHOLD;
use opbm::pipeline::{
    analyze_stage, detect_stage, estimate_stage, evaluate_stage, simulate_stage, synth, train_stage,
    AnalyzeParams, DetectParams, EstimateParams, EvaluateParams, ObservableSpec, SimulateParams,
    SynthParams, TrainParams,
};
use opbm::propensity_em::{EmConfig, LabelMode};
use opbm::ranker::EstimatorKind;

#[derive(Parser)]
#[command(name = "opbm", version, about = "Outlier-aware click models and counterfactual learning to rank")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graded corpus as svmlight.
    Synth(SynthArgs),
    /// Flag outliers in presented lists from observable features.
    Detect(DetectArgs),
    /// Split a corpus, present it with a production ranker and simulate clicks.
    Simulate(SimulateArgs),
    /// Estimate examination propensities from a click log by regression EM.
    Estimate(EstimateArgs),
    /// Train an IPS-corrected ranker.
    Train(TrainArgs),
    /// Score a held-out corpus and compute NDCG and corrected-click CE.
    Evaluate(EvaluateArgs),
    /// CTR per position, per outlier group, and outlier vs non-outlier summary.
    Analyze(AnalyzeArgs),
    /// Run a multi-seed experiment from a config file or preset.
    Experiment(ExperimentArgs),
    /// Re-hash a results directory against its manifest.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct OutArg {
    /// Results directory; the manifest lives at its root.
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    queries: usize,
    #[arg(long, default_value_t = 10)]
    docs: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = opbm::corpus::SYNTH_SIGNAL)]
    signal: f64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ObservableArgs {
    /// Zero-based corpus feature indices that are observable.
    #[arg(long, value_delimiter = ',')]
    columns: Vec<usize>,
    /// CSV `query_id,doc_id,<feature>...` with observable features.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Keep only the first outlier of each list.
    #[arg(long)]
    lazy: bool,
}

impl ObservableArgs {
    fn spec(&self) -> Option<ObservableSpec> {
        if self.columns.is_empty() && self.sidecar.is_none() {
            None
        } else {
            Some(ObservableSpec {
                columns: self.columns.clone(),
                sidecar: self.sidecar.clone(),
            })
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "letor_svmlight")]
    format: CorpusFormat,
    /// Rankings CSV `query_id,doc_id,rank,...`; corpus order when absent.
    #[arg(long)]
    rankings: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    depth: usize,
    #[command(flatten)]
    observable: ObservableArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ClickModelArgs {
    #[arg(long, default_value = "opbm_g")]
    model: ClickModel,
    #[arg(long, default_value_t = 0.75)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    depth: usize,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Propensity table CSV for the opbm_real model.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    max_sessions: Option<u64>,
}

impl ClickModelArgs {
    fn config(&self, seed: u64) -> ClickModelConfig {
        ClickModelConfig {
            model: self.model,
            alpha: self.alpha,
            sigma: self.sigma,
            depth: self.depth,
            eta: self.eta,
            table_path: self.table.clone(),
            seed,
            max_sessions: self.max_sessions,
        }
    }
}

#[derive(Args)]
struct LearnerArgs {
    #[arg(long, default_value = "boosted_stumps")]
    learner: LearnerKind,
    #[arg(long, default_value_t = 100)]
    rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 2)]
    max_leaves: usize,
}

impl LearnerArgs {
    fn config(&self) -> RegressionConfig {
        RegressionConfig {
            learner: self.learner,
            rounds: self.rounds,
            learning_rate: self.learning_rate,
            max_leaves: self.max_leaves,
            ..RegressionConfig::default()
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "letor_svmlight")]
    format: CorpusFormat,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300_000)]
    clicks: u64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0.01)]
    production_fraction: f64,
    /// Share of lists given synthetic outliers (ignored with --columns/--sidecar).
    #[arg(long, default_value_t = 0.5)]
    p_abnormal: f64,
    /// Fixed outlier ranks, e.g. `4,9`; a uniform single rank when absent.
    #[arg(long, value_delimiter = ',')]
    outlier_positions: Vec<usize>,
    #[command(flatten)]
    click_model: ClickModelArgs,
    #[command(flatten)]
    observable: ObservableArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct EstimateArgs {
    /// Corpus the log refers to (`train.svm` from simulate).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value = "opbm")]
    estimator: EstimatorKind,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    #[arg(long, default_value = "sample")]
    label_mode: String,
    #[arg(long, default_value_t = 1e-6)]
    theta_floor: f64,
    #[arg(long)]
    no_anchor: bool,
    /// Start relevance from a constant 0.5 instead of IPS-corrected clicks.
    #[arg(long)]
    no_warm_start: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    learner: LearnerArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    estimator: EstimatorKind,
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    target_cap: f64,
    #[command(flatten)]
    learner: LearnerArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    test_corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    train_corpus: PathBuf,
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    estimator: EstimatorKind,
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// `graded` or `binary`.
    #[arg(long, default_value = "graded")]
    gain: String,
    #[arg(long, default_value_t = DEFAULT_CE_CLAMP)]
    ce_clamp: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_SUPPORT)]
    min_support: f64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// One of rq2_real_table, rq3_sweep, rq4_two_outliers, pbm_sanity.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    clicks: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Propensity table for opbm_real.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "results")]
    dir: PathBuf,
}

fn parse_label_mode(s: &str) -> Result<LabelMode> {
    match s {
        "sample" => Ok(LabelMode::Sample),
        "soft" => Ok(LabelMode::Soft),
        other => bail!("unknown label mode {other:?} (sample or soft)"),
    }
}

fn parse_gain(s: &str) -> Result<GainMode> {
    match s {
        "graded" => Ok(GainMode::Graded),
        "binary" => Ok(GainMode::Binary),
        other => bail!("unknown gain mode {other:?} (graded or binary)"),
    }
}

fn experiment_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut config = match (&args.config, &args.preset) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => bail!("give --config <file> or --preset <{}>", PRESETS.join("|")),
        (Some(_), Some(_)) => unreachable!("clap rejects both"),
    };
    if let Some(v) = args.runs {
        config.n_runs = v;
    }
    if let Some(v) = args.base_seed {
        config.base_seed = v;
    }
    if let Some(v) = args.clicks {
        config.n_clicks = v;
    }
    if let Some(v) = &args.alphas {
        config.sweep.alphas = v.clone();
    }
    if let Some(v) = &args.table {
        config.click_model.table_path = Some(v.clone());
    }
    if let Some(v) = &args.out {
        config.output_dir = v.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(a) => {
            let params = SynthParams {
                n_queries: a.queries,
                docs_per_query: a.docs,
                feature_dim: a.dim,
                seed: a.seed,
                signal: a.signal,
            };
            let path = synth(&params, &a.out.out)?;
            println!("wrote {}", path.display());
        }
        Command::Detect(a) => {
            let Some(observable) = a.observable.spec() else {
                bail!("detect needs --columns or --sidecar");
            };
            let params = DetectParams {
                corpus: a.corpus,
                format: a.format,
                rankings: a.rankings,
                observable,
                depth: a.depth,
                threshold: a.observable.threshold,
                lazy: a.observable.lazy,
            };
            let sigs = detect_stage(&params, &a.out.out)?;
            let abnormal = sigs.iter().filter(|s| !s.is_empty()).count();
            println!("{abnormal} of {} lists have outliers", sigs.len());
        }
        Command::Simulate(a) => {
            let params = SimulateParams {
                corpus: a.corpus,
                format: a.format,
                seed: a.seed,
                n_clicks: a.clicks,
                split: SplitSection {
                    train_fraction: a.train_fraction,
                    production_fraction: a.production_fraction,
                    test_fraction: a.test_fraction,
                },
                production: RegressionConfig::default(),
                outliers: OutlierPlacement {
                    p_abnormal: a.p_abnormal,
                    fixed_positions: a.outlier_positions,
                },
                observable: a.observable.spec(),
                threshold: a.observable.threshold,
                lazy: a.observable.lazy,
                click_model: a.click_model.config(a.seed),
            };
            let log = simulate_stage(&params, &a.out.out)?;
            println!(
                "{} sessions, {} clicks, {} records -> {}",
                log.sessions,
                log.n_clicks(),
                log.records.len(),
                a.out.out.display()
            );
        }
        Command::Estimate(a) => {
            let params = EstimateParams {
                corpus: a.corpus,
                log: a.log,
                estimator: a.estimator,
                em: EmConfig {
                    max_iterations: a.iterations,
                    theta_floor: a.theta_floor,
                    normalize_anchor: !a.no_anchor,
                    relevance_label_mode: parse_label_mode(&a.label_mode)?,
                    relevance_warm_start: !a.no_warm_start,
                    seed: a.seed,
                    regression: a.learner.config(),
                },
            };
            let path = estimate_stage(&params, &a.out.out)?;
            println!("wrote {}", path.display());
        }
        Command::Train(a) => {
            let params = TrainParams {
                corpus: a.corpus,
                log: a.log,
                estimator: a.estimator,
                table: a.table,
                target_cap: a.target_cap,
                regression: a.learner.config(),
            };
            let path = train_stage(&params, &a.out.out)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate(a) => {
            let params = EvaluateParams {
                test_corpus: a.test_corpus,
                model: a.model,
                train_corpus: a.train_corpus,
                log: a.log,
                estimator: a.estimator,
                table: a.table,
                k: a.k,
                gain: parse_gain(&a.gain)?,
                ce_clamp: a.ce_clamp,
                seed: a.seed,
            };
            let report = evaluate_stage(&params, &a.out.out)?;
            println!(
                "{}: ndcg@{} = {:.4}, mean CE = {:.4}",
                report.estimator, report.k, report.ndcg_at_k, report.mean_ce
            );
        }
        Command::Analyze(a) => {
            let params = AnalyzeParams {
                corpus: a.corpus,
                log: a.log,
                min_support: a.min_support,
            };
            analyze_stage(&params, &a.out.out)?;
            println!("wrote analysis to {}", a.out.out.display());
        }
        Command::Experiment(a) => {
            let config = experiment_config(&a)?;
            if a.print_config {
                print!("{}", config.to_toml());
                return Ok(ExitCode::SUCCESS);
            }
            let outcome = run_experiment(&config)?;
            println!("alpha  estimator   ndcg_mean  ndcg_std  ce_mean   ce_std");
            for r in &outcome.aggregate {
                println!(
                    "{:<6} {:<11} {:.4}     {:.4}    {:.4}    {:.4}",
                    r.alpha, r.estimator, r.ndcg_mean, r.ndcg_std, r.ce_mean, r.ce_std
                );
            }
            let failed = outcome.manifest.runs.iter().filter(|r| !r.ok).count();
            if failed > 0 {
                eprintln!("{failed} run(s) failed; see manifest.json");
            }
            println!("results in {}", outcome.output_dir.display());
        }
        Command::Verify(a) => {
            let drift = verify(&a.dir).with_context(|| format!("verifying {}", a.dir.display()))?;
            if drift.is_empty() {
                println!("ok: every file matches the manifest");
            } else {
                for d in &drift {
                    println!("{:?}: {}", d.kind, d.path);
                }
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
