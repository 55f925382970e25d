use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccq_cli::config::{AlgorithmKind, ExperimentConfig};
use ccq_cli::figures::{reproduce_figure, FigureName};
use ccq_cli::runner::{run_experiment, write_model, ORACLE_MAX_ITER, ORACLE_TOL};
use ccq_cli::{acceptance, HarnessError};

use ccq_core::coverage::{self, BoundKind, BoundSpec};
use ccq_core::ensemble::{run_ensemble, EnsembleConfig};
use ccq_core::mdp::value_iteration;
use ccq_core::ordering::{self, CcqParams};
use ccq_core::qlearning::{train_agent, train_double_q, TraceSpec};
use ccq_core::seeds;

/// Coverage-based ensemble Q-learning harness.
#[derive(Parser)]
#[command(name = "ccq", version, about)]
struct Cli {
    /// Experiment config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override any config key, e.g. --set algorithm.k=3 --set seeds=[1,2]
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the configured model and write it in the MDP text format.
    BuildModel {
        #[arg(long)]
        out: PathBuf,
        /// Also materialize the n-hop family (members + manifest) into a
        /// directory next to the model.
        #[arg(long)]
        family_dir: Option<PathBuf>,
    },
    /// Rank the candidate environments with the closed-form rule.
    Order,
    /// Run the configured experiment sweep (all artifacts on disk).
    Train,
    /// Run the sweep and summarize policy error against the exact oracle.
    Evaluate,
    /// Run the configured algorithm once and report coverage statistics.
    Coverage,
    /// Emit plot-ready CSV data for one figure.
    ReproduceFigure {
        /// ape_vs_size | cc_vs_order | logcc_bound_env | logcc_bound_ensemble
        #[arg(long)]
        name: String,
    },
    /// Run the acceptance criteria and print one line per criterion.
    Acceptance {
        /// Run a single criterion by id.
        #[arg(long)]
        criterion: Option<u32>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    let config = ExperimentConfig::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::BuildModel { out, family_dir } => {
            let summary = write_model(&config, &out)?;
            println!(
                "wrote {} ({} states, {} actions, discount {}, costs [{}, {}])",
                out.display(),
                summary.n_states,
                summary.n_actions,
                summary.discount,
                summary.c_min,
                summary.c_max
            );
            if let Some(dir) = family_dir {
                let manifest = ccq_cli::runner::write_family(&config, &dir)?;
                println!("wrote family manifest {}", manifest.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Order => {
            config.validate()?;
            let mdp = config.build_model(None)?;
            let (c_min, c_max) = mdp.cost_bounds();
            let seed = seeds::derive(config.seeds[0], u64::from(u32::MAX));
            let result = match config.algorithm.alpha {
                ordering::AlphaMode::Fixed { value } => ordering::order_environments(
                    config.family.k_total,
                    mdp.discount(),
                    value,
                    c_min,
                    c_max,
                )?,
                ordering::AlphaMode::PerRun => {
                    let alpha = ordering::draw_alpha(&mut seeds::rng(seed, 0));
                    ordering::order_environments(
                        config.family.k_total,
                        mdp.discount(),
                        alpha,
                        c_min,
                        c_max,
                    )?
                }
                ordering::AlphaMode::PerComparison => ordering::order_environments_redraw(
                    config.family.k_total,
                    mdp.discount(),
                    &mut seeds::rng(seed, 0),
                    c_min,
                    c_max,
                )?,
            };
            std::fs::create_dir_all(&config.output_dir)?;
            let path = config.output_dir.join("ordering.csv");
            std::fs::write(&path, result.to_csv())?;
            let ranking: Vec<String> = result.ranking.iter().map(|o| o.to_string()).collect();
            println!("cost bounds: [{c_min}, {c_max}]");
            if let Some(alpha) = result.alpha {
                println!("alpha: {alpha}");
            }
            if let Some(t) = result.threshold {
                println!("threshold: {t}");
            }
            println!("ranking: {}", ranking.join(" "));
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train => {
            let summary = run_experiment(&config)?;
            println!(
                "{} runs, {} failed; aggregate at {}",
                summary.records.len(),
                summary.failures,
                summary.aggregate_csv.display()
            );
            Ok(if summary.failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Evaluate => {
            let summary = run_experiment(&config)?;
            println!("sweep,seed,algorithm,ape");
            for r in &summary.records {
                println!(
                    "{},{},{},{}",
                    r.sweep.label(),
                    r.seed,
                    r.algorithm,
                    r.ape.map(|a| a.to_string()).unwrap_or_default()
                );
            }
            let apes: Vec<f64> = summary.records.iter().filter_map(|r| r.ape).collect();
            if !apes.is_empty() {
                let mean = apes.iter().sum::<f64>() / apes.len() as f64;
                println!("mean APE over {} runs: {mean}", apes.len());
            }
            Ok(if summary.failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Coverage => {
            config.validate()?;
            let code = coverage_command(&config)?;
            Ok(code)
        }
        Command::ReproduceFigure { name } => {
            let figure: FigureName = name.parse()?;
            let path = reproduce_figure(figure, &config)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Acceptance { criterion } => {
            let results = match criterion {
                Some(1) => vec![acceptance::criterion_1_oracle_equivalence()],
                Some(2) => vec![acceptance::criterion_2_coverage_identity()],
                Some(3) => vec![acceptance::criterion_3_per_env_bound_validity()],
                Some(4) => vec![acceptance::criterion_4_ensemble_bound_validity()],
                Some(5) => vec![acceptance::criterion_5_env1_minimality()],
                Some(6) => vec![acceptance::criterion_6_ordering_agreement()],
                Some(7) => vec![acceptance::criterion_7_selection_benefit()],
                Some(8) => vec![acceptance::criterion_8_variance_trends()],
                Some(9) => vec![acceptance::criterion_9_synthesis_algebra()],
                Some(10) => vec![acceptance::criterion_10_determinism()],
                Some(other) => {
                    return Err(HarnessError::Config(format!(
                        "no criterion {other}; ids run 1..=10"
                    )))
                }
                None => acceptance::run_all(),
            };
            let mut failed = 0;
            for r in &results {
                println!("{}", r.line());
                if !r.passed {
                    failed += 1;
                }
            }
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

/// One coverage run of the configured algorithm: writes `coverage.csv` and
/// prints per-pair statistics.
fn coverage_command(config: &ExperimentConfig) -> Result<ExitCode, HarnessError> {
    let mdp = config.build_model(None)?;
    let schedule = config.schedule.to_schedule();
    let seed = seeds::derive(config.seeds[0], 0);
    let pairs = config.tracking.pairs.clone();
    let trace_spec = TraceSpec::pairs(&pairs, config.tracking.record_every);
    let burn_in = config.tracking.burn_in;

    let report = match config.algorithm.kind {
        AlgorithmKind::Ccq => {
            let params = CcqParams {
                k: config.algorithm.k,
                k_total: config.family.k_total,
                update_ratio: config.algorithm.update_ratio(),
                fusion_period: config.algorithm.fusion_period,
                alpha: config.algorithm.alpha,
                seed,
                tracked_pairs: pairs.clone(),
                record_every: config.tracking.record_every,
                burn_in,
                compute_bounds: config.algorithm.compute_bounds,
                vi_tol: ORACLE_TOL,
                vi_max_iter: ORACLE_MAX_ITER,
            };
            let out = ordering::ccq(&mdp, &schedule, &params)?;
            println!("selected members: {:?}", out.selected);
            out.coverage.expect("tracked pairs are configured")
        }
        AlgorithmKind::NeqlFixedMembers => {
            let out = run_ensemble(
                &mdp,
                &EnsembleConfig {
                    members: config.algorithm.resolved_members(),
                    update_ratio: config.algorithm.update_ratio(),
                    fusion_period: config.algorithm.fusion_period,
                    weights: None,
                },
                &schedule,
                &trace_spec,
                seed,
                None,
            )?;
            let bound_ctx = if config.algorithm.compute_bounds {
                let vi = value_iteration(&mdp, ORACLE_TOL, ORACLE_MAX_ITER)?;
                let theta = coverage::estimate_theta(&vi.q)?;
                let mut lambda = 0.0f64;
                for m in &out.state.members {
                    lambda = lambda.max(coverage::estimate_lambda(&m.trace, &vi.q, burn_in)?);
                }
                Some((vi, lambda, theta))
            } else {
                None
            };
            let u = config.algorithm.update_ratio().value(out.state.rounds);
            coverage::coverage_report(
                &out.state.ensemble_trace,
                &out.policy,
                &pairs,
                0,
                burn_in,
                bound_ctx.as_ref().and_then(|(vi, lambda, theta)| {
                    (u > 0.0 && u < 1.0).then_some(BoundSpec {
                        q_star: &vi.q,
                        lambda: *lambda,
                        theta: *theta,
                        kind: BoundKind::Ensemble,
                        u: Some(u),
                    })
                }),
            )?
        }
        AlgorithmKind::SingleQ | AlgorithmKind::DoubleQ => {
            let rng = seeds::rng(seed, 1);
            let out = if config.algorithm.kind == AlgorithmKind::SingleQ {
                train_agent(&mdp, &schedule, rng, &trace_spec)?
            } else {
                train_double_q(&mdp, &schedule, rng, &trace_spec)?
            };
            let policy = out.q.greedy_policy();
            let bound_ctx = if config.algorithm.compute_bounds {
                let vi = value_iteration(&mdp, ORACLE_TOL, ORACLE_MAX_ITER)?;
                let lambda = coverage::estimate_lambda(&out.trace, &vi.q, burn_in)?;
                let theta = coverage::estimate_theta(&vi.q)?;
                Some((vi, lambda, theta))
            } else {
                None
            };
            coverage::coverage_report(
                &out.trace,
                &policy,
                &pairs,
                1,
                burn_in,
                bound_ctx.as_ref().map(|(vi, lambda, theta)| BoundSpec {
                    q_star: &vi.q,
                    lambda: *lambda,
                    theta: *theta,
                    kind: BoundKind::PerEnvironment,
                    u: None,
                }),
            )?
        }
    };

    std::fs::create_dir_all(&config.output_dir)?;
    let path = config.output_dir.join("coverage.csv");
    std::fs::write(&path, report.to_csv())?;
    println!("cc_star: {}", report.cc_star);
    if let (Some(lambda), Some(theta)) = (report.lambda, report.theta) {
        println!("lambda: {lambda}");
        println!("theta: {theta}");
    }
    for p in &report.pairs {
        let bound = p
            .bounds
            .map(|b| format!(", e_bound {}", b.expectation))
            .unwrap_or_default();
        println!(
            "pair ({}, {}): mean log CC {}{}",
            p.state, p.action, p.mean_log_cc, bound
        );
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}
