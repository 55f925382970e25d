//! Seeded sweep runner.
//!
//! One experiment = (sweep points) x (seeds). Every run owns a directory
//! under the configured output root, gets a manifest recording full
//! provenance (config digest, seed, sweep point, model summary, stage
//! status), and emits its CSV artifacts there. Workers run in parallel;
//! everything written is a pure function of (config, seed), so reruns are
//! byte-identical. Nothing time-dependent is ever written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ccq_core::coverage::{self, BoundKind, BoundSpec};
use ccq_core::ensemble::{round_log_csv, run_ensemble, EnsembleConfig};
use ccq_core::mdp::{average_policy_error, value_iteration, ValueIterationResult};
use ccq_core::ordering::{ccq, CcqParams};
use ccq_core::qlearning::{train_agent, train_double_q, TraceSpec};
use ccq_core::seeds;
use ccq_core::TabularMdp;

use crate::config::{AlgorithmKind, ExperimentConfig};
use crate::{digest, HarnessError, Result};

/// Value iteration oracle settings used across the harness.
pub const ORACLE_TOL: f64 = 1e-8;
pub const ORACLE_MAX_ITER: usize = 200_000;
/// Oracles are computed only when the transition tensor stays below this.
pub const ORACLE_ENTRY_CAP: usize = 20_000_000;

/// One sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: Option<usize>,
    pub k: Option<usize>,
    pub u: Option<f64>,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(s) = self.size {
            parts.push(format!("size{s}"));
        }
        if let Some(k) = self.k {
            parts.push(format!("k{k}"));
        }
        if let Some(u) = self.u {
            parts.push(format!("u{u}"));
        }
        if parts.is_empty() {
            parts.push("base".to_string());
        }
        parts.join("_")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub kind: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub c_min: f64,
    pub c_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-run provenance record, written as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub crate_version: String,
    pub config_digest: String,
    pub algorithm: String,
    pub seed: u64,
    pub sweep: SweepPoint,
    pub model: Option<ModelSummary>,
    pub stages: Vec<StageStatus>,
    /// Full resolved configuration (every hyperparameter of the run).
    pub config: ExperimentConfig,
}

/// Numeric outcome of one run (one aggregate CSV row).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub sweep: SweepPoint,
    pub seed: u64,
    pub algorithm: String,
    pub ape: Option<f64>,
    pub cc_star: Option<f64>,
    pub lambda_max: Option<f64>,
    pub steps: u64,
    pub coverage_complete: bool,
    pub failed_stage: Option<String>,
}

#[derive(Debug)]
pub struct ExperimentSummary {
    pub records: Vec<RunRecord>,
    pub aggregate_csv: PathBuf,
    pub failures: usize,
}

/// Cartesian sweep of the configured dimensions (sizes x k x u), in config
/// order. Missing dimensions contribute a single unset slot.
pub fn sweep_points(config: &ExperimentConfig) -> Vec<SweepPoint> {
    let sizes = config.sweep_sizes();
    let ks: Vec<Option<usize>> = if config.sweep.k_values.is_empty() {
        vec![None]
    } else {
        config.sweep.k_values.iter().map(|&k| Some(k)).collect()
    };
    let us: Vec<Option<f64>> = if config.sweep.u_values.is_empty() {
        vec![None]
    } else {
        config.sweep.u_values.iter().map(|&u| Some(u)).collect()
    };
    let mut out = Vec::new();
    for &size in &sizes {
        for &k in &ks {
            for &u in &us {
                out.push(SweepPoint { size, k, u });
            }
        }
    }
    out
}

fn model_summary(config: &ExperimentConfig, mdp: &TabularMdp) -> ModelSummary {
    let (c_min, c_max) = mdp.cost_bounds();
    ModelSummary {
        kind: format!("{:?}", config.model.kind).to_lowercase(),
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        discount: mdp.discount(),
        c_min,
        c_max,
    }
}

/// Compute the exact oracle when the model is small enough.
pub fn oracle_for(mdp: &TabularMdp) -> Option<ValueIterationResult> {
    let entries = mdp.n_states() * mdp.n_states() * mdp.n_actions();
    if entries > ORACLE_ENTRY_CAP {
        return None;
    }
    value_iteration(mdp, ORACLE_TOL, ORACLE_MAX_ITER).ok()
}

struct RunOutput {
    record: RunRecord,
    manifest: RunManifest,
    files: Vec<(String, String)>,
}

fn execute_run(
    config: &ExperimentConfig,
    point: SweepPoint,
    seed: u64,
    mdp: &TabularMdp,
    oracle: Option<&ValueIterationResult>,
    config_digest: &str,
) -> RunOutput {
    let algorithm = config.algorithm.kind;
    let mut stages: Vec<StageStatus> = Vec::new();
    let mut files: Vec<(String, String)> = Vec::new();
    let mut record = RunRecord {
        sweep: point,
        seed,
        algorithm: algorithm.label().to_string(),
        ape: None,
        cc_star: None,
        lambda_max: None,
        steps: 0,
        coverage_complete: false,
        failed_stage: None,
    };
    let ok = |stages: &mut Vec<StageStatus>, stage: &str| {
        stages.push(StageStatus {
            stage: stage.to_string(),
            ok: true,
            error: None,
        });
    };

    let k = point.k.unwrap_or(config.algorithm.k);

    let schedule = config.schedule.to_schedule();
    let trace_spec = TraceSpec::pairs(&config.tracking.pairs, config.tracking.record_every);
    let run_seed = seeds::derive(seed, 0);

    let outcome: Result<()> = (|| {
        match algorithm {
            AlgorithmKind::Ccq => {
                let params = CcqParams {
                    k,
                    k_total: config.family.k_total,
                    update_ratio: match point.u {
                        Some(u) => ccq_core::ensemble::UpdateRatio::Fixed { value: u },
                        None => config.algorithm.update_ratio(),
                    },
                    fusion_period: config.algorithm.fusion_period,
                    alpha: config.algorithm.alpha,
                    seed: run_seed,
                    tracked_pairs: config.tracking.pairs.clone(),
                    record_every: config.tracking.record_every,
                    burn_in: config.tracking.burn_in,
                    compute_bounds: config.algorithm.compute_bounds
                        && mdp.n_states() * mdp.n_states() * mdp.n_actions() <= ORACLE_ENTRY_CAP,
                    vi_tol: ORACLE_TOL,
                    vi_max_iter: ORACLE_MAX_ITER,
                };
                let out = ccq(mdp, &schedule, &params)?;
                ok(&mut stages, "ccq");
                files.push(("ordering.csv".into(), out.ordering.to_csv()));
                if let Some(report) = &out.coverage {
                    files.push(("coverage.csv".into(), report.to_csv()));
                    record.cc_star = Some(report.cc_star);
                    record.lambda_max = report.lambda;
                }
                files.push(("round_log.csv".into(), round_log_csv(&out.ensemble.round_log)));
                if config.algorithm.write_checkpoint {
                    let json = serde_json::to_string(&out.ensemble.state)
                        .map_err(|e| HarnessError::Config(format!("checkpoint: {e}")))?;
                    files.push(("checkpoint.json".into(), json));
                }
                record.steps = out.ensemble.state.members.iter().map(|m| m.steps).sum();
                record.coverage_complete = out
                    .ensemble
                    .state
                    .members
                    .iter()
                    .all(|m| m.coverage.complete);
                if let Some(vi) = oracle {
                    record.ape = Some(average_policy_error(&out.policy, &vi.policy)?);
                }
            }
            AlgorithmKind::NeqlFixedMembers => {
                let members = match point.k {
                    Some(k) => (1..=k).collect(),
                    None => config.algorithm.resolved_members(),
                };
                let ens_config = EnsembleConfig {
                    members,
                    update_ratio: match point.u {
                        Some(u) => ccq_core::ensemble::UpdateRatio::Fixed { value: u },
                        None => config.algorithm.update_ratio(),
                    },
                    fusion_period: config.algorithm.fusion_period,
                    weights: None,
                };
                let out = run_ensemble(
                    mdp,
                    &ens_config,
                    &schedule,
                    &trace_spec,
                    run_seed,
                    oracle.map(|o| &o.policy),
                )?;
                ok(&mut stages, "ensemble");
                files.push(("round_log.csv".into(), round_log_csv(&out.round_log)));
                if config.algorithm.write_checkpoint {
                    let json = serde_json::to_string(&out.state)
                        .map_err(|e| HarnessError::Config(format!("checkpoint: {e}")))?;
                    files.push(("checkpoint.json".into(), json));
                }
                let report = coverage::coverage_report(
                    &out.state.ensemble_trace,
                    &out.policy,
                    &config.tracking.pairs,
                    0,
                    config.tracking.burn_in,
                    None,
                )?;
                files.push(("coverage.csv".into(), report.to_csv()));
                record.cc_star = Some(report.cc_star);
                record.steps = out.state.members.iter().map(|m| m.steps).sum();
                record.coverage_complete =
                    out.state.members.iter().all(|m| m.coverage.complete);
                if let Some(vi) = oracle {
                    record.ape = Some(average_policy_error(&out.policy, &vi.policy)?);
                }
            }
            AlgorithmKind::SingleQ | AlgorithmKind::DoubleQ => {
                let rng = seeds::rng(run_seed, 1);
                let out = if algorithm == AlgorithmKind::SingleQ {
                    train_agent(mdp, &schedule, rng, &trace_spec)?
                } else {
                    train_double_q(mdp, &schedule, rng, &trace_spec)?
                };
                ok(&mut stages, "train");
                files.push(("trace.csv".into(), out.trace.to_csv()));
                let policy = out.q.greedy_policy();
                let bound_spec = oracle.map(|vi| {
                    let lambda = coverage::estimate_lambda(
                        &out.trace,
                        &vi.q,
                        config.tracking.burn_in,
                    )
                    .unwrap_or(0.0);
                    let theta = coverage::estimate_theta(&vi.q).unwrap_or(1.0);
                    (vi, lambda, theta)
                });
                let report = coverage::coverage_report(
                    &out.trace,
                    &policy,
                    &config.tracking.pairs,
                    1,
                    config.tracking.burn_in,
                    bound_spec.as_ref().map(|(vi, lambda, theta)| BoundSpec {
                        q_star: &vi.q,
                        lambda: *lambda,
                        theta: *theta,
                        kind: BoundKind::PerEnvironment,
                        u: None,
                    }),
                )?;
                files.push(("coverage.csv".into(), report.to_csv()));
                record.lambda_max = bound_spec.as_ref().map(|(_, l, _)| *l);
                record.cc_star = Some(report.cc_star);
                record.steps = out.steps;
                record.coverage_complete = out.coverage.complete;
                if let Some(vi) = oracle {
                    record.ape = Some(average_policy_error(&policy, &vi.policy)?);
                }
            }
        }
        Ok(())
    })();

    if let Err(e) = outcome {
        let stage_name = match &e {
            HarnessError::Core(ccq_core::Error::Stage { stage, .. }) => stage.to_string(),
            _ => "run".to_string(),
        };
        stages.push(StageStatus {
            stage: stage_name.clone(),
            ok: false,
            error: Some(e.to_string()),
        });
        record.failed_stage = Some(stage_name);
    }

    let manifest = RunManifest {
        schema_version: crate::config::SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: config_digest.to_string(),
        algorithm: algorithm.label().to_string(),
        seed,
        sweep: point,
        model: Some(model_summary(config, mdp)),
        stages,
        config: config.clone(),
    };
    RunOutput {
        record,
        manifest,
        files,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Render the aggregate CSV (one row per run, deterministic order).
pub fn aggregate_csv(records: &[RunRecord]) -> String {
    let mut out =
        String::from("size,k,u,seed,algorithm,ape,cc_star,lambda_max,steps,coverage_complete,failed_stage\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.sweep.size.map(|s| s.to_string()).unwrap_or_default(),
            r.sweep.k.map(|k| k.to_string()).unwrap_or_default(),
            r.sweep.u.map(|u| u.to_string()).unwrap_or_default(),
            r.seed,
            r.algorithm,
            fmt_opt(r.ape),
            fmt_opt(r.cc_star),
            fmt_opt(r.lambda_max),
            r.steps,
            r.coverage_complete,
            r.failed_stage.clone().unwrap_or_default(),
        );
    }
    out
}

/// Run the configured experiment: every sweep point x seed, results on disk.
///
/// Stage failures are recorded in the run manifest and the sweep continues.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let points = sweep_points(config);
    let config_digest = digest(&config.canonical_toml());
    std::fs::create_dir_all(&config.output_dir)?;

    // Model and oracle are per sweep point, shared across seeds.
    let mut point_models = Vec::with_capacity(points.len());
    for point in &points {
        let mdp = config.build_model(point.size)?;
        let oracle = oracle_for(&mdp);
        point_models.push((point, mdp, oracle));
    }

    let jobs: Vec<(usize, &(&SweepPoint, TabularMdp, Option<ValueIterationResult>), u64)> =
        point_models
            .iter()
            .enumerate()
            .flat_map(|(pi, pm)| config.seeds.iter().map(move |&s| (pi, pm, s)))
            .collect();

    let outputs: Vec<(usize, u64, RunOutput)> = jobs
        .par_iter()
        .map(|&(pi, (point, mdp, oracle), seed)| {
            let out = execute_run(config, **point, seed, mdp, oracle.as_ref(), &config_digest);
            (pi, seed, out)
        })
        .collect();

    let mut records = Vec::with_capacity(outputs.len());
    let mut failures = 0;
    // outputs preserve job order (par_iter . collect keeps input order)
    for (pi, seed, out) in outputs {
        let dir = config
            .output_dir
            .join(points[pi].label())
            .join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir)?;
        let manifest_json = serde_json::to_string_pretty(&out.manifest)
            .map_err(|e| HarnessError::Config(format!("manifest: {e}")))?;
        std::fs::write(dir.join("manifest.json"), manifest_json)?;
        for (name, contents) in &out.files {
            std::fs::write(dir.join(name), contents)?;
        }
        if out.record.failed_stage.is_some() {
            failures += 1;
        }
        records.push(out.record);
    }

    let aggregate = aggregate_csv(&records);
    let aggregate_path = config.output_dir.join("aggregate.csv");
    std::fs::write(&aggregate_path, aggregate)?;
    Ok(ExperimentSummary {
        records,
        aggregate_csv: aggregate_path,
        failures,
    })
}

/// Write a built model to the serialization format (`build-model` subcommand).
pub fn write_model(config: &ExperimentConfig, out: &Path) -> Result<ModelSummary> {
    let mdp = config.build_model(None)?;
    mdp.save(out)?;
    Ok(model_summary(config, &mdp))
}

/// Materialize the n-hop family next to a written model: one `member_<n>.mdp`
/// per order plus a `family.txt` manifest of discounts and cost bounds.
pub fn write_family(config: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    let mdp = config.build_model(None)?;
    let family = ccq_core::synthesis::EnvironmentFamily::build(mdp, config.family.k_total)?;
    std::fs::create_dir_all(dir)?;
    for order in family.orders() {
        let member = family.member(order).expect("order just built");
        member.save(dir.join(format!("member_{order}.mdp")))?;
    }
    let manifest_path = dir.join("family.txt");
    std::fs::write(&manifest_path, family.manifest())?;
    Ok(manifest_path)
}
