//! Plot-ready CSV series for the four figure families.
//!
//! One figure = one CSV file in the configured output directory. Figure runs
//! always consume their full step budget (the min-visit early stop is
//! disabled) so that series from different seeds and environment orders align
//! record for record. Every emitter is a pure function of (config, seeds);
//! reruns are byte-identical.

use std::path::PathBuf;
use std::str::FromStr;

use std::fmt::Write as _;

use rayon::prelude::*;

use ccq_core::coverage::{bound_per_env, bound_ensemble, estimate_lambda, estimate_theta};
use ccq_core::ensemble::{run_ensemble, EnsembleConfig};
use ccq_core::env::{CdfSampler, NhopEnv};
use ccq_core::mdp::{average_policy_error, value_iteration};
use ccq_core::ordering::{ccq, CcqParams};
use ccq_core::qlearning::{train_agent, train_double_q, LearningSchedule, TraceSpec};
use ccq_core::seeds;

use crate::config::ExperimentConfig;
use crate::runner::{ORACLE_MAX_ITER, ORACLE_TOL};
use crate::{HarnessError, Result};

/// Desk-scale guard: reject figure configs whose transition tensors would
/// exceed this entry count.
pub const TENSOR_ENTRY_CAP: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureName {
    ApeVsSize,
    CcVsOrder,
    LogccBoundEnv,
    LogccBoundEnsemble,
}

impl FigureName {
    pub fn file_name(&self) -> &'static str {
        match self {
            FigureName::ApeVsSize => "ape_vs_size.csv",
            FigureName::CcVsOrder => "cc_vs_order.csv",
            FigureName::LogccBoundEnv => "logcc_bound_env.csv",
            FigureName::LogccBoundEnsemble => "logcc_bound_ensemble.csv",
        }
    }

    pub fn all() -> [FigureName; 4] {
        [
            FigureName::ApeVsSize,
            FigureName::CcVsOrder,
            FigureName::LogccBoundEnv,
            FigureName::LogccBoundEnsemble,
        ]
    }
}

impl FromStr for FigureName {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ape_vs_size" => Ok(FigureName::ApeVsSize),
            "cc_vs_order" => Ok(FigureName::CcVsOrder),
            "logcc_bound_env" => Ok(FigureName::LogccBoundEnv),
            "logcc_bound_ensemble" => Ok(FigureName::LogccBoundEnsemble),
            other => Err(HarnessError::Config(format!(
                "unknown figure `{other}`; expected ape_vs_size | cc_vs_order | logcc_bound_env | logcc_bound_ensemble"
            ))),
        }
    }
}

fn guard_size(config: &ExperimentConfig) -> Result<()> {
    for size in config.sweep_sizes() {
        let n = config.state_count_for(size)?;
        let entries = n * n * 2;
        if entries > TENSOR_ENTRY_CAP {
            return Err(HarnessError::SizeGuard(format!(
                "|S| = {n} implies {entries} tensor entries (> {TENSOR_ENTRY_CAP}); \
                 reduce sweep.sizes or the model level counts"
            )));
        }
    }
    Ok(())
}

/// Budget-only schedule: the run consumes exactly `max_steps` steps.
fn to_budget(schedule: &LearningSchedule) -> LearningSchedule {
    LearningSchedule {
        min_visits: u64::MAX,
        ..schedule.clone()
    }
}

/// Emit one figure CSV; returns the written path.
pub fn reproduce_figure(name: FigureName, config: &ExperimentConfig) -> Result<PathBuf> {
    config.validate()?;
    guard_size(config)?;
    std::fs::create_dir_all(&config.output_dir)?;
    let csv = match name {
        FigureName::ApeVsSize => ape_vs_size(config)?,
        FigureName::CcVsOrder => cc_vs_order(config)?,
        FigureName::LogccBoundEnv => logcc_bound(config, false)?,
        FigureName::LogccBoundEnsemble => logcc_bound(config, true)?,
    };
    let path = config.output_dir.join(name.file_name());
    std::fs::write(&path, csv)?;
    Ok(path)
}

/// Mean APE per algorithm across seeds, one row per sweep size.
///
/// The ensemble algorithms give each member the configured step budget; the
/// single-table baselines get `k x` that budget so every column sees the same
/// number of collected samples.
fn ape_vs_size(config: &ExperimentConfig) -> Result<String> {
    if config.sweep.sizes.is_empty() {
        return Err(HarnessError::Config(
            "sweep.sizes: ape_vs_size needs at least one size".into(),
        ));
    }
    let schedule = to_budget(&config.schedule.to_schedule());
    let k = config.algorithm.k;
    let single_schedule = LearningSchedule {
        max_steps: schedule.max_steps.saturating_mul(k as u64),
        ..schedule.clone()
    };
    let mut out = String::from("size,ccq,neql,single_q,double_q\n");
    for &size in &config.sweep.sizes {
        let mdp = config.build_model(Some(size))?;
        let vi = value_iteration(&mdp, ORACLE_TOL, ORACLE_MAX_ITER)?;
        let apes: Vec<[f64; 4]> = config
            .seeds
            .par_iter()
            .map(|&seed| -> Result<[f64; 4]> {
                let run_seed = seeds::derive(seed, 0);
                let params = CcqParams {
                    tracked_pairs: config.tracking.pairs.clone(),
                    record_every: config.tracking.record_every,
                    compute_bounds: false,
                    ..CcqParams::new(k, config.family.k_total, config.algorithm.u, run_seed)
                };
                let ccq_out = ccq(&mdp, &schedule, &params)?;
                let neql_out = run_ensemble(
                    &mdp,
                    &EnsembleConfig::uniform((1..=k).collect(), config.algorithm.u),
                    &schedule,
                    &TraceSpec::none(),
                    run_seed,
                    None,
                )?;
                let single = train_agent(
                    &mdp,
                    &single_schedule,
                    seeds::rng(run_seed, 1),
                    &TraceSpec::none(),
                )?;
                let double = train_double_q(
                    &mdp,
                    &single_schedule,
                    seeds::rng(run_seed, 2),
                    &TraceSpec::none(),
                )?;
                Ok([
                    average_policy_error(&ccq_out.policy, &vi.policy)?,
                    average_policy_error(&neql_out.policy, &vi.policy)?,
                    average_policy_error(&single.q.greedy_policy(), &vi.policy)?,
                    average_policy_error(&double.q.greedy_policy(), &vi.policy)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let n = apes.len() as f64;
        let mean = |i: usize| apes.iter().map(|row| row[i]).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            size,
            mean(0),
            mean(1),
            mean(2),
            mean(3)
        );
    }
    Ok(out)
}

/// Seed-averaged coverage-coefficient series of the first tracked pair, one
/// column per environment order `1..=k_total`.
fn cc_vs_order(config: &ExperimentConfig) -> Result<String> {
    let (s, a) = config.tracking.pairs[0];
    let k_total = config.family.k_total;
    let mdp = config.build_model(None)?;
    let schedule = to_budget(&config.schedule.to_schedule());
    let spec = TraceSpec::states(&[s], config.tracking.record_every);

    let per_order: Vec<(Vec<u64>, Vec<f64>)> = (1..=k_total)
        .into_par_iter()
        .map(|order| -> Result<(Vec<u64>, Vec<f64>)> {
            let sampler = CdfSampler::new(&mdp);
            let env = NhopEnv::new(&mdp, &sampler, order);
            let mut times: Vec<u64> = Vec::new();
            let mut acc: Vec<f64> = Vec::new();
            for &seed in &config.seeds {
                let out = train_agent(&env, &schedule, seeds::rng(seed, order as u64), &spec)?;
                let policy = out.q.greedy_policy();
                let selected = policy.action(s) == a;
                let series: Vec<f64> = (0..out.trace.len())
                    .map(|ti| {
                        let row = out.trace.row_at(ti, s).expect("tracked");
                        if selected {
                            row.iter().sum::<f64>() / row[a]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if acc.is_empty() {
                    times = out.trace.times.clone();
                    acc = vec![0.0; series.len()];
                }
                let len = acc.len().min(series.len());
                acc.truncate(len);
                times.truncate(len);
                for (r, v) in acc.iter_mut().zip(series) {
                    *r += v / config.seeds.len() as f64;
                }
            }
            Ok((times, acc))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut header = String::from("t");
    for order in 1..=k_total {
        let _ = write!(header, ",env{order}");
    }
    header.push('\n');
    let mut out = header;
    let len = per_order.iter().map(|(t, _)| t.len()).min().unwrap_or(0);
    for ti in 0..len {
        let _ = write!(out, "{}", per_order[0].0[ti]);
        for (_, series) in &per_order {
            let _ = write!(out, ",{}", series[ti]);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Seed-averaged `log C` series of the first tracked pair with the matching
/// bound as a constant column. `ensemble = false`: the order-1 environment's
/// policy and the per-environment bound. `ensemble = true`: the fused policy
/// and the ensemble bound at the configured update ratio.
fn logcc_bound(config: &ExperimentConfig, ensemble: bool) -> Result<String> {
    let (s, a) = config.tracking.pairs[0];
    let mdp = config.build_model(None)?;
    let vi = value_iteration(&mdp, ORACLE_TOL, ORACLE_MAX_ITER)?;
    let theta = estimate_theta(&vi.q)?;
    let schedule = to_budget(&config.schedule.to_schedule());
    let spec = TraceSpec::states(&[s], config.tracking.record_every);
    let burn_in = config.tracking.burn_in;

    // per record index: (sum of log C, positive count)
    let mut times: Vec<u64> = Vec::new();
    let mut log_sum: Vec<f64> = Vec::new();
    let mut log_count: Vec<u64> = Vec::new();
    let mut lambda_sum = 0.0;

    for &seed in &config.seeds {
        let (trace_times, series, lambda) = if ensemble {
            let u = config.algorithm.u;
            if !(u > 0.0 && u < 1.0) {
                return Err(HarnessError::Config(format!(
                    "algorithm.u: ensemble bound needs u strictly inside (0, 1), got {u}"
                )));
            }
            let out = run_ensemble(
                &mdp,
                &EnsembleConfig::uniform((1..=config.algorithm.k).collect(), u),
                &schedule,
                &spec,
                seeds::derive(seed, 0),
                None,
            )?;
            let mut lambda_max = 0.0f64;
            for member in &out.state.members {
                lambda_max =
                    lambda_max.max(estimate_lambda(&member.trace, &vi.q, burn_in)?);
            }
            let trace = &out.state.ensemble_trace;
            let selected = out.policy.action(s) == a;
            let series: Vec<f64> = (0..trace.len())
                .map(|ti| {
                    let row = trace.row_at(ti, s).expect("tracked");
                    if selected {
                        row.iter().sum::<f64>() / row[a]
                    } else {
                        0.0
                    }
                })
                .collect();
            (trace.times.clone(), series, lambda_max)
        } else {
            let sampler = CdfSampler::new(&mdp);
            let env = NhopEnv::new(&mdp, &sampler, 1);
            let out = train_agent(&env, &schedule, seeds::rng(seed, 1), &spec)?;
            let lambda = estimate_lambda(&out.trace, &vi.q, burn_in)?;
            let policy = out.q.greedy_policy();
            let selected = policy.action(s) == a;
            let series: Vec<f64> = (0..out.trace.len())
                .map(|ti| {
                    let row = out.trace.row_at(ti, s).expect("tracked");
                    if selected {
                        row.iter().sum::<f64>() / row[a]
                    } else {
                        0.0
                    }
                })
                .collect();
            (out.trace.times.clone(), series, lambda)
        };
        lambda_sum += lambda;
        if times.is_empty() {
            times = trace_times;
            log_sum = vec![0.0; times.len()];
            log_count = vec![0; times.len()];
        }
        for (ti, &c) in series.iter().enumerate().take(times.len()) {
            if c > 0.0 {
                log_sum[ti] += c.ln();
                log_count[ti] += 1;
            }
        }
    }

    let lambda = lambda_sum / config.seeds.len() as f64;
    let q_star_sa = vi.q.get(s, a);
    let bound = if ensemble {
        bound_ensemble(lambda, theta, config.algorithm.u, q_star_sa)?
    } else {
        bound_per_env(lambda, theta, q_star_sa)?
    };

    let mut out = String::from("t,log_cc,bound\n");
    for ti in 0..times.len() {
        let log_cc = if log_count[ti] > 0 {
            (log_sum[ti] / log_count[ti] as f64).to_string()
        } else {
            String::new()
        };
        let _ = writeln!(out, "{},{},{}", times[ti], log_cc, bound.expectation);
    }
    Ok(out)
}
