//! Multi-environment ensemble coordination.
//!
//! K agents train on K environment orders. Every `fusion_period` agent steps
//! the member tables are fused into an entrywise weighted average, and the
//! fused estimate is blended back into every member with the update ratio
//! `u`: `member <- member + u * (ensemble - member)`. An order-n member
//! interprets one step as one n-hop transition.
//!
//! This coordinator is a reconstruction of the cited multi-environment
//! ensemble Q-learning loop from its published description (K Q-learners on
//! structurally related environments, coupled through an update ratio
//! `u` in (0, 1), optionally driven toward 1 over time); the reference
//! implementation is not public. The simplest loop consistent with every
//! property used downstream is blend-after-fusion at a fixed period, which is
//! what is implemented here.
//!
//! Determinism: member agents draw from streams derived as
//! `seeds::derive(seed, order)`, and fusion barriers neither consume
//! randomness nor interrupt episode state, so a single-member ensemble
//! reproduces `train_agent` with the derived seed bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{CdfSampler, Environment, NhopEnv};
use crate::error::{Error, Result};
use crate::mdp::{average_policy_error, Policy, QTable, TabularMdp};
use crate::qlearning::{AgentRunner, CoverageStatus, LearningSchedule, QTrace, TraceSpec};
use crate::seeds;
use crate::synthesis::EnvironmentFamily;

/// Update ratio: fixed, or driven toward 1 over fusion rounds
/// (`u_r = 1 - (1 - start) * rate^r`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UpdateRatio {
    Fixed { value: f64 },
    Approaching { start: f64, rate: f64 },
}

impl UpdateRatio {
    pub fn value(&self, round: u64) -> f64 {
        match *self {
            UpdateRatio::Fixed { value } => value,
            UpdateRatio::Approaching { start, rate } => {
                1.0 - (1.0 - start) * rate.powf(round as f64)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            // The theory wants u in (0, 1); the endpoints are accepted for
            // the degenerate diagnostics (u = 0 decouples the members,
            // u = 1 replaces them by the ensemble).
            UpdateRatio::Fixed { value } => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::invalid("update_ratio", format!("{value} not in [0, 1]")));
                }
            }
            UpdateRatio::Approaching { start, rate } => {
                if !(start > 0.0 && start < 1.0) {
                    return Err(Error::invalid(
                        "update_ratio start",
                        format!("{start} not in (0, 1)"),
                    ));
                }
                if !(rate > 0.0 && rate < 1.0) {
                    return Err(Error::invalid(
                        "update_ratio rate",
                        format!("{rate} not in (0, 1)"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Ensemble composition and coupling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Environment orders to train on (distinct, each >= 1).
    pub members: Vec<usize>,
    pub update_ratio: UpdateRatio,
    /// Agent steps between fusion barriers.
    pub fusion_period: u64,
    /// Fusion weights; `None` means uniform.
    pub weights: Option<Vec<f64>>,
}

impl EnsembleConfig {
    pub fn uniform(members: Vec<usize>, u: f64) -> Self {
        EnsembleConfig {
            members,
            update_ratio: UpdateRatio::Fixed { value: u },
            fusion_period: 64,
            weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::EmptyInput {
                what: "ensemble members",
            });
        }
        let mut seen = self.members.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.members.len() {
            return Err(Error::invalid("members", "environment orders must be distinct"));
        }
        if self.members.iter().any(|&n| n == 0) {
            return Err(Error::invalid("members", "environment orders start at 1"));
        }
        self.update_ratio.validate()?;
        if self.fusion_period == 0 {
            return Err(Error::invalid("fusion_period", "must be >= 1"));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.members.len() {
                return Err(Error::DimensionMismatch {
                    detail: format!("{} weights for {} members", w.len(), self.members.len()),
                });
            }
            if w.iter().any(|&x| x < 0.0) {
                return Err(Error::invalid("weights", "must be nonnegative"));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("weights", format!("sum {sum} != 1")));
            }
        }
        Ok(())
    }

    fn resolved_weights(&self) -> Vec<f64> {
        match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.members.len() as f64; self.members.len()],
        }
    }
}

/// Entrywise weighted average of member tables.
pub fn fuse(tables: &[&QTable], weights: &[f64]) -> Result<QTable> {
    if tables.is_empty() {
        return Err(Error::EmptyInput { what: "fuse tables" });
    }
    if tables.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            detail: format!("{} tables, {} weights", tables.len(), weights.len()),
        });
    }
    let (n, na) = (tables[0].n_states(), tables[0].n_actions());
    for t in tables {
        if t.n_states() != n || t.n_actions() != na {
            return Err(Error::DimensionMismatch {
                detail: "member tables must share shape".to_string(),
            });
        }
    }
    let mut values = vec![0.0; n * na];
    for (t, &w) in tables.iter().zip(weights) {
        if w != 0.0 {
            for (acc, &v) in values.iter_mut().zip(t.values()) {
                *acc += w * v;
            }
        }
    }
    QTable::from_values(n, na, values)
}

/// Blend the ensemble estimate into a member table:
/// `member + u * (ensemble - member)`. `u = 0` returns the member unchanged
/// and `u = 1` returns the ensemble exactly.
pub fn feedback(member: &QTable, ensemble: &QTable, u: f64) -> Result<QTable> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid("update_ratio", format!("{u} not in [0, 1]")));
    }
    if member.n_states() != ensemble.n_states() || member.n_actions() != ensemble.n_actions() {
        return Err(Error::DimensionMismatch {
            detail: "member and ensemble tables must share shape".to_string(),
        });
    }
    if u == 0.0 {
        return Ok(member.clone());
    }
    if u == 1.0 {
        return Ok(ensemble.clone());
    }
    let values = member
        .values()
        .iter()
        .zip(ensemble.values())
        .map(|(&m, &e)| m + u * (e - m))
        .collect();
    QTable::from_values(member.n_states(), member.n_actions(), values)
}

/// Final state of one ensemble member.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberState {
    pub order: usize,
    pub q: QTable,
    pub trace: QTrace,
    pub coverage: CoverageStatus,
    pub steps: u64,
}

/// Full ensemble state (checkpointable).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleState {
    pub members: Vec<MemberState>,
    pub ensemble_q: QTable,
    /// Tracked rows of the fused table, one record per fusion round.
    pub ensemble_trace: QTrace,
    pub rounds: u64,
}

impl EnsembleState {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::InvalidParameter {
            name: "checkpoint",
            detail: e.to_string(),
        })?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidParameter {
            name: "checkpoint",
            detail: e.to_string(),
        })
    }
}

/// One row of the per-round log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLogEntry {
    pub round: u64,
    pub member_order: usize,
    /// Sup-norm change of the member table over the round (steps + feedback).
    pub max_delta_q: f64,
    /// APE of the fused policy against the oracle, when one was supplied.
    pub ensemble_ape: Option<f64>,
}

/// Render the round log as CSV (`round,member,max_delta_q,ape`).
pub fn round_log_csv(log: &[RoundLogEntry]) -> String {
    let mut out = String::from("round,member,max_delta_q,ape\n");
    for e in log {
        let ape = e
            .ensemble_ape
            .map(|a| a.to_string())
            .unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", e.round, e.member_order, e.max_delta_q, ape);
    }
    out
}

/// Result of an ensemble run.
#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub q_hat: QTable,
    pub policy: Policy,
    pub state: EnsembleState,
    pub round_log: Vec<RoundLogEntry>,
}

fn run_ensemble_envs<E: Environment>(
    envs: &[(usize, E)],
    config: &EnsembleConfig,
    schedule: &LearningSchedule,
    trace_spec: &TraceSpec,
    seed: u64,
    oracle: Option<&Policy>,
) -> Result<EnsembleOutput> {
    config.validate()?;
    let weights = config.resolved_weights();
    let mut runners = Vec::with_capacity(envs.len());
    for (order, env) in envs {
        runners.push((
            *order,
            AgentRunner::new(env, schedule, seeds::rng(seed, *order as u64), trace_spec)?,
        ));
    }
    let n = envs[0].1.n_states();
    let na = envs[0].1.n_actions();
    let mut ensemble_trace = QTrace::new(trace_spec, na);
    let mut agg_visits = vec![0u64; n * na];
    let mut round_log = Vec::new();
    let mut rounds = 0u64;
    let mut q_hat = {
        let tables: Vec<&QTable> = runners.iter().map(|(_, r)| r.q()).collect();
        fuse(&tables, &weights)?
    };

    while runners.iter().any(|(_, r)| !r.is_done()) {
        let before: Vec<QTable> = runners.iter().map(|(_, r)| r.q().clone()).collect();
        for (_, runner) in runners.iter_mut() {
            runner.run_steps(config.fusion_period);
        }
        let u = config.update_ratio.value(rounds);
        {
            let tables: Vec<&QTable> = runners.iter().map(|(_, r)| r.q()).collect();
            q_hat = fuse(&tables, &weights)?;
        }
        let ape = match oracle {
            Some(pi_star) => Some(average_policy_error(&q_hat.greedy_policy(), pi_star)?),
            None => None,
        };
        for ((order, runner), pre) in runners.iter_mut().zip(&before) {
            let blended = feedback(runner.q(), &q_hat, u)?;
            let max_delta_q = blended.max_abs_diff(pre);
            runner.set_q(blended);
            round_log.push(RoundLogEntry {
                round: rounds,
                member_order: *order,
                max_delta_q,
                ensemble_ape: ape,
            });
        }
        rounds += 1;
        if !trace_spec.tracked_states.is_empty() {
            for &s in &trace_spec.tracked_states {
                for a in 0..na {
                    agg_visits[s * na + a] = runners
                        .iter()
                        .map(|(_, r)| r.visits()[s * na + a])
                        .sum();
                }
            }
            ensemble_trace.record(rounds, &q_hat, &agg_visits);
        }
    }

    let policy = q_hat.greedy_policy();
    let members: Vec<MemberState> = runners
        .into_iter()
        .map(|(order, runner)| {
            let steps = runner.steps();
            let out = runner.into_output();
            MemberState {
                order,
                q: out.q,
                trace: out.trace,
                coverage: out.coverage,
                steps,
            }
        })
        .collect();
    ensemble_trace.final_visits = agg_visits;
    Ok(EnsembleOutput {
        q_hat: q_hat.clone(),
        policy,
        state: EnsembleState {
            members,
            ensemble_q: q_hat,
            ensemble_trace,
            rounds,
        },
        round_log,
    })
}

/// Run the ensemble on sampling views of the n-hop members of `base`.
pub fn run_ensemble(
    base: &TabularMdp,
    config: &EnsembleConfig,
    schedule: &LearningSchedule,
    trace_spec: &TraceSpec,
    seed: u64,
    oracle: Option<&Policy>,
) -> Result<EnsembleOutput> {
    config.validate()?;
    let sampler = CdfSampler::new(base);
    let envs: Vec<(usize, NhopEnv)> = config
        .members
        .iter()
        .map(|&order| (order, NhopEnv::new(base, &sampler, order)))
        .collect();
    run_ensemble_envs(&envs, config, schedule, trace_spec, seed, oracle)
}

/// Run the ensemble on materialized family members.
pub fn run_ensemble_family(
    family: &EnvironmentFamily,
    config: &EnsembleConfig,
    schedule: &LearningSchedule,
    trace_spec: &TraceSpec,
    seed: u64,
    oracle: Option<&Policy>,
) -> Result<EnsembleOutput> {
    config.validate()?;
    let mut envs = Vec::with_capacity(config.members.len());
    for &order in &config.members {
        let member = family
            .member(order)
            .ok_or(Error::MissingMember { order })?;
        envs.push((order, member.clone()));
    }
    run_ensemble_envs(&envs, config, schedule, trace_spec, seed, oracle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{self, random_mdp, swap_mdp};
    use crate::qlearning::train_agent;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fuse_examples() {
        let t2 = QTable::constant(2, 2, 2.0);
        let t4 = QTable::constant(2, 2, 4.0);
        // single member: identity
        let out = fuse(&[&t2], &[1.0]).unwrap();
        assert_eq!(out, t2);
        // equal weights average
        let out = fuse(&[&t2, &t4], &[0.5, 0.5]).unwrap();
        assert!(out.values().iter().all(|&v| v == 3.0));
        // degenerate weights pick one table
        let out = fuse(&[&t2, &t4], &[1.0, 0.0]).unwrap();
        assert_eq!(out, t2);
        // shape mismatch
        let odd = QTable::constant(3, 2, 1.0);
        assert!(fuse(&[&t2, &odd], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn fuse_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tables: Vec<QTable> = (0..3)
            .map(|_| {
                QTable::from_values(
                    2,
                    2,
                    (0..4).map(|_| rng.gen_range(0.5..5.0)).collect::<Vec<_>>(),
                )
                .unwrap()
            })
            .collect();
        let weights = [0.2, 0.5, 0.3];
        let refs: Vec<&QTable> = tables.iter().collect();
        let a = fuse(&refs, &weights).unwrap();
        let perm_refs = vec![&tables[2], &tables[0], &tables[1]];
        let perm_weights = [0.3, 0.2, 0.5];
        let b = fuse(&perm_refs, &perm_weights).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn feedback_examples() {
        let m = QTable::constant(1, 2, 2.0);
        let e = QTable::constant(1, 2, 4.0);
        assert_eq!(feedback(&m, &e, 0.0).unwrap(), m);
        assert_eq!(feedback(&m, &e, 1.0).unwrap(), e);
        let half = feedback(&m, &e, 0.5).unwrap();
        assert!(half.values().iter().all(|&v| v == 3.0));
        assert!(feedback(&m, &e, 1.5).is_err());
        // blending a table with itself is a bitwise no-op for any u
        let blended = feedback(&m, &m, 0.3).unwrap();
        assert_eq!(blended, m);
    }

    #[test]
    fn single_member_ensemble_reproduces_train_agent() {
        let base = swap_mdp();
        let schedule = LearningSchedule {
            max_steps: 8_000,
            min_visits: 10_000, // force the full budget
            ..LearningSchedule::default()
        };
        let config = EnsembleConfig {
            fusion_period: 64,
            ..EnsembleConfig::uniform(vec![1], 0.7)
        };
        let seed = 42;
        let out = run_ensemble(&base, &config, &schedule, &TraceSpec::none(), seed, None).unwrap();

        let sampler = CdfSampler::new(&base);
        let env1 = NhopEnv::new(&base, &sampler, 1);
        let solo = train_agent(
            &env1,
            &schedule,
            seeds::rng(seed, 1),
            &TraceSpec::none(),
        )
        .unwrap();
        assert_eq!(out.q_hat, solo.q, "K=1 ensemble must be bit-identical");
        assert_eq!(out.state.members[0].q, solo.q);
    }

    #[test]
    fn zero_update_ratio_decouples_members() {
        let base = swap_mdp();
        let schedule = LearningSchedule {
            max_steps: 4_000,
            min_visits: 10_000,
            ..LearningSchedule::default()
        };
        let config = EnsembleConfig::uniform(vec![1, 2, 3], 0.0);
        let seed = 9;
        let out = run_ensemble(&base, &config, &schedule, &TraceSpec::none(), seed, None).unwrap();
        let sampler = CdfSampler::new(&base);
        for member in &out.state.members {
            let env = NhopEnv::new(&base, &sampler, member.order);
            let solo = train_agent(
                &env,
                &schedule,
                seeds::rng(seed, member.order as u64),
                &TraceSpec::none(),
            )
            .unwrap();
            assert_eq!(member.q, solo.q, "order {} diverged", member.order);
        }
    }

    #[test]
    fn ensemble_reaches_oracle_policy_on_swap_chain() {
        let base = swap_mdp();
        let oracle = mdp::value_iteration(&base, 1e-10, 10_000).unwrap();
        let schedule = LearningSchedule {
            max_steps: 30_000,
            min_visits: 50,
            ..LearningSchedule::default()
        };
        let config = EnsembleConfig::uniform(vec![1, 2, 3, 4, 5], 0.5);
        let out = run_ensemble(
            &base,
            &config,
            &schedule,
            &TraceSpec::none(),
            7,
            Some(&oracle.policy),
        )
        .unwrap();
        let ape = average_policy_error(&out.policy, &oracle.policy).unwrap();
        assert_eq!(ape, 0.0);
        // round log carries the oracle APE and covers every member
        assert!(out.round_log.iter().all(|e| e.ensemble_ape.is_some()));
        let csv = round_log_csv(&out.round_log);
        assert!(csv.starts_with("round,member,max_delta_q,ape\n"));
    }

    #[test]
    fn tables_stay_positive_throughout() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let base = random_mdp(5, 2, 0.9, (0.5, 2.0), &mut rng);
        let config = EnsembleConfig::uniform(vec![1, 2, 4], 0.5);
        let schedule = LearningSchedule {
            max_steps: 10_000,
            min_visits: 5,
            ..LearningSchedule::default()
        };
        let out = run_ensemble(&base, &config, &schedule, &TraceSpec::none(), 3, None).unwrap();
        assert!(out.q_hat.values().iter().all(|&v| v > 0.0));
        for m in &out.state.members {
            assert!(m.q.values().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn family_runner_requires_members() {
        let base = swap_mdp();
        let family = EnvironmentFamily::build(base, 3).unwrap();
        let config = EnsembleConfig::uniform(vec![1, 5], 0.5);
        let err = run_ensemble_family(
            &family,
            &config,
            &LearningSchedule::default(),
            &TraceSpec::none(),
            1,
            None,
        )
        .unwrap_err();
        match err {
            Error::MissingMember { order } => assert_eq!(order, 5),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(EnsembleConfig::uniform(vec![], 0.5).validate().is_err());
        assert!(EnsembleConfig::uniform(vec![1, 1], 0.5).validate().is_err());
        assert!(EnsembleConfig::uniform(vec![0], 0.5).validate().is_err());
        assert!(EnsembleConfig::uniform(vec![1], 1.5).validate().is_err());
        let mut bad_weights = EnsembleConfig::uniform(vec![1, 2], 0.5);
        bad_weights.weights = Some(vec![0.9, 0.3]);
        assert!(bad_weights.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let base = swap_mdp();
        let config = EnsembleConfig::uniform(vec![1, 2], 0.5);
        let schedule = LearningSchedule {
            max_steps: 500,
            min_visits: 1,
            ..LearningSchedule::default()
        };
        let spec = TraceSpec::states(&[0], 16);
        let out = run_ensemble(&base, &config, &schedule, &spec, 11, None).unwrap();
        let dir = std::env::temp_dir().join("ccq-ensemble-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.json");
        out.state.save(&path).unwrap();
        let back = EnsembleState::load(&path).unwrap();
        assert_eq!(back.rounds, out.state.rounds);
        assert_eq!(back.ensemble_q, out.state.ensemble_q);
        assert_eq!(back.members.len(), out.state.members.len());
        std::fs::remove_dir_all(&dir).ok();
    }
}
