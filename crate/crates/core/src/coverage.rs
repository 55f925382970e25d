//! Coverage coefficients, error-scale estimators, and the closed-form upper
//! bounds on log-coverage.
//!
//! The exploration distribution at a state is the linear action-selection
//! rule `v(s, a) = Q(s, a) / sum_k Q(s, a_k)`, defined only for strictly
//! positive tables. The coverage coefficient of a pair under a policy is
//!
//! `C(s, a) = 0` when `pi(s) != a`, else `1 / v(s, a) >= 1`,
//!
//! so `C` always lies in `{0} union [1, inf)`. For two actions this is
//! `1 + Q(s, other) / Q(s, a)`.
//!
//! The error model treats `Q_t(s, a) - Q*(s, a)` for environment order n as a
//! zero-mean draw with variance `lambda_n^2 / 3` (the scale a uniform(-b, b)
//! error gives with `b = lambda_n`). [`estimate_lambda`] therefore maps the
//! pooled second moment of the post-burn-in trace errors through
//! `lambda = sqrt(3 * moment)`. [`estimate_theta`] bounds the ratio of
//! optimal Q values across actions at the same state.
//!
//! [`bound_per_env`] is the per-environment bound pair on the expectation and
//! variance of `log C`; [`bound_ensemble`] is the ensemble version, whose
//! lambda-dependent terms shrink by `(1 - u) / (1 + u)` with the update
//! ratio `u` and use `lambda = max_n lambda_n` over the members.

use std::f64::consts::SQRT_2;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Policy, QTable};
use crate::qlearning::QTrace;

/// Smallest admissible `theta` for bound evaluation; estimates of exactly 1
/// (perfectly symmetric tables) are clamped up to keep the bounds defined.
pub const THETA_FLOOR: f64 = 1.0 + 1e-6;

/// Linear action-selection weights `v(s, .) = Q(s, .) / sum Q(s, .)`.
pub fn exploration_dist(q: &QTable, s: usize) -> Result<Vec<f64>> {
    if s >= q.n_states() {
        return Err(Error::IndexOutOfRange {
            what: "state",
            index: s,
            limit: q.n_states(),
        });
    }
    let row = q.row(s);
    for (a, &v) in row.iter().enumerate() {
        if !(v > 0.0) {
            return Err(Error::NonPositiveQ {
                state: s,
                action: a,
                value: v,
            });
        }
    }
    let sum: f64 = row.iter().sum();
    Ok(row.iter().map(|&v| v / sum).collect())
}

/// Coverage coefficient of `(s, a)` under `pi`: 0 when the policy avoids the
/// pair, otherwise `sum_k Q(s, a_k) / Q(s, a) >= 1`.
pub fn coverage_coefficient(q: &QTable, pi: &Policy, s: usize, a: usize) -> Result<f64> {
    if a >= q.n_actions() {
        return Err(Error::IndexOutOfRange {
            what: "action",
            index: a,
            limit: q.n_actions(),
        });
    }
    if s >= q.n_states() {
        return Err(Error::IndexOutOfRange {
            what: "state",
            index: s,
            limit: q.n_states(),
        });
    }
    if pi.action(s) != a {
        return Ok(0.0);
    }
    let row = q.row(s);
    for (k, &v) in row.iter().enumerate() {
        if !(v > 0.0) {
            return Err(Error::NonPositiveQ {
                state: s,
                action: k,
                value: v,
            });
        }
    }
    let sum: f64 = row.iter().sum();
    Ok(sum / q.get(s, a))
}

/// `C* = max` of the coverage coefficient over the tracked pairs.
pub fn cc_star(q: &QTable, pi: &Policy, tracked: &[(usize, usize)]) -> Result<f64> {
    if tracked.is_empty() {
        return Err(Error::EmptyInput {
            what: "tracked pairs",
        });
    }
    let mut best = 0.0f64;
    for &(s, a) in tracked {
        best = best.max(coverage_coefficient(q, pi, s, a)?);
    }
    Ok(best)
}

/// Estimate the error scale `lambda` from a trace against the base-optimal
/// table: `lambda = sqrt(3 * mean((Q_t - Q*)^2))` pooled over every tracked
/// entry and post-burn-in record. `burn_in` is the fraction of records
/// discarded from the front.
pub fn estimate_lambda(trace: &QTrace, q_star: &QTable, burn_in: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&burn_in) {
        return Err(Error::invalid("burn_in", format!("{burn_in} not in [0, 1)")));
    }
    if trace.is_empty() || trace.tracked_states.is_empty() {
        return Err(Error::EmptyInput { what: "trace" });
    }
    let start = (trace.len() as f64 * burn_in).floor() as usize;
    let start = start.min(trace.len() - 1);
    let mut sum_sq = 0.0;
    let mut count = 0u64;
    for ti in start..trace.len() {
        for &s in &trace.tracked_states {
            let row = trace.row_at(ti, s).expect("tracked state present");
            for (a, &v) in row.iter().enumerate() {
                let err = v - q_star.get(s, a);
                sum_sq += err * err;
                count += 1;
            }
        }
    }
    Ok((3.0 * sum_sq / count as f64).sqrt())
}

/// Estimate `theta`: the largest ratio of optimal Q values across two actions
/// at the same state, `max_s max_{k1,k2} Q*(s, a_k1) / Q*(s, a_k2) >= 1`.
pub fn estimate_theta(q_star: &QTable) -> Result<f64> {
    let mut theta = 1.0f64;
    for s in 0..q_star.n_states() {
        let row = q_star.row(s);
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for (a, &v) in row.iter().enumerate() {
            if !(v > 0.0) {
                return Err(Error::NonPositiveQ {
                    state: s,
                    action: a,
                    value: v,
                });
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        theta = theta.max(hi / lo);
    }
    Ok(theta)
}

/// Expectation/variance bound pair on `log C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValues {
    pub expectation: f64,
    pub variance: f64,
}

/// Which bound family produced a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// Per-environment bound (lambda of that environment).
    PerEnvironment,
    /// Ensemble bound (worst member lambda, shrunk by `(1-u)/(1+u)`).
    Ensemble,
}

fn check_bound_inputs(lambda: f64, theta: f64, q_star_sa: f64) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda", format!("{lambda} must be >= 0")));
    }
    if !(q_star_sa > 0.0) {
        return Err(Error::invalid(
            "q_star_sa",
            format!("{q_star_sa} must be positive"),
        ));
    }
    if !theta.is_finite() || theta < 1.0 {
        return Err(Error::invalid("theta", format!("{theta} must be >= 1")));
    }
    // The ratio bound is strict (theta > 1); degenerate symmetric estimates
    // are clamped just above it.
    Ok(theta.max(THETA_FLOOR))
}

/// Per-environment upper bounds on the expectation and variance of
/// `log C(s, a)` given the environment's error scale `lambda_n`:
///
/// `E <= log(1 + theta) + lambda^2 / (3 q*^2) * (1/2 - 1/(1+theta)^2)`
/// `V <= lambda^2 / (3 q*^2) * (1 + 2 theta^2/(1+theta)^2 + 2 sqrt(2) theta/(1+theta))`
pub fn bound_per_env(lambda_n: f64, theta: f64, q_star_sa: f64) -> Result<BoundValues> {
    let theta = check_bound_inputs(lambda_n, theta, q_star_sa)?;
    let scale = lambda_n * lambda_n / (3.0 * q_star_sa * q_star_sa);
    let one_plus = 1.0 + theta;
    let expectation = one_plus.ln() + scale * (0.5 - 1.0 / (one_plus * one_plus));
    let variance = scale
        * (1.0 + 2.0 * theta * theta / (one_plus * one_plus) + 2.0 * SQRT_2 * theta / one_plus);
    Ok(BoundValues {
        expectation,
        variance,
    })
}

/// Ensemble upper bounds: the per-environment form evaluated at
/// `lambda = max_n lambda_n`, with every lambda-dependent term multiplied by
/// `(1 - u) / (1 + u)`.
pub fn bound_ensemble(lambda_max: f64, theta: f64, u: f64, q_star_sa: f64) -> Result<BoundValues> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::invalid("u", format!("{u} not in (0, 1)")));
    }
    let theta = check_bound_inputs(lambda_max, theta, q_star_sa)?;
    let shrink = (1.0 - u) / (1.0 + u);
    let scale = lambda_max * lambda_max / (3.0 * q_star_sa * q_star_sa) * shrink;
    let one_plus = 1.0 + theta;
    let expectation = one_plus.ln() + scale * (0.5 - 1.0 / (one_plus * one_plus));
    let variance = scale
        * (1.0 + 2.0 * theta * theta / (one_plus * one_plus) + 2.0 * SQRT_2 * theta / one_plus);
    Ok(BoundValues {
        expectation,
        variance,
    })
}

/// Coverage statistics of one tracked pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairCoverage {
    pub state: usize,
    pub action: usize,
    /// Record times (trace steps or fusion rounds).
    pub times: Vec<u64>,
    /// Coverage coefficient time series (0 whenever `pi(s) != a`).
    pub cc: Vec<f64>,
    /// Post-burn-in mean of `log C` over records with `C > 0` (NaN if none).
    pub mean_log_cc: f64,
    /// Post-burn-in variance of `log C` (NaN if fewer than 2 records).
    pub var_log_cc: f64,
    /// Bound pair for this entry, when an oracle was available.
    pub bounds: Option<BoundValues>,
}

/// Coverage report over tracked pairs of one policy/trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Environment order (0 denotes the fused ensemble).
    pub env_order: usize,
    pub proposition: Option<BoundKind>,
    pub pairs: Vec<PairCoverage>,
    /// Max coverage coefficient over every tracked pair and record.
    pub cc_star: f64,
    /// Error scale used for the bounds (when computed).
    pub lambda: Option<f64>,
    pub theta: Option<f64>,
}

/// Oracle context for bound evaluation inside [`coverage_report`].
#[derive(Debug, Clone, Copy)]
pub struct BoundSpec<'a> {
    pub q_star: &'a QTable,
    pub lambda: f64,
    pub theta: f64,
    pub kind: BoundKind,
    /// Update ratio, required for the ensemble bound.
    pub u: Option<f64>,
}

/// Build the coverage report of a trace under a policy.
///
/// The coefficient series uses the instantaneous recorded rows; mean/variance
/// of `log C` are over the post-burn-in records where the policy selects the
/// pair. When `bounds` is given, each pair also carries its bound values at
/// `q* = Q*(s, a)`.
pub fn coverage_report(
    trace: &QTrace,
    policy: &Policy,
    pairs: &[(usize, usize)],
    env_order: usize,
    burn_in: f64,
    bounds: Option<BoundSpec>,
) -> Result<CoverageReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput {
            what: "tracked pairs",
        });
    }
    if !(0.0..1.0).contains(&burn_in) {
        return Err(Error::invalid("burn_in", format!("{burn_in} not in [0, 1)")));
    }
    let mut out_pairs = Vec::with_capacity(pairs.len());
    let mut cc_star = 0.0f64;
    for &(s, a) in pairs {
        if trace.tracked_index(s).is_none() {
            return Err(Error::invalid(
                "tracked pair",
                format!("state {s} is not tracked by the trace"),
            ));
        }
        if a >= trace.n_actions {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                limit: trace.n_actions,
            });
        }
        let selected = policy.action(s) == a;
        let mut cc = Vec::with_capacity(trace.len());
        for ti in 0..trace.len() {
            let row = trace.row_at(ti, s).expect("tracked");
            let value = if selected {
                let mut sum = 0.0;
                for (k, &v) in row.iter().enumerate() {
                    if !(v > 0.0) {
                        return Err(Error::NonPositiveQ {
                            state: s,
                            action: k,
                            value: v,
                        });
                    }
                    sum += v;
                }
                sum / row[a]
            } else {
                0.0
            };
            cc.push(value);
        }
        for &c in &cc {
            cc_star = cc_star.max(c);
        }
        let start = ((trace.len() as f64) * burn_in).floor() as usize;
        let start = start.min(trace.len().saturating_sub(1));
        let logs: Vec<f64> = cc[start..]
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| c.ln())
            .collect();
        let (mean, var) = mean_variance(&logs);
        let pair_bounds = match &bounds {
            Some(spec) => {
                let q_star_sa = spec.q_star.get(s, a);
                Some(match spec.kind {
                    BoundKind::PerEnvironment => bound_per_env(spec.lambda, spec.theta, q_star_sa)?,
                    BoundKind::Ensemble => {
                        let u = spec.u.ok_or_else(|| {
                            Error::invalid("u", "ensemble bound requires the update ratio")
                        })?;
                        bound_ensemble(spec.lambda, spec.theta, u, q_star_sa)?
                    }
                })
            }
            None => None,
        };
        out_pairs.push(PairCoverage {
            state: s,
            action: a,
            times: trace.times.clone(),
            cc,
            mean_log_cc: mean,
            var_log_cc: var,
            bounds: pair_bounds,
        });
    }
    Ok(CoverageReport {
        env_order,
        proposition: bounds.as_ref().map(|b| b.kind),
        pairs: out_pairs,
        cc_star,
        lambda: bounds.as_ref().map(|b| b.lambda),
        theta: bounds.as_ref().map(|b| b.theta),
    })
}

fn mean_variance(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var)
}

impl CoverageReport {
    /// CSV export:
    /// `env_order,s,a,t,cc,log_cc,mean_log_cc,var_log_cc,e_bound,v_bound,proposition`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "env_order,s,a,t,cc,log_cc,mean_log_cc,var_log_cc,e_bound,v_bound,proposition\n",
        );
        let prop = match self.proposition {
            Some(BoundKind::PerEnvironment) => "per-environment",
            Some(BoundKind::Ensemble) => "ensemble",
            None => "",
        };
        for p in &self.pairs {
            let (eb, vb) = match p.bounds {
                Some(b) => (b.expectation.to_string(), b.variance.to_string()),
                None => (String::new(), String::new()),
            };
            for (ti, &t) in p.times.iter().enumerate() {
                let c = p.cc[ti];
                let log_c = if c > 0.0 {
                    c.ln().to_string()
                } else {
                    String::from("-inf")
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    self.env_order,
                    p.state,
                    p.action,
                    t,
                    c,
                    log_c,
                    p.mean_log_cc,
                    p.var_log_cc,
                    eb,
                    vb,
                    prop
                );
            }
        }
        out
    }
}

/// Per-K (or per-u) sample of empirical `Var[log C]` across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendPoint {
    /// The swept parameter value scaled for display (K, or u in percent).
    pub key: usize,
    pub per_seed_variance: Vec<f64>,
}

/// Outcome of the monotone-trend check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub non_increasing: bool,
    /// (key, mean, standard error) per point, in key order.
    pub points: Vec<(usize, f64, f64)>,
}

/// Check that seed-averaged `Var[log C]` is non-increasing in the swept
/// parameter, within one standard error of each adjacent difference.
/// Requires at least 3 points and 20 seeds per point.
pub fn variance_vs_k_trend(samples: &[TrendPoint]) -> Result<TrendVerdict> {
    if samples.len() < 3 {
        return Err(Error::invalid(
            "trend samples",
            format!("need >= 3 parameter values, got {}", samples.len()),
        ));
    }
    for p in samples {
        if p.per_seed_variance.len() < 20 {
            return Err(Error::invalid(
                "trend samples",
                format!(
                    "need >= 20 seeds per point, got {} at key {}",
                    p.per_seed_variance.len(),
                    p.key
                ),
            ));
        }
    }
    let mut points: Vec<(usize, f64, f64)> = samples
        .iter()
        .map(|p| {
            let n = p.per_seed_variance.len() as f64;
            let mean = p.per_seed_variance.iter().sum::<f64>() / n;
            let var = p
                .per_seed_variance
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>()
                / n;
            (p.key, mean, (var / n).sqrt())
        })
        .collect();
    points.sort_by_key(|&(k, _, _)| k);
    let mut ok = true;
    for w in points.windows(2) {
        let (_, m0, se0) = w[0];
        let (_, m1, se1) = w[1];
        let se_diff = (se0 * se0 + se1 * se1).sqrt();
        if m1 > m0 + se_diff {
            ok = false;
        }
    }
    Ok(TrendVerdict {
        non_increasing: ok,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qlearning::{train_agent, LearningSchedule, TraceSpec};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exploration_dist_examples() {
        let q = QTable::from_values(1, 2, vec![2.0, 2.0]).unwrap();
        assert_eq!(exploration_dist(&q, 0).unwrap(), vec![0.5, 0.5]);
        let q = QTable::from_values(1, 2, vec![1.0, 3.0]).unwrap();
        assert_eq!(exploration_dist(&q, 0).unwrap(), vec![0.25, 0.75]);
        let q = QTable::from_values(1, 3, vec![0.4, 1.1, 2.2]).unwrap();
        let v = exploration_dist(&q, 0).unwrap();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exploration_dist_rejects_nonpositive() {
        let q = QTable::from_values(1, 2, vec![1.0, 0.0]).unwrap();
        match exploration_dist(&q, 0) {
            Err(Error::NonPositiveQ { state, action, .. }) => {
                assert_eq!((state, action), (0, 1));
            }
            other => panic!("expected NonPositiveQ, got {other:?}"),
        }
    }

    #[test]
    fn coverage_examples() {
        let q = QTable::from_values(1, 2, vec![1.0, 3.0]).unwrap();
        let pi0 = Policy::new(vec![0], 2).unwrap();
        let pi1 = Policy::new(vec![1], 2).unwrap();
        // policy avoids the pair -> 0
        assert_eq!(coverage_coefficient(&q, &pi1, 0, 0).unwrap(), 0.0);
        // Q = (1, 3), pi(s) = 0 -> C = 4
        assert_eq!(coverage_coefficient(&q, &pi0, 0, 0).unwrap(), 4.0);
        // symmetric table -> C = |A| and C >= 1
        let q = QTable::from_values(1, 2, vec![2.5, 2.5]).unwrap();
        assert_eq!(coverage_coefficient(&q, &pi0, 0, 0).unwrap(), 2.0);
    }

    #[test]
    fn two_action_coverage_is_one_plus_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let qa = rng.gen_range(0.1..5.0);
            let qb = rng.gen_range(0.1..5.0);
            let q = QTable::from_values(1, 2, vec![qa, qb]).unwrap();
            let pi = Policy::new(vec![0], 2).unwrap();
            let c = coverage_coefficient(&q, &pi, 0, 0).unwrap();
            assert!((c - (1.0 + qb / qa)).abs() < 1e-12);
            assert!(c >= 1.0);
        }
    }

    #[test]
    fn cc_star_examples() {
        let q = QTable::from_values(2, 2, vec![1.0, 3.0, 2.0, 2.0]).unwrap();
        let pi = Policy::new(vec![0, 0], 2).unwrap();
        // single pair
        assert_eq!(cc_star(&q, &pi, &[(0, 0)]).unwrap(), 4.0);
        // uniform table -> |A|
        let qu = QTable::constant(3, 2, 1.0);
        let piu = Policy::new(vec![0, 0, 0], 2).unwrap();
        assert_eq!(cc_star(&qu, &piu, &[(0, 0), (1, 0)]).unwrap(), 2.0);
        // adding pairs never decreases the max
        let small = cc_star(&q, &pi, &[(1, 0)]).unwrap();
        let big = cc_star(&q, &pi, &[(1, 0), (0, 0)]).unwrap();
        assert!(big >= small);
        assert!(cc_star(&q, &pi, &[]).is_err());
    }

    fn synthetic_trace(errors: &[f64], q_star_value: f64) -> (QTrace, QTable) {
        // one tracked state, one action, q* constant
        let q_star = QTable::constant(1, 1, q_star_value);
        let spec = TraceSpec::states(&[0], 1);
        let mut trace = QTrace::new(&spec, 1);
        let mut q = QTable::constant(1, 1, 0.0);
        for (i, &e) in errors.iter().enumerate() {
            q.set(0, 0, q_star_value + e);
            trace.record(i as u64 + 1, &q, &[i as u64]);
        }
        (trace, q_star)
    }

    #[test]
    fn lambda_zero_for_exact_trace() {
        let (trace, q_star) = synthetic_trace(&vec![0.0; 100], 2.0);
        assert_eq!(estimate_lambda(&trace, &q_star, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn lambda_recovers_uniform_scale() {
        // uniform(-b, b) has variance b^2 / 3, so lambda -> b
        let b = 1.7;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let errors: Vec<f64> = (0..1_000_000).map(|_| rng.gen_range(-b..b)).collect();
        let (trace, q_star) = synthetic_trace(&errors, 3.0);
        let lambda = estimate_lambda(&trace, &q_star, 0.0).unwrap();
        assert!(
            (lambda - b).abs() / b < 0.02,
            "lambda {lambda} not within 2% of {b}"
        );
    }

    #[test]
    fn lambda_recovers_sqrt3_sigma() {
        // centered errors with std sigma -> lambda -> sqrt(3) * sigma
        let sigma = 0.6;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // sum of 12 uniforms minus 6: approximately normal, std 1
        let errors: Vec<f64> = (0..400_000)
            .map(|_| {
                let z: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
                sigma * z
            })
            .collect();
        let (trace, q_star) = synthetic_trace(&errors, 3.0);
        let lambda = estimate_lambda(&trace, &q_star, 0.0).unwrap();
        let expect = 3.0f64.sqrt() * sigma;
        assert!(
            (lambda - expect).abs() / expect < 0.02,
            "lambda {lambda} vs {expect}"
        );
    }

    #[test]
    fn lambda_is_shift_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let errors: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (trace, q_star) = synthetic_trace(&errors, 2.0);
        let l1 = estimate_lambda(&trace, &q_star, 0.25).unwrap();
        // shift trace and oracle by the same constant
        let (trace2, q_star2) = synthetic_trace(&errors, 12.0);
        let l2 = estimate_lambda(&trace2, &q_star2, 0.25).unwrap();
        assert!((l1 - l2).abs() < 1e-9);
    }

    #[test]
    fn theta_examples() {
        let q = QTable::constant(3, 2, 2.0);
        assert_eq!(estimate_theta(&q).unwrap(), 1.0);
        let q = QTable::from_values(1, 2, vec![2.0, 3.0]).unwrap();
        assert_eq!(estimate_theta(&q).unwrap(), 1.5);
        let q = QTable::from_values(1, 2, vec![2.0, -1.0]).unwrap();
        assert!(estimate_theta(&q).is_err());
    }

    #[test]
    fn theta_is_order_one_on_default_wireless_models() {
        use crate::wireless::{build_mimo, build_miso, MimoParams, MisoParams};
        for q_star in [
            crate::mdp::value_iteration(&build_miso(&MisoParams::default()).unwrap(), 1e-8, 100_000)
                .unwrap()
                .q,
            crate::mdp::value_iteration(&build_mimo(&MimoParams::default()).unwrap(), 1e-8, 100_000)
                .unwrap()
                .q,
        ] {
            let theta = estimate_theta(&q_star).unwrap();
            assert!((1.0..10.0).contains(&theta), "theta = {theta}");
        }
    }

    #[test]
    fn per_env_bound_error_free_limit() {
        let b = bound_per_env(0.0, 1.0, 2.0).unwrap();
        assert!((b.expectation - 2.0f64.ln()).abs() < 1e-4);
        assert_eq!(b.variance, 0.0);
    }

    #[test]
    fn per_env_bound_worked_example() {
        // lambda = 1, theta = 1.15, q* = 2
        let b = bound_per_env(1.0, 1.15, 2.0).unwrap();
        assert!((b.expectation - 0.7891).abs() < 1e-4, "{}", b.expectation);
        assert!((b.variance - 0.2571).abs() < 1e-4, "{}", b.variance);
    }

    #[test]
    fn per_env_bound_monotone_in_lambda() {
        let mut prev = bound_per_env(0.0, 1.2, 1.5).unwrap();
        for i in 1..10 {
            let b = bound_per_env(i as f64 * 0.3, 1.2, 1.5).unwrap();
            assert!(b.expectation > prev.expectation);
            assert!(b.variance > prev.variance);
            prev = b;
        }
    }

    #[test]
    fn ensemble_bound_shrinks_by_update_ratio() {
        let theta = 1.3;
        let (lambda, q) = (0.8, 2.0);
        let p1 = bound_per_env(lambda, theta, q).unwrap();
        let p2 = bound_ensemble(lambda, theta, 0.5, q).unwrap();
        // (1 - 0.5) / (1 + 0.5) = 1/3 exactly on the lambda terms
        let const_term = (1.0 + theta).ln();
        assert!(
            ((p2.expectation - const_term) - (p1.expectation - const_term) / 3.0).abs() < 1e-12
        );
        assert!((p2.variance - p1.variance / 3.0).abs() < 1e-12);
        // and never exceeds the per-environment bound
        assert!(p2.expectation <= p1.expectation);
        assert!(p2.variance <= p1.variance);
    }

    #[test]
    fn ensemble_bound_limit_u_to_one() {
        let b = bound_ensemble(1.0, 1.2, 0.999_999, 2.0).unwrap();
        assert!((b.expectation - 2.2f64.ln()).abs() < 1e-5);
        assert!(b.variance < 1e-5);
        assert!(bound_ensemble(1.0, 1.2, 0.0, 2.0).is_err());
        assert!(bound_ensemble(1.0, 1.2, 1.0, 2.0).is_err());
    }

    #[test]
    fn error_free_log_cc_stays_under_constant_term() {
        // Q = Q* exactly: log C = log(1 + ratio) <= log(1 + theta)
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.gen_range(2..6);
            let values: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(0.5..4.0)).collect();
            let q_star = QTable::from_values(n, 2, values).unwrap();
            let theta = estimate_theta(&q_star).unwrap().max(THETA_FLOOR);
            let pi = q_star.greedy_policy();
            for s in 0..n {
                let a = pi.action(s);
                let c = coverage_coefficient(&q_star, &pi, s, a).unwrap();
                assert!(
                    c.ln() <= (1.0 + theta).ln() + 1e-12,
                    "log C {} > log(1+theta) {}",
                    c.ln(),
                    (1.0 + theta).ln()
                );
            }
        }
    }

    #[test]
    fn trend_examples() {
        let mk = |key: usize, v: f64| TrendPoint {
            key,
            per_seed_variance: vec![v; 20],
        };
        // identical reports: trivially non-increasing
        let v = variance_vs_k_trend(&[mk(2, 0.5), mk(5, 0.5), mk(10, 0.5)]).unwrap();
        assert!(v.non_increasing);
        // decreasing
        let v = variance_vs_k_trend(&[mk(2, 0.9), mk(5, 0.5), mk(10, 0.3)]).unwrap();
        assert!(v.non_increasing);
        // increasing
        let v = variance_vs_k_trend(&[mk(2, 0.3), mk(5, 0.5), mk(10, 0.9)]).unwrap();
        assert!(!v.non_increasing);
        // insufficient points / seeds
        assert!(variance_vs_k_trend(&[mk(2, 0.5), mk(5, 0.4)]).is_err());
        let short = TrendPoint {
            key: 2,
            per_seed_variance: vec![0.5; 5],
        };
        assert!(variance_vs_k_trend(&[short, mk(5, 0.4), mk(10, 0.3)]).is_err());
    }

    #[test]
    fn report_cc_star_dominates_all_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mdp = crate::mdp::random_mdp(4, 2, 0.8, (0.5, 2.0), &mut rng);
        let spec = TraceSpec::states(&[0, 1, 2, 3], 2);
        let schedule = LearningSchedule {
            max_steps: 3_000,
            min_visits: 60,
            ..LearningSchedule::default()
        };
        let out = train_agent(&mdp, &schedule, ChaCha8Rng::seed_from_u64(4), &spec).unwrap();
        let pi = out.q.greedy_policy();
        let pairs: Vec<(usize, usize)> = (0..4).map(|s| (s, pi.action(s))).collect();
        let report = coverage_report(&out.trace, &pi, &pairs, 1, 0.25, None).unwrap();
        for p in &report.pairs {
            for &c in &p.cc {
                assert!(c == 0.0 || c >= 1.0, "C = {c} outside {{0}} U [1, inf)");
                assert!(report.cc_star >= c);
            }
        }
    }

    #[test]
    fn report_from_live_trace() {
        let mdp = crate::mdp::swap_mdp();
        let spec = TraceSpec::states(&[0, 1], 1);
        let schedule = LearningSchedule {
            max_steps: 4_000,
            min_visits: 100,
            ..LearningSchedule::default()
        };
        let out = train_agent(&mdp, &schedule, ChaCha8Rng::seed_from_u64(3), &spec).unwrap();
        let pi = out.q.greedy_policy();
        let pairs = vec![(0, pi.action(0)), (1, pi.action(1))];
        let report = coverage_report(&out.trace, &pi, &pairs, 1, 0.5, None).unwrap();
        assert_eq!(report.pairs.len(), 2);
        for p in &report.pairs {
            // single action: C = 1 whenever selected
            assert!(p.cc.iter().all(|&c| (c - 1.0).abs() < 1e-12));
            assert!(p.mean_log_cc.abs() < 1e-12);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("env_order,s,a,t,cc,log_cc,"));
    }
}
