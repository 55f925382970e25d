//! Environment ordering and the coverage-based pipeline.
//!
//! Environments are compared through the closed form
//!
//! `f(gamma, n, m) = (1 - gamma^n)(1 - gamma^(m-1)) / ((1 - gamma^m)(1 - gamma^(n-1)))`
//!
//! against the threshold `T = alpha * c_max/c_min + (1 - alpha) * c_min/c_max`:
//! the order-n environment has the smaller error scale iff `f > T`. Order 1
//! makes the denominator factor vanish, so `f = +inf` and environment 1 wins
//! every comparison structurally (it is always ranked first). Every pair is
//! evaluated once in canonical orientation `n < m` — the raw rule can return
//! contradictory verdicts for `(n, m)` and `(m, n)` when `T < 1` because `f`
//! inverts but `T` does not — and possible verdict cycles are resolved by
//! Copeland score (win count) with smaller-order tie-breaking.
//!
//! [`ccq`] glues the pipeline together: estimate cost bounds, rank all
//! `k_total` orders with at most `C(k_total, 2)` comparisons, keep the best
//! `k`, run the coupled ensemble on them, and report coverage (with bounds
//! when the exact oracle is affordable).
//!
//! [`empirical_lambda_ordering`] is the brute-force oracle for the rule: it
//! trains an independent agent per environment per seed and ranks the
//! environments by their measured error scale.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{
    self, estimate_lambda, estimate_theta, BoundKind, BoundSpec, CoverageReport,
};
use crate::ensemble::{run_ensemble, EnsembleConfig, EnsembleOutput, UpdateRatio};
use crate::env::{CdfSampler, NhopEnv};
use crate::error::{Error, Result};
use crate::mdp::{value_iteration, Policy, QTable, TabularMdp};
use crate::qlearning::{train_agent, LearningSchedule, TraceSpec};
use crate::seeds;
use crate::synthesis;

/// Closed-form comparison kernel. Piecewise by the vanishing factors:
/// `f = 1` when `n = m`, `+inf` when `n = 1`, `0` when `m = 1`.
pub fn f_gamma(gamma: f64, n: usize, m: usize) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(
            "gamma",
            format!("{gamma} is not strictly inside (0, 1)"),
        ));
    }
    if n == 0 || m == 0 {
        return Err(Error::invalid("order", "environment orders start at 1"));
    }
    if n == m {
        return Ok(1.0);
    }
    if n == 1 {
        return Ok(f64::INFINITY);
    }
    if m == 1 {
        return Ok(0.0);
    }
    let num = (1.0 - gamma.powi(n as i32)) * (1.0 - gamma.powi(m as i32 - 1));
    let den = (1.0 - gamma.powi(m as i32)) * (1.0 - gamma.powi(n as i32 - 1));
    Ok(num / den)
}

/// Outcome of one canonicalized pairwise comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    /// Smaller order of the pair.
    pub n: usize,
    /// Larger order of the pair.
    pub m: usize,
    pub f_value: f64,
    pub threshold: f64,
    /// The environment judged to have the smaller error scale.
    pub smaller: usize,
}

/// Compare the error scales of environments `n` and `m`.
///
/// The pair is canonicalized to `n < m` before evaluating the rule, so the
/// verdict does not depend on argument order.
pub fn compare_envs(
    n: usize,
    m: usize,
    gamma: f64,
    alpha: f64,
    c_min: f64,
    c_max: f64,
) -> Result<PairVerdict> {
    if n == m {
        return Err(Error::invalid("order", "environments to compare must differ"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(
            "alpha",
            format!("{alpha} is not strictly inside (0, 1)"),
        ));
    }
    if !(c_min > 0.0) {
        return Err(Error::invalid(
            "c_min",
            format!("{c_min} must be positive"),
        ));
    }
    if c_max < c_min {
        return Err(Error::invalid(
            "c_max",
            format!("{c_max} is below c_min {c_min}"),
        ));
    }
    let (lo, hi) = if n < m { (n, m) } else { (m, n) };
    let f_value = f_gamma(gamma, lo, hi)?;
    let threshold = alpha * (c_max / c_min) + (1.0 - alpha) * (c_min / c_max);
    let smaller = if f_value > threshold { lo } else { hi };
    Ok(PairVerdict {
        n: lo,
        m: hi,
        f_value,
        threshold,
        smaller,
    })
}

/// Full ordering of environments `1..=k_total` from pairwise verdicts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingResult {
    pub k_total: usize,
    pub verdicts: Vec<PairVerdict>,
    /// (order, win count), in order index.
    pub copeland: Vec<(usize, usize)>,
    /// Orders ranked best (smallest error scale) first.
    pub ranking: Vec<usize>,
    /// Weight factor used, when a single draw covered the whole run.
    pub alpha: Option<f64>,
    /// Threshold used, when fixed across comparisons.
    pub threshold: Option<f64>,
    /// Number of comparisons performed (`k_total choose 2`).
    pub comparisons: usize,
}

impl OrderingResult {
    /// CSV export: one `n,m,f_value,threshold,smaller` row per comparison,
    /// then a `# ranking:` comment line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,m,f_value,threshold,smaller\n");
        for v in &self.verdicts {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                v.n, v.m, v.f_value, v.threshold, v.smaller
            );
        }
        let ranking: Vec<String> = self.ranking.iter().map(|o| o.to_string()).collect();
        let _ = writeln!(out, "# ranking: {}", ranking.join(" "));
        out
    }
}

fn rank_from_verdicts(k_total: usize, verdicts: Vec<PairVerdict>) -> OrderingResult {
    let mut wins = vec![0usize; k_total + 1];
    for v in &verdicts {
        wins[v.smaller] += 1;
    }
    let mut ranking: Vec<usize> = (1..=k_total).collect();
    // Copeland score, ties to the smaller order.
    ranking.sort_by(|&a, &b| wins[b].cmp(&wins[a]).then(a.cmp(&b)));
    let comparisons = verdicts.len();
    OrderingResult {
        k_total,
        copeland: (1..=k_total).map(|o| (o, wins[o])).collect(),
        ranking,
        verdicts,
        alpha: None,
        threshold: None,
        comparisons,
    }
}

/// Order all environments with a single weight factor `alpha`.
pub fn order_environments(
    k_total: usize,
    gamma: f64,
    alpha: f64,
    c_min: f64,
    c_max: f64,
) -> Result<OrderingResult> {
    if k_total < 2 {
        return Err(Error::invalid("k_total", "need at least 2 environments"));
    }
    let mut verdicts = Vec::with_capacity(k_total * (k_total - 1) / 2);
    for n in 1..=k_total {
        for m in (n + 1)..=k_total {
            verdicts.push(compare_envs(n, m, gamma, alpha, c_min, c_max)?);
        }
    }
    let threshold = verdicts.first().map(|v| v.threshold);
    let mut out = rank_from_verdicts(k_total, verdicts);
    out.alpha = Some(alpha);
    out.threshold = threshold;
    debug_assert_eq!(out.comparisons, k_total * (k_total - 1) / 2);
    debug_assert_eq!(out.ranking[0], 1);
    Ok(out)
}

/// Order all environments, redrawing `alpha` uniformly per comparison.
pub fn order_environments_redraw<R: Rng + ?Sized>(
    k_total: usize,
    gamma: f64,
    rng: &mut R,
    c_min: f64,
    c_max: f64,
) -> Result<OrderingResult> {
    if k_total < 2 {
        return Err(Error::invalid("k_total", "need at least 2 environments"));
    }
    let mut verdicts = Vec::with_capacity(k_total * (k_total - 1) / 2);
    for n in 1..=k_total {
        for m in (n + 1)..=k_total {
            verdicts.push(compare_envs(n, m, gamma, draw_alpha(rng), c_min, c_max)?);
        }
    }
    Ok(rank_from_verdicts(k_total, verdicts))
}

/// Uniform draw strictly inside (0, 1).
pub fn draw_alpha<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let x = rng.gen::<f64>();
        if x > 0.0 {
            return x;
        }
    }
}

/// Fraction of environment pairs that two rankings order the same way.
pub fn pairwise_agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch {
            detail: format!("rankings of length {} and {}", a.len(), b.len()),
        });
    }
    let mut pos_a = std::collections::HashMap::new();
    let mut pos_b = std::collections::HashMap::new();
    for (i, &x) in a.iter().enumerate() {
        pos_a.insert(x, i);
    }
    for (i, &x) in b.iter().enumerate() {
        pos_b.insert(x, i);
    }
    if pos_a.len() != a.len() || pos_b.keys().any(|k| !pos_a.contains_key(k)) {
        return Err(Error::invalid(
            "rankings",
            "must be permutations of the same set",
        ));
    }
    let items: Vec<usize> = a.to_vec();
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..items.len() {
        for j in (i + 1)..items.len() {
            let (x, y) = (items[i], items[j]);
            let same = (pos_a[&x] < pos_a[&y]) == (pos_b[&x] < pos_b[&y]);
            total += 1;
            if same {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / total as f64)
}

/// Brute-force environment ordering by measured error scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmpiricalOrdering {
    pub orders: Vec<usize>,
    /// Seed-averaged lambda per order (parallel to `orders`).
    pub lambda_means: Vec<f64>,
    /// Per seed, per order-index lambda estimates.
    pub per_seed: Vec<Vec<f64>>,
    /// Orders ranked by ascending mean lambda; exact ties keep input order.
    pub ranking: Vec<usize>,
    /// Orders with at least one coverage-incomplete run.
    pub incomplete: Vec<usize>,
}

/// Train an independent agent per environment per seed and rank environments
/// by seed-averaged lambda.
///
/// All environments of one seed share a common random stream, so identical
/// environments produce identical estimates (and the ranking falls back to
/// input order on exact ties).
pub fn empirical_lambda_ordering(
    base: &TabularMdp,
    orders: &[usize],
    schedule: &LearningSchedule,
    trace_spec: &TraceSpec,
    q_star: &QTable,
    seed_list: &[u64],
    burn_in: f64,
) -> Result<EmpiricalOrdering> {
    if orders.is_empty() {
        return Err(Error::EmptyInput {
            what: "environment orders",
        });
    }
    if seed_list.len() < 10 {
        return Err(Error::invalid(
            "seeds",
            format!("need at least 10 seeds, got {}", seed_list.len()),
        ));
    }
    if trace_spec.tracked_states.is_empty() {
        return Err(Error::EmptyInput {
            what: "tracked states",
        });
    }
    let sampler = CdfSampler::new(base);
    let mut per_seed = Vec::with_capacity(seed_list.len());
    let mut incomplete = Vec::new();
    for &seed in seed_list {
        let mut row = Vec::with_capacity(orders.len());
        for &order in orders {
            let env = NhopEnv::new(base, &sampler, order);
            let out = train_agent(&env, schedule, seeds::rng(seed, 0), trace_spec)?;
            if !out.coverage.complete && !incomplete.contains(&order) {
                incomplete.push(order);
            }
            row.push(estimate_lambda(&out.trace, q_star, burn_in)?);
        }
        per_seed.push(row);
    }
    let lambda_means: Vec<f64> = (0..orders.len())
        .map(|i| per_seed.iter().map(|row| row[i]).sum::<f64>() / per_seed.len() as f64)
        .collect();
    let mut idx: Vec<usize> = (0..orders.len()).collect();
    idx.sort_by(|&i, &j| lambda_means[i].total_cmp(&lambda_means[j]).then(i.cmp(&j)));
    let ranking = idx.iter().map(|&i| orders[i]).collect();
    Ok(EmpiricalOrdering {
        orders: orders.to_vec(),
        lambda_means,
        per_seed,
        ranking,
        incomplete,
    })
}

/// How the pipeline picks its weight factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlphaMode {
    Fixed { value: f64 },
    /// One uniform draw per run from the run seed (default).
    PerRun,
    /// Fresh uniform draw per comparison.
    PerComparison,
}

/// Pipeline parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CcqParams {
    /// Ensemble size (first `k` of the ranking).
    pub k: usize,
    /// Number of candidate environments to rank.
    pub k_total: usize,
    pub update_ratio: UpdateRatio,
    pub fusion_period: u64,
    pub alpha: AlphaMode,
    pub seed: u64,
    /// Pairs tracked for coverage reporting (must be non-empty for a report).
    pub tracked_pairs: Vec<(usize, usize)>,
    pub record_every: u64,
    pub burn_in: f64,
    /// Evaluate the exact bounds (runs value iteration on the base model).
    pub compute_bounds: bool,
    pub vi_tol: f64,
    pub vi_max_iter: usize,
}

impl CcqParams {
    pub fn new(k: usize, k_total: usize, u: f64, seed: u64) -> Self {
        CcqParams {
            k,
            k_total,
            update_ratio: UpdateRatio::Fixed { value: u },
            fusion_period: 64,
            alpha: AlphaMode::PerRun,
            seed,
            tracked_pairs: Vec::new(),
            record_every: 16,
            burn_in: 0.5,
            compute_bounds: false,
            vi_tol: 1e-8,
            vi_max_iter: 100_000,
        }
    }
}

/// Pipeline output.
#[derive(Debug, Clone)]
pub struct CcqOutput {
    pub q_hat: QTable,
    pub policy: Policy,
    pub ordering: OrderingResult,
    /// Coverage of the fused policy over the tracked pairs (when tracked).
    pub coverage: Option<CoverageReport>,
    pub ensemble: EnsembleOutput,
    /// Orders actually trained on (first `k` of the ranking).
    pub selected: Vec<usize>,
    pub cost_bounds: (f64, f64),
    /// The weight factor when a single draw covered the run.
    pub alpha_used: Option<f64>,
    /// Oracle policy, when the run computed one for bounds.
    pub oracle_policy: Option<Policy>,
}

/// Run the pipeline on a model estimated from trajectory data.
pub fn ccq_from_estimate(
    estimate: &crate::synthesis::EstimatedModel,
    discount: f64,
    schedule: &LearningSchedule,
    params: &CcqParams,
) -> Result<CcqOutput> {
    let mdp = estimate
        .into_mdp(discount)
        .map_err(|e| e.in_stage("model-estimation"))?;
    ccq(&mdp, schedule, params)
}

/// Coverage-based ensemble pipeline: cost bounds, closed-form ordering,
/// member selection, coupled training, coverage report.
pub fn ccq(
    mdp: &TabularMdp,
    schedule: &LearningSchedule,
    params: &CcqParams,
) -> Result<CcqOutput> {
    if params.k == 0 || params.k > params.k_total {
        return Err(Error::invalid(
            "k",
            format!("k = {} must satisfy 1 <= k <= k_total = {}", params.k, params.k_total),
        ));
    }
    let (c_min, c_max) =
        synthesis::cost_bounds(mdp).map_err(|e| e.in_stage("cost-bounds"))?;

    let gamma = mdp.discount();
    let (ordering, alpha_used) = match params.alpha {
        AlphaMode::Fixed { value } => (
            order_environments(params.k_total, gamma, value, c_min, c_max)
                .map_err(|e| e.in_stage("ordering"))?,
            Some(value),
        ),
        AlphaMode::PerRun => {
            let alpha = draw_alpha(&mut seeds::rng(params.seed, u64::from(u32::MAX)));
            (
                order_environments(params.k_total, gamma, alpha, c_min, c_max)
                    .map_err(|e| e.in_stage("ordering"))?,
                Some(alpha),
            )
        }
        AlphaMode::PerComparison => (
            order_environments_redraw(
                params.k_total,
                gamma,
                &mut seeds::rng(params.seed, u64::from(u32::MAX)),
                c_min,
                c_max,
            )
            .map_err(|e| e.in_stage("ordering"))?,
            None,
        ),
    };

    let selected: Vec<usize> = ordering.ranking[..params.k].to_vec();

    let oracle = if params.compute_bounds {
        Some(
            value_iteration(mdp, params.vi_tol, params.vi_max_iter)
                .map_err(|e| e.in_stage("oracle"))?,
        )
    } else {
        None
    };

    let config = EnsembleConfig {
        members: selected.clone(),
        update_ratio: params.update_ratio,
        fusion_period: params.fusion_period,
        weights: None,
    };
    let trace_spec = TraceSpec::pairs(&params.tracked_pairs, params.record_every);
    let ensemble = run_ensemble(
        mdp,
        &config,
        schedule,
        &trace_spec,
        params.seed,
        oracle.as_ref().map(|o| &o.policy),
    )
    .map_err(|e| e.in_stage("ensemble"))?;

    let coverage = if params.tracked_pairs.is_empty() {
        None
    } else {
        let bound_spec = match &oracle {
            Some(vi) => {
                let theta = estimate_theta(&vi.q).map_err(|e| e.in_stage("coverage"))?;
                let mut lambda_max = 0.0f64;
                for member in &ensemble.state.members {
                    let l = estimate_lambda(&member.trace, &vi.q, params.burn_in)
                        .map_err(|e| e.in_stage("coverage"))?;
                    lambda_max = lambda_max.max(l);
                }
                let u = params.update_ratio.value(ensemble.state.rounds.saturating_sub(1));
                // The ensemble bound needs u strictly inside (0, 1); the
                // degenerate endpoints fall back to an unbounded report.
                if u > 0.0 && u < 1.0 {
                    Some((vi, lambda_max, theta, u))
                } else {
                    None
                }
            }
            None => None,
        };
        let report = match &bound_spec {
            Some((vi, lambda, theta, u)) => coverage::coverage_report(
                &ensemble.state.ensemble_trace,
                &ensemble.policy,
                &params.tracked_pairs,
                0,
                params.burn_in,
                Some(BoundSpec {
                    q_star: &vi.q,
                    lambda: *lambda,
                    theta: *theta,
                    kind: BoundKind::Ensemble,
                    u: Some(*u),
                }),
            ),
            None => coverage::coverage_report(
                &ensemble.state.ensemble_trace,
                &ensemble.policy,
                &params.tracked_pairs,
                0,
                params.burn_in,
                None,
            ),
        }
        .map_err(|e| e.in_stage("coverage"))?;
        Some(report)
    };

    Ok(CcqOutput {
        q_hat: ensemble.q_hat.clone(),
        policy: ensemble.policy.clone(),
        ordering,
        coverage,
        selected,
        cost_bounds: (c_min, c_max),
        alpha_used,
        oracle_policy: oracle.map(|o| o.policy),
        ensemble,
    })
}
