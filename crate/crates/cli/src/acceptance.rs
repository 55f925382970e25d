//! Acceptance criteria, pinned thresholds included.
//!
//! Every criterion is a self-contained check that returns pass/fail plus a
//! one-line detail. The `acceptance` test target and the `ccq acceptance`
//! subcommand both run these; each prints one line per criterion.

use rayon::prelude::*;

use ccq_core::coverage::{
    bound_per_env, bound_ensemble, coverage_coefficient, coverage_report, estimate_lambda,
    estimate_theta, exploration_dist, variance_vs_k_trend, TrendPoint, THETA_FLOOR,
};
use ccq_core::ensemble::{run_ensemble, EnsembleConfig};
use ccq_core::env::{CdfSampler, NhopEnv};
use ccq_core::mdp::{
    average_policy_error, random_mdp, value_iteration, Policy, QTable, TabularMdp,
};
use ccq_core::ordering::{
    ccq, empirical_lambda_ordering, f_gamma, order_environments, pairwise_agreement, CcqParams,
};
use ccq_core::qlearning::{
    train_agent, train_double_q, AlphaSchedule, EpsilonSchedule, LearningSchedule, TraceSpec,
};
use ccq_core::seeds;
use ccq_core::synthesis::{build_nhop, estimate_model, Sample};
use ccq_core::wireless::{build_mimo, build_miso, MimoParams, MisoParams};

use crate::config::{ExperimentConfig, ModelKind};
use crate::figures::{reproduce_figure, FigureName};
use crate::runner::run_experiment;
use crate::Result;

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} [{}] {} — {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn criterion<F>(id: u32, name: &'static str, f: F) -> CriterionResult
where
    F: FnOnce() -> Result<(bool, String)>,
{
    match f() {
        Ok((passed, detail)) => CriterionResult {
            id,
            name,
            passed,
            detail,
        },
        Err(e) => CriterionResult {
            id,
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// 1. Oracle equivalence
// ---------------------------------------------------------------------------

/// Q-learning, Double-Q, and the K=1 ensemble all reach `max|Q - Q*| <= 0.05`
/// and APE = 0 against value iteration on >= 5 random MDPs (|S| <= 20,
/// |A| = 2) in >= 90% of 20 seeds.
pub fn criterion_1_oracle_equivalence() -> CriterionResult {
    criterion(1, "oracle equivalence", || {
        const Q_TOL: f64 = 0.05;
        const SEEDS: u64 = 20;
        const PASS_RATE: f64 = 0.90;
        let sizes = [8usize, 12, 15, 18, 20];
        let schedule = LearningSchedule {
            alpha: AlphaSchedule::VisitDecay { exponent: 0.85 },
            epsilon: EpsilonSchedule::Fixed { value: 0.5 },
            trajectory_len: 16,
            min_visits: u64::MAX,
            max_steps: 400_000,
        };

        let mut details = Vec::new();
        let mut all_pass = true;
        for (i, &n) in sizes.iter().enumerate() {
            // Reject instances with near-tied optimal actions: APE = 0 is not
            // a meaningful target when the optimal policy itself is fragile.
            let mut gen = seeds::rng(1000 + i as u64, 7);
            let (mdp, vi) = loop {
                let mdp = random_mdp(n, 2, 0.75, (0.5, 2.0), &mut gen);
                let vi = value_iteration(&mdp, 1e-9, 200_000)?;
                let min_gap = (0..n)
                    .map(|s| (vi.q.get(s, 0) - vi.q.get(s, 1)).abs())
                    .fold(f64::INFINITY, f64::min);
                if min_gap >= 0.15 {
                    break (mdp, vi);
                }
            };
            let outcomes: Vec<[bool; 3]> = (0..SEEDS)
                .into_par_iter()
                .map(|seed| -> Result<[bool; 3]> {
                    let run_seed = seeds::derive(33_000 + i as u64, seed);
                    let check = |q: &QTable| -> Result<bool> {
                        let close = q.max_abs_diff(&vi.q) <= Q_TOL;
                        let ape = average_policy_error(&q.greedy_policy(), &vi.policy)?;
                        Ok(close && ape == 0.0)
                    };
                    let single = train_agent(
                        &mdp,
                        &schedule,
                        seeds::rng(run_seed, 1),
                        &TraceSpec::none(),
                    )?;
                    let double = train_double_q(
                        &mdp,
                        &schedule,
                        seeds::rng(run_seed, 2),
                        &TraceSpec::none(),
                    )?;
                    let k1 = run_ensemble(
                        &mdp,
                        &EnsembleConfig::uniform(vec![1], 0.5),
                        &schedule,
                        &TraceSpec::none(),
                        seeds::derive(run_seed, 3),
                        None,
                    )?;
                    Ok([check(&single.q)?, check(&double.q)?, check(&k1.q_hat)?])
                })
                .collect::<Result<Vec<_>>>()?;
            let rate = |algo: usize| {
                outcomes.iter().filter(|o| o[algo]).count() as f64 / SEEDS as f64
            };
            let (rs, rd, rk) = (rate(0), rate(1), rate(2));
            if rs < PASS_RATE || rd < PASS_RATE || rk < PASS_RATE {
                all_pass = false;
            }
            details.push(format!(
                "|S|={n}: single {:.0}%, double {:.0}%, k1 {:.0}%",
                rs * 100.0,
                rd * 100.0,
                rk * 100.0
            ));
        }
        Ok((all_pass, details.join("; ")))
    })
}

// ---------------------------------------------------------------------------
// 2. Coverage identity suite
// ---------------------------------------------------------------------------

/// On 10^4 random (Q, pi, s, a) instances: C = 1/v(s, a) when pi(s) = a,
/// C = 0 otherwise, and C always lies in {0} U [1, inf).
pub fn criterion_2_coverage_identity() -> CriterionResult {
    criterion(2, "coverage identity suite", || {
        use rand::Rng;
        let mut rng = seeds::rng(2, 0);
        let mut violations = 0usize;
        let trials = 10_000;
        for _ in 0..trials {
            let n = rng.gen_range(1..6);
            let na = rng.gen_range(2..5);
            let values: Vec<f64> = (0..n * na).map(|_| rng.gen_range(0.1..10.0)).collect();
            let q = QTable::from_values(n, na, values).unwrap();
            let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..na)).collect();
            let pi = Policy::new(actions, na).unwrap();
            let s = rng.gen_range(0..n);
            let a = rng.gen_range(0..na);
            let c = coverage_coefficient(&q, &pi, s, a)?;
            if pi.action(s) == a {
                let v = exploration_dist(&q, s)?[a];
                if (c - 1.0 / v).abs() > 1e-9 * c.max(1.0) || c < 1.0 {
                    violations += 1;
                }
            } else if c != 0.0 {
                violations += 1;
            }
        }
        Ok((
            violations == 0,
            format!("{trials} instances, {violations} violations"),
        ))
    })
}

// ---------------------------------------------------------------------------
// 3 & 4. Bound validity
// ---------------------------------------------------------------------------

/// Desk-scale MIMO instance for the bound checks: 198 states, gamma 0.95, a
/// pronounced transmit/idle cost gap (so the empty-queue states pin the
/// Q-ratio estimate), and six tracked states spread over mid queue levels at
/// the middle channel pair.
fn bound_instance() -> (TabularMdp, Vec<usize>) {
    let params = MimoParams {
        queue_levels: 22, // 22 * 3^2 = 198 states
        transmit_cost: 4.0,
        holding_cost: 0.3,
        arrival_prob: 0.4,
        channel_transition_skew: 1.0,
        ..MimoParams::default()
    };
    let mdp = build_mimo(&params).expect("valid MIMO instance");
    let tracked = [3usize, 6, 9, 12, 15, 18].iter().map(|q| q * 9 + 4).collect();
    (mdp, tracked)
}

/// Per-environment bound validity: for each order n <= 5 and >= 5 tracked
/// pairs on a desk-scale MIMO instance, the post-burn-in mean of
/// `log C^{pi_n}(s, a)` stays below the per-environment expectation bound in
/// >= 95% of 20 seeds.
pub fn criterion_3_per_env_bound_validity() -> CriterionResult {
    criterion(3, "per-environment bound validity", || {
        const SEEDS: u64 = 20;
        const BURN_IN: f64 = 0.5;
        let (mdp, tracked) = bound_instance();
        let vi = value_iteration(&mdp, 1e-8, 200_000)?;
        let theta = estimate_theta(&vi.q)?.max(THETA_FLOOR);
        let schedule = LearningSchedule {
            min_visits: u64::MAX,
            max_steps: 60_000,
            ..LearningSchedule::default()
        };
        let spec = TraceSpec::states(&tracked, 16);

        let mut worst_rate: f64 = 1.0;
        let mut fails = Vec::new();
        for order in 1..=5usize {
            let per_seed: Vec<Vec<bool>> = (0..SEEDS)
                .into_par_iter()
                .map(|seed| -> Result<Vec<bool>> {
                    let sampler = CdfSampler::new(&mdp);
                    let env = NhopEnv::new(&mdp, &sampler, order);
                    let out = train_agent(
                        &env,
                        &schedule,
                        seeds::rng(seeds::derive(3000 + order as u64, seed), 0),
                        &spec,
                    )?;
                    let lambda = estimate_lambda(&out.trace, &vi.q, BURN_IN)?;
                    let policy = out.q.greedy_policy();
                    let pairs: Vec<(usize, usize)> =
                        tracked.iter().map(|&s| (s, policy.action(s))).collect();
                    let report =
                        coverage_report(&out.trace, &policy, &pairs, order, BURN_IN, None)?;
                    report
                        .pairs
                        .iter()
                        .map(|p| {
                            let q_star_sa = vi.q.get(p.state, p.action);
                            let bound = bound_per_env(lambda, theta, q_star_sa)?;
                            Ok(p.mean_log_cc <= bound.expectation)
                        })
                        .collect()
                })
                .collect::<Result<Vec<_>>>()?;
            for (si, &s) in tracked.iter().enumerate() {
                let rate = per_seed.iter().filter(|row| row[si]).count() as f64 / SEEDS as f64;
                worst_rate = worst_rate.min(rate);
                if rate < 0.95 {
                    fails.push(format!("order {order} state {s}: {:.0}%", rate * 100.0));
                }
            }
        }
        let detail = if fails.is_empty() {
            format!(
                "orders 1..=5, {} pairs, worst seed pass rate {:.0}%",
                tracked.len(),
                worst_rate * 100.0
            )
        } else {
            format!("below 95%: {}", fails.join(", "))
        };
        Ok((fails.is_empty(), detail))
    })
}

/// Ensemble bound validity: same instance, fused policy at u = 0.5, ensemble
/// expectation bound with the worst member lambda.
pub fn criterion_4_ensemble_bound_validity() -> CriterionResult {
    criterion(4, "ensemble bound validity", || {
        const SEEDS: u64 = 20;
        const BURN_IN: f64 = 0.5;
        const U: f64 = 0.5;
        let (mdp, tracked) = bound_instance();
        let vi = value_iteration(&mdp, 1e-8, 200_000)?;
        let theta = estimate_theta(&vi.q)?.max(THETA_FLOOR);
        let schedule = LearningSchedule {
            min_visits: u64::MAX,
            max_steps: 60_000,
            ..LearningSchedule::default()
        };
        let spec = TraceSpec::states(&tracked, 16);
        let config = EnsembleConfig::uniform(vec![1, 2, 3, 4, 5], U);

        let per_seed: Vec<Vec<bool>> = (0..SEEDS)
            .into_par_iter()
            .map(|seed| -> Result<Vec<bool>> {
                let out = run_ensemble(
                    &mdp,
                    &config,
                    &schedule,
                    &spec,
                    seeds::derive(4000, seed),
                    None,
                )?;
                let mut lambda_max = 0.0f64;
                for member in &out.state.members {
                    lambda_max = lambda_max.max(estimate_lambda(&member.trace, &vi.q, BURN_IN)?);
                }
                let pairs: Vec<(usize, usize)> =
                    tracked.iter().map(|&s| (s, out.policy.action(s))).collect();
                let report = coverage_report(
                    &out.state.ensemble_trace,
                    &out.policy,
                    &pairs,
                    0,
                    BURN_IN,
                    None,
                )?;
                report
                    .pairs
                    .iter()
                    .map(|p| {
                        let bound =
                            bound_ensemble(lambda_max, theta, U, vi.q.get(p.state, p.action))?;
                        Ok(p.mean_log_cc <= bound.expectation)
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;

        let mut worst_rate: f64 = 1.0;
        let mut fails = Vec::new();
        for (si, &s) in tracked.iter().enumerate() {
            let rate = per_seed.iter().filter(|row| row[si]).count() as f64 / SEEDS as f64;
            worst_rate = worst_rate.min(rate);
            if rate < 0.95 {
                fails.push(format!("state {s}: {:.0}%", rate * 100.0));
            }
        }
        let detail = if fails.is_empty() {
            format!(
                "u = {U}, {} pairs, worst seed pass rate {:.0}%",
                tracked.len(),
                worst_rate * 100.0
            )
        } else {
            format!("below 95%: {}", fails.join(", "))
        };
        Ok((fails.is_empty(), detail))
    })
}

// ---------------------------------------------------------------------------
// 5. Environment-1 minimality
// ---------------------------------------------------------------------------

/// The measured error scale ranks environment 1 smallest in >= 90% of 10
/// seed-sets on both wireless families, and the closed-form ordering places
/// environment 1 first in 100% of runs.
pub fn criterion_5_env1_minimality() -> CriterionResult {
    criterion(5, "environment-1 minimality", || {
        const SETS: u64 = 10;
        let orders = [1usize, 2, 3, 4, 5];
        // Run-to-budget training with a learning rate that lets the base
        // environment actually converge at its longer horizon; the error
        // scale of environment 1 is then its residual wiggle, while higher
        // orders keep their commitment bias.
        let families: Vec<(&str, TabularMdp, u64)> = vec![
            (
                "miso",
                build_miso(&MisoParams {
                    battery_levels: 3,
                    buffer_levels: 5,
                    relay_count: 1,
                    relay_levels: 3,
                    discount: 0.9,
                    ..MisoParams::default()
                })?,
                60_000,
            ),
            (
                "mimo",
                build_mimo(&MimoParams {
                    discount: 0.9,
                    ..MimoParams::default()
                })?,
                150_000,
            ),
        ];
        let mut details = Vec::new();
        let mut all_pass = true;
        for (label, mdp, budget) in &families {
            let schedule = LearningSchedule {
                alpha: AlphaSchedule::VisitDecay { exponent: 0.6 },
                min_visits: u64::MAX,
                max_steps: *budget,
                ..LearningSchedule::default()
            };
            let vi = value_iteration(mdp, 1e-8, 200_000)?;
            let tracked: Vec<usize> = spread_states(mdp.n_states(), 6);
            let spec = TraceSpec::states(&tracked, 32);
            let firsts: Vec<bool> = (0..SETS)
                .into_par_iter()
                .map(|set| -> Result<bool> {
                    let seed_list: Vec<u64> =
                        (0..10).map(|i| seeds::derive(5000 + set, i)).collect();
                    let out = empirical_lambda_ordering(
                        mdp, &orders, &schedule, &spec, &vi.q, &seed_list, 0.6,
                    )?;
                    Ok(out.ranking[0] == 1)
                })
                .collect::<Result<Vec<_>>>()?;
            let rate = firsts.iter().filter(|&&b| b).count() as f64 / SETS as f64;
            if rate < 0.90 {
                all_pass = false;
            }
            details.push(format!("{label}: env-1 first in {:.0}% of sets", rate * 100.0));
        }

        // Structural: the closed-form ordering always puts environment 1 first.
        use rand::Rng;
        let mut rng = seeds::rng(5, 1);
        let mut structural = true;
        for _ in 0..200 {
            let alpha = rng.gen_range(0.01..0.99);
            let c_min = rng.gen_range(0.1..2.0);
            let ratio = rng.gen_range(1.0..10.0);
            let out = order_environments(10, 0.95, alpha, c_min, c_min * ratio)?;
            if out.ranking[0] != 1 {
                structural = false;
            }
        }
        if !structural {
            all_pass = false;
        }
        details.push(format!(
            "closed-form ordering env-1 first: {}",
            if structural { "200/200" } else { "violated" }
        ));
        Ok((all_pass, details.join("; ")))
    })
}

// ---------------------------------------------------------------------------
// 6. Pairwise ordering agreement
// ---------------------------------------------------------------------------

fn spread_states(n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| i * (n - 1) / (count - 1).max(1)).collect()
}

/// Closed-form ordering vs. brute-force lambda ordering across >= 20
/// randomized desk-scale configs (|S| in [100, 2000], K_total = 10): mean
/// pairwise agreement >= 70%. The worked closed-form cases must match
/// exactly.
pub fn criterion_6_ordering_agreement() -> CriterionResult {
    criterion(6, "pairwise ordering agreement", || {
        use rand::Rng;
        const CONFIGS: usize = 20;
        const K_TOTAL: usize = 10;

        // Worked closed-form cases.
        let f = f_gamma(0.95, 2, 3)?;
        if (f - 1.3330).abs() > 1e-3 {
            return Ok((false, format!("f(0.95, 2, 3) = {f}, expected ~1.3330")));
        }
        let ranked = order_environments(6, 0.95, 0.5, 1.0, 2.0)?;
        if ranked.ranking != vec![1, 2, 6, 5, 4, 3] {
            return Ok((
                false,
                format!("T = 1.25 ranking {:?} != [1, 2, 6, 5, 4, 3]", ranked.ranking),
            ));
        }

        // Randomized energy-harvesting configs with mild cost spreads (the
        // regime where the threshold rule is informative: c_max/c_min stays
        // within ~1.1-1.5, as in the reference ordering experiment), sizes
        // log-uniform across the desk-scale range.
        let agreements: Vec<f64> = (0..CONFIGS)
            .into_par_iter()
            .map(|ci| -> Result<f64> {
                let mut rng = seeds::rng(6000, ci as u64);
                let size = (100.0f64 * (2000.0f64 / 100.0).powf(rng.gen::<f64>())) as usize;
                let params = MisoParams {
                    battery_levels: 3,
                    relay_count: 1,
                    relay_levels: 3,
                    energy_arrival_prob: rng.gen_range(0.4..0.8),
                    data_arrival_prob: rng.gen_range(0.4..0.7),
                    transmit_cost: rng.gen_range(0.95..1.45),
                    idle_cost: rng.gen_range(0.85..1.15),
                    overflow_penalty: rng.gen_range(0.2..0.6),
                    discount: 0.9,
                    ..MisoParams::default()
                };
                let mdp = build_miso(&crate::config::scale_miso(&params, Some(size))?)?;
                let (c_min, c_max) = mdp.cost_bounds();
                let alpha = ccq_core::ordering::draw_alpha(&mut rng);
                let predicted =
                    order_environments(K_TOTAL, mdp.discount(), alpha, c_min, c_max)?;
                assert_eq!(predicted.ranking[0], 1);

                let vi = value_iteration(&mdp, 1e-7, 200_000)?;
                let tracked = spread_states(mdp.n_states(), 8);
                let spec = TraceSpec::states(&tracked, 32);
                let schedule = LearningSchedule {
                    alpha: AlphaSchedule::VisitDecay { exponent: 0.5 },
                    min_visits: u64::MAX,
                    max_steps: (400 * mdp.n_states() as u64).max(40_000),
                    ..LearningSchedule::default()
                };
                let orders: Vec<usize> = (1..=K_TOTAL).collect();
                let seed_list: Vec<u64> =
                    (0..10).map(|i| seeds::derive(6600 + ci as u64, i)).collect();
                let empirical = empirical_lambda_ordering(
                    &mdp, &orders, &schedule, &spec, &vi.q, &seed_list, 0.8,
                )?;
                pairwise_agreement(&predicted.ranking, &empirical.ranking)
                    .map_err(Into::into)
            })
            .collect::<Result<Vec<_>>>()?;

        let mean_agreement = mean(&agreements);
        let lo = agreements.iter().copied().fold(f64::INFINITY, f64::min);
        Ok((
            mean_agreement >= 0.70,
            format!(
                "closed-form cases exact; mean agreement {:.1}% over {CONFIGS} configs (min {:.1}%)",
                mean_agreement * 100.0,
                lo * 100.0
            ),
        ))
    })
}

// ---------------------------------------------------------------------------
// 7. Selection benefit
// ---------------------------------------------------------------------------

/// CCQ (K = 5 of K_total = 10) vs. the ensemble on the empirically worst
/// 5-member subset and vs. Double-Q at an equal sample budget, mean APE over
/// 20 seeds on 3 desk-scale instances.
pub fn criterion_7_selection_benefit() -> CriterionResult {
    criterion(7, "selection benefit", || {
        const SEEDS: u64 = 20;
        const K: usize = 5;
        const K_TOTAL: usize = 10;
        const U: f64 = 0.5;

        // Buffer-dominated energy-harvesting instances at gamma 0.9 with a
        // tangible overflow penalty: the order-n commitment visibly degrades
        // high-order member policies, and the step budget sits where a
        // single-environment learner is still underconverged.
        let miso = |battery: usize, buffer: usize, relays: usize| -> Result<TabularMdp> {
            Ok(build_miso(&MisoParams {
                battery_levels: battery,
                buffer_levels: buffer,
                relay_count: relays,
                relay_levels: 3,
                energy_arrival_prob: 0.6,
                data_arrival_prob: 0.5,
                transmit_cost: 1.4,
                idle_cost: 1.0,
                overflow_penalty: 1.2,
                discount: 0.9,
                ..MisoParams::default()
            })?)
        };
        let instances: Vec<(&str, TabularMdp)> = vec![
            ("miso-216", miso(3, 24, 1)?),
            ("miso-324", miso(3, 36, 1)?),
            ("miso-144", miso(4, 12, 1)?),
        ];

        let mut details = Vec::new();
        let mut ccq_beats_worst_strict = 0;
        let mut ccq_never_worse_than_worst = true;
        let mut ccq_beats_dq = 0;

        for (ii, (label, mdp)) in instances.iter().enumerate() {
            let member_budget = 200 * mdp.n_states() as u64;
            let schedule = LearningSchedule {
                alpha: AlphaSchedule::VisitDecay { exponent: 0.5 },
                min_visits: u64::MAX,
                max_steps: member_budget,
                ..LearningSchedule::default()
            };
            let vi = value_iteration(mdp, 1e-8, 200_000)?;
            // Empirically worst K-member subset from the brute-force ordering.
            let tracked = spread_states(mdp.n_states(), 6);
            let spec = TraceSpec::states(&tracked, 32);
            let probe_schedule = LearningSchedule {
                max_steps: 400 * mdp.n_states() as u64,
                ..schedule.clone()
            };
            let orders: Vec<usize> = (1..=K_TOTAL).collect();
            let probe_seeds: Vec<u64> =
                (0..10).map(|i| seeds::derive(7000 + ii as u64, i)).collect();
            let empirical = empirical_lambda_ordering(
                mdp,
                &orders,
                &probe_schedule,
                &spec,
                &vi.q,
                &probe_seeds,
                0.8,
            )?;
            let worst_members: Vec<usize> =
                empirical.ranking[K_TOTAL - K..].to_vec();

            let apes: Vec<[f64; 3]> = (0..SEEDS)
                .into_par_iter()
                .map(|seed| -> Result<[f64; 3]> {
                    let run_seed = seeds::derive(7700 + ii as u64, seed);
                    let params = CcqParams {
                        compute_bounds: false,
                        ..CcqParams::new(K, K_TOTAL, U, run_seed)
                    };
                    let ccq_out = ccq(mdp, &schedule, &params)?;
                    let ccq_ape = average_policy_error(&ccq_out.policy, &vi.policy)?;

                    let worst = run_ensemble(
                        mdp,
                        &EnsembleConfig::uniform(worst_members.clone(), U),
                        &schedule,
                        &TraceSpec::none(),
                        run_seed,
                        None,
                    )?;
                    let worst_ape = average_policy_error(&worst.policy, &vi.policy)?;

                    // Equal sample budget: Double-Q gets all K members' steps.
                    let dq_schedule = LearningSchedule {
                        max_steps: member_budget * K as u64,
                        ..schedule.clone()
                    };
                    let dq = train_double_q(
                        mdp,
                        &dq_schedule,
                        seeds::rng(run_seed, 9),
                        &TraceSpec::none(),
                    )?;
                    let dq_ape =
                        average_policy_error(&dq.q.greedy_policy(), &vi.policy)?;
                    Ok([ccq_ape, worst_ape, dq_ape])
                })
                .collect::<Result<Vec<_>>>()?;

            let m_ccq = mean(&apes.iter().map(|r| r[0]).collect::<Vec<_>>());
            let m_worst = mean(&apes.iter().map(|r| r[1]).collect::<Vec<_>>());
            let m_dq = mean(&apes.iter().map(|r| r[2]).collect::<Vec<_>>());
            if m_ccq > m_worst + 1e-12 {
                ccq_never_worse_than_worst = false;
            }
            if m_ccq < m_worst {
                ccq_beats_worst_strict += 1;
            }
            if m_ccq <= m_dq {
                ccq_beats_dq += 1;
            }
            details.push(format!(
                "{label}: ccq {:.3}, worst-subset {:.3} {:?}, double-q {:.3}",
                m_ccq, m_worst, worst_members, m_dq
            ));
        }

        let passed =
            ccq_never_worse_than_worst && ccq_beats_worst_strict >= 2 && ccq_beats_dq >= 2;
        details.push(format!(
            "strict wins vs worst {ccq_beats_worst_strict}/3, vs double-q {ccq_beats_dq}/3"
        ));
        Ok((passed, details.join("; ")))
    })
}

// ---------------------------------------------------------------------------
// 8. Variance trends
// ---------------------------------------------------------------------------

fn pooled_log_cc_variance(
    trace: &ccq_core::qlearning::QTrace,
    policy: &Policy,
    tracked: &[usize],
    burn_in: f64,
) -> Result<f64> {
    let pairs: Vec<(usize, usize)> = tracked.iter().map(|&s| (s, policy.action(s))).collect();
    let report = coverage_report(trace, policy, &pairs, 0, burn_in, None)?;
    let mut logs = Vec::new();
    for p in &report.pairs {
        let start = ((p.cc.len() as f64) * burn_in).floor() as usize;
        for &c in &p.cc[start.min(p.cc.len().saturating_sub(1))..] {
            if c > 0.0 {
                logs.push(c.ln());
            }
        }
    }
    if logs.len() < 2 {
        return Ok(0.0);
    }
    let m = mean(&logs);
    Ok(logs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / logs.len() as f64)
}

/// Empirical `Var[log C]` of the fused policy is non-increasing in K over
/// {2, 5, 10} and in u over {0.2, 0.5, 0.8}, within one standard error
/// (20 seeds each).
pub fn criterion_8_variance_trends() -> CriterionResult {
    criterion(8, "variance trends in K and u", || {
        const SEEDS: u64 = 20;
        const BURN_IN: f64 = 0.6;
        // Equal TOTAL sample budget across sweep points: K members split
        // 60k steps, so wider ensembles average more estimators over the same
        // data rather than just collecting more of it.
        const TOTAL_STEPS: u64 = 60_000;
        let mdp = build_mimo(&MimoParams {
            discount: 0.9,
            ..MimoParams::default()
        })?;
        let tracked = spread_states(mdp.n_states(), 4);
        let spec = TraceSpec::states(&tracked, 16);

        let run_point = |members: Vec<usize>, u: f64, stream: u64| -> Result<Vec<f64>> {
            let schedule = LearningSchedule {
                alpha: AlphaSchedule::Fixed { value: 0.08 },
                epsilon: EpsilonSchedule::Fixed { value: 0.3 },
                trajectory_len: 32,
                min_visits: u64::MAX,
                max_steps: TOTAL_STEPS / members.len() as u64,
            };
            (0..SEEDS)
                .into_par_iter()
                .map(|seed| -> Result<f64> {
                    let out = run_ensemble(
                        &mdp,
                        &EnsembleConfig::uniform(members.clone(), u),
                        &schedule,
                        &spec,
                        seeds::derive(8000 + stream, seed),
                        None,
                    )?;
                    pooled_log_cc_variance(
                        &out.state.ensemble_trace,
                        &out.policy,
                        &tracked,
                        BURN_IN,
                    )
                })
                .collect()
        };

        let k_points = vec![
            TrendPoint {
                key: 2,
                per_seed_variance: run_point((1..=2).collect(), 0.5, 1)?,
            },
            TrendPoint {
                key: 5,
                per_seed_variance: run_point((1..=5).collect(), 0.5, 2)?,
            },
            TrendPoint {
                key: 10,
                per_seed_variance: run_point((1..=10).collect(), 0.5, 3)?,
            },
        ];
        let k_verdict = variance_vs_k_trend(&k_points)?;

        let u_points = vec![
            TrendPoint {
                key: 20,
                per_seed_variance: run_point((1..=5).collect(), 0.2, 4)?,
            },
            TrendPoint {
                key: 50,
                per_seed_variance: run_point((1..=5).collect(), 0.5, 5)?,
            },
            TrendPoint {
                key: 80,
                per_seed_variance: run_point((1..=5).collect(), 0.8, 6)?,
            },
        ];
        let u_verdict = variance_vs_k_trend(&u_points)?;

        let fmt = |v: &ccq_core::coverage::TrendVerdict| {
            v.points
                .iter()
                .map(|(k, m, se)| format!("{k}: {m:.4}±{se:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        Ok((
            k_verdict.non_increasing && u_verdict.non_increasing,
            format!(
                "K sweep [{}] {}; u sweep (percent) [{}] {}",
                fmt(&k_verdict),
                if k_verdict.non_increasing { "ok" } else { "violated" },
                fmt(&u_verdict),
                if u_verdict.non_increasing { "ok" } else { "violated" },
            ),
        ))
    })
}

// ---------------------------------------------------------------------------
// 9. Synthesis algebra
// ---------------------------------------------------------------------------

/// Matrix-power identities and cost telescoping hold to 1e-9 on 100 random
/// bases; model estimation recovers a known 10-state model to max error
/// <= 0.02 at 1e5 samples per pair.
pub fn criterion_9_synthesis_algebra() -> CriterionResult {
    criterion(9, "synthesis algebra and estimation", || {
        use rand::Rng;
        const TOL: f64 = 1e-9;
        let mut rng = seeds::rng(9, 0);
        let mut worst_tele = 0.0f64;
        let mut worst_power = 0.0f64;
        for _ in 0..100 {
            let n = rng.gen_range(4..12);
            let base = random_mdp(n, 2, rng.gen_range(0.6..0.95), (0.5, 3.0), &mut rng);
            for order in [1usize, 2, 3] {
                let m_n = build_nhop(&base, order)?;
                let m_n1 = build_nhop(&base, order + 1)?;
                let m_2n = build_nhop(&base, 2 * order)?;
                for a in 0..2 {
                    // telescoping: c_{n+1} = c_1 + gamma * P_a c_n
                    for s in 0..n {
                        let mut pc = 0.0;
                        for next in 0..n {
                            pc += base.prob(s, a, next) * m_n.cost(next, a);
                        }
                        let expect = base.cost(s, a) + base.discount() * pc;
                        worst_tele = worst_tele.max((m_n1.cost(s, a) - expect).abs());
                    }
                    // power identity: P^{2n} = (P^n)^2
                    for s in 0..n {
                        for next in 0..n {
                            let mut sq = 0.0;
                            for mid in 0..n {
                                sq += m_n.prob(s, a, mid) * m_n.prob(mid, a, next);
                            }
                            worst_power =
                                worst_power.max((sq - m_2n.prob(s, a, next)).abs());
                        }
                    }
                }
            }
        }
        if worst_tele > TOL || worst_power > TOL {
            return Ok((
                false,
                format!("telescoping err {worst_tele:.2e}, power err {worst_power:.2e}"),
            ));
        }

        // Estimation recovery on a known 10-state model.
        let known = random_mdp(10, 2, 0.9, (0.5, 2.0), &mut rng);
        let sampler = CdfSampler::new(&known);
        let per_pair = 100_000usize;
        let mut samples: Vec<Sample> = Vec::with_capacity(10 * 2 * per_pair);
        for s in 0..10 {
            for a in 0..2 {
                for _ in 0..per_pair {
                    let next = sampler.sample(s, a, rng.gen::<f64>());
                    samples.push((s, a, next, known.cost(s, a)));
                }
            }
        }
        let est = estimate_model(&samples, 10, 2, 0.0)?;
        let mut worst_p = 0.0f64;
        for a in 0..2 {
            for s in 0..10 {
                for next in 0..10 {
                    let err = (est.p_hat[a][s * 10 + next] - known.prob(s, a, next)).abs();
                    worst_p = worst_p.max(err);
                }
            }
        }
        Ok((
            worst_p <= 0.02,
            format!(
                "telescoping err {worst_tele:.2e}, power err {worst_power:.2e}, \
                 estimation max err {worst_p:.4} at {per_pair} samples/pair"
            ),
        ))
    })
}

// ---------------------------------------------------------------------------
// 10. Determinism
// ---------------------------------------------------------------------------

fn tiny_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.kind = ModelKind::Miso;
    cfg.seeds = vec![1, 2];
    cfg.output_dir = dir.to_path_buf();
    cfg.family.k_total = 5;
    cfg.algorithm.k = 3;
    cfg.algorithm.compute_bounds = false;
    cfg.schedule.max_steps = 4_000;
    cfg.tracking.pairs = vec![(6, 1)];
    cfg.tracking.record_every = 8;
    cfg.sweep.sizes = vec![108];
    cfg
}

/// Repeated figure reproduction with identical config and seeds yields
/// byte-identical CSVs.
pub fn criterion_10_determinism() -> CriterionResult {
    criterion(10, "byte-identical reproduction", || {
        let root = std::env::temp_dir().join(format!("ccq-acceptance-det-{}", std::process::id()));
        let mut checked = Vec::new();
        for name in [FigureName::CcVsOrder, FigureName::ApeVsSize] {
            let mut bytes: Vec<Vec<u8>> = Vec::new();
            for round in 0..2 {
                let dir = root.join(format!("{}-{round}", name.file_name()));
                let cfg = tiny_config(&dir);
                let path = reproduce_figure(name, &cfg)?;
                bytes.push(std::fs::read(&path)?);
            }
            if bytes[0] != bytes[1] {
                std::fs::remove_dir_all(&root).ok();
                return Ok((false, format!("{} differed between runs", name.file_name())));
            }
            checked.push(name.file_name());
        }

        // The sweep runner's aggregate CSV is also byte-stable.
        let mut aggregates: Vec<Vec<u8>> = Vec::new();
        for round in 0..2 {
            let dir = root.join(format!("experiment-{round}"));
            let cfg = tiny_config(&dir);
            let summary = run_experiment(&cfg)?;
            aggregates.push(std::fs::read(&summary.aggregate_csv)?);
        }
        let same = aggregates[0] == aggregates[1];
        std::fs::remove_dir_all(&root).ok();
        if !same {
            return Ok((false, "aggregate.csv differed between runs".into()));
        }
        Ok((
            true,
            format!("{} and aggregate.csv byte-identical across reruns", checked.join(", ")),
        ))
    })
}

/// Run every criterion in order.
pub fn run_all() -> Vec<CriterionResult> {
    vec![
        criterion_1_oracle_equivalence(),
        criterion_2_coverage_identity(),
        criterion_3_per_env_bound_validity(),
        criterion_4_ensemble_bound_validity(),
        criterion_5_env1_minimality(),
        criterion_6_ordering_agreement(),
        criterion_7_selection_benefit(),
        criterion_8_variance_trends(),
        criterion_9_synthesis_algebra(),
        criterion_10_determinism(),
    ]
}
