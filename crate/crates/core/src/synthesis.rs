//! Model estimation and n-hop environment synthesis.
//!
//! The order-n environment of a base MDP keeps the action set and replaces,
//! per action `a`, the transition matrix by its n-th power `P_a^n`. Its cost
//! is the n-step discounted accumulated cost
//! `c_n(s, a) = sum_{t=0}^{n-1} gamma^t (P_a^t c_a)(s)` and its discount is
//! `gamma^n`, so the order-n value of the repeat-action policy matches the
//! base environment. The effective cost range therefore scales by
//! `(1 - gamma^n) / (1 - gamma)`, the quantity the pairwise ordering rule is
//! built around.
//!
//! `estimate_model` recovers transition probabilities and mean costs from
//! `(s, a, s', c)` samples with optional Laplace smoothing; unvisited rows
//! default to uniform and are flagged rather than rejected, so the pipeline
//! can run on partial data.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// One observed transition sample `(s, a, s', cost)`.
pub type Sample = (usize, usize, usize, f64);

/// Transition/cost model estimated from trajectory data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatedModel {
    pub n_states: usize,
    pub n_actions: usize,
    /// Per action, row-major `|S| x |S|` estimated transition matrix.
    pub p_hat: Vec<Vec<f64>>,
    /// Row-major `|S| x |A|` empirical mean costs.
    pub c_hat: Vec<f64>,
    /// Row-major `|S| x |A|` visit counts.
    pub visit_counts: Vec<u64>,
}

impl EstimatedModel {
    /// Pairs never observed in the data (their rows were defaulted to uniform).
    pub fn unvisited_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                if self.visit_counts[s * self.n_actions + a] == 0 {
                    out.push((s, a));
                }
            }
        }
        out
    }

    pub fn visits(&self, s: usize, a: usize) -> u64 {
        self.visit_counts[s * self.n_actions + a]
    }

    /// Exact (min, max) of the estimated cost table; fails if the floor is
    /// not strictly positive.
    pub fn cost_bounds(&self) -> Result<(f64, f64)> {
        cost_bounds_of(&self.c_hat, self.n_actions)
    }

    /// Materialize as a [`TabularMdp`] with the given discount.
    pub fn into_mdp(&self, discount: f64) -> Result<TabularMdp> {
        TabularMdp::new(
            self.n_states,
            self.n_actions,
            self.p_hat.clone(),
            self.c_hat.clone(),
            discount,
        )
    }
}

/// Estimate transition probabilities and mean costs from samples.
///
/// `p_hat(s, s', a) = (count(s, a, s') + smoothing) / (count(s, a) + smoothing * |S|)`;
/// `c_hat(s, a)` is the empirical mean observed cost. Unvisited `(s, a)` rows
/// are uniform (and flagged through `visit_counts`); their cost defaults to
/// the grand mean of all observed costs so the table stays inside the
/// observed range.
pub fn estimate_model(
    samples: &[Sample],
    n_states: usize,
    n_actions: usize,
    smoothing: f64,
) -> Result<EstimatedModel> {
    if samples.is_empty() {
        return Err(Error::EmptyInput {
            what: "trajectory samples",
        });
    }
    if smoothing < 0.0 || !smoothing.is_finite() {
        return Err(Error::invalid("smoothing", "must be nonnegative"));
    }
    let mut trans_counts = vec![vec![0u64; n_states * n_states]; n_actions];
    let mut visit_counts = vec![0u64; n_states * n_actions];
    let mut cost_sums = vec![0.0f64; n_states * n_actions];
    let mut grand_cost = 0.0;
    for &(s, a, next, c) in samples {
        if s >= n_states || next >= n_states {
            return Err(Error::IndexOutOfRange {
                what: "sample state",
                index: s.max(next),
                limit: n_states,
            });
        }
        if a >= n_actions {
            return Err(Error::IndexOutOfRange {
                what: "sample action",
                index: a,
                limit: n_actions,
            });
        }
        trans_counts[a][s * n_states + next] += 1;
        visit_counts[s * n_actions + a] += 1;
        cost_sums[s * n_actions + a] += c;
        grand_cost += c;
    }
    let grand_mean = grand_cost / samples.len() as f64;

    let mut p_hat = vec![vec![0.0; n_states * n_states]; n_actions];
    for a in 0..n_actions {
        for s in 0..n_states {
            let visits = visit_counts[s * n_actions + a];
            let row = &mut p_hat[a][s * n_states..(s + 1) * n_states];
            if visits == 0 && smoothing == 0.0 {
                for v in row.iter_mut() {
                    *v = 1.0 / n_states as f64;
                }
            } else {
                let denom = visits as f64 + smoothing * n_states as f64;
                for (next, v) in row.iter_mut().enumerate() {
                    *v = (trans_counts[a][s * n_states + next] as f64 + smoothing) / denom;
                }
            }
        }
    }
    let c_hat = (0..n_states * n_actions)
        .map(|i| {
            if visit_counts[i] > 0 {
                cost_sums[i] / visit_counts[i] as f64
            } else {
                grand_mean
            }
        })
        .collect();
    Ok(EstimatedModel {
        n_states,
        n_actions,
        p_hat,
        c_hat,
        visit_counts,
    })
}

/// Parse whitespace- or comma-delimited `(s, a, s', c)` trajectory records.
/// Blank lines and `#` comments are skipped.
pub fn parse_trajectories(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|ch: char| ch == ',' || ch.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: ln + 1,
                detail: format!("expected 4 fields (s a s' c), got {}", fields.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: ln + 1,
            detail: format!("bad {what}"),
        };
        out.push((
            fields[0].parse().map_err(|_| bad("state"))?,
            fields[1].parse().map_err(|_| bad("action"))?,
            fields[2].parse().map_err(|_| bad("next state"))?,
            fields[3].parse().map_err(|_| bad("cost"))?,
        ));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput {
            what: "trajectory file",
        });
    }
    Ok(out)
}

pub fn load_trajectories(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    parse_trajectories(&std::fs::read_to_string(path)?)
}

/// Row-major square matrix product `a * b`.
pub(crate) fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let out_row = &mut out[i * n..(i + 1) * n];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik != 0.0 {
                let b_row = &b[k * n..(k + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        }
    }
    out
}

/// Row-major matrix-vector product `m * v`.
pub(crate) fn mat_vec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..n {
        let row = &m[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for (&p, &x) in row.iter().zip(v) {
            acc += p * x;
        }
        out[i] = acc;
    }
    out
}

/// Materialize the order-n environment of `base`.
///
/// Transition under action `a` is `P_a^n`; cost is the n-step discounted
/// accumulated cost; discount is `gamma^n`. `n = 1` returns a clone of `base`.
pub fn build_nhop(base: &TabularMdp, n: usize) -> Result<TabularMdp> {
    if n == 0 {
        return Err(Error::invalid("order", "environment order must be >= 1"));
    }
    if n == 1 {
        return Ok(base.clone());
    }
    let ns = base.n_states();
    let gamma = base.discount();
    let mut transition = Vec::with_capacity(base.n_actions());
    let mut cost = vec![0.0; ns * base.n_actions()];
    for a in 0..base.n_actions() {
        let p1 = base.action_matrix(a);
        let c1: Vec<f64> = (0..ns).map(|s| base.cost(s, a)).collect();
        let mut power = p1.to_vec();
        let mut reach = c1.clone(); // P_a^t c_a for the current t
        let mut acc = c1.clone();
        let mut g = 1.0;
        for _ in 1..n {
            g *= gamma;
            reach = mat_vec(p1, &reach, ns);
            for (x, &r) in acc.iter_mut().zip(&reach) {
                *x += g * r;
            }
            power = mat_mul(&power, p1, ns);
        }
        for s in 0..ns {
            cost[s * base.n_actions() + a] = acc[s];
        }
        transition.push(power);
    }
    TabularMdp::new(
        ns,
        base.n_actions(),
        transition,
        cost,
        gamma.powi(n as i32),
    )
}

/// A base MDP and its materialized n-hop members, orders `1..=k_total`.
#[derive(Debug, Clone)]
pub struct EnvironmentFamily {
    base: TabularMdp,
    members: Vec<(usize, TabularMdp)>,
}

impl EnvironmentFamily {
    /// Build all members up to `k_total` with one incremental matrix-power
    /// sweep per action.
    pub fn build(base: TabularMdp, k_total: usize) -> Result<Self> {
        if k_total == 0 {
            return Err(Error::invalid("k_total", "must be >= 1"));
        }
        let ns = base.n_states();
        let na = base.n_actions();
        let gamma = base.discount();
        let mut members: Vec<(usize, TabularMdp)> = vec![(1, base.clone())];

        // Per action running state: current power P^t and cost accumulators.
        let mut powers: Vec<Vec<f64>> = (0..na).map(|a| base.action_matrix(a).to_vec()).collect();
        let mut reaches: Vec<Vec<f64>> = (0..na)
            .map(|a| (0..ns).map(|s| base.cost(s, a)).collect())
            .collect();
        let mut accs: Vec<Vec<f64>> = reaches.clone();
        let mut g = 1.0;
        for order in 2..=k_total {
            g *= gamma;
            let mut transition = Vec::with_capacity(na);
            let mut cost = vec![0.0; ns * na];
            for a in 0..na {
                let p1 = base.action_matrix(a);
                reaches[a] = mat_vec(p1, &reaches[a], ns);
                let (acc, reach) = (&mut accs[a], &reaches[a]);
                for (x, &r) in acc.iter_mut().zip(reach) {
                    *x += g * r;
                }
                powers[a] = mat_mul(&powers[a], p1, ns);
                transition.push(powers[a].clone());
                for s in 0..ns {
                    cost[s * na + a] = acc[s];
                }
            }
            members.push((
                order,
                TabularMdp::new(ns, na, transition, cost, gamma.powi(order as i32))?,
            ));
        }
        Ok(EnvironmentFamily { base, members })
    }

    pub fn base(&self) -> &TabularMdp {
        &self.base
    }

    pub fn member(&self, order: usize) -> Option<&TabularMdp> {
        self.members
            .iter()
            .find(|(o, _)| *o == order)
            .map(|(_, m)| m)
    }

    pub fn orders(&self) -> Vec<usize> {
        self.members.iter().map(|(o, _)| *o).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Text manifest: one line per member with discount and cost bounds.
    pub fn manifest(&self) -> String {
        let mut out = String::from("order discount c_min c_max\n");
        for (order, m) in &self.members {
            let (lo, hi) = m.cost_bounds();
            let _ = writeln!(out, "{} {} {} {}", order, m.discount(), lo, hi);
        }
        out
    }
}

/// Exact (min, max) over a cost table; the floor must be strictly positive.
pub fn cost_bounds_of(costs: &[f64], n_actions: usize) -> Result<(f64, f64)> {
    if costs.is_empty() {
        return Err(Error::EmptyInput { what: "cost table" });
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut arg_lo = 0;
    for (i, &c) in costs.iter().enumerate() {
        if c < lo {
            lo = c;
            arg_lo = i;
        }
        hi = hi.max(c);
    }
    if !(lo > 0.0) {
        return Err(Error::InvalidCost {
            state: arg_lo / n_actions,
            action: arg_lo % n_actions,
            value: lo,
        });
    }
    Ok((lo, hi))
}

/// Cost bounds of a full model (the pipeline's first stage).
pub fn cost_bounds(mdp: &TabularMdp) -> Result<(f64, f64)> {
    cost_bounds_of(mdp.cost_table(), mdp.n_actions())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_mdp, swap_mdp};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn estimate_relative_frequencies() {
        // counts (3, 1) over two successors, no smoothing
        let samples = vec![
            (0, 0, 0, 1.0),
            (0, 0, 0, 1.0),
            (0, 0, 0, 1.0),
            (0, 0, 1, 1.0),
        ];
        let est = estimate_model(&samples, 2, 1, 0.0).unwrap();
        assert!((est.p_hat[0][0] - 0.75).abs() < 1e-12);
        assert!((est.p_hat[0][1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn estimate_laplace_smoothing() {
        let samples = vec![
            (0, 0, 0, 1.0),
            (0, 0, 0, 1.0),
            (0, 0, 0, 1.0),
            (0, 0, 1, 1.0),
        ];
        let est = estimate_model(&samples, 2, 1, 1.0).unwrap();
        assert!((est.p_hat[0][0] - 4.0 / 6.0).abs() < 1e-12);
        assert!((est.p_hat[0][1] - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_deterministic_row_is_one_hot() {
        let samples: Vec<Sample> = (0..50).map(|_| (1, 0, 0, 2.0)).collect();
        let est = estimate_model(&samples, 2, 1, 0.0).unwrap();
        assert_eq!(est.p_hat[0][2], 1.0);
        assert_eq!(est.p_hat[0][3], 0.0);
        assert_eq!(est.visits(1, 0), 50);
    }

    #[test]
    fn estimate_flags_unvisited_rows_as_uniform() {
        let samples = vec![(0, 0, 1, 1.0)];
        let est = estimate_model(&samples, 3, 2, 0.0).unwrap();
        let unvisited = est.unvisited_pairs();
        assert_eq!(unvisited.len(), 5);
        // uniform default
        for &(s, a) in &unvisited {
            for next in 0..3 {
                assert!((est.p_hat[a][s * 3 + next] - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn estimate_rejects_bad_input() {
        assert!(estimate_model(&[], 2, 1, 0.0).is_err());
        assert!(estimate_model(&[(0, 0, 0, 1.0)], 2, 1, -0.5).is_err());
        assert!(estimate_model(&[(5, 0, 0, 1.0)], 2, 1, 0.0).is_err());
    }

    #[test]
    fn nhop_order_one_is_identity() {
        let base = swap_mdp();
        let m1 = build_nhop(&base, 1).unwrap();
        assert_eq!(m1, base);
    }

    #[test]
    fn nhop_order_zero_rejected() {
        assert!(build_nhop(&swap_mdp(), 0).is_err());
    }

    #[test]
    fn nhop_swap_chain_squares_to_identity() {
        // P = [[0,1],[1,0]], c = (1,2), gamma = 0.5, n = 2:
        // transition = I, c2 = (1 + 0.5*2, 2 + 0.5*1) = (2.0, 2.5), discount 0.25.
        let base = swap_mdp();
        let m2 = build_nhop(&base, 2).unwrap();
        assert_eq!(m2.prob(0, 0, 0), 1.0);
        assert_eq!(m2.prob(0, 0, 1), 0.0);
        assert_eq!(m2.prob(1, 0, 1), 1.0);
        assert!((m2.cost(0, 0) - 2.0).abs() < 1e-12);
        assert!((m2.cost(1, 0) - 2.5).abs() < 1e-12);
        assert!((m2.discount() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nhop_members_stay_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let base = random_mdp(6 + trial, 2, 0.9, (0.5, 2.0), &mut rng);
            for n in 1..=10 {
                let m = build_nhop(&base, n).unwrap();
                m.validate().unwrap();
            }
        }
    }

    #[test]
    fn nhop_power_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = random_mdp(7, 2, 0.9, (0.5, 2.0), &mut rng);
        for n in [1usize, 2, 3] {
            let m_n = build_nhop(&base, n).unwrap();
            let m_2n = build_nhop(&base, 2 * n).unwrap();
            for a in 0..2 {
                let sq = mat_mul(m_n.action_matrix(a), m_n.action_matrix(a), 7);
                for (x, y) in sq.iter().zip(m_2n.action_matrix(a)) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn nhop_cost_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let base = random_mdp(6, 2, 0.85, (0.5, 3.0), &mut rng);
        for n in 1..8 {
            let m_n = build_nhop(&base, n).unwrap();
            let m_n1 = build_nhop(&base, n + 1).unwrap();
            for a in 0..2 {
                let cn: Vec<f64> = (0..6).map(|s| m_n.cost(s, a)).collect();
                let pc = mat_vec(base.action_matrix(a), &cn, 6);
                for s in 0..6 {
                    let expect = base.cost(s, a) + base.discount() * pc[s];
                    assert!(
                        (m_n1.cost(s, a) - expect).abs() < 1e-9,
                        "telescoping failed at n={n}, s={s}, a={a}"
                    );
                }
            }
        }
    }

    #[test]
    fn family_matches_standalone_builds() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = random_mdp(5, 2, 0.9, (1.0, 2.0), &mut rng);
        let family = EnvironmentFamily::build(base.clone(), 6).unwrap();
        assert_eq!(family.orders(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(family.member(1).unwrap(), &base);
        // Same multiplication order in both paths, so bit-identical output.
        for n in 2..=6 {
            let standalone = build_nhop(&base, n).unwrap();
            assert_eq!(&standalone, family.member(n).unwrap(), "member {n} differs");
        }
    }

    #[test]
    fn cost_bounds_examples() {
        assert_eq!(cost_bounds_of(&[3.0, 3.0, 3.0], 1).unwrap(), (3.0, 3.0));
        assert_eq!(cost_bounds_of(&[2.0, 1.0, 5.0], 1).unwrap(), (1.0, 5.0));
        match cost_bounds_of(&[1.0, 0.0, 2.0, 3.0], 2) {
            Err(Error::InvalidCost { state, action, .. }) => {
                assert_eq!((state, action), (0, 1));
            }
            other => panic!("expected cost error, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_parsing() {
        let text = "# header\n0 1 2 1.5\n3,0,1,2.25\n\n";
        let samples = parse_trajectories(text).unwrap();
        assert_eq!(samples, vec![(0, 1, 2, 1.5), (3, 0, 1, 2.25)]);
        assert!(parse_trajectories("0 1 2\n").is_err());
        assert!(parse_trajectories("# only comments\n").is_err());
    }
}
