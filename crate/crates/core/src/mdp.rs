//! Finite tabular MDPs, exact solvers, and policy metrics.
//!
//! A [`TabularMdp`] is a discounted-cost MDP over finite state and action
//! spaces: a probability transition tensor indexed `(s, s', a)`, a positive
//! bounded cost matrix indexed `(s, a)`, and a discount factor in `(0, 1)`.
//! [`value_iteration`] is the ground-truth oracle for everything downstream:
//! the returned Q-table carries a certified Bellman residual of at most `tol`.
//!
//! # Text format
//!
//! MDPs round-trip through a line-oriented text format (see [`TabularMdp::to_text`]):
//!
//! ```text
//! ccq-mdp v1
//! states 2
//! actions 1
//! discount 0.5
//! cost 0 0 1
//! cost 1 0 2
//! trans 0 0 1 1
//! trans 1 0 0 1
//! end
//! ```
//!
//! `cost s a c` lines cover every state-action pair; `trans s a s' p` lines
//! list only nonzero probabilities. Floats are written with Rust's shortest
//! round-trip formatting, so load(save(m)) reproduces `m` exactly.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for row-stochasticity checks.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Finite discounted-cost MDP with dense transition storage.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// One row-major `|S| x |S|` matrix per action: `transition[a][s * n_states + s']`.
    transition: Vec<Vec<f64>>,
    /// Row-major `|S| x |A|`: `cost[s * n_actions + a]`.
    cost: Vec<f64>,
    discount: f64,
}

impl TabularMdp {
    /// Build and validate an MDP.
    ///
    /// `transition[a]` must be a row-stochastic `n_states x n_states` matrix
    /// (rows sum to 1 within [`ROW_SUM_TOL`], entries nonnegative); every cost
    /// must be strictly positive and finite; `discount` must lie strictly
    /// inside `(0, 1)`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<Vec<f64>>,
        cost: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::invalid("n_states", "must be positive"));
        }
        if n_actions == 0 {
            return Err(Error::invalid("n_actions", "must be positive"));
        }
        if transition.len() != n_actions {
            return Err(Error::DimensionMismatch {
                detail: format!(
                    "expected {} action matrices, got {}",
                    n_actions,
                    transition.len()
                ),
            });
        }
        if cost.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch {
                detail: format!(
                    "cost table has {} entries, expected {}",
                    cost.len(),
                    n_states * n_actions
                ),
            });
        }
        let mdp = TabularMdp {
            n_states,
            n_actions,
            transition,
            cost,
            discount,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Re-check every invariant (row-stochastic transitions, positive bounded
    /// costs, discount in `(0,1)`).
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::invalid(
                "discount",
                format!("{} is not strictly inside (0, 1)", self.discount),
            ));
        }
        for (a, mat) in self.transition.iter().enumerate() {
            if mat.len() != self.n_states * self.n_states {
                return Err(Error::DimensionMismatch {
                    detail: format!(
                        "action {} matrix has {} entries, expected {}",
                        a,
                        mat.len(),
                        self.n_states * self.n_states
                    ),
                });
            }
            for s in 0..self.n_states {
                let row = &mat[s * self.n_states..(s + 1) * self.n_states];
                let mut sum = 0.0;
                for (next, &p) in row.iter().enumerate() {
                    if p < 0.0 || !p.is_finite() {
                        return Err(Error::NegativeProbability {
                            state: s,
                            next,
                            action: a,
                            value: p,
                        });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::NotStochastic {
                        state: s,
                        action: a,
                        sum,
                        tol: ROW_SUM_TOL,
                    });
                }
            }
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let c = self.cost(s, a);
                if !(c > 0.0 && c.is_finite()) {
                    return Err(Error::InvalidCost {
                        state: s,
                        action: a,
                        value: c,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Transition probability p_a(s, s').
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[a][s * self.n_states + next]
    }

    /// Row-major `|S| x |S|` transition matrix for one action.
    pub fn action_matrix(&self, a: usize) -> &[f64] {
        &self.transition[a]
    }

    /// One transition row p_a(s, .).
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[a][s * self.n_states..(s + 1) * self.n_states]
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.n_actions + a]
    }

    /// Row-major `|S| x |A|` cost table.
    pub fn cost_table(&self) -> &[f64] {
        &self.cost
    }

    /// Exact (min, max) over the realized cost table.
    pub fn cost_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &c in &self.cost {
            lo = lo.min(c);
            hi = hi.max(c);
        }
        (lo, hi)
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                limit: self.n_states,
            });
        }
        Ok(())
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.n_actions {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                limit: self.n_actions,
            });
        }
        Ok(())
    }

    /// Serialize to the documented text format (lossless round-trip).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("ccq-mdp v1\n");
        let _ = writeln!(out, "states {}", self.n_states);
        let _ = writeln!(out, "actions {}", self.n_actions);
        let _ = writeln!(out, "discount {}", self.discount);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let _ = writeln!(out, "cost {} {} {}", s, a, self.cost(s, a));
            }
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for next in 0..self.n_states {
                    let p = self.prob(s, a, next);
                    if p != 0.0 {
                        let _ = writeln!(out, "trans {} {} {} {}", s, a, next, p);
                    }
                }
            }
        }
        out.push_str("end\n");
        out
    }

    /// Parse the text format produced by [`TabularMdp::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, detail: &str| Error::Parse {
            line: line + 1,
            detail: detail.to_string(),
        };

        let (ln, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty input"))?;
        if header.trim() != "ccq-mdp v1" {
            return Err(parse_err(ln, "expected header `ccq-mdp v1`"));
        }

        let mut n_states: Option<usize> = None;
        let mut n_actions: Option<usize> = None;
        let mut discount: Option<f64> = None;
        let mut costs: Vec<(usize, usize, f64)> = Vec::new();
        let mut trans: Vec<(usize, usize, usize, f64)> = Vec::new();
        let mut saw_end = false;

        for (ln, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap();
            let mut field = |what: &str| -> Result<String> {
                parts
                    .next()
                    .map(str::to_string)
                    .ok_or_else(|| parse_err(ln, &format!("missing {what}")))
            };
            match tag {
                "states" => {
                    n_states = Some(
                        field("state count")?
                            .parse()
                            .map_err(|_| parse_err(ln, "bad state count"))?,
                    )
                }
                "actions" => {
                    n_actions = Some(
                        field("action count")?
                            .parse()
                            .map_err(|_| parse_err(ln, "bad action count"))?,
                    )
                }
                "discount" => {
                    discount = Some(
                        field("discount")?
                            .parse()
                            .map_err(|_| parse_err(ln, "bad discount"))?,
                    )
                }
                "cost" => {
                    let s = field("state")?.parse().map_err(|_| parse_err(ln, "bad state"))?;
                    let a = field("action")?
                        .parse()
                        .map_err(|_| parse_err(ln, "bad action"))?;
                    let c = field("cost")?.parse().map_err(|_| parse_err(ln, "bad cost"))?;
                    costs.push((s, a, c));
                }
                "trans" => {
                    let s = field("state")?.parse().map_err(|_| parse_err(ln, "bad state"))?;
                    let a = field("action")?
                        .parse()
                        .map_err(|_| parse_err(ln, "bad action"))?;
                    let next = field("next state")?
                        .parse()
                        .map_err(|_| parse_err(ln, "bad next state"))?;
                    let p = field("probability")?
                        .parse()
                        .map_err(|_| parse_err(ln, "bad probability"))?;
                    trans.push((s, a, next, p));
                }
                "end" => {
                    saw_end = true;
                    break;
                }
                other => return Err(parse_err(ln, &format!("unknown record `{other}`"))),
            }
        }
        if !saw_end {
            return Err(Error::Parse {
                line: 0,
                detail: "missing `end` record".to_string(),
            });
        }

        let n_states = n_states.ok_or_else(|| parse_err(0, "missing `states`"))?;
        let n_actions = n_actions.ok_or_else(|| parse_err(0, "missing `actions`"))?;
        let discount = discount.ok_or_else(|| parse_err(0, "missing `discount`"))?;

        let mut cost = vec![0.0; n_states * n_actions];
        for (s, a, c) in costs {
            if s >= n_states || a >= n_actions {
                return Err(Error::Parse {
                    line: 0,
                    detail: format!("cost record ({s}, {a}) out of range"),
                });
            }
            cost[s * n_actions + a] = c;
        }
        let mut transition = vec![vec![0.0; n_states * n_states]; n_actions];
        for (s, a, next, p) in trans {
            if s >= n_states || a >= n_actions || next >= n_states {
                return Err(Error::Parse {
                    line: 0,
                    detail: format!("trans record ({s}, {a}, {next}) out of range"),
                });
            }
            transition[a][s * n_states + next] = p;
        }
        TabularMdp::new(n_states, n_actions, transition, cost, discount)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

/// Deterministic stationary policy: one action per state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    actions: Vec<usize>,
}

impl Policy {
    pub fn new(actions: Vec<usize>, n_actions: usize) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::EmptyInput { what: "policy" });
        }
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::invalid(
                    "policy",
                    format!("state {s}: action {a} >= {n_actions}"),
                ));
            }
        }
        Ok(Policy { actions })
    }

    pub fn action(&self, s: usize) -> usize {
        self.actions[s]
    }

    pub fn n_states(&self) -> usize {
        self.actions.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.actions
    }
}

/// Nonnegative Q-function over `(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn constant(n_states: usize, n_actions: usize, value: f64) -> Self {
        QTable {
            n_states,
            n_actions,
            values: vec![value; n_states * n_actions],
        }
    }

    pub fn from_values(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch {
                detail: format!(
                    "Q table has {} entries, expected {}",
                    values.len(),
                    n_states * n_actions
                ),
            });
        }
        Ok(QTable {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, value: f64) {
        self.values[s * self.n_actions + a] = value;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Minimum over actions at state `s`.
    pub fn row_min(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Argmin over actions at `s`, ties broken by lowest action index.
    pub fn argmin_row(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v < row[best] {
                best = a;
            }
        }
        best
    }

    /// Greedy (argmin) policy of this table.
    pub fn greedy_policy(&self) -> Policy {
        let actions = (0..self.n_states).map(|s| self.argmin_row(s)).collect();
        Policy { actions }
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Output of [`value_iteration`].
#[derive(Debug, Clone)]
pub struct ValueIterationResult {
    pub q: QTable,
    /// Optimal value vector, the row-min of `q`.
    pub values: Vec<f64>,
    /// Argmin policy of `q` (lowest-index tie-breaking).
    pub policy: Policy,
    pub iterations: usize,
    /// Bellman residual of the returned `q`.
    pub residual: f64,
}

/// One synchronous Bellman backup: `(TQ)(s,a) = c(s,a) + g * sum_s' p(s,s',a) min_a' Q(s',a')`.
pub fn bellman_backup(mdp: &TabularMdp, q: &QTable) -> QTable {
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let vmin: Vec<f64> = (0..n).map(|s| q.row_min(s)).collect();
    let mut out = QTable::constant(n, na, 0.0);
    for a in 0..na {
        let mat = mdp.action_matrix(a);
        for s in 0..n {
            let row = &mat[s * n..(s + 1) * n];
            let mut exp = 0.0;
            for (next, &p) in row.iter().enumerate() {
                if p != 0.0 {
                    exp += p * vmin[next];
                }
            }
            out.set(s, a, mdp.cost(s, a) + mdp.discount() * exp);
        }
    }
    out
}

/// Sup-norm Bellman residual `max_{s,a} |Q - TQ|`.
pub fn bellman_residual(mdp: &TabularMdp, q: &QTable) -> f64 {
    bellman_backup(mdp, q).max_abs_diff(q)
}

/// Exact solver: iterate the Bellman operator until the sweep-to-sweep change
/// is at most `tol`. Because the operator is a `discount`-contraction, the
/// returned table then has Bellman residual at most `discount * tol <= tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64, max_iter: usize) -> Result<ValueIterationResult> {
    mdp.validate()?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let mut q = QTable::from_values(
        mdp.n_states(),
        mdp.n_actions(),
        mdp.cost_table().to_vec(),
    )?;
    let mut delta = f64::INFINITY;
    for iter in 1..=max_iter {
        let next = bellman_backup(mdp, &q);
        delta = next.max_abs_diff(&q);
        q = next;
        if delta <= tol {
            let residual = bellman_residual(mdp, &q);
            let values: Vec<f64> = (0..mdp.n_states()).map(|s| q.row_min(s)).collect();
            let policy = q.greedy_policy();
            return Ok(ValueIterationResult {
                q,
                values,
                policy,
                iterations: iter,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        residual: delta,
        iterations: max_iter,
        tol,
    })
}

/// Sample one environment transition: `s' ~ p_a(s, .)`, cost `c_a(s)`.
pub fn step<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    s: usize,
    a: usize,
    rng: &mut R,
) -> Result<(usize, f64)> {
    mdp.check_state(s)?;
    mdp.check_action(a)?;
    let next = sample_row(mdp.transition_row(s, a), rng.gen::<f64>());
    Ok((next, mdp.cost(s, a)))
}

/// Map a uniform draw through a probability row's CDF (linear walk).
pub(crate) fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_nonzero = i;
            if u < acc {
                return i;
            }
        }
    }
    // u landed in the rounding slack past the last positive entry.
    last_nonzero
}

/// Average policy error: fraction of states where the two policies disagree.
pub fn average_policy_error(pi_hat: &Policy, pi_star: &Policy) -> Result<f64> {
    if pi_hat.n_states() != pi_star.n_states() {
        return Err(Error::DimensionMismatch {
            detail: format!(
                "policies over {} and {} states",
                pi_hat.n_states(),
                pi_star.n_states()
            ),
        });
    }
    let disagreements = pi_hat
        .as_slice()
        .iter()
        .zip(pi_star.as_slice())
        .filter(|(a, b)| a != b)
        .count();
    Ok(disagreements as f64 / pi_hat.n_states() as f64)
}

/// How [`occupancy_distribution`] aggregates visit likelihood.
#[derive(Debug, Clone, Copy)]
pub enum OccupancyMode {
    /// Average the state distribution over the first `horizon` steps,
    /// starting uniform over states.
    Horizon(usize),
    /// Power-iterate toward the stationary distribution. Periodic or
    /// reducible chains are reported through the residual, not an error.
    Stationary { tol: f64, max_iter: usize },
}

/// State-action visit distribution of a policy (diagnostic).
#[derive(Debug, Clone)]
pub struct Occupancy {
    /// Row-major `|S| x |A|`; mass only on pairs `(s, pi(s))`.
    pub state_action: Vec<f64>,
    /// Final L1 power-iteration residual (0 for the horizon mode).
    pub residual: f64,
}

/// Visit distribution over `(s, a)` induced by following `pi`.
pub fn occupancy_distribution(
    mdp: &TabularMdp,
    pi: &Policy,
    mode: OccupancyMode,
) -> Result<Occupancy> {
    if pi.n_states() != mdp.n_states() {
        return Err(Error::DimensionMismatch {
            detail: format!(
                "policy over {} states, MDP has {}",
                pi.n_states(),
                mdp.n_states()
            ),
        });
    }
    let n = mdp.n_states();
    let uniform = vec![1.0 / n as f64; n];
    let push = |mu: &[f64]| -> Vec<f64> {
        let mut next = vec![0.0; n];
        for s in 0..n {
            if mu[s] != 0.0 {
                let row = mdp.transition_row(s, pi.action(s));
                for (t, &p) in row.iter().enumerate() {
                    if p != 0.0 {
                        next[t] += mu[s] * p;
                    }
                }
            }
        }
        next
    };
    let (state_dist, residual) = match mode {
        OccupancyMode::Horizon(h) => {
            if h == 0 {
                return Err(Error::invalid("horizon", "must be at least 1"));
            }
            let mut mu = uniform;
            let mut acc = vec![0.0; n];
            for _ in 0..h {
                for s in 0..n {
                    acc[s] += mu[s];
                }
                mu = push(&mu);
            }
            for v in &mut acc {
                *v /= h as f64;
            }
            (acc, 0.0)
        }
        OccupancyMode::Stationary { tol, max_iter } => {
            let mut mu = uniform;
            let mut residual = f64::INFINITY;
            for _ in 0..max_iter {
                let next = push(&mu);
                residual = mu
                    .iter()
                    .zip(&next)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
                mu = next;
                if residual <= tol {
                    break;
                }
            }
            (mu, residual)
        }
    };
    let mut state_action = vec![0.0; n * mdp.n_actions()];
    for s in 0..n {
        state_action[s * mdp.n_actions() + pi.action(s)] = state_dist[s];
    }
    Ok(Occupancy {
        state_action,
        residual,
    })
}

/// Random dense MDP with costs uniform in `cost_range` (test and harness
/// instance generator).
pub fn random_mdp<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    discount: f64,
    cost_range: (f64, f64),
    rng: &mut R,
) -> TabularMdp {
    let mut transition = Vec::with_capacity(n_actions);
    for _ in 0..n_actions {
        let mut mat = vec![0.0; n_states * n_states];
        for s in 0..n_states {
            let row = &mut mat[s * n_states..(s + 1) * n_states];
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(0.01..1.0);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        transition.push(mat);
    }
    let cost = (0..n_states * n_actions)
        .map(|_| rng.gen_range(cost_range.0..cost_range.1))
        .collect();
    TabularMdp::new(n_states, n_actions, transition, cost, discount)
        .expect("randomly generated MDP must be valid")
}

/// The 2-state deterministic-swap MDP used widely in tests:
/// `P = [[0,1],[1,0]]` under the single action, costs `(1, 2)`, `discount` 0.5.
/// Its value function is `(8/3, 10/3)`.
pub fn swap_mdp() -> TabularMdp {
    TabularMdp::new(
        2,
        1,
        vec![vec![0.0, 1.0, 1.0, 0.0]],
        vec![1.0, 2.0],
        0.5,
    )
    .unwrap()
}
