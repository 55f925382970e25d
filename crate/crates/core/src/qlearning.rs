//! Tabular Q-learning with epsilon-greedy exploration and trace recording.
//!
//! Agents run episodes of length `trajectory_len` from uniformly random start
//! states and terminate once every `(s, a)` pair has at least `min_visits`
//! visits (or the step budget runs out, in which case the result is flagged
//! coverage-incomplete together with the deficient pairs).
//!
//! Q-tables are initialized to the constant `c_min / (1 - gamma)`: strictly
//! positive, so linear action-selection weights are always well defined, and
//! a lower bound on the optimal Q-function, so exploration weights never
//! start above their fixed point.
//!
//! [`AgentRunner`] is resumable: the ensemble coordinator advances each agent
//! by a fusion period at a time, and an uninterrupted run produces exactly
//! the same stream as a chunked one.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::mdp::QTable;

/// Learning-rate schedule. The visit-decay variant uses
/// `alpha = 1 / (1 + visits(s, a))^exponent`, with the visit counted before
/// the update so the rate stays strictly below 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlphaSchedule {
    Fixed { value: f64 },
    VisitDecay { exponent: f64 },
}

/// Exploration schedule. The episode-decay variant uses
/// `epsilon = max(floor, rate^episode)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EpsilonSchedule {
    Fixed { value: f64 },
    EpisodeDecay { floor: f64, rate: f64 },
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningSchedule {
    pub alpha: AlphaSchedule,
    pub epsilon: EpsilonSchedule,
    /// Episode length `l`.
    pub trajectory_len: usize,
    /// Minimum visits `v` per state-action pair (termination condition).
    pub min_visits: u64,
    /// Hard step budget.
    pub max_steps: u64,
}

impl Default for LearningSchedule {
    fn default() -> Self {
        LearningSchedule {
            alpha: AlphaSchedule::VisitDecay { exponent: 0.85 },
            epsilon: EpsilonSchedule::EpisodeDecay {
                floor: 0.05,
                rate: 0.999,
            },
            trajectory_len: 32,
            min_visits: 1,
            max_steps: 200_000,
        }
    }
}

impl LearningSchedule {
    pub fn validate(&self) -> Result<()> {
        match self.alpha {
            AlphaSchedule::Fixed { value } => {
                if !(value > 0.0 && value <= 1.0) {
                    return Err(Error::invalid("alpha", format!("{value} not in (0, 1]")));
                }
            }
            AlphaSchedule::VisitDecay { exponent } => {
                if !(exponent > 0.0 && exponent <= 1.0) {
                    return Err(Error::invalid(
                        "alpha exponent",
                        format!("{exponent} not in (0, 1]"),
                    ));
                }
            }
        }
        match self.epsilon {
            EpsilonSchedule::Fixed { value } => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::invalid("epsilon", format!("{value} not in [0, 1]")));
                }
            }
            EpsilonSchedule::EpisodeDecay { floor, rate } => {
                if !(0.0..=1.0).contains(&floor) || !(rate > 0.0 && rate <= 1.0) {
                    return Err(Error::invalid(
                        "epsilon decay",
                        format!("floor {floor} / rate {rate} out of range"),
                    ));
                }
            }
        }
        if self.trajectory_len == 0 {
            return Err(Error::invalid("trajectory_len", "must be >= 1"));
        }
        if self.min_visits == 0 {
            return Err(Error::invalid("min_visits", "must be >= 1"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps", "must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate for an update whose visit counter (post-increment) is `visits`.
    pub fn alpha_at(&self, visits: u64) -> f64 {
        match self.alpha {
            AlphaSchedule::Fixed { value } => value,
            AlphaSchedule::VisitDecay { exponent } => {
                1.0 / (1.0 + visits as f64).powf(exponent)
            }
        }
    }

    pub fn epsilon_at(&self, episode: u64) -> f64 {
        match self.epsilon {
            EpsilonSchedule::Fixed { value } => value,
            EpsilonSchedule::EpisodeDecay { floor, rate } => {
                floor.max(rate.powf(episode as f64))
            }
        }
    }
}

/// What a run records for later coverage/error analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    /// States whose full Q rows are recorded (deduplicated, sorted).
    pub tracked_states: Vec<usize>,
    /// Record tracked rows every this many steps.
    pub record_every: u64,
    /// Also snapshot the full table at power-of-two step counts.
    pub full_snapshots: bool,
}

impl TraceSpec {
    pub fn none() -> Self {
        TraceSpec {
            tracked_states: Vec::new(),
            record_every: 1,
            full_snapshots: false,
        }
    }

    pub fn states(tracked: &[usize], record_every: u64) -> Self {
        let mut tracked_states = tracked.to_vec();
        tracked_states.sort_unstable();
        tracked_states.dedup();
        TraceSpec {
            tracked_states,
            record_every: record_every.max(1),
            full_snapshots: false,
        }
    }

    /// Track the states mentioned by a list of (s, a) pairs.
    pub fn pairs(tracked: &[(usize, usize)], record_every: u64) -> Self {
        let states: Vec<usize> = tracked.iter().map(|&(s, _)| s).collect();
        Self::states(&states, record_every)
    }
}

/// Time-indexed history of a Q-table over a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTrace {
    pub tracked_states: Vec<usize>,
    pub n_actions: usize,
    /// Step indices of the recorded rows, strictly increasing.
    pub times: Vec<u64>,
    /// `times.len() * tracked_states.len() * n_actions` Q values.
    pub rows: Vec<f64>,
    /// Visit counts parallel to `rows`.
    pub visit_rows: Vec<u64>,
    /// Power-of-two full-table snapshot times.
    pub snapshot_times: Vec<u64>,
    pub snapshots: Vec<QTable>,
    /// Final per-pair visit counts.
    pub final_visits: Vec<u64>,
}

impl QTrace {
    pub(crate) fn new(spec: &TraceSpec, n_actions: usize) -> Self {
        QTrace {
            tracked_states: spec.tracked_states.clone(),
            n_actions,
            times: Vec::new(),
            rows: Vec::new(),
            visit_rows: Vec::new(),
            snapshot_times: Vec::new(),
            snapshots: Vec::new(),
            final_visits: Vec::new(),
        }
    }

    pub(crate) fn record(&mut self, time: u64, q: &QTable, visits: &[u64]) {
        self.times.push(time);
        for &s in &self.tracked_states {
            for a in 0..self.n_actions {
                self.rows.push(q.get(s, a));
                self.visit_rows.push(visits[s * self.n_actions + a]);
            }
        }
    }

    pub fn tracked_index(&self, s: usize) -> Option<usize> {
        self.tracked_states.iter().position(|&t| t == s)
    }

    /// Q row of tracked state `s` at recorded time index `ti`.
    pub fn row_at(&self, ti: usize, s: usize) -> Option<&[f64]> {
        let si = self.tracked_index(s)?;
        let w = self.tracked_states.len() * self.n_actions;
        let start = ti * w + si * self.n_actions;
        self.rows.get(start..start + self.n_actions)
    }

    /// Time series of Q(s, a) over the recorded times.
    pub fn series(&self, s: usize, a: usize) -> Option<Vec<f64>> {
        let si = self.tracked_index(s)?;
        if a >= self.n_actions {
            return None;
        }
        let w = self.tracked_states.len() * self.n_actions;
        Some(
            (0..self.times.len())
                .map(|ti| self.rows[ti * w + si * self.n_actions + a])
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV export: `t,s,a,q_value,visits` per tracked entry and time.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,s,a,q_value,visits\n");
        let w = self.tracked_states.len() * self.n_actions;
        for (ti, &t) in self.times.iter().enumerate() {
            for (si, &s) in self.tracked_states.iter().enumerate() {
                for a in 0..self.n_actions {
                    let idx = ti * w + si * self.n_actions + a;
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        t, s, a, self.rows[idx], self.visit_rows[idx]
                    );
                }
            }
        }
        out
    }
}

/// Whether the min-visit termination condition was met, and if not, which
/// pairs fell short.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStatus {
    pub complete: bool,
    pub deficit: Vec<(usize, usize)>,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub q: QTable,
    pub trace: QTrace,
    pub coverage: CoverageStatus,
    pub steps: u64,
    pub episodes: u64,
}

/// One Q-learning update:
/// `Q(s,a) <- Q(s,a) + alpha * (c + gamma * min_a' Q(s',a') - Q(s,a))`.
///
/// `alpha = 1` replaces the entry by the backup exactly; an entry already at
/// its backup value is left bit-identical.
pub fn q_update(
    q: &mut QTable,
    sample: (usize, usize, usize, f64),
    alpha: f64,
    gamma: f64,
) -> Result<()> {
    let (s, a, next, cost) = sample;
    if s >= q.n_states() || next >= q.n_states() {
        return Err(Error::IndexOutOfRange {
            what: "state",
            index: s.max(next),
            limit: q.n_states(),
        });
    }
    if a >= q.n_actions() {
        return Err(Error::IndexOutOfRange {
            what: "action",
            index: a,
            limit: q.n_actions(),
        });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha", format!("{alpha} not in (0, 1]")));
    }
    let target = cost + gamma * q.row_min(next);
    let new = if alpha == 1.0 {
        target
    } else {
        let old = q.get(s, a);
        old + alpha * (target - old)
    };
    q.set(s, a, new);
    Ok(())
}

/// Epsilon-greedy action: uniform with probability `epsilon`, otherwise the
/// argmin of `Q(s, .)` (lowest-index ties).
pub fn epsilon_greedy<R: Rng + ?Sized>(
    q: &QTable,
    s: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid("epsilon", format!("{epsilon} not in [0, 1]")));
    }
    if s >= q.n_states() {
        return Err(Error::IndexOutOfRange {
            what: "state",
            index: s,
            limit: q.n_states(),
        });
    }
    Ok(epsilon_greedy_unchecked(q, s, epsilon, rng))
}

fn epsilon_greedy_unchecked<R: Rng + ?Sized>(
    q: &QTable,
    s: usize,
    epsilon: f64,
    rng: &mut R,
) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.n_actions())
    } else {
        q.argmin_row(s)
    }
}

/// Resumable single-agent Q-learning loop.
pub struct AgentRunner<'a, E: Environment, R: Rng> {
    env: &'a E,
    schedule: &'a LearningSchedule,
    rng: R,
    q: QTable,
    visits: Vec<u64>,
    /// Pairs still below `min_visits`.
    remaining: usize,
    steps: u64,
    episodes: u64,
    pos_in_episode: usize,
    state: usize,
    in_episode: bool,
    trace: QTrace,
    record_every: u64,
    full_snapshots: bool,
    next_snapshot: u64,
}

impl<'a, E: Environment, R: Rng> AgentRunner<'a, E, R> {
    pub fn new(env: &'a E, schedule: &'a LearningSchedule, rng: R, trace: &TraceSpec) -> Result<Self> {
        schedule.validate()?;
        let n = env.n_states();
        let na = env.n_actions();
        for &s in &trace.tracked_states {
            if s >= n {
                return Err(Error::IndexOutOfRange {
                    what: "tracked state",
                    index: s,
                    limit: n,
                });
            }
        }
        let (c_min, _) = env.cost_bounds();
        let init = c_min / (1.0 - env.discount());
        Ok(AgentRunner {
            env,
            schedule,
            rng,
            q: QTable::constant(n, na, init),
            visits: vec![0; n * na],
            remaining: n * na,
            steps: 0,
            episodes: 0,
            pos_in_episode: 0,
            state: 0,
            in_episode: false,
            trace: QTrace::new(trace, na),
            record_every: trace.record_every.max(1),
            full_snapshots: trace.full_snapshots,
            next_snapshot: 1,
        })
    }

    pub fn q(&self) -> &QTable {
        &self.q
    }

    /// Replace the agent's table (ensemble feedback hook).
    pub fn set_q(&mut self, q: QTable) {
        debug_assert_eq!(q.n_states(), self.q.n_states());
        debug_assert_eq!(q.n_actions(), self.q.n_actions());
        self.q = q;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Per-pair visit counts, row-major `|S| x |A|`.
    pub fn visits(&self) -> &[u64] {
        &self.visits
    }

    pub fn coverage_met(&self) -> bool {
        self.remaining == 0
    }

    pub fn is_done(&self) -> bool {
        self.coverage_met() || self.steps >= self.schedule.max_steps
    }

    fn step_once(&mut self) {
        if !self.in_episode || self.pos_in_episode >= self.schedule.trajectory_len {
            self.state = self.rng.gen_range(0..self.env.n_states());
            self.pos_in_episode = 0;
            if self.in_episode {
                self.episodes += 1;
            }
            self.in_episode = true;
        }
        let eps = self.schedule.epsilon_at(self.episodes);
        let a = epsilon_greedy_unchecked(&self.q, self.state, eps, &mut self.rng);
        let (next, cost) = self.env.step(self.state, a, &mut self.rng);
        let slot = self.state * self.env.n_actions() + a;
        self.visits[slot] += 1;
        if self.visits[slot] == self.schedule.min_visits {
            self.remaining -= 1;
        }
        let alpha = self.schedule.alpha_at(self.visits[slot]);
        let target = cost + self.env.discount() * self.q.row_min(next);
        let old = self.q.get(self.state, a);
        let new = if alpha == 1.0 {
            target
        } else {
            old + alpha * (target - old)
        };
        self.q.set(self.state, a, new);
        self.steps += 1;
        self.pos_in_episode += 1;
        self.state = next;

        if !self.trace.tracked_states.is_empty() && self.steps % self.record_every == 0 {
            let (q, visits) = (&self.q, &self.visits);
            self.trace.record(self.steps, q, visits);
        }
        if self.full_snapshots && self.steps == self.next_snapshot {
            self.trace.snapshot_times.push(self.steps);
            self.trace.snapshots.push(self.q.clone());
            self.next_snapshot *= 2;
        }
    }

    /// Advance up to `budget` steps; stops early when done. Returns the
    /// number of steps actually taken.
    pub fn run_steps(&mut self, budget: u64) -> u64 {
        let mut taken = 0;
        while taken < budget && !self.is_done() {
            self.step_once();
            taken += 1;
        }
        taken
    }

    fn coverage_status(&self) -> CoverageStatus {
        let na = self.env.n_actions();
        let deficit: Vec<(usize, usize)> = self
            .visits
            .iter()
            .enumerate()
            .filter(|(_, &v)| v < self.schedule.min_visits)
            .map(|(i, _)| (i / na, i % na))
            .collect();
        CoverageStatus {
            complete: deficit.is_empty(),
            deficit,
        }
    }

    pub fn into_output(mut self) -> TrainOutput {
        self.trace.final_visits = self.visits.clone();
        let coverage = self.coverage_status();
        TrainOutput {
            q: self.q,
            trace: self.trace,
            coverage,
            steps: self.steps,
            episodes: self.episodes,
        }
    }
}

/// Train one agent to termination (min visits reached or budget exhausted).
pub fn train_agent<E: Environment, R: Rng>(
    env: &E,
    schedule: &LearningSchedule,
    rng: R,
    trace: &TraceSpec,
) -> Result<TrainOutput> {
    let mut runner = AgentRunner::new(env, schedule, rng, trace)?;
    while !runner.is_done() {
        runner.run_steps(4096);
    }
    Ok(runner.into_output())
}

/// One Double-Q update on `primary`, evaluating the greedy action with
/// `reference`:
/// `primary(s,a) <- primary(s,a) + alpha * (c + gamma * reference(s', argmin_a' primary(s',.)) - primary(s,a))`.
pub fn double_q_step(
    primary: &mut QTable,
    reference: &QTable,
    sample: (usize, usize, usize, f64),
    alpha: f64,
    gamma: f64,
) {
    let (s, a, next, cost) = sample;
    let greedy = primary.argmin_row(next);
    let target = cost + gamma * reference.get(next, greedy);
    let old = primary.get(s, a);
    let new = if alpha == 1.0 {
        target
    } else {
        old + alpha * (target - old)
    };
    primary.set(s, a, new);
}

/// Double-Q baseline: two tables, a fair coin picks which one to update each
/// step, behavior is epsilon-greedy on their mean. Returns the mean table.
///
/// The learning rate decays with the updated table's own visit count; the
/// min-visit termination still counts joint visits per pair.
pub fn train_double_q<E: Environment, R: Rng>(
    env: &E,
    schedule: &LearningSchedule,
    mut rng: R,
    trace_spec: &TraceSpec,
) -> Result<TrainOutput> {
    schedule.validate()?;
    let n = env.n_states();
    let na = env.n_actions();
    let (c_min, _) = env.cost_bounds();
    let init = c_min / (1.0 - env.discount());
    let mut qa = QTable::constant(n, na, init);
    let mut qb = QTable::constant(n, na, init);
    let mut mean = QTable::constant(n, na, init);
    let mut visits = vec![0u64; n * na];
    let mut table_visits = [vec![0u64; n * na], vec![0u64; n * na]];
    let mut remaining = n * na;
    let mut trace = QTrace::new(trace_spec, na);
    let record_every = trace_spec.record_every.max(1);

    let mut steps = 0u64;
    let mut episodes = 0u64;
    let mut state = 0usize;
    let mut pos = usize::MAX;
    while remaining > 0 && steps < schedule.max_steps {
        if pos >= schedule.trajectory_len {
            if pos != usize::MAX {
                episodes += 1;
            }
            state = rng.gen_range(0..n);
            pos = 0;
        }
        let eps = schedule.epsilon_at(episodes);
        let a = epsilon_greedy_unchecked(&mean, state, eps, &mut rng);
        let (next, cost) = env.step(state, a, &mut rng);
        let slot = state * na + a;
        visits[slot] += 1;
        if visits[slot] == schedule.min_visits {
            remaining -= 1;
        }
        let heads = rng.gen_bool(0.5);
        let counts = &mut table_visits[usize::from(!heads)];
        counts[slot] += 1;
        let alpha = schedule.alpha_at(counts[slot]);
        if heads {
            double_q_step(&mut qa, &qb, (state, a, next, cost), alpha, env.discount());
        } else {
            double_q_step(&mut qb, &qa, (state, a, next, cost), alpha, env.discount());
        }
        mean.set(state, a, 0.5 * (qa.get(state, a) + qb.get(state, a)));
        steps += 1;
        pos += 1;
        state = next;
        if !trace.tracked_states.is_empty() && steps % record_every == 0 {
            trace.record(steps, &mean, &visits);
        }
    }

    trace.final_visits = visits.clone();
    let deficit: Vec<(usize, usize)> = visits
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < schedule.min_visits)
        .map(|(i, _)| (i / na, i % na))
        .collect();
    Ok(TrainOutput {
        q: mean,
        coverage: CoverageStatus {
            complete: deficit.is_empty(),
            deficit,
        },
        trace,
        steps,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{CdfSampler, NhopEnv};
    use crate::mdp::{self, random_mdp, swap_mdp, TabularMdp};
    use crate::seeds;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn q_update_examples() {
        // Q == 0 everywhere, c = 1, alpha = 0.5, gamma = 0.9 -> 0.5
        let mut q = QTable::constant(2, 2, 0.0);
        q_update(&mut q, (0, 0, 1, 1.0), 0.5, 0.9).unwrap();
        assert_eq!(q.get(0, 0), 0.5);
        // other entries untouched
        assert_eq!(q.get(0, 1), 0.0);
        assert_eq!(q.get(1, 0), 0.0);

        // alpha = 1 replaces by the backup exactly
        let mut q = QTable::constant(2, 2, 3.0);
        q_update(&mut q, (0, 1, 1, 1.25), 1.0, 0.5).unwrap();
        assert_eq!(q.get(0, 1), 1.25 + 0.5 * 3.0);

        // fixed point: entry already equals the backup -> unchanged bits
        let mut q = QTable::constant(1, 1, 2.0);
        // backup = 1.0 + 0.5 * 2.0 = 2.0
        q_update(&mut q, (0, 0, 0, 1.0), 0.37, 0.5).unwrap();
        assert_eq!(q.get(0, 0), 2.0);
    }

    #[test]
    fn q_update_validates() {
        let mut q = QTable::constant(2, 2, 1.0);
        assert!(q_update(&mut q, (5, 0, 0, 1.0), 0.5, 0.9).is_err());
        assert!(q_update(&mut q, (0, 0, 0, 1.0), 0.0, 0.9).is_err());
        assert!(q_update(&mut q, (0, 0, 0, 1.0), 1.5, 0.9).is_err());
    }

    #[test]
    fn epsilon_greedy_pure_exploitation() {
        let q = QTable::from_values(1, 2, vec![1.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(epsilon_greedy(&q, 0, 0.0, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn epsilon_greedy_pure_exploration_is_uniform() {
        let q = QTable::from_values(1, 4, vec![1.0, 3.0, 0.5, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[epsilon_greedy(&q, 0, 1.0, &mut rng).unwrap()] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn trains_to_oracle_on_swap_chain() {
        let mdp = swap_mdp();
        let oracle = mdp::value_iteration(&mdp, 1e-10, 10_000).unwrap();
        let schedule = LearningSchedule {
            max_steps: 60_000,
            min_visits: 200,
            ..LearningSchedule::default()
        };
        let out = train_agent(
            &mdp,
            &schedule,
            ChaCha8Rng::seed_from_u64(3),
            &TraceSpec::none(),
        )
        .unwrap();
        assert!(
            out.q.max_abs_diff(&oracle.q) <= 0.05,
            "max error {}",
            out.q.max_abs_diff(&oracle.q)
        );
    }

    #[test]
    fn terminates_at_first_full_sweep_on_deterministic_cycle() {
        // Single action cycling 0 -> 1 -> 2 -> 3 -> 0; v = 1 and l >= |S|
        // means the first sweep covers every pair.
        let n = 4;
        let mut t = vec![0.0; n * n];
        for s in 0..n {
            t[s * n + (s + 1) % n] = 1.0;
        }
        let mdp = TabularMdp::new(n, 1, vec![t], vec![1.0; n], 0.9).unwrap();
        let schedule = LearningSchedule {
            trajectory_len: n,
            min_visits: 1,
            max_steps: 1_000,
            ..LearningSchedule::default()
        };
        let out = train_agent(
            &mdp,
            &schedule,
            ChaCha8Rng::seed_from_u64(5),
            &TraceSpec::none(),
        )
        .unwrap();
        assert!(out.coverage.complete);
        assert_eq!(out.steps, n as u64);
    }

    #[test]
    fn greedy_starvation_raises_incomplete_flag() {
        // Two actions, both self-loops; action 0 costs c_min so the
        // initialized table is its exact fixed point, and pure greedy with
        // lowest-index ties never tries action 1.
        let n = 3;
        let mut t = vec![0.0; n * n];
        for s in 0..n {
            t[s * n + s] = 1.0;
        }
        let mut cost = Vec::new();
        for _ in 0..n {
            cost.extend_from_slice(&[1.0, 2.0]);
        }
        let mdp = TabularMdp::new(n, 2, vec![t.clone(), t], cost, 0.5).unwrap();
        let schedule = LearningSchedule {
            epsilon: EpsilonSchedule::Fixed { value: 0.0 },
            min_visits: 1,
            max_steps: 2_000,
            ..LearningSchedule::default()
        };
        let out = train_agent(
            &mdp,
            &schedule,
            ChaCha8Rng::seed_from_u64(1),
            &TraceSpec::none(),
        )
        .unwrap();
        assert!(!out.coverage.complete);
        assert!(out.coverage.deficit.iter().all(|&(_, a)| a == 1));
        assert_eq!(out.coverage.deficit.len(), n);
    }

    #[test]
    fn positivity_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mdp = random_mdp(6, 2, 0.9, (0.5, 2.0), &mut rng);
        let out = train_agent(
            &mdp,
            &LearningSchedule {
                max_steps: 20_000,
                ..LearningSchedule::default()
            },
            ChaCha8Rng::seed_from_u64(2),
            &TraceSpec::none(),
        )
        .unwrap();
        assert!(out.q.values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn termination_is_exactly_min_visits() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mdp = random_mdp(4, 2, 0.8, (1.0, 2.0), &mut rng);
        let schedule = LearningSchedule {
            min_visits: 3,
            max_steps: 1_000_000,
            epsilon: EpsilonSchedule::Fixed { value: 1.0 },
            ..LearningSchedule::default()
        };
        let out = train_agent(
            &mdp,
            &schedule,
            ChaCha8Rng::seed_from_u64(4),
            &TraceSpec::none(),
        )
        .unwrap();
        assert!(out.coverage.complete);
        let min_visits = out.trace.final_visits.iter().min().copied().unwrap();
        assert_eq!(min_visits, 3);
    }

    #[test]
    fn trace_times_strictly_increase_and_visits_monotone() {
        let mdp = swap_mdp();
        let spec = TraceSpec {
            tracked_states: vec![0, 1],
            record_every: 3,
            full_snapshots: true,
        };
        let out = train_agent(
            &mdp,
            &LearningSchedule {
                max_steps: 5_000,
                min_visits: 100,
                ..LearningSchedule::default()
            },
            ChaCha8Rng::seed_from_u64(9),
            &spec,
        )
        .unwrap();
        let trace = &out.trace;
        assert!(trace.times.windows(2).all(|w| w[0] < w[1]));
        assert!(trace
            .snapshot_times
            .windows(2)
            .all(|w| w[0] < w[1]));
        for pair in 0..trace.tracked_states.len() * trace.n_actions {
            let series: Vec<u64> = (0..trace.len())
                .map(|ti| trace.visit_rows[ti * trace.tracked_states.len() * trace.n_actions + pair])
                .collect();
            assert!(series.windows(2).all(|w| w[0] <= w[1]));
        }
        // CSV header shape
        let csv = trace.to_csv();
        assert!(csv.starts_with("t,s,a,q_value,visits\n"));
    }

    #[test]
    fn double_q_step_updates_primary_from_reference() {
        // "coin always heads": only table A changes, targets come from B.
        let mut qa = QTable::from_values(2, 2, vec![5.0, 1.0, 2.0, 9.0]).unwrap();
        let qb = QTable::from_values(2, 2, vec![4.0, 4.0, 7.0, 3.0]).unwrap();
        let qb_before = qb.clone();
        double_q_step(&mut qa, &qb, (0, 0, 1, 1.0), 0.5, 0.9);
        // greedy action at next=1 under A is argmin(2.0, 9.0) = 0; target
        // evaluates B(1, 0) = 7.0.
        let target = 1.0 + 0.9 * 7.0;
        assert!((qa.get(0, 0) - (5.0 + 0.5 * (target - 5.0))).abs() < 1e-12);
        assert_eq!(qa.get(0, 1), 1.0);
        assert_eq!(qb, qb_before);
    }

    #[test]
    fn double_q_converges_on_deterministic_chain() {
        let mdp = swap_mdp();
        let oracle = mdp::value_iteration(&mdp, 1e-12, 10_000).unwrap();
        let schedule = LearningSchedule {
            alpha: AlphaSchedule::Fixed { value: 1.0 },
            epsilon: EpsilonSchedule::Fixed { value: 1.0 },
            min_visits: 500,
            max_steps: 50_000,
            ..LearningSchedule::default()
        };
        let out = train_double_q(
            &mdp,
            &schedule,
            ChaCha8Rng::seed_from_u64(6),
            &TraceSpec::none(),
        )
        .unwrap();
        assert!(
            out.q.max_abs_diff(&oracle.q) < 1e-6,
            "max error {}",
            out.q.max_abs_diff(&oracle.q)
        );
        let ape =
            mdp::average_policy_error(&out.q.greedy_policy(), &oracle.policy).unwrap();
        assert_eq!(ape, 0.0);
    }

    #[test]
    fn runner_is_resumable_without_drift() {
        let mdp = swap_mdp();
        let schedule = LearningSchedule {
            max_steps: 10_000,
            min_visits: 10_000, // run to budget
            ..LearningSchedule::default()
        };
        let spec = TraceSpec::none();
        let seed = seeds::derive(11, 1);
        let mut chunked =
            AgentRunner::new(&mdp, &schedule, ChaCha8Rng::seed_from_u64(seed), &spec).unwrap();
        while !chunked.is_done() {
            chunked.run_steps(64);
        }
        let solid = train_agent(&mdp, &schedule, ChaCha8Rng::seed_from_u64(seed), &spec).unwrap();
        assert_eq!(chunked.into_output().q, solid.q);
    }

    #[test]
    fn nhop_member_trains_toward_its_own_fixed_point() {
        // Sanity: an order-2 member of the swap chain is the identity chain
        // with costs (2.0, 2.5) and discount 0.25; Q* = c / (1 - 0.25).
        let base = swap_mdp();
        let sampler = CdfSampler::new(&base);
        let env = NhopEnv::new(&base, &sampler, 2);
        let out = train_agent(
            &env,
            &LearningSchedule {
                max_steps: 40_000,
                min_visits: 100,
                ..LearningSchedule::default()
            },
            ChaCha8Rng::seed_from_u64(12),
            &TraceSpec::none(),
        )
        .unwrap();
        assert!((out.q.get(0, 0) - 2.0 / 0.75).abs() < 0.05);
        assert!((out.q.get(1, 0) - 2.5 / 0.75).abs() < 0.05);
    }
}
