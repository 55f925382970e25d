//! Environment views for trajectory sampling.
//!
//! Training never needs the materialized matrix power of an n-hop member: one
//! order-n step is exactly n consecutive base-chain steps under the same
//! action, and the realized discounted cost accumulated along those steps is
//! an unbiased sample of the member's aggregated cost. [`NhopEnv`] implements
//! that view on top of a sparse CDF sampler over the base chain, so a whole
//! family shares one sampler and no `|S|^2` power is ever formed at training
//! time. For order 1 the view consumes randomness exactly like
//! [`crate::mdp::step`].

use rand::Rng;

use crate::mdp::TabularMdp;

/// Anything an agent can learn on: finite states/actions, a discount, a cost
/// range, and a sampling step.
pub trait Environment {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn discount(&self) -> f64;
    /// (c_min, c_max) of the per-step cost.
    fn cost_bounds(&self) -> (f64, f64);
    /// Environment order (number of base transitions consumed per step).
    fn order(&self) -> usize {
        1
    }
    fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> (usize, f64);
}

impl Environment for TabularMdp {
    fn n_states(&self) -> usize {
        self.n_states()
    }

    fn n_actions(&self) -> usize {
        self.n_actions()
    }

    fn discount(&self) -> f64 {
        self.discount()
    }

    fn cost_bounds(&self) -> (f64, f64) {
        self.cost_bounds()
    }

    fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> (usize, f64) {
        crate::mdp::step(self, s, a, rng).expect("indices in range")
    }
}

/// Sparse cumulative-probability sampler over a base chain.
///
/// Stores, per `(s, a)`, the running CDF over the nonzero successors only.
/// The uniform-draw-to-successor mapping is identical to the dense linear
/// walk in [`crate::mdp::step`] (zero entries contribute nothing to either).
#[derive(Debug, Clone)]
pub struct CdfSampler {
    n_states: usize,
    n_actions: usize,
    /// Offsets into `entries`, one slot per (s, a) plus a terminator.
    offsets: Vec<usize>,
    /// (cumulative probability, successor) pairs.
    entries: Vec<(f64, u32)>,
}

impl CdfSampler {
    pub fn new(mdp: &TabularMdp) -> Self {
        let n = mdp.n_states();
        let na = mdp.n_actions();
        let mut offsets = Vec::with_capacity(n * na + 1);
        let mut entries = Vec::new();
        for s in 0..n {
            for a in 0..na {
                offsets.push(entries.len());
                let mut acc = 0.0;
                for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    if p > 0.0 {
                        acc += p;
                        entries.push((acc, next as u32));
                    }
                }
            }
        }
        offsets.push(entries.len());
        CdfSampler {
            n_states: n,
            n_actions: na,
            offsets,
            entries,
        }
    }

    /// Map a uniform draw `u` in [0, 1) to a successor of `(s, a)`.
    pub fn sample(&self, s: usize, a: usize, u: f64) -> usize {
        let slot = s * self.n_actions + a;
        let entries = &self.entries[self.offsets[slot]..self.offsets[slot + 1]];
        debug_assert!(!entries.is_empty());
        // First entry whose cumulative probability exceeds u; rounding slack
        // past the final entry falls back to the last successor.
        let idx = entries.partition_point(|&(cum, _)| u >= cum);
        let idx = idx.min(entries.len() - 1);
        entries[idx].1 as usize
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
}

/// Sampling view of the order-n environment over a shared base sampler.
#[derive(Debug, Clone)]
pub struct NhopEnv<'a> {
    base: &'a TabularMdp,
    sampler: &'a CdfSampler,
    order: usize,
    cost_bounds: (f64, f64),
    discount: f64,
}

impl<'a> NhopEnv<'a> {
    pub fn new(base: &'a TabularMdp, sampler: &'a CdfSampler, order: usize) -> Self {
        assert!(order >= 1, "environment order must be >= 1");
        let gamma = base.discount();
        // Geometric sum (1 - gamma^n) / (1 - gamma) scales the cost range.
        let scale = (1.0 - gamma.powi(order as i32)) / (1.0 - gamma);
        let (lo, hi) = base.cost_bounds();
        NhopEnv {
            base,
            sampler,
            order,
            cost_bounds: (lo * scale, hi * scale),
            discount: gamma.powi(order as i32),
        }
    }

    pub fn base(&self) -> &TabularMdp {
        self.base
    }
}

impl Environment for NhopEnv<'_> {
    fn n_states(&self) -> usize {
        self.base.n_states()
    }

    fn n_actions(&self) -> usize {
        self.base.n_actions()
    }

    fn discount(&self) -> f64 {
        self.discount
    }

    fn cost_bounds(&self) -> (f64, f64) {
        self.cost_bounds
    }

    fn order(&self) -> usize {
        self.order
    }

    fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> (usize, f64) {
        let mut cur = s;
        let mut cost = 0.0;
        let mut g = 1.0;
        for _ in 0..self.order {
            cost += g * self.base.cost(cur, a);
            g *= self.base.discount();
            cur = self.sampler.sample(cur, a, rng.gen::<f64>());
        }
        (cur, cost)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_mdp, swap_mdp};
    use crate::synthesis::build_nhop;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn order_one_matches_mdp_step_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = random_mdp(9, 2, 0.9, (0.5, 2.0), &mut rng);
        let sampler = CdfSampler::new(&mdp);
        let env = NhopEnv::new(&mdp, &sampler, 1);
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        for s in 0..9 {
            for a in 0..2 {
                let (n1, c1) = env.step(s, a, &mut r1);
                let (n2, c2) = crate::mdp::step(&mdp, s, a, &mut r2).unwrap();
                assert_eq!(n1, n2);
                assert_eq!(c1, c2);
            }
        }
    }

    #[test]
    fn sampled_transitions_match_matrix_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_mdp(5, 2, 0.9, (0.5, 2.0), &mut rng);
        let sampler = CdfSampler::new(&base);
        for order in [2usize, 3] {
            let env = NhopEnv::new(&base, &sampler, order);
            let materialized = build_nhop(&base, order).unwrap();
            let mut draw_rng = ChaCha8Rng::seed_from_u64(1000 + order as u64);
            let trials = 60_000;
            let mut counts = vec![0usize; 5];
            let mut mean_cost = 0.0;
            for _ in 0..trials {
                let (next, cost) = env.step(2, 1, &mut draw_rng);
                counts[next] += 1;
                mean_cost += cost;
            }
            mean_cost /= trials as f64;
            for next in 0..5 {
                let freq = counts[next] as f64 / trials as f64;
                let expect = materialized.prob(2, 1, next);
                assert!(
                    (freq - expect).abs() < 0.01,
                    "order {order}: successor {next} freq {freq} vs {expect}"
                );
            }
            let expect_cost = materialized.cost(2, 1);
            assert!(
                (mean_cost - expect_cost).abs() < 0.02,
                "order {order}: mean sampled cost {mean_cost} vs aggregated {expect_cost}"
            );
        }
    }

    #[test]
    fn swap_chain_two_hop_is_deterministic() {
        let base = swap_mdp();
        let sampler = CdfSampler::new(&base);
        let env = NhopEnv::new(&base, &sampler, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in 0..2 {
            let (next, cost) = env.step(s, 0, &mut rng);
            assert_eq!(next, s, "two swaps return home");
            let expect = if s == 0 { 1.0 + 0.5 * 2.0 } else { 2.0 + 0.5 * 1.0 };
            assert!((cost - expect).abs() < 1e-12);
        }
        assert!((env.discount() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cost_bounds_scale_geometrically() {
        let base = swap_mdp();
        let sampler = CdfSampler::new(&base);
        let env = NhopEnv::new(&base, &sampler, 3);
        let scale = (1.0 - 0.5f64.powi(3)) / (1.0 - 0.5);
        let (lo, hi) = Environment::cost_bounds(&env);
        assert!((lo - 1.0 * scale).abs() < 1e-12);
        assert!((hi - 2.0 * scale).abs() < 1e-12);
    }
}
