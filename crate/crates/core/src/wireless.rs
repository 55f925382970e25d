//! Wireless-network MDP generators.
//!
//! Two experiment families, both with `|A| = 2` (0 = idle, 1 = transmit) and
//! strictly positive bounded costs:
//!
//! **MISO energy-harvesting network with relays.** State = (battery level,
//! buffer level, one occupancy level per relay). Per step: a feasible
//! transmit (battery >= 1, buffer >= 1) consumes one energy unit and moves one
//! packet to a uniformly chosen relay; every loaded relay forwards one packet
//! (departure-first, so the drain happens before the new packet lands); an
//! energy packet arrives with probability `energy_arrival_prob`; a data
//! packet arrives with probability `data_arrival_prob`. Levels saturate at
//! their capacity. A data arrival into a full buffer is dropped; the drop is
//! charged as `overflow_penalty * data_arrival_prob` on the states where it
//! can occur, which keeps the cost a deterministic function of `(s, a)`.
//!
//! **MIMO network.** State = (queue level, one channel state per antenna).
//! Channels evolve as independent Markov chains whose rows concentrate around
//! the current state with strength `channel_transition_skew` (skew 0 gives
//! uniform rows). A transmit succeeds with probability
//! `(1 + best channel) / channel_states` and then removes one packet; a data
//! packet then arrives with probability `arrival_prob`. Idle pays holding
//! cost on the backlog including the incoming packet; transmit pays the
//! transmit cost plus holding on the current backlog. Note that the realized
//! c_max/c_min therefore grows with `queue_levels`; the energy-harvesting
//! family is the one to reach for when an experiment needs a narrow cost
//! range.
//!
//! State indices use a mixed-radix encoding ([`MixedRadix`]): the digit list
//! is written most-significant first and the last digit varies fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Default cap on generated state counts; exact solvers stay tractable below it.
pub const DEFAULT_STATE_CAP: usize = 4000;

/// Mixed-radix index codec for factored state spaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedRadix {
    radices: Vec<usize>,
}

impl MixedRadix {
    pub fn new(radices: Vec<usize>) -> Result<Self> {
        if radices.is_empty() {
            return Err(Error::EmptyInput { what: "radices" });
        }
        if radices.iter().any(|&r| r == 0) {
            return Err(Error::invalid("radices", "every radix must be >= 1"));
        }
        Ok(MixedRadix { radices })
    }

    pub fn size(&self) -> usize {
        self.radices.iter().product()
    }

    pub fn radices(&self) -> &[usize] {
        &self.radices
    }

    /// Digits (most-significant first) -> index.
    pub fn encode(&self, digits: &[usize]) -> usize {
        debug_assert_eq!(digits.len(), self.radices.len());
        let mut idx = 0;
        for (d, r) in digits.iter().zip(&self.radices) {
            debug_assert!(d < r);
            idx = idx * r + d;
        }
        idx
    }

    /// Index -> digits (most-significant first).
    pub fn decode(&self, mut idx: usize) -> Vec<usize> {
        let mut digits = vec![0; self.radices.len()];
        for (slot, &r) in digits.iter_mut().zip(&self.radices).rev() {
            *slot = idx % r;
            idx /= r;
        }
        digits
    }
}

/// Parameters of the MISO energy-harvesting family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MisoParams {
    pub battery_levels: usize,
    pub buffer_levels: usize,
    pub relay_count: usize,
    pub relay_levels: usize,
    pub energy_arrival_prob: f64,
    pub data_arrival_prob: f64,
    pub transmit_cost: f64,
    pub idle_cost: f64,
    pub overflow_penalty: f64,
    pub discount: f64,
    pub state_cap: usize,
}

impl Default for MisoParams {
    fn default() -> Self {
        MisoParams {
            battery_levels: 4,
            buffer_levels: 5,
            relay_count: 2,
            relay_levels: 3,
            energy_arrival_prob: 0.6,
            data_arrival_prob: 0.5,
            transmit_cost: 2.0,
            idle_cost: 0.5,
            overflow_penalty: 10.0,
            discount: 0.95,
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

impl MisoParams {
    pub fn codec(&self) -> Result<MixedRadix> {
        let mut radices = vec![self.battery_levels, self.buffer_levels];
        radices.extend(std::iter::repeat(self.relay_levels).take(self.relay_count));
        MixedRadix::new(radices)
    }

    /// `battery_levels * buffer_levels * relay_levels^relay_count`.
    pub fn n_states(&self) -> Result<usize> {
        Ok(self.codec()?.size())
    }

    fn validate(&self) -> Result<()> {
        check_prob("energy_arrival_prob", self.energy_arrival_prob)?;
        check_prob("data_arrival_prob", self.data_arrival_prob)?;
        check_positive("transmit_cost", self.transmit_cost)?;
        check_positive("idle_cost", self.idle_cost)?;
        check_positive("overflow_penalty", self.overflow_penalty)?;
        check_discount(self.discount)?;
        if self.battery_levels < 2 {
            return Err(Error::invalid("battery_levels", "need at least 2 levels"));
        }
        if self.buffer_levels < 2 {
            return Err(Error::invalid("buffer_levels", "need at least 2 levels"));
        }
        if self.relay_count > 0 && self.relay_levels < 2 {
            return Err(Error::invalid("relay_levels", "need at least 2 levels"));
        }
        Ok(())
    }
}

/// Parameters of the MIMO family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MimoParams {
    pub queue_levels: usize,
    pub antenna_count: usize,
    pub channel_states: usize,
    pub channel_transition_skew: f64,
    pub arrival_prob: f64,
    pub transmit_cost: f64,
    pub holding_cost: f64,
    pub discount: f64,
    pub state_cap: usize,
}

impl Default for MimoParams {
    fn default() -> Self {
        MimoParams {
            queue_levels: 10,
            antenna_count: 2,
            channel_states: 3,
            channel_transition_skew: 1.0,
            arrival_prob: 0.5,
            transmit_cost: 1.5,
            holding_cost: 0.4,
            discount: 0.95,
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

impl MimoParams {
    pub fn codec(&self) -> Result<MixedRadix> {
        let mut radices = vec![self.queue_levels];
        radices.extend(std::iter::repeat(self.channel_states).take(self.antenna_count));
        MixedRadix::new(radices)
    }

    /// `queue_levels * channel_states^antenna_count`.
    pub fn n_states(&self) -> Result<usize> {
        Ok(self.codec()?.size())
    }

    fn validate(&self) -> Result<()> {
        check_prob("arrival_prob", self.arrival_prob)?;
        if self.channel_transition_skew < 0.0 {
            return Err(Error::invalid(
                "channel_transition_skew",
                "must be nonnegative",
            ));
        }
        check_positive("transmit_cost", self.transmit_cost)?;
        check_positive("holding_cost", self.holding_cost)?;
        check_discount(self.discount)?;
        if self.queue_levels < 2 {
            return Err(Error::invalid("queue_levels", "need at least 2 levels"));
        }
        if self.antenna_count == 0 {
            return Err(Error::invalid("antenna_count", "need at least 1 antenna"));
        }
        if self.channel_states == 0 {
            return Err(Error::invalid("channel_states", "need at least 1 state"));
        }
        Ok(())
    }
}

fn check_prob(name: &'static str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::invalid(name, format!("{p} is not in [0, 1]")));
    }
    Ok(())
}

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::invalid(name, format!("{v} must be positive")));
    }
    Ok(())
}

fn check_discount(g: f64) -> Result<()> {
    if !(g > 0.0 && g < 1.0) {
        return Err(Error::invalid(
            "discount",
            format!("{g} is not strictly inside (0, 1)"),
        ));
    }
    Ok(())
}

fn check_cap(states: usize, cap: usize) -> Result<()> {
    if states > cap {
        return Err(Error::StateCapExceeded { states, cap });
    }
    Ok(())
}

/// Build the MISO energy-harvesting MDP.
pub fn build_miso(params: &MisoParams) -> Result<TabularMdp> {
    params.validate()?;
    let codec = params.codec()?;
    let n = codec.size();
    check_cap(n, params.state_cap)?;

    let n_actions = 2;
    let buf_cap = params.buffer_levels - 1;
    let bat_cap = params.battery_levels - 1;
    let relay_cap = params.relay_levels.saturating_sub(1);
    let mut transition = vec![vec![0.0; n * n]; n_actions];
    let mut cost = vec![0.0; n * n_actions];

    for s in 0..n {
        let digits = codec.decode(s);
        let (battery, buffer) = (digits[0], digits[1]);
        let relays = &digits[2..];
        for a in 0..n_actions {
            let feasible = a == 1 && battery >= 1 && buffer >= 1;

            // Deterministic cost of (s, a). An arrival into a buffer that is
            // still full after service is dropped; charge its expectation.
            let buffer_after_service = if feasible { buffer - 1 } else { buffer };
            let base = if feasible {
                params.transmit_cost
            } else {
                params.idle_cost
            };
            let overflow = if buffer_after_service == buf_cap {
                params.overflow_penalty * params.data_arrival_prob
            } else {
                0.0
            };
            cost[s * n_actions + a] = base + overflow;

            // Successor distribution: product over the independent events
            // (relay routing if transmitting, energy arrival, data arrival).
            let routing: Vec<(usize, f64)> = if feasible && !relays.is_empty() {
                (0..relays.len())
                    .map(|j| (j, 1.0 / relays.len() as f64))
                    .collect()
            } else {
                vec![(usize::MAX, 1.0)] // no packet routed
            };
            let row = &mut transition[a][s * n..(s + 1) * n];
            for &(route, p_route) in &routing {
                // Relay drain happens first, then the routed packet lands.
                let mut next_relays: Vec<usize> =
                    relays.iter().map(|&r| r.saturating_sub(1)).collect();
                if route != usize::MAX {
                    next_relays[route] = (next_relays[route] + 1).min(relay_cap);
                }
                let battery_spent = if feasible { battery - 1 } else { battery };
                for (energy_arrives, p_e) in bernoulli(params.energy_arrival_prob) {
                    let next_battery = if energy_arrives {
                        (battery_spent + 1).min(bat_cap)
                    } else {
                        battery_spent
                    };
                    for (data_arrives, p_d) in bernoulli(params.data_arrival_prob) {
                        let next_buffer = if data_arrives {
                            (buffer_after_service + 1).min(buf_cap)
                        } else {
                            buffer_after_service
                        };
                        let p = p_route * p_e * p_d;
                        if p > 0.0 {
                            let mut next_digits = vec![next_battery, next_buffer];
                            next_digits.extend_from_slice(&next_relays);
                            row[codec.encode(&next_digits)] += p;
                        }
                    }
                }
            }
        }
    }

    TabularMdp::new(n, n_actions, transition, cost, params.discount)
}

/// Build the MIMO MDP.
pub fn build_mimo(params: &MimoParams) -> Result<TabularMdp> {
    params.validate()?;
    let codec = params.codec()?;
    let n = codec.size();
    check_cap(n, params.state_cap)?;

    let n_actions = 2;
    let queue_cap = params.queue_levels - 1;
    let chan = channel_chain(params.channel_states, params.channel_transition_skew);
    let mut transition = vec![vec![0.0; n * n]; n_actions];
    let mut cost = vec![0.0; n * n_actions];

    // Enumerate joint channel successors once per joint channel state.
    let n_chan_joint = params.channel_states.pow(params.antenna_count as u32);
    let chan_codec = MixedRadix::new(vec![params.channel_states; params.antenna_count])?;
    let mut chan_next: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n_chan_joint);
    for joint in 0..n_chan_joint {
        let cur = chan_codec.decode(joint);
        let mut outs: Vec<(usize, f64)> = vec![(0, 1.0)];
        for &h in &cur {
            let mut grown = Vec::with_capacity(outs.len() * params.channel_states);
            for &(idx, p) in &outs {
                for (h2, &ph) in chan[h].iter().enumerate() {
                    if ph > 0.0 {
                        grown.push((idx * params.channel_states + h2, p * ph));
                    }
                }
            }
            outs = grown;
        }
        chan_next.push(outs);
    }

    for s in 0..n {
        let digits = codec.decode(s);
        let queue = digits[0];
        let channels = &digits[1..];
        let best = channels.iter().copied().max().unwrap_or(0);
        let joint = chan_codec.encode(channels);
        for a in 0..n_actions {
            cost[s * n_actions + a] = if a == 1 {
                params.transmit_cost + params.holding_cost * queue as f64
            } else {
                params.holding_cost * (queue + 1) as f64
            };

            let p_success = if a == 1 && queue >= 1 {
                (1.0 + best as f64) / params.channel_states as f64
            } else {
                0.0
            };
            let row = &mut transition[a][s * n..(s + 1) * n];
            for (departs, p_dep) in bernoulli(p_success) {
                let after_service = if departs { queue - 1 } else { queue };
                for (arrives, p_arr) in bernoulli(params.arrival_prob) {
                    let next_queue = if arrives {
                        (after_service + 1).min(queue_cap)
                    } else {
                        after_service
                    };
                    let p_q = p_dep * p_arr;
                    if p_q > 0.0 {
                        for &(next_joint, p_c) in &chan_next[joint] {
                            let next = next_queue * n_chan_joint + next_joint;
                            row[next] += p_q * p_c;
                        }
                    }
                }
            }
        }
    }

    TabularMdp::new(n, n_actions, transition, cost, params.discount)
}

/// Per-antenna channel transition matrix. Row `i` has weights
/// `exp(-skew * |i - j|)`, normalized; skew 0 gives uniform rows.
fn channel_chain(states: usize, skew: f64) -> Vec<Vec<f64>> {
    (0..states)
        .map(|i| {
            let mut row: Vec<f64> = (0..states)
                .map(|j| (-skew * (i as f64 - j as f64).abs()).exp())
                .collect();
            let sum: f64 = row.iter().sum();
            for v in &mut row {
                *v /= sum;
            }
            row
        })
        .collect()
}

fn bernoulli(p: f64) -> Vec<(bool, f64)> {
    let mut outcomes = Vec::with_capacity(2);
    if p < 1.0 {
        outcomes.push((false, 1.0 - p));
    }
    if p > 0.0 {
        outcomes.push((true, p));
    }
    outcomes
}
