//! Statistical properties of the ensemble coupling.

use ccq_core::ensemble::{feedback, fuse, UpdateRatio};
use ccq_core::env::{CdfSampler, NhopEnv};
use ccq_core::mdp::random_mdp;
use ccq_core::qlearning::{AgentRunner, LearningSchedule, TraceSpec};
use ccq_core::seeds;

/// With an update ratio driven toward 1, the feedback blend contracts the
/// member tables toward the fused estimate, so the max pairwise sup-distance
/// between member tables shrinks (in expectation) over fusion rounds.
#[test]
fn coupling_contracts_member_spread_as_u_approaches_one() {
    let mut gen_rng = seeds::rng(91, 0);
    let base = random_mdp(4, 2, 0.9, (0.5, 2.0), &mut gen_rng);
    let members = [1usize, 2, 3];
    let update_ratio = UpdateRatio::Approaching {
        start: 0.3,
        rate: 0.95,
    };
    let schedule = LearningSchedule {
        max_steps: 3_200,
        min_visits: 1_000_000, // run to budget
        ..LearningSchedule::default()
    };
    let fusion_period = 32;
    let rounds = (schedule.max_steps / fusion_period) as usize;
    let n_seeds = 24;

    let mut mean_spread = vec![0.0f64; rounds];
    for seed in 0..n_seeds {
        let sampler = CdfSampler::new(&base);
        let mut runners: Vec<_> = members
            .iter()
            .map(|&order| {
                let env = NhopEnv::new(&base, &sampler, order);
                // leak the env reference into a runner-local scope
                (order, env)
            })
            .collect();
        let mut agents: Vec<_> = runners
            .iter_mut()
            .map(|(order, env)| {
                AgentRunner::new(env, &schedule, seeds::rng(seed, *order as u64), &TraceSpec::none())
                    .unwrap()
            })
            .collect();
        let weights = vec![1.0 / members.len() as f64; members.len()];
        for round in 0..rounds {
            for agent in agents.iter_mut() {
                agent.run_steps(fusion_period);
            }
            let tables: Vec<_> = agents.iter().map(|a| a.q()).collect();
            let fused = fuse(&tables, &weights).unwrap();
            let u = update_ratio.value(round as u64);
            for agent in agents.iter_mut() {
                let blended = feedback(agent.q(), &fused, u).unwrap();
                agent.set_q(blended);
            }
            let mut spread = 0.0f64;
            for i in 0..agents.len() {
                for j in (i + 1)..agents.len() {
                    spread = spread.max(agents[i].q().max_abs_diff(agents[j].q()));
                }
            }
            mean_spread[round] += spread / n_seeds as f64;
        }
    }

    let quarter = rounds / 4;
    let early: f64 = mean_spread[..quarter].iter().sum::<f64>() / quarter as f64;
    let late: f64 = mean_spread[rounds - quarter..].iter().sum::<f64>() / quarter as f64;
    assert!(
        late < early,
        "member spread did not contract: early {early:.4}, late {late:.4}"
    );
}
