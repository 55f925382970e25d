//! Offline path: trajectory file -> estimated model -> full pipeline.

use rand::Rng;

use ccq_core::mdp::{self, average_policy_error, random_mdp, value_iteration};
use ccq_core::ordering::{ccq_from_estimate, CcqParams};
use ccq_core::qlearning::LearningSchedule;
use ccq_core::seeds;
use ccq_core::synthesis::{estimate_model, load_trajectories};

#[test]
fn estimated_model_from_trajectory_file_recovers_the_policy() {
    let mut rng = seeds::rng(41, 0);
    // Insist on a well-separated optimal policy so that a model within the
    // estimation tolerance shares it.
    let (truth, vi) = loop {
        let candidate = random_mdp(6, 2, 0.8, (0.5, 2.0), &mut rng);
        let vi = value_iteration(&candidate, 1e-9, 100_000).unwrap();
        let min_gap = (0..6)
            .map(|s| (vi.q.get(s, 0) - vi.q.get(s, 1)).abs())
            .fold(f64::INFINITY, f64::min);
        if min_gap >= 0.15 {
            break (candidate, vi);
        }
    };

    // Collect exploratory trajectories and write them as (s, a, s', c) records.
    let mut lines = String::new();
    let mut state = 0usize;
    for step in 0..120_000 {
        if step % 40 == 0 {
            state = rng.gen_range(0..6);
        }
        let action = rng.gen_range(0..2);
        let (next, cost) = mdp::step(&truth, state, action, &mut rng).unwrap();
        lines.push_str(&format!("{state} {action} {next} {cost}\n"));
        state = next;
    }
    let dir = std::env::temp_dir().join(format!("ccq-traj-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("explore.txt");
    std::fs::write(&path, lines).unwrap();

    let samples = load_trajectories(&path).unwrap();
    let estimate = estimate_model(&samples, 6, 2, 0.0).unwrap();
    assert!(estimate.unvisited_pairs().is_empty());

    // estimated transitions are close to the truth
    let mut worst = 0.0f64;
    for a in 0..2 {
        for s in 0..6 {
            for next in 0..6 {
                worst = worst.max((estimate.p_hat[a][s * 6 + next] - truth.prob(s, a, next)).abs());
            }
        }
    }
    assert!(worst < 0.02, "estimation error {worst}");

    let schedule = LearningSchedule {
        max_steps: 30_000,
        min_visits: 50,
        ..LearningSchedule::default()
    };
    let params = CcqParams {
        compute_bounds: false,
        ..CcqParams::new(2, 4, 0.5, 5)
    };
    let out = ccq_from_estimate(&estimate, truth.discount(), &schedule, &params).unwrap();
    let ape = average_policy_error(&out.policy, &vi.policy).unwrap();
    assert_eq!(ape, 0.0, "pipeline on the estimated model misses the policy");

    std::fs::remove_dir_all(&dir).ok();
}
