//! Full 500-frame odometry runs on the default simulated scenes.

use vokit::evaluation::{evaluate, sign_test_p, MetricReport, TrajectoryPair};
use vokit::pipeline::{run_odometry, KfPolicy, PipelineConfig};
use vokit::scene::{mix_seed, Scene, SceneConfig, TrajectoryKind};

fn line_scene(seed: u64) -> Scene {
    Scene::generate(&SceneConfig {
        trajectory: TrajectoryKind::Line,
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

fn metrics(scene: &Scene, policy: KfPolicy) -> MetricReport {
    let run = run_odometry(scene, &PipelineConfig::with_policy(policy)).unwrap();
    assert!(run
        .estimated
        .iter()
        .all(|p| p.translation.iter().all(|v| v.is_finite())
            && p.rotation.orthogonality_error() < 1e-9));
    evaluate(&TrajectoryPair::new(run.estimated, run.ground_truth).unwrap())
}

#[test]
fn latest_policy_error_bands_on_the_line() {
    let m = metrics(&line_scene(mix_seed(100, 0)), KfPolicy::Latest);
    assert!((0.02..=0.10).contains(&m.rpe_t), "rpe_t {}", m.rpe_t);
    assert!(m.rpe_r < 0.1, "rpe_r {} deg", m.rpe_r);
}

#[test]
fn older_keyframes_raise_relative_error() {
    let trials = 10;
    let mut wins = 0;
    let (mut latest_sum, mut three_sum) = (0.0, 0.0);
    for run in 0..trials {
        let scene = line_scene(mix_seed(200, run));
        let latest = metrics(&scene, KfPolicy::Latest).rpe_t;
        let three = metrics(&scene, KfPolicy::MultiKeyframe(3)).rpe_t;
        latest_sum += latest;
        three_sum += three;
        if three > latest {
            wins += 1;
        }
    }
    let p = sign_test_p(wins, trials as usize);
    assert!(
        p < 0.05,
        "three-keyframe worse in {wins}/{trials} runs, p = {p}"
    );
    assert!(three_sum > latest_sum);
}
