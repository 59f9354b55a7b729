use nalgebra::Vector3;
use omnivcr::par::Exec;
use omnivcr::render::{Renderer, Rig};
use omnivcr::se3::RigidTransform;
use omnivcr::servo::*;

/// Exhaustive search over pure translations on a grid; returns the step
/// with the lowest J_i under `mask`.
fn best_translation(
    renderer: &Renderer,
    rig: &Rig,
    start: &RigidTransform,
    target: &omnivcr::image::FisheyeFrame,
    mask: &omnivcr::image::FrameMask,
) -> Vector3<f64> {
    let mut best = (f64::INFINITY, Vector3::zeros());
    let grid: Vec<f64> = (-6..=6).map(|k| k as f64 * 0.05).collect();
    for &x in &grid {
        for &y in &grid {
            for z in (0..=8).map(|k| k as f64 * 0.05) {
                let step = Vector3::new(x, y, z);
                let pose = start.compose(&RigidTransform::from_translation(x, y, z));
                let frame = renderer.render_masked(&pose, rig, Some(mask), Exec::Sequential);
                let j = cost_ji(&[frame], target, mask).unwrap();
                if j < best.0 {
                    best = (j, step);
                }
            }
        }
    }
    best.1
}

#[test]
fn roi_mask_steers_toward_displaced_object() {
    let cfg = ServoConfig::default();
    let rig = Rig::equidistant(64);
    let scenario = displacement_scenario(3, 0.2);
    let renderer = Renderer::new(scenario.displaced.clone()).unwrap();
    let setup = scenario.setup(&renderer, &rig, &cfg).unwrap();
    let start = RigidTransform::from_translation(0.0, 0.0, -0.2);

    let env = best_translation(&renderer, &rig, &start, &setup.target, &setup.env_mask);
    let obj = best_translation(&renderer, &rig, &start, &setup.target, &setup.obj_mask);
    let angle = env.angle(&obj).to_degrees();
    assert!(angle > 30.0, "env {env:?} obj {obj:?} angle {angle:.1}");

    // The full-image optimum heads back to the original grasp pose, the RoI
    // optimum toward the displaced one.
    let to_original = -start.translation;
    let to_displaced = scenario.displaced_grasp.translation - start.translation;
    assert!(env.angle(&to_original) < env.angle(&to_displaced));
    assert!(obj.angle(&to_displaced) < obj.angle(&to_original));
}

#[test]
fn env_only_trial_is_deterministic_across_exec() {
    let cfg = ServoConfig {
        horizon: 2,
        samples: 6,
        elites: 3,
        iterations: 2,
        time_limit: 2.0,
        ..ServoConfig::default()
    };
    let rig = Rig::equidistant(32);
    let scenario = displacement_scenario(1, 0.2);
    let renderer = Renderer::new(scenario.displaced.clone()).unwrap();
    let setup = scenario.setup(&renderer, &rig, &cfg).unwrap();
    let a = run_trial(&setup, &cfg, TrialMode::Full, 5, Exec::Sequential).unwrap();
    let b = run_trial(&setup, &cfg, TrialMode::Full, 5, Exec::Parallel).unwrap();
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    a.write_trace(&mut ta).unwrap();
    b.write_trace(&mut tb).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a.steps, 4);
}

#[test]
fn running_minimum_never_increases() {
    let cfg = ServoConfig {
        samples: 8,
        elites: 4,
        iterations: 2,
        time_limit: 3.0,
        ..ServoConfig::default()
    };
    let rig = Rig::equidistant(32);
    let scenario = displacement_scenario(2, 0.2);
    let renderer = Renderer::new(scenario.displaced.clone()).unwrap();
    let setup = scenario.setup(&renderer, &rig, &cfg).unwrap();
    let res = run_trial(&setup, &cfg, TrialMode::Env, 9, Exec::Sequential).unwrap();
    for w in res.trace.windows(2) {
        assert!(w[1].best_composed <= w[0].best_composed);
    }
    let last = res.trace.last().unwrap().best_composed;
    assert!(res.composed <= last + 1e-12);
}

#[test]
fn pure_yaw_offset_converges_env_only() {
    let cfg = ServoConfig::default();
    let rig = Rig::equidistant(64).resampled(1);
    let mut rng = omnivcr::rng::stream(20, &[0]);
    let scene = omnivcr::render::SceneSpec::random(&mut rng);
    let start = scene.random_pose(&mut rng, 0.5);
    let target = start.compose(&RigidTransform::rot_z(20f64.to_radians()));
    let renderer = Renderer::new(scene).unwrap();
    let setup = TrialSetup::new(&renderer, &rig, start, target, &cfg).unwrap();
    let res = run_trial(&setup, &cfg, TrialMode::Env, 20, Exec::Parallel).unwrap();
    // Convergence is judged on the final pose; the running-minimum record
    // weights rotation by 0.1 and may stay at the start.
    let (_, e_r, _) = pose_errors(&res.final_pose, &target);
    let closest = res.trace.iter().map(|s| s.e_r).fold(e_r, f64::min);
    assert!(res.steps <= 30);
    assert!(
        e_r < 0.05,
        "final e_r {e_r:.4} rad after {} steps ({:?}); closest {closest:.4} rad",
        res.steps,
        res.outcome
    );
}
