use capture_core::control::*;
use capture_core::env::*;
use capture_core::robot::*;
use capture_core::se3::*;
use nalgebra::{Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn env(task: Task, cap: usize) -> Env {
    let model = Arc::new(ManipulatorModel::kuka_iiwa_like());
    let sing = SingularityConfig::for_model(&model, 50.0, 10.0).unwrap();
    let mut cfg = EnvConfig::for_task(task, sing.lambda_lim);
    cfg.episode_cap = cap;
    let ctrl = TrackingController::new(ControllerGains::shipped(), sing, ControllerSettings::default());
    Env::new(task, cfg, model, ctrl).unwrap()
}

/// Body-frame twist along the straight line to the target.
fn toward_target(state: &StateVector, gain: f64) -> Twist {
    let f = unpack_capture(&state.s_c, 7).unwrap();
    let r = Rotation::from_euler_zyx(&f.ee.euler);
    let d = f.target.position - f.ee.position;
    Twist::new(r.transpose().apply(&(d * gain)), Vector3::zeros())
}

fn random_action(rng: &mut ChaCha8Rng) -> Twist {
    Twist::from_slice(&(0..6).map(|_| rng.random_range(-0.1..0.1)).collect::<Vec<_>>())
}

#[test]
fn reset_and_rollout_are_deterministic() {
    for task in [Task::Tracking, Task::Avoidance] {
        let mut a = env(task, 30);
        let mut b = env(task, 30);
        for seed in [0, 7, 123_456] {
            assert_eq!(a.reset(seed).unwrap(), b.reset(seed).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loop {
                let act = random_action(&mut rng);
                let (oa, ob) = (a.step(&act).unwrap(), b.step(&act).unwrap());
                assert_eq!(oa, ob);
                if oa.done() {
                    break;
                }
            }
        }
        // a different seed gives a different scene
        assert_ne!(a.reset(1).unwrap(), a.reset(2).unwrap());
    }
}

#[test]
fn resets_start_dexterous_with_reachable_target() {
    for task in [Task::Tracking, Task::Avoidance] {
        let mut e = env(task, 10);
        let lim = e.lambda_lim();
        let [lo, hi] = e.config().target_distance;
        for seed in 0..1000 {
            let s = e.reset(seed).unwrap();
            assert!(s.is_finite());
            let arm = e.arm().unwrap();
            let snap = arm.snapshot().unwrap();
            assert!(manipulability(&snap.jacobians.j_ee) > lim, "seed {seed}");
            let f = unpack_capture(&s.s_c, 7).unwrap();
            let d = (f.target.position - f.ee.position).norm();
            assert!((lo..=hi).contains(&d), "seed {seed}: distance {d}");
            assert!(f.phi_dot.iter().all(|x| *x == 0.0));
            match task {
                Task::Tracking => {
                    assert!(s.s_o.is_empty());
                    assert!((f.target.velocity.norm() - 0.02).abs() < 1e-12);
                }
                Task::Avoidance => {
                    assert_eq!(s.s_o.len(), e.obstacle_dim());
                    assert_eq!(s.s_o.len(), 165);
                    assert_eq!(f.target.velocity, Vector3::zeros());
                    // box center sits on the chord between end effector and target
                    let ob = e.obstacle().unwrap();
                    let chord = f.target.position - f.ee.position;
                    let t = (ob.center() - f.ee.position).dot(&chord) / chord.norm_squared();
                    let off = (ob.center() - f.ee.position - chord * t).norm();
                    assert!((0.4 - 1e-9..=0.7 + 1e-9).contains(&t) && off < 1e-9);
                    assert!(box_distance(ob, &f.target.position) >= e.config().capture_radius);
                }
            }
        }
    }
}

#[test]
fn zero_action_holds_the_end_effector() {
    let mut e = env(Task::Avoidance, 50);
    for seed in 0..5 {
        let mut prev = unpack_capture(&e.reset(seed).unwrap().s_c, 7).unwrap();
        let mut prev_rc: Option<f64> = None;
        for _ in 0..20 {
            let out = e.step(&Twist::zero()).unwrap();
            let f = unpack_capture(&out.next_state.s_c, 7).unwrap();
            assert!((f.ee.position - prev.ee.position).norm() < 1e-6, "seed {seed}");
            assert!((f.ee.euler - prev.ee.euler).norm() < 1e-6, "seed {seed}");
            if let Some(rc) = prev_rc {
                assert!((out.r_c - rc).abs() < 1e-6);
            }
            prev_rc = Some(out.r_c);
            assert!(!out.done());
            prev = f;
        }
    }
}

#[test]
fn straight_line_twist_closes_distance() {
    let mut e = env(Task::Tracking, 400);
    for seed in 0..50 {
        let mut s = e.reset(seed).unwrap();
        for _ in 0..5 {
            let f = unpack_capture(&s.s_c, 7).unwrap();
            let before = (f.target.position - f.ee.position).norm();
            let out = e.step(&toward_target(&s, 1.0)).unwrap();
            let f = unpack_capture(&out.next_state.s_c, 7).unwrap();
            let after = (f.target.position - f.ee.position).norm();
            assert!(after < before, "seed {seed}: {before} -> {after}");
            s = out.next_state;
        }
    }
}

#[test]
fn momentum_stays_zero_under_random_actions() {
    let mut e = env(Task::Tracking, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..5 {
        e.reset(seed).unwrap();
        loop {
            let out = e.step(&random_action(&mut rng)).unwrap();
            assert!(out.diagnostics.momentum_residual < 1e-9);
            if out.done() {
                break;
            }
        }
    }
}

#[test]
fn termination_rules() {
    // first task: capture keeps the episode running until the cap
    let mut e = env(Task::Tracking, 150);
    let mut saw_capture = false;
    for seed in 0..10 {
        let mut s = e.reset(seed).unwrap();
        loop {
            let out = e.step(&toward_target(&s, 2.0)).unwrap();
            saw_capture |= out.captured;
            if out.captured {
                assert!(!out.terminal);
            }
            let done = out.done();
            if done {
                assert!(out.truncated && !out.terminal);
                assert_eq!(e.steps(), 150);
                break;
            }
            s = out.next_state;
        }
        assert!(matches!(e.step(&Twist::zero()), Err(EnvError::NotRunning)));
    }
    assert!(saw_capture);

    // second task: capture and collision both end the episode
    let mut e = env(Task::Avoidance, 150);
    let (mut captures, mut collisions) = (0, 0);
    for seed in 0..30 {
        let mut s = e.reset(seed).unwrap();
        loop {
            let out = e.step(&toward_target(&s, 2.0)).unwrap();
            if out.collided || out.captured {
                assert!(out.terminal && !out.truncated);
            }
            if out.collided {
                assert!(out.diagnostics.min_obstacle_distance.unwrap() <= e.config().rewards.k_o5);
                assert!(out.r_o <= -e.config().rewards.k_o4);
            }
            captures += (out.captured && !out.collided) as usize;
            collisions += out.collided as usize;
            if out.done() {
                break;
            }
            s = out.next_state;
        }
    }
    assert!(captures > 0 && collisions > 0, "captures {captures}, collisions {collisions}");
}

#[test]
fn step_before_reset_fails() {
    let mut e = env(Task::Tracking, 10);
    assert!(matches!(e.step(&Twist::zero()), Err(EnvError::NotRunning)));
}

#[test]
fn oversized_actions_are_clipped() {
    let mut a = env(Task::Tracking, 10);
    let mut b = env(Task::Tracking, 10);
    a.reset(3).unwrap();
    b.reset(3).unwrap();
    let big = Twist::new(Vector3::new(5.0, -5.0, 0.05), Vector3::new(0.0, 9.0, -9.0));
    let clipped = Twist::new(Vector3::new(0.1, -0.1, 0.05), Vector3::new(0.0, 0.1, -0.1));
    let oa = a.step(&big).unwrap();
    let ob = b.step(&clipped).unwrap();
    assert!(oa.diagnostics.action_clipped && !ob.diagnostics.action_clipped);
    assert_eq!(oa.next_state, ob.next_state);
}

#[test]
fn step_log_lines_parse() {
    let mut e = env(Task::Avoidance, 5);
    let s = e.reset(11).unwrap();
    let mut log = StepLogger::new(Vec::new());
    log.log_reset(0, 11, &s).unwrap();
    for k in 0..5 {
        let a = Twist::zero();
        let out = e.step(&a).unwrap();
        log.log(&StepRecord::new(0, k, &a, &out)).unwrap();
        if out.done() {
            break;
        }
    }
    let text = String::from_utf8(log.into_inner()).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l["schema_version"] == LOG_SCHEMA_VERSION));
    assert_eq!(lines[0]["state_hash"], s.hash_hex());
    assert!(lines[5]["truncated"].as_bool().unwrap());
}

#[test]
fn identity_rotation_has_zero_euler_angles() {
    assert_eq!(Rotation::identity().euler_zyx(), Vector3::zeros());
}

fn pose_from(v: &[f64]) -> Pose {
    let axis = Vector3::new(v[0], v[1], v[2]);
    let rot = if axis.norm() > 1e-6 {
        Rotation::from_axis_angle(&axis.normalize(), v[3])
    } else {
        Rotation::identity()
    };
    Pose::new(rot, Vector3::new(v[4], v[5], v[6]))
}

proptest! {
    #[test]
    fn surface_points_follow_the_box_pose(
        v in prop::collection::vec(-3.0f64..3.0, 7),
        h in prop::collection::vec(0.01f64..0.5, 3),
    ) {
        let half = Vector3::new(h[0], h[1], h[2]);
        let pose = pose_from(&v);
        let ob = ObstacleModel::new(pose, half);
        let world = obstacle_surface_points(&ob);
        let g = pose.to_homogeneous();
        prop_assert_eq!(world.len(), 26);
        for (t, b) in world.iter().zip(&ob.surface_points) {
            let want = g * Vector4::new(b.x, b.y, b.z, 1.0);
            prop_assert!((t - want.xyz()).norm() < 1e-12);
            // every sample is on the box surface
            let on_face = (0..3).any(|i| (b[i].abs() - half[i]).abs() < 1e-15);
            prop_assert!(on_face && (0..3).all(|i| b[i].abs() <= half[i]));
            prop_assert!(box_distance(&ob, t) < 1e-9);
        }
        let shifted = ObstacleModel::new(Pose::from_translation(pose.position), half);
        for (t, b) in obstacle_surface_points(&shifted).iter().zip(&ob.surface_points) {
            prop_assert!((t - (b + pose.position)).norm() < 1e-12);
        }
    }

    #[test]
    fn obstacle_reward_is_translation_invariant(
        seed in 0u64..10_000,
        shift in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = |n: usize| -> Vec<Vector3<f64>> {
            (0..n).map(|_| Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3))).collect()
        };
        let links = pts(28);
        let surface = pts(26);
        let d = Vector3::new(shift[0], shift[1], shift[2]);
        let cfg = RewardConfig::with_lambda_lim(0.01);
        let a = reward_obstacle(&links, &surface, &cfg);
        let moved_links: Vec<_> = links.iter().map(|p| p + d).collect();
        let moved_surface: Vec<_> = surface.iter().map(|p| p + d).collect();
        let b = reward_obstacle(&moved_links, &moved_surface, &cfg);
        prop_assert!((a.total - b.total).abs() < 1e-12);
        prop_assert_eq!(a.collided, b.collided);
    }
}
