use capture_core::control::*;
use capture_core::robot::*;
use capture_core::se3::*;
use nalgebra::{DVector, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

const DT: f64 = 0.01;

fn model() -> Arc<ManipulatorModel> {
    Arc::new(ManipulatorModel::kuka_iiwa_like())
}

fn controller(model: &ManipulatorModel) -> TrackingController {
    let cfg = SingularityConfig::for_model(model, 50.0, 10.0).unwrap();
    TrackingController::new(ControllerGains::shipped(), cfg, ControllerSettings::default())
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let mut v = [0.0; 6];
    for x in &mut v {
        *x = rng.random_range(-1.5..1.5);
    }
    exp_se3(&Twist::from_slice(&v), 1.0)
}

#[test]
fn gradient_is_differential_of_pose_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-6;
    for _ in 0..100 {
        let g = random_pose(&mut rng);
        let mut v = [0.0; 6];
        for x in &mut v {
            *x = rng.random_range(-1.0..1.0);
        }
        let v = Twist::from_slice(&v);
        // relative pose moved by a twist expressed in the target frame
        let fwd = pose_error(&exp_se3(&v, h).compose(&g));
        let bwd = pose_error(&exp_se3(&v, -h).compose(&g));
        let numeric = (fwd - bwd) / (2.0 * h);
        let analytic = pose_error_gradient(&g).dot(&v.0);
        assert!(
            (numeric - analytic).abs() < 1e-5 * (1.0 + numeric.abs()),
            "{numeric} vs {analytic}"
        );
    }
}

fn potential(model: &ManipulatorModel, phi: &DVector<f64>, lambda_lim: f64) -> f64 {
    let snap = ArmSnapshot::compute(model, phi).unwrap();
    let l = manipulability(&snap.jacobians.j_ee);
    if l > lambda_lim {
        0.0
    } else {
        0.5 * (1.0 - lambda_lim / l).powi(2)
    }
}

#[test]
fn singularity_push_matches_potential_difference() {
    let model = model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let phi = DVector::from_fn(7, |_, _| rng.random_range(-0.3..0.3));
        let snap = ArmSnapshot::compute(&model, &phi).unwrap();
        let lambda = manipulability(&snap.jacobians.j_ee);
        let cfg = SingularityConfig {
            lambda_lim: 2.0 * lambda,
            k_lambda: nalgebra::DMatrix::identity(1, 1),
            k_v: nalgebra::DMatrix::identity(1, 1),
        };
        let term = singularity_avoidance(&model, &Pose::identity(), &phi, &cfg).unwrap();
        assert!((term.potential - 0.5).abs() < 1e-12);
        let h = 1e-6;
        let grad = DVector::from_fn(7, |i, _| {
            let mut p = phi.clone();
            p[i] += h;
            let up = potential(&model, &p, cfg.lambda_lim);
            p[i] -= 2.0 * h;
            let down = potential(&model, &p, cfg.lambda_lim);
            (up - down) / (2.0 * h)
        });
        let pinv = pseudo_inverse(&snap.jacobians.j_ee).unwrap();
        let expected = -(pinv.transpose() * grad);
        let err = (Vector6::from_column_slice(expected.as_slice()) - term.u_s).norm();
        assert!(err < 1e-4 * expected.norm(), "{err} vs {}", expected.norm());
    }
}

#[test]
fn singularity_gradient_vanishes_at_threshold() {
    let model = model();
    let phi = DVector::zeros(7);
    let snap = ArmSnapshot::compute(&model, &phi).unwrap();
    let lambda = manipulability(&snap.jacobians.j_ee);
    let mut last = f64::INFINITY;
    for scale in [1.1, 1.01, 1.001, 1.0001] {
        let cfg = SingularityConfig {
            lambda_lim: lambda * scale,
            k_lambda: nalgebra::DMatrix::identity(1, 1),
            k_v: nalgebra::DMatrix::identity(1, 1),
        };
        let n = singularity_avoidance(&model, &Pose::identity(), &phi, &cfg)
            .unwrap()
            .u_s
            .norm();
        assert!(n < last);
        last = n;
    }
    assert!(last < 1e-3);
}

#[test]
fn nullspace_terms_vanish_as_expected() {
    let model = model();
    let phi = DVector::zeros(7);
    let cfg = SingularityConfig::for_model(&model, 5.0, 2.0).unwrap();
    let snap = ArmSnapshot::compute(&model, &phi).unwrap();
    let ns = nullspace_basis(&snap.jacobians.j_ee).unwrap();
    let grad = manipulability_gradient(&model, &Pose::identity(), &phi).unwrap();
    let z = ns.basis.column(0).into_owned();
    // the rest state gives zero damping; only the gradient term remains
    let u = nullspace_control(&model, &Pose::identity(), &phi, &DVector::zeros(7), &cfg).unwrap();
    assert!((u[0] - 5.0 * z.dot(&grad)).abs() < 1e-12);
    // an internal motion of speed s is damped by K_v s on top of that
    let u2 = nullspace_control(&model, &Pose::identity(), &phi, &(&z * 0.3), &cfg).unwrap();
    assert!((u2[0] - u[0] + 2.0 * 0.3).abs() < 1e-9);
}

struct Run {
    arm: FloatingArm,
    ctrl: TrackingController,
}

impl Run {
    fn new(phi: DVector<f64>) -> Self {
        let model = model();
        let ctrl = controller(&model);
        let arm = FloatingArm::new(model, phi, Pose::identity()).unwrap();
        Self { arm, ctrl }
    }

    fn step(&mut self, reference: &Reference) -> ControlDiagnostics {
        let snap = self.arm.snapshot().unwrap();
        let (rates, diag) = self.ctrl.joint_rates(&self.arm, &snap, reference, DT).unwrap();
        let residual = self.arm.apply_joint_rates(&rates, &snap, DT);
        assert!(residual < 1e-9);
        diag
    }

    fn lambda(&self) -> f64 {
        manipulability(&self.arm.snapshot().unwrap().jacobians.j_ee)
    }
}

#[test]
fn regulation_reaches_static_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..3 {
        let mut run = Run::new(DVector::zeros(7));
        let start = run.arm.ee_world_pose(&run.arm.snapshot().unwrap());
        let offset = Vector3::from_fn(|_, _| rng.random_range(-0.15..0.15));
        let turn = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
        let target = start.compose(&exp_se3(&Twist::new(offset, turn), 1.0));
        let reference = Reference {
            pose: target,
            twist: Twist::zero(),
        };
        let mut e = f64::INFINITY;
        for _ in 0..1000 {
            e = run.step(&reference).pose_error;
        }
        assert!(e < 1e-3, "final pose error {e}");
    }
}

#[test]
fn nullspace_only_raises_manipulability() {
    let mut run = Run::new(DVector::from_vec(vec![0.3, -0.4, 0.5, 0.2, -0.3, 0.4, 0.1]));
    run.ctrl.terms = ActiveTerms {
        pid: false,
        nullspace: true,
        singularity: false,
    };
    let hold = Reference {
        pose: Pose::identity(),
        twist: Twist::zero(),
    };
    let mut last = run.lambda();
    let first = last;
    for _ in 0..500 {
        let diag = run.step(&hold);
        assert!(diag.lambda >= last - 1e-6, "{} < {last}", diag.lambda);
        last = diag.lambda;
    }
    assert!(run.lambda() > first);
}

#[test]
fn internal_motion_leaves_end_effector_still() {
    let mut run = Run::new(DVector::from_vec(vec![0.1, 0.2, -0.1, 0.3, 0.0, -0.2, 0.1]));
    run.ctrl.terms = ActiveTerms {
        pid: false,
        nullspace: true,
        singularity: false,
    };
    let hold = Reference {
        pose: Pose::identity(),
        twist: Twist::zero(),
    };
    for _ in 0..200 {
        let snap = run.arm.snapshot().unwrap();
        let (rates, _) = run.ctrl.joint_rates(&run.arm, &snap, &hold, DT).unwrap();
        assert!((&snap.jacobians.j_ee * &rates).norm() < 1e-8);
        run.arm.apply_joint_rates(&rates, &snap, DT);
    }
}

#[test]
fn unreachable_target_keeps_arm_dexterous() {
    let mut run = Run::new(DVector::zeros(7));
    let lim = run.ctrl.singularity.lambda_lim;
    let start = run.arm.ee_world_pose(&run.arm.snapshot().unwrap());
    // drag the target straight out of the workspace at 0.2 m/s
    let drift = Twist::new(start.rotation.transpose().apply(&Vector3::new(0.2, 0.0, 0.3)), Vector3::zeros());
    let mut min_lambda = f64::INFINITY;
    let mut engaged = false;
    for k in 0..2000 {
        let reference = Reference {
            pose: start.compose(&exp_se3(&drift, k as f64 * DT)),
            twist: drift,
        };
        let diag = run.step(&reference);
        min_lambda = min_lambda.min(diag.lambda);
        engaged |= diag.potential > 0.0;
    }
    assert!(engaged, "target never pulled the arm toward a singularity");
    assert!(min_lambda >= 0.5 * lim, "λ fell to {min_lambda} (limit {lim})");
}

