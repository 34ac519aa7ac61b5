//! Task-space controller: SE(3) PID on the pose error, nullspace
//! manipulability ascent with internal-motion damping, and a potential-field
//! singularity guard.
//!
//! The plant is velocity resolved. The PID, nullspace and singularity terms
//! act as accelerations of the relative twist and of the internal velocity,
//! which the controller integrates into joint-rate commands each substep.

use crate::robot::{
    manipulability, manipulability_gradient_at, ArmSnapshot, FloatingArm, ManipulatorModel,
    RobotError, RANK_TOL,
};
use crate::se3::{sk_vee, Pose, Twist};
use nalgebra::{DMatrix, DVector, Matrix6, Matrix6xX, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Manipulability under which the singularity potential is undefined.
pub const SINGULAR_LAMBDA: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("gain matrix {0} is not symmetric")]
    NotSymmetric(&'static str),
    #[error("gain matrix {0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("manipulability {0:e} is too close to zero for the singularity potential")]
    SingularConfiguration(f64),
    #[error(transparent)]
    Robot(#[from] RobotError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerGains {
    pub k_p: Matrix6<f64>,
    pub k_d: Matrix6<f64>,
    pub k_i: Matrix6<f64>,
}

impl ControllerGains {
    pub fn from_diagonals(k_p: &[f64; 6], k_d: &[f64; 6], k_i: &[f64; 6]) -> Self {
        let diag = |v: &[f64; 6]| Matrix6::from_diagonal(&Vector6::from_column_slice(v));
        Self {
            k_p: diag(k_p),
            k_d: diag(k_d),
            k_i: diag(k_i),
        }
    }

    /// Shipped gains; produced by `examples/gain_search.rs`.
    pub fn shipped() -> Self {
        Self::from_diagonals(
            &[9.5; 6],
            &[4.5, 4.5, 4.5, 8.0, 8.0, 8.0],
            &[7.5; 6],
        )
    }
}

/// One side-by-side evaluation of a stability inequality `lhs > rhs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl InequalityCheck {
    pub fn slack(&self) -> f64 {
        self.lhs - self.rhs
    }

    pub fn holds(&self) -> bool {
        self.lhs > self.rhs
    }
}

/// Extreme eigenvalues and both gain inequalities.
///
/// With `lo_k`/`hi_k` the smallest/largest eigenvalues of `K_p` (k = 1),
/// `K_d` (k = 2) and `K_i` (k = 3), the checks are
/// `hi₂ hi₃ > lo₃²` and `hi₂ lo₃² > 4 hi₁ hi₃ + lo₂² hi₃`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GainReport {
    pub smallest: [f64; 3],
    pub largest: [f64; 3],
    pub first: InequalityCheck,
    pub second: InequalityCheck,
}

impl GainReport {
    pub fn is_ok(&self) -> bool {
        self.first.holds() && self.second.holds()
    }

    /// Human-readable list of violated inequalities with their slack.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.first.holds() {
            out.push(format!(
                "first inequality violated: {} <= {} (slack {})",
                self.first.lhs,
                self.first.rhs,
                self.first.slack()
            ));
        }
        if !self.second.holds() {
            out.push(format!(
                "second inequality violated: {} <= {} (slack {})",
                self.second.lhs,
                self.second.rhs,
                self.second.slack()
            ));
        }
        out
    }
}

fn eigen_extremes(m: &Matrix6<f64>, name: &'static str) -> Result<(f64, f64), ControlError> {
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(ControlError::NotSymmetric(name));
    }
    let eig = SymmetricEigen::new(*m).eigenvalues;
    let lo = eig.min();
    if lo <= 0.0 {
        return Err(ControlError::NotPositiveDefinite(name));
    }
    Ok((lo, eig.max()))
}

pub fn validate_gains(gains: &ControllerGains) -> Result<GainReport, ControlError> {
    let (lo1, hi1) = eigen_extremes(&gains.k_p, "K_p")?;
    let (lo2, hi2) = eigen_extremes(&gains.k_d, "K_d")?;
    let (lo3, hi3) = eigen_extremes(&gains.k_i, "K_i")?;
    Ok(GainReport {
        smallest: [lo1, lo2, lo3],
        largest: [hi1, hi2, hi3],
        first: InequalityCheck {
            lhs: hi2 * hi3,
            rhs: lo3 * lo3,
        },
        second: InequalityCheck {
            lhs: hi2 * lo3 * lo3,
            rhs: 4.0 * hi1 * hi3 + lo2 * lo2 * hi3,
        },
    })
}

/// `E_g = ½ tr(I − R) + ½ PᵀP` for the end effector relative to the target.
pub fn pose_error(g_t_ee: &Pose) -> f64 {
    let r = g_t_ee.rotation.matrix();
    0.5 * (3.0 - r.trace()) + 0.5 * g_t_ee.position.norm_squared()
}

/// `[P; sk(R)^∨]`. Its inner product with the twist `(ġ g⁻¹)^∨` of the
/// relative pose (expressed in the target frame) is exactly `Ė_g`.
pub fn pose_error_gradient(g_t_ee: &Pose) -> Vector6<f64> {
    let w = sk_vee(&g_t_ee.rotation);
    let p = g_t_ee.position;
    Vector6::new(p.x, p.y, p.z, w.x, w.y, w.z)
}

/// Integral state `F_i` of the PID.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PidState {
    pub f_i: Vector6<f64>,
}

impl PidState {
    pub fn reset(&mut self) {
        self.f_i = Vector6::zeros();
    }
}

/// `U_pid = −K_p ∇E_g − K_d V − K_i F_i`, then `F_i += dt (K_p ∇E_g + K_d V)`.
pub fn pid_step(
    gains: &ControllerGains,
    state: &PidState,
    g_t_ee: &Pose,
    v_t_ee: &Twist,
    dt: f64,
) -> (Vector6<f64>, PidState) {
    let p_term = gains.k_p * pose_error_gradient(g_t_ee);
    let d_term = gains.k_d * v_t_ee.0;
    let u = -p_term - d_term - gains.k_i * state.f_i;
    let next = PidState {
        f_i: state.f_i + (p_term + d_term) * dt,
    };
    (u, next)
}

/// `J† = Jᵀ (J Jᵀ)⁻¹` for a full-row-rank Jacobian.
pub fn pseudo_inverse(j_ee: &Matrix6xX<f64>) -> Result<DMatrix<f64>, ControlError> {
    let lambda = manipulability(j_ee);
    if lambda < RANK_TOL {
        return Err(RobotError::NearSingular { manipulability: lambda }.into());
    }
    let gram: Matrix6<f64> = j_ee * j_ee.transpose();
    let inv = gram
        .cholesky()
        .ok_or(RobotError::NearSingular { manipulability: lambda })?
        .inverse();
    let jt = DMatrix::from_iterator(j_ee.ncols(), 6, j_ee.transpose().iter().copied());
    let inv = DMatrix::from_iterator(6, 6, inv.iter().copied());
    Ok(jt * inv)
}

/// Nullspace projector `N = I − J†J` and an orthonormal nullspace basis `Z`.
#[derive(Clone, Debug)]
pub struct Nullspace {
    pub projector: DMatrix<f64>,
    pub basis: DMatrix<f64>,
    pub pinv: DMatrix<f64>,
}

/// `Z` comes from the right singular vectors of `J` (zero-padded to square)
/// with zero singular value; each column's first non-negligible entry is made
/// positive so the basis is reproducible.
pub fn nullspace_basis(j_ee: &Matrix6xX<f64>) -> Result<Nullspace, ControlError> {
    let pinv = pseudo_inverse(j_ee)?;
    let n = j_ee.ncols();
    let jd = DMatrix::from_iterator(6, n, j_ee.iter().copied());
    let projector = DMatrix::identity(n, n) - &pinv * &jd;

    let mut padded = DMatrix::zeros(n, n);
    padded.view_mut((0, 0), (6, n)).copy_from(&jd);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[a]
            .partial_cmp(&svd.singular_values[b])
            .expect("finite singular values")
            .then(a.cmp(&b))
    });
    let k = n - 6;
    let mut basis = DMatrix::zeros(n, k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        let mut v = v_t.row(idx).transpose();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        basis.column_mut(col).copy_from(&v);
    }
    Ok(Nullspace {
        projector,
        basis,
        pinv,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularityConfig {
    pub lambda_lim: f64,
    pub k_lambda: DMatrix<f64>,
    pub k_v: DMatrix<f64>,
}

impl SingularityConfig {
    /// Threshold at 10% of the model's zero-configuration manipulability.
    pub fn for_model(model: &ManipulatorModel, k_lambda: f64, k_v: f64) -> Result<Self, RobotError> {
        let snap = ArmSnapshot::compute(model, &DVector::zeros(model.dof()))?;
        let k = model.dof() - 6;
        Ok(Self {
            lambda_lim: 0.1 * manipulability(&snap.jacobians.j_ee),
            k_lambda: DMatrix::identity(k, k) * k_lambda,
            k_v: DMatrix::identity(k, k) * k_v,
        })
    }
}

/// `U_ns = K_λ Zᵀ∇λ − K_v v` with `v = Zᵀ N φ̇`.
pub fn nullspace_control(
    model: &ManipulatorModel,
    base_pose: &Pose,
    phi: &DVector<f64>,
    phi_dot: &DVector<f64>,
    cfg: &SingularityConfig,
) -> Result<DVector<f64>, ControlError> {
    let j_ee = crate::robot::jacobians(model, base_pose, phi)?.j_ee;
    let grad = manipulability_gradient_at(model, phi, &j_ee)?;
    let ns = nullspace_basis(&j_ee)?;
    Ok(nullspace_law(&ns, &grad, phi_dot, cfg))
}

fn nullspace_law(
    ns: &Nullspace,
    grad: &DVector<f64>,
    phi_dot: &DVector<f64>,
    cfg: &SingularityConfig,
) -> DVector<f64> {
    let zt = ns.basis.transpose();
    let v = &zt * (&ns.projector * phi_dot);
    &cfg.k_lambda * (&zt * grad) - &cfg.k_v * v
}

/// Value of the singularity potential and the task-space push it produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SingularityTerm {
    pub lambda: f64,
    pub potential: f64,
    pub u_s: Vector6<f64>,
}

/// `U_λ`, `∇U_λ` and `U_s = −(J†)ᵀ ∇U_λ`, all zero above `λ_lim`.
pub fn singularity_avoidance(
    model: &ManipulatorModel,
    base_pose: &Pose,
    phi: &DVector<f64>,
    cfg: &SingularityConfig,
) -> Result<SingularityTerm, ControlError> {
    let j_ee = crate::robot::jacobians(model, base_pose, phi)?.j_ee;
    let lambda = manipulability(&j_ee);
    if lambda < SINGULAR_LAMBDA {
        return Err(ControlError::SingularConfiguration(lambda));
    }
    if lambda > cfg.lambda_lim {
        return Ok(SingularityTerm {
            lambda,
            potential: 0.0,
            u_s: Vector6::zeros(),
        });
    }
    let grad = manipulability_gradient_at(model, phi, &j_ee)?;
    let pinv = pseudo_inverse(&j_ee)?;
    Ok(singularity_law(lambda, &grad, &pinv, cfg.lambda_lim))
}

fn singularity_law(lambda: f64, grad: &DVector<f64>, pinv: &DMatrix<f64>, lambda_lim: f64) -> SingularityTerm {
    if lambda > lambda_lim {
        return SingularityTerm {
            lambda,
            potential: 0.0,
            u_s: Vector6::zeros(),
        };
    }
    let ratio = lambda_lim / lambda;
    let potential = 0.5 * (1.0 - ratio).powi(2);
    let grad_u = grad * (lambda_lim / (lambda * lambda) * (1.0 - ratio));
    let u = -(pinv.transpose() * grad_u);
    SingularityTerm {
        lambda,
        potential,
        u_s: Vector6::from_column_slice(u.as_slice()),
    }
}

/// `U_ts = U_pid + U_s`.
pub fn taskspace_command(u_pid: &Vector6<f64>, u_s: &Vector6<f64>) -> Vector6<f64> {
    u_pid + u_s
}

/// `φ̇ = J† u_ts + Z u_ns`.
pub fn resolve_joint_rates(
    j_ee: &Matrix6xX<f64>,
    u_ts: &Vector6<f64>,
    u_ns: &DVector<f64>,
    z: &DMatrix<f64>,
) -> Result<DVector<f64>, ControlError> {
    let pinv = pseudo_inverse(j_ee)?;
    Ok(resolve_with(&pinv, u_ts, u_ns, z))
}

fn resolve_with(
    pinv: &DMatrix<f64>,
    u_ts: &Vector6<f64>,
    u_ns: &DVector<f64>,
    z: &DMatrix<f64>,
) -> DVector<f64> {
    let task = DVector::from_column_slice(u_ts.as_slice());
    pinv * task + z * u_ns
}

/// Controller parameters that are not gains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerSettings {
    /// Largest allowed joint rate; commands above it are scaled down as a whole.
    pub max_joint_rate: f64,
    /// Pose-error level below which the error is locally quadratic. Logged only.
    pub e_lim: f64,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            max_joint_rate: 2.0,
            e_lim: 0.5,
        }
    }
}

/// Which control terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTerms {
    pub pid: bool,
    pub nullspace: bool,
    pub singularity: bool,
}

impl Default for ActiveTerms {
    fn default() -> Self {
        Self {
            pid: true,
            nullspace: true,
            singularity: true,
        }
    }
}

/// Reference for one control substep: the target frame in the inertial frame
/// and its body twist.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference {
    pub pose: Pose,
    pub twist: Twist,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ControlDiagnostics {
    pub pose_error: f64,
    pub lambda: f64,
    pub potential: f64,
    pub u_pid_norm: f64,
    pub u_s_norm: f64,
    pub u_ns_norm: f64,
    pub quadratic_region: bool,
    pub rate_clamped: bool,
    /// The nullspace basis changed sign relative to the previous substep.
    pub basis_sign_flip: bool,
}

/// One controller instance per rollout; owns the PID integral state.
#[derive(Clone, Debug)]
pub struct TrackingController {
    pub gains: ControllerGains,
    pub singularity: SingularityConfig,
    pub settings: ControllerSettings,
    pub terms: ActiveTerms,
    pid: PidState,
    last_basis: Option<DMatrix<f64>>,
}

impl TrackingController {
    pub fn new(
        gains: ControllerGains,
        singularity: SingularityConfig,
        settings: ControllerSettings,
    ) -> Self {
        Self {
            gains,
            singularity,
            settings,
            terms: ActiveTerms::default(),
            pid: PidState::default(),
            last_basis: None,
        }
    }

    pub fn pid_state(&self) -> &PidState {
        &self.pid
    }

    pub fn reset(&mut self) {
        self.pid.reset();
        self.last_basis = None;
    }

    /// Joint rates for the next substep of length `dt`, computed from the
    /// current snapshot of `arm`.
    pub fn joint_rates(
        &mut self,
        arm: &FloatingArm,
        snap: &ArmSnapshot,
        reference: &Reference,
        dt: f64,
    ) -> Result<(DVector<f64>, ControlDiagnostics), ControlError> {
        let model = arm.model();
        let j_ee = &snap.jacobians.j_ee;
        let lambda = manipulability(j_ee);
        if lambda < SINGULAR_LAMBDA {
            return Err(ControlError::SingularConfiguration(lambda));
        }
        let ns = nullspace_basis(j_ee)?;
        let phi = &arm.joints().phi;
        let phi_dot = &arm.joints().phi_dot;
        let needs_grad =
            self.terms.nullspace || (self.terms.singularity && lambda <= self.singularity.lambda_lim);
        let grad = if needs_grad {
            Some(manipulability_gradient_at(model, phi, j_ee)?)
        } else {
            None
        };

        let g_ee = arm.ee_world_pose(snap);
        let g_t_ee = reference.pose.inverse().compose(&g_ee);
        let to_ee = g_t_ee.inverse();
        let ee_twist = j_ee * phi_dot;
        let feedforward = to_ee.transform_twist(&reference.twist).0;
        let rel_body = Twist(Vector6::from_column_slice(ee_twist.as_slice()) - feedforward);
        let rel_target = g_t_ee.transform_twist(&rel_body);

        let mut diag = ControlDiagnostics {
            pose_error: pose_error(&g_t_ee),
            lambda,
            ..Default::default()
        };
        diag.quadratic_region = diag.pose_error < self.settings.e_lim;

        let mut pid_next = None;
        let u_pid_body = if self.terms.pid {
            let (u, next) = pid_step(&self.gains, &self.pid, &g_t_ee, &rel_target, dt);
            pid_next = Some(next);
            diag.u_pid_norm = u.norm();
            to_ee.transform_twist(&Twist(u)).0
        } else {
            Vector6::zeros()
        };
        let u_s = match (&grad, self.terms.singularity) {
            (Some(g), true) => {
                let term = singularity_law(lambda, g, &ns.pinv, self.singularity.lambda_lim);
                diag.potential = term.potential;
                term.u_s
            }
            _ => Vector6::zeros(),
        };
        diag.u_s_norm = u_s.norm();
        let u_ts = taskspace_command(&u_pid_body, &u_s);

        diag.basis_sign_flip = self
            .last_basis
            .as_ref()
            .is_some_and(|prev| prev.column_iter().zip(ns.basis.column_iter()).any(|(a, b)| a.dot(&b) < 0.0));
        self.last_basis = Some(ns.basis.clone());

        let k = model.dof() - 6;
        let zt = ns.basis.transpose();
        let internal = &zt * (&ns.projector * phi_dot);
        let u_ns = match (&grad, self.terms.nullspace) {
            (Some(g), true) => nullspace_law(&ns, g, phi_dot, &self.singularity),
            _ => DVector::zeros(k),
        };
        diag.u_ns_norm = u_ns.norm();

        let task_cmd = if self.terms.pid || self.terms.singularity {
            feedforward + rel_body.0 + u_ts * dt
        } else {
            Vector6::zeros()
        };
        let internal_cmd = if self.terms.nullspace {
            internal + u_ns * dt
        } else {
            DVector::zeros(k)
        };
        let mut rates = resolve_with(&ns.pinv, &task_cmd, &internal_cmd, &ns.basis);
        let peak = rates.amax();
        if peak > self.settings.max_joint_rate {
            rates *= self.settings.max_joint_rate / peak;
            diag.rate_clamped = true;
        }
        // the integral only advances while the command is not saturated
        if let (Some(next), false) = (pid_next, diag.rate_clamped) {
            self.pid = next;
        }
        Ok((rates, diag))
    }
}
