use super::{ManipulatorModel, RobotError};
use crate::se3::{exp_se3, Pose, Twist};
use nalgebra::{DMatrix, DVector, Matrix6, Matrix6xX, Vector3, Vector6};

/// Manipulability below which `J_ee J_eeᵀ` is treated as singular.
pub const RANK_TOL: f64 = 1e-10;

/// Joint step used for the finite-difference derivative of `J_ee`.
pub const JACOBIAN_FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub phi: DVector<f64>,
    pub phi_dot: DVector<f64>,
}

impl JointState {
    pub fn at_rest(phi: DVector<f64>) -> Self {
        let n = phi.len();
        Self {
            phi,
            phi_dot: DVector::zeros(n),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.phi.iter().chain(self.phi_dot.iter()).all(|v| v.is_finite())
    }
}

/// Blocks of the system mass matrix, all expressed in the base frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MassMatrix {
    pub m_b: Matrix6<f64>,
    pub m_bm: Matrix6xX<f64>,
    pub m_m: DMatrix<f64>,
}

impl MassMatrix {
    /// Assembled `(6+n)×(6+n)` matrix.
    pub fn assembled(&self) -> DMatrix<f64> {
        let n = self.m_m.nrows();
        let mut m = DMatrix::zeros(6 + n, 6 + n);
        m.view_mut((0, 0), (6, 6)).copy_from(&self.m_b);
        m.view_mut((0, 6), (6, n)).copy_from(&self.m_bm);
        m.view_mut((6, 0), (n, 6)).copy_from(&self.m_bm.transpose());
        m.view_mut((6, 6), (n, n)).copy_from(&self.m_m);
        m
    }

    /// `M_b V_b + M_bm φ̇`: the system momentum, zero for free floating.
    pub fn momentum(&self, base_twist: &Twist, phi_dot: &DVector<f64>) -> Vector6<f64> {
        self.m_b * base_twist.0 + &self.m_bm * phi_dot
    }
}

/// Jacobians producing the end-effector body twist.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianSet {
    pub j_b: Matrix6<f64>,
    pub j_m: Matrix6xX<f64>,
    pub j_bm: Matrix6xX<f64>,
    pub j_ee: Matrix6xX<f64>,
}

/// Everything the controller and environment need at one configuration.
#[derive(Clone, Debug)]
pub struct ArmSnapshot {
    /// Joint frames `1..n` and the end effector, relative to the base.
    pub body_poses: Vec<Pose>,
    /// Instantaneous joint screws in the base frame.
    pub spatial_jacobian: Matrix6xX<f64>,
    pub mass: MassMatrix,
    pub jacobians: JacobianSet,
}

impl ArmSnapshot {
    pub fn compute(model: &ManipulatorModel, phi: &DVector<f64>) -> Result<Self, RobotError> {
        check_dof(model, phi)?;
        let (body_poses, spatial_jacobian) = poses_and_screws(model, phi);
        let mass = assemble_mass(model, &body_poses, &spatial_jacobian);
        let j_bm = coupling_jacobian(&mass);
        let ee = body_poses.last().expect("n+1 poses");
        let j_b = ee.inverse().adjoint();
        let j_m = j_b * &spatial_jacobian;
        let j_ee = j_b * &j_bm + &j_m;
        Ok(Self {
            body_poses,
            spatial_jacobian,
            mass,
            jacobians: JacobianSet {
                j_b,
                j_m,
                j_bm,
                j_ee,
            },
        })
    }

    pub fn end_effector(&self) -> &Pose {
        self.body_poses.last().expect("n+1 poses")
    }
}

fn check_dof(model: &ManipulatorModel, phi: &DVector<f64>) -> Result<(), RobotError> {
    if phi.len() != model.dof() {
        return Err(RobotError::DimensionMismatch {
            expected: model.dof(),
            got: phi.len(),
        });
    }
    Ok(())
}

fn poses_and_screws(model: &ManipulatorModel, phi: &DVector<f64>) -> (Vec<Pose>, Matrix6xX<f64>) {
    let n = model.dof();
    let mut poses = Vec::with_capacity(n + 1);
    let mut screws = Matrix6xX::zeros(n);
    let mut prefix = Pose::identity();
    for i in 0..n {
        screws
            .column_mut(i)
            .copy_from(&prefix.transform_twist(&model.screw_axes[i]).0);
        prefix = prefix.compose(&exp_se3(&model.screw_axes[i], phi[i]));
        poses.push(prefix.compose(&model.zero_poses[i]));
    }
    poses.push(prefix.compose(&model.zero_poses[n]));
    (poses, screws)
}

/// `g⁰_i = e^{[ξ₁]φ₁}⋯e^{[ξᵢ]φᵢ} ḡ⁰_i` for `i = 1..n+1`.
pub fn forward_kinematics(
    model: &ManipulatorModel,
    phi: &DVector<f64>,
) -> Result<Vec<Pose>, RobotError> {
    check_dof(model, phi)?;
    Ok(poses_and_screws(model, phi).0)
}

/// `g^I_i = g^I_0 g^0_i`.
pub fn world_poses(base_pose: &Pose, body_poses: &[Pose]) -> Vec<Pose> {
    body_poses.iter().map(|g| base_pose.compose(g)).collect()
}

/// Composite rigid-body assembly in the base frame.
fn assemble_mass(
    model: &ManipulatorModel,
    body_poses: &[Pose],
    screws: &Matrix6xX<f64>,
) -> MassMatrix {
    let n = model.dof();
    // Each body's spatial inertia transported to the base-frame origin.
    let mut transported = Vec::with_capacity(n + 1);
    transported.push(model.bodies[0].spatial_inertia());
    for k in 1..=n {
        let ad = body_poses[k - 1].inverse().adjoint();
        transported.push(ad.transpose() * model.bodies[k].spatial_inertia() * ad);
    }
    // composite[i] = inertia of bodies i..n (index 0 includes the base)
    let mut composite = vec![Matrix6::zeros(); n + 2];
    for k in (0..=n).rev() {
        composite[k] = composite[k + 1] + transported[k];
    }
    let m_b = composite[0];
    let mut m_bm = Matrix6xX::zeros(n);
    let mut hs = Matrix6xX::zeros(n);
    for i in 0..n {
        let h = composite[i + 1] * screws.column(i);
        hs.column_mut(i).copy_from(&h);
        m_bm.column_mut(i).copy_from(&h);
    }
    let mut m_m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            // Bodies moved by both joints are those at index >= max(i, j).
            let v = screws.column(i).dot(&hs.column(j));
            m_m[(i, j)] = v;
            m_m[(j, i)] = v;
        }
    }
    MassMatrix { m_b, m_bm, m_m }
}

pub fn mass_matrix(model: &ManipulatorModel, phi: &DVector<f64>) -> Result<MassMatrix, RobotError> {
    check_dof(model, phi)?;
    let (poses, screws) = poses_and_screws(model, phi);
    Ok(assemble_mass(model, &poses, &screws))
}

/// `J_bm = −M_b⁻¹ M_bm` from zero total momentum.
pub fn coupling_jacobian(mm: &MassMatrix) -> Matrix6xX<f64> {
    let chol = mm.m_b.cholesky().expect("base inertia is positive definite");
    -chol.solve(&mm.m_bm)
}

/// Base, manipulator, coupling and generalized Jacobians. All map into the
/// end-effector body twist, so the result does not depend on `base_pose`.
pub fn jacobians(
    model: &ManipulatorModel,
    _base_pose: &Pose,
    phi: &DVector<f64>,
) -> Result<JacobianSet, RobotError> {
    Ok(ArmSnapshot::compute(model, phi)?.jacobians)
}

/// `λ = sqrt(det(J Jᵀ))`, clamped at zero.
pub fn manipulability(j_ee: &Matrix6xX<f64>) -> f64 {
    let gram: Matrix6<f64> = j_ee * j_ee.transpose();
    gram.determinant().max(0.0).sqrt()
}

/// `∂λ/∂φᵢ = (λ/2) tr((J Jᵀ)⁻¹ (J ∂Jᵀ/∂φᵢ + ∂J/∂φᵢ Jᵀ))` with `∂J/∂φᵢ` taken
/// by central differences of the full Jacobian chain.
pub fn manipulability_gradient(
    model: &ManipulatorModel,
    base_pose: &Pose,
    phi: &DVector<f64>,
) -> Result<DVector<f64>, RobotError> {
    let j = jacobians(model, base_pose, phi)?.j_ee;
    manipulability_gradient_at(model, phi, &j)
}

/// Same as [`manipulability_gradient`] when `J_ee(φ)` is already known.
pub fn manipulability_gradient_at(
    model: &ManipulatorModel,
    phi: &DVector<f64>,
    j_ee: &Matrix6xX<f64>,
) -> Result<DVector<f64>, RobotError> {
    check_dof(model, phi)?;
    let lambda = manipulability(j_ee);
    if lambda < RANK_TOL {
        return Err(RobotError::NearSingular { manipulability: lambda });
    }
    let gram: Matrix6<f64> = j_ee * j_ee.transpose();
    let gram_inv = gram
        .cholesky()
        .ok_or(RobotError::NearSingular { manipulability: lambda })?
        .inverse();
    let n = model.dof();
    let h = JACOBIAN_FD_STEP;
    let mut grad = DVector::zeros(n);
    let mut probe = phi.clone();
    for i in 0..n {
        probe[i] = phi[i] + h;
        let plus = ArmSnapshot::compute(model, &probe)?.jacobians.j_ee;
        probe[i] = phi[i] - h;
        let minus = ArmSnapshot::compute(model, &probe)?.jacobians.j_ee;
        probe[i] = phi[i];
        let dj = (plus - minus) / (2.0 * h);
        let sym: Matrix6<f64> = j_ee * dj.transpose() + &dj * j_ee.transpose();
        grad[i] = 0.5 * lambda * (gram_inv * sym).trace();
    }
    Ok(grad)
}

/// `L_ij = P_i + (j−1)/n_L (P_{i+1} − P_i)` for links `i = 1..n`,
/// `j = 1..n_L`, flattened link-major. The far endpoint of each link is
/// never sampled.
pub fn link_points(joint_positions: &[Vector3<f64>], samples: usize) -> Vec<Vector3<f64>> {
    let links = joint_positions.len().saturating_sub(1);
    let mut out = Vec::with_capacity(links * samples);
    for i in 0..links {
        let (a, b) = (joint_positions[i], joint_positions[i + 1]);
        for j in 0..samples {
            out.push(a + (b - a) * (j as f64 / samples as f64));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model() -> ManipulatorModel {
        ManipulatorModel::kuka_iiwa_like()
    }

    #[test]
    fn zero_configuration_gives_zero_poses() {
        let m = model();
        let poses = forward_kinematics(&m, &DVector::zeros(7)).unwrap();
        assert_eq!(poses, m.zero_poses);
    }

    #[test]
    fn single_joint_rotation() {
        let m = model();
        let mut phi = DVector::zeros(7);
        phi[0] = 0.8;
        let poses = forward_kinematics(&m, &phi).unwrap();
        let expected = exp_se3(&m.screw_axes[0], 0.8).compose(&m.zero_poses[0]);
        assert!(poses[0].distance_inf(&expected) < 1e-15);
    }

    #[test]
    fn wrong_length_is_rejected() {
        let m = model();
        assert!(matches!(
            forward_kinematics(&m, &DVector::zeros(6)),
            Err(RobotError::DimensionMismatch { expected: 7, got: 6 })
        ));
    }

    #[test]
    fn world_poses_with_identity_and_translation() {
        let m = model();
        let poses = m.zero_poses.clone();
        assert_eq!(world_poses(&Pose::identity(), &poses), poses);
        let d = Vector3::new(1.0, -2.0, 0.5);
        let shifted = world_poses(&Pose::from_translation(d), &poses);
        for (a, b) in shifted.iter().zip(&poses) {
            assert_relative_eq!(a.position, b.position + d, epsilon = 1e-15);
            assert_eq!(a.rotation, b.rotation);
        }
    }

    #[test]
    fn mass_matrix_symmetric_positive_definite() {
        let m = model();
        let phi = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.4, -0.7, 0.1, 0.9]);
        let mm = mass_matrix(&m, &phi).unwrap().assembled();
        assert!((&mm - mm.transpose()).amax() < 1e-10);
        assert!(mm.cholesky().is_some());
    }

    #[test]
    fn massless_links_leave_only_the_base() {
        let m = model().with_link_mass_scale(1e-12);
        let mm = mass_matrix(&m, &DVector::from_element(7, 0.2)).unwrap();
        assert!((mm.m_b - m.bodies[0].spatial_inertia()).amax() < 1e-9);
        assert!(mm.m_bm.amax() < 1e-9);
    }

    #[test]
    fn coupling_jacobian_simple_cases() {
        let c = Matrix6xX::from_fn(7, |i, j| (i * 7 + j) as f64 * 0.1);
        let mm = MassMatrix {
            m_b: Matrix6::identity(),
            m_bm: c.clone(),
            m_m: DMatrix::identity(7, 7),
        };
        assert_relative_eq!(coupling_jacobian(&mm), -c, epsilon = 1e-14);
        let zero = MassMatrix {
            m_b: Matrix6::identity() * 3.0,
            m_bm: Matrix6xX::zeros(7),
            m_m: DMatrix::identity(7, 7),
        };
        assert_eq!(coupling_jacobian(&zero).amax(), 0.0);
    }

    #[test]
    fn generalized_jacobian_identity_holds() {
        let m = model();
        let phi = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4, 0.2, -0.1, 0.6]);
        let js = jacobians(&m, &Pose::identity(), &phi).unwrap();
        assert_eq!(js.j_ee, js.j_b * &js.j_bm + &js.j_m);
    }

    #[test]
    fn fixed_base_limit() {
        let m = model().with_link_mass_scale(1e-12);
        let js = jacobians(&m, &Pose::identity(), &DVector::from_element(7, 0.1)).unwrap();
        assert!((js.j_ee - js.j_m).amax() < 1e-9);
    }

    #[test]
    fn manipulability_simple_cases() {
        let mut dup = Matrix6xX::from_fn(7, |i, j| ((i + 1) * (j + 2)) as f64 % 5.0);
        let row = dup.row(0).into_owned();
        dup.row_mut(1).copy_from(&row);
        assert_eq!(manipulability(&dup), 0.0);
        let mut ortho = Matrix6xX::zeros(7);
        for i in 0..6 {
            ortho[(i, i + 1)] = 1.0;
        }
        assert_relative_eq!(manipulability(&ortho), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn link_points_fractions() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
        ];
        let l = link_points(&pts, 2);
        assert_eq!(
            l,
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(0.5, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.5, 0.0, 0.0),
            ]
        );
        let first = link_points(&pts, 5);
        assert_eq!(first[0], pts[0]);
        assert_eq!(first[5], pts[1]);
        let evenly = link_points(&pts, 4);
        for w in evenly.windows(2) {
            assert_relative_eq!((w[1] - w[0]).norm(), 0.25, epsilon = 1e-15);
        }
    }
}
