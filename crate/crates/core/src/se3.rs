//! SO(3)/SE(3) primitives.
//!
//! Twists are stored as 6-vectors ordered `[linear; angular]`. Every Jacobian
//! and adjoint in the crate follows that ordering.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used for structural checks on Lie-algebra and group elements.
pub const STRUCTURE_TOL: f64 = 1e-9;

/// Below this rotation angle the exponential uses its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Compositions between polar re-orthonormalizations in [`PoseIntegrator`].
pub const REORTHONORMALIZE_EVERY: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("matrix is not an element of se(3): {0}")]
    NotInLieAlgebra(&'static str),
}

/// Skew-symmetric matrix of a 3-vector, `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix in SO(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking; callers guarantee orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        so3_exp(&(axis * (angle / n)))
    }

    /// Smallest rotation taking the direction of `from` onto that of `to`.
    pub fn from_two_vectors(from: &Vector3<f64>, to: &Vector3<f64>) -> Self {
        let (a, b) = (from.normalize(), to.normalize());
        let axis = a.cross(&b);
        let angle = axis.norm().atan2(a.dot(&b));
        if axis.norm() > 1e-12 {
            return Self::from_axis_angle(&axis, angle);
        }
        if angle < 1.0 {
            return Self::identity();
        }
        // antiparallel: any axis orthogonal to `a`
        let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        Self::from_axis_angle(&a.cross(&helper), std::f64::consts::PI)
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Max deviation of `rᵀr` from identity and of `det r` from 1.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.0.transpose() * self.0 - Matrix3::identity();
        gram.amax().max((self.0.determinant() - 1.0).abs())
    }

    pub fn is_valid(&self) -> bool {
        self.orthonormality_error() < STRUCTURE_TOL
    }

    /// Closest rotation in the Frobenius sense (polar projection).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.0.svd(true, true);
        let u = svd.u.expect("svd u requested");
        let v_t = svd.v_t.expect("svd v_t requested");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Self(r)
    }

    /// Intrinsic Z-Y-X Euler angles, returned as `(roll, pitch, yaw)` such
    /// that `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn euler_zyx(&self) -> Vector3<f64> {
        let r = &self.0;
        let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let (roll, yaw) = if r[(2, 0)].abs() < 1.0 - 1e-12 {
            (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
        } else {
            // gimbal lock: yaw absorbs the remaining rotation
            (0.0, (-r[(0, 1)]).atan2(r[(1, 1)]))
        };
        Vector3::new(roll, pitch, yaw)
    }

    pub fn from_euler_zyx(angles: &Vector3<f64>) -> Self {
        Self::rot_z(angles.z)
            .compose(&Self::rot_y(angles.y))
            .compose(&Self::rot_x(angles.x))
    }
}

/// Rodrigues formula for `exp([w])`.
fn so3_exp(w: &Vector3<f64>) -> Rotation {
    let theta = w.norm();
    let k = skew(w);
    let k2 = k * k;
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0, 0.5)
    } else {
        (theta.sin() / theta, half_versine_coeff(theta))
    };
    Rotation(Matrix3::identity() + k * a + k2 * b)
}

/// `(1 − cos θ)/θ²` without cancellation.
fn half_versine_coeff(theta: f64) -> f64 {
    let s = (0.5 * theta).sin() / theta;
    2.0 * s * s
}

/// `(θ − sin θ)/θ³`; the closed form cancels badly for small θ.
fn third_order_coeff(theta: f64) -> f64 {
    if theta < 1e-3 {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

/// Vee of the antisymmetric part of `r`, i.e. `(½(r − rᵀ))^∨`.
pub fn sk_vee(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Spatial velocity `[linear; angular]`. Screw axes are unit twists.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self(Vector6::new(
            linear.x, linear.y, linear.z, angular.x, angular.y, angular.z,
        ))
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self(Vector6::from_column_slice(v))
    }

    /// Unit screw of a revolute joint with unit `axis` through `point`.
    pub fn revolute(axis: &Vector3<f64>, point: &Vector3<f64>) -> Self {
        let w = axis.normalize();
        Self::new(-w.cross(point), w)
    }

    pub fn linear(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn angular(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0 * s)
    }
}

/// `[t]`: the 4×4 se(3) matrix of a twist.
pub fn hat(t: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&t.angular()));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.linear());
    m
}

/// Inverse of [`hat`]. Rejects matrices that are not in se(3).
pub fn vee(m: &Matrix4<f64>) -> Result<Twist, Se3Error> {
    let top = m.fixed_view::<3, 3>(0, 0);
    if (top + top.transpose()).amax() > STRUCTURE_TOL {
        return Err(Se3Error::NotInLieAlgebra("rotation block is not skew"));
    }
    if m.row(3).amax() > STRUCTURE_TOL {
        return Err(Se3Error::NotInLieAlgebra("bottom row is not zero"));
    }
    Ok(Twist(Vector6::new(
        m[(0, 3)],
        m[(1, 3)],
        m[(2, 3)],
        m[(2, 1)],
        m[(0, 2)],
        m[(1, 0)],
    )))
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation::identity(),
            position: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, position: Vector3<f64>) -> Self {
        Self { rotation, position }
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), position)
    }

    pub fn from_rotation(rotation: Rotation) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Homogeneous 4×4 form.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    /// Reads the rotation/translation blocks; the bottom row is ignored.
    pub fn from_homogeneous_unchecked(m: &Matrix4<f64>) -> Self {
        Self {
            rotation: Rotation(m.fixed_view::<3, 3>(0, 0).into_owned()),
            position: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            position: self.rotation.apply(&other.position) + self.position,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            position: -rt.apply(&self.position),
        }
    }

    /// Maps a point expressed in this frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) + self.position
    }

    /// `Ad_g` for the `[linear; angular]` ordering: `[[R, [p]R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(skew(&self.position) * r));
        ad
    }

    /// Re-expresses a twist given in the child frame in the parent frame.
    pub fn transform_twist(&self, t: &Twist) -> Twist {
        let w = self.rotation.apply(&t.angular());
        let v = self.rotation.apply(&t.linear()) + self.position.cross(&w);
        Twist::new(v, w)
    }

    pub fn orthonormalized(&self) -> Pose {
        Pose {
            rotation: self.rotation.orthonormalized(),
            position: self.position,
        }
    }

    /// Max absolute entry-wise difference of homogeneous forms.
    pub fn distance_inf(&self, other: &Pose) -> f64 {
        (self.to_homogeneous() - other.to_homogeneous()).amax()
    }
}

/// `exp([t] dt)` in closed form. Negative `dt` gives the inverse flow, which
/// forward kinematics relies on for negative joint angles.
pub fn exp_se3(t: &Twist, dt: f64) -> Pose {
    let w = t.angular() * dt;
    let v = t.linear() * dt;
    let theta = w.norm();
    let k = skew(&w);
    let k2 = k * k;
    let (a, b, c) = if theta < SMALL_ANGLE {
        (1.0, 0.5, 1.0 / 6.0)
    } else {
        (
            theta.sin() / theta,
            half_versine_coeff(theta),
            third_order_coeff(theta),
        )
    };
    let rotation = Rotation(Matrix3::identity() + k * a + k2 * b);
    let left_jac = Matrix3::identity() + k * b + k2 * c;
    Pose {
        rotation,
        position: left_jac * v,
    }
}

/// Right-multiplies a pose by exponentials and bounds rotation drift by
/// re-orthonormalizing every [`REORTHONORMALIZE_EVERY`] compositions.
#[derive(Clone, Debug)]
pub struct PoseIntegrator {
    pose: Pose,
    since_projection: usize,
}

impl PoseIntegrator {
    pub fn new(pose: Pose) -> Self {
        Self {
            pose,
            since_projection: 0,
        }
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    /// `pose ← pose · exp([t] dt)`.
    pub fn advance_body(&mut self, t: &Twist, dt: f64) {
        self.apply(&exp_se3(t, dt));
    }

    pub fn apply(&mut self, increment: &Pose) {
        self.pose = self.pose.compose(increment);
        self.since_projection += 1;
        if self.since_projection >= REORTHONORMALIZE_EVERY {
            self.pose = self.pose.orthonormalized();
            self.since_projection = 0;
        }
    }
}
