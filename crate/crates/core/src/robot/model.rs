use super::RobotError;
use crate::se3::{exp_se3, skew, Pose, Rotation, Twist};
use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

/// Current version of the model definition file.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Mass properties of one rigid body, expressed in its body frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidBody {
    pub mass: f64,
    pub com: Vector3<f64>,
    /// Rotational inertia about the center of mass.
    pub inertia: Matrix3<f64>,
}

impl RigidBody {
    /// 6×6 spatial inertia at the body-frame origin for `[linear; angular]`
    /// twists: `[[m I, −m[c]], [m[c], I_c − m[c][c]]]`.
    pub fn spatial_inertia(&self) -> Matrix6<f64> {
        let c = skew(&self.com);
        let m = self.mass;
        let mut g = Matrix6::zeros();
        g.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(Matrix3::identity() * m));
        g.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-c * m));
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(c * m));
        g.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(self.inertia - c * c * m));
        g
    }

    /// Solid cylinder of radius `r` and length `len` along the local z axis,
    /// centered at `com`.
    pub fn cylinder(mass: f64, r: f64, len: f64, com: Vector3<f64>) -> Self {
        let side = mass * (3.0 * r * r + len * len) / 12.0;
        Self {
            mass,
            com,
            inertia: Matrix3::from_diagonal(&Vector3::new(side, side, 0.5 * mass * r * r)),
        }
    }

    /// Solid cube of side `s` centered on the frame origin.
    pub fn cube(mass: f64, s: f64) -> Self {
        let i = mass * s * s / 6.0;
        Self {
            mass,
            com: Vector3::zeros(),
            inertia: Matrix3::from_diagonal_element(i),
        }
    }

    fn validate(&self, what: &str) -> Result<(), RobotError> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(RobotError::InvalidModel(format!("{what}: mass must be > 0")));
        }
        if (self.inertia - self.inertia.transpose()).amax() > 1e-9 * self.inertia.amax().max(1.0)
        {
            return Err(RobotError::InvalidModel(format!("{what}: inertia not symmetric")));
        }
        if self.inertia.cholesky().is_none() {
            return Err(RobotError::InvalidModel(format!(
                "{what}: inertia not positive definite"
            )));
        }
        Ok(())
    }
}

/// Serial manipulator on a free-floating base.
///
/// `screw_axes[i]` and `zero_poses[i]` are expressed in the base frame at the
/// zero configuration; `zero_poses[n]` is the end-effector frame.
/// `bodies[0]` is the base, `bodies[i]` is the link rigidly attached to joint
/// frame `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManipulatorModel {
    pub name: String,
    pub screw_axes: Vec<Twist>,
    pub zero_poses: Vec<Pose>,
    pub bodies: Vec<RigidBody>,
    pub link_samples: usize,
}

impl ManipulatorModel {
    pub fn dof(&self) -> usize {
        self.screw_axes.len()
    }

    pub fn validate(&self) -> Result<(), RobotError> {
        let n = self.dof();
        if n < 7 {
            return Err(RobotError::InvalidModel(format!(
                "at least 7 joints required, found {n}"
            )));
        }
        if self.zero_poses.len() != n + 1 {
            return Err(RobotError::InvalidModel(format!(
                "expected {} zero poses, found {}",
                n + 1,
                self.zero_poses.len()
            )));
        }
        if self.bodies.len() != n + 1 {
            return Err(RobotError::InvalidModel(format!(
                "expected {} bodies, found {}",
                n + 1,
                self.bodies.len()
            )));
        }
        if self.link_samples < 1 {
            return Err(RobotError::InvalidModel("link_samples must be >= 1".into()));
        }
        for (i, s) in self.screw_axes.iter().enumerate() {
            if !s.0.iter().all(|v| v.is_finite()) {
                return Err(RobotError::InvalidModel(format!("joint {}: non-finite screw", i + 1)));
            }
            let w = s.angular().norm();
            let dominant = if w > 1e-12 { w } else { s.linear().norm() };
            if (dominant - 1.0).abs() > 1e-9 {
                return Err(RobotError::InvalidModel(format!(
                    "joint {}: screw axis not unit on its dominant block",
                    i + 1
                )));
            }
        }
        for (i, p) in self.zero_poses.iter().enumerate() {
            if !p.rotation.is_valid() || !p.position.iter().all(|v| v.is_finite()) {
                return Err(RobotError::InvalidModel(format!("zero pose {}: invalid", i + 1)));
            }
        }
        for (i, b) in self.bodies.iter().enumerate() {
            b.validate(&if i == 0 { "base".to_string() } else { format!("link {i}") })?;
        }
        Ok(())
    }

    /// Copy with every link mass scaled by `factor` (the base is untouched).
    pub fn with_link_mass_scale(&self, factor: f64) -> Self {
        let mut m = self.clone();
        for b in m.bodies.iter_mut().skip(1) {
            b.mass *= factor;
            b.inertia *= factor;
        }
        m
    }

    pub fn from_toml_str(text: &str) -> Result<Self, RobotError> {
        let file: ModelFile =
            toml::from_str(text).map_err(|e| RobotError::ModelParse(e.to_string()))?;
        file.into_model()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&ModelFile::from_model(self)).expect("model serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, RobotError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RobotError::ModelParse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The shipped 7-DOF arm on a cubic base.
    pub fn kuka_iiwa_like() -> Self {
        KukaLikeGeometry::default().build()
    }
}

/// Straight-chain description of the default arm. Joint frames are aligned
/// with the base in the straight pose; the model's zero configuration is the
/// straight pose bent by `home`. The end-effector frame is aligned with the
/// base in that zero configuration.
///
/// Masses and link lengths approximate a 7-DOF LBR iiwa; they are not vendor
/// data.
#[derive(Clone, Debug)]
pub struct KukaLikeGeometry {
    pub base_mass: f64,
    pub base_side: f64,
    /// Joint origins in the base frame for the straight pose.
    pub joint_origins: Vec<Vector3<f64>>,
    pub joint_axes: Vec<Vector3<f64>>,
    pub ee_origin: Vector3<f64>,
    pub link_masses: Vec<f64>,
    pub link_radius: f64,
    pub home: Vec<f64>,
    pub link_samples: usize,
}

impl Default for KukaLikeGeometry {
    fn default() -> Self {
        let top = 0.5;
        let heights = [0.1575, 0.36, 0.56, 0.78, 0.98, 1.18, 1.26];
        Self {
            base_mass: 100.0,
            base_side: 1.0,
            joint_origins: heights
                .iter()
                .map(|h| Vector3::new(0.0, 0.0, top + h))
                .collect(),
            joint_axes: vec![
                Vector3::z(),
                Vector3::y(),
                Vector3::z(),
                -Vector3::y(),
                Vector3::z(),
                Vector3::y(),
                Vector3::z(),
            ],
            ee_origin: Vector3::new(0.0, 0.0, top + 1.38),
            link_masses: vec![3.45, 3.48, 4.06, 3.48, 2.16, 2.35, 1.2],
            link_radius: 0.06,
            home: vec![0.0, 1.1, 0.0, 1.5, 0.0, -1.2, 0.0],
            link_samples: 4,
        }
    }
}

impl KukaLikeGeometry {
    /// Builds the product-of-exponentials model bent into the home pose.
    pub fn build(&self) -> ManipulatorModel {
        let n = self.joint_axes.len();
        let mut screws = Vec::with_capacity(n);
        let mut zero_poses = Vec::with_capacity(n + 1);
        let mut prefix = Pose::identity();
        let mut bodies = vec![RigidBody::cube(self.base_mass, self.base_side)];
        for i in 0..n {
            let straight_screw = Twist::revolute(&self.joint_axes[i], &self.joint_origins[i]);
            screws.push(Twist(prefix.adjoint() * straight_screw.0));
            prefix = prefix.compose(&exp_se3(&straight_screw, self.home[i]));
            zero_poses.push(prefix.compose(&Pose::from_translation(self.joint_origins[i])));
            let next = if i + 1 < n {
                self.joint_origins[i + 1]
            } else {
                self.ee_origin
            };
            let len = (next - self.joint_origins[i]).norm();
            bodies.push(RigidBody::cylinder(
                self.link_masses[i],
                self.link_radius,
                len,
                Vector3::new(0.0, 0.0, 0.5 * len),
            ));
        }
        // tool frame axis-aligned with the base at home, away from the Euler
        // singularity used in the observation
        zero_poses.push(Pose::from_translation(prefix.transform_point(&self.ee_origin)));
        ManipulatorModel {
            name: "kuka-iiwa-like-7dof".into(),
            screw_axes: screws,
            zero_poses,
            bodies,
            link_samples: self.link_samples,
        }
    }

    /// Straight-pose offset from joint `i` (0-based) to the next frame.
    pub fn link_offset(&self, i: usize) -> Vector3<f64> {
        let next = if i + 1 < self.joint_origins.len() {
            self.joint_origins[i + 1]
        } else {
            self.ee_origin
        };
        next - self.joint_origins[i]
    }
}

#[derive(Serialize, Deserialize)]
struct PoseEntry {
    rotation: [[f64; 3]; 3],
    position: [f64; 3],
}

impl PoseEntry {
    fn from_pose(p: &Pose) -> Self {
        let r = p.rotation.matrix();
        Self {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            position: p.position.into(),
        }
    }

    fn to_pose(&self) -> Pose {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        Pose::new(
            Rotation::from_matrix_unchecked(r),
            Vector3::from(self.position),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct BodyEntry {
    mass: f64,
    com: [f64; 3],
    inertia: [[f64; 3]; 3],
}

impl BodyEntry {
    fn from_body(b: &RigidBody) -> Self {
        let i = &b.inertia;
        Self {
            mass: b.mass,
            com: b.com.into(),
            inertia: [
                [i[(0, 0)], i[(0, 1)], i[(0, 2)]],
                [i[(1, 0)], i[(1, 1)], i[(1, 2)]],
                [i[(2, 0)], i[(2, 1)], i[(2, 2)]],
            ],
        }
    }

    fn to_body(&self) -> RigidBody {
        RigidBody {
            mass: self.mass,
            com: Vector3::from(self.com),
            inertia: Matrix3::from_fn(|i, j| self.inertia[i][j]),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JointEntry {
    screw: [f64; 6],
    zero_pose: PoseEntry,
    link: BodyEntry,
}

#[derive(Serialize, Deserialize)]
struct EndEffectorEntry {
    zero_pose: PoseEntry,
}

/// On-disk model definition (TOML).
#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    name: String,
    link_samples: usize,
    base: BodyEntry,
    joint: Vec<JointEntry>,
    end_effector: EndEffectorEntry,
}

impl ModelFile {
    fn from_model(m: &ManipulatorModel) -> Self {
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            name: m.name.clone(),
            link_samples: m.link_samples,
            base: BodyEntry::from_body(&m.bodies[0]),
            joint: (0..m.dof())
                .map(|i| JointEntry {
                    screw: m.screw_axes[i].0.into(),
                    zero_pose: PoseEntry::from_pose(&m.zero_poses[i]),
                    link: BodyEntry::from_body(&m.bodies[i + 1]),
                })
                .collect(),
            end_effector: EndEffectorEntry {
                zero_pose: PoseEntry::from_pose(&m.zero_poses[m.dof()]),
            },
        }
    }

    fn into_model(self) -> Result<ManipulatorModel, RobotError> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(RobotError::UnsupportedSchema(self.schema_version));
        }
        let mut zero_poses: Vec<Pose> = self.joint.iter().map(|j| j.zero_pose.to_pose()).collect();
        zero_poses.push(self.end_effector.zero_pose.to_pose());
        let mut bodies = vec![self.base.to_body()];
        bodies.extend(self.joint.iter().map(|j| j.link.to_body()));
        let model = ManipulatorModel {
            name: self.name,
            screw_axes: self.joint.iter().map(|j| Twist::from_slice(&j.screw)).collect(),
            zero_poses,
            bodies,
            link_samples: self.link_samples,
        };
        model.validate()?;
        Ok(model)
    }
}
