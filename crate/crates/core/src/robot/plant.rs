use super::{ArmSnapshot, JointState, ManipulatorModel, RobotError};
use crate::se3::{Pose, PoseIntegrator, Twist};
use nalgebra::DVector;
use std::sync::Arc;

/// Velocity-resolved free-floating arm: joint rates are commanded and the base
/// twist follows from zero total momentum.
#[derive(Clone, Debug)]
pub struct FloatingArm {
    model: Arc<ManipulatorModel>,
    joints: JointState,
    base: PoseIntegrator,
    base_twist: Twist,
}

impl FloatingArm {
    pub fn new(
        model: Arc<ManipulatorModel>,
        phi: DVector<f64>,
        base_pose: Pose,
    ) -> Result<Self, RobotError> {
        if phi.len() != model.dof() {
            return Err(RobotError::DimensionMismatch {
                expected: model.dof(),
                got: phi.len(),
            });
        }
        Ok(Self {
            joints: JointState::at_rest(phi),
            model,
            base: PoseIntegrator::new(base_pose),
            base_twist: Twist::zero(),
        })
    }

    pub fn model(&self) -> &ManipulatorModel {
        &self.model
    }

    pub fn shared_model(&self) -> &Arc<ManipulatorModel> {
        &self.model
    }

    pub fn joints(&self) -> &JointState {
        &self.joints
    }

    pub fn base_pose(&self) -> &Pose {
        self.base.pose()
    }

    pub fn base_twist(&self) -> &Twist {
        &self.base_twist
    }

    pub fn snapshot(&self) -> Result<ArmSnapshot, RobotError> {
        ArmSnapshot::compute(&self.model, &self.joints.phi)
    }

    /// Inertial pose of the end effector for a snapshot taken at the current
    /// configuration.
    pub fn ee_world_pose(&self, snap: &ArmSnapshot) -> Pose {
        self.base.pose().compose(snap.end_effector())
    }

    /// Inertial poses of joint frames `1..n` and the end effector.
    pub fn world_poses(&self, snap: &ArmSnapshot) -> Vec<Pose> {
        super::world_poses(self.base.pose(), &snap.body_poses)
    }

    /// Applies `phi_dot` for `dt` seconds with `V_b = J_bm φ̇` evaluated at the
    /// current configuration. Returns `‖M_b V_b + M_bm φ̇‖`.
    pub fn apply_joint_rates(&mut self, phi_dot: &DVector<f64>, snap: &ArmSnapshot, dt: f64) -> f64 {
        let v_b = Twist(&snap.jacobians.j_bm * phi_dot);
        let residual = snap.mass.momentum(&v_b, phi_dot).norm();
        self.base.advance_body(&v_b, dt);
        self.joints.phi += phi_dot * dt;
        self.joints.phi_dot.copy_from(phi_dot);
        self.base_twist = v_b;
        residual
    }
}
