//! Free-floating manipulator model, kinematics and momentum coupling.

mod kinematics;
mod model;
mod plant;

pub use kinematics::*;
pub use model::*;
pub use plant::FloatingArm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobotError {
    #[error("joint vector has length {got}, model has {expected} joints")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("configuration is near singular (manipulability {manipulability:e})")]
    NearSingular { manipulability: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("cannot parse model file: {0}")]
    ModelParse(String),
    #[error("unsupported model schema version {0}")]
    UnsupportedSchema(u32),
}
