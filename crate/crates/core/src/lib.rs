pub mod agent;
pub mod control;
pub mod env;
pub mod harness;
pub mod nn;
pub mod robot;
pub mod se3;
