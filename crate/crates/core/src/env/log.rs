use super::{StateVector, StepOutcome};
use crate::se3::Twist;
use serde::Serialize;
use std::io::{self, Write};

pub const LOG_SCHEMA_VERSION: u32 = 1;

/// One JSONL line per environment step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub schema_version: u32,
    pub episode: u64,
    pub step: usize,
    pub state_hash: String,
    pub action: [f64; 6],
    pub r_c: f64,
    pub r_o: f64,
    pub captured: bool,
    pub collided: bool,
    pub terminal: bool,
    pub truncated: bool,
    pub pose_error: f64,
    pub lambda: f64,
    pub singularity_potential: f64,
    pub min_obstacle_distance: Option<f64>,
    pub momentum_residual: f64,
    pub rate_clamped_substeps: usize,
    pub basis_sign_flips: usize,
    pub action_clipped: bool,
    pub fault: Option<String>,
}

impl StepRecord {
    pub fn new(episode: u64, step: usize, action: &Twist, outcome: &StepOutcome) -> Self {
        let d = &outcome.diagnostics;
        let mut a = [0.0; 6];
        a.copy_from_slice(action.0.as_slice());
        Self {
            schema_version: LOG_SCHEMA_VERSION,
            episode,
            step,
            state_hash: outcome.next_state.hash_hex(),
            action: a,
            r_c: outcome.r_c,
            r_o: outcome.r_o,
            captured: outcome.captured,
            collided: outcome.collided,
            terminal: outcome.terminal,
            truncated: outcome.truncated,
            pose_error: d.pose_error,
            lambda: d.lambda,
            singularity_potential: d.singularity_potential,
            min_obstacle_distance: d.min_obstacle_distance,
            momentum_residual: d.momentum_residual,
            rate_clamped_substeps: d.rate_clamped_substeps,
            basis_sign_flips: d.basis_sign_flips,
            action_clipped: d.action_clipped,
            fault: d.fault.clone(),
        }
    }
}

pub struct StepLogger<W: Write> {
    out: W,
}

impl<W: Write> StepLogger<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn log(&mut self, record: &StepRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    /// Marks an episode start with the hash of its initial state.
    pub fn log_reset(&mut self, episode: u64, seed: u64, state: &StateVector) -> io::Result<()> {
        let line = serde_json::json!({
            "schema_version": LOG_SCHEMA_VERSION,
            "episode": episode,
            "reset_seed": seed,
            "state_hash": state.hash_hex(),
        });
        serde_json::to_writer(&mut self.out, &line)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
