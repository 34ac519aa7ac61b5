use super::HarnessError;
use crate::agent::{PerConfig, Td3Config};
use crate::control::{
    validate_gains, ControllerGains, ControllerSettings, SingularityConfig, TrackingController,
};
use crate::env::{EnvConfig, Task};
use crate::robot::ManipulatorModel;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variable that replaces `output_dir` when set.
pub const OUTPUT_ENV_VAR: &str = "CAPTURE_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub k_p: [f64; 6],
    pub k_d: [f64; 6],
    pub k_i: [f64; 6],
    pub k_lambda: f64,
    pub k_v: f64,
    /// Manipulability threshold; defaults to 10% of the zero-configuration value.
    pub lambda_lim: Option<f64>,
    pub max_joint_rate: f64,
    pub e_lim: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let s = ControllerSettings::default();
        Self {
            k_p: [9.5; 6],
            k_d: [4.5, 4.5, 4.5, 8.0, 8.0, 8.0],
            k_i: [7.5; 6],
            k_lambda: 50.0,
            k_v: 10.0,
            lambda_lim: None,
            max_joint_rate: s.max_joint_rate,
            e_lim: s.e_lim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Evaluation episode `i` resets the environment with seed `seed_base + i`.
    pub seed_base: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            seed_base: 1_000_000,
        }
    }
}

/// Top-level layout of an experiment file. Subsystem tables are merged over
/// the task defaults before they are typed.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    schema_version: u32,
    task: u8,
    model: Option<PathBuf>,
    episodes: usize,
    seeds: Vec<u64>,
    output_dir: PathBuf,
    #[serde(default)]
    checkpoint_every: usize,
    #[serde(default)]
    start_steps: usize,
    warmup: Option<usize>,
    #[serde(default = "one")]
    train_every: usize,
    #[serde(default = "one")]
    gradient_steps: usize,
    capture_checkpoint: Option<String>,
    #[serde(default)]
    eval: EvalConfig,
    controller: Option<toml::Table>,
    env: Option<toml::Table>,
    td3: Option<toml::Table>,
    per: Option<toml::Table>,
}

fn one() -> usize {
    1
}

/// Fully resolved and validated experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: Arc<ManipulatorModel>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many episodes (0: only the final one).
    pub checkpoint_every: usize,
    /// Uniformly random actions for this many initial environment steps.
    pub start_steps: usize,
    /// Transitions required in the replay buffer before training starts.
    pub warmup: usize,
    /// Environment steps per gradient step.
    pub train_every: usize,
    /// Gradient steps taken each time training runs.
    pub gradient_steps: usize,
    /// First-task checkpoint for the second task, relative paths already
    /// resolved; `{seed}` is replaced by the run seed.
    pub capture_checkpoint: Option<String>,
    pub eval: EvalConfig,
    pub controller: ControllerConfig,
    pub singularity: SingularityConfig,
    pub env: EnvConfig,
    pub td3: Td3Config,
    pub per: PerConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn layered<T>(defaults: &T, over: Option<toml::Table>, section: &str) -> Result<T, HarnessError>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let invalid = |e: String| HarnessError::ConfigInvalid(format!("[{section}] {e}"));
    let mut base = toml::Table::try_from(defaults).map_err(|e| invalid(e.to_string()))?;
    if let Some(over) = over {
        merge(&mut base, over);
    }
    base.try_into().map_err(|e: toml::de::Error| invalid(e.message().to_string()))
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ConfigInvalid(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let file: ExperimentFile = toml::from_str(text).map_err(|e| invalid(e.message().to_string()))?;
        if file.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        let task = Task::try_from(file.task).map_err(invalid)?;
        let model = match &file.model {
            Some(p) => {
                let path = base_dir.join(p);
                ManipulatorModel::load(&path).map_err(|e| invalid(format!("model {}: {e}", path.display())))?
            }
            None => ManipulatorModel::kuka_iiwa_like(),
        };
        model.validate().map_err(|e| invalid(e.to_string()))?;
        if model.dof() <= 6 {
            return Err(invalid("the manipulator needs more than 6 joints for nullspace control"));
        }

        let controller: ControllerConfig = layered(&ControllerConfig::default(), file.controller, "controller")?;
        let gains = ControllerGains::from_diagonals(&controller.k_p, &controller.k_d, &controller.k_i);
        let report = validate_gains(&gains).map_err(|e| invalid(e.to_string()))?;
        if !report.is_ok() {
            return Err(invalid(format!("controller gains: {}", report.violations().join("; "))));
        }
        if !(controller.k_lambda > 0.0 && controller.k_v > 0.0) {
            return Err(invalid("k_lambda and k_v must be positive"));
        }
        if !(controller.max_joint_rate > 0.0 && controller.e_lim > 0.0) {
            return Err(invalid("max_joint_rate and e_lim must be positive"));
        }
        let mut singularity = SingularityConfig::for_model(&model, controller.k_lambda, controller.k_v)
            .map_err(|e| invalid(e.to_string()))?;
        if let Some(l) = controller.lambda_lim {
            if !(l > 0.0) {
                return Err(invalid("lambda_lim must be positive"));
            }
            singularity.lambda_lim = l;
        }

        let env: EnvConfig = layered(&EnvConfig::for_task(task, singularity.lambda_lim), file.env, "env")?;
        env.validate().map_err(|e| invalid(e.to_string()))?;

        if file.td3.as_ref().is_some_and(|t| t.contains_key("action_bounds")) {
            return Err(invalid("action bounds are set in [env], not [td3]"));
        }
        let mut td3: Td3Config = layered(&Td3Config::default(), file.td3, "td3")?;
        td3.action_bounds = env.action_bounds;
        td3.validate().map_err(|e| invalid(e.to_string()))?;

        let per_defaults = PerConfig {
            enabled: task == Task::Avoidance,
            ..Default::default()
        };
        let per: PerConfig = layered(&per_defaults, file.per, "per")?;
        per.validate().map_err(invalid)?;

        if file.seeds.is_empty() {
            return Err(invalid("seeds must list at least one seed"));
        }
        if file.train_every == 0 || file.gradient_steps == 0 {
            return Err(invalid("train_every and gradient_steps must be at least 1"));
        }
        let warmup = file.warmup.unwrap_or(td3.batch_size);
        if warmup < td3.batch_size {
            return Err(invalid(format!("warmup {warmup} is smaller than batch_size {}", td3.batch_size)));
        }
        if task == Task::Tracking && file.capture_checkpoint.is_some() {
            return Err(invalid("capture_checkpoint only applies to task 2"));
        }
        let output_dir = match std::env::var_os(OUTPUT_ENV_VAR) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => base_dir.join(&file.output_dir),
        };
        Ok(Self {
            task,
            model: Arc::new(model),
            episodes: file.episodes,
            seeds: file.seeds,
            output_dir,
            checkpoint_every: file.checkpoint_every,
            start_steps: file.start_steps,
            warmup,
            train_every: file.train_every,
            gradient_steps: file.gradient_steps,
            capture_checkpoint: file
                .capture_checkpoint
                .map(|t| base_dir.join(t).to_string_lossy().into_owned()),
            eval: file.eval,
            controller,
            singularity,
            env,
            td3,
            per,
        })
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn controller(&self) -> TrackingController {
        let c = &self.controller;
        TrackingController::new(
            ControllerGains::from_diagonals(&c.k_p, &c.k_d, &c.k_i),
            self.singularity.clone(),
            ControllerSettings {
                max_joint_rate: c.max_joint_rate,
                e_lim: c.e_lim,
            },
        )
    }

    /// Output directory of one seed.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed_{seed}"))
    }

    pub fn capture_checkpoint_for(&self, seed: u64) -> Option<PathBuf> {
        self.capture_checkpoint
            .as_ref()
            .map(|t| PathBuf::from(t.replace("{seed}", &seed.to_string())))
    }
}
