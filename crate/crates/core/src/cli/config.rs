//! Flat TOML run configuration with command-line overrides.
//!
//! Each subcommand has one flat, typed table. Values come from the struct
//! defaults, then the config file, then `--set key=value` and dedicated
//! flags. Every unknown key, mistyped value and failed check is reported in
//! one error.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::exec::{Cadence, ExecMode};
use crate::sim::{EpisodeConfig, TaskMode};

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{text}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::invalid(format!("override `{text}` has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Merges file contents and overrides, then deserializes field by field so
/// all problems surface together.
pub fn resolve<T>(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<T>
where
    T: DeserializeOwned + Validate,
{
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.parse::<Table>()
                .map_err(|e| Error::Config(vec![format!("{}: {}", path.display(), e.message())]))?
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    let mut problems = Vec::new();
    for (k, v) in &table {
        let mut single = Table::new();
        single.insert(k.clone(), v.clone());
        if let Err(e) = T::deserialize(Value::Table(single)) {
            problems.push(format!("{k}: {}", e.message().trim()));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let cfg = T::deserialize(Value::Table(table)).map_err(|e| Error::Config(vec![e.message().trim().to_string()]))?;
    let v = cfg.violations();
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(v))
    }
}

pub trait Validate {
    fn violations(&self) -> Vec<String>;
}

fn positive(v: &mut Vec<String>, name: &str, x: usize) {
    if x == 0 {
        v.push(format!("{name} must be >= 1"));
    }
}

/// Plant and expert settings shared by several subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvKeys {
    pub task: TaskMode,
    pub horizon: usize,
    pub noise_sigma: f64,
    pub rotation_period: f64,
    pub control_rate: f64,
    pub dwell_ticks: usize,
    pub success_radius_frac: f64,
}

impl Default for EnvKeys {
    fn default() -> Self {
        let e = EpisodeConfig::default();
        Self {
            task: TaskMode::Dynamic,
            horizon: e.horizon,
            noise_sigma: e.noise_sigma,
            rotation_period: e.rotation_period,
            control_rate: e.control_rate,
            dwell_ticks: e.dwell_ticks,
            success_radius_frac: e.success_radius_frac,
        }
    }
}

impl EnvKeys {
    pub fn episode_config(&self, seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            mode: self.task,
            horizon: self.horizon,
            noise_sigma: self.noise_sigma,
            rotation_period: self.rotation_period,
            control_rate: self.control_rate,
            dwell_ticks: self.dwell_ticks,
            success_radius_frac: self.success_radius_frac,
            seed,
            ..EpisodeConfig::default()
        }
    }
}

macro_rules! env_fields {
    ($name:ident { $($(#[$meta:meta])* $field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            $($(#[$meta])* pub $field: $ty,)*
            pub task: TaskMode,
            pub horizon: usize,
            pub noise_sigma: f64,
            pub rotation_period: f64,
            pub control_rate: f64,
            pub dwell_ticks: usize,
            pub success_radius_frac: f64,
        }

        impl Default for $name {
            fn default() -> Self {
                let env = EnvKeys::default();
                Self {
                    $($field: $default,)*
                    task: env.task,
                    horizon: env.horizon,
                    noise_sigma: env.noise_sigma,
                    rotation_period: env.rotation_period,
                    control_rate: env.control_rate,
                    dwell_ticks: env.dwell_ticks,
                    success_radius_frac: env.success_radius_frac,
                }
            }
        }

        impl $name {
            pub fn env(&self) -> EnvKeys {
                EnvKeys {
                    task: self.task,
                    horizon: self.horizon,
                    noise_sigma: self.noise_sigma,
                    rotation_period: self.rotation_period,
                    control_rate: self.control_rate,
                    dwell_ticks: self.dwell_ticks,
                    success_radius_frac: self.success_radius_frac,
                }
            }
        }
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub input: PathBuf,
    pub n_ctrl: usize,
    pub degree: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            n_ctrl: 8,
            degree: 3,
        }
    }
}

impl Validate for FitConfig {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.input.as_os_str().is_empty() {
            v.push("input is required".into());
        }
        positive(&mut v, "degree", self.degree);
        if self.n_ctrl < self.degree + 1 {
            v.push(format!("n_ctrl {} below degree + 1", self.n_ctrl));
        }
        v
    }
}

env_fields!(GenDemosConfig {
    seed: u64 = 0,
    episodes: usize = 100,
    name: String = "default".into(),
    history: usize = 8,
    future: usize = 32,
    n_ctrl: usize = 8,
    degree: usize = 3,
});

impl GenDemosConfig {
    pub fn spec(&self) -> crate::flow::BiapChunkSpec {
        crate::flow::BiapChunkSpec {
            history: self.history,
            future: self.future,
            n_ctrl: self.n_ctrl,
            degree: self.degree,
        }
    }
}

impl Validate for GenDemosConfig {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        positive(&mut v, "episodes", self.episodes);
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            v.push(format!("name `{}` is not a plain directory name", self.name));
        }
        let spec = self.spec();
        v.extend(spec.violations());
        v.extend(self.env().episode_config(self.seed).violations(Some(&spec)));
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFileConfig {
    /// demo directory; empty means `<root>/demos/default`
    pub demos: PathBuf,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub log_every: usize,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        let t = crate::flow::TrainConfig::default();
        Self {
            demos: PathBuf::new(),
            seed: t.seed,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            hidden: t.hidden,
            log_every: t.log_every,
        }
    }
}

impl TrainFileConfig {
    pub fn train_config(&self) -> crate::flow::TrainConfig {
        crate::flow::TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            hidden: self.hidden.clone(),
            seed: self.seed,
            log_every: self.log_every,
            checkpoints: Vec::new(),
        }
    }
}

impl Validate for TrainFileConfig {
    fn violations(&self) -> Vec<String> {
        self.train_config().violations()
    }
}

env_fields!(BenchReprConfig {
    seed: u64 = 0,
    /// directory of trajectory CSVs; empty draws smooth expert windows
    input: PathBuf = PathBuf::new(),
    chunks: usize = 200,
    chunk_len: usize = 40,
    n_ctrl: usize = 8,
    degree: usize = 3,
    coeffs: usize = 8,
    bins: usize = 256,
});

impl Validate for BenchReprConfig {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        positive(&mut v, "chunks", self.chunks);
        positive(&mut v, "coeffs", self.coeffs);
        positive(&mut v, "degree", self.degree);
        if self.bins < 2 {
            v.push("bins must be >= 2".into());
        }
        if self.n_ctrl < self.degree + 1 {
            v.push(format!("n_ctrl {} below degree + 1", self.n_ctrl));
        }
        if self.chunk_len < self.n_ctrl.max(self.coeffs) {
            v.push("chunk_len must be at least n_ctrl and coeffs".into());
        }
        if self.input.as_os_str().is_empty() && self.chunk_len > self.horizon {
            v.push("chunk_len exceeds horizon".into());
        }
        v.extend(self.env().episode_config(self.seed).violations(None));
        v
    }
}

env_fields!(BenchSmoothConfig {
    seed: u64 = 0,
    /// demo directory to draw trajectories from; empty generates them
    demos: PathBuf = PathBuf::new(),
    trajectories: usize = 100,
    chunk_len: usize = 40,
    n_ctrl: usize = 8,
    degree: usize = 3,
});

impl Validate for BenchSmoothConfig {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        positive(&mut v, "trajectories", self.trajectories);
        positive(&mut v, "degree", self.degree);
        if self.n_ctrl < self.degree + 1 {
            v.push(format!("n_ctrl {} below degree + 1", self.n_ctrl));
        }
        if self.chunk_len < self.n_ctrl.max(3) {
            v.push("chunk_len must be at least n_ctrl and 3".into());
        }
        if self.demos.as_os_str().is_empty() && self.chunk_len > self.horizon {
            v.push("chunk_len exceeds horizon".into());
        }
        v.extend(self.env().episode_config(self.seed).violations(None));
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Flow,
    Expert,
}

env_fields!(RunSimConfig {
    seed: u64 = 0,
    episodes: usize = 20,
    mode: ExecMode = ExecMode::Async,
    refit: bool = true,
    latency_ticks: usize = 3,
    /// seconds; non-zero enables seeded jitter
    latency_jitter: f64 = 0.0,
    cadence: Cadence = Cadence::Continuous,
    policy: PolicyKind = PolicyKind::Flow,
    /// model artifact; empty means `<root>/train/model.json`
    model: PathBuf = PathBuf::new(),
    n_steps: usize = 10,
    planner_noise: f64 = 0.03,
    lambda: f64 = crate::refit::DEFAULT_LAMBDA,
    /// free control points per refit; 0 picks the history-support default
    n_free: usize = 0,
    wall_clock: bool = false,
});

impl Validate for RunSimConfig {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        positive(&mut v, "episodes", self.episodes);
        positive(&mut v, "n_steps", self.n_steps);
        if !(self.latency_jitter.is_finite() && self.latency_jitter >= 0.0) {
            v.push("latency_jitter must be >= 0".into());
        }
        if !(self.planner_noise.is_finite() && self.planner_noise >= 0.0) {
            v.push("planner_noise must be >= 0".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            v.push("lambda must be >= 0".into());
        }
        if self.wall_clock && self.mode == ExecMode::Sync {
            v.push("wall_clock requires mode = \"async\"".into());
        }
        v.extend(self.env().episode_config(self.seed).violations(None));
        v
    }
}
