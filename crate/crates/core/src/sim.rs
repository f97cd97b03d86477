//! Point-mass plant with a gripper, a scripted pursuit expert and the
//! demonstration dataset built from it.
//!
//! Actions are `[vx, vy, gripper]`: a velocity command in workspace units per
//! second and a gripper aperture in `[0, 1]`. The target either sits still or
//! moves along a circle around the workspace centre.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::ActionChunk;
use crate::error::{Error, Result};
use crate::flow::BiapChunkSpec;
use crate::seed::{derive_seed, stream_rng};
use crate::trajio::{self, sha256_hex};

pub const ACTION_DIM: usize = 3;
/// Plant states concatenated into one observation.
pub const OBS_HISTORY: usize = 8;
pub const STATE_FEATURES: usize = 7;
pub const OBS_DIM: usize = OBS_HISTORY * STATE_FEATURES;

// Aperture is 0 within GRIP_CLOSE of the target and 1 beyond GRIP_OPEN.
const GRIP_CLOSE: f64 = 0.02;
const GRIP_OPEN: f64 = 0.4;
const TARGET_MARGIN: f64 = 0.15;
const START_MARGIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Static,
    Dynamic,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(TaskMode::Static),
            "dynamic" => Ok(TaskMode::Dynamic),
            _ => Err(Error::invalid(format!("unknown task mode `{s}` (static|dynamic)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
        }
    }
}

impl Workspace {
    pub fn diagonal(&self) -> f64 {
        (self.max[0] - self.min[0]).hypot(self.max[1] - self.min[1])
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
        ]
    }

    fn sample_inside<R: Rng>(&self, margin: f64, rng: &mut R) -> [f64; 2] {
        [
            rng.random_range(self.min[0] + margin..self.max[0] - margin),
            rng.random_range(self.min[1] + margin..self.max[1] - margin),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub mode: TaskMode,
    /// seconds per revolution of the moving target
    pub rotation_period: f64,
    /// Hz
    pub control_rate: f64,
    pub horizon: usize,
    pub workspace: Workspace,
    /// expert noise standard deviation as a fraction of `max_speed`
    pub noise_sigma: f64,
    pub seed: u64,
    pub max_speed: f64,
    /// proportional gain of the pursuit term, 1/s
    pub pursuit_gain: f64,
    /// radius of the moving target's circle
    pub target_radius: f64,
    /// success radius as a fraction of the workspace diagonal
    pub success_radius_frac: f64,
    pub dwell_ticks: usize,
    pub min_start_distance: f64,
    /// upper bound on the noise-free expert's mean Acc p95, action-units/s²
    pub expert_acc_bound: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            mode: TaskMode::Static,
            rotation_period: 10.0,
            control_rate: 30.0,
            horizon: 180,
            workspace: Workspace::default(),
            noise_sigma: 0.03,
            seed: 0,
            max_speed: 0.6,
            pursuit_gain: 2.0,
            target_radius: 0.25,
            success_radius_frac: 0.02,
            dwell_ticks: 15,
            min_start_distance: 0.3,
            expert_acc_bound: 5.0,
        }
    }
}

impl EpisodeConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.control_rate
    }

    pub fn angular_rate(&self) -> f64 {
        2.0 * PI / self.rotation_period
    }

    pub fn success_radius(&self) -> f64 {
        self.success_radius_frac * self.workspace.diagonal()
    }

    /// All violated constraints, empty when valid.
    pub fn violations(&self, spec: Option<&BiapChunkSpec>) -> Vec<String> {
        let mut v = Vec::new();
        let positive = [
            ("rotation_period", self.rotation_period),
            ("control_rate", self.control_rate),
            ("max_speed", self.max_speed),
            ("pursuit_gain", self.pursuit_gain),
            ("success_radius_frac", self.success_radius_frac),
            ("expert_acc_bound", self.expert_acc_bound),
        ];
        for (name, x) in positive {
            if !(x.is_finite() && x > 0.0) {
                v.push(format!("{name} must be positive and finite, got {x}"));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            v.push(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.target_radius.is_finite() && self.target_radius >= 0.0) {
            v.push(format!("target_radius must be >= 0, got {}", self.target_radius));
        }
        if self.pursuit_gain * self.dt() >= 1.0 {
            v.push("pursuit_gain / control_rate must be below 1".into());
        }
        let ws = &self.workspace;
        let inner = 2.0 * TARGET_MARGIN.max(START_MARGIN);
        if !(0..2).all(|k| ws.max[k] - ws.min[k] > inner) {
            v.push(format!("workspace must be wider than {inner} along both axes"));
        } else {
            let half = (0..2)
                .map(|k| 0.5 * (ws.max[k] - ws.min[k]))
                .fold(f64::INFINITY, f64::min);
            if self.target_radius > half {
                v.push("target circle leaves the workspace".into());
            }
        }
        if self.dwell_ticks == 0 {
            v.push("dwell_ticks must be >= 1".into());
        }
        if self.dwell_ticks > self.horizon {
            v.push("dwell_ticks must not exceed horizon".into());
        }
        if let Some(spec) = spec {
            if self.horizon < spec.history + spec.future {
                v.push(format!(
                    "horizon {} shorter than one chunk ({} + {})",
                    self.horizon, spec.history, spec.future
                ));
            }
        }
        v
    }

    pub fn validate(&self, spec: Option<&BiapChunkSpec>) -> Result<()> {
        let v = self.violations(spec);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub gripper: f64,
    pub target_position: [f64; 2],
    pub target_phase: f64,
    pub tick: usize,
}

impl PlantState {
    pub fn distance_to_target(&self) -> f64 {
        (self.target_position[0] - self.position[0]).hypot(self.target_position[1] - self.position[1])
    }

    fn features(&self) -> [f64; STATE_FEATURES] {
        [
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
            self.gripper,
            self.target_position[0],
            self.target_position[1],
        ]
    }
}

fn circle_point(cfg: &EpisodeConfig, phase: f64) -> [f64; 2] {
    let c = cfg.workspace.center();
    [
        c[0] + cfg.target_radius * phase.cos(),
        c[1] + cfg.target_radius * phase.sin(),
    ]
}

fn circle_velocity(cfg: &EpisodeConfig, phase: f64) -> [f64; 2] {
    let s = cfg.target_radius * cfg.angular_rate();
    [-s * phase.sin(), s * phase.cos()]
}

/// Target position and velocity one control interval after `state`.
pub fn target_ahead(state: &PlantState, cfg: &EpisodeConfig) -> ([f64; 2], [f64; 2]) {
    match cfg.mode {
        TaskMode::Static => (state.target_position, [0.0, 0.0]),
        TaskMode::Dynamic => {
            let phase = state.target_phase + cfg.angular_rate() * cfg.dt();
            (circle_point(cfg, phase), circle_velocity(cfg, phase))
        }
    }
}

pub fn initial_state(cfg: &EpisodeConfig, episode_seed: u64) -> PlantState {
    let mut rng = stream_rng(episode_seed, "episode-init", 0);
    let ws = cfg.workspace;
    let (target_position, target_phase) = match cfg.mode {
        TaskMode::Static => (ws.sample_inside(TARGET_MARGIN, &mut rng), 0.0),
        TaskMode::Dynamic => {
            let phase = rng.random_range(0.0..2.0 * PI);
            (circle_point(cfg, phase), phase)
        }
    };
    let mut position = ws.sample_inside(START_MARGIN, &mut rng);
    // bounded retries; a tiny workspace falls back to the last draw
    for _ in 0..1000 {
        let d = (position[0] - target_position[0]).hypot(position[1] - target_position[1]);
        if d >= cfg.min_start_distance {
            break;
        }
        position = ws.sample_inside(START_MARGIN, &mut rng);
    }
    PlantState {
        position,
        velocity: [0.0, 0.0],
        gripper: 1.0,
        target_position,
        target_phase,
        tick: 0,
    }
}

/// Advances the plant by one control interval. Non-finite command entries
/// are treated as zero.
pub fn step(state: &PlantState, action: &[f64], cfg: &EpisodeConfig) -> PlantState {
    let dt = cfg.dt();
    let cmd = |k: usize| {
        let x = action.get(k).copied().unwrap_or(0.0);
        if x.is_finite() {
            x
        } else {
            0.0
        }
    };
    let position = cfg.workspace.clamp([
        state.position[0] + cmd(0) * dt,
        state.position[1] + cmd(1) * dt,
    ]);
    let velocity = [
        (position[0] - state.position[0]) / dt,
        (position[1] - state.position[1]) / dt,
    ];
    let (target_position, target_phase) = match cfg.mode {
        TaskMode::Static => (state.target_position, state.target_phase),
        TaskMode::Dynamic => {
            let phase = state.target_phase + cfg.angular_rate() * dt;
            (circle_point(cfg, phase), phase)
        }
    };
    PlantState {
        position,
        velocity,
        gripper: cmd(2).clamp(0.0, 1.0),
        target_position,
        target_phase,
        tick: state.tick + 1,
    }
}

fn smootherstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

/// Noise-free expert command: target feed-forward plus saturated pursuit of
/// the target position one tick ahead, and an aperture that closes smoothly
/// on approach.
pub fn expert_command(state: &PlantState, cfg: &EpisodeConfig) -> [f64; ACTION_DIM] {
    let (aim, feed) = target_ahead(state, cfg);
    let e = [aim[0] - state.position[0], aim[1] - state.position[1]];
    let d = e[0].hypot(e[1]);
    let gain = if d > 0.0 {
        cfg.max_speed * (cfg.pursuit_gain * d / cfg.max_speed).tanh() / d
    } else {
        cfg.pursuit_gain
    };
    let aperture = smootherstep((d - GRIP_CLOSE) / (GRIP_OPEN - GRIP_CLOSE));
    [feed[0] + gain * e[0], feed[1] + gain * e[1], aperture]
}

pub fn expert_action<R: Rng>(state: &PlantState, cfg: &EpisodeConfig, rng: &mut R) -> [f64; ACTION_DIM] {
    let mut a = expert_command(state, cfg);
    if cfg.noise_sigma > 0.0 {
        let scales = [cfg.max_speed, cfg.max_speed, 1.0];
        for (x, s) in a.iter_mut().zip(scales) {
            let n: f64 = StandardNormal.sample(rng);
            *x += cfg.noise_sigma * s * n;
        }
    }
    a
}

/// Fixed-length feature vector from the most recent plant states (oldest
/// first); short histories repeat their earliest state.
pub fn observation(history: &[PlantState]) -> Vec<f64> {
    assert!(!history.is_empty(), "observation needs at least one state");
    let mut out = Vec::with_capacity(OBS_DIM);
    let n = history.len();
    for k in 0..OBS_HISTORY {
        let idx = (n + k).saturating_sub(OBS_HISTORY);
        out.extend_from_slice(&history[idx].features());
    }
    out
}

/// True when the last `dwell_ticks` states all lie within `radius` of their
/// target. `states` are the post-action states, one per tick.
pub fn success_with_radius(states: &[PlantState], dwell: usize, radius: f64) -> bool {
    dwell > 0
        && states.len() >= dwell
        && states[states.len() - dwell..]
            .iter()
            .all(|s| s.distance_to_target() <= radius)
}

pub fn success(states: &[PlantState], cfg: &EpisodeConfig) -> bool {
    success_with_radius(states, cfg.dwell_ticks, cfg.success_radius())
}

/// Number of ticks until the first run of `dwell_ticks` consecutive
/// in-radius states is complete.
pub fn completion_ticks(states: &[PlantState], cfg: &EpisodeConfig) -> Option<usize> {
    let r = cfg.success_radius();
    let mut run = 0;
    for (t, s) in states.iter().enumerate() {
        if s.distance_to_target() <= r {
            run += 1;
            if run >= cfg.dwell_ticks {
                return Some(t + 1);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Mean distance between end effector and target over post-action states.
pub fn tracking_error(states: &[PlantState]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    states.iter().map(PlantState::distance_to_target).sum::<f64>() / states.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub actions: ActionChunk,
    /// `states[t]` is the plant state at the start of tick `t`; one more
    /// entry than there are actions.
    pub states: Vec<PlantState>,
}

impl Episode {
    pub fn post_states(&self) -> &[PlantState] {
        &self.states[1..]
    }

    pub fn success(&self, cfg: &EpisodeConfig) -> bool {
        success(self.post_states(), cfg)
    }
}

pub fn episode_seed(root: u64, index: u64) -> u64 {
    derive_seed(root, "episode", index)
}

/// Re-simulates the plant from the episode seed under recorded actions.
pub fn replay(cfg: &EpisodeConfig, episode_seed: u64, actions: &ActionChunk) -> Vec<PlantState> {
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(initial_state(cfg, episode_seed));
    for t in 0..actions.len() {
        let next = step(&states[t], &actions.row(t), cfg);
        states.push(next);
    }
    states
}

pub fn rollout_expert(cfg: &EpisodeConfig, episode_seed: u64) -> Result<Episode> {
    let mut rng = stream_rng(episode_seed, "expert-noise", 0);
    let mut state = initial_state(cfg, episode_seed);
    let mut states = vec![state.clone()];
    let mut actions = DMatrix::zeros(cfg.horizon, ACTION_DIM);
    for t in 0..cfg.horizon {
        let a = expert_action(&state, cfg, &mut rng);
        for (j, v) in a.iter().enumerate() {
            actions[(t, j)] = *v;
        }
        state = step(&state, &a, cfg);
        states.push(state.clone());
    }
    Ok(Episode {
        seed: episode_seed,
        actions: ActionChunk::new(actions, cfg.dt())?,
        states,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoEpisode {
    pub seed: u64,
    pub file: String,
    pub ticks: usize,
    pub sha256: String,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub name: String,
    pub config: EpisodeConfig,
    pub chunk_spec: BiapChunkSpec,
    pub episodes: Vec<DemoEpisode>,
    /// training windows over all episodes
    pub chunk_count: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Windows of `history + future` ticks that fit in an episode of `ticks`.
pub fn windows_per_episode(ticks: usize, spec: &BiapChunkSpec) -> usize {
    (ticks + 1).saturating_sub(spec.history + spec.future)
}

/// Writes `n_episodes` expert trajectories and a manifest into `dir`.
pub fn generate_demos(
    cfg: &EpisodeConfig,
    spec: &BiapChunkSpec,
    n_episodes: usize,
    name: &str,
    dir: &Path,
) -> Result<DemoManifest> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be >= 1"));
    }
    cfg.validate(Some(spec))?;
    spec.validate()?;
    let rendered: Vec<(Episode, String)> = (0..n_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let ep = rollout_expert(cfg, episode_seed(cfg.seed, i))?;
            let csv = trajio::trajectory_csv(&ep.actions);
            Ok((ep, csv))
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut episodes = Vec::with_capacity(n_episodes);
    for (ep, csv) in &rendered {
        let file = format!("ep_{}.csv", ep.seed);
        let path = dir.join(&file);
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        episodes.push(DemoEpisode {
            seed: ep.seed,
            file,
            ticks: ep.actions.len(),
            sha256: sha256_hex(csv.as_bytes()),
            success: ep.success(cfg),
        });
    }
    let chunk_count = episodes
        .iter()
        .map(|e| windows_per_episode(e.ticks, spec))
        .sum();
    let manifest = DemoManifest {
        name: name.to_string(),
        config: cfg.clone(),
        chunk_spec: spec.clone(),
        episodes,
        chunk_count,
    };
    trajio::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a demo directory, checking digests and replaying plant states.
pub fn load_demos(dir: &Path) -> Result<(DemoManifest, Vec<Episode>)> {
    let manifest: DemoManifest = trajio::read_json(&dir.join(MANIFEST_FILE))?;
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for rec in &manifest.episodes {
        let path = dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != rec.sha256 {
            return Err(Error::format(&path, "digest does not match manifest"));
        }
        let text = String::from_utf8(bytes).map_err(|e| Error::format(&path, e.to_string()))?;
        let actions = trajio::parse_trajectory_csv(&path, &text)?;
        if actions.dims() != ACTION_DIM {
            return Err(Error::format(&path, format!("expected {ACTION_DIM} action columns")));
        }
        let states = replay(&manifest.config, rec.seed, &actions);
        episodes.push(Episode {
            seed: rec.seed,
            actions,
            states,
        });
    }
    Ok((manifest, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::acc_p95;

    fn dynamic() -> EpisodeConfig {
        EpisodeConfig {
            mode: TaskMode::Dynamic,
            ..EpisodeConfig::default()
        }
    }

    #[test]
    fn zero_action_static_keeps_state() {
        let cfg = EpisodeConfig::default();
        let s0 = initial_state(&cfg, 3);
        let s1 = step(&s0, &[0.0, 0.0, 1.0], &cfg);
        assert_eq!(s1.tick, 1);
        assert_eq!(PlantState { tick: 0, ..s1 }, s0);
    }

    #[test]
    fn target_completes_one_revolution_in_300_ticks() {
        let cfg = dynamic();
        let s0 = initial_state(&cfg, 11);
        let mut s = s0.clone();
        for _ in 0..300 {
            s = step(&s, &[0.0, 0.0, 0.0], &cfg);
        }
        assert!((s.target_phase - s0.target_phase - 2.0 * PI).abs() < 1e-9);
        assert!((s.target_position[0] - s0.target_position[0]).abs() < 1e-9);
        assert!((s.target_position[1] - s0.target_position[1]).abs() < 1e-9);
    }

    #[test]
    fn target_speed_is_constant() {
        let cfg = dynamic();
        let expected = 2.0 * PI * cfg.target_radius / cfg.rotation_period;
        let mut s = initial_state(&cfg, 5);
        for _ in 0..90 {
            let v = circle_velocity(&cfg, s.target_phase);
            assert!((v[0].hypot(v[1]) - expected).abs() < 1e-9);
            s = step(&s, &[0.0; 3], &cfg);
        }
    }

    #[test]
    fn position_is_cumulative_sum_of_commands() {
        let cfg = EpisodeConfig {
            workspace: Workspace {
                min: [-1e3, -1e3],
                max: [1e3, 1e3],
            },
            ..EpisodeConfig::default()
        };
        let mut rng = stream_rng(9, "test", 0);
        let mut s = initial_state(&cfg, 9);
        let mut sum = [0.0, 0.0];
        let start = s.position;
        for _ in 0..200 {
            let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5];
            sum[0] += a[0];
            sum[1] += a[1];
            s = step(&s, &a, &cfg);
        }
        let dt = cfg.dt();
        assert!((s.position[0] - (start[0] + sum[0] * dt)).abs() < 1e-9);
        assert!((s.position[1] - (start[1] + sum[1] * dt)).abs() < 1e-9);
    }

    #[test]
    fn position_stays_in_workspace() {
        let cfg = EpisodeConfig::default();
        let mut s = initial_state(&cfg, 1);
        for _ in 0..100 {
            s = step(&s, &[5.0, -7.0, 3.0], &cfg);
        }
        assert_eq!(s.position, [1.0, 0.0]);
        assert_eq!(s.gripper, 1.0);
    }

    #[test]
    fn expert_is_still_at_static_target() {
        let cfg = EpisodeConfig {
            noise_sigma: 0.0,
            ..EpisodeConfig::default()
        };
        let mut s = initial_state(&cfg, 2);
        s.position = s.target_position;
        let a = expert_action(&s, &cfg, &mut stream_rng(0, "unused", 0));
        assert!(a.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-6);
    }

    #[test]
    fn noise_free_rollouts_are_deterministic_and_smooth() {
        for mode in [TaskMode::Static, TaskMode::Dynamic] {
            let cfg = EpisodeConfig {
                mode,
                noise_sigma: 0.0,
                ..EpisodeConfig::default()
            };
            for i in 0..20 {
                let a = rollout_expert(&cfg, episode_seed(0, i)).unwrap();
                let b = rollout_expert(&cfg, episode_seed(0, i)).unwrap();
                assert_eq!(a, b);
                let acc = acc_p95(&a.actions).unwrap();
                let mean = acc.iter().sum::<f64>() / acc.len() as f64;
                assert!(mean < cfg.expert_acc_bound, "{mode:?} seed {i}: {mean}");
            }
        }
    }

    #[test]
    fn expert_succeeds_in_both_modes() {
        for mode in [TaskMode::Static, TaskMode::Dynamic] {
            let cfg = EpisodeConfig {
                mode,
                seed: 42,
                ..EpisodeConfig::default()
            };
            let wins = (0..100)
                .filter(|&i| {
                    rollout_expert(&cfg, episode_seed(cfg.seed, i))
                        .unwrap()
                        .success(&cfg)
                })
                .count();
            assert!(wins >= 95, "{mode:?}: {wins}/100");
        }
    }

    #[test]
    fn success_examples() {
        let cfg = EpisodeConfig::default();
        let mut on_target = initial_state(&cfg, 4);
        on_target.position = on_target.target_position;
        let trace = vec![on_target; cfg.dwell_ticks];
        assert!(success(&trace, &cfg));
        assert_eq!(completion_ticks(&trace, &cfg), Some(cfg.dwell_ticks));
        assert!(!success(&trace[1..], &cfg));

        let mut s = initial_state(&cfg, 4);
        let mut idle = Vec::new();
        for _ in 0..cfg.horizon {
            s = step(&s, &[0.0; 3], &cfg);
            idle.push(s.clone());
        }
        assert!(!success(&idle, &cfg));
        assert_eq!(completion_ticks(&idle, &cfg), None);
    }

    #[test]
    fn success_is_monotone_in_radius() {
        let cfg = EpisodeConfig {
            mode: TaskMode::Dynamic,
            noise_sigma: 0.2,
            ..EpisodeConfig::default()
        };
        let radii = [0.002, 0.01, 0.02, 0.03, 0.05, 0.1];
        for i in 0..30 {
            let ep = rollout_expert(&cfg, episode_seed(1, i)).unwrap();
            let hits: Vec<bool> = radii
                .iter()
                .map(|&r| success_with_radius(ep.post_states(), cfg.dwell_ticks, r))
                .collect();
            for w in hits.windows(2) {
                assert!(!w[0] || w[1]);
            }
        }
    }

    #[test]
    fn observation_pads_with_earliest_state() {
        let cfg = EpisodeConfig::default();
        let s0 = initial_state(&cfg, 0);
        let s1 = step(&s0, &[0.3, 0.1, 0.5], &cfg);
        let obs = observation(&[s0.clone(), s1.clone()]);
        assert_eq!(obs.len(), OBS_DIM);
        for k in 0..OBS_HISTORY - 1 {
            assert_eq!(&obs[k * STATE_FEATURES..(k + 1) * STATE_FEATURES], &s0.features());
        }
        assert_eq!(&obs[OBS_DIM - STATE_FEATURES..], &s1.features());
    }

    #[test]
    fn invalid_config_lists_every_violation() {
        let cfg = EpisodeConfig {
            rotation_period: 0.0,
            control_rate: -1.0,
            horizon: 10,
            ..EpisodeConfig::default()
        };
        let v = cfg.violations(Some(&BiapChunkSpec::default()));
        assert!(v.len() >= 3, "{v:?}");
    }

    #[test]
    fn demos_are_byte_identical_and_counted() {
        let cfg = EpisodeConfig {
            seed: 7,
            ..EpisodeConfig::default()
        };
        let spec = BiapChunkSpec::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_demos(&cfg, &spec, 3, "t", a.path()).unwrap();
        let mb = generate_demos(&cfg, &spec, 3, "t", b.path()).unwrap();
        assert_eq!(ma, mb);
        for e in &ma.episodes {
            assert_eq!(
                fs::read(a.path().join(&e.file)).unwrap(),
                fs::read(b.path().join(&e.file)).unwrap()
            );
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
        let expected: usize = ma
            .episodes
            .iter()
            .map(|e| e.ticks - spec.history - spec.future + 1)
            .sum();
        assert_eq!(ma.chunk_count, expected);
        assert_eq!(ma.chunk_count, 3 * (180 - 40 + 1));

        let (mc, eps) = load_demos(a.path()).unwrap();
        assert_eq!(mc, ma);
        let direct = rollout_expert(&cfg, ma.episodes[0].seed).unwrap();
        assert_eq!(eps[0], direct);
    }

    #[test]
    fn tampered_demo_is_rejected() {
        let cfg = EpisodeConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let m = generate_demos(&cfg, &BiapChunkSpec::default(), 1, "t", dir.path()).unwrap();
        let p = dir.path().join(&m.episodes[0].file);
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("6,0,0,0\n");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_demos(dir.path()), Err(Error::Format { .. })));
    }
}
