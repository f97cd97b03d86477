//! Simulated-time execution of chunk policies.
//!
//! One action is dispatched per control tick. In synchronous mode the arm
//! holds still while each chunk is inferred; in asynchronous mode the
//! executor keeps dispatching queued actions and splices every new chunk in
//! at the tick boundary where its inference finishes.

mod policy;
mod wallclock;

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bspline::BSplineCurve;
use crate::error::{Error, Result};
use crate::flow::BiapChunkSpec;
use crate::refit::{default_n_free, refit, splice_jump, RefitRequest, DEFAULT_LAMBDA};
use crate::seed::stream_rng;
use crate::sim::{self, initial_state, EpisodeConfig, PlantState};

pub use policy::{ChunkPolicy, ConstantPolicy, ExpertPlanner, FlowPolicy, PlanContext};
pub use wallclock::{run_async_wallclock, WallClockReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sync,
    Async,
}

impl std::str::FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(ExecMode::Sync),
            "async" => Ok(ExecMode::Async),
            _ => Err(Error::invalid(format!("unknown execution mode `{s}` (sync|async)"))),
        }
    }
}

/// When the asynchronous worker starts its next inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cadence {
    /// right after every splice; inference takes at least one tick
    Continuous,
    /// once the queue holds no more than the expected latency
    Drain,
}

impl std::str::FromStr for Cadence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(Cadence::Continuous),
            "drain" => Ok(Cadence::Drain),
            _ => Err(Error::invalid(format!("unknown cadence `{s}` (continuous|drain)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatencyKind {
    Fixed,
    SeededJitter,
}

/// Inference duration in seconds, converted to whole ticks by rounding up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub kind: LatencyKind,
    pub mean: f64,
    /// half-width of the uniform jitter band
    pub jitter: f64,
    pub seed: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self::fixed_seconds(0.090)
    }
}

/// Tolerance for float noise when rounding seconds up to ticks.
const TICK_EPS: f64 = 1e-9;

impl LatencyModel {
    pub fn fixed_seconds(mean: f64) -> Self {
        Self {
            kind: LatencyKind::Fixed,
            mean,
            jitter: 0.0,
            seed: 0,
        }
    }

    pub fn fixed_ticks(ticks: usize, control_rate: f64) -> Self {
        Self::fixed_seconds(ticks as f64 / control_rate)
    }

    pub fn seconds_to_ticks(seconds: f64, control_rate: f64) -> usize {
        (seconds * control_rate - TICK_EPS).ceil().max(0.0) as usize
    }

    /// Latency of one generation's inference in ticks.
    pub fn ticks(&self, generation: usize, control_rate: f64) -> usize {
        let seconds = match self.kind {
            LatencyKind::Fixed => self.mean,
            LatencyKind::SeededJitter => {
                let mut rng = stream_rng(self.seed, "latency", generation as u64);
                let u: f64 = rng.random_range(-1.0..=1.0);
                (self.mean + u * self.jitter).max(0.0)
            }
        };
        Self::seconds_to_ticks(seconds, control_rate)
    }

    /// Largest latency this model can produce, in ticks.
    pub fn max_ticks(&self, control_rate: f64) -> usize {
        match self.kind {
            LatencyKind::Fixed => Self::seconds_to_ticks(self.mean, control_rate),
            LatencyKind::SeededJitter => {
                Self::seconds_to_ticks(self.mean + self.jitter, control_rate)
            }
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.mean.is_finite() && self.mean >= 0.0) {
            v.push(format!("latency mean must be >= 0, got {}", self.mean));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            v.push(format!("latency jitter must be >= 0, got {}", self.jitter));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecConfig {
    pub mode: ExecMode,
    /// re-anchor each new chunk to the actions executed during its inference
    pub refit: bool,
    pub latency: LatencyModel,
    pub cadence: Cadence,
    pub lambda: f64,
    /// free control points; `None` uses the history-support default
    pub n_free: Option<usize>,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            mode: ExecMode::Async,
            refit: true,
            latency: LatencyModel::default(),
            cadence: Cadence::Continuous,
            lambda: DEFAULT_LAMBDA,
            n_free: None,
        }
    }
}

/// Pending actions keyed by absolute tick.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionQueue {
    start: usize,
    actions: Vec<Vec<f64>>,
    generation: usize,
}

impl ActionQueue {
    pub fn new(start: usize, actions: Vec<Vec<f64>>, generation: usize) -> Self {
        Self {
            start,
            actions,
            generation,
        }
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    /// First tick held.
    pub fn start(&self) -> usize {
        self.start
    }

    /// One past the last tick held.
    pub fn end(&self) -> usize {
        self.start + self.actions.len()
    }

    pub fn get(&self, tick: usize) -> Option<&[f64]> {
        tick.checked_sub(self.start)
            .and_then(|k| self.actions.get(k))
            .map(Vec::as_slice)
    }

    /// Actions for ticks `from..`, in order.
    pub fn pending(&self, from: usize) -> &[Vec<f64>] {
        let k = from.saturating_sub(self.start).min(self.actions.len());
        &self.actions[k..]
    }

    /// Drops every action from `from` on and queues `actions` there instead,
    /// under the next generation.
    pub fn replace_from(&mut self, from: usize, actions: Vec<Vec<f64>>) -> Result<()> {
        if from < self.start || from > self.end() {
            return Err(Error::InvalidState(format!(
                "splice at tick {from} outside queued ticks [{}, {})",
                self.start,
                self.end()
            )));
        }
        self.start = from;
        self.actions = actions;
        self.generation += 1;
        Ok(())
    }
}

/// Chunk-relative parameter of an absolute tick.
fn chunk_param(spec: &BiapChunkSpec, chunk_start: i64, tick: usize) -> f64 {
    (tick as i64 - chunk_start) as f64 / (spec.len() - 1) as f64
}

/// Everything the executor knows about one newly arrived chunk.
pub struct SpliceInput<'a> {
    pub spec: &'a BiapChunkSpec,
    pub curve: &'a BSplineCurve,
    /// tick of the chunk's first (history) row; negative near episode start
    pub chunk_start: i64,
    /// first tick to be replaced
    pub splice_tick: usize,
    /// one past the chunk's last tick
    pub end_tick: usize,
    /// actions dispatched at ticks `0..splice_tick`
    pub executed: &'a [Vec<f64>],
    /// ticks of `executed` the refit may anchor to: `history_start..splice_tick`
    pub history_start: usize,
    /// queued actions from `splice_tick` on that the splice replaces
    pub pending: &'a [Vec<f64>],
}

impl SpliceInput<'_> {
    pub fn param(&self, tick: usize) -> f64 {
        chunk_param(self.spec, self.chunk_start, tick)
    }

    pub fn replacement_params(&self) -> Vec<f64> {
        (self.splice_tick..self.end_tick).map(|t| self.param(t)).collect()
    }
}

/// Turns an arrived chunk into the actions that replace the queue.
pub trait Splicer {
    fn replacement(&self, input: &SpliceInput<'_>) -> Result<Vec<Vec<f64>>>;
}

/// Samples the curve as predicted.
pub struct ReplaceSplicer;

impl Splicer for ReplaceSplicer {
    fn replacement(&self, input: &SpliceInput<'_>) -> Result<Vec<Vec<f64>>> {
        sample_rows(input.curve, &input.replacement_params())
    }
}

/// Refits the leading control points to the executed history first.
pub struct RefitSplicer {
    pub lambda: f64,
    pub n_free: Option<usize>,
}

impl Splicer for RefitSplicer {
    fn replacement(&self, input: &SpliceInput<'_>) -> Result<Vec<Vec<f64>>> {
        let curve = refit_to_history(input, self.lambda, self.n_free)?;
        sample_rows(&curve, &input.replacement_params())
    }
}

/// The chunk's curve re-anchored to `executed[history_start..splice_tick]`;
/// the prediction itself when that window is empty.
pub fn refit_to_history(
    input: &SpliceInput<'_>,
    lambda: f64,
    n_free: Option<usize>,
) -> Result<BSplineCurve> {
    let ticks = input.history_start..input.splice_tick;
    if ticks.is_empty() {
        return Ok(input.curve.clone());
    }
    let d = input.curve.dims();
    let mut history = DMatrix::zeros(ticks.len(), d);
    for (r, t) in ticks.clone().enumerate() {
        for j in 0..d {
            history[(r, j)] = input.executed[t][j];
        }
    }
    let params: Vec<f64> = ticks.map(|t| input.param(t)).collect();
    let mut req = RefitRequest::new(input.curve.clone(), history, params)?;
    req.lambda = lambda;
    req.n_free = match n_free {
        Some(n) => n,
        // basis functions touching the chunk's history slots, whatever the latency
        None => default_n_free(input.curve, &[input.spec.param(input.spec.history - 1)])?,
    };
    Ok(refit(&req)?.curve)
}

fn sample_rows(curve: &BSplineCurve, params: &[f64]) -> Result<Vec<Vec<f64>>> {
    params.iter().map(|&u| curve.eval(u)).collect()
}

/// Outcome of one splice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpliceEvent {
    pub generation: usize,
    /// tick whose start-of-tick state the planner observed
    pub inference_start: usize,
    pub splice_tick: usize,
    pub latency_ticks: usize,
    /// jump between the last executed and first spliced action, per second;
    /// absent for a splice at tick 0
    pub discontinuity: Option<f64>,
}

/// Replaces the queue from `input.splice_tick` with `splicer`'s output.
/// An empty replacement window leaves the queue untouched and returns `false`.
pub fn splice<S: Splicer + ?Sized>(
    queue: &mut ActionQueue,
    splicer: &S,
    input: &SpliceInput<'_>,
) -> Result<bool> {
    if input.end_tick <= input.splice_tick {
        return Ok(false);
    }
    let rows = splicer.replacement(input)?;
    if rows.len() != input.end_tick - input.splice_tick {
        return Err(Error::InvalidState("splicer returned the wrong number of actions".into()));
    }
    queue.replace_from(input.splice_tick, rows)?;
    Ok(true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: usize,
    pub action: Vec<f64>,
    /// plant state after the action
    pub state: PlantState,
    pub generation: usize,
    /// first tick of a new generation
    pub splice: bool,
    /// hold action while a synchronous inference runs
    pub stall: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionTrace {
    pub mode: ExecMode,
    pub seed: u64,
    pub dt: f64,
    pub initial: PlantState,
    pub rows: Vec<TraceRow>,
    pub splices: Vec<SpliceEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub seed: u64,
    pub mode: ExecMode,
    pub ticks: usize,
    pub success: bool,
    /// ticks until the dwell criterion first holds
    pub completion_ticks: Option<usize>,
    pub splices: usize,
    /// mean over splices after tick 0; absent without such splices
    pub mean_boundary_discontinuity: Option<f64>,
    /// mean end-effector to target distance
    pub tracking_error: f64,
    pub stall_ticks: usize,
}

impl ExecutionTrace {
    pub fn states(&self) -> Vec<PlantState> {
        self.rows.iter().map(|r| r.state.clone()).collect()
    }

    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.action.clone()).collect()
    }

    pub fn success(&self, cfg: &EpisodeConfig) -> bool {
        sim::success(&self.states(), cfg)
    }

    pub fn completion_ticks(&self, cfg: &EpisodeConfig) -> Option<usize> {
        sim::completion_ticks(&self.states(), cfg)
    }

    pub fn tracking_error(&self) -> f64 {
        sim::tracking_error(&self.states())
    }

    pub fn mean_boundary_discontinuity(&self) -> Option<f64> {
        let v: Vec<f64> = self.splices.iter().filter_map(|s| s.discontinuity).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    pub fn summary(&self, cfg: &EpisodeConfig) -> TraceSummary {
        TraceSummary {
            seed: self.seed,
            mode: self.mode,
            ticks: self.rows.len(),
            success: self.success(cfg),
            completion_ticks: self.completion_ticks(cfg),
            splices: self.splices.len(),
            mean_boundary_discontinuity: self.mean_boundary_discontinuity(),
            tracking_error: self.tracking_error(),
            stall_ticks: self.rows.iter().filter(|r| r.stall).count(),
        }
    }

    pub fn to_csv(&self) -> String {
        let dims = self.rows.first().map_or(0, |r| r.action.len());
        let mut out = String::from("tick,t");
        for j in 0..dims {
            let _ = write!(out, ",a{j}");
        }
        out.push_str(",pos_x,pos_y,vel_x,vel_y,gripper,target_x,target_y,target_phase,generation,splice,stall\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.tick, r.tick as f64 * self.dt);
            for a in &r.action {
                let _ = write!(out, ",{a}");
            }
            let s = &r.state;
            let _ = writeln!(
                out,
                ",{},{},{},{},{},{},{},{},{},{},{}",
                s.position[0],
                s.position[1],
                s.velocity[0],
                s.velocity[1],
                s.gripper,
                s.target_position[0],
                s.target_position[1],
                s.target_phase,
                r.generation,
                u8::from(r.splice),
                u8::from(r.stall)
            );
        }
        out
    }
}

/// Shared bookkeeping of both runners.
struct Episode<'a> {
    cfg: &'a EpisodeConfig,
    states: Vec<PlantState>,
    executed: Vec<Vec<f64>>,
    rows: Vec<TraceRow>,
}

impl<'a> Episode<'a> {
    fn new(cfg: &'a EpisodeConfig, seed: u64) -> Self {
        Episode {
            cfg,
            states: vec![initial_state(cfg, seed)],
            executed: Vec::with_capacity(cfg.horizon),
            rows: Vec::with_capacity(cfg.horizon),
        }
    }

    fn tick(&self) -> usize {
        self.executed.len()
    }

    fn context(&self, generation: usize) -> PlanContext<'_> {
        PlanContext {
            cfg: self.cfg,
            tick: self.tick(),
            generation,
            states: &self.states,
            executed: &self.executed,
        }
    }

    fn dispatch(&mut self, action: Vec<f64>, generation: usize, splice: bool, stall: bool) {
        let tick = self.tick();
        let next = sim::step(self.states.last().expect("initial state"), &action, self.cfg);
        self.rows.push(TraceRow {
            tick,
            action: action.clone(),
            state: next.clone(),
            generation,
            splice,
            stall,
        });
        self.states.push(next);
        self.executed.push(action);
    }

    fn finish(self, mode: ExecMode, seed: u64, splices: Vec<SpliceEvent>) -> ExecutionTrace {
        ExecutionTrace {
            mode,
            seed,
            dt: self.cfg.dt(),
            initial: self.states[0].clone(),
            rows: self.rows,
            splices,
        }
    }
}

fn check_spec(policy: &dyn ChunkPolicy, cfg: &EpisodeConfig, exec: &ExecConfig) -> Result<()> {
    let mut v = cfg.violations(Some(policy.spec()));
    v.extend(policy.spec().violations());
    v.extend(exec.latency.violations());
    if !(exec.lambda.is_finite() && exec.lambda >= 0.0) {
        v.push(format!("lambda must be >= 0, got {}", exec.lambda));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v))
    }
}

/// Future actions of a fresh chunk planned at `tick`, for ticks `tick..tick + future`.
fn future_rows(policy: &dyn ChunkPolicy, curve: &BSplineCurve, tick: usize) -> Result<Vec<Vec<f64>>> {
    let spec = policy.spec();
    let start = tick as i64 - spec.history as i64;
    let params: Vec<f64> = (tick..tick + spec.future)
        .map(|t| chunk_param(spec, start, t))
        .collect();
    sample_rows(curve, &params)
}

/// Stop-and-go baseline: infer, hold the arm for the inference latency, then
/// run the chunk's future actions open loop. The first chunk is planned
/// before the clock starts.
pub fn run_sync(
    policy: &mut dyn ChunkPolicy,
    cfg: &EpisodeConfig,
    exec: &ExecConfig,
    seed: u64,
) -> Result<ExecutionTrace> {
    check_spec(policy, cfg, exec)?;
    let mut ep = Episode::new(cfg, seed);
    let mut splices = Vec::new();
    let mut generation = 0;
    let first = policy.plan(&ep.context(0))?;
    let mut queue = ActionQueue::new(0, future_rows(policy, &first, 0)?, 0);
    while ep.tick() < cfg.horizon {
        let mut spliced = false;
        if queue.get(ep.tick()).is_none() {
            generation += 1;
            let start = ep.tick();
            let latency = exec.latency.ticks(generation, cfg.control_rate);
            let curve = policy.plan(&ep.context(generation))?;
            let hold = ep.states.last().map_or(0.0, |s| s.gripper);
            for _ in 0..latency {
                if ep.tick() >= cfg.horizon {
                    break;
                }
                let mut a = vec![0.0; curve.dims()];
                if let Some(g) = a.get_mut(2) {
                    *g = hold;
                }
                ep.dispatch(a, generation - 1, false, true);
            }
            if ep.tick() >= cfg.horizon {
                break;
            }
            // the chunk runs as planned, shifted by the stall
            let rows = future_rows(policy, &curve, start)?;
            queue = ActionQueue::new(ep.tick(), rows, generation);
            let discontinuity = ep
                .executed
                .last()
                .map(|prev| splice_jump(prev, queue.get(ep.tick()).unwrap_or(prev), cfg.dt()));
            splices.push(SpliceEvent {
                generation,
                inference_start: start,
                splice_tick: ep.tick(),
                latency_ticks: latency,
                discontinuity,
            });
            spliced = true;
        }
        let a = queue.get(ep.tick()).expect("queue refilled above").to_vec();
        ep.dispatch(a, queue.generation(), spliced, false);
    }
    Ok(ep.finish(ExecMode::Sync, seed, splices))
}

struct Inference {
    generation: usize,
    start: usize,
    ready_at: usize,
    latency: usize,
    curve: BSplineCurve,
}

/// Asynchronous execution with the splice behaviour chosen by `exec.refit`.
pub fn run_async(
    policy: &mut dyn ChunkPolicy,
    cfg: &EpisodeConfig,
    exec: &ExecConfig,
    seed: u64,
) -> Result<ExecutionTrace> {
    if exec.refit {
        let splicer = RefitSplicer {
            lambda: exec.lambda,
            n_free: exec.n_free,
        };
        run_async_with(policy, cfg, exec, seed, &splicer)
    } else {
        run_async_with(policy, cfg, exec, seed, &ReplaceSplicer)
    }
}

/// Asynchronous execution with a caller-supplied splice strategy.
pub fn run_async_with(
    policy: &mut dyn ChunkPolicy,
    cfg: &EpisodeConfig,
    exec: &ExecConfig,
    seed: u64,
    splicer: &dyn Splicer,
) -> Result<ExecutionTrace> {
    check_spec(policy, cfg, exec)?;
    let spec = policy.spec().clone();
    let max_latency = exec.latency.max_ticks(cfg.control_rate);
    if max_latency >= spec.future {
        return Err(Error::Config(vec![format!(
            "latency of {max_latency} ticks must be below the chunk's {} future ticks",
            spec.future
        )]));
    }
    let mut ep = Episode::new(cfg, seed);
    let mut splices = Vec::new();
    let first = policy.plan(&ep.context(0))?;
    let mut queue = ActionQueue::new(0, future_rows(policy, &first, 0)?, 0);
    let mut next_generation = 1;
    let mut pending: Option<Inference> = None;
    let mut start_now = exec.cadence == Cadence::Continuous;

    while ep.tick() < cfg.horizon {
        let t = ep.tick();
        let mut spliced = false;
        loop {
            if pending.as_ref().is_some_and(|p| p.ready_at == t) {
                let inf = pending.take().expect("checked above");
                let chunk_start = inf.start as i64 - spec.history as i64;
                let pending = queue.pending(t).to_vec();
                let input = SpliceInput {
                    spec: &spec,
                    curve: &inf.curve,
                    chunk_start,
                    splice_tick: t,
                    end_tick: inf.start + spec.future,
                    executed: &ep.executed,
                    // no delay window, nothing to anchor to
                    history_start: if t > inf.start { chunk_start.max(0) as usize } else { t },
                    pending: &pending,
                };
                if splice(&mut queue, splicer, &input)? {
                    let first = queue.get(t).expect("splice filled the tick");
                    splices.push(SpliceEvent {
                        generation: inf.generation,
                        inference_start: inf.start,
                        splice_tick: t,
                        latency_ticks: inf.latency,
                        discontinuity: ep.executed.last().map(|p| splice_jump(p, first, cfg.dt())),
                    });
                    spliced = true;
                }
                start_now = exec.cadence == Cadence::Continuous;
            }
            if pending.is_none() {
                let generation = next_generation;
                let latency = exec.latency.ticks(generation, cfg.control_rate);
                let due = match exec.cadence {
                    Cadence::Continuous => start_now,
                    Cadence::Drain => queue.end().saturating_sub(t) <= latency,
                };
                if due {
                    let latency = match exec.cadence {
                        Cadence::Continuous => latency.max(1),
                        Cadence::Drain => latency,
                    };
                    if t + latency < cfg.horizon {
                        let curve = policy.plan(&ep.context(generation))?;
                        pending = Some(Inference {
                            generation,
                            start: t,
                            ready_at: t + latency,
                            latency,
                            curve,
                        });
                        next_generation += 1;
                    }
                    start_now = false;
                    // a zero-latency result is spliced at this same boundary
                    if latency == 0 {
                        continue;
                    }
                }
            }
            break;
        }
        let Some(a) = queue.get(t).map(<[f64]>::to_vec) else {
            return Err(Error::Starvation { tick: t });
        };
        ep.dispatch(a, queue.generation(), spliced, false);
    }
    Ok(ep.finish(ExecMode::Async, seed, splices))
}

/// Runs `exec.mode` on the episode drawn from `seed`.
pub fn run_episode(
    policy: &mut dyn ChunkPolicy,
    cfg: &EpisodeConfig,
    exec: &ExecConfig,
    seed: u64,
) -> Result<ExecutionTrace> {
    match exec.mode {
        ExecMode::Sync => run_sync(policy, cfg, exec, seed),
        ExecMode::Async => run_async(policy, cfg, exec, seed),
    }
}
