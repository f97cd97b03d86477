//! Chunk planners driven by the executor.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::bspline::{fit_least_squares, ActionChunk, BSplineCurve};
use crate::error::{Error, Result};
use crate::flow::{BiapChunkSpec, FlowModel};
use crate::seed::stream_rng;
use crate::sim::{expert_command, observation, step, EpisodeConfig, PlantState};

/// What a planner may see when inference for one generation starts.
pub struct PlanContext<'a> {
    pub cfg: &'a EpisodeConfig,
    /// tick at which inference starts; the chunk's first new action belongs to it
    pub tick: usize,
    pub generation: usize,
    /// plant states at the start of ticks `0..=tick`
    pub states: &'a [PlantState],
    /// actions dispatched at ticks `0..tick`
    pub executed: &'a [Vec<f64>],
}

impl PlanContext<'_> {
    pub fn current(&self) -> &PlantState {
        self.states.last().expect("context holds at least the initial state")
    }
}

/// Produces a curve over chunk ticks `[tick − history, tick + future)` on
/// the normalized domain.
pub trait ChunkPolicy {
    fn spec(&self) -> &BiapChunkSpec;

    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<BSplineCurve>;
}

/// Trained flow model; each generation draws its noise from its own stream.
pub struct FlowPolicy {
    pub model: FlowModel,
    pub n_steps: usize,
    pub seed: u64,
}

impl ChunkPolicy for FlowPolicy {
    fn spec(&self) -> &BiapChunkSpec {
        &self.model.spec
    }

    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<BSplineCurve> {
        let mut rng = stream_rng(self.seed, "policy", ctx.generation as u64);
        self.model
            .sample_curve(&observation(ctx.states), self.n_steps, &mut rng)
    }
}

/// Returns the same curve every time.
pub struct ConstantPolicy {
    pub spec: BiapChunkSpec,
    pub curve: BSplineCurve,
}

impl ChunkPolicy for ConstantPolicy {
    fn spec(&self) -> &BiapChunkSpec {
        &self.spec
    }

    fn plan(&mut self, _: &PlanContext<'_>) -> Result<BSplineCurve> {
        Ok(self.curve.clone())
    }
}

/// Fits the executed past plus a noise-free expert rollout from the
/// current state, then perturbs the control points with seeded Gaussian
/// noise of `noise_sigma` times the per-dimension action scale.
pub struct ExpertPlanner {
    pub spec: BiapChunkSpec,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ExpertPlanner {
    fn window(&self, ctx: &PlanContext<'_>) -> Result<ActionChunk> {
        let p = self.spec.history;
        let mut future = Vec::with_capacity(self.spec.future);
        let mut state = ctx.current().clone();
        for _ in 0..self.spec.future {
            let a = expert_command(&state, ctx.cfg);
            state = step(&state, &a, ctx.cfg);
            future.push(a.to_vec());
        }
        let mut rows = Vec::with_capacity(self.spec.len());
        for k in 0..p {
            // ticks before the episode repeat the earliest known action
            let tick = ctx.tick as i64 - p as i64 + k as i64;
            let row = if tick >= 0 {
                ctx.executed[tick as usize].clone()
            } else {
                ctx.executed.first().unwrap_or(&future[0]).clone()
            };
            rows.push(row);
        }
        rows.extend(future);
        ActionChunk::from_rows(&rows, ctx.cfg.dt())
    }
}

impl ChunkPolicy for ExpertPlanner {
    fn spec(&self) -> &BiapChunkSpec {
        &self.spec
    }

    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<BSplineCurve> {
        if ctx.executed.len() != ctx.tick || ctx.states.len() != ctx.tick + 1 {
            return Err(Error::InvalidState("plan context out of sync with its tick".into()));
        }
        let fit = fit_least_squares(&self.window(ctx)?, self.spec.n_ctrl, self.spec.degree)?;
        let mut rng = stream_rng(self.seed, "planner", ctx.generation as u64);
        let scale = [ctx.cfg.max_speed, ctx.cfg.max_speed, 1.0];
        let ctrl = fit.curve.control_points();
        let noisy = DMatrix::from_fn(ctrl.nrows(), ctrl.ncols(), |i, j| {
            let n: f64 = StandardNormal.sample(&mut rng);
            ctrl[(i, j)] + self.noise_sigma * scale[j.min(2)] * n
        });
        fit.curve.with_control_points(noisy)
    }
}
