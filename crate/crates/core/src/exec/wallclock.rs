//! Real-time variant of the asynchronous runner for demonstrations.
//!
//! The executor sleeps to each tick deadline while a worker thread runs the
//! policy; finished chunks pass through a one-slot channel and are spliced at
//! the first tick boundary after they arrive. Timing depends on the host, so
//! traces are not reproducible.

use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use super::{
    future_rows, splice, ActionQueue, ChunkPolicy, Episode, ExecConfig, ExecMode, ExecutionTrace,
    PlanContext, RefitSplicer, ReplaceSplicer, SpliceEvent, SpliceInput, Splicer,
};
use crate::bspline::BSplineCurve;
use crate::error::{Error, Result};
use crate::refit::splice_jump;
use crate::sim::{EpisodeConfig, PlantState};

struct Request {
    generation: usize,
    tick: usize,
    states: Vec<PlantState>,
    executed: Vec<Vec<f64>>,
}

struct Reply {
    generation: usize,
    start: usize,
    curve: Result<BSplineCurve>,
}

#[derive(Clone, Debug)]
pub struct WallClockReport {
    pub trace: ExecutionTrace,
    /// ticks whose deadline had already passed when they were dispatched
    pub late_ticks: usize,
}

/// Runs one episode against the wall clock. `exec.latency.mean` seconds of
/// artificial delay are added to every inference.
pub fn run_async_wallclock(
    policy: &mut (dyn ChunkPolicy + Send),
    cfg: &EpisodeConfig,
    exec: &ExecConfig,
    seed: u64,
) -> Result<WallClockReport> {
    super::check_spec(policy, cfg, exec)?;
    let spec = policy.spec().clone();
    let period = Duration::from_secs_f64(cfg.dt());
    let delay = Duration::from_secs_f64(exec.latency.mean);
    let refit_splicer = RefitSplicer {
        lambda: exec.lambda,
        n_free: exec.n_free,
    };
    let splicer: &dyn Splicer = if exec.refit {
        &refit_splicer
    } else {
        &ReplaceSplicer
    };

    let mut ep = Episode::new(cfg, seed);
    let first = policy.plan(&ep.context(0))?;
    let mut queue = ActionQueue::new(0, future_rows(policy, &first, 0)?, 0);

    let (req_tx, req_rx) = mpsc::channel::<Request>();
    let (rep_tx, rep_rx) = mpsc::sync_channel::<Reply>(1);

    thread::scope(|scope| {
        scope.spawn(move || {
            for req in req_rx {
                let ctx = PlanContext {
                    cfg,
                    tick: req.tick,
                    generation: req.generation,
                    states: &req.states,
                    executed: &req.executed,
                };
                let curve = policy.plan(&ctx);
                thread::sleep(delay);
                let reply = Reply {
                    generation: req.generation,
                    start: req.tick,
                    curve,
                };
                if rep_tx.send(reply).is_err() {
                    break;
                }
            }
        });

        let request = |ep: &Episode<'_>, generation: usize| Request {
            generation,
            tick: ep.tick(),
            states: ep.states.clone(),
            executed: ep.executed.clone(),
        };
        let mut splices = Vec::new();
        let mut late_ticks = 0;
        let mut next_generation = 1;
        let mut in_flight = req_tx.send(request(&ep, next_generation)).is_ok();
        let clock = Instant::now();

        while ep.tick() < cfg.horizon {
            let t = ep.tick();
            let deadline = period * t as u32;
            let now = clock.elapsed();
            if now < deadline {
                thread::sleep(deadline - now);
            } else if t > 0 {
                late_ticks += 1;
            }
            let mut spliced = false;
            if let Ok(reply) = rep_rx.try_recv() {
                in_flight = false;
                let curve = reply.curve?;
                let chunk_start = reply.start as i64 - spec.history as i64;
                let pending = queue.pending(t).to_vec();
                let input = SpliceInput {
                    spec: &spec,
                    curve: &curve,
                    chunk_start,
                    splice_tick: t,
                    end_tick: reply.start + spec.future,
                    executed: &ep.executed,
                    history_start: if t > reply.start { chunk_start.max(0) as usize } else { t },
                    pending: &pending,
                };
                if splice(&mut queue, splicer, &input)? {
                    let first = queue.get(t).expect("splice filled the tick");
                    splices.push(SpliceEvent {
                        generation: reply.generation,
                        inference_start: reply.start,
                        splice_tick: t,
                        latency_ticks: t - reply.start,
                        discontinuity: ep.executed.last().map(|p| splice_jump(p, first, cfg.dt())),
                    });
                    spliced = true;
                }
                next_generation += 1;
            }
            if !in_flight {
                in_flight = req_tx.send(request(&ep, next_generation)).is_ok();
            }
            let Some(a) = queue.get(t).map(<[f64]>::to_vec) else {
                return Err(Error::Starvation { tick: t });
            };
            ep.dispatch(a, queue.generation(), spliced, false);
        }
        drop(req_tx);
        // unblock a worker waiting on the full reply slot
        while rep_rx.recv().is_ok() {}
        Ok(WallClockReport {
            trace: ep.finish(ExecMode::Async, seed, splices),
            late_ticks,
        })
    })
}
