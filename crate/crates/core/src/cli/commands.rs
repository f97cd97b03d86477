use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use toml::Value;

use super::config::{
    parse_override, resolve, BenchReprConfig, BenchSmoothConfig, FitConfig, GenDemosConfig, PolicyKind,
    RunSimConfig, TrainFileConfig, Validate,
};
use super::{Cli, Command, ConfigArgs, Failure};
use crate::bench::{bench_repr, bench_smooth, expert_episodes, sample_windows, smooth_demo_chunks, ReprEntry};
use crate::bspline::{fit_least_squares, reconstruct, ActionChunk};
use crate::codec::CodecParams;
use crate::error::{Error, Result};
use crate::exec::{
    run_async_wallclock, run_episode, ChunkPolicy, ExecConfig, ExecMode, ExecutionTrace, ExpertPlanner, FlowPolicy,
    LatencyKind, LatencyModel, TraceSummary,
};
use crate::flow::{train, BiapChunkSpec, FlowDataset, FlowModel};
use crate::seed::derive_seed;
use crate::sim::{generate_demos, load_demos, EpisodeConfig, MANIFEST_FILE};
use crate::trajio::{self, csv_files, file_digest, read_trajectory_csv, sha256_hex, write_json};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one run: what was read, what was written.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    /// paths relative to the run directory
    pub outputs: Vec<FileDigest>,
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e)
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e)
}

/// Output directory plus the files read and written so far.
struct Run {
    command: &'static str,
    dir: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<String>,
}

impl Run {
    fn create(command: &'static str, dir: PathBuf) -> Result<Self, Failure> {
        fs::create_dir_all(&dir).map_err(|e| runtime(Error::io(&dir, e)))?;
        Ok(Self {
            command,
            dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let sha256 = file_digest(path).map_err(usage)?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| runtime(Error::io(&path, e)))?;
        self.written(name);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        write_json(&self.path(name), value).map_err(runtime)?;
        self.written(name);
        Ok(())
    }

    /// Records a file produced by someone else.
    fn written(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    /// Writes the config snapshot and the manifest; returns the run directory.
    fn finish<C: Serialize>(mut self, config: &C) -> Result<PathBuf, Failure> {
        let text = toml::to_string(config)
            .map_err(|e| runtime(Error::invalid(format!("cannot serialize config: {e}"))))?;
        self.write(RESOLVED_CONFIG_FILE, &text)?;
        let outputs = self
            .outputs
            .iter()
            .map(|name| {
                Ok(FileDigest {
                    path: name.clone(),
                    sha256: file_digest(&self.path(name)).map_err(runtime)?,
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(text.as_bytes()),
            inputs: std::mem::take(&mut self.inputs),
            outputs,
        };
        write_json(&self.path(RUN_MANIFEST_FILE), &manifest).map_err(runtime)?;
        Ok(self.dir)
    }
}

/// Collects overrides: `--set` entries first, then dedicated flags.
struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn new(args: &ConfigArgs) -> Result<Self, Failure> {
        args.set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()
            .map(Self)
            .map_err(usage)
    }

    fn put(&mut self, key: &str, value: Option<Value>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), v));
        }
    }

    fn int<T: TryInto<i64>>(&mut self, key: &str, value: Option<T>) -> Result<(), Failure> {
        match value {
            None => Ok(()),
            Some(v) => {
                let v = v
                    .try_into()
                    .map_err(|_| usage(Error::Config(vec![format!("{key}: value out of range")])))?;
                self.put(key, Some(Value::Integer(v)));
                Ok(())
            }
        }
    }

    fn string(&mut self, key: &str, value: Option<&str>) {
        self.put(key, value.map(|s| Value::String(s.to_string())));
    }

    fn path(&mut self, key: &str, value: Option<&Path>) {
        self.put(key, value.map(|p| Value::String(p.display().to_string())));
    }

    fn resolve<T: serde::de::DeserializeOwned + Validate>(&self, args: &ConfigArgs) -> Result<T, Failure> {
        resolve(args.config.as_deref(), &self.0).map_err(usage)
    }
}

/// Executes one parsed command line; returns the run directory.
pub fn run(cli: Cli, env_out: Option<PathBuf>) -> Result<PathBuf, Failure> {
    let root = cli
        .out
        .or(env_out)
        .unwrap_or_else(|| PathBuf::from(super::DEFAULT_OUT));
    match cli.command {
        Command::Fit(a) => {
            let mut o = Overrides::new(&a.config)?;
            o.path("input", a.input.as_deref());
            o.int("n_ctrl", a.n_ctrl)?;
            o.int("degree", a.degree)?;
            cmd_fit(&o.resolve(&a.config)?, &root)
        }
        Command::GenDemos(a) => {
            let mut o = Overrides::new(&a.config)?;
            o.int("seed", a.seed)?;
            o.int("episodes", a.episodes)?;
            o.string("name", a.name.as_deref());
            o.string("task", a.task.as_deref());
            cmd_gen_demos(&o.resolve(&a.config)?, &root)
        }
        Command::Train(a) => {
            let mut o = Overrides::new(&a.config)?;
            o.path("demos", a.demos.as_deref());
            o.int("seed", a.seed)?;
            o.int("steps", a.steps)?;
            cmd_train(o.resolve(&a.config)?, &root)
        }
        Command::BenchRepr(a) => {
            let mut o = Overrides::new(&a.config)?;
            o.path("input", a.input.as_deref());
            o.int("seed", a.seed)?;
            o.int("chunks", a.chunks)?;
            cmd_bench_repr(&o.resolve(&a.config)?, &root)
        }
        Command::BenchSmooth(a) => {
            let mut o = Overrides::new(&a.config)?;
            o.path("demos", a.demos.as_deref());
            o.int("seed", a.seed)?;
            o.int("trajectories", a.trajectories)?;
            cmd_bench_smooth(&o.resolve(&a.config)?, &root)
        }
        Command::RunSim(a) => {
            let mut o = Overrides::new(&a.config)?;
            o.string("policy", a.policy.as_deref());
            o.string("mode", a.mode.as_deref());
            let refit = a.refit.as_deref().map(|s| match s {
                "on" | "true" => Value::Boolean(true),
                "off" | "false" => Value::Boolean(false),
                other => Value::String(other.to_string()),
            });
            o.put("refit", refit);
            o.int("latency_ticks", a.latency_ticks)?;
            o.string("cadence", a.cadence.as_deref());
            o.int("episodes", a.episodes)?;
            o.int("seed", a.seed)?;
            o.string("task", a.task.as_deref());
            o.path("model", a.model.as_deref());
            if a.wall_clock {
                o.put("wall_clock", Some(Value::Boolean(true)));
            }
            cmd_run_sim(o.resolve(&a.config)?, &root)
        }
    }
}

#[derive(Serialize)]
struct FitReport {
    input: String,
    samples: usize,
    dims: usize,
    dt: f64,
    n_ctrl: usize,
    degree: usize,
    /// sum of squared errors over all samples and dimensions
    residual: f64,
    rms_error: f64,
}

fn cmd_fit(cfg: &FitConfig, root: &Path) -> Result<PathBuf, Failure> {
    let chunk = read_trajectory_csv(&cfg.input).map_err(usage)?;
    let fit = fit_least_squares(&chunk, cfg.n_ctrl, cfg.degree).map_err(runtime)?;
    let rebuilt = reconstruct(&fit.curve, chunk.len())
        .and_then(|c| c.with_dt(chunk.dt()))
        .map_err(runtime)?;

    let mut run = Run::create("fit", root.join("fit"))?;
    run.input(&cfg.input)?;
    run.write_json("curve.json", &fit.curve)?;
    run.write_json(
        "fit_report.json",
        &FitReport {
            input: cfg.input.display().to_string(),
            samples: chunk.len(),
            dims: chunk.dims(),
            dt: chunk.dt(),
            n_ctrl: cfg.n_ctrl,
            degree: cfg.degree,
            residual: fit.residual,
            rms_error: (fit.residual / chunk.actions().len() as f64).sqrt(),
        },
    )?;
    run.write("reconstruction.csv", &trajio::trajectory_csv(&rebuilt))?;
    run.finish(cfg)
}

fn cmd_gen_demos(cfg: &GenDemosConfig, root: &Path) -> Result<PathBuf, Failure> {
    let dir = root.join("demos").join(&cfg.name);
    let mut run = Run::create("gen-demos", dir.clone())?;
    // stale episodes from an earlier, larger run would be picked up by
    // directory scans
    for old in csv_files(&dir).map_err(runtime)? {
        fs::remove_file(&old).map_err(|e| runtime(Error::io(&old, e)))?;
    }
    let manifest = generate_demos(&cfg.env().episode_config(cfg.seed), &cfg.spec(), cfg.episodes, &cfg.name, &dir)
        .map_err(runtime)?;
    for ep in &manifest.episodes {
        run.written(&ep.file);
    }
    run.written(MANIFEST_FILE);
    run.finish(cfg)
}

#[derive(Serialize)]
struct TrainReport {
    demos: String,
    episodes: usize,
    windows: usize,
    param_count: usize,
    steps: usize,
    initial_eval_loss: f64,
    final_eval_loss: f64,
}

fn cmd_train(mut cfg: TrainFileConfig, root: &Path) -> Result<PathBuf, Failure> {
    if cfg.demos.as_os_str().is_empty() {
        cfg.demos = root.join("demos").join("default");
    }
    let (manifest, episodes) = load_demos(&cfg.demos).map_err(usage)?;
    let mut run = Run::create("train", root.join("train"))?;
    run.input(&cfg.demos.join(MANIFEST_FILE))?;
    for ep in &manifest.episodes {
        run.input(&cfg.demos.join(&ep.file))?;
    }
    let data = FlowDataset::from_episodes(&episodes, &manifest.chunk_spec).map_err(runtime)?;
    let (model, trace) = train(&data, &cfg.train_config()).map_err(runtime)?;
    model.save(&run.path("model.json")).map_err(runtime)?;
    run.written("model.json");
    run.write("loss_curve.csv", &trace.to_csv())?;
    run.write_json(
        "train_report.json",
        &TrainReport {
            demos: cfg.demos.display().to_string(),
            episodes: episodes.len(),
            windows: data.len(),
            param_count: model.net.param_count(),
            steps: cfg.steps,
            initial_eval_loss: trace.initial_loss(),
            final_eval_loss: trace.final_loss(),
        },
    )?;
    run.finish(&cfg)
}

#[derive(Serialize)]
struct DatasetInfo {
    source: String,
    chunks: usize,
    chunk_len: usize,
    dims: usize,
    /// digest of the chunks rendered as trajectory CSV, in order
    sha256: String,
}

impl DatasetInfo {
    fn new(source: String, chunks: &[ActionChunk]) -> Self {
        let mut text = String::new();
        for c in chunks {
            text.push_str(&trajio::trajectory_csv(c));
        }
        Self {
            source,
            chunks: chunks.len(),
            chunk_len: chunks.first().map_or(0, ActionChunk::len),
            dims: chunks.first().map_or(0, ActionChunk::dims),
            sha256: sha256_hex(text.as_bytes()),
        }
    }
}

#[derive(Serialize)]
struct ReprReport {
    dataset: DatasetInfo,
    params: CodecParams,
    scores: Vec<ReprEntry>,
}

/// Consecutive non-overlapping windows of every CSV in `dir`, at most `limit`.
fn csv_windows(run: &mut Run, dir: &Path, len: usize, limit: usize) -> Result<Vec<ActionChunk>, Failure> {
    let files = csv_files(dir).map_err(usage)?;
    let mut out = Vec::new();
    for path in files {
        run.input(&path)?;
        let traj = read_trajectory_csv(&path).map_err(usage)?;
        let mut start = 0;
        while start + len <= traj.len() && out.len() < limit {
            out.push(traj.window(start, len).map_err(runtime)?);
            start += len;
        }
    }
    if out.is_empty() {
        return Err(usage(Error::format(
            dir,
            format!("no trajectory CSV with at least {len} rows"),
        )));
    }
    Ok(out)
}

fn cmd_bench_repr(cfg: &BenchReprConfig, root: &Path) -> Result<PathBuf, Failure> {
    let mut run = Run::create("bench-repr", root.join("bench-repr"))?;
    let (source, chunks) = if cfg.input.as_os_str().is_empty() {
        let chunks = smooth_demo_chunks(&cfg.env().episode_config(cfg.seed), cfg.chunks, cfg.chunk_len)
            .map_err(runtime)?;
        ("smooth-expert".to_string(), chunks)
    } else {
        let chunks = csv_windows(&mut run, &cfg.input, cfg.chunk_len, cfg.chunks)?;
        (cfg.input.display().to_string(), chunks)
    };
    let params = CodecParams {
        bins: cfg.bins,
        coeffs: cfg.coeffs,
        n_ctrl: cfg.n_ctrl,
        degree: cfg.degree,
    };
    let scores = bench_repr(&chunks, &params).map_err(runtime)?;
    run.write_json(
        "repr_scores.json",
        &ReprReport {
            dataset: DatasetInfo::new(source, &chunks),
            params,
            scores,
        },
    )?;
    run.finish(cfg)
}

fn cmd_bench_smooth(cfg: &BenchSmoothConfig, root: &Path) -> Result<PathBuf, Failure> {
    let mut run = Run::create("bench-smooth", root.join("bench-smooth"))?;
    let episodes = if cfg.demos.as_os_str().is_empty() {
        let env = cfg.env().episode_config(cfg.seed);
        expert_episodes(&env, cfg.trajectories.min(100)).map_err(runtime)?
    } else {
        let (manifest, episodes) = load_demos(&cfg.demos).map_err(usage)?;
        run.input(&cfg.demos.join(MANIFEST_FILE))?;
        for ep in &manifest.episodes {
            run.input(&cfg.demos.join(&ep.file))?;
        }
        episodes
    };
    let windows = sample_windows(&episodes, cfg.trajectories, cfg.chunk_len, cfg.seed).map_err(runtime)?;
    let bench = bench_smooth(&windows, cfg.n_ctrl, cfg.degree).map_err(runtime)?;
    run.write_json("smoothness.json", &bench)?;

    let mut csv = String::from("trajectory,dim,raw_zcr,splined_zcr,raw_acc_p95,splined_acc_p95\n");
    for (i, c) in bench.per_trajectory.iter().enumerate() {
        for d in 0..c.raw.zcr_per_dim.len() {
            csv.push_str(&format!(
                "{i},{d},{},{},{},{}\n",
                c.raw.zcr_per_dim[d], c.splined.zcr_per_dim[d], c.raw.acc_p95_per_dim[d], c.splined.acc_p95_per_dim[d]
            ));
        }
    }
    run.write("smoothness_per_dim.csv", &csv)?;
    run.finish(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimAggregate {
    pub episodes: usize,
    pub success_rate: f64,
    /// episodes that never succeed count as the full horizon
    pub mean_completion_ticks: f64,
    pub mean_tracking_error: f64,
    /// mean over episodes that have a measured splice
    pub mean_boundary_discontinuity: Option<f64>,
    pub stall_ticks: usize,
    /// wall-clock runs only
    pub late_ticks: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub aggregate: SimAggregate,
    pub episodes: Vec<TraceSummary>,
}

fn aggregate(episodes: &[TraceSummary], horizon: usize, late_ticks: Option<usize>) -> SimAggregate {
    let n = episodes.len() as f64;
    let disc: Vec<f64> = episodes.iter().filter_map(|e| e.mean_boundary_discontinuity).collect();
    SimAggregate {
        episodes: episodes.len(),
        success_rate: episodes.iter().filter(|e| e.success).count() as f64 / n,
        mean_completion_ticks: episodes
            .iter()
            .map(|e| e.completion_ticks.unwrap_or(horizon) as f64)
            .sum::<f64>()
            / n,
        mean_tracking_error: episodes.iter().map(|e| e.tracking_error).sum::<f64>() / n,
        mean_boundary_discontinuity: (!disc.is_empty()).then(|| disc.iter().sum::<f64>() / disc.len() as f64),
        stall_ticks: episodes.iter().map(|e| e.stall_ticks).sum(),
        late_ticks,
    }
}

fn sim_policy(cfg: &RunSimConfig, model: Option<&FlowModel>, episode_seed: u64) -> Box<dyn ChunkPolicy + Send> {
    match model {
        Some(m) => Box::new(FlowPolicy {
            model: m.clone(),
            n_steps: cfg.n_steps,
            seed: episode_seed,
        }),
        None => Box::new(ExpertPlanner {
            spec: BiapChunkSpec::default(),
            noise_sigma: cfg.planner_noise,
            seed: episode_seed,
        }),
    }
}

fn cmd_run_sim(mut cfg: RunSimConfig, root: &Path) -> Result<PathBuf, Failure> {
    let env: EpisodeConfig = cfg.env().episode_config(cfg.seed);
    let mode = match cfg.mode {
        ExecMode::Sync => "sync",
        ExecMode::Async if cfg.refit => "async",
        ExecMode::Async => "async-norefit",
    };
    let policy_name = match cfg.policy {
        PolicyKind::Flow => "flow",
        PolicyKind::Expert => "expert",
    };
    let task = match cfg.task {
        crate::sim::TaskMode::Static => "static",
        crate::sim::TaskMode::Dynamic => "dynamic",
    };
    let mut run = Run::create("run-sim", root.join("run-sim").join(format!("{policy_name}-{task}-{mode}")))?;

    let model = match cfg.policy {
        PolicyKind::Flow => {
            if cfg.model.as_os_str().is_empty() {
                cfg.model = root.join("train").join("model.json");
            }
            let model = FlowModel::load(&cfg.model).map_err(usage)?;
            run.input(&cfg.model)?;
            Some(model)
        }
        PolicyKind::Expert => {
            cfg.model = PathBuf::new();
            None
        }
    };

    let mean = cfg.latency_ticks as f64 / env.control_rate;
    let latency = if cfg.latency_jitter > 0.0 {
        LatencyModel {
            kind: LatencyKind::SeededJitter,
            mean,
            jitter: cfg.latency_jitter,
            seed: cfg.seed,
        }
    } else {
        LatencyModel::fixed_seconds(mean)
    };
    let exec = ExecConfig {
        mode: cfg.mode,
        refit: cfg.refit,
        latency,
        cadence: cfg.cadence,
        lambda: cfg.lambda,
        n_free: (cfg.n_free > 0).then_some(cfg.n_free),
    };

    let seeds: Vec<u64> = (0..cfg.episodes as u64)
        .map(|i| derive_seed(cfg.seed, "run-sim", i))
        .collect();
    let (traces, late_ticks): (Vec<ExecutionTrace>, Option<usize>) = if cfg.wall_clock {
        let mut traces = Vec::with_capacity(seeds.len());
        let mut late = 0;
        for &s in &seeds {
            let mut policy = sim_policy(&cfg, model.as_ref(), s);
            let report = run_async_wallclock(policy.as_mut(), &env, &exec, s).map_err(runtime)?;
            late += report.late_ticks;
            traces.push(report.trace);
        }
        (traces, Some(late))
    } else {
        let traces = seeds
            .par_iter()
            .map(|&s| {
                let mut policy = sim_policy(&cfg, model.as_ref(), s);
                run_episode(policy.as_mut(), &env, &exec, s)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(runtime)?;
        (traces, None)
    };

    let mut episodes = Vec::with_capacity(traces.len());
    for trace in &traces {
        run.write(&format!("trace_{}.csv", trace.seed), &trace.to_csv())?;
        episodes.push(trace.summary(&env));
    }
    let summary = SimSummary {
        aggregate: aggregate(&episodes, env.horizon, late_ticks),
        episodes,
    };
    run.write_json("summary.json", &summary)?;
    run.finish(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::ExecMode;

    fn summary(success: bool, completion: Option<usize>, disc: Option<f64>) -> TraceSummary {
        TraceSummary {
            seed: 0,
            mode: ExecMode::Async,
            ticks: 10,
            success,
            completion_ticks: completion,
            splices: 1,
            mean_boundary_discontinuity: disc,
            tracking_error: 1.0,
            stall_ticks: 2,
        }
    }

    #[test]
    fn aggregate_counts_failures_as_horizon() {
        let a = aggregate(
            &[summary(true, Some(40), Some(1.0)), summary(false, None, None)],
            180,
            None,
        );
        assert_eq!(a.success_rate, 0.5);
        assert_eq!(a.mean_completion_ticks, 110.0);
        assert_eq!(a.mean_boundary_discontinuity, Some(1.0));
        assert_eq!(a.stall_ticks, 4);
    }
}
