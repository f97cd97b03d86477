//! Minibatch training of the flow model with Adam.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{flatten, FlowModel, Normalizer};
use super::{chunk_targets, flow_sample, make_biap_chunk, mse_with_grad, BiapChunkSpec, Mlp};
use crate::error::{Error, Result};
use crate::seed::stream_rng;
use crate::sim::{observation, Episode};

const NORM_FLOOR: f64 = 1e-3;
const EVAL_SAMPLES: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// evaluation-loss interval in steps
    pub log_every: usize,
    /// steps after which a copy of the model is kept
    pub checkpoints: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            hidden: vec![256, 256, 256],
            seed: 0,
            log_every: 50,
            checkpoints: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            v.push(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            v.push(format!("hidden widths must be positive, got {:?}", self.hidden));
        }
        if self.log_every == 0 {
            v.push("log_every must be >= 1".into());
        }
        v
    }
}

/// `(control points, observation)` pairs in action units.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDataset {
    pub spec: BiapChunkSpec,
    pub targets: Vec<DMatrix<f64>>,
    pub observations: Vec<Vec<f64>>,
}

impl FlowDataset {
    pub fn new(
        spec: BiapChunkSpec,
        targets: Vec<DMatrix<f64>>,
        observations: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if targets.len() != observations.len() {
            return Err(Error::invalid("targets and observations differ in count"));
        }
        let shape = targets[0].shape();
        if shape.0 != spec.n_ctrl || targets.iter().any(|t| t.shape() != shape) {
            return Err(Error::invalid("control-point matrices differ in shape"));
        }
        let od = observations[0].len();
        if observations.iter().any(|o| o.len() != od) {
            return Err(Error::invalid("observations differ in length"));
        }
        if targets.iter().any(|t| t.iter().any(|x| !x.is_finite()))
            || observations.iter().flatten().any(|x| !x.is_finite())
        {
            return Err(Error::invalid("non-finite training data"));
        }
        Ok(FlowDataset {
            spec,
            targets,
            observations,
        })
    }

    /// Every full window of every episode; boundary windows are skipped.
    pub fn from_episodes(episodes: &[Episode], spec: &BiapChunkSpec) -> Result<Self> {
        let per_episode: Vec<Vec<(DMatrix<f64>, Vec<f64>)>> = episodes
            .par_iter()
            .map(|ep| {
                let last = ep.actions.len().saturating_sub(spec.future);
                (spec.history..=last)
                    .filter(|&t| t + spec.future <= ep.actions.len())
                    .map(|t| {
                        let chunk = make_biap_chunk(&ep.actions, t, spec)?;
                        Ok((chunk_targets(&chunk, spec)?, observation(&ep.states[..=t])))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let (targets, observations) = per_episode.into_iter().flatten().unzip();
        Self::new(spec.clone(), targets, observations)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn action_dim(&self) -> usize {
        self.targets[0].ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.observations[0].len()
    }

    fn normalizers(&self) -> Result<(Normalizer, Normalizer)> {
        let flat: Vec<Vec<f64>> = self.targets.iter().map(flatten).collect();
        let ctrl = Normalizer::fit(
            flat.iter().map(Vec::as_slice),
            self.spec.n_ctrl * self.action_dim(),
            NORM_FLOOR,
        )?;
        let obs = Normalizer::fit(
            self.observations.iter().map(Vec::as_slice),
            self.obs_dim(),
            NORM_FLOOR,
        )?;
        Ok((ctrl, obs))
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Mlp,
    v: Mlp,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: net.zeros_like(),
            v: net.zeros_like(),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &mut Mlp) {
        self.t += 1;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        net.zip_params_mut([grads, &mut self.m, &mut self.v], |p, g, m, v| {
            *m = b1 * *m + (1.0 - b1) * *g;
            *v = b2 * *v + (1.0 - b2) * *g * *g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
    }
}

/// Normalized `(input, target)` columns for a set of dataset items.
struct Batch {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

fn build_batch(
    model: &FlowModel,
    data: &FlowDataset,
    obs_normed: &[Vec<f64>],
    picks: &[usize],
    rng: &mut ChaCha8Rng,
) -> Batch {
    let out_dim = model.net.output_dim();
    let mut x = DMatrix::zeros(model.net.input_dim(), picks.len());
    let mut y = DMatrix::zeros(out_dim, picks.len());
    for (col, &i) in picks.iter().enumerate() {
        let c_star = model.normalize(&data.targets[i]);
        let s = flow_sample(&c_star, rng);
        model.fill_input(&mut x, col, &flatten(&s.c_tau), s.tau, &obs_normed[i]);
        for (r, v) in flatten(&s.target).into_iter().enumerate() {
            y[(r, col)] = v;
        }
    }
    Batch { x, y }
}

fn eval_batch(model: &FlowModel, data: &FlowDataset, obs_normed: &[Vec<f64>], seed: u64) -> Batch {
    let mut rng = stream_rng(seed, "eval-batch", 0);
    let picks: Vec<usize> = (0..EVAL_SAMPLES)
        .map(|_| rng.random_range(0..data.len()))
        .collect();
    build_batch(model, data, obs_normed, &picks, &mut rng)
}

/// Loss of `model` on a fixed seeded evaluation batch drawn from `data`.
pub fn eval_loss(model: &FlowModel, data: &FlowDataset, seed: u64) -> f64 {
    let obs_normed: Vec<Vec<f64>> = data
        .observations
        .iter()
        .map(|o| model.obs_norm.apply(o))
        .collect();
    let b = eval_batch(model, data, &obs_normed, seed);
    mse_with_grad(&model.net.forward(&b.x), &b.y).0
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTrace {
    /// loss of each training minibatch before its update
    pub train_losses: Vec<f64>,
    /// `(step, loss)` on the fixed evaluation batch, including step 0 and the final step
    pub eval_losses: Vec<(usize, f64)>,
    pub checkpoints: Vec<(usize, FlowModel)>,
}

impl TrainingTrace {
    pub fn initial_loss(&self) -> f64 {
        self.eval_losses.first().map_or(f64::NAN, |e| e.1)
    }

    pub fn final_loss(&self) -> f64 {
        self.eval_losses.last().map_or(f64::NAN, |e| e.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,eval_loss,train_loss\n");
        for &(step, eval) in &self.eval_losses {
            let train = self
                .train_losses
                .get(step)
                .map_or(String::new(), |l| l.to_string());
            out.push_str(&format!("{step},{eval},{train}\n"));
        }
        out
    }
}

/// Builds a model sized for `data` with normalization fitted on it, then
/// trains it.
pub fn train(data: &FlowDataset, cfg: &TrainConfig) -> Result<(FlowModel, TrainingTrace)> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let (ctrl_norm, obs_norm) = data.normalizers()?;
    let mut rng = stream_rng(cfg.seed, "init", 0);
    let model = FlowModel::new(
        data.spec.clone(),
        &cfg.hidden,
        ctrl_norm,
        obs_norm,
        cfg.seed,
        &mut rng,
    )?;
    train_model(model, data, cfg)
}

/// Runs `cfg.steps` Adam updates on an existing model.
pub fn train_model(
    mut model: FlowModel,
    data: &FlowDataset,
    cfg: &TrainConfig,
) -> Result<(FlowModel, TrainingTrace)> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if data.obs_dim() != model.obs_dim || data.action_dim() != model.action_dim || data.spec != model.spec {
        return Err(Error::invalid("dataset layout does not match model"));
    }
    let obs_normed: Vec<Vec<f64>> = data
        .observations
        .iter()
        .map(|o| model.obs_norm.apply(o))
        .collect();
    let eval = eval_batch(&model, data, &obs_normed, cfg.seed);
    let eval_at = |m: &FlowModel| mse_with_grad(&m.net.forward(&eval.x), &eval.y).0;

    let mut rng = stream_rng(cfg.seed, "train-batches", 0);
    let mut adam = Adam::new(&model.net, cfg.learning_rate);
    let mut trace = TrainingTrace {
        train_losses: Vec::with_capacity(cfg.steps),
        eval_losses: vec![(0, eval_at(&model))],
        checkpoints: Vec::new(),
    };
    if cfg.checkpoints.contains(&0) {
        trace.checkpoints.push((0, model.clone()));
    }
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let batch = build_batch(&model, data, &obs_normed, &picks, &mut rng);
        let (out, cache) = model.net.forward_cached(&batch.x);
        let (l, g_out) = mse_with_grad(&out, &batch.y);
        if !l.is_finite() {
            return Err(Error::Training { step, loss: l });
        }
        trace.train_losses.push(l);
        let mut grads = model.net.backward(&cache, &g_out);
        adam.step(&mut model.net, &mut grads);

        let done = step + 1;
        if done % cfg.log_every == 0 || done == cfg.steps {
            let e = eval_at(&model);
            if !e.is_finite() {
                return Err(Error::Training { step, loss: e });
            }
            trace.eval_losses.push((done, e));
        }
        if cfg.checkpoints.contains(&done) {
            trace.checkpoints.push((done, model.clone()));
        }
    }
    Ok((model, trace))
}
