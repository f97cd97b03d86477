//! Trained flow model: network, input layout and normalization statistics.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample, BiapChunkSpec, Mlp, VectorField};
use crate::bspline::BSplineCurve;
use crate::error::{Error, Result};
use crate::trajio;

pub const TAU_EMBED_DIM: usize = 16;
const ARTIFACT_VERSION: u32 = 1;

/// Sine/cosine pairs at frequencies spaced geometrically from 1 to 100.
pub fn tau_embedding(tau: f64) -> [f64; TAU_EMBED_DIM] {
    let mut out = [0.0; TAU_EMBED_DIM];
    let pairs = TAU_EMBED_DIM / 2;
    for k in 0..pairs {
        let freq = 100f64.powf(k as f64 / (pairs - 1) as f64);
        out[2 * k] = (freq * tau).sin();
        out[2 * k + 1] = (freq * tau).cos();
    }
    out
}

/// Per-entry affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Entries with spread below `floor` are scaled by `floor`.
    pub fn fit<'a, I>(rows: I, dim: usize, floor: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::invalid(format!("row of length {} where {dim} expected", r.len())));
            }
            n += 1;
            for (k, v) in r.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        if n == 0 {
            return Err(Error::invalid("normalizer needs at least one row"));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / nf - m * m).max(0.0).sqrt().max(floor))
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Row-major flattening of an `N × D` control-point matrix.
pub(crate) fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub(crate) fn unflatten(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowModel {
    pub version: u32,
    pub spec: BiapChunkSpec,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub seed: u64,
    pub ctrl_norm: Normalizer,
    pub obs_norm: Normalizer,
    pub net: Mlp,
}

impl FlowModel {
    /// Network input width for a given layout.
    pub fn input_dim(spec: &BiapChunkSpec, action_dim: usize, obs_dim: usize) -> usize {
        spec.n_ctrl * action_dim + TAU_EMBED_DIM + obs_dim
    }

    /// Freshly initialized network; action and observation sizes are taken
    /// from the normalizers.
    pub fn new<R: Rng>(
        spec: BiapChunkSpec,
        hidden: &[usize],
        ctrl_norm: Normalizer,
        obs_norm: Normalizer,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let out = ctrl_norm.dim();
        if spec.n_ctrl == 0 || out == 0 || !out.is_multiple_of(spec.n_ctrl) {
            return Err(Error::invalid(format!(
                "control normalizer of size {out} does not cover {} control points",
                spec.n_ctrl
            )));
        }
        let action_dim = out / spec.n_ctrl;
        let obs_dim = obs_norm.dim();
        let mut widths = vec![Self::input_dim(&spec, action_dim, obs_dim)];
        widths.extend_from_slice(hidden);
        widths.push(out);
        let net = Mlp::new(&widths, rng)?;
        Ok(FlowModel {
            version: ARTIFACT_VERSION,
            spec,
            action_dim,
            obs_dim,
            seed,
            ctrl_norm,
            obs_norm,
            net,
        })
    }

    pub fn check(&self) -> Result<()> {
        let out = self.spec.n_ctrl * self.action_dim;
        if self.version != ARTIFACT_VERSION {
            return Err(Error::invalid(format!("unsupported artifact version {}", self.version)));
        }
        self.spec.validate()?;
        if self.net.input_dim() != Self::input_dim(&self.spec, self.action_dim, self.obs_dim)
            || self.net.output_dim() != out
            || self.ctrl_norm.dim() != out
            || self.obs_norm.dim() != self.obs_dim
        {
            return Err(Error::invalid("artifact layout is inconsistent"));
        }
        Ok(())
    }

    /// Writes one input column per `(c_tau, tau, normalized obs)` triple.
    pub(crate) fn fill_input(
        &self,
        x: &mut DMatrix<f64>,
        col: usize,
        c_tau_flat: &[f64],
        tau: f64,
        obs_normed: &[f64],
    ) {
        for (r, v) in c_tau_flat
            .iter()
            .chain(tau_embedding(tau).iter())
            .chain(obs_normed)
            .enumerate()
        {
            x[(r, col)] = *v;
        }
    }

    /// Control points in action units from the flow's normalized space.
    pub fn denormalize(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        unflatten(&self.ctrl_norm.invert(&flatten(c)), c.nrows(), c.ncols())
    }

    pub fn normalize(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        unflatten(&self.ctrl_norm.apply(&flatten(c)), c.nrows(), c.ncols())
    }

    /// Draws control points for `obs`, in action units.
    pub fn sample_control_points<R: Rng>(
        &self,
        obs: &[f64],
        n_steps: usize,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        let c = sample(self, obs, n_steps, rng)?;
        Ok(self.denormalize(&c))
    }

    pub fn sample_curve<R: Rng>(&self, obs: &[f64], n_steps: usize, rng: &mut R) -> Result<BSplineCurve> {
        BSplineCurve::clamped(self.sample_control_points(obs, n_steps, rng)?, self.spec.degree)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        trajio::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: FlowModel = trajio::read_json(path)?;
        model
            .check()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(model)
    }
}

impl VectorField for FlowModel {
    fn shape(&self) -> (usize, usize) {
        (self.spec.n_ctrl, self.action_dim)
    }

    /// Works in normalized control-point space; `obs` is raw.
    fn velocity(&self, c_tau: &DMatrix<f64>, tau: f64, obs: &[f64]) -> Result<DMatrix<f64>> {
        if obs.len() != self.obs_dim {
            return Err(Error::invalid(format!(
                "observation has {} features, model expects {}",
                obs.len(),
                self.obs_dim
            )));
        }
        if c_tau.shape() != self.shape() {
            return Err(Error::invalid("control-point shape mismatch"));
        }
        let mut x = DMatrix::zeros(self.net.input_dim(), 1);
        self.fill_input(&mut x, 0, &flatten(c_tau), tau, &self.obs_norm.apply(obs));
        let out = self.net.forward(&x);
        Ok(unflatten(out.as_slice(), self.spec.n_ctrl, self.action_dim))
    }
}
