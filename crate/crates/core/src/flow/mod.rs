//! Flow matching over B-spline control points.
//!
//! A chunk spans `history` executed steps and `future` steps to come; its
//! least-squares control points are the generation target. The network
//! learns the velocity `target − z` along the straight path from noise `z`
//! to the target and is integrated with explicit Euler steps at inference.

mod mlp;
mod model;
mod train;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bspline::{fit_least_squares, ActionChunk};
use crate::error::{Error, Result};

pub use mlp::{mse_with_grad, Dense, ForwardCache, Mlp};
pub use model::{tau_embedding, FlowModel, Normalizer, TAU_EMBED_DIM};
pub use train::{
    eval_loss, train, train_model, Adam, FlowDataset, TrainConfig, TrainingTrace,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiapChunkSpec {
    /// executed steps before the chunk's first new action
    pub history: usize,
    /// new actions per chunk
    pub future: usize,
    pub n_ctrl: usize,
    pub degree: usize,
}

impl Default for BiapChunkSpec {
    fn default() -> Self {
        Self {
            history: 8,
            future: 32,
            n_ctrl: 8,
            degree: 3,
        }
    }
}

impl BiapChunkSpec {
    pub fn len(&self) -> usize {
        self.history + self.future
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.history < 1 {
            v.push("history must be >= 1".into());
        }
        if self.future < 1 {
            v.push("future must be >= 1".into());
        }
        if self.degree < 1 {
            v.push("degree must be >= 1".into());
        }
        if self.n_ctrl < self.degree + 1 {
            v.push(format!("n_ctrl {} below degree + 1", self.n_ctrl));
        }
        if self.len() < self.n_ctrl {
            v.push(format!(
                "history + future = {} below n_ctrl {}",
                self.len(),
                self.n_ctrl
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Chunk parameter of the `k`-th row, on `[0, 1]`.
    pub fn param(&self, k: usize) -> f64 {
        k as f64 / (self.len() - 1) as f64
    }
}

/// Rows `[t − history, t + future)` of `traj`.
pub fn make_biap_chunk(traj: &ActionChunk, t: usize, spec: &BiapChunkSpec) -> Result<ActionChunk> {
    if t < spec.history || t + spec.future > traj.len() {
        return Err(Error::invalid(format!(
            "window at t={t} needs rows [{}, {}) of a {}-step trajectory",
            t as i64 - spec.history as i64,
            t + spec.future,
            traj.len()
        )));
    }
    traj.window(t - spec.history, spec.len())
}

/// Least-squares control points of a full chunk.
pub fn chunk_targets(chunk: &ActionChunk, spec: &BiapChunkSpec) -> Result<DMatrix<f64>> {
    if chunk.len() != spec.len() {
        return Err(Error::invalid(format!(
            "chunk has {} steps, spec wants {}",
            chunk.len(),
            spec.len()
        )));
    }
    Ok(fit_least_squares(chunk, spec.n_ctrl, spec.degree)?
        .curve
        .control_points()
        .clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z: DMatrix<f64>,
    pub tau: f64,
    pub c_tau: DMatrix<f64>,
    /// `c_star − z`
    pub target: DMatrix<f64>,
}

pub fn flow_sample_at(c_star: &DMatrix<f64>, z: DMatrix<f64>, tau: f64) -> FlowSample {
    let c_tau = z.zip_map(c_star, |z, c| (1.0 - tau) * z + tau * c);
    let target = c_star - &z;
    FlowSample {
        z,
        tau,
        c_tau,
        target,
    }
}

pub fn standard_normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn flow_sample<R: Rng>(c_star: &DMatrix<f64>, rng: &mut R) -> FlowSample {
    let z = standard_normal(c_star.nrows(), c_star.ncols(), rng);
    let tau = rng.random_range(0.0..=1.0);
    flow_sample_at(c_star, z, tau)
}

/// A velocity field over `rows × cols` control-point matrices.
pub trait VectorField {
    fn shape(&self) -> (usize, usize);

    fn velocity(&self, c_tau: &DMatrix<f64>, tau: f64, obs: &[f64]) -> Result<DMatrix<f64>>;
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    pub shape: (usize, usize),
    pub f: F,
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&DMatrix<f64>, f64, &[f64]) -> DMatrix<f64>,
{
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn velocity(&self, c_tau: &DMatrix<f64>, tau: f64, obs: &[f64]) -> Result<DMatrix<f64>> {
        Ok((self.f)(c_tau, tau, obs))
    }
}

/// Mean squared distance between the field's output and each sample's target.
pub fn loss<V: VectorField + ?Sized>(field: &V, batch: &[(FlowSample, Vec<f64>)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    let mut total = 0.0;
    for (s, obs) in batch {
        let v = field.velocity(&s.c_tau, s.tau, obs)?;
        total += (v - &s.target).norm_squared();
    }
    Ok(total / batch.len() as f64)
}

/// Euler integration from `z` at `τ = 0` to `τ = 1`.
pub fn sample_from<V: VectorField + ?Sized>(
    field: &V,
    z: DMatrix<f64>,
    obs: &[f64],
    n_steps: usize,
) -> Result<DMatrix<f64>> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be >= 1"));
    }
    let h = 1.0 / n_steps as f64;
    let mut c = z;
    for k in 0..n_steps {
        let v = field.velocity(&c, k as f64 * h, obs)?;
        c += v * h;
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::Sampling { step: k });
        }
    }
    Ok(c)
}

pub fn sample<V: VectorField + ?Sized, R: Rng>(
    field: &V,
    obs: &[f64],
    n_steps: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (rows, cols) = field.shape();
    sample_from(field, standard_normal(rows, cols, rng), obs, n_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{reconstruct, BSplineCurve};
    use crate::seed::stream_rng;

    fn random_traj(len: usize, seed: u64) -> ActionChunk {
        let mut rng = stream_rng(seed, "traj", 0);
        ActionChunk::new(
            DMatrix::from_fn(len, 3, |_, _| rng.random_range(-1.0..1.0)),
            1.0 / 30.0,
        )
        .unwrap()
    }

    #[test]
    fn window_matches_direct_slicing() {
        let spec = BiapChunkSpec::default();
        let traj = random_traj(100, 1);
        for t in [8, 30, 68] {
            let w = make_biap_chunk(&traj, t, &spec).unwrap();
            assert_eq!(w.len(), 40);
            for k in 0..40 {
                assert_eq!(w.row(k), traj.row(t - 8 + k));
            }
        }
        assert_eq!(
            make_biap_chunk(&traj, 8, &spec).unwrap().row(0),
            traj.row(0)
        );
        assert!(make_biap_chunk(&traj, 7, &spec).is_err());
        assert!(make_biap_chunk(&traj, 69, &spec).is_err());
    }

    #[test]
    fn spec_invariants() {
        assert!(BiapChunkSpec::default().validate().is_ok());
        let bad = BiapChunkSpec {
            history: 0,
            future: 2,
            n_ctrl: 8,
            degree: 3,
        };
        assert_eq!(bad.violations().len(), 2);
    }

    #[test]
    fn targets_fit_constant_chunk() {
        let spec = BiapChunkSpec::default();
        let chunk = ActionChunk::new(DMatrix::from_element(40, 3, 0.25), 1.0 / 30.0).unwrap();
        let c = chunk_targets(&chunk, &spec).unwrap();
        assert!((c.add_scalar(-0.25)).abs().max() < 1e-12);
        let short = ActionChunk::new(DMatrix::zeros(39, 3), 1.0 / 30.0).unwrap();
        assert!(chunk_targets(&short, &spec).is_err());
    }

    #[test]
    fn interpolation_endpoints() {
        let mut rng = stream_rng(0, "fs", 0);
        let c = standard_normal(8, 3, &mut rng);
        let z = standard_normal(8, 3, &mut rng);
        assert_eq!(flow_sample_at(&c, z.clone(), 1.0).c_tau, c);
        assert_eq!(flow_sample_at(&c, z.clone(), 0.0).c_tau, z);
        for _ in 0..20 {
            let s = flow_sample(&c, &mut rng);
            assert!((0.0..=1.0).contains(&s.tau));
            let direct = s.z.zip_map(&c, |z, c| (1.0 - s.tau) * z + s.tau * c);
            assert_eq!(s.c_tau, direct);
            assert_eq!(s.target, &c - &s.z);
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = stream_rng(1, "loss", 0);
        let batch: Vec<_> = (0..6)
            .map(|_| {
                let c = standard_normal(8, 3, &mut rng);
                (flow_sample(&c, &mut rng), vec![0.0])
            })
            .collect();
        let zero = FnField {
            shape: (8, 3),
            f: |_: &DMatrix<f64>, _: f64, _: &[f64]| DMatrix::zeros(8, 3),
        };
        let expected = batch.iter().map(|(s, _)| s.target.norm_squared()).sum::<f64>() / 6.0;
        assert!((loss(&zero, &batch).unwrap() - expected).abs() < 1e-12);

        // stub that recovers the target from (c_tau, tau) given the sample's z
        for (s, obs) in &batch {
            let z = s.z.clone();
            let exact = FnField {
                shape: (8, 3),
                f: move |c: &DMatrix<f64>, tau: f64, _: &[f64]| (c - &z) / tau,
            };
            let l = loss(&exact, &[(s.clone(), obs.clone())]).unwrap();
            assert!(l < 1e-18 || s.tau == 0.0);
        }
        assert!(loss(&zero, &[]).is_err());
    }

    #[test]
    fn constant_field_integrates_exactly() {
        let mut rng = stream_rng(2, "const", 0);
        let v = standard_normal(8, 3, &mut rng);
        let z = standard_normal(8, 3, &mut rng);
        let vc = v.clone();
        let field = FnField {
            shape: (8, 3),
            f: move |_: &DMatrix<f64>, _: f64, _: &[f64]| vc.clone(),
        };
        let expected = &z + &v;
        for n in [1, 5, 10] {
            let out = sample_from(&field, z.clone(), &[], n).unwrap();
            assert!((out - &expected).abs().max() < 1e-12);
        }
        assert!(sample_from(&field, z, &[], 0).is_err());
    }

    #[test]
    fn true_field_reaches_target_in_one_step() {
        let mut rng = stream_rng(3, "true", 0);
        let c_star = standard_normal(8, 3, &mut rng);
        let z = standard_normal(8, 3, &mut rng);
        let (cs, zc) = (c_star.clone(), z.clone());
        let field = FnField {
            shape: (8, 3),
            f: move |_: &DMatrix<f64>, _: f64, _: &[f64]| &cs - &zc,
        };
        for n in [1, 3, 10] {
            let out = sample_from(&field, z.clone(), &[], n).unwrap();
            assert!((out - &c_star).abs().max() < 1e-12);
        }
    }

    #[test]
    fn non_finite_sample_reports_step() {
        let field = FnField {
            shape: (2, 1),
            f: |_: &DMatrix<f64>, tau: f64, _: &[f64]| {
                DMatrix::from_element(2, 1, if tau > 0.4 { f64::NAN } else { 1.0 })
            },
        };
        let err = sample_from(&field, DMatrix::zeros(2, 1), &[], 5).unwrap_err();
        assert!(matches!(err, Error::Sampling { step: 3 }));
    }

    #[test]
    fn decoded_samples_are_c2() {
        let mut rng = stream_rng(4, "c2", 0);
        let curve = BSplineCurve::clamped(standard_normal(8, 3, &mut rng), 3).unwrap();
        let acc = curve.derivative(2).unwrap();
        for &k in curve.knots().interior_knots() {
            let span = acc.knots().find_span(k);
            let right = acc.eval(k).unwrap();
            let left = acc.eval_on_span(span - 1, k).unwrap();
            for (l, r) in left.iter().zip(&right) {
                assert!((l - r).abs() < 1e-9);
            }
        }
        assert_eq!(reconstruct(&curve, 40).unwrap().len(), 40);
    }
}
