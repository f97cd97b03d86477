//! Smoothness metrics for action trajectories.
//!
//! Velocity is the forward difference `(a_{t+1} − a_t) / dt`; acceleration is
//! the second central difference `(a_{t+1} − 2a_t + a_{t−1}) / dt²`.
//! Acceleration values are in action-units/s².

use serde::{Deserialize, Serialize};

use crate::bspline::ActionChunk;
use crate::error::{Error, Result};

/// Percentile reported by [`acc_p95`].
pub const ACC_PERCENTILE: f64 = 0.95;

fn require_len(traj: &ActionChunk) -> Result<()> {
    if traj.len() < 3 {
        return Err(Error::invalid(format!(
            "smoothness metrics need at least 3 steps, got {}",
            traj.len()
        )));
    }
    Ok(())
}

/// Per-dimension fraction of consecutive velocity pairs whose product is
/// negative. Exact zero velocities never count as crossings.
pub fn zcr_velocity(traj: &ActionChunk) -> Result<Vec<f64>> {
    require_len(traj)?;
    let a = traj.actions();
    let t_len = traj.len();
    let dt = traj.dt();
    Ok((0..traj.dims())
        .map(|j| {
            let vel: Vec<f64> = (0..t_len - 1)
                .map(|t| (a[(t + 1, j)] - a[(t, j)]) / dt)
                .collect();
            let flips = vel.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
            flips as f64 / (t_len - 2) as f64
        })
        .collect())
}

/// Nearest-rank percentile of `values` (`q` in `(0, 1]`).
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    values.sort_by(f64::total_cmp);
    let rank = (q * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Absolute accelerations of one dimension.
pub fn accelerations(traj: &ActionChunk, dim: usize) -> Vec<f64> {
    let a = traj.actions();
    let dt2 = traj.dt() * traj.dt();
    (1..traj.len().saturating_sub(1))
        .map(|t| ((a[(t + 1, dim)] - 2.0 * a[(t, dim)] + a[(t - 1, dim)]) / dt2).abs())
        .collect()
}

/// Per-dimension 95th percentile of absolute acceleration.
pub fn acc_p95(traj: &ActionChunk) -> Result<Vec<f64>> {
    require_len(traj)?;
    Ok((0..traj.dims())
        .map(|j| nearest_rank(&mut accelerations(traj, j), ACC_PERCENTILE))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub zcr_per_dim: Vec<f64>,
    /// action-units/s²
    pub acc_p95_per_dim: Vec<f64>,
    pub zcr_mean: f64,
    pub acc_p95_mean: f64,
}

impl SmoothnessReport {
    pub fn compute(traj: &ActionChunk) -> Result<Self> {
        let zcr_per_dim = zcr_velocity(traj)?;
        let acc_p95_per_dim = acc_p95(traj)?;
        Ok(Self::from_parts(zcr_per_dim, acc_p95_per_dim))
    }

    pub fn from_parts(zcr_per_dim: Vec<f64>, acc_p95_per_dim: Vec<f64>) -> Self {
        let zcr_mean = mean(&zcr_per_dim);
        let acc_p95_mean = mean(&acc_p95_per_dim);
        Self {
            zcr_per_dim,
            acc_p95_per_dim,
            zcr_mean,
            acc_p95_mean,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Relative reduction `100 · (raw − smooth) / raw`, zero when `raw` is zero.
pub fn percent_reduction(raw: f64, smooth: f64) -> f64 {
    if raw == 0.0 {
        0.0
    } else {
        100.0 * (raw - smooth) / raw
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessComparison {
    pub raw: SmoothnessReport,
    pub splined: SmoothnessReport,
    pub zcr_reduction_pct: f64,
    pub acc_p95_reduction_pct: f64,
}

pub fn smoothness_report(raw: &ActionChunk, splined: &ActionChunk) -> Result<SmoothnessComparison> {
    if raw.len() != splined.len() || raw.dims() != splined.dims() {
        return Err(Error::invalid(format!(
            "shape mismatch: {}x{} vs {}x{}",
            raw.len(),
            raw.dims(),
            splined.len(),
            splined.dims()
        )));
    }
    let raw_report = SmoothnessReport::compute(raw)?;
    let spl_report = SmoothnessReport::compute(splined)?;
    Ok(SmoothnessComparison {
        zcr_reduction_pct: percent_reduction(raw_report.zcr_mean, spl_report.zcr_mean),
        acc_p95_reduction_pct: percent_reduction(raw_report.acc_p95_mean, spl_report.acc_p95_mean),
        raw: raw_report,
        splined: spl_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn chunk(values: &[f64], dt: f64) -> ActionChunk {
        ActionChunk::new(DMatrix::from_column_slice(values.len(), 1, values), dt).unwrap()
    }

    #[test]
    fn monotone_has_no_crossings() {
        let v: Vec<f64> = (0..20).map(|t| (t as f64).powf(1.5)).collect();
        assert_eq!(zcr_velocity(&chunk(&v, 0.1)).unwrap(), vec![0.0]);
    }

    #[test]
    fn alternating_saw_flips_every_step() {
        let v: Vec<f64> = (0..15).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(zcr_velocity(&chunk(&v, 1.0)).unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_velocity_breaks_crossing() {
        // velocities: +1, 0, -1 -> no strict sign flip between neighbours
        let v = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(zcr_velocity(&chunk(&v, 1.0)).unwrap(), vec![0.0]);
    }

    #[test]
    fn sine_matches_direct_count() {
        let dt = 1.0 / 30.0;
        let v: Vec<f64> = (0..40)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 * dt).sin())
            .collect();
        let mut flips = 0;
        for t in 0..38 {
            let a = v[t + 1] - v[t];
            let b = v[t + 2] - v[t + 1];
            if (a > 0.0 && b < 0.0) || (a < 0.0 && b > 0.0) {
                flips += 1;
            }
        }
        // extrema at 0.25 s, 0.75 s and 1.25 s
        assert_eq!(flips, 3);
        assert_eq!(zcr_velocity(&chunk(&v, dt)).unwrap(), vec![flips as f64 / 38.0]);
    }

    #[test]
    fn ramp_and_quadratic_acceleration() {
        let ramp: Vec<f64> = (0..10).map(|t| 3.0 * t as f64 - 1.0).collect();
        assert_eq!(acc_p95(&chunk(&ramp, 0.5)).unwrap(), vec![0.0]);
        let quad: Vec<f64> = (0..10).map(|t| (t * t) as f64).collect();
        assert_eq!(acc_p95(&chunk(&quad, 1.0)).unwrap(), vec![2.0]);
    }

    #[test]
    fn acc_p95_matches_sort_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for len in [3usize, 4, 21, 40, 101] {
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dt = 0.05;
            let mut acc: Vec<f64> = (1..len - 1)
                .map(|t| ((v[t + 1] - 2.0 * v[t] + v[t - 1]) / (dt * dt)).abs())
                .collect();
            acc.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // smallest value with at least 95% of the sample at or below it
            let expected = *acc
                .iter()
                .find(|&&x| {
                    acc.iter().filter(|&&y| y <= x).count() as f64 >= 0.95 * acc.len() as f64
                })
                .unwrap();
            assert_eq!(acc_p95(&chunk(&v, dt)).unwrap(), vec![expected]);
        }
    }

    #[test]
    fn short_trajectories_rejected() {
        let c = chunk(&[0.0, 1.0], 1.0);
        assert!(zcr_velocity(&c).is_err());
        assert!(acc_p95(&c).is_err());
    }

    #[test]
    fn identical_inputs_have_zero_reduction() {
        let v: Vec<f64> = (0..30).map(|t| (t as f64 * 0.3).sin()).collect();
        let c = chunk(&v, 1.0 / 30.0);
        let cmp = smoothness_report(&c, &c).unwrap();
        assert_eq!(cmp.zcr_reduction_pct, 0.0);
        assert_eq!(cmp.acc_p95_reduction_pct, 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = chunk(&[0.0; 10], 1.0);
        let b = chunk(&[0.0; 11], 1.0);
        assert!(matches!(smoothness_report(&a, &b), Err(Error::InvalidArgument(_))));
    }

    proptest! {
        #[test]
        fn zcr_scale_and_shift_invariant(
            values in prop::collection::vec(-10.0f64..10.0, 3..60),
            scale in 0.01f64..100.0,
            shift in -5.0f64..5.0,
        ) {
            let base = chunk(&values, 1.0 / 30.0);
            let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
            prop_assert_eq!(zcr_velocity(&base).unwrap(), zcr_velocity(&chunk(&scaled, 1.0 / 30.0)).unwrap());
            // shift on a dyadic grid keeps differences exact
            let shift = (shift * 8.0).round() / 8.0;
            let grid: Vec<f64> = values.iter().map(|v| (v * 1024.0).round() / 1024.0).collect();
            let shifted: Vec<f64> = grid.iter().map(|v| v + shift).collect();
            let g = chunk(&grid, 1.0 / 30.0);
            let s = chunk(&shifted, 1.0 / 30.0);
            prop_assert_eq!(zcr_velocity(&g).unwrap(), zcr_velocity(&s).unwrap());
            prop_assert_eq!(acc_p95(&g).unwrap(), acc_p95(&s).unwrap());
        }

        #[test]
        fn zcr_stays_in_unit_interval(values in prop::collection::vec(-1.0f64..1.0, 3..80)) {
            let z = zcr_velocity(&chunk(&values, 0.1)).unwrap()[0];
            prop_assert!((0.0..=1.0).contains(&z));
        }
    }
}
