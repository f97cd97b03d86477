//! Datasets and aggregate reports behind the representation and smoothness
//! benchmarks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bspline::{fit_least_squares, reconstruct, ActionChunk};
use crate::codec::{score, Codec, CodecKind, CodecParams, ReprScore};
use crate::error::{Error, Result};
use crate::metrics::{smoothness_report, SmoothnessComparison};
use crate::seed::stream_rng;
use crate::sim::{episode_seed, rollout_expert, Episode, EpisodeConfig};

/// `count` windows of `len` ticks, one per episode in turn, each starting at
/// a seeded offset.
pub fn sample_windows(episodes: &[Episode], count: usize, len: usize, seed: u64) -> Result<Vec<ActionChunk>> {
    if episodes.is_empty() {
        return Err(Error::invalid("no episodes to draw windows from"));
    }
    let mut rng = stream_rng(seed, "windows", 0);
    (0..count)
        .map(|i| {
            let ep = &episodes[i % episodes.len()];
            if ep.actions.len() < len {
                return Err(Error::invalid(format!(
                    "episode {} has {} ticks, window needs {len}",
                    ep.seed,
                    ep.actions.len()
                )));
            }
            let start = rng.random_range(0..=ep.actions.len() - len);
            ep.actions.window(start, len)
        })
        .collect()
}

/// Expert rollouts for `n` seeds derived from `cfg.seed`.
pub fn expert_episodes(cfg: &EpisodeConfig, n: usize) -> Result<Vec<Episode>> {
    use rayon::prelude::*;
    (0..n as u64)
        .into_par_iter()
        .map(|i| rollout_expert(cfg, episode_seed(cfg.seed, i)))
        .collect()
}

/// Noise-free expert windows: the smooth-demo dataset.
pub fn smooth_demo_chunks(cfg: &EpisodeConfig, count: usize, len: usize) -> Result<Vec<ActionChunk>> {
    let clean = EpisodeConfig {
        noise_sigma: 0.0,
        ..cfg.clone()
    };
    let episodes = expert_episodes(&clean, count.clamp(1, 100))?;
    sample_windows(&episodes, count, len, cfg.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprEntry {
    pub codec: String,
    #[serde(flatten)]
    pub score: ReprScore,
}

/// Scores every codec on `chunks`; quantizers are calibrated on the same data.
pub fn bench_repr(chunks: &[ActionChunk], params: &CodecParams) -> Result<Vec<ReprEntry>> {
    CodecKind::ALL
        .iter()
        .map(|&kind| {
            let codec = Codec::calibrated_with(kind, chunks, params)?;
            Ok(ReprEntry {
                codec: kind.name().to_string(),
                score: score(&codec, chunks)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessBench {
    pub trajectories: usize,
    pub median_zcr_reduction_pct: f64,
    pub median_acc_p95_reduction_pct: f64,
    pub mean_zcr_reduction_pct: f64,
    pub mean_acc_p95_reduction_pct: f64,
    pub per_trajectory: Vec<SmoothnessComparison>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Raw versus least-squares-spline smoothness for each trajectory.
pub fn bench_smooth(trajectories: &[ActionChunk], n_ctrl: usize, degree: usize) -> Result<SmoothnessBench> {
    let per_trajectory = trajectories
        .iter()
        .map(|raw| {
            let fit = fit_least_squares(raw, n_ctrl, degree)?;
            let splined = reconstruct(&fit.curve, raw.len())?.with_dt(raw.dt())?;
            smoothness_report(raw, &splined)
        })
        .collect::<Result<Vec<_>>>()?;
    let zcr: Vec<f64> = per_trajectory.iter().map(|c| c.zcr_reduction_pct).collect();
    let acc: Vec<f64> = per_trajectory.iter().map(|c| c.acc_p95_reduction_pct).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(SmoothnessBench {
        trajectories: per_trajectory.len(),
        median_zcr_reduction_pct: median(&zcr),
        median_acc_p95_reduction_pct: median(&acc),
        mean_zcr_reduction_pct: mean(&zcr),
        mean_acc_p95_reduction_pct: mean(&acc),
        per_trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn windows_are_seeded_slices() {
        let cfg = EpisodeConfig::default();
        let eps = expert_episodes(&cfg, 3).unwrap();
        let a = sample_windows(&eps, 7, 40, 1).unwrap();
        let b = sample_windows(&eps, 7, 40, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|c| c.len() == 40));
        assert!(sample_windows(&eps, 1, 181, 1).is_err());
        assert!(sample_windows(&[], 1, 40, 1).is_err());
    }

    #[test]
    fn smooth_chunks_are_noise_free() {
        let cfg = EpisodeConfig::default();
        let chunks = smooth_demo_chunks(&cfg, 10, 40).unwrap();
        assert_eq!(chunks.len(), 10);
        let clean = EpisodeConfig {
            noise_sigma: 0.0,
            ..cfg
        };
        let ep = rollout_expert(&clean, episode_seed(clean.seed, 0)).unwrap();
        let first = &chunks[0];
        let found = (0..=ep.actions.len() - 40)
            .any(|s| ep.actions.window(s, 40).unwrap().actions() == first.actions());
        assert!(found);
    }

    #[test]
    fn repr_bench_lists_all_codecs() {
        let chunks = smooth_demo_chunks(&EpisodeConfig::default(), 20, 40).unwrap();
        let r = bench_repr(&chunks, &CodecParams::default()).unwrap();
        let names: Vec<&str> = r.iter().map(|e| e.codec.as_str()).collect();
        assert_eq!(names.len(), 4);
        assert!(names.contains(&"bspline_continuous"));
    }
}
