//! Lossy action-chunk codecs and reconstruction fidelity scoring.
//!
//! Four representations are compared on equal footing:
//!
//! * per-step uniform quantization of every action into 256 bins,
//! * the lowest-frequency coefficients of an orthonormal DCT-II,
//! * least-squares cubic B-spline control points quantized into 256 bins,
//! * the same control points kept continuous.
//!
//! Quantizers are uniform mid-rise over a per-dimension `[min, max]` range
//! calibrated on a dataset; indices are `floor((x − min) / width)` (ties go
//! to the upper bin) and decode to bin centers.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bspline::{fit_least_squares, reconstruct, ActionChunk, BSplineCurve};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 256;
pub const DEFAULT_COEFFS: usize = 8;
pub const DEFAULT_CTRL: usize = 8;
pub const DEFAULT_DEGREE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Bins256,
    Dct8,
    BsplineDiscrete,
    BsplineContinuous,
}

impl CodecKind {
    pub const ALL: [CodecKind; 4] = [
        CodecKind::Bins256,
        CodecKind::Dct8,
        CodecKind::BsplineDiscrete,
        CodecKind::BsplineContinuous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CodecKind::Bins256 => "bins256",
            CodecKind::Dct8 => "dct8",
            CodecKind::BsplineDiscrete => "bspline_discrete",
            CodecKind::BsplineContinuous => "bspline_continuous",
        }
    }
}

/// Uniform mid-rise quantizer over per-dimension ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub bins: usize,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Quantizer {
    pub fn new(bins: usize, min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if bins < 2 {
            return Err(Error::invalid(format!("need at least 2 bins, got {bins}")));
        }
        if min.len() != max.len() {
            return Err(Error::invalid("calibration ranges have different lengths"));
        }
        for (d, (lo, hi)) in min.iter().zip(&max).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::invalid(format!(
                    "degenerate calibration range [{lo}, {hi}] in dimension {d}"
                )));
            }
        }
        Ok(Self { bins, min, max })
    }

    /// Per-column ranges of the stacked rows; constant columns are widened
    /// by a small margin so the range is never empty.
    pub fn calibrate<'a>(bins: usize, blocks: impl IntoIterator<Item = &'a DMatrix<f64>>) -> Result<Self> {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        for m in blocks {
            if min.is_empty() {
                min = vec![f64::INFINITY; m.ncols()];
                max = vec![f64::NEG_INFINITY; m.ncols()];
            }
            if m.ncols() != min.len() {
                return Err(Error::invalid("calibration blocks have different widths"));
            }
            for j in 0..m.ncols() {
                for v in m.column(j).iter() {
                    min[j] = min[j].min(*v);
                    max[j] = max[j].max(*v);
                }
            }
        }
        if min.is_empty() {
            return Err(Error::invalid("cannot calibrate on an empty dataset"));
        }
        for (lo, hi) in min.iter_mut().zip(max.iter_mut()) {
            if *hi <= *lo {
                let pad = 1e-6 * lo.abs().max(1.0);
                *lo -= pad;
                *hi += pad;
            }
        }
        Self::new(bins, min, max)
    }

    pub fn width(&self, dim: usize) -> f64 {
        (self.max[dim] - self.min[dim]) / self.bins as f64
    }

    /// Bin index of `x` in dimension `dim`; out-of-range values clamp to the edge bins.
    pub fn index(&self, dim: usize, x: f64) -> usize {
        let pos = ((x - self.min[dim]) / self.width(dim)).floor();
        pos.clamp(0.0, (self.bins - 1) as f64) as usize
    }

    pub fn center(&self, dim: usize, index: usize) -> f64 {
        self.min[dim] + (index as f64 + 0.5) * self.width(dim)
    }

    fn quantize(&self, m: &DMatrix<f64>) -> Result<Vec<u32>> {
        if m.ncols() != self.min.len() {
            return Err(Error::invalid(format!(
                "quantizer calibrated for {} dimensions, got {}",
                self.min.len(),
                m.ncols()
            )));
        }
        let mut out = Vec::with_capacity(m.len());
        for t in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.push(self.index(j, m[(t, j)]) as u32);
            }
        }
        Ok(out)
    }

    fn dequantize(&self, codes: &[u32], rows: usize) -> Result<DMatrix<f64>> {
        let d = self.min.len();
        if codes.len() != rows * d {
            return Err(Error::invalid(format!(
                "expected {} codes, got {}",
                rows * d,
                codes.len()
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| c as usize >= self.bins) {
            return Err(Error::invalid(format!("bin index {bad} out of range")));
        }
        Ok(DMatrix::from_fn(rows, d, |t, j| self.center(j, codes[t * d + j] as usize)))
    }
}

/// Orthonormal DCT-II of `x`, keeping the first `keep` coefficients.
pub fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len();
    (0..keep.min(n))
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, v)| v * (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Orthonormal DCT-III (inverse of [`dct2`]) of length `n` from a truncated spectrum.
pub fn idct(coeffs: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            coeffs
                .iter()
                .enumerate()
                .take(n)
                .map(|(k, c)| {
                    let scale = if k == 0 {
                        (1.0 / n as f64).sqrt()
                    } else {
                        (2.0 / n as f64).sqrt()
                    };
                    scale * c * (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()
                })
                .sum()
        })
        .collect()
}

/// Encoded chunk; the variant always matches the codec that produced it.
#[derive(Clone, Debug, PartialEq)]
pub enum Code {
    /// Row-major `T × D` bin indices.
    Bins(Vec<u32>),
    /// `coeffs × D` DCT coefficients (column per dimension).
    Dct(DMatrix<f64>),
    /// Row-major `N × D` bin indices of control points.
    ControlBins(Vec<u32>),
    /// `N × D` control points.
    Control(DMatrix<f64>),
}

/// A codec with its calibration, immutable after construction.
/// Sizes shared by the codecs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecParams {
    pub bins: usize,
    pub coeffs: usize,
    pub n_ctrl: usize,
    pub degree: usize,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            coeffs: DEFAULT_COEFFS,
            n_ctrl: DEFAULT_CTRL,
            degree: DEFAULT_DEGREE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Codec {
    Bins256 {
        quantizer: Quantizer,
    },
    Dct8 {
        coeffs: usize,
    },
    BsplineDiscrete {
        n_ctrl: usize,
        degree: usize,
        quantizer: Quantizer,
    },
    BsplineContinuous {
        n_ctrl: usize,
        degree: usize,
    },
}

impl Codec {
    pub fn kind(&self) -> CodecKind {
        match self {
            Codec::Bins256 { .. } => CodecKind::Bins256,
            Codec::Dct8 { .. } => CodecKind::Dct8,
            Codec::BsplineDiscrete { .. } => CodecKind::BsplineDiscrete,
            Codec::BsplineContinuous { .. } => CodecKind::BsplineContinuous,
        }
    }

    pub fn dct(coeffs: usize) -> Result<Self> {
        if coeffs == 0 {
            return Err(Error::invalid("DCT codec needs at least one coefficient"));
        }
        Ok(Codec::Dct8 { coeffs })
    }

    pub fn bspline_continuous(n_ctrl: usize, degree: usize) -> Result<Self> {
        if n_ctrl < degree + 1 {
            return Err(Error::invalid("control-point count below degree + 1"));
        }
        Ok(Codec::BsplineContinuous { n_ctrl, degree })
    }

    /// Builds a codec of `kind` with default parameters, calibrating the
    /// quantizing ones on `dataset`.
    pub fn calibrated(kind: CodecKind, dataset: &[ActionChunk]) -> Result<Self> {
        Self::calibrated_with(
            kind,
            dataset,
            &CodecParams::default(),
        )
    }

    /// Builds a codec of `kind`, fitting quantizer ranges on `dataset`.
    pub fn calibrated_with(kind: CodecKind, dataset: &[ActionChunk], params: &CodecParams) -> Result<Self> {
        match kind {
            CodecKind::Bins256 => Ok(Codec::Bins256 {
                quantizer: Quantizer::calibrate(
                    params.bins,
                    dataset.iter().map(ActionChunk::actions),
                )?,
            }),
            CodecKind::Dct8 => Self::dct(params.coeffs),
            CodecKind::BsplineDiscrete => {
                let ctrl = dataset
                    .iter()
                    .map(|c| {
                        fit_least_squares(c, params.n_ctrl, params.degree)
                            .map(|f| f.curve.control_points().clone())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Codec::BsplineDiscrete {
                    n_ctrl: params.n_ctrl,
                    degree: params.degree,
                    quantizer: Quantizer::calibrate(params.bins, ctrl.iter())?,
                })
            }
            CodecKind::BsplineContinuous => Self::bspline_continuous(params.n_ctrl, params.degree),
        }
    }

    pub fn encode(&self, chunk: &ActionChunk) -> Result<Code> {
        match self {
            Codec::Bins256 { quantizer } => Ok(Code::Bins(quantizer.quantize(chunk.actions())?)),
            Codec::Dct8 { coeffs } => {
                let d = chunk.dims();
                let mut out = DMatrix::zeros((*coeffs).min(chunk.len()), d);
                for j in 0..d {
                    let spectrum = dct2(&chunk.column(j), *coeffs);
                    for (k, c) in spectrum.into_iter().enumerate() {
                        out[(k, j)] = c;
                    }
                }
                Ok(Code::Dct(out))
            }
            Codec::BsplineDiscrete {
                n_ctrl,
                degree,
                quantizer,
            } => {
                let fit = fit_least_squares(chunk, *n_ctrl, *degree)?;
                Ok(Code::ControlBins(quantizer.quantize(fit.curve.control_points())?))
            }
            Codec::BsplineContinuous { n_ctrl, degree } => {
                let fit = fit_least_squares(chunk, *n_ctrl, *degree)?;
                Ok(Code::Control(fit.curve.control_points().clone()))
            }
        }
    }

    pub fn decode(&self, code: &Code, t_len: usize) -> Result<ActionChunk> {
        let actions = match (self, code) {
            (Codec::Bins256 { quantizer }, Code::Bins(codes)) => {
                quantizer.dequantize(codes, t_len)?
            }
            (Codec::Dct8 { .. }, Code::Dct(coeffs)) => {
                let d = coeffs.ncols();
                let mut out = DMatrix::zeros(t_len, d);
                for j in 0..d {
                    let column: Vec<f64> = coeffs.column(j).iter().copied().collect();
                    for (t, v) in idct(&column, t_len).into_iter().enumerate() {
                        out[(t, j)] = v;
                    }
                }
                out
            }
            (
                Codec::BsplineDiscrete {
                    n_ctrl,
                    degree,
                    quantizer,
                },
                Code::ControlBins(codes),
            ) => {
                let ctrl = quantizer.dequantize(codes, *n_ctrl)?;
                let curve = BSplineCurve::clamped(ctrl, *degree)?;
                reconstruct(&curve, t_len)?.into_actions()
            }
            (Codec::BsplineContinuous { n_ctrl, degree }, Code::Control(ctrl)) => {
                if ctrl.nrows() != *n_ctrl {
                    return Err(Error::invalid(format!(
                        "expected {n_ctrl} control points, got {}",
                        ctrl.nrows()
                    )));
                }
                let curve = BSplineCurve::clamped(ctrl.clone(), *degree)?;
                reconstruct(&curve, t_len)?.into_actions()
            }
            _ => return Err(Error::invalid("code does not match codec")),
        };
        ActionChunk::new(actions, crate::bspline::DEFAULT_DT)
    }

    /// Encode then decode at the chunk's own length and sample period.
    pub fn round_trip(&self, chunk: &ActionChunk) -> Result<ActionChunk> {
        self.decode(&self.encode(chunk)?, chunk.len())?
            .with_dt(chunk.dt())
    }
}

/// Reconstruction fidelity of one codec over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprScore {
    /// Grand mean of `|a − â|` over all elements.
    pub mean_error: f64,
    /// Root of the grand mean of `(a − â)²`.
    pub rms_error: f64,
    /// `10 log10(Σa² / Σ(a − â)²)` pooled over the dataset; `+inf` when lossless.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
}

pub fn snr_db(signal_power: f64, error_power: f64) -> f64 {
    if error_power == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal_power / error_power).log10()
    }
}

/// Pooled error statistics for `codec` over `dataset`.
pub fn score(codec: &Codec, dataset: &[ActionChunk]) -> Result<ReprScore> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot score on an empty dataset"));
    }
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut signal = 0.0;
    let mut count = 0usize;
    for chunk in dataset {
        let rec = codec.round_trip(chunk)?;
        for (a, b) in chunk.actions().iter().zip(rec.actions().iter()) {
            abs_sum += (a - b).abs();
            sq_sum += (a - b) * (a - b);
            signal += a * a;
        }
        count += chunk.actions().len();
    }
    Ok(ReprScore {
        mean_error: abs_sum / count as f64,
        rms_error: (sq_sum / count as f64).sqrt(),
        snr_db: snr_db(signal, sq_sum),
    })
}

/// Mean absolute reconstruction error of a single chunk.
pub fn chunk_mean_error(codec: &Codec, chunk: &ActionChunk) -> Result<f64> {
    let rec = codec.round_trip(chunk)?;
    Ok((chunk.actions() - rec.actions()).abs().mean())
}

mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid snr {t:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::DEFAULT_DT;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_chunk(rng: &mut ChaCha8Rng, t: usize, d: usize) -> ActionChunk {
        ActionChunk::new(DMatrix::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0)), DEFAULT_DT)
            .unwrap()
    }

    #[test]
    fn midpoint_of_symmetric_range_rounds_up() {
        let q = Quantizer::new(256, vec![-1.0], vec![1.0]).unwrap();
        assert_eq!(q.index(0, 0.0), 128);
        assert_eq!(q.index(0, -1.0), 0);
        assert_eq!(q.index(0, 1.0), 255);
        assert_eq!(q.index(0, 7.0), 255);
        assert_eq!(q.index(0, -7.0), 0);
    }

    #[test]
    fn quantizer_rejects_bad_calibration() {
        assert!(Quantizer::new(1, vec![0.0], vec![1.0]).is_err());
        assert!(Quantizer::new(256, vec![1.0], vec![1.0]).is_err());
        assert!(Quantizer::calibrate(256, std::iter::empty()).is_err());
    }

    #[test]
    fn bins_round_trip_within_half_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<_> = (0..5).map(|_| random_chunk(&mut rng, 40, 3)).collect();
        let codec = Codec::calibrated(CodecKind::Bins256, &data).unwrap();
        let Codec::Bins256 { quantizer } = &codec else { unreachable!() };
        for chunk in &data {
            let rec = codec.round_trip(chunk).unwrap();
            for j in 0..3 {
                let bound = (quantizer.max[j] - quantizer.min[j]) / 510.0 + 1e-12;
                let half = quantizer.width(j) / 2.0 + 1e-12;
                for t in 0..40 {
                    let e = (chunk.actions()[(t, j)] - rec.actions()[(t, j)]).abs();
                    assert!(e <= half && e <= bound);
                }
            }
        }
    }

    #[test]
    fn dct_of_constant_is_dc_only() {
        let chunk = ActionChunk::new(DMatrix::from_element(40, 2, 0.3), DEFAULT_DT).unwrap();
        let Code::Dct(c) = Codec::dct(8).unwrap().encode(&chunk).unwrap() else { unreachable!() };
        assert!((c[(0, 0)] - 0.3 * 40f64.sqrt()).abs() < 1e-12);
        for k in 1..8 {
            assert!(c[(k, 0)].abs() < 1e-12 && c[(k, 1)].abs() < 1e-12);
        }
    }

    #[test]
    fn band_limited_signal_survives_dct8() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spectrum: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let signal = idct(&spectrum, n);
        let chunk = ActionChunk::new(DMatrix::from_column_slice(n, 1, &signal), DEFAULT_DT).unwrap();
        let rec = Codec::dct(8).unwrap().round_trip(&chunk).unwrap();
        assert!((chunk.actions() - rec.actions()).amax() < 1e-8);
    }

    #[test]
    fn full_dct_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..17).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = dct2(&x, 17);
        let energy_x: f64 = x.iter().map(|v| v * v).sum();
        let energy_c: f64 = c.iter().map(|v| v * v).sum();
        assert!((energy_x - energy_c).abs() < 1e-12);
        let back = idct(&c, 17);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_dct_is_the_least_squares_projection() {
        // oracle: least squares over the explicit 8 cosine basis vectors
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40;
        let basis = DMatrix::from_fn(n, 8, |i, k| {
            (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()
        });
        for _ in 0..20 {
            let chunk = random_chunk(&mut rng, n, 1);
            let rec = Codec::dct(8).unwrap().round_trip(&chunk).unwrap();
            let normal = basis.transpose() * &basis;
            let coef = normal.lu().solve(&(basis.transpose() * chunk.actions())).unwrap();
            let proj = &basis * coef;
            assert!((proj - rec.actions()).amax() < 1e-10);
        }
    }

    #[test]
    fn continuous_bspline_lossless_on_spline_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let curve = BSplineCurve::clamped(
            DMatrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0)),
            3,
        )
        .unwrap();
        let chunk = reconstruct(&curve, 40).unwrap();
        let codec = Codec::calibrated(CodecKind::BsplineContinuous, std::slice::from_ref(&chunk)).unwrap();
        let rec = codec.round_trip(&chunk).unwrap();
        assert!((chunk.actions() - rec.actions()).amax() < 1e-8);
        let s = score(&codec, std::slice::from_ref(&rec)).unwrap();
        assert!(s.mean_error < 1e-12);
    }

    #[test]
    fn lossless_score_reports_infinite_snr() {
        let chunk = ActionChunk::new(DMatrix::from_fn(40, 1, |t, _| t as f64 / 39.0), DEFAULT_DT)
            .unwrap();
        let flat = ActionChunk::new(DMatrix::from_element(40, 1, 0.5), DEFAULT_DT).unwrap();
        let codec = Codec::dct(8).unwrap();
        let s = score(&codec, &[flat]).unwrap();
        assert!(s.mean_error < 1e-15);
        assert!(score(&codec, &[chunk]).unwrap().snr_db > 20.0);
        assert_eq!(snr_db(1.0, 0.0), f64::INFINITY);
        let json = serde_json::to_string(&ReprScore {
            mean_error: 0.0,
            rms_error: 0.0,
            snr_db: f64::INFINITY,
        })
        .unwrap();
        assert!(json.contains("\"inf\""));
        let back: ReprScore = serde_json::from_str(&json).unwrap();
        assert_eq!(back.snr_db, f64::INFINITY);
    }

    #[test]
    fn snr_increases_as_error_shrinks() {
        let mut prev = f64::NEG_INFINITY;
        for e in [10.0, 1.0, 0.5, 1e-3, 1e-9] {
            let s = snr_db(2.0, e);
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn discrete_bspline_never_beats_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<_> = (0..30).map(|_| random_chunk(&mut rng, 40, 2)).collect();
        let cont = Codec::calibrated(CodecKind::BsplineContinuous, &data).unwrap();
        let disc = Codec::calibrated(CodecKind::BsplineDiscrete, &data).unwrap();
        for chunk in &data {
            // quantizing the least-squares optimum can only add squared error
            let ca = (chunk.actions() - cont.round_trip(chunk).unwrap().actions()).norm_squared();
            let cb = (chunk.actions() - disc.round_trip(chunk).unwrap().actions()).norm_squared();
            assert!(cb >= ca);
        }
    }

    #[test]
    fn mismatched_code_rejected() {
        let codec = Codec::dct(8).unwrap();
        assert!(codec.decode(&Code::Bins(vec![0; 40]), 40).is_err());
        let bins = Codec::Bins256 {
            quantizer: Quantizer::new(256, vec![0.0], vec![1.0]).unwrap(),
        };
        assert!(bins.decode(&Code::Bins(vec![0; 39]), 40).is_err());
        assert!(score(&codec, &[]).is_err());
    }

    #[test]
    fn uncalibrated_quantizing_codec_rejected() {
        assert!(Codec::calibrated(CodecKind::Bins256, &[]).is_err());
        assert!(Codec::calibrated(CodecKind::BsplineDiscrete, &[]).is_err());
    }
}
