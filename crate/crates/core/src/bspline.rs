//! Clamped B-splines over action chunks.
//!
//! A chunk of `T` actions with `D` dimensions is represented by `N` control
//! points per dimension sharing one open-uniform knot vector. Fitting maps
//! row `t` of the chunk to the parameter `t / (T - 1)` on the normalized
//! domain `[0, 1]` and solves the least-squares problem for all dimensions
//! jointly through a single QR factorization of the design matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds per control tick at the default 30 Hz control rate.
pub const DEFAULT_DT: f64 = 1.0 / 30.0;

/// Relative tolerance used when deciding whether a parameter lies on the domain.
pub const DOMAIN_TOLERANCE: f64 = 1e-12;

/// Diagonal entries of `R` below this fraction of the largest one mark a
/// rank-deficient design matrix.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Knot vector of a clamped (open-uniform) B-spline.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
    degree: usize,
    n_ctrl: usize,
}

impl KnotVector {
    /// Builds the clamped knot vector with `n_ctrl - degree` equal spans over `domain`.
    pub fn clamped(n_ctrl: usize, degree: usize, domain: (f64, f64)) -> Result<Self> {
        let (lo, hi) = domain;
        if n_ctrl < degree + 1 {
            return Err(Error::invalid(format!(
                "need at least degree + 1 = {} control points, got {n_ctrl}",
                degree + 1
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::invalid(format!("degenerate domain [{lo}, {hi}]")));
        }
        let spans = n_ctrl - degree;
        let mut knots = Vec::with_capacity(n_ctrl + degree + 1);
        knots.extend(std::iter::repeat_n(lo, degree + 1));
        for j in 1..spans {
            knots.push(lo + (hi - lo) * j as f64 / spans as f64);
        }
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(Self {
            knots,
            degree,
            n_ctrl,
        })
    }

    /// Validates an explicit knot list against the clamped open-uniform layout.
    pub fn from_knots(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.len() < 2 * (degree + 1) {
            return Err(Error::invalid(format!(
                "{} knots cannot hold a clamped spline of degree {degree}",
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::invalid("knots must be finite"));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("knots must be non-decreasing"));
        }
        let n_ctrl = knots.len() - degree - 1;
        let lo = knots[0];
        let hi = knots[knots.len() - 1];
        if hi <= lo {
            return Err(Error::invalid("knot vector spans an empty domain"));
        }
        if knots[..=degree].iter().any(|&k| k != lo) || knots[n_ctrl..].iter().any(|&k| k != hi)
        {
            return Err(Error::invalid("knot vector is not clamped"));
        }
        let expected = Self::clamped(n_ctrl, degree, (lo, hi))?;
        let scale = hi - lo;
        if knots
            .iter()
            .zip(&expected.knots)
            .any(|(a, b)| (a - b).abs() > 1e-9 * scale)
        {
            return Err(Error::invalid("interior knots are not uniformly spaced"));
        }
        Ok(Self {
            knots,
            degree,
            n_ctrl,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_ctrl(&self) -> usize {
        self.n_ctrl
    }

    /// Valid evaluation span `[knots[p], knots[N]]`.
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.n_ctrl])
    }

    /// Snaps `u` onto the domain when it is within round-off of it.
    pub fn check_param(&self, u: f64) -> Result<f64> {
        let (lo, hi) = self.domain();
        let tol = DOMAIN_TOLERANCE * (hi - lo).max(1.0);
        if !u.is_finite() || u < lo - tol || u > hi + tol {
            return Err(Error::Domain { u, lo, hi });
        }
        Ok(u.clamp(lo, hi))
    }

    /// Index `s` in `[p, N)` with `knots[s] <= u < knots[s + 1]`; the right
    /// endpoint belongs to the last non-empty span.
    pub fn find_span(&self, u: f64) -> usize {
        let p = self.degree;
        let n = self.n_ctrl;
        if u >= self.knots[n] {
            return n - 1;
        }
        if u <= self.knots[p] {
            return p;
        }
        let (mut low, mut high) = (p, n);
        let mut mid = (low + high) / 2;
        while u < self.knots[mid] || u >= self.knots[mid + 1] {
            if u < self.knots[mid] {
                high = mid;
            } else {
                low = mid;
            }
            mid = (low + high) / 2;
        }
        mid
    }

    /// The `p + 1` basis values `N_{span-p..=span, p}(u)`, using the
    /// polynomial pieces of `span` (also valid at the span's end points).
    pub fn basis_funs(&self, span: usize, u: f64) -> Vec<f64> {
        let p = self.degree;
        let k = &self.knots;
        let mut out = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = u - k[span + 1 - j];
            right[j] = k[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { out[r] / denom };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        out
    }

    /// Spans `s` with `knots[s] < knots[s + 1]`, in order.
    pub fn nonempty_spans(&self) -> Vec<usize> {
        (self.degree..self.n_ctrl)
            .filter(|&s| self.knots[s] < self.knots[s + 1])
            .collect()
    }

    /// Knots strictly inside the domain.
    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.n_ctrl]
    }
}

/// Clamped knots with `n_ctrl - degree` uniform spans over `domain`.
pub fn make_clamped_knots(n_ctrl: usize, degree: usize, domain: (f64, f64)) -> Result<KnotVector> {
    KnotVector::clamped(n_ctrl, degree, domain)
}

/// `N_{i,p}(u)` by the Cox–de Boor recursion over `knots`, with `0/0 := 0`.
///
/// `p` may be lower than the knot vector's own degree; the lower-degree
/// functions are the intermediate terms of the recursion. At the right end
/// of the domain the last basis function evaluates to one.
pub fn basis(i: usize, p: usize, u: f64, knots: &KnotVector) -> Result<f64> {
    let k = knots.knots();
    if i + p + 1 >= k.len() {
        return Err(Error::invalid(format!(
            "basis index {i} of degree {p} exceeds knot vector of length {}",
            k.len()
        )));
    }
    let u = knots.check_param(u)?;
    Ok(cox_de_boor(k, i, p, u))
}

fn cox_de_boor(k: &[f64], i: usize, p: usize, u: f64) -> f64 {
    if p == 0 {
        let last = k[k.len() - 1];
        if u == last {
            // right end: the non-empty interval that closes at `last`
            return if k[i] < k[i + 1] && k[i + 1] == last {
                1.0
            } else {
                0.0
            };
        }
        return if k[i] <= u && u < k[i + 1] { 1.0 } else { 0.0 };
    }
    let mut value = 0.0;
    let d1 = k[i + p] - k[i];
    if d1 != 0.0 {
        value += (u - k[i]) / d1 * cox_de_boor(k, i, p - 1, u);
    }
    let d2 = k[i + p + 1] - k[i + 1];
    if d2 != 0.0 {
        value += (k[i + p + 1] - u) / d2 * cox_de_boor(k, i + 1, p - 1, u);
    }
    value
}

/// Raw actions sampled at the control rate: rows are ticks, columns are
/// action dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    actions: DMatrix<f64>,
    dt: f64,
}

impl ActionChunk {
    pub fn new(actions: DMatrix<f64>, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        if actions.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("action chunk contains non-finite entries"));
        }
        Ok(Self { actions, dt })
    }

    pub fn from_rows(rows: &[Vec<f64>], dt: f64) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged action rows"));
        }
        Self::new(
            DMatrix::from_fn(rows.len(), d, |t, j| rows[t][j]),
            dt,
        )
    }

    pub fn actions(&self) -> &DMatrix<f64> {
        &self.actions
    }

    pub fn into_actions(self) -> DMatrix<f64> {
        self.actions
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        self.dt = dt;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.actions.ncols()
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.actions.row(t).iter().copied().collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.actions.column(j).iter().copied().collect()
    }

    /// Rows `[start, start + len)` as a new chunk.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::invalid(format!(
                "window [{start}, {}) exceeds chunk of length {}",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            actions: self.actions.rows(start, len).into_owned(),
            dt: self.dt,
        })
    }
}

/// One clamped B-spline per action dimension over a shared knot vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveJson", into = "CurveJson")]
pub struct BSplineCurve {
    knots: KnotVector,
    control_points: DMatrix<f64>,
}

impl BSplineCurve {
    pub fn new(knots: KnotVector, control_points: DMatrix<f64>) -> Result<Self> {
        if control_points.nrows() != knots.n_ctrl() {
            return Err(Error::invalid(format!(
                "{} control-point rows for a knot vector expecting {}",
                control_points.nrows(),
                knots.n_ctrl()
            )));
        }
        if control_points.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite control point"));
        }
        Ok(Self {
            knots,
            control_points,
        })
    }

    /// Curve on the normalized domain `[0, 1]` with clamped uniform knots.
    pub fn clamped(control_points: DMatrix<f64>, degree: usize) -> Result<Self> {
        let knots = KnotVector::clamped(control_points.nrows(), degree, (0.0, 1.0))?;
        Self::new(knots, control_points)
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.knots.degree()
    }

    pub fn n_ctrl(&self) -> usize {
        self.knots.n_ctrl()
    }

    pub fn dims(&self) -> usize {
        self.control_points.ncols()
    }

    pub fn domain(&self) -> (f64, f64) {
        self.knots.domain()
    }

    pub fn control_points(&self) -> &DMatrix<f64> {
        &self.control_points
    }

    pub fn with_control_points(&self, control_points: DMatrix<f64>) -> Result<Self> {
        Self::new(self.knots.clone(), control_points)
    }

    /// `Σ_i c_i N_{i,p}(u)` for every dimension.
    pub fn eval(&self, u: f64) -> Result<Vec<f64>> {
        let u = self.knots.check_param(u)?;
        let span = self.knots.find_span(u);
        Ok(self.eval_span_unchecked(span, u))
    }

    /// Evaluates the polynomial piece attached to `span` at `u`. Used for
    /// one-sided limits at knots.
    pub fn eval_on_span(&self, span: usize, u: f64) -> Result<Vec<f64>> {
        if span < self.degree() || span >= self.n_ctrl() {
            return Err(Error::invalid(format!("span {span} outside [p, N)")));
        }
        let u = self.knots.check_param(u)?;
        Ok(self.eval_span_unchecked(span, u))
    }

    fn eval_span_unchecked(&self, span: usize, u: f64) -> Vec<f64> {
        let p = self.degree();
        let values = self.knots.basis_funs(span, u);
        let mut out = vec![0.0; self.dims()];
        for (r, b) in values.iter().enumerate() {
            let row = self.control_points.row(span - p + r);
            for (o, c) in out.iter_mut().zip(row.iter()) {
                *o += b * c;
            }
        }
        out
    }

    /// The `order`-th derivative as a spline of degree `p - order`.
    pub fn derivative(&self, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("derivative order must be positive"));
        }
        if order > self.degree() {
            return Err(Error::invalid(format!(
                "derivative order {order} exceeds degree {}",
                self.degree()
            )));
        }
        let mut knots = self.knots.knots.clone();
        let mut ctrl = self.control_points.clone();
        let mut p = self.degree();
        for _ in 0..order {
            let n = ctrl.nrows();
            let mut next = DMatrix::zeros(n - 1, ctrl.ncols());
            for i in 0..n - 1 {
                let span = knots[i + p + 1] - knots[i + 1];
                if span == 0.0 {
                    continue;
                }
                let scale = p as f64 / span;
                for j in 0..ctrl.ncols() {
                    next[(i, j)] = scale * (ctrl[(i + 1, j)] - ctrl[(i, j)]);
                }
            }
            knots = knots[1..knots.len() - 1].to_vec();
            ctrl = next;
            p -= 1;
        }
        let n_ctrl = ctrl.nrows();
        Self::new(
            KnotVector {
                knots,
                degree: p,
                n_ctrl,
            },
            ctrl,
        )
    }

    /// Evaluates at each parameter and stacks the results as rows.
    pub fn eval_many(&self, params: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(params.len(), self.dims());
        for (t, &u) in params.iter().enumerate() {
            for (j, v) in self.eval(u)?.into_iter().enumerate() {
                out[(t, j)] = v;
            }
        }
        Ok(out)
    }
}

/// Parameters `t / (T - 1)` mapped onto `[lo, hi]`; a single sample sits at `lo`.
pub fn sample_params(n: usize, domain: (f64, f64)) -> Vec<f64> {
    let (lo, hi) = domain;
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|t| {
            if t == n - 1 {
                hi
            } else {
                lo + (hi - lo) * t as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// `T × N` matrix of basis values at the given parameters.
pub fn design_matrix(knots: &KnotVector, params: &[f64]) -> Result<DMatrix<f64>> {
    let p = knots.degree();
    let mut b = DMatrix::zeros(params.len(), knots.n_ctrl());
    for (t, &u) in params.iter().enumerate() {
        let u = knots.check_param(u)?;
        let span = knots.find_span(u);
        for (r, v) in knots.basis_funs(span, u).into_iter().enumerate() {
            b[(t, span - p + r)] = v;
        }
    }
    Ok(b)
}

/// Solves `min ‖A x − B‖²` column by column with a shared QR factorization.
pub(crate) fn solve_least_squares(a: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = a.shape();
    if rows < cols {
        return Err(Error::IllConditioned(format!(
            "{rows} equations for {cols} unknowns"
        )));
    }
    let qr = a.qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if diag_max == 0.0
        || r
            .diagonal()
            .iter()
            .any(|v| v.abs() <= RANK_TOLERANCE * diag_max)
    {
        return Err(Error::IllConditioned(
            "design matrix is rank deficient".into(),
        ));
    }
    let qtb = qr.q().transpose() * rhs;
    r.solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::IllConditioned("singular triangular factor".into()))
}

/// Result of fitting a chunk.
#[derive(Clone, Debug)]
pub struct LeastSquaresFit {
    pub curve: BSplineCurve,
    /// `Σ_t Σ_d (a_t − s(u_t))²` over all rows and dimensions.
    pub residual: f64,
}

/// Least-squares control points for `chunk` on the normalized domain.
pub fn fit_least_squares(
    chunk: &ActionChunk,
    n_ctrl: usize,
    degree: usize,
) -> Result<LeastSquaresFit> {
    let knots = KnotVector::clamped(n_ctrl, degree, (0.0, 1.0))?;
    let t = chunk.len();
    if t < n_ctrl {
        return Err(Error::IllConditioned(format!(
            "{t} samples cannot determine {n_ctrl} control points"
        )));
    }
    let params = sample_params(t, knots.domain());
    let b = design_matrix(&knots, &params)?;
    let ctrl = solve_least_squares(b, chunk.actions())?;
    let curve = BSplineCurve::new(knots, ctrl)?;
    let residual = residual(&curve, chunk)?;
    Ok(LeastSquaresFit { curve, residual })
}

/// `Σ (a_t − s(u_t))²` with rows mapped uniformly onto the curve's domain.
pub fn residual(curve: &BSplineCurve, chunk: &ActionChunk) -> Result<f64> {
    if chunk.dims() != curve.dims() {
        return Err(Error::invalid("chunk and curve dimensions differ"));
    }
    let params = sample_params(chunk.len(), curve.domain());
    let fitted = curve.eval_many(&params)?;
    Ok((chunk.actions() - fitted).iter().map(|e| e * e).sum())
}

/// Samples the curve at `n_samples` uniform parameters across its domain.
pub fn reconstruct(curve: &BSplineCurve, n_samples: usize) -> Result<ActionChunk> {
    if n_samples < 2 {
        return Err(Error::invalid("reconstruction needs at least two samples"));
    }
    let params = sample_params(n_samples, curve.domain());
    ActionChunk::new(curve.eval_many(&params)?, DEFAULT_DT)
}

#[derive(Serialize, Deserialize)]
struct CurveJson {
    degree: usize,
    knots: Vec<f64>,
    control_points: Vec<Vec<f64>>,
    domain: [f64; 2],
}

impl From<BSplineCurve> for CurveJson {
    fn from(c: BSplineCurve) -> Self {
        let (lo, hi) = c.domain();
        CurveJson {
            degree: c.degree(),
            knots: c.knots.knots.clone(),
            control_points: c
                .control_points
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            domain: [lo, hi],
        }
    }
}

impl TryFrom<CurveJson> for BSplineCurve {
    type Error = Error;

    fn try_from(j: CurveJson) -> Result<Self> {
        let knots = KnotVector::from_knots(j.knots, j.degree)?;
        if knots.domain() != (j.domain[0], j.domain[1]) {
            return Err(Error::invalid("declared domain disagrees with knots"));
        }
        let n = j.control_points.len();
        let d = j.control_points.first().map_or(0, Vec::len);
        if j.control_points.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged control points"));
        }
        let ctrl = DMatrix::from_fn(n, d, |i, k| j.control_points[i][k]);
        BSplineCurve::new(knots, ctrl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_curve(rng: &mut ChaCha8Rng, n: usize, p: usize, d: usize) -> BSplineCurve {
        let ctrl = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        BSplineCurve::clamped(ctrl, p).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn clamped_knots_without_interior() {
        let k = make_clamped_knots(4, 3, (0.0, 1.0)).unwrap();
        assert_eq!(k.knots(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn clamped_knots_single_interior() {
        let k = make_clamped_knots(5, 3, (0.0, 1.0)).unwrap();
        assert_eq!(k.knots(), &[0.0, 0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn clamped_knots_partition_domain() {
        let k = make_clamped_knots(8, 3, (0.0, 39.0)).unwrap();
        assert_eq!(k.knots().len(), 12);
        assert_close(k.interior_knots(), &[7.8, 15.6, 23.4, 31.2], 1e-12);
        assert_eq!(k.domain(), (0.0, 39.0));
    }

    #[test]
    fn too_few_control_points_rejected() {
        assert!(matches!(
            make_clamped_knots(3, 3, (0.0, 1.0)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(make_clamped_knots(4, 3, (1.0, 1.0)).is_err());
    }

    #[test]
    fn from_knots_validates_layout() {
        let good = make_clamped_knots(6, 2, (0.0, 2.0)).unwrap();
        assert_eq!(
            KnotVector::from_knots(good.knots().to_vec(), 2).unwrap(),
            good
        );
        assert!(KnotVector::from_knots(vec![0.0, 0.0, 0.5, 1.0, 1.0, 1.0], 2).is_err());
        assert!(KnotVector::from_knots(vec![0.0, 0.0, 0.0, 0.3, 1.0, 1.0, 1.0], 2).is_err());
        assert!(KnotVector::from_knots(vec![0.0, 0.0, 0.0, 0.6, 0.4, 1.0, 1.0, 1.0], 2).is_err());
    }

    #[test]
    fn degree_zero_basis_is_indicator() {
        let k = make_clamped_knots(4, 0, (0.0, 1.0)).unwrap();
        assert_eq!(basis(1, 0, 0.3, &k).unwrap(), 1.0);
        assert_eq!(basis(0, 0, 0.3, &k).unwrap(), 0.0);
        assert_eq!(basis(2, 0, 0.3, &k).unwrap(), 0.0);
        // right end belongs to the last interval
        assert_eq!(basis(3, 0, 1.0, &k).unwrap(), 1.0);
        assert_eq!(basis(2, 0, 1.0, &k).unwrap(), 0.0);
    }

    #[test]
    fn clamped_endpoint_basis_values() {
        let k = make_clamped_knots(8, 3, (0.0, 1.0)).unwrap();
        assert_eq!(basis(0, 3, 0.0, &k).unwrap(), 1.0);
        assert_eq!(basis(7, 3, 1.0, &k).unwrap(), 1.0);
        assert_eq!(basis(6, 3, 1.0, &k).unwrap(), 0.0);
    }

    #[test]
    fn basis_rejects_out_of_domain() {
        let k = make_clamped_knots(8, 3, (0.0, 1.0)).unwrap();
        assert!(matches!(basis(0, 3, 1.5, &k), Err(Error::Domain { .. })));
        assert!(matches!(basis(0, 3, -0.1, &k), Err(Error::Domain { .. })));
        assert!(basis(0, 3, f64::NAN, &k).is_err());
    }

    #[test]
    fn partition_of_unity_and_local_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, p) in &[(8, 3), (5, 2), (12, 4), (4, 1), (6, 0)] {
            let k = make_clamped_knots(n, p, (0.0, 1.0)).unwrap();
            for _ in 0..1000 {
                let u: f64 = rng.random_range(0.0..=1.0);
                let mut total = 0.0;
                for i in 0..n {
                    let v = basis(i, p, u, &k).unwrap();
                    let (a, b) = (k.knots()[i], k.knots()[i + p + 1]);
                    if u < a || u > b {
                        assert_eq!(v, 0.0, "N_{i},{p}({u}) outside support");
                    }
                    total += v;
                }
                assert!((total - 1.0).abs() < 1e-12, "sum {total} at {u}");
            }
        }
    }

    #[test]
    fn constant_control_points_give_constant_curve() {
        let ctrl = DMatrix::from_fn(7, 2, |_, j| if j == 0 { 0.25 } else { -3.0 });
        let curve = BSplineCurve::clamped(ctrl, 3).unwrap();
        for u in [0.0, 0.1, 0.37, 0.5, 0.99, 1.0] {
            assert_close(&curve.eval(u).unwrap(), &[0.25, -3.0], 1e-14);
        }
    }

    #[test]
    fn endpoints_interpolate_control_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let curve = random_curve(&mut rng, 8, 3, 3);
        let first: Vec<f64> = curve.control_points().row(0).iter().copied().collect();
        let last: Vec<f64> = curve.control_points().row(7).iter().copied().collect();
        assert_eq!(curve.eval(0.0).unwrap(), first);
        assert_eq!(curve.eval(1.0).unwrap(), last);
    }

    #[test]
    fn eval_matches_brute_force_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(4..12);
            let p = rng.random_range(0..4usize).min(n - 1);
            let curve = random_curve(&mut rng, n, p, 2);
            let u: f64 = rng.random_range(0.0..=1.0);
            let mut expected = vec![0.0; 2];
            for i in 0..n {
                let b = basis(i, p, u, curve.knots()).unwrap();
                for (j, e) in expected.iter_mut().enumerate() {
                    *e += curve.control_points()[(i, j)] * b;
                }
            }
            assert_close(&curve.eval(u).unwrap(), &expected, 1e-13);
        }
    }

    #[test]
    fn eval_outside_domain_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let curve = random_curve(&mut rng, 6, 3, 1);
        assert!(matches!(curve.eval(1.01), Err(Error::Domain { .. })));
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let curve = BSplineCurve::clamped(DMatrix::from_element(6, 2, 4.5), 3).unwrap();
        let d = curve.derivative(1).unwrap();
        assert_eq!(d.degree(), 2);
        for u in [0.0, 0.3, 1.0] {
            assert_close(&d.eval(u).unwrap(), &[0.0, 0.0], 0.0);
        }
    }

    #[test]
    fn derivative_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-4;
        for _ in 0..20 {
            let curve = random_curve(&mut rng, 5, 3, 2);
            let d1 = curve.derivative(1).unwrap();
            let d2 = curve.derivative(2).unwrap();
            for _ in 0..20 {
                let u: f64 = rng.random_range(h..1.0 - h);
                let plus = curve.eval(u + h).unwrap();
                let minus = curve.eval(u - h).unwrap();
                let mid = curve.eval(u).unwrap();
                let fd1: Vec<f64> = (0..2).map(|j| (plus[j] - minus[j]) / (2.0 * h)).collect();
                assert_close(&d1.eval(u).unwrap(), &fd1, 1e-6);
                let fd2: Vec<f64> = (0..2)
                    .map(|j| (plus[j] - 2.0 * mid[j] + minus[j]) / (h * h))
                    .collect();
                // the second difference loses ~8 digits to cancellation
                assert_close(&d2.eval(u).unwrap(), &fd2, 1e-3);
            }
        }
    }

    #[test]
    fn derivative_within_truncation_bound_on_fine_knots() {
        // central differences err by at most h²/6 · max|s'''|
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let h = 1e-4;
        for _ in 0..20 {
            let curve = random_curve(&mut rng, 8, 3, 1);
            let d1 = curve.derivative(1).unwrap();
            let jerk = curve.derivative(3).unwrap();
            let max_jerk = jerk.control_points().amax();
            let bound = h * h / 6.0 * max_jerk + 1e-9;
            for _ in 0..50 {
                let u: f64 = rng.random_range(h..1.0 - h);
                let fd = (curve.eval(u + h).unwrap()[0] - curve.eval(u - h).unwrap()[0]) / (2.0 * h);
                assert!((d1.eval(u).unwrap()[0] - fd).abs() <= bound);
            }
        }
    }

    #[test]
    fn derivative_order_above_degree_rejected() {
        let curve = BSplineCurve::clamped(DMatrix::zeros(5, 1), 2).unwrap();
        assert!(matches!(curve.derivative(3), Err(Error::InvalidArgument(_))));
        assert!(curve.derivative(0).is_err());
        assert_eq!(curve.derivative(2).unwrap().degree(), 0);
    }

    #[test]
    fn cubic_second_derivative_continuous_at_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let curve = random_curve(&mut rng, 10, 3, 3);
        let acc = curve.derivative(2).unwrap();
        let spans = acc.knots().nonempty_spans();
        for w in spans.windows(2) {
            let knot = acc.knots().knots()[w[1]];
            let left = acc.eval_on_span(w[0], knot).unwrap();
            let right = acc.eval_on_span(w[1], knot).unwrap();
            assert_close(&left, &right, 1e-9);
        }
    }

    #[test]
    fn fit_constant_sequence() {
        let chunk = ActionChunk::new(DMatrix::from_element(40, 2, 0.7), DEFAULT_DT).unwrap();
        for &(n, p) in &[(8, 3), (5, 1), (4, 0), (10, 4)] {
            let fit = fit_least_squares(&chunk, n, p).unwrap();
            assert!(fit.residual < 1e-24);
            assert!(fit
                .curve
                .control_points()
                .iter()
                .all(|c| (c - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn fit_linear_ramp_exactly() {
        let chunk = ActionChunk::new(
            DMatrix::from_fn(40, 1, |t, _| 0.5 - 0.03 * t as f64),
            DEFAULT_DT,
        )
        .unwrap();
        for &(n, p) in &[(8, 3), (5, 1), (6, 2)] {
            let fit = fit_least_squares(&chunk, n, p).unwrap();
            assert!(fit.residual < 1e-20, "residual {}", fit.residual);
        }
    }

    #[test]
    fn fit_rejects_short_chunks() {
        let chunk = ActionChunk::new(DMatrix::zeros(5, 1), DEFAULT_DT).unwrap();
        assert!(matches!(
            fit_least_squares(&chunk, 8, 3),
            Err(Error::IllConditioned(_))
        ));
        // T == N interpolates
        let chunk = ActionChunk::new(
            DMatrix::from_fn(8, 1, |t, _| (t as f64).sin()),
            DEFAULT_DT,
        )
        .unwrap();
        assert!(fit_least_squares(&chunk, 8, 3).unwrap().residual < 1e-20);
    }

    #[test]
    fn reconstruct_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let curve = random_curve(&mut rng, 8, 3, 2);
        let two = reconstruct(&curve, 2).unwrap();
        assert_eq!(two.row(0), curve.eval(0.0).unwrap());
        assert_eq!(two.row(1), curve.eval(1.0).unwrap());
        assert!(reconstruct(&curve, 1).is_err());
    }

    #[test]
    fn representable_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let curve = random_curve(&mut rng, 8, 3, 3);
        let chunk = reconstruct(&curve, 40).unwrap();
        let fit = fit_least_squares(&chunk, 8, 3).unwrap();
        let again = reconstruct(&fit.curve, 40).unwrap();
        assert!((chunk.actions() - again.actions()).amax() < 1e-8);
        assert!((fit.curve.control_points() - curve.control_points()).amax() < 1e-8);
    }

    #[test]
    fn fit_residual_matches_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let chunk = ActionChunk::new(
            DMatrix::from_fn(40, 2, |_, _| rng.random_range(-1.0..1.0)),
            DEFAULT_DT,
        )
        .unwrap();
        let fit = fit_least_squares(&chunk, 8, 3).unwrap();
        let rec = reconstruct(&fit.curve, 40).unwrap();
        let direct: f64 = (chunk.actions() - rec.actions()).iter().map(|e| e * e).sum();
        assert!((direct - fit.residual).abs() < 1e-12 * direct.max(1.0));
    }

    #[test]
    fn perturbing_fit_never_lowers_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let chunk = ActionChunk::new(
            DMatrix::from_fn(40, 2, |_, _| rng.random_range(-1.0..1.0)),
            DEFAULT_DT,
        )
        .unwrap();
        let fit = fit_least_squares(&chunk, 8, 3).unwrap();
        for i in 0..8 {
            for j in 0..2 {
                for delta in [1e-3, -1e-3] {
                    let mut ctrl = fit.curve.control_points().clone();
                    ctrl[(i, j)] += delta;
                    let moved = fit.curve.with_control_points(ctrl).unwrap();
                    assert!(residual(&moved, &chunk).unwrap() >= fit.residual);
                }
            }
        }
    }

    #[test]
    fn curve_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let curve = random_curve(&mut rng, 8, 3, 3);
        let text = serde_json::to_string(&curve).unwrap();
        assert!(text.contains("\"control_points\""));
        let back: BSplineCurve = serde_json::from_str(&text).unwrap();
        assert_eq!(back, curve);
    }

    #[test]
    fn curve_json_rejects_bad_shapes() {
        let text = r#"{"degree":3,"knots":[0,0,0,0,1,1,1,1],"control_points":[[1],[2],[3]],"domain":[0,1]}"#;
        assert!(serde_json::from_str::<BSplineCurve>(text).is_err());
    }
}
