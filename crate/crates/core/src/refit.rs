//! Continuity-constrained refitting.
//!
//! A freshly predicted curve is re-anchored to actions that were already
//! dispatched: only the leading `n_free` control points are re-solved
//! against the executed history, with the contribution of the fixed tail
//! moved to the right-hand side. A small Tikhonov term pulls the free block
//! toward the prediction so that points the history barely constrains stay
//! where the policy put them.

use nalgebra::DMatrix;

use crate::bspline::{design_matrix, solve_least_squares, BSplineCurve};
use crate::error::{Error, Result};

/// Default Tikhonov weight on `‖c − c_pred‖²` over the free block.
pub const DEFAULT_LAMBDA: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct RefitRequest {
    pub predicted: BSplineCurve,
    /// `P × D` actions already dispatched, one row per history parameter.
    pub history: DMatrix<f64>,
    pub n_free: usize,
    /// Strictly increasing parameters of the history rows on the curve's domain.
    pub history_params: Vec<f64>,
    /// Regularization weight; `0.0` disables it.
    pub lambda: f64,
}

impl RefitRequest {
    /// Request with the default free-block size and regularization.
    pub fn new(
        predicted: BSplineCurve,
        history: DMatrix<f64>,
        history_params: Vec<f64>,
    ) -> Result<Self> {
        let n_free = default_n_free(&predicted, &history_params)?;
        Ok(Self {
            predicted,
            history,
            n_free,
            history_params,
            lambda: DEFAULT_LAMBDA,
        })
    }

    fn validate(&self) -> Result<()> {
        let n = self.predicted.n_ctrl();
        if self.n_free == 0 || self.n_free > n {
            return Err(Error::invalid(format!(
                "n_free = {} outside [1, {n}]",
                self.n_free
            )));
        }
        if self.history.nrows() == 0 {
            return Err(Error::invalid("empty executed history"));
        }
        if self.history.nrows() != self.history_params.len() {
            return Err(Error::invalid(format!(
                "{} history rows but {} parameters",
                self.history.nrows(),
                self.history_params.len()
            )));
        }
        if self.history.ncols() != self.predicted.dims() {
            return Err(Error::invalid("history and curve dimensions differ"));
        }
        if self.history_params.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("history parameters must be strictly increasing"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RefitResult {
    pub curve: BSplineCurve,
    /// `Σ_t ‖a_t − ŝ_new(u_t)‖²` over the history.
    pub prefix_residual: f64,
    pub n_free: usize,
}

impl RefitResult {
    pub fn changed_indices(&self) -> std::ops::Range<usize> {
        0..self.n_free
    }
}

/// Number of basis functions whose support reaches into the history window,
/// i.e. the count of `i` with `knots[i] < max(history_params)`, at least one.
pub fn default_n_free(curve: &BSplineCurve, history_params: &[f64]) -> Result<usize> {
    let last = history_params
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !last.is_finite() {
        return Err(Error::invalid("history parameters must be non-empty and finite"));
    }
    let knots = curve.knots().knots();
    let count = (0..curve.n_ctrl()).filter(|&i| knots[i] < last).count();
    Ok(count.max(1))
}

/// Sum of squared differences between `history` rows and the curve at `params`.
pub fn prefix_residual(curve: &BSplineCurve, history: &DMatrix<f64>, params: &[f64]) -> Result<f64> {
    let fitted = curve.eval_many(params)?;
    Ok((history - fitted).iter().map(|e| e * e).sum())
}

/// Re-solves control points `0..n_free` against the executed history.
pub fn refit(req: &RefitRequest) -> Result<RefitResult> {
    req.validate()?;
    let curve = &req.predicted;
    let n_free = req.n_free;
    let b = design_matrix(curve.knots(), &req.history_params)?;
    let pred = curve.control_points();
    let n = curve.n_ctrl();
    let d = curve.dims();
    let p_rows = req.history.nrows();

    let b_free = b.columns(0, n_free).into_owned();
    let tail = b.columns(n_free, n - n_free) * pred.rows(n_free, n - n_free);
    let rhs = &req.history - tail;

    let solved = if req.lambda > 0.0 {
        let w = req.lambda.sqrt();
        let mut a = DMatrix::zeros(p_rows + n_free, n_free);
        a.rows_mut(0, p_rows).copy_from(&b_free);
        for i in 0..n_free {
            a[(p_rows + i, i)] = w;
        }
        let mut y = DMatrix::zeros(p_rows + n_free, d);
        y.rows_mut(0, p_rows).copy_from(&rhs);
        y.rows_mut(p_rows, n_free)
            .copy_from(&(pred.rows(0, n_free) * w));
        solve_least_squares(a, &y)?
    } else {
        solve_least_squares(b_free, &rhs)?
    };

    let mut ctrl = pred.clone();
    ctrl.rows_mut(0, n_free).copy_from(&solved);
    let refitted = curve.with_control_points(ctrl)?;
    let prefix_residual = prefix_residual(&refitted, &req.history, &req.history_params)?;
    Ok(RefitResult {
        curve: refitted,
        prefix_residual,
        n_free,
    })
}

/// Velocity-scale jump between the last executed action and the first
/// action of the next plan: `‖next_first − prev_last‖ / dt`.
pub fn splice_jump(prev_last: &[f64], next_first: &[f64], dt: f64) -> f64 {
    prev_last
        .iter()
        .zip(next_first)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt()
        / dt
}

/// [`splice_jump`] between the last row of `prev_tail` and the start of `new_curve`.
pub fn boundary_discontinuity(prev_tail: &DMatrix<f64>, new_curve: &BSplineCurve, dt: f64) -> Result<f64> {
    if prev_tail.nrows() < 2 {
        return Err(Error::invalid("previous tail needs at least two rows"));
    }
    if prev_tail.ncols() != new_curve.dims() {
        return Err(Error::invalid("tail and curve dimensions differ"));
    }
    let last: Vec<f64> = prev_tail.row(prev_tail.nrows() - 1).iter().copied().collect();
    let first = new_curve.eval(new_curve.domain().0)?;
    Ok(splice_jump(&last, &first, dt))
}
