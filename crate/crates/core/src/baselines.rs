//! Uncensored least-squares and ridge baselines.

use nalgebra::{Cholesky, DMatrix};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// `ŷ = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub w: Array2<f64>,
    pub intercept: Array1<f64>,
    pub ridge_lambda: f64,
}

/// Reciprocal condition estimate below which an unpenalized system is
/// treated as singular.
const MIN_RCOND: f64 = 1e-12;

/// Ridge regression with an unpenalized intercept, solved per task from the
/// centered normal equations `(XcᵀXc + λI) w_t = Xcᵀ y_t` by Cholesky.
pub fn fit_ridge_xy(x: ArrayView2<f64>, y: ArrayView2<f64>, ridge_lambda: f64) -> Result<LinearModel> {
    if !(ridge_lambda.is_finite() && ridge_lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge lambda must be >= 0, got {ridge_lambda}")));
    }
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::EmptyInput("ridge needs at least one sample".into()));
    }
    if y.nrows() != n {
        return Err(Error::dim("ridge target rows", n, y.nrows()));
    }
    let x_mean = x.mean_axis(Axis(0)).expect("nonempty");
    let y_mean = y.mean_axis(Axis(0)).expect("nonempty");
    let xc = &x - &x_mean;
    let yc = &y - &y_mean;

    let mut gram = xc.t().dot(&xc);
    gram.diag_mut().mapv_inplace(|g| g + ridge_lambda);
    let rhs = xc.t().dot(&yc);
    let g = DMatrix::from_fn(d, d, |i, j| gram[[i, j]]);
    let b = DMatrix::from_fn(d, y.ncols(), |i, j| rhs[[i, j]]);

    let singular = || {
        Error::Conditioning(format!(
            "normal equations are singular at lambda = {ridge_lambda} (n = {n}, d = {d})"
        ))
    };
    let chol = Cholesky::new(g).ok_or_else(singular)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo > 0.0) || (lo / hi).powi(2) < MIN_RCOND {
        return Err(singular());
    }
    let sol = chol.solve(&b);
    let w = Array2::from_shape_fn((y.ncols(), d), |(t, j)| sol[(j, t)]);
    let intercept = &y_mean - &w.dot(&x_mean);
    if w.iter().chain(intercept.iter()).any(|v| !v.is_finite()) {
        return Err(singular());
    }
    Ok(LinearModel {
        w,
        intercept,
        ridge_lambda,
    })
}

pub fn fit_ridge(data: &Dataset, ridge_lambda: f64) -> Result<LinearModel> {
    fit_ridge_xy(data.x.view(), data.y.view(), ridge_lambda)
}

/// `X Wᵀ + b`, clamped at zero when `censor` is set.
pub fn predict_baseline(model: &LinearModel, x: ArrayView2<f64>, censor: bool) -> Result<Array2<f64>> {
    if x.ncols() != model.w.ncols() {
        return Err(Error::dim("baseline input width", model.w.ncols(), x.ncols()));
    }
    let mut out = x.dot(&model.w.t()) + &model.intercept;
    if censor {
        out.mapv_inplace(|v| v.max(0.0));
    }
    Ok(out)
}
