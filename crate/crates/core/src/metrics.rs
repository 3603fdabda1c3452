//! Recovery and prediction-error metrics.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// A planted reference `U*` paired with a learned `U` of the same shape.
#[derive(Debug, Clone, Copy)]
pub struct SubspaceComparison<'a> {
    reference: ArrayView2<'a, f64>,
    candidate: ArrayView2<'a, f64>,
    reference_norm: f64,
}

impl<'a> SubspaceComparison<'a> {
    pub fn new(reference: ArrayView2<'a, f64>, candidate: ArrayView2<'a, f64>) -> Result<Self> {
        if reference.dim() != candidate.dim() {
            return Err(Error::dim(
                "subspace comparison",
                format!("{:?}", reference.dim()),
                format!("{:?}", candidate.dim()),
            ));
        }
        let reference_norm = frobenius(reference);
        if reference_norm == 0.0 {
            return Err(Error::ZeroReference("reference subspace has zero norm".into()));
        }
        Ok(Self {
            reference,
            candidate,
            reference_norm,
        })
    }

    /// `‖U* − U‖_F / ‖U*‖_F`.
    pub fn difference(&self) -> f64 {
        let d = Zip::from(&self.reference)
            .and(&self.candidate)
            .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
        d.sqrt() / self.reference_norm
    }
}

pub fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖U* − U‖_F / ‖U*‖_F`.
pub fn subspace_difference(reference: ArrayView2<f64>, candidate: ArrayView2<f64>) -> Result<f64> {
    Ok(SubspaceComparison::new(reference, candidate)?.difference())
}

/// `min_A ‖U* − U A‖_F / ‖U*‖_F`: the part of `U*` lying outside the column
/// span of `U`. Any invertible remix `U → U Q` leaves it unchanged, and the
/// candidate may have a different column count than the reference.
pub fn aligned_subspace_difference(reference: ArrayView2<f64>, candidate: ArrayView2<f64>) -> Result<f64> {
    if reference.nrows() != candidate.nrows() {
        return Err(Error::dim("aligned subspace rows", reference.nrows(), candidate.nrows()));
    }
    let reference_norm = frobenius(reference);
    if reference_norm == 0.0 {
        return Err(Error::ZeroReference("reference subspace has zero norm".into()));
    }
    let c = to_dmatrix(candidate);
    let svd = c.svd(true, false);
    let basis = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let tol = smax * 1e-12 * candidate.nrows().max(candidate.ncols()) as f64;
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| smax > 0.0 && svd.singular_values[k] > tol)
        .collect();
    let u_star = to_dmatrix(reference);
    let mut residual = u_star.clone();
    for &k in &keep {
        let q = basis.column(k);
        let coeff = q.transpose() * &u_star;
        residual -= q * coeff;
    }
    Ok(residual.norm() / reference_norm)
}

fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// `‖Uⁱ − Uⁱ⁻¹‖_F / ‖U*‖_F` for consecutive iterates.
pub fn iterwise_difference(iterates: &[Array2<f64>], reference: ArrayView2<f64>) -> Result<Vec<f64>> {
    if iterates.len() < 2 {
        return Err(Error::EmptyInput("iterwise difference needs at least two iterates".into()));
    }
    let norm = frobenius(reference);
    if norm == 0.0 {
        return Err(Error::ZeroReference("reference subspace has zero norm".into()));
    }
    iterates
        .windows(2)
        .map(|w| {
            if w[0].dim() != w[1].dim() {
                return Err(Error::dim(
                    "iterate shape",
                    format!("{:?}", w[0].dim()),
                    format!("{:?}", w[1].dim()),
                ));
            }
            Ok(frobenius((&w[1] - &w[0]).view()) / norm)
        })
        .collect()
}

/// Maximum and mean absolute cosine over all column pairs of two matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coherence {
    pub max: f64,
    pub mean: f64,
}

pub fn mutual_coherence(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Coherence> {
    if a.nrows() != b.nrows() {
        return Err(Error::dim("coherence rows", a.nrows(), b.nrows()));
    }
    if a.ncols() == 0 || b.ncols() == 0 {
        return Err(Error::EmptyInput("coherence needs at least one column per matrix".into()));
    }
    let col_norms = |m: ArrayView2<f64>| -> Result<Array1<f64>> {
        let norms = m.map_axis(Axis(0), |c| c.dot(&c).sqrt());
        match norms.iter().position(|&n| n == 0.0) {
            Some(index) => Err(Error::Degenerate {
                kind: "column",
                index,
            }),
            None => Ok(norms),
        }
    };
    let na = col_norms(a)?;
    let nb = col_norms(b)?;
    let gram = a.t().dot(&b);
    let mut max = 0.0f64;
    let mut sum = 0.0;
    for ((i, j), &g) in gram.indexed_iter() {
        let c = (g.abs() / (na[i] * nb[j])).min(1.0);
        max = max.max(c);
        sum += c;
    }
    Ok(Coherence {
        max,
        mean: sum / gram.len() as f64,
    })
}

/// Pearson correlation between corresponding rows.
pub fn weight_correlations(w_hat: ArrayView2<f64>, w_true: ArrayView2<f64>) -> Result<Array1<f64>> {
    if w_hat.dim() != w_true.dim() {
        return Err(Error::dim(
            "weight matrices",
            format!("{:?}", w_true.dim()),
            format!("{:?}", w_hat.dim()),
        ));
    }
    if w_hat.ncols() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two columns".into()));
    }
    let mut out = Array1::zeros(w_hat.nrows());
    for (t, (a, b)) in w_hat.rows().into_iter().zip(w_true.rows()).enumerate() {
        out[t] = pearson(a, b).ok_or(Error::Degenerate { kind: "row", index: t })?;
    }
    Ok(out)
}

fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-task `Σ(y − ŷ)² / Σ(y − ȳ)²`.
pub fn nmse_per_task(y_true: ArrayView2<f64>, y_pred: ArrayView2<f64>) -> Result<Array1<f64>> {
    if y_true.dim() != y_pred.dim() {
        return Err(Error::dim(
            "prediction matrix",
            format!("{:?}", y_true.dim()),
            format!("{:?}", y_pred.dim()),
        ));
    }
    if y_true.nrows() == 0 {
        return Err(Error::EmptyInput("no samples to score".into()));
    }
    let mut out = Array1::zeros(y_true.ncols());
    for (t, (yt, yp)) in y_true.columns().into_iter().zip(y_pred.columns()).enumerate() {
        let mean = yt.sum() / yt.len() as f64;
        let mut sse = 0.0;
        let mut sst = 0.0;
        for (&a, &b) in yt.iter().zip(yp.iter()) {
            sse += (a - b) * (a - b);
            sst += (a - mean) * (a - mean);
        }
        if sst == 0.0 {
            return Err(Error::Degenerate {
                kind: "target column",
                index: t,
            });
        }
        out[t] = sse / sst;
    }
    Ok(out)
}

/// Mean over tasks of the variance-normalized squared error.
pub fn anmse(y_true: ArrayView2<f64>, y_pred: ArrayView2<f64>) -> Result<f64> {
    let per_task = nmse_per_task(y_true, y_pred)?;
    Ok(per_task.mean().expect("at least one task"))
}

/// ANMSE over the tasks whose true column is not constant.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAnmse {
    pub value: f64,
    /// Tasks left out because their true column has zero variance.
    pub skipped: Vec<usize>,
}

/// As [`anmse`], but constant target columns are skipped and listed instead
/// of failing the whole evaluation. Errors only when every column is constant.
pub fn anmse_skipping_constant(y_true: ArrayView2<f64>, y_pred: ArrayView2<f64>) -> Result<PartialAnmse> {
    if y_true.dim() != y_pred.dim() {
        return Err(Error::dim(
            "prediction matrix",
            format!("{:?}", y_true.dim()),
            format!("{:?}", y_pred.dim()),
        ));
    }
    let mut keep = Vec::new();
    let mut skipped = Vec::new();
    for (t, col) in y_true.columns().into_iter().enumerate() {
        let first = col.first().copied();
        if col.iter().all(|&v| Some(v) == first) {
            skipped.push(t);
        } else {
            keep.push(t);
        }
    }
    if keep.is_empty() {
        return Err(Error::Degenerate {
            kind: "target column",
            index: 0,
        });
    }
    let value = anmse(y_true.select(Axis(1), &keep).view(), y_pred.select(Axis(1), &keep).view())?;
    Ok(PartialAnmse { value, skipped })
}

/// Trailing-window means: element `k` averages `values[k .. k + window]`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut acc: f64 = values[..window].iter().sum();
    out.push(acc / window as f64);
    for k in window..values.len() {
        acc += values[k] - values[k - window];
        out.push(acc / window as f64);
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("slope inputs", x.len(), y.len()));
    }
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::EmptyInput("slope needs two positive points".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate { kind: "abscissa", index: 0 });
    }
    Ok(sxy / sxx)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Sample standard deviation (`n − 1` denominator); zero for one value.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    if values.len() == 1 {
        return Some(0.0);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Fraction of pairs `(i, j)` with `a_i ≠ a_j` whose order `b` reproduces.
pub fn rank_agreement(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..a.len().min(b.len()) {
        for j in i + 1..a.len().min(b.len()) {
            if a[i] == a[j] {
                continue;
            }
            total += 1;
            if (a[i] - a[j]) * (b[i] - b[j]) > 0.0 {
                agree += 1;
            }
        }
    }
    (total > 0).then(|| agree as f64 / total as f64)
}

/// Stacks matrices of equal shape horizontally.
pub fn hstack(parts: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    ndarray::concatenate(Axis(1), parts).map_err(|e| Error::InvalidArgument(e.to_string()))
}
