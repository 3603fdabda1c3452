//! Independent scalar-loop oracles and finite-difference helpers shared by
//! the integration tests.

#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssn_core::SubspaceLayer;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

/// Fourth-order central difference of `f` at `x0`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (-f(x0 + 2.0 * h) + 8.0 * f(x0 + h) - 8.0 * f(x0 - h) + f(x0 - 2.0 * h)) / (12.0 * h)
}

/// Elementwise finite-difference gradient of `f` over every entry of `m`.
pub fn fd_matrix(m: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut out = Array2::zeros(m.dim());
    let mut work = m.clone();
    for idx in 0..m.len() {
        let (i, j) = (idx / m.ncols(), idx % m.ncols());
        let x0 = m[[i, j]];
        out[[i, j]] = central_diff(
            |v| {
                work[[i, j]] = v;
                let r = f(&work);
                work[[i, j]] = x0;
                r
            },
            x0,
            h,
        );
    }
    out
}

/// `‖a − b‖ / ‖b‖` over flattened entries.
pub fn rel_err<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.into_iter().zip(b) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    num.sqrt() / den.sqrt()
}

pub fn oracle_subspace_difference(reference: &Array2<f64>, candidate: &Array2<f64>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..reference.nrows() {
        for j in 0..reference.ncols() {
            let d = reference[[i, j]] - candidate[[i, j]];
            num += d * d;
            den += reference[[i, j]] * reference[[i, j]];
        }
    }
    num.sqrt() / den.sqrt()
}

/// `(max, mean)` absolute cosine over all column pairs.
pub fn oracle_coherence(a: &Array2<f64>, b: &Array2<f64>) -> (f64, f64) {
    let mut max = 0.0f64;
    let mut sum = 0.0;
    for i in 0..a.ncols() {
        for j in 0..b.ncols() {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for k in 0..a.nrows() {
                dot += a[[k, i]] * b[[k, j]];
                na += a[[k, i]] * a[[k, i]];
                nb += b[[k, j]] * b[[k, j]];
            }
            let c = dot.abs() / (na.sqrt() * nb.sqrt());
            max = max.max(c);
            sum += c;
        }
    }
    (max, sum / (a.ncols() * b.ncols()) as f64)
}

pub fn oracle_row_correlations(a: &Array2<f64>, b: &Array2<f64>) -> Vec<f64> {
    let n = a.ncols() as f64;
    (0..a.nrows())
        .map(|t| {
            let ma: f64 = (0..a.ncols()).map(|j| a[[t, j]]).sum::<f64>() / n;
            let mb: f64 = (0..a.ncols()).map(|j| b[[t, j]]).sum::<f64>() / n;
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for j in 0..a.ncols() {
                sab += (a[[t, j]] - ma) * (b[[t, j]] - mb);
                saa += (a[[t, j]] - ma).powi(2);
                sbb += (b[[t, j]] - mb).powi(2);
            }
            sab / (saa * sbb).sqrt()
        })
        .collect()
}

pub fn oracle_anmse(y: &Array2<f64>, p: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for t in 0..y.ncols() {
        let mean: f64 = (0..y.nrows()).map(|i| y[[i, t]]).sum::<f64>() / y.nrows() as f64;
        let (mut sse, mut sst) = (0.0, 0.0);
        for i in 0..y.nrows() {
            sse += (y[[i, t]] - p[[i, t]]).powi(2);
            sst += (y[[i, t]] - mean).powi(2);
        }
        total += sse / sst;
    }
    total / y.ncols() as f64
}

/// Censored-likelihood oracle by direct definition: `-ln Φ(-μ/σ)` through
/// the complementary error function, or the Gaussian density term.
pub fn oracle_nll(y: f64, mu: f64, sigma: f64) -> f64 {
    if y > 0.0 {
        let r = (y - mu) / sigma;
        0.5 * r * r + sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()
    } else {
        -(0.5 * libm::erfc(mu / (sigma * std::f64::consts::SQRT_2))).ln()
    }
}

/// Orthogonal `n×n` matrix from Gram-Schmidt on a random draw.
pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a = uniform(n, n, -1.0, 1.0, rng);
    let mut q: Array2<f64> = Array2::zeros((n, n));
    for j in 0..n {
        let mut v: Array1<f64> = a.column(j).to_owned();
        for k in 0..j {
            let qk = q.column(k).to_owned();
            let c = qk.dot(&v);
            v = v - qk * c;
        }
        let nrm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / nrm));
    }
    q
}

pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random layer and sample with a mix of censored and observed targets.
pub fn instance(seed: u64, t: usize, d: usize, r: usize) -> (SubspaceLayer, Array1<f64>, Array1<f64>) {
    let mut g = rng(seed);
    let u = uniform(t, r, -1.0, 1.0, &mut g);
    let v = uniform(r, d, -1.0, 1.0, &mut g);
    let sigma = Array1::from_shape_simple_fn(t, || g.random_range(0.3..3.0));
    let lambda = g.random_range(0.0..0.1);
    let x = Array1::from_shape_simple_fn(d, || g.random_range(-1.0..1.0));
    let y = Array1::from_shape_simple_fn(t, || {
        if g.random_bool(0.4) {
            0.0
        } else {
            g.random_range(0.1..3.0)
        }
    });
    (SubspaceLayer::new(u, v, sigma, lambda).unwrap(), x, y)
}

pub fn with_u(layer: &SubspaceLayer, u: &Array2<f64>) -> SubspaceLayer {
    SubspaceLayer::new(u.clone(), layer.v().clone(), layer.sigma().clone(), layer.lambda()).unwrap()
}

pub fn with_v(layer: &SubspaceLayer, v: &Array2<f64>) -> SubspaceLayer {
    SubspaceLayer::new(layer.u().clone(), v.clone(), layer.sigma().clone(), layer.lambda()).unwrap()
}
