//! One censored multi-task layer `y = ReLU(U V x + ε)` and its one-pass
//! sketch-and-refine trainer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{grad_only, nll_and_grad};
use crate::metrics;

/// Trained factor pair `(U, V)` with its per-task noise scales.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceLayer {
    u: Array2<f64>,
    v: Array2<f64>,
    sigma: Array1<f64>,
    lambda: f64,
    censor_threshold: f64,
}

impl SubspaceLayer {
    pub fn new(u: Array2<f64>, v: Array2<f64>, sigma: Array1<f64>, lambda: f64) -> Result<Self> {
        let (t, r) = u.dim();
        if r == 0 || t == 0 || v.ncols() == 0 {
            return Err(Error::InvalidArgument("layer dimensions must be positive".into()));
        }
        if v.nrows() != r {
            return Err(Error::dim("V rows (rank)", r, v.nrows()));
        }
        if r > t.min(v.ncols()) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} exceeds min(T={t}, D_in={})",
                v.ncols()
            )));
        }
        if sigma.len() != t {
            return Err(Error::dim("sigma length", t, sigma.len()));
        }
        if sigma.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument("sigma entries must be positive".into()));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("factor entries must be finite".into()));
        }
        Ok(Self {
            u,
            v,
            sigma,
            lambda,
            censor_threshold: 0.0,
        })
    }

    pub fn with_censor_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(threshold.is_finite() && threshold >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "censor threshold must be >= 0, got {threshold}"
            )));
        }
        self.censor_threshold = threshold;
        Ok(self)
    }

    pub fn u(&self) -> &Array2<f64> {
        &self.u
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn sigma(&self) -> &Array1<f64> {
        &self.sigma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn censor_threshold(&self) -> f64 {
        self.censor_threshold
    }

    pub fn d_in(&self) -> usize {
        self.v.ncols()
    }

    pub fn t_out(&self) -> usize {
        self.u.nrows()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// Dense coefficient matrix `W = U V`.
    pub fn weights(&self) -> Array2<f64> {
        self.u.dot(&self.v)
    }

    fn check_input(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.d_in() {
            return Err(Error::dim("input length", self.d_in(), x.len()));
        }
        Ok(())
    }

    fn check_sample(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<()> {
        self.check_input(x)?;
        if y.len() != self.t_out() {
            return Err(Error::dim("target length", self.t_out(), y.len()));
        }
        if y.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument("targets must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Multiplier applied to both step sizes at sample `i` (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepDecay {
    Constant,
    /// `1` for `i <= warmup`, then `drop · (warmup / i)^power`.
    Power { warmup: usize, drop: f64, power: f64 },
}

impl StepDecay {
    /// `1/√i` from the first sample on.
    pub const INV_SQRT: StepDecay = StepDecay::Power {
        warmup: 1,
        drop: 1.0,
        power: 0.5,
    };

    pub fn factor(&self, i: usize) -> f64 {
        match *self {
            StepDecay::Constant => 1.0,
            StepDecay::Power { warmup, drop, power } => {
                if i <= warmup {
                    1.0
                } else {
                    drop * (warmup as f64 / i as f64).powf(power)
                }
            }
        }
    }
}

/// How `eta` and `mu` map to the step actually taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepScaling {
    /// Plain gradient steps.
    Raw,
    /// The V step is divided by `max(mean ‖x‖², ‖x‖²) · ‖U‖_F² / R` and the
    /// U step by `max(mean ‖V x‖², ‖V x‖²)`, means running over the samples
    /// seen so far, and both are multiplied by the pooled noise variance
    /// `1 / mean_t σ_t⁻²`. `eta` and `mu` are then free of the input, factor
    /// and target scales, and a sample far larger than those before it
    /// cannot overshoot.
    RunningNorm,
    /// As `RunningNorm` for V. The step on row `t` of `U` is instead divided
    /// by `‖V x‖ · sqrt(max(mean ‖V x‖², ‖V x‖²))` and multiplied
    /// by that task's own `σ_t²`, so every row moves at a rate set by its
    /// residual alone, whatever its noise level.
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub rank: usize,
    pub v_inner_steps: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian initialization of `U`.
    pub u_init_scale: f64,
    /// Standard deviation of the Gaussian initialization of `V`.
    pub v_init_scale: f64,
    pub step_decay: StepDecay,
    pub step_scaling: StepScaling,
    /// Targets at or below this value count as censored.
    pub censor_threshold: f64,
    /// Noise scale shared by all tasks unless calibrated.
    pub sigma: f64,
}

impl TrainConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            eta: 0.5,
            mu: 0.05,
            lambda: 1e-3,
            rank,
            v_inner_steps: 1,
            seed: 0,
            u_init_scale: 1.0,
            v_init_scale: 0.01,
            step_decay: StepDecay::Power {
                warmup: 500,
                drop: 1.0,
                power: 1.0,
            },
            step_scaling: StepScaling::Normalized,
            censor_threshold: 0.0,
            sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta", self.eta),
            ("mu", self.mu),
            ("sigma", self.sigma),
            ("u_init_scale", self.u_init_scale),
            ("v_init_scale", self.v_init_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.censor_threshold.is_finite() && self.censor_threshold >= 0.0) {
            return Err(Error::InvalidArgument("censor threshold must be >= 0".into()));
        }
        if self.rank == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        if self.v_inner_steps == 0 {
            return Err(Error::InvalidArgument("v_inner_steps must be at least 1".into()));
        }
        if let StepDecay::Power { warmup, drop, power } = self.step_decay {
            if warmup == 0 || !(drop.is_finite() && drop > 0.0) || !(power.is_finite() && power >= 0.0) {
                return Err(Error::InvalidArgument("invalid step decay parameters".into()));
            }
        }
        Ok(())
    }
}

/// One row of a [`TraceLog`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    /// 1-based sample index.
    pub i: usize,
    /// Instantaneous cost of sample `i` at the iterate before consuming it.
    pub cost: f64,
    /// `‖Uⁱ − Uⁱ⁻¹‖_F`.
    pub u_step: f64,
    /// `‖U* − Uⁱ‖_F / ‖U*‖_F` when a probe of matching shape was supplied.
    pub subspace_diff: Option<f64>,
    /// `min_A ‖U* − Uⁱ A‖_F / ‖U*‖_F`, insensitive to the coordinates of the
    /// learned subspace.
    pub aligned_diff: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceLog {
    pub records: Vec<TraceRecord>,
    /// Number of samples the trainer consumed.
    pub samples_seen: usize,
    /// Frobenius norm of the probe, when one was supplied.
    pub probe_norm: Option<f64>,
}

impl TraceLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `‖Uⁱ − Uⁱ⁻¹‖_F / ‖U*‖_F` per iteration, when a probe was supplied.
    pub fn iterwise_diff(&self) -> Option<Vec<f64>> {
        let n = self.probe_norm?;
        Some(self.records.iter().map(|r| r.u_step / n).collect())
    }
}

/// `Σ_t censored_nll(y_t, U_t·V x, σ_t) + λ/2 (‖U‖_F² + ‖V‖_F²)`.
pub fn instantaneous_cost(
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    layer: &SubspaceLayer,
) -> Result<f64> {
    layer.check_sample(x, y)?;
    let mu = layer.u.dot(&layer.v.dot(&x));
    Ok(cost_at(&mu, y, layer) + penalty(layer))
}

fn penalty(layer: &SubspaceLayer) -> f64 {
    0.5 * layer.lambda * (sq_norm(layer.u.iter()) + sq_norm(layer.v.iter()))
}

fn cost_at(mu: &Array1<f64>, y: ArrayView1<f64>, layer: &SubspaceLayer) -> f64 {
    let mut total = 0.0;
    for ((&m, &yt), &s) in mu.iter().zip(y.iter()).zip(layer.sigma.iter()) {
        total += nll_and_grad(yt, m, s, layer.censor_threshold).0;
    }
    total
}

fn sq_norm<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    it.map(|v| v * v).sum()
}

/// `∇_V g = Σ_t g_t U_t xᵀ + λ V`, where `g_t` is the derivative of the task
/// likelihood with respect to its predictor.
pub fn v_gradient(x: ArrayView1<f64>, y: ArrayView1<f64>, layer: &SubspaceLayer) -> Result<Array2<f64>> {
    layer.check_sample(x, y)?;
    let mut g = Array1::zeros(layer.t_out());
    let ug = mu_gradient_through_u(x, y, layer, &mut g);
    let mut grad = layer.v.mapv(|v| layer.lambda * v);
    outer_add(&mut grad, 1.0, ug.view(), x);
    Ok(grad)
}

/// `Uᵀ g` at the current iterate; fills `g` with the per-task predictor
/// derivatives.
fn mu_gradient_through_u(
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    layer: &SubspaceLayer,
    g: &mut Array1<f64>,
) -> Array1<f64> {
    let mu = layer.u.dot(&layer.v.dot(&x));
    Zip::from(&mut *g)
        .and(&mu)
        .and(y)
        .and(&layer.sigma)
        .for_each(|g, &m, &yt, &s| *g = grad_only(yt, m, s, layer.censor_threshold));
    layer.u.t().dot(&*g)
}

/// `a += alpha · u vᵀ`.
fn outer_add(a: &mut Array2<f64>, alpha: f64, u: ArrayView1<f64>, v: ArrayView1<f64>) {
    for (mut row, &ui) in a.axis_iter_mut(Axis(0)).zip(u.iter()) {
        let c = alpha * ui;
        row.zip_mut_with(&v, |r, &vj| *r += c * vj);
    }
}

/// Sketch step: `cfg.v_inner_steps` plain gradient steps on `V` with step
/// `cfg.eta`, warm-started from `layer.v`.
pub fn sketch_v(
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    layer: &SubspaceLayer,
    cfg: &TrainConfig,
) -> Result<Array2<f64>> {
    layer.check_sample(x, y)?;
    let mut work = layer.clone();
    let mut g = Array1::zeros(layer.t_out());
    for _ in 0..cfg.v_inner_steps.max(1) {
        v_step(&mut work, x, y, cfg.eta, &mut g);
    }
    if work.v.iter().any(|v| !v.is_finite()) {
        return Err(Error::StepSize {
            iteration: 1,
            layer: None,
            last_finite: Box::new(layer.clone()),
        });
    }
    Ok(work.v)
}

/// `num / den`, or no step at all when the normalizer vanishes.
fn scaled(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// `V ← (1 − ηλ) V − η Uᵀg xᵀ`, with the shrink factor floored at zero.
fn v_step(layer: &mut SubspaceLayer, x: ArrayView1<f64>, y: ArrayView1<f64>, eta: f64, g: &mut Array1<f64>) {
    let ug = mu_gradient_through_u(x, y, layer, g);
    let shrink = (1.0 - eta * layer.lambda).max(0.0);
    layer.v.mapv_inplace(|v| shrink * v);
    outer_add(&mut layer.v, -eta, ug.view(), x);
}

/// Gradient of `g_t = censored_nll(y_t, U_t·V x, σ_t) + λ/2 ‖U_t‖²` with
/// respect to `U_t`.
pub fn u_row_gradient(
    t: usize,
    x: ArrayView1<f64>,
    y_t: f64,
    layer: &SubspaceLayer,
) -> Result<Array1<f64>> {
    check_row(t, x, y_t, layer)?;
    let vx = layer.v.dot(&x);
    let row = layer.u.row(t);
    let g = grad_only(y_t, row.dot(&vx), layer.sigma[t], layer.censor_threshold);
    Ok(&row * layer.lambda + &vx * g)
}

fn check_row(t: usize, x: ArrayView1<f64>, y_t: f64, layer: &SubspaceLayer) -> Result<()> {
    layer.check_input(x)?;
    if t >= layer.t_out() {
        return Err(Error::InvalidArgument(format!(
            "task index {t} out of range for T={}",
            layer.t_out()
        )));
    }
    if !(y_t >= 0.0) {
        return Err(Error::InvalidArgument("targets must be nonnegative".into()));
    }
    Ok(())
}

/// Refinement step for row `t` of `U` against the layer's current (already
/// sketched) `V`, with step `cfg.mu`.
pub fn refine_u_row(
    t: usize,
    x: ArrayView1<f64>,
    y_t: f64,
    layer: &SubspaceLayer,
    cfg: &TrainConfig,
) -> Result<Array1<f64>> {
    let grad = u_row_gradient(t, x, y_t, layer)?;
    let row = &layer.u.row(t) - &(grad * cfg.mu);
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::StepSize {
            iteration: 1,
            layer: None,
            last_finite: Box::new(layer.clone()),
        });
    }
    Ok(row)
}

/// One step on every row of `U`; with `per_row_var` the step of row `t` is
/// further multiplied by `σ_t²`. The shrink factor is floored at zero as in
/// [`v_step`].
fn refine_all_rows(layer: &mut SubspaceLayer, vx: &Array1<f64>, y: ArrayView1<f64>, mu: f64, per_row_var: bool) {
    let lambda = layer.lambda;
    let threshold = layer.censor_threshold;
    Zip::from(layer.u.rows_mut())
        .and(y)
        .and(&layer.sigma)
        .for_each(|mut row, &yt, &s| {
            let g = grad_only(yt, row.dot(vx), s, threshold);
            let mu = if per_row_var { mu * s * s } else { mu };
            let shrink = (1.0 - mu * lambda).max(0.0);
            Zip::from(&mut row).and(vx).for_each(|u, &v| *u = shrink * *u - mu * g * v);
        });
}

/// `U V x`, the pre-activation predictor.
pub fn predict_linear(layer: &SubspaceLayer, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    layer.check_input(x)?;
    Ok(layer.u.dot(&layer.v.dot(&x)))
}

/// `ReLU(U V x)`.
pub fn predict(layer: &SubspaceLayer, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    Ok(predict_linear(layer, x)?.mapv_into(|v| v.max(0.0)))
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, seed: u64, stream: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Trains one layer on `data` with every task at noise scale `cfg.sigma`.
/// `probe` is a planted `U*` used only for trace diagnostics.
pub fn train_layer(
    data: &Dataset,
    cfg: &TrainConfig,
    probe: Option<ArrayView2<f64>>,
) -> Result<(SubspaceLayer, TraceLog)> {
    let sigma = Array1::from_elem(data.n_tasks(), cfg.sigma);
    fit_layer(data.x.view(), data.y.view(), sigma, cfg, probe, LayerInit::Random { slot: 0 })
}

/// Starting point of [`fit_layer`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerInit {
    /// Gaussian factors scaled by `u_init_scale` and `v_init_scale`. `slot`
    /// selects the streams, so stacked layers draw independent starting
    /// points from one seed.
    Random { slot: usize },
    /// Explicit factors, `U: T×R` and `V: R×D`.
    Given { u: Array2<f64>, v: Array2<f64> },
}

/// General single-pass trainer over the rows of `(x, y)` with per-task noise
/// scales `sigma`.
pub fn fit_layer(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    sigma: Array1<f64>,
    cfg: &TrainConfig,
    probe: Option<ArrayView2<f64>>,
    init: LayerInit,
) -> Result<(SubspaceLayer, TraceLog)> {
    cfg.validate()?;
    let (n, d) = x.dim();
    let t = y.ncols();
    if n == 0 {
        return Err(Error::EmptyInput("training set has no samples".into()));
    }
    if y.nrows() != n {
        return Err(Error::dim("target rows", n, y.nrows()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("inputs must be finite".into()));
    }
    if y.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("targets must be finite and nonnegative".into()));
    }
    if let Some(p) = probe {
        if p.nrows() != t {
            return Err(Error::dim("probe rows", t, p.nrows()));
        }
    }
    let r = cfg.rank;
    let (u, v) = match init {
        LayerInit::Random { slot } => {
            let base = 2 * slot as u64;
            (
                gaussian_matrix(t, r, cfg.u_init_scale, cfg.seed, base),
                gaussian_matrix(r, d, cfg.v_init_scale, cfg.seed, base + 1),
            )
        }
        LayerInit::Given { u, v } => {
            if u.dim() != (t, r) {
                return Err(Error::dim("initial U", format!("({t}, {r})"), format!("{:?}", u.dim())));
            }
            if v.dim() != (r, d) {
                return Err(Error::dim("initial V", format!("({r}, {d})"), format!("{:?}", v.dim())));
            }
            (u, v)
        }
    };
    let mut layer = SubspaceLayer::new(u, v, sigma, cfg.lambda)?.with_censor_threshold(cfg.censor_threshold)?;

    let probe_norm = match probe {
        Some(p) => {
            let nrm = sq_norm(p.iter()).sqrt();
            if nrm == 0.0 {
                return Err(Error::ZeroReference("probe has zero norm".into()));
            }
            Some(nrm)
        }
        None => None,
    };
    let mut log = TraceLog {
        records: Vec::with_capacity(n),
        samples_seen: 0,
        probe_norm,
    };

    let mut backup_u = layer.u.clone();
    let mut backup_v = layer.v.clone();
    let mut g = Array1::zeros(t);
    let mut mean_x2 = 0.0;
    let mut mean_vx2 = 0.0;
    let pooled_var = match cfg.step_scaling {
        StepScaling::Raw => 1.0,
        _ => 1.0 / layer.sigma.mapv(|s| 1.0 / (s * s)).mean().expect("t >= 1"),
    };

    for (idx, (xi, yi)) in x.rows().into_iter().zip(y.rows()).enumerate() {
        let i = idx + 1;
        backup_u.assign(&layer.u);
        backup_v.assign(&layer.v);
        let cost = cost_at(&layer.u.dot(&layer.v.dot(&xi)), yi, &layer) + penalty(&layer);
        let decay = cfg.step_decay.factor(i);

        let x2 = sq_norm(xi.iter());
        mean_x2 += (x2 - mean_x2) / i as f64;
        let eta = match cfg.step_scaling {
            StepScaling::Raw => cfg.eta * decay,
            StepScaling::RunningNorm | StepScaling::Normalized => {
                let u2 = sq_norm(layer.u.iter()) / r as f64;
                scaled(pooled_var * cfg.eta * decay, mean_x2.max(x2) * u2)
            }
        };
        for _ in 0..cfg.v_inner_steps {
            v_step(&mut layer, xi, yi, eta, &mut g);
        }

        let vx = layer.v.dot(&xi);
        let vx2 = sq_norm(vx.iter());
        mean_vx2 += (vx2 - mean_vx2) / i as f64;
        let mu = match cfg.step_scaling {
            StepScaling::Raw => cfg.mu * decay,
            StepScaling::RunningNorm => scaled(pooled_var * cfg.mu * decay, mean_vx2.max(vx2)),
            StepScaling::Normalized => scaled(cfg.mu * decay, (vx2 * mean_vx2.max(vx2)).sqrt()),
        };
        refine_all_rows(&mut layer, &vx, yi, mu, cfg.step_scaling == StepScaling::Normalized);
        log.samples_seen += 1;

        if !(cost.is_finite() && layer.u.iter().chain(layer.v.iter()).all(|v| v.is_finite())) {
            layer.u.assign(&backup_u);
            layer.v.assign(&backup_v);
            return Err(Error::StepSize {
                iteration: i,
                layer: None,
                last_finite: Box::new(layer),
            });
        }

        let u_step = Zip::from(&layer.u)
            .and(&backup_u)
            .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
            .sqrt();
        let (subspace_diff, aligned_diff) = match probe {
            Some(p) => (
                (p.dim() == layer.u.dim())
                    .then(|| metrics::subspace_difference(p, layer.u.view()))
                    .transpose()?,
                Some(metrics::aligned_subspace_difference(p, layer.u.view())?),
            ),
            None => (None, None),
        };
        log.records.push(TraceRecord {
            i,
            cost,
            u_step,
            subspace_diff,
            aligned_diff,
        });
    }
    Ok((layer, log))
}
