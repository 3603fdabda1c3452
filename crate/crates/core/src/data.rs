//! Datasets, planted low-rank generators, CSV ingestion and seeded splits.
//!
//! All randomness comes from ChaCha8 seeded with the caller's 64-bit seed.
//! Every generated matrix reads its own ChaCha stream (see [`stream_id`]), so
//! adding a matrix to a generator never perturbs the draws of the others.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Samples `x_i ∈ R^D` with nonnegative targets `y_i ∈ R^T`, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub feature_names: Option<Vec<String>>,
    pub target_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyInput("dataset has no samples".into()));
        }
        if x.nrows() != y.nrows() {
            return Err(Error::dim("dataset rows", x.nrows(), y.nrows()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        if y.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("targets must be nonnegative".into()));
        }
        Ok(Self {
            x,
            y,
            feature_names: None,
            target_names: None,
        })
    }

    pub fn with_names(mut self, features: Vec<String>, targets: Vec<String>) -> Result<Self> {
        if features.len() != self.n_features() {
            return Err(Error::dim("feature names", self.n_features(), features.len()));
        }
        if targets.len() != self.n_tasks() {
            return Err(Error::dim("target names", self.n_tasks(), targets.len()));
        }
        self.feature_names = Some(features);
        self.target_names = Some(targets);
        Ok(self)
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_tasks(&self) -> usize {
        self.y.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        }
    }

    /// Fraction of target entries that are exactly zero.
    pub fn censored_fraction(&self) -> f64 {
        let zeros = self.y.iter().filter(|&&v| v == 0.0).count();
        zeros as f64 / self.y.len() as f64
    }
}

/// One planted factor pair `(U*, V*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedLayer {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl PlantedLayer {
    pub fn weights(&self) -> Array2<f64> {
        self.u.dot(&self.v)
    }
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    pub layers: Vec<PlantedLayer>,
    /// Per-task noise scale of every planted layer.
    pub sigma: Array1<f64>,
    /// Noiseless targets of the final layer, `ReLU(signal)` without `ε`.
    pub noiseless_y: Array2<f64>,
}

impl PlantedTruth {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Factor pair that produced the observed targets.
    pub fn output_layer(&self) -> &PlantedLayer {
        self.layers.last().expect("planted truth has at least one layer")
    }
}

const STREAM_X: u64 = 1;
const STREAM_SIGMA_CHOICE: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_REFERENCE: u64 = 4;

#[derive(Clone, Copy)]
enum Draw {
    U = 0,
    V = 1,
    Noise = 2,
}

/// ChaCha stream used for matrix `draw` of planted layer `layer`.
fn stream_id(layer: usize, draw: Draw) -> u64 {
    16 + 4 * layer as u64 + draw as u64
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

fn check_shape(n: usize, d: usize, t: usize, r: usize) -> Result<()> {
    if n == 0 || d == 0 || t == 0 {
        return Err(Error::InvalidArgument(format!(
            "sizes must be positive (n={n}, d={d}, t={t})"
        )));
    }
    if r == 0 || r > t.min(d) {
        return Err(Error::InvalidArgument(format!(
            "rank {r} outside 1..=min(t={t}, d={d})"
        )));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise scale must be >= 0, got {sigma}")));
    }
    Ok(())
}

/// `ReLU(input · V*ᵀ · U*ᵀ + E)` with `E[:, t] ~ N(0, σ_t²)`, plus the
/// noiseless counterpart.
fn planted_pass(
    input: ArrayView2<f64>,
    layer: &PlantedLayer,
    sigma: &Array1<f64>,
    noise: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>) {
    let mut signal = Array2::zeros((input.nrows(), layer.u.nrows()));
    for (mut dst, x) in signal.rows_mut().into_iter().zip(input.rows()) {
        dst.assign(&layer.u.dot(&layer.v.dot(&x)));
    }
    let eps = gaussian(signal.nrows(), signal.ncols(), noise);
    let mut out = signal.clone();
    for ((o, e), s) in out
        .axis_iter_mut(Axis(1))
        .zip(eps.axis_iter(Axis(1)))
        .zip(sigma.iter())
    {
        let mut o = o;
        o.zip_mut_with(&e, |a, &b| *a = (*a + s * b).max(0.0));
    }
    (out, signal.mapv(|v| v.max(0.0)))
}

fn generate(
    n: usize,
    d: usize,
    t: usize,
    r: usize,
    sigma: Array1<f64>,
    depth: usize,
    seed: u64,
) -> Result<(Dataset, PlantedTruth)> {
    let x = gaussian(n, d, &mut rng_for(seed, STREAM_X));
    let mut layers = Vec::with_capacity(depth);
    let mut input = x.clone();
    let mut noiseless = Array2::zeros((0, 0));
    for k in 0..depth {
        let d_in = if k == 0 { d } else { t };
        let layer = PlantedLayer {
            u: gaussian(t, r, &mut rng_for(seed, stream_id(k, Draw::U))),
            v: gaussian(r, d_in, &mut rng_for(seed, stream_id(k, Draw::V))),
        };
        let (out, clean) = planted_pass(
            input.view(),
            &layer,
            &sigma,
            &mut rng_for(seed, stream_id(k, Draw::Noise)),
        );
        input = out;
        noiseless = clean;
        layers.push(layer);
    }
    let data = Dataset::new(x, input)?;
    Ok((
        data,
        PlantedTruth {
            layers,
            sigma,
            noiseless_y: noiseless,
        },
    ))
}

/// Single planted censored layer: `Y = ReLU(X V*ᵀ U*ᵀ + E)`, with `X`, `U*`,
/// `V*` i.i.d. standard Gaussian and `E ~ N(0, σ²)`.
pub fn gen_single_layer(
    n: usize,
    d: usize,
    t: usize,
    r: usize,
    sigma: f64,
    seed: u64,
) -> Result<(Dataset, PlantedTruth)> {
    check_shape(n, d, t, r)?;
    check_sigma(sigma)?;
    generate(n, d, t, r, Array1::from_elem(t, sigma), 1, seed)
}

/// Applies the planted layer `depth` times, each layer's ReLU output feeding
/// the next (`D → T → T → …`). No skip connections in generation.
pub fn gen_deep(
    n: usize,
    d: usize,
    t: usize,
    r: usize,
    sigma: f64,
    depth: usize,
    seed: u64,
) -> Result<(Dataset, PlantedTruth)> {
    if depth == 0 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    check_shape(n, d, t, r)?;
    check_sigma(sigma)?;
    generate(n, d, t, r, Array1::from_elem(t, sigma), depth, seed)
}

/// Single planted layer whose task noise scales are drawn uniformly from
/// `sigma_set`.
pub fn gen_heteroscedastic(
    n: usize,
    d: usize,
    t: usize,
    r: usize,
    sigma_set: &[f64],
    seed: u64,
) -> Result<(Dataset, PlantedTruth)> {
    check_shape(n, d, t, r)?;
    if sigma_set.is_empty() || sigma_set.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidArgument(
            "sigma set must be nonempty with positive entries".into(),
        ));
    }
    let mut rng = rng_for(seed, STREAM_SIGMA_CHOICE);
    let sigma = Array1::from_shape_fn(t, |_| sigma_set[rng.random_range(0..sigma_set.len())]);
    generate(n, d, t, r, sigma, 1, seed)
}

/// Shuffles once with `seed` and keeps `floor(train_fraction · N)` rows for
/// training; the remainder is validation.
pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = data.n_samples();
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} leaves an empty side for N={n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, STREAM_SPLIT));
    Ok((data.select_rows(&idx[..n_train]), data.select_rows(&idx[n_train..])))
}

/// Standard Gaussian `rows×cols` matrix from its own stream, independent of
/// every generator draw for the same seed.
pub fn gaussian_reference(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    gaussian(rows, cols, &mut rng_for(seed, STREAM_REFERENCE))
}

/// Shuffles sample order once with `seed`.
pub fn shuffled(data: &Dataset, seed: u64) -> Dataset {
    let mut idx: Vec<usize> = (0..data.n_samples()).collect();
    idx.shuffle(&mut rng_for(seed, STREAM_SPLIT));
    data.select_rows(&idx)
}

fn read_matrix(path: &Path, nonnegative: bool) -> Result<(Vec<String>, Array2<f64>)> {
    let parse_err = |line: u64, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_err(1, 1, "missing header row".into()));
    }
    let width = header.len();
    let mut values = Vec::new();
    let mut rows = 0usize;
    let mut missing = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(parse_err(
                line,
                record.len().min(width) + 1,
                format!("expected {width} cells, found {}", record.len()),
            ));
        }
        if record.iter().any(|c| c.trim().is_empty()) {
            missing.push(line);
            continue;
        }
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, col + 1, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, col + 1, format!("non-finite value: {cell:?}")));
            }
            if nonnegative && v < 0.0 {
                return Err(parse_err(line, col + 1, format!("negative target: {cell}")));
            }
            values.push(v);
        }
        rows += 1;
    }
    if !missing.is_empty() {
        return Err(Error::MissingCells {
            path: path.to_path_buf(),
            rows: missing,
        });
    }
    if rows == 0 {
        return Err(Error::EmptyInput(format!("{} has no data rows", path.display())));
    }
    let m = Array2::from_shape_vec((rows, width), values).expect("row-major buffer");
    Ok((header, m))
}

/// Reads a features table and a targets table (UTF-8, comma separated, one
/// header row each) into a dataset.
pub fn load_csv(features: &Path, targets: &Path) -> Result<Dataset> {
    let (fnames, x) = read_matrix(features, false)?;
    let (tnames, y) = read_matrix(targets, true)?;
    if x.nrows() != y.nrows() {
        let (path, rows) = if x.nrows() < y.nrows() {
            (features, x.nrows())
        } else {
            (targets, y.nrows())
        };
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: rows as u64 + 2,
            column: 1,
            message: format!(
                "row count mismatch: {} feature rows vs {} target rows",
                x.nrows(),
                y.nrows()
            ),
        });
    }
    Dataset::new(x, y)?.with_names(fnames, tnames)
}

/// Reads a headered numeric table with no sign restriction.
pub fn load_matrix_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    read_matrix(path, false)
}

/// Writes a headered numeric table. Values use the shortest representation
/// that parses back to the identical `f64`.
pub fn write_matrix_csv(path: &Path, header: &[String], m: ArrayView2<f64>) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(Error::dim("csv header", m.ncols(), header.len()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                w.write_all(b",")?;
            }
            write!(w, "{v}")?;
            first = false;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn default_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Writes a dataset as the feature/target table pair read by [`load_csv`].
pub fn write_csv(data: &Dataset, features: &Path, targets: &Path) -> Result<()> {
    let fnames = data
        .feature_names
        .clone()
        .unwrap_or_else(|| default_names("x", data.n_features()));
    let tnames = data
        .target_names
        .clone()
        .unwrap_or_else(|| default_names("y", data.n_tasks()));
    write_matrix_csv(features, &fnames, data.x.view())?;
    write_matrix_csv(targets, &tnames, data.y.view())
}

/// Columns `[from, to)` of the targets, for experiments that hold out tasks.
pub fn target_columns(data: &Dataset, from: usize, to: usize) -> Array2<f64> {
    data.y.slice(s![.., from..to]).to_owned()
}
