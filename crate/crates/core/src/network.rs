//! Greedy layer-wise stacking of censored layers, per-task noise
//! calibration, and the binary model format.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layer::{fit_layer, predict_linear, LayerInit, SubspaceLayer, TraceLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkipMode {
    /// Layer `k ≥ 1` reads `[f_{k−1}(x); x]`.
    #[default]
    Concat,
    /// Layer `k ≥ 1` reads `f_{k−1}(x)` only.
    Naive,
}

impl SkipMode {
    fn code(self) -> u8 {
        match self {
            SkipMode::Concat => 0,
            SkipMode::Naive => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(SkipMode::Concat),
            1 => Ok(SkipMode::Naive),
            _ => Err(Error::Format(format!("unknown skip mode {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceNetwork {
    layers: Vec<SubspaceLayer>,
    skip_mode: SkipMode,
    input_dim: usize,
    task_dim: usize,
}

impl SubspaceNetwork {
    pub fn new(input_dim: usize, task_dim: usize, skip_mode: SkipMode) -> Result<Self> {
        if input_dim == 0 || task_dim == 0 {
            return Err(Error::InvalidArgument("network dimensions must be positive".into()));
        }
        Ok(Self {
            layers: Vec::new(),
            skip_mode,
            input_dim,
            task_dim,
        })
    }

    /// Builds a network from trained layers, checking the dimension chain.
    pub fn from_layers(
        input_dim: usize,
        task_dim: usize,
        skip_mode: SkipMode,
        layers: Vec<SubspaceLayer>,
    ) -> Result<Self> {
        let mut net = Self::new(input_dim, task_dim, skip_mode)?;
        for layer in layers {
            net.push(layer)?;
        }
        Ok(net)
    }

    /// Input width required of layer `k`.
    pub fn layer_input_dim(&self, k: usize) -> usize {
        match (k, self.skip_mode) {
            (0, _) => self.input_dim,
            (_, SkipMode::Concat) => self.task_dim + self.input_dim,
            (_, SkipMode::Naive) => self.task_dim,
        }
    }

    pub fn push(&mut self, layer: SubspaceLayer) -> Result<()> {
        let k = self.layers.len();
        let want = self.layer_input_dim(k);
        if layer.d_in() != want {
            return Err(Error::dim("layer input width", want, layer.d_in()).in_layer(k));
        }
        if layer.t_out() != self.task_dim {
            return Err(Error::dim("layer task count", self.task_dim, layer.t_out()).in_layer(k));
        }
        self.layers.push(layer);
        Ok(())
    }

    pub fn layers(&self) -> &[SubspaceLayer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn skip_mode(&self) -> SkipMode {
        self.skip_mode
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn task_dim(&self) -> usize {
        self.task_dim
    }

    fn resolve_upto(&self, upto: Option<usize>) -> Result<usize> {
        if self.layers.is_empty() {
            return Err(Error::EmptyInput("network has no layers".into()));
        }
        let k = upto.unwrap_or(self.depth());
        if k == 0 || k > self.depth() {
            return Err(Error::InvalidArgument(format!(
                "upto must lie in 1..={}, got {k}",
                self.depth()
            )));
        }
        Ok(k)
    }

    /// Input to layer `k ≥ 1` given the previous layer's output.
    pub fn stack_input(&self, prev: ArrayView1<f64>, x: ArrayView1<f64>) -> Array1<f64> {
        match self.skip_mode {
            SkipMode::Concat => concatenate(Axis(0), &[prev, x]).expect("1-d concatenation"),
            SkipMode::Naive => prev.to_owned(),
        }
    }

    /// Output of the first `upto` layers (all by default), entrywise `>= 0`.
    pub fn forward(&self, x: ArrayView1<f64>, upto: Option<usize>) -> Result<Array1<f64>> {
        let k = self.resolve_upto(upto)?;
        if x.len() != self.input_dim {
            return Err(Error::dim("network input length", self.input_dim, x.len()));
        }
        Ok(self.forward_unchecked(x, k))
    }

    fn forward_unchecked(&self, x: ArrayView1<f64>, k: usize) -> Array1<f64> {
        let mut out = relu(predict_linear(&self.layers[0], x).expect("checked width"));
        for layer in &self.layers[1..k] {
            let input = self.stack_input(out.view(), x);
            out = relu(predict_linear(layer, input.view()).expect("checked chain"));
        }
        out
    }

    /// Row-wise [`forward`](Self::forward) over a batch, evaluated in parallel.
    pub fn forward_batch(&self, x: ArrayView2<f64>, upto: Option<usize>) -> Result<Array2<f64>> {
        let k = self.resolve_upto(upto)?;
        if x.ncols() != self.input_dim {
            return Err(Error::dim("network input width", self.input_dim, x.ncols()));
        }
        let rows: Vec<Array1<f64>> = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.forward_unchecked(x.row(i), k))
            .collect();
        let mut out = Array2::zeros((x.nrows(), self.task_dim));
        for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
            dst.assign(&src);
        }
        Ok(out)
    }

    /// Outputs after every depth `1..=K` for a batch, sharing the layer
    /// evaluations. Entry `k − 1` equals `forward_batch(x, Some(k))`.
    pub fn forward_all_depths(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.resolve_upto(None)?;
        if x.ncols() != self.input_dim {
            return Err(Error::dim("network input width", self.input_dim, x.ncols()));
        }
        let per_row: Vec<Vec<Array1<f64>>> = (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                let row = x.row(i);
                let mut outs = Vec::with_capacity(self.depth());
                let mut out = relu(predict_linear(&self.layers[0], row).expect("checked width"));
                outs.push(out.clone());
                for layer in &self.layers[1..] {
                    let input = self.stack_input(out.view(), row);
                    out = relu(predict_linear(layer, input.view()).expect("checked chain"));
                    outs.push(out.clone());
                }
                outs
            })
            .collect();
        let mut all = vec![Array2::zeros((x.nrows(), self.task_dim)); self.depth()];
        for (i, outs) in per_row.into_iter().enumerate() {
            for (k, o) in outs.into_iter().enumerate() {
                all[k].row_mut(i).assign(&o);
            }
        }
        Ok(all)
    }

    /// Feature matrix consumed by the layer after `prev_out`.
    fn next_inputs(&self, prev_out: &Array2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
        match self.skip_mode {
            SkipMode::Concat => concatenate(Axis(1), &[prev_out.view(), x]).expect("equal row counts"),
            SkipMode::Naive => prev_out.clone(),
        }
    }
}

fn relu(v: Array1<f64>) -> Array1<f64> {
    v.mapv_into(|a| a.max(0.0))
}

/// Which residuals enter the noise estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualSet {
    /// Every sample, censored entries compared against the pre-activation.
    All,
    /// Only entries with `y` above the censor threshold.
    #[default]
    Uncensored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub residuals: ResidualSet,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            residuals: ResidualSet::Uncensored,
            sigma_min: 1e-2,
            sigma_max: 1e2,
        }
    }
}

/// Per-task noise estimates of one trained layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub layer: usize,
    pub sigma: Array1<f64>,
    /// Raw estimate before clamping.
    pub raw: Array1<f64>,
    pub clamped: Vec<bool>,
}

/// `σ̂_t² = mean_i (y_{i,t} − [U V x_i]_t)²`, clamped to
/// `[sigma_min, sigma_max]`. `x` are the inputs the layer was trained on.
pub fn calibrate_sigma(
    layer: &SubspaceLayer,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    opts: &CalibrationOptions,
) -> Result<CalibrationReport> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("calibration needs at least one sample".into()));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::dim("calibration rows", x.nrows(), y.nrows()));
    }
    if y.ncols() != layer.t_out() {
        return Err(Error::dim("calibration targets", layer.t_out(), y.ncols()));
    }
    if !(opts.sigma_min > 0.0 && opts.sigma_min <= opts.sigma_max && opts.sigma_max.is_finite()) {
        return Err(Error::InvalidArgument("invalid sigma clamp range".into()));
    }
    let t = layer.t_out();
    let mut sse = Array1::<f64>::zeros(t);
    let mut count = Array1::<f64>::zeros(t);
    for (xi, yi) in x.rows().into_iter().zip(y.rows()) {
        let pre = predict_linear(layer, xi)?;
        for k in 0..t {
            if opts.residuals == ResidualSet::Uncensored && yi[k] <= layer.censor_threshold() {
                continue;
            }
            let r = yi[k] - pre[k];
            sse[k] += r * r;
            count[k] += 1.0;
        }
    }
    let raw = Array1::from_shape_fn(t, |k| {
        if count[k] > 0.0 {
            (sse[k] / count[k]).sqrt()
        } else {
            opts.sigma_max
        }
    });
    let sigma = raw.mapv(|s| s.clamp(opts.sigma_min, opts.sigma_max));
    let clamped = raw.iter().zip(sigma.iter()).map(|(a, b)| a != b).collect();
    Ok(CalibrationReport {
        layer: 0,
        sigma,
        raw,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandOptions {
    pub skip_mode: SkipMode,
    /// Re-estimate per-task σ after each layer and train the next layer with it.
    pub calibrate: Option<CalibrationOptions>,
    /// Start each new layer from the previous layer's factors instead of a
    /// random draw (see [`warm_start`]).
    pub warm_start: bool,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        Self {
            skip_mode: SkipMode::Concat,
            calibrate: None,
            warm_start: true,
        }
    }
}

/// Initial factors for a layer reading `d_in` inputs, taken from the layer
/// below: `U` is copied, and `V` is copied when the widths agree or else
/// padded with zero columns in front (the prediction block of a concat input).
/// With concat skips the second layer then starts out reproducing the first
/// exactly. `None` when the widths cannot be matched.
pub fn warm_start(prev: &SubspaceLayer, d_in: usize) -> Option<LayerInit> {
    let v = prev.v();
    let width = v.ncols();
    if width > d_in {
        return None;
    }
    let mut padded = Array2::zeros((v.nrows(), d_in));
    padded.slice_mut(s![.., d_in - width..]).assign(v);
    Some(LayerInit::Given {
        u: prev.u().clone(),
        v: padded,
    })
}

#[derive(Debug, Clone)]
pub struct Expansion {
    pub network: SubspaceNetwork,
    pub traces: Vec<TraceLog>,
    /// Report `k` holds the σ estimated from layer `k` and installed in layer
    /// `k + 1`.
    pub calibration: Vec<CalibrationReport>,
}

/// Trains `depth` layers greedily. Every layer sees the original targets;
/// earlier layers are frozen once trained. `probe` is a planted `U*` used for
/// trace diagnostics of every layer.
pub fn expand(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    depth: usize,
    cfg: &TrainConfig,
    opts: &ExpandOptions,
    probe: Option<ArrayView2<f64>>,
) -> Result<Expansion> {
    if depth == 0 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    let mut network = SubspaceNetwork::new(x.ncols(), y.ncols(), opts.skip_mode)?;
    let mut traces = Vec::with_capacity(depth);
    let mut calibration = Vec::new();
    let mut sigma = Array1::from_elem(y.ncols(), cfg.sigma);
    let mut inputs = x.to_owned();
    for k in 0..depth {
        let init = match network.layers.last() {
            Some(prev) if opts.warm_start => warm_start(prev, inputs.ncols()),
            _ => None,
        }
        .unwrap_or(LayerInit::Random { slot: k });
        let (layer, log) = fit_layer(inputs.view(), y, sigma.clone(), cfg, probe, init).map_err(|e| e.in_layer(k))?;
        if k + 1 < depth {
            if let Some(c) = &opts.calibrate {
                let mut report = calibrate_sigma(&layer, inputs.view(), y, c).map_err(|e| e.in_layer(k))?;
                report.layer = k;
                sigma = report.sigma.clone();
                calibration.push(report);
            }
        }
        let out = layer_outputs(&layer, inputs.view());
        network.push(layer)?;
        traces.push(log);
        if k + 1 < depth {
            inputs = network.next_inputs(&out, x);
        }
    }
    Ok(Expansion {
        network,
        traces,
        calibration,
    })
}

fn layer_outputs(layer: &SubspaceLayer, inputs: ArrayView2<f64>) -> Array2<f64> {
    let rows: Vec<Array1<f64>> = (0..inputs.nrows())
        .into_par_iter()
        .map(|i| relu(predict_linear(layer, inputs.row(i)).expect("trained on these inputs")))
        .collect();
    let mut out = Array2::zeros((inputs.nrows(), layer.t_out()));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&src);
    }
    out
}

const MAGIC: &[u8; 4] = b"SSNW";
pub const FORMAT_VERSION: u32 = 1;

/// Encodes a network: magic, version, skip mode, dimensions, then per layer
/// `d_in, t_out, rank, λ, threshold, σ, U, V` (row-major, little endian), and
/// a trailing CRC32 of everything before it.
pub fn encode_model(net: &SubspaceNetwork) -> Result<Vec<u8>> {
    if net.depth() == 0 {
        return Err(Error::EmptyInput("refusing to save a network with no layers".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(net.skip_mode.code());
    for n in [net.input_dim, net.task_dim, net.depth()] {
        buf.extend_from_slice(&dim_u32(n)?.to_le_bytes());
    }
    for layer in &net.layers {
        for n in [layer.d_in(), layer.t_out(), layer.rank()] {
            buf.extend_from_slice(&dim_u32(n)?.to_le_bytes());
        }
        buf.extend_from_slice(&layer.lambda().to_le_bytes());
        buf.extend_from_slice(&layer.censor_threshold().to_le_bytes());
        for v in layer.sigma().iter().chain(layer.u().iter()).chain(layer.v().iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("dimension {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("{what} dimensions overflow")))?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?, what)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("exact length"))
    }
}

/// Decodes [`encode_model`] output. The checksum is verified before any
/// field is interpreted, so a damaged file never yields a partial model.
pub fn decode_model(bytes: &[u8]) -> Result<SubspaceNetwork> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let skip_mode = SkipMode::from_code(r.take(1, "skip mode")?[0])?;
    let input_dim = r.u32("input dim")? as usize;
    let task_dim = r.u32("task dim")? as usize;
    let depth = r.u32("depth")? as usize;
    if depth == 0 {
        return Err(Error::Format("network has no layers".into()));
    }
    let mut net = SubspaceNetwork::new(input_dim, task_dim, skip_mode)?;
    for k in 0..depth {
        let d_in = r.u32("layer input dim")? as usize;
        let t_out = r.u32("layer task count")? as usize;
        let rank = r.u32("layer rank")? as usize;
        let lambda = r.f64("lambda")?;
        let threshold = r.f64("censor threshold")?;
        let sigma = r.matrix(1, t_out, "sigma")?.into_shape_with_order(t_out).expect("row");
        let u = r.matrix(t_out, rank, "U")?;
        let v = r.matrix(rank, d_in, "V")?;
        let layer = SubspaceLayer::new(u, v, sigma, lambda)
            .and_then(|l| l.with_censor_threshold(threshold))
            .map_err(|e| Error::Format(format!("layer {k}: {e}")))?;
        net.push(layer)?;
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(net)
}

/// Writes the model atomically (temporary file in the same directory, then
/// rename).
pub fn save_model(net: &SubspaceNetwork, path: &Path) -> Result<()> {
    let bytes = encode_model(net)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SubspaceNetwork> {
    decode_model(&fs::read(path)?)
}
