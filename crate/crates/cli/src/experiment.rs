//! Runs the cells of an experiment: one cell per (seed, fraction, rank,
//! variant), each producing one result row per network depth.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use ssn_core::baselines::{fit_ridge, predict_baseline};
use ssn_core::data::{gaussian_reference, gen_deep, gen_heteroscedastic, load_csv, shuffled, split};
use ssn_core::metrics::{
    aligned_subspace_difference, anmse_skipping_constant, median, mutual_coherence, rank_agreement,
    subspace_difference, weight_correlations,
};
use ssn_core::network::{expand, save_model, Expansion, ExpandOptions};
use ssn_core::{Dataset, Error, PlantedTruth};

use crate::config::{ExperimentConfig, ExperimentKind, SourceConfig};
use crate::error::CliError;
use crate::report;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Plain,
    Calibrated,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Calibrated => "calibrated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub seed: u64,
    /// `None` trains on every sample and scores in-sample.
    pub fraction: Option<f64>,
    pub rank: usize,
    pub variant: Variant,
}

impl Cell {
    /// File stem shared by the cell's model and trace files.
    pub fn stem(&self) -> String {
        let frac = match self.fraction {
            Some(f) => format!("f{f}"),
            None => "full".to_string(),
        };
        format!("s{}_{frac}_r{}_{}", self.seed, self.rank, self.variant.name())
    }
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultRow {
    pub seed: u64,
    pub fraction: Option<f64>,
    pub rank: usize,
    pub variant: &'static str,
    pub depth: usize,
    /// `ok`, or the failure that stopped the cell.
    pub status: String,
    pub n_train: usize,
    pub n_valid: usize,
    pub samples_seen: Option<usize>,
    pub anmse: Option<f64>,
    pub skipped_tasks: Option<usize>,
    pub ridge_anmse: Option<f64>,
    pub ridge_lambda: Option<f64>,
    pub ridge_relu_anmse: Option<f64>,
    pub ridge_relu_lambda: Option<f64>,
    pub weight_corr_median: Option<f64>,
    pub subspace_diff: Option<f64>,
    pub aligned_diff: Option<f64>,
    pub coherence_max: Option<f64>,
    pub coherence_mean: Option<f64>,
    pub random_coherence_max: Option<f64>,
    pub sigma_rank_agreement: Option<f64>,
    pub wall_clock_seconds: f64,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<ResultRow>,
    pub cells: usize,
    pub failed_cells: usize,
    pub output_dir: PathBuf,
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let variants: Vec<Variant> = match (cfg.experiment, cfg.calibration.enabled) {
        (ExperimentKind::CalibrationStudy, _) => vec![Variant::Plain, Variant::Calibrated],
        (_, true) => vec![Variant::Calibrated],
        (_, false) => vec![Variant::Plain],
    };
    let fractions: Vec<Option<f64>> = if cfg.fractions.is_empty() {
        vec![None]
    } else {
        cfg.fractions.iter().copied().map(Some).collect()
    };
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for &fraction in &fractions {
            for rank in cfg.rank_list() {
                for &variant in &variants {
                    out.push(Cell {
                        seed,
                        fraction,
                        rank,
                        variant,
                    });
                }
            }
        }
    }
    out
}

/// Data for one seed: generated for planted sources, shared for tables.
fn dataset(cfg: &ExperimentConfig, seed: u64, table: Option<&Dataset>) -> ssn_core::Result<(Dataset, Option<PlantedTruth>)> {
    match &cfg.source {
        SourceConfig::Planted {
            n,
            d,
            t,
            r,
            sigma,
            sigma_set,
            depth,
        } => {
            let (data, truth) = match sigma_set {
                Some(set) => gen_heteroscedastic(*n, *d, *t, *r, set, seed)?,
                None => gen_deep(*n, *d, *t, *r, *sigma, *depth, seed)?,
            };
            Ok((data, Some(truth)))
        }
        SourceConfig::Csv { .. } => Ok((table.expect("table loaded up front").clone(), None)),
    }
}

/// Runs every cell and writes `results.csv`, `summary.json`, traces and
/// models under `cfg.output_dir`. `threads` caps the worker pool.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<RunReport, CliError> {
    let table = match &cfg.source {
        SourceConfig::Csv { features, targets } => Some(load_csv(features, targets).map_err(CliError::input)?),
        SourceConfig::Planted { .. } => None,
    };
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    if cfg.save_traces {
        std::fs::create_dir_all(out.join("traces"))?;
    }
    if cfg.save_models {
        std::fs::create_dir_all(out.join("models"))?;
    }

    let all = cells(cfg);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<Vec<ResultRow>, CliError>> =
        pool.install(|| all.par_iter().map(|c| run_cell(cfg, c, table.as_ref(), out)).collect());

    let mut rows = Vec::new();
    let mut failed = 0;
    for o in outcomes {
        let r = o?;
        if r.iter().all(|row| !row.is_ok()) {
            failed += 1;
        }
        rows.extend(r);
    }
    report::write_results(&out.join("results.csv"), cfg, &rows)?;
    report::write_summary(&out.join("summary.json"), cfg, &rows, all.len(), failed)?;
    let report = RunReport {
        rows,
        cells: all.len(),
        failed_cells: failed,
        output_dir: out.clone(),
    };
    if failed == report.cells {
        return Err(CliError::Numeric(format!("all {failed} cells failed")));
    }
    Ok(report)
}

fn failure_status(e: &Error) -> String {
    match e {
        Error::StepSize { .. } => format!("diverged: {e}"),
        _ => format!("failed: {e}"),
    }
}

/// Trains and scores one cell. Numeric failures become row statuses; only
/// output IO is an error.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell, table: Option<&Dataset>, out: &Path) -> Result<Vec<ResultRow>, CliError> {
    let start = Instant::now();
    let base = ResultRow {
        seed: cell.seed,
        fraction: cell.fraction,
        rank: cell.rank,
        variant: cell.variant.name(),
        ..Default::default()
    };
    let failed = |status: String, n_train: usize, n_valid: usize| -> Vec<ResultRow> {
        let secs = start.elapsed().as_secs_f64();
        (1..=cfg.depth)
            .map(|depth| ResultRow {
                depth,
                status: status.clone(),
                n_train,
                n_valid,
                wall_clock_seconds: secs,
                ..base.clone()
            })
            .collect()
    };

    let (data, truth) = match dataset(cfg, cell.seed, table) {
        Ok(d) => d,
        Err(e) => return Ok(failed(failure_status(&e), 0, 0)),
    };
    let (train, valid) = match cell.fraction {
        Some(f) => match split(&data, f, cell.seed) {
            Ok(s) => s,
            Err(e) => return Ok(failed(failure_status(&e), 0, 0)),
        },
        None => {
            let s = shuffled(&data, cell.seed);
            (s.clone(), s)
        }
    };
    let (n_train, n_valid) = (train.n_samples(), valid.n_samples());

    let tc = cfg.train.to_train_config(cell.rank, cell.seed);
    let opts = ExpandOptions {
        skip_mode: cfg.network.skip_mode.into(),
        calibrate: (cell.variant == Variant::Calibrated).then(|| cfg.calibration.options()),
        warm_start: cfg.network.warm_start,
    };
    let probe = truth.as_ref().map(|t| t.output_layer().u.view());
    let expansion = match expand(train.x.view(), train.y.view(), cfg.depth, &tc, &opts, probe) {
        Ok(e) => e,
        Err(e) => return Ok(failed(failure_status(&e), n_train, n_valid)),
    };

    if cfg.save_traces {
        for (k, log) in expansion.traces.iter().enumerate() {
            let path = out.join("traces").join(format!("{}_l{}.csv", cell.stem(), k + 1));
            report::write_trace(&path, log)?;
        }
    }
    if cfg.save_models {
        let path = out.join("models").join(format!("{}.ssnw", cell.stem()));
        save_model(&expansion.network, &path).map_err(|e| CliError::Io(e.to_string()))?;
    }

    let ridge = ridge_scores(&train, &valid, &cfg.ridge_lambdas);
    let outputs = match expansion.network.forward_all_depths(valid.x.view()) {
        Ok(o) => o,
        Err(e) => return Ok(failed(failure_status(&e), n_train, n_valid)),
    };
    let secs = start.elapsed().as_secs_f64();
    let mut rows = Vec::with_capacity(cfg.depth);
    for (k, pred) in outputs.iter().enumerate() {
        let mut row = ResultRow {
            depth: k + 1,
            status: "ok".into(),
            n_train,
            n_valid,
            samples_seen: Some(expansion.traces[k].samples_seen),
            wall_clock_seconds: secs,
            ..base.clone()
        };
        match anmse_skipping_constant(valid.y.view(), pred.view()) {
            Ok(a) => {
                row.anmse = Some(a.value);
                row.skipped_tasks = Some(a.skipped.len());
            }
            Err(e) => row.status = failure_status(&e),
        }
        if let Some((a, la, b, lb)) = ridge {
            row.ridge_anmse = Some(a);
            row.ridge_lambda = Some(la);
            row.ridge_relu_anmse = Some(b);
            row.ridge_relu_lambda = Some(lb);
        }
        if let Some(t) = &truth {
            truth_metrics(&mut row, &expansion, k, t, cell);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Best validation ANMSE over the grid for plain ridge and ridge with a
/// ReLU at prediction time: `(plain, λ, relu, λ)`.
fn ridge_scores(train: &Dataset, valid: &Dataset, grid: &[f64]) -> Option<(f64, f64, f64, f64)> {
    let mut plain: Option<(f64, f64)> = None;
    let mut relu: Option<(f64, f64)> = None;
    for &lam in grid {
        let Ok(m) = fit_ridge(train, lam) else { continue };
        for (censor, best) in [(false, &mut plain), (true, &mut relu)] {
            let score = predict_baseline(&m, valid.x.view(), censor)
                .and_then(|p| anmse_skipping_constant(valid.y.view(), p.view()));
            if let Ok(s) = score {
                if best.is_none_or(|(b, _)| s.value < b) {
                    *best = Some((s.value, lam));
                }
            }
        }
    }
    let (a, la) = plain?;
    let (b, lb) = relu?;
    Some((a, la, b, lb))
}

/// Recovery metrics of layer `k` against the planted output factors.
fn truth_metrics(row: &mut ResultRow, e: &Expansion, k: usize, truth: &PlantedTruth, cell: &Cell) {
    let layer = &e.network.layers()[k];
    let planted = truth.output_layer();
    let u_star = planted.u.view();
    let u = layer.u().view();
    row.subspace_diff = subspace_difference(u_star, u).ok();
    row.aligned_diff = aligned_subspace_difference(u_star, u).ok();
    if let Ok(c) = mutual_coherence(u, u_star) {
        row.coherence_max = Some(c.max);
        row.coherence_mean = Some(c.mean);
    }
    let random = gaussian_reference(u.nrows(), u.ncols(), cell.seed);
    row.random_coherence_max = mutual_coherence(random.view(), u_star).ok().map(|c| c.max);
    if truth.depth() == 1 && k == 0 {
        row.weight_corr_median = weight_correlations(layer.weights().view(), planted.weights().view())
            .ok()
            .and_then(|c| median(c.as_slice()?));
    }
    if let Some(report) = e.calibration.get(k) {
        row.sigma_rank_agreement =
            rank_agreement(truth.sigma.as_slice().expect("contiguous"), report.sigma.as_slice().expect("contiguous"));
    }
}

