//! Output files. Every file is written to a temporary sibling and renamed
//! into place.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Map, Value};
use ssn_core::layer::TraceLog;
use ssn_core::metrics::{median, std_dev};
use tempfile::NamedTempFile;

use crate::config::{ExperimentConfig, SourceConfig, SCHEMA_VERSION};
use crate::error::CliError;
use crate::experiment::ResultRow;

/// Writes through `fill` into a temporary file next to `path`, then renames.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns describing the configuration, identical on every row.
fn config_columns(cfg: &ExperimentConfig) -> Vec<(&'static str, String)> {
    let t = &cfg.train;
    let mut cols = vec![("experiment", cfg.experiment.name().to_string())];
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
            let noise = match sigma_set {
                Some(set) => set.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
                None => sigma.to_string(),
            };
            cols.extend([
                ("source", "planted".to_string()),
                ("n", n.to_string()),
                ("d", d.to_string()),
                ("t", t.to_string()),
                ("planted_rank", r.to_string()),
                ("noise", noise),
                ("planted_depth", depth.to_string()),
            ]);
        }
        SourceConfig::Csv { features, targets } => {
            let name = |p: &Path| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            cols.extend([
                ("source", format!("csv:{}|{}", name(features), name(targets))),
                ("n", String::new()),
                ("d", String::new()),
                ("t", String::new()),
                ("planted_rank", String::new()),
                ("noise", String::new()),
                ("planted_depth", String::new()),
            ]);
        }
    }
    cols.extend([
        ("network_depth", cfg.depth.to_string()),
        ("eta", t.eta.to_string()),
        ("mu", t.mu.to_string()),
        ("lambda", t.lambda.to_string()),
        ("v_inner_steps", t.v_inner_steps.to_string()),
        ("u_init_scale", t.u_init_scale.to_string()),
        ("v_init_scale", t.v_init_scale.to_string()),
        ("train_sigma", t.sigma.to_string()),
        ("censor_threshold", t.censor_threshold.to_string()),
        ("step_scaling", t.step_scaling.name().to_string()),
        ("step_decay", t.step_decay.to_string()),
        ("skip_mode", cfg.network.skip_mode.name().to_string()),
        ("warm_start", cfg.network.warm_start.to_string()),
        ("calibration_residuals", cfg.calibration.residuals.name().to_string()),
        ("sigma_min", cfg.calibration.sigma_min.to_string()),
        ("sigma_max", cfg.calibration.sigma_max.to_string()),
        (
            "ridge_grid",
            cfg.ridge_lambdas.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";"),
        ),
    ]);
    cols
}

fn row_columns(r: &ResultRow) -> Vec<(&'static str, String)> {
    vec![
        ("seed", r.seed.to_string()),
        ("fraction", r.fraction.map_or("full".to_string(), |f| f.to_string())),
        ("rank", r.rank.to_string()),
        ("variant", r.variant.to_string()),
        ("depth", r.depth.to_string()),
        ("status", r.status.clone()),
        ("n_train", r.n_train.to_string()),
        ("n_valid", r.n_valid.to_string()),
        ("samples_seen", opt(r.samples_seen)),
        ("anmse", opt(r.anmse)),
        ("skipped_tasks", opt(r.skipped_tasks)),
        ("ridge_anmse", opt(r.ridge_anmse)),
        ("ridge_lambda", opt(r.ridge_lambda)),
        ("ridge_relu_anmse", opt(r.ridge_relu_anmse)),
        ("ridge_relu_lambda", opt(r.ridge_relu_lambda)),
        ("weight_corr_median", opt(r.weight_corr_median)),
        ("subspace_diff", opt(r.subspace_diff)),
        ("aligned_diff", opt(r.aligned_diff)),
        ("coherence_max", opt(r.coherence_max)),
        ("coherence_mean", opt(r.coherence_mean)),
        ("random_coherence_max", opt(r.random_coherence_max)),
        ("sigma_rank_agreement", opt(r.sigma_rank_agreement)),
    ]
}

/// Name of the only column that varies between identical reruns.
pub const WALL_CLOCK_COLUMN: &str = "wall_clock_seconds";

pub fn write_results(path: &Path, cfg: &ExperimentConfig, rows: &[ResultRow]) -> Result<(), CliError> {
    let fixed = config_columns(cfg);
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<&str> = row_columns(&ResultRow::default()).iter().map(|c| c.0).collect();
        header.extend(fixed.iter().map(|c| c.0));
        header.push(WALL_CLOCK_COLUMN);
        out.write_record(&header)?;
        for r in rows {
            let mut rec: Vec<String> = row_columns(r).into_iter().map(|c| c.1).collect();
            rec.extend(fixed.iter().map(|c| c.1.clone()));
            rec.push(r.wall_clock_seconds.to_string());
            out.write_record(&rec)?;
        }
        out.flush()
    })
}

pub fn write_trace(path: &Path, log: &TraceLog) -> Result<(), CliError> {
    let iterwise = log.iterwise_diff();
    write_atomic(path, |w| {
        writeln!(w, "i,cost,u_step,iterwise_diff,subspace_diff,aligned_diff")?;
        for (k, r) in log.records.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.i,
                r.cost,
                r.u_step,
                opt(iterwise.as_ref().map(|v| v[k])),
                opt(r.subspace_diff),
                opt(r.aligned_diff)
            )?;
        }
        Ok(())
    })
}

type Metric = (&'static str, fn(&ResultRow) -> Option<f64>);

const METRICS: [Metric; 10] = [
    ("anmse", |r| r.anmse),
    ("ridge_anmse", |r| r.ridge_anmse),
    ("ridge_relu_anmse", |r| r.ridge_relu_anmse),
    ("weight_corr_median", |r| r.weight_corr_median),
    ("subspace_diff", |r| r.subspace_diff),
    ("aligned_diff", |r| r.aligned_diff),
    ("coherence_max", |r| r.coherence_max),
    ("coherence_mean", |r| r.coherence_mean),
    ("random_coherence_max", |r| r.random_coherence_max),
    ("sigma_rank_agreement", |r| r.sigma_rank_agreement),
];

/// Median and standard deviation across seeds of every metric, grouped by
/// (variant, fraction, rank, depth) in first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<Value> {
    let key = |r: &ResultRow| (r.variant, r.fraction.map(f64::to_bits), r.rank, r.depth);
    let mut keys = Vec::new();
    for r in rows {
        if !keys.contains(&key(r)) {
            keys.push(key(r));
        }
    }
    keys.into_iter()
        .map(|k| {
            let group: Vec<&ResultRow> = rows.iter().filter(|r| key(r) == k).collect();
            let ok: Vec<&&ResultRow> = group.iter().filter(|r| r.is_ok()).collect();
            let mut entry = Map::new();
            entry.insert("variant".into(), json!(k.0));
            entry.insert("fraction".into(), json!(k.1.map(f64::from_bits)));
            entry.insert("rank".into(), json!(k.2));
            entry.insert("depth".into(), json!(k.3));
            entry.insert("cells".into(), json!(group.len()));
            entry.insert("cells_ok".into(), json!(ok.len()));
            for (name, get) in METRICS {
                let vals: Vec<f64> = ok.iter().filter_map(|r| get(r)).collect();
                if vals.is_empty() {
                    continue;
                }
                entry.insert(
                    name.into(),
                    json!({ "median": median(&vals), "std": std_dev(&vals), "n": vals.len() }),
                );
            }
            Value::Object(entry)
        })
        .collect()
}

pub fn write_summary(
    path: &Path,
    cfg: &ExperimentConfig,
    rows: &[ResultRow],
    cells: usize,
    failed: usize,
) -> Result<(), CliError> {
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment.name(),
        "cells": cells,
        "failed_cells": failed,
        "groups": summarize(rows),
    });
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, &doc)?;
        writeln!(w)
    })
}
