//! Experiment configuration: JSON, versioned, unknown keys rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use ssn_core::layer::{StepDecay, StepScaling, TrainConfig};
use ssn_core::network::{CalibrationOptions, ResidualSet};
use ssn_core::SkipMode;

use crate::locate::{locate, parse_path};

pub const SCHEMA_VERSION: u32 = 1;

/// The published schema for [`SCHEMA_VERSION`].
pub const SCHEMA: &str = include_str!("../schema/experiment.v1.schema.json");

pub const DEFAULT_RIDGE_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SingleLayerRecovery,
    DeepRecovery,
    DepthSweep,
    CalibrationStudy,
    RankSweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SingleLayerRecovery => "single_layer_recovery",
            ExperimentKind::DeepRecovery => "deep_recovery",
            ExperimentKind::DepthSweep => "depth_sweep",
            ExperimentKind::CalibrationStudy => "calibration_study",
            ExperimentKind::RankSweep => "rank_sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// Planted censored data. `sigma_set` switches to per-task noise drawn
    /// from the set; `depth > 1` chains planted layers.
    Planted {
        n: usize,
        d: usize,
        t: usize,
        r: usize,
        #[serde(default = "default_noise")]
        sigma: f64,
        #[serde(default)]
        sigma_set: Option<Vec<f64>>,
        #[serde(default = "one")]
        depth: usize,
    },
    /// Feature and target tables; relative paths resolve against the config
    /// file's directory.
    Csv { features: PathBuf, targets: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecayConfig {
    Constant,
    Power { warmup: usize, drop: f64, power: f64 },
}

impl From<DecayConfig> for StepDecay {
    fn from(d: DecayConfig) -> Self {
        match d {
            DecayConfig::Constant => StepDecay::Constant,
            DecayConfig::Power { warmup, drop, power } => StepDecay::Power { warmup, drop, power },
        }
    }
}

impl fmt::Display for DecayConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecayConfig::Constant => write!(f, "constant"),
            DecayConfig::Power { warmup, drop, power } => write!(f, "power(warmup={warmup};drop={drop};power={power})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingConfig {
    Raw,
    RunningNorm,
    Normalized,
}

impl From<ScalingConfig> for StepScaling {
    fn from(s: ScalingConfig) -> Self {
        match s {
            ScalingConfig::Raw => StepScaling::Raw,
            ScalingConfig::RunningNorm => StepScaling::RunningNorm,
            ScalingConfig::Normalized => StepScaling::Normalized,
        }
    }
}

impl ScalingConfig {
    pub fn name(self) -> &'static str {
        match self {
            ScalingConfig::Raw => "raw",
            ScalingConfig::RunningNorm => "running_norm",
            ScalingConfig::Normalized => "normalized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Defaults to the planted rank for planted sources.
    pub rank: Option<usize>,
    pub eta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub v_inner_steps: usize,
    pub u_init_scale: f64,
    pub v_init_scale: f64,
    pub sigma: f64,
    pub censor_threshold: f64,
    pub step_scaling: ScalingConfig,
    pub step_decay: DecayConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::new(1);
        let step_decay = match c.step_decay {
            StepDecay::Constant => DecayConfig::Constant,
            StepDecay::Power { warmup, drop, power } => DecayConfig::Power { warmup, drop, power },
        };
        Self {
            rank: None,
            eta: c.eta,
            mu: c.mu,
            lambda: c.lambda,
            v_inner_steps: c.v_inner_steps,
            u_init_scale: c.u_init_scale,
            v_init_scale: c.v_init_scale,
            sigma: c.sigma,
            censor_threshold: c.censor_threshold,
            step_scaling: ScalingConfig::Normalized,
            step_decay,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, rank: usize, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(rank);
        c.eta = self.eta;
        c.mu = self.mu;
        c.lambda = self.lambda;
        c.v_inner_steps = self.v_inner_steps;
        c.u_init_scale = self.u_init_scale;
        c.v_init_scale = self.v_init_scale;
        c.sigma = self.sigma;
        c.censor_threshold = self.censor_threshold;
        c.step_scaling = self.step_scaling.into();
        c.step_decay = self.step_decay.into();
        c.seed = seed;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipConfig {
    Concat,
    Naive,
}

impl From<SkipConfig> for SkipMode {
    fn from(s: SkipConfig) -> Self {
        match s {
            SkipConfig::Concat => SkipMode::Concat,
            SkipConfig::Naive => SkipMode::Naive,
        }
    }
}

impl SkipConfig {
    pub fn name(self) -> &'static str {
        match self {
            SkipConfig::Concat => "concat",
            SkipConfig::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub skip_mode: SkipConfig,
    pub warm_start: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            skip_mode: SkipConfig::Concat,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualConfig {
    All,
    Uncensored,
}

impl ResidualConfig {
    pub fn name(self) -> &'static str {
        match self {
            ResidualConfig::All => "all",
            ResidualConfig::Uncensored => "uncensored",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    /// Calibrate every run. `calibration_study` runs both ways regardless.
    pub enabled: bool,
    pub residuals: ResidualConfig,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let c = CalibrationOptions::default();
        Self {
            enabled: false,
            residuals: match c.residuals {
                ResidualSet::All => ResidualConfig::All,
                ResidualSet::Uncensored => ResidualConfig::Uncensored,
            },
            sigma_min: c.sigma_min,
            sigma_max: c.sigma_max,
        }
    }
}

impl CalibrationSection {
    pub fn options(&self) -> CalibrationOptions {
        CalibrationOptions {
            residuals: match self.residuals {
                ResidualConfig::All => ResidualSet::All,
                ResidualConfig::Uncensored => ResidualSet::Uncensored,
            },
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub source: SourceConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "one")]
    pub depth: usize,
    /// Ranks to sweep; empty means the single `train.rank`.
    #[serde(default)]
    pub ranks: Vec<usize>,
    /// Train fractions; empty means train on everything and score in-sample.
    #[serde(default)]
    pub fractions: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default = "default_grid")]
    pub ridge_lambdas: Vec<f64>,
    #[serde(default = "yes")]
    pub save_models: bool,
    #[serde(default = "yes")]
    pub save_traces: bool,
    pub output_dir: PathBuf,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_noise() -> f64 {
    3.0
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_grid() -> Vec<f64> {
    DEFAULT_RIDGE_GRID.to_vec()
}

/// A configuration problem located in the source text.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub file: PathBuf,
    pub line: usize,
    pub column: usize,
    /// Dotted key path, empty for syntax errors.
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}: ", self.file.display(), self.line, self.column)?;
        if !self.path.is_empty() {
            write!(f, "{}: ", self.path)?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    /// Parses and validates `text`. Every problem found is returned, each
    /// with its line and column in `text`.
    pub fn parse(text: &str, file: &Path) -> Result<Self, Vec<ConfigError>> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            vec![ConfigError {
                file: file.to_path_buf(),
                line: e.line(),
                column: e.column(),
                path: String::new(),
                message: e.to_string().split(" at line ").next().unwrap_or_default().to_string(),
            }]
        })?;
        let problems = cfg.problems();
        if problems.is_empty() {
            return Ok(cfg);
        }
        Err(problems
            .into_iter()
            .map(|(path, message)| {
                let (line, column) = locate(text, &parse_path(&path)).unwrap_or((1, 1));
                ConfigError {
                    file: file.to_path_buf(),
                    line,
                    column,
                    path,
                    message,
                }
            })
            .collect())
    }

    /// Resolves relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let SourceConfig::Csv { features, targets } = &mut self.source {
            fix(features);
            fix(targets);
        }
    }

    /// Ranks actually trained.
    pub fn rank_list(&self) -> Vec<usize> {
        if !self.ranks.is_empty() {
            return self.ranks.clone();
        }
        match (self.train.rank, &self.source) {
            (Some(r), _) => vec![r],
            (None, SourceConfig::Planted { r, .. }) => vec![*r],
            (None, SourceConfig::Csv { .. }) => Vec::new(),
        }
    }

    /// `(key path, message)` for every semantic violation.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut bad = |path: String, msg: String| out.push((path, msg));

        if self.schema_version != SCHEMA_VERSION {
            bad(
                "schema_version".into(),
                format!("unsupported schema version {} (this build reads {SCHEMA_VERSION})", self.schema_version),
            );
        }

        let positive = |v: f64| v.is_finite() && v > 0.0;
        match &self.source {
            SourceConfig::Planted {
                n,
                d,
                t,
                r,
                sigma,
                sigma_set,
                depth,
            } => {
                for (k, v) in [("n", n), ("d", d), ("t", t), ("depth", depth)] {
                    if *v == 0 {
                        bad(format!("source.{k}"), "must be at least 1".into());
                    }
                }
                if *r == 0 || r > t.min(d) {
                    bad("source.r".into(), format!("rank {r} outside 1..=min(t, d) = {}", t.min(d)));
                }
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    bad("source.sigma".into(), format!("must be >= 0, got {sigma}"));
                }
                if let Some(set) = sigma_set {
                    if set.is_empty() {
                        bad("source.sigma_set".into(), "must not be empty".into());
                    }
                    for (i, s) in set.iter().enumerate() {
                        if !positive(*s) {
                            bad(format!("source.sigma_set[{i}]"), format!("must be > 0, got {s}"));
                        }
                    }
                }
            }
            SourceConfig::Csv { .. } => {
                if matches!(
                    self.experiment,
                    ExperimentKind::SingleLayerRecovery | ExperimentKind::DeepRecovery
                ) {
                    bad(
                        "source.kind".into(),
                        format!("{} needs a planted source", self.experiment.name()),
                    );
                }
            }
        }

        let t = &self.train;
        for (k, v) in [
            ("eta", t.eta),
            ("mu", t.mu),
            ("u_init_scale", t.u_init_scale),
            ("v_init_scale", t.v_init_scale),
            ("sigma", t.sigma),
        ] {
            if !positive(v) {
                bad(format!("train.{k}"), format!("must be > 0, got {v}"));
            }
        }
        for (k, v) in [("lambda", t.lambda), ("censor_threshold", t.censor_threshold)] {
            if !(v.is_finite() && v >= 0.0) {
                bad(format!("train.{k}"), format!("must be >= 0, got {v}"));
            }
        }
        if t.v_inner_steps == 0 {
            bad("train.v_inner_steps".into(), "must be at least 1".into());
        }
        if t.rank == Some(0) {
            bad("train.rank".into(), "must be at least 1".into());
        }
        if let DecayConfig::Power { warmup, drop, power } = t.step_decay {
            if warmup == 0 {
                bad("train.step_decay.warmup".into(), "must be at least 1".into());
            }
            if !positive(drop) {
                bad("train.step_decay.drop".into(), format!("must be > 0, got {drop}"));
            }
            if !(power.is_finite() && power >= 0.0) {
                bad("train.step_decay.power".into(), format!("must be >= 0, got {power}"));
            }
        }

        if self.depth == 0 {
            bad("depth".into(), "must be at least 1".into());
        }
        if self.experiment == ExperimentKind::CalibrationStudy && self.depth < 2 {
            bad("depth".into(), "calibration_study needs depth >= 2".into());
        }
        for (i, r) in self.ranks.iter().enumerate() {
            if *r == 0 {
                bad(format!("ranks[{i}]"), "must be at least 1".into());
            }
        }
        if self.experiment == ExperimentKind::RankSweep && self.ranks.is_empty() {
            bad("ranks".into(), "rank_sweep needs a nonempty rank list".into());
        }
        if self.rank_list().is_empty() {
            bad("train.rank".into(), "required for csv sources unless ranks is given".into());
        }
        for (i, f) in self.fractions.iter().enumerate() {
            if !(f.is_finite() && *f > 0.0 && *f < 1.0) {
                bad(format!("fractions[{i}]"), format!("must lie in (0, 1), got {f}"));
            }
        }
        if self.seeds.is_empty() {
            bad("seeds".into(), "must not be empty".into());
        }
        if self.ridge_lambdas.is_empty() {
            bad("ridge_lambdas".into(), "must not be empty".into());
        }
        for (i, l) in self.ridge_lambdas.iter().enumerate() {
            if !(l.is_finite() && *l >= 0.0) {
                bad(format!("ridge_lambdas[{i}]"), format!("must be >= 0, got {l}"));
            }
        }
        let c = &self.calibration;
        if !positive(c.sigma_min) {
            bad("calibration.sigma_min".into(), format!("must be > 0, got {}", c.sigma_min));
        }
        if !(c.sigma_max.is_finite() && c.sigma_max >= c.sigma_min) {
            bad("calibration.sigma_max".into(), format!("must be finite and >= sigma_min, got {}", c.sigma_max));
        }
        if self.output_dir.as_os_str().is_empty() {
            bad("output_dir".into(), "must not be empty".into());
        }
        out
    }
}
