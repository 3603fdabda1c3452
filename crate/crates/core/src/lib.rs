//! Deep multi-task censored regression with low-rank layers.
//!
//! Each layer models `y = ReLU(U V x + ε)` with `U: T×R`, `V: R×D` and
//! Gaussian noise, fit by maximizing the Tobit likelihood in a single pass:
//! for every sample, a few gradient steps on `V` (the sketch) followed by one
//! step on each row of `U` (the refinement). Layers are stacked greedily, each
//! new layer reading the previous prediction concatenated with the raw input.
//!
//! ```
//! use ssn_core::{data, layer::{train_layer, TrainConfig}, metrics};
//!
//! let (ds, truth) = data::gen_single_layer(500, 20, 10, 3, 1.0, 7).unwrap();
//! let (layer, log) = train_layer(&ds, &TrainConfig::new(3), None).unwrap();
//! assert_eq!(log.samples_seen, 500);
//! let corr = metrics::weight_correlations(
//!     layer.weights().view(),
//!     truth.output_layer().weights().view(),
//! ).unwrap();
//! assert!(metrics::median(corr.as_slice().unwrap()).unwrap() > 0.5);
//! ```

pub mod baselines;
pub mod data;
pub mod error;
pub mod layer;
pub mod math;
pub mod metrics;
pub mod network;

pub use data::{Dataset, PlantedTruth};
pub use error::{Error, Result};
pub use layer::{SubspaceLayer, TraceLog, TrainConfig};
pub use network::{SkipMode, SubspaceNetwork};
