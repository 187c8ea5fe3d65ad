//! Post-processing of regression scores so that, above a threshold `alpha`,
//! the distribution of predictions is the same in every sensitive group,
//! while each group keeps a chosen mass `p` at or below `alpha`.

mod brent;
pub mod data;
pub mod dp_tails;
pub mod empirical_dist;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod p_optimizer;
mod quadrature;
pub mod seed;
pub mod serde_ext;

pub use dp_tails::{
    fit, population_adjusted_quantile, split_calibration, DpTailsParams, FittedTransform, GroupId,
    GroupedScores, PopulationModel, Regime, Variant,
};
pub use data::{Dataset, Schema};
pub use empirical_dist::{EmpiricalCdf, QuantileTable, SampleSet};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use p_optimizer::{optimize_p, Method, PObjectiveReport};
