//! Evaluation and loss-distribution analyses.

pub mod ap;
pub mod distribution;
pub mod imbalance;

pub use ap::{average_precision, evaluate, ApPoints, ApReport, EvalConfig};
pub use distribution::{
    gamma_sweep, loss_cdf, posterior_histogram, synthetic_dump, CdfCurve, Histogram,
    PredictionDump, SweepRow, SWEEP_FRACTIONS,
};
pub use imbalance::{imbalance_report, ImbalanceReport, ZSlice};
