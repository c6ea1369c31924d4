//! Measure-to-measure regression on empirical measures.
//!
//! Point clouds are mapped to point clouds either in one step by a
//! measure-dependent transformer, or by integrating a time-dependent velocity
//! field trained with flow matching along optimal-transport couplings.

pub mod error;
pub mod inference;
pub mod measures;
pub mod metrics;
pub mod neural;
pub mod ot;
pub mod simulators;
pub mod training;

pub use error::{Error, Result};
pub use measures::{Dataset, MeasurePair, PointCloud, Trajectory};
pub use metrics::MetricReport;
