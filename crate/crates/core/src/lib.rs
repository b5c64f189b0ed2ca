//! Cyclic-spectral transform and domain-aware Shapley attribution for
//! vibration-signal classifiers.

pub mod coalition;
pub mod cs;
pub mod dataset;
pub mod domains;
pub mod error;
pub mod grid;
pub mod model;
pub mod signal;
pub mod shapley;
pub mod sim;

pub use error::{Error, Result};
pub use grid::Grid;
pub use signal::{TimeSeries, WindowKind, WindowSpec};
