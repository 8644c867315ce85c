//! Hyperspectral unmixing under the linear mixing model.
//!
//! The crate bundles the mixing model and its losses, VCA/FCLS
//! initialisation, eleven NMF-family solvers, neighbourhood graphs, a
//! synthetic scene generator, ground-truth labelling, SAD/RMSE evaluation,
//! a portable cube format and the benchmark harness behind the `unmix` CLI.

pub mod error;
pub mod evaluation;
pub mod graph;
pub mod harness;
pub mod initializers;
pub mod io;
pub mod labeling;
mod linalg;
pub mod model;
pub mod solvers;
pub mod synthetic;

pub use error::{Result, UnmixError};
pub use evaluation::BenchmarkReport;
pub use labeling::GroundTruth;
pub use linalg::PcaProjection;
pub use model::{AbundanceMatrix, EndmemberMatrix, HyperCube, LossKind};
