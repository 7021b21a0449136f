//! Budgeted batch Bayesian optimization.
//!
//! Each iteration fits a Gaussian process to the observations, slice-samples
//! points in proportion to the acquisition surface, fits a truncated
//! Dirichlet-process Gaussian mixture to the samples and evaluates the
//! mixture's component means in parallel. The batch size follows from how
//! many peaks the surface has. Fixed-size batch baselines are included for
//! comparison.

pub mod acquisition;
pub mod benchfns;
pub mod bgss;
pub mod domain;
pub mod gp;
pub mod harness;
pub mod igmm;
pub mod linalg;
pub mod strategies;

pub use acquisition::{find_max, find_min, AcquisitionKind, AcquisitionSpec};
pub use bgss::{bgss, SampleSet, SamplerConfig};
pub use domain::{ObservationSet, RngStream, RunConfig, SearchDomain, UnitSource};
pub use gp::{fit, GpPosterior, KernelParams};
pub use harness::{run_experiment, ExperimentResult};
pub use igmm::{extract_peaks, fit_igmm, IgmmPosterior, IgmmPrior, PeakSet};
pub use strategies::{run_loop, BatchProposal, RunHistory, Strategy};
