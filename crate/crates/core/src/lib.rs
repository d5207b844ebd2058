//! Ensemble Kalman filter reconstruction of tissue impulse-response kernels
//! from indicator-dilution time curves, with kernel-density summaries of the
//! resulting perfusion posterior.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod enkf;
pub mod error;
pub mod io;
pub mod model;
pub mod parallel;
pub mod phantom;
pub mod posterior;
pub mod stochastics;

pub use enkf::{
    analysis_step, assimilate_voxel, exact_kalman_filter, forecast_step, init_ensemble,
    kalman_gain, AssimilationConfig, Assimilator, Ensemble, EnsembleStats, KalmanOracle,
    VoxelPosterior,
};
pub use error::{Error, Result};
pub use model::{
    apply_forward, convolve_to_observation_space, forward_rows, perfusion_from_kernel, AifVector,
    ForwardRow, KernelState, PerfusionValue, TimeGrid,
};
pub use parallel::Execution;
pub use stochastics::{factorize, gaussian_covariance, CovarianceMatrix, NoiseFactor, RngStream};
pub use phantom::{generate, AifParams, PhantomDataset, PhantomSpec, Region, Shape};
pub use posterior::{
    extract_samples, kde, range_probability, summarize_voxel, DensityEstimate, Functional,
    PerfusionSummary, SampleSet, Thresholds,
};
