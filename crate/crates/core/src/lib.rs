//! Random-intercept logistic models for binary expert ratings, with a
//! permutational splitting procedure for data sets too large to fit whole.
//!
//! The model is `logit P(y_ij = 1) = beta_j + b_i` with `b_i ~ N(0, sigma^2)`.

pub mod error;
pub mod ingest;
pub mod model;
pub mod numeric;
pub mod probability;
pub mod quadrature;
pub mod simstudy;
pub mod splitproc;
pub mod table;

pub use error::{Error, Result};
pub use ingest::{
    compute_weights, load_ratings, load_weights, write_ratings, FormatOptions, IdMap, IdMaps, LoadedRatings,
};
pub use model::{
    fit_ml, log_likelihood, log_likelihood_gradient, log_likelihood_hessian, FitOptions, FitResult, ModelParams,
};
pub use probability::{delta_method_ci, success_probability, Interval};
pub use quadrature::{gauss_hermite, QuadratureRule};
pub use simstudy::{run_study, SimConfig, SimReport};
pub use splitproc::{combine_cis, make_partition, run_procedure, CiMode, Partition, PartitionSpec, ProcedureResult};
pub use table::{Rating, RatingsTable};
