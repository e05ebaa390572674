//! Object-aware visual-inertial odometry back-end.
//!
//! The crate is organised bottom-up:
//!
//! * [`lie`]: SO(3)/SE(3) primitives, projection, dual quadrics.
//! * [`imu`]: closed-form mean and covariance propagation.
//! * [`residuals`]: measurement error functions with analytic Jacobians.
//! * [`object`]: triangulation, object initialization, Levenberg-Marquardt.
//! * [`msckf`]: null-space projection, EKF update, zero-velocity update and
//!   the frame-by-frame estimator.
//! * [`sim`]: synthetic trajectories, measurements and evaluation metrics.
//! * [`pipeline`]: time-ordered driver over a recorded dataset.
//! * [`io`]: dataset and result file formats, run configuration.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod imu;
pub mod io;
pub mod lie;
pub mod msckf;
pub mod object;
pub mod pipeline;
pub mod residuals;
pub mod sim;

pub use error::{Error, Result};
