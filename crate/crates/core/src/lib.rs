//! Active landmark-based SLAM with informative trajectory optimization.
//!
//! The crate implements the full planning and estimation stack for a planar
//! robot that maps point landmarks with a limited field-of-view sensor:
//!
//! * [`geometry`]: planar rotations, poses, and the convex field-of-view
//!   polygon with its signed distance function.
//! * [`motion`]: differential-drive kinematics and its Jacobians.
//! * [`sensing`]: relative-position measurements with a differentiable
//!   field of view and the sensor information matrix.
//! * [`covariance`]: landmark covariance propagation, the matrix Riccati
//!   map, its per-block vectorized form, and closed-form Jacobians.
//! * [`icr`]: iterative Covariance Regulation, gradient descent on a
//!   multi-step control sequence minimizing the trace of the predicted
//!   landmark covariance.
//! * [`lqr`]: affine time-varying LQR over the linearized joint
//!   robot + covariance dynamics around the iCR trajectory.
//! * [`ekf`]: joint EKF over robot pose and landmark positions with
//!   measurement reconstruction for out-of-view landmarks.
//! * [`sim`]: environment generation, the replanning execution loop, and
//!   Monte Carlo metrics for comparing control policies.
//! * [`check`]: finite-difference verification suites for every analytic
//!   Jacobian in the crate.
//!
//! All numerical code is generic over the scalar type via [`Real`]
//! (`f32` or `f64`); the aliases at the crate root fix `f64`, which is what
//! the simulation harness and CLI use.

pub mod check;
pub mod covariance;
pub mod ekf;
pub mod error;
pub mod geometry;
pub mod icr;
pub mod lqr;
pub mod motion;
pub mod scalar;
pub mod sensing;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Real;

/// Default scalar type used by the simulation harness and CLI.
pub type Scalar = f64;

pub type Pose2 = geometry::Pose2<Scalar>;
pub type FovPolygon = geometry::FovPolygon<Scalar>;
pub type ControlInput = motion::ControlInput<Scalar>;
pub type ControlBounds = motion::ControlBounds<Scalar>;
pub type ProcessNoiseModel = motion::ProcessNoiseModel<Scalar>;
pub type SensorModel = sensing::SensorModel<Scalar>;
pub type LandmarkSet = sensing::LandmarkSet<Scalar>;
pub type CovBlocks = covariance::CovBlocks<Scalar>;
pub type CovVector = covariance::CovVector<Scalar>;
pub type InfoVector = covariance::InfoVector<Scalar>;
pub type IcrConfig = icr::IcrConfig<Scalar>;
pub type OpenLoopPlan = icr::OpenLoopPlan<Scalar>;
pub type LqrWeights = lqr::LqrWeights<Scalar>;
pub type LqrPolicy = lqr::LqrPolicy<Scalar>;
pub type JointBelief = ekf::JointBelief<Scalar>;
pub type Environment = sim::Environment<Scalar>;
pub type SimParams = sim::SimParams<Scalar>;
pub type TrialConfig = sim::TrialConfig<Scalar>;
pub type TrialResult = sim::TrialResult<Scalar>;
