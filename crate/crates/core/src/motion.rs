//! Differential-drive stochastic kinematics and its Jacobians.
//!
//! One step of the model moves the pose by
//! `tau * [v sinc(a) cos(theta + a), v sinc(a) sin(theta + a), omega]` plus
//! additive Gaussian noise, with `a = omega tau / 2` and the unnormalized
//! `sinc(a) = sin(a) / a`.

use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2};
use crate::scalar::{lit, Real};

/// Linear and angular velocity command.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlInput<T: Real> {
    /// Linear velocity, m/s.
    pub v: T,
    /// Angular velocity, rad/s.
    pub omega: T,
}

impl<T: Real> ControlInput<T> {
    pub fn new(v: T, omega: T) -> Self {
        ControlInput { v, omega }
    }

    pub fn to_vector(&self) -> Vector2<T> {
        Vector2::new(self.v, self.omega)
    }

    pub fn from_vector(u: &Vector2<T>) -> Self {
        ControlInput::new(u.x, u.y)
    }
}

/// Box bounds on the control input: `v` in `[0, v_max]`, `omega` in
/// `[-omega_max, omega_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlBounds<T: Real> {
    pub v_max: T,
    pub omega_max: T,
}

impl<T: Real> ControlBounds<T> {
    pub fn new(v_max: T, omega_max: T) -> Result<Self> {
        if v_max <= T::zero() || omega_max <= T::zero() {
            return Err(Error::invalid("ControlBounds", "bounds must be positive"));
        }
        Ok(ControlBounds { v_max, omega_max })
    }

    pub fn clamp(&self, u: &ControlInput<T>) -> ControlInput<T> {
        ControlInput {
            v: u.v.clamp(T::zero(), self.v_max),
            omega: u.omega.clamp(-self.omega_max, self.omega_max),
        }
    }
}

/// Process noise covariance `W` (additive, in the pose coordinates) and the
/// discretization time step `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessNoiseModel<T: Real> {
    covariance: Matrix3<T>,
    sqrt: Matrix3<T>,
    pub tau: T,
}

impl<T: Real> ProcessNoiseModel<T> {
    /// `w` must be symmetric positive semidefinite; `tau` positive.
    ///
    /// A PSD (rather than strictly PD) `w` is accepted so that noiseless
    /// simulations can use `W = 0`.
    pub fn new(w: Matrix3<T>, tau: T) -> Result<Self> {
        if tau <= T::zero() {
            return Err(Error::invalid("ProcessNoiseModel.tau", "must be positive"));
        }
        let asym = (w - w.transpose()).abs().max();
        if asym > lit(1e-9) {
            return Err(Error::invalid("ProcessNoiseModel.W", "must be symmetric"));
        }
        let sym = (w + w.transpose()) * lit::<T>(0.5);
        let eig = sym.symmetric_eigen();
        let tol = lit::<T>(-1e-12) * T::one().max(eig.eigenvalues.abs().max());
        if eig.eigenvalues.min() < tol {
            return Err(Error::NotPositiveDefinite {
                what: "ProcessNoiseModel.W",
            });
        }
        let mut sqrt_vals = eig.eigenvalues;
        for v in sqrt_vals.iter_mut() {
            *v = v.max(T::zero()).sqrt();
        }
        let sqrt = eig.eigenvectors * Matrix3::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
        Ok(ProcessNoiseModel {
            covariance: sym,
            sqrt,
            tau,
        })
    }

    pub fn covariance(&self) -> &Matrix3<T> {
        &self.covariance
    }

    /// Draw one noise sample `w ~ N(0, W)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<T> {
        let n = Vector3::new(std_normal(rng), std_normal(rng), std_normal(rng));
        self.sqrt * n
    }
}

fn std_normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let x: f64 = StandardNormal.sample(rng);
    lit(x)
}

/// Unnormalized sinc with a series fallback near zero.
#[inline]
pub(crate) fn sinc<T: Real>(a: T) -> T {
    if a.abs() < lit(1e-4) {
        let a2 = a * a;
        T::one() - a2 / lit(6.0) + a2 * a2 / lit(120.0)
    } else {
        a.sin() / a
    }
}

/// Derivative of the unnormalized sinc, `(a cos a - sin a) / a^2`, with a
/// 4th-order Taylor series for small arguments to avoid cancellation.
#[inline]
pub(crate) fn sinc_derivative<T: Real>(a: T) -> T {
    if a.abs() < lit(1e-4) {
        let a2 = a * a;
        -a / lit(3.0) + a * a2 / lit(30.0)
    } else {
        (a * a.cos() - a.sin()) / (a * a)
    }
}

/// One step of the differential-drive model with explicit noise `w`.
///
/// The heading is wrapped after the additive update.
pub fn step<T: Real>(
    x: &Pose2<T>,
    u: &ControlInput<T>,
    w: &Vector3<T>,
    model: &ProcessNoiseModel<T>,
) -> Pose2<T> {
    let tau = model.tau;
    let a = u.omega * tau * lit(0.5);
    let s = sinc(a);
    let (sn, c) = (x.heading + a).sin_cos();
    Pose2::new(
        x.position.x + tau * u.v * s * c + w.x,
        x.position.y + tau * u.v * s * sn + w.y,
        wrap_angle(x.heading + tau * u.omega + w.z),
    )
}

/// One step with noise sampled from the model.
pub fn sample_step<T: Real, R: Rng + ?Sized>(
    x: &Pose2<T>,
    u: &ControlInput<T>,
    model: &ProcessNoiseModel<T>,
    rng: &mut R,
) -> Pose2<T> {
    let w = model.sample(rng);
    step(x, u, &w, model)
}

/// Jacobians of the motion model at `(x, u, 0)`:
/// `e = df/dx`, `b = df/du`, `d = df/dw`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionJacobians<T: Real> {
    pub e: Matrix3<T>,
    pub b: Matrix3x2<T>,
    pub d: Matrix3<T>,
}

pub fn jacobians<T: Real>(
    x: &Pose2<T>,
    u: &ControlInput<T>,
    model: &ProcessNoiseModel<T>,
) -> MotionJacobians<T> {
    let tau = model.tau;
    let half = lit::<T>(0.5);
    let a = u.omega * tau * half;
    let s = sinc(a);
    let ds = sinc_derivative(a);
    let (sn, c) = (x.heading + a).sin_cos();

    let mut e = Matrix3::identity();
    e[(0, 2)] = -tau * u.v * s * sn;
    e[(1, 2)] = tau * u.v * s * c;

    // d/domega goes through both sinc(a) and the phase theta + a.
    let da = tau * half;
    let b = Matrix3x2::new(
        tau * s * c,
        tau * u.v * da * (ds * c - s * sn),
        tau * s * sn,
        tau * u.v * da * (ds * sn + s * c),
        T::zero(),
        tau,
    );

    MotionJacobians {
        e,
        b,
        d: Matrix3::identity(),
    }
}
