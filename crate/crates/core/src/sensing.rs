//! Relative-position sensing with a differentiable field of view.
//!
//! A landmark at `y` is seen in robot body-frame coordinates
//! `q = R'(theta) (y - p)`. Hard visibility is membership of `q` in the
//! field-of-view polygon; the differentiable model replaces it with the
//! smooth amplification factor `1 - Phi(d(q, F))`, where `d` is the signed
//! distance to the polygon and `Phi(x) = (1 + erf(x / (sqrt(2) kappa) - 2)) / 2`.
//! The sensor information matrix of one landmark is
//! `M = (1 - Phi(d)) R(theta) Gamma^-1 R'(theta)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{rotation_matrix, rotation_matrix_derivative, FovPolygon, Pose2};
use crate::scalar::{lit, to_f64, Real};

/// Lower clamp on the visibility factor. Keeps the amplified noise
/// covariance `(1 - Phi)^-1 Gamma` finite far outside the field of view.
pub const VISIBILITY_FLOOR: f64 = 1e-12;

/// Measurement noise, field of view, and the smoothness parameter `kappa`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorModel<T: Real> {
    gamma: Matrix2<T>,
    gamma_inv: Matrix2<T>,
    gamma_sqrt: Matrix2<T>,
    pub kappa: T,
    pub fov: FovPolygon<T>,
}

impl<T: Real> SensorModel<T> {
    pub fn new(gamma: Matrix2<T>, kappa: T, fov: FovPolygon<T>) -> Result<Self> {
        if kappa <= T::zero() {
            return Err(Error::invalid("SensorModel.kappa", "must be positive"));
        }
        if (gamma - gamma.transpose()).abs().max() > lit(1e-12) {
            return Err(Error::invalid("SensorModel.gamma", "must be symmetric"));
        }
        let chol = gamma
            .cholesky()
            .ok_or(Error::NotPositiveDefinite {
                what: "SensorModel.gamma",
            })?;
        let gamma_inv = chol.inverse();
        let gamma_sqrt = chol.l();
        Ok(SensorModel {
            gamma,
            gamma_inv,
            gamma_sqrt,
            kappa,
            fov,
        })
    }

    pub fn gamma(&self) -> &Matrix2<T> {
        &self.gamma
    }

    pub fn gamma_inv(&self) -> &Matrix2<T> {
        &self.gamma_inv
    }
}

/// Point landmarks in the world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet<T: Real> {
    positions: Vec<Vector2<T>>,
}

impl<T: Real> LandmarkSet<T> {
    pub fn new(positions: Vec<Vector2<T>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("LandmarkSet", "need at least one landmark"));
        }
        if positions.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::invalid("LandmarkSet", "non-finite landmark position"));
        }
        Ok(LandmarkSet { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector2<T>] {
        &self.positions
    }

    pub fn position(&self, j: usize) -> &Vector2<T> {
        &self.positions[j]
    }
}

/// Body-frame coordinates of a world point: `q = R'(theta) (y - p)`.
#[inline]
pub fn body_frame_coords<T: Real>(x: &Pose2<T>, y: &Vector2<T>) -> Vector2<T> {
    x.rotation().transpose() * (y - x.position)
}

/// Jacobian of the body-frame coordinates with respect to the robot state,
/// `dq/dx = R''(theta) (y - p) e3' - R'(theta) Q` with `Q = [I2 0]`.
pub fn body_frame_jacobian<T: Real>(x: &Pose2<T>, y: &Vector2<T>) -> Matrix2x3<T> {
    let rt = x.rotation().transpose();
    let dcol = rotation_matrix_derivative(x.heading).transpose() * (y - x.position);
    Matrix2x3::new(
        -rt[(0, 0)],
        -rt[(0, 1)],
        dcol.x,
        -rt[(1, 0)],
        -rt[(1, 1)],
        dcol.y,
    )
}

/// The shifted Gaussian CDF `Phi(x) = (1 + erf(x / (sqrt(2) kappa) - 2)) / 2`.
fn phi<T: Real>(d: T, kappa: T) -> T {
    let t = to_f64(d) / (std::f64::consts::SQRT_2 * to_f64(kappa)) - 2.0;
    lit(0.5 * (1.0 + libm::erf(t)))
}

/// Derivative of `phi` with respect to the signed distance.
fn phi_derivative<T: Real>(d: T, kappa: T) -> T {
    let t = d / (T::sqrt(lit(2.0)) * kappa) - lit(2.0);
    (-t * t).exp() / ((T::two_pi()).sqrt() * kappa)
}

/// Smooth visibility factor `1 - Phi(d(q, F))`, clamped below at
/// [`VISIBILITY_FLOOR`].
pub fn visibility_factor<T: Real>(q: &Vector2<T>, sensor: &SensorModel<T>) -> T {
    let d = sensor.fov.signed_distance(q);
    (T::one() - phi(d, sensor.kappa)).max(lit(VISIBILITY_FLOOR))
}

/// Indices of the landmarks whose body-frame coordinates lie in the field of
/// view (boundary included).
pub fn visible_set<T: Real>(
    x: &Pose2<T>,
    landmarks: &LandmarkSet<T>,
    sensor: &SensorModel<T>,
) -> Vec<usize> {
    landmarks
        .positions()
        .iter()
        .enumerate()
        .filter(|(_, y)| sensor.fov.signed_distance(&body_frame_coords(x, y)) <= T::zero())
        .map(|(j, _)| j)
        .collect()
}

/// Noisy body-frame measurements of every landmark in the hard field of
/// view: `z = q + Gamma^(1/2) v`, `v ~ N(0, I)`.
pub fn sample_measurements<T: Real, R: Rng + ?Sized>(
    x_true: &Pose2<T>,
    landmarks: &LandmarkSet<T>,
    sensor: &SensorModel<T>,
    rng: &mut R,
) -> Vec<(usize, Vector2<T>)> {
    visible_set(x_true, landmarks, sensor)
        .into_iter()
        .map(|j| {
            let q = body_frame_coords(x_true, landmarks.position(j));
            let n1: f64 = StandardNormal.sample(rng);
            let n2: f64 = StandardNormal.sample(rng);
            let v = Vector2::new(lit::<T>(n1), lit::<T>(n2));
            (j, q + sensor.gamma_sqrt * v)
        })
        .collect()
}

/// Sensor information matrix block of one landmark,
/// `M = (1 - Phi(d(q))) R(theta) Gamma^-1 R'(theta)`.
pub fn info_block<T: Real>(
    x: &Pose2<T>,
    y_hat: &Vector2<T>,
    sensor: &SensorModel<T>,
) -> Matrix2<T> {
    let q = body_frame_coords(x, y_hat);
    let r = rotation_matrix(x.heading);
    let core = r * sensor.gamma_inv * r.transpose();
    core * visibility_factor(&q, sensor)
}

/// The information block as the vector `(M11, M12, M22)`.
pub fn info_vector<T: Real>(
    x: &Pose2<T>,
    y_hat: &Vector2<T>,
    sensor: &SensorModel<T>,
) -> Vector3<T> {
    let m = info_block(x, y_hat, sensor);
    Vector3::new(m[(0, 0)], m[(0, 1)], m[(1, 1)])
}

/// Gradient of the information block with respect to the robot state.
#[derive(Clone, Debug)]
pub struct InfoBlockGradient<T: Real> {
    /// `dM/dx1`, `dM/dx2`, `dM/dtheta`.
    pub wrt_state: [Matrix2<T>; 3],
    /// Set when the evaluation point hit a non-differentiable point of the
    /// signed distance; the gradient is then the one-sided nearest-edge
    /// branch.
    pub at_kink: bool,
}

/// Analytic gradient of [`info_block`] combining the `Phi' grad(d) dq/dx`
/// term with the `(1 - Phi) (R' G R' + transpose)` heading term.
pub fn info_block_gradient<T: Real>(
    x: &Pose2<T>,
    y_hat: &Vector2<T>,
    sensor: &SensorModel<T>,
) -> InfoBlockGradient<T> {
    let q = body_frame_coords(x, y_hat);
    let d = sensor.fov.signed_distance(&q);
    let vis_raw = T::one() - phi(d, sensor.kappa);
    if vis_raw <= lit(VISIBILITY_FLOOR) {
        // Inside the clamp region the factor is constant.
        return InfoBlockGradient {
            wrt_state: [Matrix2::zeros(), Matrix2::zeros(), Matrix2::zeros()],
            at_kink: false,
        };
    }
    let (grad_d, at_kink) = sensor.fov.signed_distance_gradient(&q);
    let dq_dx = body_frame_jacobian(x, y_hat);
    // Row vector dd/dx = grad_d' dq/dx.
    let dd_dx = dq_dx.transpose() * grad_d;

    let r = rotation_matrix(x.heading);
    let rp = rotation_matrix_derivative(x.heading);
    let core = r * sensor.gamma_inv * r.transpose();
    let half = rp * sensor.gamma_inv * r.transpose();
    let dcore_dtheta = half + half.transpose();

    let phi_d = phi_derivative(d, sensor.kappa);
    let mut wrt_state = [Matrix2::zeros(), Matrix2::zeros(), Matrix2::zeros()];
    for (l, out) in wrt_state.iter_mut().enumerate() {
        *out = core * (-phi_d * dd_dx[l]);
        if l == 2 {
            *out += dcore_dtheta * vis_raw;
        }
    }
    InfoBlockGradient { wrt_state, at_kink }
}

/// Gradient of [`info_vector`] with respect to the robot state: rows are
/// `dm1/dx`, `dm2/dx`, `dm3/dx`.
pub fn info_vector_gradient<T: Real>(
    x: &Pose2<T>,
    y_hat: &Vector2<T>,
    sensor: &SensorModel<T>,
) -> (Matrix3<T>, bool) {
    let g = info_block_gradient(x, y_hat, sensor);
    let mut out = Matrix3::zeros();
    for l in 0..3 {
        out[(0, l)] = g.wrt_state[l][(0, 0)];
        out[(1, l)] = g.wrt_state[l][(0, 1)];
        out[(2, l)] = g.wrt_state[l][(1, 1)];
    }
    (out, g.at_kink)
}
