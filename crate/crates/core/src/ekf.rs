//! Joint EKF over robot pose and landmark positions.
//!
//! The belief state stacks `[x, y, theta, l1_x, l1_y, ...]`. Out-of-view
//! landmarks receive the predicted measurement through
//! [`reconstruct_measurement`], so their innovation is exactly zero, and the
//! amplified noise of the differentiable field of view suppresses their
//! Kalman gain.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};

use crate::covariance::CovVector;
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2};
use crate::motion::{jacobians, step, ControlInput, ProcessNoiseModel};
use crate::scalar::{lit, to_f64, Real};
use crate::sensing::{
    body_frame_coords, body_frame_jacobian, visibility_factor, SensorModel, VISIBILITY_FLOOR,
};

/// Gaussian joint belief over robot pose and all landmark positions.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBelief<T: Real> {
    /// `[x, y, theta, l1_x, l1_y, ..., ln_x, ln_y]`.
    pub mean: DVector<T>,
    /// `(3 + 2 n_l) x (3 + 2 n_l)`, kept symmetric PSD.
    pub cov: DMatrix<T>,
    n_landmarks: usize,
}

impl<T: Real> JointBelief<T> {
    pub fn new(mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        let n = mean.len();
        if n < 5 || (n - 3) % 2 != 0 {
            return Err(Error::invalid(
                "JointBelief.mean",
                format!("dimension {n} is not 3 + 2 n_l"),
            ));
        }
        if cov.shape() != (n, n) {
            return Err(Error::invalid("JointBelief.cov", "dimension mismatch"));
        }
        if (&cov - cov.transpose()).abs().max() > lit::<T>(1e-10) * T::one().max(cov.abs().max()) {
            return Err(Error::invalid("JointBelief.cov", "not symmetric"));
        }
        let mut belief = JointBelief {
            mean,
            cov,
            n_landmarks: (n - 3) / 2,
        };
        belief.enforce_psd();
        Ok(belief)
    }

    pub fn n_landmarks(&self) -> usize {
        self.n_landmarks
    }

    pub fn robot_pose(&self) -> Pose2<T> {
        Pose2::new(self.mean[0], self.mean[1], self.mean[2])
    }

    pub fn landmark(&self, j: usize) -> Vector2<T> {
        Vector2::new(self.mean[3 + 2 * j], self.mean[4 + 2 * j])
    }

    pub fn landmark_means(&self) -> Vec<Vector2<T>> {
        (0..self.n_landmarks).map(|j| self.landmark(j)).collect()
    }

    pub fn robot_cov(&self) -> Matrix3<T> {
        let mut out = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                out[(i, j)] = self.cov[(i, j)];
            }
        }
        out
    }

    pub fn landmark_cov(&self, j: usize) -> Matrix2<T> {
        let at = 3 + 2 * j;
        Matrix2::new(
            self.cov[(at, at)],
            self.cov[(at, at + 1)],
            self.cov[(at + 1, at)],
            self.cov[(at + 1, at + 1)],
        )
    }

    /// Planner-facing extraction: the per-landmark diagonal blocks as a
    /// covariance vector, cross-correlations discarded. Blocks are floored
    /// to stay strictly positive definite after PSD clipping.
    pub fn landmark_cov_vector(&self) -> CovVector<T> {
        let floor = lit::<T>(1e-9);
        let mut data = Vec::with_capacity(3 * self.n_landmarks);
        for j in 0..self.n_landmarks {
            let b = self.landmark_cov(j);
            let mut s1 = b[(0, 0)].max(floor);
            let mut s3 = b[(1, 1)].max(floor);
            let mut s2 = b[(0, 1)];
            let det = s1 * s3 - s2 * s2;
            if det <= T::zero() {
                // Shrink the correlation until the block is PD again.
                let limit = (s1 * s3).sqrt() * lit::<T>(0.999);
                s2 = s2.clamp(-limit, limit);
                s1 += floor;
                s3 += floor;
            }
            data.extend_from_slice(&[s1, s2, s3]);
        }
        CovVector::new(data).expect("floored blocks are positive definite")
    }

    /// Symmetrize and clip negative eigenvalues to zero. Returns the most
    /// negative eigenvalue seen before clipping.
    fn enforce_psd(&mut self) -> T {
        self.cov = (&self.cov + self.cov.transpose()) * lit::<T>(0.5);
        let eig = self.cov.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        if min_eig < T::zero() {
            let mut vals = eig.eigenvalues;
            for v in vals.iter_mut() {
                *v = v.max(T::zero());
            }
            let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&vals);
            self.cov = scaled * eig.eigenvectors.transpose();
            self.cov = (&self.cov + self.cov.transpose()) * lit::<T>(0.5);
        }
        min_eig
    }
}

/// EKF prediction: the robot mean moves by the noiseless motion model, the
/// covariance by the joint Jacobian `blockdiag(E, I)` plus
/// `blockdiag(W, 0)`.
pub fn predict<T: Real>(
    belief: &JointBelief<T>,
    u: &ControlInput<T>,
    model: &ProcessNoiseModel<T>,
) -> JointBelief<T> {
    let n = belief.mean.len();
    let pose = belief.robot_pose();
    let next = step(&pose, u, &nalgebra::Vector3::zeros(), model);

    let mut mean = belief.mean.clone();
    mean[0] = next.position.x;
    mean[1] = next.position.y;
    mean[2] = next.heading;

    let jac = jacobians(&pose, u, model);
    let mut f = DMatrix::identity(n, n);
    f.view_mut((0, 0), (3, 3)).copy_from(&jac.e);
    let mut cov = &f * &belief.cov * f.transpose();
    let w = model.covariance();
    for i in 0..3 {
        for j in 0..3 {
            cov[(i, j)] += w[(i, j)];
        }
    }

    let mut out = JointBelief {
        mean,
        cov,
        n_landmarks: belief.n_landmarks,
    };
    out.enforce_psd();
    out
}

/// Full-stack measurement vector plus the mask of landmarks that were
/// actually measured.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructedMeasurement<T: Real> {
    /// `2 n_l` stacked body-frame measurements.
    pub z: DVector<T>,
    /// `measured[j]` is set when landmark `j` appeared in the raw data.
    pub measured: Vec<bool>,
}

/// Build the full measurement vector from the raw in-view measurements:
/// out-of-view landmarks get the predicted body-frame coordinates at the
/// prior mean, so their innovation is exactly zero.
pub fn reconstruct_measurement<T: Real>(
    belief_prior: &JointBelief<T>,
    raw: &[(usize, Vector2<T>)],
    _sensor: &SensorModel<T>,
) -> ReconstructedMeasurement<T> {
    let n_l = belief_prior.n_landmarks;
    let pose = belief_prior.robot_pose();
    let mut z = DVector::zeros(2 * n_l);
    let mut measured = vec![false; n_l];
    for j in 0..n_l {
        let q = body_frame_coords(&pose, &belief_prior.landmark(j));
        z[2 * j] = q.x;
        z[2 * j + 1] = q.y;
    }
    for (j, meas) in raw {
        z[2 * j] = meas.x;
        z[2 * j + 1] = meas.y;
        measured[*j] = true;
    }
    ReconstructedMeasurement { z, measured }
}

/// EKF update with the stacked measurement function.
///
/// The Jacobian rows of landmark `j` are `[dq/dx | 0 .. R'(theta) .. 0]`;
/// the noise is `blockdiag(V_j)` with `V_j = Gamma / visibility_factor`
/// evaluated at the prior mean for measured landmarks and
/// `Gamma / VISIBILITY_FLOOR` for unseen ones, so that unseen landmarks
/// carry zero innovation and a vanishing gain. The covariance is propagated
/// in Joseph form and then symmetrized and PSD-clipped.
pub fn update<T: Real>(
    belief_prior: &JointBelief<T>,
    recon: &ReconstructedMeasurement<T>,
    sensor: &SensorModel<T>,
) -> Result<JointBelief<T>> {
    let n_l = belief_prior.n_landmarks;
    let n = belief_prior.mean.len();
    let z = &recon.z;
    assert_eq!(z.len(), 2 * n_l, "measurement dimension mismatch");
    assert_eq!(recon.measured.len(), n_l, "visibility mask length mismatch");
    let pose = belief_prior.robot_pose();
    let rt = pose.rotation().transpose();

    let mut h = DMatrix::zeros(2 * n_l, n);
    let mut v = DMatrix::zeros(2 * n_l, 2 * n_l);
    let mut innovation = DVector::zeros(2 * n_l);
    for j in 0..n_l {
        let y = belief_prior.landmark(j);
        let q = body_frame_coords(&pose, &y);
        let row = 2 * j;
        h.view_mut((row, 0), (2, 3))
            .copy_from(&body_frame_jacobian(&pose, &y));
        h.view_mut((row, 3 + 2 * j), (2, 2)).copy_from(&rt);
        let factor = if recon.measured[j] {
            visibility_factor(&q, sensor)
        } else {
            lit(VISIBILITY_FLOOR)
        };
        let noise = sensor.gamma() * (T::one() / factor);
        v.view_mut((row, row), (2, 2)).copy_from(&noise);
        innovation[row] = z[row] - q.x;
        innovation[row + 1] = z[row + 1] - q.y;
    }

    let s = &h * &belief_prior.cov * h.transpose() + &v;
    let chol = s.clone().cholesky().ok_or_else(|| Error::SingularInnovation {
        detail: format!(
            "dim {} with min diagonal {:e}",
            2 * n_l,
            to_f64(s.diagonal().min())
        ),
    })?;
    // K = Sigma H' S^-1 via the factorization: solve S X = H Sigma.
    let gain = chol.solve(&(&h * &belief_prior.cov)).transpose();

    let mut mean = &belief_prior.mean + &gain * innovation;
    mean[2] = wrap_angle(mean[2]);

    // Joseph form: (I - K H) Sigma (I - K H)' + K V K'.
    let ikh = DMatrix::identity(n, n) - &gain * &h;
    let cov = &ikh * &belief_prior.cov * ikh.transpose() + &gain * &v * gain.transpose();

    let mut out = JointBelief {
        mean,
        cov,
        n_landmarks: n_l,
    };
    out.enforce_psd();
    Ok(out)
}

/// Gaussian differential entropies of the belief marginals:
/// `0.5 ln((2 pi e)^n det(Sigma))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Entropies<T: Real> {
    pub robot: T,
    pub landmarks: Vec<T>,
    pub joint: T,
}

impl<T: Real> Entropies<T> {
    pub fn landmark_average(&self) -> T {
        let n = lit::<T>(self.landmarks.len() as f64);
        self.landmarks.iter().fold(T::zero(), |a, e| a + *e) / n
    }
}

fn gaussian_entropy<T: Real>(dim: usize, det: T) -> T {
    if det <= T::zero() {
        return lit(f64::NEG_INFINITY);
    }
    let two_pi_e = T::two_pi() * T::e();
    (two_pi_e.powi(dim as i32) * det).ln() * lit(0.5)
}

pub fn entropies<T: Real>(belief: &JointBelief<T>) -> Entropies<T> {
    let robot = gaussian_entropy(3, belief.robot_cov().determinant());
    let landmarks = (0..belief.n_landmarks)
        .map(|j| gaussian_entropy(2, belief.landmark_cov(j).determinant()))
        .collect();
    let joint = gaussian_entropy(belief.mean.len(), belief.cov.determinant());
    Entropies {
        robot,
        landmarks,
        joint,
    }
}
