//! iterative Covariance Regulation: open-loop trajectory optimization.
//!
//! Gradient descent on a multi-step control sequence under deterministic
//! dynamics, minimizing the accumulated trace of the predicted landmark
//! covariance. The gradient is exact, computed by a backward adjoint sweep
//! through the motion and Riccati Jacobians.

use nalgebra::{DVector, Vector2, Vector3};

use crate::covariance::{riccati_jacobians, riccati_step, CovVector};
use crate::error::{Error, Result};
use crate::geometry::Pose2;
use crate::motion::{jacobians, step, ControlBounds, ControlInput, ProcessNoiseModel};
use crate::scalar::{lit, Real};
use crate::sensing::{LandmarkSet, SensorModel};

/// Gradient-descent settings for the open-loop optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct IcrConfig<T: Real> {
    /// Planning horizon K in steps.
    pub horizon: usize,
    /// Number of gradient-descent iterations.
    pub iterations: usize,
    /// Per-channel step sizes, applied as `diag(alpha)` to each control.
    pub alpha: Vector2<T>,
    pub bounds: ControlBounds<T>,
    /// When set, each update halves the step until the cost does not
    /// increase, making the descent monotone.
    pub backtracking: bool,
}

impl<T: Real> IcrConfig<T> {
    pub fn new(
        horizon: usize,
        iterations: usize,
        alpha: Vector2<T>,
        bounds: ControlBounds<T>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("IcrConfig.horizon", "must be at least 1"));
        }
        if alpha.x <= T::zero() || alpha.y <= T::zero() {
            return Err(Error::invalid("IcrConfig.alpha", "must be positive"));
        }
        Ok(IcrConfig {
            horizon,
            iterations,
            alpha,
            bounds,
            backtracking: false,
        })
    }

    pub fn with_backtracking(mut self, on: bool) -> Self {
        self.backtracking = on;
        self
    }
}

/// Nominal open-loop trajectory: states, controls, covariance vectors, and
/// the accumulated trace cost.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoopPlan<T: Real> {
    /// Poses `x_0 .. x_K`.
    pub states: Vec<Pose2<T>>,
    /// Controls `u_0 .. u_{K-1}`.
    pub controls: Vec<ControlInput<T>>,
    /// Covariance vectors `sigma_0 .. sigma_K`.
    pub covariances: Vec<CovVector<T>>,
    pub cost: T,
}

impl<T: Real> OpenLoopPlan<T> {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// Deterministic rollout of a control sequence: `x_{k+1} = f(x_k, u_k, 0)`,
/// `sigma_{k+1} = g(sigma_k, x_{k+1})`.
pub fn rollout<T: Real>(
    x0: &Pose2<T>,
    sigma0: &CovVector<T>,
    controls: &[ControlInput<T>],
    landmarks_hat: &LandmarkSet<T>,
    sensor: &SensorModel<T>,
    model: &ProcessNoiseModel<T>,
) -> OpenLoopPlan<T> {
    let k = controls.len();
    let mut states = Vec::with_capacity(k + 1);
    let mut covariances = Vec::with_capacity(k + 1);
    states.push(*x0);
    covariances.push(sigma0.clone());
    let zero = Vector3::zeros();
    for u in controls {
        let x_next = step(states.last().unwrap(), u, &zero, model);
        let sigma_next = riccati_step(covariances.last().unwrap(), &x_next, landmarks_hat, sensor);
        states.push(x_next);
        covariances.push(sigma_next);
    }
    let mut plan = OpenLoopPlan {
        states,
        controls: controls.to_vec(),
        covariances,
        cost: T::zero(),
    };
    plan.cost = trace_cost(&plan);
    plan
}

/// Total cost `J = sum_k tr(sigma_k)` over every step of the plan,
/// terminal included.
pub fn trace_cost<T: Real>(plan: &OpenLoopPlan<T>) -> T {
    plan.covariances
        .iter()
        .fold(T::zero(), |acc, s| acc + s.trace())
}

/// Gradient of the trace cost at one stage: the pattern `(1, 0, 1)`
/// repeated per landmark block.
pub fn stage_cost_gradient<T: Real>(n_landmarks: usize) -> DVector<T> {
    let mut b = DVector::zeros(3 * n_landmarks);
    for j in 0..n_landmarks {
        b[3 * j] = T::one();
        b[3 * j + 2] = T::one();
    }
    b
}

/// Exact gradient of `trace_cost(rollout(U))` with respect to the stacked
/// control vector `[v_0, omega_0, v_1, ...]`, via a backward adjoint sweep.
///
/// Also reports how many signed-distance kink points were crossed while
/// assembling the Riccati Jacobians.
pub fn gradient<T: Real>(
    controls: &[ControlInput<T>],
    x0: &Pose2<T>,
    sigma0: &CovVector<T>,
    landmarks_hat: &LandmarkSet<T>,
    sensor: &SensorModel<T>,
    model: &ProcessNoiseModel<T>,
) -> (DVector<T>, usize) {
    let plan = rollout(x0, sigma0, controls, landmarks_hat, sensor, model);
    gradient_of_plan(&plan, landmarks_hat, sensor, model)
}

fn gradient_of_plan<T: Real>(
    plan: &OpenLoopPlan<T>,
    landmarks_hat: &LandmarkSet<T>,
    sensor: &SensorModel<T>,
    model: &ProcessNoiseModel<T>,
) -> (DVector<T>, usize) {
    let k_max = plan.horizon();
    let n_l = landmarks_hat.len();
    let mut grad = DVector::zeros(2 * k_max);
    let mut kink_events = 0;

    // Adjoint of sigma_k, stored per block; starts at the terminal stage
    // gradient d tr(sigma_K) / d sigma_K.
    let mut a_sigma: Vec<Vector3<T>> = (0..n_l)
        .map(|_| Vector3::new(T::one(), T::zero(), T::one()))
        .collect();
    // Adjoint of x_{k+1} from all later steps.
    let mut a_x_next: Option<Vector3<T>> = None;

    for k in (0..k_max).rev() {
        // sigma_{k+1} = g(sigma_k, x_{k+1}).
        let jac = riccati_jacobians(
            &plan.covariances[k],
            &plan.states[k + 1],
            landmarks_hat,
            sensor,
        );
        kink_events += jac.kink_events;

        // dJ/dx_{k+1} accumulates the covariance branch and, except at the
        // terminal step, the motion branch E_{k+1}' a_x.
        let mut a_x = Vector3::zeros();
        for (j, adj) in a_sigma.iter().enumerate() {
            a_x += jac.g_blocks[j].transpose() * adj;
        }
        if let Some(ref next) = a_x_next {
            let mj = jacobians(&plan.states[k + 1], &plan.controls[k + 1], model);
            a_x += mj.e.transpose() * next;
        }

        let mj = jacobians(&plan.states[k], &plan.controls[k], model);
        let du = mj.b.transpose() * a_x;
        grad[2 * k] = du.x;
        grad[2 * k + 1] = du.y;

        // Adjoint of sigma_k: stage gradient plus F' a_sigma.
        for (j, adj) in a_sigma.iter_mut().enumerate() {
            *adj = Vector3::new(T::one(), T::zero(), T::one()) + jac.f_blocks[j].transpose() * *adj;
        }
        a_x_next = Some(a_x);
    }
    (grad, kink_events)
}

/// Fixed-step (or backtracking) gradient descent on the control sequence,
/// starting from `u_init` and clamping to the control bounds after every
/// update. Returns the rollout of the final sequence.
pub fn optimize<T: Real>(
    x0: &Pose2<T>,
    sigma0: &CovVector<T>,
    u_init: &[ControlInput<T>],
    cfg: &IcrConfig<T>,
    landmarks_hat: &LandmarkSet<T>,
    sensor: &SensorModel<T>,
    model: &ProcessNoiseModel<T>,
) -> OpenLoopPlan<T> {
    assert_eq!(u_init.len(), cfg.horizon, "control sequence length != horizon");
    let mut controls: Vec<ControlInput<T>> =
        u_init.iter().map(|u| cfg.bounds.clamp(u)).collect();
    let mut current = rollout(x0, sigma0, &controls, landmarks_hat, sensor, model);

    for _ in 0..cfg.iterations {
        let (grad, _) = gradient_of_plan(&current, landmarks_hat, sensor, model);
        let mut scale = T::one();
        let mut accepted = false;
        // A fixed-step update accepts the first candidate unconditionally;
        // backtracking halves the step until the cost stops increasing.
        let max_halvings = if cfg.backtracking { 40 } else { 1 };
        for _ in 0..max_halvings {
            let candidate: Vec<ControlInput<T>> = controls
                .iter()
                .enumerate()
                .map(|(k, u)| {
                    cfg.bounds.clamp(&ControlInput::new(
                        u.v - scale * cfg.alpha.x * grad[2 * k],
                        u.omega - scale * cfg.alpha.y * grad[2 * k + 1],
                    ))
                })
                .collect();
            let plan = rollout(x0, sigma0, &candidate, landmarks_hat, sensor, model);
            if !cfg.backtracking || plan.cost <= current.cost {
                controls = candidate;
                current = plan;
                accepted = true;
                break;
            }
            scale *= lit(0.5);
        }
        if !accepted {
            // Backtracking exhausted: the iterate is already a local
            // minimizer up to the step resolution.
            break;
        }
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::unvecbl;
    use crate::geometry::FovPolygon;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix2, Matrix3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_sensor() -> SensorModel<f64> {
        let half_width = 20.0 * 60f64.to_radians().tan();
        let fov = FovPolygon::new(vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(20.0, -half_width),
            Vector2::new(20.0, half_width),
        ])
        .unwrap();
        SensorModel::new(Matrix2::from_diagonal(&Vector2::new(0.1, 0.1)), 10.0, fov).unwrap()
    }

    fn default_model() -> ProcessNoiseModel<f64> {
        ProcessNoiseModel::new(
            Matrix3::from_diagonal(&Vector3::new(0.1, 0.1, 0.01)),
            1.0,
        )
        .unwrap()
    }

    fn default_config(horizon: usize, iterations: usize) -> IcrConfig<f64> {
        IcrConfig::new(
            horizon,
            iterations,
            Vector2::new(0.005, 0.0005),
            ControlBounds::new(3.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn rollout_far_from_landmarks_keeps_covariance() {
        let sensor = default_sensor();
        let model = default_model();
        let landmarks = LandmarkSet::new(vec![Vector2::new(1.0e5, 1.0e5)]).unwrap();
        let sigma0 = CovVector::isotropic(1, 25.0).unwrap();
        let plan = rollout(
            &Pose2::new(0.0, 0.0, 0.0),
            &sigma0,
            &[ControlInput::new(0.0, 0.0)],
            &landmarks,
            &sensor,
            &model,
        );
        // The visibility clamp floor leaks an information term of order
        // 1e-12 * sigma^2 / Gamma into the update.
        assert_relative_eq!(
            plan.covariances[1].block(0),
            sigma0.block(0),
            epsilon = 1e-6
        );
    }

    #[test]
    fn rollout_with_visible_landmark_reduces_trace() {
        let sensor = default_sensor();
        let model = default_model();
        let landmarks = LandmarkSet::new(vec![Vector2::new(8.0, 0.0)]).unwrap();
        let sigma0 = CovVector::isotropic(1, 25.0).unwrap();
        let plan = rollout(
            &Pose2::new(0.0, 0.0, 0.0),
            &sigma0,
            &[ControlInput::new(0.5, 0.0), ControlInput::new(0.5, 0.0)],
            &landmarks,
            &sensor,
            &model,
        );
        assert!(plan.covariances[2].trace() < sigma0.trace());
    }

    #[test]
    fn rollout_is_deterministic() {
        let sensor = default_sensor();
        let model = default_model();
        let landmarks = LandmarkSet::new(vec![Vector2::new(8.0, 2.0)]).unwrap();
        let sigma0 = CovVector::isotropic(1, 10.0).unwrap();
        let controls = [ControlInput::new(1.0, 0.2), ControlInput::new(2.0, -0.1)];
        let a = rollout(&Pose2::new(0.0, 0.0, 0.0), &sigma0, &controls, &landmarks, &sensor, &model);
        let b = rollout(&Pose2::new(0.0, 0.0, 0.0), &sigma0, &controls, &landmarks, &sensor, &model);
        assert_eq!(a, b);
    }

    #[test]
    fn trace_cost_examples() {
        let sigma = CovVector::new(vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let plan = OpenLoopPlan {
            states: vec![Pose2::new(0.0, 0.0, 0.0); 3],
            controls: vec![ControlInput::new(0.0, 0.0); 2],
            covariances: vec![sigma.clone(), sigma.clone(), sigma],
            cost: 0.0,
        };
        assert_relative_eq!(trace_cost(&plan), 12.0);

        // Single identity block at one step contributes 2.
        let single = OpenLoopPlan {
            states: vec![Pose2::new(0.0, 0.0, 0.0)],
            controls: vec![],
            covariances: vec![CovVector::isotropic(1, 1.0).unwrap()],
            cost: 0.0,
        };
        assert_relative_eq!(trace_cost(&single), 2.0);
    }

    #[test]
    fn trace_cost_matches_matrix_trace_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut covs = Vec::new();
        for _ in 0..4 {
            let mut data = Vec::new();
            for _ in 0..3 {
                let s1: f64 = rng.random_range(0.1..10.0);
                let s3: f64 = rng.random_range(0.1..10.0);
                data.extend_from_slice(&[s1, 0.3 * (s1 * s3).sqrt(), s3]);
            }
            covs.push(CovVector::new(data).unwrap());
        }
        let plan = OpenLoopPlan {
            states: vec![Pose2::new(0.0, 0.0, 0.0); 4],
            controls: vec![ControlInput::new(0.0, 0.0); 3],
            covariances: covs.clone(),
            cost: 0.0,
        };
        let oracle: f64 = covs
            .iter()
            .map(|s| {
                unvecbl(s)
                    .blocks()
                    .iter()
                    .map(|b| b.trace())
                    .sum::<f64>()
            })
            .sum();
        assert_relative_eq!(trace_cost(&plan), oracle, epsilon = 1e-12);
    }

    #[test]
    fn gradient_vanishes_far_from_landmarks() {
        let sensor = default_sensor();
        let model = default_model();
        let landmarks = LandmarkSet::new(vec![Vector2::new(1.0e5, -1.0e5)]).unwrap();
        let sigma0 = CovVector::isotropic(1, 25.0).unwrap();
        let controls = vec![ControlInput::new(1.0, 0.1); 3];
        let (grad, _) = gradient(
            &controls,
            &Pose2::new(0.0, 0.0, 0.0),
            &sigma0,
            &landmarks,
            &sensor,
            &model,
        );
        assert!(grad.abs().max() <= 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let sensor = default_sensor();
        let model = default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let h = 1e-6;
        for _ in 0..20 {
            let landmarks = LandmarkSet::new(vec![
                Vector2::new(rng.random_range(2.0..25.0), rng.random_range(-15.0..15.0)),
                Vector2::new(rng.random_range(2.0..25.0), rng.random_range(-15.0..15.0)),
            ])
            .unwrap();
            let sigma0 = CovVector::isotropic(2, rng.random_range(5.0..30.0)).unwrap();
            let x0 = Pose2::new(0.0, 0.0, rng.random_range(-0.5..0.5));
            let controls: Vec<ControlInput<f64>> = (0..3)
                .map(|_| {
                    ControlInput::new(rng.random_range(0.0..2.0), rng.random_range(-0.8..0.8))
                })
                .collect();
            let (grad, kinks) = gradient(&controls, &x0, &sigma0, &landmarks, &sensor, &model);
            if kinks > 0 {
                continue;
            }
            let cost_of = |u: &[ControlInput<f64>]| {
                rollout(&x0, &sigma0, u, &landmarks, &sensor, &model).cost
            };
            let mut fd = DVector::zeros(grad.len());
            for i in 0..grad.len() {
                let mut up = controls.clone();
                let mut dn = controls.clone();
                if i % 2 == 0 {
                    up[i / 2].v += h;
                    dn[i / 2].v -= h;
                } else {
                    up[i / 2].omega += h;
                    dn[i / 2].omega -= h;
                }
                fd[i] = (cost_of(&up) - cost_of(&dn)) / (2.0 * h);
            }
            let scale = fd.abs().max().max(1e-6);
            assert!(
                (grad.clone() - fd).abs().max() <= 1e-4 * scale,
                "gradient mismatch"
            );
        }
    }

    #[test]
    fn optimize_zero_iterations_is_identity() {
        let sensor = default_sensor();
        let model = default_model();
        let landmarks = LandmarkSet::new(vec![Vector2::new(8.0, 2.0)]).unwrap();
        let sigma0 = CovVector::isotropic(1, 10.0).unwrap();
        let cfg = default_config(2, 0);
        let u0 = vec![ControlInput::new(1.0, 0.2), ControlInput::new(0.5, -0.3)];
        let plan = optimize(
            &Pose2::new(0.0, 0.0, 0.0),
            &sigma0,
            &u0,
            &cfg,
            &landmarks,
            &sensor,
            &model,
        );
        assert_eq!(plan.controls, u0);
    }

    #[test]
    fn optimize_backtracking_never_increases_cost() {
        let sensor = default_sensor();
        let model = default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let landmarks = LandmarkSet::new(vec![
                Vector2::new(rng.random_range(3.0..25.0), rng.random_range(-10.0..10.0)),
                Vector2::new(rng.random_range(3.0..25.0), rng.random_range(-10.0..10.0)),
            ])
            .unwrap();
            let sigma0 = CovVector::isotropic(2, 25.0).unwrap();
            let cfg = default_config(4, 10).with_backtracking(true);
            let x0 = Pose2::new(0.0, 0.0, 0.0);
            let u0 = vec![ControlInput::new(0.0, 0.0); 4];
            let initial = rollout(&x0, &sigma0, &u0, &landmarks, &sensor, &model);
            let plan = optimize(&x0, &sigma0, &u0, &cfg, &landmarks, &sensor, &model);
            assert!(plan.cost <= initial.cost + 1e-12);
        }
    }

    #[test]
    fn optimize_paper_defaults_reduce_cost_on_most_seeds() {
        let sensor = default_sensor();
        let model = default_model();
        let mut improved = 0;
        let total = 20;
        for seed in 0..total {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let landmarks = LandmarkSet::new(
                (0..3)
                    .map(|_| {
                        Vector2::new(
                            rng.random_range(-30.0..30.0),
                            rng.random_range(-30.0..30.0),
                        )
                    })
                    .collect(),
            )
            .unwrap();
            let sigma0 = CovVector::isotropic(3, 25.0).unwrap();
            let cfg = default_config(5, 10);
            let x0 = Pose2::new(0.0, 0.0, 0.0);
            let u0 = vec![ControlInput::new(0.0, 0.0); 5];
            let initial = rollout(&x0, &sigma0, &u0, &landmarks, &sensor, &model);
            let plan = optimize(&x0, &sigma0, &u0, &cfg, &landmarks, &sensor, &model);
            if plan.cost < initial.cost - 1e-12 {
                improved += 1;
            }
        }
        assert!(
            improved * 10 >= total * 9,
            "cost decreased on only {improved}/{total} seeds"
        );
    }
}
