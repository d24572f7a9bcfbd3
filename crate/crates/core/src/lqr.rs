//! Affine time-varying LQR over the linearized robot + covariance dynamics.
//!
//! The error state `s = (x - x_nom, sigma - sigma_nom)` evolves as
//! `s' = A s + B u + D w` with
//!
//! ```text
//! A = [E   0]      B = [B ]      D = [D ]
//!     [G E F]          [G B]         [G D]
//! ```
//!
//! and the cost carries a linear term `b' s` from the first-order expansion
//! of the trace objective. The optimal policy is affine,
//! `u_k = L_k s_k + eps_k`, obtained by extended Riccati recursions on
//! `(P, d, delta)` with value function `V_k(s) = s' P_k s + d_k' s + delta_k`.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};

use crate::covariance::{riccati_jacobians, CovVector};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2};
use crate::icr::{stage_cost_gradient, OpenLoopPlan};
use crate::motion::{jacobians, ControlBounds, ControlInput, ProcessNoiseModel};
use crate::scalar::{lit, Real};
use crate::sensing::{LandmarkSet, SensorModel};

/// Per-step matrices of the linearized augmented system.
#[derive(Clone, Debug)]
pub struct AugmentedStep<T: Real> {
    /// `n_s x n_s` state transition.
    pub a: DMatrix<T>,
    /// `n_s x 2` control input map.
    pub b: DMatrix<T>,
    /// `n_s x 3` process noise map.
    pub d: DMatrix<T>,
}

/// Linearization of the joint dynamics around a nominal plan.
#[derive(Clone, Debug)]
pub struct AugmentedLinearization<T: Real> {
    pub steps: Vec<AugmentedStep<T>>,
    /// Augmented state dimension `3 + 3 n_l`.
    pub n_s: usize,
    /// Signed-distance kink events hit while assembling the Riccati
    /// Jacobians.
    pub kink_events: usize,
}

/// Linearize the joint robot + covariance dynamics around the nominal
/// trajectory: `E, B, D` at `(x_k, u_k, 0)` and `F, G` at
/// `(sigma_k, x_{k+1})`.
pub fn linearize<T: Real>(
    plan: &OpenLoopPlan<T>,
    landmarks_hat: &LandmarkSet<T>,
    sensor: &SensorModel<T>,
    model: &ProcessNoiseModel<T>,
) -> AugmentedLinearization<T> {
    let horizon = plan.horizon();
    let n_l = landmarks_hat.len();
    let n_s = 3 + 3 * n_l;
    let mut steps = Vec::with_capacity(horizon);
    let mut kink_events = 0;

    for k in 0..horizon {
        let mj = jacobians(&plan.states[k], &plan.controls[k], model);
        let rj =
            riccati_jacobians(&plan.covariances[k], &plan.states[k + 1], landmarks_hat, sensor);
        kink_events += rj.kink_events;

        let mut a = DMatrix::zeros(n_s, n_s);
        a.view_mut((0, 0), (3, 3)).copy_from(&mj.e);
        let mut b = DMatrix::zeros(n_s, 2);
        b.view_mut((0, 0), (3, 2)).copy_from(&mj.b);
        let mut d = DMatrix::zeros(n_s, 3);
        d.view_mut((0, 0), (3, 3)).copy_from(&mj.d);

        for j in 0..n_l {
            let row = 3 + 3 * j;
            let g = &rj.g_blocks[j];
            a.view_mut((row, 0), (3, 3)).copy_from(&(g * mj.e));
            a.view_mut((row, row), (3, 3)).copy_from(&rj.f_blocks[j]);
            b.view_mut((row, 0), (3, 2)).copy_from(&(g * mj.b));
            d.view_mut((row, 0), (3, 3)).copy_from(&(g * mj.d));
        }
        steps.push(AugmentedStep { a, b, d });
    }
    AugmentedLinearization {
        steps,
        n_s,
        kink_events,
    }
}

/// User weight matrices: robot-error weight, per-landmark covariance-error
/// weight pattern (repeated over blocks), and control weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrWeights<T: Real> {
    pub q_robot: Matrix3<T>,
    pub q_sigma_block: Matrix3<T>,
    pub r: Matrix2<T>,
}

impl<T: Real> LqrWeights<T> {
    pub fn new(q_robot: Matrix3<T>, q_sigma_block: Matrix3<T>, r: Matrix2<T>) -> Result<Self> {
        if r.cholesky().is_none() {
            return Err(Error::NotPositiveDefinite { what: "LqrWeights.r" });
        }
        Ok(LqrWeights {
            q_robot,
            q_sigma_block,
            r,
        })
    }
}

/// Quadratic expansion of the stage costs along a plan.
#[derive(Clone, Debug)]
pub struct CostQuadratics<T: Real> {
    /// `Q_0 .. Q_K`, each `n_s x n_s`.
    pub q: Vec<DMatrix<T>>,
    /// `b_0 .. b_K`.
    pub b: Vec<DVector<T>>,
    /// `R_0 .. R_{K-1}`.
    pub r: Vec<Matrix2<T>>,
}

/// Expand the trace cost around the plan: the Hessian in `sigma` is zero,
/// the gradient stacks `(1, 0, 1)` per landmark block, and the user weights
/// fill the quadratic part.
pub fn cost_expansion<T: Real>(
    plan: &OpenLoopPlan<T>,
    weights: &LqrWeights<T>,
) -> CostQuadratics<T> {
    let horizon = plan.horizon();
    let n_l = plan.covariances[0].n_blocks();
    let n_s = 3 + 3 * n_l;

    let mut q_full = DMatrix::zeros(n_s, n_s);
    q_full.view_mut((0, 0), (3, 3)).copy_from(&weights.q_robot);
    for j in 0..n_l {
        let at = 3 + 3 * j;
        q_full
            .view_mut((at, at), (3, 3))
            .copy_from(&weights.q_sigma_block);
    }
    let mut b_full = DVector::zeros(n_s);
    b_full
        .rows_mut(3, 3 * n_l)
        .copy_from(&stage_cost_gradient::<T>(n_l));

    CostQuadratics {
        q: vec![q_full; horizon + 1],
        b: vec![b_full; horizon + 1],
        r: vec![weights.r; horizon],
    }
}

/// Time-indexed affine feedback policy and its value-function data.
#[derive(Clone, Debug)]
pub struct LqrPolicy<T: Real> {
    /// Gains `L_0 .. L_{K-1}`, each `2 x n_s`.
    pub gains: Vec<DMatrix<T>>,
    /// Offsets `eps_0 .. eps_{K-1}`.
    pub offsets: Vec<Vector2<T>>,
    /// `P_0 .. P_K`.
    pub value_quadratic: Vec<DMatrix<T>>,
    /// `d_0 .. d_K`.
    pub value_linear: Vec<DVector<T>>,
    /// `delta_0 .. delta_K`.
    pub value_constant: Vec<T>,
}

impl<T: Real> LqrPolicy<T> {
    /// Optimal expected cost `V_0(s) = s' P_0 s + d_0' s + delta_0`.
    pub fn value_at(&self, s: &DVector<T>) -> T {
        (s.transpose() * &self.value_quadratic[0] * s)[(0, 0)]
            + self.value_linear[0].dot(s)
            + self.value_constant[0]
    }
}

/// Backward Riccati recursion for the affine LQR.
///
/// From `P_K = Q_K`, `d_K = b_K`, `delta_K = 0`:
///
/// ```text
/// S   = R + B' P B                      (must stay invertible)
/// L   = -S^-1 B' P A                    eps = -S^-1 B' d / 2
/// P_k = Q + A' P A - A' P B S^-1 B' P A
/// d_k = b + A' d - A' P B S^-1 B' d
/// delta_k = delta + tr(D' P D W) - d' B S^-1 B' d / 4
/// ```
///
/// with `P, d, delta` on the right-hand side taken at `k + 1`.
pub fn backward_pass<T: Real>(
    lin: &AugmentedLinearization<T>,
    costs: &CostQuadratics<T>,
    w: &Matrix3<T>,
) -> Result<LqrPolicy<T>> {
    let horizon = lin.steps.len();
    assert_eq!(costs.q.len(), horizon + 1, "cost expansion length mismatch");
    let n_s = lin.n_s;

    let mut gains = vec![DMatrix::zeros(2, n_s); horizon];
    let mut offsets = vec![Vector2::zeros(); horizon];
    let mut value_quadratic = vec![DMatrix::zeros(n_s, n_s); horizon + 1];
    let mut value_linear = vec![DVector::zeros(n_s); horizon + 1];
    let mut value_constant = vec![T::zero(); horizon + 1];

    value_quadratic[horizon] = costs.q[horizon].clone();
    value_linear[horizon] = costs.b[horizon].clone();

    for k in (0..horizon).rev() {
        let step = &lin.steps[k];
        let p_next = &value_quadratic[k + 1];
        let d_next = &value_linear[k + 1];

        let bt_p = step.b.transpose() * p_next;
        let bpb = &bt_p * &step.b;
        let s_mat = costs.r[k] + Matrix2::new(bpb[(0, 0)], bpb[(0, 1)], bpb[(1, 0)], bpb[(1, 1)]);
        let s_inv = s_mat
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::SingularGain { step: k })?;
        let s_inv_dyn = DMatrix::from_iterator(2, 2, s_inv.iter().copied());

        let bt_p_a = &bt_p * &step.a;
        let bt_d_full = step.b.transpose() * d_next;
        let bt_d = Vector2::new(bt_d_full[0], bt_d_full[1]);

        let gain = -(&s_inv_dyn * &bt_p_a);
        let offset = -(s_inv * bt_d) * lit::<T>(0.5);

        // P update, symmetrized to suppress drift.
        let a_t_p = step.a.transpose() * p_next;
        let mut p = &costs.q[k] + &a_t_p * &step.a + bt_p_a.transpose() * &gain;
        p = (&p + p.transpose()) * lit::<T>(0.5);

        // d update.
        let d = &costs.b[k]
            + step.a.transpose() * d_next
            + gain.transpose() * DVector::from_column_slice(&[bt_d.x, bt_d.y]);

        // delta update: noise contribution minus the offset correction.
        let dpd = step.d.transpose() * p_next * &step.d;
        let mut trace_term = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                trace_term += dpd[(i, j)] * w[(j, i)];
            }
        }
        let sd = s_inv * bt_d;
        let quad = bt_d.dot(&sd);
        let delta = value_constant[k + 1] + trace_term - quad * lit::<T>(0.25);

        gains[k] = gain;
        offsets[k] = offset;
        value_quadratic[k] = p;
        value_linear[k] = d;
        value_constant[k] = delta;
    }

    Ok(LqrPolicy {
        gains,
        offsets,
        value_quadratic,
        value_linear,
        value_constant,
    })
}

/// Assemble the error state `s_k` (heading error wrapped) and evaluate the
/// affine feedback `u_nom + L s + eps`, clamped to the control bounds.
pub fn apply_policy<T: Real>(
    k: usize,
    x: &Pose2<T>,
    sigma: &CovVector<T>,
    plan: &OpenLoopPlan<T>,
    policy: &LqrPolicy<T>,
    bounds: &ControlBounds<T>,
) -> ControlInput<T> {
    assert!(k < plan.horizon(), "policy step out of range");
    let nominal_x = &plan.states[k];
    let nominal_sigma = &plan.covariances[k];
    let n_l = nominal_sigma.n_blocks();
    let mut s = DVector::zeros(3 + 3 * n_l);
    s[0] = x.position.x - nominal_x.position.x;
    s[1] = x.position.y - nominal_x.position.y;
    s[2] = wrap_angle(x.heading - nominal_x.heading);
    for (i, (have, want)) in sigma
        .as_slice()
        .iter()
        .zip(nominal_sigma.as_slice())
        .enumerate()
    {
        s[3 + i] = *have - *want;
    }
    let feedback = &policy.gains[k] * &s;
    let u = ControlInput::new(
        plan.controls[k].v + feedback[0] + policy.offsets[k].x,
        plan.controls[k].omega + feedback[1] + policy.offsets[k].y,
    );
    bounds.clamp(&u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::riccati_step;
    use crate::geometry::FovPolygon;
    use crate::icr::rollout;
    use crate::motion::step;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
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
        ProcessNoiseModel::new(Matrix3::from_diagonal(&Vector3::new(0.1, 0.1, 0.01)), 1.0)
            .unwrap()
    }

    fn default_weights() -> LqrWeights<f64> {
        LqrWeights::new(
            Matrix3::from_diagonal(&Vector3::new(10.0, 10.0, 1.0)),
            Matrix3::from_diagonal(&Vector3::new(1.0, 0.1, 1.0)),
            Matrix2::new(20.0, 5.0, 5.0, 10.0),
        )
        .unwrap()
    }

    fn demo_plan() -> (
        OpenLoopPlan<f64>,
        LandmarkSet<f64>,
        SensorModel<f64>,
        ProcessNoiseModel<f64>,
    ) {
        let sensor = default_sensor();
        let model = default_model();
        let landmarks =
            LandmarkSet::new(vec![Vector2::new(8.0, 1.0), Vector2::new(14.0, -4.0)]).unwrap();
        let sigma0 = CovVector::isotropic(2, 20.0).unwrap();
        let controls = vec![
            ControlInput::new(1.0, 0.1),
            ControlInput::new(1.5, -0.2),
            ControlInput::new(2.0, 0.05),
        ];
        let plan = rollout(
            &Pose2::new(0.0, 0.0, 0.0),
            &sigma0,
            &controls,
            &landmarks,
            &sensor,
            &model,
        );
        (plan, landmarks, sensor, model)
    }

    #[test]
    fn linearization_far_from_landmarks_is_block_identity() {
        let sensor = default_sensor();
        let model = default_model();
        let landmarks = LandmarkSet::new(vec![Vector2::new(1.0e5, 1.0e5)]).unwrap();
        let sigma0 = CovVector::isotropic(1, 25.0).unwrap();
        let plan = rollout(
            &Pose2::new(0.0, 0.0, 0.0),
            &sigma0,
            &[ControlInput::new(1.0, 0.2)],
            &landmarks,
            &sensor,
            &model,
        );
        let lin = linearize(&plan, &landmarks, &sensor, &model);
        let a = &lin.steps[0].a;
        let mj = jacobians(&plan.states[0], &plan.controls[0], &model);
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(a[(i, j)], mj.e[(i, j)], epsilon = 1e-12);
                let eye = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(a[(3 + i, 3 + j)], eye, epsilon = 1e-9);
                assert!(a[(3 + i, j)].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn linearization_upper_right_block_is_exactly_zero() {
        let (plan, landmarks, sensor, model) = demo_plan();
        let lin = linearize(&plan, &landmarks, &sensor, &model);
        for step in &lin.steps {
            assert_eq!(step.a.view((0, 3), (3, lin.n_s - 3)).abs().max(), 0.0);
        }
    }

    #[test]
    fn linearization_predicts_nonlinear_perturbations() {
        let (plan, landmarks, sensor, model) = demo_plan();
        let lin = linearize(&plan, &landmarks, &sensor, &model);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let eps = 1e-5;
        for k in 0..plan.horizon() {
            let dx = Vector3::new(
                rng.random_range(-1.0..1.0) * eps,
                rng.random_range(-1.0..1.0) * eps,
                rng.random_range(-1.0..1.0) * eps,
            );
            let dsigma: Vec<f64> = (0..plan.covariances[k].as_slice().len())
                .map(|_| rng.random_range(-1.0..1.0) * eps)
                .collect();

            let x_pert = Pose2 {
                position: plan.states[k].position + Vector2::new(dx.x, dx.y),
                heading: plan.states[k].heading + dx.z,
            };
            let sigma_pert = CovVector::new(
                plan.covariances[k]
                    .as_slice()
                    .iter()
                    .zip(&dsigma)
                    .map(|(s, d)| s + d)
                    .collect(),
            )
            .unwrap();

            let x_next = step(&x_pert, &plan.controls[k], &Vector3::zeros(), &model);
            let sigma_next = riccati_step(&sigma_pert, &x_next, &landmarks, &sensor);

            let n_s = lin.n_s;
            let mut s = DVector::zeros(n_s);
            s[0] = dx.x;
            s[1] = dx.y;
            s[2] = dx.z;
            for (i, d) in dsigma.iter().enumerate() {
                s[3 + i] = *d;
            }
            let predicted = &lin.steps[k].a * s;

            let mut actual = DVector::zeros(n_s);
            actual[0] = x_next.position.x - plan.states[k + 1].position.x;
            actual[1] = x_next.position.y - plan.states[k + 1].position.y;
            actual[2] = wrap_angle(x_next.heading - plan.states[k + 1].heading);
            for (i, (a, b)) in sigma_next
                .as_slice()
                .iter()
                .zip(plan.covariances[k + 1].as_slice())
                .enumerate()
            {
                actual[3 + i] = a - b;
            }
            let err = (&predicted - &actual).abs().max();
            assert!(
                err <= 1e-4 * actual.abs().max().max(eps),
                "step {k}: linearization error {err}"
            );
        }
    }

    #[test]
    fn cost_expansion_patterns() {
        let (plan, _, _, _) = demo_plan();
        let weights = default_weights();
        let costs = cost_expansion(&plan, &weights);
        assert_eq!(costs.q.len(), plan.horizon() + 1);
        assert_eq!(costs.r.len(), plan.horizon());
        let b = &costs.b[0];
        assert_eq!(b.len(), 3 + 6);
        assert_eq!(&b.as_slice()[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&b.as_slice()[3..], &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        // Directional check: b' dsigma = d/de tr(sigma + e dsigma).
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let dsigma: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let directional: f64 = b.as_slice()[3..]
            .iter()
            .zip(&dsigma)
            .map(|(bi, di)| bi * di)
            .sum();
        let trace_dir: f64 = dsigma[0] + dsigma[2] + dsigma[3] + dsigma[5];
        assert_relative_eq!(directional, trace_dir, epsilon = 1e-12);
    }

    /// Textbook finite-horizon LQR recursion, written independently of
    /// `backward_pass` (plain LU inverse, no linear or constant terms).
    fn reference_lqr(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        horizon: usize,
    ) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut p = q.clone();
        let mut gains = Vec::new();
        let mut values = vec![p.clone()];
        for _ in 0..horizon {
            let s = r + b.transpose() * &p * b;
            let s_inv = s.try_inverse().unwrap();
            let l = -&s_inv * b.transpose() * &p * a;
            p = q + a.transpose() * &p * a
                - a.transpose() * &p * b * &s_inv * b.transpose() * &p * a;
            p = (&p + p.transpose()) * 0.5;
            gains.push(l);
            values.push(p.clone());
        }
        gains.reverse();
        values.reverse();
        (gains, values)
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        n_s: usize,
        horizon: usize,
        with_b: bool,
    ) -> (AugmentedLinearization<f64>, CostQuadratics<f64>) {
        let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
        };
        let mut steps = Vec::new();
        for _ in 0..horizon {
            steps.push(AugmentedStep {
                a: rand_mat(rng, n_s, n_s),
                b: rand_mat(rng, n_s, 2),
                d: rand_mat(rng, n_s, 3),
            });
        }
        let mut q = Vec::new();
        let mut b = Vec::new();
        let mut r = Vec::new();
        for k in 0..=horizon {
            let half = rand_mat(rng, n_s, n_s);
            q.push(&half * half.transpose());
            b.push(if with_b {
                DVector::from_fn(n_s, |_, _| rng.random_range(-1.0..1.0))
            } else {
                DVector::zeros(n_s)
            });
            if k < horizon {
                let rh = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
                let rr = &rh * rh.transpose() + DMatrix::identity(2, 2);
                r.push(Matrix2::new(rr[(0, 0)], rr[(0, 1)], rr[(1, 0)], rr[(1, 1)]));
            }
        }
        (
            AugmentedLinearization {
                steps,
                n_s,
                kink_events: 0,
            },
            CostQuadratics { q, b, r },
        )
    }

    #[test]
    fn zero_linear_term_reduces_to_standard_lqr() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..20 {
            let n_s = rng.random_range(2..5usize);
            let horizon = rng.random_range(1..5usize);
            let (lin0, costs0) = random_instance(&mut rng, n_s, horizon, false);
            // Time-invariant instance for the reference recursion.
            let a = lin0.steps[0].a.clone();
            let b = lin0.steps[0].b.clone();
            let q = costs0.q[0].clone();
            let r0 = costs0.r[0];
            let lin = AugmentedLinearization {
                steps: (0..horizon)
                    .map(|_| AugmentedStep {
                        a: a.clone(),
                        b: b.clone(),
                        d: DMatrix::zeros(n_s, 3),
                    })
                    .collect(),
                n_s,
                kink_events: 0,
            };
            let costs = CostQuadratics {
                q: vec![q.clone(); horizon + 1],
                b: vec![DVector::zeros(n_s); horizon + 1],
                r: vec![r0; horizon],
            };

            let policy = backward_pass(&lin, &costs, &Matrix3::zeros()).unwrap();
            let r_dyn = DMatrix::from_iterator(2, 2, r0.iter().copied());
            let (ref_gains, ref_values) = reference_lqr(&a, &b, &q, &r_dyn, horizon);
            for k in 0..horizon {
                assert!((&policy.gains[k] - &ref_gains[k]).abs().max() < 1e-10);
                assert!(policy.offsets[k].abs().max() < 1e-14);
            }
            for k in 0..=horizon {
                assert!((&policy.value_quadratic[k] - &ref_values[k]).abs().max() < 1e-10);
            }
        }
    }

    #[test]
    fn scalar_instance_by_hand() {
        // K = 1, A = B = D = 1, Q0 = Q1 = 1, b = 0, R = 1, W = 1:
        // minimizing s0^2 + u^2 + E[(s0 + u + w)^2] gives u = -s0 / 2,
        // value 1.5 s0^2 + 1.
        let mut lin = AugmentedLinearization {
            steps: vec![AugmentedStep {
                a: DMatrix::from_element(1, 1, 1.0),
                b: DMatrix::zeros(1, 2),
                d: DMatrix::zeros(1, 3),
            }],
            n_s: 1,
            kink_events: 0,
        };
        lin.steps[0].b[(0, 0)] = 1.0;
        lin.steps[0].d[(0, 0)] = 1.0;
        let costs = CostQuadratics {
            q: vec![DMatrix::from_element(1, 1, 1.0); 2],
            b: vec![DVector::zeros(1); 2],
            r: vec![Matrix2::identity(); 1],
        };
        let mut w = Matrix3::zeros();
        w[(0, 0)] = 1.0;
        let policy = backward_pass(&lin, &costs, &w).unwrap();
        assert_relative_eq!(policy.gains[0][(0, 0)], -0.5, epsilon = 1e-12);
        assert_relative_eq!(policy.value_quadratic[0][(0, 0)], 1.5, epsilon = 1e-12);
        assert_relative_eq!(policy.value_constant[0], 1.0, epsilon = 1e-12);
    }

    /// Exact quadratic cost of an open-loop control vector on the
    /// deterministic (W = 0) linear system.
    fn open_loop_cost(
        lin: &AugmentedLinearization<f64>,
        costs: &CostQuadratics<f64>,
        s0: &DVector<f64>,
        u: &DVector<f64>,
    ) -> f64 {
        let horizon = lin.steps.len();
        let mut s = s0.clone();
        let mut total = 0.0;
        for k in 0..horizon {
            let uk = Vector2::new(u[2 * k], u[2 * k + 1]);
            total += (s.transpose() * &costs.q[k] * &s)[(0, 0)]
                + costs.b[k].dot(&s)
                + (uk.transpose() * costs.r[k] * uk)[(0, 0)];
            s = &lin.steps[k].a * s + &lin.steps[k].b * DVector::from_column_slice(&[uk.x, uk.y]);
        }
        total + (s.transpose() * &costs.q[horizon] * &s)[(0, 0)] + costs.b[horizon].dot(&s)
    }

    #[test]
    fn value_function_matches_direct_quadratic_minimization() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        for trial in 0..50 {
            let n_s = rng.random_range(2..5usize);
            let horizon = rng.random_range(1..5usize);
            let (lin, costs) = random_instance(&mut rng, n_s, horizon, true);
            let policy = backward_pass(&lin, &costs, &Matrix3::zeros()).unwrap();
            let s0 = DVector::from_fn(n_s, |_, _| rng.random_range(-1.0..1.0));

            // The open-loop cost is an exact quadratic in the stacked
            // control vector: recover its Hessian and gradient by
            // evaluation, then solve the normal equations.
            let m = 2 * horizon;
            let j0 = open_loop_cost(&lin, &costs, &s0, &DVector::zeros(m));
            let mut grad = DVector::zeros(m);
            let mut hess = DMatrix::zeros(m, m);
            let unit = |i: usize, s: f64| {
                let mut u = DVector::zeros(m);
                u[i] = s;
                u
            };
            for i in 0..m {
                let jp = open_loop_cost(&lin, &costs, &s0, &unit(i, 1.0));
                let jm = open_loop_cost(&lin, &costs, &s0, &unit(i, -1.0));
                grad[i] = (jp - jm) / 2.0;
                hess[(i, i)] = jp + jm - 2.0 * j0;
            }
            for i in 0..m {
                for l in (i + 1)..m {
                    let mut u = DVector::zeros(m);
                    u[i] = 1.0;
                    u[l] = 1.0;
                    let jil = open_loop_cost(&lin, &costs, &s0, &u);
                    let hij =
                        jil - j0 - grad[i] - grad[l] - 0.5 * hess[(i, i)] - 0.5 * hess[(l, l)];
                    hess[(i, l)] = hij;
                    hess[(l, i)] = hij;
                }
            }
            let u_star = hess
                .clone()
                .cholesky()
                .map(|c| c.solve(&(-&grad)))
                .unwrap_or_else(|| hess.clone().lu().solve(&(-&grad)).unwrap());
            let j_star = open_loop_cost(&lin, &costs, &s0, &u_star);
            let value = policy.value_at(&s0);
            assert!(
                (j_star - value).abs() <= 1e-6 * j_star.abs().max(1.0),
                "trial {trial}: direct {j_star} vs value {value}"
            );
        }
    }

    #[test]
    fn monte_carlo_cost_matches_value_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        for _ in 0..10 {
            let n_s = rng.random_range(2..4usize);
            let horizon = rng.random_range(1..4usize);
            let (lin, costs) = random_instance(&mut rng, n_s, horizon, true);
            let w_half = Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            let w = w_half * w_half.transpose() + Matrix3::identity() * 0.01;
            let policy = backward_pass(&lin, &costs, &w).unwrap();
            let s0 = DVector::from_fn(n_s, |_, _| rng.random_range(-1.0..1.0));
            let value = policy.value_at(&s0);

            let w_model = ProcessNoiseModel::new(w, 1.0).unwrap();
            let rollouts = 100_000;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..rollouts {
                let mut s = s0.clone();
                let mut cost = 0.0;
                for k in 0..horizon {
                    let u = &policy.gains[k] * &s
                        + DVector::from_column_slice(&[policy.offsets[k].x, policy.offsets[k].y]);
                    let uk = Vector2::new(u[0], u[1]);
                    cost += (s.transpose() * &costs.q[k] * &s)[(0, 0)]
                        + costs.b[k].dot(&s)
                        + (uk.transpose() * costs.r[k] * uk)[(0, 0)];
                    let noise = w_model.sample(&mut rng);
                    s = &lin.steps[k].a * s
                        + &lin.steps[k].b * u
                        + &lin.steps[k].d * DVector::from_column_slice(noise.as_slice());
                }
                cost +=
                    (s.transpose() * &costs.q[horizon] * &s)[(0, 0)] + costs.b[horizon].dot(&s);
                sum += cost;
                sum_sq += cost * cost;
            }
            let mean = sum / rollouts as f64;
            let var = (sum_sq / rollouts as f64 - mean * mean).max(0.0);
            let se = (var / rollouts as f64).sqrt();
            assert!(
                (mean - value).abs() <= 3.0 * se + 1e-9,
                "MC mean {mean} vs value {value} (se {se})"
            );
        }
    }

    #[test]
    fn value_matrices_stay_symmetric_psd() {
        let (plan, landmarks, sensor, model) = demo_plan();
        let lin = linearize(&plan, &landmarks, &sensor, &model);
        let costs = cost_expansion(&plan, &default_weights());
        let policy = backward_pass(&lin, &costs, model.covariance()).unwrap();
        for p in &policy.value_quadratic {
            assert!((p - p.transpose()).abs().max() < 1e-10);
            let eig = p.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() >= -1e-9);
        }
    }

    #[test]
    fn apply_policy_examples() {
        let (plan, landmarks, sensor, model) = demo_plan();
        let lin = linearize(&plan, &landmarks, &sensor, &model);
        let weights = default_weights();
        let costs = cost_expansion(&plan, &weights);
        let policy = backward_pass(&lin, &costs, model.covariance()).unwrap();
        let bounds = ControlBounds::new(3.0, 1.0).unwrap();

        // Zero offsets replay the nominal control exactly at zero error.
        let mut zero_offset = policy.clone();
        for eps in zero_offset.offsets.iter_mut() {
            *eps = Vector2::zeros();
        }
        let u = apply_policy(
            1,
            &plan.states[1],
            &plan.covariances[1],
            &plan,
            &zero_offset,
            &bounds,
        );
        assert_relative_eq!(u.v, plan.controls[1].v, epsilon = 1e-12);
        assert_relative_eq!(u.omega, plan.controls[1].omega, epsilon = 1e-12);

        // Zero gains and offsets: open-loop replay regardless of the state.
        let mut open_loop = policy.clone();
        for l in open_loop.gains.iter_mut() {
            l.fill(0.0);
        }
        for eps in open_loop.offsets.iter_mut() {
            *eps = Vector2::zeros();
        }
        let u = apply_policy(
            0,
            &Pose2::new(5.0, -2.0, 1.0),
            &plan.covariances[0],
            &plan,
            &open_loop,
            &bounds,
        );
        assert_eq!(u, plan.controls[0]);

        // Control deviation is linear in a small state perturbation with
        // slope given by the gain.
        let eps = 1e-6;
        let dx = Vector2::new(eps, -0.5 * eps);
        let perturbed = Pose2 {
            position: plan.states[0].position + dx,
            heading: plan.states[0].heading,
        };
        let u0 = apply_policy(0, &plan.states[0], &plan.covariances[0], &plan, &policy, &bounds);
        let u1 = apply_policy(0, &perturbed, &plan.covariances[0], &plan, &policy, &bounds);
        let expected_dv = policy.gains[0][(0, 0)] * dx.x + policy.gains[0][(0, 1)] * dx.y;
        let expected_domega = policy.gains[0][(1, 0)] * dx.x + policy.gains[0][(1, 1)] * dx.y;
        assert_relative_eq!(u1.v - u0.v, expected_dv, epsilon = 1e-8);
        assert_relative_eq!(u1.omega - u0.omega, expected_domega, epsilon = 1e-8);
    }
}
