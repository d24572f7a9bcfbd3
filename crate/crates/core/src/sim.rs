//! Environment generation, the replanning execution loop, and Monte Carlo
//! metrics for comparing control policies.
//!
//! A trial alternates planning phases and execution: every `K` steps the
//! planner state is re-extracted from the EKF posterior, a new plan is built
//! according to the policy, and the plan is executed while ground truth,
//! measurements, and the filter evolve step by step.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;
use std::str::FromStr;

use crate::ekf::{entropies, predict, reconstruct_measurement, update, JointBelief};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, FovPolygon, Pose2};
use crate::icr::{optimize, IcrConfig};
use crate::lqr::{apply_policy, backward_pass, cost_expansion, linearize, LqrWeights};
use crate::motion::{sample_step, ControlBounds, ControlInput, ProcessNoiseModel};
use crate::scalar::{lit, Real};
use crate::sensing::{sample_measurements, LandmarkSet, SensorModel};

/// Rectangular world `[0, width] x [0, height]` with uniformly placed
/// landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment<T: Real> {
    pub width: T,
    pub height: T,
    pub landmarks: LandmarkSet<T>,
    pub seed: u64,
}

/// Draw `n_landmarks` i.i.d. uniform positions in the bounds from a seeded
/// stream; deterministic per seed.
pub fn generate_environment<T: Real>(
    width: T,
    height: T,
    n_landmarks: usize,
    seed: u64,
) -> Result<Environment<T>> {
    if n_landmarks == 0 {
        return Err(Error::invalid("Environment", "need at least one landmark"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = (0..n_landmarks)
        .map(|_| {
            let x: f64 = rng.random_range(0.0..1.0);
            let y: f64 = rng.random_range(0.0..1.0);
            Vector2::new(width * lit(x), height * lit(y))
        })
        .collect();
    Ok(Environment {
        width,
        height,
        landmarks: LandmarkSet::new(positions)?,
        seed,
    })
}

/// Control policy run by a trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    /// Uniform random controls within the bounds, resampled each step.
    Random,
    /// Optimize with iCR, replay the nominal controls open loop.
    IcrOpenLoop,
    /// Optimize with iCR, regulate with the affine LQR around the plan.
    IcrLqr,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Random, PolicyKind::IcrOpenLoop, PolicyKind::IcrLqr];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::IcrOpenLoop => "icr_open_loop",
            PolicyKind::IcrLqr => "icr_lqr",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PolicyKind::Random),
            "icr_open_loop" => Ok(PolicyKind::IcrOpenLoop),
            "icr_lqr" => Ok(PolicyKind::IcrLqr),
            other => Err(Error::invalid(
                "policy",
                format!("unknown policy '{other}' (expected random, icr_open_loop, icr_lqr)"),
            )),
        }
    }
}

/// Everything a trial needs besides the environment, policy, and seed.
#[derive(Clone, Debug)]
pub struct SimParams<T: Real> {
    pub motion: ProcessNoiseModel<T>,
    pub bounds: ControlBounds<T>,
    pub sensor: SensorModel<T>,
    pub icr: IcrConfig<T>,
    pub lqr: LqrWeights<T>,
    /// Standard deviation of the initialization noise added to the true
    /// state to form the initial mean; its square also fills the initial
    /// covariance diagonal.
    pub init_std: T,
    /// Whether the heading coordinate also receives initialization noise.
    pub init_heading_noise: bool,
    /// Seed each planning phase's control sequence with the previous
    /// phase's optimized controls instead of zeros.
    pub warm_start: bool,
    pub start_pose: Pose2<T>,
}

/// Default field of view: isosceles triangle with apex at the body origin,
/// height 20 m along +x, apex angle 120 degrees.
pub fn default_fov<T: Real>() -> FovPolygon<T> {
    let height = lit::<T>(20.0);
    let half_width = height * lit::<T>(60.0 * std::f64::consts::PI / 180.0).tan();
    FovPolygon::new(vec![
        Vector2::new(T::zero(), T::zero()),
        Vector2::new(height, -half_width),
        Vector2::new(height, half_width),
    ])
    .expect("default FoV triangle is convex")
}

impl<T: Real> SimParams<T> {
    /// Stock parameter set: `W = diag(0.1, 0.1, 0.01)`, `tau = 1`,
    /// `Gamma = diag(0.1, 0.1)`, `kappa = 10`, `K = 5` with 10 iCR
    /// iterations at `alpha = diag(0.005, 0.0005)`,
    /// `Q1 = diag(10, 10, 1)`, `Q2 = diag(1, 0.1, 1)` per block,
    /// `R = [[20, 5], [5, 10]]`, start at the center of a
    /// 100 m x 70 m world.
    pub fn standard() -> Self {
        let motion = ProcessNoiseModel::new(
            Matrix3::from_diagonal(&Vector3::new(lit(0.1), lit(0.1), lit(0.01))),
            T::one(),
        )
        .expect("stock W is PSD");
        let bounds = ControlBounds::new(lit(3.0), lit(1.0)).expect("stock bounds");
        let sensor = SensorModel::new(
            Matrix2::from_diagonal(&Vector2::new(lit(0.1), lit(0.1))),
            lit(10.0),
            default_fov(),
        )
        .expect("stock sensor");
        let icr = IcrConfig::new(
            5,
            10,
            Vector2::new(lit(0.005), lit(0.0005)),
            bounds,
        )
        .expect("stock iCR config");
        let lqr = LqrWeights::new(
            Matrix3::from_diagonal(&Vector3::new(lit(10.0), lit(10.0), T::one())),
            Matrix3::from_diagonal(&Vector3::new(T::one(), lit(0.1), T::one())),
            Matrix2::new(lit(20.0), lit(5.0), lit(5.0), lit(10.0)),
        )
        .expect("stock LQR weights");
        SimParams {
            motion,
            bounds,
            sensor,
            icr,
            lqr,
            init_std: lit(5.0),
            init_heading_noise: true,
            warm_start: false,
            start_pose: Pose2::new(lit(50.0), lit(35.0), T::zero()),
        }
    }
}

/// Policy, length, seed, and the full parameter set of one trial.
#[derive(Clone, Debug)]
pub struct TrialConfig<T: Real> {
    pub policy: PolicyKind,
    pub total_steps: usize,
    pub seed: u64,
    pub params: SimParams<T>,
}

impl<T: Real> TrialConfig<T> {
    pub fn new(policy: PolicyKind, total_steps: usize, seed: u64, params: SimParams<T>) -> Result<Self> {
        if total_steps == 0 || total_steps % params.icr.horizon != 0 {
            return Err(Error::invalid(
                "TrialConfig.total_steps",
                format!(
                    "{} is not a positive multiple of the horizon {}",
                    total_steps, params.icr.horizon
                ),
            ));
        }
        Ok(TrialConfig {
            policy,
            total_steps,
            seed,
            params,
        })
    }
}

/// Per-step metric series of one trial; all have length `total_steps + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries<T: Real> {
    pub robot_rmse_pos: Vec<T>,
    pub robot_rmse_theta: Vec<T>,
    pub robot_entropy: Vec<T>,
    pub lm_rmse: Vec<T>,
    pub lm_entropy_avg: Vec<T>,
    pub joint_entropy: Vec<T>,
}

impl<T: Real> Default for MetricSeries<T> {
    fn default() -> Self {
        MetricSeries {
            robot_rmse_pos: Vec::new(),
            robot_rmse_theta: Vec::new(),
            robot_entropy: Vec::new(),
            lm_rmse: Vec::new(),
            lm_entropy_avg: Vec::new(),
            joint_entropy: Vec::new(),
        }
    }
}

impl<T: Real> MetricSeries<T> {
    pub fn len(&self) -> usize {
        self.robot_rmse_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.robot_rmse_pos.is_empty()
    }

    fn push(&mut self, truth: &Pose2<T>, landmarks: &LandmarkSet<T>, belief: &JointBelief<T>) {
        let est = belief.robot_pose();
        self.robot_rmse_pos
            .push((est.position - truth.position).norm());
        self.robot_rmse_theta
            .push(wrap_angle(est.heading - truth.heading).abs());
        let n_l = landmarks.len();
        let mut sq = T::zero();
        for j in 0..n_l {
            sq += (belief.landmark(j) - landmarks.position(j)).norm_squared();
        }
        self.lm_rmse.push((sq / lit(n_l as f64)).sqrt());
        let ent = entropies(belief);
        self.robot_entropy.push(ent.robot);
        self.lm_entropy_avg.push(ent.landmark_average());
        self.joint_entropy.push(ent.joint);
    }

    fn metric(&self, which: usize) -> &[T] {
        match which {
            0 => &self.robot_rmse_pos,
            1 => &self.robot_rmse_theta,
            2 => &self.robot_entropy,
            3 => &self.lm_rmse,
            4 => &self.lm_entropy_avg,
            _ => &self.joint_entropy,
        }
    }

    fn metric_mut(&mut self, which: usize) -> &mut Vec<T> {
        match which {
            0 => &mut self.robot_rmse_pos,
            1 => &mut self.robot_rmse_theta,
            2 => &mut self.robot_entropy,
            3 => &mut self.lm_rmse,
            4 => &mut self.lm_entropy_avg,
            _ => &mut self.joint_entropy,
        }
    }
}

/// One executed trial: metric series plus ground-truth and estimated
/// trajectories.
#[derive(Clone, Debug)]
pub struct TrialResult<T: Real> {
    pub policy: PolicyKind,
    pub seed: u64,
    pub metrics: MetricSeries<T>,
    pub true_poses: Vec<Pose2<T>>,
    pub est_poses: Vec<Pose2<T>>,
}

// RNG stream ids within a trial; the environment uses the plain seed.
const STREAM_INIT: u64 = 1;
const STREAM_PROCESS: u64 = 2;
const STREAM_MEASUREMENT: u64 = 3;
const STREAM_POLICY: u64 = 4;

fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Run one trial of the replanning loop.
pub fn run_trial<T: Real>(env: &Environment<T>, cfg: &TrialConfig<T>) -> Result<TrialResult<T>> {
    let params = &cfg.params;
    let n_l = env.landmarks.len();
    let horizon = params.icr.horizon;
    let phases = cfg.total_steps / horizon;

    let mut init_rng = trial_rng(cfg.seed, STREAM_INIT);
    let mut process_rng = trial_rng(cfg.seed, STREAM_PROCESS);
    let mut meas_rng = trial_rng(cfg.seed, STREAM_MEASUREMENT);
    let mut policy_rng = trial_rng(cfg.seed, STREAM_POLICY);

    // Ground truth and the initial belief: true state plus N(0, init_std^2)
    // per coordinate, covariance init_std^2 I.
    let mut truth = params.start_pose;
    let dim = 3 + 2 * n_l;
    let mut mean = DVector::zeros(dim);
    let draw = |rng: &mut ChaCha8Rng| -> T {
        let x: f64 = StandardNormal.sample(rng);
        lit::<T>(x)
    };
    mean[0] = truth.position.x + params.init_std * draw(&mut init_rng);
    mean[1] = truth.position.y + params.init_std * draw(&mut init_rng);
    let heading_noise = if params.init_heading_noise {
        params.init_std * draw(&mut init_rng)
    } else {
        T::zero()
    };
    mean[2] = wrap_angle(truth.heading + heading_noise);
    for j in 0..n_l {
        mean[3 + 2 * j] = env.landmarks.position(j).x + params.init_std * draw(&mut init_rng);
        mean[4 + 2 * j] = env.landmarks.position(j).y + params.init_std * draw(&mut init_rng);
    }
    let cov = DMatrix::identity(dim, dim) * (params.init_std * params.init_std);
    let mut belief =
        JointBelief::new(mean, cov).map_err(|e| e.at_step(0, "initialization"))?;

    let mut metrics = MetricSeries::default();
    let mut true_poses = Vec::with_capacity(cfg.total_steps + 1);
    let mut est_poses = Vec::with_capacity(cfg.total_steps + 1);
    metrics.push(&truth, &env.landmarks, &belief);
    true_poses.push(truth);
    est_poses.push(belief.robot_pose());

    let mut step_index = 0usize;
    let mut previous_controls: Option<Vec<ControlInput<T>>> = None;
    for _ in 0..phases {
        // Planner state from the current posterior.
        let x_hat = belief.robot_pose();
        let sigma0 = belief.landmark_cov_vector();
        let landmarks_hat = LandmarkSet::new(belief.landmark_means())
            .map_err(|e| e.at_step(step_index, "planning"))?;

        enum PhasePlan<T: Real> {
            Random(Vec<ControlInput<T>>),
            OpenLoop(crate::icr::OpenLoopPlan<T>),
            Lqr(crate::icr::OpenLoopPlan<T>, crate::lqr::LqrPolicy<T>),
        }

        let plan = match cfg.policy {
            PolicyKind::Random => PhasePlan::Random(
                (0..horizon)
                    .map(|_| {
                        let v: f64 = policy_rng.random_range(0.0..1.0);
                        let omega: f64 = policy_rng.random_range(-1.0..1.0);
                        ControlInput::new(
                            params.bounds.v_max * lit(v),
                            params.bounds.omega_max * lit(omega),
                        )
                    })
                    .collect(),
            ),
            PolicyKind::IcrOpenLoop | PolicyKind::IcrLqr => {
                let u0 = match (&previous_controls, params.warm_start) {
                    (Some(prev), true) => prev.clone(),
                    _ => vec![ControlInput::new(T::zero(), T::zero()); horizon],
                };
                let plan = optimize(
                    &x_hat,
                    &sigma0,
                    &u0,
                    &params.icr,
                    &landmarks_hat,
                    &params.sensor,
                    &params.motion,
                );
                previous_controls = Some(plan.controls.clone());
                if cfg.policy == PolicyKind::IcrLqr {
                    let lin = linearize(&plan, &landmarks_hat, &params.sensor, &params.motion);
                    let costs = cost_expansion(&plan, &params.lqr);
                    let policy = backward_pass(&lin, &costs, params.motion.covariance())
                        .map_err(|e| e.at_step(step_index, "lqr"))?;
                    PhasePlan::Lqr(plan, policy)
                } else {
                    PhasePlan::OpenLoop(plan)
                }
            }
        };

        for k in 0..horizon {
            let u = match &plan {
                PhasePlan::Random(controls) => controls[k],
                PhasePlan::OpenLoop(plan) => plan.controls[k],
                PhasePlan::Lqr(plan, policy) => apply_policy(
                    k,
                    &belief.robot_pose(),
                    &belief.landmark_cov_vector(),
                    plan,
                    policy,
                    &params.bounds,
                ),
            };
            truth = sample_step(&truth, &u, &params.motion, &mut process_rng);
            let raw = sample_measurements(&truth, &env.landmarks, &params.sensor, &mut meas_rng);
            belief = predict(&belief, &u, &params.motion);
            let recon = reconstruct_measurement(&belief, &raw, &params.sensor);
            belief = update(&belief, &recon, &params.sensor)
                .map_err(|e| e.at_step(step_index, "ekf"))?;

            step_index += 1;
            metrics.push(&truth, &env.landmarks, &belief);
            true_poses.push(truth);
            est_poses.push(belief.robot_pose());
        }
    }

    Ok(TrialResult {
        policy: cfg.policy,
        seed: cfg.seed,
        metrics,
        true_poses,
        est_poses,
    })
}

/// Per-step mean and (population) standard deviation across trials for each
/// metric.
#[derive(Clone, Debug)]
pub struct Summary<T: Real> {
    pub mean: MetricSeries<T>,
    pub std: MetricSeries<T>,
}

pub fn aggregate<T: Real>(results: &[TrialResult<T>]) -> Result<Summary<T>> {
    let first = results
        .first()
        .ok_or_else(|| Error::invalid("aggregate", "no results"))?;
    let len = first.metrics.len();
    if results.iter().any(|r| r.metrics.len() != len) {
        return Err(Error::invalid("aggregate", "metric series length mismatch"));
    }
    let count = lit::<T>(results.len() as f64);
    let mut mean = MetricSeries::default();
    let mut std = MetricSeries::default();
    for which in 0..6 {
        let mean_series = mean.metric_mut(which);
        let std_series = std.metric_mut(which);
        for t in 0..len {
            let mut m = T::zero();
            for r in results {
                m += r.metrics.metric(which)[t];
            }
            m /= count;
            let mut var = T::zero();
            for r in results {
                let d = r.metrics.metric(which)[t] - m;
                var += d * d;
            }
            var /= count;
            mean_series.push(m);
            std_series.push(var.max(T::zero()).sqrt());
        }
    }
    Ok(Summary { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn environment_is_deterministic_and_in_bounds() {
        let a = generate_environment::<f64>(100.0, 70.0, 25, 7).unwrap();
        let b = generate_environment::<f64>(100.0, 70.0, 25, 7).unwrap();
        assert_eq!(a, b);
        for p in a.landmarks.positions() {
            assert!((0.0..=100.0).contains(&p.x));
            assert!((0.0..=70.0).contains(&p.y));
        }
        let c = generate_environment::<f64>(100.0, 70.0, 25, 8).unwrap();
        assert_ne!(a.landmarks, c.landmarks);
    }

    #[test]
    fn environment_mean_matches_uniform_moments() {
        let env = generate_environment::<f64>(100.0, 70.0, 10_000, 3).unwrap();
        let mut mean = Vector2::zeros();
        for p in env.landmarks.positions() {
            mean += p;
        }
        mean /= env.landmarks.len() as f64;
        assert!((mean.x - 50.0).abs() < 1.0);
        assert!((mean.y - 35.0).abs() < 0.7);
    }

    fn small_params() -> SimParams<f64> {
        let mut params = SimParams::<f64>::standard();
        params.start_pose = Pose2::new(10.0, 10.0, 0.0);
        params
    }

    #[test]
    fn trial_is_reproducible() {
        let env = generate_environment::<f64>(40.0, 40.0, 4, 11).unwrap();
        let mut params = small_params();
        params.icr.iterations = 3;
        let cfg = TrialConfig::new(PolicyKind::Random, 10, 11, params).unwrap();
        let a = run_trial(&env, &cfg).unwrap();
        let b = run_trial(&env, &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.true_poses, b.true_poses);
    }

    #[test]
    fn trial_rejects_bad_step_count() {
        let params = small_params();
        assert!(TrialConfig::new(PolicyKind::Random, 7, 0, params.clone()).is_err());
        assert!(TrialConfig::new(PolicyKind::Random, 0, 0, params).is_err());
    }

    #[test]
    fn metrics_have_expected_length_and_are_finite() {
        let env = generate_environment::<f64>(40.0, 40.0, 5, 2).unwrap();
        let mut params = small_params();
        params.icr.iterations = 2;
        for policy in PolicyKind::ALL {
            let cfg = TrialConfig::new(policy, 10, 5, params.clone()).unwrap();
            let result = run_trial(&env, &cfg).unwrap();
            assert_eq!(result.metrics.len(), 11);
            assert_eq!(result.true_poses.len(), 11);
            for which in 0..6 {
                for v in result.metrics.metric(which) {
                    assert!(v.is_finite(), "{policy:?} metric {which} not finite");
                }
            }
        }
    }

    #[test]
    fn heading_error_never_exceeds_pi() {
        let env = generate_environment::<f64>(40.0, 40.0, 5, 23).unwrap();
        let mut params = small_params();
        params.icr.iterations = 0;
        let cfg = TrialConfig::new(PolicyKind::Random, 20, 9, params).unwrap();
        let result = run_trial(&env, &cfg).unwrap();
        for v in &result.metrics.robot_rmse_theta {
            assert!(*v <= std::f64::consts::PI);
        }
    }

    #[test]
    fn perfect_estimate_gives_zero_rmse() {
        let landmarks = LandmarkSet::new(vec![Vector2::new(1.0, 2.0)]).unwrap();
        let truth = Pose2::new(0.5, -0.5, 0.3);
        let mut mean = DVector::zeros(5);
        mean[0] = 0.5;
        mean[1] = -0.5;
        mean[2] = 0.3;
        mean[3] = 1.0;
        mean[4] = 2.0;
        let belief = JointBelief::new(mean, DMatrix::identity(5, 5)).unwrap();
        let mut series = MetricSeries::default();
        series.push(&truth, &landmarks, &belief);
        assert_eq!(series.robot_rmse_pos[0], 0.0);
        assert_eq!(series.robot_rmse_theta[0], 0.0);
        assert_eq!(series.lm_rmse[0], 0.0);
    }

    #[test]
    fn noiseless_observable_trial_pins_landmarks() {
        // W = 0, Gamma tiny, landmark kept in view: the landmark estimate
        // converges to the truth.
        let landmarks = LandmarkSet::new(vec![Vector2::new(18.0, 10.0)]).unwrap();
        let env = Environment {
            width: 40.0,
            height: 20.0,
            landmarks,
            seed: 0,
        };
        let mut params = small_params();
        params.motion = ProcessNoiseModel::new(Matrix3::zeros(), 1.0).unwrap();
        params.sensor = SensorModel::new(
            Matrix2::from_diagonal(&Vector2::new(1e-12, 1e-12)),
            10.0,
            default_fov(),
        )
        .unwrap();
        params.icr.iterations = 0;
        // Relative-position sensing cannot correct the robot's own
        // initialization error, so the landmark error floor equals it.
        params.init_std = 1e-4;
        params.start_pose = Pose2::new(10.0, 10.0, 0.0);
        let cfg = TrialConfig::new(PolicyKind::IcrOpenLoop, 15, 3, params).unwrap();
        let result = run_trial(&env, &cfg).unwrap();
        let final_rmse = *result.metrics.lm_rmse.last().unwrap();
        assert!(final_rmse < 1e-3, "final landmark RMSE {final_rmse}");
    }

    #[test]
    fn aggregate_examples() {
        let mk = |offset: f64| {
            let mut metrics = MetricSeries::default();
            for which in 0..6 {
                *metrics.metric_mut(which) = vec![offset, offset + 1.0, offset + 2.0];
            }
            TrialResult {
                policy: PolicyKind::Random,
                seed: 0,
                metrics,
                true_poses: vec![],
                est_poses: vec![],
            }
        };
        // Single trial: mean equals the trial, std zero.
        let single = aggregate(&[mk(1.0)]).unwrap();
        assert_eq!(single.mean.robot_rmse_pos, vec![1.0, 2.0, 3.0]);
        assert_eq!(single.std.robot_rmse_pos, vec![0.0, 0.0, 0.0]);

        // Two identical trials: std still zero.
        let twin = aggregate(&[mk(1.0), mk(1.0)]).unwrap();
        assert_eq!(twin.std.lm_rmse, vec![0.0, 0.0, 0.0]);

        // Hand-built three-trial toy: mean and population std.
        let three = aggregate(&[mk(0.0), mk(1.0), mk(5.0)]).unwrap();
        assert_relative_eq!(three.mean.robot_rmse_pos[0], 2.0);
        let expected_std = ((4.0 + 1.0 + 9.0) / 3.0f64).sqrt();
        assert_relative_eq!(three.std.robot_rmse_pos[0], expected_std, epsilon = 1e-12);

        // Length mismatch rejected.
        let mut bad = mk(0.0);
        bad.metrics.robot_rmse_pos.pop();
        assert!(aggregate(&[mk(0.0), bad]).is_err());
        assert!(aggregate::<f64>(&[]).is_err());
    }
}
