//! Finite-difference verification of every analytic Jacobian in the crate.
//!
//! Each suite draws random configurations, compares the analytic derivative
//! against a central finite difference, and reports the worst relative
//! error. The CLI exposes this as `--jacobian-check`; the acceptance tests
//! assert on the same reports.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::covariance::{riccati_jacobians, riccati_step, CovVector};
use crate::geometry::Pose2;
use crate::motion::{jacobians, step, ControlInput, ProcessNoiseModel};
use crate::sensing::{
    body_frame_coords, body_frame_jacobian, info_block, info_block_gradient, LandmarkSet,
    SensorModel,
};
use crate::sim::default_fov;

/// Outcome of one finite-difference suite.
#[derive(Clone, Debug)]
pub struct JacobianReport {
    pub name: &'static str,
    pub samples: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl JacobianReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

const FD_STEP: f64 = 1e-6;

fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd
        .iter()
        .chain(analytic.iter())
        .fold(0.0f64, |a, x| a.max(x.abs()))
        .max(1e-3);
    analytic
        .iter()
        .zip(fd)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
        / scale
}

fn standard_sensor() -> SensorModel<f64> {
    SensorModel::new(
        Matrix2::from_diagonal(&Vector2::new(0.1, 0.1)),
        10.0,
        default_fov(),
    )
    .unwrap()
}

fn standard_model() -> ProcessNoiseModel<f64> {
    ProcessNoiseModel::new(Matrix3::from_diagonal(&Vector3::new(0.1, 0.1, 0.01)), 1.0).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose2<f64> {
    Pose2::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-3.0..3.0),
    )
}

/// Motion Jacobians `E`, `B`, `D` against finite differences of the step
/// function.
pub fn check_motion_jacobians(seed: u64, samples: usize) -> JacobianReport {
    let model = standard_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x = random_pose(&mut rng);
        let u = ControlInput::new(rng.random_range(0.0..3.0), rng.random_range(-1.0..1.0));
        let jac = jacobians(&x, &u, &model);
        let eval = |xv: Vector3<f64>, uv: Vector2<f64>, wv: Vector3<f64>| {
            let pose = Pose2 {
                position: Vector2::new(xv.x, xv.y),
                heading: xv.z,
            };
            step(&pose, &ControlInput::from_vector(&uv), &wv, &model).to_vector()
        };
        let x0 = x.to_vector();
        let u0 = u.to_vector();

        let mut fd_e = Matrix3::zeros();
        let mut fd_b = nalgebra::Matrix3x2::zeros();
        let mut fd_d = Matrix3::zeros();
        for i in 0..3 {
            let mut p = x0;
            let mut m = x0;
            p[i] += FD_STEP;
            m[i] -= FD_STEP;
            fd_e.set_column(i, &((eval(p, u0, Vector3::zeros()) - eval(m, u0, Vector3::zeros())) / (2.0 * FD_STEP)));

            let mut wp = Vector3::zeros();
            let mut wm = Vector3::zeros();
            wp[i] += FD_STEP;
            wm[i] -= FD_STEP;
            fd_d.set_column(i, &((eval(x0, u0, wp) - eval(x0, u0, wm)) / (2.0 * FD_STEP)));
        }
        for i in 0..2 {
            let mut p = u0;
            let mut m = u0;
            p[i] += FD_STEP;
            m[i] -= FD_STEP;
            fd_b.set_column(i, &((eval(x0, p, Vector3::zeros()) - eval(x0, m, Vector3::zeros())) / (2.0 * FD_STEP)));
        }
        worst = worst
            .max(rel_err(jac.e.as_slice(), fd_e.as_slice()))
            .max(rel_err(jac.b.as_slice(), fd_b.as_slice()))
            .max(rel_err(jac.d.as_slice(), fd_d.as_slice()));
    }
    JacobianReport {
        name: "motion E/B/D",
        samples,
        max_rel_err: worst,
        tolerance: 1e-5,
    }
}

/// Body-frame coordinate Jacobian `dq/dx`.
pub fn check_body_frame_jacobian(seed: u64, samples: usize) -> JacobianReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x = random_pose(&mut rng);
        let y = Vector2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
        let analytic = body_frame_jacobian(&x, &y);
        let mut fd = nalgebra::Matrix2x3::zeros();
        let x0 = x.to_vector();
        for i in 0..3 {
            let mut p = x0;
            let mut m = x0;
            p[i] += FD_STEP;
            m[i] -= FD_STEP;
            let qp = body_frame_coords(
                &Pose2 {
                    position: Vector2::new(p.x, p.y),
                    heading: p.z,
                },
                &y,
            );
            let qm = body_frame_coords(
                &Pose2 {
                    position: Vector2::new(m.x, m.y),
                    heading: m.z,
                },
                &y,
            );
            fd.set_column(i, &((qp - qm) / (2.0 * FD_STEP)));
        }
        worst = worst.max(rel_err(analytic.as_slice(), fd.as_slice()));
    }
    JacobianReport {
        name: "body-frame dq/dx",
        samples,
        max_rel_err: worst,
        tolerance: 1e-5,
    }
}

/// Information-block gradient `dM/dx` in the smooth region.
pub fn check_info_block_gradient(seed: u64, samples: usize) -> JacobianReport {
    let sensor = standard_sensor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < samples {
        let x = random_pose(&mut rng);
        let y = Vector2::new(rng.random_range(-30.0..40.0), rng.random_range(-40.0..40.0));
        let g = info_block_gradient(&x, &y, &sensor);
        let scale: f64 = g.wrt_state.iter().map(|m| m.abs().max()).fold(0.0, f64::max);
        if g.at_kink || scale < 1e-6 {
            continue;
        }
        let x0 = x.to_vector();
        for l in 0..3 {
            let mut p = x0;
            let mut m = x0;
            p[l] += FD_STEP;
            m[l] -= FD_STEP;
            let mp = info_block(
                &Pose2 {
                    position: Vector2::new(p.x, p.y),
                    heading: p.z,
                },
                &y,
                &sensor,
            );
            let mm = info_block(
                &Pose2 {
                    position: Vector2::new(m.x, m.y),
                    heading: m.z,
                },
                &y,
                &sensor,
            );
            let fd = (mp - mm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.wrt_state[l].as_slice(), fd.as_slice()));
        }
        done += 1;
    }
    JacobianReport {
        name: "information dM/dx",
        samples,
        max_rel_err: worst,
        tolerance: 1e-4,
    }
}

fn random_cov_vector(rng: &mut ChaCha8Rng, n: usize) -> CovVector<f64> {
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let s1: f64 = rng.random_range(0.5..25.0);
        let s3: f64 = rng.random_range(0.5..25.0);
        let rho: f64 = rng.random_range(-0.8..0.8);
        data.extend_from_slice(&[s1, rho * (s1 * s3).sqrt(), s3]);
    }
    CovVector::new(data).unwrap()
}

/// Riccati Jacobian `F = dg/dsigma` against finite differences.
pub fn check_riccati_f(seed: u64, samples: usize) -> JacobianReport {
    let sensor = standard_sensor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let landmarks = LandmarkSet::new(vec![Vector2::new(
            rng.random_range(-5.0..25.0),
            rng.random_range(-20.0..20.0),
        )])
        .unwrap();
        let sigma = random_cov_vector(&mut rng, 1);
        let x = random_pose(&mut rng);
        let jac = riccati_jacobians(&sigma, &x, &landmarks, &sensor);

        let mut fd = Matrix3::zeros();
        for l in 0..3 {
            let mut up = sigma.as_slice().to_vec();
            let mut dn = up.clone();
            up[l] += FD_STEP;
            dn[l] -= FD_STEP;
            let sp = riccati_step(&CovVector::new(up).unwrap(), &x, &landmarks, &sensor);
            let sm = riccati_step(&CovVector::new(dn).unwrap(), &x, &landmarks, &sensor);
            fd.set_column(l, &((sp.block(0) - sm.block(0)) / (2.0 * FD_STEP)));
        }
        worst = worst.max(rel_err(jac.f_blocks[0].as_slice(), fd.as_slice()));
    }
    JacobianReport {
        name: "Riccati F = dg/dsigma",
        samples,
        max_rel_err: worst,
        tolerance: 1e-5,
    }
}

/// Riccati Jacobian `G = dg/dx` of the composed map `x -> g(sigma, m(x))`.
pub fn check_riccati_g(seed: u64, samples: usize) -> JacobianReport {
    let sensor = standard_sensor();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < samples {
        let landmarks = LandmarkSet::new(vec![Vector2::new(
            rng.random_range(-5.0..25.0),
            rng.random_range(-20.0..20.0),
        )])
        .unwrap();
        let sigma = random_cov_vector(&mut rng, 1);
        let x = random_pose(&mut rng);
        let jac = riccati_jacobians(&sigma, &x, &landmarks, &sensor);
        let scale = jac.g_blocks[0].abs().max();
        if jac.kink_events > 0 || scale < 1e-6 {
            continue;
        }
        let x0 = x.to_vector();
        let mut fd = Matrix3::zeros();
        for l in 0..3 {
            let mut p = x0;
            let mut m = x0;
            p[l] += FD_STEP;
            m[l] -= FD_STEP;
            let sp = riccati_step(
                &sigma,
                &Pose2 {
                    position: Vector2::new(p.x, p.y),
                    heading: p.z,
                },
                &landmarks,
                &sensor,
            );
            let sm = riccati_step(
                &sigma,
                &Pose2 {
                    position: Vector2::new(m.x, m.y),
                    heading: m.z,
                },
                &landmarks,
                &sensor,
            );
            fd.set_column(l, &((sp.block(0) - sm.block(0)) / (2.0 * FD_STEP)));
        }
        worst = worst.max(rel_err(jac.g_blocks[0].as_slice(), fd.as_slice()));
        done += 1;
    }
    JacobianReport {
        name: "Riccati G = dg/dx",
        samples,
        max_rel_err: worst,
        tolerance: 1e-4,
    }
}

/// Run every suite with `samples` draws each.
pub fn run_jacobian_suite(seed: u64, samples: usize) -> Vec<JacobianReport> {
    vec![
        check_motion_jacobians(seed, samples),
        check_body_frame_jacobian(seed.wrapping_add(1), samples),
        check_info_block_gradient(seed.wrapping_add(2), samples),
        check_riccati_f(seed.wrapping_add(3), samples),
        check_riccati_g(seed.wrapping_add(4), samples),
    ]
}
