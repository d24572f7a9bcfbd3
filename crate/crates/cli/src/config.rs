//! Experiment configuration: TOML format, defaults, and validation.
//!
//! An empty file (or no file) yields the stock parameter set. Unknown keys
//! are rejected. A manifest written by a previous run is itself a valid
//! config and reproduces that run exactly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use active_slam::geometry::{FovPolygon, Pose2};
use active_slam::icr::IcrConfig;
use active_slam::lqr::LqrWeights;
use active_slam::motion::{ControlBounds, ProcessNoiseModel};
use active_slam::sensing::SensorModel;
use active_slam::sim::{PolicyKind, SimParams};

/// Config-level policy name; mirrors [`PolicyKind`] with serde support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Random,
    IcrOpenLoop,
    IcrLqr,
}

impl From<PolicyChoice> for PolicyKind {
    fn from(p: PolicyChoice) -> PolicyKind {
        match p {
            PolicyChoice::Random => PolicyKind::Random,
            PolicyChoice::IcrOpenLoop => PolicyKind::IcrOpenLoop,
            PolicyChoice::IcrLqr => PolicyKind::IcrLqr,
        }
    }
}

impl fmt::Display for PolicyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(PolicyKind::from(*self).as_str())
    }
}

impl FromStr for PolicyChoice {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "random" => Ok(PolicyChoice::Random),
            "icr_open_loop" => Ok(PolicyChoice::IcrOpenLoop),
            "icr_lqr" => Ok(PolicyChoice::IcrLqr),
            other => Err(ConfigError::Invalid {
                field: "policies".into(),
                reason: format!(
                    "unknown policy '{other}' (expected random, icr_open_loop, icr_lqr)"
                ),
            }),
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// TOML syntax or schema error; the message carries line information.
    Parse {
        path: PathBuf,
        message: String,
    },
    Invalid {
        field: String,
        reason: String,
    },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, source } => {
                write!(f, "cannot read config {}: {source}", path.display())
            }
            ConfigError::Parse { path, message } => {
                write!(f, "cannot parse config {}: {message}", path.display())
            }
            ConfigError::Invalid { field, reason } => {
                write!(f, "invalid config: {field}: {reason}")
            }
        }
    }
}

impl std::error::Error for ConfigError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ConfigError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentSection {
    pub width: f64,
    pub height: f64,
    pub n_landmarks: usize,
}

impl Default for EnvironmentSection {
    fn default() -> Self {
        EnvironmentSection {
            width: 100.0,
            height: 70.0,
            n_landmarks: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSection {
    /// Time step, seconds.
    pub tau: f64,
    /// Diagonal of the per-step process noise covariance `W`.
    pub w_diag: [f64; 3],
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for MotionSection {
    fn default() -> Self {
        MotionSection {
            tau: 1.0,
            w_diag: [0.1, 0.1, 0.01],
            v_max: 3.0,
            omega_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSection {
    /// Diagonal of the measurement noise covariance `Gamma`.
    pub gamma_diag: [f64; 2],
    /// Smoothness of the differentiable field of view.
    pub kappa: f64,
    /// Convex counterclockwise polygon in the body frame, meters.
    pub fov_vertices: Vec<[f64; 2]>,
}

impl Default for SensorSection {
    fn default() -> Self {
        let half_width = 20.0 * 60f64.to_radians().tan();
        SensorSection {
            gamma_diag: [0.1, 0.1],
            kappa: 10.0,
            fov_vertices: vec![[0.0, 0.0], [20.0, -half_width], [20.0, half_width]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcrSection {
    /// Planning horizon K, steps.
    pub horizon: usize,
    pub iterations: usize,
    /// Per-channel gradient step sizes (v, omega).
    pub alpha: [f64; 2],
    pub backtracking: bool,
    /// Seed each phase with the previous phase's optimized controls.
    pub warm_start: bool,
}

impl Default for IcrSection {
    fn default() -> Self {
        IcrSection {
            horizon: 5,
            iterations: 10,
            alpha: [0.005, 0.0005],
            backtracking: false,
            warm_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqrSection {
    pub q_robot_diag: [f64; 3],
    /// Per-landmark 3x3 weight pattern, repeated over blocks.
    pub q_sigma_block_diag: [f64; 3],
    pub r: [[f64; 2]; 2],
}

impl Default for LqrSection {
    fn default() -> Self {
        LqrSection {
            q_robot_diag: [10.0, 10.0, 1.0],
            q_sigma_block_diag: [1.0, 0.1, 1.0],
            r: [[20.0, 5.0], [5.0, 10.0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    /// Standard deviation of the initialization noise; its square is the
    /// initial covariance diagonal.
    pub std_dev: f64,
    /// Whether the heading coordinate also receives initialization noise.
    pub heading_noise: bool,
    /// Ground-truth start pose `[x, y, theta]`; defaults to the center of
    /// the environment facing +x.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_pose: Option<[f64; 3]>,
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection {
            std_dev: 5.0,
            heading_noise: false,
            start_pose: None,
        }
    }
}

/// Full experiment description; every field has a stock default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; trial seeds derive from it unless listed explicitly.
    pub seed: u64,
    /// Number of environments per policy.
    pub trials: usize,
    pub policies: Vec<PolicyChoice>,
    /// Output directory; falls back to `ACTIVE_SLAM_OUT_DIR` or `runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Steps per trial; must be a multiple of the planning horizon.
    pub total_steps: usize,
    /// Explicit per-trial seeds (written out in manifests).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trial_seeds: Option<Vec<u64>>,
    pub environment: EnvironmentSection,
    pub motion: MotionSection,
    pub sensor: SensorSection,
    pub icr: IcrSection,
    pub lqr: LqrSection,
    pub init: InitSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            trials: 5,
            policies: vec![
                PolicyChoice::Random,
                PolicyChoice::IcrOpenLoop,
                PolicyChoice::IcrLqr,
            ],
            out_dir: None,
            total_steps: 60,
            trial_seeds: None,
            environment: EnvironmentSection::default(),
            motion: MotionSection::default(),
            sensor: SensorSection::default(),
            icr: IcrSection::default(),
            lqr: LqrSection::default(),
            init: InitSection::default(),
        }
    }
}

/// Load and validate a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.trials == 0 {
            return Err(invalid("trials", "must be at least 1"));
        }
        if self.policies.is_empty() {
            return Err(invalid("policies", "must not be empty"));
        }
        if let Some(seeds) = &self.trial_seeds {
            if seeds.len() != self.trials {
                return Err(invalid(
                    "trial_seeds",
                    format!("has {} entries for {} trials", seeds.len(), self.trials),
                ));
            }
        }
        if self.environment.width <= 0.0 || self.environment.height <= 0.0 {
            return Err(invalid("environment", "bounds must be positive"));
        }
        if self.environment.n_landmarks == 0 {
            return Err(invalid("environment.n_landmarks", "must be at least 1"));
        }
        if self.motion.tau <= 0.0 {
            return Err(invalid("motion.tau", "must be positive"));
        }
        if self.motion.w_diag.iter().any(|w| *w < 0.0) {
            return Err(invalid("motion.w_diag", "entries must be nonnegative"));
        }
        if self.motion.v_max <= 0.0 || self.motion.omega_max <= 0.0 {
            return Err(invalid("motion", "control bounds must be positive"));
        }
        if self.sensor.kappa <= 0.0 {
            return Err(invalid("sensor.kappa", "must be positive"));
        }
        if self.sensor.gamma_diag.iter().any(|g| *g <= 0.0) {
            return Err(invalid("sensor.gamma_diag", "entries must be positive"));
        }
        if self.sensor.fov_vertices.len() < 3 {
            return Err(invalid("sensor.fov_vertices", "need at least 3 vertices"));
        }
        if self.icr.horizon == 0 {
            return Err(invalid("icr.horizon", "must be at least 1"));
        }
        if self.icr.alpha.iter().any(|a| *a <= 0.0) {
            return Err(invalid("icr.alpha", "entries must be positive"));
        }
        if self.total_steps == 0 || self.total_steps % self.icr.horizon != 0 {
            return Err(invalid(
                "total_steps",
                format!(
                    "{} is not a positive multiple of icr.horizon = {}",
                    self.total_steps, self.icr.horizon
                ),
            ));
        }
        if self.init.std_dev < 0.0 {
            return Err(invalid("init.std_dev", "must be nonnegative"));
        }
        // Delegate the geometric and spectral checks to the core
        // constructors so the config can't describe an unbuildable model.
        self.sim_params()?;
        Ok(())
    }

    /// Trial seeds: explicit list, or `seed + index`.
    pub fn resolved_trial_seeds(&self) -> Vec<u64> {
        self.trial_seeds.clone().unwrap_or_else(|| {
            (0..self.trials as u64).map(|i| self.seed.wrapping_add(i)).collect()
        })
    }

    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os("ACTIVE_SLAM_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn start_pose(&self) -> Pose2<f64> {
        match self.init.start_pose {
            Some([x, y, theta]) => Pose2::new(x, y, theta),
            None => Pose2::new(
                0.5 * self.environment.width,
                0.5 * self.environment.height,
                0.0,
            ),
        }
    }

    /// Build the core parameter set from the config.
    pub fn sim_params(&self) -> Result<SimParams<f64>, ConfigError> {
        let motion = ProcessNoiseModel::new(
            Matrix3::from_diagonal(&Vector3::from_row_slice(&self.motion.w_diag)),
            self.motion.tau,
        )
        .map_err(|e| invalid("motion.w_diag", e.to_string()))?;
        let bounds = ControlBounds::new(self.motion.v_max, self.motion.omega_max)
            .map_err(|e| invalid("motion", e.to_string()))?;
        let fov = FovPolygon::new(
            self.sensor
                .fov_vertices
                .iter()
                .map(|v| Vector2::new(v[0], v[1]))
                .collect(),
        )
        .map_err(|e| invalid("sensor.fov_vertices", e.to_string()))?;
        let sensor = SensorModel::new(
            Matrix2::from_diagonal(&Vector2::from_row_slice(&self.sensor.gamma_diag)),
            self.sensor.kappa,
            fov,
        )
        .map_err(|e| invalid("sensor", e.to_string()))?;
        let icr = IcrConfig::new(
            self.icr.horizon,
            self.icr.iterations,
            Vector2::from_row_slice(&self.icr.alpha),
            bounds,
        )
        .map_err(|e| invalid("icr", e.to_string()))?
        .with_backtracking(self.icr.backtracking);
        let lqr = LqrWeights::new(
            Matrix3::from_diagonal(&Vector3::from_row_slice(&self.lqr.q_robot_diag)),
            Matrix3::from_diagonal(&Vector3::from_row_slice(&self.lqr.q_sigma_block_diag)),
            Matrix2::new(
                self.lqr.r[0][0],
                self.lqr.r[0][1],
                self.lqr.r[1][0],
                self.lqr.r[1][1],
            ),
        )
        .map_err(|e| invalid("lqr.r", e.to_string()))?;
        Ok(SimParams {
            motion,
            bounds,
            sensor,
            icr,
            lqr,
            init_std: self.init.std_dev,
            init_heading_noise: self.init.heading_noise,
            warm_start: self.icr.warm_start,
            start_pose: self.start_pose(),
        })
    }

    /// The config with every run-affecting field written explicitly, as
    /// recorded in manifests.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut out = self.clone();
        out.trial_seeds = Some(self.resolved_trial_seeds());
        out.out_dir = Some(self.resolved_out_dir());
        out.init.start_pose = Some({
            let p = self.start_pose();
            [p.position.x, p.position.y, p.heading]
        });
        out
    }
}
