//! Run trials across policies and seeds, write metric/trajectory CSVs, a
//! cross-trial summary, and a manifest that reproduces the run.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use rayon::prelude::*;

use active_slam::sim::{
    aggregate, generate_environment, run_trial, PolicyKind, TrialConfig, TrialResult,
};

use crate::config::ExperimentConfig;

/// Fixed column order of the per-trial metric files.
pub const METRIC_HEADER: &str = "step,policy,seed,robot_rmse_pos,robot_rmse_theta,robot_entropy,lm_rmse,lm_entropy_avg,joint_entropy";

const TRAJECTORY_HEADER: &str = "step,x_true,y_true,theta_true,x_est,y_est,theta_est";

/// Files written by one experiment run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub trial_files: Vec<PathBuf>,
    pub trajectory_files: Vec<PathBuf>,
    pub summary_file: PathBuf,
    pub manifest_file: PathBuf,
}

impl RunOutput {
    pub fn files(&self) -> impl Iterator<Item = &PathBuf> {
        self.trial_files
            .iter()
            .chain(self.trajectory_files.iter())
            .chain(std::iter::once(&self.summary_file))
            .chain(std::iter::once(&self.manifest_file))
    }
}

fn metric_csv(result: &TrialResult<f64>) -> String {
    let mut out = String::new();
    out.push_str(METRIC_HEADER);
    out.push('\n');
    let m = &result.metrics;
    for step in 0..m.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            step,
            result.policy.as_str(),
            result.seed,
            m.robot_rmse_pos[step],
            m.robot_rmse_theta[step],
            m.robot_entropy[step],
            m.lm_rmse[step],
            m.lm_entropy_avg[step],
            m.joint_entropy[step],
        );
    }
    out
}

fn trajectory_csv(result: &TrialResult<f64>) -> String {
    let mut out = String::new();
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for (step, (truth, est)) in result
        .true_poses
        .iter()
        .zip(result.est_poses.iter())
        .enumerate()
    {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            step,
            truth.position.x,
            truth.position.y,
            truth.heading,
            est.position.x,
            est.position.y,
            est.heading,
        );
    }
    out
}

fn summary_csv(per_policy: &[(PolicyKind, Vec<TrialResult<f64>>)]) -> Result<String> {
    let metrics = [
        "robot_rmse_pos",
        "robot_rmse_theta",
        "robot_entropy",
        "lm_rmse",
        "lm_entropy_avg",
        "joint_entropy",
    ];
    let mut out = String::from("policy,step");
    for name in metrics {
        let _ = write!(out, ",{name}_mean,{name}_std");
    }
    out.push('\n');
    for (policy, results) in per_policy {
        let summary = aggregate(results).context("aggregating trial metrics")?;
        for step in 0..summary.mean.len() {
            let _ = write!(out, "{},{}", policy.as_str(), step);
            let pairs = [
                (&summary.mean.robot_rmse_pos, &summary.std.robot_rmse_pos),
                (&summary.mean.robot_rmse_theta, &summary.std.robot_rmse_theta),
                (&summary.mean.robot_entropy, &summary.std.robot_entropy),
                (&summary.mean.lm_rmse, &summary.std.lm_rmse),
                (&summary.mean.lm_entropy_avg, &summary.std.lm_entropy_avg),
                (&summary.mean.joint_entropy, &summary.std.joint_entropy),
            ];
            for (mean, std) in pairs {
                let _ = write!(out, ",{},{}", mean[step], std[step]);
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Run `trials x policies` simulations and write all output files.
///
/// Trials execute in parallel; every random stream is derived from the
/// per-trial seed, so the output bytes depend only on the resolved config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate().context("validating config")?;
    let resolved = cfg.resolved();
    let params = resolved.sim_params().context("building simulation parameters")?;
    let seeds = resolved.resolved_trial_seeds();
    let out_dir = resolved.resolved_out_dir();
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    let jobs: Vec<(PolicyKind, u64)> = resolved
        .policies
        .iter()
        .flat_map(|p| seeds.iter().map(move |s| (PolicyKind::from(*p), *s)))
        .collect();

    let results: Vec<TrialResult<f64>> = jobs
        .par_iter()
        .map(|(policy, seed)| {
            let env = generate_environment::<f64>(
                resolved.environment.width,
                resolved.environment.height,
                resolved.environment.n_landmarks,
                *seed,
            )?;
            let trial = TrialConfig::new(*policy, resolved.total_steps, *seed, params.clone())?;
            run_trial(&env, &trial)
        })
        .collect::<std::result::Result<_, _>>()
        .context("running trials")?;

    let mut trial_files = Vec::new();
    let mut trajectory_files = Vec::new();
    for result in &results {
        let stem = format!("{}_{}", result.policy.as_str(), result.seed);
        let metric_path = out_dir.join(format!("trial_{stem}.csv"));
        fs::write(&metric_path, metric_csv(result))
            .with_context(|| format!("writing {}", metric_path.display()))?;
        trial_files.push(metric_path);
        let traj_path = out_dir.join(format!("traj_{stem}.csv"));
        fs::write(&traj_path, trajectory_csv(result))
            .with_context(|| format!("writing {}", traj_path.display()))?;
        trajectory_files.push(traj_path);
    }

    let per_policy: Vec<(PolicyKind, Vec<TrialResult<f64>>)> = resolved
        .policies
        .iter()
        .map(|p| {
            let kind = PolicyKind::from(*p);
            (
                kind,
                results
                    .iter()
                    .filter(|r| r.policy == kind)
                    .cloned()
                    .collect(),
            )
        })
        .collect();
    let summary_file = out_dir.join("summary.csv");
    fs::write(&summary_file, summary_csv(&per_policy)?)
        .with_context(|| format!("writing {}", summary_file.display()))?;

    let manifest_file = out_dir.join("manifest.toml");
    let manifest = toml::to_string_pretty(&resolved).context("serializing manifest")?;
    fs::write(&manifest_file, manifest)
        .with_context(|| format!("writing {}", manifest_file.display()))?;

    Ok(RunOutput {
        out_dir,
        trial_files,
        trajectory_files,
        summary_file,
        manifest_file,
    })
}
