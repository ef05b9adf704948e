//! Monte-Carlo studies: estimator consistency, keyframe-policy comparison
//! and the effect of windowed bundle adjustment.
//!
//! Every trial draws from its own RNG stream derived from the master seed
//! and the trial coordinates, trials run on a rayon pool and results are
//! reduced in trial order, so reports are identical for any worker count.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConsistencySettings, ExperimentConfig};
use crate::evaluation::{evaluate, loglog_slope, EvaluationError, MetricReport, TrajectoryPair};
use crate::geometry::{NormalizedPoint2, RigidTransform, Rotation};
use crate::noise::{estimate_sigma2, NoiseError};
use crate::pipeline::{
    make_keyframe, run_odometry, track_frame, FrameDiagnostics, KfPolicy, PipelineConfig,
    PipelineError,
};
use crate::pnp::{solve_bias_eliminated, solve_biased_pose, PnPProblem, PnpError};
use crate::scene::{
    mix_seed, stream_rng, FrameObservations, ObservationRecord, Scene, SceneError, TrajectoryKind,
};
use crate::triangulation::{triangulate_with_cov, StereoRig, TriangulationError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Pnp(#[from] PnpError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Triangulation(#[from] TriangulationError),
    #[error("could not place {wanted} visible points (placed {placed})")]
    PointPlacement { wanted: usize, placed: usize },
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Runs `f` on a pool of `workers` threads; 0 uses the global pool.
pub fn with_workers<T, F>(workers: usize, f: F) -> Result<T, ExperimentError>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Fixed-width scientific notation with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn rmse(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        (s / n as f64).sqrt()
    }
}

// ---------------------------------------------------------------------------
// consistency

/// Errors of one consistency trial: noise std in pixels, pose errors of the
/// bias-eliminated and the plain linear estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialErrors {
    pub sigma_err_px: f64,
    pub rot_deg: f64,
    pub trans_m: f64,
    pub rot_biased_deg: f64,
    pub trans_biased_m: f64,
}

fn random_relative_pose<R: Rng>(rng: &mut R, s: &ConsistencySettings) -> RigidTransform {
    let axis = loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if v.norm() > 1e-6 {
            break v;
        }
    };
    let angle = rng.random_range(0.0..=s.max_rotation_deg.to_radians());
    let t = s.max_translation_m;
    RigidTransform::new(
        Rotation::from_axis_angle(&axis, angle),
        Vector3::new(
            rng.random_range(-t..=t),
            rng.random_range(-t..=t),
            rng.random_range(-t..=t),
        ),
    )
}

/// Keyframe-to-current geometry of one trial with noisy observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    /// Maps keyframe coordinates into the current frame.
    pub pose: RigidTransform,
    /// Noisy stereo matches `(right, left)` in the keyframe.
    pub stereo: Vec<(NormalizedPoint2, NormalizedPoint2)>,
    /// Noisy left observations in the current frame.
    pub current: Vec<NormalizedPoint2>,
}

/// A random keyframe-to-current pose and `n` points placed uniformly over
/// the left keyframe image with uniform depth, visible in all three images,
/// with noise of `sigma_px` on every observation. The same `seed` gives the
/// same geometry and unit noise draws for any `sigma_px`.
pub fn sample_trial(
    rig: &StereoRig,
    depth_range: (f64, f64),
    settings: &ConsistencySettings,
    sigma_px: f64,
    n: usize,
    seed: u64,
) -> Result<TrialData, ExperimentError> {
    let mut rng = stream_rng(seed, 0);
    let pose = random_relative_pose(&mut rng, settings);
    let sigma = sigma_px / rig.focal_px;
    let (w, h) = (f64::from(rig.image_size.0), f64::from(rig.image_size.1));
    let noisy = |p: NormalizedPoint2, rng: &mut rand_chacha::ChaCha8Rng| {
        let dx: f64 = StandardNormal.sample(rng);
        let dy: f64 = StandardNormal.sample(rng);
        NormalizedPoint2::new(p.x() + sigma * dx, p.y() + sigma * dy)
    };
    let mut stereo = Vec::with_capacity(n);
    let mut current = Vec::with_capacity(n);
    let max_attempts = 1000 * n.max(1);
    let mut attempts = 0;
    while stereo.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(ExperimentError::PointPlacement {
                wanted: n,
                placed: stereo.len(),
            });
        }
        let pixel = nalgebra::Vector2::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
        let depth = rng.random_range(depth_range.0..=depth_range.1);
        let p = rig.pixel_to_normalized(&pixel).homogeneous() * depth;
        let q = pose.apply(&p);
        let (Some(right), Some(left)) = (rig.project_right(&p), rig.project_left(&p)) else {
            continue;
        };
        let Some(cf) = (q.z >= depth_range.0)
            .then(|| rig.project_left(&q))
            .flatten()
        else {
            continue;
        };
        if !(rig.contains(&right) && rig.contains(&cf)) {
            continue;
        }
        let (x, y, z) = (
            noisy(right, &mut rng),
            noisy(left, &mut rng),
            noisy(cf, &mut rng),
        );
        stereo.push((x, y));
        current.push(z);
    }
    Ok(TrialData {
        pose,
        stereo,
        current,
    })
}

fn pose_error(est: &RigidTransform, truth: &RigidTransform) -> (f64, f64) {
    (
        est.rotation.angle_to(&truth.rotation).to_degrees(),
        (est.translation - truth.translation).norm(),
    )
}

/// One consistency trial: σ̂ from the stereo matches, triangulation with
/// covariance, then the bias-eliminated and the plain linear estimates.
pub fn consistency_trial(
    rig: &StereoRig,
    depth_range: (f64, f64),
    settings: &ConsistencySettings,
    sigma_px: f64,
    n: usize,
    seed: u64,
) -> Result<TrialErrors, ExperimentError> {
    let data = sample_trial(rig, depth_range, settings, sigma_px, n, seed)?;
    let noise = estimate_sigma2(&data.stereo, rig)?;
    let points = data
        .stereo
        .iter()
        .map(|(x, y)| triangulate_with_cov(x, y, rig, &noise))
        .collect::<Result<Vec<_>, _>>()?;
    let problem = PnPProblem::new(points, data.current)?;
    let (rot_deg, trans_m) = pose_error(&solve_bias_eliminated(&problem)?.pose, &data.pose);
    let (rot_biased_deg, trans_biased_m) = pose_error(&solve_biased_pose(&problem)?, &data.pose);
    Ok(TrialErrors {
        sigma_err_px: noise.sigma() * rig.focal_px - sigma_px,
        rot_deg,
        trans_m,
        rot_biased_deg,
        trans_biased_m,
    })
}

/// Tracks one trial through the pipeline's tracking stage (keyframe
/// triangulation, ℓ1 prefilter, bias-eliminated solve, TLS refinement),
/// starting from the identity. With `outlier_ratio > 0`, that fraction of
/// the current-frame observations is replaced by uniform pixels drawn from
/// a separate stream, so the inliers match the outlier-free trial.
/// Returns rotation (degrees) and translation (meters) errors.
pub fn robustness_trial(
    rig: &StereoRig,
    depth_range: (f64, f64),
    settings: &ConsistencySettings,
    pipeline: &PipelineConfig,
    sigma_px: f64,
    n: usize,
    outlier_ratio: f64,
    seed: u64,
) -> Result<(f64, f64), ExperimentError> {
    let mut data = sample_trial(rig, depth_range, settings, sigma_px, n, seed)?;
    let mut rng = stream_rng(seed, 1);
    let n_out = (outlier_ratio * n as f64).round() as usize;
    let (w, h) = (f64::from(rig.image_size.0), f64::from(rig.image_size.1));
    for i in rand::seq::index::sample(&mut rng, n, n_out.min(n)) {
        let pixel = nalgebra::Vector2::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
        data.current[i] = rig.pixel_to_normalized(&pixel);
    }
    let kf_frame = FrameObservations {
        index: 0,
        pose: RigidTransform::identity(),
        records: data
            .stereo
            .iter()
            .enumerate()
            .map(|(i, (x, y))| ObservationRecord {
                id: i as u64,
                left: *y,
                right: Some(*x),
                is_outlier: false,
            })
            .collect(),
    };
    let cf_frame = FrameObservations {
        index: 1,
        pose: data.pose.inverse(),
        records: data
            .current
            .iter()
            .enumerate()
            .map(|(i, z)| ObservationRecord {
                id: i as u64,
                left: *z,
                right: None,
                is_outlier: false,
            })
            .collect(),
    };
    let kf = make_keyframe(&kf_frame, RigidTransform::identity(), rig, pipeline, None)?;
    let tracked = track_frame(&[kf], &cf_frame, pipeline, &RigidTransform::identity())?;
    Ok(pose_error(&tracked.pose, &data.pose))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyCell {
    pub sigma_px: f64,
    pub n: usize,
    pub trials: usize,
    pub failures: usize,
    pub rmse_sigma_px: f64,
    pub rmse_rot_deg: f64,
    pub rmse_trans_m: f64,
    pub rmse_rot_biased_deg: f64,
    pub rmse_trans_biased_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeEntry {
    pub sigma_px: f64,
    pub quantity: &'static str,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub cells: Vec<ConsistencyCell>,
    pub slopes: Vec<SlopeEntry>,
}

pub const CONSISTENCY_RESULTS_HEADER: &str = "sigma_px,n,trials,failures,rmse_sigma,rmse_rot_deg,rmse_trans_m,rmse_rot_biased_deg,rmse_trans_biased_m";
pub const CONSISTENCY_SUMMARY_HEADER: &str = "sigma_px,quantity,slope";

/// Seed of trial `trial` at point count `n`; shared by all noise levels.
pub fn consistency_seed(master: u64, n: usize, trial: usize) -> u64 {
    mix_seed(mix_seed(master, n as u64), trial as u64)
}

pub fn run_consistency(
    cfg: &ExperimentConfig,
    master: u64,
    trials: usize,
) -> Result<ConsistencyReport, ExperimentError> {
    let settings = &cfg.consistency;
    let rig = &cfg.scene.rig;
    let mut cells = Vec::new();
    for &sigma_px in &settings.sigmas_px {
        for &n in &settings.point_counts {
            let results: Vec<Result<TrialErrors, ExperimentError>> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    consistency_trial(
                        rig,
                        cfg.scene.depth_range,
                        settings,
                        sigma_px,
                        n,
                        consistency_seed(master, n, t),
                    )
                })
                .collect();
            let ok: Vec<TrialErrors> = results
                .iter()
                .filter_map(|r| r.as_ref().ok().copied())
                .collect();
            if let Some(Err(e)) = results.iter().find(|r| r.is_err()) {
                log::warn!(
                    "sigma {sigma_px} px, n {n}: {} failed trials, first: {e}",
                    trials - ok.len()
                );
            }
            cells.push(ConsistencyCell {
                sigma_px,
                n,
                trials,
                failures: trials - ok.len(),
                rmse_sigma_px: rmse(ok.iter().map(|e| e.sigma_err_px)),
                rmse_rot_deg: rmse(ok.iter().map(|e| e.rot_deg)),
                rmse_trans_m: rmse(ok.iter().map(|e| e.trans_m)),
                rmse_rot_biased_deg: rmse(ok.iter().map(|e| e.rot_biased_deg)),
                rmse_trans_biased_m: rmse(ok.iter().map(|e| e.trans_biased_m)),
            });
        }
    }
    let mut slopes = Vec::new();
    for &sigma_px in &settings.sigmas_px {
        let row: Vec<&ConsistencyCell> = cells.iter().filter(|c| c.sigma_px == sigma_px).collect();
        let quantities: [(&'static str, fn(&ConsistencyCell) -> f64); 3] = [
            ("rmse_sigma", |c| c.rmse_sigma_px),
            ("rmse_rot_deg", |c| c.rmse_rot_deg),
            ("rmse_trans_m", |c| c.rmse_trans_m),
        ];
        for (quantity, get) in quantities {
            let points: Vec<(f64, f64)> = row.iter().map(|c| (c.n as f64, get(c))).collect();
            slopes.push(SlopeEntry {
                sigma_px,
                quantity,
                slope: loglog_slope(&points)?,
            });
        }
    }
    Ok(ConsistencyReport { cells, slopes })
}

impl ConsistencyReport {
    pub fn results_csv(&self) -> String {
        let mut out = format!("{CONSISTENCY_RESULTS_HEADER}\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                fmt_float(c.sigma_px),
                c.n,
                c.trials,
                c.failures,
                fmt_float(c.rmse_sigma_px),
                fmt_float(c.rmse_rot_deg),
                fmt_float(c.rmse_trans_m),
                fmt_float(c.rmse_rot_biased_deg),
                fmt_float(c.rmse_trans_biased_m)
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{CONSISTENCY_SUMMARY_HEADER}\n");
        for s in &self.slopes {
            let _ = writeln!(
                out,
                "{},{},{}",
                fmt_float(s.sigma_px),
                s.quantity,
                fmt_float(s.slope)
            );
        }
        out
    }

    pub fn cell(&self, sigma_px: f64, n: usize) -> Option<&ConsistencyCell> {
        self.cells
            .iter()
            .find(|c| c.sigma_px == sigma_px && c.n == n)
    }
}

// ---------------------------------------------------------------------------
// odometry studies

pub const KF_COMPARE_POLICIES: [KfPolicy; 4] = [
    KfPolicy::Latest,
    KfPolicy::MultiKeyframe(2),
    KfPolicy::MultiKeyframe(3),
    KfPolicy::LatestWithBa,
];

pub const BA_EFFECT_POLICIES: [KfPolicy; 2] = [KfPolicy::Latest, KfPolicy::LatestWithBa];

pub fn trajectory_label(t: TrajectoryKind) -> &'static str {
    match t {
        TrajectoryKind::Line => "line",
        TrajectoryKind::Circle => "circle",
    }
}

fn trajectory_index(t: TrajectoryKind) -> u64 {
    match t {
        TrajectoryKind::Line => 0,
        TrajectoryKind::Circle => 1,
    }
}

/// Scene seed of repetition `run` on trajectory `t`; shared by all policies.
pub fn scene_seed(master: u64, t: TrajectoryKind, run: usize) -> u64 {
    mix_seed(mix_seed(master, trajectory_index(t)), run as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub trajectory: TrajectoryKind,
    pub policy: KfPolicy,
    pub run: usize,
    pub metrics: MetricReport,
    pub dropped_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRow {
    pub trajectory: TrajectoryKind,
    pub policy: KfPolicy,
    pub run: usize,
    pub diagnostics: FrameDiagnostics,
}

/// Mean over repetitions of the per-run RMSE metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySummary {
    pub trajectory: TrajectoryKind,
    pub policy: KfPolicy,
    pub runs: usize,
    pub mean: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryReport {
    pub runs: Vec<RunMetrics>,
    pub frames: Vec<FrameRow>,
    pub summary: Vec<PolicySummary>,
}

pub const FRAMES_HEADER: &str = "trajectory,policy,run,frame,keyframe,dropped,correspondences,inliers,sigma_px,abs_rot_deg,abs_trans_m,rel_rot_deg,rel_trans_m";
pub const RUNS_HEADER: &str = "trajectory,policy,run,ate_t,ate_r,rpe_t,rpe_r,dropped_frames";
pub const SUMMARY_HEADER: &str = "trajectory,policy,runs,ate_t,ate_r,rpe_t,rpe_r";
pub const PAIRED_HEADER: &str = "trajectory,metric,without_ba,with_ba,ratio";

fn metric_fields(m: &MetricReport) -> String {
    format!(
        "{},{},{},{}",
        fmt_float(m.ate_t),
        fmt_float(m.ate_r),
        fmt_float(m.rpe_t),
        fmt_float(m.rpe_r)
    )
}

/// Runs every policy on `reps` scenes of every trajectory. Scenes are
/// shared across policies (paired comparison).
pub fn run_policies(
    cfg: &ExperimentConfig,
    master: u64,
    reps: usize,
    trajectories: &[TrajectoryKind],
    policies: &[KfPolicy],
) -> Result<OdometryReport, ExperimentError> {
    let jobs: Vec<(TrajectoryKind, usize)> = trajectories
        .iter()
        .flat_map(|&t| (0..reps).map(move |r| (t, r)))
        .collect();
    let outcomes: Vec<Result<Vec<(RunMetrics, Vec<FrameRow>)>, ExperimentError>> = jobs
        .par_iter()
        .map(|&(trajectory, run)| {
            let mut scene_cfg = cfg.scene.clone();
            scene_cfg.trajectory = trajectory;
            scene_cfg.seed = scene_seed(master, trajectory, run);
            let scene = Scene::generate(&scene_cfg)?;
            policies
                .iter()
                .map(|&policy| {
                    let pipeline = PipelineConfig {
                        kf_policy: policy,
                        ..cfg.pipeline.clone()
                    };
                    let out = run_odometry(&scene, &pipeline)?;
                    let pair = TrajectoryPair::new(out.estimated, out.ground_truth)?;
                    let metrics = evaluate(&pair);
                    let rows = out
                        .diagnostics
                        .iter()
                        .map(|d| FrameRow {
                            trajectory,
                            policy,
                            run,
                            diagnostics: *d,
                        })
                        .collect();
                    Ok((
                        RunMetrics {
                            trajectory,
                            policy,
                            run,
                            metrics,
                            dropped_frames: out.diagnostics.iter().filter(|d| d.dropped).count(),
                        },
                        rows,
                    ))
                })
                .collect()
        })
        .collect();

    let mut runs = Vec::new();
    let mut frames = Vec::new();
    for outcome in outcomes {
        for (m, rows) in outcome? {
            runs.push(m);
            frames.extend(rows);
        }
    }
    let order = |t: TrajectoryKind, p: KfPolicy| {
        (
            trajectories.iter().position(|&x| x == t),
            policies.iter().position(|&x| x == p),
        )
    };
    runs.sort_by_key(|r| (order(r.trajectory, r.policy), r.run));
    frames.sort_by_key(|f| (order(f.trajectory, f.policy), f.run, f.diagnostics.frame));

    let mut summary = Vec::new();
    for &trajectory in trajectories {
        for &policy in policies {
            let sel: Vec<&MetricReport> = runs
                .iter()
                .filter(|r| r.trajectory == trajectory && r.policy == policy)
                .map(|r| &r.metrics)
                .collect();
            let k = sel.len() as f64;
            let mean = MetricReport {
                ate_t: sel.iter().map(|m| m.ate_t).sum::<f64>() / k,
                ate_r: sel.iter().map(|m| m.ate_r).sum::<f64>() / k,
                rpe_t: sel.iter().map(|m| m.rpe_t).sum::<f64>() / k,
                rpe_r: sel.iter().map(|m| m.rpe_r).sum::<f64>() / k,
            };
            summary.push(PolicySummary {
                trajectory,
                policy,
                runs: sel.len(),
                mean,
            });
        }
    }
    Ok(OdometryReport {
        runs,
        frames,
        summary,
    })
}

pub fn run_kf_compare(
    cfg: &ExperimentConfig,
    master: u64,
    reps: usize,
) -> Result<OdometryReport, ExperimentError> {
    run_policies(
        cfg,
        master,
        reps,
        &[TrajectoryKind::Line, TrajectoryKind::Circle],
        &KF_COMPARE_POLICIES,
    )
}

pub fn run_ba_effect(
    cfg: &ExperimentConfig,
    master: u64,
    reps: usize,
) -> Result<OdometryReport, ExperimentError> {
    run_policies(
        cfg,
        master,
        reps,
        &[TrajectoryKind::Line, TrajectoryKind::Circle],
        &BA_EFFECT_POLICIES,
    )
}

/// The configured trajectory and policy.
pub fn run_single_pipeline(
    cfg: &ExperimentConfig,
    master: u64,
    reps: usize,
) -> Result<OdometryReport, ExperimentError> {
    run_policies(
        cfg,
        master,
        reps,
        &[cfg.scene.trajectory],
        &[cfg.pipeline.kf_policy],
    )
}

impl OdometryReport {
    pub fn summary_for(&self, t: TrajectoryKind, p: KfPolicy) -> Option<&MetricReport> {
        self.summary
            .iter()
            .find(|s| s.trajectory == t && s.policy == p)
            .map(|s| &s.mean)
    }

    pub fn runs_for(&self, t: TrajectoryKind, p: KfPolicy) -> Vec<&MetricReport> {
        self.runs
            .iter()
            .filter(|r| r.trajectory == t && r.policy == p)
            .map(|r| &r.metrics)
            .collect()
    }

    /// Per-frame diagnostics.
    pub fn frames_csv(&self) -> String {
        let mut out = format!("{FRAMES_HEADER}\n");
        for f in &self.frames {
            let d = &f.diagnostics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                trajectory_label(f.trajectory),
                f.policy.label(),
                f.run,
                d.frame,
                u8::from(d.is_keyframe),
                u8::from(d.dropped),
                d.n_correspondences,
                d.n_inliers,
                fmt_float(d.sigma_px),
                fmt_float(d.abs_rot_deg),
                fmt_float(d.abs_trans_m),
                fmt_float(d.rel_rot_deg),
                fmt_float(d.rel_trans_m)
            );
        }
        out
    }

    /// Per-run metrics.
    pub fn runs_csv(&self) -> String {
        let mut out = format!("{RUNS_HEADER}\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                trajectory_label(r.trajectory),
                r.policy.label(),
                r.run,
                metric_fields(&r.metrics),
                r.dropped_frames
            );
        }
        out
    }

    /// Mean metrics per trajectory and policy.
    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                trajectory_label(s.trajectory),
                s.policy.label(),
                s.runs,
                metric_fields(&s.mean)
            );
        }
        out
    }

    /// Side-by-side means without and with bundle adjustment, and their
    /// ratio (without / with).
    pub fn paired_ba_csv(&self) -> String {
        let mut out = format!("{PAIRED_HEADER}\n");
        let mut trajectories: Vec<TrajectoryKind> = Vec::new();
        for s in &self.summary {
            if !trajectories.contains(&s.trajectory) {
                trajectories.push(s.trajectory);
            }
        }
        for t in trajectories {
            let (Some(a), Some(b)) = (
                self.summary_for(t, KfPolicy::Latest),
                self.summary_for(t, KfPolicy::LatestWithBa),
            ) else {
                continue;
            };
            let metrics: [(&str, f64, f64); 4] = [
                ("ate_t", a.ate_t, b.ate_t),
                ("ate_r", a.ate_r, b.ate_r),
                ("rpe_t", a.rpe_t, b.rpe_t),
                ("rpe_r", a.rpe_r, b.rpe_r),
            ];
            for (name, without, with) in metrics {
                let _ = writeln!(
                    out,
                    "{},{name},{},{},{}",
                    trajectory_label(t),
                    fmt_float(without),
                    fmt_float(with),
                    fmt_float(without / with)
                );
            }
        }
        out
    }
}
