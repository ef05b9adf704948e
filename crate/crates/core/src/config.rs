//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys and malformed values are errors that name the line.
//! An empty file yields [`ExperimentConfig::default`].

use std::fmt::Write as _;

use nalgebra::Vector3;
use thiserror::Error;

use crate::epipolar_ba::PairPolicy;
use crate::geometry::RigidTransform;
use crate::pipeline::{FusionMode, KfPolicy, PipelineConfig};
use crate::scene::{SceneConfig, TrajectoryKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected 'key = value', got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("line {line}: invalid value '{value}' for '{key}': {reason}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Inconsistent(String),
}

/// Settings of the estimator consistency sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencySettings {
    pub sigmas_px: Vec<f64>,
    pub point_counts: Vec<usize>,
    /// Largest relative rotation between keyframe and current frame.
    pub max_rotation_deg: f64,
    /// Per-axis bound on the relative translation, meters.
    pub max_translation_m: f64,
}

impl Default for ConsistencySettings {
    fn default() -> Self {
        Self {
            sigmas_px: vec![0.5, 1.0],
            point_counts: vec![30, 60, 120, 240, 480, 960],
            max_rotation_deg: 10.0,
            max_translation_m: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub pipeline: PipelineConfig,
    pub consistency: ConsistencySettings,
    /// `None` uses the command's default.
    pub repetitions: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            pipeline: PipelineConfig::default(),
            consistency: ConsistencySettings::default(),
            repetitions: None,
        }
    }
}

/// Every recognized key, in the order [`ExperimentConfig::echo`] prints them.
pub const KEYS: &[&str] = &[
    "seed",
    "repetitions",
    "focal_px",
    "principal_x",
    "principal_y",
    "image_width",
    "image_height",
    "baseline_m",
    "depth_min",
    "depth_max",
    "visible_min",
    "visible_max",
    "noise_sigma_px",
    "outlier_ratio",
    "n_frames",
    "trajectory",
    "line_step_m",
    "circle_radius_m",
    "circle_frames_per_loop",
    "kf_policy",
    "ba_window_ofs",
    "delta_pnp",
    "delta_ba",
    "trim_fraction",
    "pnp_max_iters",
    "ba_max_iters",
    "stereo_gate_px",
    "min_correspondences",
    "fusion",
    "ba_pairs",
    "optimize_rig_rotation",
    "consistency_sigmas_px",
    "consistency_points",
    "consistency_max_rotation_deg",
    "consistency_max_translation_m",
];

fn trajectory_name(t: TrajectoryKind) -> &'static str {
    match t {
        TrajectoryKind::Line => "line",
        TrajectoryKind::Circle => "circle",
    }
}

pub fn parse_policy(s: &str) -> Option<KfPolicy> {
    match s {
        "latest" => Some(KfPolicy::Latest),
        "two" => Some(KfPolicy::MultiKeyframe(2)),
        "three" => Some(KfPolicy::MultiKeyframe(3)),
        "latest+ba" => Some(KfPolicy::LatestWithBa),
        _ => None,
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut baseline = cfg.scene.rig.baseline();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: content.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            let invalid = |reason: String| ConfigError::InvalidValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
                reason,
            };
            let float = || value.parse::<f64>().map_err(|e| invalid(e.to_string()));
            let int = || value.parse::<usize>().map_err(|e| invalid(e.to_string()));
            let s = &mut cfg.scene;
            let p = &mut cfg.pipeline;
            match key {
                "seed" => s.seed = value.parse::<u64>().map_err(|e| invalid(e.to_string()))?,
                "repetitions" => {
                    let r = int()?;
                    if r == 0 {
                        return Err(invalid("must be at least 1".to_string()));
                    }
                    cfg.repetitions = Some(r);
                }
                "focal_px" => s.rig.focal_px = float()?,
                "principal_x" => s.rig.principal_point.x = float()?,
                "principal_y" => s.rig.principal_point.y = float()?,
                "image_width" => {
                    s.rig.image_size.0 = value
                        .parse()
                        .map_err(|e: std::num::ParseIntError| invalid(e.to_string()))?
                }
                "image_height" => {
                    s.rig.image_size.1 = value
                        .parse()
                        .map_err(|e: std::num::ParseIntError| invalid(e.to_string()))?
                }
                "baseline_m" => baseline = float()?,
                "depth_min" => s.depth_range.0 = float()?,
                "depth_max" => s.depth_range.1 = float()?,
                "visible_min" => s.visible_target.0 = int()?,
                "visible_max" => s.visible_target.1 = int()?,
                "noise_sigma_px" => s.noise_sigma_px = float()?,
                "outlier_ratio" => s.outlier_ratio = float()?,
                "n_frames" => s.n_frames = int()?,
                "trajectory" => {
                    s.trajectory = match value {
                        "line" => TrajectoryKind::Line,
                        "circle" => TrajectoryKind::Circle,
                        _ => return Err(invalid("expected 'line' or 'circle'".to_string())),
                    }
                }
                "line_step_m" => s.line_step = float()?,
                "circle_radius_m" => s.circle_radius = float()?,
                "circle_frames_per_loop" => s.circle_frames_per_loop = Some(int()?),
                "kf_policy" => {
                    p.kf_policy = parse_policy(value).ok_or_else(|| {
                        invalid("expected latest, two, three or latest+ba".to_string())
                    })?
                }
                "ba_window_ofs" => p.ba_window_ofs = int()?,
                "delta_pnp" => p.delta_pnp = float()?,
                "delta_ba" => p.delta_ba = float()?,
                "trim_fraction" => p.trim_fraction = float()?,
                "pnp_max_iters" => p.pnp_max_iters = int()?,
                "ba_max_iters" => p.ba_max_iters = int()?,
                "stereo_gate_px" => p.stereo_gate_px = float()?,
                "min_correspondences" => p.min_correspondences = int()?,
                "fusion" => {
                    p.fusion = match value {
                        "first" => FusionMode::FirstObservation,
                        "union" => FusionMode::Union,
                        _ => return Err(invalid("expected 'first' or 'union'".to_string())),
                    }
                }
                "ba_pairs" => {
                    p.pair_policy = match value {
                        "all" => PairPolicy::AllImages,
                        "stereo-left" => PairPolicy::StereoAndLeft,
                        _ => return Err(invalid("expected 'all' or 'stereo-left'".to_string())),
                    }
                }
                "optimize_rig_rotation" => {
                    p.optimize_rig_rotation =
                        value.parse::<bool>().map_err(|e| invalid(e.to_string()))?
                }
                "consistency_sigmas_px" => {
                    cfg.consistency.sigmas_px = value
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| invalid(e.to_string()))?
                }
                "consistency_points" => {
                    cfg.consistency.point_counts = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| invalid(e.to_string()))?
                }
                "consistency_max_rotation_deg" => cfg.consistency.max_rotation_deg = float()?,
                "consistency_max_translation_m" => cfg.consistency.max_translation_m = float()?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        cfg.scene.rig.extrinsics =
            RigidTransform::from_translation(Vector3::new(baseline, 0.0, 0.0));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: String| Err(ConfigError::Inconsistent(e));
        if let Err(e) = self.scene.validate() {
            return wrap(e.to_string());
        }
        if let Err(e) = self.pipeline.validate() {
            return wrap(e.to_string());
        }
        let c = &self.consistency;
        if c.sigmas_px.is_empty() || c.sigmas_px.iter().any(|s| !(*s > 0.0)) {
            return wrap("consistency sigmas must be positive".to_string());
        }
        if c.point_counts.len() < 3 || c.point_counts.iter().any(|&n| n < 8) {
            return wrap("consistency sweep needs at least 3 point counts, each >= 8".to_string());
        }
        Ok(())
    }

    /// All settings as `key = value` lines, in a form [`Self::parse`] reads back.
    pub fn echo(&self) -> String {
        let s = &self.scene;
        let p = &self.pipeline;
        let c = &self.consistency;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", s.seed.to_string());
        if let Some(r) = self.repetitions {
            put("repetitions", r.to_string());
        }
        put("focal_px", s.rig.focal_px.to_string());
        put("principal_x", s.rig.principal_point.x.to_string());
        put("principal_y", s.rig.principal_point.y.to_string());
        put("image_width", s.rig.image_size.0.to_string());
        put("image_height", s.rig.image_size.1.to_string());
        put("baseline_m", s.rig.baseline().to_string());
        put("depth_min", s.depth_range.0.to_string());
        put("depth_max", s.depth_range.1.to_string());
        put("visible_min", s.visible_target.0.to_string());
        put("visible_max", s.visible_target.1.to_string());
        put("noise_sigma_px", s.noise_sigma_px.to_string());
        put("outlier_ratio", s.outlier_ratio.to_string());
        put("n_frames", s.n_frames.to_string());
        put("trajectory", trajectory_name(s.trajectory).to_string());
        put("line_step_m", s.line_step.to_string());
        put("circle_radius_m", s.circle_radius.to_string());
        if let Some(f) = s.circle_frames_per_loop {
            put("circle_frames_per_loop", f.to_string());
        }
        put("kf_policy", p.kf_policy.label());
        put("ba_window_ofs", p.ba_window_ofs.to_string());
        put("delta_pnp", p.delta_pnp.to_string());
        put("delta_ba", p.delta_ba.to_string());
        put("trim_fraction", p.trim_fraction.to_string());
        put("pnp_max_iters", p.pnp_max_iters.to_string());
        put("ba_max_iters", p.ba_max_iters.to_string());
        put("stereo_gate_px", p.stereo_gate_px.to_string());
        put("min_correspondences", p.min_correspondences.to_string());
        put(
            "fusion",
            match p.fusion {
                FusionMode::FirstObservation => "first",
                FusionMode::Union => "union",
            }
            .to_string(),
        );
        put(
            "ba_pairs",
            match p.pair_policy {
                PairPolicy::AllImages => "all",
                PairPolicy::StereoAndLeft => "stereo-left",
            }
            .to_string(),
        );
        put("optimize_rig_rotation", p.optimize_rig_rotation.to_string());
        put("consistency_sigmas_px", join(&c.sigmas_px));
        put("consistency_points", join(&c.point_counts));
        put(
            "consistency_max_rotation_deg",
            c.max_rotation_deg.to_string(),
        );
        put(
            "consistency_max_translation_m",
            c.max_translation_m.to_string(),
        );
        out
    }
}
