//! Seedable synthetic scenes: trajectories, landmark clouds and noisy
//! stereo observations.
//!
//! All randomness is drawn from ChaCha streams derived from the master seed
//! and a stream label (cloud, or frame index), never from execution order,
//! so frames can be generated in parallel with identical results.
//!
//! # Text dump format
//!
//! [`Scene::write_text`] emits one record per line, whitespace separated;
//! `#` starts a comment line:
//!
//! ```text
//! scene <n_frames> <n_points> <focal_px> <u0> <v0> <width> <height> <t0x> <t0y> <t0z>
//! point <id> <x> <y> <z>
//! pose <frame> <r00> <r01> <r02> <r10> <r11> <r12> <r20> <r21> <r22> <tx> <ty> <tz>
//! obs <frame> <id> <left_x> <left_y> <right_x|-> <right_y|-> <outlier 0|1>
//! ```
//!
//! Poses are camera-to-world; observations are normalized coordinates.
//! Floats use Rust's shortest round-trip formatting, so a dump read back
//! reproduces the scene exactly (the rig rotation is not stored and is
//! assumed to be the identity).

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{project, NormalizedPoint2, RigidTransform, Rotation};
use crate::triangulation::StereoRig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("could not reach {min}..={max} visible points per frame after {rounds} rounds")]
    DensityUnreachable {
        min: usize,
        max: usize,
        rounds: usize,
    },
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajectoryKind {
    Line,
    Circle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub rig: StereoRig,
    /// Visible depth interval in meters.
    pub depth_range: (f64, f64),
    /// Required visible landmarks per left image, inclusive.
    pub visible_target: (usize, usize),
    pub noise_sigma_px: f64,
    pub outlier_ratio: f64,
    pub seed: u64,
    pub trajectory: TrajectoryKind,
    pub n_frames: usize,
    /// Forward motion per frame on the line, meters.
    pub line_step: f64,
    pub circle_radius: f64,
    /// Frames for one full loop of the circle; `None` uses `n_frames`.
    pub circle_frames_per_loop: Option<usize>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            rig: StereoRig::default(),
            depth_range: (1.0, 40.0),
            visible_target: (100, 200),
            noise_sigma_px: 1.0,
            outlier_ratio: 0.02,
            seed: 0,
            trajectory: TrajectoryKind::Line,
            n_frames: 500,
            line_step: 1.0,
            circle_radius: 100.0,
            circle_frames_per_loop: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.to_string()));
        if !(self.depth_range.0 > 0.0 && self.depth_range.1 > self.depth_range.0) {
            return bad("depth range must satisfy 0 < min < max");
        }
        if !(0.0..0.5).contains(&self.outlier_ratio) {
            return bad("outlier ratio must lie in [0, 0.5)");
        }
        if self.n_frames < 2 {
            return bad("need at least two frames");
        }
        if self.visible_target.0 > self.visible_target.1 {
            return bad("visible target range is empty");
        }
        if !(self.noise_sigma_px >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        if !(self.rig.focal_px > 0.0) || self.rig.baseline() <= 0.0 {
            return bad("rig needs positive focal length and baseline");
        }
        Ok(())
    }

    fn frames_per_loop(&self) -> usize {
        self.circle_frames_per_loop.unwrap_or(self.n_frames).max(1)
    }

    /// Normalized half-extents of the image, `(w/2f, h/2f)`.
    fn half_fov(&self) -> (f64, f64) {
        let (w, h) = self.rig.image_size;
        (
            f64::from(w) / (2.0 * self.rig.focal_px),
            f64::from(h) / (2.0 * self.rig.focal_px),
        )
    }
}

/// Derives an independent RNG for `stream` of the experiment seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer; combines a master seed with an index into a new seed.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CLOUD_STREAM: u64 = 1 << 62;

fn yaw_rotation(angle: f64) -> Rotation {
    Rotation::from_axis_angle(&Vector3::new(0.0, 1.0, 0.0), angle)
}

/// Camera-to-world poses. The camera looks along +z with +y pointing down;
/// the line advances along +z, the circle turns about the vertical (y) axis
/// starting at the origin with the heading tangent to the circle.
pub fn generate_trajectory(config: &SceneConfig) -> Vec<RigidTransform> {
    (0..config.n_frames)
        .map(|i| match config.trajectory {
            TrajectoryKind::Line => RigidTransform::from_translation(Vector3::new(
                0.0,
                0.0,
                config.line_step * i as f64,
            )),
            TrajectoryKind::Circle => {
                let phi = 2.0 * PI * i as f64 / config.frames_per_loop() as f64;
                let r = config.circle_radius;
                RigidTransform::new(
                    yaw_rotation(phi),
                    Vector3::new(r - r * phi.cos(), 0.0, r * phi.sin()),
                )
            }
        })
        .collect()
}

/// Whether the left camera at `pose` sees `p`.
fn visible(config: &SceneConfig, world_to_cam: &RigidTransform, p: &Vector3<f64>) -> bool {
    let q = world_to_cam.apply(p);
    q.z >= config.depth_range.0
        && q.z <= config.depth_range.1
        && config.rig.project_left(&q).is_some()
}

/// Uniform landmark density giving the middle of the visibility target in
/// one view frustum.
fn target_density(config: &SceneConfig) -> f64 {
    let (hx, hy) = config.half_fov();
    let (d0, d1) = config.depth_range;
    let frustum = 4.0 * hx * hy * (d1.powi(3) - d0.powi(3)) / 3.0;
    let mid = (config.visible_target.0 + config.visible_target.1) as f64 / 2.0;
    mid / frustum
}

fn sample_region(
    config: &SceneConfig,
    trajectory: &[RigidTransform],
    rng: &mut ChaCha8Rng,
) -> Vec<Vector3<f64>> {
    let (hx, hy) = config.half_fov();
    let far = config.depth_range.1;
    let margin = 1.0;
    let (wx, wy) = (hx * far + margin, hy * far + margin);
    let density = target_density(config);
    match config.trajectory {
        TrajectoryKind::Line => {
            let z0 = trajectory.first().map_or(0.0, |t| t.translation.z) - margin;
            let z1 = trajectory.last().map_or(0.0, |t| t.translation.z) + far + margin;
            let volume = 4.0 * wx * wy * (z1 - z0);
            let count = (density * volume).round() as usize;
            (0..count)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-wx..wx),
                        rng.random_range(-wy..wy),
                        rng.random_range(z0..z1),
                    )
                })
                .collect()
        }
        TrajectoryKind::Circle => {
            let r = config.circle_radius;
            let inner = (r - wx).max(0.0);
            let outer = ((r + wx).powi(2) + (far + margin).powi(2)).sqrt();
            let volume = PI * (outer * outer - inner * inner) * 2.0 * wy;
            let count = (density * volume).round() as usize;
            (0..count)
                .map(|_| {
                    let rad = rng.random_range(inner * inner..outer * outer).sqrt();
                    let ang = rng.random_range(0.0..2.0 * PI);
                    Vector3::new(
                        r - rad * ang.cos(),
                        rng.random_range(-wy..wy),
                        rad * ang.sin(),
                    )
                })
                .collect()
        }
    }
}

/// Samples landmarks uniformly in a corridor (line) or annulus (circle)
/// around the trajectory, redrawing the whole cloud until every frame sees
/// a count inside the visibility target.
pub fn populate_points(
    config: &SceneConfig,
    trajectory: &[RigidTransform],
) -> Result<Vec<Vector3<f64>>, SceneError> {
    const ROUNDS: usize = 100;
    let mut rng = stream_rng(config.seed, CLOUD_STREAM);
    let inverses: Vec<RigidTransform> = trajectory.iter().map(|t| t.inverse()).collect();
    let (lo, hi) = config.visible_target;
    for _ in 0..ROUNDS {
        let cloud = sample_region(config, trajectory, &mut rng);
        let ok = inverses.par_iter().all(|w2c| {
            let n = cloud.iter().filter(|p| visible(config, w2c, p)).count();
            (lo..=hi).contains(&n)
        });
        if ok {
            return Ok(cloud);
        }
    }
    Err(SceneError::DensityUnreachable {
        min: lo,
        max: hi,
        rounds: ROUNDS,
    })
}

/// One landmark seen in the left image of a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationRecord {
    pub id: u64,
    pub left: NormalizedPoint2,
    pub right: Option<NormalizedPoint2>,
    /// The left observation was replaced by a uniform draw over the image.
    pub is_outlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservations {
    pub index: usize,
    /// Ground-truth camera-to-world pose.
    pub pose: RigidTransform,
    /// Sorted by landmark id.
    pub records: Vec<ObservationRecord>,
}

impl FrameObservations {
    pub fn get(&self, id: u64) -> Option<&ObservationRecord> {
        self.records
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.records[i])
    }
}

/// Projects the visible landmarks into both images of the frame at `pose`,
/// adds isotropic Gaussian noise and plants outliers in the left image.
/// Noisy observations that leave the image are dropped.
pub fn observe(
    index: usize,
    pose: &RigidTransform,
    cloud: &[Vector3<f64>],
    config: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> FrameObservations {
    let rig = &config.rig;
    let sigma = config.noise_sigma_px / rig.focal_px;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let w2c = pose.inverse();
    let mut records = Vec::new();
    for (id, p) in cloud.iter().enumerate() {
        if !visible(config, &w2c, p) {
            continue;
        }
        let q = w2c.apply(p);
        let mut noisy = |clean: NormalizedPoint2| {
            NormalizedPoint2(clean.0 + Vector2::new(normal.sample(rng), normal.sample(rng)) * sigma)
        };
        let left = noisy(project(&q).expect("visible point has positive depth"));
        let right = rig.project_right(&q).map(&mut noisy);
        if !rig.contains(&left) {
            continue;
        }
        records.push(ObservationRecord {
            id: id as u64,
            left,
            right: right.filter(|r| rig.contains(r)),
            is_outlier: false,
        });
    }
    let n_outliers = (config.outlier_ratio * records.len() as f64).round() as usize;
    let (w, h) = rig.image_size;
    for _ in 0..n_outliers.min(records.len()) {
        let candidates: Vec<usize> = (0..records.len())
            .filter(|&i| !records[i].is_outlier)
            .collect();
        let pick = candidates[rng.random_range(0..candidates.len())];
        let pixel = Vector2::new(
            rng.random_range(0.0..f64::from(w)),
            rng.random_range(0.0..f64::from(h)),
        );
        records[pick].left = rig.pixel_to_normalized(&pixel);
        records[pick].is_outlier = true;
    }
    FrameObservations {
        index,
        pose: *pose,
        records,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub cloud: Vec<Vector3<f64>>,
    pub frames: Vec<FrameObservations>,
}

impl Scene {
    pub fn generate(config: &SceneConfig) -> Result<Self, SceneError> {
        config.validate()?;
        let trajectory = generate_trajectory(config);
        let cloud = populate_points(config, &trajectory)?;
        let frames = trajectory
            .par_iter()
            .enumerate()
            .map(|(i, pose)| {
                let mut rng = stream_rng(config.seed, i as u64);
                observe(i, pose, &cloud, config, &mut rng)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            cloud,
            frames,
        })
    }

    pub fn ground_truth(&self) -> Vec<RigidTransform> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    pub fn write_text(&self) -> String {
        let rig = &self.config.rig;
        let t0 = rig.extrinsics.translation;
        let mut out = String::new();
        let _ = writeln!(out, "# vokit scene dump");
        let _ = writeln!(
            out,
            "scene {} {} {} {} {} {} {} {} {} {}",
            self.frames.len(),
            self.cloud.len(),
            rig.focal_px,
            rig.principal_point.x,
            rig.principal_point.y,
            rig.image_size.0,
            rig.image_size.1,
            t0.x,
            t0.y,
            t0.z
        );
        for (id, p) in self.cloud.iter().enumerate() {
            let _ = writeln!(out, "point {id} {} {} {}", p.x, p.y, p.z);
        }
        for f in &self.frames {
            let r = f.pose.rotation.matrix();
            let t = f.pose.translation;
            let _ = write!(out, "pose {}", f.index);
            for i in 0..3 {
                for j in 0..3 {
                    let _ = write!(out, " {}", r[(i, j)]);
                }
            }
            let _ = writeln!(out, " {} {} {}", t.x, t.y, t.z);
            for rec in &f.records {
                let (rx, ry) = match rec.right {
                    Some(r) => (r.x().to_string(), r.y().to_string()),
                    None => ("-".to_string(), "-".to_string()),
                };
                let _ = writeln!(
                    out,
                    "obs {} {} {} {} {rx} {ry} {}",
                    f.index,
                    rec.id,
                    rec.left.x(),
                    rec.left.y(),
                    u8::from(rec.is_outlier)
                );
            }
        }
        out
    }

    /// Parses a dump written by [`Self::write_text`]. Fields of the
    /// configuration that the dump does not carry keep their defaults.
    pub fn read_text(text: &str) -> Result<Self, SceneError> {
        let mut config = SceneConfig::default();
        let mut cloud = Vec::new();
        let mut frames: Vec<FrameObservations> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| SceneError::Parse {
                line: lineno + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64, SceneError> {
                fields
                    .get(i)
                    .ok_or_else(|| err(format!("missing field {i}")))?
                    .parse::<f64>()
                    .map_err(|e| err(format!("field {i}: {e}")))
            };
            let int = |i: usize| -> Result<u64, SceneError> {
                fields
                    .get(i)
                    .ok_or_else(|| err(format!("missing field {i}")))?
                    .parse::<u64>()
                    .map_err(|e| err(format!("field {i}: {e}")))
            };
            match fields[0] {
                "scene" => {
                    config.n_frames = int(1)? as usize;
                    config.rig.focal_px = num(3)?;
                    config.rig.principal_point = Vector2::new(num(4)?, num(5)?);
                    config.rig.image_size = (int(6)? as u32, int(7)? as u32);
                    config.rig.extrinsics =
                        RigidTransform::from_translation(Vector3::new(num(8)?, num(9)?, num(10)?));
                }
                "point" => {
                    let id = int(1)? as usize;
                    if id != cloud.len() {
                        return Err(err(format!("point ids must be consecutive, got {id}")));
                    }
                    cloud.push(Vector3::new(num(2)?, num(3)?, num(4)?));
                }
                "pose" => {
                    let index = int(1)? as usize;
                    let mut r = Matrix3::zeros();
                    for i in 0..3 {
                        for j in 0..3 {
                            r[(i, j)] = num(2 + 3 * i + j)?;
                        }
                    }
                    let t = Vector3::new(num(11)?, num(12)?, num(13)?);
                    frames.push(FrameObservations {
                        index,
                        pose: RigidTransform::new(Rotation::from_matrix_unchecked(r), t),
                        records: Vec::new(),
                    });
                }
                "obs" => {
                    let index = int(1)? as usize;
                    let frame = frames
                        .iter_mut()
                        .rev()
                        .find(|f| f.index == index)
                        .ok_or_else(|| err(format!("observation for unknown frame {index}")))?;
                    let right = if fields.get(5) == Some(&"-") {
                        None
                    } else {
                        Some(NormalizedPoint2::new(num(5)?, num(6)?))
                    };
                    frame.records.push(ObservationRecord {
                        id: int(2)?,
                        left: NormalizedPoint2::new(num(3)?, num(4)?),
                        right,
                        is_outlier: int(7)? != 0,
                    });
                }
                other => return Err(err(format!("unknown record '{other}'"))),
            }
        }
        Ok(Self {
            config,
            cloud,
            frames,
        })
    }
}
