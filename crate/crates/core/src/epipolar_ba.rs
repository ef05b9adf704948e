//! Sliding-window bundle adjustment on epipolar residuals.
//!
//! The window holds frames `0..=K+1`; frame 0 (the older keyframe) is the
//! anchor and every later frame `k` is attached to its predecessor through
//! a relative pose `ξ_k` (Z-Y-X Euler angles plus translation) that maps
//! frame-`k` coordinates into frame `k−1`. The two keyframes contribute both
//! images, intermediate frames only their left image. For every image pair
//! with enough matches the residual is the signed distance of each match to
//! its epipolar line, and the robust sum over all pairs is minimized with
//! Levenberg-Marquardt under a truncated least-squares kernel.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3};
use thiserror::Error;

use crate::geometry::{skew, EulerPose, NormalizedPoint2, RigidTransform, Rotation};
use crate::pnp::Damping;
use crate::triangulation::StereoRig;

pub const DEFAULT_BA_DELTA: f64 = 3e-4;
/// Pairs with fewer matches carry no epipolar term.
pub const MIN_PAIR_MATCHES: usize = 8;
pub const MAX_WINDOW_ORDINARY_FRAMES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaError {
    #[error("essential matrix needs a nonzero translation")]
    ZeroTranslation,
    #[error("epipolar line has a vanishing normal")]
    DegenerateEpipolarLine,
    #[error("window has no pair involving a right image; translation scale is unobservable")]
    Unobservable,
    #[error("bundle adjustment diverged: cost rose on {0} consecutive damping escalations")]
    DivergedBA(usize),
    #[error("pair references frame {frame} outside a window of {frames} frames")]
    FrameOutOfWindow { frame: usize, frames: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Camera {
    Left,
    Right,
}

/// Image within the window: frame index (0 is the anchor keyframe) and side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageId {
    pub frame: usize,
    pub camera: Camera,
}

impl ImageId {
    pub fn left(frame: usize) -> Self {
        Self {
            frame,
            camera: Camera::Left,
        }
    }

    pub fn right(frame: usize) -> Self {
        Self {
            frame,
            camera: Camera::Right,
        }
    }
}

/// Matched observations between two images. Each match is
/// `(observation in first, observation in second)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub first: ImageId,
    pub second: ImageId,
    pub matches: Vec<(NormalizedPoint2, NormalizedPoint2)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowGraph {
    /// `ξ₁ … ξ_{K+1}`; `poses[k - 1]` maps frame `k` into frame `k − 1`.
    pub poses: Vec<EulerPose>,
    pub rig: StereoRig,
    pub pairs: Vec<ImagePair>,
    pub optimize_rig_rotation: bool,
}

/// `E = t^∧ R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

/// Essential matrix of the relative pose that maps first-image coordinates
/// into second-image coordinates.
pub fn essential_from_pose(t: &RigidTransform) -> Result<EssentialMatrix, BaError> {
    if t.translation.norm() <= 1e-12 {
        return Err(BaError::ZeroTranslation);
    }
    Ok(EssentialMatrix(skew(&t.translation) * t.rotation.matrix()))
}

/// Signed distance of `y` to the epipolar line `l = E xʰ`:
/// `yʰᵀ l / ‖[l]₁,₂‖`.
pub fn epipolar_residual(
    x: &NormalizedPoint2,
    y: &NormalizedPoint2,
    e: &EssentialMatrix,
) -> Result<f64, BaError> {
    let l = e.0 * x.homogeneous();
    let norm = l.xy().norm();
    if norm <= 1e-12 {
        return Err(BaError::DegenerateEpipolarLine);
    }
    Ok(y.homogeneous().dot(&l) / norm)
}

/// Observations of one window frame, keyed by landmark id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowFrame {
    pub is_keyframe: bool,
    /// `(id, observation)` sorted by id.
    pub left: Vec<(u64, NormalizedPoint2)>,
    /// Right-image observations; only used for keyframes.
    pub right: Vec<(u64, NormalizedPoint2)>,
}

/// Which image pairs enter the adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairPolicy {
    /// Stereo pair at each keyframe plus every left-left pair.
    StereoAndLeft,
    /// Every pair among the usable images (keyframe left and right, ordinary
    /// frame left). Right images of keyframes are also paired with other
    /// frames, which ties the translation scale to the baseline.
    #[default]
    AllImages,
}

fn match_sorted(
    a: &[(u64, NormalizedPoint2)],
    b: &[(u64, NormalizedPoint2)],
) -> Vec<(NormalizedPoint2, NormalizedPoint2)> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push((a[i].1, b[j].1));
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Enumerates image pairs with at least [`MIN_PAIR_MATCHES`] common landmarks.
/// Within a pair the first image is the earlier frame, and at one keyframe
/// the right image comes first so its matches read `(right, left)`.
pub fn collect_pairs(frames: &[WindowFrame], policy: PairPolicy) -> Vec<ImagePair> {
    let mut images: Vec<(ImageId, &[(u64, NormalizedPoint2)])> = Vec::new();
    for (k, f) in frames.iter().enumerate() {
        if f.is_keyframe {
            images.push((ImageId::right(k), &f.right));
        }
        images.push((ImageId::left(k), &f.left));
    }
    let mut pairs = Vec::new();
    for (i, (a, obs_a)) in images.iter().enumerate() {
        for (b, obs_b) in &images[i + 1..] {
            let wanted = match policy {
                PairPolicy::AllImages => true,
                PairPolicy::StereoAndLeft => {
                    (a.frame == b.frame) || (a.camera == Camera::Left && b.camera == Camera::Left)
                }
            };
            if !wanted {
                continue;
            }
            let matches = match_sorted(obs_a, obs_b);
            if matches.len() >= MIN_PAIR_MATCHES {
                pairs.push(ImagePair {
                    first: *a,
                    second: *b,
                    matches,
                });
            }
        }
    }
    pairs
}

/// How derivatives of the residuals are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaJacobian {
    #[default]
    Analytic,
    CentralDifference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaOptions {
    pub delta: f64,
    pub max_iters: usize,
    pub jacobian: BaJacobian,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            delta: DEFAULT_BA_DELTA,
            max_iters: 10,
            jacobian: BaJacobian::Analytic,
        }
    }
}

/// Flat parameter layout: six per relative pose, then three rig angles
/// when the rig rotation is free.
#[derive(Debug, Clone)]
struct Params {
    poses: Vec<EulerPose>,
    rig: EulerPose,
    rig_free: bool,
}

impl Params {
    fn from_graph(g: &WindowGraph) -> Self {
        Self {
            poses: g.poses.clone(),
            rig: EulerPose::from_transform(&g.rig.extrinsics),
            rig_free: g.optimize_rig_rotation,
        }
    }

    fn len(&self) -> usize {
        6 * self.poses.len() + if self.rig_free { 3 } else { 0 }
    }

    fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        for (k, p) in self.poses.iter().enumerate() {
            v.fixed_rows_mut::<6>(6 * k).copy_from(&p.to_vector());
        }
        if self.rig_free {
            let o = 6 * self.poses.len();
            v[o] = self.rig.roll;
            v[o + 1] = self.rig.pitch;
            v[o + 2] = self.rig.yaw;
        }
        v
    }

    fn with_vector(&self, v: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for (k, p) in out.poses.iter_mut().enumerate() {
            *p = EulerPose::from_vector(&v.fixed_rows::<6>(6 * k).into_owned());
        }
        if self.rig_free {
            let o = 6 * self.poses.len();
            out.rig.roll = v[o];
            out.rig.pitch = v[o + 1];
            out.rig.yaw = v[o + 2];
        }
        out
    }

    fn rig_matrix(&self) -> Matrix4<f64> {
        self.rig.to_transform().to_homogeneous()
    }

    /// Camera-to-anchor transforms of the left images of every frame.
    fn prefix(&self) -> Vec<Matrix4<f64>> {
        let mut out = Vec::with_capacity(self.poses.len() + 1);
        out.push(Matrix4::identity());
        for p in &self.poses {
            let last = *out.last().expect("non-empty");
            out.push(last * p.to_transform().to_homogeneous());
        }
        out
    }
}

fn image_to_anchor(prefix: &[Matrix4<f64>], rig: &Matrix4<f64>, id: ImageId) -> Matrix4<f64> {
    match id.camera {
        Camera::Left => prefix[id.frame],
        Camera::Right => prefix[id.frame] * rig,
    }
}

fn rigid_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    RigidTransform::from_homogeneous(m)
        .inverse()
        .to_homogeneous()
}

fn essential_of(rel: &Matrix4<f64>) -> Matrix3<f64> {
    let r = rel.fixed_view::<3, 3>(0, 0).into_owned();
    let t: Vector3<f64> = rel.fixed_view::<3, 1>(0, 3).into_owned();
    skew(&t) * r
}

fn d_essential(rel: &Matrix4<f64>, d_rel: &Matrix4<f64>) -> Matrix3<f64> {
    let r = rel.fixed_view::<3, 3>(0, 0).into_owned();
    let t: Vector3<f64> = rel.fixed_view::<3, 1>(0, 3).into_owned();
    let dr = d_rel.fixed_view::<3, 3>(0, 0).into_owned();
    let dt: Vector3<f64> = d_rel.fixed_view::<3, 1>(0, 3).into_owned();
    skew(&dt) * r + skew(&t) * dr
}

/// Derivative of a Euler-pose homogeneous matrix with respect to its six
/// parameters.
fn pose_partials(p: &EulerPose) -> [Matrix4<f64>; 6] {
    let rp = p.rotation_partials();
    let mut out = [Matrix4::zeros(); 6];
    for k in 0..3 {
        out[k].fixed_view_mut::<3, 3>(0, 0).copy_from(&rp[k]);
        out[3 + k][(k, 3)] = 1.0;
    }
    out
}

/// Per-pair essential matrices and, optionally, their parameter derivatives.
struct PairModel {
    essential: Matrix3<f64>,
    /// `(parameter index, dE/dparam)`.
    partials: Vec<(usize, Matrix3<f64>)>,
}

fn pair_models(params: &Params, pairs: &[ImagePair], with_partials: bool) -> Vec<PairModel> {
    let prefix = params.prefix();
    let rig = params.rig_matrix();
    let transforms: Vec<Matrix4<f64>> = params
        .poses
        .iter()
        .map(|p| p.to_transform().to_homogeneous())
        .collect();
    let partials: Vec<[Matrix4<f64>; 6]> = if with_partials {
        params.poses.iter().map(pose_partials).collect()
    } else {
        Vec::new()
    };
    let rig_partials = pose_partials(&params.rig);
    let rig_offset = 6 * params.poses.len();

    pairs
        .iter()
        .map(|pair| {
            let ca = image_to_anchor(&prefix, &rig, pair.first);
            let cb = image_to_anchor(&prefix, &rig, pair.second);
            let cb_inv = rigid_inverse(&cb);
            let rel = cb_inv * ca;
            let mut model = PairModel {
                essential: essential_of(&rel),
                partials: Vec::new(),
            };
            if !with_partials {
                return model;
            }
            // d(C_b⁻¹ C_a) = C_b⁻¹ dC_a − C_b⁻¹ dC_b C_b⁻¹ C_a
            let d_image = |id: ImageId, m: usize, dt: &Matrix4<f64>| -> Option<Matrix4<f64>> {
                // frame k depends on ξ_m for m ≤ k (m is 1-based)
                if m > id.frame {
                    return None;
                }
                let before = prefix[m - 1];
                let after = rigid_inverse(&transforms[m - 1])
                    * rigid_inverse(&prefix[m - 1])
                    * prefix[id.frame];
                let d_left = before * dt * after;
                Some(match id.camera {
                    Camera::Left => d_left,
                    Camera::Right => d_left * rig,
                })
            };
            let max_frame = pair.first.frame.max(pair.second.frame);
            for m in 1..=max_frame {
                for (q, dt) in partials[m - 1].iter().enumerate() {
                    let da = d_image(pair.first, m, dt);
                    let db = d_image(pair.second, m, dt);
                    if da.is_none() && db.is_none() {
                        continue;
                    }
                    let mut d_rel = Matrix4::zeros();
                    if let Some(da) = da {
                        d_rel += cb_inv * da;
                    }
                    if let Some(db) = db {
                        d_rel -= cb_inv * db * rel;
                    }
                    model
                        .partials
                        .push((6 * (m - 1) + q, d_essential(&rel, &d_rel)));
                }
            }
            if params.rig_free {
                for (q, d_rig) in rig_partials.iter().take(3).enumerate() {
                    let d_of = |id: ImageId| match id.camera {
                        Camera::Left => None,
                        Camera::Right => Some(prefix[id.frame] * d_rig),
                    };
                    let (da, db) = (d_of(pair.first), d_of(pair.second));
                    if da.is_none() && db.is_none() {
                        continue;
                    }
                    let mut d_rel = Matrix4::zeros();
                    if let Some(da) = da {
                        d_rel += cb_inv * da;
                    }
                    if let Some(db) = db {
                        d_rel -= cb_inv * db * rel;
                    }
                    model
                        .partials
                        .push((rig_offset + q, d_essential(&rel, &d_rel)));
                }
            }
            model
        })
        .collect()
}

fn residual_of(e: &Matrix3<f64>, x: &NormalizedPoint2, y: &NormalizedPoint2) -> Option<f64> {
    let l = e * x.homogeneous();
    let norm = l.xy().norm();
    (norm > 1e-12).then(|| y.homogeneous().dot(&l) / norm)
}

/// All epipolar residuals of the window, pair by pair, match by match.
/// Degenerate matches yield `None`.
pub fn window_residuals(graph: &WindowGraph) -> Vec<Option<f64>> {
    let params = Params::from_graph(graph);
    let models = pair_models(&params, &graph.pairs, false);
    graph
        .pairs
        .iter()
        .zip(&models)
        .flat_map(|(pair, m)| {
            pair.matches
                .iter()
                .map(|(x, y)| residual_of(&m.essential, x, y))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn robust_cost(params: &Params, pairs: &[ImagePair], delta: f64) -> f64 {
    let models = pair_models(params, pairs, false);
    pairs
        .iter()
        .zip(&models)
        .map(|(pair, m)| {
            pair.matches
                .iter()
                .map(|(x, y)| residual_of(&m.essential, x, y).map_or(delta, |r| (r * r).min(delta)))
                .sum::<f64>()
        })
        .sum()
}

/// Truncated least-squares cost of the window at its current poses.
pub fn window_cost(graph: &WindowGraph, delta: f64) -> f64 {
    robust_cost(&Params::from_graph(graph), &graph.pairs, delta)
}

/// Residuals (inliers only) and Jacobian rows at `params`.
fn linearize_analytic(
    params: &Params,
    pairs: &[ImagePair],
    delta: f64,
) -> (Vec<f64>, Vec<Vec<(usize, f64)>>) {
    let models = pair_models(params, pairs, true);
    let mut residuals = Vec::new();
    let mut rows = Vec::new();
    for (pair, model) in pairs.iter().zip(&models) {
        for (x, y) in &pair.matches {
            let xh = x.homogeneous();
            let yh = y.homogeneous();
            let l = model.essential * xh;
            let den = l.xy().norm();
            if den <= 1e-12 {
                continue;
            }
            let num = yh.dot(&l);
            let r = num / den;
            if r * r > delta {
                continue;
            }
            let row = model
                .partials
                .iter()
                .map(|(idx, de)| {
                    let dl = de * xh;
                    let d = yh.dot(&dl) / den - num * (l.x * dl.x + l.y * dl.y) / (den * den * den);
                    (*idx, d)
                })
                .collect();
            residuals.push(r);
            rows.push(row);
        }
    }
    (residuals, rows)
}

fn linearize_numeric(
    params: &Params,
    pairs: &[ImagePair],
    delta: f64,
) -> (Vec<f64>, Vec<Vec<(usize, f64)>>) {
    const STEP: f64 = 1e-7;
    let base = params.to_vector();
    let eval = |v: &DVector<f64>| -> Vec<Option<f64>> {
        let p = params.with_vector(v);
        let models = pair_models(&p, pairs, false);
        pairs
            .iter()
            .zip(&models)
            .flat_map(|(pair, m)| {
                pair.matches
                    .iter()
                    .map(|(x, y)| residual_of(&m.essential, x, y))
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let r0 = eval(&base);
    let columns: Vec<Vec<Option<f64>>> = (0..base.len())
        .map(|k| {
            let mut plus = base.clone();
            plus[k] += STEP;
            let mut minus = base.clone();
            minus[k] -= STEP;
            eval(&plus)
                .into_iter()
                .zip(eval(&minus))
                .map(|(a, b)| Some((a? - b?) / (2.0 * STEP)))
                .collect()
        })
        .collect();
    let mut residuals = Vec::new();
    let mut rows = Vec::new();
    for (i, r) in r0.iter().enumerate() {
        let Some(r) = r else { continue };
        if r * r > delta {
            continue;
        }
        residuals.push(*r);
        rows.push(
            columns
                .iter()
                .enumerate()
                .map(|(k, c)| (k, c[i].unwrap_or(0.0)))
                .collect(),
        );
    }
    (residuals, rows)
}

/// Dense Jacobian of all residuals (rows in [`window_residuals`] order,
/// degenerate matches zeroed) with respect to the flattened parameters.
pub fn window_jacobian(graph: &WindowGraph, method: BaJacobian) -> DMatrix<f64> {
    let params = Params::from_graph(graph);
    let (_, rows) = match method {
        BaJacobian::Analytic => linearize_analytic(&params, &graph.pairs, f64::INFINITY),
        BaJacobian::CentralDifference => linearize_numeric(&params, &graph.pairs, f64::INFINITY),
    };
    let mut j = DMatrix::zeros(rows.len(), params.len());
    for (i, row) in rows.iter().enumerate() {
        for (k, v) in row {
            j[(i, *k)] += v;
        }
    }
    j
}

fn check_graph(graph: &WindowGraph) -> Result<(), BaError> {
    let frames = graph.poses.len() + 1;
    for pair in &graph.pairs {
        for id in [pair.first, pair.second] {
            if id.frame >= frames {
                return Err(BaError::FrameOutOfWindow {
                    frame: id.frame,
                    frames,
                });
            }
        }
    }
    let has_right = graph
        .pairs
        .iter()
        .any(|p| p.first.camera == Camera::Right || p.second.camera == Camera::Right);
    if !has_right {
        return Err(BaError::Unobservable);
    }
    Ok(())
}

/// Optimizes the window; see [`optimize_window_traced`].
pub fn optimize_window(
    graph: &WindowGraph,
    delta: f64,
    max_iters: usize,
) -> Result<WindowGraph, BaError> {
    let options = BaOptions {
        delta,
        max_iters,
        ..BaOptions::default()
    };
    optimize_window_traced(graph, &options).map(|(g, _)| g)
}

/// Minimizes `Σ_pairs Σ_matches ρ_δ(Re²)` over the relative poses (and the
/// rig rotation when enabled). Returns the optimized graph and the robust
/// cost after every accepted step, starting with the initial cost.
pub fn optimize_window_traced(
    graph: &WindowGraph,
    options: &BaOptions,
) -> Result<(WindowGraph, Vec<f64>), BaError> {
    check_graph(graph)?;
    let delta = options.delta;
    let mut params = Params::from_graph(graph);
    let dim = params.len();
    let mut cost = robust_cost(&params, &graph.pairs, delta);
    let mut history = vec![cost];
    let mut damping = Damping::new();
    let mut accepted_any = false;

    'outer: for _ in 0..options.max_iters {
        let (residuals, rows) = match options.jacobian {
            BaJacobian::Analytic => linearize_analytic(&params, &graph.pairs, delta),
            BaJacobian::CentralDifference => linearize_numeric(&params, &graph.pairs, delta),
        };
        let mut jtj = DMatrix::<f64>::zeros(dim, dim);
        let mut jtr = DVector::<f64>::zeros(dim);
        for (r, row) in residuals.iter().zip(&rows) {
            for &(a, va) in row {
                jtr[a] += va * r;
                for &(b, vb) in row {
                    jtj[(a, b)] += va * vb;
                }
            }
        }
        if jtr.amax() == 0.0 {
            break;
        }
        let current = params.to_vector();
        let mut rejections = 0;
        loop {
            let mut damped = jtj.clone();
            for k in 0..dim {
                damped[(k, k)] += damping.lambda * jtj[(k, k)].max(1e-12);
            }
            let step = damped.cholesky().map(|c| -c.solve(&jtr));
            let Some(step) = step else {
                damping.lambda *= Damping::FACTOR;
                rejections += 1;
                if rejections >= Damping::MAX_REJECTIONS {
                    break 'outer;
                }
                continue;
            };
            if step.norm() < Damping::MIN_STEP {
                break 'outer;
            }
            let candidate = params.with_vector(&(&current + &step));
            let candidate_cost = robust_cost(&candidate, &graph.pairs, delta);
            if candidate_cost < cost {
                params = candidate;
                cost = candidate_cost;
                history.push(cost);
                damping.lambda /= Damping::FACTOR;
                accepted_any = true;
                break;
            }
            damping.lambda *= Damping::FACTOR;
            rejections += 1;
            if rejections >= Damping::MAX_REJECTIONS {
                if !accepted_any {
                    return Err(BaError::DivergedBA(rejections));
                }
                break 'outer;
            }
        }
    }

    let mut out = graph.clone();
    out.poses = params.poses.clone();
    if params.rig_free {
        let mut rig = params.rig;
        rig.translation = graph.rig.extrinsics.translation;
        out.rig.extrinsics = RigidTransform::new(
            Rotation::from_matrix_unchecked(rig.rotation_matrix()),
            rig.translation,
        );
    }
    Ok((out, history))
}

/// Camera-to-anchor transform of the left image of every window frame.
pub fn frame_poses(poses: &[EulerPose]) -> Vec<RigidTransform> {
    let mut out = vec![RigidTransform::identity()];
    for p in poses {
        let last = *out.last().expect("non-empty");
        out.push(last.compose(&p.to_transform()));
    }
    out
}

/// Inverse of [`frame_poses`]: relative Euler poses from anchor-frame poses
/// (the first entry must be the anchor itself).
pub fn relative_chain(frames: &[RigidTransform]) -> Vec<EulerPose> {
    frames
        .windows(2)
        .map(|w| EulerPose::from_transform(&w[0].inverse().compose(&w[1])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    #[test]
    fn essential_examples() {
        let e = essential_from_pose(&RigidTransform::from_translation(Vector3::new(
            1.0, 0.0, 0.0,
        )))
        .unwrap();
        assert_eq!(
            e.0,
            Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
        );
        assert_eq!(
            essential_from_pose(&RigidTransform::identity()),
            Err(BaError::ZeroTranslation)
        );
    }

    #[test]
    fn residual_examples() {
        let e = essential_from_pose(&RigidTransform::from_translation(Vector3::new(
            0.5, 0.0, 0.0,
        )))
        .unwrap();
        let x = NormalizedPoint2::new(0.05, 0.2);
        assert!(
            epipolar_residual(&x, &NormalizedPoint2::new(0.1, 0.2), &e)
                .unwrap()
                .abs()
                < 1e-15
        );
        let r = epipolar_residual(&x, &NormalizedPoint2::new(0.1, 0.22), &e).unwrap();
        assert!((r - (-0.02)).abs() < 1e-12, "{r}");

        let flat = EssentialMatrix(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0));
        assert_eq!(
            epipolar_residual(&x, &x, &flat),
            Err(BaError::DegenerateEpipolarLine)
        );
    }

    #[test]
    fn residual_is_invariant_to_translation_scale() {
        let t = RigidTransform::new(
            Rotation::from_axis_angle(&Vector3::new(0.0, 1.0, 0.0), 0.05),
            Vector3::new(0.3, 0.1, 1.0),
        );
        let p = Vector3::new(1.0, -0.5, 8.0);
        let x = project(&p).unwrap();
        let y = NormalizedPoint2::new(project(&t.apply(&p)).unwrap().x() + 1e-3, 0.01);
        let e1 = essential_from_pose(&t).unwrap();
        let scaled = RigidTransform::new(t.rotation, t.translation * 3.0);
        let e3 = essential_from_pose(&scaled).unwrap();
        assert!((e3.0 - e1.0 * 3.0).amax() < 1e-15);
        let (r1, r3) = (
            epipolar_residual(&x, &y, &e1).unwrap(),
            epipolar_residual(&x, &y, &e3).unwrap(),
        );
        assert!((r1 - r3).abs() < 1e-12);
    }

    #[test]
    fn pair_enumeration() {
        let ids: Vec<(u64, NormalizedPoint2)> =
            (0..20).map(|i| (i, NormalizedPoint2::default())).collect();
        let kf = WindowFrame {
            is_keyframe: true,
            left: ids.clone(),
            right: ids.clone(),
        };
        let of = WindowFrame {
            is_keyframe: false,
            left: ids.clone(),
            right: Vec::new(),
        };
        let two = [kf.clone(), kf.clone()];
        assert_eq!(collect_pairs(&two, PairPolicy::StereoAndLeft).len(), 3);
        assert_eq!(collect_pairs(&two, PairPolicy::AllImages).len(), 6);

        let four = [kf.clone(), of.clone(), of.clone(), kf.clone()];
        assert_eq!(collect_pairs(&four, PairPolicy::StereoAndLeft).len(), 8);
        assert_eq!(collect_pairs(&four, PairPolicy::AllImages).len(), 15);

        let stereo = collect_pairs(&two, PairPolicy::StereoAndLeft);
        assert_eq!(stereo[0].first, ImageId::right(0));
        assert_eq!(stereo[0].second, ImageId::left(0));

        let sparse = WindowFrame {
            is_keyframe: false,
            left: ids[..7].to_vec(),
            right: Vec::new(),
        };
        let pairs = collect_pairs(&[kf.clone(), sparse, kf], PairPolicy::StereoAndLeft);
        // the 7-match frame is dropped from every pair
        assert_eq!(pairs.len(), 3);
        assert!(pairs
            .iter()
            .all(|p| p.first.frame != 1 && p.second.frame != 1));
    }

    #[test]
    fn left_only_window_is_unobservable() {
        let graph = WindowGraph {
            poses: vec![EulerPose::default()],
            rig: StereoRig::default(),
            pairs: vec![ImagePair {
                first: ImageId::left(0),
                second: ImageId::left(1),
                matches: vec![(NormalizedPoint2::default(), NormalizedPoint2::default()); 10],
            }],
            optimize_rig_rotation: false,
        };
        assert_eq!(optimize_window(&graph, 1.0, 5), Err(BaError::Unobservable));
        let mut bad = graph.clone();
        bad.pairs[0].second = ImageId::right(4);
        assert!(matches!(
            optimize_window(&bad, 1.0, 5),
            Err(BaError::FrameOutOfWindow { .. })
        ));
    }

    #[test]
    fn chain_round_trip() {
        let frames = vec![
            RigidTransform::identity(),
            RigidTransform::new(
                Rotation::from_axis_angle(&Vector3::new(0.0, 1.0, 0.0), 0.1),
                Vector3::new(0.0, 0.0, 1.0),
            ),
            RigidTransform::new(
                Rotation::from_axis_angle(&Vector3::new(0.1, 1.0, 0.0), 0.2),
                Vector3::new(0.1, 0.0, 2.0),
            ),
        ];
        let back = frame_poses(&relative_chain(&frames));
        for (a, b) in frames.iter().zip(&back) {
            assert!((a.to_homogeneous() - b.to_homogeneous()).amax() < 1e-12);
        }
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Ground-truth window of `n_frames` frames (first and last keyframes)
    /// moving forward about 1 m per frame with small rotations, observing
    /// `n_points` landmarks with isotropic noise `sigma`.
    fn synthetic_window(
        rng: &mut ChaCha8Rng,
        n_frames: usize,
        n_points: usize,
        sigma: f64,
        rig: StereoRig,
    ) -> (WindowGraph, Vec<WindowFrame>) {
        let mut frames_gt = vec![RigidTransform::identity()];
        for _ in 1..n_frames {
            let step = RigidTransform::new(
                Rotation::exp(&Vector3::new(
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.01..0.01),
                )),
                Vector3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(0.8..1.2),
                ),
            );
            let last = *frames_gt.last().unwrap();
            frames_gt.push(last.compose(&step));
        }
        let mut point_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let normal = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let mut noisy = |p: NormalizedPoint2| {
            if sigma == 0.0 {
                p
            } else {
                NormalizedPoint2::new(p.x() + normal.sample(rng), p.y() + normal.sample(rng))
            }
        };
        let mut window: Vec<WindowFrame> = (0..n_frames)
            .map(|k| WindowFrame {
                is_keyframe: k == 0 || k + 1 == n_frames,
                ..WindowFrame::default()
            })
            .collect();
        let mut points = Vec::new();
        while points.len() < n_points {
            let p = Vector3::new(
                point_rng.random_range(-8.0..8.0),
                point_rng.random_range(-6.0..6.0),
                point_rng.random_range(6.0..40.0),
            );
            let seen = frames_gt.iter().all(|f| {
                let q = f.inverse().apply(&p);
                q.z > 1.0 && rig.project_left(&q).is_some_and(|o| rig.contains(&o))
            });
            if seen {
                points.push(p);
            }
        }
        for (id, p) in points.iter().enumerate() {
            for (k, f) in frames_gt.iter().enumerate() {
                let q = f.inverse().apply(p);
                window[k]
                    .left
                    .push((id as u64, noisy(rig.project_left(&q).unwrap())));
                if window[k].is_keyframe {
                    if let Some(r) = rig.project_right(&q) {
                        window[k].right.push((id as u64, noisy(r)));
                    }
                }
            }
        }
        let graph = WindowGraph {
            poses: relative_chain(&frames_gt),
            rig,
            pairs: collect_pairs(&window, PairPolicy::AllImages),
            optimize_rig_rotation: false,
        };
        (graph, window)
    }

    fn perturbed(
        graph: &WindowGraph,
        rng: &mut ChaCha8Rng,
        angle_deg: f64,
        trans: f64,
    ) -> WindowGraph {
        let mut g = graph.clone();
        for p in &mut g.poses {
            let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>())
                - Vector3::repeat(0.5);
            let t = p.to_transform();
            let rot = Rotation::from_axis_angle(&axis, angle_deg.to_radians()).compose(&t.rotation);
            let dir = Vector3::new(rng.random(), rng.random(), rng.random::<f64>())
                - Vector3::repeat(0.5);
            *p = EulerPose::from_transform(&RigidTransform::new(
                rot,
                t.translation + dir.normalize() * trans,
            ));
        }
        g
    }

    fn pose_errors(est: &WindowGraph, gt: &WindowGraph) -> (f64, f64) {
        let (a, b) = (frame_poses(&est.poses), frame_poses(&gt.poses));
        let mut rot = 0.0;
        let mut trans = 0.0;
        for (x, y) in a.iter().zip(&b).skip(1) {
            rot += x.rotation.angle_to(&y.rotation).powi(2);
            trans += (x.translation - y.translation).norm_squared();
        }
        (rot.sqrt(), trans.sqrt())
    }

    #[test]
    fn swapped_roles_share_the_numerator() {
        let t = RigidTransform::new(
            Rotation::from_axis_angle(&Vector3::new(0.2, 1.0, -0.1), 0.07),
            Vector3::new(0.4, -0.1, 0.9),
        );
        let e = essential_from_pose(&t).unwrap();
        let et = EssentialMatrix(e.0.transpose());
        let x = NormalizedPoint2::new(0.03, -0.12);
        let y = NormalizedPoint2::new(-0.08, 0.05);
        let line_xy = (e.0 * x.homogeneous()).xy().norm();
        let line_yx = (et.0 * y.homogeneous()).xy().norm();
        let forward = epipolar_residual(&x, &y, &e).unwrap() * line_xy;
        let backward = epipolar_residual(&y, &x, &et).unwrap() * line_yx;
        assert!((forward - backward).abs() < 1e-15);
    }

    #[test]
    fn analytic_jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..6 {
            let rig = if trial % 2 == 0 {
                StereoRig::default()
            } else {
                StereoRig {
                    extrinsics: RigidTransform::new(
                        Rotation::exp(&Vector3::new(0.01, -0.02, 0.015)),
                        Vector3::new(0.5, 0.01, 0.0),
                    ),
                    ..StereoRig::default()
                }
            };
            let (gt, _) = synthetic_window(&mut rng, 2 + trial % 4, 30, 1.0 / 800.0, rig);
            let mut g = perturbed(&gt, &mut rng, 1.0, 0.1);
            g.optimize_rig_rotation = trial % 2 == 1;
            let a = window_jacobian(&g, BaJacobian::Analytic);
            let n = window_jacobian(&g, BaJacobian::CentralDifference);
            assert_eq!(a.shape(), n.shape());
            for (x, y) in a.iter().zip(n.iter()) {
                assert!(
                    (x - y).abs() <= 1e-4 * x.abs().max(y.abs()).max(1e-3),
                    "{x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn noise_free_ground_truth_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (gt, _) = synthetic_window(&mut rng, 5, 60, 0.0, StereoRig::default());
        assert!(window_cost(&gt, DEFAULT_BA_DELTA) < 1e-20);
        let out = optimize_window(&gt, DEFAULT_BA_DELTA, 10).unwrap();
        let (r, t) = pose_errors(&out, &gt);
        assert!(r < 1e-9 && t < 1e-9, "{r} {t}");
    }

    #[test]
    fn left_pairs_ignore_translation_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (gt, window) = synthetic_window(&mut rng, 5, 40, 1.0 / 800.0, StereoRig::default());
        let left_only: Vec<ImagePair> = collect_pairs(&window, PairPolicy::AllImages)
            .into_iter()
            .filter(|p| p.first.camera == Camera::Left && p.second.camera == Camera::Left)
            .collect();
        let g = WindowGraph {
            pairs: left_only,
            ..gt.clone()
        };
        let mut scaled = g.clone();
        for p in &mut scaled.poses {
            p.translation *= 2.7;
        }
        for (a, b) in window_residuals(&g).iter().zip(window_residuals(&scaled)) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_history_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (gt, _) = synthetic_window(&mut rng, 5, 150, 1.0 / 800.0, StereoRig::default());
        let start = perturbed(&gt, &mut rng, 0.5, 0.05);
        let (_, history) = optimize_window_traced(&start, &BaOptions::default()).unwrap();
        assert!(history.len() > 1);
        assert!(history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adjustment_improves_perturbed_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 50;
        let mut improved = 0;
        for _ in 0..trials {
            let (gt, _) = synthetic_window(&mut rng, 5, 150, 1.0 / 800.0, StereoRig::default());
            let start = perturbed(&gt, &mut rng, 0.5, 0.05);
            let out = optimize_window(&start, DEFAULT_BA_DELTA, 10).unwrap();
            let (r0, t0) = pose_errors(&start, &gt);
            let (r1, t1) = pose_errors(&out, &gt);
            if r1 < r0 && t1 < t0 {
                improved += 1;
            }
        }
        assert!(improved * 10 >= trials * 9, "{improved}/{trials}");
    }

    #[test]
    fn rig_rotation_is_recovered_when_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let true_rig = StereoRig {
            extrinsics: RigidTransform::new(
                Rotation::exp(&Vector3::new(0.0, 0.01, 0.0)),
                Vector3::new(0.5, 0.0, 0.0),
            ),
            ..StereoRig::default()
        };
        let (gt, _) = synthetic_window(&mut rng, 4, 150, 0.2 / 800.0, true_rig.clone());
        let mut start = gt.clone();
        start.rig = StereoRig::default();
        start.optimize_rig_rotation = true;
        let out = optimize_window(&start, DEFAULT_BA_DELTA, 30).unwrap();
        let before = start
            .rig
            .extrinsics
            .rotation
            .angle_to(&true_rig.extrinsics.rotation);
        let after = out
            .rig
            .extrinsics
            .rotation
            .angle_to(&true_rig.extrinsics.rotation);
        assert!(after < 0.2 * before, "{before} -> {after}");
        assert_eq!(
            out.rig.extrinsics.translation,
            true_rig.extrinsics.translation
        );
    }
}
