//! Bias-eliminated weighted PnP.
//!
//! The relative pose `(R, t)` maps keyframe points into the current frame,
//! `q = R p + t`, and the current-frame observation is `z ≈ h(q)`. With
//! `R = [r₁ r₂ r₃]ᵀ` the unknowns are collected as
//!
//! ```text
//! θ = α [r₃ᵀ, r₁ᵀ, t₁, r₂ᵀ, t₂]ᵀ,   α = 1 / (r₃ᵀ p̄ + t₃)
//! ```
//!
//! which turns the projection equations into the linear model `H θ = d`.
//! Noise in the triangulated points makes the ordinary least-squares
//! solution inconsistent; subtracting the expected noise contribution `G`
//! from the normal matrix removes the bias. The estimate is then polished
//! by a covariance-weighted Levenberg-Marquardt step under a truncated
//! least-squares kernel.

use nalgebra::{
    DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, SMatrix, SVector, Vector2, Vector3, Vector6,
};
use thiserror::Error;

use crate::geometry::{
    nearest_rotation, projection_jacobian, GeometryError, NormalizedPoint2, RigidTransform,
    Rotation, DEPTH_EPSILON,
};
use crate::triangulation::TriangulatedPoint;

/// Minimum correspondences: 11 unknowns, two equations per point.
pub const MIN_PNP_POINTS: usize = 6;
/// Minimum correspondences for the ℓ1 prefilter.
pub const MIN_PREFILTER_POINTS: usize = 8;
pub const MAX_CONDITION: f64 = 1e12;
/// Default TLS threshold on squared reprojection residuals (normalized units²).
pub const DEFAULT_PNP_DELTA: f64 = 5e-5;
pub const DEFAULT_TRIM_FRACTION: f64 = 0.10;

pub type Matrix11 = SMatrix<f64, 11, 11>;
pub type Vector11 = SVector<f64, 11>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("points and observations differ in length ({points} vs {observations})")]
    LengthMismatch { points: usize, observations: usize },
    #[error("normal matrix is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),
    #[error("recovered scale {0:e} is not positive")]
    NegativeScale(f64),
    #[error("refinement diverged: cost rose on {0} consecutive damping escalations")]
    DivergedRefinement(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// 3D–2D correspondences: keyframe points with covariances and their
/// normalized observations in the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PnPProblem {
    points: Vec<TriangulatedPoint>,
    observations: Vec<NormalizedPoint2>,
}

impl PnPProblem {
    pub fn new(
        points: Vec<TriangulatedPoint>,
        observations: Vec<NormalizedPoint2>,
    ) -> Result<Self, PnpError> {
        if points.len() != observations.len() {
            return Err(PnpError::LengthMismatch {
                points: points.len(),
                observations: observations.len(),
            });
        }
        if points.len() < MIN_PNP_POINTS {
            return Err(PnpError::TooFewPoints {
                needed: MIN_PNP_POINTS,
                got: points.len(),
            });
        }
        Ok(Self {
            points,
            observations,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[TriangulatedPoint] {
        &self.points
    }

    pub fn observations(&self) -> &[NormalizedPoint2] {
        &self.observations
    }

    /// Mean point `p̄`.
    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().map(|t| t.p).sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// Keeps the correspondences at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, PnpError> {
        Self::new(
            indices.iter().map(|&i| self.points[i]).collect(),
            indices.iter().map(|&i| self.observations[i]).collect(),
        )
    }
}

/// Scaled, reordered pose parameters `α [r₃ᵀ, r₁ᵀ, t₁, r₂ᵀ, t₂]ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaVector(pub Vector11);

impl ThetaVector {
    /// Parameter vector of a known pose for centroid `p_bar`.
    pub fn from_pose(pose: &RigidTransform, p_bar: &Vector3<f64>) -> Self {
        let r = pose.rotation.matrix();
        let t = pose.translation;
        let (r1, r2, r3) = (r.row(0), r.row(1), r.row(2));
        let alpha = 1.0 / (r3.dot(&p_bar.transpose()) + t.z);
        let mut v = Vector11::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&r3.transpose());
        v.fixed_rows_mut::<3>(3).copy_from(&r1.transpose());
        v[6] = t.x;
        v.fixed_rows_mut::<3>(7).copy_from(&r2.transpose());
        v[10] = t.y;
        Self(v * alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoseStage {
    BiasEliminated,
    Refined,
    L1Prefilter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidTransform,
    pub stage: PoseStage,
    pub inlier_mask: Vec<bool>,
}

/// Stacked design matrix `H` (2n×11) and observation vector `d` (2n).
pub fn build_design(problem: &PnPProblem) -> (DMatrix<f64>, DVector<f64>) {
    let n = problem.len();
    let p_bar = problem.centroid();
    let mut h = DMatrix::zeros(2 * n, 11);
    let mut d = DVector::zeros(2 * n);
    for (i, (pt, z)) in problem.points.iter().zip(&problem.observations).enumerate() {
        let centered = pt.p - p_bar;
        for c in 0..2 {
            let row = 2 * i + c;
            for k in 0..3 {
                h[(row, k)] = -z.0[c] * centered[k];
            }
            let offset = 3 + 4 * c;
            for k in 0..3 {
                h[(row, offset + k)] = pt.p[k];
            }
            h[(row, offset + 3)] = 1.0;
            d[row] = z.0[c];
        }
    }
    (h, d)
}

/// `(HᵀH, Hᵀd)` accumulated without materializing `H`.
fn normal_equations(problem: &PnPProblem) -> (Matrix11, Vector11) {
    let p_bar = problem.centroid();
    let mut hth = Matrix11::zeros();
    let mut htd = Vector11::zeros();
    for (pt, z) in problem.points.iter().zip(&problem.observations) {
        let centered = pt.p - p_bar;
        for c in 0..2 {
            let mut row = Vector11::zeros();
            row.fixed_rows_mut::<3>(0).copy_from(&(-z.0[c] * centered));
            let offset = 3 + 4 * c;
            row.fixed_rows_mut::<3>(offset).copy_from(&pt.p);
            row[offset + 3] = 1.0;
            hth.ger(1.0, &row, &row, 1.0);
            htd.axpy(z.0[c], &row, 1.0);
        }
    }
    (hth, htd)
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// from roundoff are clamped to zero.
pub fn psd_sqrt(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = m.symmetric_eigen();
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    eig.eigenvectors * Matrix3::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Noise correction `G = (1/n) Σ GᵢᵀGᵢ` with
/// `Gᵢ = [−zᵢ ⊗ Σᵢ^½, I₂ ⊗ [Σᵢ^½, 0₃ₓ₁]]`.
pub fn noise_correction(problem: &PnPProblem) -> Matrix11 {
    let mut g = Matrix11::zeros();
    for (pt, z) in problem.points.iter().zip(&problem.observations) {
        let s = psd_sqrt(&pt.cov);
        let mut gi = SMatrix::<f64, 6, 11>::zeros();
        for c in 0..2 {
            let rows = 3 * c;
            gi.fixed_view_mut::<3, 3>(rows, 0).copy_from(&(-z.0[c] * s));
            gi.fixed_view_mut::<3, 3>(rows, 3 + 4 * c).copy_from(&s);
        }
        g += gi.transpose() * gi;
    }
    g / problem.len() as f64
}

/// Solves `M θ = v` for symmetric `M` after diagonal equilibration, rejecting
/// systems whose equilibrated condition number reaches [`MAX_CONDITION`].
fn solve_symmetric(m: &Matrix11, v: &Vector11) -> Result<Vector11, PnpError> {
    let scale = m.diagonal().map(|x| {
        let a = x.abs();
        if a > 0.0 {
            1.0 / a.sqrt()
        } else {
            1.0
        }
    });
    let dm = Matrix11::from_diagonal(&scale);
    let balanced = dm * m * dm;
    let eig = balanced.symmetric_eigenvalues();
    let hi = eig.amax();
    let lo = eig.iter().fold(f64::INFINITY, |acc, l| acc.min(l.abs()));
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !cond.is_finite() || cond >= MAX_CONDITION {
        return Err(PnpError::IllConditioned(cond));
    }
    let y = balanced
        .lu()
        .solve(&(dm * v))
        .ok_or(PnpError::IllConditioned(f64::INFINITY))?;
    Ok(dm * y)
}

/// Ordinary least-squares `θ̂ᴮ = (HᵀH)⁻¹Hᵀd`.
pub fn solve_biased(problem: &PnPProblem) -> Result<ThetaVector, PnpError> {
    let (hth, htd) = normal_equations(problem);
    solve_symmetric(&hth, &htd).map(ThetaVector)
}

/// Pose from the ordinary least-squares solution.
pub fn solve_biased_pose(problem: &PnPProblem) -> Result<RigidTransform, PnpError> {
    recover_pose(&solve_biased(problem)?, &problem.centroid())
}

/// `θ̂ᴮᴱ = (HᵀH/n − G)⁻¹ (Hᵀd/n)`.
pub fn solve_bias_eliminated_theta(problem: &PnPProblem) -> Result<ThetaVector, PnpError> {
    let n = problem.len() as f64;
    let (hth, htd) = normal_equations(problem);
    let m = hth / n - noise_correction(problem);
    solve_symmetric(&m, &(htd / n)).map(ThetaVector)
}

pub fn solve_bias_eliminated(problem: &PnPProblem) -> Result<PoseEstimate, PnpError> {
    let theta = solve_bias_eliminated_theta(problem)?;
    let pose = recover_pose(&theta, &problem.centroid())?;
    Ok(PoseEstimate {
        pose,
        stage: PoseStage::BiasEliminated,
        inlier_mask: vec![true; problem.len()],
    })
}

/// Recovers `(R, t)` from `θ`: the three row blocks are rescaled by their
/// mean norm, projected onto SO(3), and `t₃` follows from `α`.
pub fn recover_pose(theta: &ThetaVector, p_bar: &Vector3<f64>) -> Result<RigidTransform, PnpError> {
    let v = &theta.0;
    let r3 = v.fixed_rows::<3>(0).into_owned();
    let r1 = v.fixed_rows::<3>(3).into_owned();
    let r2 = v.fixed_rows::<3>(7).into_owned();
    if r3.norm() <= 1e-9 {
        return Err(PnpError::NegativeScale(r3.norm()));
    }
    let stacked = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);
    // a negative α flips every row, which shows up as a reflected frame
    let sign = stacked.determinant().signum();
    let alpha = sign * (r1.norm() + r2.norm() + r3.norm()) / 3.0;
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(PnpError::NegativeScale(alpha));
    }
    let rotation = nearest_rotation(&(stacked / alpha))?;
    let third_row = rotation.matrix().row(2).transpose();
    let t = Vector3::new(
        v[6] / alpha,
        v[10] / alpha,
        1.0 / alpha - third_row.dot(p_bar),
    );
    Ok(RigidTransform::new(rotation, t))
}

/// Fixed whitening weights `Σ̄ᵢ^{-½}` with `Σ̄ᵢ = J_hᵢ Σᵢ J_hᵢᵀ`, evaluated at
/// `pose`, rescaled by one common factor so residuals stay in normalized
/// image units (the TLS threshold is expressed in those units).
fn point_weights(problem: &PnPProblem, pose: &RigidTransform) -> Vec<Matrix2<f64>> {
    let r = pose.rotation.matrix();
    let projected: Vec<Option<Matrix2<f64>>> = problem
        .points
        .iter()
        .map(|pt| {
            let q = pose.apply(&pt.p);
            if q.z <= DEPTH_EPSILON {
                return None;
            }
            let jh: Matrix2x3<f64> = projection_jacobian(&q) * r;
            Some(jh * pt.cov * jh.transpose())
        })
        .collect();
    let mut traces: Vec<f64> = projected
        .iter()
        .flatten()
        .map(|c| c.trace() / 2.0)
        .collect();
    // median, not mean: a single point close to the camera can have a
    // projected covariance orders of magnitude above the rest
    traces.sort_by(f64::total_cmp);
    let typical = traces.get(traces.len() / 2).copied().unwrap_or(0.0);
    if !(typical > 0.0) {
        return vec![Matrix2::identity(); problem.len()];
    }
    let ridge = typical * 1e-9;
    projected
        .into_iter()
        .map(|c| match c {
            None => Matrix2::identity(),
            Some(c) => {
                let c = (c + c.transpose()) * 0.5 + Matrix2::identity() * ridge;
                let eig = c.symmetric_eigen();
                let inv_root = eig.eigenvalues.map(|l| (typical / l.max(ridge)).sqrt());
                eig.eigenvectors * Matrix2::from_diagonal(&inv_root) * eig.eigenvectors.transpose()
            }
        })
        .collect()
}

struct Linearized {
    residual: Vector2<f64>,
    jacobian: SMatrix<f64, 2, 6>,
}

/// Residual `h(R p + t) − z` and its Jacobian for the right-multiplied
/// rotation increment and additive translation increment.
fn linearize(pose: &RigidTransform, p: &Vector3<f64>, z: &NormalizedPoint2) -> Option<Linearized> {
    let q = pose.apply(p);
    if q.z <= DEPTH_EPSILON {
        return None;
    }
    let jp = projection_jacobian(&q);
    let mut j = SMatrix::<f64, 2, 6>::zeros();
    let r = pose.rotation.matrix();
    j.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(jp * (-r * crate::geometry::skew(p))));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
    Some(Linearized {
        residual: Vector2::new(q.x / q.z, q.y / q.z) - z.0,
        jacobian: j,
    })
}

fn apply_increment(pose: &RigidTransform, step: &Vector6<f64>) -> RigidTransform {
    let omega = Vector3::new(step[0], step[1], step[2]);
    let dt = Vector3::new(step[3], step[4], step[5]);
    RigidTransform::new(
        pose.rotation.compose(&Rotation::exp(&omega)),
        pose.translation + dt,
    )
}

fn tls_cost(
    problem: &PnPProblem,
    weights: &[Matrix2<f64>],
    pose: &RigidTransform,
    delta: f64,
) -> f64 {
    problem
        .points
        .iter()
        .zip(&problem.observations)
        .zip(weights)
        .map(|((pt, z), w)| {
            let q = pose.apply(&pt.p);
            if q.z <= DEPTH_EPSILON {
                return delta;
            }
            let r = w * (Vector2::new(q.x / q.z, q.y / q.z) - z.0);
            r.norm_squared().min(delta)
        })
        .sum()
}

/// Levenberg-Marquardt settings shared by the refinement and the BA.
pub(crate) struct Damping {
    pub lambda: f64,
}

impl Damping {
    pub const INITIAL: f64 = 1e-4;
    pub const FACTOR: f64 = 10.0;
    pub const MAX_REJECTIONS: usize = 5;
    pub const MIN_STEP: f64 = 1e-10;

    pub fn new() -> Self {
        Self {
            lambda: Self::INITIAL,
        }
    }
}

/// Weighted TLS refinement; see [`refine_weighted_tls_traced`].
pub fn refine_weighted_tls(
    problem: &PnPProblem,
    init: &PoseEstimate,
    delta: f64,
    max_iters: usize,
) -> Result<PoseEstimate, PnpError> {
    refine_weighted_tls_traced(problem, init, delta, max_iters).map(|(est, _)| est)
}

/// Minimizes `Σ ρ_δ(‖Σ̄ᵢ^{-½}(h(R pᵢ + t) − zᵢ)‖²)` from `init` by damped
/// Gauss-Newton. Also returns the robust cost after every accepted step,
/// starting with the initial cost.
pub fn refine_weighted_tls_traced(
    problem: &PnPProblem,
    init: &PoseEstimate,
    delta: f64,
    max_iters: usize,
) -> Result<(PoseEstimate, Vec<f64>), PnpError> {
    let weights = point_weights(problem, &init.pose);
    let mut pose = init.pose;
    let mut cost = tls_cost(problem, &weights, &pose, delta);
    let mut history = vec![cost];
    let mut damping = Damping::new();
    let mut accepted_any = false;

    'outer: for _ in 0..max_iters {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = Vector6::zeros();
        for ((pt, z), w) in problem
            .points
            .iter()
            .zip(&problem.observations)
            .zip(&weights)
        {
            let Some(lin) = linearize(&pose, &pt.p, z) else {
                continue;
            };
            let r = w * lin.residual;
            if r.norm_squared() > delta {
                continue;
            }
            let j = w * lin.jacobian;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        if jtr.amax() == 0.0 {
            break;
        }
        let mut rejections = 0;
        loop {
            let mut damped = jtj;
            for k in 0..6 {
                damped[(k, k)] += damping.lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| -c.solve(&jtr)) else {
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
            let candidate = apply_increment(&pose, &step);
            let candidate_cost = tls_cost(problem, &weights, &candidate, delta);
            if candidate_cost < cost {
                pose = candidate;
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
                    return Err(PnpError::DivergedRefinement(rejections));
                }
                break 'outer;
            }
        }
    }

    let inlier_mask = problem
        .points
        .iter()
        .zip(&problem.observations)
        .zip(&weights)
        .map(|((pt, z), w)| {
            let q = pose.apply(&pt.p);
            q.z > DEPTH_EPSILON
                && (w * (Vector2::new(q.x / q.z, q.y / q.z) - z.0)).norm_squared() <= delta
        })
        .collect();
    Ok((
        PoseEstimate {
            pose,
            stage: PoseStage::Refined,
            inlier_mask,
        },
        history,
    ))
}

/// Reprojection error `‖h(R p + t) − z‖` of every correspondence;
/// infinite for points that land behind the camera.
pub fn reprojection_errors(problem: &PnPProblem, pose: &RigidTransform) -> Vec<f64> {
    problem
        .points
        .iter()
        .zip(&problem.observations)
        .map(|(pt, z)| {
            let q = pose.apply(&pt.p);
            if q.z <= DEPTH_EPSILON {
                f64::INFINITY
            } else {
                (Vector2::new(q.x / q.z, q.y / q.z) - z.0).norm()
            }
        })
        .collect()
}

/// Output of [`l1_prefilter`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prefiltered {
    /// The trimmed problem.
    pub problem: PnPProblem,
    /// Indices into the input problem of the kept correspondences, ascending.
    pub kept: Vec<usize>,
    /// Robust pose from the ℓ1 fit.
    pub estimate: PoseEstimate,
}

const L1_SWEEPS: usize = 10;
const L1_WEIGHT_FLOOR: f64 = 1e-8;

fn l1_cost(problem: &PnPProblem, pose: &RigidTransform) -> f64 {
    problem
        .points
        .iter()
        .zip(&problem.observations)
        .map(|(pt, z)| match linearize(pose, &pt.p, z) {
            Some(lin) => lin.residual.abs().sum(),
            // behind the camera: a bounded penalty keeps the cost comparable
            None => 1.0,
        })
        .sum()
}

/// ℓ1 pose fit by iteratively reweighted least squares from `init`, followed
/// by removal of the `⌈trim_fraction · n⌉` correspondences with the largest
/// reprojection error.
pub fn l1_prefilter(
    problem: &PnPProblem,
    init: &RigidTransform,
    trim_fraction: f64,
) -> Result<Prefiltered, PnpError> {
    let n = problem.len();
    if n < MIN_PREFILTER_POINTS {
        return Err(PnpError::TooFewPoints {
            needed: MIN_PREFILTER_POINTS,
            got: n,
        });
    }
    let mut pose = *init;
    let mut cost = l1_cost(problem, &pose);
    let mut damping = Damping::new();
    for _ in 0..L1_SWEEPS {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = Vector6::zeros();
        for (pt, z) in problem.points.iter().zip(&problem.observations) {
            let Some(lin) = linearize(&pose, &pt.p, z) else {
                continue;
            };
            for c in 0..2 {
                let w = 1.0 / lin.residual[c].abs().max(L1_WEIGHT_FLOOR);
                let row = lin.jacobian.row(c);
                jtj += w * row.transpose() * row;
                jtr += w * lin.residual[c] * row.transpose();
            }
        }
        let mut improved = false;
        let mut tiny_step = false;
        for _ in 0..Damping::MAX_REJECTIONS {
            let mut damped = jtj;
            for k in 0..6 {
                damped[(k, k)] += damping.lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                damping.lambda *= Damping::FACTOR;
                continue;
            };
            let step = -chol.solve(&jtr);
            if step.norm() < Damping::MIN_STEP {
                tiny_step = true;
                break;
            }
            let candidate = apply_increment(&pose, &step);
            let candidate_cost = l1_cost(problem, &candidate);
            if candidate_cost < cost {
                pose = candidate;
                cost = candidate_cost;
                damping.lambda /= Damping::FACTOR;
                improved = true;
                break;
            }
            damping.lambda *= Damping::FACTOR;
        }
        if tiny_step || !improved {
            break;
        }
    }

    let errors = reprojection_errors(problem, &pose);
    let n_remove = (trim_fraction.clamp(0.0, 1.0) * n as f64 - 1e-9)
        .ceil()
        .max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..n - n_remove.min(n)].to_vec();
    kept.sort_unstable();
    let reduced = problem.subset(&kept)?;
    let mut inlier_mask = vec![false; n];
    for &k in &kept {
        inlier_mask[k] = true;
    }
    Ok(Prefiltered {
        problem: reduced,
        kept,
        estimate: PoseEstimate {
            pose,
            stage: PoseStage::L1Prefilter,
            inlier_mask,
        },
    })
}
