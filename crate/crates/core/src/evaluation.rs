//! Trajectory error metrics and log-log slope fitting.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{geodesic_angle, skew, RigidTransform, Rotation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("trajectories differ in length ({estimated} vs {ground_truth})")]
    LengthMismatch {
        estimated: usize,
        ground_truth: usize,
    },
    #[error("need at least {needed} poses, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("log-log fit needs positive values, got ({n}, {value})")]
    NonPositiveInput { n: f64, value: f64 },
    #[error("log-log fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    estimated: Vec<RigidTransform>,
    ground_truth: Vec<RigidTransform>,
}

impl TrajectoryPair {
    pub fn new(
        estimated: Vec<RigidTransform>,
        ground_truth: Vec<RigidTransform>,
    ) -> Result<Self, EvaluationError> {
        if estimated.len() != ground_truth.len() {
            return Err(EvaluationError::LengthMismatch {
                estimated: estimated.len(),
                ground_truth: ground_truth.len(),
            });
        }
        if estimated.len() < 2 {
            return Err(EvaluationError::TooShort {
                needed: 2,
                got: estimated.len(),
            });
        }
        Ok(Self {
            estimated,
            ground_truth,
        })
    }

    pub fn estimated(&self) -> &[RigidTransform] {
        &self.estimated
    }

    pub fn ground_truth(&self) -> &[RigidTransform] {
        &self.ground_truth
    }

    pub fn len(&self) -> usize {
        self.estimated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimated.is_empty()
    }
}

/// RMSE errors; translations in meters, rotations in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub ate_t: f64,
    pub ate_r: f64,
    pub rpe_t: f64,
    pub rpe_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteResult {
    pub ate_t: f64,
    pub ate_r: f64,
    /// The ground-truth positions are collinear, so position alignment
    /// alone leaves the rotation about that line free; orientations were
    /// used to fix it.
    pub degenerate: bool,
    /// Transform applied to the estimated trajectory.
    pub alignment: RigidTransform,
}

fn rmse(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Least-squares rigid transform `(R, t)` with `R src + t ≈ dst`.
fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> RigidTransform {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let h: Matrix3<f64> = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (d - cd) * (s - cs).transpose())
        .sum();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * v_t;
    RigidTransform::new(Rotation::from_matrix_unchecked(r), cd - r * cs)
}

/// Unit direction of the best-fit line when the points are collinear.
fn collinear_direction(points: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    let scatter: Matrix3<f64> = points.iter().map(|p| (p - c) * (p - c).transpose()).sum();
    let eig = scatter.symmetric_eigen();
    let top = eig.eigenvalues.imax();
    let rest = eig.eigenvalues.sum() - eig.eigenvalues[top];
    // RMS distance from the best-fit line
    ((rest.max(0.0) / n).sqrt() <= 1e-9).then(|| eig.eigenvectors.column(top).into_owned())
}

/// Absolute trajectory error after rigid (no scale) alignment of the
/// estimated positions onto the ground truth.
///
/// When the ground-truth positions are collinear every rotation about that
/// line is optimal for the positions; the angle is then chosen to best align
/// the orientations, which leaves `ate_t` unchanged.
pub fn ate(pair: &TrajectoryPair) -> AteResult {
    let est: Vec<Vector3<f64>> = pair.estimated.iter().map(|t| t.translation).collect();
    let gt: Vec<Vector3<f64>> = pair.ground_truth.iter().map(|t| t.translation).collect();
    let mut alignment = kabsch(&est, &gt);
    let axis = collinear_direction(&gt);
    if let Some(u) = axis {
        let r0 = alignment.rotation;
        let a: Matrix3<f64> = pair
            .estimated
            .iter()
            .zip(&pair.ground_truth)
            .map(|(e, g)| r0.matrix() * e.rotation.matrix() * g.rotation.matrix().transpose())
            .sum();
        // maximize tr(Rot(u, φ) A)
        let along = u.dot(&(a * u));
        let phi = (skew(&u) * a).trace().atan2(a.trace() - along);
        let spin = Rotation::from_axis_angle(&u, phi);
        let rotation = spin.compose(&r0);
        let n = gt.len() as f64;
        let cs = est.iter().sum::<Vector3<f64>>() / n;
        let cd = gt.iter().sum::<Vector3<f64>>() / n;
        alignment = RigidTransform::new(rotation, cd - rotation.rotate(&cs));
    }
    let ate_t = rmse(
        est.iter()
            .zip(&gt)
            .map(|(e, g)| (alignment.apply(e) - g).norm()),
    );
    let ate_r = rmse(pair.estimated.iter().zip(&pair.ground_truth).map(|(e, g)| {
        let aligned = alignment.rotation.compose(&e.rotation);
        aligned.angle_to(&g.rotation).to_degrees()
    }));
    AteResult {
        ate_t,
        ate_r,
        degenerate: axis.is_some(),
        alignment,
    }
}

/// Relative pose error over `step`-frame intervals.
pub fn rpe(pair: &TrajectoryPair, step: usize) -> Result<(f64, f64), EvaluationError> {
    let step = step.max(1);
    if pair.len() < step + 1 {
        return Err(EvaluationError::TooShort {
            needed: step + 1,
            got: pair.len(),
        });
    }
    let discrepancies: Vec<RigidTransform> = (0..pair.len() - step)
        .map(|i| {
            let est = pair.estimated[i]
                .inverse()
                .compose(&pair.estimated[i + step]);
            let gt = pair.ground_truth[i]
                .inverse()
                .compose(&pair.ground_truth[i + step]);
            est.inverse().compose(&gt)
        })
        .collect();
    Ok((
        rmse(discrepancies.iter().map(|d| d.translation.norm())),
        rmse(
            discrepancies
                .iter()
                .map(|d| geodesic_angle(d.rotation.matrix()).to_degrees()),
        ),
    ))
}

/// ATE and step-1 RPE together.
pub fn evaluate(pair: &TrajectoryPair) -> MetricReport {
    let a = ate(pair);
    let (rpe_t, rpe_r) = rpe(pair, 1).expect("pairs hold at least two poses");
    MetricReport {
        ate_t: a.ate_t,
        ate_r: a.ate_r,
        rpe_t,
        rpe_r,
    }
}

/// Least-squares slope of `log₂ value` against `log₂ n`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64, EvaluationError> {
    if points.len() < 3 {
        return Err(EvaluationError::TooFewPoints(points.len()));
    }
    if let Some(&(n, value)) = points.iter().find(|(n, v)| !(*n > 0.0 && *v > 0.0)) {
        return Err(EvaluationError::NonPositiveInput { n, value });
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| n.log2()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.log2()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `trials` fair coin flips.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    let mut choose = 1.0;
    let mut tail = 0.0;
    for k in 0..=trials {
        if k > 0 {
            choose *= (trials + 1 - k) as f64 / k as f64;
        }
        if k >= wins {
            tail += choose;
        }
    }
    tail / 2f64.powi(trials as i32)
}
