//! Linear least-squares stereo triangulation with first-order covariance.
//!
//! For a right observation `x` and left observation `y`, the point `p` in
//! the left camera frame satisfies `yʰ × p = 0` and
//! `xʰ × R₀ᵀ(p − t₀) = 0`. Stacking both gives `A p = b` with
//!
//! ```text
//! A = [ yʰ^∧ ; xʰ^∧ R₀ᵀ ],   b = [ 0₃ ; xʰ^∧ R₀ᵀ t₀ ]
//! ```
//!
//! solved in the least-squares sense. The covariance is propagated through
//! the Jacobian of that solution with respect to the four observation
//! coordinates.

use nalgebra::{Matrix3, Matrix3x4, SMatrix, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{project, skew, NormalizedPoint2, RigidTransform};
use crate::noise::{observation_covariance, NoiseModel};

/// Upper bound on the condition number of `AᵀA`.
pub const MAX_CONDITION: f64 = 1e12;

type Matrix6x3 = SMatrix<f64, 6, 3>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriangulationError {
    #[error("degenerate stereo geometry (condition number {0:e})")]
    DegenerateGeometry(f64),
}

/// Calibrated stereo pair. `extrinsics` is the pose `(R₀, t₀)` of the right
/// camera in the left camera frame, so `p_left = R₀ p_right + t₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoRig {
    pub focal_px: f64,
    pub principal_point: Vector2<f64>,
    pub image_size: (u32, u32),
    pub extrinsics: RigidTransform,
}

impl Default for StereoRig {
    /// f = 800 px, principal point (320, 240), 640×480 images, 0.5 m
    /// lateral baseline with parallel optical axes.
    fn default() -> Self {
        Self {
            focal_px: 800.0,
            principal_point: Vector2::new(320.0, 240.0),
            image_size: (640, 480),
            extrinsics: RigidTransform::from_translation(Vector3::new(0.5, 0.0, 0.0)),
        }
    }
}

impl StereoRig {
    pub fn baseline(&self) -> f64 {
        self.extrinsics.translation.norm()
    }

    /// `E₀ = t₀^∧ R₀`; a right/left match `(x, y)` satisfies `yʰᵀ E₀ xʰ = 0`.
    pub fn essential(&self) -> Matrix3<f64> {
        skew(&self.extrinsics.translation) * self.extrinsics.rotation.matrix()
    }

    pub fn pixel_to_normalized(&self, pixel: &Vector2<f64>) -> NormalizedPoint2 {
        NormalizedPoint2((pixel - self.principal_point) / self.focal_px)
    }

    pub fn normalized_to_pixel(&self, p: &NormalizedPoint2) -> Vector2<f64> {
        p.0 * self.focal_px + self.principal_point
    }

    pub fn contains_pixel(&self, pixel: &Vector2<f64>) -> bool {
        let (w, h) = self.image_size;
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < f64::from(w) && pixel.y < f64::from(h)
    }

    pub fn contains(&self, p: &NormalizedPoint2) -> bool {
        self.contains_pixel(&self.normalized_to_pixel(p))
    }

    /// Maps a point from the left camera frame to the right camera frame.
    pub fn left_to_right(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsics.inverse().apply(p)
    }

    /// Projection into the left image, `None` when behind the camera or
    /// outside the image.
    pub fn project_left(&self, p: &Vector3<f64>) -> Option<NormalizedPoint2> {
        project(p).ok().filter(|q| self.contains(q))
    }

    /// Projection of a left-frame point into the right image.
    pub fn project_right(&self, p: &Vector3<f64>) -> Option<NormalizedPoint2> {
        self.project_left(&self.left_to_right(p))
    }
}

/// Triangulated point in the left keyframe frame with its covariance (m²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulatedPoint {
    pub p: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

impl TriangulatedPoint {
    pub fn exact(p: Vector3<f64>) -> Self {
        Self {
            p,
            cov: Matrix3::zeros(),
        }
    }

    /// Expresses the point in another frame through `t`; the covariance is
    /// rotated, nothing is added for uncertainty in `t` itself.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        let r = t.rotation.matrix();
        Self {
            p: t.apply(&self.p),
            cov: r * self.cov * r.transpose(),
        }
    }
}

/// How [`triangulation_jacobian`] obtains derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianMethod {
    #[default]
    Analytic,
    /// Central differences with step 1e-6, kept for cross-checking.
    CentralDifference,
}

struct LinearSystem {
    a: Matrix6x3,
    b: Vector6<f64>,
    normal: Matrix3<f64>,
}

fn linear_system(x: &NormalizedPoint2, y: &NormalizedPoint2, rig: &StereoRig) -> LinearSystem {
    let r0t = rig.extrinsics.rotation.matrix().transpose();
    let sx = skew(&x.homogeneous()) * r0t;
    let mut a = Matrix6x3::zeros();
    a.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&skew(&y.homogeneous()));
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&sx);
    let mut b = Vector6::zeros();
    b.fixed_rows_mut::<3>(3)
        .copy_from(&(sx * rig.extrinsics.translation));
    let normal = a.transpose() * a;
    LinearSystem { a, b, normal }
}

fn check_conditioning(normal: &Matrix3<f64>) -> Result<(), TriangulationError> {
    let eig = normal.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 || hi / lo >= MAX_CONDITION {
        let cond = if lo <= 0.0 { f64::INFINITY } else { hi / lo };
        return Err(TriangulationError::DegenerateGeometry(cond));
    }
    Ok(())
}

fn solve(sys: &LinearSystem) -> Result<Vector3<f64>, TriangulationError> {
    check_conditioning(&sys.normal)?;
    let chol = sys
        .normal
        .cholesky()
        .ok_or(TriangulationError::DegenerateGeometry(f64::INFINITY))?;
    Ok(chol.solve(&(sys.a.transpose() * sys.b)))
}

/// Least-squares triangulation of a right/left match.
pub fn triangulate(
    x: &NormalizedPoint2,
    y: &NormalizedPoint2,
    rig: &StereoRig,
) -> Result<Vector3<f64>, TriangulationError> {
    solve(&linear_system(x, y, rig))
}

/// 3×4 Jacobian of [`triangulate`] with respect to `(x₁, x₂, y₁, y₂)`.
pub fn triangulation_jacobian(
    x: &NormalizedPoint2,
    y: &NormalizedPoint2,
    rig: &StereoRig,
) -> Result<Matrix3x4<f64>, TriangulationError> {
    triangulation_jacobian_with(x, y, rig, JacobianMethod::Analytic)
}

pub fn triangulation_jacobian_with(
    x: &NormalizedPoint2,
    y: &NormalizedPoint2,
    rig: &StereoRig,
    method: JacobianMethod,
) -> Result<Matrix3x4<f64>, TriangulationError> {
    match method {
        JacobianMethod::Analytic => analytic_jacobian(x, y, rig),
        JacobianMethod::CentralDifference => numeric_jacobian(x, y, rig),
    }
}

fn analytic_jacobian(
    x: &NormalizedPoint2,
    y: &NormalizedPoint2,
    rig: &StereoRig,
) -> Result<Matrix3x4<f64>, TriangulationError> {
    let sys = linear_system(x, y, rig);
    let p = solve(&sys)?;
    let chol = sys
        .normal
        .cholesky()
        .ok_or(TriangulationError::DegenerateGeometry(f64::INFINITY))?;
    let residual = sys.b - sys.a * p;
    let r0t = rig.extrinsics.rotation.matrix().transpose();
    let t0 = rig.extrinsics.translation;

    // N p = Aᵀb differentiated: N dp = dAᵀ (b − A p) + Aᵀ (db − dA p).
    let mut jac = Matrix3x4::zeros();
    for k in 0..4 {
        let mut unit = Vector3::zeros();
        unit[k % 2] = 1.0;
        let d_skew = skew(&unit);
        let mut da = Matrix6x3::zeros();
        let mut db = Vector6::zeros();
        if k < 2 {
            let block = d_skew * r0t;
            da.fixed_view_mut::<3, 3>(3, 0).copy_from(&block);
            db.fixed_rows_mut::<3>(3).copy_from(&(block * t0));
        } else {
            da.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_skew);
        }
        let rhs = da.transpose() * residual + sys.a.transpose() * (db - da * p);
        jac.set_column(k, &chol.solve(&rhs));
    }
    Ok(jac)
}

fn numeric_jacobian(
    x: &NormalizedPoint2,
    y: &NormalizedPoint2,
    rig: &StereoRig,
) -> Result<Matrix3x4<f64>, TriangulationError> {
    const STEP: f64 = 1e-6;
    triangulate(x, y, rig)?;
    let mut jac = Matrix3x4::zeros();
    for k in 0..4 {
        let shifted = |h: f64| {
            let (mut xs, mut ys) = (*x, *y);
            if k < 2 {
                xs.0[k] += h;
            } else {
                ys.0[k - 2] += h;
            }
            triangulate(&xs, &ys, rig)
        };
        let col = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
        jac.set_column(k, &col);
    }
    Ok(jac)
}

/// Triangulates and propagates `σ̂² I₄` through the Jacobian.
pub fn triangulate_with_cov(
    x: &NormalizedPoint2,
    y: &NormalizedPoint2,
    rig: &StereoRig,
    noise: &NoiseModel,
) -> Result<TriangulatedPoint, TriangulationError> {
    let p = triangulate(x, y, rig)?;
    let jac = analytic_jacobian(x, y, rig)?;
    let cov = jac * observation_covariance(noise) * jac.transpose();
    Ok(TriangulatedPoint {
        p,
        cov: (cov + cov.transpose()) * 0.5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn observe(rig: &StereoRig, p: &Vector3<f64>) -> (NormalizedPoint2, NormalizedPoint2) {
        (project(&rig.left_to_right(p)).unwrap(), project(p).unwrap())
    }

    #[test]
    fn hand_constructed_points() {
        let rig = StereoRig::default();
        let p = triangulate(
            &NormalizedPoint2::new(-0.1, 0.0),
            &NormalizedPoint2::new(0.0, 0.0),
            &rig,
        )
        .unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 5.0)).amax() < 1e-12);

        let p = triangulate(
            &NormalizedPoint2::new(0.05, 0.2),
            &NormalizedPoint2::new(0.1, 0.2),
            &rig,
        )
        .unwrap();
        assert!((p - Vector3::new(1.0, 2.0, 10.0)).amax() < 1e-12);
    }

    #[test]
    fn noise_free_round_trip() {
        let rig = StereoRig {
            extrinsics: RigidTransform::new(
                Rotation::from_axis_angle(&Vector3::new(0.0, 1.0, 0.1), 0.02),
                Vector3::new(0.5, 0.01, 0.0),
            ),
            ..StereoRig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        while checked < 1000 {
            let p = Vector3::new(
                rng.random_range(-15.0..15.0),
                rng.random_range(-12.0..12.0),
                rng.random_range(1.0..40.0),
            );
            let (Some(y), Some(x)) = (rig.project_left(&p), rig.project_right(&p)) else {
                continue;
            };
            let est = triangulate(&x, &y, &rig).unwrap();
            assert!((est - p).norm() < 1e-9, "{}", (est - p).norm());
            checked += 1;
        }
    }

    #[test]
    fn parallel_rays_are_degenerate() {
        let rig = StereoRig::default();
        let q = NormalizedPoint2::new(0.1, -0.05);
        assert!(matches!(
            triangulate(&q, &q, &rig),
            Err(TriangulationError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn numeric_and_analytic_agree() {
        let rig = StereoRig::default();
        let (x, y) = observe(&rig, &Vector3::new(1.5, -0.7, 12.0));
        let a = triangulation_jacobian_with(&x, &y, &rig, JacobianMethod::Analytic).unwrap();
        let n =
            triangulation_jacobian_with(&x, &y, &rig, JacobianMethod::CentralDifference).unwrap();
        assert!((a - n).norm() / a.norm() < 1e-5);
    }

    #[test]
    fn on_axis_vertical_columns_stay_in_yz_plane() {
        let rig = StereoRig::default();
        let (x, y) = observe(&rig, &Vector3::new(0.0, 0.0, 5.0));
        let j = triangulation_jacobian(&x, &y, &rig).unwrap();
        // columns 1 and 3 are the second components of x and y
        assert!(j[(0, 1)].abs() < 1e-9);
        assert!(j[(0, 3)].abs() < 1e-9);
        let combined = j.column(1) + j.column(3);
        assert!(combined[0].abs() < 1e-9);
    }

    #[test]
    fn uncertainty_grows_with_depth() {
        let rig = StereoRig::default();
        let near = observe(&rig, &Vector3::new(0.0, 0.0, 5.0));
        let far = observe(&rig, &Vector3::new(0.0, 0.0, 40.0));
        let jn = triangulation_jacobian(&near.0, &near.1, &rig).unwrap();
        let jf = triangulation_jacobian(&far.0, &far.1, &rig).unwrap();
        assert!(jf.norm() / jn.norm() > 8.0);

        let noise = NoiseModel::from_pixels(1.0, 800.0);
        let cn = triangulate_with_cov(&near.0, &near.1, &rig, &noise).unwrap();
        let cf = triangulate_with_cov(&far.0, &far.1, &rig, &noise).unwrap();
        assert!(cf.cov.trace() / cn.cov.trace() > 50.0);
    }

    #[test]
    fn zero_noise_gives_zero_covariance() {
        let rig = StereoRig::default();
        let (x, y) = observe(&rig, &Vector3::new(2.0, 1.0, 9.0));
        let t = triangulate_with_cov(&x, &y, &rig, &NoiseModel::new(0.0)).unwrap();
        assert_eq!(t.cov, Matrix3::zeros());
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let rig = StereoRig::default();
        let noise = NoiseModel::from_pixels(1.0, 800.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(1.0..40.0),
            );
            let (x, y) = observe(&rig, &p);
            let t = triangulate_with_cov(&x, &y, &rig, &noise).unwrap();
            assert!((t.cov - t.cov.transpose()).amax() < 1e-12);
            assert!(t.cov.symmetric_eigenvalues().min() >= -1e-12);
        }
    }

    #[test]
    fn rig_pixel_conversion() {
        let rig = StereoRig::default();
        let q = rig.pixel_to_normalized(&Vector2::new(400.0, 240.0));
        assert!((q.x() - 0.1).abs() < 1e-15 && q.y() == 0.0);
        assert_eq!(rig.normalized_to_pixel(&q), Vector2::new(400.0, 240.0));
        assert!(!rig.contains_pixel(&Vector2::new(640.0, 10.0)));
        assert!(rig.contains_pixel(&Vector2::new(0.0, 0.0)));
    }
}
