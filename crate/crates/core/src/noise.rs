//! Feature-matching noise variance from stereo correspondences.
//!
//! Each stereo match `(x, y)` (right, left) should satisfy `yʰᵀ E₀ xʰ = 0`
//! for the rig's essential matrix. To first order the algebraic residual
//! has variance `σ² gᵢ` with `gᵢ = ‖[E₀xʰ]₁,₂‖² + ‖[E₀ᵀyʰ]₁,₂‖²`, so the
//! Sampson-normalized mean square `(1/n) Σ rᵢ²/gᵢ` estimates `σ²`.

use nalgebra::Matrix4;
use thiserror::Error;

use crate::geometry::NormalizedPoint2;
use crate::triangulation::StereoRig;

pub const MIN_NOISE_PAIRS: usize = 10;

/// Matches whose gradient norm falls below this are skipped.
const GRADIENT_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("need at least {MIN_NOISE_PAIRS} stereo pairs, got {0}")]
    TooFewPairs(usize),
    #[error("stereo baseline is degenerate (|t0| = {0:e})")]
    DegenerateRig(f64),
}

/// Isotropic 2D matching noise, variance in normalized-coordinate units².
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseModel {
    pub sigma2: f64,
    pub n_used: usize,
}

impl NoiseModel {
    pub fn new(sigma2: f64) -> Self {
        Self { sigma2, n_used: 0 }
    }

    /// Model for a noise level given in pixels for focal length `focal_px`.
    pub fn from_pixels(sigma_px: f64, focal_px: f64) -> Self {
        Self::new((sigma_px / focal_px).powi(2))
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// Estimates σ² from right/left stereo matches `(x, y)`.
pub fn estimate_sigma2(
    pairs: &[(NormalizedPoint2, NormalizedPoint2)],
    rig: &StereoRig,
) -> Result<NoiseModel, NoiseError> {
    if pairs.len() < MIN_NOISE_PAIRS {
        return Err(NoiseError::TooFewPairs(pairs.len()));
    }
    let baseline = rig.baseline();
    if baseline < 1e-9 {
        return Err(NoiseError::DegenerateRig(baseline));
    }
    let e = rig.essential();
    let mut sum = 0.0;
    let mut used = 0usize;
    for (x, y) in pairs {
        let xh = x.homogeneous();
        let yh = y.homogeneous();
        let line_in_left = e * xh;
        let line_in_right = e.transpose() * yh;
        let g = line_in_left.xy().norm_squared() + line_in_right.xy().norm_squared();
        if g < GRADIENT_FLOOR {
            continue;
        }
        let r = yh.dot(&line_in_left);
        sum += r * r / g;
        used += 1;
    }
    if used < MIN_NOISE_PAIRS {
        return Err(NoiseError::TooFewPairs(used));
    }
    Ok(NoiseModel {
        sigma2: sum / used as f64,
        n_used: used,
    })
}

/// Covariance `σ̂² I₄` of a stacked observation error `(ε_x, ε_y)`.
pub fn observation_covariance(model: &NoiseModel) -> Matrix4<f64> {
    Matrix4::identity() * model.sigma2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RigidTransform, Rotation};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn stereo_pairs(
        rig: &StereoRig,
        n: usize,
        sigma: f64,
        seed: u64,
    ) -> Vec<(NormalizedPoint2, NormalizedPoint2)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p = Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-8.0..8.0),
                rng.random_range(1.0..40.0),
            );
            let (Some(y), Some(x)) = (rig.project_left(&p), rig.project_right(&p)) else {
                continue;
            };
            let mut noisy = |q: NormalizedPoint2| {
                NormalizedPoint2::new(
                    q.x() + sigma * normal.sample(&mut rng),
                    q.y() + sigma * normal.sample(&mut rng),
                )
            };
            out.push((noisy(x), noisy(y)));
        }
        out
    }

    #[test]
    fn noise_free_pairs_give_zero() {
        let rig = StereoRig::default();
        let pairs = stereo_pairs(&rig, 500, 0.0, 3);
        let m = estimate_sigma2(&pairs, &rig).unwrap();
        assert!(m.sigma2 < 1e-18);
        assert_eq!(m.n_used, 500);
    }

    #[test]
    fn recovers_one_pixel_noise() {
        let rig = StereoRig::default();
        let sigma = 1.0 / 800.0;
        let pairs = stereo_pairs(&rig, 10_000, sigma, 5);
        let m = estimate_sigma2(&pairs, &rig).unwrap();
        assert!(
            (m.sigma() / sigma - 1.0).abs() < 0.05,
            "{}",
            m.sigma() * 800.0
        );
    }

    #[test]
    fn halving_noise_quarters_variance() {
        let rig = StereoRig::default();
        let sigma = 1.0 / 800.0;
        let full = estimate_sigma2(&stereo_pairs(&rig, 10_000, sigma, 9), &rig).unwrap();
        let half = estimate_sigma2(&stereo_pairs(&rig, 10_000, sigma / 2.0, 9), &rig).unwrap();
        let ratio = half.sigma2 / full.sigma2;
        assert!((ratio / 0.25 - 1.0).abs() < 0.10, "ratio {ratio}");
    }

    #[test]
    fn general_rig_is_unbiased() {
        let rig = StereoRig {
            extrinsics: RigidTransform::new(
                Rotation::from_axis_angle(&Vector3::new(0.1, 1.0, 0.2), 0.03),
                Vector3::new(0.5, 0.02, -0.01),
            ),
            ..StereoRig::default()
        };
        let sigma = 1.0 / 800.0;
        let m = estimate_sigma2(&stereo_pairs(&rig, 10_000, sigma, 21), &rig).unwrap();
        assert!((m.sigma() / sigma - 1.0).abs() < 0.05);
    }

    #[test]
    fn error_paths() {
        let rig = StereoRig::default();
        let pairs = stereo_pairs(&rig, 9, 0.0, 1);
        assert_eq!(
            estimate_sigma2(&pairs, &rig),
            Err(NoiseError::TooFewPairs(9))
        );
        let flat = StereoRig {
            extrinsics: RigidTransform::identity(),
            ..StereoRig::default()
        };
        let pairs = stereo_pairs(&rig, 20, 0.0, 1);
        assert!(matches!(
            estimate_sigma2(&pairs, &flat),
            Err(NoiseError::DegenerateRig(_))
        ));
    }

    #[test]
    fn covariance_construction() {
        assert_eq!(
            observation_covariance(&NoiseModel::new(0.0)),
            Matrix4::zeros()
        );
        assert_eq!(
            observation_covariance(&NoiseModel::new(1.0)),
            Matrix4::identity()
        );
        let c = observation_covariance(&NoiseModel::from_pixels(1.0, 800.0));
        assert!((c[(2, 2)] - 1.5625e-6).abs() < 1e-20);
        assert_eq!(c[(0, 1)], 0.0);
    }
}
