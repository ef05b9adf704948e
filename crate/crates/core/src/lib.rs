//! Stereo visual-odometry estimation kit.
//!
//! Building blocks for tracking a stereo camera against its latest keyframe:
//! linear triangulation with first-order covariance ([`triangulation`]),
//! matching-noise estimation ([`noise`]), a bias-eliminated weighted PnP
//! estimator ([`pnp`]) and sliding-window epipolar bundle adjustment
//! ([`epipolar_ba`]). The [`scene`], [`pipeline`], [`evaluation`] and
//! [`experiments`] modules reproduce the synthetic desk-scale studies.

pub mod config;
pub mod epipolar_ba;
pub mod evaluation;
pub mod experiments;
pub mod geometry;
pub mod noise;
pub mod pipeline;
pub mod pnp;
pub mod scene;
pub mod triangulation;

pub use geometry::{
    compose_chain, geodesic_angle, nearest_rotation, project, skew, EulerPose, GeometryError,
    NormalizedPoint2, RigidTransform, Rotation,
};
pub use noise::{estimate_sigma2, observation_covariance, NoiseModel};
pub use triangulation::{
    triangulate, triangulate_with_cov, triangulation_jacobian, StereoRig, TriangulatedPoint,
};
