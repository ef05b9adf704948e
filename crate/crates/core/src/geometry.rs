//! Rotations, rigid transforms and the pinhole projection.
//!
//! Conventions used throughout the crate:
//!
//! * A [`RigidTransform`] `T = (R, t)` maps points as `p ↦ R p + t`.
//! * `a.compose(&b)` is `a ∘ b`, i.e. `b` is applied first.
//! * A camera pose in a trajectory maps camera coordinates into the world
//!   frame, so its translation is the camera centre.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Minimum depth accepted by [`project`], in meters.
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("matrix is singular (smallest singular value {0:e})")]
    SingularInput(f64),
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix that the caller guarantees to be in SO(3).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        Self::exp(&(axis * (angle / n)))
    }

    /// Exponential map of a rotation vector.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        Self(*Rotation3::new(*omega).matrix())
    }

    /// Rotation vector (axis times angle) of this rotation.
    pub fn log(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.0).scaled_axis()
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic angle in radians, `acos((tr R - 1) / 2)`. Evaluated as
    /// `atan2(sin, cos)` so that tiny angles keep full precision.
    pub fn angle(&self) -> f64 {
        geodesic_angle(&self.0)
    }

    /// Geodesic angle between two rotations, radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.transpose().compose(other).angle()
    }

    /// `max(|RᵀR - I|, |det R - 1|)`.
    pub fn orthogonality_error(&self) -> f64 {
        let gram = self.0.transpose() * self.0 - Matrix3::identity();
        gram.amax().max((self.0.determinant() - 1.0).abs())
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

/// Rigid-body transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -rt.rotate(&self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Inverse of [`Self::to_homogeneous`]; the rotation block is taken as is.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> RigidTransform {
        RigidTransform {
            rotation: Rotation::from_matrix_unchecked(m.fixed_view::<3, 3>(0, 0).into_owned()),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }
}

/// Composes `poses` left to right: `T₁ ∘ T₂ ∘ … ∘ Tₙ`. Empty input gives the identity.
pub fn compose_chain(poses: &[RigidTransform]) -> RigidTransform {
    poses
        .iter()
        .fold(RigidTransform::identity(), |acc, t| acc.compose(t))
}

/// Six-parameter pose: intrinsic Z-Y-X Euler angles plus a translation.
///
/// The rotation is `Rz(yaw) · Ry(pitch) · Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerPose {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub translation: Vector3<f64>,
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

impl EulerPose {
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            roll: v[0],
            pitch: v[1],
            yaw: v[2],
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.roll,
            self.pitch,
            self.yaw,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        )
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rot_z(self.yaw) * rot_y(self.pitch) * rot_x(self.roll)
    }

    /// Partial derivatives of the rotation matrix with respect to
    /// (roll, pitch, yaw).
    pub fn rotation_partials(&self) -> [Matrix3<f64>; 3] {
        let (rx, ry, rz) = (rot_x(self.roll), rot_y(self.pitch), rot_z(self.yaw));
        [
            rz * ry * d_rot_x(self.roll),
            rz * d_rot_y(self.pitch) * rx,
            d_rot_z(self.yaw) * ry * rx,
        ]
    }

    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::new(
            Rotation::from_matrix_unchecked(self.rotation_matrix()),
            self.translation,
        )
    }

    /// Extracts Z-Y-X angles. Unique for pitch in (-π/2, π/2).
    pub fn from_transform(t: &RigidTransform) -> Self {
        let r = t.rotation.matrix();
        let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        Self {
            roll,
            pitch,
            yaw,
            translation: t.translation,
        }
    }
}

/// A point in normalized image coordinates, `((u - u₀)/f, (v - v₀)/f)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormalizedPoint2(pub Vector2<f64>);

impl NormalizedPoint2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self(Vector2::new(x, y))
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    /// Homogeneous lift `[x, y, 1]`.
    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.0.x, self.0.y, 1.0)
    }

    /// Drops the third component of a homogeneous point with unit last entry.
    pub fn from_homogeneous(h: &Vector3<f64>) -> Self {
        Self::new(h.x, h.y)
    }
}

/// Skew-symmetric matrix with `skew(v) · w = v × w`.
/// Rotation angle of a (near-)rotation matrix: `atan2(|vee(R − Rᵀ)|/2, (tr R − 1)/2)`,
/// which equals the clamped `acos((tr R − 1)/2)` for exact rotations.
pub fn geodesic_angle(r: &Matrix3<f64>) -> f64 {
    let sin = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    )
    .norm()
        / 2.0;
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    sin.atan2(cos)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pinhole projection `[p]₁,₂ / [p]₃`.
pub fn project(p: &Vector3<f64>) -> Result<NormalizedPoint2, GeometryError> {
    if p.z <= DEPTH_EPSILON {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(NormalizedPoint2::new(p.x / p.z, p.y / p.z))
}

/// Jacobian of [`project`] with respect to the 3D point.
pub fn projection_jacobian(p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    nalgebra::Matrix2x3::new(iz, 0.0, -p.x * iz2, 0.0, iz, -p.y * iz2)
}

/// Closest rotation to `m` in Frobenius norm.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Rotation, GeometryError> {
    let svd = m.svd(true, true);
    let smallest = svd.singular_values.min();
    if smallest < 1e-12 {
        return Err(GeometryError::SingularInput(smallest));
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // singular values come sorted descending; flip the weakest direction
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    Ok(Rotation(r))
}
