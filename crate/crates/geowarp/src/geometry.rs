//! Rigid-body poses, quaternion algebra and pinhole projection.
//!
//! Conventions, fixed once for the whole crate:
//! - A [`Pose`] stores the world-to-camera transform: `X_cam = R(q) · X_world + position`.
//!   Loaders of camera-to-world files must invert before constructing a pose.
//! - Quaternions are scalar-first `(w, x, y, z)` and canonicalized to `w >= 0`
//!   after every constructor and operation, so Euclidean quaternion distances
//!   are well defined despite the q / −q double cover.
//! - Angles are reported in degrees, positions in meters, pixels as continuous
//!   coordinates with pixel centers at integer positions.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance for unit-norm and orthonormality invariants.
pub const RIGID_TOL: f64 = 1e-9;

/// Unit quaternion, scalar-first storage `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    /// Identity rotation.
    pub fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Builds a unit quaternion from raw components, normalizing and
    /// canonicalizing the sign. Fails on zero (or non-finite) norm.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        Self { w, x, y, z }.normalized()
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Four-component Euclidean dot product.
    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Normalizes to unit length and canonicalizes the sign so `w >= 0`.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidQuaternion);
        }
        Ok(Self { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }.canonicalized())
    }

    /// Flips the global sign if needed so the scalar part is non-negative.
    /// At `w == 0` the first nonzero vector component breaks the tie.
    pub fn canonicalized(&self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self ⊗ rhs` (not canonicalized).
    pub fn mul(&self, rhs: &Self) -> Self {
        Self {
            w: self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            x: self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            y: self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            z: self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        }
    }

    /// Exponential map: axis-angle vector (radians) to unit quaternion.
    pub fn from_scaled_axis(v: Vec3) -> Self {
        let theta_sq = v.dot(&v);
        let theta = theta_sq.sqrt();
        let (w, k) = if theta < 1e-8 {
            // Taylor expansion of cos(θ/2) and sin(θ/2)/θ around zero.
            (1.0 - theta_sq / 8.0, 0.5 - theta_sq / 48.0)
        } else {
            ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
        };
        Self { w, x: k * v.x, y: k * v.y, z: k * v.z }
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_rotation_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Quaternion of a rotation matrix (Shepperd's method), normalized and
    /// canonicalized. Tolerates mild non-orthonormality; callers that need a
    /// strict check should validate the matrix first.
    pub fn from_rotation_matrix(m: &Mat3) -> Result<Self> {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Self {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Self {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Self {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Self {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized()
    }
}

/// Geodesic angle between two unit quaternions, in degrees.
///
/// `2·acos(min(1, |⟨q1, q2⟩|))`, invariant under global sign flips of either
/// argument; the result lies in `[0, 180]`.
pub fn rotation_angle_deg(q1: &Quaternion, q2: &Quaternion) -> f64 {
    let d = q1.dot(q2).abs().min(1.0);
    2.0 * d.acos().to_degrees()
}

/// Absolute camera pose `p = [x, q]`: position plus unit orientation.
///
/// Encodes the world-to-camera transform directly (see module docs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// World-to-camera translation, meters.
    pub position: Vec3,
    /// World-to-camera rotation; unit norm, `w >= 0`.
    pub orientation: Quaternion,
}

impl Pose {
    pub fn identity() -> Self {
        Self { position: Vec3::zeros(), orientation: Quaternion::identity() }
    }

    /// Builds a pose, normalizing and canonicalizing the orientation.
    pub fn new(position: Vec3, orientation: Quaternion) -> Result<Self> {
        Ok(Self { position, orientation: orientation.normalized()? })
    }

    /// Matrix form of this pose: X_cam = R · X_world + t.
    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.orientation.to_rotation_matrix(),
            translation: self.position,
        }
    }

    /// Recovers a pose from a rigid transform.
    pub fn from_transform(t: &RigidTransform) -> Result<Self> {
        Ok(Self {
            position: t.translation,
            orientation: Quaternion::from_rotation_matrix(&t.rotation)?,
        })
    }

    /// Camera center expressed in world coordinates: `−Rᵀ t`.
    pub fn camera_center(&self) -> Vec3 {
        let r = self.orientation.to_rotation_matrix();
        -(r.transpose() * self.position)
    }
}

/// Rigid transform `X' = R X + t` with orthonormal `R`, det +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// Validated constructor: rejects rotations whose orthonormality residual
    /// `max(‖RᵀR − I‖_max, |det R − 1|)` exceeds [`RIGID_TOL`].
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let residual = rigidity_residual(&rotation);
        if residual > RIGID_TOL {
            return Err(Error::NonRigidTransform { residual });
        }
        Ok(Self { rotation, translation })
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Composition `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// Orthonormality residual of a candidate rotation matrix.
pub fn rigidity_residual(rotation: &Mat3) -> f64 {
    let gram = rotation.transpose() * rotation - Mat3::identity();
    let ortho = gram.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    ortho.max((rotation.determinant() - 1.0).abs())
}

/// Relative transform between two world-to-camera poses:
/// `T_rel = T_curr ∘ T_prev⁻¹` maps camera-frame points at the previous
/// instant into the current camera frame.
pub fn relative_transform(
    t_prev_world: &RigidTransform,
    t_curr_world: &RigidTransform,
) -> RigidTransform {
    t_curr_world.compose(&t_prev_world.inverse())
}

/// Pinhole camera parameters. Pixel centers sit at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidIntrinsics(format!(
                "image dimensions must be positive ({width}x{height})"
            )));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point must be finite (cx={cx}, cy={cy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Projects a camera-frame point to pixel coordinates.
    /// Points at or behind the camera plane are rejected.
    pub fn project(&self, point: &Vec3) -> Result<Vec2> {
        if point.z <= 0.0 {
            return Err(Error::BehindCamera { z: point.z });
        }
        Ok(Vec2::new(
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        ))
    }

    /// Lifts a pixel at the given metric depth into the camera frame.
    pub fn backproject(&self, pixel: &Vec2, depth: f64) -> Result<Vec3> {
        if depth <= 0.0 {
            return Err(Error::InvalidDepth { depth });
        }
        Ok(Vec3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-9;

    fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> Quaternion {
        // Shoemake's method for uniform random rotations.
        let r1: f64 = rng.random();
        let r2: f64 = rng.random();
        let r3: f64 = rng.random();
        let two_pi = std::f64::consts::TAU;
        Quaternion::new(
            (1.0 - r1).sqrt() * (two_pi * r2).cos(),
            (1.0 - r1).sqrt() * (two_pi * r2).sin(),
            r1.sqrt() * (two_pi * r3).cos(),
            r1.sqrt() * (two_pi * r3).sin(),
        )
        .unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let p = Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        Pose::new(p, random_unit_quaternion(rng)).unwrap()
    }

    #[test]
    fn quat_normalize_scales_identity() {
        let q = Quaternion::new(2.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(q, Quaternion::identity());
    }

    #[test]
    fn quat_normalize_exact_norm_two() {
        let q = Quaternion::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!((q.w, q.x, q.y, q.z), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn quat_normalize_canonicalizes_sign() {
        let q = Quaternion::new(-1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(q, Quaternion::identity());
        // Tie break at w == 0.
        let q = Quaternion::new(0.0, -1.0, 0.0, 0.0).unwrap();
        assert_eq!((q.w, q.x), (0.0, 1.0));
    }

    #[test]
    fn quat_normalize_rejects_zero() {
        assert!(Quaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pose_to_transform_identity() {
        let t = Pose::identity().to_transform();
        assert_eq!(t.rotation, Mat3::identity());
        assert_eq!(t.translation, Vec3::zeros());
    }

    #[test]
    fn pose_to_transform_half_turn_about_x() {
        // Hand evaluation of the quaternion-to-matrix formula at q = (0,1,0,0).
        let pose = Pose::new(Vec3::zeros(), Quaternion { w: 0.0, x: 1.0, y: 0.0, z: 0.0 }).unwrap();
        let r = pose.to_transform().rotation;
        let expected = Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0));
        assert!((r - expected).abs().max() < TOL);
    }

    #[test]
    fn transform_pose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let t = pose.to_transform();
            let back = Pose::from_transform(&t).unwrap().to_transform();
            assert!((t.rotation - back.rotation).abs().max() < TOL);
            assert!((t.translation - back.translation).norm() < TOL);
        }
    }

    #[test]
    fn transform_inverse_identity_and_translation() {
        let id = RigidTransform::identity();
        let inv = id.inverse();
        assert_eq!(inv.rotation, Mat3::identity());
        assert_eq!(inv.translation, Vec3::zeros());

        let t = RigidTransform::new(Mat3::identity(), Vec3::new(1.0, -2.0, 3.0)).unwrap();
        assert_eq!(t.inverse().translation, Vec3::new(-1.0, 2.0, -3.0));
    }

    #[test]
    fn transform_inverse_matches_homogeneous_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let t = random_pose(&mut rng).to_transform();
            let inv = t.inverse();

            // Independent oracle: invert the 4x4 homogeneous matrix.
            let mut h = Matrix4::<f64>::identity();
            h.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
            h.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation);
            let h_inv = h.try_inverse().unwrap();

            for r in 0..3 {
                for c in 0..3 {
                    assert!((inv.rotation[(r, c)] - h_inv[(r, c)]).abs() < TOL);
                }
                assert!((inv.translation[r] - h_inv[(r, 3)]).abs() < TOL);
            }

            let prod = t.compose(&inv);
            assert!((prod.rotation - Mat3::identity()).abs().max() < TOL);
            assert!(prod.translation.norm() < TOL);
        }
    }

    #[test]
    fn relative_transform_equal_inputs_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = random_pose(&mut rng).to_transform();
        let rel = relative_transform(&t, &t);
        assert!((rel.rotation - Mat3::identity()).abs().max() < TOL);
        assert!(rel.translation.norm() < TOL);
    }

    #[test]
    fn relative_transform_from_identity_is_curr() {
        let curr = RigidTransform::new(Mat3::identity(), Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let rel = relative_transform(&RigidTransform::identity(), &curr);
        assert_eq!(rel.translation, Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn relative_transform_matrix_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let prev = random_pose(&mut rng).to_transform();
            let curr = random_pose(&mut rng).to_transform();
            let rel = relative_transform(&prev, &curr);
            let recomposed = rel.compose(&prev);
            assert!((recomposed.rotation - curr.rotation).abs().max() < TOL);
            assert!((recomposed.translation - curr.translation).norm() < TOL);
        }
    }

    #[test]
    fn relative_transform_chain_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let a = random_pose(&mut rng).to_transform();
            let b = random_pose(&mut rng).to_transform();
            let c = random_pose(&mut rng).to_transform();
            let direct = relative_transform(&a, &c);
            let chained = relative_transform(&b, &c).compose(&relative_transform(&a, &b));
            assert!((direct.rotation - chained.rotation).abs().max() < TOL);
            assert!((direct.translation - chained.translation).norm() < TOL);
        }
    }

    #[test]
    fn rotation_preserves_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..100 {
            let t = random_pose(&mut rng).to_transform();
            let v = Vec3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            assert!(((t.rotation * v).norm() - v.norm()).abs() < TOL);
        }
    }

    #[test]
    fn project_on_optical_axis() {
        let k = Intrinsics::new(100.0, 100.0, 160.0, 120.0, 320, 240).unwrap();
        let u = k.project(&Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((u.x, u.y), (160.0, 120.0));
    }

    #[test]
    fn project_hand_evaluated_pinhole() {
        let k = Intrinsics::new(100.0, 100.0, 160.0, 120.0, 320, 240).unwrap();
        let u = k.project(&Vec3::new(2.0, 0.0, 2.0)).unwrap();
        assert_eq!((u.x, u.y), (260.0, 120.0));
    }

    #[test]
    fn project_rejects_behind_camera() {
        let k = Intrinsics::new(100.0, 100.0, 160.0, 120.0, 320, 240).unwrap();
        assert!(matches!(
            k.project(&Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(k.project(&Vec3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn backproject_hand_evaluated() {
        let k = Intrinsics::new(100.0, 100.0, 160.0, 120.0, 320, 240).unwrap();
        let p = k.backproject(&Vec2::new(160.0, 120.0), 2.0).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 2.0));
        let p = k.backproject(&Vec2::new(260.0, 120.0), 2.0).unwrap();
        assert_eq!(p, Vec3::new(2.0, 0.0, 2.0));
    }

    #[test]
    fn backproject_rejects_nonpositive_depth() {
        let k = Intrinsics::new(100.0, 100.0, 160.0, 120.0, 320, 240).unwrap();
        assert!(matches!(
            k.backproject(&Vec2::new(10.0, 10.0), 0.0),
            Err(Error::InvalidDepth { .. })
        ));
    }

    #[test]
    fn project_backproject_round_trip() {
        let k = Intrinsics::new(95.0, 105.0, 81.3, 58.7, 160, 120).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let u = Vec2::new(rng.random_range(0.0..159.0), rng.random_range(0.0..119.0));
            let d = rng.random_range(0.1..50.0);
            let back = k.project(&k.backproject(&u, d).unwrap()).unwrap();
            assert!((back - u).norm() < TOL);
        }
    }

    #[test]
    fn rotation_angle_examples() {
        let q = Quaternion::new(0.3, -0.2, 0.9, 0.1).unwrap();
        assert_eq!(rotation_angle_deg(&q, &q), 0.0);

        // Double cover: q and −q denote the same rotation.
        let neg = Quaternion { w: -q.w, x: -q.x, y: -q.y, z: -q.z };
        assert!(rotation_angle_deg(&q, &neg) < TOL);

        let half = std::f64::consts::FRAC_1_SQRT_2;
        let quarter_z = Quaternion::new(half, 0.0, 0.0, half).unwrap();
        assert!((rotation_angle_deg(&Quaternion::identity(), &quarter_z) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_angle_symmetric_and_sign_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..100 {
            let a = random_unit_quaternion(&mut rng);
            let b = random_unit_quaternion(&mut rng);
            let ab = rotation_angle_deg(&a, &b);
            assert!((ab - rotation_angle_deg(&b, &a)).abs() < 1e-12);
            let b_neg = Quaternion { w: -b.w, x: -b.x, y: -b.y, z: -b.z };
            assert!((ab - rotation_angle_deg(&a, &b_neg)).abs() < 1e-12);
            assert!((0.0..=180.0).contains(&ab));
        }
    }

    #[test]
    fn rigid_transform_rejects_non_orthonormal() {
        let mut m = Mat3::identity();
        m[(0, 0)] = 1.5;
        assert!(matches!(
            RigidTransform::new(m, Vec3::zeros()),
            Err(Error::NonRigidTransform { .. })
        ));
    }
}
