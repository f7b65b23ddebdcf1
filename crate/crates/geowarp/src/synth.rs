//! Synthetic plane scenes with analytic rendering.
//!
//! A textured plane gives closed-form depth (ray-plane intersection) and an
//! intensity field evaluated analytically at the intersection point, with no
//! resampling error. That makes rendered pairs exact oracles for the warp,
//! the losses, their gradients and pose recovery. The texture is a sum of
//! five low-frequency sinusoids, C¹-smooth, bounded inside [0, 1], with
//! frequencies capped below a quarter of the image Nyquist rate at the
//! nominal viewing distance so photometric gradients stay well conditioned.

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Vec2, Vec3};
use crate::imaging::{DepthMap, ImageBuffer};
use crate::loss::{FrameData, FramePair};
use crate::parallel::map_rows;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const TEXTURE_MODES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
struct TextureMode {
    amplitude: f64,
    /// Angular frequency along the two in-plane axes, rad/m.
    omega: Vec2,
    phase: f64,
}

/// World-frame plane `n·X = offset` with an anchored in-plane frame and a
/// procedural smooth texture.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub intrinsics: Intrinsics,
    pub seed: u64,
    normal: Vec3,
    offset: f64,
    /// Orthonormal in-plane axes; texture coordinates are measured along
    /// them from the plane point closest to the world origin.
    e1: Vec3,
    e2: Vec3,
    base: f64,
    modes: [TextureMode; TEXTURE_MODES],
}

/// Default camera for synthetic scenes: 160x120, 67 degree horizontal FOV,
/// principal point at the image center.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::new(120.0, 120.0, 79.5, 59.5, 160, 120).unwrap()
}

impl SyntheticScene {
    /// Fronto-parallel plane at 2 m with a seeded texture.
    pub fn new(intrinsics: Intrinsics, seed: u64) -> Self {
        Self::fronto_parallel(intrinsics, 2.0, seed)
    }

    /// Plane `z = distance` in the world frame.
    pub fn fronto_parallel(intrinsics: Intrinsics, distance: f64, seed: u64) -> Self {
        Self::with_plane(intrinsics, Vec3::new(0.0, 0.0, 1.0), distance, distance, seed)
    }

    /// Plane tilted about the world x axis, still passing through
    /// `(0, 0, distance)`.
    pub fn tilted(intrinsics: Intrinsics, distance: f64, tilt_rad: f64, seed: u64) -> Self {
        let normal = Vec3::new(0.0, tilt_rad.sin(), tilt_rad.cos());
        let offset = normal.z * distance;
        Self::with_plane(intrinsics, normal, offset, distance, seed)
    }

    fn with_plane(
        intrinsics: Intrinsics,
        normal: Vec3,
        offset: f64,
        nominal_distance: f64,
        seed: u64,
    ) -> Self {
        let normal = normal.normalize();
        // Deterministic in-plane frame.
        let pick = if normal.x.abs() < 0.9 {
            Vec3::new(1.0, 0.0, 0.0)
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        let e1 = (pick - normal * pick.dot(&normal)).normalize();
        let e2 = normal.cross(&e1);

        // One image pixel spans nominal_distance/fx meters on the plane, so
        // the Nyquist rate is fx/(2 d) cycles per meter; cap at a quarter.
        // Frequencies are drawn from the lower part of that band: bilinear
        // interpolation error grows with the squared frequency and needs to
        // stay at the 1e-3 level for the warp oracles.
        let f_cap = 0.125 * intrinsics.fx / nominal_distance;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = std::array::from_fn(|_| {
            let amplitude = rng.random_range(0.05..0.09);
            let freq = rng.random_range(0.15..0.4) * f_cap;
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            TextureMode {
                amplitude,
                omega: Vec2::new(
                    std::f64::consts::TAU * freq * dir.cos(),
                    std::f64::consts::TAU * freq * dir.sin(),
                ),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        });
        Self { intrinsics, seed, normal, offset, e1, e2, base: 0.5, modes }
    }

    /// Camera at the world origin looking straight at the plane.
    pub fn canonical_pose(&self) -> Pose {
        Pose::identity()
    }

    fn texture_coords(&self, p_world: &Vec3) -> Vec2 {
        let anchor = self.normal * self.offset;
        let d = p_world - anchor;
        Vec2::new(d.dot(&self.e1), d.dot(&self.e2))
    }

    fn texture_value(&self, p_world: &Vec3) -> f64 {
        let st = self.texture_coords(p_world);
        let mut v = self.base;
        for m in &self.modes {
            v += m.amplitude * (m.omega.x * st.x + m.omega.y * st.y + m.phase).sin();
        }
        v
    }

    /// Gradient of the texture w.r.t. the world point (lies in the plane).
    fn texture_world_gradient(&self, p_world: &Vec3) -> Vec3 {
        let st = self.texture_coords(p_world);
        let mut g = Vec3::zeros();
        for m in &self.modes {
            let c = m.amplitude * (m.omega.x * st.x + m.omega.y * st.y + m.phase).cos();
            g += (self.e1 * m.omega.x + self.e2 * m.omega.y) * c;
        }
        g
    }

    /// Ray-plane intersection for one pixel: camera-frame depth and world
    /// point. `None` when the ray misses the plane at positive depth.
    fn intersect(&self, center: &Vec3, rot_t: &crate::geometry::Mat3, u: f64, v: f64) -> Option<(f64, Vec3)> {
        let k = &self.intrinsics;
        let dir_cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let dir_world = rot_t * dir_cam;
        let denom = self.normal.dot(&dir_world);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = (self.offset - self.normal.dot(center)) / denom;
        if s <= 0.0 {
            return None;
        }
        Some((s, center + dir_world * s))
    }

    /// Renders the scene from a pose: exact per-pixel depth and an
    /// analytically evaluated texture. Fails if any pixel misses the plane
    /// at positive depth.
    pub fn render_view(&self, pose: &Pose) -> Result<(ImageBuffer, DepthMap)> {
        let k = &self.intrinsics;
        let (w, h) = (k.width, k.height);
        let rot = pose.orientation.to_rotation_matrix();
        let rot_t = rot.transpose();
        let center = pose.camera_center();

        let rows: Vec<Option<(Vec<f64>, Vec<f64>)>> = map_rows(h, |y| {
            let mut intensity = Vec::with_capacity(w);
            let mut depth = Vec::with_capacity(w);
            for x in 0..w {
                let (s, p_world) = self.intersect(&center, &rot_t, x as f64, y as f64)?;
                depth.push(s);
                intensity.push(self.texture_value(&p_world));
            }
            Some((intensity, depth))
        });

        let mut data = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        for row in rows {
            let (i_row, d_row) = row.ok_or(Error::InvalidPlacement)?;
            data.extend_from_slice(&i_row);
            depth.extend_from_slice(&d_row);
        }
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        let image = ImageBuffer { width: w, height: h, channels: 1, data };
        let depth = DepthMap::new(w, h, depth, vec![true; w * h])?;
        Ok((image, depth))
    }

    /// The continuous image function underlying [`Self::render_view`]:
    /// texture value seen along the ray through a (possibly fractional)
    /// pixel position. Rendered pixels equal this function at integer
    /// coordinates.
    pub fn image_value_at(&self, pose: &Pose, u: f64, v: f64) -> Result<f64> {
        let rot_t = pose.orientation.to_rotation_matrix().transpose();
        let center = pose.camera_center();
        let (_, p_world) = self
            .intersect(&center, &rot_t, u, v)
            .ok_or(Error::InvalidPlacement)?;
        Ok(self.texture_value(&p_world))
    }

    /// Analytic spatial gradient of the rendered image at a continuous pixel
    /// position, the oracle for sampler and warp gradient checks.
    pub fn analytic_image_gradient(&self, pose: &Pose, u: f64, v: f64) -> Result<Vec2> {
        let k = &self.intrinsics;
        let rot_t = pose.orientation.to_rotation_matrix().transpose();
        let center = pose.camera_center();
        let (s, p_world) = self
            .intersect(&center, &rot_t, u, v)
            .ok_or(Error::InvalidPlacement)?;

        let dir_cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let dir_world = rot_t * dir_cam;
        let n_dot_d = self.normal.dot(&dir_world);
        let grad_t = self.texture_world_gradient(&p_world);

        let mut out = Vec2::zeros();
        for (axis, dd_cam) in [
            (0, Vec3::new(1.0 / k.fx, 0.0, 0.0)),
            (1, Vec3::new(0.0, 1.0 / k.fy, 0.0)),
        ] {
            let dd_world = rot_t * dd_cam;
            let ds = -s * self.normal.dot(&dd_world) / n_dot_d;
            let dp = dir_world * ds + dd_world * s;
            out[axis] = grad_t.dot(&dp);
        }
        Ok(out)
    }

    /// Renders both views and bundles them with ground-truth poses; depth is
    /// attached to the previous frame only. Optional zero-mean Gaussian
    /// noise (standard deviations in meters / intensity units) is drawn from
    /// the given seed; noisy intensities are clamped back into [0, 1] and
    /// non-positive noisy depths are invalidated.
    pub fn make_pair(
        &self,
        pose_prev: &Pose,
        pose_curr: &Pose,
        depth_noise: Option<f64>,
        intensity_noise: Option<f64>,
        noise_seed: u64,
    ) -> Result<FramePair> {
        let (mut img_prev, mut depth_prev) = self.render_view(pose_prev)?;
        let (mut img_curr, _) = self.render_view(pose_curr)?;

        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        if let Some(std) = depth_noise {
            let normal = Normal::new(0.0, std)
                .map_err(|e| Error::InvalidInput(format!("depth noise std: {e}")))?;
            for d in depth_prev.depth.iter_mut() {
                *d += normal.sample(&mut rng);
            }
            depth_prev = DepthMap::new(
                depth_prev.width,
                depth_prev.height,
                depth_prev.depth,
                depth_prev.valid,
            )?;
        }
        if let Some(std) = intensity_noise {
            let normal = Normal::new(0.0, std)
                .map_err(|e| Error::InvalidInput(format!("intensity noise std: {e}")))?;
            for v in img_prev.data.iter_mut().chain(img_curr.data.iter_mut()) {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }

        Ok(FramePair {
            prev: FrameData { image: img_prev, depth: Some(depth_prev), pose_gt: *pose_prev },
            curr: FrameData { image: img_curr, depth: None, pose_gt: *pose_curr },
            intrinsics: self.intrinsics,
            ext_mask: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use crate::loss::{total_loss, LossWeights, SupervisionMode};

    #[test]
    fn fronto_parallel_depth_is_constant() {
        let scene = SyntheticScene::new(default_intrinsics(), 1);
        let (_, depth) = scene.render_view(&scene.canonical_pose()).unwrap();
        assert!(depth.depth.iter().all(|d| *d == 2.0));
        assert_eq!(depth.valid_count(), 160 * 120);
    }

    #[test]
    fn renders_are_deterministic() {
        let scene = SyntheticScene::new(default_intrinsics(), 2);
        let pose = scene.canonical_pose();
        let (a_img, a_depth) = scene.render_view(&pose).unwrap();
        let (b_img, b_depth) = scene.render_view(&pose).unwrap();
        assert_eq!(a_img, b_img);
        assert_eq!(a_depth, b_depth);
    }

    #[test]
    fn rendered_depth_satisfies_plane_equation() {
        let scene = SyntheticScene::tilted(default_intrinsics(), 2.0, 0.2, 3);
        let pose = Pose::new(
            Vec3::new(0.05, -0.03, 0.01),
            Quaternion::from_scaled_axis(Vec3::new(0.02, -0.01, 0.03)),
        )
        .unwrap();
        let (_, depth) = scene.render_view(&pose).unwrap();
        let k = scene.intrinsics;
        let rot_t = pose.orientation.to_rotation_matrix().transpose();
        for (x, y) in [(0usize, 0usize), (77, 41), (159, 119), (12, 100)] {
            let d = depth.depth[y * k.width + x];
            let p_cam = k
                .backproject(&Vec2::new(x as f64, y as f64), d)
                .unwrap();
            let p_world = rot_t * (p_cam - pose.position);
            let residual = scene.normal.dot(&p_world) - scene.offset;
            assert!(residual.abs() < 1e-9, "plane residual {residual}");
        }
    }

    #[test]
    fn plane_behind_camera_is_rejected() {
        let scene = SyntheticScene::new(default_intrinsics(), 4);
        // Camera turned away from the plane (180 degrees about y).
        let pose = Pose::new(
            Vec3::zeros(),
            Quaternion::from_scaled_axis(Vec3::new(0.0, std::f64::consts::PI, 0.0)),
        )
        .unwrap();
        assert!(matches!(scene.render_view(&pose), Err(Error::InvalidPlacement)));
    }

    #[test]
    fn rendered_pixels_equal_continuous_image_function() {
        let scene = SyntheticScene::tilted(default_intrinsics(), 2.0, 0.15, 5);
        let pose = scene.canonical_pose();
        let (img, _) = scene.render_view(&pose).unwrap();
        for (x, y) in [(0usize, 0usize), (40, 30), (159, 119)] {
            let v = scene.image_value_at(&pose, x as f64, y as f64).unwrap();
            assert_eq!(img.get(x, y, 0), v);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let scene = SyntheticScene::tilted(default_intrinsics(), 2.0, 0.15, 5);
        let pose = Pose::new(
            Vec3::new(0.01, -0.02, 0.0),
            Quaternion::from_scaled_axis(Vec3::new(0.01, 0.02, -0.01)),
        )
        .unwrap();
        let step = 1e-4;
        for (u, v) in [(40.3, 30.7), (80.1, 60.9), (120.6, 90.2), (25.4, 100.8)] {
            let g = scene.analytic_image_gradient(&pose, u, v).unwrap();
            let fdx = (scene.image_value_at(&pose, u + step, v).unwrap()
                - scene.image_value_at(&pose, u - step, v).unwrap())
                / (2.0 * step);
            let fdy = (scene.image_value_at(&pose, u, v + step).unwrap()
                - scene.image_value_at(&pose, u, v - step).unwrap())
                / (2.0 * step);
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-9);
            assert!(rel(g.x, fdx) < 1e-4, "gx {} vs {}", g.x, fdx);
            assert!(rel(g.y, fdy) < 1e-4, "gy {} vs {}", g.y, fdy);
        }
    }

    #[test]
    fn clean_pair_has_negligible_loss_at_ground_truth() {
        let scene = SyntheticScene::new(default_intrinsics(), 6);
        let prev = scene.canonical_pose();
        // Camera shifted by one pixel footprint (d/fx), so the warp lands on
        // the pixel grid and photometric consistency is exact.
        let curr = Pose::new(Vec3::new(-(2.0 / 120.0), 0.0, 0.0), Quaternion::identity()).unwrap();
        let pair = scene.make_pair(&prev, &curr, None, None, 0).unwrap();
        let bd = total_loss(
            &pair,
            &prev,
            &curr,
            &LossWeights::default(),
            SupervisionMode::SelfSupervised,
        )
        .unwrap();
        assert_eq!(bd.l_d, 0.0);
        assert!(bd.total < 1e-6, "total {}", bd.total);
    }

    #[test]
    fn depth_noise_makes_photometric_loss_positive() {
        let scene = SyntheticScene::new(default_intrinsics(), 7);
        let prev = scene.canonical_pose();
        let curr = Pose::new(Vec3::new(-0.03, 0.0, 0.0), Quaternion::identity()).unwrap();
        let clean = scene.make_pair(&prev, &curr, None, None, 1).unwrap();
        let noisy = scene.make_pair(&prev, &curr, Some(0.01), None, 1).unwrap();
        let w = LossWeights::default();
        let clean_bd =
            total_loss(&clean, &prev, &curr, &w, SupervisionMode::SelfSupervised).unwrap();
        let noisy_bd =
            total_loss(&noisy, &prev, &curr, &w, SupervisionMode::SelfSupervised).unwrap();
        assert!(noisy_bd.l_p > clean_bd.l_p);
        assert!(noisy_bd.l_p > 0.0);
    }

    #[test]
    fn identical_poses_give_zero_flow() {
        let scene = SyntheticScene::new(default_intrinsics(), 8);
        let pose = scene.canonical_pose();
        let pair = scene.make_pair(&pose, &pose, None, None, 0).unwrap();
        let t_rel = crate::geometry::relative_transform(
            &pose.to_transform(),
            &pose.to_transform(),
        );
        let out = crate::warp::warp_image(
            &pair.curr.image,
            pair.prev.depth.as_ref().unwrap(),
            &t_rel,
            &pair.intrinsics,
            &crate::imaging::PixelMask::all(160, 120),
        )
        .unwrap();
        assert!(out.flow_l1.iter().all(|f| *f == 0.0));
        assert_eq!(out.warped.data, pair.curr.image.data);
    }
}
