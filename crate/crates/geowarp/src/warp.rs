//! Depth-driven image warping.
//!
//! Every valid-depth pixel of the previous frame is lifted to 3-D with its
//! depth, moved by the relative transform and projected into the current
//! frame, where the current image is sampled bilinearly. The synthesized
//! image lives on the previous frame's pixel grid and carries the current
//! image's intensities, so the photometric comparison pairs it against the
//! previous image at the same grid position.
//!
//! Behind-camera points and samples whose support leaves the current image
//! are masked out, never clamped. No occlusion reasoning is performed.

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform, Vec3};
use crate::imaging::{bilinear_sample, DepthMap, ImageBuffer, PixelMask};
use crate::parallel::map_rows;

/// Output of [`warp_image`], indexed by previous-frame pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    /// Synthesized image: current-frame intensities sampled at the warped
    /// positions. Invalid pixels carry 0.
    pub warped: ImageBuffer,
    /// Pixel had valid depth, survived the external mask, landed at positive
    /// depth in the current frame and sampled in bounds.
    pub validity: PixelMask,
    /// Per-pixel L1 displacement `‖u_curr − u_prev‖₁`; 0 where invalid.
    pub flow_l1: Vec<f64>,
    /// Transformed 3-D points in the current camera frame (zero where
    /// invalid); consumed by the pose-gradient computation.
    pub points_cam_t: Option<Vec<Vec3>>,
}

impl WarpResult {
    pub fn width(&self) -> usize {
        self.warped.width
    }

    pub fn height(&self) -> usize {
        self.warped.height
    }
}

/// Per-call state for the pixel-space warp arithmetic.
///
/// The chain project ∘ transform ∘ backproject is evaluated in focal-scaled
/// coordinates as an identity-plus-displacement form,
/// `W = P + S(R−I)S⁻¹ P + S t / d` with `P = (u−cx, v−cy, 1)` and
/// `S = diag(fx, fy, 1)`, followed by the ratio `u' = W.x/W.z + cx`.
/// When the relative transform is exactly the identity the displacement
/// terms are exactly zero, so the warped position reproduces the input
/// pixel bit for bit (and the flow is identically zero); otherwise the form
/// is algebraically the usual pinhole chain.
pub(crate) struct ScaledWarp {
    n: [[f64; 3]; 3],
    q: Vec3,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl ScaledWarp {
    pub(crate) fn new(t_rel: &RigidTransform, k: &Intrinsics) -> Self {
        let r = &t_rel.rotation;
        let (fx, fy) = (k.fx, k.fy);
        let n = [
            [r[(0, 0)] - 1.0, r[(0, 1)] * (fx / fy), r[(0, 2)] * fx],
            [r[(1, 0)] * (fy / fx), r[(1, 1)] - 1.0, r[(1, 2)] * fy],
            [r[(2, 0)] / fx, r[(2, 1)] / fy, r[(2, 2)] - 1.0],
        ];
        let q = Vec3::new(
            fx * t_rel.translation.x,
            fy * t_rel.translation.y,
            t_rel.translation.z,
        );
        Self { n, q, fx, fy, cx: k.cx, cy: k.cy }
    }

    /// Warps pixel (x, y) at the given positive depth. Returns the target
    /// position, the depth ratio `z_curr/depth` (its sign decides the
    /// behind-camera test) and the transformed camera-frame point.
    #[inline]
    pub(crate) fn apply(&self, x: f64, y: f64, depth: f64) -> (f64, f64, f64, Vec3) {
        let px = x - self.cx;
        let py = y - self.cy;
        let inv_d = 1.0 / depth;
        let n = &self.n;
        let wx = px + (n[0][0] * px + n[0][1] * py + n[0][2]) + self.q.x * inv_d;
        let wy = py + (n[1][0] * px + n[1][1] * py + n[1][2]) + self.q.y * inv_d;
        let wz = 1.0 + (n[2][0] * px + n[2][1] * py + n[2][2]) + self.q.z * inv_d;
        let u = wx / wz + self.cx;
        let v = wy / wz + self.cy;
        let point = Vec3::new(depth * wx / self.fx, depth * wy / self.fy, depth * wz);
        (u, v, wz, point)
    }
}

/// Warps a single previous-frame pixel into the current frame:
/// project(T_rel · backproject(u_prev, depth)).
///
/// Returns the continuous pixel position in the current image and the depth
/// of the transformed point. Fails when the point lands at or behind the
/// current camera plane.
pub fn warp_pixel(
    u_prev: [f64; 2],
    depth: f64,
    t_rel: &RigidTransform,
    k: &Intrinsics,
) -> Result<([f64; 2], f64)> {
    if depth <= 0.0 {
        return Err(Error::InvalidDepth { depth });
    }
    let sw = ScaledWarp::new(t_rel, k);
    let (u, v, wz, _) = sw.apply(u_prev[0], u_prev[1], depth);
    let z_curr = depth * wz;
    if wz <= 0.0 {
        return Err(Error::BehindCamera { z: z_curr });
    }
    Ok(([u, v], z_curr))
}

struct WarpRow {
    warped: Vec<f64>,
    valid: Vec<bool>,
    flow: Vec<f64>,
    points: Vec<Vec3>,
}

/// Synthesizes the warped image for a whole frame pair.
///
/// `i_curr` is the image being sampled (the current frame), `d_prev` the
/// previous frame's depth, `ext_mask` an externally supplied keep mask on
/// the previous frame (moving-object masks, test filters). All inputs must
/// agree with the intrinsics' dimensions.
pub fn warp_image(
    i_curr: &ImageBuffer,
    d_prev: &DepthMap,
    t_rel: &RigidTransform,
    k: &Intrinsics,
    ext_mask: &PixelMask,
) -> Result<WarpResult> {
    let (w, h) = (k.width, k.height);
    if i_curr.width != w || i_curr.height != h {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs intrinsics {w}x{h}",
            i_curr.width, i_curr.height
        )));
    }
    if d_prev.width != w || d_prev.height != h {
        return Err(Error::DimensionMismatch(format!(
            "depth {}x{} vs intrinsics {w}x{h}",
            d_prev.width, d_prev.height
        )));
    }
    if ext_mask.width != w || ext_mask.height != h {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs intrinsics {w}x{h}",
            ext_mask.width, ext_mask.height
        )));
    }

    let channels = i_curr.channels;
    let sw = ScaledWarp::new(t_rel, k);
    let rows = map_rows(h, |y| {
        let mut row = WarpRow {
            warped: vec![0.0; w * channels],
            valid: vec![false; w],
            flow: vec![0.0; w],
            points: vec![Vec3::zeros(); w],
        };
        for x in 0..w {
            let idx = y * w + x;
            if !(d_prev.valid[idx] && ext_mask.keep[idx]) {
                continue;
            }
            // Depth validity guarantees depth > 0 here.
            let (u, v, wz, p) = sw.apply(x as f64, y as f64, d_prev.depth[idx]);
            if wz <= 0.0 {
                continue;
            }
            let Some(sample) = bilinear_sample(i_curr, u, v) else {
                continue;
            };
            for c in 0..channels {
                row.warped[x * channels + c] = sample.value[c];
            }
            row.valid[x] = true;
            row.flow[x] = (u - x as f64).abs() + (v - y as f64).abs();
            row.points[x] = p;
        }
        row
    });

    let mut warped = Vec::with_capacity(w * h * channels);
    let mut valid = Vec::with_capacity(w * h);
    let mut flow = Vec::with_capacity(w * h);
    let mut points = Vec::with_capacity(w * h);
    for row in rows {
        warped.extend_from_slice(&row.warped);
        valid.extend_from_slice(&row.valid);
        flow.extend_from_slice(&row.flow);
        points.extend_from_slice(&row.points);
    }

    Ok(WarpResult {
        warped: ImageBuffer { width: w, height: h, channels, data: warped },
        validity: PixelMask { width: w, height: h, keep: valid },
        flow_l1: flow,
        points_cam_t: Some(points),
    })
}
