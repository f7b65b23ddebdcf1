//! Loss terms over a warped frame pair and their analytic pose gradients.
//!
//! Three terms enter the composite objective: a Euclidean pose distance on
//! both frames, a masked per-pixel L1 photometric difference between the
//! previous image and the warped current image, and a global-statistics
//! structural-similarity term. The photometric term uses the raw sum over
//! pixels (no count normalization) so the default weights keep their
//! published meaning; a mean-normalized mode is available through
//! [`LossOptions`].
//!
//! Pixels whose L1 warp displacement exceeds the self-adaption gate `h`
//! are excluded from the photometric and SSIM terms. The gate is evaluated
//! from the current flow field on every call and treated as a constant
//! selection during differentiation: gated pixels contribute zero gradient.

use crate::error::{Error, Result};
use crate::geometry::{
    relative_transform, Pose, Quaternion, RigidTransform, Vec3,
};
use crate::imaging::{
    bilinear_sample, image_stats, DepthMap, ImageBuffer, PixelMask, SsimStats, LUMA_WEIGHTS,
};
use crate::parallel::map_rows;
use crate::warp::{warp_image, WarpResult};
use serde::{Deserialize, Serialize};

/// Residual norms below this are treated as exactly zero when normalizing
/// gradient directions of the pose-distance term.
const ZERO_RESIDUAL: f64 = 1e-15;

/// Weights and constants of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Orientation weight inside the pose-distance term.
    pub beta: f64,
    /// Weight of the pose-distance term.
    pub lambda_d: f64,
    /// Weight of the photometric term.
    pub lambda_p: f64,
    /// Weight of the structural-similarity term.
    pub lambda_s: f64,
    /// Self-adaption flow gate, pixels.
    pub h: f64,
    /// SSIM stabilizers on the [0, 1] intensity range.
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 3.0,
            lambda_d: 1.0,
            lambda_p: 0.01,
            lambda_s: 0.1,
            h: 10.0,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.beta, self.lambda_d, self.lambda_p, self.lambda_s];
        if nonneg.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("loss weights must be non-negative".into()));
        }
        if !(self.h > 0.0) || !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::InvalidInput(
                "h, c1 and c2 must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Optional behaviors of the photometric term, all off by default.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossOptions {
    /// Compare RGB channels directly (averaging the per-channel L1) instead
    /// of converting to luminance first.
    pub per_channel: bool,
    /// Divide the photometric sum by the number of contributing pixels.
    pub normalize_photometric: bool,
    /// Drop this fraction of the largest photometric residuals from the sum
    /// (and from back-propagation), e.g. `Some(0.1)` rejects the top 10%.
    pub reject_top_fraction: Option<f64>,
}

/// Which poses drive the warp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    /// The current frame's pose is frozen at ground truth for warping; only
    /// the previous pose influences the photometric and SSIM terms.
    Anchored,
    /// Both predicted poses drive the warp and are constrained jointly.
    SelfSupervised,
}

impl std::str::FromStr for SupervisionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchored" => Ok(Self::Anchored),
            "self_supervised" => Ok(Self::SelfSupervised),
            other => Err(Error::Parse(format!(
                "unknown mode '{other}' (expected anchored | self_supervised)"
            ))),
        }
    }
}

impl std::fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Anchored => "anchored",
            Self::SelfSupervised => "self_supervised",
        })
    }
}

/// Per-term loss values for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_p: f64,
    pub l_s: f64,
    /// `lambda_d·l_d + lambda_p·l_p + lambda_s·l_s`, exactly.
    pub total: f64,
    /// Pixels that survived the warp validity mask.
    pub valid_pixel_count: usize,
    /// Valid pixels excluded by the flow gate.
    pub gated_pixel_count: usize,
    /// Set when the photometric or SSIM term had to be dropped for lack of
    /// surviving pixels; the dropped terms are reported as 0.
    pub degenerate: bool,
}

/// One frame of a pair: image, optional depth, ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub image: ImageBuffer,
    pub depth: Option<DepthMap>,
    pub pose_gt: Pose,
}

/// Two frames with shared intrinsics and an optional external keep-mask on
/// the previous frame (moving objects, test filters). Depth is attached to
/// the previous frame only; the warp needs nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub prev: FrameData,
    pub curr: FrameData,
    pub intrinsics: crate::geometry::Intrinsics,
    pub ext_mask: Option<PixelMask>,
}

impl FramePair {
    fn validate(&self) -> Result<&DepthMap> {
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        for (name, img) in [("previous", &self.prev.image), ("current", &self.curr.image)] {
            if img.width != w || img.height != h {
                return Err(Error::DimensionMismatch(format!(
                    "{name} image {}x{} vs intrinsics {w}x{h}",
                    img.width, img.height
                )));
            }
        }
        if self.prev.image.channels != self.curr.image.channels {
            return Err(Error::DimensionMismatch(
                "frame images must share the channel count".into(),
            ));
        }
        let depth = self
            .prev
            .depth
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("previous frame carries no depth".into()))?;
        if depth.width != w || depth.height != h {
            return Err(Error::DimensionMismatch(format!(
                "depth {}x{} vs intrinsics {w}x{h}",
                depth.width, depth.height
            )));
        }
        if let Some(mask) = &self.ext_mask {
            if mask.width != w || mask.height != h {
                return Err(Error::DimensionMismatch(format!(
                    "external mask {}x{} vs intrinsics {w}x{h}",
                    mask.width, mask.height
                )));
            }
        }
        Ok(depth)
    }
}

/// Euclidean distance of two canonical quaternions as 4-vectors.
pub fn quat_euclidean_distance(a: &Quaternion, b: &Quaternion) -> f64 {
    let (dw, dx, dy, dz) = (a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z);
    (dw * dw + dx * dx + dy * dy + dz * dz).sqrt()
}

fn pose_distance_term(pred: &Pose, gt: &Pose, beta: f64) -> f64 {
    (pred.position - gt.position).norm()
        + beta * quat_euclidean_distance(&pred.orientation, &gt.orientation)
}

/// Summed position/orientation distance over both frames:
/// `Σ_i ‖x_i − x̂_i‖₂ + β‖q_i − q̂_i‖₂`.
pub fn euclidean_pose_loss(
    pred_prev: &Pose,
    gt_prev: &Pose,
    pred_curr: &Pose,
    gt_curr: &Pose,
    beta: f64,
) -> f64 {
    pose_distance_term(pred_prev, gt_prev, beta) + pose_distance_term(pred_curr, gt_curr, beta)
}

/// Photometric loss value plus the per-pixel bookkeeping the gradient and
/// the rejection option need.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricLoss {
    pub value: f64,
    /// Row-major per-pixel residuals; 0 where the pixel does not contribute.
    pub residuals: Vec<f64>,
    /// Row-major: pixel contributes to the sum (valid, gate passed, not
    /// rejected by the percentile option).
    pub kept: Vec<bool>,
    /// Number of contributing pixels.
    pub surviving_count: usize,
    /// Valid pixels excluded by the flow gate.
    pub gated_count: usize,
    /// No pixel survived the mask; `value` is 0 and the caller decides
    /// whether to drop the term.
    pub degenerate: bool,
}

/// Masked L1 photometric difference between the previous image and the
/// warped current image, on the previous frame's grid.
///
/// The mask is `warp.validity ∧ (flow_l1 ≤ h)`. Multi-channel inputs use
/// the channel-averaged L1 per pixel.
pub fn photometric_loss(
    i_prev: &ImageBuffer,
    warp: &WarpResult,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<PhotometricLoss> {
    let warped = &warp.warped;
    if !i_prev.same_shape(warped) || i_prev.channels != warped.channels {
        return Err(Error::DimensionMismatch(format!(
            "comparison image {}x{}x{} vs warped {}x{}x{}",
            i_prev.width, i_prev.height, i_prev.channels, warped.width, warped.height,
            warped.channels
        )));
    }
    let n = warped.width * warped.height;
    let c = warped.channels;
    let inv_c = 1.0 / c as f64;

    let mut residuals = vec![0.0; n];
    let mut kept = vec![false; n];
    let mut gated = 0usize;
    let mut surviving = 0usize;
    for i in 0..n {
        if !warp.validity.keep[i] {
            continue;
        }
        if warp.flow_l1[i] > weights.h {
            gated += 1;
            continue;
        }
        let mut r = 0.0;
        for ch in 0..c {
            r += (i_prev.data[i * c + ch] - warped.data[i * c + ch]).abs();
        }
        residuals[i] = r * inv_c;
        kept[i] = true;
        surviving += 1;
    }

    if let Some(frac) = opts.reject_top_fraction {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::InvalidInput(format!(
                "reject_top_fraction must lie in [0, 1] (got {frac})"
            )));
        }
        let drop = ((frac * surviving as f64).round() as usize).min(surviving);
        if drop > 0 {
            let mut order: Vec<usize> = (0..n).filter(|i| kept[*i]).collect();
            order.sort_by(|a, b| {
                residuals[*b].partial_cmp(&residuals[*a]).unwrap().then(a.cmp(b))
            });
            for &i in order.iter().take(drop) {
                kept[i] = false;
                residuals[i] = 0.0;
            }
            surviving -= drop;
        }
    }

    // Fixed row-major summation order keeps the value deterministic.
    let mut value: f64 = residuals.iter().sum();
    if opts.normalize_photometric && surviving > 0 {
        value /= surviving as f64;
    }
    let degenerate = surviving == 0;
    if degenerate {
        value = 0.0;
    }
    Ok(PhotometricLoss { value, residuals, kept, surviving_count: surviving, gated_count: gated, degenerate })
}

fn ssim_from_stats(s: &SsimStats, c1: f64, c2: f64) -> f64 {
    ((2.0 * s.mu_x * s.mu_y + c1) * (2.0 * s.sigma_xy + c2))
        / ((s.mu_x * s.mu_x + s.mu_y * s.mu_y + c1) * (s.sigma_x2 + s.sigma_y2 + c2))
}

/// Global-statistics structural similarity of two masked images; at most 1,
/// and 1 exactly when the masked contents coincide.
pub fn ssim(
    a: &ImageBuffer,
    b: &ImageBuffer,
    mask: &PixelMask,
    c1: f64,
    c2: f64,
) -> Result<f64> {
    let stats = image_stats(a, b, mask)?;
    Ok(ssim_from_stats(&stats, c1, c2))
}

/// Maps a similarity value in [−1, 1] to a loss in [0, 1].
pub(crate) fn ssim_to_loss(s: f64) -> f64 {
    (1.0 - s) / 2.0
}

/// Mask of pixels admitted to the photometric/SSIM terms: warp validity
/// restricted by the flow gate.
pub fn gate_mask(warp: &WarpResult, h: f64) -> PixelMask {
    let keep = warp
        .validity
        .keep
        .iter()
        .zip(&warp.flow_l1)
        .map(|(v, f)| *v && *f <= h)
        .collect();
    PixelMask { width: warp.width(), height: warp.height(), keep }
}

/// SSIM loss `(1 − SSIM)/2` between a comparison image and the warped image,
/// over `warp.validity ∧ flow gate`. Single-channel inputs only.
pub fn ssim_loss(
    comparison: &ImageBuffer,
    warp: &WarpResult,
    weights: &LossWeights,
) -> Result<f64> {
    let mask = gate_mask(warp, weights.h);
    Ok(ssim_to_loss(ssim(comparison, &warp.warped, &mask, weights.c1, weights.c2)?))
}

pub(crate) fn compose_total(w: &LossWeights, l_d: f64, l_p: f64, l_s: f64) -> f64 {
    w.lambda_d * l_d + w.lambda_p * l_p + w.lambda_s * l_s
}

/// Everything one evaluation produces; shared by the plain and gradient paths
/// so both report identical values.
struct PairEvaluation {
    t_rel: RigidTransform,
    curr_warp_pose: Pose,
    /// Image sampled by the warp (current frame, possibly luminance).
    target: ImageBuffer,
    /// Image compared against (previous frame, same channels as target).
    comparison: ImageBuffer,
    /// Per-channel weights mapping sampled channels to the luminance used
    /// by the SSIM term.
    lum_weights: [f64; 3],
    warp: WarpResult,
    phot: PhotometricLoss,
    ssim_mask: PixelMask,
    stats: Option<SsimStats>,
    lum_comparison: Vec<f64>,
    lum_warped: Vec<f64>,
    breakdown: LossBreakdown,
}

fn luminance_of(img: &ImageBuffer) -> Vec<f64> {
    if img.channels == 1 {
        img.data.clone()
    } else {
        img.data
            .chunks_exact(3)
            .map(|px| LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2])
            .collect()
    }
}

fn evaluate_pair(
    pair: &FramePair,
    pred_prev: &Pose,
    pred_curr: &Pose,
    weights: &LossWeights,
    opts: &LossOptions,
    mode: SupervisionMode,
) -> Result<PairEvaluation> {
    let depth = pair.validate()?;

    let curr_warp_pose = match mode {
        SupervisionMode::Anchored => pair.curr.pose_gt,
        SupervisionMode::SelfSupervised => *pred_curr,
    };
    let t_rel =
        relative_transform(&pred_prev.to_transform(), &curr_warp_pose.to_transform());

    let (target, comparison, lum_weights) = if pair.curr.image.channels == 3 && !opts.per_channel
    {
        (
            crate::imaging::to_grayscale(&pair.curr.image)?,
            crate::imaging::to_grayscale(&pair.prev.image)?,
            [1.0, 0.0, 0.0],
        )
    } else if pair.curr.image.channels == 3 {
        (pair.curr.image.clone(), pair.prev.image.clone(), LUMA_WEIGHTS)
    } else {
        (pair.curr.image.clone(), pair.prev.image.clone(), [1.0, 0.0, 0.0])
    };

    let all_mask;
    let ext_mask = match &pair.ext_mask {
        Some(m) => m,
        None => {
            all_mask = PixelMask::all(pair.intrinsics.width, pair.intrinsics.height);
            &all_mask
        }
    };

    let warp = warp_image(&target, depth, &t_rel, &pair.intrinsics, ext_mask)?;
    let phot = photometric_loss(&comparison, &warp, weights, opts)?;
    let ssim_mask = gate_mask(&warp, weights.h);

    let lum_comparison = luminance_of(&comparison);
    let lum_warped = luminance_of(&warp.warped);
    let lum_comp_img = ImageBuffer {
        width: comparison.width,
        height: comparison.height,
        channels: 1,
        data: lum_comparison.clone(),
    };
    let lum_warp_img = ImageBuffer {
        width: comparison.width,
        height: comparison.height,
        channels: 1,
        data: lum_warped.clone(),
    };

    let (stats, l_s, ssim_degenerate) =
        match image_stats(&lum_comp_img, &lum_warp_img, &ssim_mask) {
            Ok(stats) => {
                let s = ssim_from_stats(&stats, weights.c1, weights.c2);
                (Some(stats), ssim_to_loss(s), false)
            }
            Err(Error::DegenerateStatistics) => (None, 0.0, true),
            Err(e) => return Err(e),
        };

    let l_d = euclidean_pose_loss(
        pred_prev,
        &pair.prev.pose_gt,
        pred_curr,
        &pair.curr.pose_gt,
        weights.beta,
    );
    let l_p = phot.value;
    let breakdown = LossBreakdown {
        l_d,
        l_p,
        l_s,
        total: compose_total(weights, l_d, l_p, l_s),
        valid_pixel_count: warp.validity.count(),
        gated_pixel_count: phot.gated_count,
        degenerate: phot.degenerate || ssim_degenerate,
    };

    Ok(PairEvaluation {
        t_rel,
        curr_warp_pose,
        target,
        comparison,
        lum_weights,
        warp,
        phot,
        ssim_mask,
        stats,
        lum_comparison,
        lum_warped,
        breakdown,
    })
}

/// Composite loss `λ_D L_D + λ_P L_P + λ_S L_S` for a frame pair under the
/// given pose predictions.
pub fn total_loss(
    pair: &FramePair,
    pred_prev: &Pose,
    pred_curr: &Pose,
    weights: &LossWeights,
    mode: SupervisionMode,
) -> Result<LossBreakdown> {
    total_loss_with_options(pair, pred_prev, pred_curr, weights, &LossOptions::default(), mode)
}

pub fn total_loss_with_options(
    pair: &FramePair,
    pred_prev: &Pose,
    pred_curr: &Pose,
    weights: &LossWeights,
    opts: &LossOptions,
    mode: SupervisionMode,
) -> Result<LossBreakdown> {
    Ok(evaluate_pair(pair, pred_prev, pred_curr, weights, opts, mode)?.breakdown)
}

/// Gradient layout: `[δt_prev, δθ_prev, δt_curr, δθ_curr]`, each a 3-vector.
/// Increments are composed on the left of the corresponding pose, matching
/// [`crate::align::perturb_pose`].
pub type PoseGradient = [f64; 12];

/// Curvature model of the objective in the same 12 local parameters.
pub type PoseHessian = nalgebra::SMatrix<f64, 12, 12>;

/// Residuals below this magnitude stop sharpening the IRLS weights.
const IRLS_FLOOR: f64 = 1e-4;

/// Derivative of `‖q(δθ) − q_gt‖₂` w.r.t. a left-applied small rotation,
/// evaluated at δθ = 0. Zero when the residual vanishes.
fn quat_distance_gradient(q: &Quaternion, q_gt: &Quaternion) -> [f64; 3] {
    let diff = [q.w - q_gt.w, q.x - q_gt.x, q.y - q_gt.y, q.z - q_gt.z];
    let norm = (diff.iter().map(|d| d * d).sum::<f64>()).sqrt();
    if norm < ZERO_RESIDUAL {
        return [0.0; 3];
    }
    let mut out = [0.0; 3];
    for (k, axis) in [
        Quaternion { w: 0.0, x: 1.0, y: 0.0, z: 0.0 },
        Quaternion { w: 0.0, x: 0.0, y: 1.0, z: 0.0 },
        Quaternion { w: 0.0, x: 0.0, y: 0.0, z: 1.0 },
    ]
    .iter()
    .enumerate()
    {
        // d q(δθ_k)/dδθ_k = ½ e_k ⊗ q, orthogonal to q so renormalization
        // does not bend it.
        let dq = axis.mul(q);
        out[k] = 0.5 * (diff[0] * dq.w + diff[1] * dq.x + diff[2] * dq.y + diff[3] * dq.z) / norm;
    }
    out
}

fn position_distance_gradient(pred: &Vec3, gt: &Vec3) -> Vec3 {
    let diff = pred - gt;
    let norm = diff.norm();
    if norm < ZERO_RESIDUAL {
        Vec3::zeros()
    } else {
        diff / norm
    }
}

/// Composite loss and its analytic gradient w.r.t. the 12 local pose
/// parameters (6 per frame).
///
/// Mask and gate selections are frozen at the evaluation point: excluded
/// pixels contribute zero gradient. In anchored mode the warp does not
/// depend on the current pose, so its parameters receive gradient only from
/// the pose-distance term.
pub fn total_loss_gradient(
    pair: &FramePair,
    pred_prev: &Pose,
    pred_curr: &Pose,
    weights: &LossWeights,
    mode: SupervisionMode,
) -> Result<(LossBreakdown, PoseGradient)> {
    total_loss_gradient_with_options(
        pair,
        pred_prev,
        pred_curr,
        weights,
        &LossOptions::default(),
        mode,
    )
}

pub fn total_loss_gradient_with_options(
    pair: &FramePair,
    pred_prev: &Pose,
    pred_curr: &Pose,
    weights: &LossWeights,
    opts: &LossOptions,
    mode: SupervisionMode,
) -> Result<(LossBreakdown, PoseGradient)> {
    let (bd, grad, _) =
        derivatives(pair, pred_prev, pred_curr, weights, opts, mode, false)?;
    Ok((bd, grad))
}

/// Loss, gradient and an IRLS curvature model for damped Gauss-Newton
/// steps: L1 terms contribute `(dr)(dr)ᵀ/max(|r|, floor)` and the
/// pose-distance norms their IRLS equivalents. The structural-similarity
/// term enters the gradient only; damping absorbs its curvature.
pub fn total_loss_quadratic(
    pair: &FramePair,
    pred_prev: &Pose,
    pred_curr: &Pose,
    weights: &LossWeights,
    opts: &LossOptions,
    mode: SupervisionMode,
) -> Result<(LossBreakdown, PoseGradient, PoseHessian)> {
    let (bd, grad, hessian) =
        derivatives(pair, pred_prev, pred_curr, weights, opts, mode, true)?;
    Ok((bd, grad, hessian.expect("requested")))
}

fn derivatives(
    pair: &FramePair,
    pred_prev: &Pose,
    pred_curr: &Pose,
    weights: &LossWeights,
    opts: &LossOptions,
    mode: SupervisionMode,
    want_hessian: bool,
) -> Result<(LossBreakdown, PoseGradient, Option<PoseHessian>)> {
    let eval = evaluate_pair(pair, pred_prev, pred_curr, weights, opts, mode)?;
    let mut grad = [0.0f64; 12];
    let mut hessian = want_hessian.then(PoseHessian::zeros);

    // Pose-distance term, both frames.
    for (block, pred, gt) in [
        (0usize, pred_prev, &pair.prev.pose_gt),
        (6usize, pred_curr, &pair.curr.pose_gt),
    ] {
        let dp = position_distance_gradient(&pred.position, &gt.position);
        let dq = quat_distance_gradient(&pred.orientation, &gt.orientation);
        for i in 0..3 {
            grad[block + i] += weights.lambda_d * dp[i];
            grad[block + 3 + i] += weights.lambda_d * weights.beta * dq[i];
        }
        if let Some(h) = hessian.as_mut() {
            // IRLS model of the two norms: λ_D/‖Δx‖·I for the position and
            // λ_D·β/(4‖Δq‖)·I for the orientation (dq/dδθ has orthogonal
            // columns of length 1/2).
            let pos_res = (pred.position - gt.position).norm().max(IRLS_FLOOR);
            let quat_res =
                quat_euclidean_distance(&pred.orientation, &gt.orientation).max(IRLS_FLOOR);
            for i in 0..3 {
                h[(block + i, block + i)] += weights.lambda_d / pos_res;
                h[(block + 3 + i, block + 3 + i)] +=
                    weights.lambda_d * weights.beta / (4.0 * quat_res);
            }
        }
    }

    // Image terms, chained through the warp.
    let depth = pair.prev.depth.as_ref().expect("validated by evaluate_pair");
    let k = &pair.intrinsics;
    let (w, h) = (k.width, k.height);
    let channels = eval.target.channels;
    let r_rel = eval.t_rel.rotation;
    let t_p = pred_prev.position;
    let t_c = eval.curr_warp_pose.position;
    let sw = crate::warp::ScaledWarp::new(&eval.t_rel, k);

    // Photometric scaling: raw sum or mean, zero when the term was dropped.
    let phot_scale = if eval.phot.degenerate {
        0.0
    } else if opts.normalize_photometric {
        weights.lambda_p / eval.phot.surviving_count as f64
    } else {
        weights.lambda_p
    };

    // SSIM chain coefficients, from the global statistics.
    let ssim_chain = eval.stats.as_ref().map(|s| {
        let a1 = 2.0 * s.mu_x * s.mu_y + weights.c1;
        let a2 = 2.0 * s.sigma_xy + weights.c2;
        let b1 = s.mu_x * s.mu_x + s.mu_y * s.mu_y + weights.c1;
        let b2 = s.sigma_x2 + s.sigma_y2 + weights.c2;
        let sv = (a1 * a2) / (b1 * b2);
        let inv_n = 1.0 / s.count as f64;
        // dS/db_i = (2/N)·[μ_a·A2/(B1B2) − μ_b·S/B1
        //                  + (a_i − μ_a)·A1/(B1B2) − (b_i − μ_b)·S/B2]
        let const_term = s.mu_x * a2 / (b1 * b2) - s.mu_y * sv / b1;
        let a_coef = a1 / (b1 * b2);
        let b_coef = sv / b2;
        // L_S = (1 − S)/2, weighted by λ_S.
        let outer = -0.5 * weights.lambda_s;
        (2.0 * inv_n * outer, const_term, a_coef, b_coef, s.mu_x, s.mu_y)
    });

    let anchored = matches!(mode, SupervisionMode::Anchored);
    let inv_c = 1.0 / channels as f64;
    let rows: Vec<([f64; 12], Option<PoseHessian>)> = map_rows(h, |y| {
        let mut acc = [0.0f64; 12];
        let mut acc_h = want_hessian.then(PoseHessian::zeros);
        for x in 0..w {
            let i = y * w + x;
            let phot_active = eval.phot.kept[i] && phot_scale != 0.0;
            let ssim_active = eval.ssim_mask.keep[i] && ssim_chain.is_some();
            if !phot_active && !ssim_active {
                continue;
            }

            // Same arithmetic path as warp_image, so the sample position is
            // bit-identical to the one the loss evaluation used.
            let depth_i = depth.depth[i];
            let (u, v, _, p) = sw.apply(x as f64, y as f64, depth_i);
            let sample = bilinear_sample(&eval.target, u, v)
                .expect("pixel validity implies in-bounds sample");

            let ds_db = ssim_chain.map(|(scale, const_term, a_coef, b_coef, mu_a, mu_b)| {
                scale
                    * (const_term + (eval.lum_comparison[i] - mu_a) * a_coef
                        - (eval.lum_warped[i] - mu_b) * b_coef)
            });

            let rt = r_rel.transpose();
            let x_cam = Vec3::new(
                (x as f64 - k.cx) / k.fx * depth_i,
                (y as f64 - k.cy) / k.fy * depth_i,
                depth_i,
            );
            let v_prev = x_cam - t_p;
            let w_curr = p - t_c;
            let inv_z = 1.0 / p.z;

            for c in 0..channels {
                // d(total)/d(warped value of this channel).
                let mut coef = 0.0;
                let r = eval.warp.warped.data[i * channels + c]
                    - eval.comparison.data[i * channels + c];
                if phot_active {
                    let sign = if r == 0.0 { 0.0 } else { r.signum() };
                    coef += phot_scale * inv_c * sign;
                }
                if let (true, Some(ds)) = (ssim_active, ds_db) {
                    coef += ds * eval.lum_weights[c];
                }
                let needs_h = want_hessian && phot_active;
                if coef == 0.0 && !needs_h {
                    continue;
                }

                // Chain of d(warped_c)/d(local parameters): through the
                // sample gradient, the projection and the transform.
                let (gu, gv) = (sample.ddx[c], sample.ddy[c]);
                let p2 = Vec3::new(
                    k.fx * inv_z * gu,
                    k.fy * inv_z * gv,
                    -(k.fx * p.x * inv_z * inv_z * gu + k.fy * p.y * inv_z * inv_z * gv),
                );
                let rt_p2 = rt * p2;
                let rot_prev = -v_prev.cross(&rt_p2);
                let mut chain = [0.0f64; 12];
                for j in 0..3 {
                    chain[j] = -rt_p2[j];
                    chain[3 + j] = rot_prev[j];
                }
                // In anchored mode the warp does not depend on the current
                // prediction, so its blocks stay zero.
                if !anchored {
                    let rot_curr = w_curr.cross(&p2);
                    for j in 0..3 {
                        chain[6 + j] = p2[j];
                        chain[9 + j] = rot_curr[j];
                    }
                }

                for j in 0..12 {
                    acc[j] += coef * chain[j];
                }
                if needs_h {
                    // IRLS curvature of the per-channel L1 residual.
                    let weight = phot_scale * inv_c / r.abs().max(IRLS_FLOOR);
                    let h_acc = acc_h.as_mut().expect("needs_h implies storage");
                    for a in 0..12 {
                        if chain[a] == 0.0 {
                            continue;
                        }
                        let wa = weight * chain[a];
                        for b in a..12 {
                            h_acc[(a, b)] += wa * chain[b];
                        }
                    }
                }
            }
        }
        (acc, acc_h)
    });

    for (row_g, row_h) in rows {
        for j in 0..12 {
            grad[j] += row_g[j];
        }
        if let (Some(h_total), Some(h_row)) = (hessian.as_mut(), row_h) {
            *h_total += h_row;
        }
    }
    if let Some(h_total) = hessian.as_mut() {
        // Mirror the upper triangle accumulated above.
        for a in 0..12 {
            for b in a + 1..12 {
                h_total[(b, a)] = h_total[(a, b)];
            }
        }
    }

    Ok((eval.breakdown, grad, hessian))
}
