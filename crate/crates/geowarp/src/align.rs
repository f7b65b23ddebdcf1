//! Joint two-pose refinement by first-order descent on the composite loss,
//! plus the central-finite-difference gradient oracle.
//!
//! The local parameterization is a 6-vector per frame (3 translation meters,
//! 3 small-angle rotation radians) composed on the left of the current pose;
//! the quaternion is renormalized after every update. Self-supervised mode
//! optimizes all 12 parameters; anchored mode optimizes the previous frame's
//! 6 and leaves the current pose untouched.

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quaternion, Vec3};
use crate::loss::{
    total_loss_quadratic, total_loss_with_options, FramePair, LossBreakdown, LossOptions,
    LossWeights, PoseGradient, SupervisionMode,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Armijo sufficient-decrease parameter.
const ARMIJO_C: f64 = 1e-4;
/// Line search gives up below this step length.
const MIN_STEP: f64 = 1e-16;
/// Ceiling on a single trial displacement (meters/radians in the local
/// parameterization). Keeps the search from leaping across the spurious
/// low-loss region beyond the flow gate, where the photometric sum shrinks
/// only because its pixels were gated away.
const MAX_TRIAL_STEP: f64 = 0.1;
/// Levenberg damping schedule for the Gauss-Newton step.
const DAMPING_INIT: f64 = 1e-4;
const DAMPING_GROW: f64 = 10.0;
const DAMPING_SHRINK: f64 = 0.25;
const DAMPING_MAX: f64 = 1e10;
const DAMPING_MIN: f64 = 1e-12;

/// Optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub max_iterations: usize,
    /// Length of the first trial step along the normalized steepest-descent
    /// direction, in local-parameter units (meters/radians).
    pub initial_step: f64,
    /// Backtracking factor in (0, 1).
    pub step_shrink: f64,
    /// Stop when the active gradient norm falls below this.
    pub convergence_tol: f64,
    pub mode: SupervisionMode,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            initial_step: 1e-2,
            step_shrink: 0.5,
            convergence_tol: 1e-7,
            mode: SupervisionMode::SelfSupervised,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidInput("max_iterations must be at least 1".into()));
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return Err(Error::InvalidInput("step_shrink must lie in (0, 1)".into()));
        }
        if !(self.convergence_tol > 0.0) || !(self.initial_step > 0.0) {
            return Err(Error::InvalidInput(
                "initial_step and convergence_tol must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of one refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub converged: bool,
    /// Accepted descent steps.
    pub iterations: usize,
    pub final_loss: LossBreakdown,
    pub pose_prev: Pose,
    pub pose_curr: Pose,
    /// Total loss before optimization and after every accepted step;
    /// non-increasing by construction.
    pub trajectory: Vec<f64>,
    /// The loss had no surviving pixels at some evaluation point.
    pub degenerate: bool,
    /// 12 in self-supervised mode, 6 in anchored mode.
    pub optimized_params: usize,
}

/// Applies a local increment to a pose: translation added, small-angle
/// rotation composed on the left, orientation renormalized.
pub fn perturb_pose(p: &Pose, delta: &[f64; 6]) -> Pose {
    let dq = Quaternion::from_scaled_axis(Vec3::new(delta[3], delta[4], delta[5]));
    let orientation = dq
        .mul(&p.orientation)
        .normalized()
        .expect("product of unit quaternions has unit norm");
    Pose {
        position: p.position + Vec3::new(delta[0], delta[1], delta[2]),
        orientation,
    }
}

/// Draws a random local increment: translation direction uniform on the
/// sphere with magnitude uniform in `[0, max_translation]`, rotation axis
/// uniform with angle uniform in `[0, max_rotation_rad]`.
pub fn random_perturbation<R: Rng>(
    rng: &mut R,
    max_translation: f64,
    max_rotation_rad: f64,
) -> [f64; 6] {
    let unit = |rng: &mut R| loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    let t = unit(rng) * rng.random_range(0.0..=max_translation);
    let r = unit(rng) * rng.random_range(0.0..=max_rotation_rad);
    [t.x, t.y, t.z, r.x, r.y, r.z]
}

/// Keep-mask for finite-difference gradient checks: retains only pixels
/// whose warped sample position sits at least `margin` pixels away from
/// every integer grid line (image borders included) and whose flow is at
/// least `margin` away from the gate `h`.
///
/// The bilinear interpolant is non-smooth on grid lines, the validity mask
/// flips at the borders and the gate selection flips at `flow == h`, so
/// samples inside the margin would make the FD stencil straddle a kink or a
/// jump. Feed the result through the pair's `ext_mask` and both the
/// analytic gradient and central differences see one smooth selection.
pub fn grid_margin_mask(
    pair: &FramePair,
    pred_prev: &Pose,
    pred_curr: &Pose,
    weights: &LossWeights,
    mode: SupervisionMode,
    margin: f64,
) -> Result<crate::imaging::PixelMask> {
    let depth = pair
        .prev
        .depth
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("previous frame carries no depth".into()))?;
    let curr_warp = match mode {
        SupervisionMode::Anchored => pair.curr.pose_gt,
        SupervisionMode::SelfSupervised => *pred_curr,
    };
    let t_rel = crate::geometry::relative_transform(
        &pred_prev.to_transform(),
        &curr_warp.to_transform(),
    );
    let sw = crate::warp::ScaledWarp::new(&t_rel, &pair.intrinsics);
    let (w, h) = (pair.intrinsics.width, pair.intrinsics.height);
    let mut keep = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth.valid[i] {
                continue;
            }
            let (u, v, wz, _) = sw.apply(x as f64, y as f64, depth.depth[i]);
            if wz <= 0.0 {
                continue;
            }
            let off_grid = |t: f64| (t - t.round()).abs() >= margin;
            let flow = (u - x as f64).abs() + (v - y as f64).abs();
            keep[i] = u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64
                && off_grid(u)
                && off_grid(v)
                && (flow - weights.h).abs() >= margin;
        }
    }
    crate::imaging::PixelMask::new(w, h, keep)
}

/// Central finite differences of the total loss along each of the 12 local
/// parameters; the independent oracle for the analytic gradient.
pub fn fd_gradient(
    pair: &FramePair,
    pred_prev: &Pose,
    pred_curr: &Pose,
    weights: &LossWeights,
    opts: &LossOptions,
    mode: SupervisionMode,
    step: f64,
) -> Result<PoseGradient> {
    let mut grad = [0.0f64; 12];
    for i in 0..12 {
        let mut delta = [0.0f64; 6];
        delta[i % 6] = step;
        let (plus_prev, plus_curr, minus_prev, minus_curr) = if i < 6 {
            let mut neg = delta;
            neg[i % 6] = -step;
            (perturb_pose(pred_prev, &delta), *pred_curr, perturb_pose(pred_prev, &neg), *pred_curr)
        } else {
            let mut neg = delta;
            neg[i % 6] = -step;
            (*pred_prev, perturb_pose(pred_curr, &delta), *pred_prev, perturb_pose(pred_curr, &neg))
        };
        let f_plus =
            total_loss_with_options(pair, &plus_prev, &plus_curr, weights, opts, mode)?.total;
        let f_minus =
            total_loss_with_options(pair, &minus_prev, &minus_curr, weights, opts, mode)?.total;
        grad[i] = (f_plus - f_minus) / (2.0 * step);
    }
    Ok(grad)
}

fn active_norm(grad: &PoseGradient, params: usize) -> f64 {
    grad[..params].iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Solves `(H + mu·diag(H)) s = −g` on the active parameter block.
fn solve_damped(
    hess: &crate::loss::PoseHessian,
    grad: &PoseGradient,
    params: usize,
    mu: f64,
) -> Option<Vec<f64>> {
    let mut a = nalgebra::DMatrix::<f64>::zeros(params, params);
    for i in 0..params {
        for j in 0..params {
            a[(i, j)] = hess[(i, j)];
        }
    }
    for i in 0..params {
        let d = a[(i, i)].max(1e-12);
        a[(i, i)] += mu * d;
    }
    let b = nalgebra::DVector::from_iterator(params, grad[..params].iter().map(|g| -g));
    a.cholesky().map(|ch| ch.solve(&b).iter().copied().collect())
}

/// First-order refinement of the two frame poses on the composite loss.
///
/// Each iteration tries a Levenberg-damped Gauss-Newton step built from the
/// loss's IRLS curvature model and falls back to backtracking gradient
/// descent when the damped step cannot decrease the objective. Every
/// accepted step strictly decreases the total loss; the run stops when the
/// active gradient norm drops below `convergence_tol`, when no step of
/// either kind produces a decrease, or at the iteration cap. Degenerate
/// evaluations (no surviving pixels) are reported, not raised.
pub fn refine_poses(
    pair: &FramePair,
    weights: &LossWeights,
    cfg: &AlignConfig,
    init_prev: &Pose,
    init_curr: &Pose,
) -> AlignReport {
    refine_poses_with_options(pair, weights, &LossOptions::default(), cfg, init_prev, init_curr)
}

pub fn refine_poses_with_options(
    pair: &FramePair,
    weights: &LossWeights,
    opts: &LossOptions,
    cfg: &AlignConfig,
    init_prev: &Pose,
    init_curr: &Pose,
) -> AlignReport {
    let params = match cfg.mode {
        SupervisionMode::SelfSupervised => 12,
        SupervisionMode::Anchored => 6,
    };
    let mut pose_prev = *init_prev;
    let mut pose_curr = *init_curr;
    let mut degenerate = false;

    let fail = |loss: LossBreakdown, prev: Pose, curr: Pose, traj: Vec<f64>, degen: bool| {
        AlignReport {
            converged: false,
            iterations: traj.len().saturating_sub(1),
            final_loss: loss,
            pose_prev: prev,
            pose_curr: curr,
            trajectory: traj,
            degenerate: degen,
            optimized_params: params,
        }
    };

    let eval_quad = |prev: &Pose, curr: &Pose| {
        total_loss_quadratic(pair, prev, curr, weights, opts, cfg.mode)
    };
    let eval = |prev: &Pose, curr: &Pose| {
        total_loss_with_options(pair, prev, curr, weights, opts, cfg.mode)
    };
    let apply_step = |prev: &Pose, curr: &Pose, delta: &[f64]| {
        let mut d_prev = [0.0f64; 6];
        for j in 0..6 {
            d_prev[j] = delta[j];
        }
        let cand_prev = perturb_pose(prev, &d_prev);
        let cand_curr = if delta.len() == 12 {
            let mut d_curr = [0.0f64; 6];
            d_curr.copy_from_slice(&delta[6..12]);
            perturb_pose(curr, &d_curr)
        } else {
            *curr
        };
        (cand_prev, cand_curr)
    };

    let (mut breakdown, mut grad, mut hess) = match eval_quad(&pose_prev, &pose_curr) {
        Ok(v) => v,
        Err(_) => {
            let zero = LossBreakdown {
                l_d: 0.0,
                l_p: 0.0,
                l_s: 0.0,
                total: 0.0,
                valid_pixel_count: 0,
                gated_pixel_count: 0,
                degenerate: true,
            };
            return fail(zero, pose_prev, pose_curr, vec![], true);
        }
    };
    degenerate |= breakdown.degenerate;
    let mut trajectory = vec![breakdown.total];
    let mut converged = false;
    let mut iterations = 0usize;
    let mut step = cfg.initial_step;
    let mut damping = DAMPING_INIT;

    for _ in 0..cfg.max_iterations {
        let gnorm = active_norm(&grad, params);
        if gnorm < cfg.convergence_tol {
            converged = true;
            break;
        }

        let mut accepted = None;

        // Levenberg-damped Gauss-Newton trials on the IRLS model. A step
        // that fails to decrease the true objective (or newly degenerates
        // it, which only drops terms) raises the damping.
        let mut mu = damping;
        while mu <= DAMPING_MAX {
            if let Some(delta) = solve_damped(&hess, &grad, params, mu) {
                let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                if norm <= MAX_TRIAL_STEP {
                    let (cand_prev, cand_curr) = apply_step(&pose_prev, &pose_curr, &delta);
                    match eval(&cand_prev, &cand_curr) {
                        Ok(bd) if bd.degenerate && !breakdown.degenerate => {}
                        Ok(bd) if bd.total < breakdown.total => {
                            accepted = Some((cand_prev, cand_curr, bd));
                            damping = (mu * DAMPING_SHRINK).max(DAMPING_MIN);
                            break;
                        }
                        Ok(_) => {}
                        Err(_) => {}
                    }
                }
            }
            mu *= DAMPING_GROW;
        }

        // Fallback: Armijo backtracking along the normalized negative
        // gradient; alpha is the displacement in local-parameter units.
        if accepted.is_none() {
            let slope = -gnorm;
            let mut alpha = step.min(MAX_TRIAL_STEP);
            while alpha >= MIN_STEP {
                let scale = -alpha / gnorm;
                let delta: Vec<f64> = grad[..params].iter().map(|g| scale * g).collect();
                let (cand_prev, cand_curr) = apply_step(&pose_prev, &pose_curr, &delta);
                match eval(&cand_prev, &cand_curr) {
                    Ok(bd) if bd.degenerate && !breakdown.degenerate => {}
                    Ok(bd) if bd.total <= breakdown.total + ARMIJO_C * alpha * slope => {
                        accepted = Some((cand_prev, cand_curr, bd));
                        step = (alpha / cfg.step_shrink).min(MAX_TRIAL_STEP);
                        break;
                    }
                    Ok(_) => {}
                    // Candidate stepped into an invalid configuration.
                    Err(_) => {}
                }
                alpha *= cfg.step_shrink;
            }
        }

        let Some((new_prev, new_curr, new_bd)) = accepted else {
            break; // stalled: no damped or line-search step decreases
        };
        pose_prev = new_prev;
        pose_curr = new_curr;
        breakdown = new_bd;
        degenerate |= breakdown.degenerate;
        trajectory.push(breakdown.total);
        iterations += 1;

        match eval_quad(&pose_prev, &pose_curr) {
            Ok((bd, g, h)) => {
                breakdown = bd;
                grad = g;
                hess = h;
            }
            Err(_) => {
                return fail(breakdown, pose_prev, pose_curr, trajectory, true);
            }
        }
    }

    if !converged {
        // The cap may have landed us on a point that already satisfies the
        // tolerance.
        converged = active_norm(&grad, params) < cfg.convergence_tol;
    }

    AlignReport {
        converged,
        iterations,
        final_loss: breakdown,
        pose_prev,
        pose_curr,
        trajectory,
        degenerate,
        optimized_params: params,
    }
}
