//! Camera localization from predicted 2D-3D correspondences.
//!
//! Two stages mirror the two evaluation settings: point-only RANSAC over
//! minimal three-point hypotheses with a damped least-squares polish, and
//! joint refinement that folds line correspondences into the objective.
//! Correspondences are reliability-filtered before solving, so rows the
//! network marked unreliable never influence the pose.

mod p3p;

pub use p3p::p3p_minimal;

use crate::geometry::{project, Intrinsics, Line3, Pose, Segment2, PROJECTION_EPS};
use nalgebra::{Matrix1x6, Matrix2x3, Matrix2x6, Matrix3, Matrix3x6, Matrix6, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("need at least {need} reliable point correspondences, have {have}")]
    NotEnoughPoints { have: usize, need: usize },
    #[error("no valid pose hypothesis found in {iterations} iterations")]
    NoHypothesis { iterations: usize },
    #[error("inlier threshold must be positive, got {value}")]
    BadThreshold { value: f64 },
    #[error("confidence must lie strictly between 0 and 1, got {value}")]
    BadConfidence { value: f64 },
    #[error("iteration budget must be at least 1")]
    NoIterations,
}

/// One 2D keypoint matched to a predicted 3D point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPair {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
    pub reliability: f64,
}

/// One observed 2D segment matched to a predicted 3D line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinePair {
    pub segment: Segment2,
    pub line: Line3,
    pub reliability: f64,
}

/// Everything one query image offers the solver.
#[derive(Debug, Clone, Default)]
pub struct Correspondences {
    pub points: Vec<PointPair>,
    pub lines: Vec<LinePair>,
}

/// Solver settings. Defaults: 3 px inlier band, 0.999 confidence with at
/// most 10k adaptive iterations, and the reliability gates used for the
/// two correspondence kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub min_point_reliability: f64,
    pub min_line_reliability: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            threshold_px: 3.0,
            confidence: 0.999,
            max_iterations: 10_000,
            min_point_reliability: 0.5,
            min_line_reliability: 0.05,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PoseError> {
        if !(self.threshold_px > 0.0) || !self.threshold_px.is_finite() {
            return Err(PoseError::BadThreshold { value: self.threshold_px });
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PoseError::BadConfidence { value: self.confidence });
        }
        if self.max_iterations == 0 {
            return Err(PoseError::NoIterations);
        }
        Ok(())
    }
}

/// A localized camera plus the evidence behind it. Inlier flags are
/// indexed like the input correspondences and always evaluated under the
/// returned pose; `iterations` counts RANSAC rounds for [`ransac_pnp`]
/// and accepted solver steps for [`refine_points_lines`].
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub point_inliers: Vec<bool>,
    pub line_inliers: Vec<bool>,
    pub iterations: usize,
    /// Robust objective value over the inlier set at the returned pose.
    pub cost: f64,
}

impl PoseEstimate {
    pub fn n_point_inliers(&self) -> usize {
        self.point_inliers.iter().filter(|&&b| b).count()
    }

    pub fn n_line_inliers(&self) -> usize {
        self.line_inliers.iter().filter(|&&b| b).count()
    }
}

fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn finite_point_pair(p: &PointPair) -> bool {
    p.pixel.iter().all(|v| v.is_finite())
        && p.point.iter().all(|v| v.is_finite())
        && p.reliability.is_finite()
}

fn finite_line_pair(l: &LinePair) -> bool {
    let seg = l.segment.p.iter().chain(l.segment.q.iter()).all(|v| v.is_finite());
    let line = l.line.p.iter().chain(l.line.q.iter()).all(|v| v.is_finite());
    seg && line && l.reliability.is_finite()
}

/// Residual norm of a point pair when it is an inlier (in front of the
/// camera and within the pixel band), else None.
fn point_inlier_residual(pose: &Pose, k: &Intrinsics, pair: &PointPair, threshold: f64) -> Option<f64> {
    let (px, depth) = project(pose, k, pair.point).ok()?;
    if depth <= 0.0 {
        return None;
    }
    let r = (px - pair.pixel).norm();
    (r < threshold).then_some(r)
}

/// Summed perpendicular distance of a line pair when it is an inlier,
/// else None. Both endpoints must sit in front of the camera.
fn line_inlier_psi(pose: &Pose, k: &Intrinsics, pair: &LinePair, threshold: f64) -> Option<f64> {
    let dir = pair.segment.q - pair.segment.p;
    let len = dir.norm();
    if len <= 1e-6 {
        return None;
    }
    let n = Vector2::new(-dir.y, dir.x) / len;
    let (pp, zp) = project(pose, k, pair.line.p).ok()?;
    let (pq, zq) = project(pose, k, pair.line.q).ok()?;
    if zp <= 0.0 || zq <= 0.0 {
        return None;
    }
    let psi = n.dot(&(pp - pair.segment.p)).abs() + n.dot(&(pq - pair.segment.p)).abs();
    (psi < threshold).then_some(psi)
}

/// Inlier flags for every correspondence under a pose: reliability gate,
/// positive depth, and the pixel threshold (residual norm for points,
/// summed endpoint distance for lines). This is the post-hoc check for
/// any returned estimate.
pub fn inlier_flags(
    pose: &Pose,
    k: &Intrinsics,
    corr: &Correspondences,
    cfg: &RansacConfig,
) -> (Vec<bool>, Vec<bool>) {
    let points = corr
        .points
        .iter()
        .map(|p| {
            finite_point_pair(p)
                && p.reliability > cfg.min_point_reliability
                && point_inlier_residual(pose, k, p, cfg.threshold_px).is_some()
        })
        .collect();
    let lines = corr
        .lines
        .iter()
        .map(|l| {
            finite_line_pair(l)
                && l.reliability > cfg.min_line_reliability
                && line_inlier_psi(pose, k, l, cfg.threshold_px).is_some()
        })
        .collect();
    (points, lines)
}

/// Robust objective over a fixed inlier set: Huber of the point residual
/// norms plus Huber of each line endpoint distance, all at scale `delta`.
pub fn robust_cost(
    pose: &Pose,
    k: &Intrinsics,
    corr: &Correspondences,
    point_inliers: &[bool],
    line_inliers: &[bool],
    delta: f64,
) -> f64 {
    let points: Vec<(Vector2<f64>, Vector3<f64>)> = corr
        .points
        .iter()
        .zip(point_inliers)
        .filter(|(_, &keep)| keep)
        .map(|(p, _)| (p.pixel, p.point))
        .collect();
    let lines: Vec<(Segment2, Line3)> = corr
        .lines
        .iter()
        .zip(line_inliers)
        .filter(|(_, &keep)| keep)
        .map(|(l, _)| (l.segment, l.line))
        .collect();
    list_cost(pose, k, &points, &lines, delta)
}

/// Objective on explicit residual lists. Any term behind the camera or at
/// the projection singularity makes the pose inadmissible (infinite cost),
/// which the solver treats as a rejected step.
fn list_cost(
    pose: &Pose,
    k: &Intrinsics,
    points: &[(Vector2<f64>, Vector3<f64>)],
    lines: &[(Segment2, Line3)],
    delta: f64,
) -> f64 {
    let mut cost = 0.0;
    for (pixel, point) in points {
        match project(pose, k, *point) {
            Ok((px, depth)) if depth > PROJECTION_EPS => {
                cost += huber((px - pixel).norm(), delta);
            }
            _ => return f64::INFINITY,
        }
    }
    for (seg, line) in lines {
        let dir = seg.q - seg.p;
        let n = Vector2::new(-dir.y, dir.x) / dir.norm();
        for endpoint in [line.p, line.q] {
            match project(pose, k, endpoint) {
                Ok((px, depth)) if depth > PROJECTION_EPS => {
                    cost += huber(n.dot(&(px - seg.p)), delta);
                }
                _ => return f64::INFINITY,
            }
        }
    }
    cost
}

fn skew(v: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pixel jacobian of one camera-frame point with respect to the local
/// pose increment (axis-angle about the current rotation, plus a
/// translation delta). None when the point cannot be projected.
fn pixel_jacobian(pose: &Pose, k: &Intrinsics, point: Vector3<f64>) -> Option<(Vector2<f64>, Matrix2x6<f64>)> {
    let pc = pose.transform(point);
    if pc.z <= PROJECTION_EPS {
        return None;
    }
    let z = pc.z;
    let px = Vector2::new(k.fx * pc.x / z + k.cx, k.fy * pc.y / z + k.cy);
    let du = Matrix2x3::new(
        k.fx / z, 0.0, -k.fx * pc.x / (z * z),
        0.0, k.fy / z, -k.fy * pc.y / (z * z),
    );
    let rotated = pc - pose.translation;
    let mut dpc = Matrix3x6::zeros();
    dpc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(rotated)));
    dpc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    Some((px, du * dpc))
}

/// Damped least squares over fixed residual lists with Huber reweighting.
/// Steps are accepted only when the objective drops, so the returned cost
/// never exceeds the cost at `init`.
fn lm_refine(
    init: &Pose,
    k: &Intrinsics,
    points: &[(Vector2<f64>, Vector3<f64>)],
    lines: &[(Segment2, Line3)],
    delta: f64,
) -> (Pose, usize, f64) {
    let mut pose = *init;
    let mut cost = list_cost(&pose, k, points, lines, delta);
    if !cost.is_finite() || (points.is_empty() && lines.is_empty()) {
        return (pose, 0, cost);
    }
    let mut lambda = 1e-3;
    let mut accepted = 0usize;
    for _ in 0..100 {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (pixel, point) in points {
            let Some((px, j)) = pixel_jacobian(&pose, k, *point) else {
                return (pose, accepted, cost);
            };
            let r = px - pixel;
            let n = r.norm();
            let w = if n <= delta { 1.0 } else { delta / n };
            h += w * j.transpose() * j;
            g += w * j.transpose() * r;
        }
        for (seg, line) in lines {
            let dir = seg.q - seg.p;
            let normal = Vector2::new(-dir.y, dir.x) / dir.norm();
            for endpoint in [line.p, line.q] {
                let Some((px, j)) = pixel_jacobian(&pose, k, endpoint) else {
                    return (pose, accepted, cost);
                };
                let s = normal.dot(&(px - seg.p));
                let js: Matrix1x6<f64> = normal.transpose() * j;
                let w = if s.abs() <= delta { 1.0 } else { delta / s.abs() };
                h += w * js.transpose() * js;
                g += w * js.transpose() * s;
            }
        }
        let mut improved = false;
        for _ in 0..8 {
            let damping = Matrix6::from_diagonal(&h.diagonal().map(|d| d.max(1e-12)));
            let rhs = -g;
            let Some(step) = (h + lambda * damping).lu().solve(&rhs) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let dt = Vector3::new(step[3], step[4], step[5]);
            let dq = UnitQuaternion::from_scaled_axis(omega);
            let candidate = Pose::new(
                UnitQuaternion::new_normalize((dq * pose.rotation).into_inner()),
                pose.translation + dt,
            );
            let candidate_cost = list_cost(&candidate, k, points, lines, delta);
            if candidate_cost.is_finite() && candidate_cost < cost {
                let gain = cost - candidate_cost;
                pose = candidate;
                cost = candidate_cost;
                lambda = (lambda / 3.0).max(1e-12);
                accepted += 1;
                improved = true;
                if step.norm() < 1e-14 || gain < 1e-15 * cost.max(1e-300) {
                    return (pose, accepted, cost);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (pose, accepted, cost)
}

fn sample_triple(rng: &mut ChaCha8Rng, n: usize) -> [usize; 3] {
    loop {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        let c = rng.gen_range(0..n);
        if a != b && a != c && b != c {
            return [a, b, c];
        }
    }
}

/// Iterations needed for the requested confidence at the current inlier
/// ratio, for minimal samples of three.
fn adaptive_budget(confidence: f64, inlier_ratio: f64) -> usize {
    let p_good = inlier_ratio.powi(3);
    if p_good >= 1.0 - 1e-12 {
        return 1;
    }
    if p_good <= 1e-12 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    n.ceil().max(1.0) as usize
}

/// Point-only RANSAC PnP. Hypotheses come from minimal three-point
/// samples of the reliability-filtered points; the best hypothesis by
/// inlier count (ties broken by summed inlier residual) is polished with
/// damped least squares on its point inliers. Lines are carried through
/// untouched and never flagged. Deterministic for a fixed seed.
pub fn ransac_pnp(
    corr: &Correspondences,
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate, PoseError> {
    cfg.validate()?;
    let usable: Vec<usize> = corr
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| finite_point_pair(p) && p.reliability > cfg.min_point_reliability)
        .map(|(i, _)| i)
        .collect();
    if usable.len() < 3 {
        return Err(PoseError::NotEnoughPoints { have: usable.len(), need: 3 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, Pose)> = None;
    let mut budget = cfg.max_iterations;
    let mut iterations = 0usize;
    while iterations < budget.min(cfg.max_iterations) {
        iterations += 1;
        let sample = sample_triple(&mut rng, usable.len());
        let triple = [
            corr.points[usable[sample[0]]],
            corr.points[usable[sample[1]]],
            corr.points[usable[sample[2]]],
        ];
        for candidate in p3p_minimal(&triple, k) {
            let mut count = 0usize;
            let mut residual_sum = 0.0;
            for &i in &usable {
                if let Some(r) = point_inlier_residual(&candidate, k, &corr.points[i], cfg.threshold_px) {
                    count += 1;
                    residual_sum += r;
                }
            }
            let better = match &best {
                None => count >= 3,
                Some((bc, bs, _)) => count > *bc || (count == *bc && residual_sum < *bs),
            };
            if better {
                best = Some((count, residual_sum, candidate));
                let ratio = count as f64 / usable.len() as f64;
                budget = adaptive_budget(cfg.confidence, ratio);
            }
        }
    }

    let Some((_, _, pose)) = best else {
        return Err(PoseError::NoHypothesis { iterations });
    };

    let inlier_points: Vec<(Vector2<f64>, Vector3<f64>)> = usable
        .iter()
        .filter_map(|&i| {
            let p = &corr.points[i];
            point_inlier_residual(&pose, k, p, cfg.threshold_px).map(|_| (p.pixel, p.point))
        })
        .collect();
    let (refined, _, _) = lm_refine(&pose, k, &inlier_points, &[], cfg.threshold_px);

    let point_inliers: Vec<bool> = corr
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            usable.contains(&i) && point_inlier_residual(&refined, k, p, cfg.threshold_px).is_some()
        })
        .collect();
    let selected: Vec<(Vector2<f64>, Vector3<f64>)> = corr
        .points
        .iter()
        .zip(&point_inliers)
        .filter(|(_, &keep)| keep)
        .map(|(p, _)| (p.pixel, p.point))
        .collect();
    let cost = list_cost(&refined, k, &selected, &[], cfg.threshold_px);
    Ok(PoseEstimate {
        pose: refined,
        point_inliers,
        line_inliers: vec![false; corr.lines.len()],
        iterations,
        cost,
    })
}

/// Joint point+line refinement of an initial pose. Inliers (points by
/// residual norm, lines by summed endpoint distance ψ) are collected
/// under `init`, then the robust objective is minimized with damped
/// least squares; the result never has a higher objective value than
/// `init` on that set. With no line inliers this reduces to the
/// point-only polish. Returned flags are re-evaluated under the final
/// pose.
pub fn refine_points_lines(
    init: &Pose,
    corr: &Correspondences,
    k: &Intrinsics,
    cfg: &RansacConfig,
) -> PoseEstimate {
    let (point_flags, line_flags) = inlier_flags(init, k, corr, cfg);
    let points: Vec<(Vector2<f64>, Vector3<f64>)> = corr
        .points
        .iter()
        .zip(&point_flags)
        .filter(|(_, &keep)| keep)
        .map(|(p, _)| (p.pixel, p.point))
        .collect();
    let lines: Vec<(Segment2, Line3)> = corr
        .lines
        .iter()
        .zip(&line_flags)
        .filter(|(_, &keep)| keep)
        .map(|(l, _)| (l.segment, l.line))
        .collect();
    let (pose, iterations, cost) = lm_refine(init, k, &points, &lines, cfg.threshold_px);
    let (point_inliers, line_inliers) = inlier_flags(&pose, k, corr, cfg);
    PoseEstimate { pose, point_inliers, line_inliers, iterations, cost }
}
