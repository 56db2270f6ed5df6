//! Training objectives.
//!
//! Three terms: a gated 3D regression loss, a reliability regression
//! loss, and a reprojection loss wrapped in a shrinking tanh threshold.
//! All builders append to an existing [`Graph`] and return the loss node
//! so one backward pass covers the network and every term at once.
//!
//! Gating and validity masking are done by row selection: the masked-out
//! features never enter the loss subgraph, so their coordinate gradients
//! are exactly zero rather than small.

use crate::diffcore::{DiffError, Graph, Scalar, Tensor, Var};
use crate::geometry::{self, Intrinsics, Line3, Pose, Segment2};
use crate::model::ForwardVars;
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

/// Huber transition, in each loss's native units (meters for the map
/// term, reliability units, pixels for reprojection).
pub const HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{what}: predictions carry {predicted} rows but {labeled} labels given")]
    CountMismatch { what: &'static str, predicted: usize, labeled: usize },
    #[error("training progress {t} outside the open interval (0, 1)")]
    ProgressOutOfRange { t: f64 },
    #[error("threshold schedule needs tau_max > tau_min > 0, got max {tau_max} min {tau_min}")]
    BadSchedule { tau_max: f64, tau_min: f64 },
    #[error("robust wrap threshold must be positive, got {tau}")]
    BadThreshold { tau: f64 },
    #[error("loss weight {name} is negative: {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Per-feature 3D targets with their binary reliability flags. A flag of
/// false marks a feature the reconstruction could not triangulate; its
/// 2D observation is kept but its 3D target is meaningless.
#[derive(Debug, Clone, Default)]
pub struct SceneLabels {
    pub points: Vec<PointLabel>,
    pub lines: Vec<LineLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLabel {
    pub target: Vector3<f64>,
    pub reliable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineLabel {
    pub target: Line3,
    pub reliable: bool,
}

/// The 2D detections the reprojection loss compares against, in pixels.
#[derive(Debug, Clone, Default)]
pub struct Observations {
    pub points: Vec<Vector2<f64>>,
    pub lines: Vec<Segment2>,
}

/// Balance coefficients for the three terms. All default to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub map: f64,
    pub reliability: f64,
    pub reprojection: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { map: 1.0, reliability: 1.0, reprojection: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in
            [("map", self.map), ("reliability", self.reliability), ("reprojection", self.reprojection)]
        {
            if value < 0.0 {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Soft reprojection threshold schedule: starts near `tau_max + tau_min`
/// and falls to `tau_min` along a quarter circle as training progresses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauSchedule {
    pub tau_max: f64,
    pub tau_min: f64,
}

impl TauSchedule {
    /// 50 px ceiling, used for room-scale scenes.
    pub fn indoor() -> Self {
        Self { tau_max: 50.0, tau_min: 1.0 }
    }

    /// 100 px ceiling for outdoor scenes with larger reprojection error.
    pub fn outdoor() -> Self {
        Self { tau_max: 100.0, tau_min: 1.0 }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.tau_max > self.tau_min && self.tau_min > 0.0 {
            Ok(())
        } else {
            Err(LossError::BadSchedule { tau_max: self.tau_max, tau_min: self.tau_min })
        }
    }

    /// sqrt(1 - t^2) * tau_max + tau_min for progress t in (0, 1).
    /// Accepts the closed interval so the endpoints evaluate to the
    /// schedule's limit values (tau_max + tau_min at 0, tau_min at 1);
    /// training itself only ever passes interior progress.
    pub fn tau(&self, t: f64) -> Result<f64, LossError> {
        self.validate()?;
        if !(0.0..=1.0).contains(&t) {
            return Err(LossError::ProgressOutOfRange { t });
        }
        Ok((1.0 - t * t).sqrt() * self.tau_max + self.tau_min)
    }
}

/// Loss node plus detached per-term values for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    /// Scalar node to run backward from.
    pub total: Var,
    pub map: f64,
    pub reliability: f64,
    pub reprojection: f64,
    /// Reprojection after the tanh wrap, as weighted into the total.
    pub robust: f64,
    pub tau: f64,
}

fn check_count(
    what: &'static str,
    coords: Option<Var>,
    labeled: usize,
    g: &Graph<impl Scalar>,
) -> Result<(), LossError> {
    let predicted = coords.map_or(0, |v| g.value(v).rows());
    if predicted == labeled {
        Ok(())
    } else {
        Err(LossError::CountMismatch { what, predicted, labeled })
    }
}

/// Gathers the listed rows of `x` through a constant one-hot matrix, so
/// unselected rows receive exactly zero gradient.
fn select_rows<T: Scalar>(g: &mut Graph<T>, x: Var, rows: &[usize]) -> Result<Var, DiffError> {
    let n = g.value(x).rows();
    let onehot =
        Tensor::from_fn(rows.len(), n, |i, j| if rows[i] == j { T::one() } else { T::zero() });
    let sel = g.input(onehot);
    g.matmul(sel, x)
}

fn constant<T: Scalar>(g: &mut Graph<T>, rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Var {
    g.input(Tensor::from_fn(rows, cols, |i, j| T::lit(f(i, j))))
}

/// Sums Huber norms of `coords - target` over the selected rows.
fn gated_regression<T: Scalar>(
    g: &mut Graph<T>,
    coords: Var,
    rows: &[usize],
    target: impl Fn(usize, usize) -> f64,
    width: usize,
) -> Result<Var, DiffError> {
    let picked = select_rows(g, coords, rows)?;
    let t = constant(g, rows.len(), width, target);
    let diff = g.sub(picked, t)?;
    let h = g.robust_norm_rows(diff, T::lit(HUBER_DELTA))?;
    g.sum_all(h)
}

fn add_terms<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var, DiffError> {
    match terms {
        [] => Ok(g.zeros(1, 1)),
        [first, rest @ ..] => {
            let mut acc = *first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        }
    }
}

/// Huber distance between predicted and labeled 3D geometry, summed over
/// features whose label flag is set. Unlabeled features contribute
/// nothing, including to the gradient.
pub fn map_loss<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ForwardVars,
    labels: &SceneLabels,
) -> Result<Var, LossError> {
    check_count("point map loss", vars.point_coords, labels.points.len(), g)?;
    check_count("line map loss", vars.line_coords, labels.lines.len(), g)?;
    let mut terms = Vec::new();
    if let Some(coords) = vars.point_coords {
        let sel: Vec<usize> =
            (0..labels.points.len()).filter(|&i| labels.points[i].reliable).collect();
        if !sel.is_empty() {
            let t = |i: usize, j: usize| labels.points[sel[i]].target[j];
            terms.push(gated_regression(g, coords, &sel, t, 3)?);
        }
    }
    if let Some(coords) = vars.line_coords {
        let sel: Vec<usize> =
            (0..labels.lines.len()).filter(|&i| labels.lines[i].reliable).collect();
        if !sel.is_empty() {
            let t = |i: usize, j: usize| {
                let l = labels.lines[sel[i]].target;
                if j < 3 { l.p[j] } else { l.q[j - 3] }
            };
            terms.push(gated_regression(g, coords, &sel, t, 6)?);
        }
    }
    Ok(add_terms(g, &terms)?)
}

/// Huber distance between predicted reliabilities and the binary label
/// flags, over every feature. This is the only term that reaches
/// unlabeled features, teaching the model to flag them.
pub fn reliability_loss<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ForwardVars,
    labels: &SceneLabels,
) -> Result<Var, LossError> {
    check_count("point reliability loss", vars.point_reliability, labels.points.len(), g)?;
    check_count("line reliability loss", vars.line_reliability, labels.lines.len(), g)?;
    let mut terms = Vec::new();
    if let Some(rel) = vars.point_reliability {
        if !labels.points.is_empty() {
            let t = constant(g, labels.points.len(), 1, |i, _| {
                if labels.points[i].reliable { 1.0 } else { 0.0 }
            });
            let diff = g.sub(rel, t)?;
            let h = g.robust_norm_rows(diff, T::lit(HUBER_DELTA))?;
            terms.push(g.sum_all(h)?);
        }
    }
    if let Some(rel) = vars.line_reliability {
        if !labels.lines.is_empty() {
            let t = constant(g, labels.lines.len(), 1, |i, _| {
                if labels.lines[i].reliable { 1.0 } else { 0.0 }
            });
            let diff = g.sub(rel, t)?;
            let h = g.robust_norm_rows(diff, T::lit(HUBER_DELTA))?;
            terms.push(g.sum_all(h)?);
        }
    }
    Ok(add_terms(g, &terms)?)
}

/// Projects the selected rows of an Kx3 coordinate block and returns the
/// pixel u, v columns. Callers must already have excluded rows that
/// would land too close to the camera plane.
fn project_rows<T: Scalar>(
    g: &mut Graph<T>,
    pts: Var,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<(Var, Var), DiffError> {
    let r = pose.rotation_matrix();
    let rt = constant(g, 3, 3, |i, j| r[(j, i)]);
    let trans = constant(g, 1, 3, |_, j| pose.translation[j]);
    let cam = g.matmul(pts, rt)?;
    let cam = g.add_row(cam, trans)?;
    let x = g.slice_cols(cam, 0, 1)?;
    let y = g.slice_cols(cam, 1, 2)?;
    let z = g.slice_cols(cam, 2, 3)?;
    let u = g.div(x, z)?;
    let u = g.scale(u, T::lit(k.fx))?;
    let u = g.add_scalar(u, T::lit(k.cx))?;
    let v = g.div(y, z)?;
    let v = g.scale(v, T::lit(k.fy))?;
    let v = g.add_scalar(v, T::lit(k.cy))?;
    Ok((u, v))
}

/// Huber of the signed perpendicular distances from projected pixels to
/// each row's infinite support line a*u + b*v + c = 0 (a, b unit).
fn support_distance_huber<T: Scalar>(
    g: &mut Graph<T>,
    u: Var,
    v: Var,
    lines: &[(f64, f64, f64)],
) -> Result<Var, DiffError> {
    let a = constant(g, lines.len(), 1, |i, _| lines[i].0);
    let b = constant(g, lines.len(), 1, |i, _| lines[i].1);
    let c = constant(g, lines.len(), 1, |i, _| lines[i].2);
    let ua = g.mul(u, a)?;
    let vb = g.mul(v, b)?;
    let s = g.add(ua, vb)?;
    let s = g.add(s, c)?;
    g.robust_norm_rows(s, T::lit(HUBER_DELTA))
}

/// Pixel-space consistency of the predicted geometry with the observed
/// detections under the ground-truth camera. Points contribute the Huber
/// norm of their reprojection residual; lines the Huber perpendicular
/// distances of both projected endpoints to the observed segment's
/// support line. Each feature enters only when its label flag is set and
/// the current prediction is valid (in-range depth, bounded error);
/// masked features are excluded from the subgraph entirely, so the mask
/// itself carries no gradient.
pub fn reprojection_loss<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ForwardVars,
    labels: &SceneLabels,
    obs: &Observations,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<Var, LossError> {
    check_count("point reprojection loss", vars.point_coords, obs.points.len(), g)?;
    check_count("line reprojection loss", vars.line_coords, obs.lines.len(), g)?;
    check_count("point reprojection labels", vars.point_coords, labels.points.len(), g)?;
    check_count("line reprojection labels", vars.line_coords, labels.lines.len(), g)?;

    let mut terms = Vec::new();
    if let Some(coords) = vars.point_coords {
        let values = g.value(coords).clone();
        let predicted = |i: usize| {
            Vector3::new(
                values.get(i, 0).to_f64_lossy(),
                values.get(i, 1).to_f64_lossy(),
                values.get(i, 2).to_f64_lossy(),
            )
        };
        let sel: Vec<usize> = (0..obs.points.len())
            .filter(|&i| {
                labels.points[i].reliable
                    && geometry::point_validity(pose, k, predicted(i), obs.points[i])
            })
            .collect();
        if !sel.is_empty() {
            let picked = select_rows(g, coords, &sel)?;
            let (u, v) = project_rows(g, picked, pose, k)?;
            let ou = constant(g, sel.len(), 1, |i, _| obs.points[sel[i]].x);
            let ov = constant(g, sel.len(), 1, |i, _| obs.points[sel[i]].y);
            let du = g.sub(u, ou)?;
            let dv = g.sub(v, ov)?;
            let res = g.concat(&[du, dv], crate::diffcore::Axis::Cols)?;
            let h = g.robust_norm_rows(res, T::lit(HUBER_DELTA))?;
            terms.push(g.sum_all(h)?);
        }
    }
    if let Some(coords) = vars.line_coords {
        let values = g.value(coords).clone();
        let predicted = |i: usize| Line3 {
            p: Vector3::new(
                values.get(i, 0).to_f64_lossy(),
                values.get(i, 1).to_f64_lossy(),
                values.get(i, 2).to_f64_lossy(),
            ),
            q: Vector3::new(
                values.get(i, 3).to_f64_lossy(),
                values.get(i, 4).to_f64_lossy(),
                values.get(i, 5).to_f64_lossy(),
            ),
        };
        let sel: Vec<usize> = (0..obs.lines.len())
            .filter(|&i| {
                labels.lines[i].reliable
                    && geometry::line_validity(pose, k, &predicted(i), &obs.lines[i])
            })
            .collect();
        if !sel.is_empty() {
            // unit normal + offset of each observed segment's support line;
            // validity already rejected degenerate segments
            let support: Vec<(f64, f64, f64)> = sel
                .iter()
                .map(|&i| {
                    let s = obs.lines[i];
                    let d = s.q - s.p;
                    let n = Vector2::new(-d.y, d.x) / d.norm();
                    (n.x, n.y, -n.dot(&s.p))
                })
                .collect();
            let picked = select_rows(g, coords, &sel)?;
            let p_end = g.slice_cols(picked, 0, 3)?;
            let q_end = g.slice_cols(picked, 3, 6)?;
            let (pu, pv) = project_rows(g, p_end, pose, k)?;
            let (qu, qv) = project_rows(g, q_end, pose, k)?;
            let hp = support_distance_huber(g, pu, pv, &support)?;
            let hq = support_distance_huber(g, qu, qv, &support)?;
            let psi = g.add(hp, hq)?;
            terms.push(g.sum_all(psi)?);
        }
    }
    Ok(add_terms(g, &terms)?)
}

/// tau * tanh(x / tau): identity slope near zero, saturating at tau.
pub fn robust_wrap<T: Scalar>(g: &mut Graph<T>, x: Var, tau: f64) -> Result<Var, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::BadThreshold { tau });
    }
    let s = g.scale(x, T::lit(1.0 / tau))?;
    let th = g.tanh(s)?;
    Ok(g.scale(th, T::lit(tau))?)
}

/// Weighted sum of the three objectives, with the reprojection term
/// passed through the tanh wrap at the current threshold.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ForwardVars,
    labels: &SceneLabels,
    obs: &Observations,
    pose: &Pose,
    k: &Intrinsics,
    weights: &LossWeights,
    sched: &TauSchedule,
    t: f64,
) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let tau = sched.tau(t)?;
    let l_map = map_loss(g, vars, labels)?;
    let l_rel = reliability_loss(g, vars, labels)?;
    let l_pi = reprojection_loss(g, vars, labels, obs, pose, k)?;
    let robust = robust_wrap(g, l_pi, tau)?;
    let wm = g.scale(l_map, T::lit(weights.map))?;
    let wr = g.scale(l_rel, T::lit(weights.reliability))?;
    let wp = g.scale(robust, T::lit(weights.reprojection))?;
    let partial = g.add(wm, wr)?;
    let total = g.add(partial, wp)?;
    Ok(LossBreakdown {
        total,
        map: g.value(l_map).item().to_f64_lossy(),
        reliability: g.value(l_rel).item().to_f64_lossy(),
        reprojection: g.value(l_pi).item().to_f64_lossy(),
        robust: g.value(robust).item().to_f64_lossy(),
        tau,
    })
}
