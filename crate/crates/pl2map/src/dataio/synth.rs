//! Synthetic desk-scale scenes with exact geometry.
//!
//! Landmarks live in a cube, cameras sit on a surrounding sphere looking
//! at its center, and every stored 2D observation is the exact projection
//! of its 3D label. Descriptor noise and label dropout perturb only the
//! learning signal, never the geometry, so geometric self-consistency is
//! checkable to float precision.

use super::{DataError, ImageRecord, SceneDataset};
use crate::diffcore::Tensor;
use crate::geometry::{project, Intrinsics, Line3, Pose, Segment2};
use crate::losses::{LineLabel, PointLabel};
use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashSet;

/// Generation knobs. `extent_m` is the landmark cube edge; cameras orbit
/// at 1.8x that distance so the whole cube stays inside the default
/// field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_cameras: usize,
    pub n_points: usize,
    pub n_lines: usize,
    pub extent_m: f64,
    pub descriptor_dim: usize,
    pub tokens_per_line: usize,
    /// Per-element Gaussian sigma added to every observed descriptor and
    /// line token.
    pub noise_sigma: f64,
    /// Fraction of landmarks whose labels are marked unreliable in every
    /// view, like tracks that failed reconstruction; observations are
    /// kept so the reliability pathway has something to reject.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_cameras: 24,
            n_points: 120,
            n_lines: 40,
            extent_m: 1.0,
            descriptor_dim: 16,
            tokens_per_line: 4,
            noise_sigma: 0.05,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::Synth(msg));
        if self.n_cameras == 0 {
            return fail("need at least one camera".into());
        }
        if self.n_points < 3 {
            return fail(format!("{} points cannot anchor a pose, need at least 3", self.n_points));
        }
        if self.descriptor_dim < 2 {
            return fail(format!("descriptor dim {} < 2", self.descriptor_dim));
        }
        if self.tokens_per_line < 2 {
            return fail(format!("tokens per line {} < 2", self.tokens_per_line));
        }
        if !(self.extent_m > 0.0) || !self.extent_m.is_finite() {
            return fail(format!("scene extent {} m must be positive", self.extent_m));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!("noise sigma {} must be non-negative", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1]", self.dropout));
        }
        Ok(())
    }
}

fn unit_descriptor(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let gauss = Normal::new(0.0f64, 1.0).unwrap();
    let raw: Vec<f64> = (0..dim).map(|_| gauss.sample(rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    raw.iter().map(|v| (v / norm) as f32) .collect()
}

fn cube_point(rng: &mut ChaCha8Rng, half: f64) -> Vector3<f64> {
    Vector3::new(
        rng.gen_range(-half..half),
        rng.gen_range(-half..half),
        rng.gen_range(-half..half),
    )
}

/// Observed feature vector: the landmark's fixed descriptor plus
/// elementwise Gaussian noise. Zero sigma reproduces the descriptor
/// bit-for-bit.
fn observe(base: &[f32], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return base.to_vec();
    }
    let gauss = Normal::new(0.0f64, sigma).unwrap();
    base.iter().map(|&v| (v as f64 + gauss.sample(rng)) as f32).collect()
}

/// Builds a geometrically exact synthetic scene. Every keypoint and
/// segment endpoint equals the projection of its 3D label under the
/// stored pose and intrinsics; descriptors are per-landmark unit vectors
/// re-observed with noise; line tokens blend the two endpoint
/// descriptors linearly along the segment.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SceneDataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = spec.extent_m / 2.0;
    let intrinsics = Intrinsics::new(520.0, 520.0, 320.0, 240.0, 640, 480)?;

    let points: Vec<Vector3<f64>> = (0..spec.n_points).map(|_| cube_point(&mut rng, half)).collect();
    let point_desc: Vec<Vec<f32>> =
        (0..spec.n_points).map(|_| unit_descriptor(&mut rng, spec.descriptor_dim)).collect();

    let mut lines = Vec::with_capacity(spec.n_lines);
    let mut attempts = 0;
    while lines.len() < spec.n_lines {
        let p = cube_point(&mut rng, half);
        let q = cube_point(&mut rng, half);
        attempts += 1;
        if attempts > 10_000 * spec.n_lines.max(1) {
            return Err(DataError::Synth("could not place line segments in the extent".into()));
        }
        if (q - p).norm() < 0.2 * spec.extent_m {
            continue;
        }
        lines.push(Line3 { p, q });
    }
    let line_desc: Vec<(Vec<f32>, Vec<f32>)> = (0..spec.n_lines)
        .map(|_| {
            (
                unit_descriptor(&mut rng, spec.descriptor_dim),
                unit_descriptor(&mut rng, spec.descriptor_dim),
            )
        })
        .collect();

    // dropout models tracks that failed reconstruction: a dropped landmark
    // carries r=0 in every view, so reliability is a property of the feature
    // itself and a predictor can learn to flag it
    let drop_points = (spec.dropout * spec.n_points as f64).round() as usize;
    let dropped_points: HashSet<usize> =
        sample(&mut rng, spec.n_points, drop_points.min(spec.n_points)).into_iter().collect();
    let dropped_lines: HashSet<usize> = if spec.n_lines > 0 {
        let drop_lines = (spec.dropout * spec.n_lines as f64).round() as usize;
        sample(&mut rng, spec.n_lines, drop_lines.min(spec.n_lines)).into_iter().collect()
    } else {
        HashSet::new()
    };

    let radius = 1.8 * spec.extent_m;
    let mut images = Vec::with_capacity(spec.n_cameras);
    for cam in 0..spec.n_cameras {
        let dir = loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            // reject near-zero vectors and near-vertical viewpoints that
            // would degenerate the up hint
            if n > 1e-3 && v.y.abs() / n < 0.97 {
                break v / n;
            }
        };
        let pose = Pose::look_at(dir * radius, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0));

        let mut keypoints = Vec::with_capacity(spec.n_points);
        let mut desc_rows = Vec::with_capacity(spec.n_points * spec.descriptor_dim);
        let mut point_labels = Vec::with_capacity(spec.n_points);
        for (i, (p, base)) in points.iter().zip(&point_desc).enumerate() {
            let (px, _) = project(&pose, &intrinsics, *p)?;
            keypoints.push(px);
            desc_rows.extend(observe(base, spec.noise_sigma, &mut rng));
            point_labels.push(PointLabel { target: *p, reliable: !dropped_points.contains(&i) });
        }

        let mut line_segments = Vec::with_capacity(spec.n_lines);
        let mut line_tokens = Vec::with_capacity(spec.n_lines);
        let mut line_labels = Vec::with_capacity(spec.n_lines);
        for (i, (line, (da, db))) in lines.iter().zip(&line_desc).enumerate() {
            let (pp, _) = project(&pose, &intrinsics, line.p)?;
            let (pq, _) = project(&pose, &intrinsics, line.q)?;
            line_segments.push(Segment2 { p: pp, q: pq });
            let t_count = spec.tokens_per_line;
            let mut data = Vec::with_capacity(t_count * spec.descriptor_dim);
            for j in 0..t_count {
                let t = j as f64 / (t_count - 1) as f64;
                let blend: Vec<f32> = da
                    .iter()
                    .zip(db)
                    .map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32)
                    .collect();
                data.extend(observe(&blend, spec.noise_sigma, &mut rng));
            }
            line_tokens.push(
                Tensor::new(t_count, spec.descriptor_dim, data)
                    .map_err(|e| DataError::Synth(format!("token tensor: {e}")))?,
            );
            line_labels.push(LineLabel { target: *line, reliable: !dropped_lines.contains(&i) });
        }

        let descriptors = Tensor::new(spec.n_points, spec.descriptor_dim, desc_rows)
            .map_err(|e| DataError::Synth(format!("descriptor tensor: {e}")))?;
        images.push(ImageRecord {
            id: format!("view{cam:04}"),
            pose,
            intrinsics,
            keypoints,
            descriptors,
            point_labels,
            line_segments,
            line_tokens,
            line_labels,
        });
    }

    let scene = SceneDataset {
        descriptor_dim: spec.descriptor_dim,
        tokens_per_line: spec.tokens_per_line,
        images,
    };
    scene.validate()?;
    Ok(scene)
}
