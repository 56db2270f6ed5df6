//! Dataset model, synthetic scene generation, and on-disk formats.
//!
//! A scene is a set of images, each carrying pre-extracted 2D features
//! (keypoints with descriptors, line segments with token matrices), the
//! ground-truth camera, and per-feature 3D labels from a reconstruction.
//! Detection and reconstruction themselves happen upstream; this crate
//! only ingests their outputs.

mod export;
mod files;
mod synth;

pub use export::{export_map, render_map, MapPrediction};
pub use files::{load_checkpoint, load_scene, save_checkpoint, save_scene, Checkpoint, MANIFEST_NAME};
pub use synth::{generate_synthetic, SynthSpec};

use crate::diffcore::Tensor;
use crate::geometry::{Intrinsics, Pose, Segment2};
use crate::losses::{LineLabel, Observations, PointLabel, SceneLabels};
use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image {image}: line {line} carries {got} tokens, expected {expected}")]
    TokenCount { image: String, line: usize, expected: usize, got: usize },
    #[error("image {image}: {what} is {got} wide, expected descriptor dim {expected}")]
    DescriptorWidth { image: String, what: &'static str, expected: usize, got: usize },
    #[error("image {image}: {what} count {got} does not match {expected}")]
    CountMismatch { image: String, what: &'static str, expected: usize, got: usize },
    #[error("image {image}: non-finite value in {what}")]
    NonFinite { image: String, what: &'static str },
    #[error("{0}")]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: bad magic {got:?}, expected {expected:?}")]
    Magic { path: String, expected: [u8; 4], got: [u8; 4] },
    #[error("{path}: format version {got}, this build reads {expected}")]
    Version { path: String, expected: u32, got: u32 },
    #[error("{path}: checksum mismatch, file is corrupt")]
    Checksum { path: String },
    #[error("{path}:{line}: {detail}")]
    Manifest { path: String, line: usize, detail: String },
    #[error("{path}: {detail}")]
    Layout { path: String, detail: String },
    #[error("synthetic scene: {0}")]
    Synth(String),
}

/// One image's features, labels, and camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// Ground-truth world-to-camera transform.
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    /// N keypoint pixel positions.
    pub keypoints: Vec<Vector2<f64>>,
    /// N x D keypoint descriptors.
    pub descriptors: Tensor<f32>,
    /// N labels: 3D target plus reliability flag.
    pub point_labels: Vec<PointLabel>,
    /// M observed 2D segments.
    pub line_segments: Vec<Segment2>,
    /// M token matrices, each tokens_per_line x D.
    pub line_tokens: Vec<Tensor<f32>>,
    /// M labels: 3D endpoints plus reliability flag.
    pub line_labels: Vec<LineLabel>,
}

impl ImageRecord {
    pub fn n_points(&self) -> usize {
        self.keypoints.len()
    }

    pub fn n_lines(&self) -> usize {
        self.line_segments.len()
    }

    /// Label view shared with the loss builders.
    pub fn labels(&self) -> SceneLabels {
        SceneLabels { points: self.point_labels.clone(), lines: self.line_labels.clone() }
    }

    /// Observation view shared with the loss builders.
    pub fn observations(&self) -> Observations {
        Observations { points: self.keypoints.clone(), lines: self.line_segments.clone() }
    }

    pub fn validate(&self, descriptor_dim: usize, tokens_per_line: usize) -> Result<(), DataError> {
        let image = || self.id.clone();
        let n = self.keypoints.len();
        if self.descriptors.rows() != n {
            return Err(DataError::CountMismatch {
                image: image(),
                what: "descriptor rows",
                expected: n,
                got: self.descriptors.rows(),
            });
        }
        if n > 0 && self.descriptors.cols() != descriptor_dim {
            return Err(DataError::DescriptorWidth {
                image: image(),
                what: "keypoint descriptors",
                expected: descriptor_dim,
                got: self.descriptors.cols(),
            });
        }
        if self.point_labels.len() != n {
            return Err(DataError::CountMismatch {
                image: image(),
                what: "point labels",
                expected: n,
                got: self.point_labels.len(),
            });
        }
        let m = self.line_segments.len();
        if self.line_tokens.len() != m {
            return Err(DataError::CountMismatch {
                image: image(),
                what: "line token matrices",
                expected: m,
                got: self.line_tokens.len(),
            });
        }
        if self.line_labels.len() != m {
            return Err(DataError::CountMismatch {
                image: image(),
                what: "line labels",
                expected: m,
                got: self.line_labels.len(),
            });
        }
        for (i, t) in self.line_tokens.iter().enumerate() {
            if t.rows() != tokens_per_line {
                return Err(DataError::TokenCount {
                    image: image(),
                    line: i,
                    expected: tokens_per_line,
                    got: t.rows(),
                });
            }
            if t.cols() != descriptor_dim {
                return Err(DataError::DescriptorWidth {
                    image: image(),
                    what: "line tokens",
                    expected: descriptor_dim,
                    got: t.cols(),
                });
            }
            if !t.all_finite() {
                return Err(DataError::NonFinite { image: image(), what: "line tokens" });
            }
        }
        if !self.descriptors.all_finite() {
            return Err(DataError::NonFinite { image: image(), what: "descriptors" });
        }
        self.intrinsics.validate()?;
        Ok(())
    }
}

/// A full scene: shared feature dimensions plus per-image records.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub descriptor_dim: usize,
    pub tokens_per_line: usize,
    pub images: Vec<ImageRecord>,
}

impl SceneDataset {
    pub fn validate(&self) -> Result<(), DataError> {
        for img in &self.images {
            img.validate(self.descriptor_dim, self.tokens_per_line)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use crate::model::{init_params, ModelConfig};
    use sha2::{Digest, Sha256};
    use std::fs;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_cameras: 3,
            n_points: 12,
            n_lines: 5,
            noise_sigma: 0.05,
            dropout: 0.25,
            seed: 7,
            ..SynthSpec::default()
        }
    }

    fn desk_config() -> ModelConfig {
        ModelConfig {
            descriptor_dim: 16,
            heads: 4,
            line_tokens: 4,
            point_head_hidden: vec![32, 64, 32],
            line_head_hidden: vec![32, 64, 32],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn empty_scene_round_trips() {
        let scene = SceneDataset { descriptor_dim: 16, tokens_per_line: 4, images: Vec::new() };
        assert!(scene.validate().is_ok());
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let loaded = load_scene(dir.path()).unwrap();
        assert_eq!(scene, loaded);
    }

    #[test]
    fn synthetic_scene_round_trips_bit_exactly() {
        let scene = generate_synthetic(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let loaded = load_scene(dir.path()).unwrap();
        assert_eq!(scene, loaded);
        // spot-check bits, not just PartialEq, for one image
        let (a, b) = (&scene.images[0], &loaded.images[0]);
        let qa = a.pose.rotation.quaternion();
        let qb = b.pose.rotation.quaternion();
        for (x, y) in [(qa.w, qb.w), (qa.i, qb.i), (qa.j, qb.j), (qa.k, qb.k)] {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.pose.translation.iter().zip(b.pose.translation.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.keypoints.iter().zip(&b.keypoints) {
            assert_eq!(x.x.to_bits(), y.x.to_bits());
            assert_eq!(x.y.to_bits(), y.y.to_bits());
        }
        for (x, y) in a.descriptors.data().iter().zip(b.descriptors.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn wrong_token_count_is_a_load_error_naming_the_image() {
        let mut spec = small_spec();
        spec.tokens_per_line = 3;
        let scene = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let manifest = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text.replace("tokens_per_line 3", "tokens_per_line 4")).unwrap();
        let err = load_scene(dir.path()).unwrap_err();
        match err {
            DataError::TokenCount { image, expected, got, .. } => {
                assert_eq!(image, "view0000");
                assert_eq!(expected, 4);
                assert_eq!(got, 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn corrupted_record_fails_checksum() {
        let scene = generate_synthetic(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let record = dir.path().join("00001.plr");
        let mut bytes = fs::read(&record).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&record, bytes).unwrap();
        let err = load_scene(dir.path()).unwrap_err();
        assert!(matches!(err, DataError::Checksum { .. }), "got {err:?}");
    }

    #[test]
    fn missing_scene_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_scene(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let config = desk_config();
        let params = init_params(&config, 99).unwrap();
        let ckpt = Checkpoint { config, params, iteration: 1234 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.iteration, 1234);
        let a = ckpt.params.flatten();
        let b = loaded.params.flatten();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.shape(), y.shape());
            for (u, v) in x.data().iter().zip(y.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_detects_flipped_byte() {
        let config = desk_config();
        let params = init_params(&config, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&Checkpoint { config, params, iteration: 5 }, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 3;
        bytes[mid] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, DataError::Checksum { .. }), "got {err:?}");
    }

    /// Rewrites a field inside the payload and re-seals the checksum, so
    /// the specific header check fires instead of the checksum.
    fn reseal(path: &std::path::Path, edit: impl FnOnce(&mut [u8])) {
        let bytes = fs::read(path).unwrap();
        let (payload, _) = bytes.split_at(bytes.len() - 32);
        let mut payload = payload.to_vec();
        edit(&mut payload);
        let digest = Sha256::digest(&payload);
        payload.extend_from_slice(&digest);
        fs::write(path, payload).unwrap();
    }

    #[test]
    fn checkpoint_rejects_version_and_magic_skew() {
        let config = desk_config();
        let params = init_params(&config, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint { config, params, iteration: 0 };
        save_checkpoint(&ckpt, &path).unwrap();
        reseal(&path, |p| p[4] = 9);
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, DataError::Version { got: 9, .. }), "got {err:?}");
        save_checkpoint(&ckpt, &path).unwrap();
        reseal(&path, |p| p[0] = b'X');
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, DataError::Magic { .. }), "got {err:?}");
    }

    #[test]
    fn synthetic_observations_match_reprojections() {
        let scene = generate_synthetic(&small_spec()).unwrap();
        for img in &scene.images {
            for (kp, label) in img.keypoints.iter().zip(&img.point_labels) {
                let (px, depth) = project(&img.pose, &img.intrinsics, label.target).unwrap();
                assert!(depth > 0.0);
                assert!((px - kp).norm() < 1e-6);
            }
            for (seg, label) in img.line_segments.iter().zip(&img.line_labels) {
                let (pp, _) = project(&img.pose, &img.intrinsics, label.target.p).unwrap();
                let (pq, _) = project(&img.pose, &img.intrinsics, label.target.q).unwrap();
                assert!((pp - seg.p).norm() < 1e-6);
                assert!((pq - seg.q).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_noise_repeats_landmark_descriptors_exactly() {
        let spec = SynthSpec { noise_sigma: 0.0, dropout: 0.0, ..small_spec() };
        let scene = generate_synthetic(&spec).unwrap();
        let first = &scene.images[0];
        for img in &scene.images[1..] {
            for (a, b) in first.descriptors.data().iter().zip(img.descriptors.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            for (ta, tb) in first.line_tokens.iter().zip(&img.line_tokens) {
                for (a, b) in ta.data().iter().zip(tb.data()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        // tokens are affine along the segment: vanishing second difference
        for tokens in &first.line_tokens {
            for j in 1..tokens.rows() - 1 {
                for c in 0..tokens.cols() {
                    let second = tokens.get(j - 1, c) - 2.0 * tokens.get(j, c) + tokens.get(j + 1, c);
                    assert!(second.abs() < 1e-6);
                }
            }
        }
        // and noise actually perturbs when requested
        let noisy = generate_synthetic(&SynthSpec { noise_sigma: 0.05, ..spec }).unwrap();
        let same = noisy.images[0]
            .descriptors
            .data()
            .iter()
            .zip(noisy.images[1].descriptors.data())
            .all(|(a, b)| a == b);
        assert!(!same);
    }

    #[test]
    fn dropout_marks_the_requested_fraction() {
        let spec = SynthSpec {
            n_cameras: 4,
            n_points: 50,
            n_lines: 10,
            dropout: 0.3,
            ..SynthSpec::default()
        };
        let scene = generate_synthetic(&spec).unwrap();
        for img in &scene.images {
            let dropped_points = img.point_labels.iter().filter(|l| !l.reliable).count();
            let dropped_lines = img.line_labels.iter().filter(|l| !l.reliable).count();
            assert!((dropped_points as i64 - 15).abs() <= 1, "{dropped_points} points dropped");
            assert!((dropped_lines as i64 - 3).abs() <= 1, "{dropped_lines} lines dropped");
        }
        // a dropped landmark is dropped in every view, like a track that
        // never got reconstructed
        let flags = |img: &ImageRecord| -> (Vec<bool>, Vec<bool>) {
            (
                img.point_labels.iter().map(|l| l.reliable).collect(),
                img.line_labels.iter().map(|l| l.reliable).collect(),
            )
        };
        let first = flags(&scene.images[0]);
        for img in &scene.images[1..] {
            assert_eq!(flags(img), first, "reliability flags must agree across views");
        }
    }

    #[test]
    fn map_export_filters_by_threshold() {
        use crate::geometry::Line3;
        use nalgebra::Vector3;
        let preds = vec![MapPrediction {
            points: vec![
                (Vector3::new(1.0, 2.0, 3.0), 0.2),
                (Vector3::new(4.0, 5.0, 6.0), 0.5),
                (Vector3::new(7.0, 8.0, 9.0), 0.9),
            ],
            lines: vec![
                (Line3 { p: Vector3::zeros(), q: Vector3::new(1.0, 0.0, 0.0) }, 0.04),
                (Line3 { p: Vector3::zeros(), q: Vector3::new(0.0, 1.0, 0.0) }, 0.6),
            ],
        }];
        assert!(render_map(&preds, 1.01).is_empty());
        let all = render_map(&preds, 0.0);
        assert_eq!(all.lines().count(), 5);
        assert!(all.starts_with("P 1 2 3 0.2\n"));
        assert!(all.contains("L 0 0 0 0 1 0 0.6\n"));
        let mut last = usize::MAX;
        for threshold in [0.0, 0.1, 0.45, 0.55, 0.8, 0.95, 1.01] {
            let count = render_map(&preds, threshold).lines().count();
            assert!(count <= last, "count grew at threshold {threshold}");
            last = count;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.txt");
        export_map(&preds, 0.5, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 3);
    }

    #[test]
    fn saves_leave_no_temp_files() {
        let scene = generate_synthetic(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let config = desk_config();
        let params = init_params(&config, 1).unwrap();
        save_checkpoint(
            &Checkpoint { config, params, iteration: 0 },
            &dir.path().join("model.ckpt"),
        )
        .unwrap();
        for entry in fs::read_dir(dir.path()).unwrap() {
            let name = entry.unwrap().file_name().to_string_lossy().into_owned();
            assert!(!name.ends_with(".tmp"), "leftover temp file {name}");
        }
    }

    #[test]
    fn default_config_checkpoint_size_reported() {
        let config = ModelConfig::default();
        let params = init_params(&config, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("default.ckpt");
        save_checkpoint(&Checkpoint { config, params, iteration: 0 }, &path).unwrap();
        let size = fs::metadata(&path).unwrap().len();
        println!("default-config checkpoint: {:.1} MB (storage reference is about 25 MB)", size as f64 / 1e6);
        assert!(size > 0);
    }

    #[test]
    fn synth_spec_validation() {
        assert!(SynthSpec::default().validate().is_ok());
        assert!(SynthSpec { n_points: 2, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { extent_m: 0.0, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { dropout: 1.5, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { noise_sigma: -0.1, ..SynthSpec::default() }.validate().is_err());
    }
}
