//! On-disk scene and checkpoint formats.
//!
//! A scene is a directory: a line-oriented text manifest naming each
//! image and its camera, plus one binary record per image. Binary
//! payloads are little-endian with explicit dtype codes in the header
//! and end with a SHA-256 trailer, so corruption surfaces as a checksum
//! error instead of garbage arrays. All writes land in a temp file that
//! is renamed into place.

use super::{DataError, ImageRecord, SceneDataset};
use crate::diffcore::Tensor;
use crate::geometry::{Intrinsics, Line3, Pose, Segment2};
use crate::losses::{LineLabel, PointLabel};
use crate::model::{AttentionKind, ModelConfig, ModelParams};
use nalgebra::{Quaternion, Unit, Vector2, Vector3};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "pl2map-scene 1";
const RECORD_MAGIC: [u8; 4] = *b"PLR1";
const RECORD_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: [u8; 4] = *b"PL2M";
const CHECKPOINT_VERSION: u32 = 1;
/// Dtype codes in binary headers are the element byte width.
const DTYPE_F32: u8 = 4;
const DTYPE_F64: u8 = 8;

/// Trained weights plus everything needed to rebuild the network that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub iteration: u64,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn layout_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::Layout { path: path.display().to_string(), detail: detail.into() }
}

/// Writes through a sibling temp file so a crash never leaves a torn
/// file at the destination.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let file_name = path
        .file_name()
        .ok_or_else(|| layout_err(path, "path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!("{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

// ---- little-endian encoding ---------------------------------------------

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn seal(mut bytes: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    bytes
}

/// Sequential reader over a checksummed payload. Construction verifies
/// the trailer, so parse code only ever sees intact bytes.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path, bytes: &'a [u8]) -> Result<Self, DataError> {
        if bytes.len() < 32 {
            return Err(layout_err(path, "file shorter than its checksum trailer"));
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(payload);
        if digest.as_slice() != trailer {
            return Err(DataError::Checksum { path: path.display().to_string() });
        }
        Ok(Reader { bytes: payload, pos: 0, path })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(layout_err(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn expect_magic(&mut self, expected: [u8; 4]) -> Result<(), DataError> {
        let got: [u8; 4] = self.take(4)?.try_into().unwrap();
        if got != expected {
            return Err(DataError::Magic {
                path: self.path.display().to_string(),
                expected,
                got,
            });
        }
        Ok(())
    }

    fn expect_version(&mut self, expected: u32) -> Result<(), DataError> {
        let got = self.u32()?;
        if got != expected {
            return Err(DataError::Version {
                path: self.path.display().to_string(),
                expected,
                got,
            });
        }
        Ok(())
    }

    fn expect_dtype(&mut self, expected: u8, what: &str) -> Result<(), DataError> {
        let got = self.u8()?;
        if got != expected {
            return Err(layout_err(
                self.path,
                format!("{what} dtype code {got}, this build reads {expected}"),
            ));
        }
        Ok(())
    }

    fn counted(&mut self, what: &str, limit: usize) -> Result<usize, DataError> {
        let n = self.u32()? as usize;
        if n > limit {
            return Err(layout_err(self.path, format!("{what} count {n} is implausible")));
        }
        Ok(n)
    }

    fn done(&self) -> Result<(), DataError> {
        if self.pos != self.bytes.len() {
            return Err(layout_err(
                self.path,
                format!("{} trailing bytes after payload", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

// ---- image records -------------------------------------------------------

fn encode_record(img: &ImageRecord) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&RECORD_MAGIC);
    put_u32(&mut out, RECORD_VERSION);
    out.push(DTYPE_F64);
    out.push(DTYPE_F32);
    // exact stored shapes, so empty images round-trip bit-for-bit
    let (trows, tcols) = img.line_tokens.first().map_or((0, 0), |m| m.shape());
    put_u32(&mut out, img.n_points() as u32);
    put_u32(&mut out, img.n_lines() as u32);
    put_u32(&mut out, img.descriptors.cols() as u32);
    put_u32(&mut out, trows as u32);
    put_u32(&mut out, tcols as u32);

    let q = img.pose.rotation.quaternion();
    for v in [q.w, q.i, q.j, q.k] {
        put_f64(&mut out, v);
    }
    for v in img.pose.translation.iter() {
        put_f64(&mut out, *v);
    }
    for kp in &img.keypoints {
        put_f64(&mut out, kp.x);
        put_f64(&mut out, kp.y);
    }
    for v in img.descriptors.data() {
        put_f32(&mut out, *v);
    }
    for label in &img.point_labels {
        for v in label.target.iter() {
            put_f64(&mut out, *v);
        }
        out.push(label.reliable as u8);
    }
    for seg in &img.line_segments {
        for v in [seg.p.x, seg.p.y, seg.q.x, seg.q.y] {
            put_f64(&mut out, v);
        }
    }
    for tokens in &img.line_tokens {
        for v in tokens.data() {
            put_f32(&mut out, *v);
        }
    }
    for label in &img.line_labels {
        for v in [
            label.target.p.x, label.target.p.y, label.target.p.z,
            label.target.q.x, label.target.q.y, label.target.q.z,
        ] {
            put_f64(&mut out, v);
        }
        out.push(label.reliable as u8);
    }
    seal(out)
}

fn read_flag(r: &mut Reader, what: &str) -> Result<bool, DataError> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(layout_err(r.path, format!("{what} reliability flag {other}, expected 0 or 1"))),
    }
}

fn decode_record(
    path: &Path,
    bytes: &[u8],
    id: String,
    intrinsics: Intrinsics,
) -> Result<ImageRecord, DataError> {
    let mut r = Reader::open(path, bytes)?;
    r.expect_magic(RECORD_MAGIC)?;
    r.expect_version(RECORD_VERSION)?;
    r.expect_dtype(DTYPE_F64, "geometry")?;
    r.expect_dtype(DTYPE_F32, "feature")?;
    let n = r.counted("keypoint", 1 << 24)?;
    let m = r.counted("line", 1 << 24)?;
    let d = r.counted("descriptor dim", 1 << 20)?;
    let trows = r.counted("token row", 1 << 20)?;
    let tcols = r.counted("token col", 1 << 20)?;

    let q = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
    let tr = [r.f64()?, r.f64()?, r.f64()?];
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !((norm - 1.0).abs() < 1e-6) {
        return Err(layout_err(path, format!("pose quaternion norm {norm}, expected unit")));
    }
    // bit-preserving: the stored quaternion is already unit, renormalizing
    // here would perturb the round trip
    let pose = Pose::new(
        Unit::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3])),
        Vector3::new(tr[0], tr[1], tr[2]),
    );

    let mut keypoints = Vec::with_capacity(n);
    for _ in 0..n {
        keypoints.push(Vector2::new(r.f64()?, r.f64()?));
    }
    let mut desc = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        desc.push(r.f32()?);
    }
    let descriptors = Tensor::new(n, d, desc)
        .map_err(|e| layout_err(path, format!("descriptor block: {e}")))?;
    let mut point_labels = Vec::with_capacity(n);
    for _ in 0..n {
        let target = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let reliable = read_flag(&mut r, "point")?;
        point_labels.push(PointLabel { target, reliable });
    }
    let mut line_segments = Vec::with_capacity(m);
    for _ in 0..m {
        let p = Vector2::new(r.f64()?, r.f64()?);
        let q2 = Vector2::new(r.f64()?, r.f64()?);
        line_segments.push(Segment2 { p, q: q2 });
    }
    let mut line_tokens = Vec::with_capacity(m);
    for _ in 0..m {
        let mut data = Vec::with_capacity(trows * tcols);
        for _ in 0..trows * tcols {
            data.push(r.f32()?);
        }
        line_tokens.push(
            Tensor::new(trows, tcols, data)
                .map_err(|e| layout_err(path, format!("token block: {e}")))?,
        );
    }
    let mut line_labels = Vec::with_capacity(m);
    for _ in 0..m {
        let p = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let q3 = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let reliable = read_flag(&mut r, "line")?;
        line_labels.push(LineLabel { target: Line3 { p, q: q3 }, reliable });
    }
    r.done()?;

    Ok(ImageRecord {
        id,
        pose,
        intrinsics,
        keypoints,
        descriptors,
        point_labels,
        line_segments,
        line_tokens,
        line_labels,
    })
}

// ---- scene directory -----------------------------------------------------

/// Writes a scene directory: `manifest.txt` plus one `.plr` record per
/// image. Existing files with the same names are replaced.
pub fn save_scene(scene: &SceneDataset, dir: &Path) -> Result<(), DataError> {
    scene.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    manifest.push_str(&format!("descriptor_dim {}\n", scene.descriptor_dim));
    manifest.push_str(&format!("tokens_per_line {}\n", scene.tokens_per_line));
    for (i, img) in scene.images.iter().enumerate() {
        if img.id.chars().any(|c| c.is_whitespace()) || img.id.is_empty() {
            return Err(layout_err(
                &dir.join(MANIFEST_NAME),
                format!("image id {:?} must be non-empty without whitespace", img.id),
            ));
        }
        let file = format!("{i:05}.plr");
        let k = &img.intrinsics;
        manifest.push_str(&format!(
            "image {} {} {} {} {} {} {} {}\n",
            img.id, file, k.fx, k.fy, k.cx, k.cy, k.width, k.height
        ));
        write_atomic(&dir.join(&file), &encode_record(img))?;
    }
    write_atomic(&dir.join(MANIFEST_NAME), manifest.as_bytes())
}

fn manifest_err(path: &Path, line: usize, detail: impl Into<String>) -> DataError {
    DataError::Manifest { path: path.display().to_string(), line, detail: detail.into() }
}

/// Loads and validates a scene directory written by [`save_scene`]. The
/// returned dataset already passed every structural invariant, including
/// token counts and finiteness per image.
pub fn load_scene(dir: &Path) -> Result<SceneDataset, DataError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| manifest_err(&manifest_path, 1, "empty manifest"))?;
    if header.trim() != MANIFEST_HEADER {
        return Err(manifest_err(
            &manifest_path,
            1,
            format!("bad header {header:?}, expected {MANIFEST_HEADER:?}"),
        ));
    }

    let mut descriptor_dim: Option<usize> = None;
    let mut tokens_per_line: Option<usize> = None;
    let mut images = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse = |what: &str, s: &str| -> Result<f64, DataError> {
            s.parse::<f64>()
                .map_err(|_| manifest_err(&manifest_path, lineno, format!("bad {what} {s:?}")))
        };
        match fields[0] {
            "descriptor_dim" | "tokens_per_line" => {
                if fields.len() != 2 {
                    return Err(manifest_err(&manifest_path, lineno, "expected one value"));
                }
                let v: usize = fields[1].parse().map_err(|_| {
                    manifest_err(&manifest_path, lineno, format!("bad count {:?}", fields[1]))
                })?;
                if fields[0] == "descriptor_dim" {
                    descriptor_dim = Some(v);
                } else {
                    tokens_per_line = Some(v);
                }
            }
            "image" => {
                if fields.len() != 9 {
                    return Err(manifest_err(
                        &manifest_path,
                        lineno,
                        format!("image line has {} fields, expected 9", fields.len()),
                    ));
                }
                let id = fields[1].to_string();
                if !seen.insert(id.clone()) {
                    return Err(manifest_err(&manifest_path, lineno, format!("duplicate image id {id:?}")));
                }
                let file = fields[2];
                let fx = parse("fx", fields[3])?;
                let fy = parse("fy", fields[4])?;
                let cx = parse("cx", fields[5])?;
                let cy = parse("cy", fields[6])?;
                let width: u32 = fields[7].parse().map_err(|_| {
                    manifest_err(&manifest_path, lineno, format!("bad width {:?}", fields[7]))
                })?;
                let height: u32 = fields[8].parse().map_err(|_| {
                    manifest_err(&manifest_path, lineno, format!("bad height {:?}", fields[8]))
                })?;
                let intrinsics = Intrinsics::new(fx, fy, cx, cy, width, height)?;
                let record_path = dir.join(file);
                let bytes = fs::read(&record_path).map_err(|e| io_err(&record_path, e))?;
                images.push(decode_record(&record_path, &bytes, id, intrinsics)?);
            }
            other => {
                return Err(manifest_err(
                    &manifest_path,
                    lineno,
                    format!("unknown directive {other:?}"),
                ));
            }
        }
    }

    let scene = SceneDataset {
        descriptor_dim: descriptor_dim
            .ok_or_else(|| manifest_err(&manifest_path, 0, "missing descriptor_dim"))?,
        tokens_per_line: tokens_per_line
            .ok_or_else(|| manifest_err(&manifest_path, 0, "missing tokens_per_line"))?,
        images,
    };
    scene.validate()?;
    Ok(scene)
}

// ---- checkpoints ---------------------------------------------------------

fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let c = &ckpt.config;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, c.descriptor_dim as u32);
    put_u32(&mut out, c.heads as u32);
    put_u32(&mut out, c.line_tokens as u32);
    put_u32(&mut out, c.encoder_expansion as u32);
    put_f64(&mut out, c.beta);
    put_u32(&mut out, c.pattern.len() as u32);
    for kind in &c.pattern {
        out.push(match kind {
            AttentionKind::SelfAttn => 0,
            AttentionKind::CrossAttn => 1,
        });
    }
    for chain in [&c.point_head_hidden, &c.line_head_hidden] {
        put_u32(&mut out, chain.len() as u32);
        for &w in chain {
            put_u32(&mut out, w as u32);
        }
    }
    put_u64(&mut out, ckpt.iteration);
    out.push(DTYPE_F32);
    let tensors = ckpt.params.flatten();
    put_u32(&mut out, tensors.len() as u32);
    for t in &tensors {
        put_u32(&mut out, t.rows() as u32);
        put_u32(&mut out, t.cols() as u32);
        for v in t.data() {
            put_f32(&mut out, *v);
        }
    }
    seal(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), DataError> {
    write_atomic(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader::open(path, &bytes)?;
    r.expect_magic(CHECKPOINT_MAGIC)?;
    r.expect_version(CHECKPOINT_VERSION)?;
    let descriptor_dim = r.counted("descriptor dim", 1 << 20)?;
    let heads = r.counted("head", 1 << 10)?;
    let line_tokens = r.counted("token", 1 << 20)?;
    let encoder_expansion = r.counted("expansion", 1 << 10)?;
    let beta = r.f64()?;
    let pattern_len = r.counted("attention layer", 1 << 10)?;
    let mut pattern = Vec::with_capacity(pattern_len);
    for _ in 0..pattern_len {
        pattern.push(match r.u8()? {
            0 => AttentionKind::SelfAttn,
            1 => AttentionKind::CrossAttn,
            other => {
                return Err(layout_err(path, format!("attention kind code {other}")));
            }
        });
    }
    let mut chains = [Vec::new(), Vec::new()];
    for chain in &mut chains {
        let len = r.counted("head width", 1 << 10)?;
        for _ in 0..len {
            chain.push(r.counted("head width", 1 << 24)?);
        }
    }
    let [point_head_hidden, line_head_hidden] = chains;
    let config = ModelConfig {
        descriptor_dim,
        heads,
        line_tokens,
        pattern,
        point_head_hidden,
        line_head_hidden,
        beta,
        encoder_expansion,
    };
    config
        .validate()
        .map_err(|e| layout_err(path, format!("stored config invalid: {e}")))?;

    let iteration = r.u64()?;
    r.expect_dtype(DTYPE_F32, "parameter")?;
    let count = r.counted("tensor", 1 << 20)?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.counted("row", 1 << 24)?;
        let cols = r.counted("col", 1 << 24)?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f32()?);
        }
        tensors.push(
            Tensor::new(rows, cols, data)
                .map_err(|e| layout_err(path, format!("parameter tensor: {e}")))?,
        );
    }
    r.done()?;

    let mut iter = tensors.into_iter();
    let params = ModelParams::from_tensors(&config, &mut iter)
        .map_err(|e| layout_err(path, format!("parameters do not match config: {e}")))?;
    if iter.next().is_some() {
        return Err(layout_err(path, "extra parameter tensors beyond the config schema"));
    }
    Ok(Checkpoint { config, params, iteration })
}
