//! SE3 camera geometry: projection, reprojection residuals for points and
//! line segments, validity masking, and augmentation-consistent camera
//! adjustments.
//!
//! Pose convention is world-to-camera throughout: `x_cam = R * x_world + t`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};

/// Depth below which a camera-frame point counts as at infinity for the
/// pinhole division.
pub const PROJECTION_EPS: f64 = 1e-9;
/// Valid label depth range in meters (10 cm to 1 km in front of the camera).
pub const DEPTH_MIN_M: f64 = 0.1;
pub const DEPTH_MAX_M: f64 = 1000.0;
/// Reprojection residuals at or above this many pixels mark a label invalid.
pub const MAX_VALID_RESIDUAL_PX: f64 = 1000.0;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("projection at infinity: |z| = {z:.3e} < 1e-9")]
    ProjectionAtInfinity { z: f64 },
    #[error("degenerate 2D segment: endpoint distance {len:.3e} px")]
    DegenerateSegment { len: f64 },
    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(String),
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds from raw wxyz quaternion components (renormalized) and a
    /// translation. Used when reading serialized poses.
    pub fn from_wxyz_txyz(q: [f64; 4], t: [f64; 3]) -> Self {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        Self {
            rotation: UnitQuaternion::new_normalize(quat),
            translation: Vector3::new(t[0], t[1], t[2]),
        }
    }

    /// Camera looking from `center` toward `target`; `up` breaks the roll
    /// ambiguity (image y runs along -up).
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - center).normalize();
        let up = if up.cross(&z).norm() < 1e-6 {
            // up parallel to the optical axis; pick any transverse hint
            if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() }
        } else {
            up
        };
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::new(x.x, x.y, x.z, y.x, y.y, y.z, z.x, z.y, z.z);
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        Self { rotation, translation: -(rotation * center) }
    }

    pub fn transform(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self` applied after `rhs`: (self ∘ rhs)(x) = self(rhs(x)).
    /// The quaternion is renormalized so long chains stay unit.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        let q = self.rotation.into_inner() * rhs.rotation.into_inner();
        Pose {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose { rotation: inv, translation: -(inv * self.translation) }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera position in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Relative rotation angle to another pose, radians.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        (self.rotation.inverse() * other.rotation).angle()
    }
}

/// Pinhole camera without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::BadIntrinsics(format!("focal ({}, {})", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx <= self.width as f64 && self.cy >= 0.0 && self.cy <= self.height as f64) {
            return Err(GeometryError::BadIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, px: Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x < self.width as f64 && px.y >= 0.0 && px.y < self.height as f64
    }
}

/// 3D line as its two endpoints. Untrained predictions may be degenerate
/// (P = Q); nothing here asserts otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line3 {
    pub p: Vector3<f64>,
    pub q: Vector3<f64>,
}

/// 2D observed segment, pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment2 {
    pub p: Vector2<f64>,
    pub q: Vector2<f64>,
}

/// Pinhole projection. Returns the pixel and the camera-frame depth; the
/// depth is reported even when non-positive so validity masking can see it.
pub fn project(pose: &Pose, k: &Intrinsics, p: Vector3<f64>) -> Result<(Vector2<f64>, f64), GeometryError> {
    let pc = pose.transform(p);
    if pc.z.abs() < PROJECTION_EPS {
        return Err(GeometryError::ProjectionAtInfinity { z: pc.z });
    }
    let px = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
    Ok((px, pc.z))
}

/// π(T, P) − u.
pub fn point_residual(
    pose: &Pose,
    k: &Intrinsics,
    p: Vector3<f64>,
    u: Vector2<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let (px, _) = project(pose, k, p)?;
    Ok(px - u)
}

/// Perpendicular distances (pixels, unsigned) from the projections of the
/// 3D endpoints to the infinite line supporting the observed 2D segment.
/// The endpoints of the 3D line are free to slide along the support, so
/// the 2D segment length never constrains the 3D length.
pub fn line_distance(
    pose: &Pose,
    k: &Intrinsics,
    line: &Line3,
    seg: &Segment2,
) -> Result<(f64, f64), GeometryError> {
    let dir = seg.q - seg.p;
    let len = dir.norm();
    if len <= 1e-6 {
        return Err(GeometryError::DegenerateSegment { len });
    }
    let n = Vector2::new(-dir.y, dir.x) / len;
    let (pp, _) = project(pose, k, line.p)?;
    let (pq, _) = project(pose, k, line.q)?;
    Ok(((n.dot(&(pp - seg.p))).abs(), (n.dot(&(pq - seg.p))).abs()))
}

/// Label validity for a point: depth within [0.1 m, 1000 m] and residual
/// under 1000 px. Unprojectable points are invalid, never an error.
pub fn point_validity(pose: &Pose, k: &Intrinsics, p: Vector3<f64>, u: Vector2<f64>) -> bool {
    match project(pose, k, p) {
        Ok((px, depth)) => {
            (DEPTH_MIN_M..=DEPTH_MAX_M).contains(&depth) && (px - u).norm() < MAX_VALID_RESIDUAL_PX
        }
        Err(_) => false,
    }
}

/// Label validity for a line: both endpoint depths within bounds and the
/// summed perpendicular distance ψ = d_P + d_Q under 1000 px.
pub fn line_validity(pose: &Pose, k: &Intrinsics, line: &Line3, seg: &Segment2) -> bool {
    let depth_ok = |p: Vector3<f64>| {
        let z = pose.transform(p).z;
        (DEPTH_MIN_M..=DEPTH_MAX_M).contains(&z)
    };
    if !depth_ok(line.p) || !depth_ok(line.q) {
        return false;
    }
    match line_distance(pose, k, line, seg) {
        Ok((dp, dq)) => dp + dq < MAX_VALID_RESIDUAL_PX,
        Err(_) => false,
    }
}

/// Training-time camera adjustment matching a 2D image transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CameraAugment {
    /// In-plane rotation about the principal point, radians.
    Rotate { radians: f64 },
    /// Uniform rescale about the image origin.
    Scale { factor: f64 },
}

/// Adjusts pose/intrinsics so that projections move exactly like the
/// corresponding 2D transform of the image plane: scaling multiplies the
/// intrinsics, rotation pre-composes the pose with R_z(θ) in the camera
/// frame (assumes square pixels, fx = fy, for the rotation case).
pub fn augment_camera(pose: &Pose, k: &Intrinsics, op: CameraAugment) -> (Pose, Intrinsics) {
    match op {
        CameraAugment::Rotate { radians } => {
            let rz = Pose::new(
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), radians),
                Vector3::zeros(),
            );
            (rz.compose(pose), *k)
        }
        CameraAugment::Scale { factor } => {
            let k2 = Intrinsics {
                fx: k.fx * factor,
                fy: k.fy * factor,
                cx: k.cx * factor,
                cy: k.cy * factor,
                width: (k.width as f64 * factor).round().max(1.0) as u32,
                height: (k.height as f64 * factor).round().max(1.0) as u32,
            };
            (*pose, k2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn vga() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        let angle = rng.gen::<f64>() * std::f64::consts::PI;
        let rotation = if axis.norm() < 1e-9 {
            UnitQuaternion::identity()
        } else {
            UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
        };
        let translation = Vector3::new(
            rng.gen::<f64>() * 4.0 - 2.0,
            rng.gen::<f64>() * 4.0 - 2.0,
            rng.gen::<f64>() * 4.0 - 2.0,
        );
        Pose::new(rotation, translation)
    }

    /// World point whose camera-frame depth lies in [1, 9].
    fn random_point_in_front(rng: &mut impl Rng, pose: &Pose) -> Vector3<f64> {
        let pc = Vector3::new(
            rng.gen::<f64>() * 4.0 - 2.0,
            rng.gen::<f64>() * 4.0 - 2.0,
            1.0 + rng.gen::<f64>() * 8.0,
        );
        pose.inverse().transform(pc)
    }

    #[test]
    fn project_on_optical_axis() {
        let (px, depth) = project(&Pose::identity(), &vga(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((px - Vector2::new(320.0, 240.0)).norm() < 1e-12);
        assert_eq!(depth, 1.0);
    }

    #[test]
    fn project_off_axis() {
        let (px, depth) = project(&Pose::identity(), &vga(), Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert!((px - Vector2::new(570.0, 240.0)).norm() < 1e-12);
        assert_eq!(depth, 2.0);
    }

    #[test]
    fn project_rejects_points_at_infinity() {
        let r = project(&Pose::identity(), &vga(), Vector3::new(1.0, 1.0, 1e-12));
        assert!(matches!(r, Err(GeometryError::ProjectionAtInfinity { .. })));
    }

    #[test]
    fn projected_pixel_back_projects_through_the_point() {
        // ray-membership oracle: the ray through the pixel must contain P
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = vga();
        for _ in 0..500 {
            let pose = random_pose(&mut rng);
            let p = random_point_in_front(&mut rng, &pose);
            let (px, depth) = project(&pose, &k, p).unwrap();
            assert!(depth > 0.0);
            let dir_cam = Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0);
            let dir_world = (pose.rotation.inverse() * dir_cam).normalize();
            let c = pose.camera_center();
            let off_ray = (p - c).cross(&dir_world).norm();
            assert!(off_ray < 1e-9, "point {:.3e} off its viewing ray", off_ray);
            assert!((p - c).dot(&dir_world) > 0.0, "point behind the camera");
        }
    }

    #[test]
    fn residual_zero_at_exact_projection() {
        let pose = Pose::identity();
        let k = vga();
        let p = Vector3::new(0.3, -0.2, 2.0);
        let (px, _) = project(&pose, &k, p).unwrap();
        let r = point_residual(&pose, &k, p, px).unwrap();
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn residual_matches_similar_triangles() {
        // 1 m lateral offset at 1 m depth under f=500 is 500 px
        let r = point_residual(
            &Pose::identity(),
            &vga(),
            Vector3::new(1.0, 0.0, 1.0),
            Vector2::new(320.0, 240.0),
        )
        .unwrap();
        assert!((r.x - 500.0).abs() < 1e-12 && r.y.abs() < 1e-12);
    }

    #[test]
    fn residual_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = vga();
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let p = random_point_in_front(&mut rng, &pose);
            let u = Vector2::new(rng.gen::<f64>() * 640.0, rng.gen::<f64>() * 480.0);
            // analytic: d||r||^2/dP = 2 J^T r, J = d(pixel)/d(cam) * R
            let pc = pose.transform(p);
            let res = point_residual(&pose, &k, p, u).unwrap();
            let jpix = nalgebra::Matrix2x3::new(
                k.fx / pc.z, 0.0, -k.fx * pc.x / (pc.z * pc.z),
                0.0, k.fy / pc.z, -k.fy * pc.y / (pc.z * pc.z),
            );
            let j = jpix * pose.rotation_matrix();
            let analytic = 2.0 * j.transpose() * res;
            let h = 1e-6;
            for axis in 0..3 {
                let mut dp = Vector3::zeros();
                dp[axis] = h;
                let fp = point_residual(&pose, &k, p + dp, u).unwrap().norm_squared();
                let fm = point_residual(&pose, &k, p - dp, u).unwrap().norm_squared();
                let numeric = (fp - fm) / (2.0 * h);
                let rel = (analytic[axis] - numeric).abs() / analytic[axis].abs().max(numeric.abs()).max(1.0);
                assert!(rel < 1e-6, "axis {} analytic {} numeric {}", axis, analytic[axis], numeric);
            }
        }
    }

    #[test]
    fn line_distance_zero_on_support() {
        let pose = Pose::identity();
        let k = vga();
        // endpoints on the ray span whose projections sit on the segment's support
        let line = Line3 { p: Vector3::new(0.0, 0.0, 2.0), q: Vector3::new(1.0, 0.0, 2.0) };
        let seg = Segment2 { p: Vector2::new(300.0, 240.0), q: Vector2::new(600.0, 240.0) };
        let (dp, dq) = line_distance(&pose, &k, &line, &seg).unwrap();
        assert!(dp < 1e-12 && dq < 1e-12);
    }

    #[test]
    fn line_distance_to_x_axis_segment() {
        // identity camera with f=1, c=0 maps (x, y, 1) to (x, y)
        let k = Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 20, height: 20 };
        let line = Line3 { p: Vector3::new(2.0, 3.0, 1.0), q: Vector3::new(8.0, -4.0, 1.0) };
        let seg = Segment2 { p: Vector2::new(0.0, 0.0), q: Vector2::new(10.0, 0.0) };
        let (dp, dq) = line_distance(&Pose::identity(), &k, &line, &seg).unwrap();
        assert!((dp - 3.0).abs() < 1e-12 && (dq - 4.0).abs() < 1e-12);
        assert!((dp + dq - 7.0).abs() < 1e-12);
    }

    #[test]
    fn line_distance_matches_cross_product_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = vga();
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let line = Line3 {
                p: random_point_in_front(&mut rng, &pose),
                q: random_point_in_front(&mut rng, &pose),
            };
            let seg = Segment2 {
                p: Vector2::new(rng.gen::<f64>() * 640.0, rng.gen::<f64>() * 480.0),
                q: Vector2::new(rng.gen::<f64>() * 640.0, rng.gen::<f64>() * 480.0),
            };
            if (seg.p - seg.q).norm() <= 1e-6 {
                continue;
            }
            let (dp, dq) = line_distance(&pose, &k, &line, &seg).unwrap();
            let cross2 = |a: Vector2<f64>, b: Vector2<f64>| a.x * b.y - a.y * b.x;
            let reference = |x: Vector2<f64>| {
                cross2(seg.q - seg.p, x - seg.p).abs() / (seg.q - seg.p).norm()
            };
            let (pp, _) = project(&pose, &k, line.p).unwrap();
            let (pq, _) = project(&pose, &k, line.q).unwrap();
            assert!((dp - reference(pp)).abs() < 1e-9);
            assert!((dq - reference(pq)).abs() < 1e-9);
            // swapping observed endpoints must not change the distances
            let swapped = Segment2 { p: seg.q, q: seg.p };
            let (dp2, dq2) = line_distance(&pose, &k, &line, &swapped).unwrap();
            assert!((dp - dp2).abs() < 1e-9 && (dq - dq2).abs() < 1e-9);
        }
    }

    #[test]
    fn line_distance_rejects_degenerate_segment() {
        let seg = Segment2 { p: Vector2::new(5.0, 5.0), q: Vector2::new(5.0, 5.0) };
        let line = Line3 { p: Vector3::new(0.0, 0.0, 2.0), q: Vector3::new(1.0, 0.0, 2.0) };
        let r = line_distance(&Pose::identity(), &vga(), &line, &seg);
        assert!(matches!(r, Err(GeometryError::DegenerateSegment { .. })));
    }

    #[test]
    fn validity_depth_and_residual_bounds() {
        let pose = Pose::identity();
        let k = vga();
        // too close: 5 cm
        let near = Vector3::new(0.0, 0.0, 0.05);
        let (px, _) = project(&pose, &k, near).unwrap();
        assert!(!point_validity(&pose, &k, near, px));
        // comfortable depth, small residual
        let good = Vector3::new(0.0, 0.0, 1.0);
        let (px, _) = project(&pose, &k, good).unwrap();
        assert!(point_validity(&pose, &k, good, px + Vector2::new(10.0, 0.0)));
        // depth fine, residual 1500 px
        assert!(!point_validity(&pose, &k, Vector3::new(0.0, 0.0, 2.0), Vector2::new(320.0 + 1500.0, 240.0)));
        // behind the camera
        assert!(!point_validity(&pose, &k, Vector3::new(0.0, 0.0, -1.0), px));
    }

    #[test]
    fn validity_is_monotone_in_residual_and_depth() {
        let pose = Pose::identity();
        let k = vga();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let p = Vector3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                0.2 + rng.gen::<f64>() * 5.0,
            );
            let (px, _) = project(&pose, &k, p).unwrap();
            let off = Vector2::new(rng.gen::<f64>() * 2000.0 - 1000.0, rng.gen::<f64>() * 2000.0 - 1000.0);
            if point_validity(&pose, &k, p, px + off) {
                // shrinking the residual keeps validity
                assert!(point_validity(&pose, &k, p, px + off * 0.5));
                assert!(point_validity(&pose, &k, p, px));
            }
        }
    }

    #[test]
    fn pose_group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let ident = a.inverse().compose(&a);
            assert!(ident.rotation.angle() < 1e-9);
            assert!(ident.translation.norm() < 1e-9);
            assert!((a.rotation.norm() - 1.0).abs() < 1e-9);
            // associativity on a probe point
            let p = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let left = a.compose(&b).compose(&c).transform(p);
            let right = a.compose(&b.compose(&c)).transform(p);
            assert!((left - right).norm() < 1e-9);
        }
    }

    #[test]
    fn augment_identity_is_identity() {
        let pose = Pose::identity();
        let k = vga();
        let (p2, k2) = augment_camera(&pose, &k, CameraAugment::Scale { factor: 1.0 });
        assert_eq!(p2, pose);
        assert_eq!(k2, k);
        let (p3, k3) = augment_camera(&pose, &k, CameraAugment::Rotate { radians: 0.0 });
        assert!(p3.angle_to(&pose) < 1e-12);
        assert_eq!(k3, k);
    }

    #[test]
    fn augment_scale_scales_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = vga();
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let p = random_point_in_front(&mut rng, &pose);
            let s = 0.66 + rng.gen::<f64>() * (1.5 - 0.66);
            let (pose2, k2) = augment_camera(&pose, &k, CameraAugment::Scale { factor: s });
            let (px, _) = project(&pose, &k, p).unwrap();
            let (px2, _) = project(&pose2, &k2, p).unwrap();
            assert!((px2 - px * s).norm() < 1e-9, "scale consistency failed");
        }
    }

    #[test]
    fn augment_rotation_rotates_projections_about_principal_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let k = vga();
        let c = Vector2::new(k.cx, k.cy);
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let p = random_point_in_front(&mut rng, &pose);
            let theta = (rng.gen::<f64>() - 0.5) * 2.0 * 30f64.to_radians();
            let (pose2, k2) = augment_camera(&pose, &k, CameraAugment::Rotate { radians: theta });
            let (px, _) = project(&pose, &k, p).unwrap();
            let (px2, _) = project(&pose2, &k2, p).unwrap();
            let rot = nalgebra::Rotation2::new(theta);
            let expected = c + rot * (px - c);
            assert!((px2 - expected).norm() < 1e-6, "rotation consistency failed: {:?} vs {:?}", px2, expected);
        }
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let c = Vector3::new(rng.gen::<f64>() * 10.0 - 5.0, rng.gen::<f64>() * 10.0 - 5.0, rng.gen::<f64>() * 10.0 - 5.0);
            let t = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            if (c - t).norm() < 1e-3 {
                continue;
            }
            let pose = Pose::look_at(c, t, Vector3::z());
            let tc = pose.transform(t);
            assert!(tc.x.abs() < 1e-9 && tc.y.abs() < 1e-9, "target off axis: {:?}", tc);
            assert!(tc.z > 0.0, "target behind camera");
            assert!((pose.camera_center() - c).norm() < 1e-9);
        }
    }
}
