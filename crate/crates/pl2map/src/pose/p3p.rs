//! Minimal three-point absolute pose.
//!
//! Distance formulation: with s_i the unknown ranges from the camera
//! center to the three world points along their pixel bearings, the law
//! of cosines on each point pair gives three equations. Eliminating s1
//! and then the ratio u = s2/s1 leaves a quartic in v = s3/s1, solved
//! through the companion matrix and polished with Newton steps. Each
//! admissible (u, v) pair fixes the camera-frame points, and a
//! three-point rigid fit recovers the pose.

use super::PointPair;
use crate::geometry::{project, Intrinsics, Pose};
use nalgebra::{DMatrix, Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};

/// Two configurations are treated as one root when this close.
const ROOT_DEDUP: f64 = 1e-9;
/// Candidates must reproject their own minimal sample at least this
/// well; the minimal problem is interpolation, so this only measures
/// numerical error, never observation noise.
const MAX_SAMPLE_RESIDUAL_PX: f64 = 1e-6;

/// Candidate real roots of sum_i c[i] x^i (c may have leading zeros),
/// via the companion matrix of the trimmed polynomial. Eigenvalues are
/// taken by their real part and Newton-polished, so near-double roots
/// that drift slightly off the real axis are recovered too; spurious
/// entries are left for the geometric filters downstream.
fn real_root_candidates(coeffs: &[f64]) -> Vec<f64> {
    let maxabs = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if maxabs == 0.0 {
        return Vec::new();
    }
    let mut degree = coeffs.len() - 1;
    while degree > 0 && coeffs[degree].abs() < 1e-14 * maxabs {
        degree -= 1;
    }
    if degree == 0 {
        return Vec::new();
    }
    let lead = coeffs[degree];
    let mut companion = DMatrix::<f64>::zeros(degree, degree);
    for i in 0..degree {
        companion[(i, degree - 1)] = -coeffs[i] / lead;
        if i + 1 < degree {
            companion[(i + 1, i)] = 1.0;
        }
    }
    let Some(schur) = nalgebra::linalg::Schur::try_new(companion, 1e-12, 1000) else {
        return Vec::new();
    };
    let eigen = schur.complex_eigenvalues();
    let mut roots: Vec<f64> = Vec::new();
    for e in eigen.iter() {
        let r = polish(coeffs, e.re);
        if r.is_finite() && !roots.iter().any(|&x| (x - r).abs() <= ROOT_DEDUP * r.abs().max(1.0)) {
            roots.push(r);
        }
    }
    roots
}

/// A few Newton steps on the full-precision polynomial.
fn polish(coeffs: &[f64], mut x: f64) -> f64 {
    for _ in 0..8 {
        let mut p = 0.0;
        let mut dp = 0.0;
        for &c in coeffs.iter().rev() {
            dp = dp * x + p;
            p = p * x + c;
        }
        if dp.abs() < 1e-300 {
            break;
        }
        let step = p / dp;
        if !step.is_finite() {
            break;
        }
        x -= step;
    }
    x
}

fn bearing(pair: &PointPair, k: &Intrinsics) -> Vector3<f64> {
    Vector3::new(
        (pair.pixel.x - k.cx) / k.fx,
        (pair.pixel.y - k.cy) / k.fy,
        1.0,
    )
    .normalize()
}

/// Rigid transform taking the three world points onto the camera-frame
/// points; None when the triangle is too flat for a stable fit.
fn rigid_from_three(world: &[Vector3<f64>; 3], cam: &[Vector3<f64>; 3]) -> Option<Pose> {
    let wc = (world[0] + world[1] + world[2]) / 3.0;
    let cc = (cam[0] + cam[1] + cam[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (world[i] - wc) * (cam[i] - cc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let d = (v_t.transpose() * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let r = v_t.transpose() * correction * u.transpose();
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = cc - r * wc;
    Some(Pose::new(rotation, translation))
}

/// Up to four camera poses that place the three world points exactly on
/// the three pixel bearings. Degenerate input (collinear or coincident
/// world points) yields no solutions.
pub fn p3p_minimal(pairs: &[PointPair; 3], k: &Intrinsics) -> Vec<Pose> {
    let w = [pairs[0].point, pairs[1].point, pairs[2].point];
    let f = [bearing(&pairs[0], k), bearing(&pairs[1], k), bearing(&pairs[2], k)];

    let a2 = (w[1] - w[2]).norm_squared();
    let b2 = (w[0] - w[2]).norm_squared();
    let c2 = (w[0] - w[1]).norm_squared();
    let span = (w[1] - w[0]).cross(&(w[2] - w[0])).norm_squared();
    let scale2 = a2.max(b2).max(c2);
    if scale2 <= 0.0 || span < 1e-20 * scale2 * scale2 {
        return Vec::new();
    }

    let ca = f[1].dot(&f[2]);
    let cb = f[0].dot(&f[2]);
    let cg = f[0].dot(&f[1]);

    let a4 = a2 * a2 - 2.0 * a2 * b2 - 2.0 * a2 * c2 + b2 * b2 - 4.0 * b2 * c2 * ca * ca
        + 2.0 * b2 * c2
        + c2 * c2;
    let a3 = -4.0 * a2 * a2 * cb + 4.0 * a2 * b2 * ca * cg + 4.0 * a2 * b2 * cb
        + 8.0 * a2 * c2 * cb
        - 4.0 * b2 * b2 * ca * cg
        + 8.0 * b2 * c2 * ca * ca * cb
        + 4.0 * b2 * c2 * ca * cg
        - 4.0 * b2 * c2 * cb
        - 4.0 * c2 * c2 * cb;
    let a2c = 4.0 * a2 * a2 * cb * cb + 2.0 * a2 * a2 - 8.0 * a2 * b2 * ca * cb * cg
        - 4.0 * a2 * b2 * cg * cg
        - 8.0 * a2 * c2 * cb * cb
        - 4.0 * a2 * c2
        + 4.0 * b2 * b2 * ca * ca
        + 4.0 * b2 * b2 * cg * cg
        - 2.0 * b2 * b2
        - 4.0 * b2 * c2 * ca * ca
        - 8.0 * b2 * c2 * ca * cb * cg
        + 4.0 * c2 * c2 * cb * cb
        + 2.0 * c2 * c2;
    let a1 = -4.0 * a2 * a2 * cb + 4.0 * a2 * b2 * ca * cg + 8.0 * a2 * b2 * cb * cg * cg
        - 4.0 * a2 * b2 * cb
        + 8.0 * a2 * c2 * cb
        - 4.0 * b2 * b2 * ca * cg
        + 4.0 * b2 * c2 * ca * cg
        + 4.0 * b2 * c2 * cb
        - 4.0 * c2 * c2 * cb;
    let a0 = a2 * a2 - 4.0 * a2 * b2 * cg * cg + 2.0 * a2 * b2 - 2.0 * a2 * c2 + b2 * b2
        - 2.0 * b2 * c2
        + c2 * c2;

    let mut poses: Vec<Pose> = Vec::new();
    for v in real_root_candidates(&[a0, a1, a2c, a3, a4]) {
        if !(v > 0.0) {
            continue;
        }
        let q = 1.0 + v * v - 2.0 * v * cb;
        if !(q > 0.0) {
            continue;
        }
        let s1 = (b2 / q).sqrt();

        // u candidates from the linear elimination and from the pair
        // quadratic; the closed form cancels badly when two points are
        // close or their bearings nearly parallel, so both branches are
        // tried and reprojection decides.
        let mut u_candidates: Vec<f64> = Vec::new();
        let denom = 2.0 * b2 * (cg - v * ca);
        if denom.abs() > 1e-12 * b2 {
            u_candidates.push((b2 * (1.0 - v * v) + (a2 - c2) * q) / denom);
        }
        // b2 u^2 - 2 b2 cg u + (b2 - c2 q) = 0
        let disc = cg * cg - (b2 - c2 * q) / b2;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            u_candidates.push(cg + sq);
            u_candidates.push(cg - sq);
        }
        u_candidates.dedup_by(|x, y| (*x - *y).abs() <= ROOT_DEDUP * y.abs().max(1.0));

        for u in u_candidates {
            if !(u > 0.0) || !u.is_finite() {
                continue;
            }
            let cam = [f[0] * s1, f[1] * (u * s1), f[2] * (v * s1)];
            let Some(rough) = rigid_from_three(&w, &cam) else {
                continue;
            };
            let pose = refine_on_sample(rough, pairs, k);
            if sample_residual(&pose, pairs, k) >= MAX_SAMPLE_RESIDUAL_PX {
                continue;
            }
            let duplicate = poses.iter().any(|p| {
                p.angle_to(&pose) < 1e-7 && (p.translation - pose.translation).norm() < 1e-7
            });
            if !duplicate {
                poses.push(pose);
            }
        }
    }
    poses
}

/// Worst reprojection residual over the minimal sample, infinite when a
/// point lands behind the camera or cannot be projected.
fn sample_residual(pose: &Pose, pairs: &[PointPair; 3], k: &Intrinsics) -> f64 {
    let mut worst = 0.0f64;
    for pair in pairs {
        match project(pose, k, pair.point) {
            Ok((px, depth)) if depth > 0.0 => {
                worst = worst.max((px - pair.pixel).norm());
            }
            _ => return f64::INFINITY,
        }
    }
    worst
}

/// Newton iteration on the six sample residuals. The minimal problem is
/// square, so convergence is quadratic near a solution; the best iterate
/// is kept in case a step overshoots on an ill-conditioned triple.
fn refine_on_sample(init: Pose, pairs: &[PointPair; 3], k: &Intrinsics) -> Pose {
    let mut best = init;
    let mut best_score = sample_residual(&init, pairs, k);
    let mut pose = init;
    for _ in 0..3 {
        let mut jac = nalgebra::Matrix6::<f64>::zeros();
        let mut res = Vector6::<f64>::zeros();
        let mut ok = true;
        for (i, pair) in pairs.iter().enumerate() {
            match super::pixel_jacobian(&pose, k, pair.point) {
                Some((px, j)) => {
                    res[2 * i] = px.x - pair.pixel.x;
                    res[2 * i + 1] = px.y - pair.pixel.y;
                    jac.fixed_view_mut::<2, 6>(2 * i, 0).copy_from(&j);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }
        let rhs = -res;
        let Some(step) = jac.lu().solve(&rhs) else {
            break;
        };
        if !step.iter().all(|x| x.is_finite()) {
            break;
        }
        let dq = UnitQuaternion::from_scaled_axis(Vector3::new(step[0], step[1], step[2]));
        pose = Pose::new(
            UnitQuaternion::new_normalize((dq * pose.rotation).into_inner()),
            pose.translation + Vector3::new(step[3], step[4], step[5]),
        );
        let score = sample_residual(&pose, pairs, k);
        if score < best_score {
            best = pose;
            best_score = score;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vga() -> Intrinsics {
        Intrinsics::new(520.0, 520.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let rotation = if axis.norm() < 1e-6 {
            UnitQuaternion::identity()
        } else {
            UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                rng.gen_range(-3.0..3.0),
            )
        };
        Pose::new(rotation, Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ))
    }

    /// World points that sit comfortably in front of the camera.
    fn points_in_front(rng: &mut ChaCha8Rng, pose: &Pose, n: usize) -> Vec<Vector3<f64>> {
        let inv = pose.inverse();
        (0..n)
            .map(|_| {
                let cam = Vector3::new(
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(3.0..8.0),
                );
                inv.transform(cam)
            })
            .collect()
    }

    fn pairs_for(pose: &Pose, k: &Intrinsics, world: &[Vector3<f64>]) -> Vec<PointPair> {
        world
            .iter()
            .map(|&p| PointPair {
                pixel: project(pose, k, p).unwrap().0,
                point: p,
                reliability: 1.0,
            })
            .collect()
    }

    #[test]
    fn recovers_synthesized_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let k = vga();
        let mut found = 0;
        for _ in 0..500 {
            let pose = random_pose(&mut rng);
            let world = points_in_front(&mut rng, &pose, 3);
            let pairs = pairs_for(&pose, &k, &world);
            let pairs: [PointPair; 3] = [pairs[0], pairs[1], pairs[2]];
            let candidates = p3p_minimal(&pairs, &k);
            assert!(!candidates.is_empty(), "solver returned nothing for a clean triple");
            assert!(candidates.len() <= 4);
            let hit = candidates.iter().any(|c| {
                c.angle_to(&pose) < 1e-6 && (c.translation - pose.translation).norm() < 1e-6
            });
            if hit {
                found += 1;
            }
        }
        assert_eq!(found, 500, "true pose must always be among the candidates");
    }

    #[test]
    fn every_candidate_reprojects_the_triple() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let k = vga();
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let world = points_in_front(&mut rng, &pose, 3);
            let pairs = pairs_for(&pose, &k, &world);
            let arr: [PointPair; 3] = [pairs[0], pairs[1], pairs[2]];
            for cand in p3p_minimal(&arr, &k) {
                for pair in &arr {
                    let (px, depth) = project(&cand, &k, pair.point).unwrap();
                    assert!(depth > 0.0, "candidates must keep the points in front");
                    assert!(
                        (px - pair.pixel).norm() < 1e-4,
                        "candidate reprojection off by {}",
                        (px - pair.pixel).norm()
                    );
                }
            }
        }
    }

    #[test]
    fn collinear_points_give_no_solutions() {
        let k = vga();
        let a = Vector3::new(0.0, 0.0, 5.0);
        let d = Vector3::new(0.3, 0.1, 0.2);
        let pose = Pose::identity();
        let world = [a, a + d, a + 2.0 * d];
        let pairs: Vec<PointPair> = world
            .iter()
            .map(|&p| PointPair {
                pixel: project(&pose, &k, p).unwrap().0,
                point: p,
                reliability: 1.0,
            })
            .collect();
        let arr: [PointPair; 3] = [pairs[0], pairs[1], pairs[2]];
        assert!(p3p_minimal(&arr, &k).is_empty());
        // coincident points degenerate the same way
        let arr2 = [arr[0], arr[0], arr[2]];
        assert!(p3p_minimal(&arr2, &k).is_empty());
    }

}
