//! Stereo triangulation, P3P resection, and pose error metrics.
//!
//! Triangulation assumes a rectified left-right pair, so depth comes from
//! horizontal disparity alone. The P3P solver follows the classical
//! three-point resection: with camera-point distances s2 = u s1, s3 = v s1,
//! the law-of-cosines constraints eliminate to a quartic in v. The quartic
//! coefficients are assembled by explicit polynomial arithmetic and its
//! roots are taken from companion-matrix eigenvalues with a Newton polish.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::matching::RansacConfig;
use crate::rng::Rng;
use crate::tensor::Keypoint;

/// Rectified pinhole stereo rig.
#[derive(Debug, Clone)]
pub struct PinholeStereo {
    /// Focal length in pixels (shared by both axes).
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Left-right baseline in meters.
    pub baseline: f64,
}

impl PinholeStereo {
    pub fn new(focal: f64, cx: f64, cy: f64, baseline: f64) -> Result<Self> {
        if focal <= 0.0 || baseline <= 0.0 {
            return Err(Error::invalid("focal and baseline must be positive"));
        }
        Ok(PinholeStereo {
            focal,
            cx,
            cy,
            baseline,
        })
    }

    /// Unit bearing vector of a pixel in the left camera.
    pub fn bearing(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.focal, (y - self.cy) / self.focal, 1.0).normalize()
    }

    /// Project a camera-frame point to left-camera pixels. `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 1e-9 {
            return None;
        }
        Some((
            self.focal * p.x / p.z + self.cx,
            self.focal * p.y / p.z + self.cy,
        ))
    }
}

/// Rigid camera-from-world transform: `x_cam = R x_world + t`.
#[derive(Debug, Clone)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Orthonormality and orientation check, tolerance 1e-9.
    pub fn is_valid_rotation(&self) -> bool {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).norm();
        err < 1e-9 && (r.determinant() - 1.0).abs() < 1e-9
    }

    /// One line of 12 decimals: row-major rotation then translation.
    pub fn to_line(&self) -> String {
        let mut parts = Vec::with_capacity(12);
        for r in 0..3 {
            for c in 0..3 {
                parts.push(format!("{}", self.rotation[(r, c)]));
            }
        }
        for i in 0..3 {
            parts.push(format!("{}", self.translation[i]));
        }
        parts.join(" ")
    }

    pub fn from_line(line: &str) -> Result<Pose> {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::format(format!("bad pose entry {t:?}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 12 {
            return Err(Error::format(format!(
                "pose line must hold 12 decimals, got {}",
                vals.len()
            )));
        }
        Ok(Pose {
            rotation: Matrix3::from_row_slice(&vals[0..9]),
            translation: Vector3::new(vals[9], vals[10], vals[11]),
        })
    }
}

/// Rectified-stereo triangulation: `Z = f B / d` with `d = x_left - x_right`.
pub fn triangulate_stereo(
    kp_left: &Keypoint,
    kp_right: &Keypoint,
    cam: &PinholeStereo,
) -> Result<Vector3<f64>> {
    if (kp_left.y - kp_right.y).abs() > 2.0 {
        return Err(Error::invalid(format!(
            "vertical mismatch {:.3} px exceeds rectification tolerance",
            (kp_left.y - kp_right.y).abs()
        )));
    }
    let d = kp_left.x - kp_right.x;
    if d <= 0.1 {
        return Err(Error::invalid(format!("non-positive or tiny disparity {d}")));
    }
    let z = cam.focal * cam.baseline / d;
    Ok(Vector3::new(
        (kp_left.x - cam.cx) * z / cam.focal,
        (kp_left.y - cam.cy) * z / cam.focal,
        z,
    ))
}

// ---- small dense polynomial helpers (ascending coefficients) ----

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &mut Vec<f64>, b: &[f64], scale: f64) {
    if b.len() > a.len() {
        a.resize(b.len(), 0.0);
    }
    for (i, &y) in b.iter().enumerate() {
        a[i] += scale * y;
    }
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn poly_deriv(p: &[f64]) -> Vec<f64> {
    p.iter()
        .enumerate()
        .skip(1)
        .map(|(i, &c)| i as f64 * c)
        .collect()
}

/// Real roots via companion-matrix eigenvalues, with one Newton polish step.
fn real_roots(poly: &[f64]) -> Vec<f64> {
    let max_abs = poly.iter().fold(0.0f64, |m, &c| m.max(c.abs()));
    if max_abs == 0.0 {
        return Vec::new();
    }
    let mut coeffs = poly.to_vec();
    while coeffs.len() > 1 && coeffs.last().unwrap().abs() < 1e-12 * max_abs {
        coeffs.pop();
    }
    let deg = coeffs.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    let lead = *coeffs.last().unwrap();
    let mut companion = DMatrix::<f64>::zeros(deg, deg);
    for i in 1..deg {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        companion[(i, deg - 1)] = -coeffs[i] / lead;
    }
    let eig = companion.complex_eigenvalues();
    let deriv = poly_deriv(&coeffs);
    let mut roots = Vec::new();
    for ev in eig.iter() {
        // double roots split into conjugate pairs with |im| up to ~sqrt(eps);
        // keep anything plausibly real and let the caller's residual checks
        // reject spurious candidates
        if ev.im.abs() > 1e-4 * (1.0 + ev.re.abs()) {
            continue;
        }
        let mut x = ev.re;
        // Newton converges only linearly on multiple roots, so iterate
        for _ in 0..20 {
            let p = poly_eval(&coeffs, x);
            let dp = poly_eval(&deriv, x);
            if dp.abs() < 1e-14 || p == 0.0 {
                break;
            }
            let step = p / dp;
            x -= step;
            if step.abs() < 1e-14 * (1.0 + x.abs()) {
                break;
            }
        }
        roots.push(x);
    }
    roots
}

/// Best-fit rotation and translation mapping `world` onto `camera` points
/// (Kabsch on three points).
fn rigid_from_three(world: &[Vector3<f64>; 3], camera: &[Vector3<f64>; 3]) -> Pose {
    let wc = (world[0] + world[1] + world[2]) / 3.0;
    let cc = (camera[0] + camera[1] + camera[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (world[i] - wc) * (camera[i] - cc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let d = (v_t.transpose() * u.transpose()).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let rotation = v_t.transpose() * fix * u.transpose();
    let translation = cc - rotation * wc;
    Pose {
        rotation,
        translation,
    }
}

/// Angle between a camera-frame point and a bearing direction.
fn bearing_angle(p: &Vector3<f64>, bearing: &Vector3<f64>) -> f64 {
    let n = p.norm();
    if n < 1e-12 {
        return std::f64::consts::PI;
    }
    (p.dot(bearing) / n).clamp(-1.0, 1.0).acos()
}

/// Three-point resection: all camera-from-world poses consistent with three
/// world points and their unit bearing vectors. Up to four solutions; each
/// returned pose reprojects the three points onto their bearings within
/// 1e-6 rad.
pub fn p3p_solve(
    world: &[Vector3<f64>; 3],
    bearings: &[Vector3<f64>; 3],
) -> Result<Vec<Pose>> {
    for f in bearings {
        if (f.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("bearing vectors must be unit norm"));
        }
    }
    let cross = (world[1] - world[0]).cross(&(world[2] - world[0]));
    let scale = (world[1] - world[0]).norm() * (world[2] - world[0]).norm();
    if cross.norm() < 1e-9 * scale.max(1e-9) {
        return Err(Error::Degenerate("world points are collinear".into()));
    }

    let a = (world[1] - world[2]).norm();
    let b = (world[0] - world[2]).norm();
    let c = (world[0] - world[1]).norm();
    let cos_alpha = bearings[1].dot(&bearings[2]);
    let cos_beta = bearings[0].dot(&bearings[2]);
    let cos_gamma = bearings[0].dot(&bearings[1]);

    // s2 = u s1, s3 = v s1. Eliminating s1 and u leaves a quartic in v:
    //   num(v)^2 - 2 cos_gamma num(v) den(v) + den(v)^2 q(v) = 0
    // with u = num / den.
    let d_ratio = (a * a - c * c) / (b * b);
    let c2b2 = (c * c) / (b * b);
    let num = [1.0 + d_ratio, -2.0 * d_ratio * cos_beta, d_ratio - 1.0];
    let den = [2.0 * cos_gamma, -2.0 * cos_alpha];
    let q = [1.0 - c2b2, 2.0 * c2b2 * cos_beta, -c2b2];

    let mut quartic = poly_mul(&num, &num);
    poly_add(&mut quartic, &poly_mul(&num, &den), -2.0 * cos_gamma);
    poly_add(&mut quartic, &poly_mul(&poly_mul(&den, &den), &q), 1.0);

    let mut poses = Vec::new();
    for v in real_roots(&quartic) {
        if v <= 0.0 {
            continue;
        }
        // u from the rational elimination when well-conditioned, plus both
        // roots of the quadratic constraint (the rational form is 0/0 at
        // repeated roots); wrong combinations fail the rigid-fit check below
        let den_v = poly_eval(&den, v);
        let mut u_candidates = Vec::with_capacity(3);
        if den_v.abs() > 1e-6 {
            u_candidates.push(poly_eval(&num, v) / den_v);
        }
        let c0 = 1.0 - c2b2 * (1.0 + v * v - 2.0 * v * cos_beta);
        let disc = cos_gamma * cos_gamma - c0;
        if disc >= 0.0 {
            u_candidates.push(cos_gamma + disc.sqrt());
            u_candidates.push(cos_gamma - disc.sqrt());
        }
        let s1_sq = (b * b) / (1.0 + v * v - 2.0 * v * cos_beta);
        if s1_sq <= 0.0 {
            continue;
        }
        let s1 = s1_sq.sqrt();
        for u in u_candidates {
            if u <= 0.0 {
                continue;
            }
            let camera = [
                bearings[0] * s1,
                bearings[1] * (u * s1),
                bearings[2] * (v * s1),
            ];
            let pose = rigid_from_three(world, &camera);
            let ok =
                (0..3).all(|i| bearing_angle(&pose.transform(&world[i]), &bearings[i]) < 1e-6);
            if !ok || !pose.is_valid_rotation() {
                continue;
            }
            // drop near-duplicate roots
            let duplicate = poses.iter().any(|p: &Pose| {
                rotation_error(&p.rotation, &pose.rotation) < 1e-6
                    && (p.translation - pose.translation).norm() < 1e-6
            });
            if !duplicate {
                poses.push(pose);
            }
        }
    }
    Ok(poses)
}

/// P3P inside RANSAC: sample three correspondences, disambiguate the up-to
/// four candidate poses with a fourth sampled point, and score by pixel
/// reprojection error.
pub fn ransac_p3p(
    world: &[Vector3<f64>],
    image: &[(f64, f64)],
    cam: &PinholeStereo,
    cfg: &RansacConfig,
) -> Result<(Pose, Vec<usize>)> {
    if world.len() != image.len() {
        return Err(Error::invalid("world/image correspondence count mismatch"));
    }
    if world.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "P3P RANSAC needs at least 4 correspondences, got {}",
            world.len()
        )));
    }
    let n = world.len();
    let reproj_err = |pose: &Pose, i: usize| -> f64 {
        match cam.project(&pose.transform(&world[i])) {
            Some((x, y)) => ((x - image[i].0).powi(2) + (y - image[i].1).powi(2)).sqrt(),
            None => f64::INFINITY,
        }
    };
    let mut rng = Rng::new(cfg.seed);
    let mut best: Option<(Vec<usize>, Pose)> = None;
    let mut needed = cfg.max_iterations;
    let mut iter = 0;
    while iter < needed.min(cfg.max_iterations) {
        iter += 1;
        let mut sample = [0usize; 4];
        let mut count = 0;
        while count < 4 {
            let idx = rng.index(n);
            if !sample[..count].contains(&idx) {
                sample[count] = idx;
                count += 1;
            }
        }
        let w3 = [world[sample[0]], world[sample[1]], world[sample[2]]];
        let f3 = [
            cam.bearing(image[sample[0]].0, image[sample[0]].1),
            cam.bearing(image[sample[1]].0, image[sample[1]].1),
            cam.bearing(image[sample[2]].0, image[sample[2]].1),
        ];
        let candidates = match p3p_solve(&w3, &f3) {
            Ok(c) => c,
            Err(_) => continue,
        };
        // disambiguate by the fourth point's reprojection error
        let chosen = candidates.into_iter().min_by(|p, q| {
            reproj_err(p, sample[3])
                .partial_cmp(&reproj_err(q, sample[3]))
                .unwrap()
        });
        let Some(pose) = chosen else { continue };
        let inliers: Vec<usize> = (0..n)
            .filter(|&i| reproj_err(&pose, i) <= cfg.threshold)
            .collect();
        let best_count = best.as_ref().map_or(0, |(v, _)| v.len());
        if inliers.len() > best_count {
            let w = inliers.len() as f64 / n as f64;
            best = Some((inliers, pose));
            let p_good = w.powi(3);
            if p_good > 0.0 {
                let k = ((1.0 - cfg.confidence).ln() / (1.0 - p_good).max(1e-15).ln()).ceil();
                needed = (k.max(1.0) as usize).min(cfg.max_iterations);
            }
        }
    }
    match best {
        Some((inliers, pose)) if inliers.len() >= 4 => Ok((pose, inliers)),
        _ => Err(Error::EstimationFailed(
            "no pose with at least 4 inliers".into(),
        )),
    }
}

/// Geodesic rotation distance: `arccos((trace(R_estᵀ R_gt) - 1) / 2)`.
pub fn rotation_error(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let arg = ((r_est.transpose() * r_gt).trace() - 1.0) / 2.0;
    arg.clamp(-1.0, 1.0).acos()
}

pub fn translation_error(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    (t_est - t_gt).norm()
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Uniformly random rotation from a normalized quaternion.
    pub fn random_rotation(rng: &mut Rng) -> Matrix3<f64> {
        loop {
            let q = [
                rng.gaussian(),
                rng.gaussian(),
                rng.gaussian(),
                rng.gaussian(),
            ];
            let n = (q.iter().map(|x| x * x).sum::<f64>()).sqrt();
            if n < 1e-6 {
                continue;
            }
            let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
            return Matrix3::new(
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            );
        }
    }

    /// Random pose whose camera sees points scattered around +Z in front.
    pub fn random_scene(
        rng: &mut Rng,
        n: usize,
    ) -> (Pose, Vec<Vector3<f64>>) {
        let rotation = random_rotation(rng);
        let translation = Vector3::new(
            rng.uniform_in(-0.5, 0.5),
            rng.uniform_in(-0.5, 0.5),
            rng.uniform_in(-0.5, 0.5),
        );
        let pose = Pose {
            rotation,
            translation,
        };
        // world points chosen so their camera-frame depth is positive
        let r_inv = rotation.transpose();
        let mut world = Vec::with_capacity(n);
        for _ in 0..n {
            let cam_pt = Vector3::new(
                rng.uniform_in(-2.0, 2.0),
                rng.uniform_in(-2.0, 2.0),
                rng.uniform_in(3.0, 10.0),
            );
            world.push(r_inv * (cam_pt - translation));
        }
        (pose, world)
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cam() -> PinholeStereo {
        PinholeStereo::new(100.0, 64.0, 48.0, 0.5).unwrap()
    }

    #[test]
    fn triangulate_principal_point() {
        let c = cam();
        let left = Keypoint::new(c.cx, c.cy, 1.0);
        let right = Keypoint::new(c.cx - 10.0, c.cy, 1.0);
        let p = triangulate_stereo(&left, &right, &c).unwrap();
        assert_abs_diff_eq!(p, Vector3::new(0.0, 0.0, 5.0), epsilon = 1e-12);
    }

    #[test]
    fn triangulate_rejects_bad_disparity_and_vertical_mismatch() {
        let c = cam();
        let l = Keypoint::new(10.0, 10.0, 1.0);
        assert!(triangulate_stereo(&l, &Keypoint::new(10.0, 10.0, 1.0), &c).is_err());
        assert!(triangulate_stereo(&l, &Keypoint::new(15.0, 10.0, 1.0), &c).is_err());
        assert!(triangulate_stereo(&l, &Keypoint::new(5.0, 14.0, 1.0), &c).is_err());
    }

    #[test]
    fn project_then_triangulate_round_trip() {
        let c = cam();
        let mut rng = Rng::new(21);
        for _ in 0..100 {
            let p = Vector3::new(
                rng.uniform_in(-2.0, 2.0),
                rng.uniform_in(-2.0, 2.0),
                rng.uniform_in(1.0, 20.0),
            );
            let (xl, yl) = c.project(&p).unwrap();
            let right = Vector3::new(p.x - c.baseline, p.y, p.z);
            let (xr, yr) = c.project(&right).unwrap();
            if xl - xr <= 0.1 {
                continue;
            }
            let rec = triangulate_stereo(
                &Keypoint::new(xl, yl, 1.0),
                &Keypoint::new(xr, yr, 1.0),
                &c,
            )
            .unwrap();
            assert!((rec - p).norm() < 1e-6, "error {}", (rec - p).norm());
        }
    }

    fn solve_for_scene(pose: &Pose, world: &[Vector3<f64>; 3]) -> Vec<Pose> {
        let bearings = [
            pose.transform(&world[0]).normalize(),
            pose.transform(&world[1]).normalize(),
            pose.transform(&world[2]).normalize(),
        ];
        p3p_solve(world, &bearings).unwrap()
    }

    #[test]
    fn p3p_recovers_synthetic_pose() {
        let mut rng = Rng::new(11);
        for _ in 0..30 {
            let (pose, pts) = random_scene(&mut rng, 3);
            let world = [pts[0], pts[1], pts[2]];
            let solutions = solve_for_scene(&pose, &world);
            assert!(!solutions.is_empty());
            let best = solutions
                .iter()
                .map(|p| rotation_error(&p.rotation, &pose.rotation))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "best rotation error {best}");
        }
    }

    #[test]
    fn p3p_equilateral_triangle_ahead_yields_identity() {
        let world = [
            Vector3::new(1.0, 0.0, 5.0),
            Vector3::new(-0.5, 0.866, 5.0),
            Vector3::new(-0.5, -0.866, 5.0),
        ];
        let solutions = solve_for_scene(&Pose::identity(), &world);
        let best = solutions
            .iter()
            .map(|p| rotation_error(&p.rotation, &Matrix3::identity()) + p.translation.norm())
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-6, "identity not among solutions: {best}");
    }

    #[test]
    fn p3p_rejects_collinear_points() {
        let world = [
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(1.0, 0.0, 5.0),
            Vector3::new(2.0, 0.0, 5.0),
        ];
        let b = Vector3::new(0.0, 0.0, 1.0);
        assert!(matches!(
            p3p_solve(&world, &[b, b, b]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn p3p_rejects_non_unit_bearings() {
        let world = [
            Vector3::new(1.0, 0.0, 5.0),
            Vector3::new(0.0, 1.0, 5.0),
            Vector3::new(0.0, 0.0, 5.0),
        ];
        let b = Vector3::new(0.0, 0.0, 2.0);
        assert!(p3p_solve(&world, &[b, b, b]).is_err());
    }

    #[test]
    fn p3p_solutions_satisfy_pose_invariants() {
        let mut rng = Rng::new(15);
        for _ in 0..20 {
            let (pose, pts) = random_scene(&mut rng, 3);
            let world = [pts[0], pts[1], pts[2]];
            for sol in solve_for_scene(&pose, &world) {
                assert!(sol.is_valid_rotation());
            }
        }
    }

    #[test]
    fn ransac_p3p_noise_free() {
        let c = cam();
        let mut rng = Rng::new(12);
        let (pose, world) = random_scene(&mut rng, 30);
        let image: Vec<(f64, f64)> = world
            .iter()
            .map(|w| c.project(&pose.transform(w)).unwrap())
            .collect();
        let cfg = RansacConfig {
            seed: 12,
            ..RansacConfig::default()
        };
        let (est, inliers) = ransac_p3p(&world, &image, &c, &cfg).unwrap();
        assert_eq!(inliers.len(), 30);
        assert!(rotation_error(&est.rotation, &pose.rotation) < 1e-5);
        assert!(translation_error(&est.translation, &pose.translation) < 1e-5);
    }

    #[test]
    fn ransac_p3p_survives_half_outliers() {
        let c = cam();
        let mut rng = Rng::new(13);
        let (pose, mut world) = random_scene(&mut rng, 30);
        let mut image: Vec<(f64, f64)> = world
            .iter()
            .map(|w| c.project(&pose.transform(w)).unwrap())
            .collect();
        let (_, extra) = random_scene(&mut rng, 30);
        for w in extra {
            world.push(w);
            image.push((rng.uniform_in(0.0, 128.0), rng.uniform_in(0.0, 96.0)));
        }
        let cfg = RansacConfig {
            seed: 13,
            ..RansacConfig::default()
        };
        let (est, inliers) = ransac_p3p(&world, &image, &c, &cfg).unwrap();
        assert!(inliers.len() >= 30, "only {} inliers", inliers.len());
        assert!(rotation_error(&est.rotation, &pose.rotation) < 0.01);
    }

    #[test]
    fn ransac_p3p_rejects_three_correspondences() {
        let c = cam();
        let world = vec![
            Vector3::new(1.0, 0.0, 5.0),
            Vector3::new(0.0, 1.0, 5.0),
            Vector3::new(0.0, 0.0, 5.0),
        ];
        let image = vec![(70.0, 40.0), (60.0, 30.0), (64.0, 48.0)];
        assert!(matches!(
            ransac_p3p(&world, &image, &c, &RansacConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn rotation_error_basics() {
        let id = Matrix3::identity();
        assert_eq!(rotation_error(&id, &id), 0.0);
        let theta = 0.3f64;
        let rz = Matrix3::new(
            theta.cos(),
            -theta.sin(),
            0.0,
            theta.sin(),
            theta.cos(),
            0.0,
            0.0,
            0.0,
            1.0,
        );
        assert_abs_diff_eq!(rotation_error(&rz, &id), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn rotation_error_matches_quaternion_angle_oracle() {
        let mut rng = Rng::new(33);
        for _ in 0..50 {
            let r1 = random_rotation(&mut rng);
            let r2 = random_rotation(&mut rng);
            let got = rotation_error(&r1, &r2);
            // oracle: angle of the relative rotation via its quaternion,
            // 2 atan2(|vec|, |w|) with the double cover folded in
            let rel = r1.transpose() * r2;
            let q = nalgebra::UnitQuaternion::from_matrix(&rel);
            let w = q.w.abs();
            let vec_norm = (q.i * q.i + q.j * q.j + q.k * q.k).sqrt();
            let expect = 2.0 * vec_norm.atan2(w);
            assert_abs_diff_eq!(got, expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn rotation_error_symmetric_and_triangle_inequality() {
        let mut rng = Rng::new(44);
        for _ in 0..30 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let c = random_rotation(&mut rng);
            assert_abs_diff_eq!(rotation_error(&a, &b), rotation_error(&b, &a), epsilon = 1e-9);
            assert!(
                rotation_error(&a, &c) <= rotation_error(&a, &b) + rotation_error(&b, &c) + 1e-9
            );
        }
    }

    #[test]
    fn pose_line_round_trip() {
        let mut rng = Rng::new(5);
        let pose = Pose {
            rotation: random_rotation(&mut rng),
            translation: Vector3::new(0.25, -1.5, 3.0),
        };
        let back = Pose::from_line(&pose.to_line()).unwrap();
        assert_eq!(back.rotation, pose.rotation);
        assert_eq!(back.translation, pose.translation);
    }
}
