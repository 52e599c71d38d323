//! Descriptor-free spatial matching and homography estimation.
//!
//! Matching here reads nothing but keypoint coordinates and scores: a match
//! is formed by nearest-neighbor search in image coordinates, optionally
//! requiring mutuality. Homographies are fit with a Hartley-normalized DLT
//! inside a classic 4-sample RANSAC scored by symmetric transfer error.

use nalgebra::{DMatrix, Matrix3};

use crate::error::{Error, Result};
use crate::geometry::{corner_error, Homography};
use crate::rng::Rng;
use crate::tensor::Keypoint;

/// A correspondence between keypoint indices of two sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    /// Euclidean distance in pixels at match time.
    pub distance: f64,
}

/// RANSAC parameters shared by the homography and pose estimators.
#[derive(Debug, Clone)]
pub struct RansacConfig {
    /// Inlier threshold in pixels.
    pub threshold: f64,
    pub max_iterations: usize,
    /// Early-exit confidence.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            threshold: 3.0,
            max_iterations: 2000,
            confidence: 0.995,
            seed: 0,
        }
    }
}

/// Nearest-neighbor matching in image coordinates. For each keypoint of `a`
/// the Euclidean-nearest keypoint of `b` is found; the pair is kept iff the
/// distance is within `max_dist` and, when `mutual`, `a` is also `b`'s
/// nearest. Each keypoint appears in at most one match; ties break toward
/// the lower index.
pub fn spatial_match(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    max_dist: f64,
    mutual: bool,
) -> Vec<Match> {
    assert!(max_dist > 0.0);
    if kps_a.is_empty() || kps_b.is_empty() {
        return Vec::new();
    }
    let nearest = |from: &[Keypoint], to: &[Keypoint], i: usize| -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (j, kp) in to.iter().enumerate() {
            let d = from[i].dist(kp);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    };
    let mut used_b = vec![false; kps_b.len()];
    let mut out = Vec::new();
    for i in 0..kps_a.len() {
        let (j, d) = nearest(kps_a, kps_b, i);
        if d > max_dist || used_b[j] {
            continue;
        }
        if mutual {
            let (back, _) = nearest(kps_b, kps_a, j);
            if back != i {
                continue;
            }
        }
        used_b[j] = true;
        out.push(Match {
            index_a: i,
            index_b: j,
            distance: d,
        });
    }
    out
}

/// Repeatability under a ground-truth homography: the fraction of keypoints
/// from both sets that land within `eps` of the opposite set after warping.
/// Keypoints whose warp falls outside the other image are excluded.
pub fn repeatability(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    h_gt: &Homography,
    eps: f64,
    img_size: (usize, usize),
) -> Result<f64> {
    assert!(eps > 0.0);
    let (w, h) = img_size;
    let h_inv = h_gt.invert()?;
    let inside = |p: (f64, f64)| p.0 >= 0.0 && p.0 < w as f64 && p.1 >= 0.0 && p.1 < h as f64;

    // warp each set into the other frame, keeping only in-bounds warps
    let warped_a: Vec<(f64, f64)> = kps_a
        .iter()
        .filter_map(|kp| h_gt.apply((kp.x, kp.y)).ok().filter(|&p| inside(p)))
        .collect();
    let warped_b: Vec<(f64, f64)> = kps_b
        .iter()
        .filter_map(|kp| h_inv.apply((kp.x, kp.y)).ok().filter(|&p| inside(p)))
        .collect();
    let total = warped_a.len() + warped_b.len();
    if total == 0 {
        return Err(Error::UndefinedMetric(
            "no keypoints survive the in-bounds restriction".into(),
        ));
    }
    let min_dist = |p: (f64, f64), set: &[Keypoint]| {
        set.iter()
            .map(|kp| ((p.0 - kp.x).powi(2) + (p.1 - kp.y).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let matched_a = warped_a
        .iter()
        .filter(|&&p| min_dist(p, kps_b) <= eps)
        .count();
    let matched_b = warped_b
        .iter()
        .filter(|&&p| min_dist(p, kps_a) <= eps)
        .count();
    Ok((matched_a + matched_b) as f64 / total as f64)
}

/// Hartley normalization: translate to the centroid and scale so the mean
/// distance from the origin is sqrt(2).
fn normalize_points(pts: &[(f64, f64)]) -> Result<(Vec<(f64, f64)>, Matrix3<f64>)> {
    let n = pts.len() as f64;
    let (mx, my) = pts
        .iter()
        .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let (mx, my) = (mx / n, my / n);
    let mean_dist = pts
        .iter()
        .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0);
    let normed = pts.iter().map(|p| (s * (p.0 - mx), s * (p.1 - my))).collect();
    Ok((normed, t))
}

/// Normalized direct linear transform from >= 4 correspondences. The 2n×9
/// homogeneous system is solved by the smallest right singular direction.
pub fn dlt_homography(pairs: &[((f64, f64), (f64, f64))]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "DLT needs at least 4 correspondences, got {}",
            pairs.len()
        )));
    }
    let src: Vec<(f64, f64)> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<(f64, f64)> = pairs.iter().map(|p| p.1).collect();
    let (src_n, t_src) = normalize_points(&src)?;
    let (dst_n, t_dst) = normalize_points(&dst)?;

    let n = pairs.len();
    // pad to at least 9 rows so the thin SVD exposes the null direction
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let (x, y) = src_n[i];
        let (u, v) = dst_n[i];
        let r0 = 2 * i;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        let r1 = r0 + 1;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let sv = &svd.singular_values;
    // rank check: with exact collinear degeneracy the system drops below rank 8
    let max_sv = sv.iter().cloned().fold(0.0f64, f64::max);
    let rank = sv.iter().filter(|&&s| s > 1e-9 * max_sv.max(1.0)).count();
    if rank < 8 {
        return Err(Error::Degenerate(format!(
            "DLT design matrix rank {rank} < 8 (collinear or coincident points)"
        )));
    }
    let min_idx = (0..sv.len())
        .min_by(|&i, &j| sv[i].partial_cmp(&sv[j]).unwrap())
        .unwrap();
    let h_row = v_t.row(min_idx);
    let h_n = Matrix3::from_row_slice(&[
        h_row[0], h_row[1], h_row[2], h_row[3], h_row[4], h_row[5], h_row[6], h_row[7], h_row[8],
    ]);
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or_else(|| Error::Singular("normalization transform".into()))?;
    Homography::from_matrix(t_dst_inv * h_n * t_src)
}

/// Mean of the forward and backward transfer distances for one pair.
fn symmetric_transfer_error(
    h: &Homography,
    h_inv: &Homography,
    a: (f64, f64),
    b: (f64, f64),
) -> f64 {
    let fwd = match h.apply(a) {
        Ok(p) => ((p.0 - b.0).powi(2) + (p.1 - b.1).powi(2)).sqrt(),
        Err(_) => return f64::INFINITY,
    };
    let bwd = match h_inv.apply(b) {
        Ok(p) => ((p.0 - a.0).powi(2) + (p.1 - a.1).powi(2)).sqrt(),
        Err(_) => return f64::INFINITY,
    };
    0.5 * (fwd + bwd)
}

fn inliers_of(h: &Homography, pairs: &[((f64, f64), (f64, f64))], threshold: f64) -> Vec<usize> {
    let h_inv = match h.invert() {
        Ok(inv) => inv,
        Err(_) => return Vec::new(),
    };
    pairs
        .iter()
        .enumerate()
        .filter(|(_, &(a, b))| symmetric_transfer_error(h, &h_inv, a, b) <= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Classic 4-sample RANSAC over point correspondences, scored by symmetric
/// transfer error, with a final DLT re-fit on the inliers of the best model.
pub fn ransac_homography(
    pairs: &[((f64, f64), (f64, f64))],
    cfg: &RansacConfig,
) -> Result<(Homography, Vec<usize>)> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "RANSAC needs at least 4 matches, got {}",
            pairs.len()
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut best: Option<(Vec<usize>, Homography)> = None;
    let mut iter = 0usize;
    let mut needed = cfg.max_iterations;
    while iter < needed.min(cfg.max_iterations) {
        iter += 1;
        // sample 4 distinct indices
        let mut sample = [0usize; 4];
        let mut count = 0;
        while count < 4 {
            let idx = rng.index(pairs.len());
            if !sample[..count].contains(&idx) {
                sample[count] = idx;
                count += 1;
            }
        }
        let minimal: Vec<_> = sample.iter().map(|&i| pairs[i]).collect();
        let h = match dlt_homography(&minimal) {
            Ok(h) => h,
            Err(_) => continue,
        };
        let inl = inliers_of(&h, pairs, cfg.threshold);
        let best_count = best.as_ref().map_or(0, |(v, _)| v.len());
        if inl.len() > best_count {
            let w = inl.len() as f64 / pairs.len() as f64;
            best = Some((inl, h));
            // early exit: enough iterations that a clean minimal sample was
            // drawn with the requested confidence
            let p_good = w.powi(4);
            if p_good > 0.0 {
                let k = ((1.0 - cfg.confidence).ln() / (1.0 - p_good).max(1e-15).ln()).ceil();
                needed = (k.max(1.0) as usize).min(cfg.max_iterations);
            }
        }
    }
    let (best_inliers, best_h) = best.ok_or_else(|| {
        Error::EstimationFailed("RANSAC found no model with enough inliers".into())
    })?;
    if best_inliers.len() < 4 {
        return Err(Error::EstimationFailed(format!(
            "best model has only {} inliers",
            best_inliers.len()
        )));
    }
    let inlier_pairs: Vec<_> = best_inliers.iter().map(|&i| pairs[i]).collect();
    let refit = dlt_homography(&inlier_pairs).unwrap_or(best_h);
    let final_inliers = inliers_of(&refit, pairs, cfg.threshold);
    if final_inliers.len() >= 4 {
        Ok((refit, final_inliers))
    } else {
        Ok((
            dlt_homography(&inlier_pairs)?,
            best_inliers,
        ))
    }
}

/// A homography estimate is correct iff its corner reprojection error
/// against ground truth stays within `eps` pixels.
pub fn homography_accuracy(
    h_gt: &Homography,
    h_est: &Homography,
    eps: f64,
    w: usize,
    h: usize,
) -> Result<bool> {
    assert!(eps > 0.0);
    Ok(corner_error(h_gt, h_est, w, h)? <= eps)
}

/// Fraction of correct estimates over a batch of pairs.
pub fn homography_accuracy_aggregate(
    pairs: &[(Homography, Homography)],
    eps: f64,
    w: usize,
    h: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    for (gt, est) in pairs {
        if homography_accuracy(gt, est, eps, w, h)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}
