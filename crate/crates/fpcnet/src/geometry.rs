//! Homography algebra, image warping with validity masks, random
//! homography sampling, and corner reprojection error.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ImageGray;

const DENOM_TOL: f64 = 1e-12;

/// 3×3 projective map, stored normalized so `m[2][2] = 1` whenever that
/// entry is non-negligible.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.determinant().abs() <= DENOM_TOL {
            return Err(Error::Singular(format!(
                "homography determinant {:e} below tolerance",
                m.determinant()
            )));
        }
        let m = if m[(2, 2)].abs() > DENOM_TOL {
            m / m[(2, 2)]
        } else {
            m
        };
        Ok(Homography { m })
    }

    /// Row-major 9-element construction.
    pub fn from_rows(v: &[f64]) -> Result<Self> {
        assert_eq!(v.len(), 9);
        Self::from_matrix(Matrix3::from_row_slice(v))
    }

    pub fn identity() -> Self {
        Homography {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_rows(&[1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0]).expect("translation")
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Projective action on a point.
    pub fn apply(&self, pt: (f64, f64)) -> Result<(f64, f64)> {
        let v = self.m * Vector3::new(pt.0, pt.1, 1.0);
        if v.z.abs() <= DENOM_TOL {
            return Err(Error::PointAtInfinity(v.z));
        }
        Ok((v.x / v.z, v.y / v.z))
    }

    pub fn invert(&self) -> Result<Homography> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Singular("homography not invertible".into()))?;
        Homography::from_matrix(inv)
    }

    /// `compose(a, b)` acts as `a` after `b`: `compose(a, b)(p) = a(b(p))`.
    pub fn compose(a: &Homography, b: &Homography) -> Result<Homography> {
        Homography::from_matrix(a.m * b.m)
    }
}

/// Boolean grid marking pixels whose warped source sample is fully
/// interpolatable from inside the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl ValidityMask {
    pub fn new_filled(height: usize, width: usize, value: bool) -> Self {
        ValidityMask {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Elementwise AND with another mask of the same shape.
    pub fn intersect(&self, other: &ValidityMask) -> ValidityMask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        ValidityMask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }
}

/// Bounds for random homography sampling: a similarity about the image
/// center plus independent per-corner jitter, all as fractions of image side.
#[derive(Debug, Clone)]
pub struct HomographySamplerConfig {
    /// Max per-axis corner jitter as a fraction of image side. Must be in `[0, 0.5)`.
    pub max_corner_perturbation: f64,
    /// Rotation range in radians, sampled in `[-r, r]`.
    pub rotation_range: f64,
    /// Scale sampled uniformly in `[lo, hi]`.
    pub scale_range: (f64, f64),
    /// Translation range as a fraction of side, per axis in `[-t, t]`.
    pub translation_range: f64,
}

impl Default for HomographySamplerConfig {
    fn default() -> Self {
        HomographySamplerConfig {
            max_corner_perturbation: 0.15,
            rotation_range: 0.26,
            scale_range: (0.8, 1.25),
            translation_range: 0.1,
        }
    }
}

impl HomographySamplerConfig {
    /// Config whose samples are always the identity map.
    pub fn identity() -> Self {
        HomographySamplerConfig {
            max_corner_perturbation: 0.0,
            rotation_range: 0.0,
            scale_range: (1.0, 1.0),
            translation_range: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.max_corner_perturbation) {
            return Err(Error::invalid("corner perturbation must be in [0, 0.5)"));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(Error::invalid("scale range must be positive and ordered"));
        }
        Ok(())
    }
}

fn image_corners(w: usize, h: usize) -> [(f64, f64); 4] {
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    [(0.0, 0.0), (wf, 0.0), (0.0, hf), (wf, hf)]
}

fn collinear_triple_exists(pts: &[(f64, f64); 4]) -> bool {
    for i in 0..4 {
        for j in (i + 1)..4 {
            for k in (j + 1)..4 {
                let (ax, ay) = pts[i];
                let (bx, by) = pts[j];
                let (cx, cy) = pts[k];
                let cross = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
                if cross.abs() < 1e-6 {
                    return true;
                }
            }
        }
    }
    false
}

/// Exact map sending four source points to four destination points, via the
/// 8×8 linear system of the projective constraints.
fn four_point_homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Homography> {
    let mut a = nalgebra::SMatrix::<f64, 8, 8>::zeros();
    let mut b = nalgebra::SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        let r0 = 2 * i;
        a[(r0, 0)] = x;
        a[(r0, 1)] = y;
        a[(r0, 2)] = 1.0;
        a[(r0, 6)] = -u * x;
        a[(r0, 7)] = -u * y;
        b[r0] = u;
        let r1 = r0 + 1;
        a[(r1, 3)] = x;
        a[(r1, 4)] = y;
        a[(r1, 5)] = 1.0;
        a[(r1, 6)] = -v * x;
        a[(r1, 7)] = -v * y;
        b[r1] = v;
    }
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Degenerate("four-point system is rank deficient".into()))?;
    Homography::from_rows(&[
        sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0,
    ])
}

/// Sample a random homography by perturbing the four image corners within
/// the config bounds and solving the exact four-point map. Degenerate or
/// out-of-bound corner draws are resampled, erroring after 100 attempts.
pub fn sample_homography(
    cfg: &HomographySamplerConfig,
    w: usize,
    h: usize,
    rng: &mut Rng,
) -> Result<Homography> {
    cfg.validate()?;
    if w < 8 || h < 8 {
        return Err(Error::invalid("image must be at least 8x8"));
    }
    let side = w.max(h) as f64;
    let src = image_corners(w, h);
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);

    for _ in 0..100 {
        let theta = rng.uniform_in(-cfg.rotation_range, cfg.rotation_range);
        let scale = rng.uniform_in(cfg.scale_range.0, cfg.scale_range.1);
        let tx = rng.uniform_in(-cfg.translation_range, cfg.translation_range) * side;
        let ty = rng.uniform_in(-cfg.translation_range, cfg.translation_range) * side;
        let (sin, cos) = theta.sin_cos();

        let mut dst = [(0.0, 0.0); 4];
        for (d, &(x, y)) in dst.iter_mut().zip(src.iter()) {
            let (dx, dy) = (x - cx, y - cy);
            let rx = scale * (cos * dx - sin * dy) + cx + tx;
            let ry = scale * (sin * dx + cos * dy) + cy + ty;
            let jx = rng.uniform_in(-cfg.max_corner_perturbation, cfg.max_corner_perturbation);
            let jy = rng.uniform_in(-cfg.max_corner_perturbation, cfg.max_corner_perturbation);
            *d = (rx + jx * side, ry + jy * side);
        }

        // Each mapped corner must stay within 0.5 side of its origin.
        let within_bound = dst
            .iter()
            .zip(src.iter())
            .all(|(&(ux, uy), &(x, y))| ((ux - x).powi(2) + (uy - y).powi(2)).sqrt() <= 0.5 * side);
        if !within_bound || collinear_triple_exists(&dst) {
            continue;
        }
        if let Ok(hom) = four_point_homography(&src, &dst) {
            return Ok(hom);
        }
    }
    Err(Error::Degenerate(
        "no valid corner configuration after 100 attempts".into(),
    ))
}

/// Interpolation kernel for image warps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Bicubic,
}

/// Keys cubic kernel with a = -0.5.
fn keys_cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t < 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Per-axis taps and weights for one source coordinate. Taps with zero
/// weight are dropped so that exact lattice hits have a one-pixel footprint.
fn axis_taps(coord: f64, interp: Interp) -> Vec<(i64, f64)> {
    let base = coord.floor() as i64;
    let frac = coord - base as f64;
    let mut taps = Vec::with_capacity(4);
    match interp {
        Interp::Bilinear => {
            taps.push((base, 1.0 - frac));
            taps.push((base + 1, frac));
        }
        Interp::Bicubic => {
            for k in -1..=2 {
                taps.push((base + k, keys_cubic(frac - k as f64)));
            }
        }
    }
    taps.retain(|&(_, w)| w != 0.0);
    taps
}

/// Inverse-mapping warp: output pixel `(x, y)` samples the input at
/// `h⁻¹(x, y)`. A pixel is valid iff every non-zero interpolation tap lies
/// inside the input; invalid pixels are written as 0.
pub fn warp_image(
    img: &ImageGray,
    h: &Homography,
    interp: Interp,
) -> Result<(ImageGray, ValidityMask)> {
    let h_inv = h.invert()?;
    let (height, width) = (img.height, img.width);
    let mut out = ImageGray::zeros(height, width);
    let mut mask = ValidityMask::new_filled(height, width, false);
    for y in 0..height {
        for x in 0..width {
            let src = match h_inv.apply((x as f64, y as f64)) {
                Ok(p) => p,
                Err(_) => continue,
            };
            if let Some(v) = sample_at(img, src, interp) {
                out.set(y, x, v);
                mask.set(y, x, true);
            }
        }
    }
    Ok((out, mask))
}

/// Interpolate the image at a continuous location, or `None` when the
/// interpolation footprint leaves the image.
pub fn sample_at(img: &ImageGray, (sx, sy): (f64, f64), interp: Interp) -> Option<f32> {
    let xt = axis_taps(sx, interp);
    let yt = axis_taps(sy, interp);
    let in_x = xt.iter().all(|&(c, _)| c >= 0 && (c as usize) < img.width);
    let in_y = yt.iter().all(|&(r, _)| r >= 0 && (r as usize) < img.height);
    if !in_x || !in_y {
        return None;
    }
    let mut acc = 0.0f64;
    for &(r, wy) in &yt {
        for &(c, wx) in &xt {
            acc += wy * wx * img.get(r as usize, c as usize) as f64;
        }
    }
    Some(acc.clamp(0.0, 1.0) as f32)
}

/// Mean Euclidean distance between the four image corners mapped through
/// the ground-truth and estimated homographies.
pub fn corner_error(h_gt: &Homography, h_est: &Homography, w: usize, h: usize) -> Result<f64> {
    let mut total = 0.0;
    for &c in &image_corners(w, h) {
        let (gx, gy) = h_gt.apply(c)?;
        let (ex, ey) = h_est.apply(c)?;
        total += ((gx - ex).powi(2) + (gy - ey).powi(2)).sqrt();
    }
    Ok(total / 4.0)
}
