//! Heatmap post-processing and target construction.
//!
//! Detector output is a raw (pre-sigmoid) logit map. Inference keeps the
//! pixels above a quantile threshold, converts them to keypoints with
//! sigmoid confidence, and prunes them with greedy radius NMS. Stage-2
//! training targets are built from binary teacher masks by Gaussian
//! filtering and label smoothing.

use crate::error::{Error, Result};
use crate::tensor::{Keypoint, Tensor};

/// Raw pre-sigmoid score map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    logits: Tensor,
}

impl Heatmap {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 2 {
            return Err(Error::invalid("heatmap must be rank 2"));
        }
        if logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("heatmap logits must be finite"));
        }
        Ok(Heatmap { logits })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn height(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.logits.shape()[1]
    }
}

/// Supervision mask kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Binary,
    Smoothed,
}

/// Per-pixel target in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMask {
    values: Tensor,
    pub kind: MaskKind,
}

impl TargetMask {
    pub fn new(values: Tensor, kind: MaskKind) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::invalid("target mask must be rank 2"));
        }
        let in_range = |v: f32| (0.0..=1.0).contains(&v);
        if values.data().iter().any(|&v| !in_range(v)) {
            return Err(Error::invalid("target mask values must lie in [0, 1]"));
        }
        if kind == MaskKind::Binary && values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("binary mask entries must be 0 or 1"));
        }
        Ok(TargetMask { values, kind })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        TargetMask {
            values: Tensor::zeros(vec![height, width]),
            kind: MaskKind::Binary,
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.values.set2(row, col, v);
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values.at2(row, col)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// q-quantile of a sample by linear interpolation between order statistics.
fn quantile(sorted: &[f32], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)
}

/// Binary mask of pixels whose logit strictly exceeds the q-quantile of the
/// map. A constant map selects nothing.
pub fn quantile_threshold(hm: &Heatmap, q: f64) -> Result<TargetMask> {
    if !(0.0 < q && q < 1.0) {
        return Err(Error::invalid("quantile must be in (0, 1)"));
    }
    let mut sorted: Vec<f32> = hm.logits().data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t = quantile(&sorted, q);
    let data = hm
        .logits()
        .data()
        .iter()
        .map(|&v| if (v as f64) > t { 1.0 } else { 0.0 })
        .collect();
    TargetMask::new(
        Tensor::new(hm.logits().shape().to_vec(), data)?,
        MaskKind::Binary,
    )
}

/// Greedy radius NMS: keep by descending score (ties broken by `(y, x)`),
/// dropping any keypoint within `radius` of an already kept one.
pub fn nms(kps: &[Keypoint], radius: f64, max_k: usize) -> Vec<Keypoint> {
    assert!(radius >= 0.0);
    let mut order: Vec<usize> = (0..kps.len()).collect();
    order.sort_by(|&a, &b| {
        kps[b]
            .score
            .partial_cmp(&kps[a].score)
            .unwrap()
            .then(kps[a].y.partial_cmp(&kps[b].y).unwrap())
            .then(kps[a].x.partial_cmp(&kps[b].x).unwrap())
    });
    let mut kept: Vec<Keypoint> = Vec::new();
    for &i in &order {
        if kept.len() >= max_k {
            break;
        }
        if kept.iter().all(|k| k.dist(&kps[i]) > radius) {
            kept.push(kps[i]);
        }
    }
    kept
}

/// Quantile threshold, sigmoid scoring, then NMS. Keypoints sit at pixel
/// centers (`x` = column, `y` = row).
pub fn extract_keypoints(hm: &Heatmap, q: f64, nms_radius: f64, max_k: usize) -> Result<Vec<Keypoint>> {
    let mask = quantile_threshold(hm, q)?;
    let mut candidates = Vec::new();
    for r in 0..hm.height() {
        for c in 0..hm.width() {
            if mask.get(r, c) > 0.5 {
                let logit = hm.logits().at2(r, c) as f64;
                candidates.push(Keypoint::new(c as f64, r as f64, sigmoid(logit)));
            }
        }
    }
    Ok(nms(&candidates, nms_radius, max_k))
}

/// 1D normalized Gaussian kernel with half-width `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Reflect-boundary index: -1 maps to 0, n maps to n-1.
fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflect boundary; output clamped to `[0, 1]`.
pub fn gaussian_filter(mask: &TargetMask, sigma: f64) -> Result<TargetMask> {
    if sigma <= 0.0 {
        return Err(Error::invalid("sigma must be positive"));
    }
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let kernel = gaussian_kernel(sigma);
    let half = (kernel.len() / 2) as i64;
    // horizontal pass
    let mut tmp = vec![0.0f64; (h * w) as usize];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let src = reflect(c + ki as i64 - half, w);
                acc += kv * mask.get(r as usize, src) as f64;
            }
            tmp[(r * w + c) as usize] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0f32; (h * w) as usize];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let src = reflect(r + ki as i64 - half, h);
                acc += kv * tmp[(src as i64 * w + c) as usize];
            }
            out[(r * w + c) as usize] = acc.clamp(0.0, 1.0) as f32;
        }
    }
    TargetMask::new(
        Tensor::new(vec![h as usize, w as usize], out)?,
        MaskKind::Smoothed,
    )
}

/// `v -> v (1 - eps) + (1 - v) eps`.
pub fn label_smooth(mask: &TargetMask, eps: f64) -> Result<TargetMask> {
    if !(0.0..0.5).contains(&eps) {
        return Err(Error::invalid("label smoothing eps must be in [0, 0.5)"));
    }
    let data = mask
        .values()
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64;
            (v * (1.0 - eps) + (1.0 - v) * eps) as f32
        })
        .collect();
    TargetMask::new(
        Tensor::new(mask.values().shape().to_vec(), data)?,
        if eps == 0.0 { mask.kind } else { MaskKind::Smoothed },
    )
}

/// Histogram of raw logits over uniform bins in `[lo, hi]`; out-of-range
/// values clamp to the end bins.
pub fn activation_histogram(
    hm: &Heatmap,
    bins: usize,
    lo: f64,
    hi: f64,
) -> Result<Vec<(f64, usize)>> {
    if bins < 1 {
        return Err(Error::invalid("need at least one bin"));
    }
    if lo >= hi {
        return Err(Error::invalid("histogram range must satisfy lo < hi"));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in hm.logits().data() {
        let idx = (((v as f64 - lo) / width).floor() as i64).clamp(0, bins as i64 - 1) as usize;
        counts[idx] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, n)| (lo + (i as f64 + 0.5) * width, n))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_abs_diff_eq;

    fn map_from(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Heatmap {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Heatmap::new(Tensor::new(vec![h, w], data).unwrap()).unwrap()
    }

    fn random_map(h: usize, w: usize, seed: u64) -> Heatmap {
        let mut rng = Rng::new(seed);
        map_from(h, w, |_, _| rng.uniform_in(-6.0, 2.0) as f32)
    }

    #[test]
    fn quantile_selects_unique_maximum() {
        let hm = map_from(10, 10, |r, c| if (r, c) == (3, 7) { 1.0 } else { 0.0 });
        let mask = quantile_threshold(&hm, 0.99).unwrap();
        let selected: Vec<_> = (0..10)
            .flat_map(|r| (0..10).map(move |c| (r, c)))
            .filter(|&(r, c)| mask.get(r, c) > 0.5)
            .collect();
        assert_eq!(selected, vec![(3, 7)]);
    }

    #[test]
    fn quantile_count_near_budget_on_vga_map() {
        let hm = random_map(480, 640, 11);
        let mask = quantile_threshold(&hm, 0.999).unwrap();
        let n = mask.values().data().iter().filter(|&&v| v > 0.5).count();
        assert!((250..=370).contains(&n), "selected {n} pixels");
    }

    #[test]
    fn quantile_constant_map_selects_nothing() {
        let hm = map_from(8, 8, |_, _| 0.25);
        let mask = quantile_threshold(&hm, 0.9).unwrap();
        assert!(mask.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantile_count_non_increasing_in_q() {
        let hm = random_map(64, 64, 3);
        let mut prev = usize::MAX;
        for q in [0.5, 0.7, 0.9, 0.99, 0.999] {
            let n = quantile_threshold(&hm, q)
                .unwrap()
                .values()
                .data()
                .iter()
                .filter(|&&v| v > 0.5)
                .count();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn nms_radius_rules() {
        let kps = vec![Keypoint::new(0.0, 0.0, 0.9), Keypoint::new(3.0, 0.0, 0.8)];
        let kept = nms(&kps, 4.0, 10);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(nms(&kps, 2.0, 10).len(), 2);
    }

    #[test]
    fn nms_output_is_pairwise_separated() {
        let mut rng = Rng::new(17);
        let kps: Vec<Keypoint> = (0..1000)
            .map(|_| {
                Keypoint::new(
                    rng.uniform_in(0.0, 100.0),
                    rng.uniform_in(0.0, 100.0),
                    rng.uniform(),
                )
            })
            .collect();
        let kept = nms(&kps, 4.0, usize::MAX);
        // brute-force pairwise check
        for i in 0..kept.len() {
            for j in (i + 1)..kept.len() {
                assert!(kept[i].dist(&kept[j]) > 4.0);
            }
        }
    }

    #[test]
    fn nms_is_traversal_order_stable() {
        let mut rng = Rng::new(23);
        let kps: Vec<Keypoint> = (0..200)
            .map(|_| {
                Keypoint::new(
                    rng.uniform_in(0.0, 50.0),
                    rng.uniform_in(0.0, 50.0),
                    rng.uniform(),
                )
            })
            .collect();
        let mut reversed = kps.clone();
        reversed.reverse();
        assert_eq!(nms(&kps, 4.0, 50), nms(&reversed, 4.0, 50));
    }

    #[test]
    fn extract_single_spike() {
        let hm = map_from(16, 16, |r, c| if (r, c) == (5, 9) { 4.0 } else { -4.0 });
        let kps = extract_keypoints(&hm, 0.99, 4.0, 10).unwrap();
        assert_eq!(kps.len(), 1);
        assert_eq!((kps[0].x, kps[0].y), (9.0, 5.0));
        assert_abs_diff_eq!(kps[0].score, sigmoid(4.0), epsilon = 1e-9);
    }

    #[test]
    fn extract_zero_logit_spike_scores_half() {
        let hm = map_from(16, 16, |r, c| if (r, c) == (5, 9) { 0.0 } else { -4.0 });
        let kps = extract_keypoints(&hm, 0.99, 4.0, 10).unwrap();
        assert_eq!(kps.len(), 1);
        assert_abs_diff_eq!(kps[0].score, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn extract_respects_max_k_and_scores_in_open_interval() {
        for seed in [1u64, 2, 3] {
            let hm = random_map(48, 48, seed);
            let unlimited = extract_keypoints(&hm, 0.9, 4.0, usize::MAX).unwrap();
            for k in [1usize, 5, 50] {
                let kps = extract_keypoints(&hm, 0.9, 4.0, k).unwrap();
                assert_eq!(kps.len(), k.min(unlimited.len()));
                for kp in &kps {
                    assert!(kp.score > 0.0 && kp.score < 1.0);
                }
            }
        }
    }

    #[test]
    fn gaussian_filter_zero_in_zero_out() {
        let mask = TargetMask::zeros(9, 9);
        let out = gaussian_filter(&mask, 1.0).unwrap();
        assert!(out.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_filter_preserves_unit_mass() {
        let mut mask = TargetMask::zeros(21, 21);
        mask.set(10, 10, 1.0);
        let out = gaussian_filter(&mask, 1.0).unwrap();
        let sum: f64 = out.values().data().iter().map(|&v| v as f64).sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn gaussian_filter_matches_direct_2d_convolution() {
        // oracle: full 2D convolution with the outer-product kernel
        let mut mask = TargetMask::zeros(11, 11);
        mask.set(5, 5, 1.0);
        let out = gaussian_filter(&mask, 1.0).unwrap();
        let k1 = gaussian_kernel(1.0);
        let half = (k1.len() / 2) as i64;
        for r in 0..11i64 {
            for c in 0..11i64 {
                let mut acc = 0.0f64;
                for (i, &kr) in k1.iter().enumerate() {
                    for (j, &kc) in k1.iter().enumerate() {
                        let sr = reflect(r + i as i64 - half, 11);
                        let sc = reflect(c + j as i64 - half, 11);
                        acc += kr * kc * mask.get(sr, sc) as f64;
                    }
                }
                assert_abs_diff_eq!(out.get(r as usize, c as usize) as f64, acc, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn label_smooth_identity_and_binary_values() {
        let mut mask = TargetMask::zeros(4, 4);
        mask.set(1, 1, 1.0);
        let same = label_smooth(&mask, 0.0).unwrap();
        assert_eq!(same.values(), mask.values());
        let sm = label_smooth(&mask, 0.1).unwrap();
        for &v in sm.values().data() {
            assert!((v - 0.1).abs() < 1e-6 || (v - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn label_smooth_composition_law() {
        // smoothing twice with eps equals once with eps' = 2 eps (1 - eps)
        let mut rng = Rng::new(6);
        let data: Vec<f32> = (0..64).map(|_| rng.uniform() as f32).collect();
        let mask = TargetMask::new(Tensor::new(vec![8, 8], data).unwrap(), MaskKind::Smoothed)
            .unwrap();
        let eps = 0.12;
        let twice = label_smooth(&label_smooth(&mask, eps).unwrap(), eps).unwrap();
        let once = label_smooth(&mask, 2.0 * eps * (1.0 - eps)).unwrap();
        for (a, b) in twice.values().data().iter().zip(once.values().data()) {
            assert_abs_diff_eq!(*a as f64, *b as f64, epsilon = 1e-6);
        }
    }

    #[test]
    fn histogram_constant_map_masses_one_bin() {
        let hm = map_from(10, 10, |_, _| -3.0);
        let bins = activation_histogram(&hm, 20, -10.0, 10.0).unwrap();
        let total: usize = bins.iter().map(|&(_, n)| n).sum();
        assert_eq!(total, 100);
        let hot: Vec<_> = bins.iter().filter(|&&(_, n)| n > 0).collect();
        assert_eq!(hot.len(), 1);
        assert!((hot[0].0 - (-3.0)).abs() <= 0.5);
    }

    #[test]
    fn sigmoid_of_minus_three_is_the_suppression_level() {
        assert!((sigmoid(-3.0) - 0.0474).abs() < 1e-3);
    }

    #[test]
    fn histogram_counts_conserve_pixels() {
        let hm = random_map(37, 53, 9);
        let bins = activation_histogram(&hm, 7, -1.0, 1.0).unwrap();
        let total: usize = bins.iter().map(|&(_, n)| n).sum();
        assert_eq!(total, 37 * 53);
    }
}
