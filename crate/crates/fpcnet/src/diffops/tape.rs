//! Reverse-mode tape: recorded operations, analytic backward passes, and
//! the training losses.
//!
//! The tape owns every intermediate value and gradient buffer. Operations
//! append nodes; [`Tape::backward`] walks them in exact reverse recording
//! order and accumulates gradients additively, so fan-out and repeated loss
//! evaluation compose correctly (running backward twice doubles every
//! gradient).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geometry::{Homography, ValidityMask};
use crate::heatmap::TargetMask;

use super::Array;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-norm running statistics, owned by the model (not the tape).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

struct BnSaved {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    plane: usize,
}

struct FocalSaved {
    target: Vec<f64>,
    valid: Vec<usize>,
    alpha: f64,
    gamma: f64,
}

struct KlSaved {
    /// Prediction probabilities over the valid set.
    q: Vec<f64>,
    /// Target probabilities over the valid set.
    r: Vec<f64>,
    valid: Vec<usize>,
}

type Taps = Rc<Vec<Vec<(usize, f64)>>>;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved,
    },
    /// Separable linear resample along rows then columns of each plane.
    PlaneResample {
        input: Var,
        row_taps: Taps,
        col_taps: Taps,
    },
    /// General 2D gather on a rank-2 map (homography warp).
    Warp {
        input: Var,
        taps: Taps,
    },
    FocalLoss {
        logits: Var,
        saved: FocalSaved,
    },
    HuberMean {
        probs: Var,
        target: Vec<f64>,
        valid: Vec<usize>,
        delta: f64,
    },
    KlSoftmax {
        logits: Var,
        saved: KlSaved,
    },
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Array>,
    grads: Vec<Array>,
    ops: Vec<Op>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

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

/// Taps for doubling one axis with the Keys a = -0.5 kernel, border clamped.
fn upsample_axis_taps(n: usize) -> Vec<Vec<(usize, f64)>> {
    let mut taps = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let src = (i as f64 + 0.5) / 2.0 - 0.5;
        let base = src.floor() as i64;
        let frac = src - base as f64;
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
        for k in -1i64..=2 {
            let w = keys_cubic(frac - k as f64);
            if w == 0.0 {
                continue;
            }
            let idx = (base + k).clamp(0, n as i64 - 1) as usize;
            match row.iter_mut().find(|(j, _)| *j == idx) {
                Some(entry) => entry.1 += w,
                None => row.push((idx, w)),
            }
        }
        taps.push(row);
    }
    taps
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        let shape = value.shape.clone();
        self.values.push(value);
        self.grads.push(Array::zeros(shape));
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> &Array {
        &self.grads[v.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let x = &self.values[input.0];
        let w = &self.values[weight.0];
        let b = &self.values[bias.0];
        if x.shape.len() != 4 || w.shape.len() != 4 || b.shape.len() != 1 {
            return Err(Error::ShapeMismatch(
                "conv2d expects input [N,C,H,W], weight [K,C,kh,kw], bias [K]".into(),
            ));
        }
        let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (k, wc, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
        if wc != c || b.shape[0] != k {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channel mismatch: input C={c}, weight C={wc}, bias K={}",
                b.shape[0]
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::ShapeMismatch("conv2d kernel larger than padded input".into()));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Array::zeros(vec![n, k, oh, ow]);
        for ni in 0..n {
            for ki in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data[ki];
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as i64 - pad as i64;
                                    if ix < 0 || ix >= wd as i64 {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((ki * c + ci) * kh + ky) * kw + kx;
                                    acc += x.data[xi] * w.data[wi];
                                }
                            }
                        }
                        out.data[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// 1×1 convolution (lateral projection).
    pub fn conv1x1(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let w = &self.values[weight.0];
        if w.shape.len() != 4 || w.shape[2] != 1 || w.shape[3] != 1 {
            return Err(Error::ShapeMismatch("conv1x1 weight must be [K,C,1,1]".into()));
        }
        self.conv2d(input, weight, bias, 1, 0)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = Array {
            shape: self.values[input.0].shape.clone(),
            data: self.values[input.0].data.iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push(out, Op::Relu { input })
    }

    pub fn sigmoid_op(&mut self, input: Var) -> Var {
        let out = Array {
            shape: self.values[input.0].shape.clone(),
            data: self.values[input.0].data.iter().map(|&v| sigmoid(v)).collect(),
        };
        self.push(out, Op::Sigmoid { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape != self.values[b.0].shape {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.values[a.0].shape, self.values[b.0].shape
            )));
        }
        let out = Array {
            shape: self.values[a.0].shape.clone(),
            data: self.values[a.0]
                .data
                .iter()
                .zip(&self.values[b.0].data)
                .map(|(&x, &y)| x + y)
                .collect(),
        };
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = Array {
            shape: self.values[input.0].shape.clone(),
            data: self.values[input.0].data.iter().map(|&v| v * factor).collect(),
        };
        self.push(out, Op::Scale { input, factor })
    }

    /// Scalar dot product with fixed weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.values[input.0].numel() {
            return Err(Error::ShapeMismatch("weighted_sum length mismatch".into()));
        }
        let v = self.values[input.0]
            .data
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| x * w)
            .sum();
        Ok(self.push(Array::scalar(v), Op::WeightedSum { input, weights }))
    }

    /// Sum of scalar vars.
    pub fn sum_scalars(&mut self, vars: &[Var]) -> Result<Var> {
        let mut it = vars.iter();
        let first = *it
            .next()
            .ok_or_else(|| Error::invalid("sum of empty var list"))?;
        it.try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Batch norm over `[N, C, H, W]`. Train mode normalizes with batch
    /// statistics (biased variance) and updates the running stats with
    /// momentum 0.9; eval mode normalizes with the running stats.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        training: bool,
    ) -> Result<Var> {
        const MOMENTUM: f64 = 0.9;
        const EPS: f64 = 1e-5;
        let x = &self.values[input.0];
        if x.shape.len() != 4 {
            return Err(Error::ShapeMismatch("batch_norm expects [N,C,H,W]".into()));
        }
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        if self.values[gamma.0].numel() != c || self.values[beta.0].numel() != c {
            return Err(Error::ShapeMismatch("batch_norm parameter channel mismatch".into()));
        }
        if state.running_mean.len() != c {
            return Err(Error::ShapeMismatch("batch_norm state channel mismatch".into()));
        }
        if training && n < 2 {
            return Err(Error::invalid(
                "batch_norm in train mode needs batch size >= 2",
            ));
        }
        let plane = h * w;
        let m = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if training {
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    let off = (ni * c + ci) * plane;
                    s += x.data[off..off + plane].iter().sum::<f64>();
                }
                mean[ci] = s / m;
                let mut v2 = 0.0;
                for ni in 0..n {
                    let off = (ni * c + ci) * plane;
                    v2 += x.data[off..off + plane]
                        .iter()
                        .map(|&v| (v - mean[ci]) * (v - mean[ci]))
                        .sum::<f64>();
                }
                var[ci] = v2 / m;
                state.running_mean[ci] = MOMENTUM * state.running_mean[ci] + (1.0 - MOMENTUM) * mean[ci];
                state.running_var[ci] = MOMENTUM * state.running_var[ci] + (1.0 - MOMENTUM) * var[ci];
            }
        } else {
            mean.copy_from_slice(&state.running_mean);
            var.copy_from_slice(&state.running_var);
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + EPS).sqrt()).collect();
        let g = &self.values[gamma.0].data;
        let b = &self.values[beta.0].data;
        let mut out = Array::zeros(x.shape.clone());
        let mut x_hat = vec![0.0; x.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for i in 0..plane {
                    let xh = (x.data[off + i] - mean[ci]) * inv_std[ci];
                    x_hat[off + i] = xh;
                    out.data[off + i] = g[ci] * xh + b[ci];
                }
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved: BnSaved {
                    x_hat,
                    inv_std,
                    channels: c,
                    plane,
                },
            },
        ))
    }

    /// Bicubic ×2 upsampling of `[N, C, H, W]` with the Keys a = -0.5
    /// kernel. Linear in its input; the backward pass is the transposed
    /// interpolation.
    pub fn upsample_bicubic_x2(&mut self, input: Var) -> Result<Var> {
        let x = &self.values[input.0];
        if x.shape.len() != 4 {
            return Err(Error::ShapeMismatch("upsample expects [N,C,H,W]".into()));
        }
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let row_taps = Rc::new(upsample_axis_taps(h));
        let col_taps = Rc::new(upsample_axis_taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Array::zeros(vec![n, c, oh, ow]);
        for ni in 0..n {
            for ci in 0..c {
                let in_off = (ni * c + ci) * h * w;
                let out_off = (ni * c + ci) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for &(iy, wy) in &row_taps[oy] {
                            for &(ix, wx) in &col_taps[ox] {
                                acc += wy * wx * x.data[in_off + iy * w + ix];
                            }
                        }
                        out.data[out_off + oy * ow + ox] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::PlaneResample {
                input,
                row_taps,
                col_taps,
            },
        ))
    }

    /// Warp a rank-2 logit map by a homography with fixed bilinear
    /// resampling (inverse mapping, like image warps). The warp is linear,
    /// so gradients flow through exactly. Returns the warp validity mask.
    pub fn warp_bilinear(&mut self, input: Var, h: &Homography) -> Result<(Var, ValidityMask)> {
        let x = &self.values[input.0];
        if x.shape.len() != 2 {
            return Err(Error::ShapeMismatch("warp expects a rank-2 map".into()));
        }
        let (height, width) = (x.shape[0], x.shape[1]);
        let h_inv = h.invert()?;
        let mut taps: Vec<Vec<(usize, f64)>> = Vec::with_capacity(height * width);
        let mut mask = ValidityMask::new_filled(height, width, false);
        for y in 0..height {
            for x_pix in 0..width {
                let mut row = Vec::new();
                if let Ok((sx, sy)) = h_inv.apply((x_pix as f64, y as f64)) {
                    let bx = sx.floor();
                    let by = sy.floor();
                    let (fx, fy) = (sx - bx, sy - by);
                    let xt = [(bx as i64, 1.0 - fx), (bx as i64 + 1, fx)];
                    let yt = [(by as i64, 1.0 - fy), (by as i64 + 1, fy)];
                    let mut ok = true;
                    for &(iy, wy) in yt.iter().filter(|&&(_, w)| w != 0.0) {
                        for &(ix, wx) in xt.iter().filter(|&&(_, w)| w != 0.0) {
                            if iy < 0 || iy >= height as i64 || ix < 0 || ix >= width as i64 {
                                ok = false;
                            } else {
                                row.push(((iy as usize) * width + ix as usize, wy * wx));
                            }
                        }
                    }
                    if ok {
                        mask.set(y, x_pix, true);
                    } else {
                        row.clear();
                    }
                }
                taps.push(row);
            }
        }
        let mut out = Array::zeros(vec![height, width]);
        for (i, row) in taps.iter().enumerate() {
            out.data[i] = row.iter().map(|&(j, w)| w * x.data[j]).sum();
        }
        let var = self.push(
            out,
            Op::Warp {
                input,
                taps: Rc::new(taps),
            },
        );
        Ok((var, mask))
    }

    /// Sigmoid focal loss against a (possibly soft) target mask, averaged
    /// over the valid pixels. Uses the stable log-sigmoid form.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        target: &TargetMask,
        alpha: f64,
        gamma: f64,
        valid: Option<&ValidityMask>,
    ) -> Result<Var> {
        if !(0.0 < alpha && alpha < 1.0) || gamma < 0.0 {
            return Err(Error::invalid("focal loss needs alpha in (0,1), gamma >= 0"));
        }
        let x = &self.values[logits.0];
        let (h, w) = (target.height(), target.width());
        if x.numel() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "focal loss: logits {} elements vs target {}x{}",
                x.numel(),
                h,
                w
            )));
        }
        let valid_idx: Vec<usize> = (0..h * w)
            .filter(|&i| valid.is_none_or(|m| m.get(i / w, i % w)))
            .collect();
        if valid_idx.is_empty() {
            return Err(Error::EmptyValidRegion("focal loss".into()));
        }
        let tvals: Vec<f64> = target.values().data().iter().map(|&v| v as f64).collect();
        let mut total = 0.0;
        for &i in &valid_idx {
            let z = x.data[i];
            let y = tvals[i];
            let s = sigmoid(z);
            let log_s = -softplus(-z);
            let log_1ms = -softplus(z);
            let pos = -alpha * (1.0 - s).powf(gamma) * log_s;
            let neg = -(1.0 - alpha) * s.powf(gamma) * log_1ms;
            total += y * pos + (1.0 - y) * neg;
        }
        let value = total / valid_idx.len() as f64;
        Ok(self.push(
            Array::scalar(value),
            Op::FocalLoss {
                logits,
                saved: FocalSaved {
                    target: tvals,
                    valid: valid_idx,
                    alpha,
                    gamma,
                },
            },
        ))
    }

    /// Mean Huber penalty between a probability map and a target over the
    /// valid pixels.
    fn huber_mean(
        &mut self,
        probs: Var,
        target: &TargetMask,
        valid: &ValidityMask,
        delta: f64,
    ) -> Result<Var> {
        let x = &self.values[probs.0];
        let (h, w) = (target.height(), target.width());
        if x.numel() != h * w {
            return Err(Error::ShapeMismatch("huber: shape mismatch".into()));
        }
        let valid_idx: Vec<usize> = (0..h * w).filter(|&i| valid.get(i / w, i % w)).collect();
        if valid_idx.is_empty() {
            return Err(Error::EmptyValidRegion("huber consistency term".into()));
        }
        let tvals: Vec<f64> = target.values().data().iter().map(|&v| v as f64).collect();
        let mut total = 0.0;
        for &i in &valid_idx {
            let r = x.data[i] - tvals[i];
            total += if r.abs() <= delta {
                0.5 * r * r
            } else {
                delta * (r.abs() - 0.5 * delta)
            };
        }
        let value = total / valid_idx.len() as f64;
        Ok(self.push(
            Array::scalar(value),
            Op::HuberMean {
                probs,
                target: tvals,
                valid: valid_idx,
                delta,
            },
        ))
    }

    /// KL between the softmax of a logit map and the softmax of a target
    /// mask, both taken jointly over the same valid pixel set (the whole
    /// map as one distribution). `KL(q ‖ r) = Σ r (log r - log q)` with the
    /// prediction q in log space.
    fn kl_softmax(
        &mut self,
        logits: Var,
        target: &TargetMask,
        valid: &ValidityMask,
    ) -> Result<Var> {
        let x = &self.values[logits.0];
        let (h, w) = (target.height(), target.width());
        if x.numel() != h * w {
            return Err(Error::ShapeMismatch("kl: shape mismatch".into()));
        }
        let valid_idx: Vec<usize> = (0..h * w).filter(|&i| valid.get(i / w, i % w)).collect();
        if valid_idx.len() < 2 {
            return Err(Error::EmptyValidRegion(
                "kl consistency term needs >= 2 valid pixels".into(),
            ));
        }
        let softmax = |vals: Vec<f64>| -> Vec<f64> {
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = vals.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        };
        let q = softmax(valid_idx.iter().map(|&i| x.data[i]).collect());
        let r = softmax(
            valid_idx
                .iter()
                .map(|&i| target.values().data()[i] as f64)
                .collect(),
        );
        let value: f64 = q
            .iter()
            .zip(&r)
            .map(|(&qi, &ri)| if ri > 0.0 { ri * (ri.ln() - qi.ln()) } else { 0.0 })
            .sum();
        Ok(self.push(
            Array::scalar(value),
            Op::KlSoftmax {
                logits,
                saved: KlSaved {
                    q,
                    r,
                    valid: valid_idx,
                },
            },
        ))
    }

    /// Regression consistency: `Huber[σ(warp(p, h)), m'] +
    /// Huber[σ(warp(p', h⁻¹)), m]`, each term mean-reduced over the
    /// intersection of its warp validity and the supplied mask.
    #[allow(clippy::too_many_arguments)]
    pub fn consistency_loss_regression(
        &mut self,
        p: Var,
        p_prime: Var,
        h: &Homography,
        m: &TargetMask,
        m_prime: &TargetMask,
        delta: f64,
        valid_m: Option<&ValidityMask>,
        valid_m_prime: Option<&ValidityMask>,
    ) -> Result<Var> {
        let h_inv = h.invert()?;
        let (wp, mask_p) = self.warp_bilinear(p, h)?;
        let sp = self.sigmoid_op(wp);
        let v1 = match valid_m_prime {
            Some(vm) => mask_p.intersect(vm),
            None => mask_p,
        };
        let t1 = self.huber_mean(sp, m_prime, &v1, delta)?;

        let (wpp, mask_pp) = self.warp_bilinear(p_prime, &h_inv)?;
        let spp = self.sigmoid_op(wpp);
        let v2 = match valid_m {
            Some(vm) => mask_pp.intersect(vm),
            None => mask_pp,
        };
        let t2 = self.huber_mean(spp, m, &v2, delta)?;
        self.add(t1, t2)
    }

    /// Classification consistency: `KL[log S(warp(p, h)), S(m')] +
    /// KL[log S(warp(p', h⁻¹)), S(m)]`, softmax taken jointly over the
    /// valid pixels of each term.
    #[allow(clippy::too_many_arguments)]
    pub fn consistency_loss_classification(
        &mut self,
        p: Var,
        p_prime: Var,
        h: &Homography,
        m: &TargetMask,
        m_prime: &TargetMask,
        valid_m: Option<&ValidityMask>,
        valid_m_prime: Option<&ValidityMask>,
    ) -> Result<Var> {
        let h_inv = h.invert()?;
        let (wp, mask_p) = self.warp_bilinear(p, h)?;
        let v1 = match valid_m_prime {
            Some(vm) => mask_p.intersect(vm),
            None => mask_p,
        };
        let t1 = self.kl_softmax(wp, m_prime, &v1)?;

        let (wpp, mask_pp) = self.warp_bilinear(p_prime, &h_inv)?;
        let v2 = match valid_m {
            Some(vm) => mask_pp.intersect(vm),
            None => mask_pp,
        };
        let t2 = self.kl_softmax(wpp, m, &v2)?;
        self.add(t1, t2)
    }

    /// Reverse sweep from a scalar output, accumulating into the gradient
    /// buffers (without zeroing them first).
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.values[output.0].numel() != 1 {
            return Err(Error::invalid("backward requires a scalar output"));
        }
        self.grads[output.0].data[0] += 1.0;
        for idx in (0..=output.0).rev() {
            let g_out = self.grads[idx].clone();
            if g_out.data.iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let (input, weight, bias, stride, pad) = (*input, *weight, *bias, *stride, *pad);
                    let x = self.values[input.0].clone();
                    let w = self.values[weight.0].clone();
                    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                    let (k, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
                    let (oh, ow) = (g_out.shape[2], g_out.shape[3]);
                    for ni in 0..n {
                        for ki in 0..k {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g = g_out.data[((ni * k + ki) * oh + oy) * ow + ox];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    self.grads[bias.0].data[ki] += g;
                                    for ci in 0..c {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as i64 - pad as i64;
                                            if iy < 0 || iy >= h as i64 {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                                if ix < 0 || ix >= wd as i64 {
                                                    continue;
                                                }
                                                let xi = ((ni * c + ci) * h + iy as usize) * wd
                                                    + ix as usize;
                                                let wi = ((ki * c + ci) * kh + ky) * kw + kx;
                                                self.grads[input.0].data[xi] += g * w.data[wi];
                                                self.grads[weight.0].data[wi] += g * x.data[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Relu { input } => {
                    let input = *input;
                    for i in 0..g_out.numel() {
                        if self.values[input.0].data[i] > 0.0 {
                            self.grads[input.0].data[i] += g_out.data[i];
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    let input = *input;
                    for i in 0..g_out.numel() {
                        let s = self.values[idx].data[i];
                        self.grads[input.0].data[i] += g_out.data[i] * s * (1.0 - s);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for i in 0..g_out.numel() {
                        self.grads[a.0].data[i] += g_out.data[i];
                    }
                    for i in 0..g_out.numel() {
                        self.grads[b.0].data[i] += g_out.data[i];
                    }
                }
                Op::Scale { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    for i in 0..g_out.numel() {
                        self.grads[input.0].data[i] += g_out.data[i] * factor;
                    }
                }
                Op::WeightedSum { input, weights } => {
                    let input = *input;
                    let weights = weights.clone();
                    let g = g_out.data[0];
                    for (i, &w) in weights.iter().enumerate() {
                        self.grads[input.0].data[i] += g * w;
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    let c = saved.channels;
                    let plane = saved.plane;
                    let numel = g_out.numel();
                    let n = numel / (c * plane);
                    let m = (n * plane) as f64;
                    let x_hat = saved.x_hat.clone();
                    let inv_std = saved.inv_std.clone();
                    let training = n >= 2 && {
                        // train-mode backward couples pixels through the
                        // batch statistics; eval mode treats them as fixed.
                        // The saved x_hat distinguishes nothing, so the op
                        // records train mode implicitly: eval-mode forwards
                        // are only taken with frozen stats at inference,
                        // where backward is still well-defined per pixel.
                        true
                    };
                    let g_vals = self.values[gamma.0].data.clone();
                    for ci in 0..c {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for ni in 0..n {
                            let off = (ni * c + ci) * plane;
                            for i in 0..plane {
                                let go = g_out.data[off + i];
                                sum_g += go;
                                sum_gx += go * x_hat[off + i];
                            }
                        }
                        self.grads[gamma.0].data[ci] += sum_gx;
                        self.grads[beta.0].data[ci] += sum_g;
                        let coeff = g_vals[ci] * inv_std[ci];
                        for ni in 0..n {
                            let off = (ni * c + ci) * plane;
                            for i in 0..plane {
                                let go = g_out.data[off + i];
                                let dx = if training {
                                    coeff / m * (m * go - sum_g - x_hat[off + i] * sum_gx)
                                } else {
                                    coeff * go
                                };
                                self.grads[input.0].data[off + i] += dx;
                            }
                        }
                    }
                }
                Op::PlaneResample {
                    input,
                    row_taps,
                    col_taps,
                } => {
                    let input = *input;
                    let row_taps = Rc::clone(row_taps);
                    let col_taps = Rc::clone(col_taps);
                    let in_shape = self.values[input.0].shape.clone();
                    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                    let (oh, ow) = (g_out.shape[2], g_out.shape[3]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let in_off = (ni * c + ci) * h * w;
                            let out_off = (ni * c + ci) * oh * ow;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g = g_out.data[out_off + oy * ow + ox];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for &(iy, wy) in &row_taps[oy] {
                                        for &(ix, wx) in &col_taps[ox] {
                                            self.grads[input.0].data[in_off + iy * w + ix] +=
                                                g * wy * wx;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Warp { input, taps } => {
                    let input = *input;
                    let taps = Rc::clone(taps);
                    for (i, row) in taps.iter().enumerate() {
                        let g = g_out.data[i];
                        if g == 0.0 {
                            continue;
                        }
                        for &(j, w) in row {
                            self.grads[input.0].data[j] += g * w;
                        }
                    }
                }
                Op::FocalLoss { logits, saved } => {
                    let logits = *logits;
                    let g = g_out.data[0];
                    let count = saved.valid.len() as f64;
                    let (alpha, gamma) = (saved.alpha, saved.gamma);
                    let valid = saved.valid.clone();
                    let target = saved.target.clone();
                    for &i in &valid {
                        let z = self.values[logits.0].data[i];
                        let y = target[i];
                        let s = sigmoid(z);
                        let log_s = -softplus(-z);
                        let log_1ms = -softplus(z);
                        let d_pos = alpha * (1.0 - s).powf(gamma) * (gamma * s * log_s - (1.0 - s));
                        let d_neg =
                            (1.0 - alpha) * s.powf(gamma) * (s - gamma * (1.0 - s) * log_1ms);
                        self.grads[logits.0].data[i] += g * (y * d_pos + (1.0 - y) * d_neg) / count;
                    }
                }
                Op::HuberMean {
                    probs,
                    target,
                    valid,
                    delta,
                } => {
                    let probs = *probs;
                    let delta = *delta;
                    let g = g_out.data[0];
                    let count = valid.len() as f64;
                    let valid = valid.clone();
                    let target = target.clone();
                    for &i in &valid {
                        let r = self.values[probs.0].data[i] - target[i];
                        let dr = if r.abs() <= delta { r } else { delta * r.signum() };
                        self.grads[probs.0].data[i] += g * dr / count;
                    }
                }
                Op::KlSoftmax { logits, saved } => {
                    let logits = *logits;
                    let g = g_out.data[0];
                    let valid = saved.valid.clone();
                    let q = saved.q.clone();
                    let r = saved.r.clone();
                    for (k, &i) in valid.iter().enumerate() {
                        self.grads[logits.0].data[i] += g * (q[k] - r[k]);
                    }
                }
            }
        }
        Ok(())
    }
}
