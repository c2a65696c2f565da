//! Forward-only kernels shared by the tape and by inference paths.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (is, ks) = (input.shape(), kernels.shape());
    if is.len() != 3 {
        return Err(Error::shape("conv2d", format!("input must be C×H×W, got {is:?}")));
    }
    if ks.len() != 4 {
        return Err(Error::shape("conv2d", format!("kernels must be K×C×kh×kw, got {ks:?}")));
    }
    let (c, h, w) = (is[0], is[1], is[2]);
    let (k, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c {
        return Err(Error::shape("conv2d", format!("kernel channels {kc} != input channels {c}")));
    }
    if bias.shape() != [k] {
        return Err(Error::shape("conv2d", format!("bias shape {:?} != [{k}]", bias.shape())));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * pad, w + 2 * pad),
        ));
    }
    let geom = ConvGeom { c, h, w, k, kh, kw, oh: (h + 2 * pad - kh) / stride + 1, ow: (w + 2 * pad - kw) / stride + 1, stride, pad };
    let (x, wt, b) = (input.data(), kernels.data(), bias.data());
    let (oh, ow) = (geom.oh, geom.ow);
    let mut out = vec![0.0; k * oh * ow];
    for ko in 0..k {
        out[ko * oh * ow..(ko + 1) * oh * ow].fill(b[ko]);
    }
    geom.for_each_tap(|ko, ci, i, j, oys, oxs| {
        let wv = wt[((ko * c + ci) * kh + i) * kw + j];
        for oy in oys {
            let iy = oy * stride + i - pad;
            let xrow = &x[(ci * h + iy) * w..(ci * h + iy + 1) * w];
            let orow = &mut out[(ko * oh + oy) * ow..(ko * oh + oy + 1) * ow];
            if stride == 1 {
                let xs = &xrow[oxs.start + j - pad..oxs.end + j - pad];
                for (o, xv) in orow[oxs.clone()].iter_mut().zip(xs) {
                    *o += wv * xv;
                }
            } else {
                for ox in oxs.clone() {
                    orow[ox] += wv * xrow[ox * stride + j - pad];
                }
            }
        }
    });
    Tensor::new(vec![k, oh, ow], out)
}

/// Sizes of one convolution, shared by the forward and backward kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output positions `o` for which `o·stride + tap − pad` lands inside `0..extent`.
fn valid_outputs(tap: usize, extent: usize, out: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    if extent + pad <= tap {
        return 0..0;
    }
    let hi = ((extent - 1 + pad - tap) / stride + 1).min(out);
    lo.min(hi)..hi
}

impl ConvGeom {
    /// Calls `f(ko, ci, i, j, valid output rows, valid output columns)` for
    /// every kernel tap.
    pub(crate) fn for_each_tap<F>(&self, mut f: F)
    where
        F: FnMut(usize, usize, usize, usize, std::ops::Range<usize>, std::ops::Range<usize>),
    {
        for ko in 0..self.k {
            for ci in 0..self.c {
                for i in 0..self.kh {
                    let oys = valid_outputs(i, self.h, self.oh, self.stride, self.pad);
                    for j in 0..self.kw {
                        let oxs = valid_outputs(j, self.w, self.ow, self.stride, self.pad);
                        f(ko, ci, i, j, oys.clone(), oxs);
                    }
                }
            }
        }
    }

    /// Gradients w.r.t. input, kernels and bias given the output gradient.
    pub(crate) fn backward(&self, x: &[f64], wt: &[f64], g: &[f64], need_x: bool, need_w: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let ConvGeom { c, h, w, k, kh, kw, oh, ow, stride, pad } = *self;
        let mut dx = vec![0.0; if need_x { x.len() } else { 0 }];
        let mut dw = vec![0.0; if need_w { wt.len() } else { 0 }];
        let db: Vec<f64> = (0..k).map(|ko| g[ko * oh * ow..(ko + 1) * oh * ow].iter().sum()).collect();
        self.for_each_tap(|ko, ci, i, j, oys, oxs| {
            let wi = ((ko * c + ci) * kh + i) * kw + j;
            let mut acc_w = 0.0;
            for oy in oys {
                let iy = oy * stride + i - pad;
                let grow = &g[(ko * oh + oy) * ow..(ko * oh + oy + 1) * ow];
                let base = (ci * h + iy) * w;
                if need_w {
                    let xrow = &x[base..base + w];
                    if stride == 1 {
                        let xs = &xrow[oxs.start + j - pad..oxs.end + j - pad];
                        acc_w += grow[oxs.clone()].iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    } else {
                        for ox in oxs.clone() {
                            acc_w += grow[ox] * xrow[ox * stride + j - pad];
                        }
                    }
                }
                if need_x {
                    let wv = wt[wi];
                    let dxrow = &mut dx[base..base + w];
                    if stride == 1 {
                        let dxs = &mut dxrow[oxs.start + j - pad..oxs.end + j - pad];
                        for (d, gv) in dxs.iter_mut().zip(&grow[oxs.clone()]) {
                            *d += gv * wv;
                        }
                    } else {
                        for ox in oxs.clone() {
                            dxrow[ox * stride + j - pad] += grow[ox] * wv;
                        }
                    }
                }
            }
            if need_w {
                dw[wi] += acc_w;
            }
        });
        (dx, dw, db)
    }
}

/// Max pooling; also returns the flat input index chosen for every output cell
/// (first maximum in scan order on ties).
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::shape("maxpool2d", format!("input must be C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if window == 0 || stride == 0 {
        return Err(Error::invalid("maxpool2d", "window and stride must be at least 1"));
    }
    if window > h || window > w {
        return Err(Error::shape("maxpool2d", format!("window {window} exceeds spatial extent {h}×{w}")));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                for i in 0..window {
                    for j in 0..window {
                        let idx = (ci * h + oy * stride + i) * w + ox * stride + j;
                        if best == usize::MAX || x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::new(input.shape().to_vec(), input.data().iter().map(|&x| x.max(0.0)).collect())
        .expect("same shape")
}

pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let d = input.len();
    let ws = weight.shape();
    if ws.len() != 2 || ws[1] != d {
        return Err(Error::shape("linear", format!("weight {ws:?} incompatible with input of length {d}")));
    }
    let m = ws[0];
    if let Some(b) = bias {
        if b.len() != m {
            return Err(Error::shape("linear", format!("bias length {} != {m}", b.len())));
        }
    }
    let (x, w) = (input.data(), weight.data());
    let out = (0..m)
        .map(|r| {
            let dot: f64 = w[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum();
            dot + bias.map_or(0.0, |b| b.data()[r])
        })
        .collect();
    Tensor::new(vec![m], out)
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::shape("global_avg_pool", format!("input must be K×H×W, got {s:?}")));
    }
    let area = s[1] * s[2];
    let out = input.data().chunks(area).map(|ch| ch.iter().sum::<f64>() / area as f64).collect();
    Tensor::new(vec![s[0]], out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Returns `(loss, softmax probabilities)`. Caller validates `target`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let loss = max + sum.ln() - logits[target];
    let probs = logits.iter().map(|z| (z - max).exp() / sum).collect();
    (loss, probs)
}

/// Checked entry point for a single logits vector.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("target class {target} out of range for {} classes", logits.len()),
        ));
    }
    Ok(softmax_cross_entropy(logits.data(), target).0)
}
