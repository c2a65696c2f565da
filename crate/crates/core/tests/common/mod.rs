//! Shared fixtures and brute-force reference implementations. Oracles here
//! use plain nested loops over raw slices and never call library math.
#![allow(dead_code)]

pub mod metric_oracles;
pub mod suites;

use rand::Rng as _;
use retina_core::dataset::{generate_synthetic_dataset, split_dataset, DatasetManifest, RetinalImage, SplitSizing, SynthConfig};
use retina_core::language::generator::{EMBED, LSTM_B, LSTM_WH, LSTM_WX, OUT_B, OUT_W};
use retina_core::language::{DecoderConfig, KeywordMode, END, START};
use retina_core::nn::{ParamSet, Tensor};
use retina_core::rng::{seeded, Rng};

pub fn uniform(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Every tensor in `params` replaced by uniform draws in `(-scale, scale)`.
pub fn randomize(params: &ParamSet, rng: &mut Rng, scale: f64) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        out.insert(name, uniform(rng, t.shape(), scale));
    }
    out
}

pub fn conv2d_naive(x: &[f64], c: usize, h: usize, w: usize, k: &[f64], kn: usize, kh: usize, kw: usize, b: &[f64], stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; kn * oh * ow];
    for o in 0..kn {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy) as isize - pad as isize;
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[(ci * h + iy as usize) * w + ix as usize] * k[((o * c + ci) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

pub fn maxpool_naive(x: &[f64], c: usize, h: usize, w: usize, win: usize, stride: usize) -> Vec<f64> {
    let oh = (h - win) / stride + 1;
    let ow = (w - win) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..win {
                    for dx in 0..win {
                        m = m.max(x[(ci * h + oy * stride + dy) * w + ox * stride + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn matvec_naive(w: &[f64], rows: usize, cols: usize, x: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let mut acc = b.map_or(0.0, |b| b[r]);
            for c in 0..cols {
                acc += w[r * cols + c] * x[c];
            }
            acc
        })
        .collect()
}

pub fn gap_naive(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c).map(|ci| x[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

pub fn log_softmax_naive(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step, gates stacked input/forget/output/candidate.
pub fn lstm_naive(x: &[f64], h: &[f64], c: &[f64], wx: &[f64], wh: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hd = h.len();
    let gx = matvec_naive(wx, 4 * hd, x.len(), x, Some(b));
    let gh = matvec_naive(wh, 4 * hd, hd, h, None);
    let g: Vec<f64> = gx.iter().zip(&gh).map(|(a, b)| a + b).collect();
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for j in 0..hd {
        let i = sig(g[j]);
        let f = sig(g[hd + j]);
        let o = sig(g[2 * hd + j]);
        let cand = g[3 * hd + j].tanh();
        c2[j] = f * c[j] + i * cand;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

/// Reference decoder: prime with `fused`, feed `<start>` then each token,
/// summing next-token log-probabilities.
pub fn sequence_log_prob_naive(params: &ParamSet, fused: &[f64], tokens: &[usize]) -> f64 {
    let g = |n: &str| params.get(n).unwrap();
    let (wx, wh, b, emb, ow, ob) = (g(LSTM_WX), g(LSTM_WH), g(LSTM_B), g(EMBED), g(OUT_W), g(OUT_B));
    let hd = wh.shape()[1];
    let e = emb.shape()[1];
    let v = ob.len();
    let (mut h, mut c) = lstm_naive(fused, &vec![0.0; hd], &vec![0.0; hd], wx.data(), wh.data(), b.data());
    let mut prev = START;
    let mut total = 0.0;
    for &t in tokens {
        let x = &emb.data()[prev * e..(prev + 1) * e];
        (h, c) = lstm_naive(x, &h, &c, wx.data(), wh.data(), b.data());
        let logits = matvec_naive(ow.data(), v, hd, &h, Some(ob.data()));
        total += log_softmax_naive(&logits)[t];
        prev = t;
    }
    total
}

/// All terminal sequences: stop at the first `<end>` or at `max_len` tokens.
pub fn enumerate_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut done = Vec::new();
    let mut frontier = vec![Vec::new()];
    while let Some(seq) = frontier.pop() {
        for t in 0..vocab {
            let mut s: Vec<usize> = seq.clone();
            s.push(t);
            if t == END || s.len() == max_len {
                done.push(s);
            } else {
                frontier.push(s);
            }
        }
    }
    done
}

pub fn decoder_config(feature_dim: usize, vocab: usize, kw_vocab: usize, mode: KeywordMode) -> DecoderConfig {
    DecoderConfig { feature_dim, embed_dim: 4, hidden_dim: 5, vocab_size: vocab, keyword_vocab_size: kw_vocab, keyword_mode: mode }
}

/// Synthetic dataset split 60/20/20 with the given seed.
pub fn synthetic(seed: u64, records: usize) -> (DatasetManifest, Vec<RetinalImage>) {
    let ds = generate_synthetic_dataset(&SynthConfig { seed, records, ..Default::default() }).unwrap();
    let m = split_dataset(&ds.manifest, SplitSizing::Ratios { train: 0.6, val: 0.2, test: 0.2 }, seed, false).unwrap();
    (m, ds.images)
}

pub fn rng(seed: u64) -> Rng {
    seeded(seed)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
