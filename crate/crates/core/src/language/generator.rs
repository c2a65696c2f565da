//! Keyword-conditioned LSTM caption decoder.
//!
//! The conditioning feature (image feature, or its average with the keyword
//! embedding) is fed once as the first LSTM input; `<start>` and then the gold
//! or generated tokens follow.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, END, PAD, START};
use crate::error::{Error, Result};
use crate::nn::functional::{self, log_softmax};
use crate::nn::lstm::{lstm_step, LstmVars};
use crate::nn::params::{xavier_uniform, Bound};
use crate::nn::{ParamSet, Tape, Tensor, Var};
use crate::rng;

pub const IMG_PROJ_W: &str = "decoder.img_proj.weight";
pub const IMG_PROJ_B: &str = "decoder.img_proj.bias";
pub const KW_PROJ_W: &str = "kw_proj.weight";
pub const KW_PROJ_B: &str = "kw_proj.bias";
pub const EMBED: &str = "decoder.embed";
pub const LSTM_WX: &str = "decoder.lstm.w_x";
pub const LSTM_WH: &str = "decoder.lstm.w_h";
pub const LSTM_B: &str = "decoder.lstm.bias";
pub const OUT_W: &str = "decoder.out.weight";
pub const OUT_B: &str = "decoder.out.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeywordMode {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Length of the pooled image feature coming from the encoder.
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub keyword_vocab_size: usize,
    pub keyword_mode: KeywordMode,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.feature_dim, self.embed_dim, self.hidden_dim];
        if dims.contains(&0) {
            return Err(Error::invalid("decoder config", "dimensions must be positive"));
        }
        if self.vocab_size < 4 || self.keyword_vocab_size < 4 {
            return Err(Error::invalid("decoder config", "vocabularies must include the 4 reserved tokens"));
        }
        Ok(())
    }

    /// Checks that `params` carries every tensor this configuration needs,
    /// with matching shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let (k, d, h, v, vk) = (self.feature_dim, self.embed_dim, self.hidden_dim, self.vocab_size, self.keyword_vocab_size);
        let mut expected = vec![
            (IMG_PROJ_W, vec![d, k]),
            (IMG_PROJ_B, vec![d]),
            (EMBED, vec![v, d]),
            (LSTM_WX, vec![4 * h, d]),
            (LSTM_WH, vec![4 * h, h]),
            (LSTM_B, vec![4 * h]),
            (OUT_W, vec![v, h]),
            (OUT_B, vec![v]),
        ];
        if self.keyword_mode == KeywordMode::On {
            expected.push((KW_PROJ_W, vec![d, vk]));
            expected.push((KW_PROJ_B, vec![d]));
        }
        for (name, shape) in expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("'{name}' has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Fresh decoder (and keyword projection) parameters.
pub fn init_decoder_params(cfg: &DecoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let (k, d, h, v, vk) = (cfg.feature_dim, cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size, cfg.keyword_vocab_size);
    let mut r = rng::seeded(seed);
    let mut ps = ParamSet::new();
    ps.insert(IMG_PROJ_W, xavier_uniform(&mut r, &[d, k], k, d));
    ps.insert(IMG_PROJ_B, Tensor::zeros(&[d]));
    ps.insert(EMBED, xavier_uniform(&mut r, &[v, d], v, d));
    ps.insert(LSTM_WX, xavier_uniform(&mut r, &[4 * h, d], d, 4 * h));
    ps.insert(LSTM_WH, xavier_uniform(&mut r, &[4 * h, h], h, 4 * h));
    let mut bias = Tensor::zeros(&[4 * h]);
    bias.data_mut()[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
    ps.insert(LSTM_B, bias);
    ps.insert(OUT_W, xavier_uniform(&mut r, &[v, h], h, v));
    ps.insert(OUT_B, Tensor::zeros(&[v]));
    if cfg.keyword_mode == KeywordMode::On {
        ps.insert(KW_PROJ_W, xavier_uniform(&mut r, &[d, vk], vk, d));
        ps.insert(KW_PROJ_B, Tensor::zeros(&[d]));
    }
    Ok(ps)
}

/// Multi-hot bag of keyword phrases; unknown phrases set the `<unk>` slot.
pub fn keyword_vector<S: AsRef<str>>(keywords: &[S], kw_vocab: &Vocabulary) -> Tensor {
    let mut v = vec![0.0; kw_vocab.len()];
    for k in keywords {
        v[kw_vocab.index_of(k.as_ref())] = 1.0;
    }
    Tensor::vector(&v)
}

/// Keyword set → `D`-dimensional feature through the linear projection.
pub fn embed_keywords<S: AsRef<str>>(keywords: &[S], kw_vocab: &Vocabulary, params: &ParamSet) -> Result<Tensor> {
    functional::linear(&keyword_vector(keywords, kw_vocab), params.get(KW_PROJ_W)?, Some(params.get(KW_PROJ_B)?))
}

/// Pooled CNN feature → `D`-dimensional image feature.
pub fn image_feature(pooled: &Tensor, params: &ParamSet) -> Result<Tensor> {
    functional::linear(pooled, params.get(IMG_PROJ_W)?, Some(params.get(IMG_PROJ_B)?))
}

/// Elementwise average of the image and keyword features.
pub fn fuse_features(image_feat: &Tensor, keyword_feat: &Tensor) -> Result<Tensor> {
    if image_feat.shape() != keyword_feat.shape() {
        return Err(Error::shape(
            "fuse_features",
            format!("{:?} vs {:?}", image_feat.shape(), keyword_feat.shape()),
        ));
    }
    let data = image_feat.data().iter().zip(keyword_feat.data()).map(|(a, b)| (a + b) / 2.0).collect();
    Tensor::new(image_feat.shape().to_vec(), data)
}

/// The decoder's first input for a record: fused feature in keyword mode,
/// the bare image feature otherwise.
pub fn conditioning_feature<S: AsRef<str>>(
    cfg: &DecoderConfig,
    params: &ParamSet,
    pooled: &Tensor,
    keywords: &[S],
    kw_vocab: &Vocabulary,
) -> Result<Tensor> {
    let img = image_feature(pooled, params)?;
    match cfg.keyword_mode {
        KeywordMode::Off => Ok(img),
        KeywordMode::On => fuse_features(&img, &embed_keywords(keywords, kw_vocab, params)?),
    }
}

/// Tape version of [`conditioning_feature`]; `keyword_hot` is required in
/// keyword mode.
pub fn record_conditioning(tape: &mut Tape, b: &Bound, mode: KeywordMode, pooled: Var, keyword_hot: Option<Var>) -> Result<Var> {
    let img = tape.linear(pooled, b.get(IMG_PROJ_W)?, Some(b.get(IMG_PROJ_B)?))?;
    match mode {
        KeywordMode::Off => Ok(img),
        KeywordMode::On => {
            let hot = keyword_hot.ok_or_else(|| Error::invalid("conditioning", "keyword vector required"))?;
            let kw = tape.linear(hot, b.get(KW_PROJ_W)?, Some(b.get(KW_PROJ_B)?))?;
            let sum = tape.add(img, kw)?;
            tape.scale(sum, 0.5)
        }
    }
}

fn lstm_vars(b: &Bound) -> Result<LstmVars> {
    Ok(LstmVars { w_x: b.get(LSTM_WX)?, w_h: b.get(LSTM_WH)?, bias: b.get(LSTM_B)? })
}

fn validate_target(target: &[usize]) -> Result<&[usize]> {
    let mut end = target.len();
    while end > 0 && target[end - 1] == PAD {
        end -= 1;
    }
    let t = &target[..end];
    if t.len() < 2 || t[0] != START || t[t.len() - 1] != END {
        return Err(Error::invalid("caption_loss", "target must begin with <start> and end with <end>"));
    }
    Ok(t)
}

/// Teacher-forced mean cross-entropy over the target's prediction steps.
pub fn record_caption_loss(tape: &mut Tape, b: &Bound, fused: Var, target: &[usize]) -> Result<Var> {
    let target = validate_target(target)?;
    let lstm = lstm_vars(b)?;
    let hidden = tape.value(b.get(LSTM_WH)?).shape()[1];
    let zero_h = tape.constant(Tensor::zeros(&[hidden]));
    let zero_c = tape.constant(Tensor::zeros(&[hidden]));
    let (mut h, mut c) = lstm_step(tape, fused, zero_h, zero_c, lstm)?;
    let (embed, out_w, out_b) = (b.get(EMBED)?, b.get(OUT_W)?, b.get(OUT_B)?);
    let mut losses = Vec::with_capacity(target.len());
    for pair in target.windows(2) {
        let x = tape.row(embed, pair[0])?;
        (h, c) = lstm_step(tape, x, h, c, lstm)?;
        if pair[1] == PAD {
            continue;
        }
        let logits = tape.linear(h, out_w, Some(out_b))?;
        losses.push(tape.softmax_cross_entropy(logits, pair[1])?);
    }
    tape.mean(&losses)
}

pub fn caption_loss(fused: &Tensor, target: &[usize], params: &ParamSet) -> Result<f64> {
    let mut tape = Tape::new();
    let b = params.bind_frozen(&mut tape);
    let f = tape.constant(fused.clone());
    let loss = record_caption_loss(&mut tape, &b, f, target)?;
    Ok(tape.value(loss).data()[0])
}

/// A partial or finished decoded sequence (without `<start>`).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }

    /// Tokens with a trailing `<end>` removed.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&END) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderState {
    h: Tensor,
    c: Tensor,
}

/// Inference-time view over decoder parameters.
pub struct Decoder<'a> {
    params: &'a ParamSet,
    hidden: usize,
    vocab: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ParamSet) -> Result<Self> {
        let hidden = params.get(LSTM_WH)?.shape()[1];
        let vocab = params.get(OUT_B)?.len();
        Ok(Self { params, hidden, vocab })
    }

    fn bind(&self, tape: &mut Tape) -> Result<(LstmVars, Var, Var, Var)> {
        let mut take = |name: &str| -> Result<Var> { Ok(tape.constant(self.params.get(name)?.clone())) };
        let lstm = LstmVars { w_x: take(LSTM_WX)?, w_h: take(LSTM_WH)?, bias: take(LSTM_B)? };
        Ok((lstm, take(EMBED)?, take(OUT_W)?, take(OUT_B)?))
    }

    fn prime(&self, fused: &Tensor) -> Result<DecoderState> {
        let mut tape = Tape::new();
        let (lstm, _, _, _) = self.bind(&mut tape)?;
        let x = tape.constant(fused.clone());
        let h0 = tape.constant(Tensor::zeros(&[self.hidden]));
        let c0 = tape.constant(Tensor::zeros(&[self.hidden]));
        let (h, c) = lstm_step(&mut tape, x, h0, c0, lstm)?;
        Ok(DecoderState { h: tape.value(h).clone(), c: tape.value(c).clone() })
    }

    /// Feeds `token`; returns the next state and next-token log-probabilities.
    fn step(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f64>)> {
        let mut tape = Tape::new();
        let (lstm, embed, out_w, out_b) = self.bind(&mut tape)?;
        let x = tape.row(embed, token)?;
        let h0 = tape.constant(state.h.clone());
        let c0 = tape.constant(state.c.clone());
        let (h, c) = lstm_step(&mut tape, x, h0, c0, lstm)?;
        let logits = tape.linear(h, out_w, Some(out_b))?;
        let lp = log_softmax(tape.value(logits).data());
        Ok((DecoderState { h: tape.value(h).clone(), c: tape.value(c).clone() }, lp))
    }

    /// Per-step log-probabilities of `tokens` (generated sequence, no
    /// `<start>`), recomputed from scratch.
    pub fn sequence_log_probs(&self, fused: &Tensor, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut state = self.prime(fused)?;
        let mut prev = START;
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let (next, lp) = self.step(&state, prev)?;
            out.push(*lp.get(t).ok_or_else(|| Error::invalid("sequence_log_probs", format!("token {t} out of range")))?);
            state = next;
            prev = t;
        }
        Ok(out)
    }

    pub fn greedy(&self, fused: &Tensor, max_len: usize) -> Result<Hypothesis> {
        if max_len == 0 {
            return Err(Error::invalid("decode_greedy", "max_len must be at least 1"));
        }
        let mut state = self.prime(fused)?;
        let mut hyp = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
        let mut prev = START;
        while !hyp.finished {
            let (next, lp) = self.step(&state, prev)?;
            let best = argmax_first(&lp);
            hyp.tokens.push(best);
            hyp.log_prob += lp[best];
            hyp.finished = best == END || hyp.tokens.len() == max_len;
            state = next;
            prev = best;
        }
        Ok(hyp)
    }

    pub fn beam(&self, fused: &Tensor, cfg: BeamConfig) -> Result<Vec<Hypothesis>> {
        if cfg.width == 0 || cfg.max_len == 0 {
            return Err(Error::invalid("decode_beam", "beam width and max_len must be at least 1"));
        }
        let mut active = vec![(Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }, self.prime(fused)?)];
        let mut finished: Vec<Hypothesis> = Vec::new();
        while !active.is_empty() {
            let mut expanded = Vec::with_capacity(active.len());
            for (hyp, state) in &active {
                let prev = hyp.tokens.last().copied().unwrap_or(START);
                expanded.push(self.step(state, prev)?);
            }
            let mut candidates: Vec<(usize, usize, f64)> = Vec::with_capacity(active.len() * self.vocab);
            for (hi, (_, lp)) in expanded.iter().enumerate() {
                for (tok, &l) in lp.iter().enumerate() {
                    candidates.push((hi, tok, active[hi].0.log_prob + l));
                }
            }
            candidates.sort_by(|a, b| {
                b.2.total_cmp(&a.2).then_with(|| {
                    let sa = active[a.0].0.tokens.iter().chain(std::iter::once(&a.1));
                    let sb = active[b.0].0.tokens.iter().chain(std::iter::once(&b.1));
                    sa.cmp(sb)
                })
            });
            let mut next_active = Vec::new();
            for &(hi, tok, lp) in candidates.iter().take(cfg.width) {
                let mut tokens = active[hi].0.tokens.clone();
                tokens.push(tok);
                let done = tok == END || tokens.len() == cfg.max_len;
                let hyp = Hypothesis { tokens, log_prob: lp, finished: done };
                if done {
                    finished.push(hyp);
                } else {
                    next_active.push((hyp, expanded[hi].0.clone()));
                }
            }
            active = next_active;
        }
        sort_hypotheses(&mut finished, cfg.length_normalize);
        finished.truncate(cfg.width);
        Ok(finished)
    }
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Score descending, then lexicographically smaller token sequence first.
pub fn sort_hypotheses(hyps: &mut [Hypothesis], length_normalize: bool) {
    hyps.sort_by(|a, b| match b.score(length_normalize).total_cmp(&a.score(length_normalize)) {
        Ordering::Equal => a.tokens.cmp(&b.tokens),
        o => o,
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    #[serde(default)]
    pub length_normalize: bool,
}

pub fn decode_greedy(fused: &Tensor, params: &ParamSet, max_len: usize) -> Result<Hypothesis> {
    Decoder::new(params)?.greedy(fused, max_len)
}

pub fn decode_beam(fused: &Tensor, params: &ParamSet, width: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    Decoder::new(params)?.beam(fused, BeamConfig { width, max_len, length_normalize: false })
}
