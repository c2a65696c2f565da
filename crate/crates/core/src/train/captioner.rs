use rayon::prelude::*;

use super::{check_images, epoch_order, records_of, sgd_epoch, split_indices, CurvePoint, TrainConfig, TrainingCurve};
use crate::dataset::{CaseRecord, DatasetManifest, RetinalImage, Split};
use crate::encoder::{image_tensor, record_encoder, Encoder};
use crate::error::{Error, Result};
use crate::language::generator::{caption_loss, keyword_vector, record_caption_loss, record_conditioning};
use crate::language::{build_vocabulary, tokenize, DecoderConfig, KeywordMode, Vocabulary};
use crate::metrics::bleu_corpus;
use crate::nn::{Bound, ModelCheckpoint, ParamSet, Tape, Tensor};
use crate::pipeline::CaptionModel;

#[derive(Debug, Clone)]
pub struct CaptionerRun {
    /// Weights from the epoch with the best validation BLEU-avg, ties going
    /// to the lower validation loss (the last epoch without a validation split).
    pub model: CaptionModel,
    pub curve: TrainingCurve,
    pub best_epoch: usize,
}

fn caption_corpus(records: &[&CaseRecord]) -> Vec<Vec<String>> {
    records.iter().map(|r| tokenize(&r.description)).collect()
}

fn keyword_corpus(records: &[&CaseRecord]) -> Vec<Vec<String>> {
    records.iter().map(|r| r.keywords.clone()).collect()
}

/// Caption and keyword vocabularies from the train split only.
pub fn build_train_vocabularies(manifest: &DatasetManifest, min_frequency: usize) -> Result<(Vocabulary, Vocabulary)> {
    let train = records_of(manifest, &split_indices(manifest, Split::Train));
    if train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    Ok((
        build_vocabulary(&caption_corpus(&train), min_frequency)?,
        build_vocabulary(&keyword_corpus(&train), min_frequency)?,
    ))
}

/// Rejects vocabularies that differ from the ones the train split alone
/// produces (e.g. built with val/test text).
pub fn check_train_vocabularies(manifest: &DatasetManifest, vocab: &Vocabulary, kw_vocab: &Vocabulary) -> Result<()> {
    let train = records_of(manifest, &split_indices(manifest, Split::Train));
    if build_vocabulary(&caption_corpus(&train), vocab.min_frequency())? != *vocab {
        return Err(Error::Data("caption vocabulary was not built from the train split alone".into()));
    }
    if build_vocabulary(&keyword_corpus(&train), kw_vocab.min_frequency())? != *kw_vocab {
        return Err(Error::Data("keyword vocabulary was not built from the train split alone".into()));
    }
    Ok(())
}

struct Sample {
    target: Vec<usize>,
    keyword_hot: Tensor,
    /// Pooled feature (frozen encoder) or image tensor (joint training).
    input: Tensor,
}

/// Teacher-forced caption training on top of `encoder`. The encoder stays
/// frozen unless `cfg.joint_finetune` is set.
pub fn train_captioner(
    manifest: &DatasetManifest,
    images: &[RetinalImage],
    cfg: &TrainConfig,
    encoder: &Encoder,
    vocab: &Vocabulary,
    kw_vocab: &Vocabulary,
) -> Result<CaptionerRun> {
    cfg.validate()?;
    check_images(manifest, images)?;
    check_train_vocabularies(manifest, vocab, kw_vocab)?;
    let train = split_indices(manifest, Split::Train);
    let val = split_indices(manifest, Split::Val);
    if train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }

    let dec_cfg = DecoderConfig {
        feature_dim: encoder.config.feature_dim(),
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        vocab_size: vocab.len(),
        keyword_vocab_size: kw_vocab.len(),
        keyword_mode: cfg.keyword_mode,
    };
    let mut model = CaptionModel::init(encoder.clone(), dec_cfg, vocab.clone(), kw_vocab.clone(), cfg.max_caption_len, cfg.seed)?;
    let joint = cfg.joint_finetune;

    let max_words = cfg.max_caption_len - 1;
    let all: Vec<usize> = train.iter().chain(&val).copied().collect();
    let prepared: Vec<Sample> = all
        .par_iter()
        .map(|&i| {
            let r = &manifest.records()[i];
            let mut words = tokenize(&r.description);
            words.truncate(max_words);
            let x = image_tensor(&images[i], &encoder.config)?;
            let input = if joint { x } else { encoder.encode_tensor(&x)?.pooled };
            Ok(Sample { target: vocab.encode_caption(&words), keyword_hot: keyword_vector(&r.keywords, kw_vocab), input })
        })
        .collect::<Result<_>>()?;
    let mut samples: Vec<Option<Sample>> = (0..manifest.len()).map(|_| None).collect();
    for (&i, s) in all.iter().zip(prepared) {
        samples[i] = Some(s);
    }
    let sample = |i: usize| samples[i].as_ref().expect("prepared");

    let mut params = model.params.clone();
    if joint {
        params.extend(encoder.params.clone());
    }
    let enc_cfg = encoder.config.clone();
    let mode = cfg.keyword_mode;
    let build = |tape: &mut Tape, b: &Bound, i: usize| {
        let s = sample(i);
        let x = tape.constant(s.input.clone());
        let pooled = if joint { record_encoder(tape, b, &enc_cfg, x)?.pooled } else { x };
        let hot = (mode == KeywordMode::On).then(|| tape.constant(s.keyword_hot.clone()));
        let fused = record_conditioning(tape, b, mode, pooled, hot)?;
        record_caption_loss(tape, b, fused, &s.target)
    };

    let val_records = records_of(manifest, &val);
    let val_refs = caption_corpus(&val_records);
    let mut curve = TrainingCurve::default();
    let mut best: Option<((f64, f64), usize, ParamSet)> = None;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&train, cfg.seed, epoch);
        let train_loss = sgd_epoch(&mut params, &order, cfg, cfg.sgd.learning_rate_at(epoch), &build)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("caption training loss at epoch {epoch}")));
        }
        let (val_loss, val_metric) = if val.is_empty() {
            (None, None)
        } else {
            let snapshot = with_params(&model, &params, joint)?;
            let per: Vec<(f64, Vec<String>)> = val
                .par_iter()
                .zip(&val_records)
                .map(|(&i, r)| {
                    let s = sample(i);
                    let pooled = if joint { snapshot.encoder.encode_tensor(&s.input)?.pooled } else { s.input.clone() };
                    let fused = snapshot.conditioning(&pooled, &r.keywords)?;
                    let loss = caption_loss(&fused, &s.target, &snapshot.params)?;
                    let hyp = snapshot.decoder()?.greedy(&fused, snapshot.max_len)?;
                    Ok((loss, snapshot.words(&hyp)))
                })
                .collect::<Result<_>>()?;
            let loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
            let cands: Vec<Vec<String>> = per.into_iter().map(|p| p.1).collect();
            (Some(loss), Some(bleu_corpus(&cands, &val_refs)?.bleu_avg))
        };
        curve.points.push(CurvePoint { epoch, train_loss, val_loss, val_metric });
        let key = (val_metric.unwrap_or(f64::NEG_INFINITY), -val_loss.unwrap_or(f64::INFINITY));
        if val.is_empty() || best.as_ref().is_none_or(|b| key > b.0) {
            best = Some((key, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let quantized = ModelCheckpoint::from_params(&best_params).params();
    model = with_params(&model, &quantized, joint)?;
    Ok(CaptionerRun { model, curve, best_epoch })
}

fn with_params(model: &CaptionModel, params: &ParamSet, joint: bool) -> Result<CaptionModel> {
    let mut encoder = model.encoder.clone();
    if joint {
        encoder = Encoder::new(encoder.config.clone(), params.with_prefix("encoder."), encoder.classes.clone())?;
    }
    let mut out = CaptionModel::new(encoder, model.config, params.clone(), model.vocab.clone(), model.kw_vocab.clone(), model.max_len)?;
    out.encoder_finetuned = joint;
    Ok(out)
}
