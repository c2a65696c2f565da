use rayon::prelude::*;

use super::{check_images, epoch_order, sgd_epoch, split_indices, CurvePoint, TrainConfig, TrainingCurve};
use crate::dataset::{DatasetManifest, RetinalImage, Split};
use crate::encoder::{image_tensor, init_encoder_params, predict_topk, record_encoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::functional::cross_entropy;
use crate::nn::{ModelCheckpoint, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct ClassifierRun {
    /// Weights from the epoch with the best validation Prec@1, ties going to
    /// the lower validation loss (the last epoch without a validation split).
    pub encoder: Encoder,
    pub curve: TrainingCurve,
    pub best_epoch: usize,
}

impl ClassifierRun {
    pub fn checkpoint(&self) -> Result<ModelCheckpoint> {
        self.encoder.to_checkpoint()
    }
}

fn labels(manifest: &DatasetManifest, classes: &[String], idx: &[usize]) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            let d = &manifest.records()[i].disease;
            classes
                .iter()
                .position(|c| c == d)
                .ok_or_else(|| Error::Data(format!("record '{}': disease '{d}' unknown to the classifier", manifest.records()[i].id)))
        })
        .collect()
}

/// Mean cross-entropy and top-1 accuracy of `encoder` over prepared inputs.
fn score(encoder: &Encoder, inputs: &[Tensor], labels: &[usize]) -> Result<(f64, f64)> {
    let per: Vec<(f64, bool)> = inputs
        .par_iter()
        .zip(labels)
        .map(|(x, &y)| {
            let logits = encoder.encode_tensor(x)?.logits;
            Ok((cross_entropy(&logits, y)?, predict_topk(&logits, 1)?[0].0 == y))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().filter(|p| p.1).count() as f64 / n))
}

/// Top-1 accuracy of `encoder` on the records of `split`.
pub fn classification_accuracy(encoder: &Encoder, manifest: &DatasetManifest, images: &[RetinalImage], split: Split) -> Result<f64> {
    check_images(manifest, images)?;
    let idx = split_indices(manifest, split);
    if idx.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    let inputs = idx.iter().map(|&i| image_tensor(&images[i], &encoder.config)).collect::<Result<Vec<_>>>()?;
    Ok(score(encoder, &inputs, &labels(manifest, &encoder.classes, &idx)?)?.1)
}

/// Mini-batch SGD on softmax cross-entropy. `init` starts from an existing
/// encoder checkpoint (the "pre-trained" setting) instead of a seeded
/// random initialization.
pub fn train_classifier(
    manifest: &DatasetManifest,
    images: &[RetinalImage],
    cfg: &TrainConfig,
    init: Option<&ModelCheckpoint>,
) -> Result<ClassifierRun> {
    cfg.validate()?;
    check_images(manifest, images)?;
    let classes = manifest.classes().to_vec();
    let channels = if images.iter().any(|im| im.channels() == 3) { 3 } else { 1 };
    let enc_cfg = EncoderConfig {
        input_channels: channels,
        image_side: cfg.image_side,
        stages: cfg.stages.clone(),
        num_classes: classes.len(),
    };
    enc_cfg.validate()?;

    let mut params = match init {
        Some(ck) => {
            let pre = Encoder::from_checkpoint(ck)?;
            if pre.config != enc_cfg || pre.classes != classes {
                return Err(Error::Checkpoint(
                    "initial encoder checkpoint does not match this dataset's classes or the configured architecture".into(),
                ));
            }
            pre.params
        }
        None => init_encoder_params(&enc_cfg, cfg.seed)?,
    };

    let train = split_indices(manifest, Split::Train);
    let val = split_indices(manifest, Split::Val);
    if train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let all: Vec<usize> = train.iter().chain(&val).copied().collect();
    let mut inputs: Vec<Option<Tensor>> = vec![None; manifest.len()];
    let prepared = all.par_iter().map(|&i| image_tensor(&images[i], &enc_cfg)).collect::<Result<Vec<_>>>()?;
    for (&i, t) in all.iter().zip(prepared) {
        inputs[i] = Some(t);
    }
    let mut targets = vec![0usize; manifest.len()];
    for (&i, y) in all.iter().zip(labels(manifest, &classes, &all)?) {
        targets[i] = y;
    }
    let val_inputs: Vec<Tensor> = val.iter().map(|&i| inputs[i].clone().expect("prepared")).collect();
    let val_labels: Vec<usize> = val.iter().map(|&i| targets[i]).collect();

    let build = |tape: &mut Tape, b: &crate::nn::Bound, i: usize| {
        let x = tape.constant(inputs[i].clone().expect("prepared"));
        let out = record_encoder(tape, b, &enc_cfg, x)?;
        tape.softmax_cross_entropy(out.logits, targets[i])
    };

    let mut curve = TrainingCurve::default();
    let mut best: Option<((f64, f64), usize, crate::nn::ParamSet)> = None;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&train, cfg.seed, epoch);
        let train_loss = sgd_epoch(&mut params, &order, cfg, cfg.sgd.learning_rate_at(epoch), &build)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("classifier training loss at epoch {epoch}")));
        }
        let (val_loss, val_metric) = if val.is_empty() {
            (None, None)
        } else {
            let enc = Encoder::new(enc_cfg.clone(), params.clone(), classes.clone())?;
            let (l, acc) = score(&enc, &val_inputs, &val_labels)?;
            (Some(l), Some(acc))
        };
        curve.points.push(CurvePoint { epoch, train_loss, val_loss, val_metric });
        let key = (val_metric.unwrap_or(f64::NEG_INFINITY), -val_loss.unwrap_or(f64::INFINITY));
        if val.is_empty() || best.as_ref().is_none_or(|b| key > b.0) {
            best = Some((key, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let quantized = ModelCheckpoint::from_params(&best_params).params();
    Ok(ClassifierRun { encoder: Encoder::new(enc_cfg, quantized, classes)?, curve, best_epoch })
}
