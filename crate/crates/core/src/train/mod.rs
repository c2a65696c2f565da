//! Deterministic SGD training for the disease classifier and the caption
//! decoder.

mod captioner;
mod classifier;
mod config;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use captioner::{build_train_vocabularies, check_train_vocabularies, train_captioner, CaptionerRun};
pub use classifier::{classification_accuracy, train_classifier, ClassifierRun};
pub use config::{TrainConfig, CONFIG_VERSION};

use crate::dataset::{CaseRecord, DatasetManifest, RetinalImage, Split};
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;
use crate::nn::gradcheck::loss_and_grads;
use crate::nn::{sgd_step, Bound, ParamSet, SgdConfig, Tape, Var};
use crate::rng;

/// `base / factor^floor(epoch / period)`.
pub fn lr_schedule(epoch: usize, cfg: &SgdConfig) -> f64 {
    cfg.learning_rate_at(epoch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
}

/// One point per completed epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
}

impl TrainingCurve {
    /// `epoch,train_loss,val_loss,val_metric`; missing validation values are
    /// left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("epoch,train_loss,val_loss,val_metric\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.epoch, p.train_loss, opt(p.val_loss), opt(p.val_metric));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Record indices of `split`, in manifest order.
pub(crate) fn split_indices(manifest: &DatasetManifest, split: Split) -> Vec<usize> {
    (0..manifest.len()).filter(|&i| manifest.records()[i].split == Some(split)).collect()
}

pub(crate) fn check_images(manifest: &DatasetManifest, images: &[RetinalImage]) -> Result<()> {
    if manifest.len() != images.len() {
        return Err(Error::invalid("training", format!("{} records but {} images", manifest.len(), images.len())));
    }
    Ok(())
}

pub(crate) fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut rng::seeded(rng::derive(seed, epoch as u64)));
    order
}

/// One pass of mini-batch SGD over `order`. Per-sample gradients run in
/// parallel and are summed in batch order, so results do not depend on the
/// thread count. Returns the mean sample loss.
pub(crate) fn sgd_epoch<F>(params: &mut ParamSet, order: &[usize], cfg: &TrainConfig, lr: f64, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound, usize) -> Result<Var> + Sync,
{
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let snapshot = &*params;
        let results: Vec<(f64, ParamSet)> = batch
            .par_iter()
            .map(|&i| loss_and_grads(snapshot, &|t: &mut Tape, b: &Bound| build(t, b, i)))
            .collect::<Result<_>>()?;
        let mut iter = results.into_iter();
        let (first_loss, mut acc) = iter.next().expect("chunks are non-empty");
        total += first_loss;
        for (loss, grads) in iter {
            total += loss;
            acc.add_grads_from(&grads)?;
        }
        acc.scale_grads(1.0 / batch.len() as f64);
        if let Some(max) = cfg.clip_norm {
            let norm = acc.grad_norm();
            if norm > max {
                acc.scale_grads(max / norm);
            }
        }
        sgd_step(&mut acc, lr)?;
        acc.zero_grads();
        *params = acc;
    }
    Ok(total / order.len() as f64)
}

pub(crate) fn records_of<'a>(manifest: &'a DatasetManifest, idx: &[usize]) -> Vec<&'a CaseRecord> {
    idx.iter().map(|&i| &manifest.records()[i]).collect()
}
