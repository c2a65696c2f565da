//! End-to-end inference: image → disease ranking → keyword-conditioned
//! caption → CAM, plus test-split evaluation and report bundles.

use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{CaseRecord, DatasetManifest, RetinalImage, Split};
use crate::encoder::{predict_topk, Encoder};
use crate::error::{Error, Result};
use crate::explain::{compute_cam, normalize_heatmap, overlay, upsample_bilinear, Heatmap, DEFAULT_ALPHA};
use crate::language::generator::{conditioning_feature, init_decoder_params};
use crate::language::{tokenize, BeamConfig, Decoder, DecoderConfig, Hypothesis, Vocabulary};
use crate::metrics::{MetricReport, DEFAULT_ROUGE_BETA};
use crate::nn::checkpoint::write_atomic;
use crate::nn::{ModelCheckpoint, ParamSet, Tensor};
use crate::report::{build_report, render_html, DiseaseScore, GroupBy, MedicalReport, ReportCase};

pub const META_DECODER_CONFIG: &str = "decoder.config";
pub const META_VOCAB: &str = "decoder.vocab";
pub const META_KW_VOCAB: &str = "kw_proj.vocab";
pub const META_MAX_LEN: &str = "decoder.max_len";

/// Encoder plus caption decoder with both vocabularies.
#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub encoder: Encoder,
    pub config: DecoderConfig,
    /// `decoder.*` and `kw_proj.*` tensors.
    pub params: ParamSet,
    pub vocab: Vocabulary,
    pub kw_vocab: Vocabulary,
    pub max_len: usize,
    /// Whether the encoder weights were trained with the decoder (and are
    /// stored in the decoder checkpoint).
    pub encoder_finetuned: bool,
}

impl CaptionModel {
    pub fn new(
        encoder: Encoder,
        config: DecoderConfig,
        params: ParamSet,
        vocab: Vocabulary,
        kw_vocab: Vocabulary,
        max_len: usize,
    ) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        if config.feature_dim != encoder.config.feature_dim() {
            return Err(Error::Checkpoint(format!(
                "decoder expects {}-dim image features but the encoder produces {}",
                config.feature_dim,
                encoder.config.feature_dim()
            )));
        }
        if config.vocab_size != vocab.len() || config.keyword_vocab_size != kw_vocab.len() {
            return Err(Error::Checkpoint("decoder sizes do not match its vocabularies".into()));
        }
        if max_len == 0 {
            return Err(Error::invalid("caption model", "max_len must be at least 1"));
        }
        let mut decoder_params = params.with_prefix("decoder.");
        decoder_params.extend(params.with_prefix("kw_proj."));
        Ok(Self { encoder, config, params: decoder_params, vocab, kw_vocab, max_len, encoder_finetuned: false })
    }

    /// Random decoder on top of `encoder` (used by tests and as a training
    /// starting point).
    pub fn init(
        encoder: Encoder,
        config: DecoderConfig,
        vocab: Vocabulary,
        kw_vocab: Vocabulary,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let params = init_decoder_params(&config, seed)?;
        Self::new(encoder, config, params, vocab, kw_vocab, max_len)
    }

    /// The decoder checkpoint; when the encoder was fine-tuned its weights
    /// and metadata are included.
    pub fn checkpoint(&self) -> Result<ModelCheckpoint> {
        let mut ck = ModelCheckpoint::from_params(&self.params);
        ck.set_meta(META_DECODER_CONFIG, &self.config)?;
        ck.set_meta(META_VOCAB, &self.vocab.to_text())?;
        ck.set_meta(META_KW_VOCAB, &self.kw_vocab.to_text())?;
        ck.set_meta(META_MAX_LEN, &self.max_len)?;
        if self.encoder_finetuned {
            self.encoder.store(&mut ck)?;
        }
        Ok(ck)
    }

    /// Loads from an encoder and a decoder checkpoint. A decoder checkpoint
    /// carrying its own encoder weights takes precedence over `encoder_ck`.
    pub fn from_checkpoints(encoder_ck: &ModelCheckpoint, decoder_ck: &ModelCheckpoint) -> Result<Self> {
        let finetuned = decoder_ck.param_names().any(|n| n.starts_with("encoder."));
        let encoder = if finetuned {
            Encoder::from_checkpoint(decoder_ck)?
        } else {
            Encoder::from_checkpoint(encoder_ck)?
        };
        let vocab = Vocabulary::from_text(&decoder_ck.meta::<String>(META_VOCAB)?)?;
        let kw_vocab = Vocabulary::from_text(&decoder_ck.meta::<String>(META_KW_VOCAB)?)?;
        let mut model = Self::new(
            encoder,
            decoder_ck.meta(META_DECODER_CONFIG)?,
            decoder_ck.params(),
            vocab,
            kw_vocab,
            decoder_ck.meta(META_MAX_LEN)?,
        )?;
        model.encoder_finetuned = finetuned;
        Ok(model)
    }

    /// Decoder input for a pooled image feature and keyword set.
    pub fn conditioning<S: AsRef<str>>(&self, pooled: &Tensor, keywords: &[S]) -> Result<Tensor> {
        conditioning_feature(&self.config, &self.params, pooled, keywords, &self.kw_vocab)
    }

    pub fn decoder(&self) -> Result<Decoder<'_>> {
        Decoder::new(&self.params)
    }

    pub fn greedy_from_pooled<S: AsRef<str>>(&self, pooled: &Tensor, keywords: &[S]) -> Result<Hypothesis> {
        self.decoder()?.greedy(&self.conditioning(pooled, keywords)?, self.max_len)
    }

    pub fn words(&self, hyp: &Hypothesis) -> Vec<String> {
        self.vocab.decode_caption(hyp.words())
    }
}

/// Model outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutput {
    pub id: String,
    /// Every class, probability descending (ties by class id).
    pub ranking: Vec<(usize, f64)>,
    pub caption: Vec<String>,
    pub log_prob: f64,
    /// Raw CAM of the top-1 class at feature-map resolution.
    pub cam: Heatmap,
}

impl CaseOutput {
    pub fn top_k(&self, classes: &[String], k: usize) -> Vec<DiseaseScore> {
        self.ranking
            .iter()
            .take(k)
            .map(|&(c, p)| DiseaseScore { disease: classes[c].clone(), probability: p })
            .collect()
    }
}

pub fn infer_case<S: AsRef<str>>(
    model: &CaptionModel,
    id: &str,
    image: &RetinalImage,
    keywords: &[S],
    beam: BeamConfig,
) -> Result<CaseOutput> {
    let out = model.encoder.encode(image)?;
    let ranking = predict_topk(&out.logits, model.encoder.config.num_classes)?;
    let fused = model.conditioning(&out.pooled, keywords)?;
    let hyps = model.decoder()?.beam(&fused, beam)?;
    let best = hyps.first().ok_or_else(|| Error::Data("beam search returned no hypothesis".into()))?;
    let cam = compute_cam(&out.feature_maps, model.encoder.classifier_weights()?, ranking[0].0)?;
    Ok(CaseOutput { id: id.to_string(), ranking, caption: model.words(best), log_prob: best.log_prob, cam })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub beam: BeamConfig,
    pub ks: Vec<usize>,
    pub rouge_beta: f64,
}

impl EvalOptions {
    pub fn new(beam_width: usize, max_len: usize, ks: Vec<usize>) -> Self {
        Self { beam: BeamConfig { width: beam_width, max_len, length_normalize: false }, ks, rouge_beta: DEFAULT_ROUGE_BETA }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Sorted by record id.
    pub cases: Vec<CaseOutput>,
}

/// Runs every record of `split` through the model and aggregates metrics.
/// Cases are processed in parallel and merged in id order.
pub fn evaluate_pipeline(
    manifest: &DatasetManifest,
    images: &[RetinalImage],
    model: &CaptionModel,
    opts: &EvalOptions,
    split: Split,
) -> Result<Evaluation> {
    if manifest.len() != images.len() {
        return Err(Error::invalid("evaluate", format!("{} records but {} images", manifest.len(), images.len())));
    }
    let mut selected: Vec<(&CaseRecord, &RetinalImage)> =
        manifest.records().iter().zip(images).filter(|(r, _)| r.split == Some(split)).collect();
    if selected.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    selected.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let cases: Vec<CaseOutput> = selected
        .par_iter()
        .map(|(r, img)| infer_case(model, &r.id, img, &r.keywords, opts.beam))
        .collect::<Result<_>>()?;

    let refs: Vec<Vec<String>> = selected.iter().map(|(r, _)| tokenize(&r.description)).collect();
    let cands: Vec<Vec<String>> = cases.iter().map(|c| c.caption.clone()).collect();
    let mut report = MetricReport::from_captions(&cands, &refs, opts.rouge_beta)?;
    let classes = &model.encoder.classes;
    let rankings: Vec<Vec<&str>> =
        cases.iter().map(|c| c.ranking.iter().map(|&(k, _)| classes[k].as_str()).collect()).collect();
    let truths: Vec<&str> = selected.iter().map(|(r, _)| r.disease.as_str()).collect();
    report.add_precision(&rankings, &truths, &opts.ks)?;
    Ok(Evaluation { report, cases })
}

/// Relative paths used inside a report bundle for one case.
pub fn asset_paths(id: &str) -> (String, String) {
    let safe: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    (format!("assets/{safe}.png"), format!("assets/{safe}_cam.png"))
}

/// One case to render: its record-level data, image and model output.
pub struct BundleCase<'a> {
    pub case: ReportCase,
    pub image: &'a RetinalImage,
    pub output: &'a CaseOutput,
}

/// Writes `reports/report.html` with its image assets, and the raw heatmaps
/// as PNG and text matrices under `heatmaps/`, all beneath `out_dir`.
pub fn write_report_bundle(out_dir: &Path, cases: &[BundleCase<'_>], classes: &[String], k: usize, group_by: GroupBy) -> Result<Vec<MedicalReport>> {
    let reports_dir = out_dir.join("reports");
    let heat_dir = out_dir.join("heatmaps");
    let mut reports = Vec::with_capacity(cases.len());
    for c in cases {
        let (img_rel, cam_rel) = asset_paths(&c.case.id);
        let norm = normalize_heatmap(&c.output.cam);
        let up = upsample_bilinear(&norm, c.image.height(), c.image.width())?;
        let ov = overlay(c.image, &up, DEFAULT_ALPHA)?;
        write_atomic(&reports_dir.join(&img_rel), &c.image.to_png()?)?;
        write_atomic(&reports_dir.join(&cam_rel), &ov.to_png()?)?;
        let stem = img_rel.trim_start_matches("assets/").trim_end_matches(".png");
        write_atomic(&heat_dir.join(format!("{stem}.png")), &c.output.cam.to_png()?)?;
        write_atomic(&heat_dir.join(format!("{stem}.txt")), c.output.cam.to_text().as_bytes())?;
        let top = c.output.top_k(classes, k.min(c.output.ranking.len()));
        reports.push(build_report(&c.case, &top, &c.output.caption, &img_rel, &cam_rel)?);
    }
    write_atomic(&reports_dir.join("report.html"), render_html(&reports, group_by).as_bytes())?;
    Ok(reports)
}
