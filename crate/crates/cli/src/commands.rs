use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use retina_core::dataset::split::split_sizes;
use retina_core::dataset::{
    generate_synthetic_dataset, load_image, load_images, parse_manifest, split_dataset, word_length_histogram,
    DatasetManifest, RetinalImage, SplitSizing, SynthConfig,
};
use retina_core::encoder::{predict_topk, Encoder};
use retina_core::explain::{explain_image, save_heatmap_png};
use retina_core::language::{split_keywords, BeamConfig};
use retina_core::metrics::{parse_caption_lines, parse_rankings, MetricReport};
use retina_core::nn::checkpoint::write_atomic;
use retina_core::nn::ModelCheckpoint;
use retina_core::pipeline::{evaluate_pipeline, infer_case, write_report_bundle, BundleCase, CaptionModel, EvalOptions};
use retina_core::report::{render_text, ReportCase};
use retina_core::train::{build_train_vocabularies, train_captioner, train_classifier, TrainConfig};

use crate::{
    Command, EvaluateArgs, ExplainArgs, ModelArgs, ReportArgs, ScoreArgs, SplitArgs, StatsArgs, SynthArgs,
    TrainCdgArgs, TrainOverrides, TrainRdiArgs, UsageError,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::Split(a) => split(a),
        Command::Stats(a) => stats(a),
        Command::TrainRdi(a) => train_rdi(a),
        Command::TrainCdg(a) => train_cdg(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Explain(a) => explain(a),
        Command::Report(a) => report(a),
        Command::Score(a) => score(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<RetinalImage>)> {
    let manifest = parse_manifest(path)?;
    let images = load_images(&manifest, path)?;
    Ok((manifest, images))
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        classes: a.classes,
        records: a.records,
        vocab_size: a.vocab_size,
        image_side: a.image_side,
        seed: a.seed,
    };
    let data = generate_synthetic_dataset(&cfg)?;
    data.write(&a.out)?;
    eprintln!(
        "wrote {} records in {} classes to {}",
        data.manifest.len(),
        data.manifest.classes().len(),
        a.out.join("manifest.json").display()
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let sizing = match (a.ratios, a.counts) {
        (Some([train, val, test]), None) => SplitSizing::Ratios { train, val, test },
        (None, Some([train, val, test])) => SplitSizing::Counts { train, val, test },
        _ => return Err(UsageError("give exactly one of --ratios or --counts".into()).into()),
    };
    let manifest = parse_manifest(&a.manifest)?;
    let out = split_dataset(&manifest, sizing, a.seed, a.preserve)?;
    let path = a.out.unwrap_or(a.manifest);
    out.save(&path)?;
    let [train, val, test] = split_sizes(&out);
    eprintln!("train {train}, val {val}, test {test} -> {}", path.display());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let manifest = parse_manifest(&a.manifest)?;
    let mut out = BTreeMap::new();
    for field in a.field.fields() {
        let name = serde_json::to_value(field)?.as_str().unwrap_or_default().to_string();
        out.insert(name, word_length_histogram(&manifest, field));
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn train_config(base: TrainConfig, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(path) => TrainConfig::load(path)?,
        None => base,
    };
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = o.lr {
        cfg.sgd.learning_rate = lr;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_curve_end(what: &str, best_epoch: usize, metric: &str, value: Option<f64>) {
    match value {
        Some(v) => eprintln!("{what}: kept epoch {best_epoch} (val {metric} {v:.4})"),
        None => eprintln!("{what}: kept epoch {best_epoch} (no validation split)"),
    }
}

fn train_rdi(a: TrainRdiArgs) -> Result<()> {
    let cfg = train_config(TrainConfig::classifier(), &a.train)?;
    let (manifest, images) = load_dataset(&a.manifest)?;
    let init = a.init.as_deref().map(ModelCheckpoint::load).transpose()?;
    let run = train_classifier(&manifest, &images, &cfg, init.as_ref())?;
    let ck_path = a.out.join("checkpoints/encoder.ck");
    let curve_path = a.out.join("curves/encoder.csv");
    run.checkpoint()?.save(&ck_path)?;
    run.curve.save(&curve_path)?;
    let best = run.curve.points.get(run.best_epoch).and_then(|p| p.val_metric);
    report_curve_end("classifier", run.best_epoch, "Prec@1", best);
    eprintln!("wrote {} and {}", ck_path.display(), curve_path.display());
    Ok(())
}

fn train_cdg(a: TrainCdgArgs) -> Result<()> {
    let mut cfg = train_config(TrainConfig::captioner(), &a.train)?;
    if let Some(k) = a.keyword_mode {
        cfg.keyword_mode = k.into();
    }
    if a.joint_finetune {
        cfg.joint_finetune = true;
    }
    let (manifest, images) = load_dataset(&a.manifest)?;
    let encoder = Encoder::from_checkpoint(&ModelCheckpoint::load(&a.encoder)?)?;
    let (vocab, kw_vocab) = build_train_vocabularies(&manifest, cfg.min_frequency)?;
    let run = train_captioner(&manifest, &images, &cfg, &encoder, &vocab, &kw_vocab)?;
    let ck_path = a.out.join("checkpoints/decoder.ck");
    let curve_path = a.out.join("curves/decoder.csv");
    run.model.checkpoint()?.save(&ck_path)?;
    run.curve.save(&curve_path)?;
    let best = run.curve.points.get(run.best_epoch).and_then(|p| p.val_metric);
    report_curve_end("captioner", run.best_epoch, "BLEU-avg", best);
    eprintln!("vocabulary {} words, {} keywords", vocab.len(), kw_vocab.len());
    eprintln!("wrote {} and {}", ck_path.display(), curve_path.display());
    Ok(())
}

fn load_model(m: &ModelArgs) -> Result<(CaptionModel, BeamConfig)> {
    let enc = ModelCheckpoint::load(&m.encoder)?;
    let dec = ModelCheckpoint::load(&m.decoder)?;
    let model = CaptionModel::from_checkpoints(&enc, &dec)?;
    let beam = BeamConfig {
        width: m.beam as usize,
        max_len: m.max_len.map_or(model.max_len, |l| l as usize),
        length_normalize: m.length_normalize,
    };
    Ok((model, beam))
}

/// Keeps the k values the class count can support, noting the rest.
fn usable_ks(ks: &[u64], classes: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for &k in ks {
        let k = k as usize;
        if k > classes {
            eprintln!("note: skipping Prec@{k}, only {classes} classes");
        } else if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

fn clamp_k(k: u64, classes: usize) -> usize {
    let k = k as usize;
    if k > classes {
        eprintln!("note: listing {classes} diseases, only {classes} classes");
    }
    k.min(classes)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (model, beam) = load_model(&a.model)?;
    let (manifest, images) = load_dataset(&a.manifest)?;
    let classes = model.encoder.classes.clone();
    let opts = EvalOptions { beam, ks: usable_ks(&a.k, classes.len()), rouge_beta: a.rouge_beta };
    let eval = evaluate_pipeline(&manifest, &images, &model, &opts, a.split.into())?;
    let json = eval.report.to_json();
    if let Some(out) = &a.out {
        write_atomic(&out.join("metrics.json"), json.as_bytes())?;
        let by_id: BTreeMap<&str, usize> = manifest.records().iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        let cases: Vec<BundleCase<'_>> = eval
            .cases
            .iter()
            .map(|c| {
                let i = by_id[c.id.as_str()];
                BundleCase { case: ReportCase::from(&manifest.records()[i]), image: &images[i], output: c }
            })
            .collect();
        write_report_bundle(out, &cases, &classes, clamp_k(a.top_k, classes.len()), a.group_by.into())?;
        eprintln!("evaluated {} cases; wrote {}", eval.cases.len(), out.display());
    }
    print!("{json}");
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<()> {
    let encoder = Encoder::from_checkpoint(&ModelCheckpoint::load(&a.encoder)?)?;
    let image = load_image(&a.image)?;
    let class = match &a.class {
        Some(c) => match encoder.classes.iter().position(|name| name == c) {
            Some(i) => i,
            None => c
                .parse::<usize>()
                .ok()
                .filter(|&i| i < encoder.classes.len())
                .ok_or_else(|| UsageError(format!("unknown class {c:?}; known: {}", encoder.classes.join(", "))))?,
        },
        None => predict_topk(&encoder.encode(&image)?.logits, 1)?[0].0,
    };
    let (raw, overlay) = explain_image(&encoder, &image, class, a.alpha)?;
    let stem = file_stem(&a.image);
    let dir = a.out.join("heatmaps");
    save_heatmap_png(&raw, &dir.join(format!("{stem}.png")))?;
    write_atomic(&dir.join(format!("{stem}.txt")), raw.to_text().as_bytes())?;
    overlay.save(&dir.join(format!("{stem}_overlay.png")))?;
    eprintln!("explained class {:?} for {}; wrote {}", encoder.classes[class], a.image.display(), dir.display());
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned())
}

fn report(a: ReportArgs) -> Result<()> {
    let (model, beam) = load_model(&a.model)?;
    let classes = model.encoder.classes.clone();
    let k = clamp_k(a.k, classes.len());
    let (cases, images): (Vec<ReportCase>, Vec<RetinalImage>) = match (&a.image, &a.manifest) {
        (Some(path), None) => {
            let case = ReportCase { id: a.id.clone().unwrap_or_else(|| file_stem(path)), keywords: split_keywords(a.keywords.as_deref().unwrap_or("")), truth: None };
            (vec![case], vec![load_image(path)?])
        }
        (None, Some(path)) => {
            let (manifest, images) = load_dataset(path)?;
            let split = a.split.into();
            let mut picked: Vec<(ReportCase, RetinalImage)> = manifest
                .records()
                .iter()
                .zip(images)
                .filter(|(r, _)| r.split == Some(split))
                .map(|(r, im)| (ReportCase::from(r), im))
                .collect();
            if picked.is_empty() {
                return Err(retina_core::Error::Data(format!("{split} split is empty")).into());
            }
            picked.sort_by(|x, y| x.0.id.cmp(&y.0.id));
            picked.into_iter().unzip()
        }
        _ => return Err(UsageError("give exactly one of --image or --manifest".into()).into()),
    };
    let outputs = cases
        .par_iter()
        .zip(&images)
        .map(|(c, im)| infer_case(&model, &c.id, im, &c.keywords, beam))
        .collect::<retina_core::Result<Vec<_>>>()?;
    let bundle: Vec<BundleCase<'_>> = cases
        .iter()
        .zip(&images)
        .zip(&outputs)
        .map(|((c, im), o)| BundleCase { case: c.clone(), image: im, output: o })
        .collect();
    let reports = write_report_bundle(&a.out, &bundle, &classes, k, a.group_by.into())?;
    for (i, r) in reports.iter().enumerate() {
        if i > 0 {
            println!();
        }
        print!("{}", render_text(r));
    }
    eprintln!("wrote {}", report_path(&a.out).display());
    Ok(())
}

fn report_path(out: &Path) -> PathBuf {
    out.join("reports/report.html")
}

fn score(a: ScoreArgs) -> Result<()> {
    let captions = match (&a.cand, &a.refs) {
        (Some(c), Some(r)) => {
            let cands = parse_caption_lines(&read_text(c)?);
            let refs = parse_caption_lines(&read_text(r)?);
            if cands.len() != refs.len() {
                return Err(retina_core::Error::Data(format!(
                    "{} candidate lines vs {} reference lines",
                    cands.len(),
                    refs.len()
                ))
                .into());
            }
            Some(MetricReport::from_captions(&cands, &refs, a.rouge_beta)?)
        }
        (None, None) => None,
        _ => return Err(UsageError("--cand and --refs go together".into()).into()),
    };
    match (captions, &a.rankings) {
        (None, None) => Err(UsageError("nothing to score: give --cand/--refs and/or --rankings".into()).into()),
        (report, None) => {
            print!("{}", report.unwrap_or_default().to_json());
            Ok(())
        }
        (report, Some(path)) => {
            let (truths, rankings) = parse_rankings(&read_text(path)?)?;
            let shortest = rankings.iter().map(Vec::len).min().unwrap_or(0);
            let ks = usable_ks(&a.k, shortest);
            match report {
                Some(mut r) => {
                    r.add_precision(&rankings, &truths, &ks)?;
                    print!("{}", r.to_json());
                }
                None => {
                    // Rankings alone: emit only the precision table.
                    let mut r = MetricReport::default();
                    r.add_precision(&rankings, &truths, &ks)?;
                    let json = serde_json::json!({ "prec_at": r.prec_at });
                    println!("{}", serde_json::to_string_pretty(&json)?);
                }
            }
            Ok(())
        }
    }
}
