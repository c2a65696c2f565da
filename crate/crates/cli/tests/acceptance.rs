//! Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Runs without the libtest harness so the lines are
//! always printed.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::metric_oracles::{bleu_oracle, lcs_brute, toks};
use common::suites::*;
use rand::seq::SliceRandom;
use rand::Rng as _;
use retina_core::dataset::*;
use retina_core::language::KeywordMode;
use retina_core::metrics::*;
use retina_core::nn::{ModelCheckpoint, SgdConfig};
use retina_core::pipeline::{evaluate_pipeline, EvalOptions};
use retina_core::train::*;

const GRAD_SEEDS: u64 = 10;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const BEAM_SEEDS: u64 = 25;
const BEAM_BUDGET: Duration = Duration::from_secs(30);
const CAM_INPUTS: u64 = 50;
const CAM_TOL: f64 = 1e-10;
const METRIC_TOL: f64 = 1e-12;
const CIDER_TOL: f64 = 1e-8;
const METRIC_BUDGET: Duration = Duration::from_secs(10);
const PREC_RECORDS: usize = 200;
const ABLATION_SEEDS: u64 = 5;
const ABLATION_MIN_WINS: usize = 4;
const ABLATION_BUDGET: Duration = Duration::from_secs(600);
const LR_TOL: f64 = 1e-15;
const TOY_EPOCHS: usize = 500;
const TOY_SEED: u64 = 0;
const TOY_MAX_LOSS: f64 = 0.05;
const TOY_MIN_EXACT: usize = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut checks = 0;
    for seed in 0..GRAD_SEEDS {
        let mut reports: Vec<(String, retina_core::nn::GradCheckReport)> =
            op_gradchecks(seed).into_iter().map(|(n, r)| (n.to_string(), r)).collect();
        reports.push(("encoder".into(), encoder_gradcheck(seed)));
        reports.push(("encoder+decoder kw on".into(), pipeline_gradcheck(seed, KeywordMode::On)));
        reports.push(("encoder+decoder kw off".into(), pipeline_gradcheck(seed, KeywordMode::Off)));
        for (name, r) in reports {
            checks += 1;
            worst = worst.max(r.max_rel_error());
            if !r.passed() || r.tolerance != GRAD_TOL {
                failures.push(format!("{name}@{seed}"));
            }
        }
    }
    let took = t.elapsed();
    let pass = failures.is_empty() && worst < GRAD_TOL && took < GRAD_BUDGET;
    outcome(pass, format!("{checks} checks over {GRAD_SEEDS} seeds, max rel err {worst:.2e} < {GRAD_TOL:e}, eps {GRAD_EPS:e}, {took:.1?} (failed: {failures:?})"))
}

fn beam() -> Outcome {
    let t = Instant::now();
    let mut errors = Vec::new();
    for seed in 0..BEAM_SEEDS {
        let vocab = 4 + (seed % 2) as usize;
        let max_len = 1 + (seed % 4) as usize;
        if let Err(e) = beam_oracle(seed, vocab, max_len) {
            errors.push(format!("seed {seed}: {e}"));
        }
    }
    let took = t.elapsed();
    outcome(errors.is_empty() && took < BEAM_BUDGET, format!("{BEAM_SEEDS} seeds, V in 4..=5, L in 1..=4, width V^L and width 1 vs greedy, {took:.1?} {errors:?}"))
}

fn cam() -> Outcome {
    let worst = (0..CAM_INPUTS).map(cam_identity_error).fold(0.0, f64::max);
    outcome(worst < CAM_TOL, format!("{CAM_INPUTS} inputs, 4 classes each, max |mean(CAM)+b-logit| {worst:.2e} < {CAM_TOL:e}"))
}

fn metrics() -> Outcome {
    let t = Instant::now();
    let mut notes = Vec::new();

    let corpus = vec![toks("the optic disc is swollen today"), toks("drusen seen in the macula region")];
    let id = bleu_corpus(&corpus, &corpus).unwrap();
    let identity = id.bleu.iter().all(|&b| b == 1.0) && bleu_oracle(&corpus, &corpus) == [1.0; 4];
    notes.push(format!("identity BLEU {:?}", id.bleu));

    let clipped = bleu_corpus(&[toks("the the the")], &[toks("the cat")]).unwrap();
    let clip_ok = (clipped.precisions[0] - 1.0 / 3.0).abs() < METRIC_TOL && clipped.brevity_penalty == 1.0;
    notes.push(format!("p1 {:.6} BP {}", clipped.precisions[0], clipped.brevity_penalty));

    let (cand, reference) = (toks("a b c d"), toks("a c b d"));
    let lcs = lcs_brute(&cand, &reference);
    let (p, r) = (lcs as f64 / cand.len() as f64, lcs as f64 / reference.len() as f64);
    let beta2 = DEFAULT_ROUGE_BETA * DEFAULT_ROUGE_BETA;
    let by_hand = (1.0 + beta2) * p * r / (r + beta2 * p);
    let rouge = rouge_l(&cand, &reference, DEFAULT_ROUGE_BETA);
    let rouge_ok = (rouge - 0.75).abs() < METRIC_TOL && (rouge - by_hand).abs() < METRIC_TOL && lcs_length(&cand, &reference) == lcs;
    notes.push(format!("ROUGE-L {rouge}"));

    let refs = vec![toks("optic disc swelling with blurred margins"), toks("drusen deposits near the fovea")];
    let c = cider(&refs, &refs).unwrap();
    let cider_ok = c.per_item.iter().all(|v| (v - 10.0).abs() < CIDER_TOL);
    notes.push(format!("CIDEr {:?}", c.per_item));

    let mut rng = common::rng(41);
    let classes = 10u32;
    let (mut rankings, mut truths, mut placed) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..PREC_RECORDS {
        let mut order: Vec<u32> = (0..classes).collect();
        order.shuffle(&mut rng);
        let pos = rng.random_range(0..classes as usize);
        truths.push(order[pos]);
        placed.push(pos);
        rankings.push(order);
    }
    let prec_ok = (1..=classes as usize).all(|k| {
        let want = placed.iter().filter(|&&p| p < k).count() as f64 / PREC_RECORDS as f64;
        precision_at_k(&rankings, &truths, k).unwrap() == want
    });
    notes.push(format!("Prec@1..10 on {PREC_RECORDS} records {}", if prec_ok { "match" } else { "differ" }));

    let took = t.elapsed();
    outcome(identity && clip_ok && rouge_ok && cider_ok && prec_ok && took < METRIC_BUDGET, format!("{}; {took:.1?}", notes.join(", ")))
}

fn split_arithmetic() -> Outcome {
    let n = 15709;
    let recs: Vec<serde_json::Value> = (0..n)
        .map(|i| {
            serde_json::json!({"id": format!("r{i}"), "image_path": "x.pgm", "modality": "FA", "disease": "d", "keywords": [], "description": "d"})
        })
        .collect();
    let m = DatasetManifest::from_json(&serde_json::Value::Array(recs).to_string()).unwrap();
    let by_ratio = split_dataset(&m, SplitSizing::Ratios { train: 0.6, val: 0.2, test: 0.2 }, 0, false).unwrap();
    let r = split::split_sizes(&by_ratio);
    let by_count = split_dataset(&m, SplitSizing::Counts { train: 9425, val: 3142, test: 3142 }, 0, false).unwrap();
    let c = split::split_sizes(&by_count);
    outcome(r.iter().sum::<usize>() == n && c == [9425, 3142, 3142], format!("ratios {r:?} (sum {}), counts {c:?}", r.iter().sum::<usize>()))
}

fn ablation() -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let ds = generate_synthetic_dataset(&SynthConfig { classes: 4, records: 200, seed, ..Default::default() }).unwrap();
        let m = split_dataset(&ds.manifest, SplitSizing::Ratios { train: 0.6, val: 0.2, test: 0.2 }, seed, false).unwrap();
        let mut cc = TrainConfig::classifier();
        cc.seed = seed;
        let encoder = train_classifier(&m, &ds.images, &cc, None).unwrap().encoder;
        let (v, kv) = build_train_vocabularies(&m, 1).unwrap();
        let score = |mode: KeywordMode| {
            let mut c = TrainConfig::captioner();
            c.seed = seed;
            c.keyword_mode = mode;
            let model = train_captioner(&m, &ds.images, &c, &encoder, &v, &kv).unwrap().model;
            let opts = EvalOptions::new(3, c.max_caption_len, vec![1]);
            evaluate_pipeline(&m, &ds.images, &model, &opts, Split::Test).unwrap().report.bleu_avg
        };
        let (on, off) = (score(KeywordMode::On), score(KeywordMode::Off));
        if on >= off {
            wins += 1;
        }
        rows.push(format!("{on:.3}/{off:.3}"));
    }
    let took = t.elapsed();
    outcome(
        wins >= ABLATION_MIN_WINS && took < ABLATION_BUDGET,
        format!("keyword on >= off in {wins}/{ABLATION_SEEDS} seeds (BLEU-avg on/off {}), {took:.0?}", rows.join(" ")),
    )
}

fn lr_schedule_check() -> Outcome {
    let cfg = SgdConfig { learning_rate: 0.1, decay_factor: 5.0, decay_period_epochs: 50 };
    let got: Vec<f64> = [0, 49, 50, 100].iter().map(|&e| lr_schedule(e, &cfg)).collect();
    let exact = got.iter().zip([0.1, 0.1, 0.02, 0.004]).all(|(g, w)| (g - w).abs() < LR_TOL);
    let monotone = (0..500).all(|e| lr_schedule(e + 1, &cfg) <= lr_schedule(e, &cfg));
    outcome(exact && monotone, format!("epochs 0/49/50/100 -> {got:?}, non-increasing over 500 epochs: {monotone}"))
}

fn retina(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_retina")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains a small model twice through the CLI and runs `report` twice.
fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let data = d.join("data");
    let manifest = data.join("manifest.json");
    retina(&["synth-data", "--out", s(&data), "--records", "40", "--seed", "5"])?;
    retina(&["split", "--manifest", s(&manifest), "--ratios", "0.6,0.2,0.2", "--seed", "5"])?;
    for run in ["a", "b"] {
        let out = d.join(run);
        retina(&["train-rdi", "--manifest", s(&manifest), "--out", s(&out), "--epochs", "3", "--seed", "5"])?;
        let enc = out.join("checkpoints/encoder.ck");
        retina(&["train-cdg", "--manifest", s(&manifest), "--encoder", s(&enc), "--out", s(&out), "--epochs", "3", "--seed", "5"])?;
    }
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    for f in ["checkpoints/encoder.ck", "checkpoints/decoder.ck"] {
        if read(&d.join("a").join(f))? != read(&d.join("b").join(f))? {
            return Err(format!("{f} differs between identical runs"));
        }
        let bytes = read(&d.join("a").join(f))?;
        let ck = ModelCheckpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
        if ck.to_bytes() != bytes || ModelCheckpoint::from_bytes(&ck.to_bytes()).map_err(|e| e.to_string())? != ck {
            return Err(format!("{f} does not round-trip"));
        }
    }
    let m = parse_manifest(&manifest).map_err(|e| e.to_string())?;
    if DatasetManifest::from_json(&m.to_json()).map_err(|e| e.to_string())? != m {
        return Err("manifest does not round-trip".into());
    }
    let (enc, dec) = (d.join("a/checkpoints/encoder.ck"), d.join("a/checkpoints/decoder.ck"));
    let mut html = Vec::new();
    for run in ["r1", "r2"] {
        retina(&["report", "--manifest", s(&manifest), "--encoder", s(&enc), "--decoder", s(&dec), "--out", s(&d.join(run))])?;
        html.push(read(&d.join(run).join("reports/report.html"))?);
    }
    if html[0] != html[1] {
        return Err("report HTML differs between runs".into());
    }
    Ok(format!("encoder.ck and decoder.ck bit-identical across runs, checkpoint and manifest round-trip, report.html ({} bytes) identical on re-run", html[0].len()))
}

fn determinism_check() -> Outcome {
    match determinism() {
        Ok(d) => outcome(true, d),
        Err(e) => outcome(false, e),
    }
}

fn overfit() -> Outcome {
    let fit = toy_overfit(TOY_SEED, TOY_EPOCHS);
    outcome(
        fit.mean_loss < TOY_MAX_LOSS && fit.exact >= TOY_MIN_EXACT,
        format!(
            "{} records, {TOY_EPOCHS} epochs: teacher-forced loss {:.4} < {TOY_MAX_LOSS}, exact greedy reproductions {}/{} >= {TOY_MIN_EXACT}",
            fit.records, fit.mean_loss, fit.exact, fit.records
        ),
    )
}

fn main() {
    // `cargo test` forwards libtest arguments: honour `--list` and skip the
    // gate when a name filter does not select it.
    let args: Vec<String> = std::env::args().skip(1).collect();
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| a == "--list") || (!filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str()))) {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("beam search optimality", beam),
        ("CAM-logit identity", cam),
        ("metric oracles", metrics),
        ("split arithmetic", split_arithmetic),
        ("keyword ablation direction", ablation),
        ("learning-rate schedule", lr_schedule_check),
        ("determinism and round-trips", determinism_check),
        ("overfitting sanity", overfit),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} {}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
