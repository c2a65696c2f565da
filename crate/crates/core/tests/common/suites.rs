//! Check routines run both by the focused test files and by the acceptance
//! target.

use retina_core::encoder::{init_encoder_params, record_encoder, ConvStage, Encoder, EncoderConfig};
use retina_core::explain::compute_cam;
use retina_core::language::generator::record_conditioning;
use retina_core::language::generator::record_caption_loss;
use retina_core::language::{init_decoder_params, BeamConfig, Decoder, DecoderConfig, KeywordMode, END, START};
use retina_core::nn::gradcheck::check_builder;
use retina_core::nn::lstm::{lstm_step, LstmVars};
use retina_core::nn::{Bound, GradCheckReport, ParamSet, Tape, Tensor, Var};
use retina_core::Result;

use super::*;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Contracts `out` against a fixed random tensor so every output element
/// gets a distinct upstream gradient.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let probe = uniform(&mut rng(seed ^ 0xC0FFEE), tape.value(out).shape(), 1.0);
    let probe = tape.constant(probe);
    let prod = tape.mul(out, probe)?;
    tape.sum(prod)
}

fn params(items: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, t) in items {
        p.insert(name, t);
    }
    p
}

/// One gradient check per differentiable tape op.
pub fn op_gradchecks(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut check = |name: &'static str, p: ParamSet, build: &dyn Fn(&mut Tape, &Bound) -> Result<Var>| {
        let report = check_builder(&p, |t: &mut Tape, b: &Bound| build(t, b), GRAD_EPS, GRAD_TOL).unwrap();
        out.push((name, report));
    };

    let p = params(vec![("x", uniform(&mut r, &[2, 5, 5], 1.0)), ("k", uniform(&mut r, &[3, 2, 3, 3], 1.0)), ("b", uniform(&mut r, &[3], 1.0))]);
    check("conv2d", p.clone(), &|t, b| {
        let y = t.conv2d(b.get("x")?, b.get("k")?, b.get("b")?, 1, 1)?;
        contract(t, y, seed)
    });
    check("conv2d stride 2", p, &|t, b| {
        let y = t.conv2d(b.get("x")?, b.get("k")?, b.get("b")?, 2, 1)?;
        contract(t, y, seed)
    });
    check("maxpool2d", params(vec![("x", uniform(&mut r, &[2, 4, 4], 1.0))]), &|t, b| {
        let y = t.maxpool2d(b.get("x")?, 2, 2)?;
        contract(t, y, seed)
    });
    check("relu", params(vec![("x", uniform(&mut r, &[7], 1.0))]), &|t, b| {
        let y = t.relu(b.get("x")?)?;
        contract(t, y, seed)
    });
    check("sigmoid", params(vec![("x", uniform(&mut r, &[5], 3.0))]), &|t, b| {
        let y = t.sigmoid(b.get("x")?)?;
        contract(t, y, seed)
    });
    check("tanh", params(vec![("x", uniform(&mut r, &[5], 3.0))]), &|t, b| {
        let y = t.tanh(b.get("x")?)?;
        contract(t, y, seed)
    });
    let p = params(vec![("x", uniform(&mut r, &[4], 1.0)), ("w", uniform(&mut r, &[3, 4], 1.0)), ("b", uniform(&mut r, &[3], 1.0))]);
    check("linear", p.clone(), &|t, b| {
        let y = t.linear(b.get("x")?, b.get("w")?, Some(b.get("b")?))?;
        contract(t, y, seed)
    });
    check("linear no bias", p, &|t, b| {
        let y = t.linear(b.get("x")?, b.get("w")?, None)?;
        contract(t, y, seed)
    });
    check("global_avg_pool", params(vec![("x", uniform(&mut r, &[3, 3, 4], 1.0))]), &|t, b| {
        let y = t.global_avg_pool(b.get("x")?)?;
        contract(t, y, seed)
    });
    let p = params(vec![("a", uniform(&mut r, &[6], 1.0)), ("c", uniform(&mut r, &[6], 1.0))]);
    check("add", p.clone(), &|t, b| {
        let y = t.add(b.get("a")?, b.get("c")?)?;
        contract(t, y, seed)
    });
    check("mul", p.clone(), &|t, b| {
        let y = t.mul(b.get("a")?, b.get("c")?)?;
        contract(t, y, seed)
    });
    check("scale", p.clone(), &|t, b| {
        let y = t.scale(b.get("a")?, -0.7)?;
        contract(t, y, seed)
    });
    check("slice", p.clone(), &|t, b| {
        let y = t.slice(b.get("a")?, 2, 3)?;
        contract(t, y, seed)
    });
    check("mean", p, &|t, b| {
        let a = t.sum(b.get("a")?)?;
        let c = t.sum(b.get("c")?)?;
        let sq = t.mul(c, c)?;
        t.mean(&[a, sq])
    });
    check("row", params(vec![("e", uniform(&mut r, &[4, 3], 1.0))]), &|t, b| {
        let y = t.row(b.get("e")?, 2)?;
        contract(t, y, seed)
    });
    check("softmax_cross_entropy", params(vec![("z", uniform(&mut r, &[5], 2.0))]), &|t, b| t.softmax_cross_entropy(b.get("z")?, 3));
    let (d, h) = (3, 4);
    let p = params(vec![
        ("x", uniform(&mut r, &[d], 1.0)),
        ("h", uniform(&mut r, &[h], 1.0)),
        ("c", uniform(&mut r, &[h], 1.0)),
        ("wx", uniform(&mut r, &[4 * h, d], 1.0)),
        ("wh", uniform(&mut r, &[4 * h, h], 1.0)),
        ("bias", uniform(&mut r, &[4 * h], 1.0)),
    ]);
    check("lstm_step", p, &|t, b| {
        let lv = LstmVars { w_x: b.get("wx")?, w_h: b.get("wh")?, bias: b.get("bias")? };
        let (h2, c2) = lstm_step(t, b.get("x")?, b.get("h")?, b.get("c")?, lv)?;
        let both = t.add(h2, c2)?;
        contract(t, both, seed)
    });
    out
}

pub fn micro_encoder_config() -> EncoderConfig {
    EncoderConfig { input_channels: 1, image_side: 8, stages: vec![ConvStage::same3x3(2), ConvStage::same3x3(3)], num_classes: 3 }
}

/// Classifier loss of a two-stage encoder on one random 8×8 input.
pub fn encoder_gradcheck(seed: u64) -> GradCheckReport {
    let cfg = micro_encoder_config();
    let mut r = rng(seed);
    let p = randomize(&init_encoder_params(&cfg, seed).unwrap(), &mut r, 0.8);
    let input = uniform(&mut r, &[1, 8, 8], 1.0);
    let target = (seed % 3) as usize;
    check_builder(
        &p,
        |t: &mut Tape, b: &Bound| {
            let x = t.constant(input.clone());
            let v = record_encoder(t, b, &cfg, x)?;
            t.softmax_cross_entropy(v.logits, target)
        },
        GRAD_EPS,
        GRAD_TOL,
    )
    .unwrap()
}

/// Encoder feeding the keyword-fused decoder, teacher-forced caption loss,
/// gradients through every parameter of both.
pub fn pipeline_gradcheck(seed: u64, mode: KeywordMode) -> GradCheckReport {
    let enc = micro_encoder_config();
    let dec = DecoderConfig { feature_dim: 3, embed_dim: 3, hidden_dim: 3, vocab_size: 6, keyword_vocab_size: 5, keyword_mode: mode };
    let mut r = rng(seed);
    let mut p = randomize(&init_encoder_params(&enc, seed).unwrap(), &mut r, 0.8);
    p.extend(randomize(&init_decoder_params(&dec, seed).unwrap(), &mut r, 0.8));
    let input = uniform(&mut r, &[1, 8, 8], 1.0);
    let hot = Tensor::vector(&[0.0, 0.0, 0.0, 1.0, 1.0]);
    let target = [START, 4, 5, 4, END];
    check_builder(
        &p,
        |t: &mut Tape, b: &Bound| {
            let x = t.constant(input.clone());
            let v = record_encoder(t, b, &enc, x)?;
            let kw = t.constant(hot.clone());
            let fused = record_conditioning(t, b, mode, v.pooled, Some(kw))?;
            record_caption_loss(t, b, fused, &target)
        },
        GRAD_EPS,
        GRAD_TOL,
    )
    .unwrap()
}

/// Random decoder with peaked distributions over a tiny vocabulary.
pub fn random_decoder(seed: u64, vocab: usize) -> (ParamSet, Tensor) {
    let cfg = DecoderConfig { feature_dim: 3, embed_dim: 4, hidden_dim: 5, vocab_size: vocab, keyword_vocab_size: 4, keyword_mode: KeywordMode::Off };
    let mut r = rng(seed);
    let p = randomize(&init_decoder_params(&cfg, seed).unwrap(), &mut r, 1.5);
    let fused = uniform(&mut r, &[4], 1.0);
    (p, fused)
}

/// Beam search with a width covering every sequence must return exactly
/// the exhaustively enumerated ranking; width 1 must equal greedy.
pub fn beam_oracle(seed: u64, vocab: usize, max_len: usize) -> std::result::Result<(), String> {
    let (p, fused) = random_decoder(seed, vocab);
    let dec = Decoder::new(&p).unwrap();
    let width = vocab.pow(max_len as u32);
    let beam = dec.beam(&fused, BeamConfig { width, max_len, length_normalize: false }).unwrap();

    let mut all: Vec<(Vec<usize>, f64)> = enumerate_sequences(vocab, max_len)
        .into_iter()
        .map(|s| {
            let lp = sequence_log_prob_naive(&p, fused.data(), &s);
            (s, lp)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if beam.len() != all.len() {
        return Err(format!("beam kept {} sequences, enumeration has {}", beam.len(), all.len()));
    }
    if beam[0].tokens != all[0].0 {
        return Err(format!("argmax {:?} vs enumerated {:?}", beam[0].tokens, all[0].0));
    }
    for (h, (s, lp)) in beam.iter().zip(&all) {
        if &h.tokens != s || (h.log_prob - lp).abs() > 1e-9 {
            return Err(format!("ranking differs at {:?} ({}) vs {:?} ({lp})", h.tokens, h.log_prob, s));
        }
    }
    let greedy = dec.greedy(&fused, max_len).unwrap();
    let one = dec.beam(&fused, BeamConfig { width: 1, max_len, length_normalize: false }).unwrap();
    if one.len() != 1 || one[0].tokens != greedy.tokens || (one[0].log_prob - greedy.log_prob).abs() > 1e-12 {
        return Err(format!("beam-1 {:?} vs greedy {:?}", one.first().map(|h| &h.tokens), greedy.tokens));
    }
    Ok(())
}

/// Max over classes of |mean(CAM_c) + b_c − logit_c| for one random input.
pub fn cam_identity_error(seed: u64) -> f64 {
    let cfg = EncoderConfig::new(3, 4);
    let mut r = rng(seed);
    let params = randomize(&init_encoder_params(&cfg, seed).unwrap(), &mut r, 0.5);
    let enc = Encoder::new(cfg, params, (0..4).map(|i| format!("c{i}")).collect()).unwrap();
    let input = uniform(&mut r, &[3, 32, 32], 1.0);
    let out = enc.encode_tensor(&input).unwrap();
    let w = enc.classifier_weights().unwrap();
    let b = enc.classifier_bias().unwrap();
    (0..4)
        .map(|c| {
            let cam = compute_cam(&out.feature_maps, w, c).unwrap();
            (cam.mean() + b.data()[c] - out.logits.data()[c]).abs()
        })
        .fold(0.0, f64::max)
}

pub struct ToyFit {
    pub mean_loss: f64,
    pub exact: usize,
    pub records: usize,
}

/// Overfits the captioner on eight records (random frozen encoder, one
/// full batch per epoch, constant learning rate) and scores the result by
/// teacher-forced loss and greedy reproduction of the training captions.
pub fn toy_overfit(seed: u64, epochs: usize) -> ToyFit {
    use retina_core::dataset::Split;
    use retina_core::language::generator::caption_loss;
    use retina_core::language::tokenize;
    use retina_core::train::{build_train_vocabularies, train_captioner, TrainConfig};

    let ds = generate_synthetic_dataset(&SynthConfig { seed, records: 8, ..Default::default() }).unwrap();
    let m = split_dataset(&ds.manifest, SplitSizing::Counts { train: 8, val: 0, test: 0 }, seed, false).unwrap();
    let cfg = EncoderConfig::new(3, m.classes().len());
    let enc = Encoder::new(cfg.clone(), init_encoder_params(&cfg, seed).unwrap(), m.classes().to_vec()).unwrap();
    let (v, kv) = build_train_vocabularies(&m, 1).unwrap();
    let mut c = TrainConfig::captioner();
    c.seed = seed;
    c.epochs = epochs;
    c.batch_size = 8;
    c.sgd.learning_rate = 1.0;
    c.sgd.decay_period_epochs = epochs + 1;
    let model = train_captioner(&m, &ds.images, &c, &enc, &v, &kv).unwrap().model;

    let mut loss = 0.0;
    let mut exact = 0;
    for (rec, img) in m.records().iter().zip(&ds.images) {
        assert_eq!(rec.split, Some(Split::Train));
        let pooled = model.encoder.encode(img).unwrap().pooled;
        let fused = model.conditioning(&pooled, &rec.keywords).unwrap();
        let words = tokenize(&rec.description);
        loss += caption_loss(&fused, &model.vocab.encode_caption(&words), &model.params).unwrap();
        let hyp = model.greedy_from_pooled(&pooled, &rec.keywords).unwrap();
        if model.words(&hyp) == words {
            exact += 1;
        }
    }
    ToyFit { mean_loss: loss / m.len() as f64, exact, records: m.len() }
}
