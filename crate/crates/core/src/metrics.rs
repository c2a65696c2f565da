//! Caption and classification metrics: corpus BLEU-1..4, ROUGE-L, CIDEr and
//! Prec@k. Single reference per candidate throughout.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::tokenize;

pub const DEFAULT_ROUGE_BETA: f64 = 1.2;
const CIDER_MAX_N: usize = 4;

/// Contiguous `n`-grams with multiplicity.
pub fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut out = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    /// BLEU-1..BLEU-4.
    pub bleu: [f64; 4],
    pub bleu_avg: f64,
    /// Clipped n-gram precisions p_1..p_4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
}

fn check_corpus<A, B>(op: &'static str, cands: &[A], refs: &[B]) -> Result<()> {
    if cands.len() != refs.len() {
        return Err(Error::invalid(op, format!("{} candidates vs {} references", cands.len(), refs.len())));
    }
    if cands.is_empty() {
        return Err(Error::invalid(op, "empty corpus"));
    }
    Ok(())
}

/// Corpus-level, unsmoothed BLEU-1..4.
pub fn bleu_corpus<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>]) -> Result<BleuScores> {
    check_corpus("bleu_corpus", candidates, references)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=4 {
            let rc = ngram_counts(reference, n);
            for (g, cnt) in ngram_counts(cand, n) {
                matched[n - 1] += cnt.min(rc.get(&g).copied().unwrap_or(0));
                total[n - 1] += cnt;
            }
        }
    }
    let precisions: [f64; 4] =
        std::array::from_fn(|i| if total[i] == 0 { 0.0 } else { matched[i] as f64 / total[i] as f64 });
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let bleu: [f64; 4] = std::array::from_fn(|k| {
        let ps = &precisions[..=k];
        if brevity_penalty == 0.0 || ps.contains(&0.0) {
            0.0
        } else {
            brevity_penalty * (ps.iter().map(|p| p.ln()).sum::<f64>() / ps.len() as f64).exp()
        }
    });
    let bleu_avg = bleu.iter().sum::<f64>() / 4.0;
    Ok(BleuScores { bleu, bleu_avg, precisions, brevity_penalty })
}

pub fn lcs_length<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-score; 0 when either side is empty or nothing matches.
pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_length(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let r = l / reference.len() as f64;
    let p = l / candidate.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * r * p / (r + b2 * p)
}

pub fn rouge_l_corpus<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>], beta: f64) -> Result<f64> {
    check_corpus("rouge_l", candidates, references)?;
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r, beta)).sum();
    Ok(sum / candidates.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderScores {
    pub per_item: Vec<f64>,
    pub mean: f64,
}

fn tfidf(counts: &BTreeMap<Vec<&str>, usize>, idf: &dyn Fn(&[&str]) -> f64) -> BTreeMap<Vec<String>, f64> {
    counts
        .iter()
        .map(|(g, &c)| (g.iter().map(|s| s.to_string()).collect(), c as f64 * idf(g)))
        .collect()
}

fn cosine(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    dot / (na * nb)
}

/// CIDEr (no length penalty): per item, mean over n = 1..4 of the TF-IDF
/// cosine between candidate and reference, times 10. Document frequencies
/// come from the references; IDF = ln(N / max(1, df)).
pub fn cider<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>]) -> Result<CiderScores> {
    check_corpus("cider", candidates, references)?;
    if candidates.len() < 2 {
        return Err(Error::invalid(
            "cider",
            "IDF is degenerate for a corpus of fewer than 2 items (every n-gram would have zero weight)",
        ));
    }
    let n_docs = references.len() as f64;
    let mut per_item = vec![0.0; candidates.len()];
    for n in 1..=CIDER_MAX_N {
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let mut df: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
        for rc in &ref_counts {
            for g in rc.keys() {
                *df.entry(g.clone()).or_insert(0) += 1;
            }
        }
        let idf = |g: &[&str]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (i, (cand, rc)) in candidates.iter().zip(&ref_counts).enumerate() {
            let cv = tfidf(&ngram_counts(cand, n), &idf);
            let rv = tfidf(rc, &idf);
            per_item[i] += cosine(&cv, &rv);
        }
    }
    for s in &mut per_item {
        *s = *s / CIDER_MAX_N as f64 * 10.0;
    }
    let mean = per_item.iter().sum::<f64>() / per_item.len() as f64;
    Ok(CiderScores { per_item, mean })
}

/// Fraction of records whose truth is among the first `k` ranked labels.
pub fn precision_at_k<T: PartialEq>(rankings: &[Vec<T>], truths: &[T], k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::invalid("precision_at_k", "empty record set"));
    }
    if rankings.len() != truths.len() {
        return Err(Error::invalid("precision_at_k", format!("{} rankings vs {} truths", rankings.len(), truths.len())));
    }
    if k == 0 {
        return Err(Error::invalid("precision_at_k", "k must be at least 1"));
    }
    let mut hits = 0usize;
    for (i, (ranking, truth)) in rankings.iter().zip(truths).enumerate() {
        if ranking.len() < k {
            return Err(Error::invalid("precision_at_k", format!("record {i} ranks {} labels, fewer than k={k}", ranking.len())));
        }
        hits += ranking[..k].contains(truth) as usize;
    }
    Ok(hits as f64 / rankings.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub bleu_avg: f64,
    pub cider: f64,
    pub rouge: f64,
    pub prec_at: BTreeMap<usize, f64>,
}

impl MetricReport {
    /// Caption metrics for a tokenized corpus; `prec_at` left empty.
    pub fn from_captions<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>], rouge_beta: f64) -> Result<Self> {
        let b = bleu_corpus(candidates, references)?;
        Ok(Self {
            bleu_1: b.bleu[0],
            bleu_2: b.bleu[1],
            bleu_3: b.bleu[2],
            bleu_4: b.bleu[3],
            bleu_avg: b.bleu_avg,
            cider: cider(candidates, references)?.mean,
            rouge: rouge_l_corpus(candidates, references, rouge_beta)?,
            prec_at: BTreeMap::new(),
        })
    }

    pub fn add_precision<T: PartialEq>(&mut self, rankings: &[Vec<T>], truths: &[T], ks: &[usize]) -> Result<()> {
        for &k in ks {
            self.prec_at.insert(k, precision_at_k(rankings, truths, k)?);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes") + "\n"
    }
}

/// One tokenized caption per line.
pub fn parse_caption_lines(text: &str) -> Vec<Vec<String>> {
    text.lines().map(tokenize).collect()
}

/// Rankings file: per non-blank line, the truth label then ranked labels,
/// separated by whitespace and/or commas.
pub fn parse_rankings(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut truths = Vec::new();
    let mut rankings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<String> =
            line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).map(str::to_string).collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 2 {
            return Err(Error::Data(format!("rankings line {}: need a truth label and at least one ranked label", i + 1)));
        }
        let unique: BTreeSet<&String> = fields[1..].iter().collect();
        if unique.len() != fields.len() - 1 {
            return Err(Error::Data(format!("rankings line {}: duplicate ranked label", i + 1)));
        }
        truths.push(fields[0].clone());
        rankings.push(fields[1..].to_vec());
    }
    Ok((truths, rankings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn ngram_examples() {
        let c = ngram_counts(&["a", "b", "a"], 1);
        assert_eq!(c[&vec!["a"]], 2);
        assert_eq!(c[&vec!["b"]], 1);
        assert!(ngram_counts(&["a", "b"], 3).is_empty());
    }

    #[test]
    fn bleu_examples() {
        let s = bleu_corpus(&[toks("a b c d e")], &[toks("a b c d e")]).unwrap();
        assert_eq!(s.bleu, [1.0; 4]);
        let s = bleu_corpus(&[toks("the the the")], &[toks("the cat")]).unwrap();
        assert_eq!(s.precisions[0], 1.0 / 3.0);
        assert_eq!(s.brevity_penalty, 1.0);
        assert_eq!(s.bleu[0], 1.0 / 3.0);
        let s = bleu_corpus(&[toks("x y")], &[toks("a b")]).unwrap();
        assert_eq!(s.bleu, [0.0; 4]);
        assert!(bleu_corpus::<String, String>(&[], &[]).is_err());
        assert!(bleu_corpus(&[toks("a")], &[toks("a"), toks("b")]).is_err());
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let s = bleu_corpus(&[Vec::<String>::new()], &[toks("a b")]).unwrap();
        assert_eq!(s.bleu, [0.0; 4]);
    }

    #[test]
    fn rouge_examples() {
        let a = toks("a b c d");
        assert_eq!(rouge_l(&a, &a, 1.2), 1.0);
        let f = rouge_l(&a, &toks("a c b d"), 1.2);
        assert!((f - 0.75).abs() < 1e-15);
        assert_eq!(rouge_l(&a, &toks("x y"), 1.2), 0.0);
        assert_eq!(rouge_l::<String, String>(&[], &a, 1.2), 0.0);
    }

    #[test]
    fn cider_examples() {
        let refs = vec![toks("a b c d"), toks("e f g h")];
        let s = cider(&refs, &refs).unwrap();
        for v in &s.per_item {
            assert!((v - 10.0).abs() < 1e-8, "{v}");
        }
        let s = cider(&[toks("x y"), toks("e f g h")], &refs).unwrap();
        assert_eq!(s.per_item[0], 0.0);
        assert!(cider(&[toks("a")], &[toks("a")]).is_err());
    }

    #[test]
    fn precision_examples() {
        let r = vec![vec![1, 2, 3, 4, 5], vec![2, 9, 1, 4, 5]];
        assert_eq!(precision_at_k(&r, &[1, 1], 1).unwrap(), 0.5);
        assert_eq!(precision_at_k(&r, &[1, 1], 5).unwrap(), 1.0);
        assert!(precision_at_k(&r, &[1, 1], 6).is_err());
        assert!(precision_at_k::<usize>(&[], &[], 1).is_err());
    }

    #[test]
    fn rankings_parse() {
        let (t, r) = parse_rankings("amd amd dr\n\ndr, amd, dr2\n").unwrap();
        assert_eq!(t, vec!["amd", "dr"]);
        assert_eq!(r[1], vec!["amd", "dr2"]);
        assert!(parse_rankings("amd\n").is_err());
        assert!(parse_rankings("a b b\n").is_err());
    }
}
