//! Metric definitions recomputed with hash maps, dense vectors and
//! exhaustive search.

use std::collections::HashMap;

use rand::Rng as _;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn grams(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut m = HashMap::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        *m.entry(tokens[i..i + n].to_vec()).or_insert(0) += 1;
        i += 1;
    }
    m
}

pub fn bleu_oracle(cands: &[Vec<String>], refs: &[Vec<String>]) -> [f64; 4] {
    let mut p = [0.0; 4];
    for n in 1..=4 {
        let (mut hit, mut all) = (0.0, 0.0);
        for (c, r) in cands.iter().zip(refs) {
            let rg = grams(r, n);
            for (g, k) in grams(c, n) {
                hit += k.min(*rg.get(&g).unwrap_or(&0)) as f64;
                all += k as f64;
            }
        }
        p[n - 1] = if all > 0.0 { hit / all } else { 0.0 };
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c == 0 { 0.0 } else { (1.0 - r as f64 / c as f64).exp().min(1.0) };
    let mut out = [0.0; 4];
    for k in 0..4 {
        let prod: f64 = p[..=k].iter().product();
        out[k] = if prod == 0.0 { 0.0 } else { bp * prod.powf(1.0 / (k + 1) as f64) };
    }
    out
}

/// Longest common subsequence by trying every subsequence of `a`.
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        let mut j = 0;
        for t in b {
            if j < sub.len() && sub[j] == t {
                j += 1;
            }
        }
        if j == sub.len() {
            best = best.max(sub.len());
        }
    }
    best
}

pub fn cider_oracle(cands: &[Vec<String>], refs: &[Vec<String>]) -> Vec<f64> {
    let n_docs = refs.len() as f64;
    let mut scores = vec![0.0; cands.len()];
    for n in 1..=4 {
        let ref_grams: Vec<_> = refs.iter().map(|r| grams(r, n)).collect();
        let mut df: HashMap<Vec<String>, f64> = HashMap::new();
        for rg in &ref_grams {
            for g in rg.keys() {
                *df.entry(g.clone()).or_insert(0.0) += 1.0;
            }
        }
        for i in 0..cands.len() {
            let cg = grams(&cands[i], n);
            let mut keys: Vec<&Vec<String>> = cg.keys().chain(ref_grams[i].keys()).collect();
            keys.sort();
            keys.dedup();
            let weight = |g: &Vec<String>| (n_docs / df.get(g).copied().unwrap_or(0.0).max(1.0)).ln();
            let a: Vec<f64> = keys.iter().map(|g| *cg.get(*g).unwrap_or(&0) as f64 * weight(g)).collect();
            let b: Vec<f64> = keys.iter().map(|g| *ref_grams[i].get(*g).unwrap_or(&0) as f64 * weight(g)).collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na > 0.0 && nb > 0.0 {
                scores[i] += dot / (na * nb);
            }
        }
    }
    scores.iter().map(|s| s / 4.0 * 10.0).collect()
}

pub fn random_sentence(r: &mut retina_core::rng::Rng, alphabet: &[&str], len: std::ops::Range<usize>) -> Vec<String> {
    let n = r.random_range(len);
    (0..n).map(|_| alphabet[r.random_range(0..alphabet.len())].to_string()).collect()
}
