use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::language::tokenize::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextField {
    Keywords,
    Description,
}

/// Word count → number of records with that count.
pub fn word_length_histogram(manifest: &DatasetManifest, field: TextField) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for r in manifest.records() {
        let words = match field {
            TextField::Keywords => r.keywords.iter().map(|k| tokenize(k).len()).sum(),
            TextField::Description => tokenize(&r.description).len(),
        };
        *hist.entry(words).or_insert(0) += 1;
    }
    hist
}
