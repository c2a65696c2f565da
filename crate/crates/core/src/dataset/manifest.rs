use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use super::image::Modality;
use crate::error::{Error, Result};
use crate::language::tokenize::split_keywords;
use crate::nn::checkpoint::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One image with its disease label, keyword phrases and clinical description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub id: String,
    pub image_path: String,
    pub modality: Modality,
    pub disease: String,
    #[serde(deserialize_with = "keywords_from_json")]
    pub keywords: Vec<String>,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Accepts either one comma-separated string or an array of phrases (each of
/// which may itself contain commas); always yields normalized phrases.
fn keywords_from_json<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(String),
        Many(Vec<String>),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::One(s) => split_keywords(&s),
        Raw::Many(v) => v.iter().flat_map(|s| split_keywords(s)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    records: Vec<CaseRecord>,
    classes: Vec<String>,
}

impl DatasetManifest {
    /// Validates records and derives the sorted class list.
    pub fn new(records: Vec<CaseRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (index, r) in records.iter().enumerate() {
            let err = |detail: &str| Error::Manifest { index, detail: detail.to_string() };
            if r.id.trim().is_empty() {
                return Err(err("empty id"));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest { index, detail: format!("duplicate id '{}'", r.id) });
            }
            if r.disease.trim().is_empty() {
                return Err(err("empty disease"));
            }
            if r.description.trim().is_empty() {
                return Err(err("empty description"));
            }
            if r.image_path.is_empty() {
                return Err(err("empty image_path"));
            }
        }
        let mut classes: Vec<String> = records.iter().map(|r| r.disease.clone()).collect();
        classes.sort();
        classes.dedup();
        Ok(Self { records, classes })
    }

    pub fn records(&self) -> &[CaseRecord] {
        &self.records
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_index(&self, disease: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(disease)).ok()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &CaseRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub(crate) fn records_mut(&mut self) -> &mut [CaseRecord] {
        &mut self.records
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let values: Vec<serde_json::Value> = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("manifest is not a JSON array of records: {e}")))?;
        let records = values
            .into_iter()
            .enumerate()
            .map(|(index, v)| {
                serde_json::from_value::<CaseRecord>(v).map_err(|e| Error::Manifest { index, detail: e.to_string() })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.records).expect("records serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}

pub fn parse_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_json(&text)
}

/// Resolves a record's image path against the manifest's directory.
pub fn resolve_image_path(manifest_path: &Path, record: &CaseRecord) -> PathBuf {
    let p = Path::new(&record.image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new("")).join(p)
    }
}
