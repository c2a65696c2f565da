//! Table-based medical reports: one row per case with image, CAM overlay,
//! top-k diseases, keywords and the generated description.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::CaseRecord;
use crate::error::{Error, Result};

const EMPTY_CELL: &str = "—";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseScore {
    pub disease: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub disease: String,
    pub description: String,
}

/// The inputs a report needs about a case besides model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportCase {
    pub id: String,
    pub keywords: Vec<String>,
    pub truth: Option<GroundTruth>,
}

impl From<&CaseRecord> for ReportCase {
    fn from(r: &CaseRecord) -> Self {
        Self {
            id: r.id.clone(),
            keywords: r.keywords.clone(),
            truth: Some(GroundTruth { disease: r.disease.clone(), description: r.description.clone() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicalReport {
    pub case_id: String,
    /// Relative path of the displayed retinal image.
    pub image: String,
    /// Relative path of the CAM overlay.
    pub cam: String,
    pub top_k: Vec<DiseaseScore>,
    pub keywords: Vec<String>,
    pub description: String,
    pub ground_truth: Option<GroundTruth>,
}

impl MedicalReport {
    pub fn top_disease(&self) -> &str {
        &self.top_k[0].disease
    }
}

/// Space-joined, first letter capitalized, period appended if missing.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let joined = tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
    let mut chars = joined.chars();
    let Some(first) = chars.next() else {
        return String::new();
    };
    let mut s: String = first.to_uppercase().chain(chars).collect();
    if !s.ends_with('.') {
        s.push('.');
    }
    s
}

pub fn build_report<S: AsRef<str>>(
    case: &ReportCase,
    prediction: &[DiseaseScore],
    caption: &[S],
    image_ref: &str,
    cam_ref: &str,
) -> Result<MedicalReport> {
    if prediction.is_empty() {
        return Err(Error::invalid("build_report", "prediction list is empty"));
    }
    if prediction.iter().any(|p| !(0.0..=1.0).contains(&p.probability)) {
        return Err(Error::invalid("build_report", "probabilities must lie in [0, 1]"));
    }
    if prediction.windows(2).any(|w| w[0].probability < w[1].probability) {
        return Err(Error::invalid("build_report", "prediction is not sorted by probability descending"));
    }
    Ok(MedicalReport {
        case_id: case.id.clone(),
        image: image_ref.to_string(),
        cam: cam_ref.to_string(),
        top_k: prediction.to_vec(),
        keywords: case.keywords.clone(),
        description: detokenize(caption),
        ground_truth: case.truth.clone(),
    })
}

pub fn format_percent(p: f64) -> String {
    format!("{:.2}%", p * 100.0)
}

fn keywords_cell(keywords: &[String]) -> String {
    if keywords.is_empty() {
        EMPTY_CELL.to_string()
    } else {
        keywords.join(", ")
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    #[default]
    None,
    Disease,
}

const STYLE: &str = "table{border-collapse:collapse;font-family:sans-serif}\
th,td{border:1px solid #999;padding:6px;vertical-align:top}\
img{width:128px;image-rendering:pixelated}\
ol{margin:0;padding-left:1.2em}";

/// Static HTML table. Rows keep input order, or are sorted by (top-1
/// disease, case id) when grouping by disease.
pub fn render_html(reports: &[MedicalReport], group_by: GroupBy) -> String {
    let mut rows: Vec<&MedicalReport> = reports.iter().collect();
    if group_by == GroupBy::Disease {
        rows.sort_by(|a, b| a.top_disease().cmp(b.top_disease()).then_with(|| a.case_id.cmp(&b.case_id)));
    }
    let with_truth = reports.iter().any(|r| r.ground_truth.is_some());

    let mut h = String::new();
    h.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    h.push_str("<title>Retinal image report</title>\n");
    let _ = writeln!(h, "<style>{STYLE}</style>");
    h.push_str("</head>\n<body>\n<table>\n<thead>\n<tr>");
    for col in ["Image", "CAM", "Predicted disease", "Keywords", "Description"] {
        let _ = write!(h, "<th>{col}</th>");
    }
    if with_truth {
        h.push_str("<th>Ground truth</th>");
    }
    h.push_str("</tr>\n</thead>\n<tbody>\n");
    for r in rows {
        let id = escape(&r.case_id);
        let _ = write!(h, "<tr id=\"case-{id}\">");
        let _ = write!(h, "<td><img src=\"{}\" alt=\"{id}\"><div>{id}</div></td>", escape(&r.image));
        let _ = write!(h, "<td><img src=\"{}\" alt=\"CAM {id}\"></td>", escape(&r.cam));
        h.push_str("<td><ol>");
        for p in &r.top_k {
            let _ = write!(h, "<li>{} ({})</li>", escape(&p.disease), format_percent(p.probability));
        }
        h.push_str("</ol></td>");
        let _ = write!(h, "<td>{}</td>", escape(&keywords_cell(&r.keywords)));
        let _ = write!(h, "<td>{}</td>", escape(&r.description));
        if with_truth {
            match &r.ground_truth {
                Some(t) => {
                    let _ = write!(h, "<td><b>{}</b><br>{}</td>", escape(&t.disease), escape(&t.description));
                }
                None => h.push_str("<td></td>"),
            }
        }
        h.push_str("</tr>\n");
    }
    h.push_str("</tbody>\n</table>\n</body>\n</html>\n");
    h
}

pub fn render_text(report: &MedicalReport) -> String {
    let prediction: Vec<String> =
        report.top_k.iter().map(|p| format!("{} ({})", p.disease, format_percent(p.probability))).collect();
    let mut s = format!(
        "Case: {}\nPrediction: {}\nKeywords: {}\nDescription: {}\n",
        report.case_id,
        prediction.join(", "),
        keywords_cell(&report.keywords),
        report.description
    );
    if let Some(t) = &report.ground_truth {
        let _ = writeln!(s, "Ground truth: {}; {}", t.disease, t.description);
    }
    s
}
