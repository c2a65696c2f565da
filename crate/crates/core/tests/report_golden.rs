use std::path::PathBuf;

use retina_core::report::*;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against the stored file; `UPDATE_GOLDEN=1` rewrites it.
fn check(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} drifted from its golden file");
}

fn scores(items: &[(&str, f64)]) -> Vec<DiseaseScore> {
    items.iter().map(|&(d, p)| DiseaseScore { disease: d.into(), probability: p }).collect()
}

fn reports() -> Vec<MedicalReport> {
    let a = ReportCase {
        id: "case-002".into(),
        keywords: vec!["drusen".into(), "macula".into()],
        truth: Some(GroundTruth { disease: "AMD".into(), description: "Drusen in the macula.".into() }),
    };
    let b = ReportCase { id: "case-001".into(), keywords: vec![], truth: None };
    let c = ReportCase {
        id: "x<&>\"'".into(),
        keywords: vec!["optic disc".into()],
        truth: Some(GroundTruth { disease: "Optic neuritis".into(), description: "Swollen <disc>.".into() }),
    };
    vec![
        build_report(&a, &scores(&[("AMD", 0.5423), ("CSC", 0.25), ("BRVO", 0.1)]), &["drusen", "in", "macula"], "assets/case-002.png", "assets/case-002_cam.png").unwrap(),
        build_report(&b, &scores(&[("CSC", 0.9)]), &["serous", "detachment"], "assets/case-001.png", "assets/case-001_cam.png").unwrap(),
        build_report(&c, &scores(&[("AMD", 1.0)]), &Vec::<String>::new(), "assets/x_____.png", "assets/x______cam.png").unwrap(),
    ]
}

#[test]
fn html_table_matches_golden() {
    check("report.html", &render_html(&reports(), GroupBy::None));
}

#[test]
fn grouped_html_matches_golden() {
    check("report_grouped.html", &render_html(&reports(), GroupBy::Disease));
}

#[test]
fn text_blocks_match_golden() {
    let text: String = reports().iter().map(render_text).collect::<Vec<_>>().join("\n");
    check("report.txt", &text);
}

#[test]
fn html_is_deterministic_and_escaped() {
    let r = reports();
    let html = render_html(&r, GroupBy::None);
    assert_eq!(html, render_html(&r, GroupBy::None));
    assert!(html.contains("x&lt;&amp;&gt;&quot;&#39;"));
    assert!(!html.contains("<disc>"));
    assert_eq!(html.matches("<tr id=").count(), 3);
    assert!(html.contains("AMD (54.23%)"));
}
