const STRIP: &[char] = &['.', ',', ';', ':', '!', '?', '(', ')', '"'];

/// Lowercase, split on whitespace, strip surrounding punctuation.
/// Inner punctuation (`20/40`, `cone-rod`) is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(STRIP).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Normalizes one keyword phrase: trimmed and casefolded, inner spacing collapsed.
pub fn normalize_keyword(phrase: &str) -> String {
    phrase.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Splits comma-separated keyword phrases, dropping empty entries.
pub fn split_keywords(text: &str) -> Vec<String> {
    text.split(',').map(normalize_keyword).filter(|k| !k.is_empty()).collect()
}
