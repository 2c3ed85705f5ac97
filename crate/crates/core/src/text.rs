//! String helpers shared across modules: placeholders, answer normalization,
//! fuzzy label matching.

use std::sync::OnceLock;

use regex::Regex;
use unicode_normalization::UnicodeNormalization;

/// Matches `[ENT<k>]` for a positive integer `k`.
pub fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[ENT[1-9][0-9]*\]").expect("valid regex"))
}

pub fn is_placeholder(s: &str) -> bool {
    let s = s.trim();
    placeholder_regex()
        .find(s)
        .is_some_and(|m| m.start() == 0 && m.end() == s.len())
}

pub fn placeholders_in(s: &str) -> Vec<String> {
    placeholder_regex()
        .find_iter(s)
        .map(|m| m.as_str().to_string())
        .collect()
}

/// NFC, lowercase, punctuation to spaces, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s.nfc().collect::<String>().to_lowercase();
    let spaced: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized edit-distance similarity in [0, 1] after answer normalization.
pub fn fuzzy_ratio(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(&normalize_answer(a), &normalize_answer(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_shapes() {
        assert!(is_placeholder("[ENT1]"));
        assert!(is_placeholder("[ENT12]"));
        assert!(!is_placeholder("[ENT0]"));
        assert!(!is_placeholder("[ENT01]"));
        assert!(!is_placeholder("x [ENT1]"));
        assert_eq!(
            placeholders_in("[ENT1]'s arena is [ENT2]"),
            vec!["[ENT1]".to_string(), "[ENT2]".to_string()]
        );
    }

    #[test]
    fn dash_variants_normalize_equal() {
        assert_eq!(
            normalize_answer("Ciampino - G. B. Pastine International Airport"),
            normalize_answer("Ciampino–G. B. Pastine International Airport")
        );
        assert_eq!(normalize_answer("  Miller   County. "), "miller county");
    }

    #[test]
    fn fuzzy_ignores_case_and_punctuation() {
        assert!(fuzzy_ratio("texarkana arkansas", "Texarkana, Arkansas") >= 0.8);
        assert!(fuzzy_ratio("rome", "Rome") > 0.999);
        assert!(fuzzy_ratio("rome", "Miller County") < 0.5);
    }
}
