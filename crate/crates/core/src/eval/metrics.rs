use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::text;

/// A reference answer: free text, or a set of values compared without
/// regard to order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GoldAnswer {
    Text(String),
    Set(Vec<String>),
}

impl GoldAnswer {
    pub fn is_empty(&self) -> bool {
        match self {
            Self::Text(t) => text::collapse_whitespace(t).is_empty(),
            Self::Set(v) => v.iter().all(|s| text::collapse_whitespace(s).is_empty()),
        }
    }

    /// The text ROUGE-L is scored against. Set members are joined with
    /// `", "`.
    pub fn reference_text(&self) -> String {
        match self {
            Self::Text(t) => t.clone(),
            Self::Set(v) => v.join(", "),
        }
    }
}

/// Trim, collapse internal whitespace, casefold.
pub fn normalize_answer(s: &str) -> String {
    text::collapse_whitespace(s).to_lowercase()
}

/// Splits a prediction into normalized values on `,`, `;` and newlines.
pub fn split_values(s: &str) -> BTreeSet<String> {
    s.split([',', ';', '\n']).map(normalize_answer).filter(|v| !v.is_empty()).collect()
}

fn normalized_set(values: &[String]) -> BTreeSet<String> {
    values.iter().map(|v| normalize_answer(v)).filter(|v| !v.is_empty()).collect()
}

pub fn exact_match_text(prediction: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(prediction) == normalize_answer(gold))
}

/// 1 when the normalized prediction equals the normalized gold. Set golds
/// compare as sets of normalized elements.
pub fn exact_match(prediction: &str, gold: &GoldAnswer) -> u8 {
    match gold {
        GoldAnswer::Text(g) => exact_match_text(prediction, g),
        GoldAnswer::Set(g) => u8::from(split_values(prediction) == normalized_set(g)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: Self = Self { precision: 0.0, recall: 0.0, f1: 0.0 };
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![0usize; short.len() + 1];
    let mut cur = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// ROUGE-L over lowercased word tokens.
pub fn rouge_l(prediction: &str, reference: &str) -> RougeScore {
    let lower = |s: &str| text::tokenize(s).into_iter().map(|t| t.to_lowercase()).collect::<Vec<_>>();
    rouge_l_tokens(&lower(prediction), &lower(reference))
}

pub fn rouge_l_tokens(prediction: &[String], reference: &[String]) -> RougeScore {
    if prediction.is_empty() || reference.is_empty() {
        return RougeScore::ZERO;
    }
    let l = lcs_len(prediction, reference) as f64;
    if l == 0.0 {
        return RougeScore::ZERO;
    }
    let precision = l / prediction.len() as f64;
    let recall = l / reference.len() as f64;
    RougeScore { precision, recall, f1: 2.0 * precision * recall / (precision + recall) }
}

/// Quantile of sorted data by linear interpolation between closest ranks,
/// inclusive of the end points (`h = (n - 1) p`).
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub const QUARTILE_CONVENTION: &str = "linear interpolation between closest ranks, inclusive: h = (n - 1) p";

/// Median and interquartile bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

pub fn spread(values: &[f64]) -> Option<Spread> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Spread { median: quantile(&v, 0.5)?, q1: quantile(&v, 0.25)?, q3: quantile(&v, 0.75)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match_text("Aspirin 81mg", "aspirin 81mg"), 1);
        assert_eq!(exact_match_text("81mg", "81 mg"), 0);
        assert_eq!(exact_match_text("  aspirin \t 81mg\n", "ASPIRIN 81mg"), 1);
        let gold = GoldAnswer::Set(vec!["b".into(), "a".into()]);
        assert_eq!(exact_match("a, b", &gold), 1);
        assert_eq!(exact_match("B;A", &gold), 1);
        assert_eq!(exact_match("a", &gold), 0);
        assert_eq!(exact_match("a, b, c", &gold), 0);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), RougeScore { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(rouge_l("alpha beta", "gamma delta"), RougeScore::ZERO);
        assert_eq!(rouge_l("", "x"), RougeScore::ZERO);
        let r = rouge_l("the cat sat", "the cat ran");
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn quartiles_of_one_to_five() {
        let s = spread(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!(s, Spread { median: 3.0, q1: 2.0, q3: 4.0 });
        let s = spread(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s, Spread { median: 2.5, q1: 1.75, q3: 3.25 });
        assert!(spread(&[]).is_none());
        assert_eq!(spread(&[7.0]).unwrap().q3, 7.0);
    }
}
