//! Deterministic scoring of generations.
//!
//! Verbal items pass when any reference string is a substring of the
//! lowercased, trimmed answer segment. Math items pass when any number in
//! the answer segment equals the gold value. Both are strict: a correct
//! paraphrase that shares no reference substring fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpora::{Domain, QAItem, ANSWER_DELIMITER};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub item_id: String,
    pub correct: bool,
    /// The reference (verbal) or number token (math) that matched.
    pub matched_reference: Option<String>,
    pub extracted_answer_segment: String,
    /// False when the generation had no `Answer:` and was scored whole.
    pub delimiter_found: bool,
}

/// Text after the last `Answer:`, or the whole text if there is none.
pub fn answer_segment(generated: &str) -> (&str, bool) {
    match generated.rfind(ANSWER_DELIMITER) {
        Some(pos) => (&generated[pos + ANSWER_DELIMITER.len()..], true),
        None => (generated, false),
    }
}

pub fn score_verbal(generated: &str, item: &QAItem) -> ScoreReport {
    let (segment, delimiter_found) = answer_segment(generated);
    let segment = segment.trim().to_lowercase();
    let matched = std::iter::once(&item.best_answer)
        .chain(&item.correct_answers)
        .find(|r| segment.contains(&r.trim().to_lowercase()))
        .cloned();
    ScoreReport {
        item_id: item.id.clone(),
        correct: matched.is_some(),
        matched_reference: matched,
        extracted_answer_segment: segment,
        delimiter_found,
    }
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"-?\$?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?").expect("valid number regex")
    })
}

fn parse_number_token(tok: &str) -> Option<f64> {
    let cleaned: String = tok.chars().filter(|&c| c != ',' && c != '$').collect();
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Number tokens in `text`, with commas and `$` stripped. `82.0` and `82`
/// parse to the same value.
pub fn number_tokens(text: &str) -> Vec<(String, f64)> {
    number_regex()
        .find_iter(text)
        .filter_map(|m| parse_number_token(m.as_str()).map(|v| (m.as_str().to_string(), v)))
        .collect()
}

/// First number after the last `####` of a gold solution.
pub fn extract_numeric_gold(solution: &str) -> Result<f64> {
    let pos = solution
        .rfind("####")
        .ok_or_else(|| Error::NumericParse(format!("no #### delimiter in {solution:?}")))?;
    number_tokens(&solution[pos + 4..])
        .first()
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::NumericParse(format!("no number after #### in {solution:?}")))
}

pub fn score_numeric(generated: &str, gold: f64, item_id: &str) -> ScoreReport {
    let (segment, delimiter_found) = answer_segment(generated);
    let segment = segment.trim().to_string();
    let matched = number_tokens(&segment)
        .into_iter()
        .find(|(_, v)| *v == gold)
        .map(|(s, _)| s);
    ScoreReport {
        item_id: item_id.to_string(),
        correct: matched.is_some(),
        matched_reference: matched,
        extracted_answer_segment: segment,
        delimiter_found,
    }
}

/// Scores a generation against an item with the metric for its domain.
pub fn score_item(generated: &str, item: &QAItem) -> Result<ScoreReport> {
    match item.domain {
        Domain::Verbal => Ok(score_verbal(generated, item)),
        Domain::Math => {
            let solution = item.gold_solution.as_deref().ok_or_else(|| {
                Error::NumericParse(format!("math item {} has no gold solution", item.id))
            })?;
            Ok(score_numeric(
                generated,
                extract_numeric_gold(solution)?,
                &item.id,
            ))
        }
    }
}

/// Δ: percentage of opportunity items the intervention got right.
///
/// Errors when the opportunity set is empty (Δ undefined), when an item is
/// missing from either map, or when an item was already correct at baseline.
pub fn correction_rate(
    baseline: &BTreeMap<String, bool>,
    intervened: &BTreeMap<String, bool>,
    opportunity: &[String],
) -> Result<f64> {
    if opportunity.is_empty() {
        return Err(Error::InsufficientData("empty opportunity set".into()));
    }
    let mut corrected = 0usize;
    for id in opportunity {
        let before = baseline
            .get(id)
            .ok_or_else(|| Error::ItemMismatch(format!("{id} missing from baseline scores")))?;
        if *before {
            return Err(Error::InvalidArgument(format!(
                "opportunity item {id} is already correct at baseline"
            )));
        }
        if *intervened
            .get(id)
            .ok_or_else(|| Error::ItemMismatch(format!("{id} missing from intervened scores")))?
        {
            corrected += 1;
        }
    }
    Ok(100.0 * corrected as f64 / opportunity.len() as f64)
}

/// One line of a score dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDumpRow {
    pub item_id: String,
    pub condition: String,
    pub correct: bool,
    pub matched_reference: Option<String>,
}

pub fn write_score_dump(path: &Path, rows: &[ScoreDumpRow]) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)?;
        buf.write_all(b"\n")?;
    }
    crate::io_util::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verbal_item() -> QAItem {
        QAItem {
            id: "v1".into(),
            domain: Domain::Verbal,
            question: "What is the capital of Belmora?".into(),
            prompt: "Question: What is the capital of Belmora? Answer:".into(),
            best_answer: "Zorvane".into(),
            correct_answers: vec!["Zorvane".into(), "the city of Zorvane".into()],
            gold_solution: None,
        }
    }

    #[test]
    fn verbal_substring_and_case() {
        let item = verbal_item();
        let r = score_verbal("Question: x Answer: the capital is Zorvane", &item);
        assert!(r.correct);
        assert_eq!(r.matched_reference.as_deref(), Some("Zorvane"));
        assert!(score_verbal("Answer: zorVANE", &item).correct);
        assert!(!score_verbal("Answer: the weather is fine", &item).correct);
    }

    #[test]
    fn verbal_uses_last_delimiter() {
        let item = verbal_item();
        assert!(!score_verbal("Answer: Zorvane. Answer: nothing", &item).correct);
        let r = score_verbal("Zorvane without delimiter", &item);
        assert!(r.correct && !r.delimiter_found);
    }

    #[test]
    fn paraphrase_fails_conservatively() {
        // Semantically right, lexically disjoint from every reference.
        let item = verbal_item();
        assert!(!score_verbal("Answer: the seat of government of Belmora", &item).correct);
    }

    #[test]
    fn numeric_gold_extraction() {
        assert_eq!(extract_numeric_gold("steps... #### 82").unwrap(), 82.0);
        assert_eq!(extract_numeric_gold("#### $1,234").unwrap(), 1234.0);
        assert!(extract_numeric_gold("no marker").is_err());
        assert!(extract_numeric_gold("#### none").is_err());
        assert_eq!(extract_numeric_gold("a #### 1 #### 7").unwrap(), 7.0);
    }

    #[test]
    fn numeric_scoring() {
        assert!(score_numeric("Answer: 82 apples", 82.0, "m").correct);
        assert!(score_numeric("Answer: $1,234", 1234.0, "m").correct);
        assert!(!score_numeric("Answer: 83", 82.0, "m").correct);
        assert!(score_numeric("Answer: 82.0", 82.0, "m").correct);
        assert!(!score_numeric("What is 82 plus 1? Answer: 9", 82.0, "m").correct);
    }

    #[test]
    fn score_item_dispatches_on_domain() {
        let math = &crate::corpora::gen_math_task(1, 1)[0];
        let right = format!("{}{}", math.prompt, math.best_answer);
        assert!(score_item(&right, math).unwrap().correct);
        assert!(score_item(&verbal_item().prompt, &verbal_item()).is_ok());
    }

    #[test]
    fn correction_rate_cases() {
        let ids: Vec<String> = (0..20).map(|i| format!("i{i}")).collect();
        let base: BTreeMap<String, bool> = ids.iter().map(|i| (i.clone(), false)).collect();
        let some: BTreeMap<String, bool> = ids
            .iter()
            .enumerate()
            .map(|(k, i)| (i.clone(), k < 5))
            .collect();
        assert_eq!(correction_rate(&base, &some, &ids).unwrap(), 25.0);
        assert_eq!(correction_rate(&base, &base, &ids).unwrap(), 0.0);
        let all: BTreeMap<String, bool> = ids.iter().map(|i| (i.clone(), true)).collect();
        assert_eq!(correction_rate(&base, &all, &ids).unwrap(), 100.0);
        assert!(correction_rate(&base, &all, &[]).is_err());
        assert!(correction_rate(&all, &all, &ids).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn verbal_ignores_case_and_outer_whitespace(
                body in "[a-zA-Z ]{0,30}", pre in "[ \t\n]{0,3}", post in "[ \t\n]{0,3}"
            ) {
                let item = verbal_item();
                let plain = score_verbal(&format!("Answer:{body}"), &item);
                let varied = score_verbal(
                    &format!("Answer:{pre}{}{post}", body.to_uppercase()), &item);
                prop_assert_eq!(plain.correct, varied.correct);
            }

            #[test]
            fn delta_is_monotone(flags in proptest::collection::vec(any::<bool>(), 1..30), extra in 0usize..30) {
                let ids: Vec<String> = (0..flags.len()).map(|i| format!("i{i}")).collect();
                let base: BTreeMap<String, bool> = ids.iter().map(|i| (i.clone(), false)).collect();
                let mut after: BTreeMap<String, bool> =
                    ids.iter().cloned().zip(flags.iter().copied()).collect();
                let d0 = correction_rate(&base, &after, &ids).unwrap();
                after.insert(ids[extra % ids.len()].clone(), true);
                let d1 = correction_rate(&base, &after, &ids).unwrap();
                prop_assert!(d1 >= d0);
            }
        }
    }
}
