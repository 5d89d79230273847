//! Synthetic question-answer corpora and the character tokenizer shared by
//! every model.
//!
//! The verbal task is recall of invented place -> capital facts; the math
//! task is two-operand addition and subtraction over `0..=99`. Both render
//! prompts as `Question: {question} Answer:`.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::toy_models::TrainingSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Verbal,
    Math,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Verbal, Domain::Math];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Verbal => "verbal",
            Domain::Math => "math",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub domain: Domain,
    pub question: String,
    pub prompt: String,
    pub best_answer: String,
    pub correct_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_solution: Option<String>,
}

pub const ANSWER_DELIMITER: &str = "Answer:";

pub fn render_prompt(question: &str) -> String {
    format!("Question: {question} {ANSWER_DELIMITER}")
}

impl QAItem {
    /// The text a model is trained to produce after the prompt. The answer
    /// follows the delimiter directly, so the final prompt token is the one
    /// that predicts the first answer character.
    pub fn completion(&self) -> &str {
        &self.best_answer
    }

    /// Prompt followed by completion and end-of-sequence, with loss on the
    /// completion only.
    pub fn training_sequence(&self, tok: &Tokenizer) -> Result<TrainingSequence> {
        let mut tokens = tok.encode(&self.prompt)?;
        let target_start = tokens.len();
        tokens.extend(tok.encode(self.completion())?);
        tokens.push(tok.eos_id());
        Ok(TrainingSequence {
            tokens,
            target_start,
        })
    }
}

/// Character-level tokenizer over a fixed alphabet, with pad (0) and
/// end-of-sequence (1) specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    alphabet: Vec<char>,
}

const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789:?.,$#-'";
const N_SPECIAL: u32 = 2;

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            alphabet: ALPHABET.chars().collect(),
        }
    }
}

impl Tokenizer {
    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn eos_id(&self) -> u32 {
        1
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() + N_SPECIAL as usize
    }

    pub fn encode(&self, s: &str) -> Result<Vec<u32>> {
        s.chars()
            .map(|c| {
                self.alphabet
                    .iter()
                    .position(|&a| a == c)
                    .map(|i| i as u32 + N_SPECIAL)
                    .ok_or(Error::UnknownChar(c))
            })
            .collect()
    }

    /// Decodes, skipping special tokens.
    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter(|&&t| t >= N_SPECIAL)
            .filter_map(|&t| self.alphabet.get((t - N_SPECIAL) as usize))
            .collect()
    }

    /// Prompt and continuation decoded as one string.
    pub fn decode_full(&self, prompt: &[u32], generated: &[u32]) -> String {
        let mut s = self.decode(prompt);
        s.push_str(&self.decode(generated));
        s
    }
}

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "", "n", "r", "l", "s"];

fn syllable(rng: &mut SeededRng) -> String {
    format!(
        "{}{}{}",
        ONSETS[rng.below(ONSETS.len())],
        VOWELS[rng.below(VOWELS.len())],
        CODAS[rng.below(CODAS.len())]
    )
}

fn capitalize(raw: &str) -> String {
    let mut chars = raw.chars();
    match chars.next() {
        Some(first) => first.to_ascii_uppercase().to_string() + chars.as_str(),
        None => String::new(),
    }
}

/// Syllables that place names are built from.
pub const PLACE_SYLLABLES: usize = 16;

fn distinct_syllables(rng: &mut SeededRng, n: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let s = syllable(rng);
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Invented place -> capital facts. Place names are unique within a call.
///
/// Places are 2-3 syllables from a seeded inventory. A capital is the
/// seeded "head" syllable of the place's first syllable followed by the
/// "tail" syllable of its last one, so each fact is arbitrary but its two
/// halves recur across many items.
pub fn gen_verbal_task(seed: u64, n_items: usize) -> Vec<QAItem> {
    let mut rng = SeededRng::new(seed);
    let inventory = distinct_syllables(&mut rng, PLACE_SYLLABLES);
    let heads: Vec<String> = (0..PLACE_SYLLABLES).map(|_| syllable(&mut rng)).collect();
    let tails: Vec<String> = (0..PLACE_SYLLABLES).map(|_| syllable(&mut rng)).collect();
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(n_items);
    while items.len() < n_items {
        let len = 2 + rng.below(2);
        let parts: Vec<usize> = (0..len).map(|_| rng.below(PLACE_SYLLABLES)).collect();
        let place = capitalize(
            &parts
                .iter()
                .map(|&p| inventory[p].as_str())
                .collect::<String>(),
        );
        if !seen.insert(place.clone()) {
            continue;
        }
        let capital = capitalize(&format!("{}{}", heads[parts[0]], tails[parts[len - 1]]));
        let question = format!("What is the capital of {place}?");
        items.push(QAItem {
            id: format!("verbal-{:04}", items.len()),
            domain: Domain::Verbal,
            prompt: render_prompt(&question),
            question,
            correct_answers: vec![capital.clone(), format!("the city of {capital}")],
            best_answer: capital,
            gold_solution: None,
        });
    }
    items
}

/// Two-operand addition/subtraction questions with operands in `0..=99`
/// and non-negative results. Questions are unique within a call.
pub fn gen_math_task(seed: u64, n_items: usize) -> Vec<QAItem> {
    let mut rng = SeededRng::new(seed);
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(n_items);
    while items.len() < n_items {
        let (mut a, mut b) = (rng.below(100) as i64, rng.below(100) as i64);
        let plus = rng.below(2) == 0;
        if !plus && a < b {
            std::mem::swap(&mut a, &mut b);
        }
        if !seen.insert((a, plus, b)) {
            continue;
        }
        let (word, answer) = if plus {
            ("plus", a + b)
        } else {
            ("minus", a - b)
        };
        let question = format!("What is {a} {word} {b}?");
        items.push(QAItem {
            id: format!("math-{:04}", items.len()),
            domain: Domain::Math,
            prompt: render_prompt(&question),
            question,
            best_answer: answer.to_string(),
            correct_answers: vec![answer.to_string()],
            gold_solution: Some(format!("{a} {word} {b} is {answer}. #### {answer}")),
        });
    }
    items
}

/// Seeded shuffle, then the first `floor(train_fraction * n)` items (at
/// least one, at most `n - 1`) become the training split.
pub fn split_items<T: Clone>(
    items: &[T],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "cannot split {} items",
            items.len()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let order = SeededRng::new(seed).permutation(items.len());
    // The small epsilon keeps 0.7 * 10 at 7 despite binary rounding.
    let n_train =
        ((train_fraction * items.len() as f64 + 1e-9).floor() as usize).clamp(1, items.len() - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

pub fn write_jsonl(path: &Path, items: &[QAItem]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.write_all(b"\n")?;
    }
    crate::io_util::write_atomic(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QAItem>> {
    let bytes = crate::io_util::read_artifact(path)?;
    let mut items = Vec::new();
    for line in bytes.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}
