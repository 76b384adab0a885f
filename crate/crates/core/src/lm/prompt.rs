//! The classification prompt and answer parsing.

use crate::error::{Error, Result};
use crate::metrics::Prediction;
use crate::rng::RngState;

pub(crate) const PROMPT_PREFIX: &str = "Classify this image into one of the following categories relating to";
pub(crate) const PROMPT_SUFFIX: &str = "Only output a single final classification label and NOTHING ELSE.";

/// Renders the prompt with the classes in a seeded random order. The
/// returned permutation lists class indices in the order they appear.
pub fn build_prompt(classes: &[String], task: &str, rng: RngState) -> Result<(String, Vec<usize>)> {
    if classes.is_empty() {
        return Err(Error::Parameter("prompt needs a non-empty class list".into()));
    }
    let perm = rng.generator().permutation(classes.len());
    Ok((render_prompt(classes, task, &perm), perm))
}

/// Renders the prompt listing `classes` in the order given by `order`.
pub fn render_prompt(classes: &[String], task: &str, order: &[usize]) -> String {
    let listed: Vec<&str> = order.iter().map(|&i| classes[i].as_str()).collect();
    format!("{PROMPT_PREFIX} {task}: {}. {PROMPT_SUFFIX}", listed.join(", "))
}

fn normalize(s: &str) -> String {
    let lowered = s.trim().to_lowercase();
    let stripped = lowered.trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strict match of a generated answer against the class names after
/// trimming, lowercasing and stripping trailing punctuation.
pub fn parse_label(generated: &str, classes: &[String]) -> Prediction {
    let answer = normalize(generated);
    if answer.is_empty() {
        return Prediction::NoMatch;
    }
    classes
        .iter()
        .position(|c| normalize(c) == answer)
        .map_or(Prediction::NoMatch, Prediction::Class)
}
