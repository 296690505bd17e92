//! Strict parsers for the three response formats the loop depends on.
//!
//! Sentinels are matched case-insensitively and tolerate markdown wrappers,
//! but a response without the expected sentinel or payload is an error; the
//! loop decides whether to re-prompt or fall back.

use thiserror::Error;

use crate::memory::ActionKind;
use crate::rules::{parse_rule_text, RuleError, RuleTree};

#[derive(Debug, Error)]
pub enum ResponseParseError {
    #[error("response is missing the sentinel {0:?}")]
    MissingSentinel(&'static str),
    #[error("no action letter a-d after the action sentinel")]
    MissingActionLetter,
    #[error("confidence score is missing or not a number")]
    BadScore,
    #[error("confidence score {0} outside [0, 2]")]
    ScoreOutOfRange(f64),
    #[error(transparent)]
    Rules(#[from] RuleError),
}

/// Case-insensitive search; returns the byte offset just past the needle.
fn find_after(text: &str, needle: &str) -> Option<usize> {
    let lower = text.to_lowercase();
    lower
        .find(&needle.to_lowercase())
        .map(|at| at + needle.len())
}

const DECORATION: &[char] = &[
    ':', ' ', '\t', '*', '_', '<', '>', '(', ')', '[', ']', '"', '\'', '`',
];

/// Parses `The next action is: <a/b/c/d>. The reason for this decision is:
/// <explanation>.`
pub fn parse_planning_response(text: &str) -> Result<(ActionKind, String), ResponseParseError> {
    const ACTION: &str = "the next action is";
    const REASON: &str = "the reason for this decision is";

    let after_action = find_after(text, ACTION)
        .ok_or(ResponseParseError::MissingSentinel("The next action is:"))?;
    let tail = text[after_action..].trim_start_matches(DECORATION);
    let mut chars = tail.chars();
    let letter = chars
        .next()
        .ok_or(ResponseParseError::MissingActionLetter)?;
    let next = chars.next();
    if next.is_some_and(|c| c.is_alphanumeric()) {
        return Err(ResponseParseError::MissingActionLetter);
    }
    let kind = ActionKind::from_letter(letter).ok_or(ResponseParseError::MissingActionLetter)?;

    let after_reason = find_after(&text[after_action..], REASON)
        .map(|at| after_action + at)
        .ok_or(ResponseParseError::MissingSentinel(
            "The reason for this decision is:",
        ))?;
    let reason = text[after_reason..]
        .trim_start_matches(DECORATION)
        .trim()
        .trim_end_matches(['*', '_'])
        .trim()
        .to_string();
    Ok((kind, reason))
}

/// Parses `The confidence score is <0-2>. The explanation: <explanation>.`
pub fn parse_confidence_response(text: &str) -> Result<(f64, String), ResponseParseError> {
    const SCORE: &str = "the confidence score is";
    const EXPLANATION: &str = "the explanation";

    let after_score = find_after(text, SCORE).ok_or(ResponseParseError::MissingSentinel(
        "The confidence score is",
    ))?;
    let tail = text[after_score..].trim_start_matches(DECORATION);
    let token: String = tail
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == '.' || *c == '-' || *c == '+')
        .collect();
    let score: f64 = token
        .trim_end_matches('.')
        .parse()
        .map_err(|_| ResponseParseError::BadScore)?;
    if !score.is_finite() {
        return Err(ResponseParseError::BadScore);
    }
    if !(0.0..=2.0).contains(&score) {
        return Err(ResponseParseError::ScoreOutOfRange(score));
    }

    let after_explanation = find_after(&text[after_score..], EXPLANATION)
        .map(|at| after_score + at)
        .ok_or(ResponseParseError::MissingSentinel("The explanation:"))?;
    // Accept "The explanation:", "The explanation is:", "The explanation was:".
    let mut rest = text[after_explanation..].trim_start();
    for connective in ["is", "was"] {
        if let Some(after) = rest.strip_prefix(connective) {
            if after.trim_start().starts_with(':') {
                rest = after;
                break;
            }
        }
    }
    let explanation = rest
        .trim_start_matches(DECORATION)
        .trim()
        .trim_end_matches(['*', '_'])
        .trim()
        .to_string();
    Ok((score, explanation))
}

/// Parses `The updated denoising rules are: <outline>` into a rule tree.
pub fn parse_rules_response(text: &str) -> Result<RuleTree, ResponseParseError> {
    const SENTINEL: &str = "the updated denoising rules are";
    let after = find_after(text, SENTINEL).ok_or(ResponseParseError::MissingSentinel(
        "The updated denoising rules are:",
    ))?;
    Ok(parse_rule_text(&text[after..])?)
}
