//! Accuracy, length and composite rewards.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::structured::StructuredResponse;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_REL_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_ABS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerKind {
    MultiChoice,
    Numeric,
    OpenText,
}

/// A gold answer. The kinds follow the usual VQA answer-type taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub kind: AnswerKind,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric_tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnswerError {
    #[error("multi-choice value `{0}` is not one of the choices")]
    NotAChoice(String),
    #[error("multi-choice answer has no choices")]
    NoChoices,
    #[error("numeric value `{0}` does not parse as a finite number")]
    NotNumeric(String),
    #[error("invalid numeric tolerance {0}")]
    BadTolerance(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("alpha must be finite and non-negative, got {0}")]
    NegativeAlpha(f64),
    #[error("{name} = {value} is outside its range")]
    OutOfRange { name: &'static str, value: f64 },
}

impl Answer {
    pub fn multi_choice(value: impl Into<String>, choices: &[&str]) -> Result<Self, AnswerError> {
        let a = Answer {
            kind: AnswerKind::MultiChoice,
            value: value.into(),
            choices: Some(choices.iter().map(|c| c.to_string()).collect()),
            numeric_tolerance: None,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn numeric(value: impl Into<String>, rel_tolerance: Option<f64>) -> Result<Self, AnswerError> {
        let a = Answer {
            kind: AnswerKind::Numeric,
            value: value.into(),
            choices: None,
            numeric_tolerance: rel_tolerance,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn open_text(value: impl Into<String>) -> Self {
        Answer {
            kind: AnswerKind::OpenText,
            value: value.into(),
            choices: None,
            numeric_tolerance: None,
        }
    }

    pub fn validate(&self) -> Result<(), AnswerError> {
        match self.kind {
            AnswerKind::MultiChoice => {
                let choices = self.choices.as_ref().ok_or(AnswerError::NoChoices)?;
                let key = normalize_choice(&self.value);
                if !choices.iter().any(|c| normalize_choice(c) == key) {
                    return Err(AnswerError::NotAChoice(self.value.clone()));
                }
            }
            AnswerKind::Numeric => {
                parse_number(&self.value).ok_or_else(|| AnswerError::NotNumeric(self.value.clone()))?;
                if let Some(tol) = self.numeric_tolerance {
                    if !(tol.is_finite() && tol >= 0.0) {
                        return Err(AnswerError::BadTolerance(tol));
                    }
                }
            }
            AnswerKind::OpenText => {}
        }
        Ok(())
    }
}

fn normalize_choice(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

fn normalize_open(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// 1 when `answer_text` matches `gold` after normalization, else 0.
pub fn accuracy_reward(answer_text: &str, gold: &Answer) -> u8 {
    let hit = match gold.kind {
        AnswerKind::MultiChoice => {
            let got = normalize_choice(answer_text);
            !got.is_empty() && got == normalize_choice(&gold.value)
        }
        AnswerKind::Numeric => match (parse_number(answer_text), parse_number(&gold.value)) {
            (Some(got), Some(want)) => {
                let rel = gold.numeric_tolerance.unwrap_or(DEFAULT_REL_TOLERANCE);
                (got - want).abs() <= (rel * want.abs()).max(DEFAULT_ABS_TOLERANCE)
            }
            _ => false,
        },
        AnswerKind::OpenText => normalize_open(answer_text) == normalize_open(&gold.value),
    };
    u8::from(hit)
}

/// Linear ramp over the whitespace-token count of caption plus reasoning,
/// capped at 1.
pub fn length_reward(resp: &StructuredResponse, target_length: usize) -> f64 {
    if target_length == 0 {
        return 1.0;
    }
    let count = resp.info.as_deref().unwrap_or("").split_whitespace().count()
        + resp.think.split_whitespace().count();
    (count as f64 / target_length as f64).min(1.0)
}

/// Reward terms of one sampled sequence.
///
/// `r_c` is the α-weighted auxiliary term: the binary caption reward, or the
/// length ramp when that ablation replaces it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_a: f64,
    pub r_f: f64,
    pub r_c: f64,
    pub alpha: f64,
    pub total: f64,
}

pub fn composite_reward(r_a: f64, r_f: f64, r_c: f64, alpha: f64) -> Result<RewardBreakdown, RewardError> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(RewardError::NegativeAlpha(alpha));
    }
    for (name, value) in [("r_a", r_a), ("r_f", r_f)] {
        if value != 0.0 && value != 1.0 {
            return Err(RewardError::OutOfRange { name, value });
        }
    }
    if !(0.0..=1.0).contains(&r_c) {
        return Err(RewardError::OutOfRange { name: "r_c", value: r_c });
    }
    Ok(RewardBreakdown {
        r_a,
        r_f,
        r_c,
        alpha,
        total: r_a + r_f + alpha * r_c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abcd(v: &str) -> Answer {
        Answer::multi_choice(v, &["A", "B", "C", "D"]).unwrap()
    }

    #[test]
    fn multi_choice_normalization() {
        assert_eq!(accuracy_reward("  b.", &abcd("B")), 1);
        assert_eq!(accuracy_reward("(B)", &abcd("B")), 1);
        assert_eq!(accuracy_reward("C", &abcd("B")), 0);
        assert_eq!(accuracy_reward("", &abcd("B")), 0);
    }

    #[test]
    fn numeric_tolerance() {
        let g = Answer::numeric("42", Some(1e-6)).unwrap();
        assert_eq!(accuracy_reward("42.0000001", &g), 1);
        assert_eq!(accuracy_reward("42.1", &g), 0);
        assert_eq!(accuracy_reward("forty-two", &g), 0);
        let zero = Answer::numeric("0", None).unwrap();
        assert_eq!(accuracy_reward("1e-10", &zero), 1);
        assert_eq!(accuracy_reward("1e-8", &zero), 0);
    }

    #[test]
    fn open_text() {
        assert_eq!(accuracy_reward("blue", &Answer::open_text("red")), 0);
        assert_eq!(accuracy_reward(" New   York ", &Answer::open_text("new york")), 1);
    }

    #[test]
    fn invalid_answers() {
        assert!(matches!(
            Answer::multi_choice("E", &["A", "B"]),
            Err(AnswerError::NotAChoice(_))
        ));
        assert!(matches!(Answer::numeric("nan", None), Err(AnswerError::NotNumeric(_))));
        assert!(matches!(Answer::numeric("inf", None), Err(AnswerError::NotNumeric(_))));
    }

    #[test]
    fn length_ramp() {
        let r = |info: &str, think: &str| StructuredResponse::from_segments(Some(info), think, "A").unwrap();
        assert_eq!(length_reward(&r("", ""), 8), 0.0);
        assert_eq!(length_reward(&r("a b", "c d"), 8), 0.5);
        assert_eq!(length_reward(&r("a b c d e", "f g h i j"), 8), 1.0);
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_reward(1.0, 1.0, 1.0, 0.1).unwrap().total, 1.0 + 1.0 + 0.1);
        assert_eq!(composite_reward(0.0, 0.0, 0.0, 0.1).unwrap().total, 0.0);
        assert_eq!(composite_reward(1.0, 1.0, 1.0, 0.5).unwrap().total, 2.5);
        assert!(matches!(composite_reward(1.0, 1.0, 1.0, -0.1), Err(RewardError::NegativeAlpha(_))));
        assert!(composite_reward(0.5, 1.0, 1.0, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn case_and_whitespace_invariant(pad_l in "[ \t]{0,3}", pad_r in "[ \t\n]{0,3}", upper in any::<bool>(), idx in 0usize..4) {
            let labels = ["A", "B", "C", "D"];
            let label = if upper { labels[idx].to_string() } else { labels[idx].to_lowercase() };
            let text = format!("{pad_l}{label}{pad_r}");
            prop_assert_eq!(accuracy_reward(&text, &abcd(labels[idx])), 1);
            let open = Answer::open_text("Two Words");
            let t = format!("{pad_l}{}{pad_r}", if upper { "TWO WORDS" } else { "two words" });
            prop_assert_eq!(accuracy_reward(&t, &open), 1);
        }

        #[test]
        fn linear_in_caption_term(ra in 0u8..2, rf in 0u8..2, rc in 0.0f64..=1.0, alpha in 0.0f64..4.0) {
            let b0 = composite_reward(ra as f64, rf as f64, 0.0, alpha).unwrap();
            let b = composite_reward(ra as f64, rf as f64, rc, alpha).unwrap();
            prop_assert!((b.total - b0.total - alpha * rc).abs() <= 1e-12);
            prop_assert!(b.total >= 0.0 && b.total <= 2.0 + alpha);
        }
    }
}
