//! Two-operand arithmetic with the additive XML format reward, plus the
//! boxed-answer reward.

use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{extract_tagged, RewardBreakdown};
use crate::error::{Error, Result};

pub const XML_TAG_REWARD: f64 = 0.125;
pub const XML_PENALTY_PER_CHAR: f64 = 0.001;
pub const XML_PENALTY_CAP: f64 = 0.125;
const SOFT_FORMAT_REWARD: f64 = 0.5;
const STRICT_FORMAT_REWARD: f64 = 0.5;
const INTEGER_REWARD: f64 = 0.5;
const CORRECT_REWARD: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithmeticInstance {
    pub a: i64,
    pub op: char,
    pub b: i64,
    pub answer: i64,
}

impl ArithmeticInstance {
    pub fn prompt(&self) -> String {
        format!("{}{}{}=?", self.a, self.op, self.b)
    }

    pub fn gold_completion(&self) -> String {
        format!(
            "<reasoning>\n{}{}{}={}\n</reasoning>\n<answer>\n{}\n</answer>\n",
            self.a, self.op, self.b, self.answer, self.answer
        )
    }
}

/// Non-negative integer answers; division is always exact.
pub fn gen_arithmetic<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Vec<ArithmeticInstance>> {
    if n == 0 {
        return Err(Error::Input("n must be >= 1".into()));
    }
    Ok((0..n)
        .map(|_| {
            let op = ['+', '-', '*', '/'][rng.gen_range(0..4)];
            let x = rng.gen_range(1..=12i64);
            let y = rng.gen_range(1..=12i64);
            let (a, b, answer) = match op {
                '+' => (x, y, x + y),
                '-' => (x.max(y), x.min(y), x.max(y) - x.min(y)),
                '*' => (x, y, x * y),
                _ => (x * y, y, x),
            };
            ArithmeticInstance { a, op, b, answer }
        })
        .collect())
}

fn soft_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?s)^<reasoning>.*?</reasoning>\s*<answer>.*?</answer>").unwrap()
    })
}

fn strict_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^<reasoning>\n.*?\n</reasoning>\n<answer>\n.*?\n</answer>\n$").unwrap()
    })
}

/// The trimmed `<answer>` body; with `lenient`, the whole trimmed text when
/// no tags are present.
pub fn extract_answer(text: &str, lenient: bool) -> Option<&str> {
    match extract_tagged(text, "answer") {
        Some(body) => Some(body.trim()),
        None if lenient => Some(text.trim()),
        None => None,
    }
}

fn xml_components(text: &str) -> (f64, f64) {
    let mut tags = 0.0;
    for tag in [
        "<reasoning>\n",
        "\n</reasoning>\n",
        "\n<answer>\n",
        "\n</answer>",
    ] {
        if text.matches(tag).count() == 1 {
            tags += XML_TAG_REWARD;
        }
    }
    let penalty = match text.rsplit_once("\n</answer>") {
        Some((_, rest)) if text.matches("\n</answer>").count() == 1 => {
            let rest = rest.strip_prefix('\n').unwrap_or(rest);
            (rest.chars().count() as f64 * XML_PENALTY_PER_CHAR).min(XML_PENALTY_CAP)
        }
        _ => 0.0,
    };
    (tags, -penalty)
}

pub fn arithmetic_reward(completion: &str, truth: i64) -> RewardBreakdown {
    arithmetic_reward_with(completion, truth, false)
}

/// Sum of xml-tag, trailing-content penalty, soft format, strict format,
/// integer-answer and correctness components.
pub fn arithmetic_reward_with(completion: &str, truth: i64, lenient: bool) -> RewardBreakdown {
    let (xml, penalty) = xml_components(completion);
    let soft = if soft_re().is_match(completion) {
        SOFT_FORMAT_REWARD
    } else {
        0.0
    };
    let strict = if strict_re().is_match(completion) {
        STRICT_FORMAT_REWARD
    } else {
        0.0
    };
    let answer = extract_answer(completion, lenient);
    let integer = match answer {
        Some(a) if !a.is_empty() && a.bytes().all(|b| b.is_ascii_digit()) => INTEGER_REWARD,
        _ => 0.0,
    };
    let correct = match answer.and_then(|a| a.parse::<i64>().ok()) {
        Some(v) if v == truth => CORRECT_REWARD,
        _ => 0.0,
    };
    RewardBreakdown::from_components(vec![
        ("xml".into(), xml),
        ("xml_penalty".into(), penalty),
        ("soft_format".into(), soft),
        ("strict_format".into(), strict),
        ("integer".into(), integer),
        ("correctness".into(), correct),
    ])
}

/// Content of the last balanced `\boxed{…}`.
fn last_boxed(text: &str) -> Option<&str> {
    let start = text.rfind("\\boxed{")? + "\\boxed{".len();
    let mut depth = 1;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Four-tier format score plus 2.0 when the boxed answer equals `truth`.
pub fn boxed_reward(completion: &str, truth: &str) -> RewardBreakdown {
    let boxed = last_boxed(completion);
    let format = match extract_tagged(completion, "answer") {
        Some(body) if body.contains("\\boxed") => 1.0,
        Some(_) => 0.75,
        None if boxed.is_some() => 0.5,
        None => 0.25,
    };
    let correct = match boxed {
        Some(b) if b.trim() == truth.trim() => CORRECT_REWARD,
        _ => 0.0,
    };
    RewardBreakdown::from_components(vec![
        ("format".into(), format),
        ("correctness".into(), correct),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FULL: &str = "<reasoning>\n6*7=42\n</reasoning>\n<answer>\n42\n</answer>\n";

    #[test]
    fn well_formed_correct_answer_earns_every_component() {
        let r = arithmetic_reward(FULL, 42);
        assert_eq!(r.get("xml"), Some(4.0 * 0.125));
        assert_eq!(r.get("xml_penalty"), Some(-0.0));
        assert_eq!(r.get("soft_format"), Some(0.5));
        assert_eq!(r.get("strict_format"), Some(0.5));
        assert_eq!(r.get("integer"), Some(0.5));
        assert_eq!(r.get("correctness"), Some(2.0));
        assert_eq!(r.total, 4.0);
    }

    #[test]
    fn empty_and_untagged() {
        assert_eq!(arithmetic_reward("", 42).total, 0.0);
        assert_eq!(arithmetic_reward("42", 42).total, 0.0);
        assert_eq!(arithmetic_reward_with("42", 42, true).total, 2.5);
    }

    #[test]
    fn trailing_content_is_penalised_and_capped() {
        let r = arithmetic_reward(&format!("{FULL}abc"), 42);
        assert!((r.get("xml_penalty").unwrap() + 0.003).abs() < 1e-15);
        assert_eq!(r.get("strict_format"), Some(0.0));
        let r = arithmetic_reward(&format!("{FULL}{}", "x".repeat(1000)), 42);
        assert_eq!(r.get("xml_penalty"), Some(-0.125));
    }

    #[test]
    fn soft_without_strict() {
        let r = arithmetic_reward("<reasoning>x</reasoning> <answer>41</answer>", 42);
        assert_eq!(r.get("soft_format"), Some(0.5));
        assert_eq!(r.get("strict_format"), Some(0.0));
        assert_eq!(r.get("integer"), Some(0.5));
        assert_eq!(r.get("correctness"), Some(0.0));
    }

    #[test]
    fn boxed_tiers() {
        assert_eq!(
            boxed_reward("<answer>\\boxed{42}</answer>", "42").total,
            3.0
        );
        assert_eq!(boxed_reward("<answer>42</answer>", "42").total, 0.75);
        assert_eq!(boxed_reward("\\boxed{41}", "42").total, 0.5);
        assert_eq!(boxed_reward("\\boxed{42}", "42").total, 2.5);
        assert_eq!(boxed_reward("42", "42").total, 0.25);
        assert_eq!(
            boxed_reward("\\boxed{\\frac{1}{2}}", "\\frac{1}{2}").total,
            2.5
        );
    }

    #[test]
    fn generator_answers_are_exact() {
        let a = gen_arithmetic(&mut ChaCha8Rng::seed_from_u64(0), 200).unwrap();
        assert_eq!(
            a,
            gen_arithmetic(&mut ChaCha8Rng::seed_from_u64(0), 200).unwrap()
        );
        for i in &a {
            let v = match i.op {
                '+' => i.a + i.b,
                '-' => i.a - i.b,
                '*' => i.a * i.b,
                _ => {
                    assert_eq!(i.a % i.b, 0);
                    i.a / i.b
                }
            };
            assert_eq!(v, i.answer);
            assert!(i.answer >= 0);
        }
    }
}
