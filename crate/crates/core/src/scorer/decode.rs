//! Greedy (temperature 0) decoding and grade-head scoring.

use serde::{Deserialize, Serialize};

use super::{Heads, Mode, ModelInput, ScorerModel, GRADE_COUNT};
use crate::codec::{as_digit, digit, TokenId, BOS, DOT, LABEL_1};
use crate::error::{Error, Result};

/// Scores attached to the grades bad, poor, fair, good, excellent.
pub const GRADES: [f64; GRADE_COUNT] = [1.0, 2.0, 3.0, 4.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeFormat {
    /// Two digits, e.g. `3 7`.
    Integer,
    /// Digit, `.`, digit, e.g. `3 . 7`.
    Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated tokens after BOS.
    pub tokens: Vec<TokenId>,
    /// The score as an integer label, tens digit then ones digit.
    pub label: u8,
}

/// Highest logit among `allowed`; ties go to the lowest token id.
pub fn constrained_argmax(logits: &[f64], allowed: impl IntoIterator<Item = TokenId>) -> TokenId {
    let mut best: Option<(TokenId, f64)> = None;
    for t in allowed {
        let v = logits[t as usize];
        match best {
            Some((bt, bv)) if v > bv || (v == bv && t < bt) => best = Some((t, v)),
            None => best = Some((t, v)),
            _ => {}
        }
    }
    best.expect("allowed set is non-empty").0
}

/// Leading digit 1..=5; after a 5 only 0 may follow, so every output is a
/// label in [10,50].
fn allowed_second(first: u8) -> std::ops::RangeInclusive<TokenId> {
    if first == 5 {
        digit(0)..=digit(0)
    } else {
        digit(0)..=digit(9)
    }
}

/// Greedy decode driven by a next-token logit source. `next` receives the
/// tokens generated so far (starting with BOS) and returns logits for the
/// following position.
pub fn greedy_decode_with<F>(format: DecodeFormat, mut next: F) -> Result<Decoded>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    let mut seq = vec![BOS];
    let first = constrained_argmax(&next(&seq)?, digit(1)..=digit(5));
    seq.push(first);
    if format == DecodeFormat::Decimal {
        seq.push(DOT);
    }
    let d1 = as_digit(first).expect("digit");
    let second = constrained_argmax(&next(&seq)?, allowed_second(d1));
    seq.push(second);
    let d2 = as_digit(second).expect("digit");
    Ok(Decoded {
        tokens: seq[1..].to_vec(),
        label: d1 * 10 + d2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradeDistribution {
    pub probs: [f64; GRADE_COUNT],
}

impl GradeDistribution {
    pub fn score(&self) -> f64 {
        self.probs.iter().zip(GRADES).map(|(p, g)| p * g).sum()
    }
}

/// Softmax over grade logits and the probability-weighted grade.
pub fn grade_score_from_logits(logits: &[f64; GRADE_COUNT]) -> (GradeDistribution, f64) {
    let mut probs = *logits;
    super::linalg::softmax_in_place(&mut probs);
    let dist = GradeDistribution { probs };
    (dist, dist.score())
}

impl ScorerModel {
    /// Logits for the position after `tokens`.
    pub fn next_token_logits(&self, features: &[Vec<f64>], tokens: &[TokenId]) -> Result<Vec<f64>> {
        let input = ModelInput { features, tokens };
        let fwd = self.forward(&input, Heads::LM, Mode::Eval)?;
        let v = self.vocab_size();
        Ok(fwd.logits_at(fwd.seq_len - 1, v).to_vec())
    }

    pub fn greedy_decode(&self, features: &[Vec<f64>], format: DecodeFormat) -> Result<Decoded> {
        greedy_decode_with(format, |prefix| self.next_token_logits(features, prefix))
    }

    pub fn grade_distribution(
        &self,
        features: &[Vec<f64>],
        tokens: &[TokenId],
    ) -> Result<GradeDistribution> {
        if !tokens.contains(&LABEL_1) {
            return Err(Error::invalid("context has no <LABEL_1> token"));
        }
        let fwd = self.forward(&ModelInput { features, tokens }, Heads::GRADE, Mode::Eval)?;
        let logits = fwd.grade_logits.expect("grade head requested");
        Ok(grade_score_from_logits(&logits).0)
    }

    /// Probability-weighted grade in (1, 5).
    pub fn grade_head_score(&self, features: &[Vec<f64>], tokens: &[TokenId]) -> Result<f64> {
        Ok(self.grade_distribution(features, tokens)?.score())
    }
}
