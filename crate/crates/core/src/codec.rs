//! Score tokenization, loss masks and output parsing.
//!
//! Tokenization is one token per digit, so a label in [10,50] is always two
//! tokens and a one-decimal score is always three.

use serde::{Deserialize, Serialize};

use crate::curation::{check_label, LABEL_MAX, LABEL_MIN};
use crate::error::{Error, Result};
use crate::rng;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const DOT: TokenId = 3;
pub const DIGIT_0: TokenId = 4;
pub const LABEL_1: TokenId = 14;
pub const TASK: TokenId = 15;
pub const FEATURE: TokenId = 16;
pub const FIRST_WORD: TokenId = 17;

const WORDS: [&str; 12] = [
    "the", "video", "is", "clear", "blurry", "smooth", "shows", "motion", "colors", "sharp",
    "good", "poor",
];

pub fn digit(d: u8) -> TokenId {
    debug_assert!(d < 10);
    DIGIT_0 + d as TokenId
}

pub fn as_digit(t: TokenId) -> Option<u8> {
    (DIGIT_0..DIGIT_0 + 10)
        .contains(&t)
        .then(|| (t - DIGIT_0) as u8)
}

/// Fixed vocabulary. Ids are dense and digits are contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "."]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend((0..10).map(|d| d.to_string()));
        tokens.push("<LABEL_1>".into());
        tokens.push("<task>".into());
        tokens.push("<feature>".into());
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        Self { tokens }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| i as TokenId)
    }

    pub fn word_ids(&self) -> std::ops::Range<TokenId> {
        FIRST_WORD..self.tokens.len() as TokenId
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("strings serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(text)?;
        let v = Self { tokens };
        if v != Self::default() {
            return Err(Error::Format(
                "vocabulary does not match the built-in layout".into(),
            ));
        }
        Ok(v)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// How training targets are written and which positions carry loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    IntegerMasked,
    IntegerFull,
    DecimalFull,
    GradeHead,
}

impl LabelMode {
    pub const ALL: [LabelMode; 4] = [
        LabelMode::IntegerMasked,
        LabelMode::IntegerFull,
        LabelMode::DecimalFull,
        LabelMode::GradeHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelMode::IntegerMasked => "integer_masked",
            LabelMode::IntegerFull => "integer_full",
            LabelMode::DecimalFull => "decimal_full",
            LabelMode::GradeHead => "grade_head",
        }
    }

    pub fn score_len(self) -> usize {
        match self {
            LabelMode::DecimalFull => 3,
            LabelMode::GradeHead => 0,
            _ => 2,
        }
    }
}

impl std::str::FromStr for LabelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LabelMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown label mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub score_span: Option<(usize, usize)>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, score_span: Option<(usize, usize)>) -> Result<Self> {
        if let Some((s, e)) = score_span {
            let ok =
                e == s + 2 && e <= ids.len() && ids[s..e].iter().all(|&t| as_digit(t).is_some());
            if !ok {
                return Err(Error::invalid(format!(
                    "score span ({s},{e}) is not two digit tokens"
                )));
            }
        }
        Ok(Self {
            loss_mask: vec![false; ids.len()],
            ids,
            score_span,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

pub fn encode_integer_score(label: u8) -> Result<[TokenId; 2]> {
    check_label(label)?;
    Ok([digit(label / 10), digit(label % 10)])
}

pub fn decode_integer_score(tokens: &[TokenId]) -> Result<u8> {
    match tokens {
        [a, b] => match (as_digit(*a), as_digit(*b)) {
            (Some(a), Some(b)) => {
                let label = a * 10 + b;
                check_label(label)?;
                Ok(label)
            }
            _ => Err(Error::Format("score tokens are not digits".into())),
        },
        _ => Err(Error::Format(format!(
            "expected 2 score tokens, got {}",
            tokens.len()
        ))),
    }
}

/// `score` written with one decimal place as digit, ".", digit.
pub fn encode_decimal_score(score: f64) -> Result<[TokenId; 3]> {
    if !(1.0..=5.0).contains(&score) {
        return Err(Error::invalid(format!("score {score} outside [1,5]")));
    }
    let tenths = (score * 10.0).round();
    if (score * 10.0 - tenths).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "score {score} has more than one decimal place"
        )));
    }
    let tenths = tenths as u32;
    let int = tenths / 10;
    if int >= 10 {
        return Err(Error::invalid(format!(
            "score {score} needs two integer digits"
        )));
    }
    Ok([digit(int as u8), DOT, digit((tenths % 10) as u8)])
}

pub fn decode_decimal_score(tokens: &[TokenId]) -> Result<f64> {
    match tokens {
        [a, DOT, b] => match (as_digit(*a), as_digit(*b)) {
            (Some(a), Some(b)) => Ok((a as u32 * 10 + b as u32) as f64 / 10.0),
            _ => Err(Error::Format("decimal score tokens are not digits".into())),
        },
        _ => Err(Error::Format("expected digit . digit".into())),
    }
}

/// Deterministic filler text standing in for explanatory or template tokens
/// that surround the score in a response.
pub fn rationale(item_id: &str, len: usize) -> Vec<TokenId> {
    use rand::Rng;
    let mut rng = rng::stream(0, &format!("rationale/{item_id}"));
    (0..len)
        .map(|_| FIRST_WORD + rng.random_range(0..WORDS.len() as TokenId))
        .collect()
}

/// Response target `[BOS, score.., rationale.., EOS]` with an empty mask.
/// Grade-head mode has no token target and is rejected.
pub fn build_target(label: u8, mode: LabelMode, rationale: &[TokenId]) -> Result<TokenSequence> {
    let mut ids = vec![BOS];
    let span = match mode {
        LabelMode::IntegerMasked | LabelMode::IntegerFull => {
            ids.extend(encode_integer_score(label)?);
            Some((1, 3))
        }
        LabelMode::DecimalFull => {
            check_label(label)?;
            ids.extend(encode_decimal_score(label as f64 / 10.0)?);
            None
        }
        LabelMode::GradeHead => {
            return Err(Error::invalid("grade-head mode has no token target"));
        }
    };
    ids.extend_from_slice(rationale);
    ids.push(EOS);
    let seq = TokenSequence::new(ids, span)?;
    match mode {
        LabelMode::IntegerMasked => build_integer_only_mask(seq),
        _ => Ok(build_full_mask(seq)),
    }
}

/// Loss on the two score digits only.
pub fn build_integer_only_mask(mut target: TokenSequence) -> Result<TokenSequence> {
    let (s, e) = target
        .score_span
        .ok_or_else(|| Error::invalid("sequence has no score span"))?;
    target.loss_mask = (0..target.ids.len()).map(|i| (s..e).contains(&i)).collect();
    Ok(target)
}

/// Loss on every non-PAD position.
pub fn build_full_mask(mut target: TokenSequence) -> TokenSequence {
    target.loss_mask = target.ids.iter().map(|&t| t != PAD).collect();
    target
}

/// Two aligned rows: tokens and mask flags.
pub fn render_mask(vocab: &Vocabulary, seq: &TokenSequence) -> String {
    let cells: Vec<(String, &str)> = seq
        .ids
        .iter()
        .zip(&seq.loss_mask)
        .map(|(&t, &m)| {
            (
                vocab.token(t).unwrap_or("<?>").to_string(),
                if m { "T" } else { "F" },
            )
        })
        .collect();
    let width = |(tok, flag): &(String, &str)| tok.chars().count().max(flag.len());
    let mut top = String::from("token |");
    let mut bottom = String::from("loss  |");
    for cell in &cells {
        let w = width(cell);
        top.push_str(&format!(" {:<w$} |", cell.0));
        bottom.push_str(&format!(" {:<w$} |", cell.1));
    }
    format!("{top}\n{bottom}\n")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// A two-digit integer with optional surrounding whitespace.
    #[default]
    Strict,
    /// First standalone integer anywhere in the text.
    Lenient,
}

pub fn parse_score_output(text: &str, mode: ParseMode) -> Result<u8> {
    let candidate = match mode {
        ParseMode::Strict => text.trim(),
        ParseMode::Lenient => first_integer_token(text)
            .ok_or_else(|| Error::Format(format!("no integer in {text:?}")))?,
    };
    if candidate.is_empty() || !candidate.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Format(format!("{text:?} is not an integer score")));
    }
    let value: i64 = candidate
        .parse()
        .map_err(|_| Error::Format(format!("{text:?} is not an integer score")))?;
    if !(LABEL_MIN as i64..=LABEL_MAX as i64).contains(&value) {
        return Err(Error::Range {
            value,
            min: LABEL_MIN as i64,
            max: LABEL_MAX as i64,
        });
    }
    if candidate.len() != 2 {
        return Err(Error::Format(format!("{text:?} is not a two-digit score")));
    }
    Ok(value as u8)
}

fn first_integer_token(text: &str) -> Option<&str> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '.'))
        .map(|tok| tok.trim_end_matches('.'))
        .find(|tok| !tok.is_empty() && tok.bytes().all(|b| b.is_ascii_digit()))
}
