//! Correlation metrics, the final leaderboard score and fixed-weight
//! ensembling.
//!
//! SRCC uses average ranks for ties and takes the Pearson correlation of the
//! ranks. When neither side has ties the textbook closed form
//! `1 - 6 Σ d² / (M (M² - 1))` gives the same value and is used directly.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    item_ids: Vec<String>,
    values: Vec<f64>,
}

impl ScoreVector {
    pub fn new(item_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if item_ids.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} ids but {} values",
                item_ids.len(),
                values.len()
            )));
        }
        let mut seen = HashSet::with_capacity(item_ids.len());
        if let Some(dup) = item_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::invalid(format!("duplicate item id {dup}")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite score {v}")));
        }
        Ok(Self { item_ids, values })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let (ids, vals) = pairs.into_iter().unzip();
        Self::new(ids, vals)
    }

    pub fn empty() -> Self {
        Self {
            item_ids: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.item_ids
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().copied())
    }

    /// Same scores ordered by item id.
    pub fn sorted(&self) -> Self {
        let mut pairs: Vec<_> = self.iter().map(|(i, v)| (i.to_string(), v)).collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        let (item_ids, values) = pairs.into_iter().unzip();
        Self { item_ids, values }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["item_id", "score"])?;
        for (id, v) in self.iter() {
            w.write_record([id, &v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut pairs = Vec::new();
        for row in r.records() {
            let row = row?;
            let id = row
                .get(0)
                .ok_or_else(|| Error::Format("missing item_id".into()))?;
            let v: f64 = row
                .get(1)
                .ok_or_else(|| Error::Format("missing score".into()))?
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad score for {id}")))?;
            pairs.push((id.to_string(), v));
        }
        Self::from_pairs(pairs)
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Pairs up two vectors by item id; both must cover the same ids.
pub fn align(pred: &ScoreVector, truth: &ScoreVector) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "prediction has {} items, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.item_ids == truth.item_ids {
        return Ok((pred.values.clone(), truth.values.clone()));
    }
    let lookup: BTreeMap<&str, f64> = truth.iter().collect();
    let mut p = Vec::with_capacity(pred.len());
    let mut t = Vec::with_capacity(pred.len());
    for (id, v) in pred.iter() {
        let tv = lookup
            .get(id)
            .ok_or_else(|| Error::invalid(format!("item {id} missing from truth")))?;
        p.push(v);
        t.push(*tv);
    }
    Ok((p, t))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        order[i..j].iter().for_each(|&k| ranks[k] = avg);
        i = j;
    }
    ranks
}

pub fn has_ties(values: &[f64]) -> bool {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).any(|w| w[0] == w[1])
}

fn check_len(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 items, got {n}")));
    }
    Ok(())
}

/// Pearson correlation; errors on a constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len())?;
    if x.len() != y.len() {
        return Err(Error::invalid("vectors differ in length"));
    }
    for (name, v) in [("truth", x), ("prediction", y)] {
        if v.iter().all(|&a| a == v[0]) {
            return Err(Error::DegenerateInput(format!("{name} has zero variance")));
        }
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `1 - 6 Σ d² / (M (M² - 1))`; only valid without ties.
pub fn srcc_closed_form(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred.len())?;
    if has_ties(pred) || has_ties(truth) {
        return Err(Error::invalid("closed-form SRCC requires tie-free inputs"));
    }
    let rp = average_ranks(pred);
    let rt = average_ranks(truth);
    let d2: f64 = rp.iter().zip(&rt).map(|(a, b)| (a - b) * (a - b)).sum();
    let m = pred.len() as f64;
    Ok(1.0 - 6.0 * d2 / (m * (m * m - 1.0)))
}

pub fn srcc_values(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred.len())?;
    if pred.len() != truth.len() {
        return Err(Error::invalid("vectors differ in length"));
    }
    if !has_ties(pred) && !has_ties(truth) {
        return srcc_closed_form(pred, truth);
    }
    pearson(&average_ranks(truth), &average_ranks(pred))
}

pub fn srcc(pred: &ScoreVector, truth: &ScoreVector) -> Result<f64> {
    let (p, t) = align(pred, truth)?;
    srcc_values(&p, &t)
}

pub fn plcc(pred: &ScoreVector, truth: &ScoreVector) -> Result<f64> {
    let (p, t) = align(pred, truth)?;
    pearson(&t, &p)
}

pub fn final_score(srcc: f64, plcc: f64) -> f64 {
    (srcc + plcc) / 2.0
}

/// Decimal rounding for display, half away from zero on the decimal value
/// (so 0.715 shows as 0.72 even though its binary value is slightly lower).
pub fn display_round(x: f64, places: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    // Twelve places absorb binary representation error before the decimal
    // rounding step.
    let s = format!("{:.12}", x.abs());
    let (int_part, frac_part) = s.split_once('.').expect("fixed format has a point");
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes())
        .map(|b| b - b'0')
        .collect();
    let keep = int_part.len() + places;
    let round_up = digits[keep] >= 5;
    digits.truncate(keep);
    if round_up {
        let mut i = keep;
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let int_len = digits.len() - places;
    let mut out = String::new();
    if x < 0.0 && digits.iter().any(|&d| d != 0) {
        out.push('-');
    }
    out.extend(digits[..int_len].iter().map(|d| (b'0' + d) as char));
    if places > 0 {
        out.push('.');
        out.extend(digits[int_len..].iter().map(|d| (b'0' + d) as char));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// Scores on the 1..5 MOS scale.
    Mos1To5,
    /// Integer labels in [10,50].
    Label10To50,
}

impl ScoreScale {
    pub fn to_mos(self, v: f64) -> f64 {
        match self {
            ScoreScale::Mos1To5 => v,
            ScoreScale::Label10To50 => v / 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub id: String,
    pub weight: f64,
    pub scale: ScoreScale,
    /// Optional prediction file, used by the command-line tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
}

pub const PAPER_WEIGHTS: [f64; 5] = [0.25, 0.15, 0.25, 0.1, 0.25];

impl Default for EnsembleSpec {
    /// Two integer-label members at different adapter ranks, two larger
    /// integer-label members and one grade-head member.
    fn default() -> Self {
        let ids = [
            "int-r32",
            "int-r128",
            "int-medium-r128",
            "int-large-r128",
            "grade-head",
        ];
        let scales = [
            ScoreScale::Label10To50,
            ScoreScale::Label10To50,
            ScoreScale::Label10To50,
            ScoreScale::Label10To50,
            ScoreScale::Mos1To5,
        ];
        Self {
            members: ids
                .iter()
                .zip(PAPER_WEIGHTS)
                .zip(scales)
                .map(|((id, weight), scale)| EnsembleMember {
                    id: id.to_string(),
                    weight,
                    scale,
                    predictions: None,
                })
                .collect(),
        }
    }
}

impl EnsembleSpec {
    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::invalid("ensemble has no members"));
        }
        if let Some(m) = self
            .members
            .iter()
            .find(|m| !(m.weight.is_finite() && m.weight >= 0.0))
        {
            return Err(Error::invalid(format!(
                "member {} has invalid weight {}",
                m.id, m.weight
            )));
        }
        let sum: f64 = self.members.iter().map(|m| m.weight).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {sum}, not 1")));
        }
        let mut seen = HashSet::new();
        if let Some(m) = self.members.iter().find(|m| !seen.insert(m.id.as_str())) {
            return Err(Error::invalid(format!("duplicate member id {}", m.id)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Weighted average of member predictions on the MOS scale. `predictions`
/// is in member order.
pub fn ensemble(predictions: &[ScoreVector], spec: &EnsembleSpec) -> Result<ScoreVector> {
    spec.validate()?;
    if predictions.len() != spec.members.len() {
        return Err(Error::invalid(format!(
            "{} prediction sets for {} members",
            predictions.len(),
            spec.members.len()
        )));
    }
    let sorted: Vec<ScoreVector> = predictions.iter().map(ScoreVector::sorted).collect();
    let ids = sorted[0].item_ids.clone();
    if let Some((i, _)) = sorted.iter().enumerate().find(|(_, s)| s.item_ids != ids) {
        return Err(Error::invalid(format!(
            "member {} covers a different item set",
            spec.members[i].id
        )));
    }
    let values = (0..ids.len())
        .map(|k| {
            sorted
                .iter()
                .zip(&spec.members)
                .map(|(s, m)| m.weight * m.scale.to_mos(s.values[k]))
                .sum()
        })
        .collect();
    ScoreVector::new(ids, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub srcc: f64,
    pub plcc: f64,
    pub final_score: f64,
}

impl EvalRow {
    pub fn new(model: impl Into<String>, srcc: f64, plcc: f64) -> Self {
        Self {
            model: model.into(),
            srcc,
            plcc,
            final_score: final_score(srcc, plcc),
        }
    }
}

pub fn evaluate(model: &str, pred: &ScoreVector, truth: &ScoreVector) -> Result<EvalRow> {
    Ok(EvalRow::new(model, srcc(pred, truth)?, plcc(pred, truth)?))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,srcc,plcc,final,srcc_2dp,plcc_2dp,final_2dp\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.model,
                r.srcc,
                r.plcc,
                r.final_score,
                display_round(r.srcc, 2),
                display_round(r.plcc, 2),
                display_round(r.final_score, 2)
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "model": r.model,
                    "srcc": r.srcc,
                    "plcc": r.plcc,
                    "final": r.final_score,
                    "display": {
                        "srcc": display_round(r.srcc, 2),
                        "plcc": display_round(r.plcc, 2),
                        "final": display_round(r.final_score, 2),
                    }
                })
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)?)
    }
}
