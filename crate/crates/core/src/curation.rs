//! Raw records to training records: frame sampling, prompt rendering and the
//! MOS to integer label transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::RawRecord;

pub const LABEL_MIN: u8 = 10;
pub const LABEL_MAX: u8 = 50;

pub const DIMENSIONS: [&str; 4] = [
    "aesthetic quality",
    "image quality",
    "temporal quality",
    "text-video alignment",
];

pub const DEFAULT_OUTPUT_INSTRUCTION: &str = "Output only a single integer between 10 and 50, \
where 10 is the worst and 50 is the best. Do not give any explanation.";

pub const DEFAULT_TEMPLATE: &str = "You are given frames from a video generated from the prompt: \
\"{user_prompt}\". Rate the overall quality of the video considering {dimensions}. \
{output_instruction}";

const PLACEHOLDERS: [&str; 3] = ["user_prompt", "dimensions", "output_instruction"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFlags {
    /// Set when a one-frame video was asked for two frames and the frame was
    /// duplicated.
    pub duplicated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub item_id: String,
    pub sampled_features: Vec<Vec<f64>>,
    pub rendered_prompt: String,
    pub mos: f64,
    pub label: u8,
}

/// Picks `k` frames: the middle frame for `k = 1`, the first and third
/// quartile positions for `k = 2`.
pub fn sample_frames(frames: &[Vec<f64>], k: usize) -> Result<(Vec<Vec<f64>>, SampleFlags)> {
    if frames.is_empty() {
        return Err(Error::invalid("video has no frames"));
    }
    let n = frames.len();
    match k {
        1 => Ok((
            vec![frames[n / 2].clone()],
            SampleFlags { duplicated: false },
        )),
        2 if n == 1 => Ok((
            vec![frames[0].clone(), frames[0].clone()],
            SampleFlags { duplicated: true },
        )),
        2 => {
            let lo = (n - 1) / 4;
            let hi = 3 * (n - 1) / 4;
            Ok((
                vec![frames[lo].clone(), frames[hi].clone()],
                SampleFlags { duplicated: false },
            ))
        }
        _ => Err(Error::invalid(format!("frame count k={k} must be 1 or 2"))),
    }
}

/// Prompt template with `{name}` placeholders. Only `user_prompt`,
/// `dimensions` and `output_instruction` are recognised; anything else fails
/// at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    template_text: String,
    dimension_list: Vec<String>,
    output_instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        Self::with_instruction(text, DEFAULT_OUTPUT_INSTRUCTION)
    }

    pub fn with_instruction(text: &str, instruction: &str) -> Result<Self> {
        let mut seen_user = false;
        for name in placeholders(text)? {
            if !PLACEHOLDERS.contains(&name) {
                return Err(Error::Format(format!(
                    "unknown template placeholder {{{name}}}"
                )));
            }
            seen_user |= name == "user_prompt";
        }
        if !seen_user {
            return Err(Error::Format(
                "template has no {user_prompt} placeholder".into(),
            ));
        }
        let tmpl = Self {
            template_text: text.to_string(),
            dimension_list: DIMENSIONS.iter().map(|s| s.to_string()).collect(),
            output_instruction: instruction.to_string(),
        };
        // Rendering is total, so a probe render catches templates that would
        // drop the dimensions or the output contract.
        check_rendered_prompt(&tmpl.fill("probe"))?;
        Ok(tmpl)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(text.trim_end_matches('\n'))
    }

    pub fn text(&self) -> &str {
        &self.template_text
    }

    pub fn dimensions(&self) -> &[String] {
        &self.dimension_list
    }

    fn fill(&self, user_prompt: &str) -> String {
        let dims = match self.dimension_list.as_slice() {
            [init @ .., last] if !init.is_empty() => format!("{}, and {}", init.join(", "), last),
            other => other.join(""),
        };
        self.template_text
            .replace("{dimensions}", &dims)
            .replace("{output_instruction}", &self.output_instruction)
            .replace("{user_prompt}", user_prompt)
    }

    pub fn render(&self, user_prompt: &str) -> Result<String> {
        if user_prompt.trim().is_empty() {
            return Err(Error::invalid("user prompt is empty"));
        }
        Ok(self.fill(user_prompt))
    }
}

fn placeholders(text: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::Format("unterminated placeholder in template".into()))?;
        out.push(&after[..close]);
        rest = &after[close + 1..];
    }
    Ok(out)
}

/// Verifies a rendered prompt names all four dimensions and asks for a single
/// integer in [10,50].
pub fn check_rendered_prompt(prompt: &str) -> Result<()> {
    let lower = prompt.to_lowercase();
    for dim in DIMENSIONS {
        if !lower.contains(dim) {
            return Err(Error::Format(format!("prompt does not mention {dim:?}")));
        }
    }
    let asks_integer = lower.contains("integer") && lower.contains("10") && lower.contains("50");
    if !asks_integer {
        return Err(Error::Format(
            "prompt lacks the integer [10,50] instruction".into(),
        ));
    }
    Ok(())
}

/// `clamp(round_half_away_from_zero(mos * 10), 10, 50)`.
///
/// Ties are decided on the decimal value, so 3.65 maps to 37 even though its
/// binary representation lies just below 3.65.
pub fn mos_to_label(mos: f64) -> Result<u8> {
    if !(1.0..=5.0).contains(&mos) {
        return Err(Error::invalid(format!("mos {mos} outside [1,5]")));
    }
    let x = mos * 10.0;
    let floor = x.floor();
    let rounded = if x - floor >= 0.5 - 1e-9 {
        floor + 1.0
    } else {
        floor
    };
    Ok(rounded.clamp(LABEL_MIN as f64, LABEL_MAX as f64) as u8)
}

pub fn label_to_mos(label: u8) -> Result<f64> {
    check_label(label)?;
    Ok(label as f64 / 10.0)
}

pub fn check_label(label: u8) -> Result<()> {
    if (LABEL_MIN..=LABEL_MAX).contains(&label) {
        Ok(())
    } else {
        Err(Error::Range {
            value: label as i64,
            min: LABEL_MIN as i64,
            max: LABEL_MAX as i64,
        })
    }
}

pub fn curate(raw: &RawRecord, tmpl: &PromptTemplate, k: usize) -> Result<DatasetRecord> {
    let (sampled, flags) = sample_frames(&raw.frame_features, k)?;
    if flags.duplicated {
        log::warn!("{}: single-frame video, duplicated for k=2", raw.item_id);
    }
    Ok(DatasetRecord {
        item_id: raw.item_id.clone(),
        sampled_features: sampled,
        rendered_prompt: tmpl.render(&raw.user_prompt)?,
        mos: raw.mos,
        label: mos_to_label(raw.mos)?,
    })
}

/// Curates every record and orders the output by item id.
pub fn curate_all(
    raw: &[RawRecord],
    tmpl: &PromptTemplate,
    k: usize,
) -> Result<Vec<DatasetRecord>> {
    use rayon::prelude::*;
    let mut out: Vec<DatasetRecord> = raw
        .par_iter()
        .map(|r| curate(r, tmpl, k))
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64]).collect()
    }

    #[test]
    fn middle_frame_for_one() {
        let (s, _) = sample_frames(&frames(5), 1).unwrap();
        assert_eq!(s, vec![vec![2.0]]);
    }

    #[test]
    fn quartiles_for_two() {
        let (s, f) = sample_frames(&frames(8), 2).unwrap();
        assert_eq!(s, vec![vec![1.0], vec![5.0]]);
        assert!(!f.duplicated);
    }

    #[test]
    fn single_frame_duplicated() {
        let (s, f) = sample_frames(&frames(1), 2).unwrap();
        assert_eq!(s, vec![vec![0.0], vec![0.0]]);
        assert!(f.duplicated);
    }

    #[test]
    fn sampling_errors() {
        assert!(sample_frames(&[], 1).is_err());
        assert!(sample_frames(&frames(4), 0).is_err());
        assert!(sample_frames(&frames(4), 3).is_err());
    }

    #[test]
    fn render_contains_dimensions() {
        let t = PromptTemplate::default();
        let p = t.render("a cat on a sofa").unwrap();
        assert!(p.contains("a cat on a sofa"));
        assert!(p.contains("aesthetic quality"));
        assert!(p.contains("text-video alignment"));
        check_rendered_prompt(&p).unwrap();
        assert_eq!(p, t.render("a cat on a sofa").unwrap());
    }

    #[test]
    fn render_rejects_empty_prompt() {
        assert!(PromptTemplate::default().render("  ").is_err());
    }

    #[test]
    fn unknown_placeholder_fails_at_load() {
        let err = PromptTemplate::parse("{user_prompt} {mood}");
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn template_without_dimensions_fails_at_load() {
        assert!(PromptTemplate::parse("{user_prompt} {output_instruction}").is_err());
        assert!(PromptTemplate::parse("Rate {user_prompt} on {dimensions}.").is_err());
    }

    #[test]
    fn label_examples() {
        assert_eq!(mos_to_label(3.666).unwrap(), 37);
        assert_eq!(mos_to_label(1.0).unwrap(), 10);
        assert_eq!(mos_to_label(5.0).unwrap(), 50);
        assert_eq!(mos_to_label(4.25).unwrap(), 43);
        assert_eq!(mos_to_label(3.65).unwrap(), 37);
        assert_eq!(mos_to_label(1.45).unwrap(), 15);
    }

    #[test]
    fn label_rejects_out_of_domain() {
        for bad in [0.99, 5.01, f64::NAN, -3.0] {
            assert!(matches!(mos_to_label(bad), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(label_to_mos(37).unwrap(), 3.7);
        assert_eq!(label_to_mos(10).unwrap(), 1.0);
        assert!(label_to_mos(9).is_err());
        assert!(label_to_mos(51).is_err());
        for l in 10..=50u8 {
            assert_eq!(mos_to_label(label_to_mos(l).unwrap()).unwrap(), l);
        }
    }

    #[test]
    fn curate_composes() {
        let raw = RawRecord {
            item_id: "a".into(),
            frame_features: frames(3),
            user_prompt: "a fox".into(),
            mos: 3.666,
        };
        let rec = curate(&raw, &PromptTemplate::default(), 2).unwrap();
        assert_eq!(rec.label, 37);
        assert_eq!(rec.sampled_features.len(), 2);
        let raw = RawRecord { mos: 1.0, ..raw };
        let rec = curate(&raw, &PromptTemplate::default(), 1).unwrap();
        assert_eq!(rec.label, 10);
        assert_eq!(rec.sampled_features.len(), 1);
    }
}
