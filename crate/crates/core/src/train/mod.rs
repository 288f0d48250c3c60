//! Training the scorer: masked cross-entropy or grade-head regression,
//! AdamW with warmup plus cosine decay, per-epoch validation and best-epoch
//! selection.

mod gradcheck;
mod loss;
mod optim;
mod schedule;

pub use gradcheck::{gradient_check, gradient_check_against, GradCheckReport};
pub use loss::{grade_head_loss, masked_cross_entropy, masked_cross_entropy_sum};
pub use optim::{adam_step, AdamParams, EpochRecord, ParamRange, TrainState};
pub use schedule::{lr_at, warmup_steps};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{build_target, rationale, LabelMode, TokenId, LABEL_1};
use crate::curation::DatasetRecord;
use crate::error::{Error, Result};
use crate::eval::{self, ScoreVector};
use crate::rng::{self, StreamRng};
use crate::scorer::{
    grade_score_from_logits, save_checkpoint, CheckpointHeader, DecodeFormat, Group, Heads,
    LoraConfig, Mode, ModelConfig, ModelInput, ScorerModel, GRADES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
}

/// Every training knob, serialized flat so a JSON config file mirrors the
/// field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub use_lora: bool,
    pub lora_r: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub label_mode: LabelMode,
    /// Filler tokens after the score in each response target.
    pub rationale_len: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_limit: usize,
    /// Grade-head hidden width; defaults to `embed_dim`.
    pub grade_hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            warmup_ratio: 0.1,
            schedule: Schedule::Cosine,
            adam_epsilon: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            epochs: 6,
            use_lora: false,
            lora_r: 32,
            lora_alpha: 32.0,
            lora_dropout: 0.1,
            batch_size: 32,
            seed: 1,
            label_mode: LabelMode::IntegerMasked,
            rationale_len: 48,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            context_limit: 64,
            grade_hidden: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return fail(format!(
                "warmup_ratio {} must be in (0,1)",
                self.warmup_ratio
            ));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} {b} must be in (0,1)"));
            }
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.learning_rate)
            || !positive(self.adam_epsilon)
            || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0)
        {
            return fail(
                "learning_rate and adam_epsilon must be positive, weight_decay non-negative".into(),
            );
        }
        if self.use_lora && (self.lora_r == 0 || !(0.0..1.0).contains(&self.lora_dropout)) {
            return fail("lora_r must be >= 1 and lora_dropout in [0,1)".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn model_config(&self, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            mlp_hidden: 4 * self.embed_dim,
            context_limit: self.context_limit,
            feature_dim,
            grade_hidden: (self.label_mode == LabelMode::GradeHead)
                .then(|| self.grade_hidden.unwrap_or(self.embed_dim)),
            lora: self.use_lora.then_some(LoraConfig {
                r: self.lora_r,
                alpha: self.lora_alpha,
                dropout: self.lora_dropout,
            }),
            ..ModelConfig::default()
        }
    }

    pub fn decode_format(&self) -> Option<DecodeFormat> {
        match self.label_mode {
            LabelMode::IntegerMasked | LabelMode::IntegerFull => Some(DecodeFormat::Integer),
            LabelMode::DecimalFull => Some(DecodeFormat::Decimal),
            LabelMode::GradeHead => None,
        }
    }
}

/// One training example in model form.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub item_id: String,
    pub features: Vec<Vec<f64>>,
    /// Tokens fed after the task slot.
    pub input_tokens: Vec<TokenId>,
    /// Response tokens; `targets[j]` is predicted at position
    /// `n_frames + j`.
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub mos: f64,
}

impl Example {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Builds the example for `record` under `mode`. Positions after the last
/// masked target cannot affect the loss of a causal model and are dropped.
pub fn build_example(
    record: &DatasetRecord,
    mode: LabelMode,
    rationale_len: usize,
) -> Result<Example> {
    let base = Example {
        item_id: record.item_id.clone(),
        features: record.sampled_features.clone(),
        input_tokens: Vec::new(),
        targets: Vec::new(),
        mask: Vec::new(),
        mos: record.mos,
    };
    if mode == LabelMode::GradeHead {
        return Ok(Example {
            input_tokens: vec![LABEL_1],
            ..base
        });
    }
    let target = build_target(
        record.label,
        mode,
        &rationale(&record.item_id, rationale_len),
    )?;
    let last = target
        .loss_mask
        .iter()
        .rposition(|&m| m)
        .ok_or_else(|| Error::invalid("target has an empty loss mask"))?;
    Ok(Example {
        input_tokens: target.ids[..last].to_vec(),
        targets: target.ids[..=last].to_vec(),
        mask: target.loss_mask[..=last].to_vec(),
        ..base
    })
}

pub fn build_examples(
    records: &[DatasetRecord],
    mode: LabelMode,
    rationale_len: usize,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| build_example(r, mode, rationale_len))
        .collect()
}

/// Loss of a batch and its gradient. Token modes average over every masked
/// position in the batch; grade-head mode averages the squared error over
/// examples.
pub fn batch_loss_and_grad(
    model: &ScorerModel,
    batch: &[Example],
    mode: LabelMode,
    mut dropout: Option<&mut StreamRng>,
    grads: Option<&mut [f64]>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let want_grad = grads.is_some();
    let mut scratch = Vec::new();
    let g: &mut [f64] = match grads {
        Some(g) => g,
        None => &mut scratch,
    };
    let v = model.vocab_size();
    let mut total = 0.0;
    if mode == LabelMode::GradeHead {
        let n = batch.len() as f64;
        for ex in batch {
            let input = ModelInput {
                features: &ex.features,
                tokens: &ex.input_tokens,
            };
            let m = match dropout.as_deref_mut() {
                Some(r) => Mode::Train(r),
                None => Mode::Eval,
            };
            let fwd = model.forward(&input, Heads::GRADE, m)?;
            let logits = fwd.grade_logits.expect("grade head requested");
            let (dist, score) = grade_score_from_logits(&logits);
            total += grade_head_loss(score, ex.mos);
            if want_grad {
                let dscore = 2.0 * (score - ex.mos) / n;
                let mut dl = [0.0; 5];
                for i in 0..5 {
                    dl[i] = dscore * dist.probs[i] * (GRADES[i] - score);
                }
                model.backward(&fwd, None, Some(&dl), g);
            }
        }
        return Ok(total / n);
    }

    let count: usize = batch.iter().map(Example::masked_count).sum();
    if count == 0 {
        return Err(Error::invalid("batch has no masked positions"));
    }
    for ex in batch {
        let input = ModelInput {
            features: &ex.features,
            tokens: &ex.input_tokens,
        };
        let m = match dropout.as_deref_mut() {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let fwd = model.forward(&input, Heads::LM, m)?;
        let nf = ex.features.len();
        let rows = &fwd.logits[nf * v..(nf + ex.targets.len()) * v];
        let (sum, _, dl) = masked_cross_entropy_sum(rows, v, &ex.targets, &ex.mask, want_grad)?;
        total += sum;
        if want_grad {
            let mut dlogits = vec![0.0; fwd.seq_len * v];
            let scale = 1.0 / count as f64;
            dlogits[nf * v..(nf + ex.targets.len()) * v]
                .iter_mut()
                .zip(&dl)
                .for_each(|(d, s)| *d = s * scale);
            model.backward(&fwd, Some(&dlogits), None, g);
        }
    }
    Ok(total / count as f64)
}

/// Parameters the optimizer updates: adapters and the grade head when
/// adapters are enabled, otherwise everything.
pub fn trainable_ranges(model: &ScorerModel) -> Vec<ParamRange> {
    let lora = model.config().lora.is_some();
    model
        .blocks()
        .iter()
        .filter(|b| !lora || b.group != Group::Base)
        .map(|b| ParamRange {
            range: b.range(),
            decay: b.decay,
        })
        .collect()
}

/// Predicted MOS for every record, ordered as given.
pub fn predict(
    model: &ScorerModel,
    records: &[DatasetRecord],
    mode: LabelMode,
) -> Result<ScoreVector> {
    let values: Vec<f64> = records
        .par_iter()
        .map(|r| predict_one(model, &r.sampled_features, mode))
        .collect::<Result<_>>()?;
    ScoreVector::new(records.iter().map(|r| r.item_id.clone()).collect(), values)
}

pub fn predict_one(model: &ScorerModel, features: &[Vec<f64>], mode: LabelMode) -> Result<f64> {
    match mode {
        LabelMode::GradeHead => model.grade_head_score(features, &[LABEL_1]),
        LabelMode::DecimalFull => {
            Ok(model.greedy_decode(features, DecodeFormat::Decimal)?.label as f64 / 10.0)
        }
        _ => Ok(model.greedy_decode(features, DecodeFormat::Integer)?.label as f64 / 10.0),
    }
}

pub fn truth_vector(records: &[DatasetRecord]) -> Result<ScoreVector> {
    ScoreVector::new(
        records.iter().map(|r| r.item_id.clone()).collect(),
        records.iter().map(|r| r.mos).collect(),
    )
}

/// SRCC, PLCC and final score, or `None` when the predictions are constant.
pub fn validation_scores(
    pred: &ScoreVector,
    truth: &ScoreVector,
) -> Result<Option<(f64, f64, f64)>> {
    match eval::evaluate("val", pred, truth) {
        Ok(r) => Ok(Some((r.srcc, r.plcc, r.final_score))),
        Err(Error::DegenerateInput(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub struct TrainOutput {
    /// Parameters from the epoch with the best validation final score.
    pub best_model: ScorerModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Mean training loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,train_loss,val_srcc,val_plcc,val_final\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            opt(r.val_srcc),
            opt(r.val_plcc),
            opt(r.val_final)
        ));
    }
    out
}

/// Epoch with the highest validation final score (earliest on ties); the
/// last epoch when no epoch produced a score.
pub fn best_epoch(history: &[EpochRecord]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for r in history {
        if let Some(f) = r.val_final {
            if best.is_none_or(|(_, b)| f > b) {
                best = Some((r.epoch, f));
            }
        }
    }
    best.map(|b| b.0)
        .unwrap_or_else(|| history.last().map(|r| r.epoch).unwrap_or(0))
}

/// Trains `model` on `train`, validating after every epoch. When `out_dir` is
/// given, writes `checkpoints/epoch-N.ckpt` and `history.csv` there.
pub fn train(
    mut model: ScorerModel,
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mode = cfg.label_mode;
    if (mode == LabelMode::GradeHead) != model.has_grade_head() {
        return Err(Error::invalid(
            "grade-head mode and model head do not agree",
        ));
    }
    let examples = build_examples(train, mode, cfg.rationale_len)?;
    let truth = truth_vector(val)?;
    let ranges = trainable_ranges(&model);
    let hp = cfg.adam();
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut state = TrainState::new(model.param_count());
    let mut dropout_rng = rng::stream(cfg.seed, "dropout");
    let mut grads = vec![0.0; model.param_count()];
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut best: Option<(f64, ScorerModel)> = None;
    let mut fallback_epoch_model = None;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("shuffle/{epoch}")));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            grads.iter_mut().for_each(|g| *g = 0.0);
            let loss = batch_loss_and_grad(
                &model,
                &batch,
                mode,
                Some(&mut dropout_rng),
                Some(&mut grads),
            )?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: state.step,
                    detail: format!("loss {loss} in epoch {epoch}"),
                });
            }
            let lr = lr_at(state.step, total_steps, cfg.learning_rate, cfg.warmup_ratio)?;
            adam_step(&mut state, model.params_mut(), &grads, &ranges, lr, &hp)?;
            step_losses.push(loss);
            epoch_loss += loss;
        }
        let train_loss = epoch_loss / steps_per_epoch as f64;

        let scores = if val.is_empty() {
            None
        } else {
            validation_scores(&predict(&model, val, mode)?, &truth)?
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_srcc: scores.map(|s| s.0),
            val_plcc: scores.map(|s| s.1),
            val_final: scores.map(|s| s.2),
        };
        log::debug!(
            "epoch {epoch}: loss {train_loss:.4} val {:?}",
            record.val_final
        );
        if let Some(f) = record.val_final {
            if best.as_ref().is_none_or(|(b, _)| f > *b) {
                best = Some((f, model.clone()));
            }
        }
        state.history.push(record);

        if let Some(dir) = out_dir {
            let header = CheckpointHeader::for_model(
                &model,
                cfg.seed,
                Some(epoch),
                serde_json::to_value(cfg)?,
            );
            save_checkpoint(
                &dir.join(format!("checkpoints/epoch-{epoch}.ckpt")),
                &model,
                &header,
            )?;
            fs::write(dir.join("history.csv"), history_csv(&state.history))
                .map_err(|e| Error::io(dir, e))?;
        }
        if epoch == cfg.epochs {
            fallback_epoch_model = Some(model.clone());
        }
    }

    let best_epoch = best_epoch(&state.history);
    let best_model = match best {
        Some((_, m)) => m,
        None => fallback_epoch_model.expect("at least one epoch ran"),
    };
    Ok(TrainOutput {
        best_model,
        best_epoch,
        history: state.history,
        step_losses,
    })
}

#[cfg(test)]
mod tests;
