use super::*;
use crate::codec::{digit, BOS, EOS, FIRST_WORD};
use crate::curation::{curate_all, PromptTemplate};
use crate::synth::{generate_dataset, GeneratorConfig, SplitSizes};

fn data(train: usize, val: usize, seed: u64) -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
    let cfg = GeneratorConfig {
        feature_dim: 8,
        seed,
        ..GeneratorConfig::default()
    };
    let raw = generate_dataset(
        &cfg,
        SplitSizes {
            train,
            val,
            test: 0,
        },
    )
    .unwrap();
    let t = PromptTemplate::default();
    (
        curate_all(&raw.train, &t, 2).unwrap(),
        curate_all(&raw.val, &t, 2).unwrap(),
    )
}

fn tiny(mode: LabelMode) -> TrainConfig {
    TrainConfig {
        label_mode: mode,
        embed_dim: 16,
        n_layers: 1,
        n_heads: 2,
        context_limit: 16,
        rationale_len: 4,
        epochs: 2,
        batch_size: 8,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    }
}

fn model_for(cfg: &TrainConfig, seed: u64) -> ScorerModel {
    ScorerModel::new(cfg.model_config(8), seed).unwrap()
}

#[test]
fn config_defaults_and_validation() {
    let c = TrainConfig::default();
    c.validate().unwrap();
    assert_eq!(
        (c.learning_rate, c.adam_beta2, c.batch_size),
        (3e-4, 0.98, 32)
    );
    assert!(TrainConfig {
        epochs: 0,
        ..c.clone()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        warmup_ratio: 1.0,
        ..c.clone()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        adam_beta1: 1.0,
        ..c.clone()
    }
    .validate()
    .is_err());
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), c);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lerning_rate": 1}"#).is_err());
    let partial: TrainConfig =
        serde_json::from_str(r#"{"label_mode": "decimal_full", "epochs": 2}"#).unwrap();
    assert_eq!(
        (partial.label_mode, partial.epochs),
        (LabelMode::DecimalFull, 2)
    );
}

#[test]
fn examples_are_truncated_after_last_masked_target() {
    let (train, _) = data(3, 0, 1);
    let r = &train[0];
    let (t, o) = (r.label / 10, r.label % 10);
    let ex = build_example(r, LabelMode::IntegerMasked, 6).unwrap();
    assert_eq!(ex.targets, vec![BOS, digit(t), digit(o)]);
    assert_eq!(ex.mask, vec![false, true, true]);
    assert_eq!(ex.input_tokens, vec![BOS, digit(t)]);

    let full = build_example(r, LabelMode::IntegerFull, 6).unwrap();
    assert_eq!(full.targets.len(), 1 + 2 + 6 + 1);
    assert_eq!(*full.targets.last().unwrap(), EOS);
    assert_eq!(full.input_tokens.len(), full.targets.len() - 1);
    assert_eq!(full.masked_count(), full.targets.len());

    let dec = build_example(r, LabelMode::DecimalFull, 6).unwrap();
    assert_eq!(dec.targets.len(), 1 + 3 + 6 + 1);

    let g = build_example(r, LabelMode::GradeHead, 6).unwrap();
    assert_eq!(g.input_tokens, vec![LABEL_1]);
}

/// Loss of one example from a forward pass over the whole, untruncated
/// response.
fn untruncated_loss(m: &ScorerModel, feats: &[Vec<f64>], ids: &[TokenId], mask: &[bool]) -> f64 {
    let input = ModelInput {
        features: feats,
        tokens: ids,
    };
    let fwd = m.forward(&input, Heads::LM, Mode::Eval).unwrap();
    let v = m.vocab_size();
    let nf = feats.len();
    masked_cross_entropy(&fwd.logits[nf * v..(nf + ids.len()) * v], v, ids, mask).unwrap()
}

#[test]
fn truncation_does_not_change_the_loss() {
    let (train, _) = data(4, 0, 2);
    let cfg = tiny(LabelMode::IntegerMasked);
    let m = model_for(&cfg, 3);
    for r in &train {
        let t = build_target(r.label, LabelMode::IntegerMasked, &rationale(&r.item_id, 6)).unwrap();
        let full = untruncated_loss(&m, &r.sampled_features, &t.ids, &t.loss_mask);
        let ex = build_example(r, LabelMode::IntegerMasked, 6).unwrap();
        let short = batch_loss_and_grad(&m, &[ex], LabelMode::IntegerMasked, None, None).unwrap();
        assert!((full - short).abs() < 1e-12, "{full} vs {short}");
    }
}

#[test]
fn masked_loss_ignores_tokens_outside_the_score_span() {
    let (train, _) = data(2, 0, 4);
    let cfg = tiny(LabelMode::IntegerMasked);
    let m = model_for(&cfg, 3);
    let r = &train[0];
    let t = build_target(r.label, LabelMode::IntegerMasked, &rationale(&r.item_id, 6)).unwrap();
    let base = untruncated_loss(&m, &r.sampled_features, &t.ids, &t.loss_mask);
    let (_, end) = t.score_span.unwrap();
    let mut r2 = crate::rng::stream(5, "corrupt");
    for _ in 0..20 {
        let mut ids = t.ids.clone();
        for id in ids.iter_mut().skip(end) {
            *id = rand::Rng::random_range(&mut r2, 0..29);
        }
        assert_eq!(
            untruncated_loss(&m, &r.sampled_features, &ids, &t.loss_mask),
            base
        );
    }
    // A full mask does see the rationale.
    let full = build_target(r.label, LabelMode::IntegerFull, &rationale(&r.item_id, 6)).unwrap();
    let mut ids = full.ids.clone();
    ids[end] = FIRST_WORD + ((ids[end] - FIRST_WORD + 1) % 12);
    assert_ne!(
        untruncated_loss(&m, &r.sampled_features, &ids, &full.loss_mask),
        untruncated_loss(&m, &r.sampled_features, &full.ids, &full.loss_mask)
    );
}

fn gradcheck_batch(mode: LabelMode, lora: bool) -> (ScorerModel, Vec<Example>) {
    let (train, _) = data(3, 0, 6);
    let cfg = TrainConfig {
        use_lora: lora,
        lora_r: 2,
        lora_alpha: 2.0,
        lora_dropout: 0.0,
        embed_dim: 8,
        grade_hidden: Some(6),
        ..tiny(mode)
    };
    let mut m = model_for(&cfg, 7);
    if lora {
        // Non-zero B so the adapter path carries gradient everywhere.
        for b in m.blocks().to_vec() {
            if b.name.ends_with("lora_b") {
                let mut r = crate::rng::stream(8, &b.name);
                for p in &mut m.params_mut()[b.range()] {
                    *p = rand::Rng::random_range(&mut r, -0.1..0.1);
                }
            }
        }
    }
    // Random rather than default-initialized norms and biases so every
    // parameter group has a non-trivial gradient.
    let mut r = crate::rng::stream(9, "perturb");
    for p in m.params_mut() {
        *p += rand::Rng::random_range(&mut r, -0.05..0.05);
    }
    (m, build_examples(&train, mode, 3).unwrap())
}

#[test]
fn gradients_match_finite_differences_in_every_mode() {
    for mode in LabelMode::ALL {
        for lora in [false, true] {
            let (m, batch) = gradcheck_batch(mode, lora);
            let rep = gradient_check(&m, &batch, mode, 200, &[1e-3, 1e-4, 1e-5], 1).unwrap();
            assert!(rep.indices.len() <= 200 && rep.indices.len() > 50);
            assert!(
                rep.best().1 < 1e-4,
                "{} lora={lora}: {:?}",
                mode.name(),
                rep.sweep
            );
            // Truncation error dominates at 1e-3, rounding error at 1e-5.
            assert_eq!(
                rep.best().0,
                1e-4,
                "{} lora={lora}: {:?}",
                mode.name(),
                rep.sweep
            );
        }
    }
}

#[test]
fn gradient_check_catches_a_sign_flip() {
    let (m, batch) = gradcheck_batch(LabelMode::IntegerMasked, false);
    let mut g = vec![0.0; m.param_count()];
    batch_loss_and_grad(&m, &batch, LabelMode::IntegerMasked, None, Some(&mut g)).unwrap();
    g.iter_mut().for_each(|x| *x = -*x);
    let rep =
        gradient_check_against(&m, &batch, LabelMode::IntegerMasked, &g, 200, &[1e-5], 1).unwrap();
    assert!(rep.best().1 > 1e-1, "{:?}", rep.sweep);
}

#[test]
fn lora_training_leaves_base_weights_bit_identical() {
    let (train, val) = data(24, 8, 10);
    let cfg = TrainConfig {
        use_lora: true,
        lora_r: 2,
        ..tiny(LabelMode::IntegerMasked)
    };
    let m = model_for(&cfg, 11);
    let before = m.clone();
    let out = train_fn(m, &train, &val, &cfg);
    let mut changed = false;
    for b in before.blocks() {
        let (x, y) = (
            &before.params()[b.range()],
            &out.best_model.params()[b.range()],
        );
        if b.group == Group::Base {
            assert!(
                x.iter().zip(y).all(|(a, c)| a.to_bits() == c.to_bits()),
                "{}",
                b.name
            );
        } else if x != y {
            changed = true;
        }
    }
    assert!(changed);
}

fn train_fn(
    m: ScorerModel,
    t: &[DatasetRecord],
    v: &[DatasetRecord],
    cfg: &TrainConfig,
) -> TrainOutput {
    train(m, t, v, cfg, None).unwrap()
}

#[test]
fn seeded_training_is_reproducible() {
    let (train_set, val) = data(40, 10, 12);
    for mode in [LabelMode::IntegerMasked, LabelMode::GradeHead] {
        let cfg = tiny(mode);
        let a = train_fn(model_for(&cfg, 1), &train_set, &val, &cfg);
        let b = train_fn(model_for(&cfg, 1), &train_set, &val, &cfg);
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_model.params(), b.best_model.params());
        assert_eq!(a.step_losses.len(), 2 * 40usize.div_ceil(8));
    }
}

#[test]
fn training_reduces_loss() {
    let (train_set, val) = data(64, 16, 13);
    let cfg = TrainConfig {
        epochs: 4,
        ..tiny(LabelMode::IntegerMasked)
    };
    let out = train_fn(model_for(&cfg, 2), &train_set, &val, &cfg);
    let first = out.history.first().unwrap().train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn train_writes_checkpoints_and_history() {
    let (train_set, val) = data(16, 8, 14);
    let cfg = tiny(LabelMode::IntegerFull);
    let dir = tempfile::tempdir().unwrap();
    let out = train(model_for(&cfg, 3), &train_set, &val, &cfg, Some(dir.path())).unwrap();
    for e in 1..=2 {
        let p = dir.path().join(format!("checkpoints/epoch-{e}.ckpt"));
        let (_, h) = crate::scorer::load_checkpoint(&p, Some(&cfg.model_config(8))).unwrap();
        assert_eq!(h.epoch, Some(e));
    }
    let hist = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(
        hist.lines().next().unwrap(),
        "epoch,train_loss,val_srcc,val_plcc,val_final"
    );
    assert_eq!(hist.lines().count(), 3);
    assert!((1..=2).contains(&out.best_epoch));
}

#[test]
fn train_rejects_bad_setups() {
    let (train_set, val) = data(8, 4, 15);
    let cfg = tiny(LabelMode::GradeHead);
    // Model without a grade head.
    let m = model_for(&tiny(LabelMode::IntegerMasked), 1);
    assert!(train(m.clone(), &train_set, &val, &cfg, None).is_err());
    let zero = TrainConfig {
        epochs: 0,
        ..tiny(LabelMode::IntegerMasked)
    };
    assert!(train(m.clone(), &train_set, &val, &zero, None).is_err());
    assert!(train(m, &[], &val, &tiny(LabelMode::IntegerMasked), None).is_err());
}

#[test]
fn best_epoch_selection() {
    let rec = |epoch, f: Option<f64>| EpochRecord {
        epoch,
        train_loss: 1.0,
        val_srcc: f,
        val_plcc: f,
        val_final: f,
    };
    assert_eq!(
        best_epoch(&[rec(1, Some(0.2)), rec(2, Some(0.5)), rec(3, Some(0.4))]),
        2
    );
    assert_eq!(best_epoch(&[rec(1, Some(0.5)), rec(2, Some(0.5))]), 1);
    assert_eq!(
        best_epoch(&[rec(1, None), rec(2, Some(0.1)), rec(3, None)]),
        2
    );
    assert_eq!(best_epoch(&[rec(1, None), rec(2, None)]), 2);
}

#[test]
fn history_csv_leaves_missing_scores_empty() {
    let h = history_csv(&[EpochRecord {
        epoch: 1,
        train_loss: 0.5,
        val_srcc: None,
        val_plcc: None,
        val_final: None,
    }]);
    assert_eq!(h.lines().nth(1).unwrap(), "1,0.5,,,");
}

#[test]
fn predictions_are_on_the_mos_scale() {
    let (train_set, _) = data(6, 0, 16);
    for mode in LabelMode::ALL {
        let cfg = tiny(mode);
        let p = predict(&model_for(&cfg, 1), &train_set, mode).unwrap();
        assert_eq!(p.len(), 6);
        assert!(p.values().iter().all(|v| (1.0..=5.0).contains(v)));
    }
}
