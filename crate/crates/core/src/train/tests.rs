use super::*;
use crate::data::{Pair, SyntheticTaskSpec, Split, Task};
use crate::model::{ModelConfig, BOS, EOS};
use crate::peft::{apply_method, PeftMethod};

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        vocab_size: 24,
        max_positions: 24,
        dropout: 0.0,
        seed,
        ..ModelConfig::default()
    }
}

fn copy_spec(vocab: usize, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        task: Task::Copy,
        vocab_size: vocab,
        min_len: 2,
        max_len: 6,
        seed,
        ..SyntheticTaskSpec::default()
    }
}

fn fast_config() -> TrainConfig {
    TrainConfig {
        max_lr: 3e-3,
        warmup_steps: 10,
        total_steps: 1000,
        label_smoothing: 0.1,
        dropout: 0.0,
        max_tokens_per_batch: 64,
        update_frequency: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 0.0);
    assert_eq!(lr_at(2500, &cfg), 1e-4);
    assert!((lr_at(1250, &cfg) - 5e-5).abs() < 1e-18);
    assert_eq!(lr_at(5000, &cfg), 0.0);
    assert_eq!(lr_at(9000, &cfg), 0.0);
    let paper = TrainConfig::paper_scale();
    let expect = (100_000.0 - 51_250.0) / 97_500.0 * 1e-4;
    assert!((lr_at(51_250, &paper) - expect).abs() < 1e-18);
    assert!((lr_at(51_250, &paper) - 5e-5).abs() < 1e-18);
}

#[test]
fn lr_schedule_is_continuous_at_warmup() {
    for (w, t) in [(1, 2), (10, 100), (2500, 5000), (7, 7)] {
        let cfg = TrainConfig {
            warmup_steps: w,
            total_steps: t,
            ..TrainConfig::default()
        };
        let near = lr_at(w - 1, &cfg);
        assert!((lr_at(w, &cfg) - cfg.max_lr).abs() < 1e-18);
        assert!((cfg.max_lr - near) <= cfg.max_lr / w as f64 + 1e-18);
        if t > w {
            assert!((cfg.max_lr - lr_at(w + 1, &cfg)) <= cfg.max_lr / (t - w) as f64 + 1e-18);
            assert_eq!(lr_at(t, &cfg), 0.0);
        }
    }
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig {
            warmup_steps: 11,
            total_steps: 10,
            ..TrainConfig::default()
        },
        TrainConfig {
            patience_epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            update_frequency: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            label_smoothing: 1.0,
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
    TrainConfig::default().validate().unwrap();
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
}

#[test]
fn perplexity_of_uniform_predictor() {
    let config = ModelConfig {
        vocab_size: 4,
        ..tiny_config(3)
    };
    let mut model = Seq2Seq::build(&config).unwrap();
    let w = model.store_mut().get_mut("output_projection.weight").unwrap();
    w.value = Tensor::zeros(w.value.shape());
    let data = ParallelCorpus {
        pairs: vec![Pair::new(vec![3, 3], &[3]), Pair::new(vec![3], &[3, 3, 3])],
        provenance: String::new(),
    };
    let ppl = perplexity(&model, &data, 64, Precision::F64).unwrap();
    assert!((ppl - 4.0).abs() < 1e-12, "{ppl}");
    let empty = ParallelCorpus {
        pairs: Vec::new(),
        provenance: String::new(),
    };
    assert!(matches!(perplexity(&model, &empty, 64, Precision::F64), Err(Error::EmptyDataset(_))));
}

#[test]
fn perplexity_is_at_least_one() {
    let data = copy_spec(24, 5).generate_split(Split::Dev, 20).unwrap();
    for seed in 0..5 {
        let model = Seq2Seq::build(&tiny_config(seed)).unwrap();
        assert!(perplexity(&model, &data, 64, Precision::F64).unwrap() >= 1.0);
    }
}

#[test]
fn accumulation_matches_concatenated_batch() {
    let data = copy_spec(24, 7).generate_split(Split::Train, 6).unwrap();
    let model = Seq2Seq::build(&tiny_config(1)).unwrap();
    let cfg = TrainConfig {
        warmup_steps: 0,
        max_lr: 1e-2,
        ..fast_config()
    };
    let micro = vec![
        make_batch(&data.pairs, &[0, 1]).unwrap(),
        make_batch(&data.pairs, &[2]).unwrap(),
        make_batch(&data.pairs, &[3, 4, 5]).unwrap(),
    ];
    let whole = vec![make_batch(&data.pairs, &[0, 1, 2, 3, 4, 5]).unwrap()];

    let mut a = Trainer::new(&model, cfg.clone()).unwrap();
    let mut b = Trainer::new(&model, cfg).unwrap();
    let ga = a.accumulate(&model, &micro).unwrap();
    let gb = b.accumulate(&model, &whole).unwrap();
    assert_eq!(ga.tokens, gb.tokens);
    assert!((ga.loss - gb.loss).abs() < 1e-10);
    let max_diff = ga
        .values
        .iter()
        .flatten()
        .zip(gb.values.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(max_diff < 1e-10, "{max_diff}");

    let (mut ma, mut mb) = (model.clone(), model.clone());
    a.step(&mut ma, &micro).unwrap();
    b.step(&mut mb, &whole).unwrap();
    for ((_, pa), (_, pb)) in ma.store().iter().zip(mb.store().iter()) {
        assert!(pa.value.max_abs_diff(&pb.value) < 1e-10);
    }
}

#[test]
fn frozen_parameters_stay_bit_identical() {
    let data = copy_spec(24, 11).generate_split(Split::Train, 40).unwrap();
    let plan = plan_batches(&data.pairs, 48, 0).unwrap();
    let batches: Vec<Batch> = plan.iter().map(|i| make_batch(&data.pairs, i).unwrap()).collect();
    for method in PeftMethod::representatives(2, 2) {
        let mut model = Seq2Seq::build(&tiny_config(2)).unwrap();
        apply_method(&mut model, method, 9).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            dropout: 0.1,
            ..fast_config()
        };
        model.set_dropout(cfg.dropout).unwrap();
        let mut trainer = Trainer::new(&model, cfg).unwrap();
        assert_eq!(trainer.optimizer().params().len(), model.store().trainable_names().len());
        for s in 0..100 {
            trainer.step(&mut model, &batches[s % batches.len()..][..1]).unwrap();
        }
        let mut changed = 0;
        for ((name, old), (_, new)) in before.store().iter().zip(model.store().iter()) {
            if old.trainable {
                changed += usize::from(!old.value.bit_eq(&new.value));
            } else {
                assert!(old.value.bit_eq(&new.value), "{method}: frozen {name} moved");
            }
        }
        assert_eq!(changed > 0, method != PeftMethod::NoFt, "{method}");
    }
}

#[test]
fn noft_training_is_a_no_op() {
    let spec = copy_spec(24, 4);
    let (tr, dev) = (
        spec.generate_split(Split::Train, 20).unwrap(),
        spec.generate_split(Split::Dev, 5).unwrap(),
    );
    let mut model = Seq2Seq::build(&tiny_config(0)).unwrap();
    apply_method(&mut model, PeftMethod::NoFt, 0).unwrap();
    let before = model.clone();
    let h = train(&mut model, &tr, &dev, &fast_config()).unwrap();
    assert_eq!(h.steps, 0);
    assert!(h.epochs.is_empty());
    assert_eq!(h.stop, StopReason::NoTrainableParameters);
    assert!(model.store().bit_eq(before.store()));
    assert_eq!(h.to_csv(), "epoch,step,train_loss,dev_ppl,lr\n");

    let mut frozen = Seq2Seq::build(&tiny_config(0)).unwrap();
    frozen.store_mut().set_all_trainable(false);
    assert!(matches!(train(&mut frozen, &tr, &dev, &fast_config()), Err(Error::EmptyMask(_))));
}

#[test]
fn empty_and_non_finite_inputs() {
    let spec = copy_spec(24, 4);
    let tr = spec.generate_split(Split::Train, 10).unwrap();
    let empty = ParallelCorpus {
        pairs: Vec::new(),
        provenance: String::new(),
    };
    let mut model = Seq2Seq::build(&tiny_config(0)).unwrap();
    assert!(matches!(train(&mut model, &empty, &tr, &fast_config()), Err(Error::EmptyDataset(_))));
    assert!(matches!(train(&mut model, &tr, &empty, &fast_config()), Err(Error::EmptyDataset(_))));

    let mut trainer = Trainer::new(&model, fast_config()).unwrap();
    model.store_mut().get_mut("decoder.final_ln.beta").unwrap().value.data_mut()[0] = f64::NAN;
    let batch = make_batch(&tr.pairs, &[0, 1]).unwrap();
    assert!(matches!(
        trainer.step(&mut model, &[batch]),
        Err(Error::NonFiniteLoss { step: 0, .. })
    ));
}

#[test]
fn early_stopping_restores_best() {
    let spec = copy_spec(24, 6);
    let (tr, dev) = (
        spec.generate_split(Split::Train, 30).unwrap(),
        spec.generate_split(Split::Dev, 10).unwrap(),
    );
    // a zero learning rate can never improve on the initial model
    let mut model = Seq2Seq::build(&tiny_config(0)).unwrap();
    let before = model.clone();
    let cfg = TrainConfig {
        max_lr: 0.0,
        patience_epochs: 3,
        ..fast_config()
    };
    let h = train(&mut model, &tr, &dev, &cfg).unwrap();
    assert_eq!(h.stop, StopReason::Patience);
    assert_eq!(h.epochs.len(), 3);
    assert_eq!(h.best_epoch, None);
    assert!(model.store().bit_eq(before.store()));

    let cfg = TrainConfig {
        max_epochs: Some(4),
        patience_epochs: 1,
        ..fast_config()
    };
    let h = train(&mut model, &tr, &dev, &cfg).unwrap();
    let best = h.best_epoch.unwrap();
    assert_eq!(h.best_dev_ppl, h.epochs[best - 1].dev_ppl);
    assert_eq!(perplexity(&model, &dev, cfg.max_tokens_per_batch, Precision::F64).unwrap(), h.best_dev_ppl);
    let csv = h.to_csv();
    assert_eq!(csv.lines().count(), h.epochs.len() + 1);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,"));
}

#[test]
fn total_steps_cap() {
    let spec = copy_spec(24, 8);
    let (tr, dev) = (
        spec.generate_split(Split::Train, 40).unwrap(),
        spec.generate_split(Split::Dev, 5).unwrap(),
    );
    let mut model = Seq2Seq::build(&tiny_config(0)).unwrap();
    let cfg = TrainConfig {
        total_steps: 7,
        warmup_steps: 2,
        ..fast_config()
    };
    let h = train(&mut model, &tr, &dev, &cfg).unwrap();
    assert_eq!(h.steps, 7);
    assert_eq!(h.stop, StopReason::TotalSteps);
    assert_eq!(h.epochs.last().unwrap().step, 7);
}

#[test]
fn copy_task_converges() {
    let spec = SyntheticTaskSpec {
        vocab_size: 32,
        min_len: 3,
        max_len: 8,
        ..copy_spec(32, 21)
    };
    let (tr, dev, test) = (
        spec.generate_split(Split::Train, 2000).unwrap(),
        spec.generate_split(Split::Dev, 100).unwrap(),
        spec.generate_split(Split::Test, 20).unwrap(),
    );
    let config = ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model: 32,
        heads: 4,
        ffn_dim: 64,
        vocab_size: 32,
        max_positions: 16,
        ..ModelConfig::default()
    };
    let mut model = Seq2Seq::build(&config).unwrap();
    let cfg = TrainConfig {
        max_lr: 3e-3,
        warmup_steps: 100,
        total_steps: 5000,
        label_smoothing: 0.1,
        dropout: 0.0,
        max_tokens_per_batch: 256,
        update_frequency: 1,
        patience_epochs: 2,
        max_epochs: Some(6),
        ..TrainConfig::default()
    };
    let h = train(&mut model, &tr, &dev, &cfg).unwrap();
    assert!(h.best_dev_ppl < 1.5, "{:?}", h.epochs);
    let mut exact = 0;
    for p in &test.pairs {
        let out = model.greedy_decode(&p.src, 12).unwrap();
        let want = p.tgt[1..].to_vec();
        assert_eq!(p.tgt[0], BOS);
        assert_eq!(*want.last().unwrap(), EOS);
        exact += usize::from(out == want);
    }
    assert!(exact >= 18, "{exact}/20 exact copies");
}

#[test]
fn copy_loss_decreases_across_seeds() {
    let mut monotone = 0;
    for seed in 0..10 {
        let spec = copy_spec(16, seed);
        let (tr, dev) = (
            spec.generate_split(Split::Train, 150).unwrap(),
            spec.generate_split(Split::Dev, 20).unwrap(),
        );
        let mut model = Seq2Seq::build(&ModelConfig {
            vocab_size: 16,
            ..tiny_config(seed)
        })
        .unwrap();
        let cfg = TrainConfig {
            max_lr: 2e-3,
            warmup_steps: 5,
            max_epochs: Some(6),
            patience_epochs: 6,
            seed,
            ..fast_config()
        };
        let h = train(&mut model, &tr, &dev, &cfg).unwrap();
        let losses: Vec<f64> = h.epochs.iter().filter(|e| e.step > cfg.warmup_steps).map(|e| e.train_loss).collect();
        monotone += usize::from(losses.windows(2).all(|w| w[1] <= w[0]));
    }
    assert!(monotone >= 9, "{monotone}/10 runs with non-increasing loss");
}
