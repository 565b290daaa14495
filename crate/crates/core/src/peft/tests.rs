use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Precision;
use crate::budget;
use crate::model::{Batch, Mode, ModelConfig, ParamGroup, Seq2Seq, BOS, EOS};

fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 1,
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        vocab_size: 16,
        max_positions: 16,
        dropout: 0.0,
        seed,
        ..ModelConfig::default()
    }
}

const ALL: [&str; 7] = [
    "full",
    "noft",
    "adapter:4",
    "prefix:3",
    "bitfit:lnbias",
    "bitfit:lnweights",
    "xattn",
];

#[test]
fn method_strings_round_trip() {
    for s in ALL {
        let m: PeftMethod = s.parse().unwrap();
        assert_eq!(m.to_string(), s);
    }
    assert_eq!("adapter:1024".parse::<PeftMethod>().unwrap(), PeftMethod::Adapter { bottleneck: 1024 });
}

#[test]
fn malformed_methods_list_the_grammar() {
    for bad in ["adapter:x", "adapter:0", "prefix:", "bitfit:gamma", "lora", "", "Adapter:5", "full:1"] {
        let err = bad.parse::<PeftMethod>().unwrap_err();
        assert!(matches!(err, Error::MethodSyntax { .. }), "{bad}");
        assert!(err.to_string().contains(crate::error::METHOD_GRAMMAR), "{err}");
    }
}

#[test]
fn bounds_noft_and_full() {
    let mut m = Seq2Seq::build(&small(0)).unwrap();
    apply_method(&mut m, PeftMethod::NoFt, 0).unwrap();
    assert_eq!(m.store().trainable_count(), 0);
    let mut m = Seq2Seq::build(&small(0)).unwrap();
    apply_method(&mut m, PeftMethod::FullFt, 0).unwrap();
    assert_eq!(m.store().trainable_count(), m.store().total_count());
}

#[test]
fn double_instrumentation_is_an_error() {
    let mut m = Seq2Seq::build(&small(0)).unwrap();
    apply_method(&mut m, "adapter:2".parse().unwrap(), 0).unwrap();
    let err = apply_method(&mut m, "prefix:2".parse().unwrap(), 0).unwrap_err();
    assert!(matches!(err, Error::AlreadyInstrumented(ref s) if s == "adapter:2"));
}

#[test]
fn fresh_adapter_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = AdapterModule::new(6, 3, &mut rng);
    let h = Tensor::uniform(&[5, 6], 2.0, &mut rng);
    let out = a.forward(&h, Activation::Relu, 1e-5).unwrap();
    assert!(out.bit_eq(&h));
    assert_eq!(a.param_count(), 2 * 6 + 6 * 3 + 3 + 3 * 6 + 6);
}

#[test]
fn adapter_hand_evaluation() {
    // d = 1, b = 1: a single-element row normalizes to 0, so LN(h) = β = 0.
    let a = AdapterModule {
        ln_gamma: Tensor::vector(vec![1.0]),
        ln_beta: Tensor::vector(vec![0.0]),
        w_down: Tensor::from_rows(&[vec![1.0]]).unwrap(),
        b_down: Tensor::vector(vec![0.0]),
        w_up: Tensor::from_rows(&[vec![1.0]]).unwrap(),
        b_up: Tensor::vector(vec![0.0]),
    };
    let h = Tensor::from_rows(&[vec![2.0]]).unwrap();
    let out = a.forward(&h, Activation::Relu, 1e-5).unwrap();
    assert_eq!(out.data(), &[2.0]);
}

#[test]
fn adapter_residual_ignores_constant_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut a = AdapterModule::new(4, 3, &mut rng);
    a.w_up = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    a.b_down = Tensor::uniform(&[3], 0.5, &mut rng);
    // rows with identical per-row variance, second is the first plus 3
    let h = Tensor::from_rows(&[vec![0.5, -1.0, 2.0, 0.25], vec![3.5, 2.0, 5.0, 3.25]]).unwrap();
    let out = a.forward(&h, Activation::Relu, 1e-5).unwrap();
    let delta: Vec<f64> = out.data().iter().zip(h.data()).map(|(o, x)| o - x).collect();
    for j in 0..4 {
        assert!((delta[j] - delta[4 + j]).abs() < 1e-12);
    }
}

#[test]
fn adapter_gradients_reach_input_and_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut a = AdapterModule::new(4, 2, &mut rng);
    a.w_up = Tensor::uniform(&[2, 4], 1.0, &mut rng);
    let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let f = |t: &mut Tape, h: Var| -> Result<Var> {
        let vars = a.bind(t, false);
        let y = adapter_forward(t, &vars, h, Activation::Gelu, 1e-5)?;
        let y2 = t.mul(y, y)?;
        Ok(t.sum(y2))
    };
    assert!(crate::autodiff::grad_check(f, &x, 1e-5).unwrap() < 1e-6);
    let mut tape = Tape::new();
    let vars = a.bind(&mut tape, true);
    let h = tape.constant(x.clone());
    let y = adapter_forward(&mut tape, &vars, h, Activation::Relu, 1e-5).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    for v in [vars.ln_gamma, vars.w_down, vars.w_up, vars.b_up] {
        assert!(tape.grad(v).is_some());
    }
}

#[test]
fn prefix_inject_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let prefix = tape.constant(Tensor::uniform(&[5, 3], 1.0, &mut rng));
    let states = tape.constant(Tensor::uniform(&[7, 3], 1.0, &mut rng));
    let grown = prefix_inject(&mut tape, prefix, PrefixStage::Embeddings, states).unwrap();
    assert_eq!(tape.shape(grown), &[12, 3]);

    let other = tape.constant(Tensor::uniform(&[5, 3], 1.0, &mut rng));
    let over = prefix_inject(&mut tape, other, PrefixStage::Layer(1), grown).unwrap();
    assert_eq!(tape.shape(over), &[12, 3]);
    let (g, o) = (tape.value(grown).clone(), tape.value(over).clone());
    for r in 5..12 {
        assert_eq!(g.row(r), o.row(r));
    }
    for r in 0..5 {
        assert_eq!(o.row(r), tape.value(other).row(r));
    }
    let short = tape.constant(Tensor::zeros(&[4, 3]));
    assert!(prefix_inject(&mut tape, other, PrefixStage::Layer(1), short).is_err());
    let wide = tape.constant(Tensor::zeros(&[7, 4]));
    assert!(prefix_inject(&mut tape, other, PrefixStage::Embeddings, wide).is_err());
}

#[test]
fn prefix_bank_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bank = PrefixBank::new(3, 2, 4, 8, &mut rng);
    assert_eq!(bank.len(), 5);
    assert_eq!(bank.param_count(), 4 * 8 * 5);
    let c = small(0);
    let mut m = Seq2Seq::build(&c).unwrap();
    apply_method(&mut m, "prefix:4".parse().unwrap(), 0).unwrap();
    assert_eq!(m.store().trainable_count(), (4 * c.d_model * c.total_layers()) as u64);
    for (name, p) in m.store().iter() {
        assert_eq!(p.trainable, name.ends_with(".prefix"), "{name}");
    }
}

#[test]
fn prefix_rows_carry_no_loss() {
    // Prefix rows are dropped before the output projection, so the logits
    // (and the loss positions) are exactly the real target positions.
    let mut m = Seq2Seq::build(&small(1)).unwrap();
    apply_method(&mut m, "prefix:6".parse().unwrap(), 3).unwrap();
    let batch = Batch::from_pairs([(&[4usize, 5, 6][..], &[BOS, 7, 8, EOS][..])]).unwrap();
    let mut tape = Tape::no_grad(Precision::F64);
    let (logits, _) = m.logits_on_tape(&mut tape, &batch, Mode::Eval).unwrap();
    assert_eq!(tape.shape(logits), &[3, 16]);
    assert_eq!(batch.target_tokens(), 3);
}

#[test]
fn bitfit_masks() {
    let mut lnw = Seq2Seq::build(&small(0)).unwrap();
    apply_method(&mut lnw, PeftMethod::BitFit(BitFitVariant::LnWeights), 0).unwrap();
    let mut lnb = Seq2Seq::build(&small(0)).unwrap();
    apply_method(&mut lnb, PeftMethod::BitFit(BitFitVariant::LnBias), 0).unwrap();
    for (name, p) in lnw.store().iter() {
        if name.ends_with(".beta") {
            assert!(!p.trainable, "{name}");
        }
        if name.ends_with(".gamma") || name.ends_with(".bias") {
            assert!(p.trainable, "{name}");
        }
        if name.ends_with(".weight") {
            assert!(!p.trainable, "{name}");
        }
    }
    for (name, p) in lnb.store().iter() {
        assert_eq!(p.trainable, name.ends_with(".beta") || name.ends_with(".bias"), "{name}");
    }
    assert_eq!(lnw.store().trainable_count(), lnb.store().trainable_count());
}

#[test]
fn xattention_mask() {
    let c = ModelConfig::default();
    let mut m = Seq2Seq::build(&c).unwrap();
    apply_method(&mut m, PeftMethod::XAttention, 0).unwrap();
    assert_eq!(m.store().trainable_count(), 33_536);
    for name in m.store().trainable_names() {
        assert!(name.starts_with("decoder."), "{name}");
        assert!(name.contains("cross_attn") || name.contains(".ln2."), "{name}");
    }
    for (name, p) in m.store().iter() {
        if name.starts_with("encoder.") {
            assert!(!p.trainable);
        }
    }
}

#[test]
fn adapter_identity_at_init_through_the_model() {
    let c = small(2);
    let base = Seq2Seq::build(&c).unwrap();
    let mut inst = base.clone();
    apply_method(&mut inst, "adapter:5".parse().unwrap(), 9).unwrap();
    let src = [4, 5, 6, 7];
    let tgt = [BOS, 8, 9];
    assert!(base.logits(&src, &tgt).unwrap().bit_eq(&inst.logits(&src, &tgt).unwrap()));
}

#[test]
fn absorb_examples() {
    let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let db = absorb_ln_bias(&w, &Tensor::vector(vec![0.1, -0.2])).unwrap();
    assert!((db.data()[0] + 0.3).abs() < 1e-15);
    assert!((db.data()[1] + 0.5).abs() < 1e-15);
    let zero = absorb_ln_bias(&w, &Tensor::vector(vec![0.0, 0.0])).unwrap();
    assert_eq!(zero.data(), &[0.0, 0.0]);
    assert!(absorb_ln_bias(&w, &Tensor::vector(vec![1.0, 2.0, 3.0])).is_err());
}

/// `W·LN_{β+δβ}(x) + b` against `W·LN_β(x) + (b + W·δβ)` on random draws.
fn beta_absorption_error(d: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let d_out = rng.gen_range(1..=d + 2);
        let w = Tensor::uniform(&[d_out, d], 1.0, &mut rng);
        let b: Vec<f64> = (0..d_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let delta = Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let shifted: Vec<f64> = beta.iter().zip(delta.data()).map(|(a, b)| a + b).collect();
        let lhs = ln_linear(&x, &gamma, &shifted, &w, &b, 1e-5);
        let db = absorb_ln_bias(&w, &delta).unwrap();
        let b2: Vec<f64> = b.iter().zip(db.data()).map(|(a, c)| a + c).collect();
        let rhs = ln_linear(&x, &gamma, &beta, &w, &b2, 1e-5);
        for (l, r) in lhs.iter().zip(&rhs) {
            worst = worst.max((l - r).abs());
        }
    }
    worst
}

#[test]
fn beta_updates_are_absorbable() {
    for d in [2, 8, 64] {
        assert!(beta_absorption_error(d, 100, d as u64) < 1e-10);
    }
}

#[test]
fn gamma_scaling_is_not_absorbable() {
    // W = I (d = 2), γ = 1, β = 0. Doubling γ changes the output by z (the
    // normalized input), so two inputs with different z need different bias
    // shifts; one shared bias update cannot reproduce both.
    let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = [0.0, 0.0];
    let (g1, g2, beta) = ([1.0, 1.0], [2.0, 2.0], [0.0, 0.0]);
    let x1 = [0.0, 2.0]; // z ≈ (-1, 1)
    let x2 = [2.0, 0.0]; // z ≈ (1, -1)
    let shift = |x: &[f64]| -> Vec<f64> {
        let new = ln_linear(x, &g2, &beta, &w, &b, 1e-5);
        let old = ln_linear(x, &g1, &beta, &w, &b, 1e-5);
        new.iter().zip(&old).map(|(a, c)| a - c).collect()
    };
    let (s1, s2) = (shift(&x1), shift(&x2));
    let gap = s1.iter().zip(&s2).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
    assert!(gap > 1.0, "required bias shifts {s1:?} vs {s2:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn closed_form_counts_match_the_mask(
        enc in 1usize..3,
        dec in 1usize..3,
        heads in 1usize..3,
        head_dim in 1usize..4,
        ffn in 1usize..10,
        size in 1usize..6,
        which in 0usize..7,
        tie in any::<bool>(),
    ) {
        let c = ModelConfig {
            enc_layers: enc,
            dec_layers: dec,
            d_model: heads * head_dim,
            heads,
            ffn_dim: ffn,
            vocab_size: 9,
            max_positions: 6,
            tie_output: tie,
            ..ModelConfig::default()
        };
        let method: PeftMethod = ALL[which]
            .replace(":4", &format!(":{size}"))
            .replace(":3", &format!(":{size}"))
            .parse()
            .unwrap();
        let mut m = Seq2Seq::build(&c).unwrap();
        apply_method(&mut m, method, 0).unwrap();
        let report = budget::count_trainable(&c, method);
        prop_assert_eq!(m.store().trainable_count(), report.trainable);
        prop_assert_eq!(m.store().total_count(), report.total);
        prop_assert_eq!(m.store().trainable_breakdown(), report.breakdown.clone());
        let d = c.d_model as u64;
        let layers = c.total_layers() as u64;
        let s = size as u64;
        match method {
            PeftMethod::Adapter { .. } => {
                prop_assert_eq!(report.trainable, layers * (2 * d + d * s + s + s * d + d));
                prop_assert_eq!(report.breakdown.get(&ParamGroup::Adapter).copied(), Some(report.trainable));
            }
            PeftMethod::Prefix { .. } => prop_assert_eq!(report.trainable, s * d * layers),
            _ => {}
        }
    }
}
