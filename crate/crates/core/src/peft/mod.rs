//! Parameter-efficient fine-tuning as model surgery plus trainable masks.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Seq2Seq, Stack};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BitFitVariant {
    /// Non-LN biases plus every LN β.
    LnBias,
    /// Non-LN biases plus every LN γ.
    LnWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeftMethod {
    FullFt,
    NoFt,
    Adapter { bottleneck: usize },
    Prefix { length: usize },
    BitFit(BitFitVariant),
    XAttention,
}

impl PeftMethod {
    pub const GRAMMAR: &'static str = crate::error::METHOD_GRAMMAR;

    /// Every regime of the method grammar, with the given sizes.
    pub fn representatives(bottleneck: usize, length: usize) -> [PeftMethod; 7] {
        [
            PeftMethod::FullFt,
            PeftMethod::NoFt,
            PeftMethod::Adapter { bottleneck },
            PeftMethod::Prefix { length },
            PeftMethod::BitFit(BitFitVariant::LnBias),
            PeftMethod::BitFit(BitFitVariant::LnWeights),
            PeftMethod::XAttention,
        ]
    }

    /// Family label used in reports and plot legends.
    pub fn family(&self) -> &'static str {
        match self {
            PeftMethod::FullFt => "full",
            PeftMethod::NoFt => "noft",
            PeftMethod::Adapter { .. } => "adapter",
            PeftMethod::Prefix { .. } => "prefix",
            PeftMethod::BitFit(BitFitVariant::LnBias) => "bitfit:lnbias",
            PeftMethod::BitFit(BitFitVariant::LnWeights) => "bitfit:lnweights",
            PeftMethod::XAttention => "xattn",
        }
    }
}

impl fmt::Display for PeftMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeftMethod::Adapter { bottleneck } => write!(f, "adapter:{bottleneck}"),
            PeftMethod::Prefix { length } => write!(f, "prefix:{length}"),
            other => f.write_str(other.family()),
        }
    }
}

impl FromStr for PeftMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = |reason: &str| Error::MethodSyntax {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let size = |arg: &str| -> Result<usize> {
            match arg.parse::<usize>() {
                Ok(0) => Err(err("size must be at least 1")),
                Ok(n) => Ok(n),
                Err(_) => Err(err("size must be a positive integer")),
            }
        };
        match s.split_once(':') {
            None => match s {
                "full" => Ok(PeftMethod::FullFt),
                "noft" => Ok(PeftMethod::NoFt),
                "xattn" => Ok(PeftMethod::XAttention),
                _ => Err(err("unknown method")),
            },
            Some(("adapter", arg)) => Ok(PeftMethod::Adapter { bottleneck: size(arg)? }),
            Some(("prefix", arg)) => Ok(PeftMethod::Prefix { length: size(arg)? }),
            Some(("bitfit", "lnbias")) => Ok(PeftMethod::BitFit(BitFitVariant::LnBias)),
            Some(("bitfit", "lnweights")) => Ok(PeftMethod::BitFit(BitFitVariant::LnWeights)),
            Some(("bitfit", _)) => Err(err("bitfit variant must be lnbias or lnweights")),
            Some(_) => Err(err("unknown method")),
        }
    }
}

impl Serialize for PeftMethod {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PeftMethod {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn name_parts(name: &str) -> Vec<&str> {
    name.split('.').collect()
}

/// Whether BitFit marks `name` trainable for `variant`.
pub fn bitfit_selects(name: &str, variant: BitFitVariant) -> bool {
    let parts = name_parts(name);
    if parts.contains(&"adapter") || parts.contains(&"prefix") {
        return false;
    }
    match parts.last().copied() {
        Some("bias") => true,
        Some("beta") => variant == BitFitVariant::LnBias,
        Some("gamma") => variant == BitFitVariant::LnWeights,
        _ => false,
    }
}

/// Whether X-attention tuning marks `name` trainable: the cross-attention
/// projections and the LN in front of each cross-attention block.
pub fn xattention_selects(name: &str) -> bool {
    let parts = name_parts(name);
    parts.first() == Some(&"decoder") && (parts.contains(&"cross_attn") || parts.get(2) == Some(&"ln2"))
}

/// Marks the BitFit subset trainable and freezes everything else.
pub fn select_bitfit(model: &mut Seq2Seq, variant: BitFitVariant) {
    select_by(model, |n| bitfit_selects(n, variant));
}

/// Marks the X-attention subset trainable and freezes everything else.
pub fn select_xattention(model: &mut Seq2Seq) {
    select_by(model, xattention_selects);
}

fn select_by(model: &mut Seq2Seq, pred: impl Fn(&str) -> bool) {
    let store = model.store_mut();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        store.set_trainable(&name, pred(&name)).expect("name comes from the store");
    }
}

/// Instruments `model` with `method`: registers new parameters (adapters,
/// prefixes) drawn from `seed` and sets every trainable flag.
pub fn apply_method(model: &mut Seq2Seq, method: PeftMethod, seed: u64) -> Result<()> {
    if let Some(existing) = model.method() {
        return Err(Error::AlreadyInstrumented(existing.to_string()));
    }
    let cfg = model.config().clone();
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stacks = [(Stack::Encoder, cfg.enc_layers), (Stack::Decoder, cfg.dec_layers)];
    match method {
        PeftMethod::FullFt => model.store_mut().set_all_trainable(true),
        PeftMethod::NoFt => model.store_mut().set_all_trainable(false),
        PeftMethod::Adapter { bottleneck: b } => {
            model.store_mut().set_all_trainable(false);
            for (stack, n) in stacks {
                for i in 0..n {
                    let base = format!("{}.adapter", stack.layer_name(i));
                    let m = AdapterModule::new(d, b, &mut rng);
                    let store = model.store_mut();
                    store.insert(format!("{base}.ln.gamma"), m.ln_gamma, true)?;
                    store.insert(format!("{base}.ln.beta"), m.ln_beta, true)?;
                    store.insert(format!("{base}.down.weight"), m.w_down, true)?;
                    store.insert(format!("{base}.down.bias"), m.b_down, true)?;
                    store.insert(format!("{base}.up.weight"), m.w_up, true)?;
                    store.insert(format!("{base}.up.bias"), m.b_up, true)?;
                }
            }
        }
        PeftMethod::Prefix { length: p } => {
            model.store_mut().set_all_trainable(false);
            let bank = PrefixBank::new(cfg.enc_layers, cfg.dec_layers, p, d, &mut rng);
            for (stack, entries) in [(Stack::Encoder, bank.encoder), (Stack::Decoder, bank.decoder)] {
                for (i, v) in entries.into_iter().enumerate() {
                    model
                        .store_mut()
                        .insert(format!("{}.prefix", stack.layer_name(i)), v, true)?;
                }
            }
        }
        PeftMethod::BitFit(variant) => select_bitfit(model, variant),
        PeftMethod::XAttention => select_xattention(model),
    }
    if method != PeftMethod::NoFt && model.store().trainable_count() == 0 {
        return Err(Error::EmptyMask(method.to_string()));
    }
    model.set_method(method)
}

/// A bottleneck adapter `h + W_upᵀ f(W_downᵀ LN(h) + b_down) + b_up`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModule {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    /// `[d, b]`
    pub w_down: Tensor,
    pub b_down: Tensor,
    /// `[b, d]`
    pub w_up: Tensor,
    pub b_up: Tensor,
}

/// Tape handles of an adapter's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

impl AdapterModule {
    /// Xavier `W_down`, zero `W_up` and biases, unit γ: the identity map.
    pub fn new<R: rand::Rng + ?Sized>(d: usize, b: usize, rng: &mut R) -> Self {
        Self {
            ln_gamma: Tensor::ones(&[d]),
            ln_beta: Tensor::zeros(&[d]),
            w_down: Tensor::xavier_uniform(d, b, rng),
            b_down: Tensor::zeros(&[b]),
            w_up: Tensor::zeros(&[b, d]),
            b_up: Tensor::zeros(&[d]),
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.b_down.numel()
    }

    pub fn param_count(&self) -> usize {
        [&self.ln_gamma, &self.ln_beta, &self.w_down, &self.b_down, &self.w_up, &self.b_up]
            .iter()
            .map(|t| t.numel())
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        AdapterVars {
            ln_gamma: tape.leaf(self.ln_gamma.clone(), trainable),
            ln_beta: tape.leaf(self.ln_beta.clone(), trainable),
            w_down: tape.leaf(self.w_down.clone(), trainable),
            b_down: tape.leaf(self.b_down.clone(), trainable),
            w_up: tape.leaf(self.w_up.clone(), trainable),
            b_up: tape.leaf(self.b_up.clone(), trainable),
        }
    }

    /// Row-wise adapter output for `h: [L, d]`.
    pub fn forward(&self, h: &Tensor, act: Activation, eps: f64) -> Result<Tensor> {
        let mut tape = Tape::no_grad(crate::autodiff::Precision::F64);
        let vars = self.bind(&mut tape, false);
        let hv = tape.constant(h.clone());
        let out = adapter_forward(&mut tape, &vars, hv, act, eps)?;
        Ok(tape.value(out).clone())
    }
}

/// Records `A(h) + h` on the tape.
pub fn adapter_forward(tape: &mut Tape, a: &AdapterVars, h: Var, act: Activation, eps: f64) -> Result<Var> {
    let z = tape.layer_norm(h, a.ln_gamma, a.ln_beta, eps)?;
    let z = tape.matmul(z, a.w_down)?;
    let z = tape.add_bias(z, a.b_down)?;
    let z = tape.activation(z, act);
    let z = tape.matmul(z, a.w_up)?;
    let z = tape.add_bias(z, a.b_up)?;
    tape.add(z, h)
}

/// Per-layer prefix vectors; the first entry of each stack is also the
/// embedding-level prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixBank {
    pub encoder: Vec<Tensor>,
    pub decoder: Vec<Tensor>,
}

impl PrefixBank {
    pub fn new<R: rand::Rng + ?Sized>(enc_layers: usize, dec_layers: usize, p: usize, d: usize, rng: &mut R) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| Tensor::xavier_uniform(p, d, rng)).collect();
        Self {
            encoder: draw(enc_layers),
            decoder: draw(dec_layers),
        }
    }

    pub fn len(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param_count(&self) -> usize {
        self.encoder.iter().chain(&self.decoder).map(Tensor::numel).sum()
    }
}

/// Where a prefix enters a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefixStage {
    /// Before the first layer: prefix rows are prepended to the embeddings.
    Embeddings,
    /// Before a later layer: the leading prefix rows are overwritten.
    Layer(usize),
}

/// Injects `prefix: [p, d]` into `states: [L, d]` or `[B, L, d]`.
pub fn prefix_inject(tape: &mut Tape, prefix: Var, stage: PrefixStage, states: Var) -> Result<Var> {
    let p = tape.shape(prefix)[0];
    let shape = tape.shape(states).to_vec();
    let rows = shape[shape.len().saturating_sub(2)];
    match stage {
        PrefixStage::Embeddings => tape.prepend_rows(prefix, states),
        PrefixStage::Layer(_) if rows <= p => Err(Error::InvalidArgument(format!(
            "layer-stage prefix injection expects more than {p} rows, got {rows}"
        ))),
        PrefixStage::Layer(_) => tape.overwrite_rows(prefix, states),
    }
}

/// Bias update `W_m·δβ` for the linear layer after an LN, reproducing the
/// effect of shifting that LN's β by `delta_beta`. `w_m` is `[d_out, d]`.
pub fn absorb_ln_bias(w_m: &Tensor, delta_beta: &Tensor) -> Result<Tensor> {
    let (sw, sb) = (w_m.shape(), delta_beta.shape());
    if sw.len() != 2 || sb.len() != 1 || sw[1] != sb[0] {
        return Err(crate::error::shape_err("absorb_ln_bias", sw, sb));
    }
    let out = (0..sw[0])
        .map(|i| w_m.row(i).iter().zip(delta_beta.data()).map(|(w, b)| w * b).sum())
        .collect();
    Ok(Tensor::vector(out))
}

/// Reference evaluation of `W_m·LN_{γ,β}(x) + b_m` for one row `x`, with
/// `w_m: [d_out, d]`.
pub fn ln_linear(x: &[f64], gamma: &[f64], beta: &[f64], w_m: &Tensor, b_m: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    let normed: Vec<f64> = x
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| g * (v - mean) * inv + b)
        .collect();
    (0..w_m.shape()[0])
        .map(|i| w_m.row(i).iter().zip(&normed).map(|(w, z)| w * z).sum::<f64>() + b_m[i])
        .collect()
}

#[cfg(test)]
mod tests;
