//! Pre-LN encoder-decoder transformer with learned positions.
//!
//! Hidden states travel as `[rows·len, d]` matrices. Every weight matrix is
//! stored as `[d_in, d_out]` and applied as `x·W + b`.

mod batch;
mod checkpoint;
mod config;
mod store;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnMask, Precision, Tape, Var};
use crate::error::{Error, Result};
use crate::peft::{adapter_forward, prefix_inject, AdapterVars, PeftMethod, PrefixStage};
use crate::tensor::Tensor;

pub use batch::Batch;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::ModelConfig;
pub use store::{Param, ParamGroup, ParameterStore};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    pub fn as_str(self) -> &'static str {
        match self {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        }
    }

    pub fn layer_name(self, layer: usize) -> String {
        format!("{}.layer{layer}", self.as_str())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AdapterIds {
    pub ln: Norm,
    pub down: Linear,
    pub up: Linear,
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: Norm,
    self_attn: Attention,
    /// Decoder only: LN before cross-attention, and the cross-attention block.
    cross: Option<(Norm, Attention)>,
    ln_ffn: Norm,
    fc1: Linear,
    fc2: Linear,
    adapter: Option<AdapterIds>,
    prefix: Option<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_tokens: usize,
    enc_positions: usize,
    dec_tokens: usize,
    dec_positions: usize,
    enc_layers: Vec<Layer>,
    dec_layers: Vec<Layer>,
    enc_final: Norm,
    dec_final: Norm,
    output: Option<usize>,
}

fn lookup(store: &ParameterStore, name: &str) -> Result<usize> {
    store
        .index_of(name)
        .ok_or_else(|| Error::Config(format!("parameter {name:?} missing from store")))
}

fn resolve_linear(store: &ParameterStore, base: &str) -> Result<Linear> {
    Ok(Linear {
        w: lookup(store, &format!("{base}.weight"))?,
        b: lookup(store, &format!("{base}.bias"))?,
    })
}

fn resolve_norm(store: &ParameterStore, base: &str) -> Result<Norm> {
    Ok(Norm {
        gamma: lookup(store, &format!("{base}.gamma"))?,
        beta: lookup(store, &format!("{base}.beta"))?,
    })
}

fn resolve_attention(store: &ParameterStore, base: &str) -> Result<Attention> {
    Ok(Attention {
        q: resolve_linear(store, &format!("{base}.q"))?,
        k: resolve_linear(store, &format!("{base}.k"))?,
        v: resolve_linear(store, &format!("{base}.v"))?,
        out: resolve_linear(store, &format!("{base}.out"))?,
    })
}

impl Layout {
    fn resolve(config: &ModelConfig, store: &ParameterStore) -> Result<Self> {
        let layers = |stack: Stack, n: usize| -> Result<Vec<Layer>> {
            (0..n)
                .map(|i| {
                    let base = stack.layer_name(i);
                    let cross = match stack {
                        Stack::Encoder => None,
                        Stack::Decoder => Some((
                            resolve_norm(store, &format!("{base}.ln2"))?,
                            resolve_attention(store, &format!("{base}.cross_attn"))?,
                        )),
                    };
                    let ln_ffn = match stack {
                        Stack::Encoder => format!("{base}.ln2"),
                        Stack::Decoder => format!("{base}.ln3"),
                    };
                    let adapter = if store.contains(&format!("{base}.adapter.down.weight")) {
                        Some(AdapterIds {
                            ln: resolve_norm(store, &format!("{base}.adapter.ln"))?,
                            down: resolve_linear(store, &format!("{base}.adapter.down"))?,
                            up: resolve_linear(store, &format!("{base}.adapter.up"))?,
                        })
                    } else {
                        None
                    };
                    Ok(Layer {
                        ln1: resolve_norm(store, &format!("{base}.ln1"))?,
                        self_attn: resolve_attention(store, &format!("{base}.self_attn"))?,
                        cross,
                        ln_ffn: resolve_norm(store, &ln_ffn)?,
                        fc1: resolve_linear(store, &format!("{base}.ffn.fc1"))?,
                        fc2: resolve_linear(store, &format!("{base}.ffn.fc2"))?,
                        adapter,
                        prefix: store.index_of(&format!("{base}.prefix")),
                    })
                })
                .collect()
        };
        Ok(Self {
            enc_tokens: lookup(store, "encoder.embed_tokens.weight")?,
            enc_positions: lookup(store, "encoder.embed_positions.weight")?,
            dec_tokens: lookup(store, "decoder.embed_tokens.weight")?,
            dec_positions: lookup(store, "decoder.embed_positions.weight")?,
            enc_layers: layers(Stack::Encoder, config.enc_layers)?,
            dec_layers: layers(Stack::Decoder, config.dec_layers)?,
            enc_final: resolve_norm(store, "encoder.final_ln")?,
            dec_final: resolve_norm(store, "decoder.final_ln")?,
            output: if config.tie_output {
                None
            } else {
                Some(lookup(store, "output_projection.weight")?)
            },
        })
    }
}

/// Whether dropout is active for a forward pass.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// Tape variables created for the parameters a forward pass touched.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn var(&self, index: usize) -> Option<Var> {
        self.vars[index]
    }
}

/// Attention masks for one batch, including any prefix rows.
#[derive(Clone, Debug)]
pub struct Masks {
    pub encoder: AttnMask,
    pub decoder: AttnMask,
    pub cross: AttnMask,
}

struct Ctx<'a, 'r> {
    tape: &'a mut Tape,
    store: &'a ParameterStore,
    config: &'a ModelConfig,
    vars: Vec<Option<Var>>,
    mode: Mode<'r>,
}

impl Ctx<'_, '_> {
    fn p(&mut self, index: usize) -> Var {
        if let Some(v) = self.vars[index] {
            return v;
        }
        let param = self.store.by_index(index).1;
        let v = self.tape.leaf(param.value.clone(), param.trainable);
        self.vars[index] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, lin: Linear) -> Result<Var> {
        let (w, b) = (self.p(lin.w), self.p(lin.b));
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var> {
        let (g, b) = (self.p(n.gamma), self.p(n.beta));
        self.tape.layer_norm(x, g, b, self.config.ln_eps)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.config.dropout;
        match &mut self.mode {
            Mode::Train(rng) if p > 0.0 => self.tape.dropout(x, p, *rng),
            _ => Ok(x),
        }
    }

    /// `[rows·len, d] -> [rows·heads, len, head_dim]`
    fn split_heads(&mut self, x: Var, rows: usize, len: usize) -> Result<Var> {
        let (h, hd) = (self.config.heads, self.config.head_dim());
        let x = self.tape.reshape(x, &[rows, len, h, hd])?;
        let x = self.tape.swap_axes12(x)?;
        self.tape.reshape(x, &[rows * h, len, hd])
    }

    fn merge_heads(&mut self, x: Var, rows: usize, len: usize) -> Result<Var> {
        let (h, hd) = (self.config.heads, self.config.head_dim());
        let x = self.tape.reshape(x, &[rows, h, len, hd])?;
        let x = self.tape.swap_axes12(x)?;
        self.tape.reshape(x, &[rows * len, h * hd])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        att: Attention,
        query: Var,
        memory: Var,
        rows: usize,
        q_len: usize,
        k_len: usize,
        mask: &AttnMask,
    ) -> Result<Var> {
        let q = self.linear(query, att.q)?;
        let k = self.linear(memory, att.k)?;
        let v = self.linear(memory, att.v)?;
        let q = self.tape.scale(q, 1.0 / (self.config.head_dim() as f64).sqrt());
        let q = self.split_heads(q, rows, q_len)?;
        let k = self.split_heads(k, rows, k_len)?;
        let v = self.split_heads(v, rows, k_len)?;
        let scores = self.tape.bmm(q, k, true)?;
        let weights = self.tape.masked_softmax(scores, mask)?;
        let ctx = self.tape.bmm(weights, v, false)?;
        let ctx = self.merge_heads(ctx, rows, q_len)?;
        self.linear(ctx, att.out)
    }

    fn ffn(&mut self, x: Var, layer: &Layer) -> Result<Var> {
        let hidden = self.linear(x, layer.fc1)?;
        let hidden = self.tape.activation(hidden, self.config.activation);
        self.linear(hidden, layer.fc2)
    }

    fn adapter(&mut self, h: Var, ids: AdapterIds) -> Result<Var> {
        let vars = AdapterVars {
            ln_gamma: self.p(ids.ln.gamma),
            ln_beta: self.p(ids.ln.beta),
            w_down: self.p(ids.down.w),
            b_down: self.p(ids.down.b),
            w_up: self.p(ids.up.w),
            b_up: self.p(ids.up.b),
        };
        adapter_forward(self.tape, &vars, h, self.config.activation, self.config.ln_eps)
    }

    /// Token plus position embeddings for `[rows, width]` ids.
    fn embed(&mut self, tokens: usize, positions: usize, ids: &[usize], rows: usize, width: usize) -> Result<Var> {
        if width > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence length {width} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let table = self.p(tokens);
        let tok = self.tape.gather_rows(table, ids)?;
        let pos_ids: Vec<usize> = (0..rows).flat_map(|_| 0..width).collect();
        let pos_table = self.p(positions);
        let pos = self.tape.gather_rows(pos_table, &pos_ids)?;
        let x = self.tape.add(tok, pos)?;
        self.dropout(x)
    }

    /// Applies the prefix of `layer` (prepend at layer 0, overwrite after).
    fn inject_prefix(&mut self, h: Var, layer: &Layer, index: usize, rows: usize, len: usize) -> Result<Var> {
        let Some(pid) = layer.prefix else { return Ok(h) };
        let prefix = self.p(pid);
        let d = self.config.d_model;
        let stage = if index == 0 { PrefixStage::Embeddings } else { PrefixStage::Layer(index) };
        let h3 = self.tape.reshape(h, &[rows, len, d])?;
        let out = prefix_inject(self.tape, prefix, stage, h3)?;
        let total = self.tape.shape(out)[1];
        self.tape.reshape(out, &[rows * total, d])
    }
}

/// A transformer together with its parameters and (optional) PEFT surgery.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    config: ModelConfig,
    store: ParameterStore,
    layout: Layout,
    method: Option<PeftMethod>,
}

fn register_linear<R: rand::Rng>(
    store: &mut ParameterStore,
    rng: &mut R,
    base: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    store.insert(format!("{base}.weight"), Tensor::xavier_uniform(d_in, d_out, rng), true)?;
    store.insert(format!("{base}.bias"), Tensor::zeros(&[d_out]), true)?;
    Ok(())
}

fn register_norm(store: &mut ParameterStore, base: &str, d: usize) -> Result<()> {
    store.insert(format!("{base}.gamma"), Tensor::ones(&[d]), true)?;
    store.insert(format!("{base}.beta"), Tensor::zeros(&[d]), true)?;
    Ok(())
}

fn register_attention<R: rand::Rng>(store: &mut ParameterStore, rng: &mut R, base: &str, d: usize) -> Result<()> {
    for part in ["q", "k", "v", "out"] {
        register_linear(store, rng, &format!("{base}.{part}"), d, d)?;
    }
    Ok(())
}

impl Seq2Seq {
    /// Builds and initializes a model from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, v, f, p) = (config.d_model, config.vocab_size, config.ffn_dim, config.max_positions);
        let mut store = ParameterStore::new();
        for stack in [Stack::Encoder, Stack::Decoder] {
            let s = stack.as_str();
            store.insert(format!("{s}.embed_tokens.weight"), Tensor::xavier_uniform(v, d, &mut rng), true)?;
            store.insert(format!("{s}.embed_positions.weight"), Tensor::xavier_uniform(p, d, &mut rng), true)?;
            let n = match stack {
                Stack::Encoder => config.enc_layers,
                Stack::Decoder => config.dec_layers,
            };
            for i in 0..n {
                let base = stack.layer_name(i);
                register_norm(&mut store, &format!("{base}.ln1"), d)?;
                register_attention(&mut store, &mut rng, &format!("{base}.self_attn"), d)?;
                register_norm(&mut store, &format!("{base}.ln2"), d)?;
                if stack == Stack::Decoder {
                    register_attention(&mut store, &mut rng, &format!("{base}.cross_attn"), d)?;
                    register_norm(&mut store, &format!("{base}.ln3"), d)?;
                }
                register_linear(&mut store, &mut rng, &format!("{base}.ffn.fc1"), d, f)?;
                register_linear(&mut store, &mut rng, &format!("{base}.ffn.fc2"), f, d)?;
            }
            register_norm(&mut store, &format!("{s}.final_ln"), d)?;
        }
        if !config.tie_output {
            store.insert("output_projection.weight", Tensor::xavier_uniform(d, v, &mut rng), true)?;
        }
        Self::from_parts(config.clone(), store, None)
    }

    /// Reassembles a model from a parameter store (e.g. a checkpoint).
    pub fn from_parts(config: ModelConfig, store: ParameterStore, method: Option<PeftMethod>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &store)?;
        Ok(Self {
            config,
            store,
            layout,
            method,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Changes the dropout rate used in training mode.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {p}")));
        }
        self.config.dropout = p;
        Ok(())
    }

    pub fn method(&self) -> Option<&PeftMethod> {
        self.method.as_ref()
    }

    pub(crate) fn set_method(&mut self, method: PeftMethod) -> Result<()> {
        self.layout = Layout::resolve(&self.config, &self.store)?;
        self.method = Some(method);
        Ok(())
    }

    /// Prefix rows prepended to every sequence (0 without prefix-tuning).
    pub fn prefix_len(&self) -> usize {
        self.layout.enc_layers[0]
            .prefix
            .map(|i| self.store.by_index(i).1.value.shape()[0])
            .unwrap_or(0)
    }

    /// Attention masks for `batch`, covering prefix rows when present.
    ///
    /// Prefix rows are visible to every query. Real decoder positions are
    /// causal among themselves; prefix-row queries only see prefix rows.
    pub fn masks(&self, batch: &Batch) -> Masks {
        let p = self.prefix_len();
        let (rows, ws, wt) = (batch.rows, batch.src_width, batch.tgt_width);
        let mut encoder = AttnMask::new(rows, p + ws, p + ws);
        let mut cross = AttnMask::new(rows, p + wt, p + ws);
        let mut decoder = AttnMask::new(rows, p + wt, p + wt);
        for b in 0..rows {
            let visible_src = |k: usize| k < p || k - p < batch.src_lens[b];
            for k in (0..p + ws).filter(|&k| visible_src(k)) {
                for q in 0..p + ws {
                    encoder.allow(b, q, k);
                }
                for q in 0..p + wt {
                    cross.allow(b, q, k);
                }
            }
            for q in 0..p + wt {
                for k in 0..p + wt {
                    let ok = if k < p {
                        true
                    } else {
                        q >= p && k <= q && k - p < batch.tgt_lens[b]
                    };
                    if ok {
                        decoder.allow(b, q, k);
                    }
                }
            }
        }
        Masks { encoder, decoder, cross }
    }

    fn encode_ctx(&self, cx: &mut Ctx, batch: &Batch, masks: &Masks) -> Result<Var> {
        let (rows, width) = (batch.rows, batch.src_width);
        let lay = &self.layout;
        let mut h = cx.embed(lay.enc_tokens, lay.enc_positions, &batch.src, rows, width)?;
        let mut len = width;
        for (i, layer) in lay.enc_layers.iter().enumerate() {
            h = cx.inject_prefix(h, layer, i, rows, len)?;
            len = masks.encoder.q_len;
            let z = cx.norm(h, layer.ln1)?;
            let z = cx.attention(layer.self_attn, z, z, rows, len, len, &masks.encoder)?;
            let z = cx.dropout(z)?;
            h = cx.tape.add(h, z)?;
            let z = cx.norm(h, layer.ln_ffn)?;
            let z = cx.ffn(z, layer)?;
            let z = cx.dropout(z)?;
            h = cx.tape.add(h, z)?;
            if let Some(a) = layer.adapter {
                h = cx.adapter(h, a)?;
            }
        }
        cx.norm(h, lay.enc_final)
    }

    /// Decoder states for real target positions, `[rows·tgt_width, d]`.
    fn decode_ctx(&self, cx: &mut Ctx, batch: &Batch, masks: &Masks, memory: Var) -> Result<Var> {
        let (rows, width) = (batch.rows, batch.tgt_width);
        let lay = &self.layout;
        let mut h = cx.embed(lay.dec_tokens, lay.dec_positions, &batch.tgt_in, rows, width)?;
        let mut len = width;
        let k_len = masks.cross.k_len;
        for (i, layer) in lay.dec_layers.iter().enumerate() {
            h = cx.inject_prefix(h, layer, i, rows, len)?;
            len = masks.decoder.q_len;
            let z = cx.norm(h, layer.ln1)?;
            let z = cx.attention(layer.self_attn, z, z, rows, len, len, &masks.decoder)?;
            let z = cx.dropout(z)?;
            h = cx.tape.add(h, z)?;
            let (ln, cross) = layer.cross.expect("decoder layer has cross-attention");
            let z = cx.norm(h, ln)?;
            let z = cx.attention(cross, z, memory, rows, len, k_len, &masks.cross)?;
            let z = cx.dropout(z)?;
            h = cx.tape.add(h, z)?;
            let z = cx.norm(h, layer.ln_ffn)?;
            let z = cx.ffn(z, layer)?;
            let z = cx.dropout(z)?;
            h = cx.tape.add(h, z)?;
            if let Some(a) = layer.adapter {
                h = cx.adapter(h, a)?;
            }
        }
        let h = cx.norm(h, lay.dec_final)?;
        let p = len - width;
        if p == 0 {
            return Ok(h);
        }
        let d = self.config.d_model;
        let h3 = cx.tape.reshape(h, &[rows, len, d])?;
        let real = cx.tape.drop_rows(h3, p)?;
        cx.tape.reshape(real, &[rows * width, d])
    }

    fn project(&self, cx: &mut Ctx, h: Var) -> Result<Var> {
        match self.layout.output {
            Some(w) => {
                let w = cx.p(w);
                cx.tape.matmul(h, w)
            }
            None => {
                let table = cx.p(self.layout.dec_tokens);
                cx.tape.matmul_nt(h, table)
            }
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let v = self.config.vocab_size;
        if let Some(&bad) = batch.src.iter().chain(&batch.tgt_in).chain(&batch.tgt_out).find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        Ok(())
    }

    /// Records the teacher-forced forward pass on `tape`; returns logits
    /// `[rows·tgt_width, vocab]` for real target positions.
    pub fn logits_on_tape(&self, tape: &mut Tape, batch: &Batch, mode: Mode) -> Result<(Var, Binding)> {
        self.check_batch(batch)?;
        let masks = self.masks(batch);
        let mut cx = Ctx {
            tape,
            store: &self.store,
            config: &self.config,
            vars: vec![None; self.store.len()],
            mode,
        };
        let memory = self.encode_ctx(&mut cx, batch, &masks)?;
        let h = self.decode_ctx(&mut cx, batch, &masks, memory)?;
        let logits = self.project(&mut cx, h)?;
        Ok((logits, Binding { vars: cx.vars }))
    }

    /// Label-smoothed loss averaged over the batch's non-pad target tokens.
    pub fn loss_on_tape(&self, tape: &mut Tape, batch: &Batch, smoothing: f64, mode: Mode) -> Result<(Var, Binding)> {
        let (logits, binding) = self.logits_on_tape(tape, batch, mode)?;
        let loss = tape.cross_entropy(logits, &batch.tgt_out, smoothing, PAD)?;
        Ok((loss, binding))
    }

    /// Sum of unsmoothed token NLL and the number of scored tokens.
    pub fn nll(&self, batch: &Batch, precision: Precision) -> Result<(f64, usize)> {
        let mut tape = Tape::no_grad(precision);
        let (loss, _) = self.loss_on_tape(&mut tape, batch, 0.0, Mode::Eval)?;
        let count = batch.target_tokens();
        Ok((tape.value(loss).data()[0] * count as f64, count))
    }

    /// Evaluation-mode logits `[len(tgt), vocab]` for one pair, where `tgt`
    /// are the decoder input tokens.
    pub fn logits(&self, src: &[usize], tgt: &[usize]) -> Result<Tensor> {
        let batch = Batch::from_inputs(&[src], &[tgt])?;
        let mut tape = Tape::no_grad(Precision::F64);
        let (logits, _) = self.logits_on_tape(&mut tape, &batch, Mode::Eval)?;
        Ok(tape.value(logits).clone())
    }

    /// Encoder output `[p + len(src), d]`, prefix rows first.
    pub fn encode(&self, src: &[usize]) -> Result<Tensor> {
        let batch = Batch::from_inputs(&[src], &[&[BOS]])?;
        self.check_batch(&batch)?;
        let masks = self.masks(&batch);
        let mut tape = Tape::no_grad(Precision::F64);
        let mut cx = Ctx {
            tape: &mut tape,
            store: &self.store,
            config: &self.config,
            vars: vec![None; self.store.len()],
            mode: Mode::Eval,
        };
        let out = self.encode_ctx(&mut cx, &batch, &masks)?;
        Ok(tape.value(out).clone())
    }

    /// Greedy decoding from BOS; the returned ids exclude BOS and include
    /// the EOS when one was produced within `max_len` tokens.
    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_batch(&[src], max_len, Precision::F64)?.remove(0))
    }

    pub fn greedy_decode_batch(&self, srcs: &[&[usize]], max_len: usize, precision: Precision) -> Result<Vec<Vec<usize>>> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        let max_len = max_len.min(self.config.max_positions);
        let rows = srcs.len();
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); rows];
        let mut done = vec![false; rows];

        let probe = Batch::from_inputs(srcs, &vec![&[BOS][..]; rows])?;
        self.check_batch(&probe)?;
        let enc_masks = self.masks(&probe);
        let mut enc_tape = Tape::no_grad(precision);
        let memory = {
            let mut cx = Ctx {
                tape: &mut enc_tape,
                store: &self.store,
                config: &self.config,
                vars: vec![None; self.store.len()],
                mode: Mode::Eval,
            };
            let m = self.encode_ctx(&mut cx, &probe, &enc_masks)?;
            enc_tape.value(m).clone()
        };
        drop(enc_tape);

        let v = self.config.vocab_size;
        for step in 0..max_len {
            let prefixes: Vec<Vec<usize>> = outputs
                .iter()
                .map(|o| {
                    let mut t = vec![BOS];
                    t.extend(o.iter().copied());
                    t.resize(step + 1, PAD);
                    t
                })
                .collect();
            let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
            let mut batch = Batch::from_inputs(srcs, &refs)?;
            batch.tgt_lens = vec![step + 1; rows];
            let masks = self.masks(&batch);
            let mut tape = Tape::no_grad(precision);
            let mut cx = Ctx {
                tape: &mut tape,
                store: &self.store,
                config: &self.config,
                vars: vec![None; self.store.len()],
                mode: Mode::Eval,
            };
            let mem = cx.tape.constant(memory.clone());
            let h = self.decode_ctx(&mut cx, &batch, &masks, mem)?;
            let logits = self.project(&mut cx, h)?;
            let values = tape.value(logits).data();
            for b in 0..rows {
                if done[b] {
                    continue;
                }
                let row = (b * (step + 1) + step) * v;
                let next = argmax(&values[row..row + v]);
                outputs[b].push(next);
                if next == EOS {
                    done[b] = true;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outputs)
    }
}

impl Seq2Seq {
    /// Largest relative error between the tape gradient of the batch loss and
    /// central differences, over `samples` coordinates drawn uniformly from
    /// all trainable parameters. Evaluation mode, 64-bit. Coordinates where
    /// both gradients are below 1e-9 count as agreeing.
    pub fn grad_check(&self, batch: &Batch, smoothing: f64, samples: usize, step: f64, seed: u64) -> Result<f64> {
        use rand::Rng;

        let mut tape = Tape::with_precision(Precision::F64);
        let (loss, binding) = self.loss_on_tape(&mut tape, batch, smoothing, Mode::Eval)?;
        tape.backward(loss)?;
        let trainable: Vec<(usize, usize)> = self
            .store
            .iter()
            .enumerate()
            .filter(|(_, (_, p))| p.trainable)
            .map(|(i, (_, p))| (i, p.value.numel()))
            .collect();
        let total: usize = trainable.iter().map(|t| t.1).sum();
        if total == 0 {
            return Err(Error::EmptyMask("gradient check".into()));
        }
        let loss_of = |m: &Seq2Seq| -> Result<f64> {
            let mut t = Tape::no_grad(Precision::F64);
            let (l, _) = m.loss_on_tape(&mut t, batch, smoothing, Mode::Eval)?;
            Ok(t.value(l).data()[0])
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probe = self.clone();
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let mut flat = rng.gen_range(0..total);
            let &(index, _) = trainable
                .iter()
                .find(|&&(_, n)| {
                    if flat < n {
                        true
                    } else {
                        flat -= n;
                        false
                    }
                })
                .expect("coordinate within the trainable total");
            let analytic = binding
                .var(index)
                .and_then(|v| tape.grad(v))
                .map_or(0.0, |g| g[flat]);
            let original = self.store.by_index(index).1.value.data()[flat];
            let numeric = crate::autodiff::central_difference(
                |delta| {
                    probe.store.by_index_mut(index).value.data_mut()[flat] = original + delta;
                    loss_of(&probe)
                },
                step,
            )?;
            probe.store.by_index_mut(index).value.data_mut()[flat] = original;
            // Key biases (and any other softmax-invariant direction) have an
            // exact zero gradient; differences there are rounding noise.
            if analytic.abs().max(numeric.abs()) < NOISE_FLOOR {
                continue;
            }
            worst = worst.max(crate::autodiff::relative_error(analytic, numeric));
        }
        Ok(worst)
    }
}

const NOISE_FLOOR: f64 = 1e-9;

/// First index of the maximum (ties toward the lower id).
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
