//! Decoder-only transformer language model.
//!
//! Parameters are held as a flat, named list in a fixed order (see
//! [`param_shapes`]) and the forward pass is a free function over tape
//! variables, so the same graph is used for 32-bit training, 64-bit gradient
//! verification and evaluation. The output projection is the token embedding
//! table itself.

mod checkpoint;
mod optim;
mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bpe::{BpeVocab, BOS_ID, EOS_ID, N_RESERVED, PAD_ID};
use crate::corpus::{LocaleCorpus, LocaleId};
use crate::tensor::{Differentiable, Scalar, Tape, Tensor, TensorError, Var};

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{lr_at_step, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{
    build_locale_mask, evaluate_losses, fine_tune, masked_fine_tune, masked_fine_tune_step, train, train_step,
    LocaleTokenMask, LogRecord, RangeEntry, TrainHyper, TrainOutcome, TrainState,
};

/// Score written into masked-out logit columns.
pub const MASK_LOGIT: f32 = -1e4;
pub const INIT_STD: f64 = 0.02;
/// Init scale for gradient verification, large enough that most gradients
/// sit well above finite-difference noise.
pub const GRAD_PROBE_STD: f64 = 0.1;
const PARAMS_PER_LAYER: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Data(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("target id {id} is absent from the locale mask")]
    MaskViolation { id: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, LmError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, d_ff: usize, vocab_size: usize, context_len: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            vocab_size,
            context_len,
            dropout_p: 0.0,
        }
    }

    /// Desk-scale default: 4 layers, width 128, 8 heads, `d_ff = 4·d_model`.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            dropout_p: 0.1,
            ..Self::new(4, 128, 8, 512, vocab_size, 64)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_layers == 0 {
            errs.push("n_layers must be positive".to_string());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            errs.push(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            errs.push("d_ff must be positive".to_string());
        }
        if self.vocab_size <= N_RESERVED {
            errs.push(format!("vocab_size {} leaves no room beyond reserved ids", self.vocab_size));
        }
        if self.context_len < 2 {
            errs.push(format!("context_len {} < 2", self.context_len));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            errs.push(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LmError::Config(errs.join("; ")))
        }
    }

    /// Closed-form parameter count with tied input/output embeddings.
    pub fn param_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size, self.d_model, self.d_ff, self.n_layers);
        v * d + l * (4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d) + 2 * d
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Names and shapes of every parameter tensor, in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut out = vec![("tok_emb".to_string(), vec![cfg.vocab_size, d])];
    for l in 0..cfg.n_layers {
        let layer: [(&str, Vec<usize>); PARAMS_PER_LAYER] = [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("attn.wq", vec![d, d]),
            ("attn.bq", vec![d]),
            ("attn.wk", vec![d, d]),
            ("attn.bk", vec![d]),
            ("attn.wv", vec![d, d]),
            ("attn.bv", vec![d]),
            ("attn.wo", vec![d, d]),
            ("attn.bo", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("ff.w1", vec![d, f]),
            ("ff.b1", vec![f]),
            ("ff.w2", vec![f, d]),
            ("ff.b2", vec![d]),
        ];
        out.extend(layer.into_iter().map(|(n, s)| (format!("layer{l}.{n}"), s)));
    }
    out.push(("ln_f.g".to_string(), vec![d]));
    out.push(("ln_f.b".to_string(), vec![d]));
    out
}

/// Output clamp installed by masked fine-tuning: logits of ids whose bit is
/// unset are overwritten with `value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitClamp {
    pub present: Vec<bool>,
    pub value: f32,
}

impl LogitClamp {
    fn masked_columns(&self) -> Vec<bool> {
        self.present.iter().map(|p| !p).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm {
    pub cfg: ModelConfig,
    pub params: Vec<Tensor<f32>>,
    pub clamp: Option<LogitClamp>,
}

impl TransformerLm {
    pub fn param_names(&self) -> Vec<String> {
        param_shapes(&self.cfg).into_iter().map(|(n, _)| n).collect()
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn token_embedding(&self) -> &Tensor<f32> {
        &self.params[0]
    }

    /// The output projection; the same storage as [`Self::token_embedding`].
    pub fn output_projection(&self) -> &Tensor<f32> {
        &self.params[0]
    }

    pub fn token_embedding_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.params[0]
    }
}

fn init_params(cfg: &ModelConfig, seed: u64, std: f64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    param_shapes(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".g") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            Tensor::new(shape, data).expect("shape matches")
        })
        .collect()
}

/// Deterministic initialization: weight matrices from `N(0, 0.02²)`, biases
/// zero, layer-norm gains one.
pub fn build_model(cfg: ModelConfig, seed: u64) -> Result<TransformerLm> {
    cfg.validate()?;
    Ok(TransformerLm {
        cfg,
        params: init_params(&cfg, seed, INIT_STD).iter().map(Tensor::cast).collect(),
        clamp: None,
    })
}

/// Right-padded next-token batch: inputs are positions `0..T`, targets `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    /// Sequences longer than `context_len + 1` ids are truncated.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S], context_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(LmError::Data("empty batch".into()));
        }
        let len = seqs
            .iter()
            .map(|s| s.as_ref().len().min(context_len + 1).saturating_sub(1))
            .max()
            .unwrap_or(0);
        if len == 0 {
            return Err(LmError::Data("no sequence has two or more ids".into()));
        }
        let mut inputs = vec![PAD_ID; seqs.len() * len];
        let mut targets = vec![PAD_ID; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            let s = &s[..s.len().min(context_len + 1)];
            for t in 0..s.len().saturating_sub(1) {
                inputs[b * len + t] = s[t];
                targets[b * len + t] = s[t + 1];
            }
        }
        Ok(Self {
            inputs,
            targets,
            batch: seqs.len(),
            len,
        })
    }

    pub fn n_supervised(&self) -> usize {
        self.targets.iter().filter(|&&t| t != PAD_ID).count()
    }
}

/// `<s>` + subword ids + `</s>` for every sentence.
pub fn encode_sequences<S: AsRef<str>>(vocab: &BpeVocab, sentences: &[S]) -> Vec<Vec<u32>> {
    sentences
        .iter()
        .map(|s| {
            let mut ids = vec![BOS_ID];
            ids.extend(vocab.encode_ids(s.as_ref()));
            ids.push(EOS_ID);
            ids
        })
        .collect()
}

fn sinusoidal(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

fn check_ids(cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    if batch.len > cfg.context_len {
        return Err(LmError::Data(format!(
            "sequence length {} exceeds context {}",
            batch.len, cfg.context_len
        )));
    }
    let v = cfg.vocab_size as u32;
    if let Some(&bad) = batch.inputs.iter().chain(&batch.targets).find(|&&i| i >= v) {
        return Err(LmError::Data(format!("id {bad} out of range for vocabulary of {v}")));
    }
    Ok(())
}

fn layer_norm_affine<T: Scalar>(tape: &mut Tape<T>, x: Var, g: Var, b: Var) -> Result<Var> {
    let h = tape.layer_norm(x, 1e-5)?;
    let h = tape.mul_broadcast(h, g)?;
    Ok(tape.add_broadcast(h, b)?)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    Ok(tape.add_broadcast(h, b)?)
}

/// Logits `[B·T, V]` for a batch. `dropout_seed = None` disables dropout.
pub fn forward<T: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    p: &[Var],
    batch: &Batch,
    clamp: Option<&LogitClamp>,
    dropout_seed: Option<u64>,
) -> Result<Var> {
    check_ids(cfg, batch)?;
    let (bsz, len, d) = (batch.batch, batch.len, cfg.d_model);
    let (h, dh) = (cfg.n_heads, cfg.head_dim());
    let mut drop_counter = 0u64;
    let mut drop = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        match dropout_seed {
            Some(seed) if cfg.dropout_p > 0.0 => {
                drop_counter += 1;
                Ok(tape.dropout(x, cfg.dropout_p, seed.wrapping_add(drop_counter.wrapping_mul(0x9e37_79b9_7f4a_7c15)))?)
            }
            _ => Ok(x),
        }
    };

    let emb = tape.embedding(p[0], &batch.inputs)?;
    let emb = tape.scale(emb, T::lit((d as f64).sqrt()))?;
    let emb = tape.reshape(emb, vec![bsz, len, d])?;
    let pe = tape.constant(vec![len, d], sinusoidal(len, d).into_iter().map(T::lit).collect())?;
    let x = tape.add_broadcast(emb, pe)?;
    let x = tape.reshape(x, vec![bsz * len, d])?;
    let mut x = drop(tape, x)?;

    let att_scale = T::lit(1.0 / (dh as f64).sqrt());
    for l in 0..cfg.n_layers {
        let w = &p[1 + l * PARAMS_PER_LAYER..1 + (l + 1) * PARAMS_PER_LAYER];
        let hn = layer_norm_affine(tape, x, w[0], w[1])?;
        let heads = |tape: &mut Tape<T>, wi: usize| -> Result<Var> {
            let y = linear(tape, hn, w[wi], w[wi + 1])?;
            let y = tape.reshape(y, vec![bsz, len, h, dh])?;
            let y = tape.transpose(y, 1, 2)?;
            Ok(tape.reshape(y, vec![bsz * h, len, dh])?)
        };
        let q = heads(tape, 2)?;
        let k = heads(tape, 4)?;
        let v = heads(tape, 6)?;
        let s = tape.matmul_t(q, k)?;
        let s = tape.scale(s, att_scale)?;
        let s = tape.causal_mask(s)?;
        let a = tape.softmax(s, 2)?;
        let a = drop(tape, a)?;
        let ctx = tape.matmul(a, v)?;
        let ctx = tape.reshape(ctx, vec![bsz, h, len, dh])?;
        let ctx = tape.transpose(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, vec![bsz * len, d])?;
        let o = linear(tape, ctx, w[8], w[9])?;
        let o = drop(tape, o)?;
        x = tape.add(x, o)?;

        let hn = layer_norm_affine(tape, x, w[10], w[11])?;
        let f = linear(tape, hn, w[12], w[13])?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, w[14], w[15])?;
        let f = drop(tape, f)?;
        x = tape.add(x, f)?;
    }
    let nf = 1 + cfg.n_layers * PARAMS_PER_LAYER;
    let x = layer_norm_affine(tape, x, p[nf], p[nf + 1])?;
    let logits = tape.matmul_t(x, p[0])?;
    match clamp {
        Some(c) => Ok(tape.fill_columns(logits, &c.masked_columns(), T::lit(c.value as f64))?),
        None => Ok(logits),
    }
}

/// Mean token cross-entropy over non-pad targets, evaluated without dropout.
pub fn lm_loss(model: &TransformerLm, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = model.params.iter().map(|t| tape.leaf(t)).collect();
    let logits = forward(&model.cfg, &mut tape, &vars, batch, model.clamp.as_ref(), None)?;
    let loss = tape.cross_entropy(logits, &batch.targets, Some(PAD_ID))?;
    Ok(tape.value(loss)[0] as f64)
}

/// Per-sequence total log-probability (natural log) of every id after the first.
pub fn sequence_logprobs(model: &TransformerLm, seqs: &[Vec<u32>], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = Batch::from_sequences(chunk, model.cfg.context_len)?;
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = model.params.iter().map(|t| tape.leaf(t)).collect();
        let logits = forward(&model.cfg, &mut tape, &vars, &batch, model.clamp.as_ref(), None)?;
        let lv = tape.value(logits);
        let v = model.cfg.vocab_size;
        for b in 0..batch.batch {
            let mut total = 0.0f64;
            for t in 0..batch.len {
                let r = b * batch.len + t;
                let target = batch.targets[r];
                if target == PAD_ID {
                    continue;
                }
                let row = &lv[r * v..(r + 1) * v];
                let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let z: f32 = row.iter().map(|&x| (x - mx).exp()).sum();
                total += (row[target as usize] - mx - z.ln()) as f64;
            }
            out.push(total);
        }
    }
    Ok(out)
}

/// Total negative log-likelihood and supervised token count.
pub fn corpus_nll(model: &TransformerLm, seqs: &[Vec<u32>], batch_size: usize) -> Result<(f64, usize)> {
    let lps = sequence_logprobs(model, seqs, batch_size)?;
    let ctx = model.cfg.context_len;
    let count: usize = seqs.iter().map(|s| s.len().min(ctx + 1).saturating_sub(1)).sum();
    Ok((-lps.iter().sum::<f64>(), count))
}

/// `exp` of the mean token cross-entropy over pre-encoded sequences.
pub fn perplexity(model: &TransformerLm, seqs: &[Vec<u32>]) -> Result<f64> {
    let (nll, count) = corpus_nll(model, seqs, 32)?;
    if count == 0 {
        return Err(LmError::Data("empty corpus".into()));
    }
    Ok((nll / count as f64).exp())
}

pub fn corpus_perplexity(model: &TransformerLm, corpus: &LocaleCorpus, vocab: &BpeVocab) -> Result<f64> {
    perplexity(model, &encode_sequences(vocab, corpus.sentences()))
}

/// A model plus fixed batch viewed as a function of its parameters, for
/// gradient verification.
pub struct LmGradProbe {
    pub cfg: ModelConfig,
    pub params: Vec<Tensor<f64>>,
    pub batch: Batch,
}

impl LmGradProbe {
    /// Parameters drawn with standard deviation `std` so gradients are well
    /// above finite-difference noise.
    pub fn new(cfg: ModelConfig, seed: u64, std: f64, batch: Batch) -> Result<Self> {
        cfg.validate()?;
        check_ids(&cfg, &batch)?;
        Ok(Self {
            params: init_params(&cfg, seed, std),
            cfg,
            batch,
        })
    }
}

impl Differentiable for LmGradProbe {
    fn parameters(&self) -> Vec<(String, Tensor<f64>)> {
        param_shapes(&self.cfg)
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.params.iter().cloned())
            .collect()
    }

    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> crate::tensor::Result<Var> {
        let logits = forward(&self.cfg, tape, params, &self.batch, None, None).map_err(|e| match e {
            LmError::Tensor(t) => t,
            other => TensorError::Parameter {
                op: "lm_forward",
                msg: other.to_string(),
            },
        })?;
        tape.cross_entropy(logits, &self.batch.targets, Some(PAD_ID))
    }
}

/// Group-average of per-locale losses (unweighted mean over locales).
pub fn group_average(losses: &BTreeMap<LocaleId, f64>) -> f64 {
    losses.values().sum::<f64>() / losses.len().max(1) as f64
}
