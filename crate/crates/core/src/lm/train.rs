use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::optim::{lr_at_step, Adam};
use super::{corpus_nll, forward, group_average, Batch, LmError, LogitClamp, Result, TransformerLm, MASK_LOGIT};
use crate::bpe::{BpeVocab, N_RESERVED, PAD_ID};
use crate::corpus::{LocaleCorpus, LocaleId};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Stop after this many evaluations without a new best.
    pub patience: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_steps: 200,
            eval_every: 100,
            seed: 0,
            clip_norm: Some(1.0),
            patience: None,
            eval_batch_size: 32,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            errs.push("batch sizes must be positive");
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            errs.push("peak_lr must be positive");
        }
        if self.warmup_steps == 0 {
            errs.push("warmup_steps must be at least 1");
        }
        if self.eval_every == 0 {
            errs.push("eval_every must be at least 1");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            errs.push("clip_norm must be positive");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LmError::Config(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub optimizer: Adam,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Steps at which validation ran; every curve has one entry per step here.
    pub eval_steps: Vec<u64>,
    pub valid_loss: BTreeMap<LocaleId, Vec<f64>>,
    pub best_step: u64,
    pub best_group_loss: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeEntry {
    pub at_group_best: f64,
    pub own_best: f64,
    /// `at_group_best / own_best − 1`.
    pub excess: f64,
}

impl TrainState {
    pub fn group_curve(&self) -> Vec<f64> {
        (0..self.eval_steps.len())
            .map(|i| {
                let n = self.valid_loss.len().max(1) as f64;
                self.valid_loss.values().map(|c| c[i]).sum::<f64>() / n
            })
            .collect()
    }

    /// For each locale, its loss at the group-best evaluation against its own minimum.
    pub fn convergence_range(&self) -> BTreeMap<LocaleId, RangeEntry> {
        let gi = self.eval_steps.iter().position(|&s| s == self.best_step).unwrap_or(0);
        self.valid_loss
            .iter()
            .map(|(loc, curve)| {
                let own = curve.iter().copied().fold(f64::INFINITY, f64::min);
                let at = curve[gi];
                (
                    loc.clone(),
                    RangeEntry {
                        at_group_best: at,
                        own_best: own,
                        excess: at / own - 1.0,
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss since the previous record.
    pub train_loss: Option<f64>,
    pub valid_loss: BTreeMap<LocaleId, f64>,
    pub valid_ppl: BTreeMap<LocaleId, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Parameters at the best group-average validation loss.
    pub best: TransformerLm,
    pub last: TransformerLm,
    pub log: Vec<LogRecord>,
}

/// Token-level presence bits for one locale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocaleTokenMask {
    pub locale: LocaleId,
    pub present: Vec<bool>,
    pub count: usize,
}

impl LocaleTokenMask {
    pub fn all_present(locale: LocaleId, vocab_size: usize) -> Self {
        Self {
            locale,
            present: vec![true; vocab_size],
            count: vocab_size,
        }
    }

    pub fn is_present(&self, id: u32) -> bool {
        self.present.get(id as usize).copied().unwrap_or(false)
    }

    pub fn masked_ids(&self) -> Vec<u32> {
        (0..self.present.len() as u32).filter(|&i| !self.present[i as usize]).collect()
    }

    pub fn clamp(&self) -> LogitClamp {
        LogitClamp {
            present: self.present.clone(),
            value: MASK_LOGIT,
        }
    }
}

/// Marks every id occurring in the encoding of `target`, plus the reserved ids.
pub fn build_locale_mask(vocab: &BpeVocab, target: &LocaleCorpus) -> Result<LocaleTokenMask> {
    if target.is_empty() {
        return Err(LmError::Data(format!("locale {} has no sentences", target.locale())));
    }
    let mut present = vec![false; vocab.id_count()];
    present[..N_RESERVED].iter_mut().for_each(|p| *p = true);
    for s in target.sentences() {
        for id in vocab.encode_ids(s) {
            present[id as usize] = true;
        }
    }
    let count = present.iter().filter(|&&p| p).count();
    Ok(LocaleTokenMask {
        locale: target.locale().clone(),
        present,
        count,
    })
}

fn mix(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One optimizer step; returns the batch loss before the update.
///
/// With a mask, masked-out logits are clamped, every target must be present,
/// and embedding rows of masked-out ids are left untouched.
pub fn train_step(
    model: &mut TransformerLm,
    opt: &mut Adam,
    batch: &Batch,
    lr: f64,
    clip_norm: Option<f64>,
    mask: Option<&LocaleTokenMask>,
    dropout_seed: u64,
) -> Result<f64> {
    let clamp = match mask {
        Some(m) => {
            if m.present.len() != model.cfg.vocab_size {
                return Err(LmError::Data(format!(
                    "mask covers {} ids, model has {}",
                    m.present.len(),
                    model.cfg.vocab_size
                )));
            }
            if let Some(&id) = batch.targets.iter().find(|&&t| t != PAD_ID && !m.is_present(t)) {
                return Err(LmError::MaskViolation { id });
            }
            Some(m.clamp())
        }
        None => model.clamp.clone(),
    };
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = model.params.iter().map(|t| tape.param(t)).collect();
    let logits = forward(&model.cfg, &mut tape, &vars, batch, clamp.as_ref(), Some(dropout_seed))?;
    let loss = tape.cross_entropy(logits, &batch.targets, Some(PAD_ID))?;
    let loss_value = tape.value(loss)[0] as f64;
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f32>> = vars
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
        .collect();
    drop(tape);

    if let Some(c) = clip_norm {
        let norm = grads
            .iter()
            .flatten()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        if norm > c {
            let s = (c / norm) as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    let frozen: Option<Vec<bool>> = mask.map(|m| m.present.iter().map(|p| !p).collect());
    opt.step(
        &mut model.params,
        &grads,
        lr as f32,
        frozen.as_deref().map(|f| (f, model.cfg.d_model)),
    );
    Ok(loss_value)
}

/// [`train_step`] with a mandatory mask.
pub fn masked_fine_tune_step(
    model: &mut TransformerLm,
    opt: &mut Adam,
    batch: &Batch,
    mask: &LocaleTokenMask,
    lr: f64,
    clip_norm: Option<f64>,
    dropout_seed: u64,
) -> Result<f64> {
    train_step(model, opt, batch, lr, clip_norm, Some(mask), dropout_seed)
}

/// Mean token loss per locale, evaluated with the model's own clamp.
pub fn evaluate_losses(
    model: &TransformerLm,
    valid: &BTreeMap<LocaleId, Vec<Vec<u32>>>,
    batch_size: usize,
) -> Result<BTreeMap<LocaleId, f64>> {
    valid
        .iter()
        .map(|(loc, seqs)| {
            let (nll, n) = corpus_nll(model, seqs, batch_size)?;
            if n == 0 {
                return Err(LmError::Data(format!("validation set for {loc} is empty")));
            }
            Ok((loc.clone(), nll / n as f64))
        })
        .collect()
}

fn run(
    model: TransformerLm,
    stream: &[Vec<u32>],
    valid: &BTreeMap<LocaleId, Vec<Vec<u32>>>,
    hyper: &TrainHyper,
    mask: Option<&LocaleTokenMask>,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if stream.is_empty() {
        return Err(LmError::Data("empty training stream".into()));
    }
    if valid.is_empty() {
        return Err(LmError::Data("no validation sets".into()));
    }
    let mut model = model;
    let mut opt = Adam::new(&model.params);
    let mut log = Vec::new();
    let mut state = TrainState {
        step: 0,
        optimizer: opt.clone(),
        peak_lr: hyper.peak_lr,
        warmup_steps: hyper.warmup_steps,
        eval_steps: Vec::new(),
        valid_loss: valid.keys().map(|k| (k.clone(), Vec::new())).collect(),
        best_step: 0,
        best_group_loss: f64::INFINITY,
        stopped_early: false,
    };

    let record = |state: &mut TrainState, log: &mut Vec<LogRecord>, losses: BTreeMap<LocaleId, f64>, step: u64, train_loss: Option<f64>| {
        state.eval_steps.push(step);
        for (loc, l) in &losses {
            state.valid_loss.get_mut(loc).expect("locale registered").push(*l);
        }
        log.push(LogRecord {
            step,
            lr: lr_at_step(step, hyper.peak_lr, hyper.warmup_steps),
            train_loss,
            valid_ppl: losses.iter().map(|(k, l)| (k.clone(), l.exp())).collect(),
            valid_loss: losses,
        });
    };

    let initial = evaluate_losses(&model, valid, hyper.eval_batch_size)?;
    let initial_avg = group_average(&initial);
    state.best_group_loss = initial_avg;
    record(&mut state, &mut log, initial, 0, None);
    let mut best = model.clone();
    let (mut since_best, mut bad_evals) = (0usize, 0usize);
    let (mut train_sum, mut train_n) = (0.0f64, 0usize);
    let n = stream.len();
    let b = hyper.batch_size;

    for step in 1..=hyper.steps {
        let seqs: Vec<&Vec<u32>> = (0..b).map(|i| &stream[((step - 1) as usize * b + i) % n]).collect();
        let batch = Batch::from_sequences(&seqs, model.cfg.context_len)?;
        let lr = lr_at_step(step, hyper.peak_lr, hyper.warmup_steps);
        let loss = train_step(&mut model, &mut opt, &batch, lr, hyper.clip_norm, mask, mix(hyper.seed, step))?;
        if !loss.is_finite() {
            return Err(LmError::Diverged {
                step,
                reason: format!("training loss {loss}"),
            });
        }
        train_sum += loss;
        train_n += 1;
        state.step = step;

        if step % hyper.eval_every == 0 || step == hyper.steps {
            let losses = evaluate_losses(&model, valid, hyper.eval_batch_size)?;
            let avg = group_average(&losses);
            record(&mut state, &mut log, losses, step, Some(train_sum / train_n as f64));
            (train_sum, train_n) = (0.0, 0);
            if avg < state.best_group_loss {
                state.best_group_loss = avg;
                state.best_step = step;
                best = model.clone();
                since_best = 0;
            } else {
                since_best += 1;
            }
            if !avg.is_finite() || avg > 2.0 * initial_avg {
                bad_evals += 1;
                if bad_evals >= 3 {
                    return Err(LmError::Diverged {
                        step,
                        reason: format!("validation loss {avg:.4} above twice the initial {initial_avg:.4}"),
                    });
                }
            } else {
                bad_evals = 0;
            }
            if hyper.patience.is_some_and(|p| since_best >= p) {
                state.stopped_early = true;
                break;
            }
        }
    }
    state.optimizer = opt;
    Ok(TrainOutcome {
        state,
        best,
        last: model,
        log,
    })
}

/// Trains on `stream` in order, evaluating every locale's validation set
/// every `eval_every` steps and keeping the best group-average parameters.
pub fn train(
    model: TransformerLm,
    stream: &[Vec<u32>],
    valid: &BTreeMap<LocaleId, Vec<Vec<u32>>>,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    run(model, stream, valid, hyper, None)
}

/// Continues training on one locale with fresh optimizer state until the
/// validation loss stops improving (patience 3 unless set).
pub fn fine_tune(
    model: TransformerLm,
    stream: &[Vec<u32>],
    valid: (&LocaleId, &[Vec<u32>]),
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    let hyper = TrainHyper {
        patience: hyper.patience.or(Some(3)),
        ..hyper.clone()
    };
    let valid = BTreeMap::from([(valid.0.clone(), valid.1.to_vec())]);
    run(model, stream, &valid, &hyper, None)
}

/// Fine-tuning with the locale's logit clamp installed and its absent
/// embedding rows frozen.
pub fn masked_fine_tune(
    model: TransformerLm,
    stream: &[Vec<u32>],
    valid: (&LocaleId, &[Vec<u32>]),
    mask: &LocaleTokenMask,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    let mut model = model;
    model.clamp = Some(mask.clamp());
    let hyper = TrainHyper {
        patience: hyper.patience.or(Some(3)),
        ..hyper.clone()
    };
    let valid = BTreeMap::from([(valid.0.clone(), valid.1.to_vec())]);
    run(model, stream, &valid, &hyper, Some(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{build_model, lm_loss, perplexity, ModelConfig};

    fn loc(s: &str) -> LocaleId {
        LocaleId::new(s).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig::new(1, 16, 2, 32, 24, 12)
    }

    #[test]
    fn memorizes_single_sentence() {
        let cfg = ModelConfig::new(2, 32, 4, 64, 24, 12);
        let seq = vec![1u32, 5, 9, 13, 6, 20, 11, 2];
        let mut m = build_model(cfg, 0).unwrap();
        let mut opt = Adam::new(&m.params);
        let batch = Batch::from_sequences(&[seq.clone()], 12).unwrap();
        for s in 1..=200 {
            train_step(&mut m, &mut opt, &batch, lr_at_step(s, 3e-3, 20), Some(1.0), None, s).unwrap();
        }
        let loss = lm_loss(&m, &batch).unwrap();
        assert!(loss < 0.1, "{loss}");
        assert!(perplexity(&m, &[seq]).unwrap() < 1.2);
    }

    #[test]
    fn curves_have_equal_lengths_and_state_is_consistent() {
        let m = build_model(tiny(), 1).unwrap();
        let stream: Vec<Vec<u32>> = (0..20).map(|i| vec![1, 4 + i % 10, 5 + i % 7, 2]).collect();
        let valid = BTreeMap::from([
            (loc("aa-AA"), vec![vec![1u32, 4, 5, 2]]),
            (loc("bb-BB"), vec![vec![1u32, 6, 7, 2]]),
        ]);
        let hyper = TrainHyper {
            steps: 25,
            batch_size: 4,
            eval_every: 10,
            warmup_steps: 5,
            ..Default::default()
        };
        let out = train(m, &stream, &valid, &hyper).unwrap();
        assert_eq!(out.state.eval_steps, vec![0, 10, 20, 25]);
        for c in out.state.valid_loss.values() {
            assert_eq!(c.len(), 4);
        }
        assert_eq!(out.log.len(), 4);
        assert_eq!(out.state.step, 25);
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let m = build_model(tiny(), 2).unwrap();
        let out = fine_tune(
            m.clone(),
            &[vec![1, 4, 2]],
            (&loc("aa-AA"), &[vec![1, 4, 2]]),
            &TrainHyper {
                steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.best, m);
        assert_eq!(out.last, m);
    }

    #[test]
    fn divergence_guard_trips() {
        let m = build_model(tiny(), 3).unwrap();
        let stream = vec![vec![1u32, 4, 5, 6, 2]];
        let valid = BTreeMap::from([(loc("aa-AA"), vec![vec![1u32, 7, 8, 9, 2]])]);
        let hyper = TrainHyper {
            steps: 400,
            batch_size: 1,
            eval_every: 5,
            warmup_steps: 1,
            peak_lr: 5.0,
            clip_norm: None,
            ..Default::default()
        };
        assert!(matches!(train(m, &stream, &valid, &hyper), Err(LmError::Diverged { .. })));
    }

    fn masked_setup() -> (TransformerLm, LocaleTokenMask, Batch) {
        let m = build_model(tiny(), 4).unwrap();
        let mut present = vec![false; 24];
        for i in [0usize, 1, 2, 3, 4, 5, 6, 7] {
            present[i] = true;
        }
        let mask = LocaleTokenMask {
            locale: loc("aa-AA"),
            count: 8,
            present,
        };
        let batch = Batch::from_sequences(&[vec![1u32, 4, 5, 6, 2], vec![1, 7, 4, 2]], 12).unwrap();
        (m, mask, batch)
    }

    #[test]
    fn masked_rows_stay_bitwise_frozen() {
        let (mut m, mask, batch) = masked_setup();
        let before = m.params[0].clone();
        let mut opt = Adam::new(&m.params);
        for s in 1..=20 {
            masked_fine_tune_step(&mut m, &mut opt, &batch, &mask, 1e-2, Some(1.0), s).unwrap();
        }
        let d = m.cfg.d_model;
        for id in mask.masked_ids() {
            let r = id as usize * d..(id as usize + 1) * d;
            let a: Vec<u32> = m.params[0].data[r.clone()].iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = before.data[r].iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_ne!(m.params[0].data[4 * d], before.data[4 * d]);
    }

    #[test]
    fn masked_embedding_gradient_is_exactly_zero() {
        let (m, mask, batch) = masked_setup();
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = m.params.iter().map(|t| tape.param(t)).collect();
        let logits = forward(&m.cfg, &mut tape, &vars, &batch, Some(&mask.clamp()), None).unwrap();
        let loss = tape.cross_entropy(logits, &batch.targets, Some(PAD_ID)).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(vars[0]).unwrap();
        let d = m.cfg.d_model;
        for id in mask.masked_ids() {
            assert!(g[id as usize * d..(id as usize + 1) * d].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn all_present_mask_matches_plain_step() {
        let (m, _, batch) = masked_setup();
        let all = LocaleTokenMask::all_present(loc("aa-AA"), 24);
        let (mut a, mut b) = (m.clone(), m);
        let (mut oa, mut ob) = (Adam::new(&a.params), Adam::new(&b.params));
        let la = train_step(&mut a, &mut oa, &batch, 1e-2, Some(1.0), None, 9).unwrap();
        let lb = masked_fine_tune_step(&mut b, &mut ob, &batch, &all, 1e-2, Some(1.0), 9).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn absent_target_is_a_contract_violation() {
        let (mut m, mask, _) = masked_setup();
        let batch = Batch::from_sequences(&[vec![1u32, 4, 20, 2]], 12).unwrap();
        let mut opt = Adam::new(&m.params);
        let err = masked_fine_tune_step(&mut m, &mut opt, &batch, &mask, 1e-3, None, 0).unwrap_err();
        assert!(matches!(err, LmError::MaskViolation { id: 20 }));
    }

    #[test]
    fn reserved_ids_always_in_mask() {
        let vocab = BpeVocab::from_merges(vec!['a', 'b'], vec![]).unwrap();
        let c = LocaleCorpus::from_lines(loc("aa-AA"), ["a"]);
        let mask = build_locale_mask(&vocab, &c).unwrap();
        assert!(mask.present[..N_RESERVED].iter().all(|&p| p));
        assert_eq!(mask.count, N_RESERVED + 1);
        let everything = LocaleCorpus::from_lines(loc("aa-AA"), ["ab ba", "x"]);
        let mask = build_locale_mask(&vocab, &everything).unwrap();
        assert_eq!(mask.count, vocab.id_count());
    }
}
