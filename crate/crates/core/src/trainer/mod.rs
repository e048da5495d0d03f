//! Continued pretraining with an optional gradient cache, and retrieval
//! fine-tuning.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::corpus::{build_batch_tokenized, epoch_batches, BatchSpec, SpanBatch, TokenizedPair};
use crate::encoder::{forward, segments_for, Model};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore, Tape};
use crate::objectives::{
    batch_loss, contrastive_on_tape, masked_lm_on_tape, similarity_reps, LossBreakdown, ObjectiveConfig,
};
use crate::seeding;
use crate::tokenizer::Vocabulary;

mod config;
mod finetune;
mod log;

pub(crate) use config::{on_off, parse_kv, parse_num, read_kv, set_encoder_key};
pub use config::{RunConfig, CONFIG_KEYS};
pub use finetune::{
    colbert_triple_loss, dpr_batch_loss, evaluate_finetune_loss, finetune, parse_triples, read_triples, write_triples,
    FinetuneConfig, FinetuneObjective, TrainingTriple,
};
pub use log::{format_log, parse_log, LogRecord, LOG_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::contract(format!("unknown optimizer '{other}'"))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam or SGD over a [`ParamStore`] with a constant rate after optional
/// linear warmup.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    steps_taken: usize,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, warmup_steps: usize) -> Self {
        Optimizer {
            kind,
            learning_rate,
            warmup_steps,
            steps_taken: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    fn current_rate(&self) -> f64 {
        let t = self.steps_taken + 1;
        if self.warmup_steps > 0 && t < self.warmup_steps {
            self.learning_rate * t as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }

    /// Applies the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        let lr = self.current_rate();
        self.steps_taken += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in store.iter_mut() {
                    for (w, g) in p.value.as_mut_slice().iter_mut().zip(p.gradient.as_slice()) {
                        *w -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() != store.len() {
                    self.first = store
                        .iter()
                        .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                        .collect();
                    self.second = self.first.clone();
                }
                let t = self.steps_taken as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let w = p.value.as_mut_slice();
                    let g = p.gradient.as_slice();
                    for (((w, g), m), v) in w.iter_mut().zip(g).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Fills `model`'s gradients with `∂L/∂θ` from one full-batch pass.
pub fn gradients_direct(model: &mut Model, batch: &SpanBatch, objective: &ObjectiveConfig) -> Result<LossBreakdown> {
    model.params.zero_grads();
    let mut tape = Tape::new();
    let (_, loss) = batch_loss(&mut tape, model, batch, objective)?;
    let breakdown = loss.breakdown(&tape)?;
    if breakdown.is_finite() {
        let grads = tape.backward(loss.total)?;
        tape.accumulate_param_grads(&grads, &mut model.params);
    }
    Ok(breakdown)
}

/// Same gradients as [`gradients_direct`], computed chunk by chunk.
///
/// Pass 1 encodes every chunk without recording and keeps the similarity
/// representations. Pass 2 evaluates the contrastive loss on those cached
/// representations and takes its gradient with respect to them. Pass 3
/// re-encodes each chunk on a recording tape and backpropagates
/// `⟨reps, cached grad⟩` plus the chunk's masked-LM terms, accumulating into
/// the parameter gradients.
pub fn gradients_cached(
    model: &mut Model,
    batch: &SpanBatch,
    objective: &ObjectiveConfig,
    chunk_pairs: usize,
) -> Result<LossBreakdown> {
    let n = batch.num_pairs();
    if chunk_pairs == 0 || n % chunk_pairs != 0 {
        return Err(Error::contract(format!(
            "chunk_pairs {chunk_pairs} must divide the batch's {n} pairs"
        )));
    }
    model.params.zero_grads();
    let chunks: Vec<SpanBatch> = (0..n / chunk_pairs)
        .map(|c| batch.chunk(c * chunk_pairs, chunk_pairs))
        .collect();

    let mut contrastive = 0.0;
    let mut rep_grads: Vec<Option<Matrix>> = vec![None; chunks.len()];
    if let Some(kind) = objective.similarity {
        let mut cached = Vec::with_capacity(chunks.len());
        for chunk in &chunks {
            let mut tape = Tape::inference();
            let enc = forward(&mut tape, model, &chunk.spans)?;
            cached.push(tape.value(similarity_reps(&enc, kind)).clone());
        }

        let all = Matrix::vstack(&cached.iter().collect::<Vec<_>>())?;
        let segments = segments_for(&batch.spans);
        let mut tape = Tape::new();
        let reps = tape.leaf(all);
        let loss = contrastive_on_tape(
            &mut tape,
            kind,
            reps,
            &segments,
            &batch.pair_index,
            &batch.side,
            objective.contrastive,
            n,
        )?;
        contrastive = tape.scalar_value(loss)?;
        if contrastive.is_finite() {
            let grads = tape.backward(loss)?;
            let g = grads.wrt(reps).expect("reps feed the loss");
            let mut start = 0;
            for (slot, c) in rep_grads.iter_mut().zip(&cached) {
                *slot = Some(g.slice_rows(start, c.rows()));
                start += c.rows();
            }
        }
    }

    let mut mlm = 0.0;
    let mut cdmlm = 0.0;
    for (chunk, rep_grad) in chunks.iter().zip(rep_grads) {
        let mut tape = Tape::new();
        let enc = forward(&mut tape, model, &chunk.spans)?;
        let (m, cd) = masked_lm_on_tape(&mut tape, model, &enc, &chunk.spans, objective.condenser, n)?;
        mlm += tape.scalar_value(m)?;
        let mut terms = vec![m];
        if let Some(cd) = cd {
            cdmlm += tape.scalar_value(cd)?;
            terms.push(cd);
        }
        if let (Some(kind), Some(g)) = (objective.similarity, rep_grad) {
            terms.push(tape.dot_const(similarity_reps(&enc, kind), g)?);
        }
        let surrogate = tape.add_scalars(&terms)?;
        if tape.scalar_value(surrogate)?.is_finite() {
            let grads = tape.backward(surrogate)?;
            tape.accumulate_param_grads(&grads, &mut model.params);
        }
    }
    Ok(LossBreakdown {
        contrastive,
        mlm,
        cdmlm,
        total: contrastive + mlm + cdmlm,
    })
}

fn finish_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    breakdown: LossBreakdown,
    step: usize,
) -> Result<LossBreakdown> {
    if !breakdown.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: breakdown.to_string(),
        });
    }
    optimizer.step(&mut model.params);
    Ok(breakdown)
}

/// One forward, one backward, one update. Returns the pre-update losses.
pub fn pretrain_step_direct(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &SpanBatch,
    objective: &ObjectiveConfig,
    step: usize,
) -> Result<LossBreakdown> {
    let b = gradients_direct(model, batch, objective)?;
    finish_step(model, optimizer, b, step)
}

/// Gradient-cache variant of [`pretrain_step_direct`]; one update per call.
pub fn pretrain_step_cached(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &SpanBatch,
    objective: &ObjectiveConfig,
    chunk_pairs: usize,
    step: usize,
) -> Result<LossBreakdown> {
    let b = gradients_cached(model, batch, objective, chunk_pairs)?;
    finish_step(model, optimizer, b, step)
}

/// The batch used at 1-based `step`: pairs come from a per-epoch shuffle and
/// spans/masks from a per-step stream.
pub fn batch_for_step(pairs: &[TokenizedPair], vocab: &Vocabulary, cfg: &RunConfig, step: usize) -> Result<SpanBatch> {
    let per_epoch = pairs.len() / cfg.batch_pairs;
    if per_epoch == 0 {
        return Err(Error::contract(format!(
            "{} pairs cannot fill a batch of {}",
            pairs.len(),
            cfg.batch_pairs
        )));
    }
    let epoch = ((step - 1) / per_epoch) as u64;
    let order = epoch_batches(pairs.len(), cfg.batch_pairs, cfg.seed, epoch);
    let picked: Vec<&TokenizedPair> = order[(step - 1) % per_epoch].iter().map(|&i| &pairs[i]).collect();
    let mut rng = seeding::stream(cfg.seed, &[seeding::phase::SPANS, step as u64]);
    let spec = BatchSpec {
        window: cfg.window,
        max_len: cfg.encoder.max_len,
        mask_rate: cfg.mask_rate,
    };
    build_batch_tokenized(&picked, vocab, spec, &mut rng)
}

/// Runs `cfg.steps` updates on `model`, calling `on_step` after each.
///
/// The gradient cache is used whenever `chunk_pairs < batch_pairs`.
pub fn pretrain(
    model: &mut Model,
    pairs: &[TokenizedPair],
    vocab: &Vocabulary,
    cfg: &RunConfig,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if model.config.vocab_size != vocab.len() {
        return Err(Error::contract(format!(
            "model vocab {} does not match vocabulary {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    if cfg.condenser && !model.has_condenser() {
        return Err(Error::contract("condenser=on but the model has no Condenser head"));
    }
    let objective = cfg.objective();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.warmup_steps);
    let started = Instant::now();
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = batch_for_step(pairs, vocab, cfg, step)?;
        let loss = if cfg.chunk_pairs < cfg.batch_pairs {
            pretrain_step_cached(model, &mut optimizer, &batch, &objective, cfg.chunk_pairs, step)?
        } else {
            pretrain_step_direct(model, &mut optimizer, &batch, &objective, step)?
        };
        let record = LogRecord {
            step,
            loss,
            elapsed: if cfg.log_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_step(&record);
        records.push(record);
    }
    Ok(records)
}
