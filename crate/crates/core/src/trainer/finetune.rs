use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::epoch_batches;
use crate::encoder::{forward, Model};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::numerics::{Matrix, Tape, Var};
use crate::seeding;
use crate::tokenizer::{MaskedSequence, Vocabulary};

use super::{Optimizer, OptimizerKind};

/// A query with one relevant and one non-relevant passage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTriple {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

impl TrainingTriple {
    fn validate(&self) -> std::result::Result<(), String> {
        for (name, text) in [
            ("query", &self.query),
            ("positive", &self.positive),
            ("negative", &self.negative),
        ] {
            if text.trim().is_empty() {
                return Err(format!("empty {name}"));
            }
            if text.contains(['\t', '\n', '\r']) {
                return Err(format!("{name} contains a tab or newline"));
            }
        }
        Ok(())
    }
}

/// Parses `query<TAB>positive<TAB>negative` lines.
pub fn parse_triples(text: &str, path: &Path) -> Result<Vec<TrainingTriple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", f.len())));
        }
        let t = TrainingTriple {
            query: f[0].to_string(),
            positive: f[1].to_string(),
            negative: f[2].to_string(),
        };
        t.validate().map_err(err)?;
        out.push(t);
    }
    Ok(out)
}

pub fn read_triples(path: &Path) -> Result<Vec<TrainingTriple>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let triples = parse_triples(&text, path)?;
    if triples.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(triples)
}

pub fn write_triples(path: &Path, triples: &[TrainingTriple]) -> Result<()> {
    let mut out = String::new();
    for t in triples {
        t.validate().map_err(Error::Contract)?;
        out.push_str(&format!("{}\t{}\t{}\n", t.query, t.positive, t.negative));
    }
    fsutil::write_atomic(path, out.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneObjective {
    /// MaxSim scores, softmax over each query's own positive and negative.
    Colbert,
    /// CLS scores, softmax over all in-batch positives plus the own negative.
    Dpr,
}

impl fmt::Display for FinetuneObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneObjective::Colbert => "colbert",
            FinetuneObjective::Dpr => "dpr",
        })
    }
}

impl FromStr for FinetuneObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "colbert" => Ok(FinetuneObjective::Colbert),
            "dpr" => Ok(FinetuneObjective::Dpr),
            other => Err(Error::contract(format!("unknown fine-tuning objective '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub objective: FinetuneObjective,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Longest query or passage, CLS included.
    pub max_len: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            objective: FinetuneObjective::Colbert,
            steps: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            max_len: 33,
        }
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `−log softmax(s⁺ | s⁺, s⁻)`.
pub fn colbert_triple_loss(s_pos: f64, s_neg: f64) -> f64 {
    log_sum_exp([s_pos, s_neg].into_iter()) - s_pos
}

/// Mean in-batch loss from a `B x 2B` score matrix whose columns are the `B`
/// positives followed by the `B` negatives.
pub fn dpr_batch_loss(scores: &Matrix) -> Result<f64> {
    let b = scores.rows();
    if b == 0 || scores.cols() != 2 * b {
        return Err(Error::Dimension {
            op: "dpr_batch_loss",
            left: scores.shape(),
            right: (b, 2 * b),
        });
    }
    let mut total = 0.0;
    for q in 0..b {
        let row = scores.row(q);
        let lse = log_sum_exp(row[..b].iter().copied().chain([row[b + q]]));
        total += lse - row[q];
    }
    Ok(total / b as f64)
}

struct TokenizedTriple {
    query: MaskedSequence,
    positive: MaskedSequence,
    negative: MaskedSequence,
}

/// Records the fine-tuning loss for one batch of triples.
fn batch_objective(
    tape: &mut Tape,
    model: &Model,
    batch: &[&TokenizedTriple],
    objective: FinetuneObjective,
) -> Result<Var> {
    let b = batch.len();
    let queries: Vec<MaskedSequence> = batch.iter().map(|t| t.query.clone()).collect();
    let docs: Vec<MaskedSequence> = batch
        .iter()
        .map(|t| t.positive.clone())
        .chain(batch.iter().map(|t| t.negative.clone()))
        .collect();
    let q = forward(tape, model, &queries)?;
    let d = forward(tape, model, &docs)?;
    let scores = match objective {
        FinetuneObjective::Colbert => tape.maxsim(q.tokens, q.segments.clone(), d.tokens, d.segments.clone())?,
        FinetuneObjective::Dpr => tape.matmul_t(q.cls, d.cls)?,
    };
    let mut allowed = vec![false; b * 2 * b];
    for i in 0..b {
        let row = &mut allowed[i * 2 * b..(i + 1) * 2 * b];
        match objective {
            FinetuneObjective::Colbert => row[i] = true,
            FinetuneObjective::Dpr => row[..b].fill(true),
        }
        row[b + i] = true;
    }
    let targets: Vec<Option<usize>> = (0..b).map(Some).collect();
    tape.cross_entropy(scores, &targets, &vec![1.0 / b as f64; b], Some(allowed))
}

/// Fine-tunes `model` in place and returns the per-step mean batch loss.
///
/// The Condenser head, if present, is left untouched: it receives no
/// gradient from these objectives.
pub fn finetune(
    model: &mut Model,
    triples: &[TrainingTriple],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
) -> Result<Vec<f64>> {
    if triples.is_empty() {
        return Err(Error::contract("fine-tuning needs at least one triple"));
    }
    if cfg.batch_size == 0 || cfg.batch_size > triples.len() {
        return Err(Error::contract(format!(
            "batch_size {} must lie in 1..={}",
            cfg.batch_size,
            triples.len()
        )));
    }
    if model.config.vocab_size != vocab.len() {
        return Err(Error::contract("model and vocabulary sizes differ"));
    }
    let max_len = cfg.max_len.min(model.config.max_len);
    let tokenized = triples
        .iter()
        .map(|t| {
            Ok(TokenizedTriple {
                query: vocab.sequence(&t.query, max_len)?,
                positive: vocab.sequence(&t.positive, max_len)?,
                negative: vocab.sequence(&t.negative, max_len)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let order_seed = seeding::derive_seed(cfg.seed, &[seeding::phase::FINETUNE]);
    let per_epoch = triples.len() / cfg.batch_size;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, 0);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut order = Vec::new();
    for step in 0..cfg.steps {
        if step % per_epoch == 0 {
            order = epoch_batches(triples.len(), cfg.batch_size, order_seed, (step / per_epoch) as u64);
        }
        let batch: Vec<&TokenizedTriple> = order[step % per_epoch].iter().map(|&i| &tokenized[i]).collect();
        model.params.zero_grads();
        let mut tape = Tape::new();
        let loss = batch_objective(&mut tape, model, &batch, cfg.objective)?;
        let value = tape.scalar_value(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: step + 1,
                detail: format!("{} fine-tuning loss {value}", cfg.objective),
            });
        }
        let grads = tape.backward(loss)?;
        tape.accumulate_param_grads(&grads, &mut model.params);
        optimizer.step(&mut model.params);
        losses.push(value);
    }
    Ok(losses)
}

/// Mean fine-tuning loss of `model` over `triples` in batches of
/// `batch_size`, without updating anything.
pub fn evaluate_finetune_loss(
    model: &Model,
    triples: &[TrainingTriple],
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
) -> Result<f64> {
    let max_len = cfg.max_len.min(model.config.max_len);
    let tokenized = triples
        .iter()
        .map(|t| {
            Ok(TokenizedTriple {
                query: vocab.sequence(&t.query, max_len)?,
                positive: vocab.sequence(&t.positive, max_len)?,
                negative: vocab.sequence(&t.negative, max_len)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TokenizedTriple> = tokenized.iter().collect();
    let mut total = 0.0;
    let mut count = 0;
    for chunk in refs.chunks(cfg.batch_size.max(1)) {
        let mut tape = Tape::inference();
        let loss = batch_objective(&mut tape, model, chunk, cfg.objective)?;
        total += tape.scalar_value(loss)? * chunk.len() as f64;
        count += chunk.len();
    }
    if count == 0 {
        return Err(Error::contract("no triples to evaluate"));
    }
    Ok(total / count as f64)
}
