//! Pretraining losses: the cross-lingual contrastive term over interleaved
//! spans, masked language modeling, and the Condenser-head MLM.
//!
//! For a batch of `n` pairs laid out as `[s1S, s1T, s2S, s2T, ...]` the total
//! loss is
//!
//! ```text
//! L = 1/(2n) Σ_spans [ co(span) + mlm(span) + cdmlm(span) ]
//! ```
//!
//! where `co` is an InfoNCE term whose positive is the other side of the same
//! pair, and the MLM terms are per-span means over labeled positions.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::corpus::{Side, SpanBatch};
use crate::encoder::{condenser_hidden, forward, vocab_logits, EncodedBatch, Model};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Segment, Tape, Var, IGNORE_INDEX};
use crate::tokenizer::MaskedSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SimilarityKind {
    /// Sum over the left span's tokens of the best dot product on the right.
    MaxSim,
    /// Dot product of the CLS vectors.
    Cls,
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityKind::MaxSim => "maxsim",
            SimilarityKind::Cls => "cls",
        })
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maxsim" => Ok(SimilarityKind::MaxSim),
            "cls" => Ok(SimilarityKind::Cls),
            other => Err(Error::contract(format!(
                "unknown similarity '{other}' (expected maxsim or cls)"
            ))),
        }
    }
}

/// Parses `none | cls | maxsim`; `none` disables the contrastive term.
pub fn parse_similarity(s: &str) -> Result<Option<SimilarityKind>> {
    if s.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

pub fn similarity_name(kind: Option<SimilarityKind>) -> &'static str {
    match kind {
        None => "none",
        Some(SimilarityKind::MaxSim) => "maxsim",
        Some(SimilarityKind::Cls) => "cls",
    }
}

fn check_width(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a.1 != b.1 {
        return Err(Error::Dimension { op, left: a, right: b });
    }
    Ok(())
}

/// `Σ_{i attended in h1} max_{j attended in h2} h1_i · h2_j`. Not symmetric.
pub fn maxsim(h1: &Matrix, mask1: &[bool], h2: &Matrix, mask2: &[bool]) -> Result<f64> {
    check_width("maxsim", h1.shape(), h2.shape())?;
    if mask1.len() != h1.rows() || mask2.len() != h2.rows() {
        return Err(Error::contract("maxsim mask length does not match the token rows"));
    }
    if !mask1.iter().any(|m| *m) || !mask2.iter().any(|m| *m) {
        return Err(Error::contract("maxsim over a span with no attended tokens"));
    }
    let mut total = 0.0;
    for i in (0..h1.rows()).filter(|&i| mask1[i]) {
        let best = (0..h2.rows())
            .filter(|&j| mask2[j])
            .map(|j| h1.row(i).iter().zip(h2.row(j)).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total)
}

/// Dot product of two CLS vectors.
pub fn cls_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cls_sim",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveOptions {
    pub temperature: f64,
    /// Restrict the denominator to other pairs' opposite-side spans
    /// (`i ≠ j ∧ L ≠ k` read literally) instead of excluding only the anchor.
    /// Under this reading the positive is not in its own denominator, so the
    /// loss can go negative and `n = 1` has no normalizer.
    pub literal_indicator: bool,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        ContrastiveOptions {
            temperature: 1.0,
            literal_indicator: false,
        }
    }
}

impl ContrastiveOptions {
    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::contract(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Index of each span's positive (the other side of its pair).
pub fn positives(pair_index: &[usize], side: &[Side]) -> Result<Vec<usize>> {
    if pair_index.len() != side.len() {
        return Err(Error::contract("pair_index and side lengths differ"));
    }
    (0..pair_index.len())
        .map(|a| {
            let mut hits = (0..pair_index.len()).filter(|&b| pair_index[b] == pair_index[a] && side[b] != side[a]);
            match (hits.next(), hits.next()) {
                (Some(b), None) => Ok(b),
                _ => Err(Error::contract(format!(
                    "span {a} needs exactly one opposite-side partner in pair {}",
                    pair_index[a]
                ))),
            }
        })
        .collect()
}

/// Row-major `m x m` mask of the spans each anchor normalizes over.
fn denominator_mask(pair_index: &[usize], side: &[Side], literal: bool) -> Vec<bool> {
    let m = pair_index.len();
    let mut mask = vec![false; m * m];
    for a in 0..m {
        for b in 0..m {
            mask[a * m + b] = if literal {
                pair_index[a] != pair_index[b] && side[a] != side[b]
            } else {
                a != b
            };
        }
    }
    mask
}

/// Per-anchor contrastive terms from a similarity matrix `sim[(a, b)] = f(a, b)`.
pub fn contrastive_terms(
    sim: &Matrix,
    pair_index: &[usize],
    side: &[Side],
    opts: ContrastiveOptions,
) -> Result<Vec<f64>> {
    opts.validate()?;
    let m = pair_index.len();
    if sim.shape() != (m, m) {
        return Err(Error::Dimension {
            op: "contrastive_terms",
            left: sim.shape(),
            right: (m, m),
        });
    }
    let pos = positives(pair_index, side)?;
    let mask = denominator_mask(pair_index, side, opts.literal_indicator);
    let tau = opts.temperature;
    (0..m)
        .map(|a| {
            let logits: Vec<f64> = (0..m).filter(|&b| mask[a * m + b]).map(|b| sim[(a, b)] / tau).collect();
            if logits.is_empty() {
                return Err(Error::contract(format!("anchor {a} has an empty denominator")));
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            Ok(lse - sim[(a, pos[a])] / tau)
        })
        .collect()
}

/// Mean of [`contrastive_terms`] over all anchors.
pub fn contrastive_loss(sim: &Matrix, pair_index: &[usize], side: &[Side], opts: ContrastiveOptions) -> Result<f64> {
    let terms = contrastive_terms(sim, pair_index, side, opts)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Pairwise similarity matrix of plain encoder outputs.
pub fn similarity_matrix(kind: SimilarityKind, outs: &[crate::encoder::EncoderOutput]) -> Result<Matrix> {
    let m = outs.len();
    let mut sim = Matrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            sim[(a, b)] = match kind {
                SimilarityKind::MaxSim => maxsim(
                    &outs[a].last_tokens,
                    &outs[a].attention_mask,
                    &outs[b].last_tokens,
                    &outs[b].attention_mask,
                )?,
                SimilarityKind::Cls => cls_sim(&outs[a].cls, &outs[b].cls)?,
            };
        }
    }
    Ok(sim)
}

fn label_target(label: i64, vocab: usize) -> Result<Option<usize>> {
    if label == IGNORE_INDEX {
        return Ok(None);
    }
    if label < 0 || label as usize >= vocab {
        return Err(Error::Index {
            what: "mlm label",
            index: label,
            limit: vocab,
        });
    }
    Ok(Some(label as usize))
}

/// Mean cross entropy over rows whose label is not the ignore index; 0 when
/// nothing is labeled.
pub fn mlm_loss(logits: &Matrix, labels: &[i64]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::Dimension {
            op: "mlm_loss",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &l) in labels.iter().enumerate() {
        let Some(t) = label_target(l, logits.cols())? else {
            continue;
        };
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// The cd-MLM loss has the same form as [`mlm_loss`] over Condenser logits.
pub fn cdmlm_loss(condenser_logits: &Matrix, labels: &[i64]) -> Result<f64> {
    mlm_loss(condenser_logits, labels)
}

/// One span's loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpanLoss {
    pub contrastive: f64,
    pub mlm: f64,
    pub cdmlm: f64,
}

/// `1/(2n) Σ (co + mlm + cdmlm)` over the `2n` spans.
pub fn total_loss(per_span: &[SpanLoss], n: usize) -> Result<f64> {
    if n == 0 || per_span.len() != 2 * n {
        return Err(Error::contract(format!(
            "expected {} span terms for n = {n}, got {}",
            2 * n,
            per_span.len()
        )));
    }
    let sum: f64 = per_span.iter().map(|s| s.contrastive + s.mlm + s.cdmlm).sum();
    Ok(sum / (2 * n) as f64)
}

/// Batch-averaged components; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub mlm: f64,
    pub cdmlm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_spans(per_span: &[SpanLoss], n: usize) -> Result<Self> {
        let total = total_loss(per_span, n)?;
        let mean = |f: fn(&SpanLoss) -> f64| per_span.iter().map(f).sum::<f64>() / (2 * n) as f64;
        Ok(LossBreakdown {
            contrastive: mean(|s| s.contrastive),
            mlm: mean(|s| s.mlm),
            cdmlm: mean(|s| s.cdmlm),
            total,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.contrastive, self.mlm, self.cdmlm, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "contrastive={} mlm={} cdmlm={} total={}",
            self.contrastive, self.mlm, self.cdmlm, self.total
        )
    }
}

/// Which terms enter the pretraining loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// `None` drops the contrastive term.
    pub similarity: Option<SimilarityKind>,
    pub condenser: bool,
    pub contrastive: ContrastiveOptions,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            similarity: Some(SimilarityKind::MaxSim),
            condenser: true,
            contrastive: ContrastiveOptions::default(),
        }
    }
}

/// The tensor the contrastive term reads: token rows or CLS rows.
pub fn similarity_reps(enc: &EncodedBatch, kind: SimilarityKind) -> Var {
    match kind {
        SimilarityKind::MaxSim => enc.tokens,
        SimilarityKind::Cls => enc.cls,
    }
}

/// Contrastive term on the tape, each anchor weighted `1/(2·n_total)`.
///
/// `reps` is the stacked token rows (MaxSim, laid out by `segments`) or one
/// CLS row per span.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_on_tape(
    tape: &mut Tape,
    kind: SimilarityKind,
    reps: Var,
    segments: &Arc<[Segment]>,
    pair_index: &[usize],
    side: &[Side],
    opts: ContrastiveOptions,
    n_total: usize,
) -> Result<Var> {
    opts.validate()?;
    let sim = match kind {
        SimilarityKind::MaxSim => tape.maxsim(reps, segments.clone(), reps, segments.clone())?,
        SimilarityKind::Cls => tape.matmul_t(reps, reps)?,
    };
    let m = pair_index.len();
    if tape.value(sim).shape() != (m, m) {
        return Err(Error::Dimension {
            op: "contrastive_on_tape",
            left: tape.value(sim).shape(),
            right: (m, m),
        });
    }
    let logits = tape.scale(sim, 1.0 / opts.temperature);
    let targets: Vec<Option<usize>> = positives(pair_index, side)?.into_iter().map(Some).collect();
    let weights = vec![1.0 / (2 * n_total) as f64; m];
    let mask = denominator_mask(pair_index, side, opts.literal_indicator);
    tape.cross_entropy(logits, &targets, &weights, Some(mask))
}

/// Labeled rows, targets and per-row weights `1/(2·n_total·|M_s|)`.
fn labeled_rows(
    spans: &[MaskedSequence],
    vocab: usize,
    n_total: usize,
) -> Result<(Vec<usize>, Vec<Option<usize>>, Vec<f64>)> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut start = 0;
    for s in spans {
        let count = s.num_labeled();
        for (r, &l) in s.mlm_labels.iter().enumerate() {
            if let Some(t) = label_target(l, vocab)? {
                rows.push(start + r);
                targets.push(Some(t));
                weights.push(1.0 / (2 * n_total * count) as f64);
            }
        }
        start += s.len();
    }
    Ok((rows, targets, weights))
}

fn masked_ce(tape: &mut Tape, model: &Model, hidden: Var, spans: &[MaskedSequence], n_total: usize) -> Result<Var> {
    let (rows, targets, weights) = labeled_rows(spans, model.config.vocab_size, n_total)?;
    if rows.is_empty() {
        return Ok(tape.leaf(Matrix::scalar(0.0)));
    }
    let picked = tape.gather_rows(hidden, &rows)?;
    let logits = vocab_logits(tape, model, picked)?;
    tape.cross_entropy(logits, &targets, &weights, None)
}

/// MLM and (when enabled) cd-MLM terms for `spans`, weighted for a batch of
/// `n_total` pairs.
pub fn masked_lm_on_tape(
    tape: &mut Tape,
    model: &Model,
    enc: &EncodedBatch,
    spans: &[MaskedSequence],
    condenser: bool,
    n_total: usize,
) -> Result<(Var, Option<Var>)> {
    let mlm = masked_ce(tape, model, enc.hidden, spans, n_total)?;
    let cdmlm = if condenser {
        let h = condenser_hidden(tape, model, enc)?;
        Some(masked_ce(tape, model, h, spans, n_total)?)
    } else {
        None
    };
    Ok((mlm, cdmlm))
}

/// Handles to the loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub contrastive: Option<Var>,
    pub mlm: Var,
    pub cdmlm: Option<Var>,
}

impl BatchLoss {
    pub fn breakdown(&self, tape: &Tape) -> Result<LossBreakdown> {
        let get = |v: Option<Var>| -> Result<f64> { v.map_or(Ok(0.0), |v| tape.scalar_value(v)) };
        Ok(LossBreakdown {
            contrastive: get(self.contrastive)?,
            mlm: tape.scalar_value(self.mlm)?,
            cdmlm: get(self.cdmlm)?,
            total: tape.scalar_value(self.total)?,
        })
    }
}

/// Encodes a whole batch and records the full pretraining loss.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &SpanBatch,
    cfg: &ObjectiveConfig,
) -> Result<(EncodedBatch, BatchLoss)> {
    let n = batch.num_pairs();
    if n == 0 {
        return Err(Error::contract("empty batch"));
    }
    let enc = forward(tape, model, &batch.spans)?;
    let contrastive = match cfg.similarity {
        Some(kind) => Some(contrastive_on_tape(
            tape,
            kind,
            similarity_reps(&enc, kind),
            &enc.segments,
            &batch.pair_index,
            &batch.side,
            cfg.contrastive,
            n,
        )?),
        None => None,
    };
    let (mlm, cdmlm) = masked_lm_on_tape(tape, model, &enc, &batch.spans, cfg.condenser, n)?;
    let terms: Vec<Var> = contrastive.into_iter().chain([mlm]).chain(cdmlm).collect();
    let total = tape.add_scalars(&terms)?;
    Ok((
        enc,
        BatchLoss {
            total,
            contrastive,
            mlm,
            cdmlm,
        },
    ))
}

#[cfg(test)]
mod tests;
