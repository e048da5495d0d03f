//! Comparable-corpus ingestion, span sampling and interleaved batch building.
//!
//! A batch over `n` linked document pairs holds `2n` spans ordered
//! `[s_1^S, s_1^T, …, s_n^S, s_n^T]`: position `2i` is the source side of
//! pair `i` and position `2i + 1` its target side.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::seeding;
use crate::tokenizer::{apply_mlm_mask, with_cls, MaskedSequence, Vocabulary};

/// One linked cross-language document pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocumentPair {
    pub pair_id: String,
    pub lang_s: String,
    pub lang_t: String,
    pub text_s: String,
    pub text_t: String,
}

impl DocumentPair {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.lang_s == self.lang_t {
            return Err(format!("both sides are tagged {:?}", self.lang_s));
        }
        if self.text_s.trim().is_empty() || self.text_t.trim().is_empty() {
            return Err("empty document text".into());
        }
        Ok(())
    }
}

/// A pair-file record: a document pair and its relevance grade.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradedPair {
    pub pair: DocumentPair,
    pub grade: u32,
}

fn escape(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    for c in field.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(field: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(format!(
                    "bad escape sequence \\{}",
                    other.map_or(String::new(), String::from)
                ))
            }
        }
    }
    Ok(out)
}

/// Serializes records as `pair_id lang_s lang_t text_s text_t grade`,
/// tab-separated, one per line.
pub fn format_pairs(records: &[GradedPair]) -> String {
    let mut out = String::new();
    for r in records {
        let p = &r.pair;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            escape(&p.pair_id),
            escape(&p.lang_s),
            escape(&p.lang_t),
            escape(&p.text_s),
            escape(&p.text_t),
            r.grade
        )
        .expect("write to String");
    }
    out
}

pub fn write_pairs(path: &Path, records: &[GradedPair]) -> Result<()> {
    fsutil::write_atomic(path, format_pairs(records).as_bytes())
}

fn parse_record(line: &str) -> std::result::Result<GradedPair, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 tab-separated fields, found {}", fields.len()));
    }
    let grade = fields[5]
        .trim()
        .parse::<u32>()
        .map_err(|_| format!("bad grade {:?}", fields[5]))?;
    let pair = DocumentPair {
        pair_id: unescape(fields[0])?,
        lang_s: unescape(fields[1])?,
        lang_t: unescape(fields[2])?,
        text_s: unescape(fields[3])?,
        text_t: unescape(fields[4])?,
    };
    pair.validate()?;
    Ok(GradedPair { pair, grade })
}

/// Reads a pair file and keeps only records carrying the maximum grade
/// present, deduplicated by `pair_id` (first occurrence wins), in file order.
pub fn ingest_pairs(path: &Path) -> Result<Vec<DocumentPair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let rec = parse_record(&line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        })?;
        records.push(rec);
    }
    let pairs = select_linked(records);
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(pairs)
}

/// Max-grade filter and first-occurrence deduplication.
pub fn select_linked(records: Vec<GradedPair>) -> Vec<DocumentPair> {
    let Some(max) = records.iter().map(|r| r.grade).max() else {
        return Vec::new();
    };
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter(|r| r.grade == max)
        .filter(|r| seen.insert(r.pair.pair_id.clone()))
        .map(|r| r.pair)
        .collect()
}

/// A contiguous window of `window` tokens at a uniformly random offset, or
/// the whole sequence when it is not longer than the window.
pub fn sample_span<R: Rng + ?Sized>(tokens: &[usize], window: usize, rng: &mut R) -> Result<Vec<usize>> {
    if window == 0 {
        return Err(Error::contract("span window must be at least 1"));
    }
    if tokens.len() <= window {
        return Ok(tokens.to_vec());
    }
    let offset = rng.random_range(0..=tokens.len() - window);
    Ok(tokens[offset..offset + window].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Interleaved spans of `n` pairs; see the module docs for the layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanBatch {
    pub spans: Vec<MaskedSequence>,
    pub pair_index: Vec<usize>,
    pub side: Vec<Side>,
}

impl SpanBatch {
    pub fn num_pairs(&self) -> usize {
        self.spans.len() / 2
    }

    /// The sub-batch of pairs `start..start + len`, keeping the layout.
    pub fn chunk(&self, start: usize, len: usize) -> SpanBatch {
        let r = 2 * start..2 * (start + len);
        SpanBatch {
            spans: self.spans[r.clone()].to_vec(),
            pair_index: self.pair_index[r.clone()].iter().map(|i| i - start).collect(),
            side: self.side[r].to_vec(),
        }
    }
}

/// A document pair already mapped to token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl TokenizedPair {
    pub fn new(pair: &DocumentPair, vocab: &Vocabulary) -> Self {
        TokenizedPair {
            source: vocab.token_ids(&pair.text_s),
            target: vocab.token_ids(&pair.text_t),
        }
    }
}

/// Span sampling and masking parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchSpec {
    pub window: usize,
    pub max_len: usize,
    pub mask_rate: f64,
}

/// Builds the interleaved batch from pre-tokenized pairs. Per pair the rng
/// draws the source offset, the target offset, then the two masks.
pub fn build_batch_tokenized<R: Rng + ?Sized>(
    pairs: &[&TokenizedPair],
    vocab: &Vocabulary,
    spec: BatchSpec,
    rng: &mut R,
) -> Result<SpanBatch> {
    if pairs.is_empty() {
        return Err(Error::contract("a batch needs at least one pair"));
    }
    if spec.max_len < spec.window + 1 {
        return Err(Error::contract(format!(
            "max_len {} leaves no room for CLS with window {}",
            spec.max_len, spec.window
        )));
    }
    let mut batch = SpanBatch {
        spans: Vec::with_capacity(2 * pairs.len()),
        pair_index: Vec::with_capacity(2 * pairs.len()),
        side: Vec::with_capacity(2 * pairs.len()),
    };
    for (i, p) in pairs.iter().enumerate() {
        let s = sample_span(&p.source, spec.window, rng)?;
        let t = sample_span(&p.target, spec.window, rng)?;
        let s = apply_mlm_mask(&with_cls(&s, spec.max_len), vocab, spec.mask_rate, rng)?;
        let t = apply_mlm_mask(&with_cls(&t, spec.max_len), vocab, spec.mask_rate, rng)?;
        batch.spans.extend([s, t]);
        batch.pair_index.extend([i, i]);
        batch.side.extend([Side::Source, Side::Target]);
    }
    Ok(batch)
}

/// Tokenizes each side, samples one span per document, encodes and masks.
pub fn build_batch<R: Rng + ?Sized>(
    pairs: &[DocumentPair],
    vocab: &Vocabulary,
    spec: BatchSpec,
    rng: &mut R,
) -> Result<SpanBatch> {
    let tokenized: Vec<TokenizedPair> = pairs.iter().map(|p| TokenizedPair::new(p, vocab)).collect();
    let refs: Vec<&TokenizedPair> = tokenized.iter().collect();
    build_batch_tokenized(&refs, vocab, spec, rng)
}

/// Pair indices of every full batch of an epoch, after a seeded shuffle.
/// A trailing partial batch is dropped.
pub fn epoch_batches(num_pairs: usize, batch_pairs: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..num_pairs).collect();
    let mut rng = seeding::stream(seed, &[seeding::phase::BATCHES, epoch]);
    order.shuffle(&mut rng);
    order.chunks_exact(batch_pairs.max(1)).map(<[usize]>::to_vec).collect()
}

/// Synthetic comparable corpus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CipherSpec {
    pub num_pairs: usize,
    /// Distinct surface tokens per language.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a target token is resampled uniformly.
    pub noise: f64,
    pub seed: u64,
}

impl CipherSpec {
    pub fn new(num_pairs: usize, vocab_size: usize, seed: u64) -> Self {
        CipherSpec {
            num_pairs,
            vocab_size,
            min_len: 24,
            max_len: 40,
            noise: 0.1,
            seed,
        }
    }
}

/// Pairs whose target side is the source side pushed through a fixed token
/// bijection, plus that bijection (`bijection[k]` is the target index of
/// source token `k`).
#[derive(Clone, Debug, PartialEq)]
pub struct CipherCorpus {
    pub pairs: Vec<DocumentPair>,
    pub bijection: Vec<usize>,
}

pub const CIPHER_SOURCE_LANG: &str = "src";
pub const CIPHER_TARGET_LANG: &str = "cph";

pub fn source_token(k: usize) -> String {
    format!("s{k}")
}

pub fn target_token(k: usize) -> String {
    format!("t{k}")
}

pub fn generate_cipher_corpus(spec: &CipherSpec) -> Result<CipherCorpus> {
    if spec.vocab_size < 10 {
        return Err(Error::contract(format!("cipher vocabulary {} < 10", spec.vocab_size)));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::contract("cipher document length range is empty"));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::contract("cipher noise outside [0, 1]"));
    }
    let mut rng = seeding::stream(spec.seed, &[seeding::phase::CORPUS]);
    let mut bijection: Vec<usize> = (0..spec.vocab_size).collect();
    bijection.shuffle(&mut rng);

    let mut pairs = Vec::with_capacity(spec.num_pairs);
    for i in 0..spec.num_pairs {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.vocab_size)).collect();
        let tgt: Vec<usize> = src
            .iter()
            .map(|&k| {
                if spec.noise > 0.0 && rng.random_bool(spec.noise) {
                    rng.random_range(0..spec.vocab_size)
                } else {
                    bijection[k]
                }
            })
            .collect();
        pairs.push(DocumentPair {
            pair_id: format!("p{i:05}"),
            lang_s: CIPHER_SOURCE_LANG.into(),
            lang_t: CIPHER_TARGET_LANG.into(),
            text_s: join(src.iter().map(|&k| source_token(k))),
            text_t: join(tgt.iter().map(|&k| target_token(k))),
        });
    }
    Ok(CipherCorpus { pairs, bijection })
}

fn join(tokens: impl Iterator<Item = String>) -> String {
    tokens.collect::<Vec<_>>().join(" ")
}

impl CipherCorpus {
    /// Bijection sidecar lines `s_token<TAB>t_token`.
    pub fn format_bijection(&self) -> String {
        let mut out = String::new();
        for (k, t) in self.bijection.iter().enumerate() {
            writeln!(out, "{}\t{}", source_token(k), target_token(*t)).expect("write to String");
        }
        out
    }

    /// Writes the pair file (every pair at grade 6) and the bijection sidecar.
    pub fn write(&self, pairs_path: &Path, bijection_path: &Path) -> Result<()> {
        let records: Vec<GradedPair> = self
            .pairs
            .iter()
            .map(|p| GradedPair {
                pair: p.clone(),
                grade: 6,
            })
            .collect();
        write_pairs(pairs_path, &records)?;
        fsutil::write_atomic(bijection_path, self.format_bijection().as_bytes())
    }

    /// Maps a source-language text token by token through the bijection.
    pub fn translate(&self, source_text: &str) -> String {
        join(source_text.split_whitespace().map(|tok| {
            tok.strip_prefix('s')
                .and_then(|k| k.parse::<usize>().ok())
                .and_then(|k| self.bijection.get(k))
                .map_or_else(|| tok.to_string(), |t| target_token(*t))
        }))
    }
}

/// A batch of `n` random pairs with `len` attended positions and `pad`
/// padding each. Non-CLS positions are replaced by `[MASK]` and labeled with
/// probability `label_rate`. Shared by tests and gradient checks.
pub fn random_span_batch<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    len: usize,
    pad: usize,
    vocab: usize,
    label_rate: f64,
) -> SpanBatch {
    let mut batch = SpanBatch {
        spans: Vec::with_capacity(2 * n),
        pair_index: Vec::with_capacity(2 * n),
        side: Vec::with_capacity(2 * n),
    };
    for i in 0..n {
        for side in [Side::Source, Side::Target] {
            let mut s = crate::encoder::random_span(rng, vocab, len, pad);
            for r in 1..len {
                if rng.random_bool(label_rate) {
                    s.mlm_labels[r] = s.input_ids[r] as i64;
                    s.input_ids[r] = crate::tokenizer::MASK;
                }
            }
            batch.spans.push(s);
            batch.pair_index.push(i);
            batch.side.push(side);
        }
    }
    batch
}
