//! End-to-end synthetic runs: pretrain on a cipher corpus, measure
//! cross-language alignment, fine-tune on source-language triples and
//! rerank BM25 candidates for source-language queries over target documents.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::corpus::{generate_cipher_corpus, target_token, CipherCorpus, CipherSpec, DocumentPair, TokenizedPair};
use crate::encoder::{encode, init_params, Model};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::objectives::{maxsim, similarity_name, SimilarityKind};
use crate::retrieval_eval::{mean, ndcg_per_query, rerank, Bm25Index, Qrels, RankedList};
use crate::seeding;
use crate::tokenizer::{MaskedSequence, Vocabulary};
use crate::trainer::{finetune, pretrain, FinetuneConfig, FinetuneObjective, LogRecord, RunConfig, TrainingTriple};

/// Shape of a synthetic benchmark built from one cipher corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub cipher: CipherSpec,
    /// Pairs withheld from pretraining and used for evaluation.
    pub heldout: usize,
    /// Tokens per query, cut from the source side.
    pub query_len: usize,
    /// Chance that a token of the machine-translated BM25 query is wrong.
    pub translation_noise: f64,
    /// BM25 depth handed to the reranker.
    pub candidates: usize,
}

impl SyntheticSpec {
    pub fn new(seed: u64) -> Self {
        SyntheticSpec {
            cipher: CipherSpec::new(500, 200, seed),
            heldout: 50,
            query_len: 6,
            translation_noise: 0.5,
            candidates: 20,
        }
    }
}

/// Texts keyed by id, in file order.
pub type Texts = Vec<(String, String)>;

/// A cipher corpus split for pretraining, fine-tuning and evaluation.
///
/// Queries are source-language, documents target-language. Query `q{i}` has
/// exactly one relevant document `d{i}` (grade 1): the target side of the
/// held-out pair it was cut from.
#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub corpus: CipherCorpus,
    pub train_pairs: Vec<DocumentPair>,
    pub heldout_pairs: Vec<DocumentPair>,
    /// Monolingual source-language triples over the training pairs.
    pub triples: Vec<TrainingTriple>,
    pub docs: Texts,
    pub queries: Texts,
    /// Queries pushed through a noisy translation, for BM25.
    pub translated_queries: Texts,
    pub qrels: Qrels,
    /// BM25 depth handed to the reranker.
    pub depth: usize,
}

fn sub_span<R: Rng + ?Sized>(text: &str, len: usize, rng: &mut R) -> String {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let len = len.min(toks.len());
    let start = rng.random_range(0..=toks.len() - len);
    toks[start..start + len].join(" ")
}

pub fn build_benchmark(spec: &SyntheticSpec) -> Result<SyntheticBenchmark> {
    let n = spec.cipher.num_pairs;
    if spec.heldout == 0 || spec.heldout + 2 > n {
        return Err(Error::contract(format!(
            "cannot hold out {} of {n} pairs",
            spec.heldout
        )));
    }
    if spec.query_len == 0 || spec.candidates == 0 {
        return Err(Error::contract("query_len and candidates must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.translation_noise) {
        return Err(Error::contract("translation_noise outside [0, 1]"));
    }
    let corpus = generate_cipher_corpus(&spec.cipher)?;
    let mut rng = seeding::stream(spec.cipher.seed, &[seeding::phase::EVAL]);
    let (train, heldout) = corpus.pairs.split_at(n - spec.heldout);

    let mut triples = Vec::with_capacity(train.len());
    for (i, p) in train.iter().enumerate() {
        let mut j = rng.random_range(0..train.len() - 1);
        if j >= i {
            j += 1;
        }
        triples.push(TrainingTriple {
            query: sub_span(&p.text_s, spec.query_len, &mut rng),
            positive: p.text_s.clone(),
            negative: train[j].text_s.clone(),
        });
    }

    let mut docs = Vec::new();
    let mut queries = Vec::new();
    let mut translated = Vec::new();
    let mut qrels = Qrels::new();
    for (i, p) in heldout.iter().enumerate() {
        let (qid, did) = (format!("q{i:03}"), format!("d{i:03}"));
        let query = sub_span(&p.text_s, spec.query_len, &mut rng);
        let noisy: Vec<String> = corpus
            .translate(&query)
            .split_whitespace()
            .map(|t| {
                if rng.random_bool(spec.translation_noise) {
                    target_token(rng.random_range(0..spec.cipher.vocab_size))
                } else {
                    t.to_string()
                }
            })
            .collect();
        qrels.insert(qid.clone(), did.clone(), 1);
        docs.push((did, p.text_t.clone()));
        translated.push((qid.clone(), noisy.join(" ")));
        queries.push((qid, query));
    }
    Ok(SyntheticBenchmark {
        train_pairs: train.to_vec(),
        heldout_pairs: heldout.to_vec(),
        corpus,
        triples,
        docs,
        queries,
        translated_queries: translated,
        qrels,
        depth: spec.candidates,
    })
}

impl SyntheticBenchmark {
    /// Vocabulary over every text in the corpus.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let texts = self
            .corpus
            .pairs
            .iter()
            .flat_map(|p| [p.text_s.as_str(), p.text_t.as_str()]);
        Vocabulary::build(texts, usize::MAX)
    }

    /// Writes every artifact into `dir` under the names used by the CLI.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let train = CipherCorpus {
            pairs: self.train_pairs.clone(),
            bijection: self.corpus.bijection.clone(),
        };
        train.write(&dir.join(files::PAIRS), &dir.join(files::BIJECTION))?;
        crate::trainer::write_triples(&dir.join(files::TRIPLES), &self.triples)?;
        write_texts(&dir.join(files::DOCS), &self.docs)?;
        write_texts(&dir.join(files::QUERIES), &self.queries)?;
        write_texts(&dir.join(files::TRANSLATED_QUERIES), &self.translated_queries)?;
        crate::retrieval_eval::write_qrels(&dir.join(files::QRELS), &self.qrels)
    }
}

/// File names inside a benchmark directory.
pub mod files {
    pub const PAIRS: &str = "pairs.tsv";
    pub const BIJECTION: &str = "bijection.tsv";
    pub const TRIPLES: &str = "triples.tsv";
    pub const DOCS: &str = "docs.tsv";
    pub const QUERIES: &str = "queries.tsv";
    pub const TRANSLATED_QUERIES: &str = "queries.translated.tsv";
    pub const QRELS: &str = "qrels.txt";
}

/// Parses `id<TAB>text` lines.
pub fn parse_texts(text: &str, path: &Path) -> Result<Texts> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| err("expected id<TAB>text".into()))?;
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(err(format!("bad id {id:?}")));
        }
        if !seen.insert(id.to_string()) {
            return Err(err(format!("duplicate id {id}")));
        }
        out.push((id.to_string(), body.to_string()));
    }
    Ok(out)
}

pub fn read_texts(path: &Path) -> Result<Texts> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let texts = parse_texts(&text, path)?;
    if texts.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(texts)
}

pub fn write_texts(path: &Path, texts: &Texts) -> Result<()> {
    let mut out = String::new();
    for (id, body) in texts {
        if body.contains(['\t', '\n', '\r']) {
            return Err(Error::contract(format!("text {id} contains a tab or newline")));
        }
        let _ = writeln!(out, "{id}\t{body}");
    }
    fsutil::write_atomic(path, out.as_bytes())
}

/// MaxSim between held-out source and target sides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentReport {
    /// Mean score of each source side against its own target side.
    pub aligned: f64,
    /// Mean score against every other pair's target side.
    pub mismatched: f64,
    /// Fraction of source sides whose own target side scores strictly
    /// highest among all target sides.
    pub accuracy_at_1: f64,
}

pub fn alignment(model: &Model, vocab: &Vocabulary, pairs: &[DocumentPair]) -> Result<AlignmentReport> {
    if pairs.len() < 2 {
        return Err(Error::contract("alignment needs at least 2 pairs"));
    }
    let max_len = model.config.max_len;
    let seqs = |f: fn(&DocumentPair) -> &str| -> Result<Vec<MaskedSequence>> {
        pairs.iter().map(|p| vocab.sequence(f(p), max_len)).collect()
    };
    let src = encode(model, &seqs(|p| &p.text_s)?)?;
    let tgt = encode(model, &seqs(|p| &p.text_t)?)?;
    let n = pairs.len();
    let (mut aligned, mut mismatched, mut hits) = (0.0, 0.0, 0);
    for (i, s) in src.iter().enumerate() {
        let row = tgt
            .iter()
            .map(|t| maxsim(&s.last_tokens, &s.attention_mask, &t.last_tokens, &t.attention_mask))
            .collect::<Result<Vec<f64>>>()?;
        aligned += row[i];
        mismatched += row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| v)
            .sum::<f64>();
        if row.iter().enumerate().all(|(j, v)| j == i || *v < row[i]) {
            hits += 1;
        }
    }
    Ok(AlignmentReport {
        aligned: aligned / n as f64,
        mismatched: mismatched / (n * (n - 1)) as f64,
        accuracy_at_1: hits as f64 / n as f64,
    })
}

/// Mean 1-based rank of each source side's own target side when MaxSim
/// reranks it among `distractors` other target sides drawn from `pairs`.
pub fn counterpart_rank(
    model: &Model,
    vocab: &Vocabulary,
    pairs: &[DocumentPair],
    distractors: usize,
    seed: u64,
) -> Result<f64> {
    if distractors >= pairs.len() {
        return Err(Error::contract(format!(
            "{distractors} distractors need more than {} pairs",
            pairs.len()
        )));
    }
    let max_len = model.config.max_len;
    let targets = pairs
        .iter()
        .map(|p| vocab.sequence(&p.text_t, max_len))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = seeding::stream(seed, &[seeding::phase::EVAL, 1]);
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let others = rand::seq::index::sample(&mut rng, pairs.len() - 1, distractors);
        let mut ids = vec![i];
        ids.extend(others.iter().map(|j| if j >= i { j + 1 } else { j }));
        let candidates = RankedList::from_sorted("q", ids.iter().map(|j| (j.to_string(), 0.0)).collect());
        let query = vocab.sequence(&p.text_s, max_len)?;
        let ranked = rerank(
            model,
            &query,
            &candidates,
            |d| d.parse::<usize>().ok().map(|j| &targets[j]),
            SimilarityKind::MaxSim,
        )?;
        let own = i.to_string();
        total += ranked
            .entries
            .iter()
            .find(|e| e.doc_id == own)
            .expect("candidate kept")
            .rank as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// BM25 top-`k` for every query.
pub fn first_stage(docs: &Texts, queries: &Texts, k: usize) -> Vec<RankedList> {
    let index = Bm25Index::new(docs.iter().map(|(id, t)| (id.clone(), t.as_str())));
    queries.iter().map(|(qid, q)| index.search(qid, q, k)).collect()
}

/// Reranks each first-stage list with the model. `queries` supplies the
/// model-side query text, which may differ from what BM25 saw.
pub fn rerank_runs(
    model: &Model,
    vocab: &Vocabulary,
    queries: &Texts,
    docs: &Texts,
    candidates: &[RankedList],
    scorer: SimilarityKind,
) -> Result<Vec<RankedList>> {
    let max_len = model.config.max_len;
    let doc_seqs = docs
        .iter()
        .map(|(id, t)| Ok((id.as_str(), vocab.sequence(t, max_len)?)))
        .collect::<Result<BTreeMap<&str, MaskedSequence>>>()?;
    let query_text: BTreeMap<&str, &str> = queries.iter().map(|(q, t)| (q.as_str(), t.as_str())).collect();
    candidates
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| {
            let text = query_text
                .get(c.query_id.as_str())
                .ok_or_else(|| Error::contract(format!("no text for query {}", c.query_id)))?;
            let q = vocab.sequence(text, max_len)?;
            rerank(model, &q, c, |d| doc_seqs.get(d), scorer)
        })
        .collect()
}

/// Mean nDCG@10 and nDCG@100 over judged queries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalScores {
    pub ndcg_10: f64,
    pub ndcg_100: f64,
}

pub fn score_runs(runs: &[RankedList], qrels: &Qrels) -> Result<RetrievalScores> {
    let at = |k| -> Result<f64> { Ok(mean(&ndcg_per_query(runs, qrels, k)?.into_values().collect::<Vec<_>>())) };
    Ok(RetrievalScores {
        ndcg_10: at(10)?,
        ndcg_100: at(100)?,
    })
}

/// The similarity used to rerank after fine-tuning with `objective`.
pub fn scorer_for(objective: FinetuneObjective) -> SimilarityKind {
    match objective {
        FinetuneObjective::Colbert => SimilarityKind::MaxSim,
        FinetuneObjective::Dpr => SimilarityKind::Cls,
    }
}

/// Pretrains a fresh model on `pairs`.
pub fn pretrain_fresh(pairs: &[DocumentPair], vocab: &Vocabulary, cfg: &RunConfig) -> Result<(Model, Vec<LogRecord>)> {
    let mut model = init_params(&cfg.encoder_for(vocab.len())?, cfg.seed)?;
    let tokenized: Vec<TokenizedPair> = pairs.iter().map(|p| TokenizedPair::new(p, vocab)).collect();
    let log = pretrain(&mut model, &tokenized, vocab, cfg, |_| {})?;
    Ok((model, log))
}

/// Fine-tunes a copy of `model` and scores its reranking of the BM25 runs.
pub fn finetune_and_evaluate(
    model: &Model,
    bench: &SyntheticBenchmark,
    vocab: &Vocabulary,
    ft: &FinetuneConfig,
) -> Result<RetrievalScores> {
    let mut tuned = model.without_condenser();
    finetune(&mut tuned, &bench.triples, vocab, ft)?;
    let candidates = first_stage(&bench.docs, &bench.translated_queries, bench.depth);
    let runs = rerank_runs(
        &tuned,
        vocab,
        &bench.queries,
        &bench.docs,
        &candidates,
        scorer_for(ft.objective),
    )?;
    score_runs(&runs, &bench.qrels)
}

/// One seed of the pretraining-helps-fine-tuning comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub before: AlignmentReport,
    pub after: AlignmentReport,
    /// Counterpart rank among 20 reranked candidates, before and after.
    pub rank_before: f64,
    pub rank_after: f64,
    pub pretrained: RetrievalScores,
    pub random_init: RetrievalScores,
}

/// Builds the benchmark for `seed`, pretrains with `run` (its seed replaced),
/// then fine-tunes both the pretrained and an untrained model.
pub fn run_seed(spec: &SyntheticSpec, run: &RunConfig, ft: &FinetuneConfig, seed: u64) -> Result<SeedOutcome> {
    let mut spec = spec.clone();
    spec.cipher.seed = seed;
    let bench = build_benchmark(&spec)?;
    let vocab = bench.vocabulary()?;
    let run = RunConfig { seed, ..run.clone() };
    let ft = FinetuneConfig { seed, ..*ft };
    let untrained = init_params(&run.encoder_for(vocab.len())?, seed)?;
    let before = alignment(&untrained, &vocab, &bench.heldout_pairs)?;
    let (pretrained, _) = pretrain_fresh(&bench.train_pairs, &vocab, &run)?;
    let after = alignment(&pretrained, &vocab, &bench.heldout_pairs)?;
    let rank = |m: &Model| counterpart_rank(m, &vocab, &bench.heldout_pairs, 19, seed);
    Ok(SeedOutcome {
        seed,
        before,
        after,
        rank_before: rank(&untrained)?,
        rank_after: rank(&pretrained)?,
        pretrained: finetune_and_evaluate(&pretrained, &bench, &vocab, &ft)?,
        random_init: finetune_and_evaluate(&untrained, &bench, &vocab, &ft)?,
    })
}

/// One line of a metrics table: a labeled run, either one seed or the mean
/// over seeds (`seed == None`).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub seed: Option<u64>,
    pub scores: RetrievalScores,
}

pub const TABLE_HEADER: &str = "label\tseed\tndcg@10\tndcg@100";

/// Tab-separated table under [`TABLE_HEADER`]; a mean row has seed `mean`.
/// Lines starting with `#` are comments.
pub fn format_table(rows: &[MetricsRow]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in rows {
        let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
        let _ = writeln!(out, "{}\t{seed}\t{}\t{}", r.label, r.scores.ndcg_10, r.scores.ndcg_100);
    }
    out
}

pub fn parse_table(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, h)) if h == TABLE_HEADER => {}
        Some((i, h)) => return Err(err(i + 1, format!("expected header {TABLE_HEADER:?}, found {h:?}"))),
        None => return Err(err(0, "no header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 || f[0].is_empty() {
            return Err(err(
                i + 1,
                format!("expected 4 tab-separated fields, found {}", f.len()),
            ));
        }
        let seed = match f[1] {
            "mean" => None,
            s => Some(s.parse().map_err(|_| err(i + 1, format!("bad seed {s:?}")))?),
        };
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| err(i + 1, format!("bad number {s:?}")))?;
            if (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                Err(err(i + 1, format!("nDCG {v} outside [0, 1]")))
            }
        };
        rows.push(MetricsRow {
            label: f[0].to_string(),
            seed,
            scores: RetrievalScores {
                ndcg_10: num(f[2])?,
                ndcg_100: num(f[3])?,
            },
        });
    }
    Ok(rows)
}

/// Per-seed rows followed by one mean row for `label`.
pub fn with_mean(label: &str, per_seed: &[(u64, RetrievalScores)]) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = per_seed
        .iter()
        .map(|(seed, scores)| MetricsRow {
            label: label.to_string(),
            seed: Some(*seed),
            scores: *scores,
        })
        .collect();
    let avg = |f: fn(&RetrievalScores) -> f64| mean(&per_seed.iter().map(|(_, s)| f(s)).collect::<Vec<_>>());
    rows.push(MetricsRow {
        label: label.to_string(),
        seed: None,
        scores: RetrievalScores {
            ndcg_10: avg(|s| s.ndcg_10),
            ndcg_100: avg(|s| s.ndcg_100),
        },
    });
    rows
}

/// The six pretraining variants: similarity none/CLS/MaxSim, each with the
/// Condenser head off and on.
pub fn ablation_cells() -> Vec<(Option<SimilarityKind>, bool)> {
    [None, Some(SimilarityKind::Cls), Some(SimilarityKind::MaxSim)]
        .into_iter()
        .flat_map(|s| [(s, false), (s, true)])
        .collect()
}

pub fn cell_label(similarity: Option<SimilarityKind>, condenser: bool) -> String {
    format!(
        "{}/condenser-{}",
        similarity_name(similarity),
        if condenser { "on" } else { "off" }
    )
}

/// Inputs shared by every ablation cell.
pub struct AblationInputs<'a> {
    pub pairs: &'a [DocumentPair],
    pub vocab: &'a Vocabulary,
    pub triples: &'a [TrainingTriple],
    /// Model-side query texts.
    pub queries: &'a Texts,
    /// Query texts for BM25, e.g. translations.
    pub bm25_queries: &'a Texts,
    pub docs: &'a Texts,
    pub qrels: &'a Qrels,
    pub depth: usize,
}

/// Runs every cell for every seed: pretrain, fine-tune, rerank, score.
/// `progress` sees each finished (cell, seed).
pub fn run_ablation(
    inputs: &AblationInputs<'_>,
    run: &RunConfig,
    ft: &FinetuneConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &RetrievalScores),
) -> Result<Vec<MetricsRow>> {
    if seeds.is_empty() {
        return Err(Error::contract("ablation needs at least one seed"));
    }
    let candidates = first_stage(inputs.docs, inputs.bm25_queries, inputs.depth);
    let mut rows = Vec::new();
    for (similarity, condenser) in ablation_cells() {
        let label = cell_label(similarity, condenser);
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let cfg = RunConfig {
                seed,
                similarity,
                condenser,
                ..run.clone()
            };
            let (model, _) = pretrain_fresh(inputs.pairs, inputs.vocab, &cfg)?;
            let mut tuned = model.without_condenser();
            finetune(
                &mut tuned,
                inputs.triples,
                inputs.vocab,
                &FinetuneConfig { seed, ..*ft },
            )?;
            let runs = rerank_runs(
                &tuned,
                inputs.vocab,
                inputs.queries,
                inputs.docs,
                &candidates,
                scorer_for(ft.objective),
            )?;
            let scores = score_runs(&runs, inputs.qrels)?;
            progress(&label, seed, &scores);
            per_seed.push((seed, scores));
        }
        rows.extend(with_mean(&label, &per_seed));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
