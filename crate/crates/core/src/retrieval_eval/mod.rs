//! BM25 first-stage retrieval, model reranking, nDCG and significance tests.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::{encode, Model};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::objectives::{cls_sim, maxsim, SimilarityKind};
use crate::tokenizer::MaskedSequence;

mod bm25;
mod metrics;

pub use bm25::{Bm25Index, BM25_B, BM25_K1};
pub use metrics::{
    dcg, mean, ndcg_at_k, ndcg_per_query, paired_t_test, relative_improvement, RelativeImprovement, TTest,
};

#[derive(Clone, Debug, PartialEq)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// One query's ranking, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Assigns ranks 1.. to `(doc_id, score)` already in rank order.
    pub fn from_sorted(query_id: impl Into<String>, hits: Vec<(String, f64)>) -> Self {
        RankedList {
            query_id: query_id.into(),
            entries: hits
                .into_iter()
                .enumerate()
                .map(|(i, (doc_id, score))| RankedEntry {
                    doc_id,
                    score,
                    rank: i + 1,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    /// Ranks are 1..=len, scores non-increasing, doc ids unique.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(format!("query {}: entry {} has rank {}", self.query_id, i + 1, e.rank));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(format!("query {}: duplicate doc {}", self.query_id, e.doc_id));
            }
            if i > 0 && e.score > self.entries[i - 1].score {
                return Err(format!("query {}: score rises at rank {}", self.query_id, e.rank));
            }
        }
        Ok(())
    }
}

/// Relevance judgments: query → doc → grade.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), grade);
    }

    /// 0 for unjudged documents.
    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|j| j.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn has_relevant(&self, query_id: &str) -> bool {
        self.for_query(query_id).is_some_and(|j| j.values().any(|g| *g > 0))
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn parse_error(path: &Path, line: usize, msg: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    }
}

/// Parses `qid 0 docid rel` lines.
pub fn parse_qrels(text: &str, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(parse_error(
                path,
                i + 1,
                format!("expected 4 fields, found {}", f.len()),
            ));
        }
        let grade: u32 = f[3]
            .parse()
            .map_err(|_| parse_error(path, i + 1, format!("grade {:?} is not a non-negative integer", f[3])))?;
        qrels.insert(f[0], f[2], grade);
    }
    Ok(qrels)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (q, docs) in &qrels.judgments {
        for (d, g) in docs {
            let _ = writeln!(out, "{q} 0 {d} {g}");
        }
    }
    out
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qrels(&text, path)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    fsutil::write_atomic(path, format_qrels(qrels).as_bytes())
}

/// TREC run lines `qid Q0 docid rank score tag`. Scores use the shortest
/// representation that parses back to the same `f64`.
pub fn format_run(runs: &[RankedList], tag: &str) -> String {
    let mut out = String::new();
    for r in runs {
        for e in &r.entries {
            let _ = writeln!(out, "{} Q0 {} {} {} {tag}", r.query_id, e.doc_id, e.rank, e.score);
        }
    }
    out
}

/// Parses a run file; queries keep their order of first appearance.
pub fn parse_run(text: &str, path: &Path) -> Result<Vec<RankedList>> {
    let mut runs: Vec<RankedList> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(parse_error(
                path,
                i + 1,
                format!("expected 6 fields, found {}", f.len()),
            ));
        }
        let rank: usize = f[3]
            .parse()
            .map_err(|_| parse_error(path, i + 1, format!("bad rank {:?}", f[3])))?;
        let score: f64 = f[4]
            .parse()
            .map_err(|_| parse_error(path, i + 1, format!("bad score {:?}", f[4])))?;
        let slot = *index.entry(f[0].to_string()).or_insert_with(|| {
            runs.push(RankedList {
                query_id: f[0].to_string(),
                entries: Vec::new(),
            });
            runs.len() - 1
        });
        runs[slot].entries.push(RankedEntry {
            doc_id: f[2].to_string(),
            score,
            rank,
        });
    }
    for r in &runs {
        r.validate().map_err(|msg| parse_error(path, 0, msg))?;
    }
    Ok(runs)
}

pub fn read_run(path: &Path) -> Result<Vec<RankedList>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(&text, path)
}

pub fn write_run(path: &Path, runs: &[RankedList], tag: &str) -> Result<()> {
    fsutil::write_atomic(path, format_run(runs, tag).as_bytes())
}

const SCORE_CHUNK: usize = 64;

/// Model scores of `query` against each document.
pub fn score_documents(
    model: &Model,
    query: &MaskedSequence,
    docs: &[&MaskedSequence],
    scorer: SimilarityKind,
) -> Result<Vec<f64>> {
    let q = encode(model, std::slice::from_ref(query))?.remove(0);
    let mut scores = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(SCORE_CHUNK) {
        let owned: Vec<MaskedSequence> = chunk.iter().map(|d| (*d).clone()).collect();
        for d in encode(model, &owned)? {
            scores.push(match scorer {
                SimilarityKind::MaxSim => maxsim(&q.last_tokens, &q.attention_mask, &d.last_tokens, &d.attention_mask)?,
                SimilarityKind::Cls => cls_sim(&q.cls, &d.cls)?,
            });
        }
    }
    Ok(scores)
}

/// Re-scores every candidate with the model and sorts by score, best first.
/// The sort is stable: equal scores keep the candidates' incoming order.
///
/// `lookup` maps a doc id to its encoded text.
pub fn rerank<'a>(
    model: &Model,
    query: &MaskedSequence,
    candidates: &RankedList,
    mut lookup: impl FnMut(&str) -> Option<&'a MaskedSequence>,
    scorer: SimilarityKind,
) -> Result<RankedList> {
    let docs = candidates
        .entries
        .iter()
        .map(|e| lookup(&e.doc_id).ok_or_else(|| Error::contract(format!("candidate {} has no text", e.doc_id))))
        .collect::<Result<Vec<_>>>()?;
    let scores = score_documents(model, query, &docs, scorer)?;
    let mut hits: Vec<(String, f64)> = candidates
        .entries
        .iter()
        .zip(scores)
        .map(|(e, s)| (e.doc_id.clone(), s))
        .collect();
    hits.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(RankedList::from_sorted(candidates.query_id.clone(), hits))
}
