use std::collections::BTreeMap;

use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{Qrels, RankedList};
use crate::error::{Error, Result};

fn gain(rel: u32) -> f64 {
    2f64.powi(rel as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// DCG of grades listed in rank order, cut at `k`.
pub fn dcg(grades: &[u32], k: usize) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i + 1))
        .sum()
}

/// nDCG@k with gain `2^rel − 1` and discount `log2(rank + 1)`; 0 when the
/// query has no relevant documents.
pub fn ndcg_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("nDCG cutoff k must be at least 1"));
    }
    let judged = qrels.for_query(&ranked.query_id);
    let mut ideal: Vec<u32> = judged.map_or_else(Vec::new, |j| j.values().copied().filter(|g| *g > 0).collect());
    if ideal.is_empty() {
        return Ok(0.0);
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let grades: Vec<u32> = ranked
        .entries
        .iter()
        .map(|e| qrels.grade(&ranked.query_id, &e.doc_id))
        .collect();
    Ok(dcg(&grades, k) / dcg(&ideal, k))
}

/// nDCG@k for every query in `qrels` with at least one relevant document.
/// A query with no ranked list scores 0.
pub fn ndcg_per_query(runs: &[RankedList], qrels: &Qrels, k: usize) -> Result<BTreeMap<String, f64>> {
    let by_id: BTreeMap<&str, &RankedList> = runs.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut out = BTreeMap::new();
    for qid in qrels.query_ids() {
        if !qrels.has_relevant(qid) {
            continue;
        }
        let score = match by_id.get(qid) {
            Some(r) => ndcg_at_k(r, qrels, k)?,
            None => 0.0,
        };
        out.insert(qid.to_string(), score);
    }
    Ok(out)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Outcome of a paired two-tailed t-test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    /// `min(1, p · num_comparisons)`.
    pub p_corrected: f64,
    /// The differences are constant but not all zero: the sample standard
    /// deviation is 0, `t` is infinite and `p` is 0.
    pub degenerate: bool,
}

/// Paired two-tailed t-test on `a − b` with Bonferroni correction.
pub fn paired_t_test(a: &[f64], b: &[f64], num_comparisons: usize) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::contract("a paired t-test needs at least 2 pairs"));
    }
    if num_comparisons == 0 {
        return Err(Error::contract("num_comparisons must be at least 1"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    let (t, p, degenerate) = if d.iter().all(|x| *x == 0.0) {
        (0.0, 1.0, false)
    } else if var == 0.0 {
        (m.signum() * f64::INFINITY, 0.0, true)
    } else {
        let t = m / (var / n).sqrt();
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("n >= 2 gives positive freedom");
        (t, (2.0 * dist.sf(t.abs())).min(1.0), false)
    };
    Ok(TTest {
        t,
        p,
        p_corrected: (p * num_comparisons as f64).min(1.0),
        degenerate,
    })
}

/// Mean relative change over collections.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeImprovement {
    /// Mean of `(with − without) / without` as a fraction.
    pub mean: f64,
    pub used: usize,
    /// Indices of pairs skipped because the baseline was 0.
    pub excluded: Vec<usize>,
}

impl RelativeImprovement {
    pub fn percent(&self) -> f64 {
        100.0 * self.mean
    }
}

/// `mean((with − without) / without)` over `(without, with)` pairs. Pairs
/// with a zero baseline are excluded and listed; if none remain this is an
/// error.
pub fn relative_improvement(pairs: &[(f64, f64)]) -> Result<RelativeImprovement> {
    let mut ratios = Vec::new();
    let mut excluded = Vec::new();
    for (i, &(without, with)) in pairs.iter().enumerate() {
        if without == 0.0 {
            excluded.push(i);
        } else {
            ratios.push((with - without) / without);
        }
    }
    if ratios.is_empty() {
        return Err(Error::contract("no pair has a nonzero baseline"));
    }
    Ok(RelativeImprovement {
        mean: mean(&ratios),
        used: ratios.len(),
        excluded,
    })
}
