use std::collections::HashMap;

use super::RankedList;

pub const BM25_K1: f64 = 0.9;
pub const BM25_B: f64 = 0.4;

/// Inverted index over whitespace-tokenized documents.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    doc_lens: Vec<usize>,
    avg_len: f64,
    /// term → (doc index, term frequency), doc indices ascending
    postings: HashMap<String, Vec<(usize, u32)>>,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    pub fn new<I, S, T>(docs: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut doc_ids = Vec::new();
        let mut doc_lens = Vec::new();
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        for (i, (id, text)) in docs.into_iter().enumerate() {
            let mut tf: HashMap<&str, u32> = HashMap::new();
            let mut len = 0;
            for tok in text.as_ref().split_whitespace() {
                *tf.entry(tok).or_default() += 1;
                len += 1;
            }
            let mut terms: Vec<_> = tf.into_iter().collect();
            terms.sort_unstable();
            for (t, c) in terms {
                postings.entry(t.to_string()).or_default().push((i, c));
            }
            doc_ids.push(id.into());
            doc_lens.push(len);
        }
        let avg_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64
        };
        Bm25Index {
            doc_ids,
            doc_lens,
            avg_len,
            postings,
            k1: BM25_K1,
            b: BM25_B,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    /// `ln(1 + (N − df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, df: usize) -> f64 {
        let n = self.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top `k` documents sharing at least one term with `query`. Every query
    /// token occurrence adds its term's contribution; ties go to the smaller
    /// doc id.
    pub fn search(&self, query_id: &str, query: &str, k: usize) -> RankedList {
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for tok in query.split_whitespace() {
            let Some(list) = self.postings.get(tok) else {
                continue;
            };
            let idf = self.idf(list.len());
            for &(d, tf) in list {
                let tf = tf as f64;
                let norm = self.k1 * (1.0 - self.b + self.b * self.doc_lens[d] as f64 / self.avg_len);
                *scores.entry(d).or_default() += idf * tf * (self.k1 + 1.0) / (tf + norm);
            }
        }
        let mut hits: Vec<(String, f64)> = scores.into_iter().map(|(d, s)| (self.doc_ids[d].clone(), s)).collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        hits.truncate(k);
        RankedList::from_sorted(query_id, hits)
    }
}
