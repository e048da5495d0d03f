//! Whitespace tokenization, vocabulary files and MLM masking.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fsutil;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const NUM_RESERVED: usize = 5;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Label marking positions that carry no MLM target.
pub const IGNORE_LABEL: i64 = -1;

/// Default masking rate (BERT convention).
pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Bijective token/id table. Ids `0..NUM_RESERVED` are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        let index = tokens.iter().cloned().zip(0..).collect();
        Vocabulary { tokens, index }
    }

    /// Ranks whitespace-delimited tokens by frequency (ties lexicographic)
    /// and keeps the top `max_size − NUM_RESERVED`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < NUM_RESERVED {
            return Err(Error::contract(format!(
                "vocabulary size {max_size} is below the {NUM_RESERVED} reserved ids"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED_TOKENS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_RESERVED);

        let mut vocab = Vocabulary::reserved_only();
        for (tok, _) in ranked {
            vocab.index.insert(tok.to_string(), vocab.tokens.len());
            vocab.tokens.push(tok.to_string());
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids of the whitespace tokens of `text`, OOV mapped to UNK. No
    /// special tokens are added.
    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// `[CLS] + token ids`, truncated to `max_len` and PAD-padded.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        if max_len < 2 {
            return Err(Error::contract(format!("max_len {max_len} < 2")));
        }
        Ok(with_cls(&self.token_ids(text), max_len))
    }

    /// Unpadded `[CLS] + ids` of `text`, at most `max_len` long.
    pub fn sequence(&self, text: &str, max_len: usize) -> Result<MaskedSequence> {
        if max_len < 2 {
            return Err(Error::contract(format!("max_len {max_len} < 2")));
        }
        let ids = self.token_ids(text);
        Ok(MaskedSequence::unmasked(with_cls(&ids, 1 + ids.len().min(max_len - 1))))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(buf, "{tok}\t{id}").expect("write to Vec");
        }
        fsutil::write_atomic(path, &buf)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>id".into()))?;
            let id: usize = id.parse().map_err(|_| parse_err(format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(parse_err(format!("id {id} out of sequence")));
            }
            if id < NUM_RESERVED && tok != RESERVED_TOKENS[id] {
                return Err(parse_err(format!("reserved id {id} must be {}", RESERVED_TOKENS[id])));
            }
            if index.insert(tok.to_string(), id).is_some() {
                return Err(parse_err(format!("duplicate token {tok:?}")));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < NUM_RESERVED {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: tokens.len() + 1,
                msg: "missing reserved tokens".into(),
            });
        }
        Ok(Vocabulary { tokens, index })
    }
}

/// `[CLS] + ids`, truncated to `max_len` and PAD-padded.
pub fn with_cls(ids: &[usize], max_len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(max_len);
    out.push(CLS);
    out.extend(ids.iter().copied().take(max_len.saturating_sub(1)));
    out.resize(max_len, PAD);
    out
}

/// An encoded span ready for the encoder, with its MLM targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub mlm_labels: Vec<i64>,
}

impl MaskedSequence {
    /// A sequence with no MLM targets.
    pub fn unmasked(ids: Vec<usize>) -> Self {
        let attention_mask = ids.iter().map(|&i| u8::from(i != PAD)).collect();
        let mlm_labels = vec![IGNORE_LABEL; ids.len()];
        MaskedSequence {
            input_ids: ids,
            attention_mask,
            mlm_labels,
        }
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn attended(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|m| *m == 1).collect()
    }

    pub fn num_labeled(&self) -> usize {
        self.mlm_labels.iter().filter(|l| **l != IGNORE_LABEL).count()
    }
}

/// Selects each non-reserved position with probability `mask_rate`; selected
/// positions become MASK (80%), a random non-reserved id (10%) or stay
/// unchanged (10%).
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    ids: &[usize],
    vocab: &Vocabulary,
    mask_rate: f64,
    rng: &mut R,
) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::contract(format!("mask rate {mask_rate} outside [0, 1]")));
    }
    let mut seq = MaskedSequence::unmasked(ids.to_vec());
    let has_regular = vocab.len() > NUM_RESERVED;
    for (i, &id) in ids.iter().enumerate() {
        if id < NUM_RESERVED || !rng.random_bool(mask_rate) {
            continue;
        }
        seq.mlm_labels[i] = id as i64;
        let roll: f64 = rng.random();
        if roll < 0.8 {
            seq.input_ids[i] = MASK;
        } else if roll < 0.9 && has_regular {
            seq.input_ids[i] = rng.random_range(NUM_RESERVED..vocab.len());
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small() -> Vocabulary {
        Vocabulary::build(["a a b"], 7).unwrap()
    }

    #[test]
    fn frequency_ranking() {
        let v = small();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
        assert_eq!(v.id("[CLS]"), Some(CLS));
    }

    #[test]
    fn ties_break_lexicographically_and_truncate() {
        let v = Vocabulary::build(["z y x y z w"], 7).unwrap();
        // y and z tie at 2, then w and x tie at 1
        assert_eq!(v.id("y"), Some(5));
        assert_eq!(v.id("z"), Some(6));
        assert_eq!(v.id("w"), None);
    }

    #[test]
    fn empty_corpus_gives_reserved_only() {
        let v = Vocabulary::build(std::iter::empty::<&str>(), 10).unwrap();
        assert_eq!(v.len(), NUM_RESERVED);
    }

    #[test]
    fn reserved_surface_forms_are_not_ranked() {
        let v = Vocabulary::build(["[MASK] [MASK] q"], 10).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("[MASK]"), Some(MASK));
    }

    #[test]
    fn max_size_below_reserved_is_error() {
        assert!(matches!(Vocabulary::build(["a"], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn encode_examples() {
        let v = small();
        assert_eq!(v.encode("a b", 4).unwrap(), vec![1, 5, 6, 0]);
        assert_eq!(v.encode("", 3).unwrap(), vec![1, 0, 0]);
        assert_eq!(v.encode("zzz", 3).unwrap(), vec![1, 4, 0]);
        assert_eq!(v.encode("a a a a", 3).unwrap(), vec![1, 5, 5]);
        assert!(v.encode("a", 1).is_err());
    }

    #[test]
    fn zero_rate_masks_nothing() {
        let v = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids = v.encode("a b a b", 8).unwrap();
        let m = apply_mlm_mask(&ids, &v, 0.0, &mut rng).unwrap();
        assert_eq!(m.input_ids, ids);
        assert!(m.mlm_labels.iter().all(|l| *l == IGNORE_LABEL));
    }

    #[test]
    fn replacement_mix_is_80_10_10() {
        let words: Vec<String> = (0..1000).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        let v = Vocabulary::build([text.as_str()], 1005).unwrap();
        let ids = v.token_ids(&text);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = apply_mlm_mask(&ids, &v, 1.0, &mut rng).unwrap();
        let n = ids.len() as f64;
        let masked = m.input_ids.iter().filter(|i| **i == MASK).count() as f64 / n;
        let same = m.input_ids.iter().zip(&ids).filter(|(a, b)| a == b).count() as f64 / n;
        let random = 1.0 - masked - same;
        assert!((masked - 0.8).abs() < 0.03, "{masked}");
        assert!((same - 0.1).abs() < 0.03, "{same}");
        assert!((random - 0.1).abs() < 0.03, "{random}");
        assert_eq!(m.num_labeled(), ids.len());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let v = Vocabulary::build(["x y y z\tq"], 9).unwrap();
        v.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[PAD]\t0\n[CLS]\t1\n[SEP]\t2\n[MASK]\t3\n[UNK]\t4\n"));
        assert_eq!(Vocabulary::read(&path).unwrap(), v);
    }

    #[test]
    fn vocab_file_rejects_bad_reserved_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        std::fs::write(&path, "[CLS]\t0\n").unwrap();
        assert!(matches!(Vocabulary::read(&path), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn labels_only_on_attended_regular_positions(
            words in prop::collection::vec(0usize..6, 0..20),
            rate in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let v = Vocabulary::build(["a b c d"], 9).unwrap();
            let text: Vec<&str> = words.iter().map(|w| ["a", "b", "c", "d", "oov", "a"][*w]).collect();
            let ids = v.encode(&text.join(" "), 12).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = apply_mlm_mask(&ids, &v, rate, &mut rng).unwrap();
            prop_assert_eq!(m.len(), ids.len());
            prop_assert_eq!(m.attention_mask.len(), ids.len());
            prop_assert_eq!(m.input_ids[0], CLS);
            for i in 0..ids.len() {
                if m.mlm_labels[i] != IGNORE_LABEL {
                    prop_assert!(m.attention_mask[i] == 1 && ids[i] >= NUM_RESERVED);
                    prop_assert_eq!(m.mlm_labels[i], ids[i] as i64);
                }
                if ids[i] == PAD {
                    prop_assert_eq!(m.input_ids[i], PAD);
                    prop_assert_eq!(m.attention_mask[i], 0);
                }
            }
        }

        #[test]
        fn id_token_round_trip(words in prop::collection::vec("[a-e]{1,3}", 1..30)) {
            let text = words.join(" ");
            let v = Vocabulary::build([text.as_str()], 1000).unwrap();
            for w in &words {
                let id = v.id(w).unwrap();
                prop_assert_eq!(v.id(v.token(id).unwrap()), Some(id));
            }
        }
    }
}
