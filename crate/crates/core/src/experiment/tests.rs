use super::*;
use crate::encoder::EncoderConfig;
use crate::retrieval_eval::ndcg_at_k;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        cipher: CipherSpec::new(60, 30, seed),
        heldout: 25,
        query_len: 4,
        translation_noise: 0.3,
        candidates: 10,
    }
}

fn small_run() -> RunConfig {
    let mut run = RunConfig {
        steps: 4,
        batch_pairs: 4,
        chunk_pairs: 2,
        window: 12,
        ..RunConfig::default()
    };
    run.encoder = EncoderConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        ff_dim: 32,
        vocab_size: 0,
        max_len: 13,
        middle_layer: 1,
        condenser_layers: 1,
        normalize_tokens: true,
    };
    run
}

#[test]
fn benchmark_is_consistent() {
    let bench = build_benchmark(&small_spec(3)).unwrap();
    assert_eq!(bench.train_pairs.len(), 35);
    assert_eq!(bench.heldout_pairs.len(), 25);
    assert_eq!(bench.triples.len(), 35);
    assert_eq!(bench.docs.len(), 25);
    for ((qid, q), (tid, t)) in bench.queries.iter().zip(&bench.translated_queries) {
        assert_eq!(qid, tid);
        assert_eq!(q.split_whitespace().count(), 4);
        assert_eq!(t.split_whitespace().count(), 4);
        assert!(q.split_whitespace().all(|w| w.starts_with('s')));
        assert!(t.split_whitespace().all(|w| w.starts_with('t')));
        assert_eq!(bench.qrels.for_query(qid).unwrap().len(), 1);
    }
    for (t, p) in bench.triples.iter().zip(&bench.train_pairs) {
        assert_eq!(t.positive, p.text_s);
        assert_ne!(t.negative, t.positive);
        assert!(p.text_s.contains(&t.query));
    }
    let again = build_benchmark(&small_spec(3)).unwrap();
    assert_eq!(again.queries, bench.queries);
    assert_eq!(again.translated_queries, bench.translated_queries);

    let mut bad = small_spec(3);
    bad.heldout = 59;
    assert!(build_benchmark(&bad).is_err());
}

#[test]
fn benchmark_files_round_trip() {
    let bench = build_benchmark(&small_spec(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bench.write(dir.path()).unwrap();
    assert_eq!(read_texts(&dir.path().join(files::DOCS)).unwrap(), bench.docs);
    assert_eq!(read_texts(&dir.path().join(files::QUERIES)).unwrap(), bench.queries);
    assert_eq!(
        crate::retrieval_eval::read_qrels(&dir.path().join(files::QRELS)).unwrap(),
        bench.qrels
    );
    assert_eq!(
        crate::trainer::read_triples(&dir.path().join(files::TRIPLES)).unwrap(),
        bench.triples
    );
    let pairs = crate::corpus::ingest_pairs(&dir.path().join(files::PAIRS)).unwrap();
    assert_eq!(pairs, bench.train_pairs);
}

#[test]
fn texts_reject_bad_lines() {
    let p = Path::new("t");
    assert!(parse_texts("a\tx\na\ty\n", p).is_err());
    assert!(parse_texts("no tab here\n", p).is_err());
    assert!(parse_texts("\tx\n", p).is_err());
    assert_eq!(parse_texts("a\tx y\n\nb\t\n", p).unwrap().len(), 2);
}

#[test]
fn perfect_translation_makes_bm25_exact() {
    let mut spec = small_spec(5);
    spec.translation_noise = 0.0;
    spec.cipher.noise = 0.0;
    spec.query_len = 8;
    spec.cipher.vocab_size = 300;
    let bench = build_benchmark(&spec).unwrap();
    let runs = first_stage(&bench.docs, &bench.translated_queries, 10);
    let scores = score_runs(&runs, &bench.qrels).unwrap();
    assert!(scores.ndcg_10 > 0.9, "{scores:?}");
    for r in &runs {
        assert!(ndcg_at_k(r, &bench.qrels, 100).unwrap() > 0.0);
    }
}

#[test]
fn alignment_and_reranking_shapes() {
    let bench = build_benchmark(&small_spec(6)).unwrap();
    let vocab = bench.vocabulary().unwrap();
    let run = small_run();
    let model = init_params(&run.encoder_for(vocab.len()).unwrap(), 1).unwrap();
    let a = alignment(&model, &vocab, &bench.heldout_pairs).unwrap();
    assert!((0.0..=1.0).contains(&a.accuracy_at_1));
    assert!(a.aligned.is_finite() && a.mismatched.is_finite());
    assert!(alignment(&model, &vocab, &bench.heldout_pairs[..1]).is_err());

    let r = counterpart_rank(&model, &vocab, &bench.heldout_pairs, 9, 0).unwrap();
    assert!((1.0..=10.0).contains(&r));
    assert!(counterpart_rank(&model, &vocab, &bench.heldout_pairs, 25, 0).is_err());

    let candidates = first_stage(&bench.docs, &bench.translated_queries, bench.depth);
    let runs = rerank_runs(
        &model,
        &vocab,
        &bench.queries,
        &bench.docs,
        &candidates,
        SimilarityKind::Cls,
    )
    .unwrap();
    for (a, b) in runs.iter().zip(candidates.iter().filter(|c| !c.is_empty())) {
        assert_eq!(a.query_id, b.query_id);
        let mut x: Vec<_> = a.doc_ids().collect();
        let mut y: Vec<_> = b.doc_ids().collect();
        x.sort_unstable();
        y.sort_unstable();
        assert_eq!(x, y);
    }
}

#[test]
fn run_seed_is_deterministic() {
    let ft = FinetuneConfig {
        steps: 3,
        batch_size: 4,
        max_len: 13,
        ..FinetuneConfig::default()
    };
    let a = run_seed(&small_spec(0), &small_run(), &ft, 9).unwrap();
    let b = run_seed(&small_spec(0), &small_run(), &ft, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seed, 9);
    for s in [a.pretrained, a.random_init] {
        assert!((0.0..=1.0).contains(&s.ndcg_10) && s.ndcg_10 <= s.ndcg_100 + 1e-12);
    }
}

#[test]
fn ablation_grid_and_table() {
    let cells = ablation_cells();
    assert_eq!(cells.len(), 6);
    let labels: std::collections::BTreeSet<_> = cells.iter().map(|(s, c)| cell_label(*s, *c)).collect();
    assert_eq!(labels.len(), 6);
    assert!(labels.contains("none/condenser-off") && labels.contains("maxsim/condenser-on"));

    let bench = build_benchmark(&small_spec(7)).unwrap();
    let vocab = bench.vocabulary().unwrap();
    let inputs = AblationInputs {
        pairs: &bench.train_pairs,
        vocab: &vocab,
        triples: &bench.triples,
        queries: &bench.queries,
        bm25_queries: &bench.translated_queries,
        docs: &bench.docs,
        qrels: &bench.qrels,
        depth: bench.depth,
    };
    let ft = FinetuneConfig {
        steps: 2,
        batch_size: 4,
        max_len: 13,
        ..FinetuneConfig::default()
    };
    let mut seen = 0;
    let rows = run_ablation(&inputs, &small_run(), &ft, &[1, 2], |_, _, _| seen += 1).unwrap();
    assert_eq!(seen, 12);
    assert_eq!(rows.len(), 18);
    for chunk in rows.chunks(3) {
        assert_eq!(chunk[2].seed, None);
        let m = (chunk[0].scores.ndcg_10 + chunk[1].scores.ndcg_10) / 2.0;
        assert!((chunk[2].scores.ndcg_10 - m).abs() < 1e-15);
    }
    let text = format_table(&rows);
    let back = parse_table(&text, Path::new("t")).unwrap();
    assert_eq!(back, rows);
    assert_eq!(format_table(&back), text);
}

#[test]
fn table_rejects_bad_input() {
    let p = Path::new("t");
    assert!(parse_table("", p).is_err());
    assert!(parse_table("wrong\n", p).is_err());
    let h = format!("{TABLE_HEADER}\n");
    assert!(parse_table(&format!("{h}a\tx\t0.1\t0.2\n"), p).is_err());
    assert!(parse_table(&format!("{h}a\t1\t1.5\t0.2\n"), p).is_err());
    assert!(parse_table(&format!("{h}a\t1\t0.5\n"), p).is_err());
    assert_eq!(
        parse_table(&format!("# note\n{h}# more\na\tmean\t0.5\t0.25\n"), p)
            .unwrap()
            .len(),
        1
    );
}
