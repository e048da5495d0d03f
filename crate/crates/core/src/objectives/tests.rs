use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::random_span_batch;
use crate::encoder::{condenser_logits, encode, init_params, init_params_with_std, mlm_logits, EncoderConfig};
use crate::numerics::{finite_difference_check, ParamStore};

fn m(rows: &[&[f64]]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

fn interleaved(n: usize) -> (Vec<usize>, Vec<Side>) {
    let pairs = (0..n).flat_map(|i| [i, i]).collect();
    let sides = (0..n).flat_map(|_| [Side::Source, Side::Target]).collect();
    (pairs, sides)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn maxsim_examples() {
    let a = m(&[&[1.0, 0.0]]);
    assert_eq!(maxsim(&a, &[true], &a, &[true]).unwrap(), 1.0);
    let b = m(&[&[0.0, 1.0]]);
    assert_eq!(maxsim(&a, &[true], &b, &[true]).unwrap(), 0.0);

    let h1 = m(&[&[1.0, 0.0], &[0.6, 0.8]]);
    let h2 = m(&[&[1.0, 0.0]]);
    assert!((maxsim(&h1, &[true, true], &h2, &[true]).unwrap() - 1.6).abs() < 1e-15);
    assert!((maxsim(&h2, &[true], &h1, &[true, true]).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn maxsim_ignores_padding_and_rejects_empty_spans() {
    let h1 = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let h2 = m(&[&[1.0, 0.0], &[0.0, 5.0]]);
    assert_eq!(maxsim(&h1, &[true, false], &h2, &[true, false]).unwrap(), 1.0);
    assert_eq!(maxsim(&h1, &[true, true], &h2, &[true, false]).unwrap(), 1.0);
    assert!(matches!(
        maxsim(&h1, &[false, false], &h2, &[true, true]),
        Err(Error::Contract(_))
    ));
    assert!(maxsim(&h1, &[true, true], &m(&[&[1.0, 0.0, 0.0]]), &[true]).is_err());
}

#[test]
fn cls_examples() {
    assert_eq!(cls_sim(&[0.6, 0.8], &[0.6, 0.8]).unwrap(), 1.0);
    assert_eq!(cls_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let hand = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    assert!((cls_sim(&a, &b).unwrap() - hand).abs() < 1e-15);
}

#[test]
fn single_pair_has_zero_contrastive_loss() {
    let (p, s) = interleaved(1);
    let sim = m(&[&[3.0, -1.0], &[0.5, 2.0]]);
    assert_eq!(
        contrastive_loss(&sim, &p, &s, ContrastiveOptions::default()).unwrap(),
        0.0
    );
}

#[test]
fn uniform_similarities_give_ln_three() {
    let (p, s) = interleaved(2);
    let sim = Matrix::filled(4, 4, 0.7);
    let loss = contrastive_loss(&sim, &p, &s, ContrastiveOptions::default()).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn one_anchor_against_two_negatives() {
    let (p, s) = interleaved(2);
    let mut sim = Matrix::zeros(4, 4);
    sim[(0, 1)] = 2.0;
    let terms = contrastive_terms(&sim, &p, &s, ContrastiveOptions::default()).unwrap();
    let direct = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
    assert!((terms[0] - direct).abs() < 1e-12);
    assert!((terms[0] - 0.2395).abs() < 5e-5);
}

#[test]
fn temperature_must_be_positive() {
    let (p, s) = interleaved(2);
    let sim = Matrix::zeros(4, 4);
    for tau in [0.0, -1.0, f64::NAN] {
        let opts = ContrastiveOptions {
            temperature: tau,
            ..Default::default()
        };
        assert!(matches!(contrastive_loss(&sim, &p, &s, opts), Err(Error::Contract(_))));
    }
}

#[test]
fn temperature_scales_logits() {
    let (p, s) = interleaved(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sim = random_matrix(4, 4, &mut rng);
    let mut scaled = sim.clone();
    scaled.scale_in_place(2.0);
    let half = ContrastiveOptions {
        temperature: 0.5,
        ..Default::default()
    };
    let a = contrastive_loss(&sim, &p, &s, half).unwrap();
    let b = contrastive_loss(&scaled, &p, &s, ContrastiveOptions::default()).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn literal_indicator_uses_other_pairs_opposite_side() {
    let literal = ContrastiveOptions {
        literal_indicator: true,
        ..Default::default()
    };
    let (p, s) = interleaved(1);
    assert!(contrastive_loss(&Matrix::zeros(2, 2), &p, &s, literal).is_err());

    let (p, s) = interleaved(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sim = random_matrix(4, 4, &mut rng);
    let terms = contrastive_terms(&sim, &p, &s, literal).unwrap();
    // anchor 0 (pair 0, source): only span 3 (pair 1, target) normalizes
    assert!((terms[0] - (sim[(0, 3)] - sim[(0, 1)])).abs() < 1e-12);
    assert!((terms[3] - (sim[(3, 0)] - sim[(3, 2)])).abs() < 1e-12);
}

#[test]
fn malformed_pairing_is_rejected() {
    let sim = Matrix::zeros(4, 4);
    let sides = vec![Side::Source, Side::Source, Side::Target, Side::Target];
    assert!(contrastive_loss(&sim, &[0, 0, 1, 1], &sides, ContrastiveOptions::default()).is_err());
    assert!(contrastive_loss(
        &Matrix::zeros(3, 3),
        &[0, 0, 1, 1],
        &sides,
        ContrastiveOptions::default()
    )
    .is_err());
}

#[test]
fn mlm_loss_examples() {
    let v = 7;
    let uniform = Matrix::filled(3, v, 0.25);
    assert!((mlm_loss(&uniform, &[-1, 4, -1]).unwrap() - (v as f64).ln()).abs() < 1e-14);
    assert_eq!(mlm_loss(&uniform, &[-1, -1, -1]).unwrap(), 0.0);
    assert!(matches!(
        mlm_loss(&uniform, &[7, -1, -1]),
        Err(Error::Index { index: 7, .. })
    ));
    assert!(matches!(mlm_loss(&uniform, &[-2, -1, -1]), Err(Error::Index { .. })));

    let logits = m(&[&[1.0, 2.0, 0.5], &[0.0, 0.0, 3.0], &[4.0, 4.0, 4.0]]);
    let ce = |row: [f64; 3], t: usize| -> f64 {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        -(row[t].exp() / z).ln()
    };
    let direct = (ce([1.0, 2.0, 0.5], 0) + ce([0.0, 0.0, 3.0], 2)) / 2.0;
    assert!((mlm_loss(&logits, &[0, 2, -1]).unwrap() - direct).abs() < 1e-14);
    assert_eq!(
        cdmlm_loss(&logits, &[0, 2, -1]).unwrap(),
        mlm_loss(&logits, &[0, 2, -1]).unwrap()
    );
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss(&[SpanLoss::default(); 4], 2).unwrap(), 0.0);
    let lnv = 11f64.ln();
    let span = SpanLoss {
        contrastive: 0.0,
        mlm: lnv,
        cdmlm: lnv,
    };
    // (1/2)·(2·(0 + ln V + ln V))
    assert!((total_loss(&[span, span], 1).unwrap() - 2.0 * lnv).abs() < 1e-15);
    assert!(total_loss(&[span], 1).is_err());

    let spans = [
        SpanLoss {
            contrastive: 0.5,
            mlm: 2.0,
            cdmlm: 1.0,
        },
        SpanLoss {
            contrastive: 0.25,
            mlm: 3.0,
            cdmlm: 0.0,
        },
    ];
    let b = LossBreakdown::from_spans(&spans, 1).unwrap();
    assert!((b.total - (b.contrastive + b.mlm + b.cdmlm)).abs() < 1e-12);
    assert_eq!(b.mlm, 2.5);
}

#[test]
fn similarity_parsing() {
    assert_eq!(parse_similarity("none").unwrap(), None);
    assert_eq!(parse_similarity("MaxSim").unwrap(), Some(SimilarityKind::MaxSim));
    assert_eq!(parse_similarity("cls").unwrap(), Some(SimilarityKind::Cls));
    assert!(parse_similarity("cosine").is_err());
    for k in [None, Some(SimilarityKind::MaxSim), Some(SimilarityKind::Cls)] {
        assert_eq!(parse_similarity(similarity_name(k)).unwrap(), k);
    }
}

fn toy() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ff_dim: 12,
        vocab_size: 17,
        max_len: 9,
        middle_layer: 1,
        condenser_layers: 1,
        normalize_tokens: true,
    }
}

/// Per-span losses from plain encoder outputs, independent of the tape's
/// weighting and label gathering.
fn oracle_breakdown(model: &Model, batch: &SpanBatch, cfg: &ObjectiveConfig) -> LossBreakdown {
    let n = batch.num_pairs();
    let outs = encode(model, &batch.spans).unwrap();
    let co = match cfg.similarity {
        Some(kind) => {
            let sim = similarity_matrix(kind, &outs).unwrap();
            contrastive_terms(&sim, &batch.pair_index, &batch.side, cfg.contrastive).unwrap()
        }
        None => vec![0.0; 2 * n],
    };
    let mut tape = Tape::inference();
    let enc = forward(&mut tape, model, &batch.spans).unwrap();
    let mlm = mlm_logits(&mut tape, model, &enc).unwrap();
    let cd = if cfg.condenser {
        Some(condenser_logits(&mut tape, model, &enc).unwrap())
    } else {
        None
    };
    let per_span: Vec<SpanLoss> = enc
        .segments
        .iter()
        .zip(&batch.spans)
        .enumerate()
        .map(|(a, (seg, span))| {
            let rows = |v: Var| tape.value(v).slice_rows(seg.start, seg.len());
            SpanLoss {
                contrastive: co[a],
                mlm: mlm_loss(&rows(mlm), &span.mlm_labels).unwrap(),
                cdmlm: cd.map_or(0.0, |v| cdmlm_loss(&rows(v), &span.mlm_labels).unwrap()),
            }
        })
        .collect();
    LossBreakdown::from_spans(&per_span, n).unwrap()
}

fn all_configs() -> Vec<ObjectiveConfig> {
    let mut out = Vec::new();
    for similarity in [None, Some(SimilarityKind::Cls), Some(SimilarityKind::MaxSim)] {
        for condenser in [false, true] {
            out.push(ObjectiveConfig {
                similarity,
                condenser,
                contrastive: ContrastiveOptions::default(),
            });
        }
    }
    out
}

#[test]
fn tape_loss_matches_per_span_oracle() {
    let model = init_params(&toy(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = random_span_batch(&mut rng, 3, 7, 2, 17, 0.3);
    for cfg in all_configs() {
        let mut tape = Tape::new();
        let (_, loss) = batch_loss(&mut tape, &model, &batch, &cfg).unwrap();
        let got = loss.breakdown(&tape).unwrap();
        let want = oracle_breakdown(&model, &batch, &cfg);
        for (g, w) in [
            (got.contrastive, want.contrastive),
            (got.mlm, want.mlm),
            (got.cdmlm, want.cdmlm),
            (got.total, want.total),
        ] {
            assert!((g - w).abs() < 1e-12, "{cfg:?}: {got} vs {want}");
        }
        assert!((got.total - (got.contrastive + got.mlm + got.cdmlm)).abs() < 1e-12);
        if cfg.similarity.is_none() {
            assert_eq!(got.contrastive, 0.0);
        }
        if !cfg.condenser {
            assert_eq!(got.cdmlm, 0.0);
        }
    }
}

#[test]
fn no_contrastive_no_condenser_is_mean_mlm() {
    let model = init_params(&toy(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = random_span_batch(&mut rng, 2, 6, 1, 17, 0.4);
    let cfg = ObjectiveConfig {
        similarity: None,
        condenser: false,
        contrastive: ContrastiveOptions::default(),
    };
    let mut tape = Tape::new();
    let (enc, loss) = batch_loss(&mut tape, &model, &batch, &cfg).unwrap();
    let logits = mlm_logits(&mut tape, &model, &enc).unwrap();
    let mean: f64 = enc
        .segments
        .iter()
        .zip(&batch.spans)
        .map(|(seg, s)| mlm_loss(&tape.value(logits).slice_rows(seg.start, seg.len()), &s.mlm_labels).unwrap())
        .sum::<f64>()
        / 4.0;
    assert!((tape.scalar_value(loss.total).unwrap() - mean).abs() < 1e-12);
}

#[test]
fn spans_without_labels_contribute_zero_mlm() {
    let model = init_params(&toy(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let batch = random_span_batch(&mut rng, 2, 6, 0, 17, 0.0);
    let mut tape = Tape::new();
    let (_, loss) = batch_loss(&mut tape, &model, &batch, &ObjectiveConfig::default()).unwrap();
    let b = loss.breakdown(&tape).unwrap();
    assert_eq!((b.mlm, b.cdmlm), (0.0, 0.0));
    assert!(b.contrastive > 0.0);
}

fn reps_store(kind: SimilarityKind, n: usize, seed: u64) -> (ParamStore, Arc<[Segment]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lens: Vec<usize> = (0..2 * n).map(|_| rng.random_range(2..5)).collect();
    let mut start = 0;
    let segs: Arc<[Segment]> = lens
        .iter()
        .map(|&l| {
            let mut mask = vec![true; l];
            mask[l - 1] = l == 2;
            let s = Segment { start, mask };
            start += l;
            s
        })
        .collect();
    let rows = match kind {
        SimilarityKind::MaxSim => start,
        SimilarityKind::Cls => 2 * n,
    };
    let mut store = ParamStore::new();
    store.insert("reps", random_matrix(rows, 5, &mut rng)).unwrap();
    (store, segs)
}

#[test]
fn contrastive_gradient_matches_differences() {
    for kind in [SimilarityKind::MaxSim, SimilarityKind::Cls] {
        for literal in [false, true] {
            let n = 3;
            let (mut store, segs) = reps_store(kind, n, 11);
            let (p, s) = interleaved(n);
            let opts = ContrastiveOptions {
                temperature: 0.7,
                literal_indicator: literal,
            };
            let report = finite_difference_check(
                &mut store,
                |st, t| {
                    let reps = t.param(st, st.require("reps")?);
                    contrastive_on_tape(t, kind, reps, &segs, &p, &s, opts, n)
                },
                1e-6,
                None,
                0,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{kind} literal={literal}: {report:?}");
        }
    }
}

#[test]
fn tape_contrastive_matches_value_level() {
    let n = 3;
    let (store, segs) = reps_store(SimilarityKind::MaxSim, n, 12);
    let (p, s) = interleaved(n);
    let reps = &store.get(store.require("reps").unwrap()).value;
    let mut sim = Matrix::zeros(2 * n, 2 * n);
    for a in 0..2 * n {
        for b in 0..2 * n {
            let (sa, sb) = (&segs[a], &segs[b]);
            sim[(a, b)] = maxsim(
                &reps.slice_rows(sa.start, sa.len()),
                &sa.mask,
                &reps.slice_rows(sb.start, sb.len()),
                &sb.mask,
            )
            .unwrap();
        }
    }
    let want = contrastive_loss(&sim, &p, &s, ContrastiveOptions::default()).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(reps.clone());
    let got = contrastive_on_tape(
        &mut tape,
        SimilarityKind::MaxSim,
        v,
        &segs,
        &p,
        &s,
        ContrastiveOptions::default(),
        n,
    )
    .unwrap();
    // weights 1/(2n) per anchor make the tape value the anchor mean
    assert!((tape.scalar_value(got).unwrap() - want).abs() < 1e-12);
}

#[test]
fn maxsim_gradient_reaches_winning_tokens() {
    let n = 2;
    let (mut store, segs) = reps_store(SimilarityKind::MaxSim, n, 13);
    let (p, s) = interleaved(n);
    let id = store.require("reps").unwrap();
    let mut tape = Tape::new();
    let reps = tape.param(&store, id);
    let loss = contrastive_on_tape(
        &mut tape,
        SimilarityKind::MaxSim,
        reps,
        &segs,
        &p,
        &s,
        ContrastiveOptions::default(),
        n,
    )
    .unwrap();
    let grads = tape.backward(loss).unwrap();
    tape.accumulate_param_grads(&grads, &mut store);
    let g = &store.get(id).gradient;
    // a left-side token always contributes its best match, so every attended
    // row receives gradient
    for seg in segs.iter() {
        for r in seg.attended() {
            let norm: f64 = g.row(r).iter().map(|x| x.abs()).sum();
            assert!(norm > 0.0, "row {r} got no gradient");
        }
        for (i, m) in seg.mask.iter().enumerate() {
            if !m {
                assert!(g.row(seg.start + i).iter().all(|x| *x == 0.0));
            }
        }
    }
}

#[test]
fn full_objective_gradients_match_differences() {
    let cfg_model = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let batch = random_span_batch(&mut rng, 2, 6, 1, 17, 0.4);
    for cfg in all_configs() {
        let mut model = init_params_with_std(&cfg_model, 15, 0.1).unwrap();
        let config = model.config.clone();
        let report = finite_difference_check(
            &mut model.params,
            |st, t| {
                let m = Model {
                    config: config.clone(),
                    params: st.clone(),
                };
                Ok(batch_loss(t, &m, &batch, &cfg)?.1.total)
            },
            1e-5,
            Some(3),
            16,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{cfg:?}: {report:?}");
    }
}

fn pair_permuted(sim: &Matrix, perm: &[usize]) -> Matrix {
    // span 2i+s moves to 2·perm[i]+s
    let m = sim.rows();
    let to = |a: usize| 2 * perm[a / 2] + a % 2;
    let mut out = Matrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            out[(to(a), to(b))] = sim[(a, b)];
        }
    }
    out
}

proptest! {
    #[test]
    fn contrastive_is_nonnegative_and_pair_permutation_invariant(
        n in 1usize..5,
        seed in any::<u64>(),
        tau in 0.1f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = random_matrix(2 * n, 2 * n, &mut rng);
        let (p, s) = interleaved(n);
        let opts = ContrastiveOptions { temperature: tau, literal_indicator: false };
        let loss = contrastive_loss(&sim, &p, &s, opts).unwrap();
        prop_assert!(loss >= 0.0);

        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted = contrastive_loss(&pair_permuted(&sim, &perm), &p, &s, opts).unwrap();
        prop_assert!((loss - permuted).abs() < 1e-12);

        let spans: Vec<SpanLoss> = contrastive_terms(&sim, &p, &s, opts).unwrap().into_iter()
            .map(|c| SpanLoss { contrastive: c, mlm: rng.random_range(0.0..3.0), cdmlm: 0.0 })
            .collect();
        let mut shuffled = spans.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        prop_assert!((total_loss(&spans, n).unwrap() - total_loss(&shuffled, n).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn raising_the_positive_lowers_the_anchor_term(
        n in 2usize..5,
        seed in any::<u64>(),
        bump in 1e-3f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = random_matrix(2 * n, 2 * n, &mut rng);
        let (p, s) = interleaved(n);
        let opts = ContrastiveOptions::default();
        let before = contrastive_terms(&sim, &p, &s, opts).unwrap();
        let mut up = sim.clone();
        up[(0, 1)] += bump;
        let after = contrastive_terms(&up, &p, &s, opts).unwrap();
        prop_assert!(after[0] < before[0]);
        for a in 1..2 * n {
            prop_assert_eq!(after[a], before[a]);
        }
    }
}
