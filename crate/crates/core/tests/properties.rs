mod common;

use proptest::prelude::*;
use test_embed::contrast::NegativeQueue;
use test_embed::data::{segment, TimeSeries, TsToken};
use test_embed::prototypes::{nearest_words, prototype_coords};
use test_embed::{PrototypeSet, Segments, Tape, Tensor, VocabMatrix};

use common::oracles::{
    encoder_causality_violations, lm_causality_violations, loss_value_cases, pca_errors, small_encoder,
};
use common::rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_output_ignores_future_and_other_segments(
        seed in 0u64..1000,
        lens in prop::collection::vec(1usize..12, 1..4),
        dilation in 1usize..4,
        pick in 0usize..100,
    ) {
        let mut r = rng(seed);
        let segs = Segments::new(lens.clone()).unwrap();
        let n = segs.total();
        let x = Tensor::randn(&[2, n], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3], 1.0, &mut r);
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.conv1d_causal_segments(xv, wv, dilation, &segs).unwrap();
            t.value(y).clone()
        };
        let base = run(&x);
        // Perturb one step; only later steps of the same segment may change.
        let p = pick % n;
        let (s0, s1) = segs.spans().map(|(o, l)| (o, o + l)).find(|&(a, b)| (a..b).contains(&p)).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[p] += 5.0;
        let moved = run(&x2);
        for c in 0..3 {
            for j in 0..n {
                let same = base.row(c)[j] == moved.row(c)[j];
                if j < p || j < s0 || j >= s1 {
                    prop_assert!(same, "step {j} changed after perturbing {p}");
                }
            }
        }
    }

    #[test]
    fn batched_encoding_is_permutation_equivariant(
        seed in 0u64..1000,
        lens in prop::collection::vec(4usize..20, 2..6),
        rot in 1usize..5,
    ) {
        let enc = small_encoder(seed);
        let mut r = rng(seed + 1);
        let toks: Vec<Tensor> = lens.iter().map(|&l| Tensor::randn(&[2, l], 1.0, &mut r)).collect();
        let refs: Vec<&Tensor> = toks.iter().collect();
        let e = enc.encode_batch(&refs).unwrap();
        let k = rot % toks.len();
        let mut perm: Vec<&Tensor> = refs.clone();
        perm.rotate_left(k);
        let ep = enc.encode_batch(&perm).unwrap();
        for i in 0..toks.len() {
            let j = (i + k) % toks.len();
            for (a, b) in e.row(j).iter().zip(ep.row(i)) {
                prop_assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
            }
        }
        // Each row also matches encoding the token alone.
        let alone = enc.encode(&toks[0]).unwrap();
        for (a, b) in alone.data().iter().zip(e.row(0)) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn prototype_coordinates_are_linear(
        seed in 0u64..1000,
        a in -3.0f32..3.0,
        b in -3.0f32..3.0,
    ) {
        let mut r = rng(seed);
        let tp = PrototypeSet::new(Tensor::randn(&[4, 6], 1.0, &mut r)).unwrap();
        let e1 = Tensor::randn(&[6], 1.0, &mut r);
        let e2 = Tensor::randn(&[6], 1.0, &mut r);
        let mix: Vec<f32> = e1.data().iter().zip(e2.data()).map(|(x, y)| a * x + b * y).collect();
        let mix = Tensor::vector(mix);
        let c1 = prototype_coords(&e1, &tp).unwrap();
        let c2 = prototype_coords(&e2, &tp).unwrap();
        let cm = prototype_coords(&mix, &tp).unwrap();
        for ((x, y), z) in c1.data().iter().zip(c2.data()).zip(cm.data()) {
            let want = a * x + b * y;
            prop_assert!((want - z).abs() <= 1e-4 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn queue_keeps_newest_in_arrival_order(
        capacity in 1usize..20,
        batches in prop::collection::vec(1usize..7, 1..10),
    ) {
        let mut q = NegativeQueue::new(capacity, 2).unwrap();
        let mut all = Vec::new();
        let mut next = 0.0f32;
        for b in batches {
            let rows: Vec<Vec<f32>> = (0..b).map(|_| { next += 1.0; vec![next, -next] }).collect();
            all.extend(rows.iter().cloned());
            q.push(&Tensor::from_rows(&rows).unwrap()).unwrap();
        }
        let want = &all[all.len().saturating_sub(capacity)..];
        prop_assert_eq!(q.len(), want.len());
        for (got, w) in q.iter().zip(want) {
            prop_assert_eq!(got, w.as_slice());
        }
    }

    #[test]
    fn tokens_are_exact_slices_of_their_series(
        seed in 0u64..1000,
        len in 8usize..80,
        lmin in 4usize..10,
        lextra in 0usize..10,
        smin in 1usize..6,
        sextra in 0usize..6,
    ) {
        let mut r = rng(seed);
        let values = Tensor::randn(&[2, len], 1.0, &mut r);
        let s = TimeSeries::new(values, None, None).unwrap();
        let toks = segment(&s, 3, (lmin, lmin + lextra), (smin, smin + sextra), &mut r).unwrap();
        for t in &toks {
            prop_assert_eq!(t.source, 3);
            prop_assert!(t.end <= len && t.start < t.end);
            prop_assert!(t.len() >= lmin.min(len));
            for ch in 0..2 {
                prop_assert_eq!(t.values.row(ch), &s.values.row(ch)[t.start..t.end]);
            }
            let again = TsToken::from_series(&s, 3, t.start, t.end).unwrap();
            prop_assert_eq!(&again, t);
        }
        prop_assert_eq!(toks.is_empty(), len < lmin);
    }

    #[test]
    fn nearest_words_ignore_vocabulary_order(seed in 0u64..1000, shift in 1usize..30) {
        let vocab = VocabMatrix::synthetic(30, 8, seed).unwrap();
        let mut rows: Vec<Vec<f32>> = (0..30).map(|i| vocab.embeddings().row(i).to_vec()).collect();
        let mut words = vocab.tokens().to_vec();
        rows.rotate_left(shift);
        words.rotate_left(shift);
        let rotated = VocabMatrix::new(Tensor::from_rows(&rows).unwrap(), words).unwrap();
        let e = Tensor::randn(&[8], 1.0, &mut rng(seed));
        let a = nearest_words(&e, &vocab, 5).unwrap();
        let b = nearest_words(&e, &rotated, 5).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn pca_matches_dense_eigendecomposition() {
    for seed in 0..10 {
        let e = pca_errors(seed, 4);
        assert!(e.vector <= 1e-4, "seed {seed}: eigenvector error {:.2e}", e.vector);
        assert!(e.orthonormal <= 1e-5, "seed {seed}: gram error {:.2e}", e.orthonormal);
        assert!(e.sign_fixed, "seed {seed}: sign convention");
    }
}

#[test]
fn encoder_stack_and_lm_are_causal() {
    assert_eq!(encoder_causality_violations(100), 0);
    assert_eq!(lm_causality_violations(100), 0);
}

/// Each per-step encoder output equals encoding the matching prefix.
#[test]
fn step_outputs_match_prefix_encodings() {
    let enc = small_encoder(3);
    let mut r = rng(2);
    for case in 0..40 {
        let len = 7 + case % 20;
        let x = Tensor::randn(&[2, len], 1.0, &mut r);
        let a = enc.encode_steps(&x).unwrap();
        let q = 4 + case % (len - 4);
        let e = enc.encode(&x.slice_cols(0, q).unwrap()).unwrap();
        for m in 0..a.rows() {
            let (u, v) = (a.row(m)[q - 1], e.data()[m]);
            assert!((u - v).abs() <= 1e-5 * (1.0 + u.abs()), "case {case}: prefix {q}");
        }
    }
}

#[test]
fn closed_form_loss_values() {
    for (name, got, want) in loss_value_cases() {
        assert!((got - want).abs() <= 1e-6, "{name}: {got} vs {want}");
    }
}
