//! Brute-force references shared by the property and acceptance suites.

use nalgebra::{DMatrix, SymmetricEigen};
use test_embed::contrast::{self, NegativeQueue};
use test_embed::prototypes::pca_prototypes;
use test_embed::promptlm::{FrozenLM, LmConfig};
use test_embed::{Encoder, EncoderConfig, ProjectionHead, Segments, Tape, Tensor, VocabMatrix};

use super::rng;

pub struct PcaErrors {
    /// Largest coordinate difference to the reference eigenvector, up to sign.
    pub vector: f64,
    /// Largest deviation of the Gram matrix from the identity.
    pub orthonormal: f64,
    /// Whether every prototype has a positive largest-magnitude coordinate.
    pub sign_fixed: bool,
}

/// Power-iteration prototypes of a random 50×8 matrix against a dense
/// symmetric eigensolve of its covariance.
pub fn pca_errors(seed: u64, k: usize) -> PcaErrors {
    let mut r = rng(seed);
    // Column scales give a well-separated spectrum.
    let mut x = Tensor::randn(&[50, 8], 1.0, &mut r);
    for row in 0..50 {
        for (j, v) in x.row_mut(row).iter_mut().enumerate() {
            *v *= 1.0 + 0.6 * (8 - j) as f32;
        }
    }
    let words = (0..50).map(|i| format!("w{i}")).collect();
    let vocab = VocabMatrix::new(x.clone(), words).unwrap();
    let tp = pca_prototypes(&vocab, k).unwrap();

    let m = DMatrix::from_fn(50, 8, |i, j| f64::from(x.row(i)[j]));
    let mean = m.row_mean();
    let c = DMatrix::from_fn(50, 8, |i, j| m[(i, j)] - mean[j]);
    let eig = SymmetricEigen::new(c.transpose() * &c);
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let row = |i: usize| -> Vec<f64> { tp.vectors.row(i).iter().map(|&v| f64::from(v)).collect() };
    let mut out = PcaErrors { vector: 0.0, orthonormal: 0.0, sign_fixed: true };
    for (i, &col) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(col);
        let p = row(i);
        let dot: f64 = (0..8).map(|j| v[j] * p[j]).sum();
        for j in 0..8 {
            out.vector = out.vector.max((dot.signum() * v[j] - p[j]).abs());
        }
        for l in 0..k {
            let g: f64 = p.iter().zip(row(l)).map(|(a, b)| a * b).sum();
            let want = if l == i { 1.0 } else { 0.0 };
            out.orthonormal = out.orthonormal.max((g - want).abs());
        }
        let big = p.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        out.sign_fixed &= big > 0.0;
    }
    out
}

pub fn small_encoder(seed: u64) -> Encoder {
    let cfg = EncoderConfig {
        num_blocks: 3,
        hidden: 8,
        kernel: 3,
        embed_dim: 6,
        momentum: 0.99,
    };
    Encoder::new(cfg, 2, &mut rng(seed)).unwrap()
}

/// Number of random position perturbations (out of `cases`) after which an
/// earlier encoder output moved, or the perturbed step itself did not.
pub fn encoder_causality_violations(cases: usize) -> usize {
    let enc = small_encoder(3);
    let mut r = rng(9);
    let mut bad = 0;
    for case in 0..cases {
        let len = 4 + case % 29;
        let x = Tensor::randn(&[2, len], 1.0, &mut r);
        let p = case % len;
        let mut x2 = x.clone();
        x2.row_mut(case % 2)[p] += 2.5;
        let a = enc.encode_steps(&x).unwrap();
        let b = enc.encode_steps(&x2).unwrap();
        let past_fixed = (0..a.rows()).all(|m| a.row(m)[..p] == b.row(m)[..p]);
        let now_moves = (0..a.rows()).any(|m| a.row(m)[p] != b.row(m)[p]);
        bad += usize::from(!(past_fixed && now_moves));
    }
    bad
}

/// Same count for the frozen LM over packed sequences.
pub fn lm_causality_violations(cases: usize) -> usize {
    let lm = FrozenLM::generate(LmConfig::new(8), 11).unwrap();
    let mut r = rng(5);
    let mut bad = 0;
    for case in 0..cases {
        let n = 2 + case % 9;
        let x = Tensor::randn(&[n, 8], 1.0, &mut r);
        let p = 1 + case % (n - 1);
        let mut x2 = x.clone();
        for v in x2.row_mut(p) {
            *v += 3.0;
        }
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let vars = lm.bind(&mut t);
            let xv = t.constant(x.clone());
            let y = lm.forward(&mut t, &vars, xv, &Segments::single(n)).unwrap();
            t.value(y).clone()
        };
        let (a, b) = (run(&x), run(&x2));
        let past_fixed = (0..p).all(|i| a.row(i) == b.row(i));
        bad += usize::from(!(past_fixed && a.row(p) != b.row(p)));
    }
    bad
}

fn scalar(tape: &Tape, v: test_embed::Var) -> f64 {
    f64::from(tape.value(v).item())
}

/// `(name, got, want)` for closed-form loss values.
pub fn loss_value_cases() -> Vec<(&'static str, f64, f64)> {
    let mut out = Vec::new();

    // Identical query, key and negatives make every logit equal.
    let n = 7;
    let mut t = Tape::new();
    let row = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![0.3, -1.2, 0.5]]).unwrap();
    let q = t.constant(row.clone());
    let k = t.constant(row);
    let neg = t.constant(Tensor::from_rows(&vec![vec![0.3, -1.2, 0.5]; n]).unwrap());
    let l = contrast::instance_loss_projected(&mut t, q, k, neg, 0.1).unwrap();
    out.push(("instance_loss uniform logits", scalar(&t, l), ((n + 1) as f64).ln()));

    // Through the queue and projection head as well.
    let mut t = Tape::new();
    let head = ProjectionHead::new(3, &mut rng(0));
    let hv = head.store.bind(&mut t, false);
    let e = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
    let ep = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
    let mut queue = NegativeQueue::new(16, 3).unwrap();
    queue.push(&Tensor::from_rows(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap()).unwrap();
    let l = contrast::instance_loss(&mut t, e, ep, &queue, 0.1, &head, &hv).unwrap();
    out.push(("instance_loss via queue", scalar(&t, l), 5f64.ln()));

    // One feature column, weak = strong = negatives.
    let mut t = Tape::new();
    let m = Tensor::from_rows(&[vec![0.4], vec![-1.1], vec![2.0]]).unwrap();
    let (w, s, ng) = (t.constant(m.clone()), t.constant(m.clone()), t.constant(m));
    let l = contrast::feature_loss(&mut t, w, s, ng, 0.5).unwrap();
    out.push(("feature_loss M=1 identical", scalar(&t, l), 2f64.ln()));

    // Embeddings equal to the (single) prototype.
    let mut t = Tape::new();
    let tp = Tensor::from_rows(&[vec![0.2, -0.7, 1.3, 0.1]]).unwrap();
    let e = t.constant(Tensor::from_rows(&[tp.row(0).to_vec(), tp.row(0).to_vec()]).unwrap());
    let l = contrast::text_alignment(&mut t, e, &tp).unwrap();
    out.push(("text alignment e = prototype", scalar(&t, l), -1.0));
    out
}
