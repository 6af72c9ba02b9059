//! Finite-difference checks for every differentiable tape primitive.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use test_embed::tape::NormMode;
use test_embed::{contrast, Encoder, EncoderConfig, ProjectionHead, Segments, Tensor};

use super::{grad_check, rng, weighted_sum};

fn rand_t(dims: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::uniform(dims, -1.5, 1.5, r)
}

/// Relative gradient error of each primitive for one seed.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let a = rand_t(&[3, 4], &mut r);
    let b = rand_t(&[4, 2], &mut r);
    let w = rand_t(&[6], &mut r);
    out.push((
        "matmul",
        grad_check(&[a.clone(), b], |t, v| {
            let p = t.matmul(v[0], v[1])?;
            weighted_sum(t, p, &w)
        }),
    ));

    let w12 = rand_t(&[12], &mut r);
    out.push((
        "transpose",
        grad_check(std::slice::from_ref(&a), |t, v| {
            let p = t.transpose(v[0])?;
            weighted_sum(t, p, &w12)
        }),
    ));

    let a2 = rand_t(&[3, 4], &mut r);
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        out.push((
            name,
            grad_check(&[a.clone(), a2.clone()], |t, v| {
                let p = match which {
                    0 => t.add(v[0], v[1])?,
                    1 => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                weighted_sum(t, p, &w12)
            }),
        ));
    }

    out.push((
        "scale",
        grad_check(std::slice::from_ref(&a), |t, v| {
            let p = t.scale(v[0], -0.7);
            weighted_sum(t, p, &w12)
        }),
    ));

    let rb = rand_t(&[4], &mut r);
    let cb = rand_t(&[3], &mut r);
    out.push((
        "add_row_bias",
        grad_check(&[a.clone(), rb], |t, v| {
            let p = t.add_row_bias(v[0], v[1])?;
            weighted_sum(t, p, &w12)
        }),
    ));
    out.push((
        "add_col_bias",
        grad_check(&[a.clone(), cb], |t, v| {
            let p = t.add_col_bias(v[0], v[1])?;
            weighted_sum(t, p, &w12)
        }),
    ));

    let wide = Tensor::uniform(&[3, 4], -3.0, 3.0, &mut r);
    out.push((
        "gelu",
        grad_check(&[wide], |t, v| {
            let p = t.gelu(v[0]);
            weighted_sum(t, p, &w12)
        }),
    ));

    out.push(("sum", grad_check(std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])))));
    out.push(("mean", grad_check(std::slice::from_ref(&a), |t, v| Ok(t.mean(v[0])))));

    out.push((
        "reshape",
        grad_check(std::slice::from_ref(&a), |t, v| {
            let p = t.reshape(v[0], &[2, 6])?;
            weighted_sum(t, p, &w12)
        }),
    ));

    out.push((
        "normalize_rows",
        grad_check(std::slice::from_ref(&a), |t, v| {
            let p = t.normalize_rows(v[0])?;
            weighted_sum(t, p, &w12)
        }),
    ));

    let w3 = rand_t(&[3], &mut r);
    out.push((
        "row_dot",
        grad_check(&[a.clone(), a2.clone()], |t, v| {
            let p = t.row_dot(v[0], v[1])?;
            weighted_sum(t, p, &w3)
        }),
    ));

    out.push((
        "logsumexp_rows",
        grad_check(std::slice::from_ref(&a), |t, v| {
            let p = t.logsumexp_rows(v[0])?;
            weighted_sum(t, p, &w3)
        }),
    ));

    out.push((
        "pick",
        grad_check(std::slice::from_ref(&a), |t, v| {
            let p = t.pick(v[0], vec![0, 5, 5, 11])?;
            weighted_sum(t, p, &Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]))
        }),
    ));

    let x = rand_t(&[2, 9], &mut r);
    let cw = rand_t(&[3, 2, 3], &mut r);
    let w27 = rand_t(&[27], &mut r);
    let segs = Segments::new(vec![4, 5]).unwrap();
    out.push((
        "conv1d_causal",
        grad_check(&[x.clone(), cw], |t, v| {
            let p = t.conv1d_causal_segments(v[0], v[1], 2, &segs)?;
            weighted_sum(t, p, &w27)
        }),
    ));

    let bx = rand_t(&[3, 7], &mut r);
    let gamma = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
    let beta = rand_t(&[3], &mut r);
    let w21 = rand_t(&[21], &mut r);
    out.push((
        "batch_norm(batch)",
        grad_check(&[bx.clone(), gamma.clone(), beta.clone()], |t, v| {
            let (p, _) = t.batch_norm(v[0], v[1], v[2], NormMode::Batch, 1e-5)?;
            weighted_sum(t, p, &w21)
        }),
    ));
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    out.push((
        "batch_norm(fixed)",
        grad_check(&[bx.clone(), gamma.clone(), beta.clone()], |t, v| {
            let mode = NormMode::Fixed { mean: &rm, var: &rv };
            let (p, _) = t.batch_norm(v[0], v[1], v[2], mode, 1e-5)?;
            weighted_sum(t, p, &w21)
        }),
    ));

    let w6 = rand_t(&[6], &mut r);
    out.push((
        "select_cols",
        grad_check(std::slice::from_ref(&x), |t, v| {
            let p = t.select_cols(v[0], vec![3, 8, 3])?;
            weighted_sum(t, p, &w6)
        }),
    ));

    let c1 = rand_t(&[2, 4], &mut r);
    let w20 = rand_t(&[20], &mut r);
    out.push((
        "concat_rows",
        grad_check(&[a.clone(), c1.clone()], |t, v| {
            let p = t.concat_rows(&[v[0], v[1]])?;
            weighted_sum(t, p, &w20)
        }),
    ));
    let w8 = rand_t(&[8], &mut r);
    out.push((
        "slice_rows",
        grad_check(std::slice::from_ref(&a), |t, v| {
            let p = t.slice_rows(v[0], 1, 3)?;
            weighted_sum(t, p, &w8)
        }),
    ));
    let c2 = rand_t(&[3, 2], &mut r);
    let w18 = rand_t(&[18], &mut r);
    out.push((
        "concat_cols",
        grad_check(&[a.clone(), c2], |t, v| {
            let p = t.concat_cols(v[0], v[1])?;
            weighted_sum(t, p, &w18)
        }),
    ));

    let lg = Tensor::uniform(&[4], 0.5, 1.5, &mut r);
    let lb = rand_t(&[4], &mut r);
    out.push((
        "layer_norm_rows",
        grad_check(&[a.clone(), lg, lb], |t, v| {
            let p = t.layer_norm_rows(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, p, &w12)
        }),
    ));

    let q = rand_t(&[7, 4], &mut r);
    let k = rand_t(&[7, 4], &mut r);
    let vv = rand_t(&[7, 4], &mut r);
    let w28 = rand_t(&[28], &mut r);
    let asegs = Segments::new(vec![3, 4]).unwrap();
    out.push((
        "causal_attention",
        grad_check(&[q, k, vv], |t, v| {
            let p = t.causal_attention(v[0], v[1], v[2], 2, &asegs)?;
            weighted_sum(t, p, &w28)
        }),
    ));

    let u = rand_t(&[5], &mut r);
    let u2 = rand_t(&[5], &mut r);
    out.push((
        "cosine_sim",
        grad_check(&[u.clone(), u2.clone()], |t, v| t.cosine_sim(v[0], v[1])),
    ));
    out.push((
        "mse",
        grad_check(&[u, u2], |t, v| t.mse(v[0], v[1])),
    ));

    out
}

/// Rows scaled so their norms fall in [0.1, 10].
fn spread_rows(dims: &[usize], r: &mut impl Rng) -> Tensor {
    let mut t = Tensor::randn(dims, 1.0, r);
    let cols = dims[1];
    for i in 0..dims[0] {
        let target: f32 = 10f32.powf(r.random_range(-1.0..1.0));
        let row = &mut t.data_mut()[i * cols..(i + 1) * cols];
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v *= target / n);
    }
    t
}

/// Relative gradient error of each contrastive loss for one seed.
pub fn loss_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed ^ 0xabc);
    let mut out = Vec::new();
    let (b, m, q) = (3, 5, 4);

    let e = spread_rows(&[b, m], &mut r);
    let p = spread_rows(&[b, m], &mut r);
    let n = spread_rows(&[q, m], &mut r);
    out.push((
        "instance_loss",
        grad_check(&[e.clone(), p.clone(), n], |t, v| {
            contrast::instance_loss_projected(t, v[0], v[1], v[2], 0.5)
        }),
    ));

    // The feature loss normalizes columns, so spread column norms instead.
    let cols = |r: &mut ChaCha8Rng| spread_rows(&[m, b], r).transpose().unwrap();
    let (fw, fs, fneg) = (cols(&mut r), cols(&mut r), cols(&mut r));
    out.push((
        "feature_loss",
        grad_check(&[fw, fs, fneg], |t, v| {
            contrast::feature_loss(t, v[0], v[1], v[2], 0.5)
        }),
    ));

    let neg = spread_rows(&[b, m], &mut r);
    let tp = spread_rows(&[2, m], &mut r);
    out.push((
        "text_align_loss",
        grad_check(&[e, p, neg], |t, v| {
            Ok(contrast::text_align_loss(t, v[0], v[1], v[2], &tp, 0.5)?.total)
        }),
    ));
    out
}

/// Relative gradient error of the combined phase-1 objective with respect to
/// every encoder and projection parameter of a tiny encoder.
pub fn encoder_loss_error(seed: u64) -> f64 {
    let mut r = rng(seed ^ 0xe4c);
    let cfg = EncoderConfig {
        num_blocks: 2,
        hidden: 3,
        kernel: 2,
        embed_dim: 4,
        momentum: 0.9,
    };
    let enc = Encoder::new(cfg, 1, &mut r).unwrap();
    let head = ProjectionHead::new(4, &mut r);
    let tokens: Vec<Tensor> = [5, 6, 4, 7, 5, 6]
        .iter()
        .map(|&l| Tensor::uniform(&[1, l], -1.5, 1.5, &mut r))
        .collect();
    let keys = spread_rows(&[2, 4], &mut r);
    let queue = spread_rows(&[3, 4], &mut r);
    let tp = spread_rows(&[2, 4], &mut r);
    let ne = enc.store.len();
    let mut inputs: Vec<Tensor> = enc.store.entries().iter().map(|e| e.value.clone()).collect();
    inputs.extend(head.store.entries().iter().map(|e| e.value.clone()));
    grad_check(&inputs, |t, v| {
        let refs: Vec<&Tensor> = tokens.iter().collect();
        let (emb, _) = enc.forward(t, &v[..ne], &refs, true)?;
        let e = t.slice_rows(emb, 0, 2)?;
        let ep = t.slice_rows(emb, 2, 4)?;
        let en = t.slice_rows(emb, 4, 6)?;
        let k = t.constant(keys.clone());
        let qn = t.constant(queue.clone());
        let hq = head.forward(t, &v[ne..], e)?;
        let hk = head.forward(t, &v[ne..], k)?;
        let hn = head.forward(t, &v[ne..], qn)?;
        let ins = contrast::instance_loss_projected(t, hq, hk, hn, 0.5)?;
        let text = contrast::text_align_loss(t, e, ep, en, &tp, 0.5)?;
        t.add(ins, text.total)
    })
}
