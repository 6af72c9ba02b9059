//! Dilated causal convolution encoder, projection head and decoder.
//!
//! Tokens of different lengths are packed side by side along the time axis
//! and tracked with [`Segments`], so a whole minibatch is one forward pass.

use rand::Rng;

use crate::container::Container;
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tape::{BatchStats, NormMode, Segments, Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub embed_dim: usize,
    pub momentum: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 10,
            hidden: 64,
            kernel: 3,
            embed_dim: 64,
            momentum: 0.99,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.num_blocks > 20 {
            return Err(Error::Parameter(format!(
                "num_blocks must be in 1..=20, got {}",
                self.num_blocks
            )));
        }
        if self.hidden == 0 || self.kernel == 0 || self.embed_dim == 0 {
            return Err(Error::Parameter(
                "hidden, kernel and embed_dim must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum {} outside [0, 1]",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    w1: usize,
    b1: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
    w2: usize,
    b2: usize,
}

/// The embedding function: per-step input projection, residual blocks of
/// GELU → conv → BatchNorm → GELU → conv with dilation `2^i`, and an output
/// block, read out at the last time step of each token.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    channels: usize,
    pub store: ParamStore,
}

fn kaiming(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(dims, (2.0 / fan_in as f32).sqrt(), rng)
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if channels == 0 {
            return Err(Error::Parameter("encoder needs at least one channel".into()));
        }
        let (h, k, m) = (cfg.hidden, cfg.kernel, cfg.embed_dim);
        let mut s = ParamStore::new();
        use ParamKind::{Buffer, Weight};
        s.push("input.w", kaiming(&[h, channels], channels, rng), Weight);
        s.push("input.b", Tensor::zeros(&[h]), Weight);
        for i in 0..cfg.num_blocks {
            s.push(format!("block{i}.conv1.w"), kaiming(&[h, h, k], h * k, rng), Weight);
            s.push(format!("block{i}.conv1.b"), Tensor::zeros(&[h]), Weight);
            s.push(format!("block{i}.bn.gamma"), Tensor::full(&[h], 1.0), Weight);
            s.push(format!("block{i}.bn.beta"), Tensor::zeros(&[h]), Weight);
            s.push(format!("block{i}.bn.running_mean"), Tensor::zeros(&[h]), Buffer);
            s.push(format!("block{i}.bn.running_var"), Tensor::full(&[h], 1.0), Buffer);
            s.push(format!("block{i}.conv2.w"), kaiming(&[h, h, k], h * k, rng), Weight);
            s.push(format!("block{i}.conv2.b"), Tensor::zeros(&[h]), Weight);
        }
        s.push("output.conv.w", kaiming(&[m, h, k], h * k, rng), Weight);
        s.push("output.skip.w", kaiming(&[m, h], h, rng), Weight);
        s.push("output.b", Tensor::zeros(&[m]), Weight);
        Ok(Self {
            cfg,
            channels,
            store: s,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn block(&self, i: usize) -> BlockIdx {
        let base = 2 + 8 * i;
        BlockIdx {
            w1: base,
            b1: base + 1,
            gamma: base + 2,
            beta: base + 3,
            mean: base + 4,
            var: base + 5,
            w2: base + 6,
            b2: base + 7,
        }
    }

    fn output_base(&self) -> usize {
        2 + 8 * self.cfg.num_blocks
    }

    /// Packs tokens `[D, L_b]` side by side into `[D, ΣL_b]`.
    pub fn pack(&self, tokens: &[&Tensor]) -> Result<(Tensor, Segments)> {
        if tokens.is_empty() {
            return Err(Error::Usage("no tokens to encode".into()));
        }
        let mut lens = Vec::with_capacity(tokens.len());
        for t in tokens {
            match t.dims() {
                [d, l] if *d == self.channels => {
                    if *l < crate::data::MIN_LEN {
                        return shape_err(format!("token of length {l} is too short"));
                    }
                    lens.push(*l)
                }
                d => {
                    return shape_err(format!(
                        "encoder built for {} channels, got token {d:?}",
                        self.channels
                    ))
                }
            }
        }
        let n: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(self.channels * n);
        for ch in 0..self.channels {
            for t in tokens {
                data.extend_from_slice(t.row(ch));
            }
        }
        Ok((Tensor::new(vec![self.channels, n], data)?, Segments::new(lens)?))
    }

    /// Embeds a batch of tokens into `[B, M]`.
    ///
    /// `vars` are the handles from `self.store.bind`. With `train` set,
    /// BatchNorm uses batch statistics, which are returned per block.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        tokens: &[&Tensor],
        train: bool,
    ) -> Result<(Var, Vec<BatchStats>)> {
        if vars.len() != self.store.len() {
            return Err(Error::Usage("encoder variables do not match store".into()));
        }
        let (packed, segs) = self.pack(tokens)?;
        let (out, stats) = self.forward_steps(tape, vars, packed, &segs, train)?;
        let emb = tape.select_cols(out, segs.last_indices())?;
        Ok((emb, stats))
    }

    /// Per-step outputs `[M, N]` for packed tokens `[D, N]`.
    fn forward_steps(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        packed: Tensor,
        segs: &Segments,
        train: bool,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let x = tape.constant(packed);
        let h0 = tape.matmul(vars[0], x)?;
        let mut h = tape.add_col_bias(h0, vars[1])?;
        let mut stats = Vec::new();
        for i in 0..self.cfg.num_blocks {
            let b = self.block(i);
            let dil = 1usize << i;
            let a = tape.gelu(h);
            let c1 = tape.conv1d_causal_segments(a, vars[b.w1], dil, segs)?;
            let c1 = tape.add_col_bias(c1, vars[b.b1])?;
            let mode = if train {
                NormMode::Batch
            } else {
                NormMode::Fixed {
                    mean: self.store.get(b.mean).data(),
                    var: self.store.get(b.var).data(),
                }
            };
            let (n, st) = tape.batch_norm(c1, vars[b.gamma], vars[b.beta], mode, BN_EPS)?;
            stats.extend(st);
            let a2 = tape.gelu(n);
            let c2 = tape.conv1d_causal_segments(a2, vars[b.w2], dil, segs)?;
            let c2 = tape.add_col_bias(c2, vars[b.b2])?;
            h = tape.add(h, c2)?;
        }
        let o = self.output_base();
        let a = tape.gelu(h);
        let conv = tape.conv1d_causal_segments(a, vars[o], 1, segs)?;
        let skip = tape.matmul(vars[o + 1], h)?;
        let out = tape.add(conv, skip)?;
        let out = tape.add_col_bias(out, vars[o + 2])?;
        Ok((out, stats))
    }

    /// Inference-mode output at every step of one token, `[M, L]`. Column
    /// `t` depends only on steps `0..=t`; the last column is `encode(token)`.
    pub fn encode_steps(&self, token: &Tensor) -> Result<Tensor> {
        let (packed, segs) = self.pack(&[token])?;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, false);
        let (out, _) = self.forward_steps(&mut tape, &vars, packed, &segs, false)?;
        Ok(tape.value(out).clone())
    }

    /// Folds batch statistics into the running BatchNorm buffers.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.cfg.num_blocks {
            return Err(Error::Usage(format!(
                "expected {} block statistics, got {}",
                self.cfg.num_blocks,
                stats.len()
            )));
        }
        for (i, st) in stats.iter().enumerate() {
            let b = self.block(i);
            for (idx, src) in [(b.mean, &st.mean), (b.var, &st.var)] {
                for (r, &s) in self.store.get_mut(idx).data_mut().iter_mut().zip(src) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
                }
            }
        }
        Ok(())
    }

    /// Inference-mode embeddings `[B, M]` with running statistics.
    pub fn encode_batch(&self, tokens: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, false);
        let (emb, _) = self.forward(&mut tape, &vars, tokens, false)?;
        Ok(tape.value(emb).clone())
    }

    pub fn encode(&self, token: &Tensor) -> Result<Tensor> {
        let e = self.encode_batch(&[token])?;
        Ok(Tensor::vector(e.into_data()))
    }

    /// Encodes in chunks to bound memory on large inputs.
    pub fn encode_many(&self, tokens: &[&Tensor], chunk: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(tokens.len());
        for part in tokens.chunks(chunk.max(1)) {
            let e = self.encode_batch(part)?;
            for r in 0..e.rows() {
                out.push(Tensor::vector(e.row(r).to_vec()));
            }
        }
        Ok(out)
    }

    pub fn export(&self, out: &mut Container, prefix: &str) {
        self.store.export(out, prefix);
    }

    pub fn import(&mut self, src: &Container, prefix: &str) -> Result<()> {
        self.store.import(src, prefix)
    }
}

/// `θ_k ← m·θ_k + (1−m)·θ_q` over every tensor, buffers included.
pub fn momentum_update(query: &Encoder, key: &mut Encoder, m: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Parameter(format!("momentum {m} outside [0, 1]")));
    }
    if !query.store.same_layout(&key.store) {
        return shape_err("query and key encoders differ in architecture");
    }
    for i in 0..key.store.len() {
        let q = query.store.get(i).data();
        for (k, &qv) in key.store.get_mut(i).data_mut().iter_mut().zip(q) {
            *k = m * *k + (1.0 - m) * qv;
        }
    }
    Ok(())
}

/// One-layer MLP `gelu(x·W + b)` applied row-wise to `[B, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub store: ParamStore,
}

impl ProjectionHead {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        store.push("proj.w", kaiming(&[dim, dim], dim, rng), ParamKind::Weight);
        store.push("proj.b", Tensor::zeros(&[dim]), ParamKind::Weight);
        Self { store }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[0])?;
        let y = tape.add_row_bias(y, vars[1])?;
        Ok(tape.gelu(y))
    }
}

/// Affine map from an embedding to `D × L_out` values: the reconstruction
/// of the last `L_out` points of a token, later fine-tuned as a forecaster.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub channels: usize,
    pub out_len: usize,
    pub store: ParamStore,
}

impl Decoder {
    pub fn new(dim: usize, channels: usize, out_len: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || out_len == 0 {
            return Err(Error::Parameter("decoder output must be non-empty".into()));
        }
        let n = channels * out_len;
        let mut store = ParamStore::new();
        store.push(
            "dec.w",
            Tensor::randn(&[dim, n], (1.0 / dim as f32).sqrt(), rng),
            ParamKind::Weight,
        );
        store.push("dec.b", Tensor::zeros(&[n]), ParamKind::Weight);
        Ok(Self {
            channels,
            out_len,
            store,
        })
    }

    /// `[B, M] → [B, D·L_out]`, channel-major within each row.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], e: Var) -> Result<Var> {
        let y = tape.matmul(e, vars[0])?;
        tape.add_row_bias(y, vars[1])
    }

    /// The last `L_out` points of `[D, L]`, left-padded with zeros, flattened
    /// channel-major.
    pub fn target(&self, token: &Tensor) -> Result<Vec<f32>> {
        let [d, l] = token.dims() else {
            return shape_err("decoder target must be [D, L]");
        };
        if *d != self.channels {
            return shape_err(format!("decoder built for {} channels, got {d}", self.channels));
        }
        let mut out = vec![0.0; self.channels * self.out_len];
        let take = (*l).min(self.out_len);
        for ch in 0..*d {
            let row = token.row(ch);
            out[ch * self.out_len + self.out_len - take..(ch + 1) * self.out_len]
                .copy_from_slice(&row[l - take..]);
        }
        Ok(out)
    }
}

/// Mean squared reconstruction error of `[B, D·L_out]` predictions.
pub fn autoencode_loss(tape: &mut Tape, recon: Var, target: Var) -> Result<Var> {
    tape.mse(recon, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            num_blocks: 3,
            hidden: 8,
            kernel: 3,
            embed_dim: 6,
            momentum: 0.9,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn variable_lengths_give_fixed_width() {
        let enc = Encoder::new(small(), 2, &mut rng(0)).unwrap();
        for l in [8, 57] {
            let tok = Tensor::randn(&[2, l], 1.0, &mut rng(l as u64));
            assert_eq!(enc.encode(&tok).unwrap().dims(), &[6]);
        }
        let tok = Tensor::randn(&[3, 8], 1.0, &mut rng(1));
        assert!(matches!(enc.encode(&tok), Err(Error::Shape(_))));
    }

    #[test]
    fn identical_tokens_identical_embeddings() {
        let enc = Encoder::new(small(), 1, &mut rng(0)).unwrap();
        let tok = Tensor::randn(&[1, 12], 1.0, &mut rng(5));
        let batch = enc.encode_batch(&[&tok, &tok]).unwrap();
        assert_eq!(batch.row(0), batch.row(1));
        assert_eq!(enc.encode(&tok).unwrap().data(), batch.row(0));
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut enc = Encoder::new(small(), 1, &mut rng(0)).unwrap();
        let o = enc.output_base();
        for i in 0..enc.store.len() {
            let name = enc.store.entries()[i].name.clone();
            if name.ends_with(".w") {
                let dims = enc.store.get(i).dims().to_vec();
                *enc.store.get_mut(i) = Tensor::zeros(&dims);
            }
        }
        *enc.store.get_mut(o + 2) = Tensor::vector(vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]);
        for l in [4, 9] {
            let tok = Tensor::randn(&[1, l], 3.0, &mut rng(l as u64));
            assert_eq!(enc.encode(&tok).unwrap().data(), &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]);
        }
    }

    #[test]
    fn momentum_update_arithmetic() {
        let q = Encoder::new(small(), 1, &mut rng(0)).unwrap();
        let k0 = Encoder::new(small(), 1, &mut rng(1)).unwrap();

        let mut k = k0.clone();
        momentum_update(&q, &mut k, 1.0).unwrap();
        assert_eq!(k, k0);
        momentum_update(&q, &mut k, 0.0).unwrap();
        assert_eq!(k.store, q.store);

        let mut a = k0.clone();
        let mut b = k0.clone();
        *a.store.get_mut(0) = Tensor::full(a.store.get(0).dims(), 2.0);
        *b.store.get_mut(0) = Tensor::full(b.store.get(0).dims(), 4.0);
        momentum_update(&b, &mut a, 0.5).unwrap();
        assert!(a.store.get(0).data().iter().all(|&v| v == 3.0));

        let other = Encoder::new(EncoderConfig { hidden: 4, ..small() }, 1, &mut rng(0)).unwrap();
        assert!(matches!(momentum_update(&other, &mut k, 0.5), Err(Error::Shape(_))));
        assert!(matches!(momentum_update(&q, &mut k, 1.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn running_stats_follow_batch_stats() {
        let mut enc = Encoder::new(small(), 1, &mut rng(0)).unwrap();
        let stats = vec![
            BatchStats {
                mean: vec![1.0; 8],
                var: vec![3.0; 8],
            };
            3
        ];
        enc.update_running_stats(&stats).unwrap();
        let b = enc.block(1);
        assert!((enc.store.get(b.mean).data()[0] - 0.1).abs() < 1e-7);
        assert!((enc.store.get(b.var).data()[0] - 1.2).abs() < 1e-6);
    }

    #[test]
    fn decoder_targets_pad_on_the_left() {
        let dec = Decoder::new(4, 2, 3, &mut rng(0)).unwrap();
        let long = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]).unwrap();
        assert_eq!(dec.target(&long).unwrap(), vec![2.0, 3.0, 4.0, 6.0, 7.0, 8.0]);
        let dec = Decoder::new(4, 1, 6, &mut rng(0)).unwrap();
        let short = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        assert_eq!(dec.target(&short).unwrap(), vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn autoencode_loss_values() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = autoencode_loss(&mut tape, z, s).unwrap();
        assert!((tape.value(l).item() - 2.5).abs() < 1e-7);
        let l = autoencode_loss(&mut tape, s, s).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let ones = tape.constant(Tensor::full(&[7], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[7]));
        let l = autoencode_loss(&mut tape, zeros, ones).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
    }

    #[test]
    fn left_zero_padding_keeps_readout() {
        // Running stats mean 0 / var 1 with unit gamma make BatchNorm the
        // identity up to the epsilon; biases are zero at init.
        let enc = Encoder::new(small(), 1, &mut rng(3)).unwrap();
        let tok = Tensor::randn(&[1, 10], 1.0, &mut rng(4));
        let pad = (small().kernel - 1) * ((1 << small().num_blocks) - 1) + (small().kernel - 1);
        let mut padded = vec![0.0; pad];
        padded.extend_from_slice(tok.data());
        let padded = Tensor::new(vec![1, pad + 10], padded).unwrap();
        let a = enc.encode(&tok).unwrap();
        let b = enc.encode(&padded).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }
}
