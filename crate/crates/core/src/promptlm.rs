//! Frozen toy causal language model, soft prompt, task heads and the
//! prompt-training loops.
//!
//! The LM is a pre-LN transformer without positional embeddings:
//! `x ← x + Attn(LN₁(x))`, `x ← x + FF(LN₂(x))`. With zero attention output
//! and feed-forward weights every layer is the identity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::container::Container;
use crate::encoder::Decoder;
use crate::error::{shape_err, Error, Result};
use crate::params::{Adam, ParamKind, ParamStore};
use crate::prototypes::VocabMatrix;
use crate::tape::{Segments, Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;
pub const LM_SEED: u64 = 0x1a7e_57ed;
const PER_LAYER: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LmConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl LmConfig {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            layers: 2,
            heads: 2,
            ff_mult: 4,
        }
    }
}

/// Fixed-parameter causal sequence model over `M`-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLM {
    cfg: LmConfig,
    store: ParamStore,
}

impl FrozenLM {
    /// Weights drawn with std `1/√fan_in`; layer-norm gains one, biases zero.
    pub fn generate(cfg: LmConfig, seed: u64) -> Result<Self> {
        let (m, f) = (cfg.width, cfg.width * cfg.ff_mult);
        if m == 0 || cfg.layers == 0 || f == 0 {
            return Err(Error::Parameter("LM sizes must be positive".into()));
        }
        if cfg.heads == 0 || m % cfg.heads != 0 {
            return Err(Error::Parameter(format!("{} heads do not divide width {m}", cfg.heads)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let w = ParamKind::Weight;
        let sd_m = (1.0 / m as f32).sqrt();
        let sd_f = (1.0 / f as f32).sqrt();
        for l in 0..cfg.layers {
            let p = format!("layer{l}.");
            s.push(format!("{p}ln1.gamma"), Tensor::full(&[m], 1.0), w);
            s.push(format!("{p}ln1.beta"), Tensor::zeros(&[m]), w);
            for name in ["wq", "wk", "wv", "wo"] {
                s.push(format!("{p}attn.{name}"), Tensor::randn(&[m, m], sd_m, &mut rng), w);
            }
            s.push(format!("{p}ln2.gamma"), Tensor::full(&[m], 1.0), w);
            s.push(format!("{p}ln2.beta"), Tensor::zeros(&[m]), w);
            s.push(format!("{p}ff.w1"), Tensor::randn(&[m, f], sd_m, &mut rng), w);
            s.push(format!("{p}ff.b1"), Tensor::zeros(&[f]), w);
            s.push(format!("{p}ff.w2"), Tensor::randn(&[f, m], sd_f, &mut rng), w);
            s.push(format!("{p}ff.b2"), Tensor::zeros(&[m]), w);
        }
        Ok(Self { cfg, store: s })
    }

    /// Reads `lm.*` records; the architecture is inferred from their shapes.
    pub fn from_container(c: &Container, heads: usize) -> Result<Self> {
        let m = c.require("lm.layer0.ln1.gamma")?.len();
        let f = c.require("lm.layer0.ff.b1")?.len();
        let layers = (0..)
            .take_while(|l| c.get(&format!("lm.layer{l}.ln1.gamma")).is_some())
            .count();
        if f % m != 0 {
            return Err(Error::Format(format!("feed-forward width {f} is not a multiple of {m}")));
        }
        let cfg = LmConfig {
            width: m,
            layers,
            heads,
            ff_mult: f / m,
        };
        let mut lm = Self::generate(cfg, 0)?;
        lm.store.import(c, "lm.")?;
        Ok(lm)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?, 2)
    }

    pub fn export(&self, out: &mut Container) {
        self.store.export(out, "lm.");
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Zeroes attention output and feed-forward output weights so that
    /// every layer reduces to its residual path.
    pub fn identity(width: usize) -> Result<Self> {
        let mut lm = Self::generate(LmConfig::new(width), 0)?;
        for l in 0..lm.cfg.layers {
            let b = l * PER_LAYER;
            for i in [b + 5, b + 10, b + 11] {
                let dims = lm.store.get(i).dims().to_vec();
                *lm.store.get_mut(i) = Tensor::zeros(&dims);
            }
        }
        Ok(lm)
    }

    /// Runs the layers over packed sequences `x[N, M]`. `vars` come from
    /// binding the store, always as constants.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, segs: &Segments) -> Result<Var> {
        let dims = tape.value(x).dims();
        if dims.len() != 2 || dims[1] != self.cfg.width {
            return shape_err(format!(
                "LM expects [N, {}] inputs, got {dims:?}",
                self.cfg.width
            ));
        }
        let mut h = x;
        for l in 0..self.cfg.layers {
            let v = &vars[l * PER_LAYER..(l + 1) * PER_LAYER];
            let a = tape.layer_norm_rows(h, v[0], v[1], LN_EPS)?;
            let q = tape.matmul(a, v[2])?;
            let k = tape.matmul(a, v[3])?;
            let val = tape.matmul(a, v[4])?;
            let att = tape.causal_attention(q, k, val, self.cfg.heads, segs)?;
            let att = tape.matmul(att, v[5])?;
            h = tape.add(h, att)?;
            let b = tape.layer_norm_rows(h, v[6], v[7], LN_EPS)?;
            let f = tape.matmul(b, v[8])?;
            let f = tape.add_row_bias(f, v[9])?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, v[10])?;
            let f = tape.add_row_bias(f, v[11])?;
            h = tape.add(h, f)?;
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.store.bind(tape, false)
    }
}

/// Trainable `[P, M]` prompt table; `P` may be zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt {
    width: usize,
    pub store: ParamStore,
}

pub const PROMPT_RECORD: &str = "prompt.table";

impl SoftPrompt {
    pub fn new(table: Option<Tensor>, width: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        if let Some(t) = table {
            if t.rank() != 2 || t.cols() != width {
                return shape_err(format!("prompt must be [P, {width}], got {:?}", t.dims()));
            }
            store.push("table", t, ParamKind::Weight);
        }
        Ok(Self { width, store })
    }

    pub fn len(&self) -> usize {
        if self.store.is_empty() {
            0
        } else {
            self.store.get(0).rows()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn table(&self) -> Option<&Tensor> {
        (!self.store.is_empty()).then(|| self.store.get(0))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PromptInit {
    Random,
    TaskTokens(Vec<String>),
}

/// Default task words cycled to fill a prompt of length `p`.
pub fn default_task_words(p: usize) -> Vec<String> {
    const WORDS: [&str; 4] = ["classify", "the", "given", "sequence"];
    WORDS.iter().cycle().take(p).map(|w| (*w).to_owned()).collect()
}

pub fn init_prompt(p: usize, width: usize, mode: &PromptInit, vocab: Option<&VocabMatrix>, rng: &mut impl Rng) -> Result<SoftPrompt> {
    if p == 0 {
        return SoftPrompt::new(None, width);
    }
    let table = match mode {
        PromptInit::Random => {
            let data = (0..p * width)
                .map(|_| loop {
                    let v: f32 = rng.random_range(-0.1..0.1);
                    if v > -0.1 {
                        break v;
                    }
                })
                .collect();
            Tensor::new(vec![p, width], data)?
        }
        PromptInit::TaskTokens(words) => {
            let vocab = vocab.ok_or_else(|| Error::Usage("task-token init needs a vocabulary".into()))?;
            if words.len() != p {
                return Err(Error::Parameter(format!(
                    "{} task words for a prompt of length {p}",
                    words.len()
                )));
            }
            if vocab.width() != width {
                return shape_err(format!("vocab width {} vs prompt width {width}", vocab.width()));
            }
            let rows = words
                .iter()
                .map(|w| vocab.row(w).map(<[f32]>::to_vec))
                .collect::<Result<Vec<_>>>()?;
            Tensor::from_rows(&rows)?
        }
    };
    SoftPrompt::new(Some(table), width)
}

/// Which source produced a position of the LM input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Prompt(usize),
    Series(usize),
}

pub struct PromptedOutput {
    /// Final-position LM outputs `[B, M]`.
    pub out: Var,
    /// Per sample, the source of every input position.
    pub provenance: Vec<Vec<Provenance>>,
}

/// Runs the LM over `[pe; e_b]` for every sample `b` and reads the final
/// position. `prompt` is the bound table (absent when `P = 0`); each entry of
/// `seqs` is a `[n_b, M]` node.
pub fn forward_with_prompt_batch(
    tape: &mut Tape,
    lm: &FrozenLM,
    lm_vars: &[Var],
    prompt: Option<Var>,
    seqs: &[Var],
) -> Result<PromptedOutput> {
    let m = lm.width();
    let p = match prompt {
        Some(pv) => {
            let d = tape.value(pv).dims();
            if d.len() != 2 || d[1] != m {
                return shape_err(format!("prompt {d:?} does not match LM width {m}"));
            }
            d[0]
        }
        None => 0,
    };
    let mut parts = Vec::with_capacity(seqs.len() * 2);
    let mut lens = Vec::with_capacity(seqs.len());
    let mut provenance = Vec::with_capacity(seqs.len());
    for &s in seqs {
        let d = tape.value(s).dims();
        if d.len() != 2 || d[1] != m {
            return shape_err(format!("series embeddings {d:?} do not match LM width {m}"));
        }
        let n = d[0];
        if let Some(pv) = prompt {
            parts.push(pv);
        }
        parts.push(s);
        lens.push(p + n);
        provenance.push(
            (0..p)
                .map(Provenance::Prompt)
                .chain((0..n).map(Provenance::Series))
                .collect(),
        );
    }
    if seqs.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let segs = Segments::new(lens)?;
    let x = tape.concat_rows(&parts)?;
    let h = lm.forward(tape, lm_vars, x, &segs)?;
    let ht = tape.transpose(h)?;
    let out = tape.select_cols(ht, segs.last_indices())?;
    Ok(PromptedOutput { out, provenance })
}

/// Single-sequence convenience wrapper: returns the final output `[M]`.
pub fn forward_with_prompt(pe: &SoftPrompt, e_seq: &[Tensor], lm: &FrozenLM) -> Result<Tensor> {
    let mut tape = Tape::new();
    let lm_vars = lm.bind(&mut tape);
    let prompt = pe.table().map(|t| tape.constant(t.clone()));
    if pe.width() != lm.width() {
        return shape_err("prompt width does not match LM");
    }
    if pe.is_empty() && e_seq.is_empty() {
        return shape_err("nothing to run: empty prompt and empty sequence");
    }
    let seq = if e_seq.is_empty() {
        // Prompt-only input: run on the table alone.
        let pv = prompt.expect("non-empty prompt");
        let segs = Segments::single(pe.len());
        let h = lm.forward(&mut tape, &lm_vars, pv, &segs)?;
        let last = tape.value(h).row(pe.len() - 1).to_vec();
        return Ok(Tensor::vector(last));
    } else {
        tape.constant(Tensor::stack(e_seq)?)
    };
    let r = forward_with_prompt_batch(&mut tape, lm, &lm_vars, prompt, &[seq])?;
    Ok(Tensor::vector(tape.value(r.out).row(0).to_vec()))
}

/// Affine classifier `M → C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub store: ParamStore,
}

impl Classifier {
    pub fn new(width: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::DegenerateTask(format!("{classes} class(es)")));
        }
        let mut store = ParamStore::new();
        store.push(
            "cls.w",
            Tensor::randn(&[width, classes], (1.0 / width as f32).sqrt(), rng),
            ParamKind::Weight,
        );
        store.push("cls.b", Tensor::zeros(&[classes]), ParamKind::Weight);
        Ok(Self { store })
    }

    pub fn classes(&self) -> usize {
        self.store.get(1).len()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[0])?;
        tape.add_row_bias(y, vars[1])
    }
}

/// Mean cross-entropy of logits `[B, C]` against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let c = tape.value(logits).cols();
    if labels.len() != tape.value(logits).rows() || labels.iter().any(|&l| l >= c) {
        return shape_err("labels do not match logits");
    }
    let lse = tape.logsumexp_rows(logits)?;
    let picked = tape.pick(logits, labels.iter().enumerate().map(|(i, &l)| i * c + l).collect())?;
    let per = tape.sub(lse, picked)?;
    Ok(tape.mean(per))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PromptHyper {
    pub epochs: usize,
    pub lr: f32,
    pub lr_decoder: f32,
    pub batch: usize,
    pub patience: usize,
}

impl Default for PromptHyper {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            lr_decoder: 1e-3,
            batch: 32,
            patience: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

struct Plateau {
    best: f64,
    since: usize,
    patience: usize,
}

impl Plateau {
    fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            since: 0,
            patience,
        }
    }

    /// True once `patience` epochs pass without a relative improvement.
    fn stop(&mut self, loss: f64) -> bool {
        if !self.best.is_finite() || loss < self.best - 1e-6 * self.best.abs() {
            self.best = loss;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.patience > 0 && self.since >= self.patience
    }
}

fn check_seqs(seqs: &[Tensor], width: usize) -> Result<()> {
    for s in seqs {
        if s.rank() != 2 || s.cols() != width {
            return shape_err(format!("sequence {:?} does not match width {width}", s.dims()));
        }
    }
    Ok(())
}

/// Trains the prompt and classifier on cross-entropy through the frozen LM.
/// `seqs[i]` holds the frozen encoder's token embeddings `[n_i, M]` of
/// series `i`.
pub fn train_prompt_classify(
    seqs: &[Tensor],
    labels: &[usize],
    lm: &FrozenLM,
    pe: &mut SoftPrompt,
    head: &mut Classifier,
    hyper: &PromptHyper,
    rng: &mut impl Rng,
) -> Result<Vec<EpochMetrics>> {
    if seqs.len() != labels.len() || seqs.is_empty() {
        return shape_err("sequences and labels differ in count");
    }
    check_seqs(seqs, lm.width())?;
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::DegenerateTask("all samples share one class".into()));
    }
    if labels.iter().any(|&l| l >= head.classes()) {
        return shape_err("label exceeds classifier width");
    }
    let mut opt_pe = Adam::new(&pe.store, hyper.lr);
    let mut opt_head = Adam::new(&head.store, hyper.lr);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut metrics = Vec::new();
    let mut plateau = Plateau::new(hyper.patience);
    for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(hyper.batch.max(1)) {
            let mut tape = Tape::new();
            let lm_vars = lm.bind(&mut tape);
            let pv = pe.store.bind(&mut tape, true);
            let hv = head.store.bind(&mut tape, true);
            let xs: Vec<Var> = chunk.iter().map(|&i| tape.constant(seqs[i].clone())).collect();
            let out = forward_with_prompt_batch(&mut tape, lm, &lm_vars, pv.first().copied(), &xs)?;
            let logits = head.forward(&mut tape, &hv, out.out)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&mut tape, logits, &y)?;
            loss_sum += f64::from(tape.value(loss).item()) * chunk.len() as f64;
            correct += argmax_rows(tape.value(logits))
                .iter()
                .zip(&y)
                .filter(|(a, b)| a == b)
                .count();
            let g = tape.backward(loss)?;
            opt_pe.step(&mut pe.store, &pv, &g)?;
            opt_head.step(&mut head.store, &hv, &g)?;
        }
        let loss = loss_sum / seqs.len() as f64;
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            loss,
            accuracy: Some(correct as f64 / seqs.len() as f64),
            mse: None,
        });
        if plateau.stop(loss) {
            break;
        }
    }
    Ok(metrics)
}

/// Trains the prompt and fine-tunes the decoder on MSE against `[D, H]`
/// targets.
pub fn train_prompt_forecast(
    seqs: &[Tensor],
    targets: &[Tensor],
    lm: &FrozenLM,
    pe: &mut SoftPrompt,
    dec: &mut Decoder,
    hyper: &PromptHyper,
    rng: &mut impl Rng,
) -> Result<Vec<EpochMetrics>> {
    if seqs.len() != targets.len() || seqs.is_empty() {
        return shape_err("sequences and targets differ in count");
    }
    check_seqs(seqs, lm.width())?;
    for t in targets {
        if t.dims() != [dec.channels, dec.out_len] {
            return shape_err(format!(
                "target {:?} does not match decoder horizon [{}, {}]",
                t.dims(),
                dec.channels,
                dec.out_len
            ));
        }
    }
    let mut opt_pe = Adam::new(&pe.store, hyper.lr);
    let mut opt_dec = Adam::new(&dec.store, hyper.lr_decoder);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut metrics = Vec::new();
    let mut plateau = Plateau::new(hyper.patience);
    let width = dec.channels * dec.out_len;
    for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        let mut sq_sum = 0.0f64;
        for chunk in order.chunks(hyper.batch.max(1)) {
            let mut tape = Tape::new();
            let lm_vars = lm.bind(&mut tape);
            let pv = pe.store.bind(&mut tape, true);
            let dv = dec.store.bind(&mut tape, true);
            let xs: Vec<Var> = chunk.iter().map(|&i| tape.constant(seqs[i].clone())).collect();
            let out = forward_with_prompt_batch(&mut tape, lm, &lm_vars, pv.first().copied(), &xs)?;
            let pred = dec.forward(&mut tape, &dv, out.out)?;
            let y: Vec<f32> = chunk.iter().flat_map(|&i| targets[i].data().to_vec()).collect();
            let y = tape.constant(Tensor::new(vec![chunk.len(), width], y)?);
            let loss = tape.mse(pred, y)?;
            sq_sum += f64::from(tape.value(loss).item()) * chunk.len() as f64;
            let g = tape.backward(loss)?;
            opt_pe.step(&mut pe.store, &pv, &g)?;
            opt_dec.step(&mut dec.store, &dv, &g)?;
        }
        let mse = sq_sum / seqs.len() as f64;
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            loss: mse,
            accuracy: None,
            mse: Some(mse),
        });
        if plateau.stop(mse) {
            break;
        }
    }
    Ok(metrics)
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Final LM outputs `[B, M]` for many sequences, in chunks, without
/// gradients.
pub fn prompted_outputs(seqs: &[Tensor], lm: &FrozenLM, pe: &SoftPrompt, chunk: usize) -> Result<Tensor> {
    check_seqs(seqs, lm.width())?;
    let mut rows = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let lm_vars = lm.bind(&mut tape);
        let pv = pe.table().map(|t| tape.constant(t.clone()));
        let xs: Vec<Var> = part.iter().map(|s| tape.constant(s.clone())).collect();
        let out = forward_with_prompt_batch(&mut tape, lm, &lm_vars, pv, &xs)?;
        let o = tape.value(out.out);
        for r in 0..o.rows() {
            rows.push(o.row(r).to_vec());
        }
    }
    Tensor::from_rows(&rows)
}

/// Applies the classifier to precomputed LM outputs.
pub fn classify(outputs: &Tensor, head: &Classifier) -> Result<Vec<usize>> {
    let logits = outputs.matmul(head.store.get(0))?;
    let b = head.store.get(1).data();
    let mut l = logits;
    let c = b.len();
    for (i, v) in l.data_mut().iter_mut().enumerate() {
        *v += b[i % c];
    }
    Ok(argmax_rows(&l))
}

/// Applies the decoder to precomputed LM outputs: `[B, D·H]`.
pub fn decode(outputs: &Tensor, dec: &Decoder) -> Result<Tensor> {
    let mut y = outputs.matmul(dec.store.get(0))?;
    let b = dec.store.get(1).data();
    let c = b.len();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += b[i % c];
    }
    Ok(y)
}
