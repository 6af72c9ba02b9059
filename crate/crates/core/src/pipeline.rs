//! End-to-end training: encoder pre-training (phase 1), prompt and head
//! training against the frozen LM (phase 2), evaluation and word matching.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{InitMode, PrototypeMode, RunConfig, Task};
use crate::container::{record_text, text_record, Container};
use crate::contrast::{instance_loss, text_align_loss, NegativeQueue};
use crate::data::{self, sample_pairs, segment, tail_windows, TimeSeries, TsToken};
use crate::encoder::{autoencode_loss, momentum_update, Decoder, Encoder, ProjectionHead};
use crate::error::{shape_err, Error, Result};
use crate::params::Adam;
use crate::promptlm::{
    self, default_task_words, init_prompt, Classifier, EpochMetrics, FrozenLM, LmConfig, PromptInit,
    PROMPT_RECORD, LM_SEED,
};
use crate::prototypes::{fixed_word_prototypes, nearest_words, pca_prototypes, PrototypeSet, VocabMatrix};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const VOCAB_SIZE: usize = 512;
pub const VOCAB_SEED: u64 = 0x70ca_b5ee;
const ENCODE_CHUNK: usize = 256;
const OUTPUT_CHUNK: usize = 128;

/// The built-in synthetic vocabulary for embedding width `m`.
pub fn default_vocab(m: usize) -> Result<VocabMatrix> {
    VocabMatrix::synthetic(VOCAB_SIZE, m, VOCAB_SEED)
}

/// The built-in frozen LM for embedding width `m`.
pub fn default_lm(m: usize) -> Result<FrozenLM> {
    FrozenLM::generate(LmConfig::new(m), LM_SEED)
}

pub fn load_vocab(cfg: &RunConfig) -> Result<VocabMatrix> {
    let v = match &cfg.vocab {
        Some(p) => VocabMatrix::load(p)?,
        None => default_vocab(cfg.encoder.embed_dim)?,
    };
    if v.width() != cfg.encoder.embed_dim {
        return Err(Error::Config(format!(
            "vocab width {} differs from enc.embed {}",
            v.width(),
            cfg.encoder.embed_dim
        )));
    }
    Ok(v)
}

pub fn load_lm(cfg: &RunConfig) -> Result<FrozenLM> {
    let lm = match &cfg.lm {
        Some(p) => FrozenLM::load(p)?,
        None => default_lm(cfg.encoder.embed_dim)?,
    };
    if lm.width() != cfg.encoder.embed_dim {
        return Err(Error::Config(format!(
            "LM width {} differs from enc.embed {}",
            lm.width(),
            cfg.encoder.embed_dim
        )));
    }
    Ok(lm)
}

pub fn build_prototypes(cfg: &RunConfig, vocab: &VocabMatrix) -> Result<PrototypeSet> {
    match &cfg.prototypes {
        PrototypeMode::Pca(k) => pca_prototypes(vocab, *k),
        PrototypeMode::Words(w) => fixed_word_prototypes(vocab, w),
    }
}

/// A tensor container plus the run configuration and phase tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub container: Container,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.container.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let container = Container::load(path)?;
        let ck = Self { container };
        ck.phase()?;
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.container.to_bytes()
    }

    pub fn phase(&self) -> Result<u32> {
        let t = self
            .container
            .get("meta.phase")
            .ok_or_else(|| Error::Format("checkpoint has no phase tag".into()))?;
        Ok(t.item() as u32)
    }

    /// Configuration that produced the phase-1 encoder.
    pub fn config(&self) -> Result<RunConfig> {
        let text = record_text(self.container.require("meta.config")?)?;
        RunConfig::parse(&text, Path::new(""))
    }

    pub fn task(&self) -> Result<Task> {
        Ok(self.config()?.task)
    }

    pub fn encoder(&self) -> Result<Encoder> {
        let cfg = self.config()?;
        let channels = self.container.require("enc.input.w")?.dims()[1];
        let mut enc = Encoder::new(cfg.encoder, channels, &mut ChaCha8Rng::seed_from_u64(0))?;
        enc.import(&self.container, "enc.")?;
        Ok(enc)
    }

    fn decoder(&self) -> Result<Decoder> {
        let w = self.container.require("dec.w")?;
        let out_len = self.container.require("meta.decoder_len")?.item() as usize;
        let channels = w.dims()[1] / out_len.max(1);
        let mut d = Decoder::new(w.dims()[0], channels, out_len, &mut ChaCha8Rng::seed_from_u64(0))?;
        d.store.import(&self.container, "")?;
        Ok(d)
    }

    fn classifier(&self) -> Result<Classifier> {
        let w = self.container.require("cls.w")?;
        let mut c = Classifier::new(w.dims()[0], w.dims()[1], &mut ChaCha8Rng::seed_from_u64(0))?;
        c.store.import(&self.container, "")?;
        Ok(c)
    }

    fn prompt(&self, width: usize) -> Result<promptlm::SoftPrompt> {
        promptlm::SoftPrompt::new(self.container.get(PROMPT_RECORD).cloned(), width)
    }

    fn lm(&self) -> Result<FrozenLM> {
        FrozenLM::from_container(&self.container, 2)
    }
}

/// Progress records emitted while training.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Phase1Epoch(Phase1Metrics),
    Phase2Epoch(EpochMetrics),
    HeldOut(Report),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Phase1Metrics {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub instance: f64,
    pub align: f64,
    pub contrast: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub autoencode: Option<f64>,
}

fn load_series(cfg: &RunConfig) -> Result<Vec<TimeSeries>> {
    let ds = data::load_dataset(&cfg.data)?;
    if ds.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", cfg.data.display())));
    }
    Ok(ds)
}

/// The seeded train / held-out partition of a dataset.
pub fn split(cfg: &RunConfig, n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5711_7000);
    data::split_indices(n, cfg.train_frac, &mut rng)
}

fn horizon(series: &[TimeSeries]) -> Result<usize> {
    let h = series[0]
        .target
        .as_ref()
        .ok_or_else(|| Error::Config("forecast task needs targets in the dataset".into()))?
        .dims()[1];
    for s in series {
        match &s.target {
            Some(t) if t.dims()[1] == h => {}
            _ => return Err(Error::Config("all series need targets of one horizon".into())),
        }
    }
    Ok(h)
}

/// Phase 1: contrastive encoder pre-training on the training split.
pub fn train_phase1(cfg: &RunConfig, on_event: &mut dyn FnMut(&Event)) -> Result<Checkpoint> {
    cfg.validate()?;
    let all = load_series(cfg)?;
    let (train_idx, _) = split(cfg, all.len());
    let series: Vec<TimeSeries> = train_idx.iter().map(|&i| all[i].clone()).collect();
    train_phase1_on(cfg, &series, on_event)
}

pub fn train_phase1_on(cfg: &RunConfig, series: &[TimeSeries], on_event: &mut dyn FnMut(&Event)) -> Result<Checkpoint> {
    cfg.validate()?;
    if series.is_empty() {
        return Err(Error::Config("no training series".into()));
    }
    let channels = series[0].channels();
    if series.iter().any(|s| s.channels() != channels) {
        return Err(Error::Config("series differ in channel count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.encoder.embed_dim;
    let mut query = Encoder::new(cfg.encoder, channels, &mut rng)?;
    let mut key = query.clone();
    let mut head = ProjectionHead::new(m, &mut rng);
    let dec_len = match cfg.task {
        Task::Forecast => Some(horizon(series)?),
        Task::Classify if cfg.decoder_in_phase1() => Some(cfg.token_len),
        Task::Classify => None,
    };
    let mut decoder = dec_len
        .map(|l| Decoder::new(m, channels, l, &mut rng))
        .transpose()?;
    let train_decoder = cfg.decoder_in_phase1();
    let vocab = load_vocab(cfg)?;
    let tp = build_prototypes(cfg, &vocab)?;
    let mut queue = NegativeQueue::new(cfg.queue_capacity, m)?;

    let mut opt_q = Adam::new(&query.store, cfg.phase1.lr);
    let mut opt_h = Adam::new(&head.store, cfg.phase1.lr);
    let mut opt_d = decoder.as_ref().map(|d| Adam::new(&d.store, cfg.phase1.lr));
    let b = cfg.phase1.batch;

    for epoch in 0..cfg.phase1.epochs {
        let mut tokens: Vec<TsToken> = Vec::new();
        for (i, s) in series.iter().enumerate() {
            tokens.extend(segment(s, i, cfg.seg_len, cfg.seg_step, &mut rng)?);
        }
        if tokens.len() < b {
            return Err(Error::Config(format!(
                "only {} tokens for a batch of {b}; dataset too small",
                tokens.len()
            )));
        }
        let mut anchors: Vec<usize> = (0..tokens.len()).collect();
        anchors.shuffle(&mut rng);
        if cfg.phase1.anchors > 0 {
            anchors.truncate(cfg.phase1.anchors.max(b));
        }
        if queue.is_empty() {
            let warm: Vec<&Tensor> = anchors[..b].iter().map(|&i| &tokens[i].values).collect();
            queue.push(&key_embeddings(&key, &warm)?)?;
        }
        let mut sums = [0.0f64; 5];
        let mut steps = 0usize;
        for chunk in anchors.chunks(b) {
            if chunk.len() < 2 {
                continue;
            }
            let mut pos = Vec::with_capacity(chunk.len());
            let mut neg = Vec::with_capacity(chunk.len());
            for &a in chunk {
                let pair = sample_pairs(&tokens, a, &cfg.pairs, &mut rng)?;
                let n = pair.negatives[rng.random_range(0..pair.negatives.len())];
                pos.push(pair.positive);
                neg.push(n);
            }
            let mut batch: Vec<&Tensor> = chunk.iter().map(|&a| &tokens[a].values).collect();
            batch.extend(pos.iter().map(|p| &p.values));
            batch.extend(neg.iter().map(|&n| &tokens[n].values));
            let k_pos = key_embeddings(&key, &batch[chunk.len()..2 * chunk.len()])?;

            let bn = chunk.len();
            let mut tape = Tape::new();
            let qv = query.store.bind(&mut tape, true);
            let hv = head.store.bind(&mut tape, true);
            let (emb, stats) = query.forward(&mut tape, &qv, &batch, true)?;
            let e = tape.slice_rows(emb, 0, bn)?;
            let e_pos = tape.slice_rows(emb, bn, 2 * bn)?;
            let e_neg = tape.slice_rows(emb, 2 * bn, 3 * bn)?;
            let kp = tape.constant(k_pos.clone());
            let l_ins = instance_loss(&mut tape, e, kp, &queue, cfg.temperatures.instance, &head, &hv)?;
            let text = text_align_loss(&mut tape, e, e_pos, e_neg, &tp.vectors, cfg.temperatures.feature)?;
            let wi = tape.scale(l_ins, cfg.phase1.w_ins);
            let wt = tape.scale(text.total, cfg.phase1.w_text);
            let mut total = tape.add(wi, wt)?;
            sums[0] += f64::from(tape.value(total).item());
            sums[1] += f64::from(tape.value(l_ins).item());
            sums[2] += f64::from(tape.value(text.align).item());
            sums[3] += f64::from(tape.value(text.contrast).item());

            let mut dv = Vec::new();
            if let (true, Some(dec)) = (train_decoder, decoder.as_ref()) {
                // Reconstruction trains only the decoder: embeddings enter as
                // constants.
                dv = dec.store.bind(&mut tape, true);
                let detached = tape.constant(tape.value(e).clone());
                let recon = dec.forward(&mut tape, &dv, detached)?;
                let mut target = Vec::with_capacity(bn * dec.channels * dec.out_len);
                for &a in chunk {
                    target.extend(dec.target(&tokens[a].values)?);
                }
                let target = tape.constant(Tensor::new(vec![bn, dec.channels * dec.out_len], target)?);
                let l_ae = autoencode_loss(&mut tape, recon, target)?;
                sums[4] += f64::from(tape.value(l_ae).item());
                total = tape.add(total, l_ae)?;
            }

            let g = tape.backward(total)?;
            opt_q.step(&mut query.store, &qv, &g)?;
            opt_h.step(&mut head.store, &hv, &g)?;
            if let (Some(opt), Some(dec), false) = (opt_d.as_mut(), decoder.as_mut(), dv.is_empty()) {
                opt.step(&mut dec.store, &dv, &g)?;
            }
            query.update_running_stats(&stats)?;
            momentum_update(&query, &mut key, cfg.encoder.momentum)?;
            queue.push(&k_pos)?;
            steps += 1;
        }
        let s = steps.max(1) as f64;
        on_event(&Event::Phase1Epoch(Phase1Metrics {
            epoch: epoch + 1,
            steps,
            loss: sums[0] / s,
            instance: sums[1] / s,
            align: sums[2] / s,
            contrast: sums[3] / s,
            autoencode: (train_decoder && decoder.is_some()).then(|| sums[4] / s),
        }));
    }

    let mut c = Container::new();
    c.insert("meta.config", text_record(&cfg.to_text()));
    c.insert("meta.phase", Tensor::scalar(1.0));
    query.export(&mut c, "enc.");
    key.export(&mut c, "key.");
    head.store.export(&mut c, "");
    if let Some(d) = &decoder {
        c.insert("meta.decoder_len", Tensor::scalar(d.out_len as f32));
        d.store.export(&mut c, "");
    }
    c.insert("proto.vectors", tp.vectors.clone());
    Ok(Checkpoint { container: c })
}

/// Key-encoder embeddings with batch statistics, as in the query pass.
fn key_embeddings(key: &Encoder, tokens: &[&Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let kv = key.store.bind(&mut tape, false);
    let (e, _) = key.forward(&mut tape, &kv, tokens, true)?;
    Ok(tape.value(e).clone())
}

/// Chronological downstream tokens of a series: fixed windows ending at the
/// last step, or the whole series when it is shorter than one window.
pub fn series_tokens(s: &TimeSeries, source: usize, cfg: &RunConfig) -> Result<Vec<TsToken>> {
    if s.len() < cfg.token_len {
        return Ok(vec![TsToken::from_series(s, source, 0, s.len())?]);
    }
    tail_windows(s, source, cfg.token_len, cfg.token_step, cfg.token_max)
}

/// Frozen-encoder token embeddings `[n_i, M]` for each series.
pub fn embed_series(enc: &Encoder, series: &[TimeSeries], cfg: &RunConfig) -> Result<Vec<Tensor>> {
    let mut counts = Vec::with_capacity(series.len());
    let mut toks = Vec::new();
    for (i, s) in series.iter().enumerate() {
        if s.channels() != enc.channels() {
            return Err(Error::Eval(format!(
                "series {i} has {} channels, model expects {}",
                s.channels(),
                enc.channels()
            )));
        }
        let t = series_tokens(s, i, cfg)?;
        counts.push(t.len());
        toks.extend(t);
    }
    let refs: Vec<&Tensor> = toks.iter().map(|t| &t.values).collect();
    let embs = enc.encode_many(&refs, ENCODE_CHUNK)?;
    let mut out = Vec::with_capacity(series.len());
    let mut at = 0;
    for n in counts {
        out.push(Tensor::stack(&embs[at..at + n])?);
        at += n;
    }
    Ok(out)
}

/// Phase 2: trains the soft prompt and task head through the frozen LM on the
/// training split, then reports held-out metrics.
pub fn train_phase2(cfg: &RunConfig, ck: &Checkpoint, on_event: &mut dyn FnMut(&Event)) -> Result<Checkpoint> {
    cfg.validate()?;
    let all = load_series(cfg)?;
    let (train_idx, held_idx) = split(cfg, all.len());
    let train: Vec<TimeSeries> = train_idx.iter().map(|&i| all[i].clone()).collect();
    let held: Vec<TimeSeries> = held_idx.iter().map(|&i| all[i].clone()).collect();
    let out = train_phase2_on(cfg, ck, &train, on_event)?;
    if !held.is_empty() {
        on_event(&Event::HeldOut(evaluate(&out, &held)?));
    }
    Ok(out)
}

pub fn train_phase2_on(
    cfg: &RunConfig,
    ck: &Checkpoint,
    train: &[TimeSeries],
    on_event: &mut dyn FnMut(&Event),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if ck.phase()? < 1 {
        return Err(Error::Config("checkpoint has no phase-1 encoder".into()));
    }
    let p1 = ck.config()?;
    if p1.task != cfg.task {
        return Err(Error::Config(format!(
            "checkpoint was trained for {}, config asks for {}",
            p1.task.as_str(),
            cfg.task.as_str()
        )));
    }
    if p1.encoder.embed_dim != cfg.encoder.embed_dim {
        return Err(Error::Config("enc.embed differs from the checkpoint".into()));
    }
    let enc = ck.encoder()?;
    let lm = load_lm(cfg)?;
    let expanded;
    let train = match cfg.task {
        Task::Forecast if cfg.forecast_windows > 1 => {
            let mut all = Vec::new();
            for s in train {
                all.extend(data::history_windows(s, cfg.forecast_windows, cfg.forecast_stride, cfg.token_len)?);
            }
            expanded = all;
            &expanded[..]
        }
        _ => train,
    };
    let seqs = embed_series(&enc, train, cfg).map_err(|e| match e {
        Error::Eval(m) => Error::Config(m),
        other => other,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let m = enc.embed_dim();
    let init = match (cfg.prompt_init, cfg.task) {
        (InitMode::Random, _) | (InitMode::Auto, Task::Forecast) => PromptInit::Random,
        (InitMode::TaskTokens, _) | (InitMode::Auto, Task::Classify) => PromptInit::TaskTokens(
            cfg.prompt_words.clone().unwrap_or_else(|| default_task_words(cfg.prompt_length)),
        ),
    };
    let vocab = match init {
        PromptInit::TaskTokens(_) => Some(load_vocab(cfg)?),
        PromptInit::Random => None,
    };
    let mut pe = init_prompt(cfg.prompt_length, m, &init, vocab.as_ref(), &mut rng)?;

    let mut c = Container::new();
    c.extend_prefixed(&ck.container, "");
    c.insert("meta.phase", Tensor::scalar(2.0));
    c.insert("meta.config2", text_record(&cfg.to_text()));
    lm.export(&mut c);

    let metrics = match cfg.task {
        Task::Classify => {
            let labels = train
                .iter()
                .map(|s| s.label.ok_or_else(|| Error::Config("classification needs labels".into())))
                .collect::<Result<Vec<usize>>>()?;
            let classes = labels.iter().max().map_or(0, |&l| l + 1).max(2);
            let mut head = Classifier::new(m, classes, &mut rng)?;
            let metrics = promptlm::train_prompt_classify(&seqs, &labels, &lm, &mut pe, &mut head, &cfg.phase2, &mut rng)?;
            head.store.export(&mut c, "");
            metrics
        }
        Task::Forecast => {
            let mut dec = ck.decoder()?;
            let targets = train
                .iter()
                .map(|s| s.target.clone().ok_or_else(|| Error::Config("forecasting needs targets".into())))
                .collect::<Result<Vec<Tensor>>>()?;
            let metrics = promptlm::train_prompt_forecast(&seqs, &targets, &lm, &mut pe, &mut dec, &cfg.phase2, &mut rng)?;
            dec.store.export(&mut c, "");
            metrics
        }
    };
    for m in &metrics {
        on_event(&Event::Phase2Epoch(m.clone()));
    }
    if let Some(t) = pe.table() {
        c.insert(PROMPT_RECORD, t.clone());
    }
    Ok(Checkpoint { container: c })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Report {
    Classify {
        samples: usize,
        accuracy: f64,
        /// `confusion[true][predicted]`.
        confusion: Vec<Vec<usize>>,
    },
    Forecast {
        samples: usize,
        mse: f64,
        rmse: f64,
    },
}

/// Predictions of a phase-2 checkpoint: class ids or `[B, D·H]` values.
pub enum Predictions {
    Classes(Vec<usize>),
    Values(Tensor),
}

pub fn predict(ck: &Checkpoint, series: &[TimeSeries]) -> Result<Predictions> {
    if ck.phase()? < 2 {
        return Err(Error::Eval("checkpoint has no trained prompt or head".into()));
    }
    if series.is_empty() {
        return Err(Error::Eval("empty dataset".into()));
    }
    let cfg = ck.config()?;
    let enc = ck.encoder()?;
    let lm = ck.lm()?;
    let pe = ck.prompt(enc.embed_dim())?;
    let seqs = embed_series(&enc, series, &cfg)?;
    let outs = promptlm::prompted_outputs(&seqs, &lm, &pe, OUTPUT_CHUNK)?;
    match cfg.task {
        Task::Classify => Ok(Predictions::Classes(promptlm::classify(&outs, &ck.classifier()?)?)),
        Task::Forecast => Ok(Predictions::Values(promptlm::decode(&outs, &ck.decoder()?)?)),
    }
}

/// Accuracy and confusion counts, or forecasting MSE / RMSE.
pub fn evaluate(ck: &Checkpoint, series: &[TimeSeries]) -> Result<Report> {
    match predict(ck, series)? {
        Predictions::Classes(pred) => {
            let c = ck.classifier()?.classes();
            let mut confusion = vec![vec![0usize; c]; c];
            let mut correct = 0;
            for (s, &p) in series.iter().zip(&pred) {
                let y = s.label.ok_or_else(|| Error::Eval("series without a label".into()))?;
                if y >= c {
                    return Err(Error::Eval(format!("label {y} outside the {c} trained classes")));
                }
                confusion[y][p] += 1;
                correct += usize::from(y == p);
            }
            Ok(Report::Classify {
                samples: series.len(),
                accuracy: correct as f64 / series.len() as f64,
                confusion,
            })
        }
        Predictions::Values(v) => {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for (i, s) in series.iter().enumerate() {
                let t = s.target.as_ref().ok_or_else(|| Error::Eval("series without a target".into()))?;
                if t.len() != v.cols() {
                    return Err(Error::Eval(format!(
                        "target has {} values, model predicts {}",
                        t.len(),
                        v.cols()
                    )));
                }
                for (&a, &b) in v.row(i).iter().zip(t.data()) {
                    sum += (f64::from(a) - f64::from(b)).powi(2);
                    count += 1;
                }
            }
            let mse = sum / count as f64;
            Ok(Report::Forecast {
                samples: series.len(),
                mse,
                rmse: mse.sqrt(),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenMatch {
    pub series: usize,
    pub start: usize,
    pub end: usize,
    pub words: Vec<(String, f32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WordReport {
    pub tokens: Vec<TokenMatch>,
    /// `(word, count)` sorted by count descending, then word.
    pub frequencies: Vec<(String, usize)>,
}

/// Nearest vocabulary words of every downstream token embedding.
pub fn match_words(ck: &Checkpoint, series: &[TimeSeries], vocab: &VocabMatrix, n: usize) -> Result<WordReport> {
    let cfg = ck.config()?;
    let enc = ck.encoder()?;
    if vocab.width() != enc.embed_dim() {
        return shape_err(format!(
            "vocab width {} vs embedding width {}",
            vocab.width(),
            enc.embed_dim()
        ));
    }
    let mut toks = Vec::new();
    for (i, s) in series.iter().enumerate() {
        if s.channels() != enc.channels() {
            return shape_err(format!("series {i} has {} channels", s.channels()));
        }
        toks.extend(series_tokens(s, i, &cfg)?);
    }
    let refs: Vec<&Tensor> = toks.iter().map(|t| &t.values).collect();
    let embs = enc.encode_many(&refs, ENCODE_CHUNK)?;
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    let mut tokens = Vec::with_capacity(toks.len());
    for (t, e) in toks.iter().zip(&embs) {
        let words = nearest_words(e, vocab, n)?;
        for (w, _) in &words {
            *freq.entry(w.clone()).or_default() += 1;
        }
        tokens.push(TokenMatch {
            series: t.source,
            start: t.start,
            end: t.end,
            words,
        });
    }
    let mut frequencies: Vec<(String, usize)> = freq.into_iter().collect();
    frequencies.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(WordReport { tokens, frequencies })
}
