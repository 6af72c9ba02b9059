//! Time-series ingestion, tokenization and augmentation.
//!
//! Dataset files hold one series per line:
//!
//! ```text
//! label;v1,v2,v3,...                 univariate, integer class label
//! label;a1 b1,a2 b2,a3 b3,...        two channels, space-separated per step
//! 0.25;v1,v2,...                     forecasting target (same grammar as values)
//! ;v1,v2,...                         unlabeled
//! ```
//!
//! A head consisting only of ASCII digits is a class label; any other
//! non-empty head is a target. Targets are always written with a decimal
//! point so they never read back as labels.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{at, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Shortest series or token length the encoder accepts.
pub const MIN_LEN: usize = 4;

/// A multivariate series `values[D, T]` with an optional class label or
/// forecasting target `[D, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub values: Tensor,
    pub label: Option<usize>,
    pub target: Option<Tensor>,
}

impl TimeSeries {
    pub fn new(values: Tensor, label: Option<usize>, target: Option<Tensor>) -> Result<Self> {
        let [d, t] = values.dims() else {
            return shape_err(format!("series must be [D, T], got {:?}", values.dims()));
        };
        if *t < MIN_LEN {
            return shape_err(format!("series needs at least {MIN_LEN} points, got {t}"));
        }
        if !values.is_finite() {
            return Err(Error::Degenerate("series contains non-finite values".into()));
        }
        if let Some(tg) = &target {
            if tg.rank() != 2 || tg.dims()[0] != *d {
                return shape_err(format!(
                    "target {:?} does not match {d} channels",
                    tg.dims()
                ));
            }
        }
        Ok(Self {
            values,
            label,
            target,
        })
    }

    pub fn univariate(values: Vec<f32>, label: Option<usize>) -> Result<Self> {
        let n = values.len();
        Self::new(Tensor::new(vec![1, n], values)?, label, None)
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A contiguous slice `[start, end)` of series `source`.
#[derive(Clone, Debug, PartialEq)]
pub struct TsToken {
    pub values: Tensor,
    pub source: usize,
    pub start: usize,
    pub end: usize,
}

impl TsToken {
    pub fn from_series(series: &TimeSeries, source: usize, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            values: series.values.slice_cols(start, end)?,
            source,
            start,
            end,
        })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// True when both tokens come from the same series and share at least
    /// one time index.
    pub fn overlaps(&self, other: &TsToken) -> bool {
        self.source == other.source && self.start < other.end && other.start < self.end
    }

    fn with_values(&self, values: Tensor) -> Self {
        Self {
            values,
            source: self.source,
            start: self.start,
            end: self.end,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub jitter_sigma: f32,
    pub scale_sigma: f32,
    pub max_segments: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.08,
            scale_sigma: 0.1,
            max_segments: 5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite())
            || !(self.scale_sigma >= 0.0 && self.scale_sigma.is_finite())
        {
            return Err(Error::Parameter("noise scales must be finite and ≥ 0".into()));
        }
        if self.max_segments == 0 {
            return Err(Error::Parameter("max_segments must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_range(name: &str, (lo, hi): (usize, usize)) -> Result<()> {
    if lo == 0 || lo > hi {
        return Err(Error::Parameter(format!("{name} range [{lo}, {hi}] is invalid")));
    }
    Ok(())
}

/// Slides windows of random length and random advance over a series.
///
/// Lengths are drawn from `len_range`, advances from `step_range` (both
/// inclusive). Windows are emitted until fewer than `len_range.0` points
/// remain; a window never runs past the end of the series.
pub fn segment(
    series: &TimeSeries,
    source: usize,
    len_range: (usize, usize),
    step_range: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Vec<TsToken>> {
    check_range("length", len_range)?;
    check_range("step", step_range)?;
    if len_range.0 < MIN_LEN {
        return Err(Error::Parameter(format!(
            "token length must be at least {MIN_LEN}"
        )));
    }
    let t = series.len();
    let mut tokens = Vec::new();
    let mut start = 0;
    while t - start >= len_range.0 {
        let len = rng.random_range(len_range.0..=len_range.1).min(t - start);
        tokens.push(TsToken::from_series(series, source, start, start + len)?);
        start += rng.random_range(step_range.0..=step_range.1);
        if start >= t {
            break;
        }
    }
    Ok(tokens)
}

/// Fixed windows of `len` points ending at the last time step, stepping back
/// by `step`, returned in chronological order.
pub fn tail_windows(series: &TimeSeries, source: usize, len: usize, step: usize, max: usize) -> Result<Vec<TsToken>> {
    if len < MIN_LEN || step == 0 || max == 0 {
        return Err(Error::Parameter(format!(
            "window length {len}, step {step}, count {max}"
        )));
    }
    let t = series.len();
    if t < len {
        return shape_err(format!("series of length {t} is shorter than window {len}"));
    }
    let mut tokens = Vec::new();
    let mut end = t;
    while end >= len && tokens.len() < max {
        tokens.push(TsToken::from_series(series, source, end - len, end)?);
        if end < len + step {
            break;
        }
        end -= step;
    }
    tokens.reverse();
    Ok(tokens)
}

fn normal(sigma: f32) -> Option<Normal<f32>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"))
}

fn jitter(values: &mut Tensor, sigma: f32, rng: &mut impl Rng) {
    if let Some(n) = normal(sigma) {
        for v in values.data_mut() {
            *v += n.sample(rng);
        }
    }
}

/// Jitter-and-scale view: `s·(1+γ_d) + ε`, `γ_d ~ N(0, scale_sigma)` per
/// channel and `ε ~ N(0, jitter_sigma)` per point.
pub fn augment_weak(token: &TsToken, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<TsToken> {
    cfg.validate()?;
    let mut values = token.values.clone();
    if let Some(n) = normal(cfg.scale_sigma) {
        let d = values.rows();
        for ch in 0..d {
            let gamma = n.sample(rng);
            for v in values.row_mut(ch) {
                *v *= 1.0 + gamma;
            }
        }
    }
    jitter(&mut values, cfg.jitter_sigma, rng);
    Ok(token.with_values(values))
}

/// Permutation-and-jitter view: cut the token at random boundaries into
/// between 1 and `max_segments` contiguous chunks, shuffle the chunks, then
/// jitter.
pub fn augment_strong(token: &TsToken, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<TsToken> {
    cfg.validate()?;
    let len = token.len();
    if cfg.max_segments > len {
        return Err(Error::Parameter(format!(
            "max_segments {} exceeds token length {len}",
            cfg.max_segments
        )));
    }
    let pieces = rng.random_range(1..=cfg.max_segments);
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, len - 1, pieces - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut bounds = Vec::with_capacity(pieces + 1);
    bounds.push(0);
    bounds.extend(cuts);
    bounds.push(len);
    let mut chunks: Vec<(usize, usize)> = bounds.windows(2).map(|w| (w[0], w[1])).collect();
    chunks.shuffle(rng);

    let d = token.values.rows();
    let src = token.values.data();
    let mut data = Vec::with_capacity(d * len);
    for ch in 0..d {
        for &(a, b) in &chunks {
            data.extend_from_slice(&src[ch * len + a..ch * len + b]);
        }
    }
    let mut values = Tensor::new(vec![d, len], data)?;
    jitter(&mut values, cfg.jitter_sigma, rng);
    Ok(token.with_values(values))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositiveKind {
    Overlap,
    Weak,
    Strong,
}

/// Anchor, one positive view, and the indices of every valid negative.
#[derive(Clone, Debug)]
pub struct Pair {
    pub anchor: TsToken,
    pub positive: TsToken,
    pub kind: PositiveKind,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairConfig {
    /// Probability of drawing an overlapping token as the positive when one
    /// exists; otherwise a weak or strong augmentation is used.
    pub overlap_ratio: f64,
    pub augment: AugmentConfig,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            overlap_ratio: 0.5,
            augment: AugmentConfig::default(),
        }
    }
}

/// Draws the positive and collects negatives for `tokens[anchor]`.
///
/// Negatives are all tokens sharing no time index with the anchor, which
/// includes every token from other series.
pub fn sample_pairs(tokens: &[TsToken], anchor: usize, cfg: &PairConfig, rng: &mut impl Rng) -> Result<Pair> {
    if tokens.len() < 2 {
        return Err(Error::Sampling("need at least two tokens".into()));
    }
    let a = tokens
        .get(anchor)
        .ok_or_else(|| Error::Sampling(format!("anchor {anchor} out of range")))?;
    let mut overlapping = Vec::new();
    let mut negatives = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if i == anchor {
            continue;
        }
        if a.overlaps(t) {
            overlapping.push(i);
        } else {
            negatives.push(i);
        }
    }
    if negatives.is_empty() {
        return Err(Error::Sampling(format!(
            "token {anchor} overlaps every other token"
        )));
    }
    let use_overlap = !overlapping.is_empty() && rng.random_bool(cfg.overlap_ratio.clamp(0.0, 1.0));
    let (positive, kind) = if use_overlap {
        let j = overlapping[rng.random_range(0..overlapping.len())];
        (tokens[j].clone(), PositiveKind::Overlap)
    } else {
        let aug = AugmentConfig {
            max_segments: cfg.augment.max_segments.min(a.len()),
            ..cfg.augment
        };
        if rng.random_bool(0.5) {
            (augment_weak(a, &aug, rng)?, PositiveKind::Weak)
        } else {
            (augment_strong(a, &aug, rng)?, PositiveKind::Strong)
        }
    };
    Ok(Pair {
        anchor: a.clone(),
        positive,
        kind,
        negatives,
    })
}

fn parse_steps(field: &str, line: usize) -> Result<Tensor> {
    let err = |msg: String| Error::Parse { line, msg };
    let mut channels: Option<usize> = None;
    let mut steps: Vec<Vec<f32>> = Vec::new();
    for step in field.split(',') {
        let vals = step
            .split_whitespace()
            .map(|v| {
                v.parse::<f32>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(format!("non-numeric value `{v}`")))
            })
            .collect::<Result<Vec<f32>>>()?;
        if vals.is_empty() {
            return Err(err("empty time step".into()));
        }
        match channels {
            None => channels = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(err(format!(
                    "time step has {} channels, expected {c}",
                    vals.len()
                )))
            }
            _ => {}
        }
        steps.push(vals);
    }
    let d = channels.unwrap_or(0);
    let t = steps.len();
    let mut data = vec![0.0; d * t];
    for (ti, s) in steps.iter().enumerate() {
        for (ch, &v) in s.iter().enumerate() {
            data[ch * t + ti] = v;
        }
    }
    Tensor::new(vec![d, t], data).map_err(|e| err(e.to_string()))
}

/// Parses dataset text; line numbers in errors are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<TimeSeries>> {
    let mut out = Vec::new();
    let mut dataset_d: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line, msg };
        let (head, body) = raw
            .split_once(';')
            .ok_or_else(|| err("missing `;` between head and values".into()))?;
        let values = parse_steps(body, line)?;
        let d = values.dims()[0];
        match dataset_d {
            None => dataset_d = Some(d),
            Some(prev) if prev != d => {
                return Err(err(format!("series has {d} channels, dataset has {prev}")))
            }
            _ => {}
        }
        let head = head.trim();
        let (label, target) = if head.is_empty() {
            (None, None)
        } else if head.bytes().all(|b| b.is_ascii_digit()) {
            let l = head.parse().map_err(|e| err(format!("label: {e}")))?;
            (Some(l), None)
        } else {
            (None, Some(parse_steps(head, line)?))
        };
        out.push(TimeSeries::new(values, label, target).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TimeSeries>> {
    parse_dataset(&fs::read_to_string(path.as_ref()).map_err(at(path.as_ref()))?)
}

fn write_steps(out: &mut String, t: &Tensor) {
    let (d, n) = (t.dims()[0], t.dims()[1]);
    for ti in 0..n {
        if ti > 0 {
            out.push(',');
        }
        for ch in 0..d {
            if ch > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{:?}", t.data()[ch * n + ti]);
        }
    }
}

pub fn format_dataset(series: &[TimeSeries]) -> String {
    let mut out = String::new();
    for s in series {
        if let Some(l) = s.label {
            let _ = write!(out, "{l}");
        } else if let Some(t) = &s.target {
            write_steps(&mut out, t);
        }
        out.push(';');
        write_steps(&mut out, &s.values);
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: impl AsRef<Path>, series: &[TimeSeries]) -> Result<()> {
    fs::write(path.as_ref(), format_dataset(series)).map_err(at(path.as_ref()))?;
    Ok(())
}

/// Extra forecasting examples cut from a series' own history.
///
/// The first item is the series itself. Each further item ends `stride`
/// steps earlier, with the next `H` observed values as its target (`H` is
/// the horizon of the series' own target). Prefixes shorter than `min_len`
/// are not produced.
pub fn history_windows(series: &TimeSeries, count: usize, stride: usize, min_len: usize) -> Result<Vec<TimeSeries>> {
    let target = series
        .target
        .as_ref()
        .ok_or_else(|| Error::Parameter("history windows need a forecasting target".into()))?;
    if count == 0 || stride == 0 {
        return Err(Error::Parameter("window count and stride must be positive".into()));
    }
    let (d, t, h) = (series.channels(), series.len(), target.cols());
    let mut out = vec![series.clone()];
    for k in 1..count {
        let Some(end) = t.checked_sub(k * stride).filter(|&e| e + h <= t && e >= min_len.max(MIN_LEN)) else {
            break;
        };
        let mut values = Vec::with_capacity(d * end);
        let mut next = Vec::with_capacity(d * h);
        for ch in 0..d {
            let row = series.values.row(ch);
            values.extend_from_slice(&row[..end]);
            next.extend_from_slice(&row[end..end + h]);
        }
        out.push(TimeSeries::new(
            Tensor::new(vec![d, end], values)?,
            series.label,
            Some(Tensor::new(vec![d, h], next)?),
        )?);
    }
    Ok(out)
}

/// Seeded shuffle of `0..n` split into `(train, held_out)`.
pub fn split_indices(n: usize, train_frac: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let cut = ((n as f64) * train_frac).round() as usize;
    let held = idx.split_off(cut.min(n));
    (idx, held)
}
