//! Frozen vocabulary embeddings and text prototypes extracted from them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{at, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const VOCAB_RECORD: &str = "vocab.embeddings";
pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITERS: usize = 10_000;

/// Words placed at the front of the generated vocabulary; the rest are
/// filled with `w{index}`.
pub const SEED_WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "is", "given", "sequence", "series", "time", "value",
    "shape", "frequency", "classify", "predict", "forecast", "next", "label", "class", "sine",
    "square", "sawtooth", "wave", "signal", "up", "down", "rise", "fall", "flat", "peak",
    "trough", "high", "low", "fast", "slow", "smooth", "sharp", "noise", "trend", "cycle",
    "period", "amplitude", "phase", "step", "ramp", "spike", "steady", "increase", "decrease",
    "positive", "negative", "zero", "large", "small", "long", "short", "early", "late", "begin",
    "end", "repeat", "pattern", "change",
];

/// `V` token embeddings of width `M` with their token strings.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabMatrix {
    embeddings: Tensor,
    tokens: Vec<String>,
}

/// Sidecar path holding token names: same stem, `.txt` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("txt")
}

impl VocabMatrix {
    pub fn new(embeddings: Tensor, tokens: Vec<String>) -> Result<Self> {
        if embeddings.rank() != 2 {
            return shape_err(format!("vocab must be [V, M], got {:?}", embeddings.dims()));
        }
        if tokens.len() != embeddings.rows() {
            return shape_err(format!(
                "{} token names for {} rows",
                tokens.len(),
                embeddings.rows()
            ));
        }
        if !embeddings.is_finite() {
            return Err(Error::Degenerate("vocab contains non-finite values".into()));
        }
        Ok(Self { embeddings, tokens })
    }

    /// Seeded synthetic vocabulary with a decaying spectrum in a random
    /// orthonormal basis, plus a shared offset.
    pub fn synthetic(v: usize, m: usize, seed: u64) -> Result<Self> {
        if v == 0 || m == 0 {
            return Err(Error::Parameter("vocab must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = random_orthonormal(m, &mut rng);
        let offset = Tensor::randn(&[m], 0.2, &mut rng);
        let mut data = Vec::with_capacity(v * m);
        for _ in 0..v {
            let z = Tensor::randn(&[m], 1.0, &mut rng);
            let mut row = offset.data().to_vec();
            for (j, &zj) in z.data().iter().enumerate() {
                let s = zj * (-(j as f32) / 12.0).exp();
                for (r, &b) in row.iter_mut().zip(basis.row(j)) {
                    *r += s * b;
                }
            }
            data.extend(row);
        }
        let tokens = (0..v)
            .map(|i| match SEED_WORDS.get(i) {
                Some(w) => (*w).to_owned(),
                None => format!("w{i}"),
            })
            .collect();
        Self::new(Tensor::new(vec![v, m], data)?, tokens)
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn index_of(&self, word: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == word)
            .ok_or_else(|| Error::Lookup(format!("word `{word}` is not in the vocabulary")))
    }

    pub fn row(&self, word: &str) -> Result<&[f32]> {
        Ok(self.embeddings.row(self.index_of(word)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut c = Container::new();
        c.insert(VOCAB_RECORD, self.embeddings.clone());
        c.save(path)?;
        let mut names = self.tokens.join("\n");
        names.push('\n');
        let side = sidecar_path(path);
        fs::write(&side, names).map_err(at(&side))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let c = Container::load(path)?;
        let emb = c.require(VOCAB_RECORD)?.clone();
        let side = sidecar_path(path);
        let names = fs::read_to_string(&side).map_err(at(&side))?;
        Self::new(emb, names.lines().map(str::to_owned).collect())
    }
}

fn random_orthonormal(m: usize, rng: &mut impl Rng) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    while rows.len() < m {
        let mut v: Vec<f64> = Tensor::randn(&[m], 1.0, rng)
            .data()
            .iter()
            .map(|&x| f64::from(x))
            .collect();
        for r in &rows {
            let d = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let data = rows.into_iter().flatten().map(|x| x as f32).collect();
    Tensor::new(vec![m, m], data).expect("square basis")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `k` unit-norm prototype directions `[k, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub vectors: Tensor,
}

impl PrototypeSet {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::Parameter("need at least one prototype".into()));
        }
        Ok(Self { vectors })
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn width(&self) -> usize {
        self.vectors.cols()
    }
}

/// Makes the largest-magnitude coordinate positive (first one on ties).
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top-`k` principal directions of the mean-centred vocabulary, found by
/// power iteration on the covariance with deflation.
pub fn pca_prototypes(vocab: &VocabMatrix, k: usize) -> Result<PrototypeSet> {
    let x = vocab.embeddings();
    let (v, m) = (x.rows(), x.cols());
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if k > v.min(m) {
        return Err(Error::Rank(format!("k = {k} exceeds min(V, M) = {}", v.min(m))));
    }
    let mut mean = vec![0.0f64; m];
    for r in 0..v {
        for (mu, &val) in mean.iter_mut().zip(x.row(r)) {
            *mu += f64::from(val);
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= v as f64);
    let mut cov = vec![0.0f64; m * m];
    let mut centred = vec![0.0f64; m];
    for r in 0..v {
        for (c, (&val, mu)) in centred.iter_mut().zip(x.row(r).iter().zip(&mean)) {
            *c = f64::from(val) - mu;
        }
        for i in 0..m {
            let ci = centred[i];
            if ci == 0.0 {
                continue;
            }
            for j in 0..m {
                cov[i * m + j] += ci * centred[j];
            }
        }
    }
    let trace: f64 = (0..m).map(|i| cov[i * m + i]).sum();
    if trace <= 0.0 {
        return Err(Error::Rank("vocabulary has zero variance".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(k);
    for idx in 0..k {
        let mut b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize(&mut b, &found);
        normalize(&mut b);
        let mut lambda = 0.0;
        for _ in 0..PCA_MAX_ITERS {
            let mut nb = matvec(&cov, &b, m);
            orthogonalize(&mut nb, &found);
            lambda = dot(&nb, &b);
            if normalize(&mut nb) == 0.0 {
                break;
            }
            let diff: f64 = nb.iter().zip(&b).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            b = nb;
            if diff < PCA_TOL {
                break;
            }
        }
        if lambda <= trace * 1e-10 {
            return Err(Error::Rank(format!(
                "requested {k} prototypes but the vocabulary has numerical rank {idx}"
            )));
        }
        // Deflate so the next direction is found in the complement.
        for i in 0..m {
            for j in 0..m {
                cov[i * m + j] -= lambda * b[i] * b[j];
            }
        }
        found.push(b);
    }
    let mut data = Vec::with_capacity(k * m);
    for mut f in found {
        fix_sign(&mut f);
        data.extend(f.iter().map(|&x| x as f32));
    }
    PrototypeSet::new(Tensor::new(vec![k, m], data)?)
}

fn matvec(a: &[f64], x: &[f64], m: usize) -> Vec<f64> {
    (0..m).map(|i| dot(&a[i * m..(i + 1) * m], x)).collect()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Unit-normalized vocab rows of the given words, in order.
pub fn fixed_word_prototypes(vocab: &VocabMatrix, words: &[impl AsRef<str>]) -> Result<PrototypeSet> {
    if words.is_empty() {
        return Err(Error::Parameter("need at least one prototype word".into()));
    }
    let m = vocab.width();
    let mut data = Vec::with_capacity(words.len() * m);
    for w in words {
        let row = vocab.row(w.as_ref())?;
        let n = row.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate(format!("word `{}` has a zero embedding", w.as_ref())));
        }
        data.extend(row.iter().map(|&x| (f64::from(x) / n) as f32));
    }
    PrototypeSet::new(Tensor::new(vec![words.len(), m], data)?)
}

/// `e · tpᵀ`: coordinates of `e` along each prototype.
pub fn prototype_coords(e: &Tensor, tp: &PrototypeSet) -> Result<Tensor> {
    if e.len() != tp.width() {
        return shape_err(format!("embedding of width {} vs prototypes {:?}", e.len(), tp.vectors.dims()));
    }
    let data = (0..tp.k())
        .map(|i| {
            tp.vectors
                .row(i)
                .iter()
                .zip(e.data())
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum::<f64>() as f32
        })
        .collect();
    Ok(Tensor::vector(data))
}

/// The `n` vocabulary tokens most cosine-similar to `e`, descending, ties by
/// vocabulary index.
pub fn nearest_words(e: &Tensor, vocab: &VocabMatrix, n: usize) -> Result<Vec<(String, f32)>> {
    if e.len() != vocab.width() {
        return shape_err(format!("embedding of width {} vs vocab width {}", e.len(), vocab.width()));
    }
    if n > vocab.len() {
        return Err(Error::Parameter(format!("n = {n} exceeds vocab size {}", vocab.len())));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let en = e.norm() as f64;
    if en == 0.0 {
        return Err(Error::Degenerate("zero embedding has no direction".into()));
    }
    let emb = vocab.embeddings();
    let mut scored: Vec<(usize, f64)> = (0..vocab.len())
        .map(|i| {
            let row = emb.row(i);
            let d: f64 = row.iter().zip(e.data()).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            let rn: f64 = row.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
            (i, if rn == 0.0 { 0.0 } else { d / (rn * en) })
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(n)
        .map(|(i, c)| (vocab.tokens[i].clone(), c as f32))
        .collect())
}
