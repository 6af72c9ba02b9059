//! Run configuration: flat UTF-8 `key = value` lines.
//!
//! `#` starts a comment, blank lines are ignored, unknown or repeated keys
//! are errors. Relative paths resolve against the config file's directory.
//! Every key has a default except `data`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::contrast::Temperatures;
use crate::data::{AugmentConfig, PairConfig, MIN_LEN};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::promptlm::PromptHyper;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classify,
    Forecast,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Classify => "classify",
            Self::Forecast => "forecast",
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classify" => Ok(Self::Classify),
            "forecast" => Ok(Self::Forecast),
            _ => Err("expected classify or forecast".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PrototypeMode {
    Pca(usize),
    Words(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Auto,
    Random,
    TaskTokens,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase1 {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// Train the decoder on reconstruction; `None` means on for forecasting.
    pub decoder: Option<bool>,
    /// Anchors drawn per epoch; 0 uses every token once.
    pub anchors: usize,
    pub w_ins: f32,
    pub w_text: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub task: Task,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub temperatures: Temperatures,
    pub queue_capacity: usize,
    pub prototypes: PrototypeMode,
    pub vocab: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub seg_len: (usize, usize),
    pub seg_step: (usize, usize),
    pub pairs: PairConfig,
    pub phase1: Phase1,
    pub prompt_length: usize,
    pub prompt_init: InitMode,
    pub prompt_words: Option<Vec<String>>,
    pub phase2: PromptHyper,
    pub token_len: usize,
    pub token_step: usize,
    pub token_max: usize,
    pub train_frac: f64,
    /// Forecasting: training examples per series, cut from its own history.
    pub forecast_windows: usize,
    pub forecast_stride: usize,
}

impl RunConfig {
    pub fn new(data: impl Into<PathBuf>) -> Self {
        Self {
            data: data.into(),
            task: Task::Classify,
            seed: 0,
            encoder: EncoderConfig::default(),
            temperatures: Temperatures::default(),
            queue_capacity: 1024,
            prototypes: PrototypeMode::Pca(10),
            vocab: None,
            lm: None,
            seg_len: (16, 64),
            seg_step: (8, 32),
            pairs: PairConfig::default(),
            phase1: Phase1 {
                epochs: 30,
                lr: 1e-3,
                batch: 32,
                decoder: None,
                anchors: 0,
                w_ins: 1.0,
                w_text: 1.0,
            },
            prompt_length: 20,
            prompt_init: InitMode::Auto,
            prompt_words: None,
            phase2: PromptHyper::default(),
            token_len: 32,
            token_step: 16,
            token_max: 8,
            train_frac: 0.8,
            forecast_windows: 8,
            forecast_stride: 4,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::new(PathBuf::new());
        let mut seen: Vec<String> = Vec::new();
        let mut have_data = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            seen.push(key.to_owned());
            cfg.set(key, value, base).map_err(|m| err(format!("{key}: {m}")))?;
            have_data |= key == "data";
        }
        if !have_data {
            return Err(Error::Config("missing required key `data`".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}`"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("expected true or false, got `{v}`")),
            }
        }
        fn words(v: &str) -> Vec<String> {
            v.split(',').map(|w| w.trim().to_owned()).filter(|w| !w.is_empty()).collect()
        }
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        match key {
            "data" => self.data = path(v),
            "task" => self.task = v.parse()?,
            "seed" => self.seed = num(v)?,
            "enc.blocks" => self.encoder.num_blocks = num(v)?,
            "enc.hidden" => self.encoder.hidden = num(v)?,
            "enc.kernel" => self.encoder.kernel = num(v)?,
            "enc.embed" => self.encoder.embed_dim = num(v)?,
            "enc.momentum" => self.encoder.momentum = num(v)?,
            "tau_i" => self.temperatures.instance = num(v)?,
            "tau_f" => self.temperatures.feature = num(v)?,
            "queue_capacity" => self.queue_capacity = num(v)?,
            "prototypes" => {
                self.prototypes = match v {
                    "pca" => match &self.prototypes {
                        PrototypeMode::Pca(k) => PrototypeMode::Pca(*k),
                        PrototypeMode::Words(w) => PrototypeMode::Pca(w.len()),
                    },
                    "words" => match &self.prototypes {
                        PrototypeMode::Words(w) => PrototypeMode::Words(w.clone()),
                        PrototypeMode::Pca(_) => PrototypeMode::Words(words("value,shape,frequency")),
                    },
                    _ => return Err("expected pca or words".into()),
                }
            }
            "prototypes.k" => {
                let k = num(v)?;
                if let PrototypeMode::Pca(old) = &mut self.prototypes {
                    *old = k;
                } else {
                    return Err("only valid with prototypes = pca (set it first)".into());
                }
            }
            "prototypes.words" => {
                if let PrototypeMode::Words(old) = &mut self.prototypes {
                    *old = words(v);
                } else {
                    return Err("only valid with prototypes = words (set it first)".into());
                }
            }
            "vocab" => self.vocab = Some(path(v)),
            "lm" => self.lm = Some(path(v)),
            "seg.len_min" => self.seg_len.0 = num(v)?,
            "seg.len_max" => self.seg_len.1 = num(v)?,
            "seg.step_min" => self.seg_step.0 = num(v)?,
            "seg.step_max" => self.seg_step.1 = num(v)?,
            "aug.jitter" => self.pairs.augment.jitter_sigma = num(v)?,
            "aug.scale" => self.pairs.augment.scale_sigma = num(v)?,
            "aug.max_segments" => self.pairs.augment.max_segments = num(v)?,
            "pos.overlap_ratio" => self.pairs.overlap_ratio = num(v)?,
            "phase1.epochs" => self.phase1.epochs = num(v)?,
            "phase1.lr" => self.phase1.lr = num(v)?,
            "phase1.batch" => self.phase1.batch = num(v)?,
            "phase1.decoder" => {
                self.phase1.decoder = if v == "auto" { None } else { Some(flag(v)?) }
            }
            "phase1.anchors" => self.phase1.anchors = num(v)?,
            "loss.w_ins" => self.phase1.w_ins = num(v)?,
            "loss.w_text" => self.phase1.w_text = num(v)?,
            "prompt.length" => self.prompt_length = num(v)?,
            "prompt.init" => {
                self.prompt_init = match v {
                    "auto" => InitMode::Auto,
                    "random" => InitMode::Random,
                    "task_tokens" => InitMode::TaskTokens,
                    _ => return Err("expected auto, random or task_tokens".into()),
                }
            }
            "prompt.words" => self.prompt_words = Some(words(v)),
            "phase2.epochs" => self.phase2.epochs = num(v)?,
            "phase2.lr" => self.phase2.lr = num(v)?,
            "phase2.lr_decoder" => self.phase2.lr_decoder = num(v)?,
            "phase2.batch" => self.phase2.batch = num(v)?,
            "phase2.patience" => self.phase2.patience = num(v)?,
            "token.len" => self.token_len = num(v)?,
            "token.step" => self.token_step = num(v)?,
            "token.max" => self.token_max = num(v)?,
            "split.train_frac" => self.train_frac = num(v)?,
            "forecast.windows" => self.forecast_windows = num(v)?,
            "forecast.stride" => self.forecast_stride = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.temperatures.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.pairs.augment.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be positive".into());
        }
        match &self.prototypes {
            PrototypeMode::Pca(0) => return bad("prototypes.k must be at least 1".into()),
            PrototypeMode::Words(w) if w.is_empty() => {
                return bad("prototypes.words must name at least one word".into())
            }
            _ => {}
        }
        let (l0, l1) = self.seg_len;
        let (s0, s1) = self.seg_step;
        if l0 < MIN_LEN || l0 > l1 {
            return bad(format!("segment length range [{l0}, {l1}] invalid (min {MIN_LEN})"));
        }
        if s0 == 0 || s0 > s1 {
            return bad(format!("segment step range [{s0}, {s1}] invalid"));
        }
        if self.pairs.augment.max_segments > l0 {
            return bad("aug.max_segments exceeds the shortest segment".into());
        }
        if !(0.0..=1.0).contains(&self.pairs.overlap_ratio) {
            return bad("pos.overlap_ratio must lie in [0, 1]".into());
        }
        let p1 = &self.phase1;
        if p1.batch < 2 {
            return bad("phase1.batch must be at least 2".into());
        }
        for (name, lr) in [
            ("phase1.lr", p1.lr),
            ("phase2.lr", self.phase2.lr),
            ("phase2.lr_decoder", self.phase2.lr_decoder),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(p1.w_ins >= 0.0 && p1.w_text >= 0.0 && p1.w_ins.is_finite() && p1.w_text.is_finite()) {
            return bad("loss weights must be finite and ≥ 0".into());
        }
        if self.phase2.batch == 0 {
            return bad("phase2.batch must be positive".into());
        }
        if self.token_len < MIN_LEN || self.token_step == 0 || self.token_max == 0 {
            return bad(format!(
                "token.len must be ≥ {MIN_LEN}; token.step and token.max positive"
            ));
        }
        if self.forecast_windows == 0 || self.forecast_stride == 0 {
            return bad("forecast.windows and forecast.stride must be positive".into());
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad("split.train_frac must lie in (0, 1)".into());
        }
        if let Some(w) = &self.prompt_words {
            if w.len() != self.prompt_length {
                return bad(format!(
                    "prompt.words has {} words for prompt.length {}",
                    w.len(),
                    self.prompt_length
                ));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("data", self.data.display().to_string());
        kv("task", self.task.as_str().into());
        kv("seed", self.seed.to_string());
        kv("enc.blocks", self.encoder.num_blocks.to_string());
        kv("enc.hidden", self.encoder.hidden.to_string());
        kv("enc.kernel", self.encoder.kernel.to_string());
        kv("enc.embed", self.encoder.embed_dim.to_string());
        kv("enc.momentum", format!("{:?}", self.encoder.momentum));
        kv("tau_i", format!("{:?}", self.temperatures.instance));
        kv("tau_f", format!("{:?}", self.temperatures.feature));
        kv("queue_capacity", self.queue_capacity.to_string());
        match &self.prototypes {
            PrototypeMode::Pca(k) => {
                kv("prototypes", "pca".into());
                kv("prototypes.k", k.to_string());
            }
            PrototypeMode::Words(w) => {
                kv("prototypes", "words".into());
                kv("prototypes.words", w.join(","));
            }
        }
        if let Some(p) = &self.vocab {
            kv("vocab", p.display().to_string());
        }
        if let Some(p) = &self.lm {
            kv("lm", p.display().to_string());
        }
        kv("seg.len_min", self.seg_len.0.to_string());
        kv("seg.len_max", self.seg_len.1.to_string());
        kv("seg.step_min", self.seg_step.0.to_string());
        kv("seg.step_max", self.seg_step.1.to_string());
        kv("aug.jitter", format!("{:?}", self.pairs.augment.jitter_sigma));
        kv("aug.scale", format!("{:?}", self.pairs.augment.scale_sigma));
        kv("aug.max_segments", self.pairs.augment.max_segments.to_string());
        kv("pos.overlap_ratio", format!("{:?}", self.pairs.overlap_ratio));
        kv("phase1.epochs", self.phase1.epochs.to_string());
        kv("phase1.lr", format!("{:?}", self.phase1.lr));
        kv("phase1.batch", self.phase1.batch.to_string());
        kv(
            "phase1.decoder",
            match self.phase1.decoder {
                None => "auto".into(),
                Some(b) => b.to_string(),
            },
        );
        kv("phase1.anchors", self.phase1.anchors.to_string());
        kv("loss.w_ins", format!("{:?}", self.phase1.w_ins));
        kv("loss.w_text", format!("{:?}", self.phase1.w_text));
        kv("prompt.length", self.prompt_length.to_string());
        kv(
            "prompt.init",
            match self.prompt_init {
                InitMode::Auto => "auto",
                InitMode::Random => "random",
                InitMode::TaskTokens => "task_tokens",
            }
            .into(),
        );
        if let Some(w) = &self.prompt_words {
            kv("prompt.words", w.join(","));
        }
        kv("phase2.epochs", self.phase2.epochs.to_string());
        kv("phase2.lr", format!("{:?}", self.phase2.lr));
        kv("phase2.lr_decoder", format!("{:?}", self.phase2.lr_decoder));
        kv("phase2.batch", self.phase2.batch.to_string());
        kv("phase2.patience", self.phase2.patience.to_string());
        kv("token.len", self.token_len.to_string());
        kv("token.step", self.token_step.to_string());
        kv("token.max", self.token_max.to_string());
        kv("split.train_frac", format!("{:?}", self.train_frac));
        kv("forecast.windows", self.forecast_windows.to_string());
        kv("forecast.stride", self.forecast_stride.to_string());
        o
    }

    pub fn decoder_in_phase1(&self) -> bool {
        self.phase1.decoder.unwrap_or(self.task == Task::Forecast)
    }

    pub fn augment(&self) -> AugmentConfig {
        self.pairs.augment
    }
}
