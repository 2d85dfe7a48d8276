//! Flat `key=value` training configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. `scale` is applied
//! before every other key so presets can be overridden line by line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::DiscriminatorConfig;
use crate::backbone::EncoderConfig;
use crate::corpus::{Corpus, CorpusManifest, TeacherConfig};
use crate::error::{Error, Result};
use crate::guidance::{ModulationConfig, ModulationMode};
use crate::io::stable_hash;
use crate::nn::AdamWConfig;
use crate::objectives::{AlignConfig, LossWeights, RelaConfig};
use crate::rvq::RvqConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Toy,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Self::F32 => candle_core::DType::F32,
            Self::F64 => candle_core::DType::F64,
        }
    }
}

/// Where training clips come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSource {
    /// Manifest to load; when unset a synthetic corpus is generated.
    pub manifest: Option<PathBuf>,
    pub clips: usize,
    pub duration_s: f64,
    pub seed: u64,
}

impl CorpusSource {
    pub fn load(&self, teachers: TeacherConfig) -> Result<Corpus> {
        match &self.manifest {
            Some(p) => Corpus::from_manifest(&CorpusManifest::read(p)?, teachers),
            None => Corpus::synthetic(self.clips, self.duration_s, self.seed, teachers),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scale: Scale,
    pub seed: u64,
    /// Seeds used by ablation cells.
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when nonzero.
    pub steps: usize,
    /// Active quantizer layers; `0` means all.
    pub k_active: usize,
    pub precision: Precision,
    pub weights: LossWeights,
    pub rela: RelaConfig,
    pub align: AlignConfig,
    pub modulation: ModulationConfig,
    pub encoder: EncoderConfig,
    pub num_books: usize,
    pub codebook_size: usize,
    pub teachers: TeacherConfig,
    pub disc_enabled: bool,
    pub disc: DiscriminatorConfig,
    pub optim: AdamWConfig,
    pub corpus: CorpusSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// `(key, default, meaning)` for every accepted key, in canonical order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("scale", "toy", "preset: toy or paper (applied before other keys)"),
    ("seed", "0", "training seed (init, batching, gates)"),
    ("seeds", "0,1,2", "seed list for ablation cells"),
    ("train.lr", "0.0003", "base learning rate; paper preset 0.0002"),
    ("train.batch_size", "4", "clips per batch; paper preset 16"),
    ("train.epochs", "250", "passes over the corpus"),
    ("train.steps", "0", "total steps; overrides epochs when nonzero"),
    ("train.k_active", "0", "active quantizer layers, 0 for all"),
    ("train.precision", "f32", "f32 for speed, f64 for verification"),
    ("loss.mel", "1", "weight of the mel reconstruction term"),
    ("loss.adv", "1", "weight of the adversarial term"),
    ("loss.feat", "1", "weight of the feature-matching term"),
    ("loss.q", "0.001", "weight of the commitment term (a sum over frames, dimensions and layers)"),
    ("loss.rela", "0.5", "weight of the relational distillation term"),
    ("loss.align", "0.5", "weight of the emotion-weighted alignment term"),
    ("rela.alpha", "1", "emotion relation weight"),
    ("rela.beta", "1", "semantic relation weight"),
    ("rela.variant", "full", "full, sem-only, emo-only or feature"),
    ("rela.layer_select", "first", "first, early or all quantizer layers"),
    ("align.window", "2", "half-width of the alignment window"),
    ("align.variant", "full", "full, sem-only or uniform-scaled"),
    ("modulation.mode", "cross-before", "guidance mode"),
    ("modulation.heads", "8", "attention heads in the guidance branches"),
    ("modulation.gate_keep_prob", "0.75", "keep probability of the guidance gates"),
    ("encoder.base_channels", "16", "channels after the input convolution; paper preset 32"),
    ("encoder.kernel", "7", "input/output convolution kernel"),
    ("encoder.strides", "2,4,5,8", "downsampling strides"),
    ("encoder.lstm_layers", "2", "recurrent layers after downsampling"),
    ("encoder.latent_dim", "64", "latent width D; paper preset 1024"),
    ("rvq.num_books", "8", "quantizer layers K"),
    ("rvq.codebook_size", "64", "entries per codebook; paper preset 1024"),
    ("teacher.dim_emotion", "32", "emotion teacher width"),
    ("teacher.dim_semantic", "32", "semantic teacher width"),
    ("teacher.dim_text", "32", "text teacher width"),
    ("teacher.seed", "2125221461", "seed of the fixed teacher maps"),
    ("disc.enabled", "true", "train discriminators and use adversarial terms"),
    ("disc.stft_windows", "512,1024,2048", "MS-STFT window sizes"),
    ("disc.msd_scales", "1,2,4", "waveform discriminator downsampling factors"),
    ("disc.mpd_periods", "2,3,5", "period discriminator periods"),
    ("disc.channels", "16", "discriminator width"),
    ("disc.layers", "4", "feature layers per discriminator"),
    ("optim.beta1", "0.5", "AdamW first-moment decay"),
    ("optim.beta2", "0.9", "AdamW second-moment decay"),
    ("optim.weight_decay", "0.01", "decoupled weight decay"),
    ("optim.clip_norm", "1", "global gradient-norm clip, 0 disables"),
    ("corpus.manifest", "", "manifest path; empty generates a synthetic corpus"),
    ("corpus.clips", "8", "synthetic clip count"),
    ("corpus.duration_s", "0.64", "synthetic clip duration in seconds"),
    ("corpus.seed", "1000", "first synthetic clip seed"),
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            scale: Scale::Toy,
            seed: 0,
            seeds: vec![0, 1, 2],
            lr: 3e-4,
            batch_size: 4,
            epochs: 250,
            steps: 0,
            k_active: 0,
            precision: Precision::F32,
            weights: LossWeights::default(),
            rela: RelaConfig::default(),
            align: AlignConfig::default(),
            modulation: ModulationConfig::default(),
            encoder: EncoderConfig::toy(),
            num_books: 8,
            codebook_size: 64,
            teachers: TeacherConfig::default(),
            disc_enabled: true,
            disc: DiscriminatorConfig::default(),
            optim: AdamWConfig {
                beta1: 0.5,
                beta2: 0.9,
                ..AdamWConfig::default()
            },
            corpus: CorpusSource {
                manifest: None,
                clips: 8,
                duration_s: 0.64,
                seed: 1000,
            },
        }
    }

    pub fn paper() -> Self {
        let rvq = RvqConfig::paper();
        Self {
            scale: Scale::Paper,
            lr: 2e-4,
            batch_size: 16,
            encoder: EncoderConfig::paper(),
            num_books: rvq.num_books,
            codebook_size: rvq.codebook_size,
            ..Self::toy()
        }
    }

    pub fn rvq(&self) -> RvqConfig {
        RvqConfig {
            num_books: self.num_books,
            codebook_size: self.codebook_size,
            dim: self.encoder.latent_dim,
        }
    }

    pub fn k_active(&self) -> usize {
        if self.k_active == 0 {
            self.num_books
        } else {
            self.k_active
        }
    }

    pub fn steps_per_epoch(&self, corpus_len: usize) -> usize {
        corpus_len.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, corpus_len: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * self.steps_per_epoch(corpus_len)
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "scale" => {
                *self = match v {
                    "toy" => Self::toy(),
                    "paper" => Self::paper(),
                    _ => return Err(Error::Config(format!("unknown scale `{v}`"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.steps" => self.steps = parse(key, v)?,
            "train.k_active" => self.k_active = parse(key, v)?,
            "train.precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("unknown precision `{v}`"))),
                }
            }
            "loss.mel" => self.weights.mel = parse(key, v)?,
            "loss.adv" => self.weights.adv = parse(key, v)?,
            "loss.feat" => self.weights.feat = parse(key, v)?,
            "loss.q" => self.weights.q = parse(key, v)?,
            "loss.rela" => self.weights.rela = parse(key, v)?,
            "loss.align" => self.weights.align = parse(key, v)?,
            "rela.alpha" => self.rela.alpha = parse(key, v)?,
            "rela.beta" => self.rela.beta = parse(key, v)?,
            "rela.variant" => self.rela.variant = v.parse()?,
            "rela.layer_select" => self.rela.layer_select = v.parse()?,
            "align.window" => self.align.window = parse(key, v)?,
            "align.variant" => self.align.variant = v.parse()?,
            "modulation.mode" => self.modulation.mode = v.parse::<ModulationMode>()?,
            "modulation.heads" => self.modulation.heads = parse(key, v)?,
            "modulation.gate_keep_prob" => self.modulation.gate_keep_prob = parse(key, v)?,
            "encoder.base_channels" => self.encoder.base_channels = parse(key, v)?,
            "encoder.kernel" => self.encoder.kernel = parse(key, v)?,
            "encoder.strides" => self.encoder.strides = parse_list(key, v)?,
            "encoder.lstm_layers" => self.encoder.lstm_layers = parse(key, v)?,
            "encoder.latent_dim" => self.encoder.latent_dim = parse(key, v)?,
            "rvq.num_books" => self.num_books = parse(key, v)?,
            "rvq.codebook_size" => self.codebook_size = parse(key, v)?,
            "teacher.dim_emotion" => self.teachers.dim_emotion = parse(key, v)?,
            "teacher.dim_semantic" => self.teachers.dim_semantic = parse(key, v)?,
            "teacher.dim_text" => self.teachers.dim_text = parse(key, v)?,
            "teacher.seed" => self.teachers.seed = parse(key, v)?,
            "disc.enabled" => self.disc_enabled = parse(key, v)?,
            "disc.stft_windows" => self.disc.stft_windows = parse_list(key, v)?,
            "disc.msd_scales" => self.disc.msd_scales = parse_list(key, v)?,
            "disc.mpd_periods" => self.disc.mpd_periods = parse_list(key, v)?,
            "disc.channels" => self.disc.channels = parse(key, v)?,
            "disc.layers" => self.disc.layers = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.clip_norm" => {
                let c: f64 = parse(key, v)?;
                self.optim.clip_norm = (c > 0.0).then_some(c);
            }
            "corpus.manifest" => self.corpus.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "corpus.clips" => self.corpus.clips = parse(key, v)?,
            "corpus.duration_s" => self.corpus.duration_s = parse(key, v)?,
            "corpus.seed" => self.corpus.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of `key`, formatted as it would be written.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "scale" => match self.scale {
                Scale::Toy => "toy".into(),
                Scale::Paper => "paper".into(),
            },
            "seed" => self.seed.to_string(),
            "seeds" => join(&self.seeds),
            "train.lr" => self.lr.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.steps" => self.steps.to_string(),
            "train.k_active" => self.k_active.to_string(),
            "train.precision" => match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            "loss.mel" => self.weights.mel.to_string(),
            "loss.adv" => self.weights.adv.to_string(),
            "loss.feat" => self.weights.feat.to_string(),
            "loss.q" => self.weights.q.to_string(),
            "loss.rela" => self.weights.rela.to_string(),
            "loss.align" => self.weights.align.to_string(),
            "rela.alpha" => self.rela.alpha.to_string(),
            "rela.beta" => self.rela.beta.to_string(),
            "rela.variant" => self.rela.variant.to_string(),
            "rela.layer_select" => self.rela.layer_select.to_string(),
            "align.window" => self.align.window.to_string(),
            "align.variant" => self.align.variant.to_string(),
            "modulation.mode" => self.modulation.mode.to_string(),
            "modulation.heads" => self.modulation.heads.to_string(),
            "modulation.gate_keep_prob" => self.modulation.gate_keep_prob.to_string(),
            "encoder.base_channels" => self.encoder.base_channels.to_string(),
            "encoder.kernel" => self.encoder.kernel.to_string(),
            "encoder.strides" => join(&self.encoder.strides),
            "encoder.lstm_layers" => self.encoder.lstm_layers.to_string(),
            "encoder.latent_dim" => self.encoder.latent_dim.to_string(),
            "rvq.num_books" => self.num_books.to_string(),
            "rvq.codebook_size" => self.codebook_size.to_string(),
            "teacher.dim_emotion" => self.teachers.dim_emotion.to_string(),
            "teacher.dim_semantic" => self.teachers.dim_semantic.to_string(),
            "teacher.dim_text" => self.teachers.dim_text.to_string(),
            "teacher.seed" => self.teachers.seed.to_string(),
            "disc.enabled" => self.disc_enabled.to_string(),
            "disc.stft_windows" => join(&self.disc.stft_windows),
            "disc.msd_scales" => join(&self.disc.msd_scales),
            "disc.mpd_periods" => join(&self.disc.mpd_periods),
            "disc.channels" => self.disc.channels.to_string(),
            "disc.layers" => self.disc.layers.to_string(),
            "optim.beta1" => self.optim.beta1.to_string(),
            "optim.beta2" => self.optim.beta2.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.clip_norm" => self.optim.clip_norm.unwrap_or(0.0).to_string(),
            "corpus.manifest" => self
                .corpus
                .manifest
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "corpus.clips" => self.corpus.clips.to_string(),
            "corpus.duration_s" => self.corpus.duration_s.to_string(),
            "corpus.seed" => self.corpus.seed.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    /// Parses `key=value` lines on top of the toy defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = Self::toy();
        cfg.apply(&pairs)?;
        Ok(cfg)
    }

    /// Applies overrides, handling `scale` first.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "scale") {
            self.set("scale", v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "scale") {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, one per line, in canonical order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("documented key"));
        }
        s
    }

    pub fn hash(&self) -> u64 {
        stable_hash(self.to_text().as_bytes())
    }

    /// Hash of everything except `seed` and `seeds`.
    pub fn hash_without_seed(&self) -> u64 {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("seed=") && !l.starts_with("seeds="))
            .map(|l| format!("{l}\n"))
            .collect();
        stable_hash(text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 && self.steps == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if self.k_active > self.num_books {
            return bad(format!("train.k_active {} exceeds rvq.num_books {}", self.k_active, self.num_books));
        }
        if self.encoder.hop() != crate::corpus::HOP {
            return bad(format!("encoder strides multiply to {}, expected {}", self.encoder.hop(), crate::corpus::HOP));
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        self.encoder.validate()?;
        self.weights.validate()?;
        self.modulation.validate()?;
        Ok(())
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
