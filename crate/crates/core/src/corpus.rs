//! Procedural speech-like corpus with a known emotion latent, deterministic
//! synthetic teachers, manifests and batching.
//!
//! A clip is a harmonic carrier whose pitch follows latent dimension 1 and
//! whose amplitude envelope follows latent dimension 2, with one band-limited
//! noise burst per token. The emotion teacher sees only DSP features of the
//! audio, so it can be recomputed from a reconstruction as well.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features;
use crate::io;

/// Codec hop in samples: the product of the encoder strides 2·4·5·8.
pub const HOP: usize = 320;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
/// Size of the phoneme-like token inventory.
pub const TOKEN_VOCAB: usize = 16;
pub const MANIFEST_VERSION: u32 = 1;

const BURST_GAIN: f64 = 0.15;
const BURST_SECONDS: f64 = 0.04;
const HARMONICS: usize = 8;

pub type TokenSeq = Vec<u32>;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} of audio clip")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silent(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    /// Number of complete codec frames.
    pub fn frames(&self) -> usize {
        self.samples.len() / HOP
    }

    /// Zero-pads to the next multiple of the codec hop.
    pub fn pad_to_hop(mut self) -> Self {
        let target = self.samples.len().div_ceil(HOP) * HOP;
        self.samples.resize(target, 0.0);
        self
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Ground-truth affect trajectory at codec frame rate; column 0 drives pitch,
/// column 1 drives loudness. Values lie in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionLatentTrack {
    pub values: Array2<f64>,
    pub frame_rate: f64,
}

impl EmotionLatentTrack {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn zeros(frames: usize, frame_rate: f64) -> Self {
        Self {
            values: Array2::zeros((frames, 2)),
            frame_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub duration_s: f64,
    pub n_tokens: usize,
    pub sample_rate: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 1.0,
            n_tokens: 6,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

/// Seeded smooth random walk clipped to `[-1, 1]`.
pub fn latent_walk(frames: usize, frame_rate: f64, rng: &mut ChaCha8Rng) -> EmotionLatentTrack {
    let mut values = Array2::zeros((frames, 2));
    for d in 0..2 {
        let mut v: f64 = rng.gen_range(-0.6..0.6);
        let mut vel = 0.0f64;
        for t in 0..frames {
            let n: f64 = StandardNormal.sample(rng);
            vel = 0.85 * vel + 0.06 * n;
            v += vel;
            if v.abs() > 1.0 {
                v = v.clamp(-1.0, 1.0);
                vel = -vel;
            }
            values[[t, d]] = v;
        }
    }
    EmotionLatentTrack { values, frame_rate }
}

fn interp_track(track: &EmotionLatentTrack, dim: usize, n: usize) -> f64 {
    // frame t is centred at (t + 0.5)·HOP
    let pos = (n as f64 / HOP as f64 - 0.5).max(0.0);
    let t0 = (pos.floor() as usize).min(track.frames() - 1);
    let t1 = (t0 + 1).min(track.frames() - 1);
    let frac = (pos - t0 as f64).clamp(0.0, 1.0);
    track.values[[t0, dim]] * (1.0 - frac) + track.values[[t1, dim]] * frac
}

/// Renders audio for a given latent track and token sequence.
///
/// The carrier has f0 = 120·(1 + 0.3·u1) Hz and envelope 0.5·(1 + 0.5·u2).
/// Token `i` of `n` becomes a resonator-filtered noise burst centred at
/// `(i + 0.5)/n` of the clip with centre frequency `1500 + 300·id` Hz.
pub fn render_clip(
    track: &EmotionLatentTrack,
    tokens: &[u32],
    sample_rate: u32,
    seed: u64,
) -> AudioClip {
    let len = track.frames() * HOP;
    let sr = sample_rate as f64;
    let norm: f64 = (1..=HARMONICS).map(|h| 1.0 / h as f64).sum();
    let mut samples = vec![0.0f32; len];
    let mut phase = 0.0f64;
    for (n, s) in samples.iter_mut().enumerate() {
        let u1 = interp_track(track, 0, n);
        let u2 = interp_track(track, 1, n);
        let f0 = 120.0 * (1.0 + 0.3 * u1);
        let env = 0.5 * (1.0 + 0.5 * u2);
        let carrier: f64 = (1..=HARMONICS)
            .map(|h| (h as f64 * phase).sin() / h as f64)
            .sum::<f64>()
            / norm;
        *s = (env * carrier) as f32;
        phase = (phase + 2.0 * std::f64::consts::PI * f0 / sr) % (2.0 * std::f64::consts::PI * 1e3);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0B5_7000);
    let burst_len = ((BURST_SECONDS * sr) as usize).min(len);
    for (i, &id) in tokens.iter().enumerate() {
        let centre = ((i as f64 + 0.5) / tokens.len() as f64 * len as f64) as usize;
        let start = centre.saturating_sub(burst_len / 2).min(len - burst_len);
        let fc = 1500.0 + 300.0 * id as f64;
        let r = 0.97f64;
        let a1 = 2.0 * r * (2.0 * std::f64::consts::PI * fc / sr).cos();
        let a2 = -r * r;
        let (mut y1, mut y2) = (0.0f64, 0.0f64);
        let mut burst = Vec::with_capacity(burst_len);
        for _ in 0..burst_len {
            let x: f64 = StandardNormal.sample(&mut rng);
            let y = x + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            burst.push(y);
        }
        let peak = burst.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
        let w = features::hann(burst_len);
        for (k, b) in burst.iter().enumerate() {
            samples[start + k] += (BURST_GAIN * w[k] * b / peak) as f32;
        }
    }
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    AudioClip {
        samples,
        sample_rate,
    }
}

/// Synthesises a clip, its latent track and token sequence; a pure function of `spec`.
pub fn gen_clip(spec: &SynthSpec) -> Result<(AudioClip, EmotionLatentTrack, TokenSeq)> {
    if !(spec.duration_s > 0.0) || !spec.duration_s.is_finite() {
        return invalid(format!("duration {} s must be positive", spec.duration_s));
    }
    if spec.n_tokens == 0 {
        return invalid("n_tokens must be at least 1");
    }
    let raw = (spec.duration_s * spec.sample_rate as f64).round() as usize;
    let frames = raw.div_ceil(HOP);
    if frames == 0 {
        return invalid(format!("duration {} s yields zero frames", spec.duration_s));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frame_rate = spec.sample_rate as f64 / HOP as f64;
    let track = latent_walk(frames, frame_rate, &mut rng);
    let tokens: TokenSeq = (0..spec.n_tokens)
        .map(|_| rng.gen_range(0..TOKEN_VOCAB as u32))
        .collect();
    let clip = render_clip(&track, &tokens, spec.sample_rate, spec.seed);
    Ok((clip, track, tokens))
}

pub fn tokens_to_string(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_tokens(s: &str) -> Result<TokenSeq> {
    s.split_whitespace()
        .map(|w| {
            w.parse::<u32>()
                .map_err(|_| Error::InvalidInput(format!("bad token `{w}`")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub dim_emotion: usize,
    pub dim_semantic: usize,
    pub dim_text: usize,
    /// Number of per-layer variants emitted; 1 means no stacks.
    pub layers: usize,
    pub seed: u64,
    pub vocab: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            dim_emotion: 32,
            dim_semantic: 32,
            dim_text: 32,
            layers: 1,
            seed: 0x7EAC_4E55,
            vocab: TOKEN_VOCAB,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStacks {
    pub emotion: Array3<f64>,
    pub semantic: Array3<f64>,
    pub text: Array3<f64>,
}

/// Emotion `E` (T'×D_e), semantic `S` (T'×D_s) and textual `C` (n×D_c) guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBundle {
    pub emotion: Array2<f64>,
    pub semantic: Array2<f64>,
    pub text: Array2<f64>,
    pub layer_stacks: Option<LayerStacks>,
}

impl TeacherBundle {
    pub fn frames(&self) -> usize {
        self.emotion.nrows()
    }
}

const SEMANTIC_BANDS: usize = 16;

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Fixed teacher maps derived only from the teacher seed.
struct TeacherMaps {
    emotion: Array2<f64>,
    semantic: Array2<f64>,
    table: Array2<f64>,
}

impl TeacherMaps {
    fn new(cfg: &TeacherConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            emotion: gaussian_matrix(cfg.dim_emotion, 3, 1.0 / 3f64.sqrt(), &mut rng),
            semantic: gaussian_matrix(
                cfg.dim_semantic,
                SEMANTIC_BANDS,
                1.0 / (SEMANTIC_BANDS as f64).sqrt(),
                &mut rng,
            ),
            table: gaussian_matrix(cfg.vocab, cfg.dim_text, 1.0 / (cfg.dim_text as f64).sqrt(), &mut rng),
        }
    }
}

/// Standardised DSP descriptors fed to the emotion map.
pub fn emotion_features(clip: &AudioClip) -> Array2<f64> {
    let mut d = features::frame_descriptors(&clip.samples, clip.sample_rate, HOP);
    for mut row in d.rows_mut() {
        row[0] = (row[0] + 5.0) / 3.0;
        row[1] = row[1] / 1000.0 - 1.0;
        row[2] = row[2] / 120.0 - 1.0;
    }
    d
}

fn perturbed_stack(base: &Array2<f64>, layers: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let dim = base.ncols();
    let mut stack = Array3::zeros((layers, base.nrows(), dim));
    for l in 0..layers {
        let mut p = gaussian_matrix(dim, dim, 0.1 / (dim as f64).sqrt(), rng);
        for i in 0..dim {
            p[[i, i]] += 1.0;
        }
        stack.index_axis_mut(Axis(0), l).assign(&base.dot(&p.t()));
    }
    stack
}

/// Deterministic synthetic teachers for a clip and its token sequence.
pub fn gen_teachers(clip: &AudioClip, tokens: &[u32], cfg: &TeacherConfig) -> Result<TeacherBundle> {
    let frames = clip.frames();
    if frames == 0 {
        return invalid("clip has no complete codec frame");
    }
    if let Some(t) = tokens.iter().find(|t| **t as usize >= cfg.vocab) {
        return invalid(format!("unknown token id {t} (vocabulary {})", cfg.vocab));
    }
    if tokens.is_empty() {
        return invalid("token sequence is empty");
    }
    let maps = TeacherMaps::new(cfg);
    let emotion = emotion_features(clip).dot(&maps.emotion.t());
    let mel = features::frame_log_mel(&clip.samples, clip.sample_rate, HOP, SEMANTIC_BANDS)
        .mapv(|v| (v + 6.0) / 5.0);
    let semantic = mel.dot(&maps.semantic.t());
    let text = Array2::from_shape_fn((tokens.len(), cfg.dim_text), |(i, j)| {
        maps.table[[tokens[i] as usize, j]]
    });
    if cfg.layers <= 1 {
        return Ok(TeacherBundle {
            emotion,
            semantic,
            text,
            layer_stacks: None,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1A7E_5000);
    let stacks = LayerStacks {
        emotion: perturbed_stack(&emotion, cfg.layers, &mut rng),
        semantic: perturbed_stack(&semantic, cfg.layers, &mut rng),
        text: perturbed_stack(&text, cfg.layers, &mut rng),
    };
    Ok(TeacherBundle {
        emotion: layer_average(&stacks.emotion)?,
        semantic: layer_average(&stacks.semantic)?,
        text: layer_average(&stacks.text)?,
        layer_stacks: Some(stacks),
    })
}

/// Elementwise mean over the layer axis of an `L × T × dim` stack.
pub fn layer_average(stack: &Array3<f64>) -> Result<Array2<f64>> {
    if stack.len_of(Axis(0)) == 0 {
        return invalid("empty layer stack");
    }
    Ok(stack.mean_axis(Axis(0)).expect("nonempty axis"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip: PathBuf,
    pub track: PathBuf,
    pub tokens: String,
    pub seed: u64,
}

/// Line-delimited manifest: a `{"format_version": N}` header line followed by
/// one JSON record per clip. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format_version: u32,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return invalid(format!(
                "manifest version {} (reader supports {MANIFEST_VERSION})",
                self.format_version
            ));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.clip) || !seen.insert(&e.track) {
                return invalid(format!("duplicate path in manifest: {}", e.clip.display()));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut w,
            &ManifestHeader {
                format_version: self.format_version,
            },
        )?;
        writeln!(w)?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut lines = r.lines();
        let header: ManifestHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: "empty manifest".into(),
                })
            }
        };
        let mut entries = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        let m = Self {
            format_version: header.format_version,
            entries,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub name: String,
    pub clip: AudioClip,
    pub track: EmotionLatentTrack,
    pub tokens: TokenSeq,
    pub seed: u64,
    pub teachers: TeacherBundle,
}

/// In-memory corpus with teachers precomputed per clip.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
    pub teacher_config: TeacherConfig,
}

impl Corpus {
    pub fn synthesize(specs: &[SynthSpec], teacher_config: TeacherConfig) -> Result<Self> {
        let items = specs
            .iter()
            .map(|spec| {
                let (clip, track, tokens) = gen_clip(spec)?;
                let teachers = gen_teachers(&clip, &tokens, &teacher_config)?;
                Ok(CorpusItem {
                    name: format!("clip_{:06}", spec.seed),
                    clip,
                    track,
                    tokens,
                    seed: spec.seed,
                    teachers,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            items,
            teacher_config,
        })
    }

    /// `n` clips of equal duration with seeds `base_seed..base_seed + n`.
    pub fn synthetic(n: usize, duration_s: f64, base_seed: u64, teacher_config: TeacherConfig) -> Result<Self> {
        let specs: Vec<SynthSpec> = (0..n as u64)
            .map(|i| SynthSpec {
                seed: base_seed + i,
                duration_s,
                n_tokens: ((duration_s * 8.0).round() as usize).max(1),
                sample_rate: DEFAULT_SAMPLE_RATE,
            })
            .collect();
        Self::synthesize(&specs, teacher_config)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn from_manifest(manifest: &CorpusManifest, teacher_config: TeacherConfig) -> Result<Self> {
        manifest.validate()?;
        let items = manifest
            .entries
            .iter()
            .map(|e| {
                let clip = io::read_wav(&manifest.root.join(&e.clip))?.pad_to_hop();
                let values = io::load_flat_array(&manifest.root.join(&e.track), TRACK_MAGIC)?;
                let track = EmotionLatentTrack {
                    values,
                    frame_rate: clip.sample_rate as f64 / HOP as f64,
                };
                let tokens = parse_tokens(&e.tokens)?;
                let teachers = gen_teachers(&clip, &tokens, &teacher_config)?;
                let name = e
                    .clip
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("clip_{}", e.seed));
                Ok(CorpusItem {
                    name,
                    clip,
                    track,
                    tokens,
                    seed: e.seed,
                    teachers,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            items,
            teacher_config,
        })
    }

    /// Writes clips, latent tracks, teacher bundles and `manifest.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<CorpusManifest> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for item in &self.items {
            let clip = PathBuf::from(format!("{}.wav", item.name));
            let track = PathBuf::from(format!("{}.track", item.name));
            io::write_wav(&dir.join(&clip), &item.clip)?;
            io::save_flat_array(&dir.join(&track), TRACK_MAGIC, &item.track.values)?;
            save_teachers(&dir.join(format!("{}.teachers", item.name)), &item.teachers)?;
            entries.push(ManifestEntry {
                clip,
                track,
                tokens: tokens_to_string(&item.tokens),
                seed: item.seed,
            });
        }
        let manifest = CorpusManifest {
            format_version: MANIFEST_VERSION,
            entries,
            root: dir.to_path_buf(),
        };
        manifest.write(&dir.join("manifest.jsonl"))?;
        Ok(manifest)
    }
}

pub const TRACK_MAGIC: [u8; 4] = *b"ELTK";
const TEACHER_MAGICS: [[u8; 4]; 3] = [*b"TEMO", *b"TSEM", *b"TTXT"];

/// Teacher bundle file: three consecutive flat arrays (E, S, C).
pub fn save_teachers(path: &Path, t: &TeacherBundle) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    io::write_flat_array(&mut w, TEACHER_MAGICS[0], &t.emotion)?;
    io::write_flat_array(&mut w, TEACHER_MAGICS[1], &t.semantic)?;
    io::write_flat_array(&mut w, TEACHER_MAGICS[2], &t.text)?;
    w.flush()?;
    Ok(())
}

pub fn load_teachers(path: &Path) -> Result<TeacherBundle> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(TeacherBundle {
        emotion: io::read_flat_array(&mut r, TEACHER_MAGICS[0], path)?,
        semantic: io::read_flat_array(&mut r, TEACHER_MAGICS[1], path)?,
        text: io::read_flat_array(&mut r, TEACHER_MAGICS[2], path)?,
        layer_stacks: None,
    })
}

/// Shuffled batch index lists for one epoch; deterministic in `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return invalid("batch size must be at least 1");
    }
    if n == 0 {
        return invalid("cannot batch an empty corpus");
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Zero-padded batch with per-frame validity.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub clips: Vec<AudioClip>,
    pub teachers: Vec<TeacherBundle>,
    pub tokens: Vec<TokenSeq>,
    /// Original (unpadded) frame count of each clip.
    pub frames: Vec<usize>,
    pub frame_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_indices(corpus: &Corpus, indices: &[usize]) -> Self {
        let max_len = indices
            .iter()
            .map(|&i| corpus.items[i].clip.samples.len())
            .max()
            .unwrap_or(0);
        let max_frames = max_len / HOP;
        let mut b = Batch {
            indices: indices.to_vec(),
            clips: Vec::new(),
            teachers: Vec::new(),
            tokens: Vec::new(),
            frames: Vec::new(),
            frame_mask: Vec::new(),
        };
        for &i in indices {
            let item = &corpus.items[i];
            let mut clip = item.clip.clone();
            let frames = clip.frames();
            clip.samples.resize(max_len, 0.0);
            b.clips.push(clip);
            b.teachers.push(item.teachers.clone());
            b.tokens.push(item.tokens.clone());
            b.frames.push(frames);
            b.frame_mask.push((0..max_frames).map(|t| t < frames).collect());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Endless stream of batches, reshuffled every epoch.
pub struct BatchIter<'a> {
    corpus: &'a Corpus,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchIter<'_> {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = match self.pending.next() {
            Some(idx) => idx,
            None => {
                self.epoch += 1;
                self.pending = epoch_batches(self.corpus.len(), self.batch_size, self.seed, self.epoch)
                    .ok()?
                    .into_iter();
                self.pending.next()?
            }
        };
        Some(Batch::from_indices(self.corpus, &idx))
    }
}

pub fn batch_iter(corpus: &Corpus, batch_size: usize, seed: u64) -> Result<BatchIter<'_>> {
    let first = epoch_batches(corpus.len(), batch_size, seed, 0)?;
    Ok(BatchIter {
        corpus,
        batch_size,
        seed,
        epoch: 0,
        pending: first.into_iter(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn gen_clip_is_deterministic() {
        let a = gen_clip(&spec(7)).unwrap();
        let b = gen_clip(&spec(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, gen_clip(&spec(8)).unwrap().0);
    }

    #[test]
    fn one_second_is_fifty_frames() {
        let (clip, track, tokens) = gen_clip(&spec(1)).unwrap();
        assert_eq!(clip.samples.len(), 16_000);
        assert_eq!(track.frames(), 50);
        assert_eq!(tokens.len(), 6);
        assert!(track.values.iter().all(|v| v.abs() <= 1.0 && v.is_finite()));
        assert!(clip.samples.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn odd_durations_are_padded_to_hop() {
        let s = SynthSpec {
            duration_s: 0.0101,
            ..spec(3)
        };
        let (clip, track, _) = gen_clip(&s).unwrap();
        assert_eq!(clip.samples.len() % HOP, 0);
        assert_eq!(clip.frames(), track.frames());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(gen_clip(&SynthSpec { duration_s: 0.0, ..spec(0) }).is_err());
        assert!(gen_clip(&SynthSpec { n_tokens: 0, ..spec(0) }).is_err());
    }

    #[test]
    fn zero_latent_gives_constant_carrier() {
        let track = EmotionLatentTrack::zeros(20, 50.0);
        let clip = render_clip(&track, &[], 16_000, 0);
        // 120 Hz at 16 kHz: period 133.33 samples, so 3 periods = 400 samples
        for n in 800..5000 {
            assert!((clip.samples[n] - clip.samples[n + 400]).abs() < 1e-3);
        }
        let peak = |r: std::ops::Range<usize>| {
            clip.samples[r].iter().fold(0.0f32, |m, v| m.max(v.abs()))
        };
        assert!((peak(0..2000) - peak(4000..6000)).abs() < 1e-3);
    }

    #[test]
    fn teachers_separate_channels() {
        let cfg = TeacherConfig::default();
        let tokens = vec![1, 5, 9];
        let (clip, _, _) = gen_clip(&spec(11)).unwrap();
        let mut other = EmotionLatentTrack::zeros(50, 50.0);
        other.values.fill(0.7);
        let clip_b = render_clip(&other, &tokens, 16_000, 11);
        let a = gen_teachers(&clip, &tokens, &cfg).unwrap();
        let b = gen_teachers(&clip_b, &tokens, &cfg).unwrap();
        assert_ne!(a.emotion, b.emotion);
        assert_eq!(a.text, b.text);
        // changing tokens leaves E untouched for fixed audio
        let c = gen_teachers(&clip, &[2, 2], &cfg).unwrap();
        assert_eq!(a.emotion, c.emotion);
        assert_eq!(a.frames(), 50);
        assert_eq!(a.text.nrows(), 3);
    }

    #[test]
    fn silent_clip_has_identical_emotion_rows() {
        let t = gen_teachers(&AudioClip::silent(3200, 16_000), &[0], &TeacherConfig::default()).unwrap();
        for r in t.emotion.rows() {
            assert_eq!(r, t.emotion.row(0));
        }
    }

    #[test]
    fn unknown_token_is_rejected() {
        let clip = AudioClip::silent(640, 16_000);
        assert!(gen_teachers(&clip, &[TOKEN_VOCAB as u32], &TeacherConfig::default()).is_err());
    }

    #[test]
    fn layer_stacks_average_to_bundle() {
        let (clip, _, tokens) = gen_clip(&spec(2)).unwrap();
        let one = gen_teachers(&clip, &tokens, &TeacherConfig::default()).unwrap();
        assert!(one.layer_stacks.is_none());
        let cfg = TeacherConfig {
            layers: 4,
            ..Default::default()
        };
        let many = gen_teachers(&clip, &tokens, &cfg).unwrap();
        let stacks = many.layer_stacks.as_ref().unwrap();
        assert_eq!(stacks.emotion.dim(), (4, 50, 32));
        assert_eq!(layer_average(&stacks.emotion).unwrap(), many.emotion);
        let single = one.emotion.clone().insert_axis(Axis(0));
        assert_eq!(layer_average(&single).unwrap(), one.emotion);
    }

    #[test]
    fn layer_average_edge_cases() {
        let v = Array2::from_shape_fn((3, 2), |(i, j)| i as f64 - j as f64 * 0.5);
        let mut stack = Array3::zeros((2, 3, 2));
        stack.index_axis_mut(Axis(0), 0).assign(&v);
        stack.index_axis_mut(Axis(0), 1).assign(&(-&v));
        assert!(layer_average(&stack).unwrap().iter().all(|x| *x == 0.0));
        let b = v.broadcast((5, 3, 2)).unwrap().to_owned();
        assert_eq!(layer_average(&b).unwrap(), v);
        assert!(layer_average(&Array3::zeros((0, 3, 2))).is_err());
    }

    #[test]
    fn epoch_batches_sizes_and_determinism() {
        let b = epoch_batches(10, 4, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, epoch_batches(10, 4, 3, 0).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let singles = epoch_batches(5, 1, 9, 0).unwrap();
        assert!(singles.iter().all(|s| s.len() == 1));
        assert!(epoch_batches(0, 4, 0, 0).is_err());
        assert!(epoch_batches(4, 0, 0, 0).is_err());
    }

    #[test]
    fn batches_pad_and_mask() {
        let specs = [
            SynthSpec { duration_s: 0.2, ..spec(1) },
            SynthSpec { duration_s: 0.4, ..spec(2) },
        ];
        let corpus = Corpus::synthesize(&specs, TeacherConfig::default()).unwrap();
        let b = Batch::from_indices(&corpus, &[0, 1]);
        assert!(b.clips.iter().all(|c| c.samples.len() == 6400));
        assert_eq!(b.frames, vec![10, 20]);
        assert_eq!(b.frame_mask[0].iter().filter(|m| **m).count(), 10);
        assert!(b.clips[0].samples[3200..].iter().all(|s| *s == 0.0));
    }

    #[test]
    fn manifest_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::synthetic(3, 0.2, 40, TeacherConfig::default()).unwrap();
        let m = corpus.write(dir.path()).unwrap();
        let back = CorpusManifest::read(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.entries, m.entries);
        let loaded = Corpus::from_manifest(&back, TeacherConfig::default()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.items[1].tokens, corpus.items[1].tokens);
        let t = load_teachers(&dir.path().join("clip_000040.teachers")).unwrap();
        assert_eq!(t.emotion.dim(), corpus.items[0].teachers.emotion.dim());

        let mut dup = m.clone();
        dup.entries.push(dup.entries[0].clone());
        assert!(dup.validate().is_err());
        let mut old = m;
        old.format_version = 99;
        assert!(old.validate().is_err());
    }
}
