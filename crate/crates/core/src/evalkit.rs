//! Desk-scale evaluation: spectral fidelity, emotion-proxy similarity,
//! ridge probes of the emotion latent, and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{gen_teachers, AudioClip, Corpus, TeacherConfig};
use crate::error::{invalid, shape, Error, Result};
use crate::features::{self, mel_filterbank};
use crate::nn;
use crate::objectives::{MelLoss, COS_EPS};
use crate::trainer::CodecModel;

pub const RIDGE_LAMBDA: f64 = 1e-2;
pub const TRAIN_FRACTION: f64 = 0.8;
/// Upper edge of the highlighted band in spectrogram images.
pub const HIGHLIGHT_HZ: f64 = 800.0;

#[derive(Debug, Clone, Serialize)]
pub struct ClipMetrics {
    pub clip: String,
    pub mel: f64,
    pub lsd: f64,
    pub emo_proxy: f64,
}

#[derive(Debug, Clone)]
pub struct ClipAudio {
    pub clip: String,
    pub reference: AudioClip,
    pub reconstruction: AudioClip,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub label: String,
    pub config_hash: u64,
    pub seeds: Vec<u64>,
    pub clips: Vec<ClipMetrics>,
    pub mel: f64,
    pub lsd: f64,
    pub emo_proxy: f64,
    /// Held-out R² per emotion-latent dimension, when probed.
    pub probe_r2: Option<Vec<f64>>,
    #[serde(skip)]
    pub audio: Vec<ClipAudio>,
}

impl EvalReport {
    pub fn from_clips(label: impl Into<String>, config_hash: u64, seeds: Vec<u64>, clips: Vec<ClipMetrics>) -> Result<Self> {
        if clips.is_empty() {
            return invalid("a report needs at least one clip");
        }
        let n = clips.len() as f64;
        let mean = |f: fn(&ClipMetrics) -> f64| clips.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            label: label.into(),
            config_hash,
            seeds,
            mel: mean(|c| c.mel),
            lsd: mean(|c| c.lsd),
            emo_proxy: mean(|c| c.emo_proxy),
            clips,
            probe_r2: None,
            audio: Vec::new(),
        })
    }

    pub fn probe_mean(&self) -> Option<f64> {
        self.probe_r2
            .as_ref()
            .map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64)
    }
}

/// Mean over frames of the ε-guarded cosine between matching rows.
pub fn mean_row_cosine(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() || a.nrows() == 0 {
        return shape(format!("cosine inputs {:?} vs {:?}", a.dim(), b.dim()));
    }
    let guard = |r: ndarray::ArrayView1<f64>| (r.dot(&r) + COS_EPS * COS_EPS).sqrt();
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.dot(&y) / (guard(x) * guard(y)))
        .sum();
    Ok(total / a.nrows() as f64)
}

/// Mel distance, LSD and emotion-proxy similarity of one reconstruction.
pub fn clip_metrics(
    name: &str,
    reference: &AudioClip,
    estimate: &AudioClip,
    tokens: &[u32],
    teachers: &TeacherConfig,
) -> Result<ClipMetrics> {
    if reference.samples.len() != estimate.samples.len() {
        return shape(format!(
            "reference has {} samples, reconstruction {}",
            reference.samples.len(),
            estimate.samples.len()
        ));
    }
    let x = nn::from_f64(reference.samples.iter().map(|&v| v as f64).collect(), &[1, reference.samples.len()], DType::F64)?;
    let y = nn::from_f64(estimate.samples.iter().map(|&v| v as f64).collect(), &[1, estimate.samples.len()], DType::F64)?;
    let mel = nn::scalar(&MelLoss::new(reference.samples.len(), reference.sample_rate, DType::F64)?.forward(&x, &y)?)?;
    let lsd = features::lsd(reference, estimate)?;
    let e_ref = gen_teachers(reference, tokens, teachers)?.emotion;
    let e_est = gen_teachers(estimate, tokens, teachers)?.emotion;
    Ok(ClipMetrics {
        clip: name.to_string(),
        mel,
        lsd,
        emo_proxy: mean_row_cosine(&e_ref, &e_est)?,
    })
}

/// Runs every corpus clip through the codec and scores the reconstructions.
pub fn eval_reconstruction(model: &CodecModel, corpus: &Corpus) -> Result<EvalReport> {
    if corpus.teacher_config != model.cfg.teachers {
        return Err(Error::Config("corpus teachers differ from the model's teacher config".into()));
    }
    let mut clips = Vec::with_capacity(corpus.len());
    let mut audio = Vec::with_capacity(corpus.len());
    for item in &corpus.items {
        let a = model.analyze(&item.clip, &item.teachers)?;
        clips.push(clip_metrics(&item.name, &item.clip, &a.reconstruction, &item.tokens, &corpus.teacher_config)?);
        audio.push(ClipAudio {
            clip: item.name.clone(),
            reference: item.clip.clone(),
            reconstruction: a.reconstruction,
        });
    }
    let mut r = EvalReport::from_clips("codec", model.cfg.hash(), vec![model.cfg.seed], clips)?;
    r.audio = audio;
    Ok(r)
}

/// Ridge regression with intercept fitted on `(x_train, y_train)`; returns the
/// held-out R² per target column.
pub fn ridge_r2(
    x_train: &Array2<f64>,
    y_train: &Array2<f64>,
    x_test: &Array2<f64>,
    y_test: &Array2<f64>,
    lambda: f64,
) -> Result<Vec<f64>> {
    if x_train.nrows() != y_train.nrows() || x_test.nrows() != y_test.nrows() || x_train.ncols() != x_test.ncols() {
        return shape("probe design and target shapes disagree");
    }
    if x_train.nrows() == 0 || x_test.nrows() == 0 {
        return invalid("probe needs train and test rows");
    }
    let (n, d) = x_train.dim();
    let x_mean = x_train.mean_axis(ndarray::Axis(0)).expect("rows");
    let y_mean = y_train.mean_axis(ndarray::Axis(0)).expect("rows");
    let xc = x_train - &x_mean;
    let xm = DMatrix::from_row_iterator(n, d, xc.iter().copied());
    let gram = xm.transpose() * &xm + DMatrix::identity(d, d) * lambda;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::NonFinite("probe Gram matrix is not positive definite".into()))?;
    let xt_test = x_test - &x_mean;
    let mut out = Vec::with_capacity(y_train.ncols());
    for j in 0..y_train.ncols() {
        let yc = DVector::from_iterator(n, y_train.column(j).iter().map(|v| v - y_mean[j]));
        let w = chol.solve(&(xm.transpose() * yc));
        let truth = y_test.column(j);
        let t_mean = truth.mean().unwrap_or(0.0);
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for (row, &y) in xt_test.rows().into_iter().zip(truth.iter()) {
            let pred = y_mean[j] + row.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>();
            ss_res += (y - pred).powi(2);
            ss_tot += (y - t_mean).powi(2);
        }
        out.push(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 });
    }
    Ok(out)
}

/// Per-clip feature/target pairs split 80/20 by clip (seeded), then probed.
pub fn probe(features: &[Array2<f64>], targets: &[Array2<f64>], lambda: f64, seed: u64) -> Result<Vec<f64>> {
    if features.len() != targets.len() {
        return shape("one target matrix per feature matrix is required");
    }
    if features.len() < 2 {
        return invalid("probing needs at least two clips");
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((features.len() as f64 * TRAIN_FRACTION).round() as usize).clamp(1, features.len() - 1);
    let stack = |idx: &[usize], src: &[Array2<f64>], other: &[Array2<f64>]| -> Array2<f64> {
        let views: Vec<_> = idx
            .iter()
            .map(|&i| {
                let t = src[i].nrows().min(other[i].nrows());
                src[i].slice(s![..t, ..])
            })
            .collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
    };
    let (tr, te) = order.split_at(n_train);
    ridge_r2(
        &stack(tr, features, targets),
        &stack(tr, targets, features),
        &stack(te, features, targets),
        &stack(te, targets, features),
        lambda,
    )
}

/// Held-out R² of a ridge probe from first-layer quantized embeddings to the
/// synthetic emotion latent.
pub fn probe_emotion(model: &CodecModel, corpus: &Corpus) -> Result<Vec<f64>> {
    if corpus.len() < 2 {
        return invalid("probing needs at least two clips");
    }
    let mut feats = Vec::with_capacity(corpus.len());
    let mut targets = Vec::with_capacity(corpus.len());
    for item in &corpus.items {
        let a = model.analyze(&item.clip, &item.teachers)?;
        feats.push(a.layers[0].clone());
        targets.push(item.track.values.clone());
    }
    probe(&feats, &targets, RIDGE_LAMBDA, model.cfg.seed)
}

const PALETTE: [(f64, [f64; 3]); 5] = [
    (0.0, [13.0, 8.0, 135.0]),
    (0.25, [126.0, 3.0, 168.0]),
    (0.5, [204.0, 71.0, 120.0]),
    (0.75, [248.0, 149.0, 64.0]),
    (1.0, [240.0, 249.0, 33.0]),
];

fn colour(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let i = PALETTE.iter().position(|(p, _)| *p >= v).unwrap_or(PALETTE.len() - 1).max(1);
    let (p0, c0) = PALETTE[i - 1];
    let (p1, c1) = PALETTE[i];
    let f = if p1 > p0 { (v - p0) / (p1 - p0) } else { 0.0 };
    Rgb([0, 1, 2].map(|k| (c0[k] + f * (c1[k] - c0[k])).round() as u8))
}

const IMG_WINDOW: usize = 512;
const IMG_BANDS: usize = 80;
const IMG_SCALE: u32 = 3;

/// Log-mel (dB) image data `(frames, bands)` and the number of bands whose
/// centre lies below [`HIGHLIGHT_HZ`].
fn log_mel(clip: &AudioClip) -> Result<(Array2<f64>, usize)> {
    let win = IMG_WINDOW.min(clip.samples.len().next_power_of_two() / 2).max(32);
    let spec = features::stft(&clip.samples, win, win / 4)?;
    let fb = mel_filterbank(win, clip.sample_rate, IMG_BANDS);
    let m = spec.power().dot(&fb.t()).mapv(|p| 10.0 * (p + 1e-10).log10());
    let top = features::hz_to_mel(clip.sample_rate as f64 / 2.0);
    let edge = features::hz_to_mel(HIGHLIGHT_HZ);
    let low = (0..IMG_BANDS)
        .filter(|&b| (b as f64 + 1.0) / (IMG_BANDS as f64 + 1.0) * top < edge)
        .count();
    Ok((m, low))
}

/// Reference (top) and reconstruction (bottom) log-mel panels sharing one
/// colour scale; the sub-800 Hz rows are bracketed by a bar on the left and a
/// line at their upper edge.
pub fn spectrogram_png(reference: &AudioClip, reconstruction: &AudioClip, path: &Path) -> Result<()> {
    let (a, low) = log_mel(reference)?;
    let (b, _) = log_mel(reconstruction)?;
    let hi = a.iter().chain(b.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = hi - 80.0;
    let frames = a.nrows().max(b.nrows()) as u32;
    let margin = 6u32;
    let gap = 4u32;
    let panel_h = IMG_BANDS as u32 * IMG_SCALE;
    let width = margin + frames * IMG_SCALE;
    let height = 2 * panel_h + gap;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let highlight = Rgb([0, 220, 120]);
    for (p, m) in [&a, &b].into_iter().enumerate() {
        let y0 = p as u32 * (panel_h + gap);
        for f in 0..m.nrows() {
            for band in 0..IMG_BANDS {
                let c = colour((m[[f, band]] - lo) / (hi - lo));
                let row = IMG_BANDS - 1 - band;
                for dx in 0..IMG_SCALE {
                    for dy in 0..IMG_SCALE {
                        img.put_pixel(margin + f as u32 * IMG_SCALE + dx, y0 + row as u32 * IMG_SCALE + dy, c);
                    }
                }
            }
        }
        let edge_y = y0 + (IMG_BANDS - low) as u32 * IMG_SCALE;
        for y in edge_y..y0 + panel_h {
            for x in 0..margin - 2 {
                img.put_pixel(x, y, highlight);
            }
        }
        if edge_y > y0 {
            for x in margin..width {
                img.put_pixel(x, edge_y - 1, highlight);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Column groups shared by the text and CSV tables.
pub const TABLE_HEADER: [&str; 5] = ["Emo SIM (proxy)", "Probe R2", "LSD", "Mel dist", "Clips"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Human-readable table: one row per report, grouped by emotion consistency, content and naturalness.
pub fn text_table(reports: &[EvalReport], title: &str) -> String {
    let name_w = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(title.len()).max(8);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<name_w$} | {:^29} | {:^10} | {:^19}",
        "",
        "Emotion Consistency",
        "Content",
        "Naturalness"
    );
    let _ = writeln!(
        s,
        "{:<name_w$} | {:>15} {:>13} | {:>10} | {:>10} {:>8}",
        title, TABLE_HEADER[0], TABLE_HEADER[1], TABLE_HEADER[2], TABLE_HEADER[3], TABLE_HEADER[4]
    );
    let _ = writeln!(s, "{}", "-".repeat(name_w + 68));
    for r in reports {
        let _ = writeln!(
            s,
            "{:<name_w$} | {:>15.4} {:>13} | {:>10.4} | {:>10.4} {:>8}",
            r.label,
            r.emo_proxy,
            fmt_opt(r.probe_mean()),
            r.lsd,
            r.mel,
            r.clips.len()
        );
    }
    s
}

/// Writes `metrics.csv`, `metrics.txt` and `spectrograms/<clip>.png` under
/// `dest`. Returns the paths written.
pub fn emit_report(reports: &[EvalReport], dest: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return invalid("emit_report needs at least one report");
    }
    let spec_dir = dest.join("spectrograms");
    fs::create_dir_all(&spec_dir)?;
    let mut written = Vec::new();

    let mut csv = String::from("report,clip,emo_sim_proxy,probe_r2,lsd,mel_dist,config_hash,seeds\n");
    for r in reports {
        let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        for c in &r.clips {
            let _ = writeln!(csv, "{},{},{},,{},{},{:016x},{}", r.label, c.clip, c.emo_proxy, c.lsd, c.mel, r.config_hash, seeds);
        }
        let probe = r.probe_mean().map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},mean,{},{},{},{},{:016x},{}", r.label, r.emo_proxy, probe, r.lsd, r.mel, r.config_hash, seeds);
    }
    let p = dest.join("metrics.csv");
    fs::write(&p, csv)?;
    written.push(p);

    let p = dest.join("metrics.txt");
    fs::write(&p, text_table(reports, "Report"))?;
    written.push(p);

    for r in reports {
        for a in &r.audio {
            let name = if reports.len() > 1 {
                format!("{}_{}.png", r.label, a.clip)
            } else {
                format!("{}.png", a.clip)
            };
            let p = spec_dir.join(sanitize(&name));
            spectrogram_png(&a.reference, &a.reconstruction, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::emotion_features;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn corpus(n: usize) -> Corpus {
        Corpus::synthetic(n, 1.0, 300, TeacherConfig::default()).unwrap()
    }

    #[test]
    fn identity_reconstruction_is_perfect() {
        let c = corpus(1);
        let it = &c.items[0];
        let m = clip_metrics("a", &it.clip, &it.clip, &it.tokens, &c.teacher_config).unwrap();
        assert_eq!(m.mel, 0.0);
        assert_eq!(m.lsd, 0.0);
        assert!((m.emo_proxy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn silent_reconstruction_is_well_defined() {
        let c = corpus(1);
        let it = &c.items[0];
        let silent = AudioClip::silent(it.clip.samples.len(), it.clip.sample_rate);
        let m = clip_metrics("a", &it.clip, &silent, &it.tokens, &c.teacher_config).unwrap();
        assert!(m.emo_proxy.is_finite() && (-1.0..=1.0).contains(&m.emo_proxy));
        assert!(m.mel.is_finite() && m.lsd.is_finite());
    }

    #[test]
    fn cosine_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = Array2::from_shape_simple_fn((5, 3), || rng.gen_range(-2.0..2.0));
            let b = Array2::from_shape_simple_fn((5, 3), || rng.gen_range(-2.0..2.0));
            let c = mean_row_cosine(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&c));
        }
        let z = Array2::zeros((2, 3));
        assert_eq!(mean_row_cosine(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn ridge_recovers_a_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((200, 3), || rng.gen_range(-1.0..1.0));
        let w = ndarray::arr2(&[[1.0, -2.0], [0.5, 0.0], [0.0, 3.0]]);
        let y = x.dot(&w) + 0.7;
        let r2 = ridge_r2(&x.slice(s![..150, ..]).to_owned(), &y.slice(s![..150, ..]).to_owned(), &x.slice(s![150.., ..]).to_owned(), &y.slice(s![150.., ..]).to_owned(), 1e-6).unwrap();
        assert!(r2.iter().all(|v| (v - 1.0).abs() < 1e-8), "{r2:?}");
        let big = ridge_r2(&x.slice(s![..150, ..]).to_owned(), &y.slice(s![..150, ..]).to_owned(), &x.slice(s![150.., ..]).to_owned(), &y.slice(s![150.., ..]).to_owned(), 1e12).unwrap();
        assert!(big.iter().all(|v| *v <= 1e-3), "{big:?}");
    }

    #[test]
    fn dsp_descriptors_probe_the_latent_well() {
        let c = corpus(20);
        let feats: Vec<Array2<f64>> = c.items.iter().map(|it| emotion_features(&it.clip)).collect();
        let targets: Vec<Array2<f64>> = c.items.iter().map(|it| it.track.values.clone()).collect();
        let r2 = probe(&feats, &targets, RIDGE_LAMBDA, 0).unwrap();
        assert!(r2.iter().all(|v| *v > 0.9), "{r2:?}");
    }

    #[test]
    fn noise_probe_is_near_zero() {
        let c = corpus(20);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats: Vec<Array2<f64>> = c
            .items
            .iter()
            .map(|it| Array2::from_shape_simple_fn((it.track.frames(), 4), || rng.sample(StandardNormal)))
            .collect();
        let targets: Vec<Array2<f64>> = c.items.iter().map(|it| it.track.values.clone()).collect();
        let r2 = probe(&feats, &targets, RIDGE_LAMBDA, 0).unwrap();
        assert!(r2.iter().all(|v| v.abs() < 0.1), "{r2:?}");
        assert!(probe(&feats[..1], &targets[..1], RIDGE_LAMBDA, 0).is_err());
    }

    #[test]
    fn report_files_and_aggregates() {
        let c = corpus(2);
        let clips: Vec<ClipMetrics> = c
            .items
            .iter()
            .map(|it| {
                let mut est = it.clip.clone();
                est.samples.iter_mut().for_each(|s| *s *= 0.8);
                clip_metrics(&it.name, &it.clip, &est, &it.tokens, &c.teacher_config).unwrap()
            })
            .collect();
        let mut r = EvalReport::from_clips("single", 1, vec![0], clips.clone()).unwrap();
        r.audio = c
            .items
            .iter()
            .map(|it| ClipAudio {
                clip: it.name.clone(),
                reference: it.clip.clone(),
                reconstruction: it.clip.clone(),
            })
            .collect();
        let mean = clips.iter().map(|m| m.mel).sum::<f64>() / 2.0;
        assert!((r.mel - mean).abs() < 1e-9);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&[r], dir.path()).unwrap();
        let txt = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
        assert_eq!(txt.lines().filter(|l| l.starts_with("single")).count(), 1);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 + 1);
        for it in &c.items {
            let p = dir.path().join("spectrograms").join(format!("{}.png", it.name));
            assert!(fs::metadata(&p).unwrap().len() > 0);
            assert!(files.contains(&p));
        }
        assert!(emit_report(&[], dir.path()).is_err());
    }
}
