//! Spectral front-end: STFT, mel spectrograms, log-spectral distance, and the
//! per-frame descriptors used by the synthetic teachers.
//!
//! Two routes are provided. The `f64` route (`stft`, `mel`, `lsd`) uses an FFT
//! and is exact up to rounding. The tensor route ([`TensorStft`],
//! [`TensorMel`]) expresses the same transform as a gather plus DFT matrix
//! product so gradients flow through it; the two are tested against each other.
//!
//! Framing convention: frame `f` covers samples `[f·hop, f·hop + win)`. The
//! frame count is `⌈(len − win)/hop⌉ + 1`, and the tail of the last frame is
//! filled by reflecting the signal about its final sample.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::corpus::AudioClip;
use crate::error::{invalid, shape, Result};
use crate::nn::DEVICE;

/// Number of mel bands in every mel representation.
pub const MEL_BANDS: usize = 64;
/// Mel resolutions `i`: window `2^i`, hop `2^i / 4`.
pub const MEL_RESOLUTIONS: [u32; 7] = [5, 6, 7, 8, 9, 10, 11];
/// Magnitude floor inside the square root of the tensor route.
pub const MAG_EPS: f64 = 1e-12;
/// Power floor for log-spectral distance.
pub const LSD_EPS: f64 = 1e-12;
/// STFT size used by [`lsd`].
pub const LSD_WINDOW: usize = 512;

#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub window_size: usize,
    pub hop: usize,
    pub n_frames: usize,
    pub n_bins: usize,
    /// Row-major `n_frames × n_bins` one-sided spectrum.
    pub bins: Vec<Complex64>,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.bins[frame * self.n_bins + bin]
    }

    pub fn power(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_frames, self.n_bins), |(f, k)| self.at(f, k).norm_sqr())
    }

    pub fn magnitude(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_frames, self.n_bins), |(f, k)| self.at(f, k).norm())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    /// `frames × MEL_BANDS`, nonnegative.
    pub values: Array2<f64>,
    pub resolution: u32,
}

pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    (len - window).div_ceil(hop) + 1
}

/// Source sample index for every (frame, offset) pair, reflecting past the end.
pub fn frame_positions(len: usize, window: usize, hop: usize) -> Vec<usize> {
    let frames = frame_count(len, window, hop);
    let mut idx = Vec::with_capacity(frames * window);
    for f in 0..frames {
        for n in 0..window {
            let p = f * hop + n;
            idx.push(if p < len { p } else { 2 * (len - 1) - p });
        }
    }
    idx
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

fn check_window(len: usize, window: usize, hop: usize) -> Result<()> {
    if window < 2 || !window.is_power_of_two() {
        return invalid(format!("window size {window} is not a power of two"));
    }
    if hop == 0 {
        return invalid("hop must be positive");
    }
    if len < window {
        return invalid(format!("signal of {len} samples is shorter than window {window}"));
    }
    Ok(())
}

pub fn stft(samples: &[f32], window_size: usize, hop: usize) -> Result<Spectrogram> {
    check_window(samples.len(), window_size, hop)?;
    let n_frames = frame_count(samples.len(), window_size, hop);
    let n_bins = window_size / 2 + 1;
    let positions = frame_positions(samples.len(), window_size, hop);
    let win = hann(window_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_size);
    let mut bins = Vec::with_capacity(n_frames * n_bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    for f in 0..n_frames {
        for (n, b) in buf.iter_mut().enumerate() {
            let x = samples[positions[f * window_size + n]] as f64;
            *b = Complex64::new(x * win[n], 0.0);
        }
        fft.process(&mut buf);
        bins.extend_from_slice(&buf[..n_bins]);
    }
    Ok(Spectrogram {
        window_size,
        hop,
        n_frames,
        n_bins,
        bins,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn build_filterbank(n_fft: usize, sample_rate: u32, n_mels: usize) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|j| mel_to_hz(top * j as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::<f64>::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut total = 0.0;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0);
            fb[[m, k]] = w;
            total += w;
        }
        if total == 0.0 {
            // triangle narrower than the bin spacing: interpolate at its centre
            let p = (c / bin_hz).min((n_bins - 1) as f64);
            let k0 = p.floor() as usize;
            let frac = p - k0 as f64;
            fb[[m, k0]] = 1.0 - frac;
            if k0 + 1 < n_bins {
                fb[[m, k0 + 1]] = frac;
            }
            total = fb.row(m).sum();
        }
        fb.row_mut(m).mapv_inplace(|w| w / total);
    }
    fb
}

type FbKey = (usize, u32, usize);

/// Triangular mel filterbank (`n_mels × (n_fft/2+1)`) spanning 0 Hz to Nyquist.
///
/// Every row is normalised to sum to one, so a band value is a weighted mean
/// of bin magnitudes. Bands narrower than one bin fall back to linear
/// interpolation at the band centre. Results are cached per configuration.
pub fn mel_filterbank(n_fft: usize, sample_rate: u32, n_mels: usize) -> Arc<Array2<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<FbKey, Arc<Array2<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().expect("filterbank cache poisoned");
    guard
        .entry((n_fft, sample_rate, n_mels))
        .or_insert_with(|| Arc::new(build_filterbank(n_fft, sample_rate, n_mels)))
        .clone()
}

fn check_resolution(i: u32) -> Result<()> {
    if !MEL_RESOLUTIONS.contains(&i) {
        return invalid(format!("mel resolution {i} outside 5..=11"));
    }
    Ok(())
}

/// Linear-magnitude mel spectrogram at resolution `i` (window `2^i`, hop `2^i/4`).
pub fn mel(clip: &AudioClip, i: u32) -> Result<MelSpec> {
    check_resolution(i)?;
    let win = 1usize << i;
    let spec = stft(&clip.samples, win, win / 4)?;
    let fb = mel_filterbank(win, clip.sample_rate, MEL_BANDS);
    let values = spec.magnitude().dot(&fb.t());
    Ok(MelSpec {
        values,
        resolution: i,
    })
}

/// Log-spectral distance in dB: RMS over frames of the per-frame RMS of
/// `10·log10` power differences. Symmetric and zero on identical inputs.
pub fn lsd(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    if reference.samples.len() != estimate.samples.len() {
        return shape(format!(
            "lsd length mismatch: {} vs {}",
            reference.samples.len(),
            estimate.samples.len()
        ));
    }
    let win = LSD_WINDOW.min(reference.samples.len().next_power_of_two() / 2).max(2);
    let a = stft(&reference.samples, win, win / 4)?.power();
    let b = stft(&estimate.samples, win, win / 4)?.power();
    let (frames, bins) = a.dim();
    let mut acc = 0.0;
    for f in 0..frames {
        let mut row = 0.0;
        for k in 0..bins {
            let d = 10.0 * ((a[[f, k]] + LSD_EPS).log10() - (b[[f, k]] + LSD_EPS).log10());
            row += d * d;
        }
        acc += row / bins as f64;
    }
    Ok((acc / frames as f64).sqrt())
}

/// Analysis window (two codec hops) centred on codec frame `t`, zero outside the clip.
fn analysis_frame(samples: &[f32], t: usize, hop: usize) -> Vec<f64> {
    let len = 2 * hop;
    let centre = t * hop + hop / 2;
    (0..len)
        .map(|n| {
            let p = centre as isize - hop as isize + n as isize;
            if p >= 0 && (p as usize) < samples.len() {
                samples[p as usize] as f64
            } else {
                0.0
            }
        })
        .collect()
}

const DESCRIPTOR_FFT: usize = 1024;

fn windowed_power(frame: &[f64]) -> Vec<f64> {
    let w = hann(frame.len());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(DESCRIPTOR_FFT);
    let mut buf = vec![Complex64::new(0.0, 0.0); DESCRIPTOR_FFT];
    for (i, x) in frame.iter().enumerate().take(DESCRIPTOR_FFT) {
        buf[i] = Complex64::new(x * w[i], 0.0);
    }
    fft.process(&mut buf);
    buf[..DESCRIPTOR_FFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Per-frame `[log energy, spectral centroid (Hz), autocorrelation f0 (Hz)]`.
///
/// The f0 search covers 70–250 Hz on the biased autocorrelation, with
/// parabolic refinement of the peak lag. Silent frames report f0 = 0 and
/// centroid = 0.
pub fn frame_descriptors(samples: &[f32], sample_rate: u32, hop: usize) -> Array2<f64> {
    let frames = samples.len() / hop;
    let sr = sample_rate as f64;
    let min_lag = (sr / 250.0).floor() as usize;
    let max_lag = (sr / 70.0).ceil() as usize;
    let bin_hz = sr / DESCRIPTOR_FFT as f64;
    let mut out = Array2::zeros((frames, 3));
    for t in 0..frames {
        let x = analysis_frame(samples, t, hop);
        let energy = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        out[[t, 0]] = (energy + 1e-8).ln();

        let p = windowed_power(&x);
        let mag_sum: f64 = p.iter().map(|v| v.sqrt()).sum();
        out[[t, 1]] = if mag_sum > 1e-12 {
            p.iter()
                .enumerate()
                .map(|(k, v)| k as f64 * bin_hz * v.sqrt())
                .sum::<f64>()
                / mag_sum
        } else {
            0.0
        };

        let r0: f64 = x.iter().map(|v| v * v).sum();
        out[[t, 2]] = if r0 > 1e-10 {
            let lags = min_lag..=max_lag.min(x.len() - 2);
            let r = |lag: usize| -> f64 {
                x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>() / r0
            };
            let (mut best, mut best_r) = (min_lag, f64::NEG_INFINITY);
            for lag in lags {
                let v = r(lag);
                if v > best_r {
                    best = lag;
                    best_r = v;
                }
            }
            let (a, b, c) = (r(best - 1), best_r, r(best + 1));
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-12 {
                (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            sr / (best as f64 + shift)
        } else {
            0.0
        };
    }
    out
}

/// Per-frame log mel envelope with `bands` bands over the same analysis windows.
pub fn frame_log_mel(samples: &[f32], sample_rate: u32, hop: usize, bands: usize) -> Array2<f64> {
    let frames = samples.len() / hop;
    let fb = mel_filterbank(DESCRIPTOR_FFT, sample_rate, bands);
    let mut out = Array2::zeros((frames, bands));
    for t in 0..frames {
        let p = windowed_power(&analysis_frame(samples, t, hop));
        for m in 0..bands {
            let e: f64 = fb.row(m).iter().zip(&p).map(|(w, v)| w * v).sum();
            out[[t, m]] = (e + 1e-8).ln();
        }
    }
    out
}

/// Differentiable STFT for fixed signal length, as gather + DFT matrix product.
#[derive(Debug)]
pub struct TensorStft {
    pub len: usize,
    pub window: usize,
    pub hop: usize,
    pub n_frames: usize,
    pub n_bins: usize,
    index: Tensor,
    cos: Tensor,
    sin: Tensor,
}

impl TensorStft {
    fn build(len: usize, window: usize, hop: usize, dtype: DType) -> Result<Self> {
        check_window(len, window, hop)?;
        let n_frames = frame_count(len, window, hop);
        let n_bins = window / 2 + 1;
        let idx: Vec<u32> = frame_positions(len, window, hop)
            .into_iter()
            .map(|p| p as u32)
            .collect();
        let w = hann(window);
        let mut cos = Vec::with_capacity(window * n_bins);
        let mut sin = Vec::with_capacity(window * n_bins);
        for (n, wn) in w.iter().enumerate() {
            for k in 0..n_bins {
                // reduce the phase index exactly before taking trig functions
                let ph = ((n * k) % window) as f64 * 2.0 * std::f64::consts::PI / window as f64;
                cos.push(wn * ph.cos());
                sin.push(-wn * ph.sin());
            }
        }
        Ok(Self {
            len,
            window,
            hop,
            n_frames,
            n_bins,
            index: Tensor::from_vec(idx, n_frames * window, &DEVICE)?,
            cos: Tensor::from_vec(cos, (window, n_bins), &DEVICE)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, (window, n_bins), &DEVICE)?.to_dtype(dtype)?,
        })
    }

    /// Cached instance for `(len, window, hop, dtype)`.
    pub fn get(len: usize, window: usize, hop: usize, dtype: DType) -> Result<Arc<Self>> {
        type Key = (usize, usize, usize, DType);
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<TensorStft>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let key = (len, window, hop, dtype);
        if let Some(s) = cache.lock().expect("stft cache poisoned").get(&key) {
            return Ok(s.clone());
        }
        let s = Arc::new(Self::build(len, window, hop, dtype)?);
        cache
            .lock()
            .expect("stft cache poisoned")
            .insert(key, s.clone());
        Ok(s)
    }

    /// Real and imaginary parts, each `(B, frames, bins)`, for `x: (B, len)`.
    pub fn complex(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, l) = x.dims2()?;
        if l != self.len {
            return shape(format!("stft built for length {}, got {l}", self.len));
        }
        let frames = x
            .index_select(&self.index, 1)?
            .reshape((b * self.n_frames, self.window))?;
        let re = frames.matmul(&self.cos)?.reshape((b, self.n_frames, self.n_bins))?;
        let im = frames.matmul(&self.sin)?.reshape((b, self.n_frames, self.n_bins))?;
        Ok((re, im))
    }

    pub fn magnitude(&self, x: &Tensor) -> Result<Tensor> {
        let (re, im) = self.complex(x)?;
        Ok(((re.sqr()? + im.sqr()?)? + MAG_EPS)?.sqrt()?)
    }
}

/// Differentiable counterpart of [`mel`] for a fixed signal length.
#[derive(Debug)]
pub struct TensorMel {
    stft: Arc<TensorStft>,
    fbank_t: Tensor,
    pub resolution: u32,
}

impl TensorMel {
    pub fn new(len: usize, i: u32, sample_rate: u32, dtype: DType) -> Result<Self> {
        check_resolution(i)?;
        let win = 1usize << i;
        let stft = TensorStft::get(len, win, win / 4, dtype)?;
        let fb = mel_filterbank(win, sample_rate, MEL_BANDS);
        let fbank_t = crate::nn::from_array2(&fb.t().to_owned(), dtype)?;
        Ok(Self {
            stft,
            fbank_t,
            resolution: i,
        })
    }

    /// `(B, len) → (B, frames, MEL_BANDS)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.stft.magnitude(x)?.broadcast_matmul(&self.fbank_t)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(samples: Vec<f32>) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: 16_000,
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect()
    }

    #[test]
    fn zero_signal_has_zero_bins() {
        let s = stft(&[0.0; 1024], 256, 64).unwrap();
        assert!(s.bins.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn sine_at_bin_centre_concentrates_in_main_lobe() {
        let (n, k) = (256usize, 20usize);
        let x: Vec<f32> = (0..4096)
            .map(|t| (2.0 * std::f64::consts::PI * k as f64 * t as f64 / n as f64).sin() as f32)
            .collect();
        let s = stft(&x, n, n / 4).unwrap();
        let p = s.power();
        for f in 0..s.n_frames {
            let total: f64 = p.row(f).sum();
            let lobe = p[[f, k - 1]] + p[[f, k]] + p[[f, k + 1]];
            assert!(lobe / total >= 0.9, "frame {f}: {}", lobe / total);
            assert!(p[[f, k]] >= p[[f, k - 1]] && p[[f, k]] >= p[[f, k + 1]]);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let x = noise(3000, 1);
        let (win, hop) = (512, 128);
        let s = stft(&x, win, hop).unwrap();
        let pos = frame_positions(x.len(), win, hop);
        let w = hann(win);
        for f in 0..s.n_frames {
            let time: f64 = (0..win)
                .map(|n| (x[pos[f * win + n]] as f64 * w[n]).powi(2))
                .sum();
            let freq: f64 = (0..s.n_bins)
                .map(|k| {
                    let c = if k == 0 || k == s.n_bins - 1 { 1.0 } else { 2.0 };
                    c * s.at(f, k).norm_sqr()
                })
                .sum::<f64>()
                / win as f64;
            assert!(((time - freq) / time).abs() < 1e-6);
        }
    }

    #[test]
    fn stft_rejects_short_clip_and_bad_window() {
        assert!(stft(&[0.0; 100], 128, 32).is_err());
        assert!(stft(&[0.0; 1000], 100, 25).is_err());
    }

    #[test]
    fn frame_counts_follow_ceiling_rule() {
        for i in MEL_RESOLUTIONS {
            let win = 1usize << i;
            for len in [2048usize, 2049, 5000, 16_000] {
                let m = mel(&clip(noise(len, 2)), i).unwrap();
                assert_eq!(m.values.nrows(), (len - win).div_ceil(win / 4) + 1);
                assert_eq!(m.values.ncols(), MEL_BANDS);
            }
        }
    }

    #[test]
    fn filterbank_rows_sum_to_one_and_are_cached() {
        for i in MEL_RESOLUTIONS {
            let fb = mel_filterbank(1 << i, 16_000, MEL_BANDS);
            for row in fb.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|w| *w >= 0.0));
            }
            assert!(Arc::ptr_eq(&fb, &mel_filterbank(1 << i, 16_000, MEL_BANDS)));
        }
    }

    #[test]
    fn mel_zero_and_linear_scaling() {
        let z = mel(&clip(vec![0.0; 4096]), 9).unwrap();
        assert!(z.values.iter().all(|v| *v == 0.0));
        let x = noise(4096, 3);
        let x2: Vec<f32> = x.iter().map(|v| v * 2.0).collect();
        let a = mel(&clip(x.clone()), 8).unwrap();
        let b = mel(&clip(x2), 8).unwrap();
        assert_eq!(a, mel(&clip(x), 8).unwrap());
        for (u, v) in a.values.iter().zip(b.values.iter()) {
            assert!((2.0 * u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
        assert!(mel(&clip(vec![0.0; 4096]), 4).is_err());
        assert!(mel(&clip(vec![0.0; 4096]), 12).is_err());
    }

    #[test]
    fn lsd_identity_symmetry_and_gain() {
        let x = clip(noise(8000, 4));
        let y = clip(noise(8000, 5));
        assert_eq!(lsd(&x, &x).unwrap(), 0.0);
        assert!((lsd(&x, &y).unwrap() - lsd(&y, &x).unwrap()).abs() < 1e-12);
        let x2 = clip(x.samples.iter().map(|v| v * 2.0).collect());
        let expected = 20.0 * 2f64.log10();
        assert!((lsd(&x2, &x).unwrap() - expected).abs() < 1e-6);
        assert!(lsd(&x, &clip(vec![0.0; 10])).is_err());
    }

    #[test]
    fn tensor_route_matches_fft_route() {
        let x = noise(2500, 6);
        let t = Tensor::from_vec(x.iter().map(|v| *v as f64).collect::<Vec<_>>(), (1, 2500), &DEVICE)
            .unwrap();
        for i in MEL_RESOLUTIONS {
            let tm = TensorMel::new(2500, i, 16_000, DType::F64).unwrap();
            let got = tm.forward(&t).unwrap().squeeze(0).unwrap();
            let got = crate::nn::to_array2(&got).unwrap();
            let want = mel(&clip(x.clone()), i).unwrap().values;
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "res {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn descriptors_of_silence_are_constant() {
        let d = frame_descriptors(&[0.0; 3200], 16_000, 320);
        for r in d.rows() {
            assert_eq!(r, d.row(0));
        }
        assert_eq!(d[[0, 2]], 0.0);
    }

    #[test]
    fn f0_proxy_tracks_sine_pitch() {
        for f0 in [90.0f64, 120.0, 150.0] {
            let x: Vec<f32> = (0..6400)
                .map(|n| (2.0 * std::f64::consts::PI * f0 * n as f64 / 16_000.0).sin() as f32 * 0.5)
                .collect();
            let d = frame_descriptors(&x, 16_000, 320);
            for t in 2..18 {
                assert!((d[[t, 2]] - f0).abs() < 2.0, "{f0}: {}", d[[t, 2]]);
            }
        }
    }
}
