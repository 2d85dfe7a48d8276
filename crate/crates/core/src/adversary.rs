//! Multi-scale STFT, multi-scale waveform and multi-period discriminators with
//! hinge adversarial and normalised feature-matching losses.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::features::TensorStft;
use crate::nn::{self, Init, ParamStore, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub stft_windows: Vec<usize>,
    pub msd_scales: Vec<usize>,
    pub mpd_periods: Vec<usize>,
    pub channels: usize,
    /// Feature layers per discriminator (the logit layer comes after these).
    pub layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            stft_windows: vec![512, 1024, 2048],
            msd_scales: vec![1, 2, 4],
            mpd_periods: vec![2, 3, 5],
            channels: 16,
            layers: 4,
        }
    }
}

impl DiscriminatorConfig {
    pub fn count(&self) -> usize {
        self.stft_windows.len() + self.msd_scales.len() + self.mpd_periods.len()
    }

    pub fn min_len(&self) -> usize {
        self.stft_windows.iter().copied().max().unwrap_or(1)
    }
}

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * 0.2)?)?)
}

#[derive(Debug, Clone)]
struct Conv2d {
    w: Tensor,
    b: Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl Conv2d {
    fn new(s: &mut Scope<'_>, c_in: usize, c_out: usize, k: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        let bound = 1.0 / ((c_in * k.0 * k.1) as f64).sqrt();
        Ok(Self {
            w: s.param("w", &[c_out, c_in, k.0, k.1], Init::Uniform(bound))?,
            b: s.param("b", &[c_out], Init::Zeros)?,
            stride,
            pad: (k.0 / 2, k.1 / 2),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // candle's conv2d takes one padding for both axes, so pad explicitly
        let x = x
            .pad_with_zeros(2, self.pad.0, self.pad.0)?
            .pad_with_zeros(3, self.pad.1, self.pad.1)?;
        let y = if self.stride.0 == self.stride.1 {
            x.conv2d(&self.w, 0, self.stride.0, 1, 1)?
        } else {
            let y = x.conv2d(&self.w, 0, 1, 1, 1)?;
            strided(&y, self.stride)?
        };
        let c = self.w.dims()[0];
        Ok(y.broadcast_add(&self.b.reshape((1, c, 1, 1))?)?)
    }
}

/// Keeps every `s.0`-th row and `s.1`-th column of a `(B, C, H, W)` map.
fn strided(y: &Tensor, s: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = y.dims4()?;
    let rows: Vec<u32> = (0..h).step_by(s.0).map(|i| i as u32).collect();
    let cols: Vec<u32> = (0..w).step_by(s.1).map(|i| i as u32).collect();
    let y = if s.0 > 1 {
        y.index_select(&Tensor::new(rows, y.device())?, 2)?
    } else {
        y.clone()
    };
    Ok(if s.1 > 1 {
        y.index_select(&Tensor::new(cols, y.device())?, 3)?
    } else {
        y
    })
}

#[derive(Debug, Clone)]
enum Kind {
    Stft(usize),
    Scale(usize),
    Period(usize),
}

#[derive(Debug, Clone)]
struct Disc {
    kind: Kind,
    convs: Vec<Conv2d>,
    out: Conv2d,
}

/// One discriminator's mean-pooled logit per batch element and its feature maps.
pub struct DiscOutput {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorSet {
    pub cfg: DiscriminatorConfig,
    discs: Vec<Disc>,
}

impl DiscriminatorSet {
    pub fn new(store: &mut ParamStore, cfg: &DiscriminatorConfig) -> Result<Self> {
        if cfg.count() == 0 {
            return invalid("at least one discriminator is required");
        }
        if cfg.layers == 0 || cfg.channels == 0 {
            return invalid("discriminators need layers and channels");
        }
        let c = cfg.channels;
        let mut discs = Vec::new();
        let build = |store: &mut ParamStore, name: String, kind: Kind, c_in: usize, k: (usize, usize), s: (usize, usize)| -> Result<Disc> {
            let mut sc = store.scope(&name);
            let convs = (0..cfg.layers)
                .map(|l| {
                    let cin = if l == 0 { c_in } else { c };
                    let stride = if l == 0 || l + 1 == cfg.layers { (1, 1) } else { s };
                    Conv2d::new(&mut sc.pp(&format!("conv{l}")), cin, c, k, stride)
                })
                .collect::<Result<_>>()?;
            let out = Conv2d::new(&mut sc.pp("out"), c, 1, (3, 3.min(k.1)), (1, 1))?;
            Ok(Disc { kind, convs, out })
        };
        for &w in &cfg.stft_windows {
            discs.push(build(store, format!("stft{w}"), Kind::Stft(w), 2, (3, 9), (1, 2))?);
        }
        for &sc in &cfg.msd_scales {
            discs.push(build(store, format!("msd{sc}"), Kind::Scale(sc), 1, (1, 15), (1, 4))?);
        }
        for &p in &cfg.mpd_periods {
            discs.push(build(store, format!("mpd{p}"), Kind::Period(p), 1, (5, 1), (3, 1))?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            discs,
        })
    }

    pub fn count(&self) -> usize {
        self.discs.len()
    }

    /// Runs every discriminator on `x: (B, N)`.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<DiscOutput>> {
        let (b, n) = x.dims2()?;
        if n < self.cfg.min_len() {
            return invalid(format!("{n} samples is shorter than the largest window {}", self.cfg.min_len()));
        }
        let mut out = Vec::with_capacity(self.discs.len());
        for d in &self.discs {
            let mut h = match d.kind {
                Kind::Stft(w) => {
                    let stft = TensorStft::get(n, w, w / 4, x.dtype())?;
                    let (re, im) = stft.complex(x)?;
                    Tensor::stack(&[re, im], 1)?
                }
                Kind::Scale(s) => {
                    let m = n / s * s;
                    x.narrow(1, 0, m)?.reshape((b, m / s, s))?.mean(D::Minus1)?.reshape((b, 1, 1, m / s))?
                }
                Kind::Period(p) => period_view(x, p)?,
            };
            let mut features = Vec::with_capacity(d.convs.len());
            for conv in &d.convs {
                h = leaky_relu(&conv.forward(&h)?)?;
                features.push(h.clone());
            }
            let logits = d.out.forward(&h)?.flatten_from(1)?.mean(1)?;
            out.push(DiscOutput { logits, features });
        }
        Ok(out)
    }
}

/// `(B, N)` → `(B, 1, ⌈N/p⌉, p)`, zero-padding the tail.
pub fn period_view(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, n) = x.dims2()?;
    let rows = n.div_ceil(p);
    let x = x.pad_with_zeros(1, 0, rows * p - n)?;
    Ok(x.reshape((b, 1, rows, p))?)
}

/// `(1/K)·Σ_k mean_b max(0, 1 − D_k(x̂))`.
pub fn gen_adv_loss(fake: &[Tensor]) -> Result<Tensor> {
    if fake.is_empty() {
        return invalid("no discriminator logits");
    }
    let mut acc: Option<Tensor> = None;
    for f in fake {
        let term = (1.0 - f)?.relu()?.mean_all()?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok((acc.expect("nonempty") / fake.len() as f64)?)
}

/// `(1/K)·Σ_k mean_b [max(0, 1 − D_k(x)) + max(0, 1 + D_k(x̂))]`.
pub fn disc_adv_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return shape(format!("{} real vs {} fake logits", real.len(), fake.len()));
    }
    let mut acc: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let term = ((1.0 - r)?.relu()?.mean_all()? + (f + 1.0)?.relu()?.mean_all()?)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok((acc.expect("nonempty") / real.len() as f64)?)
}

/// `(1/KL)·Σ ‖f_real − f_fake‖₁ / E_b[‖f_real‖₁]`; real features are treated as constants.
pub fn feature_match_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return shape(format!("{} real vs {} fake discriminators", real.len(), fake.len()));
    }
    let mut acc: Option<Tensor> = None;
    let mut count = 0usize;
    for (rk, fk) in real.iter().zip(fake) {
        if rk.len() != fk.len() {
            return shape("feature layer counts differ");
        }
        for (r, f) in rk.iter().zip(fk) {
            if r.dims() != f.dims() {
                return shape(format!("feature shapes {:?} vs {:?}", r.dims(), f.dims()));
            }
            let r = r.detach();
            let norm = nn::scalar(&r.abs()?.sum_all()?)?.max(1e-12);
            let term = ((&r - f)?.abs()?.sum_all()? / norm)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
            count += 1;
        }
    }
    Ok((acc.expect("nonempty") / count as f64)?)
}
