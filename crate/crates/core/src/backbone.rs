//! Waveform encoder and mirrored decoder.
//!
//! Encoder: 7-tap input convolution, four stages of (residual block, strided
//! downsampler) with channel doubling, two bidirectional LSTM layers each
//! followed by layer normalisation, and a 7-tap projection to `D` channels.
//! The decoder runs the same pieces in reverse with polyphase upsamplers.

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{AudioClip, HOP};
use crate::error::{invalid, shape, Error, Result};
use crate::nn::{self, elu, BiLstm, Conv1d, LayerNorm, ParamStore, PolyphaseUpsample, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub base_channels: usize,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub lstm_layers: usize,
    pub latent_dim: usize,
    pub sample_rate: u32,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            base_channels: 16,
            kernel: 7,
            strides: vec![2, 4, 5, 8],
            lstm_layers: 2,
            latent_dim: 64,
            sample_rate: 16_000,
        }
    }

    pub fn paper() -> Self {
        Self {
            base_channels: 32,
            latent_dim: 1024,
            ..Self::toy()
        }
    }

    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop() as f64
    }

    /// Channel width after the last downsampling stage.
    pub fn top_channels(&self) -> usize {
        self.base_channels << self.strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop() != HOP {
            return invalid(format!("stride product {} must equal {HOP}", self.hop()));
        }
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(2) {
            return invalid("base_channels must be even and at least 2");
        }
        if self.kernel.is_multiple_of(2) {
            return invalid("kernel must be odd");
        }
        if self.latent_dim == 0 {
            return invalid("latent_dim must be positive");
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentKind {
    Encoder,
    Unified,
    Quantized(usize),
}

/// `T' × D` frame-level representation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub values: Array2<f64>,
    pub frame_rate: f64,
    pub kind: LatentKind,
}

impl LatentSequence {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone)]
struct ResidualUnit {
    conv1: Conv1d,
    conv2: Conv1d,
}

impl ResidualUnit {
    fn new(s: &mut Scope<'_>, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::same(&mut s.pp("conv1"), c, c / 2, 3)?,
            conv2: Conv1d::same(&mut s.pp("conv2"), c / 2, c, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&elu(&self.conv1.forward(&elu(x)?)?)?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct Recurrent {
    layers: Vec<(BiLstm, LayerNorm)>,
}

impl Recurrent {
    fn new(s: &mut Scope<'_>, c: usize, n: usize) -> Result<Self> {
        let layers = (0..n)
            .map(|i| {
                let mut l = s.pp(&format!("lstm{i}"));
                Ok((BiLstm::new(&mut l.pp("rnn"), c, c / 2)?, LayerNorm::new(&mut l.pp("ln"), c)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `(B, C, T)` in and out; each layer adds its normalised output to the stream.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.transpose(1, 2)?.contiguous()?;
        for (rnn, ln) in &self.layers {
            h = (&h + ln.forward(&rnn.forward(&h)?)?)?;
        }
        Ok(h.transpose(1, 2)?.contiguous()?)
    }
}

fn owned_params(store: &ParamStore, prefix: &str) -> Vec<Tensor> {
    store
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(_, v)| v.as_tensor().clone())
        .collect()
}

fn check_finite(params: &[Tensor], what: &str) -> Result<()> {
    for p in params {
        if !nn::to_vec_f64(p)?.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} parameters")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    conv_in: Conv1d,
    stages: Vec<(ResidualUnit, Conv1d)>,
    rnn: Recurrent,
    conv_out: Conv1d,
    params: Vec<Tensor>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = store.scope(prefix);
        let mut c = cfg.base_channels;
        let conv_in = Conv1d::same(&mut s.pp("conv_in"), 1, c, cfg.kernel)?;
        let mut stages = Vec::new();
        for (i, &st) in cfg.strides.iter().enumerate() {
            let mut b = s.pp(&format!("block{i}"));
            let res = ResidualUnit::new(&mut b.pp("res"), c)?;
            let down = Conv1d::new(&mut b.pp("down"), c, 2 * c, 2 * st, st, 1, st.div_ceil(2), st / 2)?;
            stages.push((res, down));
            c *= 2;
        }
        let rnn = Recurrent::new(&mut s.pp("rnn"), c, cfg.lstm_layers)?;
        let conv_out = Conv1d::same(&mut s.pp("conv_out"), c, cfg.latent_dim, cfg.kernel)?;
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            stages,
            rnn,
            conv_out,
            params: owned_params(store, prefix),
        })
    }

    /// `(B, N)` waveform with `N` a multiple of the hop to `(B, N/hop, D)` latents.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, n) = x.dims2()?;
        if n % self.cfg.hop() != 0 || n == 0 {
            return shape(format!("{n} samples is not a positive multiple of hop {}", self.cfg.hop()));
        }
        let mut h = self.conv_in.forward(&x.unsqueeze(1)?)?;
        for (res, down) in &self.stages {
            h = down.forward(&elu(&res.forward(&h)?)?)?;
        }
        h = self.rnn.forward(&h)?;
        let z = self.conv_out.forward(&elu(&h)?)?;
        Ok(z.transpose(1, 2)?.contiguous()?)
    }

    pub fn check_finite(&self) -> Result<()> {
        check_finite(&self.params, "encoder")
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: EncoderConfig,
    conv_in: Conv1d,
    rnn: Recurrent,
    stages: Vec<(PolyphaseUpsample, ResidualUnit)>,
    conv_out: Conv1d,
    params: Vec<Tensor>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = store.scope(prefix);
        let mut c = cfg.top_channels();
        let conv_in = Conv1d::same(&mut s.pp("conv_in"), cfg.latent_dim, c, cfg.kernel)?;
        let rnn = Recurrent::new(&mut s.pp("rnn"), c, cfg.lstm_layers)?;
        let mut stages = Vec::new();
        for (i, &st) in cfg.strides.iter().rev().enumerate() {
            let mut b = s.pp(&format!("block{i}"));
            let up = PolyphaseUpsample::new(&mut b.pp("up"), c, c / 2, st)?;
            c /= 2;
            let res = ResidualUnit::new(&mut b.pp("res"), c)?;
            stages.push((up, res));
        }
        let conv_out = Conv1d::same(&mut s.pp("conv_out"), c, 1, cfg.kernel)?;
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            rnn,
            stages,
            conv_out,
            params: owned_params(store, prefix),
        })
    }

    /// `(B, T', D)` latents to a `(B, T'·hop)` waveform.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (_, _, d) = z.dims3()?;
        if d != self.cfg.latent_dim {
            return shape(format!("latent dim {d}, decoder expects {}", self.cfg.latent_dim));
        }
        let mut h = self.conv_in.forward(&z.transpose(1, 2)?.contiguous()?)?;
        h = self.rnn.forward(&h)?;
        for (up, res) in &self.stages {
            h = res.forward(&up.forward(&elu(&h)?)?)?;
        }
        Ok(self.conv_out.forward(&elu(&h)?)?.squeeze(1)?)
    }

    pub fn check_finite(&self) -> Result<()> {
        check_finite(&self.params, "decoder")
    }
}

pub fn clip_tensor(clip: &AudioClip, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = clip.samples.iter().map(|&s| s as f64).collect();
    nn::from_f64(data, &[1, clip.samples.len()], dtype)
}

pub fn tensor_clip(x: &Tensor, sample_rate: u32) -> Result<AudioClip> {
    let samples: Vec<f32> = nn::to_vec_f64(x)?.into_iter().map(|v| v as f32).collect();
    AudioClip::new(samples, sample_rate)
}

/// Encodes one clip; the clip is zero-padded to a hop multiple first.
pub fn encode(clip: &AudioClip, encoder: &Encoder, dtype: DType) -> Result<LatentSequence> {
    encoder.check_finite()?;
    let clip = clip.clone().pad_to_hop();
    let z = encoder.forward(&clip_tensor(&clip, dtype)?)?.squeeze(0)?;
    let values = nn::to_array2(&z)?;
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok(LatentSequence {
        values,
        frame_rate: encoder.cfg.frame_rate(),
        kind: LatentKind::Encoder,
    })
}

pub fn decode(latents: &LatentSequence, decoder: &Decoder, dtype: DType) -> Result<AudioClip> {
    if latents.kind == LatentKind::Encoder {
        return invalid("decode expects unified or quantized latents");
    }
    if latents.dim() != decoder.cfg.latent_dim {
        return shape(format!("latent dim {}, decoder expects {}", latents.dim(), decoder.cfg.latent_dim));
    }
    decoder.check_finite()?;
    let z = nn::from_array2(&latents.values, dtype)?.unsqueeze(0)?;
    let x = decoder.forward(&z)?.squeeze(0)?;
    tensor_clip(&x, decoder.cfg.sample_rate)
}
