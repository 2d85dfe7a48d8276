//! Emotion and semantic guidance applied to encoder latents before quantization.
//!
//! `z_uni = z + (W_m h_emo) ⊙ d_emo + (W_m h_sem) ⊙ d_sem`, where `h_*` comes
//! from attention between the latent and a teacher sequence and `d_*` are
//! inverted-dropout gates that are all ones in eval mode.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::nn::{self, attention, Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModulationMode {
    CrossBefore,
    CrossAfter,
    SelfBefore,
    SelfAfter,
    None,
    SemOnly,
    EmoOnly,
}

impl ModulationMode {
    pub const ALL: [ModulationMode; 7] = [
        Self::CrossBefore,
        Self::CrossAfter,
        Self::SelfBefore,
        Self::SelfAfter,
        Self::None,
        Self::SemOnly,
        Self::EmoOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CrossBefore => "cross-before",
            Self::CrossAfter => "cross-after",
            Self::SelfBefore => "self-before",
            Self::SelfAfter => "self-after",
            Self::None => "none",
            Self::SemOnly => "sem-only",
            Self::EmoOnly => "emo-only",
        }
    }

    fn attends_after(self) -> bool {
        matches!(self, Self::CrossAfter | Self::SelfAfter)
    }
}

impl fmt::Display for ModulationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modulation mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationConfig {
    pub mode: ModulationMode,
    pub heads: usize,
    pub gate_keep_prob: f64,
    pub train: bool,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            mode: ModulationMode::CrossBefore,
            heads: 8,
            gate_keep_prob: 0.75,
            train: true,
        }
    }
}

impl ModulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate_keep_prob > 0.0 && self.gate_keep_prob <= 1.0) {
            return invalid(format!("gate_keep_prob {} outside (0, 1]", self.gate_keep_prob));
        }
        if self.heads == 0 {
            return invalid("heads must be positive");
        }
        Ok(())
    }
}

/// `W_a` (D×D), `W_e` (D×D_e), `W_s` (D×D_s), shared `W_m` (D×D), plus the
/// query maps `D_e×D` and `D_s×D` that the cross-after mode needs to attend in
/// raw teacher space.
#[derive(Debug, Clone)]
pub struct GuidanceProjections {
    pub w_a: Tensor,
    pub w_e: Tensor,
    pub w_s: Tensor,
    pub w_m: Tensor,
    pub w_qe: Tensor,
    pub w_qs: Tensor,
}

impl GuidanceProjections {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, d_e: usize, d_s: usize) -> Result<Self> {
        let mut s = store.scope(prefix);
        let u = |n: usize| Init::Uniform(1.0 / (n as f64).sqrt());
        Ok(Self {
            w_a: s.param("w_a", &[d, d], u(d))?,
            w_e: s.param("w_e", &[d, d_e], u(d_e))?,
            w_s: s.param("w_s", &[d, d_s], u(d_s))?,
            w_m: s.param("w_m", &[d, d], u(d))?,
            w_qe: s.param("w_qe", &[d_e, d], u(d))?,
            w_qs: s.param("w_qs", &[d_s, d], u(d))?,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_a.dims()[0]
    }

    pub fn dtype(&self) -> DType {
        self.w_a.dtype()
    }
}

/// Applies `W` to every frame: `(…, T, in) → (…, T, out)`.
pub fn apply(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_matmul(&w.t()?)?)
}

fn frames(x: &Tensor) -> Result<usize> {
    let d = x.dims();
    if d.len() < 2 {
        return shape(format!("expected a frame sequence, got shape {d:?}"));
    }
    Ok(d[d.len() - 2])
}

/// `(Z̃, Ẽ, S̃) = (W_a Z, W_e E, W_s S)`.
pub fn project(z: &Tensor, e: &Tensor, s: &Tensor, p: &GuidanceProjections) -> Result<(Tensor, Tensor, Tensor)> {
    let t = frames(z)?;
    if frames(e)? != t || frames(s)? != t {
        return shape(format!(
            "frame counts differ: Z {t}, E {}, S {}",
            frames(e)?,
            frames(s)?
        ));
    }
    Ok((apply(&p.w_a, z)?, apply(&p.w_e, e)?, apply(&p.w_s, s)?))
}

fn batched(x: &Tensor) -> Result<Tensor> {
    Ok(if x.rank() == 2 { x.unsqueeze(0)? } else { x.clone() })
}

pub struct ModulationOutput {
    pub unified: Tensor,
    pub emo_weights: Option<Tensor>,
    pub sem_weights: Option<Tensor>,
    /// `W_m h` terms before gating.
    pub emo_term: Option<Tensor>,
    pub sem_term: Option<Tensor>,
}

fn gate(x: &Tensor, keep: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if keep >= 1.0 {
        return Ok(x.clone());
    }
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Ok((x * nn::from_f64(mask, x.dims(), x.dtype())?)?)
}

/// One guidance branch for teacher `t` (raw) with projection `w` and query map `wq`.
fn branch(
    z: &Tensor,
    z_proj: &Tensor,
    t: &Tensor,
    w: &Tensor,
    wq: &Tensor,
    cfg: &ModulationConfig,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Option<Tensor>)> {
    let mode = cfg.mode;
    if mode == ModulationMode::None {
        return Ok((apply(w, t)?, None));
    }
    let self_attn = matches!(mode, ModulationMode::SelfBefore | ModulationMode::SelfAfter);
    if mode.attends_after() {
        let q = if self_attn { t.clone() } else { apply(wq, z)? };
        let (h, a) = attention(&q, t, t, cfg.heads, mask)?;
        Ok((apply(w, &h)?, Some(a)))
    } else {
        let tp = apply(w, t)?;
        let q = if self_attn { tp.clone() } else { z_proj.clone() };
        let (h, a) = attention(&q, &tp, &tp, cfg.heads, mask)?;
        Ok((h, Some(a)))
    }
}

/// Guidance modulation of `z` (`(B, T', D)` or `(T', D)`) by raw teacher
/// sequences `e` and `s`. `key_mask` holds `1` for valid frames, shape `(B, T')`.
pub fn cross_modulate(
    z: &Tensor,
    e: &Tensor,
    s: &Tensor,
    cfg: &ModulationConfig,
    p: &GuidanceProjections,
    key_mask: Option<&Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<ModulationOutput> {
    cfg.validate()?;
    let unbatched = z.rank() == 2;
    let (z, e, s) = (batched(z)?, batched(e)?, batched(s)?);
    let t = frames(&z)?;
    if frames(&e)? != t || frames(&s)? != t {
        return shape(format!("frame counts differ: Z {t}, E {}, S {}", frames(&e)?, frames(&s)?));
    }
    let mask = match key_mask {
        Some(m) => {
            let m = if m.rank() == 1 { m.unsqueeze(0)? } else { m.clone() };
            let neg = ((m.to_dtype(z.dtype())? - 1.0)? * 1e9)?;
            Some(neg.unsqueeze(1)?.unsqueeze(1)?)
        }
        None => None,
    };
    let z_proj = apply(&p.w_a, &z)?;
    let use_emo = cfg.mode != ModulationMode::SemOnly;
    let use_sem = cfg.mode != ModulationMode::EmoOnly;
    let attn_cfg = match cfg.mode {
        ModulationMode::SemOnly | ModulationMode::EmoOnly => ModulationConfig {
            mode: ModulationMode::CrossBefore,
            ..*cfg
        },
        _ => *cfg,
    };
    let mut unified = z.clone();
    let mut out = ModulationOutput {
        unified: z.clone(),
        emo_weights: None,
        sem_weights: None,
        emo_term: None,
        sem_term: None,
    };
    if use_emo {
        let (h, a) = branch(&z, &z_proj, &e, &p.w_e, &p.w_qe, &attn_cfg, mask.as_ref())?;
        let term = apply(&p.w_m, &h)?;
        let gated = if cfg.train { gate(&term, cfg.gate_keep_prob, rng)? } else { term.clone() };
        unified = (unified + gated)?;
        out.emo_weights = a;
        out.emo_term = Some(term);
    }
    if use_sem {
        let (h, a) = branch(&z, &z_proj, &s, &p.w_s, &p.w_qs, &attn_cfg, mask.as_ref())?;
        let term = apply(&p.w_m, &h)?;
        let gated = if cfg.train { gate(&term, cfg.gate_keep_prob, rng)? } else { term.clone() };
        unified = (unified + gated)?;
        out.sem_weights = a;
        out.sem_term = Some(term);
    }
    out.unified = if unbatched { unified.squeeze(0)? } else { unified };
    Ok(out)
}
