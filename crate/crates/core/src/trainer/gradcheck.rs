//! Central finite-difference verification of every differentiable loss.

use candle_core::{DType, Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adversary::{self, DiscriminatorConfig, DiscriminatorSet};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::objectives::{self, AlignVariant, MelLoss, RelaConfig, RelaVariant};
use crate::rvq::TokenGrid;
use crate::token_lm::{LmConfig, TokenLm};

pub const STEP: f64 = 1e-6;
/// Smallest denominator of the per-entry relative error, as a fraction of
/// `max(1, |loss|)`. Below it, central differences are dominated by roundoff.
pub const REL_FLOOR: f64 = 1e-4;

pub const LOSSES: &[&str] = &[
    "rela_loss",
    "align_loss",
    "feature_distill_loss",
    "mel_loss",
    "commitment_loss",
    "gen_adv_loss",
    "disc_adv_loss",
    "feature_match_loss",
    "ar_loss",
    "nar_loss",
];

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub case: String,
    pub max_rel_err: f64,
    pub entries: usize,
    /// Backprop and finite-difference values at the worst entry.
    pub worst: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub loss: String,
    pub cases: Vec<CaseReport>,
    pub max_rel_err: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error between backprop and central differences over every
/// entry of `vars`. `f` must rebuild its graph from the variables on each call.
pub fn check_vars(vars: &[&Var], f: &dyn Fn() -> Result<Tensor>) -> Result<(f64, usize, (f64, f64))> {
    let loss = f()?;
    let floor = REL_FLOOR * nn::scalar(&loss)?.abs().max(1.0);
    let grads = loss.backward()?;
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut at = (0.0, 0.0);
    for v in vars {
        let shape = v.dims().to_vec();
        let dtype = v.dtype();
        let base = nn::to_vec_f64(v.as_tensor())?;
        let analytic = match grads.get(v.as_tensor()) {
            Some(g) => nn::to_vec_f64(g)?,
            None => vec![0.0; base.len()],
        };
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + STEP;
            v.set(&nn::from_f64(probe.clone(), &shape, dtype)?)?;
            let up = nn::scalar(&f()?)?;
            probe[i] = base[i] - STEP;
            v.set(&nn::from_f64(probe.clone(), &shape, dtype)?)?;
            let down = nn::scalar(&f()?)?;
            probe[i] = base[i];
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(analytic[i], numeric, floor);
            if e > worst {
                worst = e;
                at = (analytic[i], numeric);
            }
            entries += 1;
        }
        v.set(&nn::from_f64(base, &shape, dtype)?)?;
    }
    Ok((worst, entries, at))
}

fn rand_var(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Var> {
    let n = shape.iter().product();
    let t = nn::from_f64((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape, DType::F64)?;
    Ok(Var::from_tensor(&t)?)
}

fn rand_array(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
}

fn case(name: impl Into<String>, vars: &[&Var], f: &dyn Fn() -> Result<Tensor>) -> Result<CaseReport> {
    let (max_rel_err, entries, worst) = check_vars(vars, f)?;
    Ok(CaseReport {
        case: name.into(),
        max_rel_err,
        entries,
        worst,
    })
}

fn tiny_disc(seed: u64) -> Result<(ParamStore, DiscriminatorSet)> {
    let cfg = DiscriminatorConfig {
        stft_windows: vec![64],
        msd_scales: vec![1, 2],
        mpd_periods: vec![2, 3],
        channels: 2,
        layers: 2,
    };
    let mut store = ParamStore::new(DType::F64, seed);
    let set = DiscriminatorSet::new(&mut store, &cfg)?;
    Ok((store, set))
}

fn store_vars(store: &ParamStore, prefix: &str) -> Vec<Var> {
    store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(_, v)| v.clone())
        .collect()
}

fn tiny_lm(seed: u64) -> Result<(ParamStore, TokenLm)> {
    let cfg = LmConfig {
        layers: 1,
        heads: 2,
        dim: 8,
        ffn: 16,
        dropout: 0.0,
        ..LmConfig::toy()
    };
    let mut store = ParamStore::new(DType::F64, seed);
    let lm = TokenLm::new(&mut store, &cfg, 3, 5, 4, 1)?;
    Ok((store, lm))
}

fn lm_grid(rng: &mut ChaCha8Rng, t: usize) -> TokenGrid {
    TokenGrid {
        indices: Array2::from_shape_simple_fn((t, 3), || rng.gen_range(0..5)),
        codec_hash: 1,
    }
}

/// Runs every case registered under `loss` on seeded 64-bit inputs.
pub fn grad_check(loss: &str, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut cases = Vec::new();
    match loss {
        "rela_loss" => {
            for variant in [RelaVariant::Full, RelaVariant::SemOnly, RelaVariant::EmoOnly] {
                let (q, e, s) = (rand_var(&[6, 5], rng)?, rand_var(&[6, 4], rng)?, rand_var(&[6, 3], rng)?);
                let cfg = RelaConfig {
                    variant,
                    ..Default::default()
                };
                let f = || objectives::rela_loss(q.as_tensor(), e.as_tensor(), s.as_tensor(), &cfg);
                cases.push(case(variant.name(), &[&q, &e, &s], &f)?);
            }
        }
        "align_loss" => {
            for &variant in AlignVariant::ALL {
                let (q1, c) = (rand_var(&[6, 5], rng)?, rand_var(&[4, 5], rng)?);
                let gamma = objectives::emo_weights(&rand_array(6, 3, rng))?;
                let f = || {
                    let (c_star, _) = objectives::soft_align_targets(q1.as_tensor(), c.as_tensor(), 1)?;
                    objectives::align_loss(q1.as_tensor(), &c_star, &gamma, variant)
                };
                cases.push(case(variant.name(), &[&q1, &c], &f)?);
            }
        }
        "feature_distill_loss" => {
            let (z, e, s) = (rand_var(&[5, 4], rng)?, rand_var(&[5, 4], rng)?, rand_var(&[5, 4], rng)?);
            let f = || objectives::feature_distill_loss(z.as_tensor(), e.as_tensor(), s.as_tensor());
            cases.push(case("feature", &[&z, &e, &s], &f)?);
        }
        "mel_loss" => {
            let len = 512;
            let (x, y) = (rand_var(&[1, len], rng)?, rand_var(&[1, len], rng)?);
            let mel = MelLoss::new(len, 16_000, DType::F64)?;
            let f = || mel.forward(x.as_tensor(), y.as_tensor());
            cases.push(case("mel", &[&x, &y], &f)?);
        }
        "commitment_loss" => {
            let r = [rand_var(&[2, 3, 4], rng)?, rand_var(&[2, 3, 4], rng)?];
            let q = [rand_var(&[2, 3, 4], rng)?, rand_var(&[2, 3, 4], rng)?];
            let f = || {
                let pairs: Vec<(Tensor, Tensor)> = r
                    .iter()
                    .zip(&q)
                    .map(|(r, q)| (r.as_tensor().clone(), q.as_tensor().clone()))
                    .collect();
                objectives::commitment_loss(&pairs)
            };
            cases.push(case("residuals", &[&r[0], &r[1]], &f)?);
        }
        "gen_adv_loss" => {
            let (store, disc) = tiny_disc(seed)?;
            let x = Var::from_tensor(&(rand_var(&[2, 256], rng)?.as_tensor() * 0.5)?)?;
            let params = store_vars(&store, "");
            let mut vars: Vec<&Var> = vec![&x];
            vars.extend(params.iter());
            let f = || {
                let logits: Vec<Tensor> = disc.forward(x.as_tensor())?.into_iter().map(|o| o.logits).collect();
                adversary::gen_adv_loss(&logits)
            };
            cases.push(case("through-discriminators", &vars, &f)?);
        }
        "disc_adv_loss" => {
            let (store, disc) = tiny_disc(seed)?;
            let real = (rand_var(&[2, 256], rng)?.as_tensor() * 0.5)?;
            let fake = (rand_var(&[2, 256], rng)?.as_tensor() * 0.5)?;
            let params = store_vars(&store, "");
            let vars: Vec<&Var> = params.iter().collect();
            let f = || {
                let r: Vec<Tensor> = disc.forward(&real)?.into_iter().map(|o| o.logits).collect();
                let g: Vec<Tensor> = disc.forward(&fake)?.into_iter().map(|o| o.logits).collect();
                adversary::disc_adv_loss(&r, &g)
            };
            cases.push(case("discriminator-params", &vars, &f)?);
        }
        "feature_match_loss" => {
            let (_store, disc) = tiny_disc(seed)?;
            let real = (rand_var(&[2, 256], rng)?.as_tensor() * 0.5)?;
            let fake = Var::from_tensor(&(rand_var(&[2, 256], rng)?.as_tensor() * 0.5)?)?;
            let rf: Vec<Vec<Tensor>> = disc.forward(&real)?.into_iter().map(|o| o.features).collect();
            let f = || {
                let ff: Vec<Vec<Tensor>> = disc.forward(fake.as_tensor())?.into_iter().map(|o| o.features).collect();
                adversary::feature_match_loss(&rf, &ff)
            };
            cases.push(case("fake-waveform", &[&fake], &f)?);
        }
        "ar_loss" => {
            let (store, lm) = tiny_lm(seed)?;
            let grid = lm_grid(rng, 4);
            let params = store_vars(&store, "ar.");
            let vars: Vec<&Var> = params.iter().collect();
            let f = || lm.ar_loss(&grid, &[1, 3, 0], None, None);
            cases.push(case("ar-params", &vars, &f)?);
        }
        "nar_loss" => {
            let (store, lm) = tiny_lm(seed)?;
            let grid = lm_grid(rng, 4);
            let prompt = lm_grid(rng, 2);
            let params = store_vars(&store, "nar.");
            let vars: Vec<&Var> = params.iter().collect();
            let f = || lm.nar_loss(&grid, &[2, 1], Some(&prompt), None);
            cases.push(case("nar-params", &vars, &f)?);
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown loss `{other}`; known: {}",
                LOSSES.join(", ")
            )))
        }
    }
    let max_rel_err = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        loss: loss.to_string(),
        cases,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_loss_is_rejected() {
        assert!(grad_check("nope", 0).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Var::from_tensor(&Tensor::new(&[0.3f64, -0.7], &nn::DEVICE).unwrap()).unwrap();
        // detach hides the dependence from backprop but not from differences
        let f = || Ok((x.as_tensor().sqr()?.sum_all()? + x.as_tensor().detach().sum_all()?)?);
        let (err, n, _) = check_vars(&[&x], &f).unwrap();
        assert_eq!(n, 2);
        assert!(err > 0.1);
    }

    #[test]
    fn cheap_losses_pass() {
        for loss in ["rela_loss", "align_loss", "feature_distill_loss", "commitment_loss"] {
            let r = grad_check(loss, 3).unwrap();
            assert!(r.max_rel_err < 1e-4, "{loss}: {r:?}");
        }
    }
}
