//! Non-adversarial training losses and their weighted combination.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use candle_core::{DType, Tensor, D};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::features::{TensorMel, MEL_RESOLUTIONS};
use crate::nn::{self, Init, Linear, ParamStore};

/// Norm guard used by every cosine similarity.
pub const COS_EPS: f64 = 1e-8;
const DIST_EPS: f64 = 1e-12;

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::Config(format!("unknown {} `{s}`", stringify!($name))))
            }
        }
    };
}

named_enum!(RelaVariant {
    Full => "full",
    SemOnly => "sem-only",
    EmoOnly => "emo-only",
    Feature => "feature",
});

named_enum!(LayerSelect {
    First => "first",
    Early => "early",
    All => "all",
});

named_enum!(AlignVariant {
    Full => "full",
    SemOnly => "sem-only",
    UniformScaled => "uniform-scaled",
});

impl LayerSelect {
    /// Number of leading quantizer layers averaged.
    pub fn depth(self) -> usize {
        match self {
            Self::First => 1,
            Self::Early => 4,
            Self::All => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub variant: RelaVariant,
    pub layer_select: LayerSelect,
}

impl Default for RelaConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            variant: RelaVariant::Full,
            layer_select: LayerSelect::First,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub window: usize,
    pub variant: AlignVariant,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            window: 2,
            variant: AlignVariant::Full,
        }
    }
}

pub const TERMS: [&str; 6] = ["mel", "adv", "feat", "q", "rela", "align"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mel: f64,
    pub adv: f64,
    pub feat: f64,
    pub q: f64,
    pub rela: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel: 1.0,
            adv: 1.0,
            feat: 1.0,
            q: 1e-3,
            rela: 0.5,
            align: 0.5,
        }
    }
}

impl LossWeights {
    pub fn get(&self, term: &str) -> Option<f64> {
        Some(match term {
            "mel" => self.mel,
            "adv" => self.adv,
            "feat" => self.feat,
            "q" => self.q,
            "rela" => self.rela,
            "align" => self.align,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for t in TERMS {
            let w = self.get(t).expect("known term");
            if !w.is_finite() || w < 0.0 {
                return invalid(format!("weight for `{t}` must be finite and nonnegative, got {w}"));
            }
        }
        Ok(())
    }
}

/// Per-term values and the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// First term (in canonical order) whose value is NaN, or the total.
    pub fn first_nan(&self) -> Option<String> {
        TERMS
            .iter()
            .find(|t| self.terms.get(**t).is_some_and(|v| v.is_nan()))
            .map(|t| t.to_string())
            .or_else(|| self.total.is_nan().then(|| "total".to_string()))
    }
}

/// Weighted sum of the six terms. Returns the differentiable total and the breakdown.
pub fn total_loss(parts: &BTreeMap<String, Tensor>, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    w.validate()?;
    let mut total: Option<Tensor> = None;
    let mut terms = BTreeMap::new();
    for t in TERMS {
        let v = parts
            .get(t)
            .ok_or_else(|| Error::InvalidInput(format!("missing loss term `{t}`")))?;
        terms.insert(t.to_string(), nn::scalar(v)?);
        let weighted = (v * w.get(t).expect("known term"))?;
        total = Some(match total {
            Some(acc) => (acc + weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("six terms");
    let value = nn::scalar(&total)?;
    Ok((total, LossBreakdown { terms, total: value }))
}

/// Mean of the first `depth` per-layer embeddings (fewer if not available).
pub fn select_layers(layers: &[Tensor], select: LayerSelect) -> Result<Tensor> {
    if layers.is_empty() {
        return invalid("no quantizer layers to select from");
    }
    let k = select.depth().min(layers.len());
    let mut acc = layers[0].clone();
    for l in &layers[1..k] {
        acc = (acc + l)?;
    }
    Ok((acc / k as f64)?)
}

/// Smoothed pairwise Euclidean distances of the rows of `x: (T, D)`.
///
/// `sqrt(d² + 1e-12) − 1e-6` is zero on the diagonal and differentiable everywhere.
pub fn pairwise_distances(x: &Tensor) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    let a = x.unsqueeze(1)?.broadcast_as((t, t, d))?;
    let b = x.unsqueeze(0)?.broadcast_as((t, t, d))?;
    let sq = (a - b)?.sqr()?.sum(D::Minus1)?;
    Ok(((sq + DIST_EPS)?.sqrt()? - DIST_EPS.sqrt())?)
}

/// Relational distillation between the selected student representation and
/// the emotion and semantic teachers.
pub fn rela_loss(q_sel: &Tensor, e: &Tensor, s: &Tensor, cfg: &RelaConfig) -> Result<Tensor> {
    let (t, _) = q_sel.dims2()?;
    if t == 0 {
        return invalid("relational loss needs at least one frame");
    }
    if e.dims2()?.0 != t || s.dims2()?.0 != t {
        return shape(format!("frame counts differ: Q {t}, E {}, S {}", e.dims2()?.0, s.dims2()?.0));
    }
    if cfg.alpha < 0.0 || cfg.beta < 0.0 {
        return invalid("alpha and beta must be nonnegative");
    }
    let (alpha, beta) = match cfg.variant {
        RelaVariant::Full => (cfg.alpha, cfg.beta),
        RelaVariant::SemOnly => (0.0, cfg.beta),
        RelaVariant::EmoOnly => (cfg.alpha, 0.0),
        RelaVariant::Feature => return invalid("the feature variant uses feature_distill_loss"),
    };
    let rq = pairwise_distances(q_sel)?;
    let mut acc = rq.zeros_like()?;
    if alpha > 0.0 {
        acc = (acc + ((&rq - pairwise_distances(e)?)?.abs()? * alpha)?)?;
    }
    if beta > 0.0 {
        acc = (acc + ((&rq - pairwise_distances(s)?)?.abs()? * beta)?)?;
    }
    Ok((acc.sum_all()? / (t * t) as f64)?)
}

/// Mean over frames of `‖z − e‖² + ‖z − s‖²`.
pub fn feature_distill_loss(z_uni: &Tensor, e_proj: &Tensor, s_proj: &Tensor) -> Result<Tensor> {
    if z_uni.dims() != e_proj.dims() || z_uni.dims() != s_proj.dims() {
        return shape(format!(
            "feature distillation shapes {:?}, {:?}, {:?}",
            z_uni.dims(),
            e_proj.dims(),
            s_proj.dims()
        ));
    }
    let (t, _) = z_uni.dims2()?;
    let a = (z_uni - e_proj)?.sqr()?.sum_all()?;
    let b = (z_uni - s_proj)?.sqr()?.sum_all()?;
    Ok(((a + b)? / t as f64)?)
}

/// `γ = T'·softmax(d)` with `d_t = ‖e_t − e_{t−1}‖₁` and `d_1 = 0`.
pub fn emo_weights(e: &Array2<f64>) -> Result<Vec<f64>> {
    let t = e.nrows();
    if t == 0 {
        return invalid("emotion weights need at least one frame");
    }
    let mut d = vec![0.0; t];
    for i in 1..t {
        d[i] = e
            .row(i)
            .iter()
            .zip(e.row(i - 1).iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
    }
    let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = d.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    Ok(ex.into_iter().map(|v| t as f64 * v / z).collect())
}

/// Rows scaled to unit norm with the ε guard `sqrt(‖x‖² + ε²)`.
fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + COS_EPS * COS_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Row-wise cosine similarity of two `(T, D)` tensors.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((unit_rows(a)? * unit_rows(b)?)?.sum(D::Minus1)?)
}

/// 1-based window centre `clip(⌊t·n/T'⌋, 1, n)` for 1-based frame `t`.
pub fn window_centre(t: usize, frames: usize, n: usize) -> usize {
    (t * n / frames).clamp(1, n)
}

/// Soft monotonic alignment of text rows to frames.
///
/// Returns `c*` `(T', D)` and the dense attention `(T', n)`, zero outside each
/// frame's window.
pub fn soft_align_targets(q1: &Tensor, c: &Tensor, w: usize) -> Result<(Tensor, Tensor)> {
    let (t, d) = q1.dims2()?;
    let (n, dc) = c.dims2()?;
    if n == 0 {
        return invalid("alignment needs at least one text token");
    }
    if t == 0 {
        return invalid("alignment needs at least one frame");
    }
    if d != dc {
        return shape(format!("frame dim {d} vs text dim {dc}"));
    }
    let sim = unit_rows(q1)?.matmul(&unit_rows(c)?.t()?)?;
    let mut mask = vec![f64::NEG_INFINITY; t * n];
    for row in 0..t {
        let i0 = window_centre(row + 1, t, n);
        let lo = i0.saturating_sub(w).max(1);
        let hi = (i0 + w).min(n);
        for i in lo..=hi {
            mask[row * n + i - 1] = 0.0;
        }
    }
    let mask = nn::from_f64(mask, &[t, n], q1.dtype())?;
    let a = nn::softmax_last(&(sim + mask)?)?;
    let c_star = a.matmul(c)?;
    Ok((c_star, a))
}

/// `−(1/T')·Σ γ_t·log σ(cos(Q1_t, c*_t))`.
pub fn align_loss(q1: &Tensor, c_star: &Tensor, gamma: &[f64], variant: AlignVariant) -> Result<Tensor> {
    let (t, _) = q1.dims2()?;
    if c_star.dims() != q1.dims() || gamma.len() != t {
        return shape(format!(
            "alignment shapes Q1 {:?}, c* {:?}, γ {}",
            q1.dims(),
            c_star.dims(),
            gamma.len()
        ));
    }
    let g: Vec<f64> = match variant {
        AlignVariant::Full => gamma.to_vec(),
        AlignVariant::SemOnly => vec![1.0; t],
        AlignVariant::UniformScaled => {
            let mean = gamma.iter().sum::<f64>() / t as f64;
            if (mean - 1.0).abs() > 1e-9 {
                return invalid(format!("emotion weights have mean {mean}, expected 1"));
            }
            vec![mean; t]
        }
    };
    let cos = cosine_rows(q1, c_star)?;
    // −log σ(x) = log(1 + e^{−x}); |x| ≤ 1 so no overflow
    let nll = (cos.neg()?.exp()? + 1.0)?.log()?;
    let g = nn::from_f64(g, &[t], q1.dtype())?;
    Ok(((nll * g)?.sum_all()? / t as f64)?)
}

/// Learned map from text-teacher space into the latent space.
#[derive(Debug, Clone)]
pub struct TextProjection {
    pub map: Linear,
}

impl TextProjection {
    pub fn new(store: &mut ParamStore, prefix: &str, d_c: usize, d: usize) -> Result<Self> {
        let mut s = store.scope(prefix);
        Ok(Self {
            map: Linear::with_init(&mut s, d_c, d, Init::Uniform(1.0 / (d_c as f64).sqrt()))?,
        })
    }

    pub fn forward(&self, c: &Tensor) -> Result<Tensor> {
        self.map.forward(c)
    }
}

/// Shortest signal the largest mel window covers.
pub const MEL_MIN_LEN: usize = 1 << MEL_RESOLUTIONS[MEL_RESOLUTIONS.len() - 1];

/// Multi-resolution mel reconstruction loss for a fixed signal length.
/// Signals shorter than the largest window are zero-padded on the right.
pub struct MelLoss {
    mels: Vec<Arc<TensorMel>>,
    pub len: usize,
}

impl MelLoss {
    pub fn new(len: usize, sample_rate: u32, dtype: DType) -> Result<Self> {
        let len = len.max(MEL_MIN_LEN);
        let mels = MEL_RESOLUTIONS
            .iter()
            .map(|&i| TensorMel::new(len, i, sample_rate, dtype).map(Arc::new))
            .collect::<Result<_>>()?;
        Ok(Self { mels, len })
    }

    /// Per-resolution mean L1 plus mean squared error, summed over resolutions.
    /// Inputs are `(B, len)` or `(len)`.
    pub fn forward(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        if x.dims() != x_hat.dims() {
            return shape(format!("mel loss lengths {:?} vs {:?}", x.dims(), x_hat.dims()));
        }
        let as_batch = |v: &Tensor| -> Result<Tensor> {
            Ok(if v.rank() == 1 { v.unsqueeze(0)? } else { v.clone() })
        };
        let (mut x, mut x_hat) = (as_batch(x)?, as_batch(x_hat)?);
        let n = x.dim(1)?;
        if n > self.len {
            return shape(format!("mel loss built for {} samples, got {n}", self.len));
        }
        if n < self.len {
            x = x.pad_with_zeros(1, 0, self.len - n)?;
            x_hat = x_hat.pad_with_zeros(1, 0, self.len - n)?;
        }
        let mut total: Option<Tensor> = None;
        for m in &self.mels {
            let diff = (m.forward(&x)? - m.forward(&x_hat)?)?;
            let term = (diff.abs()?.mean_all()? + diff.sqr()?.mean_all()?)?;
            total = Some(match total {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
        Ok(total.expect("seven resolutions"))
    }
}

/// Convenience wrapper building the mel modules on the fly.
pub fn mel_loss(x: &Tensor, x_hat: &Tensor, sample_rate: u32) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return shape(format!("mel loss lengths {:?} vs {:?}", x.dims(), x_hat.dims()));
    }
    let len = *x.dims().last().unwrap_or(&0);
    MelLoss::new(len, sample_rate, x.dtype())?.forward(x, x_hat)
}

/// `Σ_j ‖r_j − q_j‖²` summed over frames and dimensions, averaged over the batch
/// axis for rank-3 inputs.
pub fn commitment_loss(residuals: &[(Tensor, Tensor)]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (r, q) in residuals {
        if r.dims() != q.dims() {
            return shape(format!("residual {:?} vs embedding {:?}", r.dims(), q.dims()));
        }
        let b = if r.rank() == 3 { r.dims()[0] } else { 1 };
        let term = ((r - q.detach())?.sqr()?.sum_all()? / b as f64)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => invalid("commitment loss needs at least one layer"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_a(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    fn t(a: &Array2<f64>) -> Tensor {
        nn::from_array2(a, DType::F64).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        nn::scalar(x).unwrap()
    }

    fn dist(a: &Array2<f64>, i: usize, j: usize) -> f64 {
        (&a.row(i) - &a.row(j)).mapv(|v| v * v).sum().sqrt()
    }

    #[test]
    fn rela_matches_double_loop_oracle() {
        let (q, e, sm) = (rand_a(5, 6, 1), rand_a(5, 3, 2), rand_a(5, 4, 3));
        let cfg = RelaConfig {
            alpha: 0.7,
            beta: 1.3,
            ..Default::default()
        };
        let got = s(&rela_loss(&t(&q), &t(&e), &t(&sm), &cfg).unwrap());
        let mut expect = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                let rq = dist(&q, i, j);
                expect += 0.7 * (rq - dist(&e, i, j)).abs() + 1.3 * (rq - dist(&sm, i, j)).abs();
            }
        }
        assert!((got - expect / 25.0).abs() < 1e-10);
    }

    #[test]
    fn rela_zero_cases() {
        let q = rand_a(4, 3, 5);
        // an isometry of the student rows preserves every pairwise distance
        let mut rotated = q.clone();
        for mut r in rotated.rows_mut() {
            let (a, b) = (r[0], r[1]);
            r[0] = -b + 2.0;
            r[1] = a - 1.0;
        }
        let cfg = RelaConfig::default();
        assert!(s(&rela_loss(&t(&q), &t(&rotated), &t(&q), &cfg).unwrap()).abs() < 1e-12);
        let one = rand_a(1, 3, 6);
        assert_eq!(s(&rela_loss(&t(&one), &t(&rand_a(1, 2, 7)), &t(&rand_a(1, 5, 8)), &cfg).unwrap()), 0.0);
        let empty = Tensor::zeros((0, 3), DType::F64, &nn::DEVICE).unwrap();
        assert!(rela_loss(&empty, &empty, &empty, &cfg).is_err());
    }

    #[test]
    fn rela_variants_zero_their_weight() {
        let (q, e, sm) = (t(&rand_a(4, 3, 1)), t(&rand_a(4, 3, 2)), t(&rand_a(4, 3, 3)));
        let full = |v| {
            s(&rela_loss(&q, &e, &sm, &RelaConfig { variant: v, ..Default::default() }).unwrap())
        };
        let emo = full(RelaVariant::EmoOnly);
        let sem = full(RelaVariant::SemOnly);
        assert!((full(RelaVariant::Full) - emo - sem).abs() < 1e-12);
        let noise = t(&rand_a(4, 3, 9));
        let sem2 = s(&rela_loss(&q, &noise, &sm, &RelaConfig { variant: RelaVariant::SemOnly, ..Default::default() }).unwrap());
        assert_eq!(sem, sem2);
    }

    #[test]
    fn feature_distill_cases() {
        let z = rand_a(4, 3, 1);
        assert_eq!(s(&feature_distill_loss(&t(&z), &t(&z), &t(&z)).unwrap()), 0.0);
        let zero = Array2::zeros((4, 3));
        let got = s(&feature_distill_loss(&t(&z), &t(&zero), &t(&zero)).unwrap());
        let msq = z.mapv(|v| v * v).sum() / 4.0;
        assert!((got - 2.0 * msq).abs() < 1e-12);
        let (e, sm) = (rand_a(4, 3, 2), rand_a(4, 3, 3));
        let got = s(&feature_distill_loss(&t(&z), &t(&e), &t(&sm)).unwrap());
        let expect: f64 = (0..4)
            .map(|i| {
                (&z.row(i) - &e.row(i)).mapv(|v| v * v).sum() + (&z.row(i) - &sm.row(i)).mapv(|v| v * v).sum()
            })
            .sum::<f64>()
            / 4.0;
        assert!((got - expect).abs() < 1e-10);
        assert!(feature_distill_loss(&t(&z), &t(&rand_a(4, 2, 0)), &t(&sm)).is_err());
    }

    #[test]
    fn emo_weight_cases() {
        assert!(emo_weights(&Array2::from_elem((5, 3), 0.4)).unwrap().iter().all(|g| (g - 1.0).abs() < 1e-15));
        assert_eq!(emo_weights(&rand_a(1, 3, 0)).unwrap(), vec![1.0]);
        let e = rand_a(6, 4, 1);
        let g = emo_weights(&e).unwrap();
        let d: Vec<f64> = (0..6)
            .map(|i| if i == 0 { 0.0 } else { (&e.row(i) - &e.row(i - 1)).mapv(f64::abs).sum() })
            .collect();
        let z: f64 = d.iter().map(|v| v.exp()).sum();
        for i in 0..6 {
            assert!((g[i] - 6.0 * d[i].exp() / z).abs() < 1e-12);
        }
        assert!((g.iter().sum::<f64>() / 6.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn align_targets_single_token_and_uniform_window() {
        let q = rand_a(6, 4, 1);
        let c = rand_a(1, 4, 2);
        let (cs, a) = soft_align_targets(&t(&q), &t(&c), 2).unwrap();
        let cs = nn::to_array2(&cs).unwrap();
        for r in cs.rows() {
            for j in 0..4 {
                assert!((r[j] - c[[0, j]]).abs() < 1e-15);
            }
        }
        assert!(nn::to_vec_f64(&a).unwrap().iter().all(|v| *v == 1.0));

        // identical text rows give identical similarities inside every window
        let c = Array2::from_shape_fn((7, 4), |(_, j)| j as f64 + 1.0);
        let (_, a) = soft_align_targets(&t(&rand_a(14, 4, 3)), &t(&c), 1).unwrap();
        let a = nn::to_array2(&a).unwrap();
        // frame 8 (1-based): i0 = 4, window {3,4,5}
        for i in 0..7 {
            let expect = if (2..=4).contains(&i) { 1.0 / 3.0 } else { 0.0 };
            assert!((a[[7, i]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn window_centre_example() {
        assert_eq!(window_centre(4, 10, 5), 2);
        assert_eq!(window_centre(1, 10, 5), 1);
        assert_eq!(window_centre(10, 10, 5), 5);
    }

    #[test]
    fn align_loss_closed_forms() {
        let q = rand_a(3, 4, 1);
        let l = align_loss(&t(&q), &t(&q), &[1.0; 3], AlignVariant::Full).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((s(&l) - expect).abs() < 1e-12);
        assert!((expect - 0.313_261_687_518_222_8).abs() < 1e-15);
        let mut orth = Array2::zeros((2, 2));
        orth[[0, 0]] = 1.0;
        orth[[1, 0]] = 1.0;
        let mut other = Array2::zeros((2, 2));
        other[[0, 1]] = 1.0;
        other[[1, 1]] = 2.0;
        let l = align_loss(&t(&orth), &t(&other), &[1.0, 1.0], AlignVariant::Full).unwrap();
        assert!((s(&l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn align_loss_is_linear_in_gamma() {
        let (q, c) = (t(&rand_a(4, 3, 1)), t(&rand_a(4, 3, 2)));
        let base = s(&align_loss(&q, &c, &[1.0, 1.0, 1.0, 1.0], AlignVariant::Full).unwrap());
        let bumped = s(&align_loss(&q, &c, &[1.0, 2.0, 1.0, 1.0], AlignVariant::Full).unwrap());
        let only = s(&align_loss(&q, &c, &[0.0, 1.0, 0.0, 0.0], AlignVariant::Full).unwrap());
        assert!((bumped - base - only).abs() < 1e-14);
    }

    #[test]
    fn uniform_scaled_equals_sem_only() {
        let (q, c) = (t(&rand_a(5, 3, 1)), t(&rand_a(5, 3, 2)));
        let g = emo_weights(&rand_a(5, 2, 3)).unwrap();
        let a = s(&align_loss(&q, &c, &g, AlignVariant::UniformScaled).unwrap());
        let b = s(&align_loss(&q, &c, &g, AlignVariant::SemOnly).unwrap());
        assert!((a - b).abs() < 1e-9);
        assert!(align_loss(&q, &c, &[2.0; 5], AlignVariant::UniformScaled).is_err());
    }

    #[test]
    fn zero_rows_have_zero_cosine() {
        let z = Array2::zeros((2, 3));
        let cos = nn::to_vec_f64(&cosine_rows(&t(&z), &t(&rand_a(2, 3, 1))).unwrap()).unwrap();
        assert!(cos.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn mel_loss_identity_symmetry_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4096;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let xt = nn::from_f64(x.clone(), &[n], DType::F64).unwrap();
        let yt = nn::from_f64(y.clone(), &[n], DType::F64).unwrap();
        assert_eq!(s(&mel_loss(&xt, &xt, 16_000).unwrap()), 0.0);
        let a = s(&mel_loss(&xt, &yt, 16_000).unwrap());
        let b = s(&mel_loss(&yt, &xt, 16_000).unwrap());
        assert!((a - b).abs() < 1e-12);

        let to_clip = |v: &[f64]| crate::corpus::AudioClip {
            samples: v.iter().map(|s| *s as f32).collect(),
            sample_rate: 16_000,
        };
        let (cx, cy) = (to_clip(&x), to_clip(&y));
        let xt = nn::from_f64(cx.samples.iter().map(|v| *v as f64).collect(), &[n], DType::F64).unwrap();
        let yt = nn::from_f64(cy.samples.iter().map(|v| *v as f64).collect(), &[n], DType::F64).unwrap();
        let got = s(&mel_loss(&xt, &yt, 16_000).unwrap());
        let mut expect = 0.0;
        for i in MEL_RESOLUTIONS {
            let mx = crate::features::mel(&cx, i).unwrap().values;
            let my = crate::features::mel(&cy, i).unwrap().values;
            let d = &mx - &my;
            expect += d.mapv(f64::abs).mean().unwrap() + d.mapv(|v| v * v).mean().unwrap();
        }
        assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");
        let short = nn::from_f64(vec![0.0; 10], &[10], DType::F64).unwrap();
        assert!(mel_loss(&xt, &short, 16_000).is_err());
    }

    #[test]
    fn commitment_cases() {
        let q = rand_a(4, 3, 1);
        assert_eq!(s(&commitment_loss(&[(t(&q), t(&q))]).unwrap()), 0.0);
        let mut unit = q.clone();
        for mut r in unit.rows_mut() {
            r[1] += 1.0;
        }
        assert!((s(&commitment_loss(&[(t(&unit), t(&q))]).unwrap()) - 4.0).abs() < 1e-12);
        let pairs: Vec<_> = (0..3).map(|j| (rand_a(4, 3, 10 + j), rand_a(4, 3, 20 + j))).collect();
        let got = s(&commitment_loss(&pairs.iter().map(|(a, b)| (t(a), t(b))).collect::<Vec<_>>()).unwrap());
        let expect: f64 = pairs.iter().map(|(a, b)| (a - b).mapv(|v| v * v).sum()).sum();
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn total_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parts: BTreeMap<String, Tensor> = TERMS
            .iter()
            .map(|n| (n.to_string(), Tensor::new(rng.gen_range(0.0..3.0f64), &nn::DEVICE).unwrap()))
            .collect();
        let zero = LossWeights { mel: 0.0, adv: 0.0, feat: 0.0, q: 0.0, rela: 0.0, align: 0.0 };
        assert_eq!(total_loss(&parts, &zero).unwrap().1.total, 0.0);
        let only_feat = LossWeights { feat: 1.0, ..zero };
        let (_, b) = total_loss(&parts, &only_feat).unwrap();
        assert_eq!(b.total, b.terms["feat"]);
        let w = LossWeights { mel: 0.3, adv: 1.7, feat: 0.2, q: 2.5, rela: 0.9, align: 0.4 };
        let (_, b) = total_loss(&parts, &w).unwrap();
        let expect: f64 = TERMS.iter().map(|n| w.get(n).unwrap() * b.terms[*n]).sum();
        assert!((b.total - expect).abs() < 1e-12);
        let mut missing = parts.clone();
        missing.remove("align");
        assert!(total_loss(&missing, &w).is_err());
    }

    #[test]
    fn layer_select_means() {
        let layers: Vec<Tensor> = (0..8).map(|k| t(&Array2::from_elem((2, 2), k as f64))).collect();
        let first = nn::to_vec_f64(&select_layers(&layers, LayerSelect::First).unwrap()).unwrap();
        let early = nn::to_vec_f64(&select_layers(&layers, LayerSelect::Early).unwrap()).unwrap();
        let all = nn::to_vec_f64(&select_layers(&layers, LayerSelect::All).unwrap()).unwrap();
        assert_eq!(first[0], 0.0);
        assert_eq!(early[0], 1.5);
        assert_eq!(all[0], 3.5);
    }
}
