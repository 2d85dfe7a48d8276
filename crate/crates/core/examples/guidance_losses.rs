//! Relational distillation and emotion-weighted alignment on random
//! sequences, including the variant identities.

use candle_core::Tensor;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emocodec::nn::{self, DEVICE};
use emocodec::objectives::{self, AlignVariant, RelaConfig, RelaVariant};

fn main() -> emocodec::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, n, d) = (24, 6, 16);
    let q1 = Tensor::randn(0f64, 1.0, (t, d), &DEVICE)?;
    let e = Tensor::randn(0f64, 1.0, (t, 8), &DEVICE)?;
    let s = Tensor::randn(0f64, 1.0, (t, 8), &DEVICE)?;
    for variant in [RelaVariant::Full, RelaVariant::SemOnly, RelaVariant::EmoOnly] {
        let cfg = RelaConfig { variant, ..Default::default() };
        println!("rela {:<9} {:.5}", variant.name(), nn::scalar(&objectives::rela_loss(&q1, &e, &s, &cfg)?)?);
    }
    let cfg = RelaConfig::default();
    println!("rela with matching geometry {:.2e}", nn::scalar(&objectives::rela_loss(&e, &e, &e, &cfg)?)?);

    let c = Tensor::randn(0f64, 1.0, (n, d), &DEVICE)?;
    let (c_star, weights) = objectives::soft_align_targets(&q1, &c, 2)?;
    println!("alignment weights {:?}, targets {:?}", weights.dims(), c_star.dims());
    let e_raw = Array2::from_shape_simple_fn((t, 8), || rng.gen_range(-1.0..1.0));
    let gamma = objectives::emo_weights(&e_raw)?;
    println!("mean emotion weight {:.6}", gamma.iter().sum::<f64>() / t as f64);
    for &v in AlignVariant::ALL {
        let l = objectives::align_loss(&q1, &c_star, &gamma, v)?;
        println!("align {:<15} {:.8}", v.name(), nn::scalar(&l)?);
    }
    Ok(())
}
