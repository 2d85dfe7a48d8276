//! Every guidance placement applied to one latent sequence, with attention
//! rows checked to sum to one.

use candle_core::{DType, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use emocodec::guidance::{cross_modulate, GuidanceProjections, ModulationConfig, ModulationMode};
use emocodec::nn::{self, ParamStore};

fn main() -> emocodec::error::Result<()> {
    let (t, d, de, ds) = (20, 16, 8, 6);
    let mut store = ParamStore::new(DType::F64, 0);
    let p = GuidanceProjections::new(&mut store, "guide", d, de, ds)?;
    let z = candle_core::Tensor::randn(0f64, 1.0, (t, d), &nn::DEVICE)?;
    let e = candle_core::Tensor::randn(0f64, 1.0, (t, de), &nn::DEVICE)?;
    let s = candle_core::Tensor::randn(0f64, 1.0, (t, ds), &nn::DEVICE)?;
    for mode in ModulationMode::ALL {
        let cfg = ModulationConfig { mode, heads: 2, train: false, ..Default::default() };
        let out = cross_modulate(&z, &e, &s, &cfg, &p, None, &mut ChaCha8Rng::seed_from_u64(0))?;
        let row_sum = match &out.emo_weights.as_ref().or(out.sem_weights.as_ref()) {
            Some(a) => format!("{:.6}", nn::scalar(&a.sum(D::Minus1)?.mean_all()?)?),
            None => "-".into(),
        };
        let change = nn::scalar(&(&out.unified - &z)?.sqr()?.mean_all()?)?;
        println!("{:<13} unified {:?}  mean attention row sum {row_sum}  |Δz|² {change:.4}", mode.name(), out.unified.dims());
    }
    Ok(())
}
