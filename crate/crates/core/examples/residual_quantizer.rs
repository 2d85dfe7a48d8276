//! Residual quantization of random latents: error against the number of
//! active layers, token-grid round trip, and EMA updates with dead-code revival.

use candle_core::DType;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emocodec::backbone::{LatentKind, LatentSequence};
use emocodec::rvq::{RvqConfig, RvqState};

fn main() -> emocodec::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = RvqConfig { num_books: 8, codebook_size: 64, dim: 16 };
    let mut rvq = RvqState::new(cfg, 11)?;
    let values = Array2::from_shape_simple_fn((200, 16), || rng.gen_range(-1.0..1.0));
    let z = LatentSequence { values: values.clone(), frame_rate: 50.0, kind: LatentKind::Unified };

    for k in 1..=cfg.num_books {
        let (grid, _) = rvq.quantize(&z, k, DType::F64)?;
        let q = rvq.dequantize(&grid, 50.0)?;
        let err = (&values - &q.values).mapv(|v| v * v).mean().unwrap_or(0.0);
        println!("k_active {k}: mse {err:.5}");
    }

    for step in 0..5 {
        let a = rvq.assign(&values, cfg.num_books)?;
        rvq.ema_update(&a);
        let inputs: Vec<&Array2<f64>> = a.layers.iter().map(|l| &l.inputs).collect();
        let revived = rvq.revive_dead(&inputs, 0.05, &mut rng);
        println!("update {step}: revived {revived}");
    }
    Ok(())
}
