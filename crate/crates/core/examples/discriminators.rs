//! Multi-scale STFT, waveform and period discriminators on a random batch,
//! with the hinge and feature-matching losses.

use candle_core::{DType, Tensor};

use emocodec::adversary::{disc_adv_loss, feature_match_loss, gen_adv_loss, DiscriminatorConfig, DiscriminatorSet};
use emocodec::nn::{self, ParamStore, DEVICE};

fn main() -> emocodec::error::Result<()> {
    let cfg = DiscriminatorConfig { channels: 4, layers: 3, ..Default::default() };
    let mut store = ParamStore::new(DType::F32, 0);
    let set = DiscriminatorSet::new(&mut store, &cfg)?;
    let real = (Tensor::randn(0f32, 1.0, (2, 8192), &DEVICE)? * 0.3)?;
    let fake = (Tensor::randn(0f32, 1.0, (2, 8192), &DEVICE)? * 0.1)?;
    let r = set.forward(&real)?;
    let f = set.forward(&fake)?;
    for (i, o) in r.iter().enumerate() {
        let shapes: Vec<_> = o.features.iter().map(|t| t.dims().to_vec()).collect();
        println!("disc {i}: logits {:?}, features {shapes:?}", o.logits.dims());
    }
    let rl: Vec<Tensor> = r.iter().map(|o| o.logits.clone()).collect();
    let fl: Vec<Tensor> = f.iter().map(|o| o.logits.clone()).collect();
    let rf: Vec<Vec<Tensor>> = r.into_iter().map(|o| o.features).collect();
    let ff: Vec<Vec<Tensor>> = f.into_iter().map(|o| o.features).collect();
    println!("generator hinge {:.4}", nn::scalar(&gen_adv_loss(&fl)?)?);
    println!("discriminator hinge {:.4}", nn::scalar(&disc_adv_loss(&rl, &fl)?)?);
    println!("feature matching {:.4}", nn::scalar(&feature_match_loss(&rf, &ff)?)?);
    Ok(())
}
