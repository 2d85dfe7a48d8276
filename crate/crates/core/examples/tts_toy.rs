//! Toy text-to-speech: codec tokens from a briefly trained codec, AR + NAR
//! token LM overfit on them, then regeneration of the first utterance.

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use emocodec::nn::ParamStore;
use emocodec::token_lm::{ar_perplexity, stream_match, train_lm, LmConfig, LmTrainConfig, TokenLm};
use emocodec::trainer::{token_dataset, train_codec, TrainConfig};

fn main() -> emocodec::error::Result<()> {
    let mut cfg = TrainConfig::toy();
    cfg.steps = 10;
    cfg.disc_enabled = false;
    cfg.corpus.clips = 4;
    let corpus = cfg.corpus.load(cfg.teachers)?;
    let model = train_codec(&cfg, &corpus, |_| {})?.trainer.model;
    let data = token_dataset(&model, &corpus, 0)?;

    let lm_cfg = LmConfig { layers: 2, dim: 64, ffn: 128, heads: 4, dropout: 0.0, temperature: 0.0, ..LmConfig::toy() };
    let mut store = ParamStore::new(DType::F32, 0);
    let lm = TokenLm::new(&mut store, &lm_cfg, cfg.num_books, cfg.codebook_size, corpus.teacher_config.vocab, model.codec_hash())?;
    let tc = LmTrainConfig { steps: 150, lr: 3e-3, seed: 0 };
    train_lm(&lm, &store, &data, &tc, |s| {
        if s.step % 25 == 0 {
            println!("lm step {:>3}: ar {:.3} nar {:.3}", s.step, s.ar, s.nar);
        }
    })?;
    println!("teacher-forced AR perplexity {:.3}", ar_perplexity(&lm, &data)?);
    let g = lm.generate(&data[0].phonemes, None, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!(
        "regenerated {} frames (reference {}), stream-1 match {:.3}",
        g.grid.frames(),
        data[0].grid.frames(),
        stream_match(&data[0].grid.stream(0), &g.grid.stream(0))
    );
    let audio = model.decode_grid(&g.grid)?;
    emocodec::io::write_wav(&std::env::temp_dir().join("tts_toy.wav"), &audio)?;
    Ok(())
}
