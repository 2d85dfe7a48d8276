//! Short codec training run on a tiny corpus, then a checkpoint round trip
//! and resumed training.

use emocodec::trainer::{train_codec, Checkpoint, TrainConfig};

fn main() -> emocodec::error::Result<()> {
    let mut cfg = TrainConfig::toy();
    cfg.steps = 20;
    cfg.disc_enabled = false;
    cfg.corpus.clips = 4;
    let corpus = cfg.corpus.load(cfg.teachers)?;
    let out = train_codec(&cfg, &corpus, |r| {
        println!("step {:>3} total {:>9.3} mel {:>8.3} revived {}", r.step, r.total, r.terms["mel"], r.revived);
    })?;
    let path = std::env::temp_dir().join("emocodec_demo.afck");
    Checkpoint::capture(&out.trainer)?.save(&path)?;
    let mut resumed = Checkpoint::load(&path)?.restore()?;
    println!("resumed at step {} of {}", resumed.step, resumed.total_steps);
    resumed.total_steps += 5;
    let batch = emocodec::corpus::Batch::from_indices(&corpus, &[0, 1, 2, 3]);
    let r = resumed.train_step(&batch)?;
    println!("one more step: total {:.3}", r.total);
    Ok(())
}
