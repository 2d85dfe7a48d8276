//! Trains a small codec, scores its reconstructions, probes the emotion
//! latent and writes the report directory.

use emocodec::evalkit::{emit_report, eval_reconstruction, probe_emotion, text_table};
use emocodec::trainer::{train_codec, TrainConfig};

fn main() -> emocodec::error::Result<()> {
    let mut cfg = TrainConfig::toy();
    cfg.steps = 30;
    cfg.disc_enabled = false;
    let corpus = cfg.corpus.load(cfg.teachers)?;
    let out = train_codec(&cfg, &corpus, |_| {})?;
    let model = &out.trainer.model;
    let mut report = eval_reconstruction(model, &corpus)?;
    report.probe_r2 = Some(probe_emotion(model, &corpus)?);
    let dest = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("emocodec_report"));
    let files = emit_report(std::slice::from_ref(&report), &dest)?;
    print!("{}", text_table(std::slice::from_ref(&report), "toy codec"));
    println!("{} files under {}", files.len(), dest.display());
    Ok(())
}
