//! Writes a small synthetic corpus (wav, latent tracks, teachers, manifest)
//! and reads it back.

use emocodec::corpus::{Corpus, CorpusManifest, TeacherConfig};

fn main() -> emocodec::error::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("emocodec_corpus").display().to_string());
    let corpus = Corpus::synthetic(4, 1.0, 42, TeacherConfig::default())?;
    let manifest = corpus.write(dir.as_ref())?;
    let back = Corpus::from_manifest(&CorpusManifest::read(&manifest.root.join("manifest.jsonl"))?, corpus.teacher_config)?;
    for it in &back.items {
        println!(
            "{}: {:.2}s, {} frames, latent range [{:.2}, {:.2}], {} tokens",
            it.name,
            it.clip.duration_s(),
            it.track.frames(),
            it.track.values.iter().cloned().fold(f64::INFINITY, f64::min),
            it.track.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            it.tokens.len()
        );
    }
    Ok(())
}
