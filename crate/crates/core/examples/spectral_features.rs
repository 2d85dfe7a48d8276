//! STFT, multi-resolution mel and log-spectral distance on a synthetic clip.

use emocodec::corpus::{Corpus, TeacherConfig};
use emocodec::features::{self, MEL_RESOLUTIONS};

fn main() -> emocodec::error::Result<()> {
    let corpus = Corpus::synthetic(1, 1.0, 7, TeacherConfig::default())?;
    let clip = &corpus.items[0].clip;
    let spec = features::stft(&clip.samples, 512, 128)?;
    println!("stft: {} frames x {} bins", spec.power().nrows(), spec.power().ncols());
    for i in MEL_RESOLUTIONS {
        let m = features::mel(clip, i)?;
        println!("mel 2^{i:<2}: {:>4} frames x {} bands", m.values.nrows(), m.values.ncols());
    }
    let mut quieter = clip.clone();
    quieter.samples.iter_mut().for_each(|s| *s *= 0.5);
    println!("LSD(x, x) = {:.3} dB", features::lsd(clip, clip)?);
    println!("LSD(x, x/2) = {:.3} dB", features::lsd(clip, &quieter)?);
    Ok(())
}
