//! Frame rate and bitrate of the toy and paper configurations.

use emocodec::rvq::bitrate_kbps;
use emocodec::trainer::TrainConfig;

fn main() {
    for (name, cfg) in [("toy", TrainConfig::toy()), ("paper", TrainConfig::paper())] {
        let fr = cfg.encoder.frame_rate();
        println!(
            "{name:<5} hop {} -> {fr} Hz, {} x {} codebooks -> {} kbps",
            cfg.encoder.hop(),
            cfg.num_books,
            cfg.codebook_size,
            bitrate_kbps(fr, cfg.num_books, cfg.codebook_size)
        );
    }
}
