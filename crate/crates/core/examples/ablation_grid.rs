//! A 2 x 2 grid over guidance placement and relation variant, two seeds per
//! cell, on a deliberately small model.

use emocodec::trainer::ablation::{run_ablation, GridSpec};
use emocodec::trainer::TrainConfig;

fn main() -> emocodec::error::Result<()> {
    let mut base = TrainConfig::toy();
    base.disc_enabled = false;
    base.encoder.latent_dim = 32;
    base.corpus.clips = 4;
    base.corpus.duration_s = 0.32;
    let grid = GridSpec::parse(
        "modulation.mode = none, cross-before\n\
         rela.variant = full, emo-only\n\
         seeds = 0, 1\n\
         train.steps = 10\n",
    )?;
    let corpus = base.corpus.load(base.teachers)?;
    let result = run_ablation(&grid, &base, &corpus, None, |cell, run| {
        let label: Vec<String> = cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{} seed {} -> {}", label.join(" "), run.seed, if run.report.is_some() { "ok" } else { "failed" });
    })?;
    print!("{}", result.text_table());
    Ok(())
}
