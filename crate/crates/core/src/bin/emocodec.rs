use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use emocodec::corpus::{gen_teachers, parse_tokens, Corpus, CorpusManifest};
use emocodec::error::Result;
use emocodec::evalkit;
use emocodec::io::{read_wav, write_wav};
use emocodec::nn::ParamStore;
use emocodec::rvq::TokenGrid;
use emocodec::token_lm::{ar_perplexity, stream_match, train_lm, LmConfig, LmTrainConfig, TokenLm};
use emocodec::trainer::ablation::{run_ablation, GridSpec};
use emocodec::trainer::gradcheck::{grad_check, LOSSES};
use emocodec::trainer::{token_dataset, train_codec, write_log, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "emocodec", version, about = "Emotion-guided neural speech codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec and write the log and checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "runs/codec")]
        out: PathBuf,
    },
    /// Compare backprop against central finite differences.
    Gradcheck {
        /// Loss name, or `all`.
        #[arg(long, default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Base config the grid overrides apply to.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Turn a wav file into a token grid.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a token grid back into a wav file.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score reconstructions and emit the report directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Train the toy AR/NAR token LM on codec tokens and synthesize one utterance.
    TtsToy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Space-separated phoneme ids; defaults to the first clip's tokens.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "tts.wav")]
        out: PathBuf,
    },
    /// Write a synthetic corpus with manifest, latent tracks and teachers.
    Synth {
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 0.64)]
        duration: f64,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Evaluation corpus: a manifest, a fresh synthetic set, or the one the
/// checkpoint was trained on.
#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    corpus_seed: Option<u64>,
}

impl CorpusArgs {
    fn load(&self, cfg: &TrainConfig) -> Result<Corpus> {
        if let Some(m) = &self.manifest {
            return Corpus::from_manifest(&CorpusManifest::read(m)?, cfg.teachers);
        }
        let mut src = cfg.corpus.clone();
        if self.clips.is_some() || self.duration.is_some() || self.corpus_seed.is_some() {
            src.manifest = None;
        }
        src.clips = self.clips.unwrap_or(src.clips);
        src.duration_s = self.duration.unwrap_or(src.duration_s);
        src.seed = self.corpus_seed.unwrap_or(src.seed);
        src.load(cfg.teachers)
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::toy(),
    };
    let pairs = emocodec::trainer::config::parse_pairs(&overrides.join("\n"))?;
    cfg.apply(&pairs)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides, out } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let corpus = cfg.corpus.load(cfg.teachers)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            let every = (cfg.total_steps(corpus.len()) / 20).max(1);
            let outcome = train_codec(&cfg, &corpus, |r| {
                if r.step % every == 0 {
                    let mel = r.terms.get("mel").copied().unwrap_or(f64::NAN);
                    eprintln!("step {:>6}  lr {:.2e}  total {:.4}  mel {:.4}", r.step, r.lr, r.total, mel);
                }
            })?;
            write_log(&out.join("log.jsonl"), &outcome.log)?;
            let ckpt = out.join("checkpoint.afck");
            Checkpoint::capture(&outcome.trainer)?.save(&ckpt)?;
            println!("{}", ckpt.display());
        }
        Command::Gradcheck { loss, seed } => {
            let names: Vec<&str> = if loss == "all" { LOSSES.to_vec() } else { vec![loss.as_str()] };
            for name in names {
                let r = grad_check(name, seed)?;
                println!("{:<22} {:.3e}", r.loss, r.max_rel_err);
                for c in &r.cases {
                    println!("  {:<24} {:.3e} ({} entries)", c.case, c.max_rel_err, c.entries);
                }
            }
        }
        Command::Ablate { grid, config, out } => {
            let base = load_config(config.as_deref(), &[])?;
            let spec = GridSpec::load(&grid)?;
            let mut probe_cfg = base.clone();
            probe_cfg.apply(&spec.base)?;
            let corpus = probe_cfg.corpus.load(probe_cfg.teachers)?;
            let result = run_ablation(&spec, &base, &corpus, None, |cell, r| {
                let label: Vec<String> = cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
                match (&r.report, &r.error) {
                    (Some(rep), _) => eprintln!("[{}] seed {}: emo {:.4} mel {:.4}", label.join(" "), r.seed, rep.emo_proxy, rep.mel),
                    (None, Some(e)) => eprintln!("[{}] seed {}: failed: {e}", label.join(" "), r.seed),
                    _ => {}
                }
            })?;
            result.write(&out)?;
            print!("{}", result.text_table());
        }
        Command::Encode { checkpoint, input, out } => {
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let clip = read_wav(&input)?.pad_to_hop();
            // the textual teacher plays no part in encoding
            let teachers = gen_teachers(&clip, &[0], &model.cfg.teachers)?;
            let grid = model.encode_clip(&clip, &teachers)?;
            grid.write(&out)?;
            println!("{} frames x {} books", grid.frames(), grid.layers());
        }
        Command::Decode { checkpoint, input, out } => {
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let grid = TokenGrid::read(&input)?;
            write_wav(&out, &model.decode_grid(&grid)?)?;
        }
        Command::Eval { checkpoint, corpus, out } => {
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let corpus = corpus.load(&model.cfg)?;
            let mut report = evalkit::eval_reconstruction(&model, &corpus)?;
            if corpus.len() >= 2 {
                report.probe_r2 = Some(evalkit::probe_emotion(&model, &corpus)?);
            }
            evalkit::emit_report(std::slice::from_ref(&report), &out)?;
            print!("{}", evalkit::text_table(std::slice::from_ref(&report), "Report"));
        }
        Command::TtsToy { checkpoint, corpus, text, steps, seed, out } => {
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let corpus = corpus.load(&model.cfg)?;
            let data = token_dataset(&model, &corpus, 0)?;
            let cfg = LmConfig::toy();
            let mut store = ParamStore::new(candle_core::DType::F32, seed);
            let lm = TokenLm::new(&mut store, &cfg, model.cfg.k_active(), model.cfg.codebook_size, corpus.teacher_config.vocab, model.codec_hash())?;
            let tc = LmTrainConfig { steps, seed, ..Default::default() };
            train_lm(&lm, &store, &data, &tc, |s| {
                if s.step % 50 == 0 {
                    eprintln!("lm step {:>4}  ar {:.4}  nar {:.4}", s.step, s.ar, s.nar);
                }
            })?;
            println!("AR perplexity {:.4}", ar_perplexity(&lm, &data)?);
            let phonemes = match text {
                Some(t) => parse_tokens(&t)?,
                None => data[0].phonemes.clone(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = lm.generate(&phonemes, None, &mut rng)?;
            if let Some(ex) = data.iter().find(|d| d.phonemes == phonemes) {
                println!("stream-1 match {:.4}", stream_match(&ex.grid.stream(0), &g.grid.stream(0)));
            }
            if g.truncated {
                eprintln!("generation hit the frame limit");
            }
            write_wav(&out, &model.decode_grid(&g.grid)?)?;
        }
        Command::Synth { clips, duration, seed, out } => {
            let corpus = Corpus::synthetic(clips, duration, seed, TrainConfig::toy().teachers)?;
            corpus.write(&out)?;
            println!("{}", out.join("manifest.jsonl").display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
