//! Codec training: model assembly, the generator/discriminator step, and the
//! outer loop with per-step logging.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{self, DiscriminatorSet};
use crate::backbone::{self, Decoder, Encoder, LatentKind, LatentSequence};
use crate::corpus::{batch_iter, AudioClip, Batch, Corpus, TeacherBundle};
use crate::error::{invalid, Error, Result};
use crate::guidance::{self, GuidanceProjections};
use crate::nn::{self, AdamW, ParamStore};
use crate::objectives::{self, MelLoss, RelaVariant, TextProjection};
use crate::rvq::{Assignments, RvqState, TokenGrid};
use crate::token_lm::LmExample;

pub use checkpoint::Checkpoint;
pub use config::{CorpusSource, Precision, Scale, TrainConfig};

const RVQ_SEED_SALT: u64 = 0x5EED_0F_C0DE;
const GATE_SEED_SALT: u64 = 0x6A7E;
const REVIVE_SEED_SALT: u64 = 0x4E71_1E;

/// Generator side of the codec: encoder, guidance, quantizer and decoder.
pub struct CodecModel {
    pub cfg: TrainConfig,
    pub dtype: DType,
    pub gen: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub guidance: GuidanceProjections,
    pub text: TextProjection,
    pub rvq: RvqState,
}

/// Eval-mode view of one clip through the codec.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub latents: LatentSequence,
    pub unified: LatentSequence,
    pub grid: TokenGrid,
    /// Selected codebook embeddings per active layer, each `T' × D`.
    pub layers: Vec<Array2<f64>>,
    pub reconstruction: AudioClip,
}

fn teacher_tensor(rows: &[&Array2<f64>], frames: usize, dtype: DType) -> Result<Tensor> {
    let d = rows.first().map(|a| a.ncols()).unwrap_or(0);
    let mut data = vec![0.0; rows.len() * frames * d];
    for (b, a) in rows.iter().enumerate() {
        for (t, row) in a.rows().into_iter().enumerate().take(frames) {
            let off = (b * frames + t) * d;
            for (j, v) in row.iter().enumerate() {
                data[off + j] = *v;
            }
        }
    }
    nn::from_f64(data, &[rows.len(), frames, d], dtype)
}

fn audio_tensor(clips: &[AudioClip], dtype: DType) -> Result<Tensor> {
    let n = clips.first().map(|c| c.samples.len()).unwrap_or(0);
    let data: Vec<f64> = clips.iter().flat_map(|c| c.samples.iter().map(|&s| s as f64)).collect();
    nn::from_f64(data, &[clips.len(), n], dtype)
}

impl CodecModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.precision.dtype();
        let d = cfg.encoder.latent_dim;
        let mut gen = ParamStore::new(dtype, cfg.seed);
        let encoder = Encoder::new(&mut gen, "enc", &cfg.encoder)?;
        let decoder = Decoder::new(&mut gen, "dec", &cfg.encoder)?;
        let guidance = GuidanceProjections::new(&mut gen, "guide", d, cfg.teachers.dim_emotion, cfg.teachers.dim_semantic)?;
        let text = TextProjection::new(&mut gen, "text", cfg.teachers.dim_text, d)?;
        let mut rvq = RvqState::new(cfg.rvq(), cfg.seed ^ RVQ_SEED_SALT)?;
        rvq.model_hash = cfg.hash();
        Ok(Self {
            cfg: cfg.clone(),
            dtype,
            gen,
            encoder,
            decoder,
            guidance,
            text,
            rvq,
        })
    }

    pub fn codec_hash(&self) -> u64 {
        self.rvq.model_hash
    }

    pub fn frame_rate(&self) -> f64 {
        self.cfg.encoder.frame_rate()
    }

    /// Encoder latents and eval-mode (ungated) unified latents for one clip.
    pub fn unify(&self, clip: &AudioClip, teachers: &TeacherBundle) -> Result<(LatentSequence, LatentSequence)> {
        let z = backbone::encode(clip, &self.encoder, self.dtype)?;
        let t = z.frames();
        let e = teacher_tensor(&[&teachers.emotion], t, self.dtype)?.squeeze(0)?;
        let s = teacher_tensor(&[&teachers.semantic], t, self.dtype)?.squeeze(0)?;
        let mcfg = guidance::ModulationConfig {
            train: false,
            ..self.cfg.modulation
        };
        let zt = nn::from_array2(&z.values, self.dtype)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = guidance::cross_modulate(&zt, &e, &s, &mcfg, &self.guidance, None, &mut rng)?;
        let unified = LatentSequence {
            values: nn::to_array2(&m.unified)?,
            frame_rate: z.frame_rate,
            kind: LatentKind::Unified,
        };
        Ok((z, unified))
    }

    pub fn analyze(&self, clip: &AudioClip, teachers: &TeacherBundle) -> Result<Analysis> {
        let (latents, unified) = self.unify(clip, teachers)?;
        let (grid, out) = self.rvq.quantize(&unified, self.cfg.k_active(), self.dtype)?;
        let layers = out
            .residuals
            .iter()
            .map(|(_, q)| nn::to_array2(q))
            .collect::<Result<Vec<_>>>()?;
        let q = self.rvq.dequantize(&grid, unified.frame_rate)?;
        let mut reconstruction = backbone::decode(&q, &self.decoder, self.dtype)?;
        reconstruction.samples.truncate(clip.samples.len());
        Ok(Analysis {
            latents,
            unified,
            grid,
            layers,
            reconstruction,
        })
    }

    /// Token grid for one clip.
    pub fn encode_clip(&self, clip: &AudioClip, teachers: &TeacherBundle) -> Result<TokenGrid> {
        let (_, unified) = self.unify(clip, teachers)?;
        Ok(self.rvq.quantize(&unified, self.cfg.k_active(), self.dtype)?.0)
    }

    pub fn decode_grid(&self, grid: &TokenGrid) -> Result<AudioClip> {
        let q = self.rvq.dequantize(grid, self.frame_rate())?;
        backbone::decode(&q, &self.decoder, self.dtype)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    pub disc: Option<f64>,
    pub grad_norm: f64,
    pub revived: usize,
    pub seconds: f64,
}

/// Mutable training state around a [`CodecModel`].
pub struct Trainer {
    pub model: CodecModel,
    pub disc_store: ParamStore,
    pub disc: Option<DiscriminatorSet>,
    pub g_opt: AdamW,
    pub d_opt: AdamW,
    pub step: usize,
    pub total_steps: usize,
    pub revive_threshold: f64,
    gate_rng: ChaCha8Rng,
    revive_rng: ChaCha8Rng,
    mel: HashMap<usize, MelLoss>,
}

/// Outputs of a generator step needed by the rest of the iteration.
pub struct GenStep {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub x: Tensor,
    pub x_hat: Tensor,
    pub assignments: Assignments,
}

fn sum_mean(terms: Vec<Tensor>) -> Result<Tensor> {
    let n = terms.len();
    if n == 0 {
        return invalid("no per-clip terms");
    }
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n as f64)?)
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, corpus_len: usize) -> Result<Self> {
        if corpus_len == 0 {
            return invalid("training needs a nonempty corpus");
        }
        let model = CodecModel::new(cfg)?;
        let mut disc_store = ParamStore::new(model.dtype, cfg.seed.wrapping_add(1));
        let uses_disc = cfg.disc_enabled && (cfg.weights.adv > 0.0 || cfg.weights.feat > 0.0);
        let disc = if uses_disc {
            Some(DiscriminatorSet::new(&mut disc_store, &cfg.disc)?)
        } else {
            None
        };
        let spe = cfg.steps_per_epoch(corpus_len);
        Ok(Self {
            model,
            disc_store,
            disc,
            g_opt: AdamW::new(cfg.optim),
            d_opt: AdamW::new(cfg.optim),
            step: 0,
            total_steps: cfg.total_steps(corpus_len),
            revive_threshold: 1.0 / (2.0 * spe as f64),
            gate_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ GATE_SEED_SALT),
            revive_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ REVIVE_SEED_SALT),
            mel: HashMap::new(),
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.model.cfg
    }

    pub fn lr(&self) -> f64 {
        nn::cosine_lr(self.cfg().lr, self.step, self.total_steps)
    }

    fn mel_loss(&mut self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        let len = x.dims()[x.rank() - 1];
        if !self.mel.contains_key(&len) {
            let m = MelLoss::new(len, self.model.cfg.encoder.sample_rate, self.model.dtype)?;
            self.mel.insert(len, m);
        }
        self.mel[&len].forward(x, x_hat)
    }

    /// Forward pass, all six terms, and one generator update.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<GenStep> {
        let m = &self.model;
        let cfg = m.cfg.clone();
        let dtype = m.dtype;
        let b = batch.len();
        let x = audio_tensor(&batch.clips, dtype)?;
        let t = x.dims()[1] / cfg.encoder.hop();
        let padded = batch.frames.iter().any(|&f| f != t);
        let z = m.encoder.forward(&x)?;
        let emo: Vec<&Array2<f64>> = batch.teachers.iter().map(|tb| &tb.emotion).collect();
        let sem: Vec<&Array2<f64>> = batch.teachers.iter().map(|tb| &tb.semantic).collect();
        let e = teacher_tensor(&emo, t, dtype)?;
        let s = teacher_tensor(&sem, t, dtype)?;
        let mask = if padded {
            let v: Vec<f64> = batch
                .frame_mask
                .iter()
                .flat_map(|row| row.iter().map(|&ok| if ok { 1.0 } else { 0.0 }))
                .collect();
            Some(nn::from_f64(v, &[b, t], dtype)?)
        } else {
            None
        };
        let mcfg = guidance::ModulationConfig {
            train: true,
            ..cfg.modulation
        };
        let modulated = guidance::cross_modulate(&z, &e, &s, &mcfg, &m.guidance, mask.as_ref(), &mut self.gate_rng)?;
        let qo = m.rvq.quantize_tensor(&modulated.unified, cfg.k_active())?;
        let x_hat = m.decoder.forward(&qo.quantized)?;

        let w = cfg.weights;
        let zero = Tensor::zeros((), dtype, &nn::DEVICE)?;
        let mut parts: BTreeMap<String, Tensor> = BTreeMap::new();

        let clip_view = |v: &Tensor, i: usize, frames: usize| -> Result<Tensor> { Ok(v.get(i)?.narrow(0, 0, frames)?) };

        let mel = if padded {
            let mut terms = Vec::with_capacity(b);
            for i in 0..b {
                let n = batch.frames[i] * cfg.encoder.hop();
                let xi = x.get(i)?.narrow(0, 0, n)?;
                let yi = x_hat.get(i)?.narrow(0, 0, n)?;
                terms.push(self.mel_loss(&xi, &yi)?);
            }
            sum_mean(terms)?
        } else {
            self.mel_loss(&x, &x_hat)?
        };
        parts.insert("mel".into(), mel);

        let mut q_terms = Vec::with_capacity(b);
        let mut rela_terms = Vec::new();
        let mut align_terms = Vec::new();
        let projected = if w.rela > 0.0 && cfg.rela.variant == RelaVariant::Feature {
            Some(guidance::project(&z, &e, &s, &self.model.guidance)?)
        } else {
            None
        };
        for i in 0..b {
            let f = batch.frames[i];
            let pairs: Vec<(Tensor, Tensor)> = qo
                .residuals
                .iter()
                .map(|(r, q)| Ok((clip_view(r, i, f)?, clip_view(q, i, f)?)))
                .collect::<Result<_>>()?;
            q_terms.push(objectives::commitment_loss(&pairs)?);
            let layers: Vec<Tensor> = qo.layers.iter().map(|l| clip_view(l, i, f)).collect::<Result<_>>()?;
            if w.rela > 0.0 {
                let term = match &projected {
                    Some((_, ep, sp)) => objectives::feature_distill_loss(
                        &clip_view(&modulated.unified, i, f)?,
                        &clip_view(ep, i, f)?,
                        &clip_view(sp, i, f)?,
                    )?,
                    None => {
                        let q_sel = objectives::select_layers(&layers, cfg.rela.layer_select)?;
                        objectives::rela_loss(&q_sel, &clip_view(&e, i, f)?, &clip_view(&s, i, f)?, &cfg.rela)?
                    }
                };
                rela_terms.push(term);
            }
            if w.align > 0.0 {
                let tb = &batch.teachers[i];
                let c = self.model.text.forward(&nn::from_array2(&tb.text, dtype)?)?;
                let q1 = &layers[0];
                let (c_star, _) = objectives::soft_align_targets(&q1.detach(), &c, cfg.align.window)?;
                let gamma = objectives::emo_weights(&tb.emotion.slice(ndarray::s![..f, ..]).to_owned())?;
                align_terms.push(objectives::align_loss(q1, &c_star, &gamma, cfg.align.variant)?);
            }
        }
        parts.insert("q".into(), sum_mean(q_terms)?);
        parts.insert("rela".into(), if rela_terms.is_empty() { zero.clone() } else { sum_mean(rela_terms)? });
        parts.insert("align".into(), if align_terms.is_empty() { zero.clone() } else { sum_mean(align_terms)? });

        match &self.disc {
            Some(disc) => {
                let fake = disc.forward(&x_hat)?;
                let logits: Vec<Tensor> = fake.iter().map(|o| o.logits.clone()).collect();
                parts.insert("adv".into(), adversary::gen_adv_loss(&logits)?);
                if w.feat > 0.0 {
                    let real = disc.forward(&x)?;
                    let rf: Vec<Vec<Tensor>> = real.into_iter().map(|o| o.features).collect();
                    let ff: Vec<Vec<Tensor>> = fake.into_iter().map(|o| o.features).collect();
                    parts.insert("feat".into(), adversary::feature_match_loss(&rf, &ff)?);
                } else {
                    parts.insert("feat".into(), zero.clone());
                }
            }
            None => {
                parts.insert("adv".into(), zero.clone());
                parts.insert("feat".into(), zero.clone());
            }
        }

        let (total, breakdown) = objectives::total_loss(&parts, &w)?;
        if let Some(term) = breakdown.first_nan() {
            return Err(Error::Diverged {
                step: self.step,
                term,
            });
        }
        let grads = total.backward()?;
        let lr = self.lr();
        let grad_norm = self.g_opt.step(&self.model.gen, &grads, lr)?;
        let assignments = if padded {
            let keep: Vec<bool> = batch.frame_mask.iter().flatten().copied().collect();
            qo.assignments.select_rows(&keep)
        } else {
            qo.assignments
        };
        Ok(GenStep {
            terms: breakdown.terms,
            total: breakdown.total,
            grad_norm,
            x,
            x_hat: x_hat.detach(),
            assignments,
        })
    }

    /// Hinge update of the discriminators on real `x` and detached `x_hat`.
    pub fn discriminator_step(&mut self, x: &Tensor, x_hat: &Tensor) -> Result<Option<f64>> {
        let Some(disc) = &self.disc else {
            return Ok(None);
        };
        let real: Vec<Tensor> = disc.forward(&x.detach())?.into_iter().map(|o| o.logits).collect();
        let fake: Vec<Tensor> = disc.forward(&x_hat.detach())?.into_iter().map(|o| o.logits).collect();
        let loss = adversary::disc_adv_loss(&real, &fake)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                term: "disc".into(),
            });
        }
        let grads = loss.backward()?;
        let lr = self.lr();
        self.d_opt.step(&self.disc_store, &grads, lr)?;
        Ok(Some(value))
    }

    /// EMA codebook update followed by dead-entry revival.
    pub fn update_codebooks(&mut self, a: &Assignments) -> usize {
        self.model.rvq.ema_update(a);
        let inputs: Vec<&Array2<f64>> = a.layers.iter().map(|l| &l.inputs).collect();
        self.model.rvq.revive_dead(&inputs, self.revive_threshold, &mut self.revive_rng)
    }

    /// One full iteration: generator update, codebook update, discriminator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let start = Instant::now();
        let lr = self.lr();
        let g = self.generator_step(batch)?;
        let revived = self.update_codebooks(&g.assignments);
        let disc = self.discriminator_step(&g.x, &g.x_hat)?;
        let rec = StepRecord {
            step: self.step,
            lr,
            terms: g.terms,
            total: g.total,
            disc,
            grad_norm: g.grad_norm,
            revived,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(rec)
    }
}

/// Result of [`train_codec`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<StepRecord>,
}

/// Trains a codec on `corpus` for the configured number of steps. `on_step`
/// sees every record as it is produced.
pub fn train_codec(cfg: &TrainConfig, corpus: &Corpus, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return invalid("training needs a nonempty corpus");
    }
    let mut trainer = Trainer::new(cfg, corpus.len())?;
    let mut log = Vec::with_capacity(trainer.total_steps);
    let mut batches = batch_iter(corpus, cfg.batch_size, cfg.seed)?;
    while trainer.step < trainer.total_steps {
        let batch = batches
            .next()
            .ok_or_else(|| Error::InvalidInput("batch iterator ended".into()))?;
        let rec = trainer.train_step(&batch)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome { trainer, log })
}

/// Codec token grids of every clip paired with its phoneme tokens, for
/// training the token LM. With `prompt_frames > 0` each example carries the
/// leading frames of the next clip as its acoustic prompt.
pub fn token_dataset(model: &CodecModel, corpus: &Corpus, prompt_frames: usize) -> Result<Vec<LmExample>> {
    let grids = corpus
        .items
        .iter()
        .map(|it| model.encode_clip(&it.clip, &it.teachers))
        .collect::<Result<Vec<_>>>()?;
    let n = grids.len();
    Ok(corpus
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| LmExample {
            phonemes: it.tokens.clone(),
            grid: grids[i].clone(),
            prompt: (prompt_frames > 0 && n > 1).then(|| {
                let g = &grids[(i + 1) % n];
                TokenGrid {
                    indices: g.indices.slice(ndarray::s![..prompt_frames.min(g.frames()), ..]).to_owned(),
                    codec_hash: g.codec_hash,
                }
            }),
        })
        .collect())
}

/// Writes one JSON object per line.
pub fn write_log(path: &std::path::Path, log: &[StepRecord]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::TeacherConfig;

    pub(crate) fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::toy();
        cfg.encoder.base_channels = 4;
        cfg.encoder.latent_dim = 16;
        cfg.encoder.lstm_layers = 1;
        cfg.codebook_size = 8;
        cfg.num_books = 3;
        cfg.teachers.dim_emotion = 8;
        cfg.teachers.dim_semantic = 8;
        cfg.teachers.dim_text = 8;
        cfg.modulation.heads = 2;
        cfg.disc.channels = 2;
        cfg.disc.layers = 2;
        cfg.batch_size = 2;
        cfg.steps = 3;
        cfg.corpus.clips = 2;
        cfg.corpus.duration_s = 0.16;
        cfg
    }

    fn corpus(cfg: &TrainConfig) -> Corpus {
        let tc: TeacherConfig = cfg.teachers;
        cfg.corpus.load(tc).unwrap()
    }

    #[test]
    fn same_seed_same_trajectory() {
        let cfg = tiny_cfg();
        let c = corpus(&cfg);
        let a = train_codec(&cfg, &c, |_| {}).unwrap();
        let b = train_codec(&cfg, &c, |_| {}).unwrap();
        let strip = |l: &[StepRecord]| l.iter().map(|r| (r.terms.clone(), r.total, r.disc)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
        for r in &a.log {
            for t in objectives::TERMS {
                assert!(r.terms.contains_key(t));
            }
        }
    }

    #[test]
    fn reconstruction_only_run_completes() {
        let mut cfg = tiny_cfg();
        cfg.weights.adv = 0.0;
        cfg.weights.feat = 0.0;
        cfg.disc_enabled = false;
        let c = corpus(&cfg);
        let out = train_codec(&cfg, &c, |_| {}).unwrap();
        assert!(out.trainer.disc.is_none());
        assert!(out.log.iter().all(|r| r.disc.is_none() && r.total.is_finite()));
    }

    #[test]
    fn updates_touch_only_their_own_parameters() {
        let cfg = tiny_cfg();
        let c = corpus(&cfg);
        let mut tr = Trainer::new(&cfg, c.len()).unwrap();
        let batch = Batch::from_indices(&c, &[0, 1]);
        let (g0, d0) = (tr.model.gen.fingerprint().unwrap(), tr.disc_store.fingerprint().unwrap());
        let g = tr.generator_step(&batch).unwrap();
        let (g1, d1) = (tr.model.gen.fingerprint().unwrap(), tr.disc_store.fingerprint().unwrap());
        assert_ne!(g0, g1);
        assert_eq!(d0, d1);
        tr.discriminator_step(&g.x, &g.x_hat).unwrap();
        assert_eq!(tr.model.gen.fingerprint().unwrap(), g1);
        assert_ne!(tr.disc_store.fingerprint().unwrap(), d1);
    }

    #[test]
    fn nan_aborts_naming_the_term() {
        let cfg = tiny_cfg();
        let mut c = corpus(&cfg);
        c.items[0].teachers.emotion[[0, 0]] = f64::NAN;
        let err = train_codec(&cfg, &c, |_| {}).err().unwrap();
        match err {
            Error::Diverged { step, term } => {
                assert_eq!(step, 0);
                assert!(objectives::TERMS.contains(&term.as_str()), "{term}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn handles_ragged_batches() {
        let mut cfg = tiny_cfg();
        cfg.disc.stft_windows = vec![512];
        let mut c = corpus(&cfg);
        let keep = c.items[1].clip.samples.len() - crate::corpus::HOP * 2;
        c.items[1].clip.samples.truncate(keep);
        let tc = cfg.teachers;
        let it = &mut c.items[1];
        it.teachers = crate::corpus::gen_teachers(&it.clip, &it.tokens, &tc).unwrap();
        let out = train_codec(&cfg, &c, |_| {}).unwrap();
        assert!(out.log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = tiny_cfg();
        let tr = Trainer::new(&cfg, 2).unwrap();
        assert_eq!(tr.lr(), cfg.lr);
        assert!(nn::cosine_lr(cfg.lr, tr.total_steps, tr.total_steps) <= 1e-2 * cfg.lr);
    }

    #[test]
    fn analysis_shapes() {
        let cfg = tiny_cfg();
        let c = corpus(&cfg);
        let m = CodecModel::new(&cfg).unwrap();
        let it = &c.items[0];
        let a = m.analyze(&it.clip, &it.teachers).unwrap();
        assert_eq!(a.grid.frames(), it.clip.frames());
        assert_eq!(a.grid.layers(), 3);
        assert_eq!(a.layers.len(), 3);
        assert_eq!(a.reconstruction.samples.len(), it.clip.samples.len());
        assert_eq!(m.encode_clip(&it.clip, &it.teachers).unwrap(), a.grid);
    }
}
