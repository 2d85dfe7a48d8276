//! Toy text-to-speech over codec tokens: an autoregressive decoder-only model
//! for the first RVQ stream and a non-autoregressive model for the rest.

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::nn::{self, Init, LayerNorm, Linear, ParamStore, Scope, TransformerBlock};
use crate::rvq::TokenGrid;

/// Phoneme ids drawn from the corpus token inventory.
pub type PhonemeSeq = Vec<u32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn: usize,
    pub dropout: f64,
    /// Adds sinusoidal positions to every input; disable to ablate.
    pub positional: bool,
    /// Lets the autoregressive model see the prompt's first stream.
    pub ar_prompt: bool,
    /// Sampling temperature for the first stream; `0` means greedy.
    pub temperature: f64,
    /// Longest first stream generation may produce before truncating.
    pub max_frames: usize,
}

impl LmConfig {
    pub fn toy() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 128,
            ffn: 512,
            dropout: 0.05,
            positional: true,
            ar_prompt: false,
            temperature: 1.0,
            max_frames: 500,
        }
    }

    pub fn paper() -> Self {
        Self {
            layers: 12,
            heads: 16,
            dim: 1024,
            ffn: 4096,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return invalid(format!("embed dim {} must be divisible by {} heads", self.dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout must lie in [0, 1)");
        }
        if !(self.temperature >= 0.0) || self.max_frames == 0 {
            return invalid("temperature must be non-negative and max_frames positive");
        }
        Ok(())
    }
}

/// Sinusoidal position table `(t, d)`.
pub fn sinusoids(t: usize, d: usize, dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(t * d);
    for pos in 0..t {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * rate;
            v.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    nn::from_f64(v, &[t, d], dtype)
}

fn ids(v: &[u32]) -> Result<Tensor> {
    Ok(Tensor::new(v, &nn::DEVICE)?)
}

fn causal_mask(t: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = (0..t * t)
        .map(|i| if i % t > i / t { -1e9 } else { 0.0 })
        .collect();
    nn::from_f64(v, &[1, 1, t, t], dtype)
}

/// NLL per row of `logits (T, V)` for integer `targets`.
fn row_nll(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (t, v) = logits.dims2()?;
    if targets.len() != t {
        return shape(format!("{} targets for {t} rows", targets.len()));
    }
    let mut onehot = vec![0.0; t * v];
    for (r, &c) in targets.iter().enumerate() {
        if c as usize >= v {
            return invalid(format!("target {c} outside vocabulary {v}"));
        }
        onehot[r * v + c as usize] = 1.0;
    }
    let onehot = nn::from_f64(onehot, &[t, v], logits.dtype())?;
    Ok((nn::log_softmax_last(logits)? * onehot)?.sum(1)?.neg()?)
}

struct Stack {
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
}

impl Stack {
    fn new(s: &mut Scope<'_>, cfg: &LmConfig) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|l| TransformerBlock::new(&mut s.pp(&format!("block{l}")), cfg.dim, cfg.heads, cfg.ffn))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            ln: LayerNorm::new(&mut s.pp("ln_f"), cfg.dim)?,
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut h = x.unsqueeze(0)?;
        match rng {
            Some(rng) => {
                for b in &self.blocks {
                    h = b.forward(&h, mask, Some((p, &mut *rng)))?;
                }
            }
            None => {
                for b in &self.blocks {
                    h = b.forward(&h, mask, None)?;
                }
            }
        }
        self.ln.forward(&h.squeeze(0)?)
    }
}

/// Result of [`TokenLm::generate`].
#[derive(Debug, Clone)]
pub struct Generated {
    pub grid: TokenGrid,
    /// The first stream hit `max_frames` before emitting end-of-sequence.
    pub truncated: bool,
}

/// Joint AR + NAR model; parameters live under `ar.` and `nar.` in the store.
pub struct TokenLm {
    pub cfg: LmConfig,
    pub num_books: usize,
    pub codebook_size: usize,
    pub phone_vocab: usize,
    pub codec_hash: u64,
    dtype: DType,
    ar_phone: Tensor,
    ar_code: Tensor,
    ar_stack: Stack,
    ar_head: Linear,
    nar_phone: Tensor,
    nar_codes: Vec<Tensor>,
    nar_stage: Tensor,
    nar_segment: Tensor,
    nar_stack: Stack,
    nar_heads: Vec<Linear>,
}

impl TokenLm {
    pub fn new(
        store: &mut ParamStore,
        cfg: &LmConfig,
        num_books: usize,
        codebook_size: usize,
        phone_vocab: usize,
        codec_hash: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_books < 2 || codebook_size == 0 || phone_vocab == 0 {
            return invalid("token LM needs at least two codebooks and non-empty vocabularies");
        }
        let (d, v) = (cfg.dim, codebook_size);
        let emb = Init::Normal(0.02);
        let dtype = store.dtype();
        let mut ar = store.scope("ar");
        let ar_phone = ar.param("phone", &[phone_vocab, d], emb)?;
        // codes plus BOS
        let ar_code = ar.param("code", &[v + 1, d], emb)?;
        let ar_stack = Stack::new(&mut ar, cfg)?;
        // codes plus EOS
        let ar_head = Linear::new(&mut ar.pp("head"), d, v + 1, true)?;
        let mut nar = store.scope("nar");
        let nar_phone = nar.param("phone", &[phone_vocab, d], emb)?;
        let nar_codes = (0..num_books)
            .map(|k| nar.param(&format!("code{k}"), &[v, d], emb))
            .collect::<Result<_>>()?;
        let nar_stage = nar.param("stage", &[num_books, d], emb)?;
        let nar_segment = nar.param("segment", &[2, d], emb)?;
        let nar_stack = Stack::new(&mut nar, cfg)?;
        let nar_heads = (1..num_books)
            .map(|k| Linear::new(&mut nar.pp(&format!("head{k}")), d, v, true))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            num_books,
            codebook_size,
            phone_vocab,
            codec_hash,
            dtype,
            ar_phone,
            ar_code,
            ar_stack,
            ar_head,
            nar_phone,
            nar_codes,
            nar_stage,
            nar_segment,
            nar_stack,
            nar_heads,
        })
    }

    pub fn bos(&self) -> u32 {
        self.codebook_size as u32
    }

    pub fn eos(&self) -> u32 {
        self.codebook_size as u32
    }

    fn check_phonemes(&self, y: &[u32]) -> Result<()> {
        if y.is_empty() {
            return invalid("empty phoneme sequence");
        }
        if let Some(&p) = y.iter().find(|&&p| p as usize >= self.phone_vocab) {
            return invalid(format!("phoneme {p} outside vocabulary {}", self.phone_vocab));
        }
        Ok(())
    }

    fn check_grid(&self, g: &TokenGrid) -> Result<()> {
        if g.layers() != self.num_books {
            return shape(format!("grid has {} streams, model expects {}", g.layers(), self.num_books));
        }
        if g.codec_hash != self.codec_hash {
            return Err(Error::HashMismatch {
                expected: self.codec_hash,
                found: g.codec_hash,
            });
        }
        if g.indices.iter().any(|&i| i as usize >= self.codebook_size) {
            return invalid("token outside codebook");
        }
        Ok(())
    }

    fn add_positions(&self, x: Tensor) -> Result<Tensor> {
        if !self.cfg.positional {
            return Ok(x);
        }
        let (t, d) = x.dims2()?;
        Ok((x + sinusoids(t, d, self.dtype)?)?)
    }

    fn ar_prefix(&self, prompt: Option<&TokenGrid>) -> Vec<u32> {
        match prompt {
            Some(p) if self.cfg.ar_prompt => p.stream(0),
            _ => Vec::new(),
        }
    }

    /// Logits `(T+1, V+1)`: row `i` predicts `stream[i]`, the last row predicts EOS.
    pub fn ar_logits(
        &self,
        stream: &[u32],
        y: &[u32],
        prompt: Option<&TokenGrid>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        self.check_phonemes(y)?;
        if stream.iter().any(|&u| u as usize >= self.codebook_size) {
            return invalid("token outside codebook");
        }
        let prefix = self.ar_prefix(prompt);
        let mut codes = vec![self.bos()];
        codes.extend_from_slice(&prefix);
        codes.extend_from_slice(stream);
        let x = Tensor::cat(
            &[
                self.ar_phone.index_select(&ids(y)?, 0)?,
                self.ar_code.index_select(&ids(&codes)?, 0)?,
            ],
            0,
        )?;
        let x = self.add_positions(x)?;
        let t = x.dims()[0];
        let mask = causal_mask(t, self.dtype)?;
        let h = self.ar_stack.forward(&x, Some(&mask), self.cfg.dropout, rng)?;
        let start = y.len() + prefix.len();
        self.ar_head.forward(&h.narrow(0, start, stream.len() + 1)?)
    }

    /// Per-position negative log-likelihood `(T+1)` of stream 1 followed by EOS.
    pub fn ar_nll(&self, grid: &TokenGrid, y: &[u32], prompt: Option<&TokenGrid>, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        self.check_grid(grid)?;
        if grid.frames() == 0 {
            return invalid("empty token sequence");
        }
        let mut targets = grid.stream(0);
        let logits = self.ar_logits(&targets, y, prompt, rng)?;
        targets.push(self.eos());
        row_nll(&logits, &targets)
    }

    pub fn ar_loss(&self, grid: &TokenGrid, y: &[u32], prompt: Option<&TokenGrid>, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        Ok(self.ar_nll(grid, y, prompt, rng)?.mean_all()?)
    }

    /// Logits `(T, V)` for stream `k` (0-based, `k ≥ 1`) given streams `< k`.
    pub fn nar_logits(
        &self,
        grid: &TokenGrid,
        k: usize,
        y: &[u32],
        prompt: Option<&TokenGrid>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        if k == 0 || k >= self.num_books {
            return invalid(format!("stream {k} is not predicted by the NAR model"));
        }
        self.check_phonemes(y)?;
        let sum_streams = |g: &TokenGrid, upto: usize| -> Result<Tensor> {
            let mut acc = self.nar_codes[0].index_select(&ids(&g.stream(0))?, 0)?;
            for j in 1..upto {
                acc = (acc + self.nar_codes[j].index_select(&ids(&g.stream(j))?, 0)?)?;
            }
            Ok(acc)
        };
        let t = grid.frames();
        let mut parts = vec![self.nar_phone.index_select(&ids(y)?, 0)?];
        if let Some(p) = prompt.filter(|p| p.frames() > 0) {
            self.check_grid(p)?;
            parts.push(sum_streams(p, self.num_books)?.broadcast_add(&self.nar_segment.narrow(0, 0, 1)?)?);
        }
        parts.push(sum_streams(grid, k)?.broadcast_add(&self.nar_segment.narrow(0, 1, 1)?)?);
        let x = Tensor::cat(&parts, 0)?.broadcast_add(&self.nar_stage.narrow(0, k, 1)?)?;
        let x = self.add_positions(x)?;
        let total = x.dims()[0];
        let h = self.nar_stack.forward(&x, None, self.cfg.dropout, rng)?;
        self.nar_heads[k - 1].forward(&h.narrow(0, total - t, t)?)
    }

    /// Per-stream mean NLL for streams `2..=K`.
    pub fn nar_terms(
        &self,
        grid: &TokenGrid,
        y: &[u32],
        prompt: Option<&TokenGrid>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Tensor>> {
        self.check_grid(grid)?;
        if grid.layers() < 2 {
            return invalid("the NAR model needs at least two streams");
        }
        if grid.frames() == 0 {
            return invalid("empty token sequence");
        }
        (1..self.num_books)
            .map(|k| {
                let logits = self.nar_logits(grid, k, y, prompt, rng.as_deref_mut())?;
                Ok(row_nll(&logits, &grid.stream(k))?.mean_all()?)
            })
            .collect()
    }

    pub fn nar_loss(&self, grid: &TokenGrid, y: &[u32], prompt: Option<&TokenGrid>, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let terms = self.nar_terms(grid, y, prompt, rng)?;
        Ok(Tensor::stack(&terms, 0)?.sum_all()?)
    }

    /// Samples stream 1 autoregressively, then fills streams `2..=K` greedily.
    pub fn generate(&self, y: &[u32], prompt: Option<&TokenGrid>, rng: &mut ChaCha8Rng) -> Result<Generated> {
        self.check_phonemes(y)?;
        if let Some(p) = prompt {
            self.check_grid(p)?;
        }
        let mut stream: Vec<u32> = Vec::new();
        let mut truncated = true;
        while stream.len() < self.cfg.max_frames {
            let logits = self.ar_logits(&stream, y, prompt, None)?;
            let last = nn::to_vec_f64(&logits.get(stream.len())?)?;
            let next = self.pick(&last, stream.is_empty(), rng)?;
            if next == self.eos() {
                truncated = false;
                break;
            }
            stream.push(next);
        }
        let t = stream.len();
        let mut indices = Array2::<u32>::zeros((t, self.num_books));
        indices.column_mut(0).assign(&ndarray::Array1::from(stream));
        let mut grid = TokenGrid {
            indices,
            codec_hash: self.codec_hash,
        };
        for k in 1..self.num_books {
            let logits = nn::to_array2(&self.nar_logits(&grid, k, y, prompt, None)?)?;
            for (r, row) in logits.rows().into_iter().enumerate() {
                grid.indices[[r, k]] = argmax(row.as_slice().expect("contiguous row")) as u32;
            }
        }
        Ok(Generated { grid, truncated })
    }

    fn pick(&self, logits: &[f64], first: bool, rng: &mut ChaCha8Rng) -> Result<u32> {
        let mut l = logits.to_vec();
        if first {
            l[self.eos() as usize] = f64::NEG_INFINITY;
        }
        if self.cfg.temperature <= 1e-6 {
            return Ok(argmax(&l) as u32);
        }
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = l.iter().map(|x| ((x - max) / self.cfg.temperature).exp()).collect();
        let dist = WeightedIndex::new(&w).map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
        Ok(dist.sample(rng) as u32)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One training pair for the token LM.
#[derive(Debug, Clone)]
pub struct LmExample {
    pub phonemes: PhonemeSeq,
    pub grid: TokenGrid,
    pub prompt: Option<TokenGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LmStep {
    pub step: usize,
    pub ar: f64,
    pub nar: f64,
}

/// Full-batch AdamW on `ar_loss + nar_loss` with a cosine schedule.
pub fn train_lm(
    lm: &TokenLm,
    store: &ParamStore,
    data: &[LmExample],
    tc: &LmTrainConfig,
    mut on_step: impl FnMut(&LmStep),
) -> Result<Vec<LmStep>> {
    if data.is_empty() {
        return invalid("no training examples");
    }
    let mut opt = nn::AdamW::new(nn::AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut log = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut ar_sum: Option<Tensor> = None;
        let mut nar_sum: Option<Tensor> = None;
        for ex in data {
            let a = lm.ar_loss(&ex.grid, &ex.phonemes, ex.prompt.as_ref(), Some(&mut rng))?;
            let n = lm.nar_loss(&ex.grid, &ex.phonemes, ex.prompt.as_ref(), Some(&mut rng))?;
            ar_sum = Some(match ar_sum {
                Some(s) => (s + a)?,
                None => a,
            });
            nar_sum = Some(match nar_sum {
                Some(s) => (s + n)?,
                None => n,
            });
        }
        let scale = 1.0 / data.len() as f64;
        let ar = (ar_sum.expect("nonempty") * scale)?;
        let nar = (nar_sum.expect("nonempty") * scale)?;
        let total = (&ar + &nar)?;
        let rec = LmStep {
            step,
            ar: nn::scalar(&ar)?,
            nar: nn::scalar(&nar)?,
        };
        if !(rec.ar.is_finite() && rec.nar.is_finite()) {
            let term = if rec.ar.is_finite() { "nar" } else { "ar" };
            return Err(Error::Diverged {
                step,
                term: term.into(),
            });
        }
        let grads = total.backward()?;
        opt.step(store, &grads, nn::cosine_lr(tc.lr, step, tc.steps))?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Teacher-forced first-stream perplexity `exp(mean NLL)` over all positions.
pub fn ar_perplexity(lm: &TokenLm, data: &[LmExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in data {
        let nll = nn::to_vec_f64(&lm.ar_nll(&ex.grid, &ex.phonemes, ex.prompt.as_ref(), None)?)?;
        count += nll.len();
        total += nll.iter().sum::<f64>();
    }
    if count == 0 {
        return invalid("no examples");
    }
    Ok((total / count as f64).exp())
}

/// Fraction of first-stream positions reproduced by generation, counting
/// length differences as misses.
pub fn stream_match(reference: &[u32], generated: &[u32]) -> f64 {
    let n = reference.len().max(generated.len());
    if n == 0 {
        return 1.0;
    }
    let hits = reference.iter().zip(generated).filter(|(a, b)| a == b).count();
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> LmConfig {
        LmConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            ffn: 32,
            dropout: 0.0,
            ..LmConfig::toy()
        }
    }

    fn grid(t: usize, k: usize, v: u32, seed: u64) -> TokenGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenGrid {
            indices: Array2::from_shape_fn((t, k), |_| rng.gen_range(0..v)),
            codec_hash: 7,
        }
    }

    fn model(cfg: &LmConfig, dtype: DType) -> (ParamStore, TokenLm) {
        let mut store = ParamStore::new(dtype, 3);
        let lm = TokenLm::new(&mut store, cfg, 3, 8, 16, 7).unwrap();
        (store, lm)
    }

    #[test]
    fn config_validation() {
        assert!(LmConfig::toy().validate().is_ok());
        assert!(LmConfig::paper().validate().is_ok());
        let bad = LmConfig { heads: 3, ..LmConfig::toy() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_head_gives_uniform_nll() {
        let (store, lm) = model(&tiny_cfg(), DType::F64);
        store.zero_where(|n| n.starts_with("ar.head")).unwrap();
        let g = grid(5, 3, 8, 1);
        let loss = nn::scalar(&lm.ar_loss(&g, &[1, 2, 3], None, None).unwrap()).unwrap();
        assert!((loss - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn length_one_matches_softmax_oracle() {
        let (_store, lm) = model(&tiny_cfg(), DType::F64);
        let g = grid(1, 3, 8, 2);
        let logits = nn::to_array2(&lm.ar_logits(&g.stream(0), &[4], None, None).unwrap()).unwrap();
        let nll = nn::to_vec_f64(&lm.ar_nll(&g, &[4], None, None).unwrap()).unwrap();
        let targets = [g.indices[[0, 0]] as usize, lm.eos() as usize];
        for (r, &c) in targets.iter().enumerate() {
            let row = logits.row(r);
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            assert!((nll[r] - (lse - row[c])).abs() < 1e-10);
        }
    }

    #[test]
    fn ar_is_causal() {
        let (_store, lm) = model(&tiny_cfg(), DType::F64);
        let g = grid(8, 3, 8, 3);
        let base = nn::to_vec_f64(&lm.ar_nll(&g, &[1, 2], None, None).unwrap()).unwrap();
        let mut h = g.clone();
        h.indices[[5, 0]] = (h.indices[[5, 0]] + 1) % 8;
        h.indices[[7, 0]] = (h.indices[[7, 0]] + 3) % 8;
        let pert = nn::to_vec_f64(&lm.ar_nll(&h, &[1, 2], None, None).unwrap()).unwrap();
        assert_eq!(base[..5], pert[..5]);
        assert_ne!(base[6..], pert[6..]);
    }

    #[test]
    fn nar_ignores_later_streams() {
        let (_store, lm) = model(&tiny_cfg(), DType::F64);
        let g = grid(6, 3, 8, 4);
        let base = nn::to_vec_f64(&lm.nar_logits(&g, 1, &[3], None, None).unwrap()).unwrap();
        let mut h = g.clone();
        for t in 0..6 {
            h.indices[[t, 1]] = (h.indices[[t, 1]] + 1) % 8;
            h.indices[[t, 2]] = (h.indices[[t, 2]] + 5) % 8;
        }
        let pert = nn::to_vec_f64(&lm.nar_logits(&h, 1, &[3], None, None).unwrap()).unwrap();
        assert_eq!(base, pert);
        let mut h = g.clone();
        h.indices[[2, 0]] = (h.indices[[2, 0]] + 1) % 8;
        let moved = nn::to_vec_f64(&lm.nar_logits(&h, 1, &[3], None, None).unwrap()).unwrap();
        assert_ne!(base, moved);
    }

    #[test]
    fn nar_matches_per_stream_oracle() {
        let (_store, lm) = model(&tiny_cfg(), DType::F64);
        let g = grid(4, 3, 8, 5);
        let prompt = grid(3, 3, 8, 6);
        let loss = nn::scalar(&lm.nar_loss(&g, &[0, 9], Some(&prompt), None).unwrap()).unwrap();
        let mut oracle = 0.0;
        for k in 1..3 {
            let logits = nn::to_array2(&lm.nar_logits(&g, k, &[0, 9], Some(&prompt), None).unwrap()).unwrap();
            let mut s = 0.0;
            for t in 0..4 {
                let row = logits.row(t);
                let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
                s += lse - row[g.indices[[t, k]] as usize];
            }
            oracle += s / 4.0;
        }
        assert!((loss - oracle).abs() < 1e-8);
    }

    #[test]
    fn two_streams_give_one_nar_term() {
        let mut store = ParamStore::new(DType::F64, 0);
        let lm = TokenLm::new(&mut store, &tiny_cfg(), 2, 8, 16, 7).unwrap();
        let g = grid(4, 2, 8, 7);
        assert_eq!(lm.nar_terms(&g, &[1], None, None).unwrap().len(), 1);
        assert!(TokenLm::new(&mut ParamStore::new(DType::F64, 0), &tiny_cfg(), 1, 8, 16, 7).is_err());
    }

    #[test]
    fn positions_matter_unless_disabled() {
        let perm = |g: &TokenGrid| {
            let mut h = g.clone();
            for t in 0..g.frames() {
                h.indices.row_mut(t).assign(&g.indices.row(g.frames() - 1 - t));
            }
            h
        };
        let g = grid(6, 3, 8, 8);
        let (_s, lm) = model(&tiny_cfg(), DType::F64);
        let a = nn::scalar(&lm.nar_loss(&g, &[2], None, None).unwrap()).unwrap();
        let b = nn::scalar(&lm.nar_loss(&perm(&g), &[2], None, None).unwrap()).unwrap();
        assert!((a - b).abs() > 1e-9);
        let cfg = LmConfig {
            positional: false,
            ..tiny_cfg()
        };
        let (_s, lm) = model(&cfg, DType::F64);
        let a = nn::scalar(&lm.nar_loss(&g, &[2], None, None).unwrap()).unwrap();
        let b = nn::scalar(&lm.nar_loss(&perm(&g), &[2], None, None).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (_s, lm) = model(&tiny_cfg(), DType::F64);
        let empty = TokenGrid {
            indices: Array2::zeros((0, 3)),
            codec_hash: 7,
        };
        assert!(lm.ar_loss(&empty, &[1], None, None).is_err());
        assert!(lm.ar_loss(&grid(3, 3, 8, 1), &[], None, None).is_err());
        let mut other = grid(3, 3, 8, 1);
        other.codec_hash = 8;
        assert!(matches!(lm.ar_loss(&other, &[1], None, None), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn greedy_limit_and_seeded_sampling() {
        let cfg = LmConfig {
            max_frames: 6,
            temperature: 1e-9,
            ..tiny_cfg()
        };
        let (_s, lm) = model(&cfg, DType::F32);
        let a = lm.generate(&[1, 2], None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = lm.generate(&[1, 2], None, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a.grid, b.grid);
        let mut stream = Vec::new();
        for _ in 0..a.grid.frames() {
            let l = nn::to_vec_f64(&lm.ar_logits(&stream, &[1, 2], None, None).unwrap().get(stream.len()).unwrap()).unwrap();
            let mut l = l.clone();
            if stream.is_empty() {
                l[lm.eos() as usize] = f64::NEG_INFINITY;
            }
            stream.push(argmax(&l) as u32);
        }
        assert_eq!(a.grid.stream(0), stream);

        let cfg = LmConfig {
            max_frames: 6,
            temperature: 1.0,
            ..tiny_cfg()
        };
        let (_s, lm) = model(&cfg, DType::F32);
        let a = lm.generate(&[3], None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = lm.generate(&[3], None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.truncated, b.truncated);
        assert!(a.grid.frames() <= 6);
        if a.grid.frames() == 6 {
            assert!(a.truncated);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let (store, lm) = model(&tiny_cfg(), DType::F32);
        let data: Vec<LmExample> = (0..2)
            .map(|i| LmExample {
                phonemes: vec![i as u32, 5],
                grid: grid(5, 3, 8, 10 + i),
                prompt: None,
            })
            .collect();
        let tc = LmTrainConfig {
            steps: 60,
            lr: 3e-3,
            seed: 0,
        };
        let log = train_lm(&lm, &store, &data, &tc, |_| {}).unwrap();
        assert!(log.last().unwrap().ar < 0.5 * log[0].ar);
        assert!(log.last().unwrap().nar < 0.5 * log[0].nar);
    }
}
