//! Residual vector quantizer with EMA codebooks, dead-code revival and
//! straight-through gradients.
//!
//! Nearest-neighbour search runs on the host in `f64` with strict `<`, so ties
//! resolve to the lowest index. The differentiable outputs are built as
//! `q + (r - r.detach())`, which has the value of `q` and the Jacobian of `r`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{LatentKind, LatentSequence};
use crate::error::{invalid, shape, Error, Result};
use crate::io::stable_hash;
use crate::nn;

pub const EMA_DECAY: f64 = 0.99;
pub const LAPLACE_EPS: f64 = 1e-5;
pub const TOKEN_GRID_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RvqConfig {
    pub num_books: usize,
    pub codebook_size: usize,
    pub dim: usize,
}

impl RvqConfig {
    pub fn toy() -> Self {
        Self {
            num_books: 8,
            codebook_size: 64,
            dim: 64,
        }
    }

    pub fn paper() -> Self {
        Self {
            num_books: 8,
            codebook_size: 1024,
            dim: 1024,
        }
    }

    pub fn hash(&self) -> u64 {
        stable_hash(format!("rvq/{}/{}/{}", self.num_books, self.codebook_size, self.dim).as_bytes())
    }
}

/// Kilobits per second for `books` streams of `log2(size)`-bit tokens.
pub fn bitrate_kbps(frame_rate: f64, books: usize, codebook_size: usize) -> f64 {
    frame_rate * books as f64 * (codebook_size as f64).log2() / 1000.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub embeddings: Array2<f64>,
    pub ema_counts: Vec<f64>,
    pub ema_sums: Array2<f64>,
}

impl Codebook {
    pub fn zeros(size: usize, dim: usize) -> Self {
        Self {
            embeddings: Array2::zeros((size, dim)),
            ema_counts: vec![0.0; size],
            ema_sums: Array2::zeros((size, dim)),
        }
    }

    pub fn from_embeddings(embeddings: Array2<f64>) -> Self {
        let (size, dim) = embeddings.dim();
        Self {
            embeddings,
            ema_counts: vec![0.0; size],
            ema_sums: Array2::zeros((size, dim)),
        }
    }

    pub fn size(&self) -> usize {
        self.embeddings.nrows()
    }

    /// Index of the closest entry; the first one wins ties.
    pub fn nearest(&self, x: ArrayView1<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, e) in self.embeddings.rows().into_iter().enumerate() {
            let d: f64 = e.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Laplace-smoothed counts: `(c_i + ε) / (n + size·ε) · n`.
    fn smoothed_counts(&self, eps: f64) -> Vec<f64> {
        let n: f64 = self.ema_counts.iter().sum();
        let denom = n + self.size() as f64 * eps;
        self.ema_counts.iter().map(|c| (c + eps) / denom * n).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqState {
    pub config: RvqConfig,
    pub books: Vec<Codebook>,
    /// Assignment histogram per book, accumulated by `ema_update`.
    pub usage: Vec<Vec<u64>>,
    pub decay: f64,
    pub eps: f64,
    /// Hash stamped on every token grid this state produces.
    pub model_hash: u64,
}

impl RvqState {
    /// Gaussian-initialised codebooks with zero EMA statistics.
    pub fn new(config: RvqConfig, seed: u64) -> Result<Self> {
        if config.num_books == 0 || config.codebook_size == 0 || config.dim == 0 {
            return invalid("rvq needs at least one book, one entry and one dimension");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (config.dim as f64).sqrt();
        let books = (0..config.num_books)
            .map(|_| {
                Codebook::from_embeddings(Array2::from_shape_simple_fn(
                    (config.codebook_size, config.dim),
                    || {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    },
                ))
            })
            .collect();
        Ok(Self::from_books(config, books))
    }

    pub fn from_books(config: RvqConfig, books: Vec<Codebook>) -> Self {
        Self {
            usage: vec![vec![0; config.codebook_size]; books.len()],
            config,
            books,
            decay: EMA_DECAY,
            eps: LAPLACE_EPS,
            model_hash: config.hash(),
        }
    }

    pub fn num_books(&self) -> usize {
        self.books.len()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn bitrate(&self, frame_rate: f64) -> f64 {
        bitrate_kbps(frame_rate, self.num_books(), self.config.codebook_size)
    }

    /// Greedy residual assignment of `z` (rows are vectors) on the host.
    pub fn assign(&self, z: &Array2<f64>, k_active: usize) -> Result<Assignments> {
        if k_active < 1 || k_active > self.num_books() {
            return invalid(format!("k_active {k_active} outside 1..={}", self.num_books()));
        }
        if z.ncols() != self.dim() {
            return shape(format!("latent dim {} vs codebook dim {}", z.ncols(), self.dim()));
        }
        let mut residual = z.clone();
        let mut layers = Vec::with_capacity(k_active);
        for book in &self.books[..k_active] {
            let idx: Vec<u32> = residual
                .rows()
                .into_iter()
                .map(|r| book.nearest(r) as u32)
                .collect();
            let input = residual.clone();
            for (mut r, &i) in residual.rows_mut().into_iter().zip(&idx) {
                r -= &book.embeddings.row(i as usize);
            }
            layers.push(LayerAssignment { indices: idx, inputs: input });
        }
        Ok(Assignments { layers })
    }

    /// Exponential moving average of per-entry counts and vector sums, then
    /// smoothed re-estimation of every embedding in the touched books.
    pub fn ema_update(&mut self, a: &Assignments) {
        let (decay, eps) = (self.decay, self.eps);
        for (j, layer) in a.layers.iter().enumerate() {
            if layer.indices.is_empty() {
                continue;
            }
            let book = &mut self.books[j];
            let mut counts = vec![0.0; book.size()];
            let mut sums = Array2::<f64>::zeros(book.embeddings.dim());
            for (&i, v) in layer.indices.iter().zip(layer.inputs.rows()) {
                counts[i as usize] += 1.0;
                let mut row = sums.row_mut(i as usize);
                row += &v;
                self.usage[j][i as usize] += 1;
            }
            for (c, b) in book.ema_counts.iter_mut().zip(&counts) {
                *c = decay * *c + (1.0 - decay) * b;
            }
            book.ema_sums.zip_mut_with(&sums, |s, b| *s = decay * *s + (1.0 - decay) * b);
            let smoothed = book.smoothed_counts(eps);
            for (i, mut e) in book.embeddings.rows_mut().into_iter().enumerate() {
                let n = smoothed[i];
                e.assign(&book.ema_sums.row(i).mapv(|s| s / n));
            }
        }
    }

    /// Replaces every entry of book `j` whose EMA count is below `threshold`
    /// with a uniformly drawn row of `batches[j]`. Books without a batch are skipped.
    /// Returns the number of revived entries.
    pub fn revive_dead(&mut self, batches: &[&Array2<f64>], threshold: f64, rng: &mut ChaCha8Rng) -> usize {
        let mut revived = 0;
        for (book, batch) in self.books.iter_mut().zip(batches) {
            if batch.nrows() == 0 {
                continue;
            }
            for i in 0..book.size() {
                if book.ema_counts[i] < threshold {
                    let v = batch.row(rng.gen_range(0..batch.nrows()));
                    book.embeddings.row_mut(i).assign(&v);
                    book.ema_sums.row_mut(i).assign(&v);
                    book.ema_counts[i] = 1.0;
                    revived += 1;
                }
            }
        }
        revived
    }

    /// Embedding rows for one book as a constant tensor.
    fn gather(&self, book: usize, idx: &[u32], dtype: DType) -> Result<Tensor> {
        let e = &self.books[book].embeddings;
        let mut data = Vec::with_capacity(idx.len() * self.dim());
        for &i in idx {
            data.extend(e.row(i as usize).iter());
        }
        nn::from_f64(data, &[idx.len(), self.dim()], dtype)
    }

    /// Quantizes `z` of shape `(N, D)` or `(B, T, D)`.
    pub fn quantize_tensor(&self, z: &Tensor, k_active: usize) -> Result<QuantizeOut> {
        let dims = z.dims().to_vec();
        let d = *dims.last().unwrap_or(&0);
        let n = z.elem_count() / d.max(1);
        let flat = z.reshape((n, d))?;
        let host = nn::to_array2(&flat)?;
        let assignments = self.assign(&host, k_active)?;
        let mut layers = Vec::with_capacity(k_active);
        let mut residuals = Vec::with_capacity(k_active);
        let mut r = flat.clone();
        let mut sum: Option<Tensor> = None;
        for (j, a) in assignments.layers.iter().enumerate() {
            let q = self.gather(j, &a.indices, z.dtype())?;
            let st = (&q + (&r - r.detach())?)?;
            layers.push(st.reshape(dims.as_slice())?);
            residuals.push((r.reshape(dims.as_slice())?, q.reshape(dims.as_slice())?));
            sum = Some(match sum {
                Some(s) => (s + &q)?,
                None => q.clone(),
            });
            r = (r - q)?;
        }
        let qsum = sum.expect("k_active >= 1");
        let quantized = (qsum + (&flat - flat.detach())?)?.reshape(dims.as_slice())?;
        let indices = Array2::from_shape_fn((n, k_active), |(t, k)| assignments.layers[k].indices[t]);
        Ok(QuantizeOut {
            indices,
            layers,
            quantized,
            residuals,
            assignments,
        })
    }

    /// Token grid plus differentiable outputs for one latent sequence.
    pub fn quantize(&self, latents: &LatentSequence, k_active: usize, dtype: DType) -> Result<(TokenGrid, QuantizeOut)> {
        let z = nn::from_array2(&latents.values, dtype)?;
        let out = self.quantize_tensor(&z, k_active)?;
        let grid = TokenGrid {
            indices: out.indices.clone(),
            codec_hash: self.model_hash,
        };
        Ok((grid, out))
    }

    /// Sum of the indexed embeddings across the grid's layers.
    pub fn dequantize(&self, grid: &TokenGrid, frame_rate: f64) -> Result<LatentSequence> {
        if grid.codec_hash != self.model_hash {
            return Err(Error::HashMismatch {
                expected: self.model_hash,
                found: grid.codec_hash,
            });
        }
        let (t, k) = grid.indices.dim();
        if k > self.num_books() {
            return invalid(format!("grid has {k} layers, quantizer has {}", self.num_books()));
        }
        if let Some(bad) = grid.indices.iter().find(|&&i| i as usize >= self.config.codebook_size) {
            return invalid(format!("token {bad} outside codebook of {}", self.config.codebook_size));
        }
        let mut values = Array2::zeros((t, self.dim()));
        for j in 0..k {
            for (mut row, &i) in values.rows_mut().into_iter().zip(grid.indices.column(j)) {
                row += &self.books[j].embeddings.row(i as usize);
            }
        }
        Ok(LatentSequence {
            values,
            frame_rate,
            kind: LatentKind::Quantized(k),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAssignment {
    pub indices: Vec<u32>,
    /// Residual vectors that entered this layer.
    pub inputs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignments {
    pub layers: Vec<LayerAssignment>,
}

impl Assignments {
    /// Keeps only the rows selected by `mask` (e.g. valid frames of a padded batch).
    pub fn select_rows(&self, mask: &[bool]) -> Self {
        let keep: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerAssignment {
                    indices: keep.iter().map(|&i| l.indices[i]).collect(),
                    inputs: l.inputs.select(Axis(0), &keep),
                })
                .collect(),
        }
    }

    /// Concatenates assignments gathered from several calls.
    pub fn concat(parts: &[Assignments]) -> Self {
        let k = parts.iter().map(|p| p.layers.len()).min().unwrap_or(0);
        let layers = (0..k)
            .map(|j| {
                let views: Vec<_> = parts.iter().map(|p| p.layers[j].inputs.view()).collect();
                LayerAssignment {
                    indices: parts.iter().flat_map(|p| p.layers[j].indices.iter().copied()).collect(),
                    inputs: ndarray::concatenate(Axis(0), &views).expect("equal widths"),
                }
            })
            .collect();
        Self { layers }
    }
}

pub struct QuantizeOut {
    /// `N × k_active` indices, row-major over the flattened input.
    pub indices: Array2<u32>,
    /// Straight-through per-layer embeddings `Q^(k)`, shaped like the input.
    pub layers: Vec<Tensor>,
    /// Straight-through sum of all active layers.
    pub quantized: Tensor,
    /// `(residual entering layer j, selected embedding)` per layer.
    pub residuals: Vec<(Tensor, Tensor)>,
    pub assignments: Assignments,
}

/// `T' × K` codebook indices and the hash of the producing model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub indices: Array2<u32>,
    pub codec_hash: u64,
}

impl TokenGrid {
    pub fn frames(&self) -> usize {
        self.indices.nrows()
    }

    pub fn layers(&self) -> usize {
        self.indices.ncols()
    }

    pub fn stream(&self, k: usize) -> Vec<u32> {
        self.indices.column(k).to_vec()
    }

    /// Header `RVQT`, version, T', K (little-endian `u32`), then `u16` indices
    /// row-major, then the 8-byte codec hash.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"RVQT")?;
        for v in [TOKEN_GRID_VERSION, self.frames() as u32, self.layers() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &i in self.indices.iter() {
            let i = u16::try_from(i).map_err(|_| Error::InvalidInput(format!("token {i} exceeds u16")))?;
            w.write_all(&i.to_le_bytes())?;
        }
        w.write_all(&self.codec_hash.to_le_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != b"RVQT" {
            return Err(bad("missing RVQT magic"));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != TOKEN_GRID_VERSION {
            return Err(bad("unsupported token grid version"));
        }
        let (t, k) = (word(8) as usize, word(12) as usize);
        let mut raw = vec![0u8; t * k * 2];
        r.read_exact(&mut raw)?;
        let idx: Vec<u32> = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
            .collect();
        let mut hash = [0u8; 8];
        r.read_exact(&mut hash)?;
        Ok(Self {
            indices: Array2::from_shape_vec((t, k), idx).expect("t*k indices"),
            codec_hash: u64::from_le_bytes(hash),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    fn cfg(k: usize, size: usize, dim: usize) -> RvqConfig {
        RvqConfig {
            num_books: k,
            codebook_size: size,
            dim,
        }
    }

    fn seq(values: Array2<f64>) -> LatentSequence {
        LatentSequence {
            values,
            frame_rate: 50.0,
            kind: LatentKind::Encoder,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn bitrate_examples() {
        assert_eq!(bitrate_kbps(50.0, 8, 1024), 4.0);
        assert_eq!(bitrate_kbps(50.0, 1, 1024), 0.5);
        assert_eq!(bitrate_kbps(50.0, 8, 1), 0.0);
    }

    #[test]
    fn exact_entry_gives_zero_residual() {
        let s = RvqState::new(cfg(2, 8, 4), 0).unwrap();
        let z = s.books[0].embeddings.select(Axis(0), &[5, 5, 2]);
        let (grid, out) = s.quantize(&seq(z.clone()), 1, DType::F64).unwrap();
        assert_eq!(grid.stream(0), vec![5, 5, 2]);
        let (r, q) = &out.residuals[0];
        let diff = nn::to_vec_f64(&(r - q).unwrap()).unwrap();
        assert!(diff.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut e = Array2::zeros((4, 2));
        e.row_mut(1).assign(&ndarray::arr1(&[1.0, 0.0]));
        e.row_mut(3).assign(&ndarray::arr1(&[-1.0, 0.0]));
        let book = Codebook::from_embeddings(e);
        assert_eq!(book.nearest(ndarray::arr1(&[0.0, 0.0]).view()), 0);
        assert_eq!(book.nearest(ndarray::arr1(&[0.0, 5.0]).view()), 0);
        // equidistant from entries 1 and 3 but closer than 0 is impossible; tie 1 vs 3
        let mut e2 = Array2::zeros((3, 1));
        e2[[0, 0]] = 5.0;
        e2[[1, 0]] = 1.0;
        e2[[2, 0]] = -1.0;
        assert_eq!(Codebook::from_embeddings(e2).nearest(ndarray::arr1(&[0.0]).view()), 1);
    }

    #[test]
    fn k_active_zero_is_rejected() {
        let s = RvqState::new(cfg(2, 4, 3), 0).unwrap();
        assert!(s.quantize(&seq(random(2, 3, 0)), 0, DType::F64).is_err());
        assert!(s.quantize(&seq(random(2, 3, 0)), 3, DType::F64).is_err());
    }

    #[test]
    fn residuals_telescope_exactly() {
        let s = RvqState::new(cfg(4, 16, 3), 1).unwrap();
        let z = random(10, 3, 2);
        let a = s.assign(&z, 4).unwrap();
        let mut acc = z.clone();
        for (j, layer) in a.layers.iter().enumerate() {
            assert_eq!(layer.inputs, acc);
            for (mut r, &i) in acc.rows_mut().into_iter().zip(&layer.indices) {
                r -= &s.books[j].embeddings.row(i as usize);
            }
        }
    }

    #[test]
    fn dequantize_matches_straight_through_value() {
        let s = RvqState::new(cfg(3, 16, 4), 3).unwrap();
        let (grid, out) = s.quantize(&seq(random(7, 4, 4)), 3, DType::F64).unwrap();
        let back = s.dequantize(&grid, 50.0).unwrap();
        assert_eq!(back.values, nn::to_array2(&out.quantized).unwrap());
        assert_eq!(back.kind, LatentKind::Quantized(3));
        let layer_sum = out
            .layers
            .iter()
            .map(|l| nn::to_array2(l).unwrap())
            .fold(Array2::<f64>::zeros((7, 4)), |a, b| a + b);
        for (a, b) in layer_sum.iter().zip(back.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dequantize_edge_cases() {
        let s = RvqState::from_books(cfg(1, 4, 3), vec![Codebook::zeros(4, 3)]);
        let grid = TokenGrid {
            indices: Array2::from_elem((5, 1), 2),
            codec_hash: s.model_hash,
        };
        assert!(s.dequantize(&grid, 50.0).unwrap().values.iter().all(|v| *v == 0.0));

        let s = RvqState::new(cfg(1, 4, 3), 9).unwrap();
        let grid = TokenGrid {
            indices: Array2::from_elem((5, 1), 2),
            codec_hash: s.model_hash,
        };
        let out = s.dequantize(&grid, 50.0).unwrap();
        for r in out.values.rows() {
            assert_eq!(r, s.books[0].embeddings.row(2));
        }
        let oob = TokenGrid {
            indices: Array2::from_elem((1, 1), 4),
            codec_hash: s.model_hash,
        };
        assert!(s.dequantize(&oob, 50.0).is_err());
        let foreign = TokenGrid {
            indices: Array2::zeros((1, 1)),
            codec_hash: s.model_hash ^ 1,
        };
        assert!(matches!(s.dequantize(&foreign, 50.0), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn single_layer_quantization_is_idempotent() {
        let s = RvqState::new(cfg(1, 32, 4), 5).unwrap();
        let (g1, _) = s.quantize(&seq(random(12, 4, 6)), 1, DType::F64).unwrap();
        let once = s.dequantize(&g1, 50.0).unwrap();
        let (g2, _) = s.quantize(&once, 1, DType::F64).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn ema_first_step_recovers_vector() {
        let mut s = RvqState::from_books(cfg(1, 4, 2), vec![Codebook::zeros(4, 2)]);
        let v = ndarray::arr2(&[[0.3, -0.7]]);
        let a = Assignments {
            layers: vec![LayerAssignment {
                indices: vec![1],
                inputs: v.clone(),
            }],
        };
        s.ema_update(&a);
        let b = &s.books[0];
        assert!((b.ema_counts[1] - 0.01).abs() < 1e-15);
        // closed form: n = 0.01, smoothed = (0.01 + ε)/(0.01 + 4ε)·0.01
        let eps = LAPLACE_EPS;
        let smoothed = (0.01 + eps) / (0.01 + 4.0 * eps) * 0.01;
        for j in 0..2 {
            let expect = 0.01 * v[[0, j]] / smoothed;
            assert!((b.embeddings[[1, j]] - expect).abs() < 1e-12);
            assert!((b.embeddings[[1, j]] - v[[0, j]]).abs() < 1e-2);
        }
    }

    #[test]
    fn unassigned_entry_only_drifts_by_smoothing() {
        let mut s = RvqState::new(cfg(1, 4, 2), 7).unwrap();
        for b in &mut s.books {
            b.ema_counts = vec![5.0; 4];
            b.ema_sums = &b.embeddings * 5.0;
        }
        let before = s.books[0].embeddings.row(3).to_owned();
        let a = Assignments {
            layers: vec![LayerAssignment {
                indices: vec![0, 1, 2],
                inputs: random(3, 2, 8),
            }],
        };
        s.ema_update(&a);
        let after = s.books[0].embeddings.row(3).to_owned();
        // counts and sums decay together, so only the smoothing ratio moves the entry
        let c = &s.books[0].ema_counts;
        let n: f64 = c.iter().sum();
        let ratio = c[3] / ((c[3] + LAPLACE_EPS) / (n + 4.0 * LAPLACE_EPS) * n);
        for j in 0..2 {
            assert!((after[j] - before[j] * ratio).abs() < 1e-12);
            assert!((after[j] - before[j]).abs() < 1e-4);
        }
    }

    #[test]
    fn repeated_batches_move_towards_mean() {
        let mut s = RvqState::new(cfg(1, 2, 2), 11).unwrap();
        let batch = ndarray::arr2(&[[1.0, 1.0], [3.0, 1.0]]);
        let a = Assignments {
            layers: vec![LayerAssignment {
                indices: vec![0, 0],
                inputs: batch,
            }],
        };
        s.revive_dead(&[&ndarray::arr2(&[[-2.0, 5.0]])], 0.5, &mut ChaCha8Rng::seed_from_u64(0));
        let target = ndarray::arr1(&[2.0, 1.0]);
        let mut last = f64::INFINITY;
        for _ in 0..2 {
            s.ema_update(&a);
            let d = (&s.books[0].embeddings.row(0) - &target).mapv(|x| x * x).sum();
            assert!(d < last);
            last = d;
        }
    }

    #[test]
    fn revive_edge_cases() {
        let mut s = RvqState::new(cfg(1, 6, 3), 12).unwrap();
        for b in &mut s.books {
            b.ema_counts = vec![2.0; 6];
        }
        let before = s.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(s.revive_dead(&[&random(4, 3, 1)], 1.0, &mut rng), 0);
        assert_eq!(s, before);

        let mut s = RvqState::new(cfg(1, 6, 3), 12).unwrap();
        let v = ndarray::arr2(&[[0.5, -0.5, 0.25]]);
        assert_eq!(s.revive_dead(&[&v], 0.1, &mut rng), 6);
        for r in s.books[0].embeddings.rows() {
            assert_eq!(r, v.row(0));
        }
        assert!(s.books[0].ema_counts.iter().all(|c| *c >= 0.1));

        let batch = random(10, 3, 2);
        let mut a = RvqState::new(cfg(1, 6, 3), 12).unwrap();
        let mut b = a.clone();
        a.revive_dead(&[&batch], 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        b.revive_dead(&[&batch], 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let s = RvqState::new(cfg(3, 8, 4), 13).unwrap();
        let z = Var::from_tensor(&nn::from_array2(&random(5, 4, 14), DType::F64).unwrap()).unwrap();
        let out = s.quantize_tensor(z.as_tensor(), 3).unwrap();
        let w = nn::from_array2(&random(5, 4, 15), DType::F64).unwrap();
        let loss = (out.quantized.sqr().unwrap() * &w).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let gz = nn::to_array2(g.get(z.as_tensor()).unwrap()).unwrap();
        let q = nn::to_array2(&out.quantized).unwrap();
        let expect = q * 2.0 * nn::to_array2(&w).unwrap();
        for (a, b) in gz.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn token_grid_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.rvqt");
        let grid = TokenGrid {
            indices: Array2::from_shape_fn((6, 3), |(t, k)| (t * 100 + k) as u32),
            codec_hash: 0xDEAD_BEEF,
        };
        grid.write(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 16 + 6 * 3 * 2 + 8);
        assert_eq!(&bytes[..4], b"RVQT");
        assert_eq!(TokenGrid::read(&p).unwrap(), grid);
    }
}
