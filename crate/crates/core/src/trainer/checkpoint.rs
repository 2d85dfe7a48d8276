//! Single-file checkpoints: magic `AFCK`, a `u32` version, a `u64` header
//! length, a JSON header, then every tensor as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{CodecModel, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::nn::{self, AdamW, ParamStore};
use crate::rvq::RvqState;

pub const MAGIC: &[u8; 4] = b"AFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: String,
    config_hash: u64,
    step: usize,
    total_steps: usize,
    revive_threshold: f64,
    g_opt_step: u64,
    d_opt_step: u64,
    gate_rng_pos: String,
    revive_rng_pos: String,
    usage: Vec<Vec<u64>>,
    tensors: Vec<Entry>,
}

/// Everything needed to resume training or run the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub total_steps: usize,
    pub revive_threshold: f64,
    pub g_opt_step: u64,
    pub d_opt_step: u64,
    pub gate_rng_pos: u128,
    pub revive_rng_pos: u128,
    pub usage: Vec<Vec<u64>>,
    /// Named tensors as `(shape, values)`.
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn put(map: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>, name: String, t: &Tensor) -> Result<()> {
    map.insert(name, (t.dims().to_vec(), nn::to_vec_f64(t)?));
    Ok(())
}

fn put_store(map: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>, prefix: &str, store: &ParamStore) -> Result<()> {
    for (name, var) in store.iter() {
        put(map, format!("{prefix}/{name}"), var.as_tensor())?;
    }
    Ok(())
}

fn put_opt(map: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>, prefix: &str, opt: &AdamW) -> Result<()> {
    for (name, m, v) in opt.state().1 {
        put(map, format!("{prefix}/m/{name}"), &m)?;
        put(map, format!("{prefix}/v/{name}"), &v)?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn capture(tr: &Trainer) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        put_store(&mut tensors, "gen", &tr.model.gen)?;
        put_store(&mut tensors, "disc", &tr.disc_store)?;
        put_opt(&mut tensors, "gopt", &tr.g_opt)?;
        put_opt(&mut tensors, "dopt", &tr.d_opt)?;
        for (k, book) in tr.model.rvq.books.iter().enumerate() {
            let e = &book.embeddings;
            tensors.insert(format!("rvq/{k}/embeddings"), (vec![e.nrows(), e.ncols()], e.iter().copied().collect()));
            tensors.insert(format!("rvq/{k}/ema_sums"), (vec![e.nrows(), e.ncols()], book.ema_sums.iter().copied().collect()));
            tensors.insert(format!("rvq/{k}/ema_counts"), (vec![e.nrows()], book.ema_counts.clone()));
        }
        Ok(Self {
            config: tr.model.cfg.clone(),
            step: tr.step,
            total_steps: tr.total_steps,
            revive_threshold: tr.revive_threshold,
            g_opt_step: tr.g_opt.steps_taken(),
            d_opt_step: tr.d_opt.steps_taken(),
            gate_rng_pos: tr.gate_rng.get_word_pos(),
            revive_rng_pos: tr.revive_rng.get_word_pos(),
            usage: tr.model.rvq.usage.clone(),
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: VERSION,
            config: self.config.to_text(),
            config_hash: self.config.hash(),
            step: self.step,
            total_steps: self.total_steps,
            revive_threshold: self.revive_threshold,
            g_opt_step: self.g_opt_step,
            d_opt_step: self.d_opt_step,
            gate_rng_pos: self.gate_rng_pos.to_string(),
            revive_rng_pos: self.revive_rng_pos.to_string(),
            usage: self.usage.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, (shape, _))| Entry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, values) in self.tensors.values() {
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|_| bad("truncated header".into()))?;
        if &head[..4] != MAGIC {
            return Err(bad("missing AFCK magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header".into()))?;
        let h: Header = serde_json::from_slice(&json)?;
        let config = TrainConfig::parse_str(&h.config)?;
        if config.hash() != h.config_hash {
            return Err(Error::HashMismatch {
                expected: h.config_hash,
                found: config.hash(),
            });
        }
        let mut tensors = BTreeMap::new();
        let mut buf = [0u8; 8];
        for e in h.tensors {
            let n: usize = e.shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(|_| bad(format!("truncated tensor `{}`", e.name)))?;
                values.push(f64::from_le_bytes(buf));
            }
            tensors.insert(e.name, (e.shape, values));
        }
        if r.read(&mut buf)? != 0 {
            return Err(bad("trailing bytes".into()));
        }
        let pos = |s: &str| s.parse::<u128>().map_err(|_| bad("bad rng position".into()));
        Ok(Self {
            config,
            step: h.step,
            total_steps: h.total_steps,
            revive_threshold: h.revive_threshold,
            g_opt_step: h.g_opt_step,
            d_opt_step: h.d_opt_step,
            gate_rng_pos: pos(&h.gate_rng_pos)?,
            revive_rng_pos: pos(&h.revive_rng_pos)?,
            usage: h.usage,
            tensors,
        })
    }

    fn tensor(&self, name: &str, dtype: candle_core::DType) -> Result<Tensor> {
        let (shape, values) = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks `{name}`")))?;
        nn::from_f64(values.clone(), shape, dtype)
    }

    fn fill_store(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, _) in store.iter() {
            store.set(name, &self.tensor(&format!("{prefix}/{name}"), store.dtype())?)?;
        }
        Ok(())
    }

    fn opt_state(&self, prefix: &str, dtype: candle_core::DType) -> Result<Vec<(String, Tensor, Tensor)>> {
        let m_prefix = format!("{prefix}/m/");
        self.tensors
            .keys()
            .filter_map(|k| k.strip_prefix(&m_prefix))
            .map(|name| {
                Ok((
                    name.to_string(),
                    self.tensor(&format!("{prefix}/m/{name}"), dtype)?,
                    self.tensor(&format!("{prefix}/v/{name}"), dtype)?,
                ))
            })
            .collect()
    }

    fn rvq_state(&self, model: &CodecModel) -> Result<RvqState> {
        let mut rvq = model.rvq.clone();
        for (k, book) in rvq.books.iter_mut().enumerate() {
            let get = |what: &str| {
                self.tensors
                    .get(&format!("rvq/{k}/{what}"))
                    .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks codebook {k} {what}")))
            };
            let (shape, e) = get("embeddings")?;
            book.embeddings = Array2::from_shape_vec((shape[0], shape[1]), e.clone()).map_err(|e| Error::Shape(e.to_string()))?;
            let (_, s) = get("ema_sums")?;
            book.ema_sums = Array2::from_shape_vec((shape[0], shape[1]), s.clone()).map_err(|e| Error::Shape(e.to_string()))?;
            book.ema_counts = get("ema_counts")?.1.clone();
        }
        rvq.usage = self.usage.clone();
        Ok(rvq)
    }

    /// Generator-only model for encoding, decoding and evaluation.
    pub fn model(&self) -> Result<CodecModel> {
        let mut model = CodecModel::new(&self.config)?;
        self.fill_store("gen", &model.gen)?;
        model.rvq = self.rvq_state(&model)?;
        Ok(model)
    }

    /// Full training state, ready to continue.
    pub fn restore(&self) -> Result<Trainer> {
        let mut tr = Trainer::new(&self.config, 1)?;
        tr.model = self.model()?;
        self.fill_store("disc", &tr.disc_store)?;
        let dtype = tr.model.dtype;
        tr.g_opt.load_state(self.g_opt_step, self.opt_state("gopt", dtype)?);
        tr.d_opt.load_state(self.d_opt_step, self.opt_state("dopt", dtype)?);
        tr.step = self.step;
        tr.total_steps = self.total_steps;
        tr.revive_threshold = self.revive_threshold;
        tr.gate_rng.set_word_pos(self.gate_rng_pos);
        tr.revive_rng.set_word_pos(self.revive_rng_pos);
        Ok(tr)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_cfg;
    use super::super::{train_codec, Precision};
    use super::*;
    use crate::corpus::Batch;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut cfg = tiny_cfg();
        cfg.precision = Precision::F64;
        let corpus = cfg.corpus.load(cfg.teachers).unwrap();
        let out = train_codec(&cfg, &corpus, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.afck");
        let ck = Checkpoint::capture(&out.trainer).unwrap();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let m = back.model().unwrap();
        let it = &corpus.items[0];
        let a = out.trainer.model.analyze(&it.clip, &it.teachers).unwrap();
        let b = m.analyze(&it.clip, &it.teachers).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.reconstruction.samples, b.reconstruction.samples);
        assert_eq!(a.unified.values, b.unified.values);
    }

    #[test]
    fn resumed_training_continues_identically() {
        let mut cfg = tiny_cfg();
        cfg.steps = 4;
        let corpus = cfg.corpus.load(cfg.teachers).unwrap();
        let mut tr = Trainer::new(&cfg, corpus.len()).unwrap();
        let batch = Batch::from_indices(&corpus, &[0, 1]);
        tr.train_step(&batch).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.afck");
        Checkpoint::capture(&tr).unwrap().save(&path).unwrap();
        let mut resumed = Checkpoint::load(&path).unwrap().restore().unwrap();
        let a = tr.train_step(&batch).unwrap();
        let b = resumed.train_step(&batch).unwrap();
        assert_eq!(a.terms, b.terms);
        assert_eq!(a.disc, b.disc);
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.afck");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(Checkpoint::load(&path).is_err());
        let cfg = tiny_cfg();
        let tr = Trainer::new(&cfg, 2).unwrap();
        let good = dir.path().join("good.afck");
        Checkpoint::capture(&tr).unwrap().save(&good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
