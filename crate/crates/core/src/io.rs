//! On-disk formats: flat `f32` arrays, 16-bit PCM wave files.
//!
//! Flat arrays carry a 16-byte header: 4-byte magic, then little-endian `u32`
//! version, rows and cols, followed by row-major little-endian `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::corpus::AudioClip;
use crate::error::{Error, Result};

pub const FLAT_ARRAY_VERSION: u32 = 1;

/// First eight bytes of the SHA-256 digest, little-endian.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn write_flat_array<W: Write>(w: &mut W, magic: [u8; 4], a: &Array2<f64>) -> Result<()> {
    let (rows, cols) = a.dim();
    w.write_all(&magic)?;
    w.write_all(&FLAT_ARRAY_VERSION.to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in a.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_flat_array<R: Read>(r: &mut R, magic: [u8; 4], path: &Path) -> Result<Array2<f64>> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if header[..4] != magic {
        return Err(bad(format!(
            "magic {:?}, expected {:?}",
            String::from_utf8_lossy(&header[..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FLAT_ARRAY_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let mut raw = vec![0u8; rows * cols * 4];
    r.read_exact(&mut raw)?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("rows*cols values"))
}

pub fn save_flat_array(path: &Path, magic: [u8; 4], a: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_flat_array(&mut w, magic, a)?;
    w.flush()?;
    Ok(())
}

pub fn load_flat_array(path: &Path, magic: [u8; 4]) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    read_flat_array(&mut r, magic, path)
}

/// Writes mono 16-bit PCM; samples are clipped to `[-1, 1]` here and nowhere else.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for s in &clip.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} channels, expected mono", spec.channels),
        });
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => r
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => r.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported sample format {fmt:?}/{bits}"),
            })
        }
    };
    AudioClip::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_array_header_is_sixteen_bytes() {
        let a = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64 * 0.5);
        let mut buf = Vec::new();
        write_flat_array(&mut buf, *b"TEST", &a).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert_eq!(&buf[..4], b"TEST");
        let back = read_flat_array(&mut buf.as_slice(), *b"TEST", Path::new("mem")).unwrap();
        assert_eq!(back, a);
        assert!(read_flat_array(&mut buf.as_slice(), *b"NOPE", Path::new("mem")).is_err());
    }

    #[test]
    fn wav_round_trip_is_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let clip = AudioClip::new(vec![0.0, 0.5, -0.25, 1.5], 16_000).unwrap();
        write_wav(&p, &clip).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        let expect = [0.0f32, 0.5, -0.25, 1.0];
        for (a, b) in back.samples.iter().zip(expect) {
            assert!((a - b).abs() < 1.0 / 32767.0);
        }
    }
}
