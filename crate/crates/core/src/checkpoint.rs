//! Self-describing parameter container shared by every model.
//!
//! Layout: magic, `u32` format version, `u64` header length, JSON header,
//! `u64` tensor count, then per tensor a `u32` name length, the name, a `u32`
//! rank, `u64` dims and the raw little-endian values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::{DType, Real, Tensor};

const MAGIC: &[u8; 8] = b"NCTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// Model family, e.g. `coherence`, `cohesion` or `generator`.
    pub kind: String,
    pub dtype: DType,
    /// Input embedding width.
    pub d: usize,
    pub vocab_hash: String,
    /// Architecture description needed to rebuild the parameter layout.
    pub spec: serde_json::Value,
}

impl Header {
    pub fn new(kind: &str, dtype: DType, d: usize, vocab_hash: &str, spec: serde_json::Value) -> Self {
        Header {
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            dtype,
            d,
            vocab_hash: vocab_hash.into(),
            spec,
        }
    }

    pub fn check_vocab(&self, expected: &str) -> Result<()> {
        if self.vocab_hash != expected {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {}, current {}",
                short(&self.vocab_hash),
                short(expected)
            )));
        }
        Ok(())
    }

    pub fn check_kind(&self, expected: &str) -> Result<()> {
        if self.kind != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a `{}` model, expected `{expected}`",
                self.kind
            )));
        }
        Ok(())
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

pub fn encode<F: Real>(header: &Header, params: &Params<F>) -> Result<Vec<u8>> {
    let mut header = header.clone();
    header.dtype = F::DTYPE;
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(params.num_scalars() * F::DTYPE.size() + json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.named_tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save<F: Real>(path: &Path, header: &Header, params: &Params<F>) -> Result<()> {
    let bytes = encode(header, params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    decode::<f64>(bytes, true).map(|(h, _)| h)
}

/// Parse a container. Values stored in another precision are converted.
pub fn decode<F: Real>(bytes: &[u8], header_only: bool) -> Result<(Header, Vec<(String, Tensor<F>)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = r.len()?;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Checkpoint("header version disagrees with preamble".into()));
    }
    if header_only {
        return Ok((header, Vec::new()));
    }
    let count = r.len()?;
    let width = header.dtype.size();
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data: Vec<F> = match header.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| F::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| F::lit(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((header, tensors))
}

pub fn load<F: Real>(path: &Path) -> Result<(Header, Vec<(String, Tensor<F>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, false)
}

pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Header, Params<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Params::new();
        p.add_uniform("enc.weight", &[3, 4], 0.5, &mut rng);
        p.add_buffer("bn.running_var", Tensor::full(&[1, 4], 1.0));
        let h = Header::new("coherence", DType::F32, 4, "abc123", serde_json::json!({"filters": 3}));
        (h, p)
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let (h, p) = sample();
        let bytes = encode(&h, &p).unwrap();
        let (h2, t) = decode::<f32>(&bytes, false).unwrap();
        assert_eq!(h2, h);
        let mut q = p.clone();
        q.get_mut(crate::ParamId(0)).data_mut().fill(0.0);
        q.load_named(t).unwrap();
        assert_eq!(q.fingerprint(), p.fingerprint());
        assert_eq!(encode(&h, &q).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let (h, p) = sample();
        let bytes = encode(&h, &p).unwrap();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(decode::<f32>(&bytes[..cut], false).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f32>(&extra, false).is_err());
        let mut wrong = bytes;
        wrong[8] = 9;
        let err = decode::<f32>(&wrong, false).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn vocab_hash_mismatch_is_refused() {
        let (h, _) = sample();
        assert!(h.check_vocab("abc123").is_ok());
        assert!(h.check_vocab("zzz").is_err());
        assert!(h.check_kind("cohesion").is_err());
    }

    #[test]
    fn precision_conversion_on_load() {
        let (h, p) = sample();
        let bytes = encode(&h, &p).unwrap();
        let (_, t) = decode::<f64>(&bytes, false).unwrap();
        assert_eq!(t[0].1.data()[0] as f32, p.get(crate::ParamId(0)).data()[0]);
    }
}
