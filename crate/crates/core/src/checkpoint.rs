//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"CTXEMOCK"
//! version u32
//! count   u32, then `count` x (key: str, value: str), keys strictly ascending
//! count   u32, then `count` x (name: str, ndim: u32, dims: ndim x u64, data: f64 x prod(dims))
//! str     = len: u32, UTF-8 bytes
//! ```
//!
//! Tensor names are unique. Encoding a decoded checkpoint reproduces the
//! input bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EmotionModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::Vocab;

pub const MAGIC: &[u8; 8] = b"CTXEMOCK";
pub const VERSION: u32 = 1;

pub const META_MODEL_CONFIG: &str = "model_config";
pub const META_VOCAB: &str = "vocab";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::Invalid(format!("duplicate checkpoint tensor `{name}`")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Invalid(format!("checkpoint lacks `{key}`")))
    }

    /// Model weights, configuration and vocabulary.
    pub fn from_model(model: &EmotionModel, vocab: &Vocab) -> Result<Self> {
        let mut ck = Self::new();
        ck.meta
            .insert(META_MODEL_CONFIG.into(), serde_json::to_string(&model.config)?);
        ck.meta.insert(META_VOCAB.into(), vocab.to_lines());
        for (_, name, t) in model.params.iter() {
            ck.push_tensor(name, Tensor::new(t.shape(), t.data().to_vec())?)?;
        }
        Ok(ck)
    }

    /// Rebuilds the model from the tensors whose names the model declares;
    /// other tensors (optimizer state) are ignored.
    pub fn to_model(&self) -> Result<(EmotionModel, Vocab)> {
        let config: ModelConfig = serde_json::from_str(self.meta(META_MODEL_CONFIG)?)?;
        let vocab = Vocab::from_lines(self.meta(META_VOCAB)?)?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Invalid(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let template = EmotionModel::new(config.clone(), 0)?;
        let mut params = ParamStore::new();
        for (_, name, _) in template.params.iter() {
            let t = self
                .tensor(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks parameter `{name}`")))?;
            params.insert(name, t.clone())?;
        }
        Ok((EmotionModel::from_parts(config, &params)?, vocab))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.error_at(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error_at(8, format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::new();
        let n = r.u32()?;
        let mut prev: Option<String> = None;
        for _ in 0..n {
            let at = r.pos;
            let k = r.str()?;
            let v = r.str()?;
            if prev.as_ref().is_some_and(|p| *p >= k) {
                return Err(r.error_at(at, format!("meta key `{k}` out of order or repeated")));
            }
            prev = Some(k.clone());
            ck.meta.insert(k, v);
        }
        let n = r.u32()?;
        for _ in 0..n {
            let at = r.pos;
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            let mut count: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| r.error_at(at, "dimension overflows"))?;
                count = count
                    .checked_mul(d)
                    .ok_or_else(|| r.error_at(at, "element count overflows"))?;
                shape.push(d);
            }
            let payload = count
                .checked_mul(8)
                .ok_or_else(|| r.error_at(at, "payload size overflows"))?;
            let raw = r.take(payload)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.error_at(at, e.to_string()))?;
            ck.push_tensor(name, t).map_err(|e| r.error_at(at, e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Decode {
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(self.pos, format!("need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error_at(at, "string is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.meta.insert("b".into(), "two".into());
        ck.meta.insert("a".into(), "one".into());
        ck.push_tensor("w", Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, f64::MIN_POSITIVE, -0.0]).unwrap())
            .unwrap();
        ck.push_tensor("s", Tensor::scalar(7.0)).unwrap();
        ck
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let bytes = sample().encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode();
        for cut in [0, 4, 8, 12, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Decode { offset: 0, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }

    #[test]
    fn huge_lengths_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::decode(&bytes).is_err());
    }

    #[test]
    fn model_round_trip() {
        let cfg = crate::gradcheck::desk_gradcheck_config(crate::qformer::TaskKind::MultiLabel);
        let model = EmotionModel::new(cfg, 4).unwrap();
        let vocab = Vocab::from_lines(
            "[PAD]\n[UNK]\na\nb\nc\nd\ne\nf\ng\nh\ni\nj\n",
        )
        .unwrap();
        let ck = Checkpoint::from_model(&model, &vocab).unwrap();
        let decoded = Checkpoint::decode(&ck.encode()).unwrap();
        let (m2, v2) = decoded.to_model().unwrap();
        assert_eq!(m2, model);
        assert_eq!(v2, vocab);
    }
}
