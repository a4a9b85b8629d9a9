//! Bit-exact model checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "XPT1"
//! version u32      currently 1
//! config  u64 length + UTF-8 key=value lines (model config, provenance,
//!                   vocabulary hash)
//! count   u64      tensor count
//! tensor  u32 name length, name bytes, u8 dtype {0:f32, 1:f64}, u8 rank,
//!         rank × u64 dims, row-major raw data
//! crc     u32      CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Tensors are written in sorted-name order, so identical models produce
//! identical files on any platform.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelConfig, Provenance};
use crate::tensor::{Dtype, ParamRegistry, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"XPT1";
pub const VERSION: u32 = 1;

/// A dtype-erased named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        RawTensor {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            data: t.le_bytes(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "tensor `{}` is {}, requested {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let w = T::DTYPE.size_bytes();
        let numel: usize = self.shape.iter().product();
        if self.data.len() != numel * w {
            return Err(Error::Integrity(format!(
                "tensor `{}` payload is {} bytes, shape wants {}",
                self.name,
                self.data.len(),
                numel * w
            )));
        }
        let data: Vec<T> = self.data.chunks_exact(w).map(T::from_le_slice).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Parsed checkpoint container.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub tensors: Vec<RawTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Key=value lookup in the embedded config text.
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config_text.lines().find_map(|line| {
            let (k, v) = line.split_once('=')?;
            (k == key).then_some(v)
        })
    }

    pub fn provenance(&self) -> Result<Provenance> {
        let tag = self
            .config_value("provenance")
            .ok_or_else(|| Error::Integrity("checkpoint config lacks provenance".into()))?;
        Provenance::parse(tag)
    }

    pub fn vocab_hash(&self) -> Result<&str> {
        self.config_value("vocab.hash")
            .ok_or_else(|| Error::Integrity("checkpoint config lacks vocab.hash".into()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.tag());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.data);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Integrity("bad magic; not an XPT checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let clen = r.u64()? as usize;
        let config_text = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| Error::Integrity("config text is not UTF-8".into()))?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
            let dtype = Dtype::from_tag(r.u8()?)
                .ok_or_else(|| Error::Integrity(format!("unknown dtype tag for `{name}`")))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.take(numel * dtype.size_bytes())?.to_vec();
            tensors.push(RawTensor { name, dtype, shape, data });
        }
        let stored_crc = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::Integrity("trailing bytes after checksum".into()));
        }
        let actual = crc32fast::hash(&bytes[..bytes.len() - 4]);
        if actual != stored_crc {
            return Err(Error::Integrity(format!(
                "CRC mismatch: stored {stored_crc:08x}, computed {actual:08x}"
            )));
        }
        Ok(Checkpoint { version, config_text, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn config_to_text<T: Scalar>(model: &LanguageModel<T>) -> String {
    let c = &model.config;
    [
        format!("model.dim={}", c.dim),
        format!("model.layers={}", c.layers),
        format!("model.heads={}", c.heads),
        format!("model.ffn_dim={}", c.ffn_dim),
        format!("model.max_len={}", c.max_len),
        format!("model.vocab_size={}", c.vocab_size),
        format!("model.dropout={}", c.dropout),
        format!("model.use_itl={}", c.use_itl),
        format!("model.tie_embeddings={}", c.tie_embeddings),
        format!("model.dtype={}", c.dtype),
        format!("model.layer_norm_eps={}", c.layer_norm_eps),
        format!("provenance={}", model.provenance.as_str()),
        format!("vocab.hash={}", model.vocab_hash),
        format!("skipped_phase1={}", model.skipped_phase1),
    ]
    .join("\n")
}

fn parse_config_text(text: &str) -> Result<(ModelConfig, Provenance, String, bool)> {
    let mut map = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key=value, found `{line}`"),
        })?;
        map.insert(k.to_string(), (v.to_string(), i + 1));
    }
    fn get<'m, T: std::str::FromStr>(
        map: &'m std::collections::HashMap<String, (String, usize)>,
        key: &str,
    ) -> Result<T> {
        let (v, line) = map
            .get(key)
            .ok_or_else(|| Error::Integrity(format!("checkpoint config lacks `{key}`")))?;
        v.parse::<T>().map_err(|_| Error::Parse {
            line: *line,
            msg: format!("bad value `{v}` for `{key}`"),
        })
    }
    let dtype_str: String = get(&map, "model.dtype")?;
    let dtype = match dtype_str.as_str() {
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => return Err(Error::Integrity(format!("unknown dtype `{other}`"))),
    };
    let config = ModelConfig {
        dim: get(&map, "model.dim")?,
        layers: get(&map, "model.layers")?,
        heads: get(&map, "model.heads")?,
        ffn_dim: get(&map, "model.ffn_dim")?,
        max_len: get(&map, "model.max_len")?,
        vocab_size: get(&map, "model.vocab_size")?,
        dropout: get(&map, "model.dropout")?,
        use_itl: get(&map, "model.use_itl")?,
        tie_embeddings: get(&map, "model.tie_embeddings")?,
        dtype,
        layer_norm_eps: get(&map, "model.layer_norm_eps")?,
    };
    let prov_str: String = get(&map, "provenance")?;
    let provenance = Provenance::parse(&prov_str)?;
    let vocab_hash: String = get(&map, "vocab.hash")?;
    let skipped: bool = get(&map, "skipped_phase1")?;
    Ok((config, provenance, vocab_hash, skipped))
}

/// Capture a model as a checkpoint value (not yet on disk).
pub fn to_checkpoint<T: Scalar>(model: &LanguageModel<T>) -> Checkpoint {
    let tensors = model
        .params
        .sorted_names()
        .into_iter()
        .map(|name| RawTensor::from_tensor(&name, &model.params.get(&name).unwrap().value))
        .collect();
    Checkpoint {
        version: VERSION,
        config_text: config_to_text(model),
        tensors,
    }
}

pub fn save_checkpoint<T: Scalar>(model: &LanguageModel<T>, path: &Path) -> Result<()> {
    to_checkpoint(model).write(path)
}

/// Rebuild a model from a checkpoint value. The element type must match
/// the stored dtype.
pub fn model_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<LanguageModel<T>> {
    let (config, provenance, vocab_hash, skipped_phase1) = parse_config_text(&ckpt.config_text)?;
    if config.dtype != T::DTYPE {
        return Err(Error::Config(format!(
            "checkpoint dtype {} does not match requested {}",
            config.dtype,
            T::DTYPE
        )));
    }
    config.validate()?;
    let mut params: ParamRegistry<T> = ParamRegistry::new();
    for raw in &ckpt.tensors {
        params.insert(&raw.name, raw.to_tensor()?, true)?;
    }
    for required in ["embed.token", "pos.table", "mlm.bias"] {
        if !params.contains(required) {
            return Err(Error::Integrity(format!("checkpoint lacks `{required}`")));
        }
    }
    let model = LanguageModel {
        config,
        params,
        provenance,
        vocab_hash,
        skipped_phase1,
    };
    if model.config.use_itl && !model.has_itls() {
        return Err(Error::Integrity("config says use_itl but ITL tensors are missing".into()));
    }
    Ok(model)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LanguageModel<T>> {
    model_from_checkpoint(&Checkpoint::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LanguageModel, ModelConfig};
    use crate::tensor::Dtype;

    fn sample_model() -> LanguageModel<f32> {
        let cfg = ModelConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            ffn_dim: 24,
            max_len: 12,
            vocab_size: 20,
            dropout: 0.0,
            use_itl: true,
            dtype: Dtype::F32,
            ..Default::default()
        };
        LanguageModel::new(cfg, 5, "abcd1234").unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = sample_model();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded: LanguageModel<f32> = load_checkpoint(&path).unwrap();
        assert!(model.params.diff_names(&loaded.params).is_empty());
        assert_eq!(model.config, loaded.config);
        assert_eq!(model.provenance, loaded.provenance);
        assert_eq!(model.vocab_hash, loaded.vocab_hash);
    }

    #[test]
    fn file_size_matches_closed_form_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let model = sample_model();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let ckpt = Checkpoint::read(&path).unwrap();
        let header = 4 + 4 + 8 + ckpt.config_text.len() + 8;
        let body: usize = ckpt
            .tensors
            .iter()
            .map(|t| {
                let numel: usize = t.shape.iter().product();
                4 + t.name.len() + 1 + 1 + 8 * t.shape.len() + 4 * numel
            })
            .sum();
        let expect = header + body + 4;
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, expect);
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = sample_model();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Integrity(_)),
                "cut at {cut}: {err}"
            );
        }
    }

    #[test]
    fn crc_detects_single_byte_corruption() {
        use rand::Rng;
        let model = sample_model();
        let bytes = to_checkpoint(&model).to_bytes();
        let mut rng = crate::util::rng_for(3, "fuzz", 0);
        for trial in 0..100 {
            let mut corrupted = bytes.clone();
            let pos = rng.random_range(0..corrupted.len());
            let flip: u8 = rng.random_range(1..=255);
            corrupted[pos] ^= flip;
            assert!(
                Checkpoint::from_bytes(&corrupted).is_err(),
                "trial {trial}: corruption at {pos} went undetected"
            );
        }
    }

    #[test]
    fn unknown_version_is_a_version_error() {
        let model = sample_model();
        let mut bytes = to_checkpoint(&model).to_bytes();
        bytes[4] = 9; // version field
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version(9))));
    }

    #[test]
    fn finetuned_model_with_head_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = sample_model();
        model.attach_task_head(7, 3).unwrap();
        model.provenance = Provenance::Finetuned;
        let path = dir.path().join("ft.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded: LanguageModel<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.num_labels(), Some(7));
        assert!(model.params.diff_names(&loaded.params).is_empty());
    }
}
