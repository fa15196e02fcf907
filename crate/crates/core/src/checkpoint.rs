//! Binary checkpoints.
//!
//! ```text
//! "SDQ1"  version:u16  header_len:u32  header (JSON)
//! record_count:u32
//! per record: name_len:u16 name kind:u8 storage:u8 payload_len:u32 payload
//! crc32:u32   (over every preceding byte)
//! ```
//!
//! All integers are little-endian. The header holds the model config and the
//! run metadata. Payload layouts are those of [`PackedTensor::to_bytes`] and
//! [`Codebook::to_bytes`]; FP32 payloads are `rank:u8`, `dims:u32…`, then the
//! values as `f32`.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ipq::{reconstruct, Codebook};
use crate::model::{LayerKind, ModelConfig, ModelParams};
use crate::quant::{dequantize, fit_affine_params, ByteReader, PackedTensor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SDQ1";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    Fp32(Tensor),
    Affine(PackedTensor),
    Pq(Codebook),
}

impl Storage {
    pub fn tag(&self) -> u8 {
        match self {
            Storage::Fp32(_) => 0,
            Storage::Affine(_) => 1,
            Storage::Pq(_) => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Storage::Fp32(_) => "FP32",
            Storage::Affine(_) => "INT-AFFINE",
            Storage::Pq(_) => "PQ",
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Storage::Fp32(t) => t.shape().to_vec(),
            Storage::Affine(p) => p.shape().to_vec(),
            Storage::Pq(c) => c.shape().to_vec(),
        }
    }

    /// Values the model computes with.
    pub fn dequantize(&self) -> Tensor {
        match self {
            Storage::Fp32(t) => t.clone(),
            Storage::Affine(p) => dequantize(p).expect("packed codes are validated on construction"),
            Storage::Pq(c) => reconstruct(c),
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        match self {
            Storage::Fp32(t) => {
                let mut out = Vec::with_capacity(1 + 4 * t.rank() + 4 * t.numel());
                out.push(t.rank() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
            Storage::Affine(p) => p.to_bytes(),
            Storage::Pq(c) => c.to_bytes(),
        }
    }

    pub fn payload_len(&self) -> usize {
        match self {
            Storage::Fp32(t) => 1 + 4 * t.rank() + 4 * t.numel(),
            Storage::Affine(p) => p.encoded_len(),
            Storage::Pq(c) => c.encoded_len(),
        }
    }

    fn from_payload(tag: u8, bytes: &[u8]) -> Result<Self> {
        match tag {
            0 => {
                let mut r = ByteReader::new(bytes);
                let rank = usize::from(r.u8()?);
                let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let numel: usize = shape.iter().product();
                let body = r.rest();
                if body.len() != 4 * numel {
                    return Err(Error::Corrupt(format!(
                        "FP32 payload for shape {shape:?} has {} value bytes",
                        body.len()
                    )));
                }
                let data = body
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Ok(Storage::Fp32(Tensor::new(shape, data)?))
            }
            1 => Ok(Storage::Affine(PackedTensor::from_bytes(bytes)?)),
            2 => Ok(Storage::Pq(Codebook::from_bytes(bytes)?)),
            other => Err(Error::Corrupt(format!("unknown storage kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub kind: LayerKind,
    pub storage: Storage,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub seed: u64,
    pub regime: String,
    pub dev_accuracy: f64,
    pub config_hash: String,
    /// Fully resolved training config.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    metadata: Metadata,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub metadata: Metadata,
    records: IndexMap<String, Record>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, metadata: Metadata) -> Self {
        let records = params
            .iter()
            .map(|(name, p)| {
                (
                    name.to_string(),
                    Record {
                        kind: p.kind,
                        storage: Storage::Fp32(p.value.clone()),
                    },
                )
            })
            .collect();
        Self {
            model: params.config.clone(),
            metadata,
            records,
        }
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, &Record)> {
        self.records.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.get(name)
    }

    /// Replaces the storage of one tensor; shapes must agree and only
    /// quantizable tensors may leave FP32.
    pub fn set_storage(&mut self, name: &str, storage: Storage) -> Result<()> {
        let record = self
            .records
            .get_mut(name)
            .ok_or_else(|| Error::invalid("checkpoint", format!("no tensor named {name}")))?;
        let old = record.storage.shape();
        if storage.shape() != old {
            return Err(Error::Shape {
                op: "checkpoint",
                left: old,
                right: storage.shape(),
            });
        }
        if !matches!(storage, Storage::Fp32(_)) && (record.kind.is_excluded() || old.len() != 2) {
            return Err(Error::invalid(
                "checkpoint",
                format!("{name} ({}) must stay FP32", record.kind),
            ));
        }
        record.storage = storage;
        Ok(())
    }

    /// Dequantized parameters.
    pub fn to_params(&self) -> Result<ModelParams> {
        let named = self
            .records
            .iter()
            .map(|(k, r)| (k.clone(), r.storage.dequantize()))
            .collect();
        ModelParams::from_tensors(self.model.clone(), named)
    }

    /// Post-training affine quantization of every FP32 quantizable tensor.
    pub fn quantize_affine(&self, bits: u8) -> Result<Self> {
        let mut out = self.clone();
        for (name, record) in &self.records {
            if let Storage::Fp32(t) = &record.storage {
                if !record.kind.is_excluded() && t.rank() == 2 {
                    let spec = fit_affine_params(t, bits)?;
                    out.set_storage(name, Storage::Affine(PackedTensor::quantize(t, spec)))?;
                }
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            metadata: self.metadata.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, r) in &self.records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(r.kind.tag());
            out.push(r.storage.tag());
            let payload = r.storage.payload();
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("bad magic, not an SDQ1 checkpoint".into()));
        }
        if bytes.len() < 10 {
            return Err(Error::Corrupt("truncated header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}, expected {VERSION}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = ByteReader::new(&body[6..]);
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        header.model.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut records = IndexMap::new();
        for _ in 0..count {
            let name_len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let kind = LayerKind::from_tag(r.u8()?)
                .ok_or_else(|| Error::Corrupt(format!("{name}: unknown layer kind")))?;
            let tag = r.u8()?;
            let len = r.u32()? as usize;
            let storage = Storage::from_payload(tag, r.take(len)?).map_err(|e| match e {
                Error::Corrupt(m) => Error::Corrupt(format!("{name}: {m}")),
                other => Error::Corrupt(format!("{name}: {other}")),
            })?;
            if records.insert(name.clone(), Record { kind, storage }).is_some() {
                return Err(Error::Corrupt(format!("duplicate tensor {name}")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Corrupt("trailing bytes after records".into()));
        }

        let ckpt = Self {
            model: header.model,
            metadata: header.metadata,
            records,
        };
        ckpt.check_layout()?;
        Ok(ckpt)
    }

    fn check_layout(&self) -> Result<()> {
        let layout = ModelParams::<f32>::layout(&self.model);
        if layout.len() != self.records.len() {
            return Err(Error::Corrupt(format!(
                "{} records, model needs {}",
                self.records.len(),
                layout.len()
            )));
        }
        for ((name, kind, _, shape), (rname, rec)) in layout.iter().zip(&self.records) {
            if name != rname || *kind != rec.kind || rec.storage.shape() != *shape {
                return Err(Error::Corrupt(format!(
                    "record {rname} ({}, {:?}) does not match expected {name} ({kind}, {shape:?})",
                    rec.kind,
                    rec.storage.shape()
                )));
            }
            if !matches!(rec.storage, Storage::Fp32(_)) && (kind.is_excluded() || shape.len() != 2) {
                return Err(Error::Corrupt(format!("{name} must be stored as FP32, found {}", rec.storage.name())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the serialized bytes.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Metadata plus a per-tensor storage summary, for the JSON sidecar.
    pub fn sidecar(&self) -> serde_json::Value {
        let tensors: Vec<serde_json::Value> = self
            .records
            .iter()
            .map(|(name, r)| {
                serde_json::json!({
                    "name": name,
                    "kind": r.kind.as_str(),
                    "storage": r.storage.name(),
                    "shape": r.storage.shape(),
                    "payload_bytes": r.storage.payload_len(),
                })
            })
            .collect();
        serde_json::json!({
            "format": "SDQ1",
            "version": VERSION,
            "model": self.model,
            "metadata": self.metadata,
            "tensors": tensors,
        })
    }

    /// Writes the checkpoint and its `<path>.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(&side, text + "\n").map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::ipq::{kmeans_fit, split_subvectors};
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            hidden: 8,
            ffn: 12,
            vocab: 12,
            max_len: 6,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, 3).unwrap();
        Checkpoint::from_params(
            &params,
            Metadata {
                seed: 3,
                regime: "teacher".into(),
                dev_accuracy: 0.625,
                config_hash: "abc".into(),
                config: serde_json::json!({"train": {"seed": 3}}),
            },
        )
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut ck = sample().quantize_affine(4).unwrap();
        let w = ck.to_params().unwrap().tensor("layer1.intermediate.weight").unwrap().clone();
        let fit = kmeans_fit(&split_subvectors(&w, 4).unwrap(), 5, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ck.set_storage("layer1.intermediate.weight", Storage::Pq(fit.codebook)).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).unwrap_err().to_string().contains("magic"));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn quantization_only_touches_quantizable_records() {
        let fp = sample();
        let q = fp.quantize_affine(8).unwrap();
        for ((name, a), (_, b)) in fp.records().zip(q.records()) {
            let quantizable = !a.kind.is_excluded() && a.storage.shape().len() == 2;
            assert_eq!(a == b, !quantizable, "{name}");
            if a.kind.is_excluded() {
                assert_eq!(a.storage, b.storage);
            }
        }
        let mut bad = fp.clone();
        let emb = fp.record("embeddings.word").unwrap().storage.dequantize();
        let spec = fit_affine_params(&emb, 8).unwrap();
        assert!(bad
            .set_storage("embeddings.word", Storage::Affine(PackedTensor::quantize(&emb, spec)))
            .is_err());
    }

    #[test]
    fn save_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side["metadata"]["seed"], 3);
        assert_eq!(side["tensors"].as_array().unwrap().len(), ck.records().count());
    }
}
