//! Experiment configuration: a JSON document with `model`, `train`, `sdq`,
//! `quant` and `ipq` sections. Absent keys take defaults; unknown keys are
//! errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossVariant};
use crate::model::ModelConfig;
use crate::quant::SUPPORTED_BITS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Teacher,
    Qnat,
    QnatKld,
    QnatAtt,
    QnatHid,
    QnatAttKld,
    Ipq,
    IpqKld,
    IpqAtt,
    IpqEm,
    IpqEmKld,
    IpqEmAtt,
    IpqScalar,
    IpqScalarKld,
    IpqScalarAtt,
}

/// How iPQ regimes quantize the layers that the schedule has reached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IpqMethod {
    KMeans,
    Em,
    Scalar,
}

impl Regime {
    pub const ALL: [Regime; 15] = [
        Regime::Teacher,
        Regime::Qnat,
        Regime::QnatKld,
        Regime::QnatAtt,
        Regime::QnatHid,
        Regime::QnatAttKld,
        Regime::Ipq,
        Regime::IpqKld,
        Regime::IpqAtt,
        Regime::IpqEm,
        Regime::IpqEmKld,
        Regime::IpqEmAtt,
        Regime::IpqScalar,
        Regime::IpqScalarKld,
        Regime::IpqScalarAtt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Teacher => "teacher",
            Regime::Qnat => "qnat",
            Regime::QnatKld => "qnat-kld",
            Regime::QnatAtt => "qnat-att",
            Regime::QnatHid => "qnat-hid",
            Regime::QnatAttKld => "qnat-att-kld",
            Regime::Ipq => "ipq",
            Regime::IpqKld => "ipq-kld",
            Regime::IpqAtt => "ipq-att",
            Regime::IpqEm => "ipq-em",
            Regime::IpqEmKld => "ipq-em-kld",
            Regime::IpqEmAtt => "ipq-em-att",
            Regime::IpqScalar => "ipq-scalar",
            Regime::IpqScalarKld => "ipq-scalar-kld",
            Regime::IpqScalarAtt => "ipq-scalar-att",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    /// Distillation objective used on top of cross-entropy.
    pub fn loss_variant(self) -> LossVariant {
        use Regime::*;
        match self {
            Teacher | Qnat | Ipq | IpqEm | IpqScalar => LossVariant::Ce,
            QnatKld | IpqKld | IpqEmKld | IpqScalarKld => LossVariant::Kld,
            QnatAtt | IpqAtt | IpqEmAtt | IpqScalarAtt => LossVariant::Att,
            QnatHid => LossVariant::Hid,
            QnatAttKld => LossVariant::AttKld,
        }
    }

    pub fn ipq_method(self) -> Option<IpqMethod> {
        use Regime::*;
        match self {
            Ipq | IpqKld | IpqAtt => Some(IpqMethod::KMeans),
            IpqEm | IpqEmKld | IpqEmAtt => Some(IpqMethod::Em),
            IpqScalar | IpqScalarKld | IpqScalarAtt => Some(IpqMethod::Scalar),
            _ => None,
        }
    }

    pub fn is_qnat(self) -> bool {
        !self.is_teacher() && self.ipq_method().is_none()
    }

    pub fn is_teacher(self) -> bool {
        self == Regime::Teacher
    }

    pub fn needs_teacher(self) -> bool {
        self.loss_variant().needs_teacher()
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f32,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub regime: Regime,
    pub teacher: Option<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 50,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            regime: Regime::Teacher,
            teacher: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: u8,
    /// Fraction of weight blocks fake-quantized at each step.
    pub noise_rate: f32,
    pub block_rows: usize,
    pub block_cols: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            noise_rate: 0.5,
            block_rows: 8,
            block_cols: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpqConfig {
    pub k: usize,
    pub m: usize,
    pub iters: usize,
    /// Step size of the codeword updates.
    pub lr: f32,
}

impl Default for IpqConfig {
    fn default() -> Self {
        Self {
            k: 16,
            m: 4,
            iters: 25,
            lr: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub sdq: LossConfig,
    pub quant: QuantConfig,
    pub ipq: IpqConfig,
}

fn range_err(path: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| range_err("model", e.to_string()))?;
        self.sdq.validate().map_err(|e| range_err("sdq", e.to_string()))?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(range_err("train.lr", format!("must be > 0, got {}", t.lr)));
        }
        if t.batch_size == 0 {
            return Err(range_err("train.batch_size", "must be at least 1"));
        }
        let q = &self.quant;
        if !SUPPORTED_BITS.contains(&q.bits) {
            return Err(range_err("quant.bits", format!("must be one of {SUPPORTED_BITS:?}, got {}", q.bits)));
        }
        if !(0.0..=1.0).contains(&q.noise_rate) {
            return Err(range_err("quant.noise_rate", format!("must be in [0, 1], got {}", q.noise_rate)));
        }
        if q.block_rows == 0 || q.block_cols == 0 {
            return Err(range_err("quant.block_rows", "block dimensions must be at least 1"));
        }
        let p = &self.ipq;
        if p.k == 0 || p.k > usize::from(u16::MAX) {
            return Err(range_err("ipq.k", format!("must be in 1..=65535, got {}", p.k)));
        }
        if p.m == 0 || p.m > self.model.hidden.min(self.model.ffn) {
            return Err(range_err("ipq.m", format!("must be in 1..={}, got {}", self.model.hidden.min(self.model.ffn), p.m)));
        }
        if p.iters == 0 {
            return Err(range_err("ipq.iters", "must be at least 1"));
        }
        if !(p.lr >= 0.0 && p.lr.is_finite()) {
            return Err(range_err("ipq.lr", format!("must be >= 0, got {}", p.lr)));
        }
        Ok(())
    }

    /// Parses and validates a config document; an empty document means all defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let text = if text.trim().is_empty() { "{}" } else { text };
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            range_err(if path == "." { "<root>" } else { &path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Canonical JSON: every key present, object keys sorted.
    pub fn resolved(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn resolved_string(&self) -> String {
        serde_json::to_string(&self.resolved()).expect("value serializes")
    }

    /// SHA-256 of the canonical resolved JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.resolved_string().as_bytes()))
    }
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(TrainConfig::from_json("").unwrap(), TrainConfig::default());
        assert_eq!(TrainConfig::from_json("{}").unwrap(), TrainConfig::default());
        let d = TrainConfig::default();
        assert_eq!((d.model.layers, d.model.heads, d.model.hidden), (2, 2, 32));
        assert_eq!((d.ipq.k, d.ipq.m, d.quant.bits), (16, 4, 8));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let err = TrainConfig::from_json(r#"{"sdq": {"alpha": 1.5}}"#).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        assert!(TrainConfig::from_json(r#"{"quant": {"bits": 3}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"model": {"hidden": 30, "heads": 4}}"#).is_err());
    }

    #[test]
    fn unknown_keys_and_type_errors_carry_the_key_path() {
        let err = TrainConfig::from_json(r#"{"train": {"learning_rate": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
        let err = TrainConfig::from_json(r#"{"model": {"layers": "two"}}"#).unwrap_err();
        assert!(err.to_string().contains("model.layers"), "{err}");
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = TrainConfig::from_json(r#"{"sdq": {"alpha": 0.2, "beta": 10}, "train": {"seed": 3}}"#).unwrap();
        let b = TrainConfig::from_json(r#"{"train": {"seed": 3}, "sdq": {"beta": 10, "alpha": 0.2}}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), TrainConfig::default().hash());
        let round = TrainConfig::from_json(&a.resolved_string()).unwrap();
        assert_eq!(round, a);
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(Regime::parse(r.name()), Some(r));
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(json, format!("\"{}\"", r.name()));
        }
        assert!(Regime::QnatAttKld.needs_teacher());
        assert!(!Regime::Qnat.needs_teacher());
        assert_eq!(Regime::IpqEmAtt.ipq_method(), Some(IpqMethod::Em));
    }
}
