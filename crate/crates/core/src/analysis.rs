//! Post-hoc analysis of trained checkpoints: per-layer quantization error,
//! accuracy against bit width, storage accounting and regime comparisons.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Storage};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelParams};
use crate::quant::SUPPORTED_BITS;
use crate::tensor::Tensor;
use crate::train::{evaluate, EvalMode, RunResult};

pub const HISTOGRAM_BINS: usize = 64;

/// Elementwise error statistics of `quantized - reference`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean_abs: f64,
    /// Population standard deviation of the signed error.
    pub std: f64,
    /// Frobenius norm of the difference.
    pub fnorm: f64,
    pub count: usize,
}

fn stats_of(errors: &[f64]) -> ErrorStats {
    let n = errors.len();
    if n == 0 {
        return ErrorStats::default();
    }
    let mut abs = 0.0;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for &e in errors {
        abs += e.abs();
        sum += e;
        sq += e * e;
    }
    let mean = sum / n as f64;
    let mut var = 0.0;
    for &e in errors {
        var += (e - mean) * (e - mean);
    }
    ErrorStats {
        mean_abs: abs / n as f64,
        std: (var / n as f64).sqrt(),
        fnorm: sq.sqrt(),
        count: n,
    }
}

fn diff<'a>(reference: &'a Tensor, quantized: &'a Tensor) -> impl Iterator<Item = f64> + 'a {
    reference
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(&r, &q)| f64::from(q) - f64::from(r))
}

pub fn tensor_error_stats(reference: &Tensor, quantized: &Tensor) -> Result<ErrorStats> {
    if reference.shape() != quantized.shape() {
        return Err(Error::Shape {
            op: "tensor_error_stats",
            left: reference.shape().to_vec(),
            right: quantized.shape().to_vec(),
        });
    }
    Ok(stats_of(&diff(reference, quantized).collect::<Vec<_>>()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub layer: Option<usize>,
    pub kind: LayerKind,
    pub stats: ErrorStats,
}

/// Error counts over `[-3 std, 3 std]` of one layer kind; values outside the
/// range land in the edge bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn build(errors: &[f64], std: f64) -> Self {
        let (lo, hi) = (-3.0 * std, 3.0 * std);
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for &e in errors {
            let bin = if hi > lo {
                (((e - lo) / (hi - lo)) * HISTOGRAM_BINS as f64).floor().clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize
            } else {
                HISTOGRAM_BINS / 2
            };
            counts[bin] += 1;
        }
        Self { lo, hi, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerErrorReport {
    /// One row per `(layer, kind)` in checkpoint order.
    pub rows: Vec<ErrorRow>,
    pub histograms: IndexMap<LayerKind, Histogram>,
    /// Quantized kind with the largest mean absolute error, if any tensor differs.
    pub largest_error_kind: Option<LayerKind>,
}

impl LayerErrorReport {
    /// Whether the output projection carries the largest mean error. This is
    /// reported, not required.
    pub fn output_has_largest_error(&self) -> bool {
        self.largest_error_kind == Some(LayerKind::Output)
    }
}

fn check_structure(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    let names_a: Vec<_> = a.records().map(|(n, r)| (n, r.kind, r.storage.shape())).collect();
    let names_b: Vec<_> = b.records().map(|(n, r)| (n, r.kind, r.storage.shape())).collect();
    if a.model != b.model || names_a != names_b {
        return Err(Error::invalid("analysis", "checkpoints are not structurally identical"));
    }
    Ok(())
}

/// Error of every tensor in `quantized` against `reference`, grouped by
/// layer index and kind.
pub fn layer_error_stats(reference: &Checkpoint, quantized: &Checkpoint) -> Result<LayerErrorReport> {
    check_structure(reference, quantized)?;
    let layers: IndexMap<String, Option<usize>> =
        ModelParams::<f32>::layout(&reference.model).into_iter().map(|(n, _, l, _)| (n, l)).collect();
    let mut groups: IndexMap<(Option<usize>, LayerKind), Vec<f64>> = IndexMap::new();
    let mut by_kind: IndexMap<LayerKind, Vec<f64>> = IndexMap::new();
    for (name, rec) in reference.records() {
        let q = quantized.record(name).expect("structure checked");
        let (r, q) = (rec.storage.dequantize(), q.storage.dequantize());
        let layer = layers.get(name).copied().flatten();
        let errors: Vec<f64> = diff(&r, &q).collect();
        groups.entry((layer, rec.kind)).or_default().extend_from_slice(&errors);
        by_kind.entry(rec.kind).or_default().extend(errors);
    }
    let rows: Vec<ErrorRow> = groups
        .iter()
        .map(|(&(layer, kind), e)| ErrorRow {
            layer,
            kind,
            stats: stats_of(e),
        })
        .collect();
    let histograms = by_kind
        .iter()
        .map(|(&kind, e)| (kind, Histogram::build(e, stats_of(e).std)))
        .collect();
    let mut largest: Option<(LayerKind, f64)> = None;
    for (&kind, e) in &by_kind {
        let m = stats_of(e).mean_abs;
        if !kind.is_excluded() && m > 0.0 && largest.is_none_or(|(_, best)| m > best) {
            largest = Some((kind, m));
        }
    }
    Ok(LayerErrorReport {
        rows,
        histograms,
        largest_error_kind: largest.map(|(k, _)| k),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` is the FP32 reference.
    pub bits: Option<u8>,
    pub accuracy: f64,
}

/// Accuracy of `ckpt` at FP32 and at each requested width, using fake
/// quantization or, with `real`, packed integer round trips.
pub fn bit_sweep(ckpt: &Checkpoint, bits: &[u8], samples: &[Sample], real: bool) -> Result<Vec<SweepRow>> {
    if let Some(b) = bits.iter().find(|b| !SUPPORTED_BITS.contains(b)) {
        return Err(Error::invalid("bit_sweep", format!("unsupported bit width {b}")));
    }
    let mut rows = vec![SweepRow {
        bits: None,
        accuracy: evaluate(ckpt, samples, EvalMode::Fp32)?,
    }];
    for &b in bits {
        let mode = if real { EvalMode::Real(b) } else { EvalMode::Fake(b) };
        rows.push(SweepRow {
            bits: Some(b),
            accuracy: evaluate(ckpt, samples, mode)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionRow {
    pub tensor: String,
    pub kind: LayerKind,
    pub storage: String,
    pub fp32_bytes: usize,
    pub quant_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub rows: Vec<CompressionRow>,
    pub fp32_total: usize,
    pub quant_total: usize,
    /// `fp32_total / quant_total` over record payloads.
    pub ratio: f64,
    /// Ratio predicted from tensor shapes and storage parameters alone.
    pub predicted_ratio: f64,
    /// `|ratio - predicted| / predicted`.
    pub discrepancy: f64,
    /// Whole serialized files, headers included.
    pub fp32_file_bytes: usize,
    pub quant_file_bytes: usize,
}

/// Payload size of a rank-r FP32 tensor with `numel` values.
pub fn fp32_payload_bytes(shape: &[usize]) -> usize {
    1 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

/// Predicted payload size of a storage kind from its shape and parameters.
fn predicted_bytes(storage: &Storage) -> usize {
    let shape = storage.shape();
    let numel: usize = shape.iter().product();
    match storage {
        Storage::Fp32(_) => fp32_payload_bytes(&shape),
        // bits, scale, offset, rank, dims, then n/8 bytes per value
        Storage::Affine(p) => 1 + 4 + 4 + 1 + 4 * shape.len() + (numel * usize::from(p.spec().bits())).div_ceil(8),
        // k, m, dim, pad as u16, f32 codewords, one u16 per subvector
        Storage::Pq(c) => 8 + 4 * c.k() * c.dim() + 2 * c.m() * shape[1],
    }
}

/// Whole-model payload ratio when a fraction `quantized` of the parameters
/// is stored at `bits` and the rest at 32 bits.
pub fn payload_ratio(quantized: f64, bits: u8) -> f64 {
    1.0 / ((1.0 - quantized) + quantized * f64::from(bits) / 32.0)
}

pub fn compression_report(fp32: &Checkpoint, quantized: &Checkpoint) -> Result<CompressionReport> {
    check_structure(fp32, quantized)?;
    let mut rows = Vec::new();
    let (mut fp_total, mut q_total, mut fp_pred, mut q_pred) = (0, 0, 0, 0);
    for (name, rec) in fp32.records() {
        let q = quantized.record(name).expect("structure checked");
        let row = CompressionRow {
            tensor: name.to_string(),
            kind: rec.kind,
            storage: q.storage.name().to_string(),
            fp32_bytes: rec.storage.payload_len(),
            quant_bytes: q.storage.payload_len(),
        };
        fp_total += row.fp32_bytes;
        q_total += row.quant_bytes;
        fp_pred += predicted_bytes(&rec.storage);
        q_pred += predicted_bytes(&q.storage);
        rows.push(row);
    }
    let ratio = fp_total as f64 / q_total as f64;
    let predicted_ratio = fp_pred as f64 / q_pred as f64;
    Ok(CompressionReport {
        rows,
        fp32_total: fp_total,
        quant_total: q_total,
        ratio,
        predicted_ratio,
        discrepancy: (ratio - predicted_ratio).abs() / predicted_ratio,
        fp32_file_bytes: fp32.to_bytes().len(),
        quant_file_bytes: quantized.to_bytes().len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    /// Regime name; teacher runs are summarized as `ptq` since their
    /// quantized accuracy is post-training quantization.
    pub regime: String,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub better: String,
    pub worse: String,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Sorted by descending mean.
    pub rows: Vec<RegimeSummary>,
    pub orderings: Vec<OrderingCheck>,
}

/// Expected ranking of quantized accuracy, best first.
pub const EXPECTED_ORDER: [&str; 4] = ["qnat-att-kld", "qnat-kld", "qnat", "ptq"];

/// Mean and spread of quantized test accuracy per regime, plus whether each
/// adjacent pair of [`EXPECTED_ORDER`] present in the results holds on means
/// up to `slack`.
pub fn method_comparison(results: &[RunResult], slack: f64) -> Result<Comparison> {
    let mut groups: IndexMap<String, Vec<(u64, f64)>> = IndexMap::new();
    for r in results {
        let name = if r.regime == "teacher" { "ptq".to_string() } else { r.regime.clone() };
        groups.entry(name).or_default().push((r.seed, r.test_acc_quant));
    }
    if groups.len() < 2 {
        return Err(Error::invalid("method_comparison", "need at least two regimes"));
    }
    let mut rows = Vec::new();
    for (regime, runs) in &groups {
        let mut seeds: Vec<u64> = runs.iter().map(|r| r.0).collect();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() < 3 {
            return Err(Error::invalid(
                "method_comparison",
                format!("regime {regime} has {} seeds, need at least 3", seeds.len()),
            ));
        }
        let n = runs.len() as f64;
        let mean = runs.iter().map(|r| r.1).sum::<f64>() / n;
        let var = runs.iter().map(|r| (r.1 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        rows.push(RegimeSummary {
            regime: regime.clone(),
            seeds: runs.len(),
            mean,
            std: var.sqrt(),
        });
    }
    let present: Vec<&RegimeSummary> = EXPECTED_ORDER
        .iter()
        .filter_map(|name| rows.iter().find(|r| r.regime == *name))
        .collect();
    let orderings = present
        .windows(2)
        .map(|w| OrderingCheck {
            better: w[0].regime.clone(),
            worse: w[1].regime.clone(),
            holds: w[0].mean >= w[1].mean - slack,
        })
        .collect();
    rows.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    Ok(Comparison { rows, orderings })
}

fn layer_label(layer: Option<usize>) -> String {
    layer.map_or_else(|| "-".to_string(), |l| l.to_string())
}

/// `layer,kind,mean_abs,std,fnorm,count`; tensors outside the encoder
/// stack have layer `-`.
pub fn errors_csv(report: &LayerErrorReport) -> String {
    let mut out = String::from("layer,kind,mean_abs,std,fnorm,count\n");
    for r in &report.rows {
        let s = &r.stats;
        let _ = writeln!(out, "{},{},{},{},{},{}", layer_label(r.layer), r.kind, s.mean_abs, s.std, s.fnorm, s.count);
    }
    out
}

/// `kind,bin,lo,hi,count` for every histogram bin.
pub fn histograms_csv(report: &LayerErrorReport) -> String {
    let mut out = String::from("kind,bin,lo,hi,count\n");
    for (kind, h) in &report.histograms {
        let width = (h.hi - h.lo) / HISTOGRAM_BINS as f64;
        for (i, c) in h.counts.iter().enumerate() {
            let lo = h.lo + width * i as f64;
            let _ = writeln!(out, "{kind},{i},{lo},{},{c}", lo + width);
        }
    }
    out
}

/// `bits,seed,accuracy`; the reference row has bits `fp32`.
pub fn sweep_csv(rows: &[(u64, Vec<SweepRow>)]) -> String {
    let mut out = String::from("bits,seed,accuracy\n");
    for (seed, sweep) in rows {
        for r in sweep {
            let bits = r.bits.map_or_else(|| "fp32".to_string(), |b| b.to_string());
            let _ = writeln!(out, "{bits},{seed},{}", r.accuracy);
        }
    }
    out
}

/// `tensor,kind,fp32_bytes,quant_bytes`.
pub fn compression_csv(report: &CompressionReport) -> String {
    let mut out = String::from("tensor,kind,fp32_bytes,quant_bytes\n");
    for r in &report.rows {
        let _ = writeln!(out, "{},{},{},{}", r.tensor, r.kind, r.fp32_bytes, r.quant_bytes);
    }
    out
}

/// `regime,seeds,mean,std`, best first.
pub fn comparison_csv(c: &Comparison) -> String {
    let mut out = String::from("regime,seeds,mean,std\n");
    for r in &c.rows {
        let _ = writeln!(out, "{},{},{},{}", r.regime, r.seeds, r.mean, r.std);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Metadata;
    use crate::model::{init_params, ModelConfig};

    fn ckpt(seed: u64) -> Checkpoint {
        let params = init_params::<f32>(&ModelConfig::default(), seed).unwrap();
        Checkpoint::from_params(&params, Metadata::default())
    }

    #[test]
    fn hand_computed_tensor_error() {
        let r = Tensor::zeros(&[2, 2]);
        let q = Tensor::new(vec![2, 2], vec![0.1, -0.1, 0.0, 0.0]).unwrap();
        let s = tensor_error_stats(&r, &q).unwrap();
        let e = f64::from(0.1f32);
        assert_eq!(s.mean_abs, (e + e) / 4.0);
        assert!((s.mean_abs - 0.05).abs() < 1e-8);
        assert!((s.fnorm - 0.02f64.sqrt()).abs() < 1e-8);
        assert_eq!(s.count, 4);
    }

    #[test]
    fn identical_checkpoints_have_zero_error() {
        let a = ckpt(1);
        let report = layer_error_stats(&a, &a).unwrap();
        assert!(report.rows.iter().all(|r| r.stats.mean_abs == 0.0 && r.stats.fnorm == 0.0));
        assert_eq!(report.largest_error_kind, None);
        let total: usize = report.rows.iter().map(|r| r.stats.count).sum();
        assert_eq!(total, ModelConfig::default().param_count());
    }

    #[test]
    fn mismatched_structure_is_rejected() {
        let a = ckpt(1);
        let mut other = ModelConfig::default();
        other.ffn = 48;
        let b = Checkpoint::from_params(&init_params::<f32>(&other, 1).unwrap(), Metadata::default());
        assert!(layer_error_stats(&a, &b).is_err());
        assert!(compression_report(&a, &b).is_err());
    }

    #[test]
    fn quantization_error_only_in_quantized_kinds() {
        let a = ckpt(2);
        let q = a.quantize_affine(4).unwrap();
        let report = layer_error_stats(&a, &q).unwrap();
        for r in &report.rows {
            if r.kind.is_excluded() {
                assert_eq!(r.stats.fnorm, 0.0);
            }
        }
        assert!(report.largest_error_kind.is_some());
        for h in report.histograms.values() {
            assert_eq!(h.counts.len(), HISTOGRAM_BINS);
        }
        let csv = errors_csv(&report);
        assert_eq!(csv.lines().count(), report.rows.len() + 1);
    }

    #[test]
    fn compression_of_self_is_one_and_int8_matches_census() {
        let a = ckpt(3);
        let same = compression_report(&a, &a).unwrap();
        assert_eq!(same.ratio, 1.0);
        let q = a.quantize_affine(8).unwrap();
        let rep = compression_report(&a, &q).unwrap();
        assert!(rep.discrepancy <= 0.05, "{rep:?}");
        assert!(rep.ratio > 1.5);
        assert_eq!(compression_csv(&rep).lines().count(), rep.rows.len() + 1);
    }

    #[test]
    fn half_quantized_int8_payload_ratio() {
        assert!((payload_ratio(0.5, 8) - 1.6).abs() < 1e-12);
        assert_eq!(payload_ratio(0.0, 8), 1.0);
        assert_eq!(payload_ratio(1.0, 8), 4.0);
    }

    fn run(regime: &str, seed: u64, acc: f64) -> RunResult {
        RunResult {
            regime: regime.into(),
            seed,
            config_hash: String::new(),
            alpha: 0.0,
            beta: 0.0,
            train_acc: acc,
            dev_acc: acc,
            test_acc: acc,
            dev_acc_fp32: acc,
            test_acc_fp32: acc,
            dev_acc_quant: acc,
            test_acc_quant: acc,
            best_epoch: 0,
            epoch_loss: vec![],
            wall_ms: 0,
        }
    }

    #[test]
    fn comparison_means_and_ordering() {
        let mut rs = Vec::new();
        for (s, (a, b)) in [(0.9, 0.8), (0.8, 0.8), (1.0, 0.5)].into_iter().enumerate() {
            rs.push(run("qnat", s as u64, b));
            rs.push(run("qnat-att-kld", s as u64, a));
        }
        let c = method_comparison(&rs, 0.0).unwrap();
        assert_eq!(c.rows[0].regime, "qnat-att-kld");
        assert!((c.rows[0].mean - 0.9).abs() < 1e-12);
        assert!((c.rows[1].mean - 0.7).abs() < 1e-12);
        assert!((c.rows[0].std - 0.1).abs() < 1e-12);
        assert_eq!(c.orderings.len(), 1);
        assert!(c.orderings[0].holds);
        assert!(method_comparison(&rs[..4], 0.0).is_err());
        let ties: Vec<_> = (0..3).flat_map(|s| [run("teacher", s, 0.7), run("qnat", s, 0.7)]).collect();
        assert!(method_comparison(&ties, 0.0).unwrap().orderings.iter().all(|o| o.holds));
    }

    #[test]
    fn sweep_rejects_unknown_widths() {
        assert!(bit_sweep(&ckpt(0), &[3], &[], false).is_err());
        let csv = sweep_csv(&[(7, vec![SweepRow { bits: None, accuracy: 1.0 }, SweepRow { bits: Some(8), accuracy: 0.5 }])]);
        assert_eq!(csv, "bits,seed,accuracy\nfp32,7,1\n8,7,0.5\n");
    }
}
