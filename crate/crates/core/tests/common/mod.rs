//! Shared helpers for the integration tests and the acceptance report.
#![allow(dead_code)]

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdq_core::checkpoint::{Checkpoint, Metadata, Storage};
use sdq_core::ipq::{kmeans_fit, split_subvectors};
use sdq_core::losses::{
    attention_distill, compose_sdq, cross_entropy, hidden_distill, kld, kld_distill, sdq_ipq_loss, Components,
    IpqLayer, LossConfig, LossVariant,
};
use sdq_core::model::{encoder_forward, init_params, Batch, LayerKind, ModelConfig, ModelParams, TaskKind};
use sdq_core::quant::{fit_affine_params, PackedTensor};
use sdq_core::tensor::{Tape, Var};
use sdq_core::{Result, Tensor};

pub const STEP: f64 = 1e-5;

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute gap when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = norm(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `f` with respect to each input tensor.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let value = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        Ok(f(&tape, &vars)?.value().item().expect("scalar loss"))
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let grads = tape.backward(f(&tape, &vars)?)?;
    let mut worst = 0.0f64;
    for (i, (x, v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(v).data().to_vec();
        let mut numeric = Vec::with_capacity(x.numel());
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += STEP;
            let up = value(&xs)?;
            xs[i].data_mut()[j] -= 2.0 * STEP;
            let down = value(&xs)?;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn small_config(task: TaskKind) -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 1,
        hidden: 8,
        ffn: 16,
        vocab: 12,
        max_len: 6,
        classes: 3,
        task,
        dropout: 0.1,
    }
}

fn small_batch(rng: &mut ChaCha8Rng, config: &ModelConfig) -> (Batch, Vec<usize>) {
    let rows: Vec<Vec<u32>> = (0..3)
        .map(|_| (0..5).map(|_| rng.random_range(0..config.vocab as u32)).collect())
        .collect();
    let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
    let batch = Batch::new(&refs).unwrap();
    let n_labels = match config.task {
        TaskKind::Sentence => 3,
        TaskKind::Token => 15,
    };
    let labels = (0..n_labels).map(|_| rng.random_range(0..config.classes)).collect();
    (batch, labels)
}

/// Model-level checks on one seed: cross-entropy through the full encoder
/// for both task kinds, with and without fixed dropout masks, and a random
/// projection of every attention trace and hidden state.
pub fn model_gradient_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for task in [TaskKind::Sentence, TaskKind::Token] {
        let config = small_config(task);
        let mut params: ModelParams<f64> = init_params(&config, seed)?;
        // larger weights than the init so every nonlinearity is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for (_, p) in params.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let (batch, labels) = small_batch(&mut rng, &config);
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.value.clone()).collect();
        let probe = |shape: &[usize], rng: &mut ChaCha8Rng| random(rng, shape, 1.0);
        let trace_w = probe(&[3, 5, 8], &mut rng);
        let hidden_w = probe(&[15, 8], &mut rng);
        for dropout in [false, true] {
            let err = check(&inputs, |tape, vars| {
                let bound: IndexMap<String, Var<'_, f64>> = names.iter().cloned().zip(vars.iter().copied()).collect();
                let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
                let rng: Option<&mut dyn rand::RngCore> = if dropout { Some(&mut drop_rng) } else { None };
                let fwd = encoder_forward(&config, &bound, &batch, rng)?;
                let ce = cross_entropy(&fwd.logits.softmax(1, 1.0)?, &labels, true)?;
                let t = fwd.trace[0][0].mul(&tape.constant(trace_w.clone()))?.sum();
                let h = fwd.hidden[0].mul(&tape.constant(hidden_w.clone()))?.sum();
                ce.add(&t.scale(0.1))?.add(&h.scale(0.1))
            })?;
            let label = format!("encoder {task:?}{}", if dropout { " + dropout" } else { "" });
            out.push((label, err));
        }
    }
    Ok(out)
}

/// Loss-level checks on one seed for every distillation objective and
/// every way they are combined.
pub fn loss_gradient_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let logits = random(&mut rng, &[4, 3], 2.0);
    let teacher = random(&mut rng, &[4, 3], 2.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    for conventional in [false, true] {
        let err = check(std::slice::from_ref(&logits), |_, v| cross_entropy(&v[0].softmax(1, 1.0)?, &labels, conventional))?;
        out.push((format!("cross_entropy conventional={conventional}"), err));
    }
    for tau in [1.0, 2.0, 4.0] {
        let err = check(&[logits.clone(), teacher.clone()], |_, v| kld_distill(&v[0], &v[1], tau))?;
        out.push((format!("kld_distill tau={tau}"), err));
    }
    let err = check(&[logits.clone(), teacher.clone()], |_, v| kld(&v[0].softmax(1, 1.0)?, &v[1].softmax(1, 1.0)?))?;
    out.push(("kld".into(), err));

    let traces: Vec<Tensor<f64>> = (0..8).map(|_| random(&mut rng, &[2, 3, 4], 1.0)).collect();
    let err = check(&traces, |_, v| {
        let s = vec![vec![v[0], v[1]], vec![v[2], v[3]]];
        let t = vec![vec![v[4], v[5]], vec![v[6], v[7]]];
        attention_distill(&s, &t)
    })?;
    out.push(("attention_distill".into(), err));
    let err = check(&traces[..4], |_, v| hidden_distill(&v[..2], &v[2..]))?;
    out.push(("hidden_distill".into(), err));

    let config = LossConfig {
        alpha: 0.3,
        beta: 7.0,
        tau: 2.0,
        conventional_ce: false,
    };
    for variant in [LossVariant::Ce, LossVariant::Kld, LossVariant::Att, LossVariant::Hid, LossVariant::AttKld] {
        let inputs = [logits.clone(), teacher.clone(), traces[0].clone(), traces[1].clone()];
        let err = check(&inputs, |_, v| {
            let c = Components {
                ce: cross_entropy(&v[0].softmax(1, 1.0)?, &labels, false)?,
                kld: Some(kld_distill(&v[0], &v[1], f64::from(config.tau))?),
                att: Some(attention_distill(&[vec![v[2]]], &[vec![v[3]]])?),
                hid: Some(hidden_distill(&[v[2]], &[v[3]])?),
            };
            compose_sdq(variant, &c, &config)
        })?;
        out.push((format!("compose_sdq {variant:?}"), err));
    }

    let weights: Vec<Tensor<f64>> = (0..4).map(|_| random(&mut rng, &[3, 4], 1.0)).collect();
    let mut inputs = weights.clone();
    inputs.extend_from_slice(&traces[..4]);
    let err = check(&inputs, |tape, v| {
        let (sa, ta) = ([v[4], v[5]], [v[6], v[7]]);
        let layers = [IpqLayer {
            weights: vec![(v[0], v[1]), (v[2], v[3])],
            student_att: &sa,
            teacher_att: &ta,
        }];
        sdq_ipq_loss(tape, &layers, 5.0, 2, 1)
    })?;
    out.push(("sdq_ipq_loss".into(), err));
    Ok(out)
}

/// Quantized counterpart of `fp32` where every quantizable tensor is
/// compressed by a randomly chosen method and width.
pub fn random_quantized(fp32: &Checkpoint, rng: &mut ChaCha8Rng) -> Checkpoint {
    let mut q = fp32.clone();
    let names: Vec<String> = fp32
        .records()
        .filter(|(_, r)| !r.kind.is_excluded() && r.storage.shape().len() == 2)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let w = fp32.record(&name).unwrap().storage.dequantize();
        let storage = if rng.random_bool(0.7) {
            let bits = [2, 4, 8][rng.random_range(0..3)];
            Storage::Affine(PackedTensor::quantize(&w, fit_affine_params(&w, bits).unwrap()))
        } else {
            let subs = split_subvectors(&w, 4).unwrap();
            Storage::Pq(kmeans_fit(&subs, 8, 5, rng).unwrap().codebook)
        };
        q.set_storage(&name, storage).unwrap();
    }
    q
}

/// `(fp32, quantized)` pairs over random small architectures.
pub fn random_checkpoint_pairs(count: usize, seed: u64) -> Vec<(Checkpoint, Checkpoint)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let heads = [1, 2][rng.random_range(0..2)];
            let config = ModelConfig {
                layers: rng.random_range(1..=3),
                heads,
                hidden: 8 * heads * rng.random_range(1..=2),
                ffn: [16, 24, 32][rng.random_range(0..3)],
                vocab: rng.random_range(8..40),
                max_len: rng.random_range(4..12),
                classes: rng.random_range(2..5),
                task: TaskKind::Sentence,
                dropout: 0.1,
            };
            let params = init_params::<f32>(&config, i as u64).unwrap();
            let fp32 = Checkpoint::from_params(&params, Metadata::default());
            let q = random_quantized(&fp32, &mut rng);
            (fp32, q)
        })
        .collect()
}

/// Independent error statistics: rows keyed by `(layer, kind)` in first
/// appearance order, with the layer parsed from the tensor name.
pub fn brute_force_errors(fp32: &Checkpoint, q: &Checkpoint) -> Vec<(Option<usize>, LayerKind, f64, f64, f64, usize)> {
    let mut keys: Vec<(Option<usize>, LayerKind)> = Vec::new();
    let mut errs: Vec<Vec<f64>> = Vec::new();
    for (name, rec) in fp32.records() {
        let layer = name
            .strip_prefix("layer")
            .and_then(|rest| rest.split('.').next())
            .and_then(|l| l.parse().ok());
        let key = (layer, rec.kind);
        let idx = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                errs.push(Vec::new());
                keys.len() - 1
            }
        };
        let a = rec.storage.dequantize();
        let b = q.record(name).unwrap().storage.dequantize();
        for k in 0..a.numel() {
            errs[idx].push(f64::from(b.data()[k]) - f64::from(a.data()[k]));
        }
    }
    keys.into_iter()
        .zip(errs)
        .map(|((layer, kind), e)| {
            let n = e.len() as f64;
            let mean_abs = e.iter().map(|x| x.abs()).sum::<f64>() / n;
            let mean = e.iter().sum::<f64>() / n;
            let var = e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let fnorm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            (layer, kind, mean_abs, var.sqrt(), fnorm, e.len())
        })
        .collect()
}

/// Tallies of one quantizer fuzzing campaign.
#[derive(Debug, Default)]
pub struct QuantFuzz {
    pub tensors: usize,
    pub grid_violations: usize,
    /// Largest `|fq(w) − w| / s` over unclamped elements.
    pub worst_grid_ratio: f64,
    pub idempotence_failures: usize,
    pub real_fake_mismatches: usize,
    pub too_many_values: usize,
}

/// Random matrix with a random shape and magnitude; a few are constant or
/// carry a large outlier.
pub fn fuzz_tensor(rng: &mut ChaCha8Rng) -> Tensor {
    let shape = [rng.random_range(1..12), rng.random_range(1..12)];
    let scale = 10f32.powf(rng.random_range(-3.0..2.0));
    let mut t = Tensor::from_fn(&shape, |_| rng.random_range(-1.0f32..1.0) * scale);
    match rng.random_range(0..10) {
        0 => t = Tensor::from_fn(&shape, |_| scale),
        1 => {
            let n = t.numel();
            t.data_mut()[rng.random_range(0..n)] = 50.0 * scale;
        }
        _ => {}
    }
    t
}

pub fn quantizer_fuzz(bits: u8, count: usize, seed: u64) -> QuantFuzz {
    use sdq_core::quant::{dequantize, fake_quantize};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = QuantFuzz::default();
    for _ in 0..count {
        let w = fuzz_tensor(&mut rng);
        let spec = fit_affine_params(&w, bits).unwrap();
        let fq = fake_quantize(&w, &spec);
        let s = f64::from(spec.scale());
        for (&a, &q) in w.data().iter().zip(fq.data()) {
            if spec.code(a).1 {
                let gap = (f64::from(q) - f64::from(a)).abs();
                out.worst_grid_ratio = out.worst_grid_ratio.max(gap / s);
                if gap > s / 2.0 {
                    out.grid_violations += 1;
                }
            }
        }
        if fake_quantize(&fq, &spec).data() != fq.data() {
            out.idempotence_failures += 1;
        }
        let packed = PackedTensor::quantize(&w, spec);
        let real = dequantize(&PackedTensor::from_bytes(&packed.to_bytes()).unwrap()).unwrap();
        if real.data() != fq.data() {
            out.real_fake_mismatches += 1;
        }
        let mut values: Vec<u32> = fq.data().iter().map(|v| v.to_bits()).collect();
        values.sort_unstable();
        values.dedup();
        if values.len() > 1 << bits {
            out.too_many_values += 1;
        }
        out.tensors += 1;
    }
    out
}

/// Central interval of Binomial(n, p) holding at least `level` of the mass,
/// from the exact pmf.
pub fn binomial_interval(n: usize, p: f64, level: f64) -> (usize, usize) {
    let ln_pmf = |k: usize| {
        let (n, k) = (n as f64, k as f64);
        libm::lgamma(n + 1.0) - libm::lgamma(k + 1.0) - libm::lgamma(n - k + 1.0) + k * p.ln() + (n - k) * (1.0 - p).ln()
    };
    let pmf: Vec<f64> = (0..=n).map(|k| ln_pmf(k).exp()).collect();
    let tail = (1.0 - level) / 2.0;
    let (mut lo, mut acc) = (0, 0.0);
    while acc + pmf[lo] <= tail {
        acc += pmf[lo];
        lo += 1;
    }
    let (mut hi, mut acc) = (n, 0.0);
    while acc + pmf[hi] <= tail {
        acc += pmf[hi];
        hi -= 1;
    }
    (lo, hi)
}

/// `Σ ‖v − C[a(v)]‖²` straight from the matrix and the codebook, summing
/// each subvector's squares before adding it to the total.
pub fn brute_force_reconstruction_error(w: &Tensor, book: &sdq_core::ipq::Codebook) -> f64 {
    let [rows, cols] = book.shape();
    let (m, dim) = (book.m(), book.dim());
    let mut total = 0.0;
    for j in 0..cols {
        for i in 0..m {
            let word = book.codeword(usize::from(book.assignments()[j * m + i]));
            let mut part = 0.0;
            for t in 0..dim {
                let r = i * dim + t;
                if r < rows {
                    let d = f64::from(w.data()[r * cols + j]) - f64::from(word[t]);
                    part += d * d;
                }
            }
            total += part;
        }
    }
    total
}

/// Matrix whose column pieces take at most `distinct` different values.
pub fn few_distinct_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, m: usize, distinct: usize) -> Tensor {
    let dim = rows.div_ceil(m);
    let words: Vec<Vec<f32>> = (0..distinct).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut w = Tensor::zeros(&[rows, cols]);
    for j in 0..cols {
        for i in 0..m {
            let word = &words[rng.random_range(0..distinct)];
            for t in 0..dim {
                let r = i * dim + t;
                if r < rows {
                    w.data_mut()[r * cols + j] = word[t];
                }
            }
        }
    }
    w
}
