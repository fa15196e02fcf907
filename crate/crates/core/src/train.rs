//! Teacher fine-tuning, student training under quantization noise or
//! iterative product quantization, grid search and evaluation.

use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Metadata, Storage};
use crate::config::{IpqMethod, TrainConfig};
use crate::data::{batch_iter, make_batch, Dataset, Sample};
use crate::error::{Error, Result};
use crate::ipq::{codeword_grad_update, em_fit, kmeans_fit, reconstruct, split_subvectors, Codebook, QuantSchedule};
use crate::losses::{
    attention_distill, compose_sdq, cross_entropy, hidden_distill, kld_distill, sdq_ipq_loss, Components, IpqLayer,
    LossVariant,
};
use crate::model::{argmax_rows, bind, encoder_forward, init_params, logits, Batch, ModelParams};
use crate::noise::{partition_blocks, quant_noise_var, sample_mask};
use crate::quant::{fake_quantize, fit_affine_params, qmax, qmin, PackedTensor, QuantSpec};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

const EVAL_BATCH: usize = 256;

/// Weights used at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Fp32,
    Fake(u8),
    Real(u8),
}

impl EvalMode {
    /// `fp32`, `fake:N` or `real:N`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::invalid("eval_mode", format!("expected fp32, fake:N or real:N, got '{s}'"));
        if s == "fp32" {
            return Ok(EvalMode::Fp32);
        }
        let (kind, bits) = s.split_once(':').ok_or_else(bad)?;
        let bits: u8 = bits.parse().map_err(|_| bad())?;
        match kind {
            "fake" => Ok(EvalMode::Fake(bits)),
            "real" => Ok(EvalMode::Real(bits)),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMode::Fp32 => f.write_str("fp32"),
            EvalMode::Fake(b) => write!(f, "fake:{b}"),
            EvalMode::Real(b) => write!(f, "real:{b}"),
        }
    }
}

/// Replaces every quantizable tensor according to `mode`, leaving embedding
/// and classifier weights untouched.
pub fn apply_mode(params: &ModelParams, mode: EvalMode) -> Result<ModelParams> {
    let mut out = params.clone();
    if mode == EvalMode::Fp32 {
        return Ok(out);
    }
    for name in params.quantizable(None) {
        let w = params.tensor(&name)?;
        let q = match mode {
            EvalMode::Fake(bits) => fake_quantize(w, &fit_affine_params(w, bits)?),
            EvalMode::Real(bits) => {
                let packed = PackedTensor::quantize(w, fit_affine_params(w, bits)?);
                crate::quant::dequantize(&packed)?
            }
            EvalMode::Fp32 => unreachable!(),
        };
        *out.tensor_mut(&name)? = q;
    }
    Ok(out)
}

/// Fraction of correct predictions (per position for tagging tasks).
pub fn accuracy(params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for idx in batch_iter(samples.len(), EVAL_BATCH, 0, 0, false)? {
        let (batch, labels) = make_batch(samples, &idx)?;
        let pred = argmax_rows(&logits(params, &batch)?);
        correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
        total += labels.len();
    }
    Ok(correct as f64 / total as f64)
}

pub fn evaluate(ckpt: &Checkpoint, samples: &[Sample], mode: EvalMode) -> Result<f64> {
    accuracy(&apply_mode(&ckpt.to_params()?, mode)?, samples)
}

/// Loss components of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub kld: f64,
    pub att: f64,
    pub hid: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub regime: String,
    pub seed: u64,
    pub config_hash: String,
    pub alpha: f32,
    pub beta: f32,
    /// Accuracy of the deployed model: FP32 for teachers, quantized otherwise.
    pub train_acc: f64,
    pub dev_acc: f64,
    pub test_acc: f64,
    pub dev_acc_fp32: f64,
    pub test_acc_fp32: f64,
    /// Accuracy of the quantized checkpoint (post-training INT-8 for teachers).
    pub dev_acc_quant: f64,
    pub test_acc_quant: f64,
    pub best_epoch: usize,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub wall_ms: u64,
}

impl RunResult {
    /// Equality of everything except wall time.
    pub fn same_metrics(&self, other: &RunResult) -> bool {
        let mut a = self.clone();
        a.wall_ms = other.wall_ms;
        &a == other
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub fp32: Checkpoint,
    pub quantized: Checkpoint,
    pub result: RunResult,
    pub log: Vec<StepLog>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn scalar_of(v: &Option<Var<'_, f32>>) -> f64 {
    v.map_or(0.0, |v| f64::from(v.value().item().unwrap_or(0.0)))
}

/// Parameters being trained plus whatever the regime quantizes.
struct Student {
    params: ModelParams,
    books: IndexMap<String, Codebook>,
    /// Learnable `(scale, offset)` per matrix for the scalar iPQ variant.
    scalars: IndexMap<String, (Tensor, Tensor)>,
}

struct Ctx<'a> {
    config: &'a TrainConfig,
    teacher: Option<&'a ModelParams>,
    variant: LossVariant,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.config.train.seed
    }
}

/// Eval-mode teacher forward on the student's tape, when the regime distills.
fn teacher_forward<'t>(ctx: &Ctx<'_>, tape: &'t Tape, batch: &Batch) -> Result<Option<crate::model::Forward<'t, f32>>> {
    match ctx.teacher {
        Some(t) if ctx.variant.needs_teacher() => {
            let vars = bind(t, tape, false);
            Ok(Some(encoder_forward(&t.config, &vars, batch, None)?))
        }
        _ => Ok(None),
    }
}

fn components<'t>(
    ctx: &Ctx<'_>,
    student: &crate::model::Forward<'t, f32>,
    teacher: Option<&crate::model::Forward<'t, f32>>,
    labels: &[usize],
) -> Result<Components<'t, f32>> {
    let probs = student.logits.softmax(1, 1.0)?;
    let ce = cross_entropy(&probs, labels, ctx.config.sdq.conventional_ce)?;
    let (kld, att, hid) = match teacher {
        Some(t) => (
            Some(kld_distill(&student.logits, &t.logits, ctx.config.sdq.tau)?),
            Some(attention_distill(&student.trace, &t.trace)?),
            Some(hidden_distill(&student.hidden, &t.hidden)?),
        ),
        None => (None, None, None),
    };
    Ok(Components { ce, kld, att, hid })
}

fn check_finite(total: &Var<'_, f32>, step: usize) -> Result<f64> {
    let v = f64::from(total.value().item().unwrap_or(f32::NAN));
    if !v.is_finite() {
        return Err(Error::Diverged { step, loss: v });
    }
    Ok(v)
}

/// One step of teacher or quantization-noise training. Returns the step log.
fn qnat_step(ctx: &Ctx<'_>, s: &mut Student, adam: &mut Adam, batch: &Batch, labels: &[usize], step: usize, epoch: usize, dropout: &mut ChaCha8Rng, noise: bool) -> Result<StepLog> {
    let cfg = ctx.config;
    let tape = Tape::new();
    let leaves = bind(&s.params, &tape, true);
    let mut vars = leaves.clone();
    if noise {
        for (i, name) in s.params.quantizable(None).iter().enumerate() {
            let w = s.params.tensor(name)?;
            let spec = fit_affine_params(w, cfg.quant.bits)?;
            let grid = partition_blocks(w.shape(), cfg.quant.block_rows, cfg.quant.block_cols)?;
            let mask = sample_mask(grid, cfg.quant.noise_rate, mix(ctx.seed(), step as u64, i as u64))?;
            let noised = quant_noise_var(&leaves[name], &mask, &spec)?;
            vars.insert(name.clone(), noised);
        }
    }
    let student = encoder_forward(&cfg.model, &vars, batch, Some(dropout))?;
    let teacher = teacher_forward(ctx, &tape, batch)?;
    let parts = components(ctx, &student, teacher.as_ref(), labels)?;
    let total = compose_sdq(ctx.variant, &parts, &cfg.sdq)?;
    let total_v = check_finite(&total, step)?;
    let grads = tape.backward(total)?;
    let g: Vec<Tensor> = leaves.values().map(|v| grads.wrt(v)).collect();
    adam.step(s.params.iter_mut().zip(&g).map(|((n, p), g)| (n, &mut p.value, g)))?;
    Ok(StepLog {
        step,
        epoch,
        ce: scalar_of(&Some(parts.ce)),
        kld: scalar_of(&parts.kld),
        att: scalar_of(&parts.att),
        hid: scalar_of(&parts.hid),
        total: total_v,
    })
}

fn scale_name(name: &str) -> String {
    format!("{name}.scale")
}

fn offset_name(name: &str) -> String {
    format!("{name}.offset")
}

/// Quantizes the matrices of `layer` from their current values.
fn quantize_layer(ctx: &Ctx<'_>, s: &mut Student, method: IpqMethod, layer: usize) -> Result<()> {
    let cfg = &ctx.config.ipq;
    for (i, name) in s.params.quantizable(Some(layer)).iter().enumerate() {
        let w = s.params.tensor(name)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(ctx.seed(), 0x1b9 + layer as u64, i as u64));
        match method {
            IpqMethod::KMeans | IpqMethod::Em => {
                let subs = split_subvectors(w, cfg.m)?;
                let k = cfg.k.min(subs.len());
                let book = if method == IpqMethod::KMeans {
                    kmeans_fit(&subs, k, cfg.iters, &mut rng)?.codebook
                } else {
                    em_fit(&subs, k, cfg.iters, &mut rng)?.codebook
                };
                s.books.insert(name.clone(), book);
            }
            IpqMethod::Scalar => {
                let spec = fit_affine_params(w, ctx.config.quant.bits)?;
                s.scalars.insert(
                    name.clone(),
                    (Tensor::scalar(spec.scale()), Tensor::scalar(spec.offset())),
                );
            }
        }
    }
    Ok(())
}

fn ipq_step(ctx: &Ctx<'_>, s: &mut Student, sched: &QuantSchedule, method: IpqMethod, adam: &mut Adam, scalar_adam: &mut Adam, batch: &Batch, labels: &[usize], step: usize, epoch: usize, dropout: &mut ChaCha8Rng) -> Result<StepLog> {
    let cfg = ctx.config;
    let bits = cfg.quant.bits;
    let tape = Tape::new();
    let leaves = bind(&s.params, &tape, true);
    let mut vars = leaves.clone();
    let quantized: Vec<usize> = sched.quantized_layers().collect();
    let mut approx_leaves: IndexMap<String, Var<'_, f32>> = IndexMap::new();
    let mut scalar_leaves: IndexMap<String, (Var<'_, f32>, Var<'_, f32>)> = IndexMap::new();
    let mut pairs: Vec<Vec<(Var<'_, f32>, Var<'_, f32>)>> = vec![Vec::new(); quantized.len()];
    for (slot, &l) in quantized.iter().enumerate() {
        for name in s.params.quantizable(Some(l)) {
            let w = &leaves[&name];
            let approx = match method {
                IpqMethod::KMeans | IpqMethod::Em => {
                    let a = tape.leaf(reconstruct(&s.books[&name]));
                    approx_leaves.insert(name.clone(), a);
                    pairs[slot].push((tape.constant((*w.value()).clone()), a));
                    a
                }
                IpqMethod::Scalar => {
                    let (sc, of) = &s.scalars[&name];
                    let (sv, ov) = (tape.leaf(sc.clone()), tape.leaf(of.clone()));
                    scalar_leaves.insert(name.clone(), (sv, ov));
                    let fq = w.fake_quant(&sv, &ov, qmin(bits), qmax(bits))?;
                    pairs[slot].push((*w, fq));
                    fq
                }
            };
            vars.insert(name, approx);
        }
    }

    let student = encoder_forward(&cfg.model, &vars, batch, Some(dropout))?;
    let teacher = teacher_forward(ctx, &tape, batch)?;
    let parts = components(ctx, &student, teacher.as_ref(), labels)?;
    let empty: Vec<Var<'_, f32>> = Vec::new();
    let layers: Vec<IpqLayer<'_, '_, f32>> = quantized
        .iter()
        .zip(pairs)
        .map(|(&l, weights)| {
            let (sa, ta) = match (&teacher, ctx.variant) {
                (Some(t), LossVariant::Att) => (student.trace[l].as_slice(), t.trace[l].as_slice()),
                _ => (empty.as_slice(), empty.as_slice()),
            };
            IpqLayer {
                weights,
                student_att: sa,
                teacher_att: ta,
            }
        })
        .collect();
    let ipq_term = sdq_ipq_loss(&tape, &layers, cfg.sdq.beta, cfg.model.layers, sched.finetuned)?;
    let mut total = parts.ce.add(&ipq_term)?;
    if ctx.variant == LossVariant::Kld {
        let kld = parts.kld.ok_or_else(|| Error::invalid("train_student", "KLD regime needs a teacher"))?;
        let w = cfg.sdq.alpha * cfg.sdq.tau * cfg.sdq.tau;
        total = total.add(&kld.scale(w))?;
    }
    let total_v = check_finite(&total, step)?;
    let grads = tape.backward(total)?;

    let g: Vec<Tensor> = leaves.values().map(|v| grads.wrt(v)).collect();
    adam.step(
        s.params
            .iter_mut()
            .zip(&g)
            .filter(|((n, _), _)| !approx_leaves.contains_key(*n))
            .map(|((n, p), g)| (n, &mut p.value, g)),
    )?;
    for (name, a) in &approx_leaves {
        let updated = codeword_grad_update(&s.books[name], &grads.wrt(a), cfg.ipq.lr)?;
        s.books.insert(name.clone(), updated);
    }
    if !scalar_leaves.is_empty() {
        let sg: Vec<(String, Tensor, String, Tensor)> = scalar_leaves
            .iter()
            .map(|(n, (sv, ov))| (scale_name(n), grads.wrt(sv), offset_name(n), grads.wrt(ov)))
            .collect();
        let updates = s
            .scalars
            .values_mut()
            .zip(&sg)
            .flat_map(|((sc, of), (sn, sgrad, on, ograd))| [(sn.as_str(), sc, sgrad), (on.as_str(), of, ograd)]);
        scalar_adam.step(updates)?;
        for (sc, _) in s.scalars.values_mut() {
            let v = &mut sc.data_mut()[0];
            *v = v.max(1e-8);
        }
    }
    Ok(StepLog {
        step,
        epoch,
        ce: scalar_of(&Some(parts.ce)),
        kld: scalar_of(&parts.kld),
        att: scalar_of(&parts.att),
        hid: scalar_of(&parts.hid),
        total: total_v,
    })
}

fn check_dataset(config: &TrainConfig, ds: &Dataset) -> Result<()> {
    let m = &config.model;
    if ds.vocab != m.vocab || ds.classes != m.classes || ds.task != m.task || ds.max_len > m.max_len {
        return Err(Error::invalid(
            "train",
            format!(
                "dataset (task {:?}, vocab {}, classes {}, max_len {}) does not fit the model config",
                ds.task, ds.vocab, ds.classes, ds.max_len
            ),
        ));
    }
    if ds.train.is_empty() || ds.dev.is_empty() {
        return Err(Error::invalid("train", "dataset needs non-empty train and dev splits"));
    }
    Ok(())
}

fn same_architecture(a: &crate::model::ModelConfig, b: &crate::model::ModelConfig) -> bool {
    (a.layers, a.heads, a.hidden, a.ffn, a.vocab, a.max_len, a.classes, a.task)
        == (b.layers, b.heads, b.hidden, b.ffn, b.vocab, b.max_len, b.classes, b.task)
}

/// Fine-tunes a full-precision teacher with cross-entropy only, keeping the
/// parameters with the best dev accuracy.
pub fn train_teacher(config: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    if !config.train.regime.is_teacher() {
        return Err(Error::invalid("train_teacher", format!("regime is {}, expected teacher", config.train.regime)));
    }
    run(config, None, ds)
}

/// Trains a quantization-aware student, distilling from `teacher` when the
/// regime asks for it. The student starts from the same initialization as
/// the teacher did (same seed). The teacher is never modified.
pub fn train_student(config: &TrainConfig, teacher: Option<&Checkpoint>, ds: &Dataset) -> Result<TrainOutcome> {
    let regime = config.train.regime;
    if regime.is_teacher() {
        return Err(Error::invalid("train_student", "regime teacher is trained with train_teacher"));
    }
    if regime.needs_teacher() && teacher.is_none() {
        return Err(Error::invalid("train_student", format!("regime {regime} distills and needs a teacher checkpoint")));
    }
    let teacher_params = match teacher {
        Some(t) if regime.needs_teacher() => {
            if !same_architecture(&t.model, &config.model) {
                return Err(Error::invalid("train_student", "teacher architecture differs from the student config"));
            }
            Some(t.to_params()?)
        }
        _ => None,
    };
    run(config, teacher_params.as_ref(), ds)
}

fn run(config: &TrainConfig, teacher: Option<&ModelParams>, ds: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(config, ds)?;
    let start = Instant::now();
    let t = &config.train;
    let regime = t.regime;
    let bits = config.quant.bits;
    let ctx = Ctx {
        config,
        teacher,
        variant: regime.loss_variant(),
    };
    let mut s = Student {
        params: init_params(&config.model, t.seed)?,
        books: IndexMap::new(),
        scalars: IndexMap::new(),
    };
    let mut adam = Adam::new(AdamConfig::new(t.lr, t.warmup_steps));
    let mut dropout = ChaCha8Rng::seed_from_u64(mix(t.seed, 0xd0, 0));
    let mut log = Vec::new();
    let mut epoch_loss = Vec::with_capacity(t.epochs);
    let mut step = 0usize;

    let mut run_epoch = |epoch: usize, f: &mut dyn FnMut(&Batch, &[usize], usize) -> Result<StepLog>| -> Result<()> {
        let mut sum = 0.0;
        let batches = batch_iter(ds.train.len(), t.batch_size, t.seed, epoch, true)?;
        for idx in &batches {
            let (batch, labels) = make_batch(&ds.train, idx)?;
            let rec = f(&batch, &labels, step)?;
            sum += rec.total;
            log.push(rec);
            step += 1;
        }
        epoch_loss.push(sum / batches.len().max(1) as f64);
        Ok(())
    };

    let (fp32_params, quantized_params, best_epoch) = match regime.ipq_method() {
        None => {
            let select = if regime.is_teacher() { EvalMode::Fp32 } else { EvalMode::Real(bits) };
            let mut best = (accuracy(&apply_mode(&s.params, select)?, &ds.dev)?, s.params.clone(), 0);
            for epoch in 0..t.epochs {
                run_epoch(epoch, &mut |b, y, st| {
                    qnat_step(&ctx, &mut s, &mut adam, b, y, st, epoch, &mut dropout, !regime.is_teacher())
                })?;
                let acc = accuracy(&apply_mode(&s.params, select)?, &ds.dev)?;
                if acc > best.0 {
                    best = (acc, s.params.clone(), epoch + 1);
                }
            }
            (best.1, None, best.2)
        }
        Some(method) => {
            let mut scalar_adam = Adam::new(AdamConfig::new(t.lr, 0));
            let mut sched = QuantSchedule::uniform(config.model.layers, t.epochs);
            for epoch in 0..t.epochs {
                let next = sched.advance(epoch)?;
                for l in sched.quantized_layers().end..next.quantized_layers().end {
                    quantize_layer(&ctx, &mut s, method, l)?;
                }
                sched = next;
                run_epoch(epoch, &mut |b, y, st| {
                    ipq_step(&ctx, &mut s, &sched, method, &mut adam, &mut scalar_adam, b, y, st, epoch, &mut dropout)
                })?;
            }
            let last = sched.advance(t.epochs)?;
            for l in sched.quantized_layers().end..last.quantized_layers().end {
                quantize_layer(&ctx, &mut s, method, l)?;
            }
            let mut storages = Vec::new();
            for name in s.params.quantizable(None) {
                let storage = match method {
                    IpqMethod::KMeans | IpqMethod::Em => Storage::Pq(s.books[&name].clone()),
                    IpqMethod::Scalar => {
                        let (sc, of) = &s.scalars[&name];
                        let spec = QuantSpec::new(bits, sc.data()[0], of.data()[0])?;
                        Storage::Affine(PackedTensor::quantize(s.params.tensor(&name)?, spec))
                    }
                };
                storages.push((name, storage));
            }
            (s.params.clone(), Some(storages), t.epochs)
        }
    };

    let meta = |dev_accuracy: f64| Metadata {
        seed: t.seed,
        regime: regime.name().to_string(),
        dev_accuracy,
        config_hash: config.hash(),
        config: config.resolved(),
    };
    let mut fp32 = Checkpoint::from_params(&fp32_params, meta(0.0));
    let mut quantized = match quantized_params {
        None => fp32.quantize_affine(bits)?,
        Some(storages) => {
            let mut q = fp32.clone();
            for (name, storage) in storages {
                q.set_storage(&name, storage)?;
            }
            q
        }
    };
    let fp32_model = fp32.to_params()?;
    let quant_model = quantized.to_params()?;
    let dev_acc_fp32 = accuracy(&fp32_model, &ds.dev)?;
    let dev_acc_quant = accuracy(&quant_model, &ds.dev)?;
    fp32.metadata.dev_accuracy = dev_acc_fp32;
    quantized.metadata.dev_accuracy = dev_acc_quant;
    let test_acc_fp32 = accuracy(&fp32_model, &ds.test)?;
    let test_acc_quant = accuracy(&quant_model, &ds.test)?;
    let deployed = if regime.is_teacher() { &fp32_model } else { &quant_model };
    let (dev_acc, test_acc) = if regime.is_teacher() {
        (dev_acc_fp32, test_acc_fp32)
    } else {
        (dev_acc_quant, test_acc_quant)
    };
    let result = RunResult {
        regime: regime.name().to_string(),
        seed: t.seed,
        config_hash: config.hash(),
        alpha: config.sdq.alpha,
        beta: config.sdq.beta,
        train_acc: accuracy(deployed, &ds.train)?,
        dev_acc,
        test_acc,
        dev_acc_fp32,
        test_acc_fp32,
        dev_acc_quant,
        test_acc_quant,
        best_epoch,
        epoch_loss,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok(TrainOutcome {
        fp32,
        quantized,
        result,
        log,
    })
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub best: RunResult,
    pub best_outcome: TrainOutcome,
    /// One row per `(alpha, beta)`, in grid order.
    pub table: Vec<RunResult>,
}

/// Trains one student per `(alpha, beta)` and keeps the one with the best
/// quantized dev accuracy (first wins ties).
pub fn grid_search(base: &TrainConfig, alphas: &[f32], betas: &[f32], teacher: Option<&Checkpoint>, ds: &Dataset) -> Result<GridResult> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::invalid("grid_search", "alpha and beta grids must be non-empty"));
    }
    let mut table = Vec::with_capacity(alphas.len() * betas.len());
    let mut best: Option<TrainOutcome> = None;
    for &alpha in alphas {
        for &beta in betas {
            let mut config = base.clone();
            config.sdq.alpha = alpha;
            config.sdq.beta = beta;
            let outcome = train_student(&config, teacher, ds)?;
            table.push(outcome.result.clone());
            if best.as_ref().is_none_or(|b| outcome.result.dev_acc_quant > b.result.dev_acc_quant) {
                best = Some(outcome);
            }
        }
    }
    let best_outcome = best.expect("grid is non-empty");
    Ok(GridResult {
        best: best_outcome.result.clone(),
        best_outcome,
        table,
    })
}

/// `step,epoch,ce,kld,att,hid,total`; absent components are 0.
pub fn log_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,epoch,ce,kld,att,hid,total\n");
    for s in log {
        out.push_str(&format!("{},{},{},{},{},{},{}\n", s.step, s.epoch, s.ce, s.kld, s.att, s.hid, s.total));
    }
    out
}

/// `regime,alpha,beta,seed,dev_acc_fp32,dev_acc_int8,test_acc_int8`; the
/// int8 columns hold the accuracy at the configured bit width.
pub fn results_csv(results: &[RunResult]) -> String {
    let mut out = String::from("regime,alpha,beta,seed,dev_acc_fp32,dev_acc_int8,test_acc_int8\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.regime, r.alpha, r.beta, r.seed, r.dev_acc_fp32, r.dev_acc_quant, r.test_acc_quant
        ));
    }
    out
}
