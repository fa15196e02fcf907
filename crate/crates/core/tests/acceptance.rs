//! Acceptance report: one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdq_core::analysis::{bit_sweep, compression_report, layer_error_stats};
use sdq_core::checkpoint::Storage;
use sdq_core::config::{Regime, TrainConfig};
use sdq_core::data::{generate_classification_task, Dataset};
use sdq_core::ipq::{kmeans_fit, reconstruct, reconstruction_error, split_subvectors};
use sdq_core::losses::{kld, kld_distill};
use sdq_core::model::ModelParams;
use sdq_core::noise::{apply_quant_noise, partition_blocks, sample_mask};
use sdq_core::quant::{fake_quantize, fit_affine_params, SUPPORTED_BITS};
use sdq_core::tensor::Tape;
use sdq_core::train::{evaluate, train_student, train_teacher, EvalMode, TrainOutcome};
use sdq_core::Tensor;

use common::{
    binomial_interval, brute_force_errors, brute_force_reconstruction_error, few_distinct_matrix, fuzz_tensor,
    loss_gradient_errors, model_gradient_errors, quantizer_fuzz, random_checkpoint_pairs,
};

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("[{}] {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let (mut model, mut loss) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        for (_, e) in model_gradient_errors(seed).unwrap() {
            model = model.max(e);
        }
        for (_, e) in loss_gradient_errors(seed).unwrap() {
            loss = loss.max(e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = model <= 1e-3 && loss <= 1e-4 && secs < 60.0;
    r.line(
        1,
        "gradient suite",
        pass,
        format!("worst model-level {model:.2e} (<= 1e-3), loss-level {loss:.2e} (<= 1e-4), 10 seeds, {secs:.1}s (< 60s)"),
    );
}

fn quantizer_invariants(r: &mut Report) {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for bits in SUPPORTED_BITS {
        let f = quantizer_fuzz(bits, 10_000, 1000 + u64::from(bits));
        let bad = f.grid_violations + f.idempotence_failures + f.real_fake_mismatches + f.too_many_values;
        pass &= bad == 0;
        parts.push(format!(
            "{bits}-bit: {} tensors, max |fq-w|/s {:.4}, {} grid / {} idempotence / {} real-fake / {} distinct-count failures",
            f.tensors, f.worst_grid_ratio, f.grid_violations, f.idempotence_failures, f.real_fake_mismatches, f.too_many_values
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    r.line(2, "quantizer invariants", pass, format!("{}; {secs:.1}s (< 60s)", parts.join("; ")));
}

fn kld_correctness(r: &mut Report) {
    let tape = Tape::<f64>::new();
    let t = |v: &[f64]| Tensor::new(vec![1, v.len()], v.to_vec()).unwrap();
    let y = tape.constant(t(&[0.2, 0.3, 0.5]));
    let same = kld(&y, &y).unwrap().value().item().unwrap();
    let hand = kld(&tape.constant(t(&[0.5, 0.5])), &tape.constant(t(&[1.0, 0.0]))).unwrap().value().item().unwrap();
    let hand_gap = (hand - std::f64::consts::LN_2).abs();

    // the tau^2-weighted term has student-logit gradient tau (y^S/tau - y^T/tau) * tau = tau (y^S - y^T)
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut signs_ok = true;
    for tau in [1.0, 2.0, 4.0] {
        for _ in 0..20 {
            let tape = Tape::<f64>::new();
            let zs = tape.leaf(Tensor::from_fn(&[1, 4], |_| rng.random_range(-3.0..3.0)));
            let zt = tape.constant(Tensor::from_fn(&[1, 4], |_| rng.random_range(-3.0..3.0)));
            let loss = kld_distill(&zs, &zt, tau).unwrap().scale(tau * tau);
            let g = tape.backward(loss).unwrap().wrt(&zs);
            let ys = zs.softmax(1, tau).unwrap().value();
            let yt = zt.softmax(1, tau).unwrap().value();
            for i in 0..4 {
                let paper = tau * (ys.data()[i] / tau - yt.data()[i] / tau) * tau;
                worst = worst.max((g.data()[i] - paper).abs());
            }
        }
        let tape = Tape::<f64>::new();
        let zs = tape.leaf(t(&[0.4, -0.2]));
        let zt = tape.constant(t(&[-1.0, 1.0]));
        let g = tape.backward(kld_distill(&zs, &zt, tau).unwrap()).unwrap().wrt(&zs);
        let gap = zs.softmax(1, tau).unwrap().value().data()[0] - zt.softmax(1, tau).unwrap().value().data()[0];
        signs_ok &= g.data()[0].signum() == gap.signum();
    }
    let pass = same == 0.0 && hand_gap <= 1e-6 && worst <= 1e-5 && signs_ok;
    r.line(
        3,
        "KLD correctness",
        pass,
        format!(
            "D(y,y) = {same}, hand case {hand:.9} (|gap to ln 2| {hand_gap:.1e} <= 1e-6), autodiff vs tau(y^S/tau - y^T/tau)·tau max gap {worst:.1e} (<= 1e-5), two-class sign {}",
            if signs_ok { "ok" } else { "wrong" }
        ),
    );
}

fn ipq_checks(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut monotone_fail, mut fits, mut brute_fail) = (0, 0, 0);
    while fits < 100 {
        let w = fuzz_tensor(&mut rng);
        let m = rng.random_range(1..=w.shape()[0].min(4));
        let subs = split_subvectors(&w, m).unwrap();
        let k = rng.random_range(1..=subs.len().min(8));
        let fit = kmeans_fit(&subs, k, 15, &mut rng).unwrap();
        if fit.history.windows(2).any(|p| p[1] > p[0]) {
            monotone_fail += 1;
        }
        if reconstruction_error(&w, &fit.codebook).unwrap() != brute_force_reconstruction_error(&w, &fit.codebook) {
            brute_fail += 1;
        }
        fits += 1;
    }
    let mut exact_fail = 0;
    for trial in 0..100 {
        let m = 1 + trial % 4;
        let k = 1 + trial % 6;
        let w = few_distinct_matrix(&mut rng, m * (1 + trial % 3), 2 + trial % 7, m, k);
        let subs = split_subvectors(&w, m).unwrap();
        let fit = kmeans_fit(&subs, k.min(subs.len()), 20, &mut rng).unwrap();
        if reconstruct(&fit.codebook) != w {
            exact_fail += 1;
        }
    }
    let pass = monotone_fail == 0 && exact_fail == 0 && brute_fail == 0;
    r.line(
        4,
        "iPQ",
        pass,
        format!(
            "{monotone_fail}/{fits} fits with an objective increase, {exact_fail}/100 inexact reconstructions with <= k distinct subvectors, {brute_fail}/{fits} mismatches against brute-force error"
        ),
    );
}

fn quant_noise_checks(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut identity_fail, mut full_fail) = (0, 0);
    for i in 0..200 {
        let w = fuzz_tensor(&mut rng);
        let spec = fit_affine_params(&w, SUPPORTED_BITS[i % 3]).unwrap();
        let grid = partition_blocks(w.shape(), 1 + i % 4, 1 + i % 3).unwrap();
        if apply_quant_noise(&w, &sample_mask(grid, 0.0, i as u64).unwrap(), &spec).unwrap() != w {
            identity_fail += 1;
        }
        if apply_quant_noise(&w, &sample_mask(grid, 1.0, i as u64).unwrap(), &spec).unwrap() != fake_quantize(&w, &spec) {
            full_fail += 1;
        }
    }
    let grid = partition_blocks(&[256, 256], 8, 8).unwrap();
    let n = grid.len();
    let (lo, hi) = binomial_interval(n, 0.5, 0.99);
    let counts: Vec<usize> = (0..20).map(|s| sample_mask(grid, 0.5, s).unwrap().selected_count()).collect();
    let outside = counts.iter().filter(|&&c| c < lo || c > hi).count();
    let pass = identity_fail == 0 && full_fail == 0 && outside == 0;
    r.line(
        5,
        "QuantNoise",
        pass,
        format!(
            "p=0 identity failures {identity_fail}/200, p=1 full-quantization failures {full_fail}/200; p=0.5 over {n} blocks: 99% interval [{lo}, {hi}], {outside}/20 seeds outside (counts {}..{})",
            counts.iter().min().unwrap(),
            counts.iter().max().unwrap()
        ),
    );
}

struct SeedRun {
    teacher: TrainOutcome,
    ptq: f64,
    qnat: f64,
    kld: f64,
    att_kld: f64,
    sweep: Vec<(Option<u8>, f64)>,
}

fn desk_config(seed: u64, regime: Regime) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.train.seed = seed;
    c.train.regime = regime;
    c
}

fn desk_dataset(seed: u64) -> Dataset {
    generate_classification_task(seed, 2000, 64, 16, 2).unwrap()
}

fn desk_experiment(r: &mut Report) -> Vec<SeedRun> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in 0..5 {
        let ds = desk_dataset(seed);
        let teacher = train_teacher(&desk_config(seed, Regime::Teacher), &ds).unwrap();
        let ptq = evaluate(&teacher.fp32, &ds.test, EvalMode::Real(8)).unwrap();
        let student = |regime| train_student(&desk_config(seed, regime), Some(&teacher.fp32), &ds).unwrap();
        let qnat = student(Regime::Qnat).result.test_acc_quant;
        let kld = student(Regime::QnatKld).result.test_acc_quant;
        let att = student(Regime::QnatAttKld);
        let sweep = bit_sweep(&att.fp32, &[8, 4, 2], &ds.test, false)
            .unwrap()
            .into_iter()
            .map(|row| (row.bits, row.accuracy))
            .collect();
        runs.push(SeedRun {
            ptq,
            qnat,
            kld,
            att_kld: att.result.test_acc_quant,
            sweep,
            teacher,
        });
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = |f: &dyn Fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let teacher_acc: Vec<f64> = runs.iter().map(|s| s.teacher.result.test_acc_fp32).collect();
    let a_ok = teacher_acc.iter().all(|&a| a >= 0.95);
    let (ptq, qnat, kld, att) = (mean(&|s| s.ptq), mean(&|s| s.qnat), mean(&|s| s.kld), mean(&|s| s.att_kld));
    let b_ok = att >= kld - 0.005 && att >= qnat && qnat >= ptq - 0.005;
    let at = |bits: Option<u8>| mean(&|s| s.sweep.iter().find(|row| row.0 == bits).unwrap().1);
    let (fp, a8, a4, a2) = (at(None), at(Some(8)), at(Some(4)), at(Some(2)));
    let c_ok = a2 <= a8 + 0.02 && (a8 - fp).abs() <= 0.03;
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    r.line(
        6,
        "desk-scale SDQ experiment",
        a_ok && b_ok && c_ok && secs <= 1800.0,
        format!(
            "(a) teacher test acc per seed [{}] (>= 0.95); (b) mean INT-8 test acc att-kld {att:.4}, kld {kld:.4}, qnat {qnat:.4}, ptq {ptq:.4}; (c) att-kld sweep fp32 {fp:.4}, 8-bit {a8:.4}, 4-bit {a4:.4}, 2-bit {a2:.4}; {secs:.0}s (<= 1800s)",
            fmt(&teacher_acc)
        ),
    );
    runs
}

fn exclusion_rule(r: &mut Report) {
    let ds = generate_classification_task(9, 300, 64, 16, 2).unwrap();
    let mut base = TrainConfig::default();
    base.train.epochs = 2;
    base.train.warmup_steps = 5;
    let teacher = train_teacher(&base, &ds).unwrap();
    let mut checked = 0;
    let mut offenders = Vec::new();
    for regime in Regime::ALL {
        let mut c = base.clone();
        c.train.regime = regime;
        let out = if regime.is_teacher() {
            teacher.clone()
        } else {
            train_student(&c, Some(&teacher.fp32), &ds).unwrap()
        };
        for (name, rec) in out.fp32.records() {
            if rec.kind.is_excluded() {
                let q = out.quantized.record(name).unwrap();
                let same = match (&rec.storage, &q.storage) {
                    (Storage::Fp32(a), Storage::Fp32(b)) => {
                        a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits()))
                    }
                    _ => false,
                };
                if !same {
                    offenders.push(format!("{regime}:{name}"));
                }
                checked += 1;
            }
        }
    }
    r.line(
        7,
        "exclusion rule",
        offenders.is_empty(),
        format!(
            "{checked} embedding/classifier records over {} regimes, {} differ{}",
            Regime::ALL.len(),
            offenders.len(),
            if offenders.is_empty() { String::new() } else { format!(": {}", offenders.join(", ")) }
        ),
    );
}

fn compression(r: &mut Report, runs: &[SeedRun]) {
    let fp32 = &runs[0].teacher.fp32;
    let q = fp32.quantize_affine(8).unwrap();
    let rep = compression_report(fp32, &q).unwrap();
    let (mut quantized, mut rest) = (0usize, 0usize);
    for (_, kind, _, shape) in ModelParams::<f32>::layout(&fp32.model) {
        let n: usize = shape.iter().product();
        if !kind.is_excluded() && shape.len() == 2 {
            quantized += n;
        } else {
            rest += n;
        }
    }
    let predicted = (quantized + 4 * rest) as f64;
    let predicted_ratio = 4.0 * (quantized + rest) as f64 / predicted;
    let size_gap = (rep.quant_total as f64 - predicted).abs() / predicted;
    let ratio_gap = (rep.ratio - predicted_ratio).abs() / predicted_ratio;
    r.line(
        8,
        "compression accounting",
        size_gap <= 0.05 && ratio_gap <= 0.05,
        format!(
            "INT-8 payload {} B vs census {predicted} B (gap {:.2}% <= 5%), ratio {:.3} vs {predicted_ratio:.3} (gap {:.2}%); whole files {} B -> {} B",
            rep.quant_total,
            100.0 * size_gap,
            rep.ratio,
            100.0 * ratio_gap,
            rep.fp32_file_bytes,
            rep.quant_file_bytes
        ),
    );
}

fn determinism(r: &mut Report) {
    let ds = generate_classification_task(12, 400, 64, 16, 2).unwrap();
    let mut base = TrainConfig::default();
    base.train.epochs = 2;
    base.train.seed = 7;
    let teacher = train_teacher(&base, &ds).unwrap();
    let regimes = [Regime::Teacher, Regime::QnatAttKld, Regime::QnatHid, Regime::IpqEmAtt, Regime::IpqKld, Regime::IpqScalarKld];
    let mut differ = Vec::new();
    for regime in regimes {
        let mut c = base.clone();
        c.train.regime = regime;
        let run = || -> TrainOutcome {
            if regime.is_teacher() {
                train_teacher(&c, &ds).unwrap()
            } else {
                train_student(&c, Some(&teacher.fp32), &ds).unwrap()
            }
        };
        let (a, b) = (run(), run());
        if !a.result.same_metrics(&b.result) || a.quantized.to_bytes() != b.quantized.to_bytes() || a.log != b.log {
            differ.push(regime.name());
        }
    }
    r.line(
        9,
        "determinism",
        differ.is_empty(),
        format!("{} regimes run twice, {} differ {:?}", regimes.len(), differ.len(), differ),
    );
}

fn analysis_oracle(r: &mut Report) {
    let pairs = random_checkpoint_pairs(10, 10);
    let mut mismatched = 0;
    let mut rows = 0;
    for (fp32, q) in &pairs {
        let report = layer_error_stats(fp32, q).unwrap();
        let oracle = brute_force_errors(fp32, q);
        rows += oracle.len();
        let same = report.rows.len() == oracle.len()
            && report.rows.iter().zip(&oracle).all(|(a, b)| {
                (a.layer, a.kind, a.stats.mean_abs, a.stats.std, a.stats.fnorm, a.stats.count) == *b
            });
        if !same {
            mismatched += 1;
        }
    }
    r.line(
        10,
        "analysis oracle",
        mismatched == 0,
        format!("{} checkpoint pairs ({rows} rows), {mismatched} differ from the brute-force recomputation", pairs.len()),
    );
}

fn main() {
    let start = Instant::now();
    let mut r = Report { failed: 0 };
    gradient_suite(&mut r);
    quantizer_invariants(&mut r);
    kld_correctness(&mut r);
    ipq_checks(&mut r);
    quant_noise_checks(&mut r);
    let runs = desk_experiment(&mut r);
    exclusion_rule(&mut r);
    compression(&mut r, &runs);
    determinism(&mut r);
    analysis_oracle(&mut r);
    println!("acceptance: {} of 10 criteria failed ({:.0}s)", r.failed, start.elapsed().as_secs_f64());
    if r.failed > 0 {
        std::process::exit(1);
    }
}
