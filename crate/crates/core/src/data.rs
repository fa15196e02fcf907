//! Synthetic classification and tagging tasks.
//!
//! Vocabulary layout: `0` is padding, `1` is the CLS token, the next
//! [`NEUTRAL_TOKENS`] ids are label-free fillers and the rest are marker
//! tokens split evenly between the classes.
//!
//! In the classification task the label is the strict plurality class of the
//! markers sitting at [`SLOTS`] fixed positions. The remaining positions are
//! filled so that every class has the same number of markers overall, which
//! leaves a bag-of-words model with nothing to go on.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Batch, TaskKind, CLS};

pub const NEUTRAL_TOKENS: usize = 4;
pub const SLOTS: usize = 5;
const FIRST_NEUTRAL: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub tokens: Vec<u32>,
    /// One label for sentence tasks, one per position for tagging.
    pub labels: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub task: TaskKind,
    pub vocab: usize,
    pub classes: usize,
    pub max_len: usize,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Header line followed by `tokens<TAB>labels` records, train then dev then test.
    pub fn to_text(&self) -> String {
        let task = match self.task {
            TaskKind::Sentence => "sentence",
            TaskKind::Token => "token",
        };
        let mut out = format!(
            "sdq-data task={task} vocab={} classes={} max_len={} train={} dev={} test={}\n",
            self.vocab,
            self.classes,
            self.max_len,
            self.train.len(),
            self.dev.len(),
            self.test.len()
        );
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        for s in self.train.iter().chain(&self.dev).chain(&self.test) {
            let _ = writeln!(out, "{}\t{}", join(&s.tokens), join(&s.labels));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::Dataset { line, reason };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("sdq-data") {
            return Err(bad(1, "missing 'sdq-data' header".into()));
        }
        let mut kv = std::collections::HashMap::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| bad(1, format!("malformed header field '{f}'")))?;
            kv.insert(k, v);
        }
        let num = |key: &str| -> Result<usize> {
            kv.get(key)
                .ok_or_else(|| bad(1, format!("header lacks '{key}'")))?
                .parse()
                .map_err(|_| bad(1, format!("header field '{key}' is not a number")))
        };
        let task = match kv.get("task").copied() {
            Some("sentence") => TaskKind::Sentence,
            Some("token") => TaskKind::Token,
            other => return Err(bad(1, format!("unknown task {other:?}"))),
        };
        let (vocab, classes, max_len) = (num("vocab")?, num("classes")?, num("max_len")?);
        let counts = [num("train")?, num("dev")?, num("test")?];

        let parse_ints = |s: &str, line: usize| -> Result<Vec<u32>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(line, format!("'{t}' is not an integer"))))
                .collect()
        };
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let no = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let (toks, labs) = line
                .split_once('\t')
                .ok_or_else(|| bad(no, "expected 'tokens<TAB>labels'".into()))?;
            let sample = Sample {
                tokens: parse_ints(toks, no)?,
                labels: parse_ints(labs, no)?,
            };
            validate_sample(&sample, task, vocab, classes, max_len).map_err(|r| bad(no, r))?;
            samples.push(sample);
        }
        if samples.len() != counts.iter().sum::<usize>() {
            return Err(bad(
                1,
                format!("header promises {} records, file has {}", counts.iter().sum::<usize>(), samples.len()),
            ));
        }
        let test = samples.split_off(counts[0] + counts[1]);
        let dev = samples.split_off(counts[0]);
        Ok(Self {
            task,
            vocab,
            classes,
            max_len,
            train: samples,
            dev,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn validate_sample(s: &Sample, task: TaskKind, vocab: usize, classes: usize, max_len: usize) -> std::result::Result<(), String> {
    if s.tokens.is_empty() || s.tokens.len() > max_len {
        return Err(format!("sequence length {} outside 1..={max_len}", s.tokens.len()));
    }
    if let Some(t) = s.tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(format!("token {t} outside vocabulary {vocab}"));
    }
    let expected = match task {
        TaskKind::Sentence => 1,
        TaskKind::Token => s.tokens.len(),
    };
    if s.labels.len() != expected {
        return Err(format!("expected {expected} labels, got {}", s.labels.len()));
    }
    if let Some(l) = s.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(format!("label {l} outside {classes} classes"));
    }
    Ok(())
}

/// Positions whose markers decide the label of a length-`len` sequence.
pub fn slot_positions(len: usize) -> Vec<usize> {
    (0..SLOTS).map(|i| 1 + i * (len - 1) / SLOTS).collect()
}

fn markers_per_class(vocab: usize, classes: usize) -> usize {
    (vocab - FIRST_NEUTRAL - NEUTRAL_TOKENS) / classes
}

fn marker_class(token: u32, vocab: usize, classes: usize) -> Option<usize> {
    let per = markers_per_class(vocab, classes);
    let first = FIRST_NEUTRAL + NEUTRAL_TOKENS;
    let t = token as usize;
    (t >= first && t < first + per * classes).then(|| (t - first) / per)
}

/// Independent rule: strict plurality class of the slot markers.
pub fn classification_rule(tokens: &[u32], vocab: usize, classes: usize) -> Option<u32> {
    let mut counts = vec![0usize; classes];
    for p in slot_positions(tokens.len()) {
        counts[marker_class(tokens[p], vocab, classes)?] += 1;
    }
    let max = *counts.iter().max()?;
    let winners: Vec<usize> = (0..classes).filter(|&c| counts[c] == max).collect();
    (winners.len() == 1).then(|| winners[0] as u32)
}

/// Label of each position: `(tok_i + tok_{i−1}) mod d_y`, with `tok_{−1} = 0`.
pub fn tagging_rule(tokens: &[u32], classes: usize) -> Vec<u32> {
    (0..tokens.len())
        .map(|i| {
            let prev = if i == 0 { 0 } else { tokens[i - 1] };
            (tokens[i] + prev) % classes as u32
        })
        .collect()
}

fn check_sizes(op: &'static str, size: usize, vocab: usize, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::invalid(op, format!("need at least 2 classes, got {classes}")));
    }
    if size < classes * 10 {
        return Err(Error::invalid(
            op,
            format!("size {size} is below {} (10 per class), cannot balance", classes * 10),
        ));
    }
    if vocab < FIRST_NEUTRAL + NEUTRAL_TOKENS + 2 * classes {
        return Err(Error::invalid(op, format!("vocab {vocab} too small for {classes} classes")));
    }
    Ok(())
}

fn marker(rng: &mut impl Rng, class: usize, vocab: usize, classes: usize) -> u32 {
    let per = markers_per_class(vocab, classes);
    (FIRST_NEUTRAL + NEUTRAL_TOKENS + class * per + rng.random_range(0..per)) as u32
}

fn classification_sample(rng: &mut impl Rng, label: usize, len: usize, vocab: usize, classes: usize) -> Vec<u32> {
    let slots = slot_positions(len);
    let slot_classes: Vec<usize> = loop {
        let mut c: Vec<usize> = (0..SLOTS).map(|_| rng.random_range(0..classes)).collect();
        // give the label a head start so rejection terminates quickly
        c[rng.random_range(0..SLOTS)] = label;
        let mut counts = vec![0usize; classes];
        c.iter().for_each(|&k| counts[k] += 1);
        if (0..classes).all(|k| k == label || counts[k] < counts[label]) {
            break c;
        }
    };
    let mut counts = vec![0usize; classes];
    slot_classes.iter().for_each(|&k| counts[k] += 1);
    let free = len - 1 - SLOTS;
    let base = *counts.iter().max().expect("classes >= 2");
    let needed: usize = counts.iter().map(|&c| base - c).sum();
    let extra = (free - needed) / classes;
    let target = base + rng.random_range(0..=extra);

    let mut fill: Vec<u32> = Vec::with_capacity(free);
    for (k, &c) in counts.iter().enumerate() {
        fill.extend((c..target).map(|_| marker(rng, k, vocab, classes)));
    }
    while fill.len() < free {
        fill.push((FIRST_NEUTRAL + rng.random_range(0..NEUTRAL_TOKENS)) as u32);
    }
    fill.shuffle(rng);

    let mut tokens = vec![0u32; len];
    tokens[0] = CLS;
    let mut fill = fill.into_iter();
    for (p, t) in tokens.iter_mut().enumerate().skip(1) {
        *t = match slots.iter().position(|&s| s == p) {
            Some(i) => marker(rng, slot_classes[i], vocab, classes),
            None => fill.next().expect("free positions filled"),
        };
    }
    tokens
}

/// Sentence classification; every sequence has length `len` including CLS.
pub fn generate_classification_task(seed: u64, size: usize, vocab: usize, len: usize, classes: usize) -> Result<Dataset> {
    let op = "generate_classification_task";
    check_sizes(op, size, vocab, classes)?;
    let min_len = 1 + SLOTS + (classes - 1) * SLOTS;
    if len < min_len {
        return Err(Error::invalid(op, format!("length {len} too short; need at least {min_len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = size / classes;
    let mut by_class = Vec::with_capacity(classes);
    for label in 0..classes {
        let mut seen = HashSet::new();
        let mut attempts = 0usize;
        while seen.len() < per_class {
            attempts += 1;
            if attempts > per_class * 100 {
                return Err(Error::invalid(op, "vocabulary too small to produce enough distinct samples"));
            }
            seen.insert(classification_sample(&mut rng, label, len, vocab, classes));
        }
        let samples: Vec<Sample> = seen
            .into_iter()
            .map(|tokens| Sample {
                tokens,
                labels: vec![label as u32],
            })
            .collect();
        by_class.push(samples);
    }
    let ds = assemble(TaskKind::Sentence, vocab, classes, len, by_class);
    let bow = bow_baseline_accuracy(&ds);
    if bow > 0.8 {
        return Err(Error::invalid(op, format!("bag-of-words baseline reaches {bow:.3}; task leaks labels")));
    }
    Ok(ds)
}

/// Token tagging with the previous-token rule. Tokens avoid PAD and CLS.
pub fn generate_tagging_task(seed: u64, size: usize, vocab: usize, len: usize, classes: usize) -> Result<Dataset> {
    let op = "generate_tagging_task";
    check_sizes(op, size, vocab, classes)?;
    if len < 2 {
        return Err(Error::invalid(op, "length must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut attempts = 0usize;
    while seen.len() < size {
        attempts += 1;
        if attempts > size * 100 {
            return Err(Error::invalid(op, "vocabulary too small to produce enough distinct samples"));
        }
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(2..vocab as u32)).collect();
        seen.insert(tokens);
    }
    let samples = seen
        .into_iter()
        .map(|tokens| Sample {
            labels: tagging_rule(&tokens, classes),
            tokens,
        })
        .collect();
    Ok(assemble(TaskKind::Token, vocab, classes, len, vec![samples]))
}

fn fnv1a(tokens: &[u32]) -> u64 {
    tokens.iter().flat_map(|t| t.to_le_bytes()).fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// 80/10/10 split by hash rank within each group, so every split keeps the
/// group proportions and no sample lands in two splits.
fn assemble(task: TaskKind, vocab: usize, classes: usize, max_len: usize, groups: Vec<Vec<Sample>>) -> Dataset {
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut group in groups {
        group.sort_by_key(|s| (fnv1a(&s.tokens), s.tokens.clone()));
        let n = group.len();
        let n_train = n * 8 / 10;
        let n_dev = (n - n_train) / 2;
        let rest = group.split_off(n_train);
        train.extend(group);
        let mut rest = rest.into_iter();
        dev.extend(rest.by_ref().take(n_dev));
        test.extend(rest);
    }
    for split in [&mut train, &mut dev, &mut test] {
        split.sort_by_key(|s| (fnv1a(&s.tokens), s.tokens.clone()));
    }
    Dataset {
        task,
        vocab,
        classes,
        max_len,
        train,
        dev,
        test,
    }
}

/// Index batches over `len` samples; the shuffle depends only on `(seed, epoch)`.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_iter", "batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mixed = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Tokens of `samples[idx]` as a model batch plus the flattened labels.
pub fn make_batch(samples: &[Sample], idx: &[usize]) -> Result<(Batch, Vec<usize>)> {
    let rows: Vec<&[u32]> = idx.iter().map(|&i| samples[i].tokens.as_slice()).collect();
    let labels = idx
        .iter()
        .flat_map(|&i| samples[i].labels.iter().map(|&l| l as usize))
        .collect();
    Ok((Batch::new(&rows)?, labels))
}

/// Multinomial logistic regression by full-batch gradient descent, trained on
/// `train` and scored on `eval`.
fn logistic_accuracy(train: &[(Vec<f64>, usize)], eval: &[(Vec<f64>, usize)], classes: usize, epochs: usize, lr: f64) -> f64 {
    let dim = train.first().map_or(0, |(x, _)| x.len());
    let mut w = vec![0.0f64; (dim + 1) * classes];
    let scores = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| w[dim * classes + c] + x.iter().enumerate().map(|(j, &v)| v * w[j * classes + c]).sum::<f64>())
            .collect()
    };
    for _ in 0..epochs {
        let mut grad = vec![0.0f64; w.len()];
        for (x, y) in train {
            let s = scores(&w, x);
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / z - if c == *y { 1.0 } else { 0.0 };
                for (j, &v) in x.iter().enumerate() {
                    grad[j * classes + c] += g * v;
                }
                grad[dim * classes + c] += g;
            }
        }
        let n = train.len().max(1) as f64;
        for (wi, g) in w.iter_mut().zip(grad) {
            *wi -= lr * g / n;
        }
    }
    let correct = eval
        .iter()
        .filter(|(x, y)| {
            let s = scores(&w, x);
            let best = s
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            best == *y
        })
        .count();
    correct as f64 / eval.len().max(1) as f64
}

fn featurize(samples: &[Sample], f: impl Fn(&[u32]) -> Vec<f64>) -> Vec<(Vec<f64>, usize)> {
    samples.iter().map(|s| (f(&s.tokens), s.labels[0] as usize)).collect()
}

/// Dev accuracy of a token-count logistic regression (sentence tasks only).
pub fn bow_baseline_accuracy(ds: &Dataset) -> f64 {
    let vocab = ds.vocab;
    let bag = |t: &[u32]| {
        let mut v = vec![0.0; vocab];
        t.iter().for_each(|&x| v[x as usize] += 1.0);
        v
    };
    logistic_accuracy(&featurize(&ds.train, bag), &featurize(&ds.dev, bag), ds.classes, 200, 0.5)
}

/// Dev accuracy of a logistic regression on the marker class seen at each
/// position; the labels are linear in these features.
pub fn positional_oracle_accuracy(ds: &Dataset) -> f64 {
    let (vocab, classes) = (ds.vocab, ds.classes);
    let feats = |t: &[u32]| {
        let mut v = vec![0.0; t.len() * classes];
        for (p, &tok) in t.iter().enumerate() {
            if let Some(c) = marker_class(tok, vocab, classes) {
                v[p * classes + c] = 1.0;
            }
        }
        v
    };
    logistic_accuracy(&featurize(&ds.train, feats), &featurize(&ds.dev, feats), classes, 300, 1.0)
}
