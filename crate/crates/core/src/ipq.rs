//! Iterative product quantization.
//!
//! Every column of a weight matrix is cut into `m` contiguous subvectors of
//! length `dim = ceil(rows / m)`. All subvectors of a matrix share one
//! codebook of `k` codewords. When `rows` is not a multiple of `m` the tail
//! of the column is zero-padded; padded coordinates are masked out of every
//! distance, centroid and gradient so they never influence the fit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::quant::ByteReader;
use crate::tensor::Tensor;

/// Column subvectors of a `rows × cols` matrix, column-major:
/// subvector `j·m + i` is the `i`-th piece of column `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Subvectors {
    data: Vec<f32>,
    dim: usize,
    m: usize,
    rows: usize,
    cols: usize,
}

impl Subvectors {
    pub fn len(&self) -> usize {
        self.m * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pad(&self) -> usize {
        self.m * self.dim - self.rows
    }

    /// Zero-padded subvector `i`.
    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Number of real (non-pad) coordinates of subvector `i`.
    pub fn valid(&self, i: usize) -> usize {
        valid_len(self.rows, self.dim, i % self.m)
    }
}

fn valid_len(rows: usize, dim: usize, piece: usize) -> usize {
    rows.saturating_sub(piece * dim).min(dim)
}

pub fn split_subvectors(w: &Tensor, m: usize) -> Result<Subvectors> {
    let (rows, cols) = w
        .dims2()
        .ok_or_else(|| Error::invalid("split_subvectors", format!("rank-2 tensor required, got {:?}", w.shape())))?;
    if m == 0 || m > rows {
        return Err(Error::invalid(
            "split_subvectors",
            format!("need 1 <= m <= column length {rows}, got m = {m}"),
        ));
    }
    let dim = rows.div_ceil(m);
    let mut data = vec![0.0; cols * m * dim];
    for j in 0..cols {
        for r in 0..rows {
            data[(j * m) * dim + r] = w.data()[r * cols + j];
        }
    }
    Ok(Subvectors {
        data,
        dim,
        m,
        rows,
        cols,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    m: usize,
    rows: usize,
    cols: usize,
    codewords: Vec<f32>,
    assignments: Vec<u16>,
}

impl Codebook {
    pub fn new(
        shape: [usize; 2],
        m: usize,
        k: usize,
        codewords: Vec<f32>,
        assignments: Vec<u16>,
    ) -> Result<Self> {
        let [rows, cols] = shape;
        if k == 0 || k > usize::from(u16::MAX) {
            return Err(Error::invalid("codebook", format!("k must be in 1..=65535, got {k}")));
        }
        if m == 0 || m > rows {
            return Err(Error::invalid("codebook", format!("need 1 <= m <= {rows}, got {m}")));
        }
        let dim = rows.div_ceil(m);
        if codewords.len() != k * dim {
            return Err(Error::invalid(
                "codebook",
                format!("{k} codewords of dim {dim} need {} values, got {}", k * dim, codewords.len()),
            ));
        }
        if assignments.len() != m * cols {
            return Err(Error::invalid(
                "codebook",
                format!("expected {} assignments, got {}", m * cols, assignments.len()),
            ));
        }
        if let Some(bad) = assignments.iter().find(|&&a| usize::from(a) >= k) {
            return Err(Error::invalid("codebook", format!("assignment {bad} >= k = {k}")));
        }
        Ok(Self {
            k,
            dim,
            m,
            rows,
            cols,
            codewords,
            assignments,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pad(&self) -> usize {
        self.m * self.dim - self.rows
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn codeword(&self, j: usize) -> &[f32] {
        &self.codewords[j * self.dim..(j + 1) * self.dim]
    }

    pub fn codewords(&self) -> &[f32] {
        &self.codewords
    }

    pub fn assignments(&self) -> &[u16] {
        &self.assignments
    }

    /// `Σ ‖v − C[a(v)]‖²` over the real coordinates of every subvector.
    pub fn objective(&self, subs: &Subvectors) -> f64 {
        (0..subs.len())
            .map(|i| masked_dist(subs.get(i), self.codeword(usize::from(self.assignments[i])), subs.valid(i)))
            .fold(0.0, |acc, d| acc + d)
    }

    pub fn encoded_len(&self) -> usize {
        8 + 4 * self.codewords.len() + 2 * self.assignments.len()
    }

    /// Little-endian `{k, m, subvec_dim, pad: u16}`, the codewords as `f32`,
    /// then one `u16` assignment per subvector.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        for v in [self.k, self.m, self.dim, self.pad()] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        for c in &self.codewords {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for a in &self.assignments {
            out.extend_from_slice(&a.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let k = usize::from(r.u16()?);
        let m = usize::from(r.u16()?);
        let dim = usize::from(r.u16()?);
        let pad = usize::from(r.u16()?);
        let corrupt = |msg: String| Error::Corrupt(format!("pq payload: {msg}"));
        if m == 0 || pad >= m * dim {
            return Err(corrupt(format!("m = {m}, dim = {dim}, pad = {pad} is inconsistent")));
        }
        let codewords = (0..k * dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let rest = r.rest();
        if rest.len() % 2 != 0 || (rest.len() / 2) % m != 0 {
            return Err(corrupt(format!("{} assignment bytes is not a whole number of columns", rest.len())));
        }
        let assignments: Vec<u16> = rest
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let rows = m * dim - pad;
        let cols = assignments.len() / m;
        let book = Self::new([rows, cols], m, k, codewords, assignments).map_err(|e| corrupt(e.to_string()))?;
        if book.dim != dim {
            return Err(corrupt(format!("stored dim {dim} does not match rows {rows} / m {m}")));
        }
        Ok(book)
    }
}

fn masked_dist(v: &[f32], c: &[f32], valid: usize) -> f64 {
    v[..valid]
        .iter()
        .zip(&c[..valid])
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .fold(0.0, |acc, d| acc + d)
}

pub fn reconstruct(book: &Codebook) -> Tensor {
    let (rows, cols, m, dim) = (book.rows, book.cols, book.m, book.dim);
    let mut out = vec![0.0f32; rows * cols];
    for j in 0..cols {
        for i in 0..m {
            let word = book.codeword(usize::from(book.assignments[j * m + i]));
            for (t, &c) in word.iter().take(valid_len(rows, dim, i)).enumerate() {
                out[(i * dim + t) * cols + j] = c;
            }
        }
    }
    Tensor::new(vec![rows, cols], out).expect("shape matches buffer")
}

/// `‖W − W̃‖²`, summed in the same subvector order as [`Codebook::objective`].
pub fn reconstruction_error(w: &Tensor, book: &Codebook) -> Result<f64> {
    let subs = split_subvectors(w, book.m)?;
    if w.shape() != book.shape() {
        return Err(Error::Shape {
            op: "reconstruction_error",
            left: w.shape().to_vec(),
            right: book.shape().to_vec(),
        });
    }
    let approx = split_subvectors(&reconstruct(book), book.m)?;
    Ok((0..subs.len())
        .map(|i| masked_dist(subs.get(i), approx.get(i), subs.valid(i)))
        .fold(0.0, |acc, d| acc + d))
}

fn check_fit_args(op: &'static str, subs: &Subvectors, k: usize, iters: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid(op, "k must be at least 1"));
    }
    if k > subs.len() || k > usize::from(u16::MAX) {
        return Err(Error::invalid(op, format!("k = {k} exceeds {} subvectors", subs.len())));
    }
    if iters == 0 {
        return Err(Error::invalid(op, "need at least one iteration"));
    }
    Ok(())
}

/// k-means++ seeding on masked distances.
fn seed_plus_plus(subs: &Subvectors, k: usize, rng: &mut impl Rng) -> Vec<f32> {
    let n = subs.len();
    let dim = subs.dim;
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| masked_dist(subs.get(i), subs.get(chosen[0]), subs.valid(i)))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if nearest[pick] == 0.0 {
                // numerical tail; fall back to the farthest point
                argmax(&nearest)
            } else {
                pick
            }
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(masked_dist(subs.get(i), subs.get(next), subs.valid(i)));
        }
    }
    let mut words = Vec::with_capacity(k * dim);
    for &c in &chosen {
        words.extend_from_slice(subs.get(c));
    }
    words
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn nearest_word(v: &[f32], valid: usize, words: &[f32], dim: usize) -> (usize, f64) {
    words
        .chunks(dim)
        .enumerate()
        .map(|(j, c)| (j, masked_dist(v, c, valid)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Coordinate-wise weighted means; coordinates with no mass keep `prev`.
fn weighted_centroids(subs: &Subvectors, k: usize, prev: &[f32], weight: impl Fn(usize, usize) -> f64) -> Vec<f32> {
    let dim = subs.dim;
    let mut sums = vec![0.0f64; k * dim];
    let mut mass = vec![0.0f64; k * dim];
    for i in 0..subs.len() {
        let v = subs.get(i);
        for j in 0..k {
            let w = weight(i, j);
            if w == 0.0 {
                continue;
            }
            for t in 0..subs.valid(i) {
                sums[j * dim + t] += w * f64::from(v[t]);
                mass[j * dim + t] += w;
            }
        }
    }
    sums.iter()
        .zip(&mass)
        .zip(prev)
        .map(|((&s, &n), &p)| if n > 0.0 { (s / n) as f32 } else { p })
        .collect()
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Objective after seeding, then after every Lloyd iteration.
    pub history: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding. An empty cluster is re-seeded
/// at the subvector currently farthest from its codeword.
pub fn kmeans_fit(subs: &Subvectors, k: usize, iters: usize, rng: &mut impl Rng) -> Result<KMeansFit> {
    check_fit_args("kmeans_fit", subs, k, iters)?;
    let n = subs.len();
    let dim = subs.dim;
    let mut words = seed_plus_plus(subs, k, rng);
    let mut assign = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let objective = |dists: &[f64]| dists.iter().fold(0.0, |acc, &d| acc + d);

    let assign_step = |words: &mut Vec<f32>, assign: &mut Vec<usize>, dists: &mut Vec<f64>, first: bool| {
        for i in 0..n {
            let (j, d) = nearest_word(subs.get(i), subs.valid(i), words, dim);
            // keep the current codeword on ties so the objective cannot rise
            if first || d < dists[i] {
                assign[i] = j;
                dists[i] = d;
            } else {
                dists[i] = masked_dist(subs.get(i), &words[assign[i] * dim..(assign[i] + 1) * dim], subs.valid(i));
            }
        }
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = argmax(dists);
                if dists[far] == 0.0 {
                    continue;
                }
                counts[assign[far]] -= 1;
                words[j * dim..(j + 1) * dim].copy_from_slice(subs.get(far));
                assign[far] = j;
                dists[far] = 0.0;
                counts[j] = 1;
            }
        }
    };

    assign_step(&mut words, &mut assign, &mut dists, true);
    let mut history = vec![objective(&dists)];
    for _ in 0..iters {
        let updated = weighted_centroids(subs, k, &words, |i, j| if assign[i] == j { 1.0 } else { 0.0 });
        let new_dists: Vec<f64> = (0..n)
            .map(|i| masked_dist(subs.get(i), &updated[assign[i] * dim..(assign[i] + 1) * dim], subs.valid(i)))
            .collect();
        let prev = *history.last().expect("seeded");
        if objective(&new_dists) > prev {
            // rounding the means to f32 can cost the last ulp; stop instead
            break;
        }
        let moved = updated != words;
        words = updated;
        dists = new_dists;
        let before = assign.clone();
        assign_step(&mut words, &mut assign, &mut dists, false);
        history.push(objective(&dists));
        if !moved && before == assign {
            break;
        }
    }

    let assignments = assign.iter().map(|&a| a as u16).collect();
    let codebook = Codebook::new([subs.rows, subs.cols], subs.m, k, words, assignments)?;
    Ok(KMeansFit { codebook, history })
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub codebook: Codebook,
    /// Log-likelihood after every E-step.
    pub log_likelihood: Vec<f64>,
    /// Final responsibilities, `n × k` row-major.
    pub responsibilities: Vec<f64>,
}

/// EM for an isotropic Gaussian mixture with one shared variance, seeded by
/// k-means++. Codewords are the component means; each subvector is finally
/// assigned to its most responsible component.
pub fn em_fit(subs: &Subvectors, k: usize, iters: usize, rng: &mut impl Rng) -> Result<EmFit> {
    check_fit_args("em_fit", subs, k, iters)?;
    let n = subs.len();
    let dim = subs.dim;
    let mut means = seed_plus_plus(subs, k, rng);
    let mut weights = vec![1.0 / k as f64; k];
    let total_coords: f64 = (0..n).map(|i| subs.valid(i) as f64).sum::<f64>().max(1.0);
    let scale: f64 = (0..n)
        .map(|i| masked_dist(subs.get(i), &vec![0.0; dim], subs.valid(i)))
        .sum::<f64>()
        / total_coords;
    let floor = 1e-12 * scale.max(1e-12);
    let init_sq: f64 = (0..n)
        .map(|i| nearest_word(subs.get(i), subs.valid(i), &means, dim).1)
        .sum();
    let mut var = (init_sq / total_coords).max(floor);

    let mut resp = vec![0.0f64; n * k];
    let mut history = Vec::new();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    for _ in 0..iters {
        // E-step
        let mut ll = 0.0;
        for i in 0..n {
            let d = subs.valid(i) as f64;
            let row = &mut resp[i * k..(i + 1) * k];
            for j in 0..k {
                let dist = masked_dist(subs.get(i), &means[j * dim..(j + 1) * dim], subs.valid(i));
                row[j] = weights[j].ln() - 0.5 * d * (ln_2pi + var.ln()) - dist / (2.0 * var);
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            ll += lse;
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        history.push(ll);

        // M-step
        let mass: Vec<f64> = (0..k).map(|j| (0..n).map(|i| resp[i * k + j]).sum()).collect();
        weights = mass.iter().map(|&m| (m / n as f64).max(f64::MIN_POSITIVE)).collect();
        means = weighted_centroids(subs, k, &means, |i, j| resp[i * k + j]);
        let sq: f64 = (0..n)
            .map(|i| {
                (0..k)
                    .map(|j| resp[i * k + j] * masked_dist(subs.get(i), &means[j * dim..(j + 1) * dim], subs.valid(i)))
                    .sum::<f64>()
            })
            .sum();
        var = (sq / total_coords).max(floor);
    }

    let assignments = (0..n)
        .map(|i| {
            let row = &resp[i * k..(i + 1) * k];
            argmax(row) as u16
        })
        .collect();
    let codebook = Codebook::new([subs.rows, subs.cols], subs.m, k, means, assignments)?;
    Ok(EmFit {
        codebook,
        log_likelihood: history,
        responsibilities: resp,
    })
}

/// SGD on the codewords: each moves by `−lr` times the mean gradient of the
/// weight subvectors assigned to it.
pub fn codeword_grad_update(book: &Codebook, grads: &Tensor, lr: f32) -> Result<Codebook> {
    if grads.shape() != book.shape() {
        return Err(Error::Shape {
            op: "codeword_grad_update",
            left: grads.shape().to_vec(),
            right: book.shape().to_vec(),
        });
    }
    let subs = split_subvectors(grads, book.m)?;
    let zeros = vec![0.0; book.codewords.len()];
    let assign = &book.assignments;
    let mean_grad = weighted_centroids(&subs, book.k, &zeros, |i, j| {
        if usize::from(assign[i]) == j {
            1.0
        } else {
            0.0
        }
    });
    let mut updated = book.clone();
    for (c, g) in updated.codewords.iter_mut().zip(mean_grad) {
        *c -= lr * g;
    }
    Ok(updated)
}

/// Bottom-to-top quantization progress: layers `0..L−F` are quantized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantSchedule {
    pub layers: usize,
    pub finetuned: usize,
    /// Epochs at which one more layer becomes quantized.
    pub boundaries: Vec<usize>,
    /// Final epoch; reaching it quantizes every layer.
    pub horizon: usize,
}

impl QuantSchedule {
    /// One layer per stage, boundaries spread evenly over `epochs`.
    pub fn uniform(layers: usize, epochs: usize) -> Self {
        let boundaries = (1..layers)
            .map(|i| (i * epochs / layers).max(1))
            .collect();
        Self {
            layers,
            finetuned: layers,
            boundaries,
            horizon: epochs,
        }
    }

    pub fn quantized_layers(&self) -> std::ops::Range<usize> {
        0..self.layers - self.finetuned
    }

    pub fn advance(&self, epoch: usize) -> Result<Self> {
        if epoch > self.horizon {
            return Err(Error::invalid(
                "advance_schedule",
                format!("epoch {epoch} beyond horizon {}", self.horizon),
            ));
        }
        let target = if epoch == self.horizon {
            0
        } else {
            self.layers - self.boundaries.iter().filter(|&&b| b <= epoch).count().min(self.layers)
        };
        Ok(Self {
            finetuned: self.finetuned.min(target),
            ..self.clone()
        })
    }
}
