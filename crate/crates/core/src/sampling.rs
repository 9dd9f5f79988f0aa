//! Noise distributions, negative sampling and synthetic problem generation.

use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ConditionalProblem, InputSpace, LinearFeatures, LinearSoftmax, ParamVector, ScoringFunction};
use crate::rng;

/// Strictly positive distribution over labels with an inverse-CDF table.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl NoiseDistribution {
    /// Validates an explicit probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Domain(
                "noise distribution needs at least 2 labels".into(),
            ));
        }
        if let Some(i) = probs.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Domain(format!(
                "noise probability of label {i} must be positive, got {}",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "noise probabilities sum to {total}, not 1"
            )));
        }
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in &probs {
            acc += p;
            cdf.push(acc);
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain(
                "noise probabilities too small to keep the cumulative table strictly increasing"
                    .into(),
            ));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self { probs, log_probs, cdf })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Domain("noise weights must have a positive finite sum".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(m_y: usize) -> Result<Self> {
        Self::new(vec![1.0 / m_y as f64; m_y])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, y: usize) -> f64 {
        self.probs[y]
    }

    pub fn log_prob(&self, y: usize) -> f64 {
        self.log_probs[y]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Label whose cumulative bracket contains `u ∈ [0, 1)`.
    pub fn inverse_cdf(&self, u: f64) -> usize {
        self.cdf
            .partition_point(|&c| c <= u)
            .min(self.probs.len() - 1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.inverse_cdf(rng.random::<f64>())
    }

    /// Short content hash recorded in dataset provenance.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.probs {
            h.update(p.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Probabilities proportional to `count^power`. When any count is zero every
/// count is incremented by one first.
pub fn unigram_power(counts: &[u64], power: f64) -> Result<NoiseDistribution> {
    if !(power >= 0.0 && power.is_finite()) {
        return Err(Error::Domain(format!("power must be >= 0, got {power}")));
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Domain("all counts are zero".into()));
    }
    let smooth = if counts.contains(&0) { 1.0 } else { 0.0 };
    let weights: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 + smooth).powf(power))
        .collect();
    NoiseDistribution::from_weights(&weights)
}

/// Parses a counts file: one `token count` pair per line; blank lines and
/// lines starting with `#` are skipped.
pub fn read_counts<R: BufRead>(reader: R) -> Result<(Vec<String>, Vec<u64>)> {
    let mut tokens = Vec::new();
    let mut counts = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(tok), Some(count), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Domain(format!(
                "counts line {}: expected `token count`",
                lineno + 1
            )));
        };
        let count: u64 = count.parse().map_err(|_| {
            Error::Domain(format!("counts line {}: bad count `{count}`", lineno + 1))
        })?;
        tokens.push(tok.to_string());
        counts.push(count);
    }
    Ok((tokens, counts))
}

/// Number of negatives per example plus the stream that draws them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub k: usize,
    pub seed: u64,
    pub stream: u64,
}

impl SamplingConfig {
    pub fn new(k: usize, seed: u64, stream: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(Self { k, seed, stream })
    }
}

/// Where a dataset's random draws came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub stream: u64,
    pub k: usize,
    pub noise_hash: String,
}

/// `n` positive pairs and an `n × K` table of negative labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    xs: Vec<usize>,
    ys: Vec<usize>,
    negatives: Vec<usize>,
    k: usize,
    provenance: Provenance,
    cells: OnceLock<CellCounts>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.xs == other.xs
            && self.ys == other.ys
            && self.negatives == other.negatives
            && self.k == other.k
            && self.provenance == other.provenance
    }
}

/// How often each `(x, y)` cell occurs as a positive and as a negative,
/// grouped by input. Inputs are ascending, labels ascending within an input.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCounts {
    /// Distinct inputs.
    pub inputs: Vec<usize>,
    /// Cells of `inputs[g]` are `offsets[g]..offsets[g + 1]`.
    pub offsets: Vec<usize>,
    pub labels: Vec<usize>,
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

impl CellCounts {
    fn build(data: &Dataset) -> Self {
        let mut keys: Vec<(usize, usize, bool)> = Vec::with_capacity(data.len() * (data.k + 1));
        for i in 0..data.len() {
            keys.push((data.xs[i], data.ys[i], true));
            keys.extend(data.negatives(i).iter().map(|&y| (data.xs[i], y, false)));
        }
        keys.sort_unstable_by_key(|&(x, y, _)| (x, y));
        let mut c = CellCounts {
            inputs: Vec::new(),
            offsets: vec![0],
            labels: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
        };
        for (x, y, positive) in keys {
            if c.inputs.last() != Some(&x) {
                if !c.inputs.is_empty() {
                    c.offsets.push(c.labels.len());
                }
                c.inputs.push(x);
            }
            if c.labels.len() == *c.offsets.last().expect("non-empty") || c.labels.last() != Some(&y) {
                c.labels.push(y);
                c.positives.push(0.0);
                c.negatives.push(0.0);
            }
            let slot = c.labels.len() - 1;
            if positive {
                c.positives[slot] += 1.0;
            } else {
                c.negatives[slot] += 1.0;
            }
        }
        c.offsets.push(c.labels.len());
        c
    }

    pub fn groups(&self) -> usize {
        self.inputs.len()
    }

    /// Cell range of group `g`.
    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }
}

impl Dataset {
    pub fn new(
        xs: Vec<usize>,
        ys: Vec<usize>,
        negatives: Vec<usize>,
        provenance: Provenance,
    ) -> Result<Self> {
        let k = provenance.k;
        if xs.len() != ys.len() {
            return Err(Error::Config(format!(
                "{} inputs but {} labels",
                xs.len(),
                ys.len()
            )));
        }
        if negatives.len() != xs.len() * k {
            return Err(Error::Config(format!(
                "negatives table has {} entries, expected {} x {k}",
                negatives.len(),
                xs.len()
            )));
        }
        Ok(Self {
            xs,
            ys,
            negatives,
            k,
            provenance,
            cells: OnceLock::new(),
        })
    }

    /// Checks every index against the given space sizes.
    pub fn validate(&self, m_x: usize, m_y: usize) -> Result<()> {
        if let Some(i) = self.xs.iter().position(|&x| x >= m_x) {
            return Err(Error::Config(format!("example {i}: input {} >= m_x = {m_x}", self.xs[i])));
        }
        if let Some(i) = self.ys.iter().position(|&y| y >= m_y) {
            return Err(Error::Config(format!("example {i}: label {} >= m_y = {m_y}", self.ys[i])));
        }
        if let Some(j) = self.negatives.iter().position(|&y| y >= m_y) {
            return Err(Error::Config(format!(
                "example {}: negative {} >= m_y = {m_y}",
                j / self.k.max(1),
                self.negatives[j]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn x(&self, i: usize) -> usize {
        self.xs[i]
    }

    pub fn y(&self, i: usize) -> usize {
        self.ys[i]
    }

    pub fn xs(&self) -> &[usize] {
        &self.xs
    }

    pub fn ys(&self) -> &[usize] {
        &self.ys
    }

    pub fn negatives(&self, i: usize) -> &[usize] {
        &self.negatives[i * self.k..(i + 1) * self.k]
    }

    pub fn negatives_table(&self) -> &[usize] {
        &self.negatives
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Per-cell occurrence counts, computed on first use.
    pub fn cell_counts(&self) -> &CellCounts {
        self.cells.get_or_init(|| CellCounts::build(self))
    }

    /// Candidate tuple `(y_i, y_{i,1}, .., y_{i,K})`.
    pub fn candidates(&self, i: usize) -> Vec<usize> {
        let mut c = Vec::with_capacity(self.k + 1);
        c.push(self.ys[i]);
        c.extend_from_slice(self.negatives(i));
        c
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut negatives = Vec::with_capacity(indices.len() * self.k);
        for &i in indices {
            negatives.extend_from_slice(self.negatives(i));
        }
        Dataset {
            xs: indices.iter().map(|&i| self.xs[i]).collect(),
            ys: indices.iter().map(|&i| self.ys[i]).collect(),
            negatives,
            k: self.k,
            provenance: self.provenance.clone(),
            cells: OnceLock::new(),
        }
    }

    /// Replaces the negatives table, e.g. when resampling per epoch.
    pub fn with_negatives(&self, negatives: Vec<usize>, provenance: Provenance) -> Result<Dataset> {
        Dataset::new(self.xs.clone(), self.ys.clone(), negatives, provenance)
    }

    /// Content hash over indices and provenance.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.xs.iter().chain(&self.ys).chain(&self.negatives) {
            h.update((*v as u64).to_le_bytes());
        }
        h.update(self.provenance.seed.to_le_bytes());
        h.update(self.provenance.stream.to_le_bytes());
        h.update(self.provenance.noise_hash.as_bytes());
        hex::encode(&h.finalize()[..8])
    }

    /// JSONL: a provenance header line then one `{x, y, neg}` record per
    /// example.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = DatasetHeader {
            provenance: self.provenance.clone(),
            n: self.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for i in 0..self.len() {
            let rec = DatasetRecord {
                x: self.xs[i],
                y: self.ys[i],
                neg: self.negatives(i).to_vec(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
        let mut lines = reader.lines();
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::field("provenance", "dataset file is empty")),
        };
        let k = header.provenance.k;
        let mut xs = Vec::with_capacity(header.n);
        let mut ys = Vec::with_capacity(header.n);
        let mut negatives = Vec::with_capacity(header.n * k);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetRecord = serde_json::from_str(&line)?;
            if rec.neg.len() != k {
                return Err(Error::field(
                    "neg",
                    format!("record {i} has {} negatives, header says K = {k}", rec.neg.len()),
                ));
            }
            xs.push(rec.x);
            ys.push(rec.y);
            negatives.extend(rec.neg);
        }
        if xs.len() != header.n {
            return Err(Error::field(
                "n",
                format!("header announces {} records, found {}", header.n, xs.len()),
            ));
        }
        Dataset::new(xs, ys, negatives, header.provenance)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    provenance: Provenance,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    x: usize,
    y: usize,
    neg: Vec<usize>,
}

/// Words of ChaCha output consumed by one `f64` draw.
const WORDS_PER_DRAW: u128 = 2;
const PARALLEL_THRESHOLD: usize = 1 << 16;

/// Draws an `n × K` table of i.i.d. labels from `noise`.
///
/// Example `i` reads its `K` uniforms at a fixed position of the
/// `(seed, stream)` generator, so the table is identical whether rows are
/// drawn sequentially or in parallel.
pub fn sample_negatives(cfg: &SamplingConfig, noise: &NoiseDistribution, n: usize) -> Vec<usize> {
    let k = cfg.k;
    let mut table = vec![0usize; n * k];
    if k == 0 {
        return table;
    }
    let fill = |(i, row): (usize, &mut [usize])| {
        let mut r = rng::stream(cfg.seed, cfg.stream);
        r.set_word_pos(WORDS_PER_DRAW * (i * k) as u128);
        for slot in row.iter_mut() {
            *slot = noise.sample(&mut r);
        }
    };
    if n * k >= PARALLEL_THRESHOLD {
        table.par_chunks_mut(k).enumerate().for_each(fill);
    } else {
        table.chunks_mut(k).enumerate().for_each(fill);
    }
    table
}

/// Samples `n` pairs from the problem's joint distribution and attaches
/// negatives drawn with [`sample_negatives`].
pub fn generate_dataset(
    problem: &ConditionalProblem,
    n: usize,
    cfg: &SamplingConfig,
    noise: &NoiseDistribution,
) -> Result<Dataset> {
    if noise.len() != problem.m_y() {
        return Err(Error::Config(format!(
            "noise distribution covers {} labels, problem has {}",
            noise.len(),
            problem.m_y()
        )));
    }
    let x_dist = Cdf::new(problem.p_x());
    let rows: Vec<Cdf> = (0..problem.m_x())
        .map(|x| Cdf::new(problem.conditional(x)))
        .collect();
    let mut r = rng::substream(cfg.seed, cfg.stream, &[u64::MAX]);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = x_dist.sample(&mut r);
        let y = rows[x].sample(&mut r);
        xs.push(x);
        ys.push(y);
    }
    let negatives = sample_negatives(cfg, noise, n);
    Dataset::new(
        xs,
        ys,
        negatives,
        Provenance {
            seed: cfg.seed,
            stream: cfg.stream,
            k: cfg.k,
            noise_hash: noise.hash(),
        },
    )
}

/// Cumulative table for an arbitrary (possibly degenerate) distribution.
struct Cdf(Vec<f64>);

impl Cdf {
    fn new(p: &[f64]) -> Self {
        let mut acc = 0.0;
        Cdf(p.iter().map(|v| {
            acc += v;
            acc
        }).collect())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * self.0[self.0.len() - 1];
        self.0.partition_point(|&c| c <= u).min(self.0.len() - 1)
    }
}

const MIXTURE_MEANS: [f64; 3] = [-2.0, 0.0, 2.0];

fn mixture_rows<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let mean = MIXTURE_MEANS[rng.random_range(0..MIXTURE_MEANS.len())];
        for _ in 0..dim {
            out.push(mean + normal.sample(rng));
        }
    }
    out
}

/// Simulation problem with inputs and label weights drawn from separate
/// three-component Gaussian mixtures, uniform `p_X`, and
/// `p(y|x) = softmax_y(xᵀθ_y)`.
///
/// Components have mean vectors `(μ, .., μ)` with `μ ∈ {-2, 0, 2}`, unit
/// variance and equal weights.
pub fn make_synthetic_problem(
    d: usize,
    m_x: usize,
    m_y: usize,
    seed: u64,
) -> Result<ConditionalProblem> {
    if d == 0 || m_x == 0 {
        return Err(Error::Config("d and m_x must be at least 1".into()));
    }
    let inputs = mixture_rows(&mut rng::substream(seed, 0, &[1]), m_x, d);
    let theta = mixture_rows(&mut rng::substream(seed, 0, &[2]), m_y, d);
    synthetic_from_parts(d, m_y, inputs, theta)
}

/// [`make_synthetic_problem`] with explicit inputs and label weights.
pub fn synthetic_from_parts(
    d: usize,
    m_y: usize,
    inputs: Vec<f64>,
    theta: Vec<f64>,
) -> Result<ConditionalProblem> {
    let m_x = inputs.len() / d.max(1);
    let space = InputSpace::with_features(m_x, d, inputs.clone())?;
    let sf = ScoringFunction::LinearSoftmax(LinearSoftmax::new(m_y, d, inputs)?);
    let theta = ParamVector::new(theta)?;
    ConditionalProblem::from_model(space, sf, theta, vec![1.0 / m_x as f64; m_x])
}

fn positive_weights<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Random problem under a linear-features model: standard normal features,
/// `θ* ~ N(0, scale²)`, and a random strictly positive `p_X`.
pub fn make_tabular_problem(
    m_x: usize,
    m_y: usize,
    d: usize,
    scale: f64,
    seed: u64,
) -> Result<ConditionalProblem> {
    let mut r = rng::substream(seed, 0, &[3]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let table: Vec<f64> = (0..m_x * m_y * d).map(|_| normal.sample(&mut r)).collect();
    let theta: Vec<f64> = (0..d).map(|_| scale * normal.sample(&mut r)).collect();
    let p_x = positive_weights(&mut r, m_x);
    let sf = ScoringFunction::LinearFeatures(LinearFeatures::new(m_x, m_y, d, table)?);
    ConditionalProblem::from_model(InputSpace::new(m_x)?, sf, ParamVector::new(theta)?, p_x)
}

/// Random self-normalized problem under a linear-features model.
///
/// Every input sees the same set of `m_y` feature vectors in its own random
/// label order, so `Z(x;θ*)` and the conditional mean of the features are
/// the same for all `x`; `γ* = log Z`.
pub fn make_self_normalized_problem(
    m_x: usize,
    m_y: usize,
    d: usize,
    scale: f64,
    seed: u64,
) -> Result<ConditionalProblem> {
    let mut r = rng::substream(seed, 0, &[4]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let base: Vec<Vec<f64>> = (0..m_y)
        .map(|_| (0..d).map(|_| normal.sample(&mut r)).collect())
        .collect();
    let theta: Vec<f64> = (0..d).map(|_| scale * normal.sample(&mut r)).collect();
    let mut table = Vec::with_capacity(m_x * m_y * d);
    let mut order: Vec<usize> = (0..m_y).collect();
    for _ in 0..m_x {
        order.shuffle(&mut r);
        for &j in &order {
            table.extend_from_slice(&base[j]);
        }
    }
    let p_x = positive_weights(&mut r, m_x);
    let scores: Vec<f64> = base.iter().map(|v| crate::numeric::dot(v, &theta)).collect();
    let gamma = crate::numeric::log_sum_exp(&scores);
    let sf = ScoringFunction::LinearFeatures(LinearFeatures::new(m_x, m_y, d, table)?);
    ConditionalProblem::from_self_normalized_model(
        InputSpace::new(m_x)?,
        sf,
        ParamVector::new(theta)?,
        gamma,
        p_x,
    )
}

/// The two-input, two-label instance on which binary NCE is inconsistent.
///
/// `s(x1,y1) = η1` and `s(x1,y2) = s(x2,y1) = s(x2,y2) = η2` with
/// `η = log θ`; the truth is `θ* = (1, 3)` and `p_X = (1/2, 1/2)`, giving
/// `p_{X,Y} = (1/8, 3/8, 1/4, 1/4)`.
pub fn counterexample_problem() -> ConditionalProblem {
    let table = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    let sf = ScoringFunction::LinearFeatures(
        LinearFeatures::new(2, 2, 2, table).expect("static feature table"),
    );
    let theta = ParamVector::new(vec![1f64.ln(), 3f64.ln()]).expect("finite");
    ConditionalProblem::from_model(InputSpace::new(2).expect("m_x = 2"), sf, theta, vec![0.5, 0.5])
        .expect("counterexample satisfies every invariant")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_point_mass_noise_is_almost_deterministic() {
        let eps = 1e-9;
        let noise = NoiseDistribution::new(vec![1.0 - 3.0 * eps, eps, eps, eps]).unwrap();
        let cfg = SamplingConfig::new(5, 11, 0).unwrap();
        let table = sample_negatives(&cfg, &noise, 1000);
        assert!(table.iter().filter(|&&y| y == 0).count() >= 4999);
    }

    #[test]
    fn uniform_negatives_hit_binomial_band() {
        let noise = NoiseDistribution::uniform(4).unwrap();
        let cfg = SamplingConfig::new(4, 2024, 3).unwrap();
        let table = sample_negatives(&cfg, &noise, 10_000);
        let total = table.len() as f64;
        let sigma = (0.25f64 * 0.75 / total).sqrt();
        for label in 0..4 {
            let freq = table.iter().filter(|&&y| y == label).count() as f64 / total;
            assert!((freq - 0.25).abs() < 3.0 * sigma, "label {label}: {freq}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_parallel_safe() {
        let noise = NoiseDistribution::from_weights(&[1.0, 2.0, 3.0]).unwrap();
        let cfg = SamplingConfig::new(3, 99, 7).unwrap();
        // large enough to take the parallel path
        let a = sample_negatives(&cfg, &noise, 30_000);
        let b = sample_negatives(&cfg, &noise, 30_000);
        assert_eq!(a, b);
        // a prefix drawn sequentially agrees with the parallel table
        let small = sample_negatives(&cfg, &noise, 100);
        assert_eq!(&a[..300], &small[..]);
        let other = sample_negatives(&SamplingConfig { stream: 8, ..cfg }, &noise, 100);
        assert_ne!(small, other);
    }

    #[test]
    fn unigram_power_examples() {
        let p = unigram_power(&[3, 1], 1.0).unwrap();
        assert!((p.prob(0) - 0.75).abs() < 1e-15);
        let u = unigram_power(&[7, 1, 100], 0.0).unwrap();
        for y in 0..3 {
            assert!((u.prob(y) - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = unigram_power(&[8, 1], 0.75).unwrap();
        assert!((w.prob(0) - 0.8263).abs() < 1e-4);
        assert!((w.prob(1) - 0.1737).abs() < 1e-4);
        assert!(unigram_power(&[0, 0], 0.75).is_err());
        let smoothed = unigram_power(&[1, 0], 1.0).unwrap();
        assert!((smoothed.prob(0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn noise_rejects_zero_mass() {
        assert!(NoiseDistribution::new(vec![1.0, 0.0]).is_err());
        assert!(NoiseDistribution::new(vec![0.6, 0.6]).is_err());
    }

    #[test]
    fn counts_file_parsing() {
        let text = "# comment\nthe 10\ncat 3\n\ndog 0\n";
        let (tokens, counts) = read_counts(text.as_bytes()).unwrap();
        assert_eq!(tokens, vec!["the", "cat", "dog"]);
        assert_eq!(counts, vec![10, 3, 0]);
        assert!(read_counts("the ten\n".as_bytes()).is_err());
    }

    #[test]
    fn synthetic_problem_shape_and_determinism() {
        let p = make_synthetic_problem(4, 200, 100, 5).unwrap();
        assert_eq!((p.m_x(), p.m_y()), (200, 100));
        assert_eq!(p.truth().unwrap().theta.len(), 400);
        assert_eq!(p, make_synthetic_problem(4, 200, 100, 5).unwrap());
        assert_ne!(p, make_synthetic_problem(4, 200, 100, 6).unwrap());
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let p = synthetic_from_parts(3, 2, vec![1.0, -2.0, 0.5, 4.0, 4.0, 4.0], vec![0.0; 6]).unwrap();
        for x in 0..2 {
            assert_eq!(p.conditional(x), &[0.5, 0.5]);
        }
    }

    #[test]
    fn empty_dataset_keeps_shape() {
        let p = counterexample_problem();
        let noise = NoiseDistribution::uniform(2).unwrap();
        let cfg = SamplingConfig::new(3, 1, 0).unwrap();
        let ds = generate_dataset(&p, 0, &cfg, &noise).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.k(), 3);
        assert!(ds.negatives_table().is_empty());
    }

    #[test]
    fn counterexample_values() {
        let p = counterexample_problem();
        let t = p.truth().unwrap();
        let theta = t.theta.as_slice();
        assert!((t.scoring.partition(theta, 0).unwrap() - 4.0).abs() < 1e-12);
        assert!((t.scoring.partition(theta, 1).unwrap() - 6.0).abs() < 1e-12);
        let expected = [1.0 / 8.0, 3.0 / 8.0, 0.25, 0.25];
        for (i, e) in expected.iter().enumerate() {
            assert!((p.p_xy(i / 2, i % 2) - e).abs() < 1e-15);
        }
        let c = p.conditional(0);
        assert!((c[0] / c[1] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn self_normalized_problem_is_flagged() {
        let p = make_self_normalized_problem(6, 4, 3, 0.7, 1).unwrap();
        assert!(p.is_self_normalized());
        let t = p.truth().unwrap();
        let gamma = t.gamma.unwrap();
        for x in 0..6 {
            let z: f64 = t
                .scoring
                .all_scores(t.theta.as_slice(), x)
                .iter()
                .map(|s| (s - gamma).exp())
                .sum();
            assert!((z - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn dataset_jsonl_round_trip() {
        let p = make_tabular_problem(3, 4, 2, 1.0, 9).unwrap();
        let noise = NoiseDistribution::uniform(4).unwrap();
        let ds = generate_dataset(&p, 25, &SamplingConfig::new(2, 4, 1).unwrap(), &noise).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(ds, back);
        ds.validate(3, 4).unwrap();
        assert!(ds.validate(3, 2).is_err() || ds.ys().iter().all(|&y| y < 2));
    }
}
