//! Sampled and population objectives for ranking NCE, binary NCE and
//! maximum likelihood, plus the label posteriors behind the ranking
//! consistency argument and the self-normalization penalty.
//!
//! All objectives are maximized. Sums over examples are split into fixed
//! chunks; chunks may run on any thread but are always reduced pairwise in
//! chunk order, so results do not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConditionalProblem, ParamVector, ScoringFunction};
use crate::numeric::{log_sigmoid, log_sum_exp, pairwise_sum, pairwise_sum_vectors, sigmoid, softmax_in_place};
use crate::rng;
use crate::sampling::{Dataset, NoiseDistribution};

/// Maximum number of terms an exact population enumeration may visit.
pub const ENUMERATION_BUDGET: u128 = 10_000_000;

const CHUNK: usize = 256;

/// `(θ, γ)` for the binary objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryParams {
    pub theta: ParamVector,
    pub gamma: f64,
}

impl BinaryParams {
    pub fn new(theta: ParamVector, gamma: f64) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::Numeric(format!("gamma must be finite, got {gamma}")));
        }
        Ok(Self { theta, gamma })
    }

    /// Flat `[θ, γ]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.theta.as_slice().to_vec();
        v.push(self.gamma);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let (gamma, theta) = flat
            .split_last()
            .ok_or_else(|| Error::Config("binary parameters need at least gamma".into()))?;
        Self::new(ParamVector::new(theta.to_vec())?, *gamma)
    }
}

/// Posterior quantities for one candidate tuple `(x, ȳ_0..ȳ_K)`.
///
/// `cross_entropy` is `-Σ_k β_k log q_k` (non-negative, minimized at the
/// truth).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    pub q: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub cross_entropy: f64,
}

/// Penalty `(α/n) Σ_i (log (1/m) Σ_j exp ŝ(x_i, ỹ_ij))²` settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub alpha: f64,
    pub m: usize,
    pub seed: u64,
    pub stream: u64,
}

impl RegularizerConfig {
    pub fn new(alpha: f64, m: usize, seed: u64, stream: u64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("regularizer alpha must be >= 0, got {alpha}")));
        }
        if m == 0 {
            return Err(Error::Config("regularizer needs m >= 1 noise draws".into()));
        }
        Ok(Self {
            alpha,
            m,
            seed,
            stream,
        })
    }
}

/// Exact enumeration or Monte Carlo with a sample budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// A population quantity with its Monte Carlo standard error (`None` when
/// computed exactly).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: Option<f64>,
}

fn check_dataset(sf: &ScoringFunction, theta: &[f64], data: &Dataset) -> Result<()> {
    sf.check_params(theta)?;
    if data.is_empty() {
        return Err(Error::Domain("objective over an empty dataset".into()));
    }
    data.validate(sf.num_inputs(), sf.num_labels())
}

fn check_noise(sf: &ScoringFunction, noise: &NoiseDistribution) -> Result<()> {
    if noise.len() != sf.num_labels() {
        return Err(Error::Config(format!(
            "noise distribution covers {} labels, model has {}",
            noise.len(),
            sf.num_labels()
        )));
    }
    Ok(())
}

/// Sums `term(i)` (and optionally gradients of length `dim`) over
/// `0..n` in fixed chunks, reducing in a deterministic order.
fn sum_in_chunks<F>(n: usize, dim: Option<usize>, term: F) -> (f64, Option<Vec<f64>>)
where
    F: Fn(usize, Option<&mut [f64]>) -> f64 + Sync,
{
    let chunks: Vec<(f64, Option<Vec<f64>>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut grad = dim.map(|d| vec![0.0; d]);
            let mut values = Vec::with_capacity(CHUNK);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                values.push(term(i, grad.as_deref_mut()));
            }
            (pairwise_sum(&values), grad)
        })
        .collect();
    let values: Vec<f64> = chunks.iter().map(|c| c.0).collect();
    let grad = dim.map(|d| {
        let grads: Vec<Vec<f64>> = chunks.into_iter().filter_map(|c| c.1).collect();
        pairwise_sum_vectors(&grads, d)
    });
    (pairwise_sum(&values), grad)
}

/// [`sum_in_chunks`] divided by `divisor`.
fn scaled_sum<F>(n: usize, divisor: usize, dim: Option<usize>, term: F) -> (f64, Option<Vec<f64>>)
where
    F: Fn(usize, Option<&mut [f64]>) -> f64 + Sync,
{
    let (value, grad) = sum_in_chunks(n, dim, term);
    let inv = 1.0 / divisor as f64;
    let grad = grad.map(|mut g| {
        g.iter_mut().for_each(|v| *v *= inv);
        g
    });
    (value * inv, grad)
}

/// Mean of per-example terms.
fn mean_over_examples<F>(n: usize, dim: Option<usize>, term: F) -> (f64, Option<Vec<f64>>)
where
    F: Fn(usize, Option<&mut [f64]>) -> f64 + Sync,
{
    scaled_sum(n, n, dim, term)
}

fn shifted_scores(
    sf: &ScoringFunction,
    theta: &[f64],
    noise: &NoiseDistribution,
    x: usize,
    labels: &[usize],
) -> Vec<f64> {
    let mut s = vec![0.0; labels.len()];
    sf.scores_into(theta, x, labels, &mut s);
    for (v, &y) in s.iter_mut().zip(labels) {
        *v -= noise.log_prob(y);
    }
    s
}

/// Ranking term `log q(0|x,ȳ;θ)` for one tuple; adds its gradient scaled by
/// `weight` when `grad` is given.
fn ranking_term(
    sf: &ScoringFunction,
    theta: &[f64],
    noise: &NoiseDistribution,
    x: usize,
    cands: &[usize],
    weight: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    SCORES.with_borrow_mut(|s| {
        s.clear();
        s.resize(cands.len(), 0.0);
        sf.scores_into(theta, x, cands, s);
        for (v, &y) in s.iter_mut().zip(cands) {
            *v -= noise.log_prob(y);
        }
        let first = s[0];
        let Some(g) = grad else {
            return first - log_sum_exp(s);
        };
        let lse = softmax_in_place(s);
        for q in s.iter_mut() {
            *q *= -weight;
        }
        s[0] += weight;
        sf.accumulate_grad(theta, x, cands, s, g);
        first - lse
    })
}

thread_local! {
    static SCORES: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
    static CANDIDATES: std::cell::RefCell<Vec<usize>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn ranking_eval(
    sf: &ScoringFunction,
    theta: &[f64],
    data: &Dataset,
    noise: &NoiseDistribution,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_dataset(sf, theta, data)?;
    check_noise(sf, noise)?;
    Ok(mean_over_examples(data.len(), with_grad.then_some(theta.len()), |i, g| {
        CANDIDATES.with_borrow_mut(|cands| {
            cands.clear();
            cands.push(data.y(i));
            cands.extend_from_slice(data.negatives(i));
            ranking_term(sf, theta, noise, data.x(i), cands, 1.0, g)
        })
    }))
}

/// `L_R^n(θ) = (1/n) Σ_i log[exp ŝ(x_i,y_i) / Σ_{k=0..K} exp ŝ(x_i,y_{i,k})]`.
pub fn ranking_objective(
    sf: &ScoringFunction,
    theta: &[f64],
    data: &Dataset,
    noise: &NoiseDistribution,
) -> Result<f64> {
    Ok(ranking_eval(sf, theta, data, noise, false)?.0)
}

pub fn ranking_gradient(
    sf: &ScoringFunction,
    theta: &[f64],
    data: &Dataset,
    noise: &NoiseDistribution,
) -> Result<Vec<f64>> {
    Ok(ranking_eval(sf, theta, data, noise, true)?.1.expect("gradient requested"))
}

pub fn ranking_value_and_grad(
    sf: &ScoringFunction,
    theta: &[f64],
    data: &Dataset,
    noise: &NoiseDistribution,
) -> Result<(f64, Vec<f64>)> {
    let (v, g) = ranking_eval(sf, theta, data, noise, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Binary terms of every cell at one input, weighted by how often the cell
/// occurs as a positive and as a negative. `z = ŝ - γ - log K`; the gradient
/// has the `γ` coordinate last.
fn binary_group(
    sf: &ScoringFunction,
    theta: &[f64],
    offset: f64,
    noise: &NoiseDistribution,
    x: usize,
    labels: &[usize],
    positives: &[f64],
    negatives: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    let mut z = shifted_scores(sf, theta, noise, x, labels);
    z.iter_mut().for_each(|v| *v -= offset);
    let terms: Vec<f64> = z
        .iter()
        .zip(positives.iter().zip(negatives))
        .map(|(&zc, (&cp, &cn))| {
            let mut t = 0.0;
            if cp > 0.0 {
                t += cp * log_sigmoid(zc);
            }
            if cn > 0.0 {
                t += cn * log_sigmoid(-zc);
            }
            t
        })
        .collect();
    if let Some(g) = grad {
        let d = theta.len();
        let w: Vec<f64> = z
            .iter()
            .zip(positives.iter().zip(negatives))
            .map(|(&zc, (&cp, &cn))| cp - (cp + cn) * sigmoid(zc))
            .collect();
        let (head, tail) = g.split_at_mut(d);
        sf.accumulate_grad(theta, x, labels, &w, head);
        tail[0] -= pairwise_sum(&w);
    }
    pairwise_sum(&terms)
}

fn binary_eval(
    sf: &ScoringFunction,
    bp: &BinaryParams,
    data: &Dataset,
    noise: &NoiseDistribution,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let theta = bp.theta.as_slice();
    check_dataset(sf, theta, data)?;
    check_noise(sf, noise)?;
    // the objective depends on the data only through per-cell counts
    let cells = data.cell_counts();
    let offset = bp.gamma + (data.k() as f64).ln();
    Ok(scaled_sum(cells.groups(), data.len(), with_grad.then_some(theta.len() + 1), |g, grad| {
        let r = cells.range(g);
        binary_group(
            sf,
            theta,
            offset,
            noise,
            cells.inputs[g],
            &cells.labels[r.clone()],
            &cells.positives[r.clone()],
            &cells.negatives[r],
            grad,
        )
    }))
}

/// `L_B^n(θ,γ) = (1/n) Σ_i [log g(x_i,y_i) + Σ_k log(1 - g(x_i,y_{i,k}))]`.
pub fn binary_objective(
    sf: &ScoringFunction,
    bp: &BinaryParams,
    data: &Dataset,
    noise: &NoiseDistribution,
) -> Result<f64> {
    Ok(binary_eval(sf, bp, data, noise, false)?.0)
}

/// Gradient of [`binary_objective`] in `(θ, γ)`; length `d + 1`.
pub fn binary_gradient(
    sf: &ScoringFunction,
    bp: &BinaryParams,
    data: &Dataset,
    noise: &NoiseDistribution,
) -> Result<Vec<f64>> {
    Ok(binary_eval(sf, bp, data, noise, true)?.1.expect("gradient requested"))
}

pub fn binary_value_and_grad(
    sf: &ScoringFunction,
    bp: &BinaryParams,
    data: &Dataset,
    noise: &NoiseDistribution,
) -> Result<(f64, Vec<f64>)> {
    let (v, g) = binary_eval(sf, bp, data, noise, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Log-likelihood of every positive at one input; `counts[y]` is how often
/// label `y` was observed there.
fn mle_group(
    sf: &ScoringFunction,
    theta: &[f64],
    labels: &[usize],
    x: usize,
    counts: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    let mut p = vec![0.0; labels.len()];
    sf.scores_into(theta, x, labels, &mut p);
    let total: f64 = counts.iter().sum();
    let fit: Vec<f64> = counts.iter().zip(&p).filter(|(c, _)| **c > 0.0).map(|(c, s)| c * s).collect();
    let lse = softmax_in_place(&mut p);
    if let Some(g) = grad {
        p.iter_mut().zip(counts).for_each(|(v, c)| *v = c - total * *v);
        sf.accumulate_grad(theta, x, labels, &p, g);
    }
    pairwise_sum(&fit) - total * lse
}

fn mle_eval(
    sf: &ScoringFunction,
    theta: &[f64],
    data: &Dataset,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_dataset(sf, theta, data)?;
    let labels: Vec<usize> = (0..sf.num_labels()).collect();
    let cells = data.cell_counts();
    Ok(scaled_sum(cells.groups(), data.len(), with_grad.then_some(theta.len()), |g, grad| {
        let r = cells.range(g);
        if cells.positives[r.clone()].iter().all(|&c| c == 0.0) {
            return 0.0;
        }
        let mut counts = vec![0.0; labels.len()];
        for (&y, &c) in cells.labels[r.clone()].iter().zip(&cells.positives[r]) {
            counts[y] = c;
        }
        mle_group(sf, theta, &labels, cells.inputs[g], &counts, grad)
    }))
}

/// Mean conditional log-likelihood `(1/n) Σ_i log p(y_i|x_i;θ)`.
pub fn mle_objective(sf: &ScoringFunction, theta: &[f64], data: &Dataset) -> Result<f64> {
    Ok(mle_eval(sf, theta, data, false)?.0)
}

pub fn mle_gradient(sf: &ScoringFunction, theta: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    Ok(mle_eval(sf, theta, data, true)?.1.expect("gradient requested"))
}

pub fn mle_value_and_grad(
    sf: &ScoringFunction,
    theta: &[f64],
    data: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    let (v, g) = mle_eval(sf, theta, data, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Model posterior `q`, true posterior `β`, tuple weight `α` and the
/// cross-entropy `-Σ β log q` for the candidate tuple `cands` at input `x`.
pub fn posteriors(
    sf: &ScoringFunction,
    theta: &[f64],
    problem: &ConditionalProblem,
    noise: &NoiseDistribution,
    x: usize,
    cands: &[usize],
) -> Result<PosteriorTable> {
    sf.check_params(theta)?;
    check_noise(sf, noise)?;
    if cands.len() < 2 {
        return Err(Error::Config("a candidate tuple needs K >= 1 negatives".into()));
    }
    if x >= problem.m_x() || cands.iter().any(|&y| y >= problem.m_y()) {
        return Err(Error::Config("tuple indices out of range".into()));
    }
    let mut log_q = shifted_scores(sf, theta, noise, x, cands);
    let lse = log_sum_exp(&log_q);
    log_q.iter_mut().for_each(|v| *v -= lse);
    let q: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();

    let row = problem.conditional(x);
    let ratios: Vec<f64> = cands.iter().map(|&y| row[y] / noise.prob(y)).collect();
    let total: f64 = ratios.iter().sum();
    let beta: Vec<f64> = ratios.iter().map(|r| r / total).collect();

    // α = Σ_k p(x, ȳ_k) Π_{j≠k} p_N(ȳ_j) = p_X(x) Π_j p_N(ȳ_j) Σ_k p(ȳ_k|x)/p_N(ȳ_k)
    let noise_prod: f64 = cands.iter().map(|&y| noise.prob(y)).product();
    let alpha = problem.p_x()[x] * noise_prod * total;

    let cross_entropy = -beta.iter().zip(&log_q).map(|(b, lq)| b * lq).sum::<f64>();
    Ok(PosteriorTable {
        q,
        beta,
        alpha,
        cross_entropy,
    })
}

/// `m_x · m_y^(slots)`, or a budget error when it exceeds the budget.
pub(crate) fn enumeration_count(m_x: usize, m_y: usize, slots: usize) -> Result<u128> {
    let required = (m_y as u128)
        .checked_pow(slots as u32)
        .and_then(|v| v.checked_mul(m_x as u128))
        .unwrap_or(u128::MAX);
    if required > ENUMERATION_BUDGET {
        return Err(Error::Budget {
            required,
            limit: ENUMERATION_BUDGET,
        });
    }
    Ok(required)
}

/// Odometer over `Y^len`.
pub(crate) struct Tuples {
    current: Vec<usize>,
    m_y: usize,
    done: bool,
}

impl Tuples {
    pub(crate) fn new(m_y: usize, len: usize) -> Self {
        Self {
            current: vec![0; len],
            m_y,
            done: false,
        }
    }

    /// The current tuple, or `None` once exhausted.
    pub(crate) fn next_tuple(&mut self) -> Option<&[usize]> {
        if self.done {
            return None;
        }
        Some(&self.current)
    }

    pub(crate) fn advance(&mut self) {
        for slot in self.current.iter_mut().rev() {
            *slot += 1;
            if *slot < self.m_y {
                return;
            }
            *slot = 0;
        }
        self.done = true;
    }
}

fn population_checks(
    sf: &ScoringFunction,
    theta: &[f64],
    problem: &ConditionalProblem,
    noise: &NoiseDistribution,
    k: usize,
) -> Result<()> {
    sf.check_params(theta)?;
    check_noise(sf, noise)?;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if sf.num_inputs() != problem.m_x() || sf.num_labels() != problem.m_y() {
        return Err(Error::Config(format!(
            "model covers {}x{} cells, problem has {}x{}",
            sf.num_inputs(),
            sf.num_labels(),
            problem.m_x(),
            problem.m_y()
        )));
    }
    Ok(())
}

/// Exact `L_R^∞(θ)` and its gradient by enumerating `X × Y^(K+1)`.
pub fn population_ranking_exact(
    sf: &ScoringFunction,
    theta: &[f64],
    problem: &ConditionalProblem,
    noise: &NoiseDistribution,
    k: usize,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    population_checks(sf, theta, problem, noise, k)?;
    enumeration_count(problem.m_x(), problem.m_y(), k + 1)?;
    let per_x: Vec<(f64, Option<Vec<f64>>)> = (0..problem.m_x())
        .into_par_iter()
        .map(|x| {
            let mut grad = with_grad.then(|| vec![0.0; theta.len()]);
            let mut terms = Vec::new();
            let mut tuples = Tuples::new(problem.m_y(), k + 1);
            while let Some(t) = tuples.next_tuple() {
                let w = problem.p_xy(x, t[0]) * t[1..].iter().map(|&y| noise.prob(y)).product::<f64>();
                let t = t.to_vec();
                terms.push(w * ranking_term(sf, theta, noise, x, &t, w, grad.as_deref_mut()));
                tuples.advance();
            }
            (pairwise_sum(&terms), grad)
        })
        .collect();
    let value = pairwise_sum(&per_x.iter().map(|p| p.0).collect::<Vec<_>>());
    let grad = with_grad.then(|| {
        let gs: Vec<Vec<f64>> = per_x.into_iter().filter_map(|p| p.1).collect();
        pairwise_sum_vectors(&gs, theta.len())
    });
    Ok((value, grad))
}

/// Number of batches used for batch-means standard errors.
pub const MC_BATCHES: usize = 32;

/// Mean and batch-means standard error of equally sized batches.
pub(crate) fn batch_means(samples: &[f64]) -> Estimate {
    let batches = MC_BATCHES.min(samples.len()).max(1);
    let per = samples.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| pairwise_sum(&samples[b * per..(b + 1) * per]) / per as f64)
        .collect();
    let mean = pairwise_sum(&means) / batches as f64;
    let stderr = if batches > 1 {
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
        Some((var / batches as f64).sqrt())
    } else {
        None
    };
    Estimate {
        value: mean,
        stderr,
    }
}

/// `L_R^∞(θ) = E[L_R^n(θ)]`, by exact enumeration or Monte Carlo.
///
/// Exact mode never falls back to sampling; it fails with a budget error
/// when `m_x · m_y^(K+1)` exceeds [`ENUMERATION_BUDGET`].
pub fn population_ranking_objective(
    sf: &ScoringFunction,
    theta: &[f64],
    problem: &ConditionalProblem,
    noise: &NoiseDistribution,
    k: usize,
    mode: EvalMode,
) -> Result<Estimate> {
    match mode {
        EvalMode::Exact => {
            let (value, _) = population_ranking_exact(sf, theta, problem, noise, k, false)?;
            Ok(Estimate {
                value,
                stderr: None,
            })
        }
        EvalMode::MonteCarlo { samples, seed } => {
            population_checks(sf, theta, problem, noise, k)?;
            let per_batch = samples / MC_BATCHES;
            if per_batch == 0 {
                return Err(Error::Config(format!(
                    "Monte Carlo needs at least {MC_BATCHES} samples, got {samples}"
                )));
            }
            let joint: Vec<f64> = (0..problem.m_x())
                .flat_map(|x| (0..problem.m_y()).map(move |y| (x, y)))
                .map(|(x, y)| problem.p_xy(x, y))
                .collect();
            let joint = NoiseDistribution::from_weights(&joint)
                .or_else(|_| NoiseDistribution::from_weights(&[joint[0], 0.0]))?;
            let draws: Vec<f64> = (0..MC_BATCHES)
                .into_par_iter()
                .flat_map_iter(|b| {
                    let mut r = rng::substream(seed, 0, &[b as u64]);
                    let joint = &joint;
                    (0..per_batch)
                        .map(move |_| {
                            let cell = joint.sample(&mut r);
                            let (x, y0) = (cell / problem.m_y(), cell % problem.m_y());
                            let mut cands = Vec::with_capacity(k + 1);
                            cands.push(y0);
                            cands.extend((0..k).map(|_| noise.sample(&mut r)));
                            (x, cands)
                        })
                        .collect::<Vec<_>>()
                })
                .map(|(x, cands)| ranking_term(sf, theta, noise, x, &cands, 1.0, None))
                .collect();
            Ok(batch_means(&draws))
        }
    }
}

/// `L_R^∞` written as `-Σ_x Σ_ȳ α(x,ȳ) C(x,ȳ;θ) / (K+1)`, enumerated over
/// every tuple. An independent route to [`population_ranking_objective`].
pub fn ranking_objective_cross_entropy_form(
    sf: &ScoringFunction,
    theta: &[f64],
    problem: &ConditionalProblem,
    noise: &NoiseDistribution,
    k: usize,
) -> Result<f64> {
    population_checks(sf, theta, problem, noise, k)?;
    enumeration_count(problem.m_x(), problem.m_y(), k + 1)?;
    let mut terms = Vec::new();
    for x in 0..problem.m_x() {
        let mut tuples = Tuples::new(problem.m_y(), k + 1);
        while let Some(t) = tuples.next_tuple() {
            let t = t.to_vec();
            let post = posteriors(sf, theta, problem, noise, x, &t)?;
            terms.push(-post.alpha * post.cross_entropy / (k + 1) as f64);
            tuples.advance();
        }
    }
    Ok(pairwise_sum(&terms))
}

/// Exact `L_B^∞(θ,γ) = Σ_{x,y} [p(x,y) log g + K p_X(x) p_N(y) log(1-g)]`
/// and its `(θ, γ)` gradient.
pub fn population_binary_value_and_grad(
    sf: &ScoringFunction,
    bp: &BinaryParams,
    problem: &ConditionalProblem,
    noise: &NoiseDistribution,
    k: usize,
) -> Result<(f64, Vec<f64>)> {
    let theta = bp.theta.as_slice();
    population_checks(sf, theta, problem, noise, k)?;
    let kf = k as f64;
    let offset = bp.gamma + kf.ln();
    let labels: Vec<usize> = (0..problem.m_y()).collect();
    let d = theta.len();
    let mut grad = vec![0.0; d + 1];
    let mut terms = Vec::with_capacity(problem.m_x() * problem.m_y());
    for x in 0..problem.m_x() {
        let z: Vec<f64> = shifted_scores(sf, theta, noise, x, &labels)
            .into_iter()
            .map(|v| v - offset)
            .collect();
        let mut w = vec![0.0; labels.len()];
        for (y, &zy) in z.iter().enumerate() {
            let pos = problem.p_xy(x, y);
            let neg = kf * problem.p_x()[x] * noise.prob(y);
            terms.push(pos * log_sigmoid(zy) + neg * log_sigmoid(-zy));
            w[y] = pos * (1.0 - sigmoid(zy)) - neg * sigmoid(zy);
        }
        grad[d] -= w.iter().sum::<f64>();
        sf.accumulate_grad(theta, x, &labels, &w, &mut grad[..d]);
    }
    Ok((pairwise_sum(&terms), grad))
}

pub fn population_binary_objective(
    sf: &ScoringFunction,
    bp: &BinaryParams,
    problem: &ConditionalProblem,
    noise: &NoiseDistribution,
    k: usize,
) -> Result<f64> {
    Ok(population_binary_value_and_grad(sf, bp, problem, noise, k)?.0)
}

/// Draws the `n × m` regularizer noise labels for the given example ids at
/// `epoch`; each example reads its own sub-stream.
pub fn draw_regularizer_noise(
    cfg: &RegularizerConfig,
    noise: &NoiseDistribution,
    example_ids: &[usize],
    epoch: u64,
) -> Vec<usize> {
    let mut out = vec![0; example_ids.len() * cfg.m];
    out.par_chunks_mut(cfg.m)
        .zip(example_ids.par_iter())
        .for_each(|(row, &id)| {
            let mut r = rng::substream(cfg.seed, cfg.stream, &[epoch, id as u64]);
            for slot in row.iter_mut() {
                *slot = noise.inverse_cdf(r.random::<f64>());
            }
        });
    out
}

/// Self-normalization penalty and its gradient, with the noise draws
/// `draws` (`n × m`, see [`draw_regularizer_noise`]) held fixed.
pub fn regularizer(
    sf: &ScoringFunction,
    theta: &[f64],
    data: &Dataset,
    noise: &NoiseDistribution,
    cfg: &RegularizerConfig,
    draws: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_dataset(sf, theta, data)?;
    check_noise(sf, noise)?;
    if draws.len() != data.len() * cfg.m {
        return Err(Error::Config(format!(
            "expected {} x {} regularizer draws, got {}",
            data.len(),
            cfg.m,
            draws.len()
        )));
    }
    if cfg.alpha == 0.0 {
        return Ok((0.0, vec![0.0; theta.len()]));
    }
    let log_m = (cfg.m as f64).ln();
    let (mean, grad) = mean_over_examples(data.len(), Some(theta.len()), |i, g| {
        let labels = &draws[i * cfg.m..(i + 1) * cfg.m];
        let x = data.x(i);
        let mut s = shifted_scores(sf, theta, noise, x, labels);
        let log_mean = softmax_in_place(&mut s) - log_m;
        if let Some(g) = g {
            let scale = 2.0 * log_mean;
            s.iter_mut().for_each(|w| *w *= scale);
            sf.accumulate_grad(theta, x, labels, &s, g);
        }
        log_mean * log_mean
    });
    let mut grad = grad.expect("gradient requested");
    grad.iter_mut().for_each(|v| *v *= cfg.alpha);
    Ok((cfg.alpha * mean, grad))
}

/// One row of an objective trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveRow {
    pub objective: String,
    pub value: f64,
    pub grad_norm: f64,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
}

impl ObjectiveRow {
    pub const HEADER: &'static str = "objective,value,grad_norm,n,K,seed";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.objective, self.value, self.grad_norm, self.n, self.k, self.seed
        )
    }
}
