//! Asymptotic covariances of the MLE and of both NCE estimators, and
//! replication studies that check them against repeated fits.
//!
//! Matrices are assembled in flat row-major buffers and handed to nalgebra
//! only for the symmetric eigendecomposition used to invert them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConditionalProblem, ScoringFunction};
use crate::numeric::{pairwise_sum_vectors, sigmoid};
use crate::objectives::{enumeration_count, Tuples, MC_BATCHES};
use crate::optimize::{fit, FitConfig, FitData, ObjectiveKind};
use crate::rng;
use crate::sampling::{generate_dataset, NoiseDistribution, SamplingConfig};

/// Smallest eigenvalue accepted when inverting an information matrix.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Largest gap tolerated between the Hessian and score-variance forms of the
/// ranking information in exact mode.
pub const FACTOR_AGREEMENT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mle,
    Ranking,
    Binary,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Mle => "mle",
            Estimator::Ranking => "ranking",
            Estimator::Binary => "binary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovMode {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

impl CovMode {
    pub fn label(self) -> String {
        match self {
            CovMode::Exact => "exact".into(),
            CovMode::MonteCarlo { samples, .. } => format!("mc:{samples}"),
        }
    }
}

/// Asymptotic covariance `I^{-1}` of `√n(θ̂ − θ*)` for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub estimator: Estimator,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub dim: usize,
    pub mode: CovMode,
    pub inverse: Vec<Vec<f64>>,
    /// Element-wise Monte Carlo standard errors of the information matrix.
    pub stderr: Option<Vec<Vec<f64>>>,
    pub mse_infinity: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl CovarianceReport {
    fn new(estimator: Estimator, k: Option<usize>, mode: CovMode, inverse: &DMatrix<f64>) -> Self {
        Self {
            estimator,
            k,
            dim: inverse.nrows(),
            mode,
            inverse: rows_of(inverse),
            stderr: None,
            mse_infinity: inverse.trace() / inverse.nrows() as f64,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.inverse[i][j])
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn to_matrix(flat: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, flat)
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// `trace(I^{-1}) / d`.
pub fn mse_infinity(report: &CovarianceReport) -> f64 {
    let d = report.dim as f64;
    (0..report.dim).map(|i| report.inverse[i][i]).sum::<f64>() / d
}

/// Inverse of a symmetric positive definite matrix; fails when the
/// smallest eigenvalue is below [`EIGEN_FLOOR`].
pub fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if !(min >= EIGEN_FLOOR) {
        return Err(Error::Singular {
            eigenvalue: min,
            floor: EIGEN_FLOOR,
        });
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose())
}

fn add_outer(m: &mut [f64], a: &[f64], b: &[f64], w: f64) {
    let d = a.len();
    for i in 0..d {
        let wa = w * a[i];
        let row = &mut m[i * d..(i + 1) * d];
        for (r, bj) in row.iter_mut().zip(b) {
            *r += wa * bj;
        }
    }
}

/// Scores and score gradients of every cell at `θ`.
struct CellTable {
    m_y: usize,
    d: usize,
    scores: Vec<f64>,
    grads: Vec<f64>,
}

impl CellTable {
    fn new(sf: &ScoringFunction, theta: &[f64]) -> Result<Self> {
        sf.check_params(theta)?;
        let (m_x, m_y, d) = (sf.num_inputs(), sf.num_labels(), sf.num_params());
        let mut scores = Vec::with_capacity(m_x * m_y);
        let mut grads = Vec::with_capacity(m_x * m_y * d);
        for x in 0..m_x {
            scores.extend(sf.all_scores(theta, x));
            for y in 0..m_y {
                grads.extend(sf.score_grad(theta, x, y)?);
            }
        }
        Ok(Self { m_y, d, scores, grads })
    }

    fn score(&self, x: usize, y: usize) -> f64 {
        self.scores[x * self.m_y + y]
    }

    fn grad(&self, x: usize, y: usize) -> &[f64] {
        let at = (x * self.m_y + y) * self.d;
        &self.grads[at..at + self.d]
    }
}

fn check_shapes(problem: &ConditionalProblem, sf: &ScoringFunction) -> Result<()> {
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

fn check_noise(problem: &ConditionalProblem, noise: &NoiseDistribution) -> Result<()> {
    if noise.len() != problem.m_y() {
        return Err(Error::Config(format!(
            "noise distribution covers {} labels, problem has {}",
            noise.len(),
            problem.m_y()
        )));
    }
    Ok(())
}

/// Conditional label distribution used for expectations at `θ`: the model's
/// own conditional when the problem was generated by a model, the stored
/// table otherwise.
fn label_probs(problem: &ConditionalProblem, sf: &ScoringFunction, theta: &[f64], x: usize) -> Result<Vec<f64>> {
    if problem.truth().is_some() {
        sf.cond_prob(theta, x)
    } else {
        Ok(problem.conditional(x).to_vec())
    }
}

/// `I_θ = E_X Var_{Y|X}[∇_θ s(x, y; θ)]`, by exact summation.
pub fn fisher_information(problem: &ConditionalProblem, sf: &ScoringFunction, theta: &[f64]) -> Result<DMatrix<f64>> {
    check_shapes(problem, sf)?;
    let cells = CellTable::new(sf, theta)?;
    let d = cells.d;
    let mut info = vec![0.0; d * d];
    for x in 0..problem.m_x() {
        let p = label_probs(problem, sf, theta, x)?;
        let mut mean = vec![0.0; d];
        let mut second = vec![0.0; d * d];
        for (y, &py) in p.iter().enumerate() {
            let g = cells.grad(x, y);
            add_outer(&mut second, g, g, py);
            for (m, gi) in mean.iter_mut().zip(g) {
                *m += py * gi;
            }
        }
        add_outer(&mut second, &mean, &mean, -1.0);
        let px = problem.p_x()[x];
        for (i, s) in info.iter_mut().zip(&second) {
            *i += px * s;
        }
    }
    Ok(to_matrix(&info, d))
}

pub fn fisher_report(problem: &ConditionalProblem, sf: &ScoringFunction, theta: &[f64]) -> Result<CovarianceReport> {
    let inv = invert_spd(&fisher_information(problem, sf, theta)?)?;
    Ok(CovarianceReport::new(Estimator::Mle, None, CovMode::Exact, &inv))
}

/// Expectations entering the ranking information, accumulated over
/// `(x, y_0, negatives)`.
///
/// With `v = Σ_j q_j ∇ŝ_j`:
/// `w = E[v vᵀ]`, `w_cross = E[Σ_j q_j ∇ŝ_0 ∇ŝ_jᵀ]`,
/// `hess = E[Σ_j q_j ∇ŝ_j ∇ŝ_jᵀ] − w` and
/// `score_second = E[(∇ŝ_0 − v)(∇ŝ_0 − v)ᵀ]`, `score_mean = E[∇ŝ_0 − v]`.
#[derive(Clone)]
struct RankingMoments {
    w: Vec<f64>,
    w_cross: Vec<f64>,
    weighted_second: Vec<f64>,
    score_second: Vec<f64>,
    score_mean: Vec<f64>,
}

impl RankingMoments {
    fn zeros(d: usize) -> Self {
        Self {
            w: vec![0.0; d * d],
            w_cross: vec![0.0; d * d],
            weighted_second: vec![0.0; d * d],
            score_second: vec![0.0; d * d],
            score_mean: vec![0.0; d],
        }
    }

    fn flat(&self) -> Vec<f64> {
        [&self.w[..], &self.w_cross, &self.weighted_second, &self.score_second, &self.score_mean].concat()
    }

    fn from_flat(v: &[f64], d: usize) -> Self {
        let dd = d * d;
        Self {
            w: v[..dd].to_vec(),
            w_cross: v[dd..2 * dd].to_vec(),
            weighted_second: v[2 * dd..3 * dd].to_vec(),
            score_second: v[3 * dd..4 * dd].to_vec(),
            score_mean: v[4 * dd..4 * dd + d].to_vec(),
        }
    }

    fn scale(&mut self, s: f64) {
        for v in [&mut self.w, &mut self.w_cross, &mut self.weighted_second, &mut self.score_second, &mut self.score_mean] {
            v.iter_mut().for_each(|e| *e *= s);
        }
    }
}

/// Adds the contributions of one negative tuple at input `x`, summing over
/// the positive label exactly, weighted by `weight · p_X(x) p(y_0|x)`.
#[allow(clippy::too_many_arguments)]
fn accumulate_tuple(
    cells: &CellTable,
    log_noise: &[f64],
    x: usize,
    p_x: f64,
    p_y: &[f64],
    negatives: &[usize],
    weight: f64,
    shift: f64,
    acc: &mut RankingMoments,
) {
    let d = cells.d;
    let mut neg_mass = 0.0;
    let mut neg_first = vec![0.0; d];
    let mut neg_second = vec![0.0; d * d];
    for &y in negatives {
        let a = (cells.score(x, y) - log_noise[y] - shift).exp();
        let g = cells.grad(x, y);
        neg_mass += a;
        for (f, gi) in neg_first.iter_mut().zip(g) {
            *f += a * gi;
        }
        add_outer(&mut neg_second, g, g, a);
    }
    let mut v = vec![0.0; d];
    let mut r = vec![0.0; d];
    for (y0, &py) in p_y.iter().enumerate() {
        let w = weight * p_x * py;
        let a0 = (cells.score(x, y0) - log_noise[y0] - shift).exp();
        let z = a0 + neg_mass;
        let g0 = cells.grad(x, y0);
        for i in 0..d {
            v[i] = (a0 * g0[i] + neg_first[i]) / z;
            r[i] = g0[i] - v[i];
        }
        add_outer(&mut acc.w, &v, &v, w);
        add_outer(&mut acc.w_cross, g0, &v, w);
        add_outer(&mut acc.weighted_second, g0, g0, w * a0 / z);
        for (s, n) in acc.weighted_second.iter_mut().zip(&neg_second) {
            *s += w * n / z;
        }
        add_outer(&mut acc.score_second, &r, &r, w);
        for (m, ri) in acc.score_mean.iter_mut().zip(&r) {
            *m += w * ri;
        }
    }
}

struct RankingParts {
    d: usize,
    second: Vec<f64>,
    pooled: RankingMoments,
    batches: Option<Vec<RankingMoments>>,
}

fn ranking_parts(
    problem: &ConditionalProblem,
    sf: &ScoringFunction,
    theta: &[f64],
    noise: &NoiseDistribution,
    k: usize,
    mode: CovMode,
) -> Result<RankingParts> {
    check_shapes(problem, sf)?;
    check_noise(problem, noise)?;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let cells = CellTable::new(sf, theta)?;
    let d = cells.d;
    let (m_x, m_y) = (problem.m_x(), problem.m_y());
    let log_noise: Vec<f64> = (0..m_y).map(|y| noise.log_prob(y)).collect();
    let probs: Vec<Vec<f64>> = (0..m_x).map(|x| label_probs(problem, sf, theta, x)).collect::<Result<_>>()?;
    let shifts: Vec<f64> = (0..m_x)
        .map(|x| (0..m_y).map(|y| cells.score(x, y) - log_noise[y]).fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let mut second = vec![0.0; d * d];
    for x in 0..m_x {
        for (y, &py) in probs[x].iter().enumerate() {
            let g = cells.grad(x, y);
            add_outer(&mut second, g, g, problem.p_x()[x] * py);
        }
    }

    let (pooled, batches) = match mode {
        CovMode::Exact => {
            enumeration_count(m_x, m_y, k)?;
            let per_x: Vec<Vec<f64>> = (0..m_x)
                .into_par_iter()
                .map(|x| {
                    let mut acc = RankingMoments::zeros(d);
                    let mut tuples = Tuples::new(m_y, k);
                    while let Some(t) = tuples.next_tuple() {
                        let w: f64 = t.iter().map(|&y| noise.prob(y)).product();
                        let t = t.to_vec();
                        accumulate_tuple(&cells, &log_noise, x, problem.p_x()[x], &probs[x], &t, w, shifts[x], &mut acc);
                        tuples.advance();
                    }
                    acc.flat()
                })
                .collect();
            let len = per_x[0].len();
            (RankingMoments::from_flat(&pairwise_sum_vectors(&per_x, len), d), None)
        }
        CovMode::MonteCarlo { samples, seed } => {
            let per_batch = samples / MC_BATCHES;
            if per_batch == 0 {
                return Err(Error::Config(format!(
                    "Monte Carlo needs at least {MC_BATCHES} samples, got {samples}"
                )));
            }
            let batches: Vec<RankingMoments> = (0..MC_BATCHES)
                .into_par_iter()
                .map(|b| {
                    let mut r = rng::substream(seed, 1, &[k as u64, b as u64]);
                    let mut acc = RankingMoments::zeros(d);
                    let mut negs = vec![0; k];
                    for _ in 0..per_batch {
                        negs.iter_mut().for_each(|y| *y = noise.sample(&mut r));
                        for x in 0..m_x {
                            accumulate_tuple(&cells, &log_noise, x, problem.p_x()[x], &probs[x], &negs, 1.0, shifts[x], &mut acc);
                        }
                    }
                    acc.scale(1.0 / per_batch as f64);
                    acc
                })
                .collect();
            let flats: Vec<Vec<f64>> = batches.iter().map(RankingMoments::flat).collect();
            let len = flats[0].len();
            let mut pooled = RankingMoments::from_flat(&pairwise_sum_vectors(&flats, len), d);
            pooled.scale(1.0 / MC_BATCHES as f64);
            (pooled, Some(batches))
        }
    };
    Ok(RankingParts {
        d,
        second,
        pooled,
        batches,
    })
}

fn ranking_information(second: &[f64], m: &RankingMoments, d: usize) -> DMatrix<f64> {
    to_matrix(second, d) - to_matrix(&m.w, d)
}

/// `I_{R,K} = E[∇s ∇sᵀ] − W_{R,K}`, returned together with diagnostics.
fn ranking_cov_inner(
    problem: &ConditionalProblem,
    sf: &ScoringFunction,
    theta: &[f64],
    noise: &NoiseDistribution,
    k: usize,
    mode: CovMode,
) -> Result<(CovarianceReport, RankingParts)> {
    let parts = ranking_parts(problem, sf, theta, noise, k, mode)?;
    let d = parts.d;
    let m = &parts.pooled;
    let info = ranking_information(&parts.second, m, d);
    let w = to_matrix(&m.w, d);
    let w_cross = to_matrix(&m.w_cross, d);
    let hess = to_matrix(&m.weighted_second, d) - &w;
    let mean = DMatrix::from_column_slice(d, 1, &m.score_mean);
    let variance = to_matrix(&m.score_second, d) - &mean * mean.transpose();
    let factor_gap = max_abs_diff(&hess, &variance);
    if mode == CovMode::Exact && factor_gap > FACTOR_AGREEMENT {
        return Err(Error::Numeric(format!(
            "ranking Hessian and score variance differ by {factor_gap:.3e}; is the problem generated by this model?"
        )));
    }
    let inverse = invert_spd(&info)?;
    let mut report = CovarianceReport::new(Estimator::Ranking, Some(k), mode, &inverse);
    report.diagnostics.insert("factor_gap".into(), factor_gap);
    report.diagnostics.insert("w_symmetry_gap".into(), max_abs_diff(&w, &w_cross));
    report.diagnostics.insert("information_gap".into(), max_abs_diff(&info, &hess));
    report.diagnostics.insert("score_mean_norm".into(), mean.norm());
    if let Some(batches) = &parts.batches {
        let infos: Vec<DMatrix<f64>> = batches.iter().map(|b| ranking_information(&parts.second, b, d)).collect();
        let nb = infos.len() as f64;
        let se = DMatrix::from_fn(d, d, |i, j| {
            let var = infos.iter().map(|m| (m[(i, j)] - info[(i, j)]).powi(2)).sum::<f64>() / (nb - 1.0);
            (var / nb).sqrt()
        });
        report.stderr = Some(rows_of(&se));
    }
    Ok((report, parts))
}

/// Asymptotic covariance `I_{R,K}^{-1}` of the ranking estimator.
///
/// Exact mode enumerates every negative tuple in `Y^K` (the positive label
/// is summed exactly), subject to `m_x · m_y^K ≤ 10^7`; it also checks that
/// the Hessian and score-variance forms agree. Monte Carlo mode samples
/// negative tuples and reports batch-means standard errors.
pub fn ranking_asymptotic_cov(
    problem: &ConditionalProblem,
    sf: &ScoringFunction,
    theta: &[f64],
    noise: &NoiseDistribution,
    k: usize,
    mode: CovMode,
) -> Result<CovarianceReport> {
    Ok(ranking_cov_inner(problem, sf, theta, noise, k, mode)?.0)
}

/// Largest `|p(x,y)(1 − σ(s̃)) − K p_X(x) p_N(y) σ(s̃)|` over all cells, with
/// `s̃ = s − log p_N − γ − log K`. Zero at a self-normalized truth.
pub fn binary_decomposition_residual(
    problem: &ConditionalProblem,
    sf: &ScoringFunction,
    theta: &[f64],
    gamma: f64,
    noise: &NoiseDistribution,
    k: usize,
) -> Result<f64> {
    check_shapes(problem, sf)?;
    check_noise(problem, noise)?;
    let kf = k as f64;
    let mut worst: f64 = 0.0;
    for x in 0..problem.m_x() {
        let s = sf.all_scores(theta, x);
        for (y, sy) in s.iter().enumerate() {
            let z = sy - noise.log_prob(y) - gamma - kf.ln();
            let lhs = problem.p_xy(x, y) * (1.0 - sigmoid(z));
            let rhs = kf * problem.p_x()[x] * noise.prob(y) * sigmoid(z);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

/// Tolerance on `Σ_y exp(s − γ*)` for the binary covariance precondition.
const SELF_NORMALIZED_TOL: f64 = 1e-8;

/// Sandwich `W̃⁻¹ Var W̃⁻¹` over `(θ, γ)` for the binary estimator.
pub fn binary_sandwich(
    problem: &ConditionalProblem,
    sf: &ScoringFunction,
    theta: &[f64],
    gamma: f64,
    noise: &NoiseDistribution,
    k: usize,
) -> Result<DMatrix<f64>> {
    check_shapes(problem, sf)?;
    check_noise(problem, noise)?;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    for x in 0..problem.m_x() {
        let z: f64 = sf.all_scores(theta, x).iter().map(|s| (s - gamma).exp()).sum();
        if (z - 1.0).abs() > SELF_NORMALIZED_TOL {
            return Err(Error::Precondition(format!(
                "binary asymptotics need a self-normalized truth; Σ_y exp(s − γ) = {z} at input {x}"
            )));
        }
    }
    let cells = CellTable::new(sf, theta)?;
    let d1 = cells.d + 1;
    let kf = k as f64;
    let mut w = vec![0.0; d1 * d1];
    let mut mu_second = vec![0.0; d1 * d1];
    let mut gt = vec![0.0; d1];
    for x in 0..problem.m_x() {
        let mut mu = vec![0.0; d1];
        for y in 0..problem.m_y() {
            let z = cells.score(x, y) - noise.log_prob(y) - gamma - kf.ln();
            let one_minus = 1.0 - sigmoid(z);
            gt[..cells.d].copy_from_slice(cells.grad(x, y));
            gt[cells.d] = -1.0;
            add_outer(&mut w, &gt, &gt, problem.p_xy(x, y) * one_minus);
            let py = problem.conditional(x)[y];
            for (m, g) in mu.iter_mut().zip(&gt) {
                *m += py * one_minus * g;
            }
        }
        add_outer(&mut mu_second, &mu, &mu, problem.p_x()[x]);
    }
    let w = to_matrix(&w, d1);
    let var = &w - to_matrix(&mu_second, d1) * ((kf + 1.0) / kf);
    let w_inv = invert_spd(&w)?;
    Ok(&w_inv * var * &w_inv)
}

/// Asymptotic covariance `I_{B,K}^{-1}`: the `θ` block of the binary
/// sandwich. Requires a self-normalized truth.
pub fn binary_asymptotic_cov(
    problem: &ConditionalProblem,
    sf: &ScoringFunction,
    theta: &[f64],
    gamma: f64,
    noise: &NoiseDistribution,
    k: usize,
) -> Result<CovarianceReport> {
    let v = binary_sandwich(problem, sf, theta, gamma, noise, k)?;
    let d = sf.num_params();
    let block = v.view((0, 0), (d, d)).into_owned();
    let mut report = CovarianceReport::new(Estimator::Binary, Some(k), CovMode::Exact, &block);
    report.diagnostics.insert("gamma_variance".into(), v[(d, d)]);
    report.diagnostics.insert(
        "decomposition_residual".into(),
        binary_decomposition_residual(problem, sf, theta, gamma, noise, k)?,
    );
    Ok(report)
}

/// One point of an efficiency-rate curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    #[serde(rename = "K")]
    pub k: usize,
    /// `‖I_K^{-1} − I_θ*^{-1}‖_F`.
    pub norm_diff: f64,
    /// `MSE_∞(K) − MSE_∞(MLE)`.
    pub mse_gap: f64,
    pub mode: String,
    pub stderr: Option<f64>,
}

impl RateRow {
    pub const HEADER: &'static str = "K,norm_diff,mse_gap,mode,stderr";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.k,
            self.norm_diff,
            self.mse_gap,
            self.mode,
            self.stderr.map_or(String::new(), |s| s.to_string())
        )
    }
}

fn rate_row(k: usize, report: &CovarianceReport, fisher: &CovarianceReport, stderr: Option<f64>) -> RateRow {
    RateRow {
        k,
        norm_diff: (report.matrix() - fisher.matrix()).norm(),
        mse_gap: report.mse_infinity - fisher.mse_infinity,
        mode: report.mode.label(),
        stderr,
    }
}

/// Rate-curve point for the ranking estimator. In Monte Carlo mode the
/// standard error is the batch-means error of the per-batch norm gaps.
pub fn ranking_rate_point(
    problem: &ConditionalProblem,
    sf: &ScoringFunction,
    theta: &[f64],
    noise: &NoiseDistribution,
    k: usize,
    mode: CovMode,
    fisher: &CovarianceReport,
) -> Result<RateRow> {
    let (report, parts) = ranking_cov_inner(problem, sf, theta, noise, k, mode)?;
    let stderr = match &parts.batches {
        Some(batches) => {
            // first-order perturbation of the pooled inverse, so that small
            // batches need not be invertible on their own
            let f = fisher.matrix();
            let inv = report.matrix();
            let info = ranking_information(&parts.second, &parts.pooled, parts.d);
            let gaps: Vec<f64> = batches
                .iter()
                .map(|b| {
                    let delta = ranking_information(&parts.second, b, parts.d) - &info;
                    (&inv - &inv * delta * &inv - &f).norm()
                })
                .collect();
            let nb = gaps.len() as f64;
            let mean = gaps.iter().sum::<f64>() / nb;
            let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (nb - 1.0);
            Some((var / nb).sqrt())
        }
        None => None,
    };
    Ok(rate_row(k, &report, fisher, stderr))
}

pub fn binary_rate_point(
    problem: &ConditionalProblem,
    sf: &ScoringFunction,
    theta: &[f64],
    gamma: f64,
    noise: &NoiseDistribution,
    k: usize,
    fisher: &CovarianceReport,
) -> Result<RateRow> {
    let report = binary_asymptotic_cov(problem, sf, theta, gamma, noise, k)?;
    Ok(rate_row(k, &report, fisher, None))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("slope needs at least two matching points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("log-log slope needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// How each replication is fitted.
#[derive(Debug, Clone)]
pub struct ReplicationSpec {
    pub estimator: Estimator,
    pub k: usize,
    pub noise: NoiseDistribution,
    pub fit: FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub estimator: Estimator,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub replications: usize,
    /// Covariance of `√n(θ̂ − θ*)` across replications (divisor `R − 1`).
    pub empirical_cov: Vec<Vec<f64>>,
    /// Mean of `θ̂ − θ*`.
    pub mean_bias: Vec<f64>,
    pub theoretical_cov: Vec<Vec<f64>>,
    /// `‖Ĉ − C‖_F / ‖C‖_F`.
    pub rel_frobenius_error: f64,
    /// Mean of `n ‖θ̂ − θ*‖² / d`.
    pub empirical_mse: f64,
    pub theoretical_mse: f64,
    pub mse_rel_error: f64,
}

/// Theoretical covariance of the estimator described by `spec`.
pub fn theoretical_cov(problem: &ConditionalProblem, spec: &ReplicationSpec) -> Result<CovarianceReport> {
    let truth = problem.require_truth("asymptotic covariance")?;
    let theta = truth.theta.as_slice();
    match spec.estimator {
        Estimator::Mle => fisher_report(problem, &truth.scoring, theta),
        Estimator::Ranking => ranking_asymptotic_cov(problem, &truth.scoring, theta, &spec.noise, spec.k, CovMode::Exact),
        Estimator::Binary => {
            let gamma = truth.gamma.ok_or_else(|| {
                Error::Precondition("binary asymptotics need a self-normalized problem".into())
            })?;
            binary_asymptotic_cov(problem, &truth.scoring, theta, gamma, &spec.noise, spec.k)
        }
    }
}

/// Fits the estimator on one independent dataset per seed and compares the
/// spread of `√n(θ̂ − θ*)` with the theoretical covariance.
pub fn replicate(problem: &ConditionalProblem, spec: &ReplicationSpec, n: usize, seeds: &[u64]) -> Result<ReplicationSummary> {
    if seeds.len() < 2 {
        return Err(Error::field("replications", "at least two replications are required"));
    }
    if n == 0 {
        return Err(Error::field("n", "sample size must be positive"));
    }
    let truth = problem.require_truth("replication")?;
    let sf = &truth.scoring;
    let theta_star = truth.theta.as_slice();
    let d = theta_star.len();
    let theory = theoretical_cov(problem, spec)?;
    let mut cfg = spec.fit.clone();
    cfg.objective = match spec.estimator {
        Estimator::Mle => ObjectiveKind::Mle,
        Estimator::Ranking => ObjectiveKind::Ranking,
        Estimator::Binary => ObjectiveKind::Binary,
    };
    let k = if spec.estimator == Estimator::Mle { 1 } else { spec.k };
    let deviations: Vec<Vec<f64>> = seeds
        .par_iter()
        .enumerate()
        .map(|(index, &seed)| {
            let run = || -> Result<Vec<f64>> {
                let data = generate_dataset(problem, n, &SamplingConfig::new(k, seed, 0)?, &spec.noise)?;
                let report = fit(sf, FitData::Sample(&data), &spec.noise, &cfg)?;
                if !report.converged {
                    return Err(Error::Numeric(format!(
                        "fit stopped after {} iterations with gradient norm {:.3e}",
                        report.iterations, report.grad_norm
                    )));
                }
                Ok(report.theta.as_slice().iter().zip(theta_star).map(|(a, b)| a - b).collect())
            };
            run().map_err(|e| Error::Replication {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let r = deviations.len() as f64;
    let mean_bias = pairwise_sum_vectors(&deviations, d).into_iter().map(|v| v / r).collect::<Vec<_>>();
    let mut cov = vec![0.0; d * d];
    let mut sq = 0.0;
    for dev in &deviations {
        let centered: Vec<f64> = dev.iter().zip(&mean_bias).map(|(a, m)| a - m).collect();
        add_outer(&mut cov, &centered, &centered, n as f64 / (r - 1.0));
        sq += dev.iter().map(|v| v * v).sum::<f64>();
    }
    let cov = to_matrix(&cov, d);
    let target = theory.matrix();
    let empirical_mse = n as f64 * sq / (r * d as f64);
    Ok(ReplicationSummary {
        estimator: spec.estimator,
        k: spec.k,
        n,
        replications: seeds.len(),
        empirical_cov: rows_of(&cov),
        mean_bias,
        theoretical_cov: theory.inverse.clone(),
        rel_frobenius_error: (&cov - &target).norm() / target.norm(),
        empirical_mse,
        theoretical_mse: theory.mse_infinity,
        mse_rel_error: (empirical_mse - theory.mse_infinity).abs() / theory.mse_infinity,
    })
}

/// Replication seeds derived from a master seed.
pub fn replication_seeds(master: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|r| rng::derive(master, &[r])).collect()
}
