//! Distances between the true and fitted conditionals, and perplexity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConditionalProblem, ScoringFunction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub kl: f64,
    pub d_metric: f64,
    /// `max_x TV(p(·|x), p̂(·|x))`.
    pub worst_tv: f64,
}

fn check(problem: &ConditionalProblem, sf: &ScoringFunction) -> Result<()> {
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

/// `Σ_x p_X(x) KL(p(·|x) ‖ p̂(·|x))`, in nats.
pub fn kl_divergence(problem: &ConditionalProblem, sf: &ScoringFunction, theta: &[f64]) -> Result<f64> {
    check(problem, sf)?;
    let mut total = 0.0;
    for x in 0..problem.m_x() {
        let est = sf.cond_prob(theta, x)?;
        let mut kl = 0.0;
        for (y, (&p, &q)) in problem.conditional(x).iter().zip(&est).enumerate() {
            if q == 0.0 {
                return Err(Error::Numeric(format!("estimated p({y}|{x}) underflows to zero")));
            }
            kl += p * (p / q).ln();
        }
        total += problem.p_x()[x] * kl;
    }
    Ok(total.max(0.0))
}

/// `Σ_{x,y} p(x,y) (p̂(y|x) − p(y|x))²`.
pub fn d_metric(problem: &ConditionalProblem, sf: &ScoringFunction, theta: &[f64]) -> Result<f64> {
    check(problem, sf)?;
    let mut total = 0.0;
    for x in 0..problem.m_x() {
        let est = sf.cond_prob(theta, x)?;
        for (y, (&p, &q)) in problem.conditional(x).iter().zip(&est).enumerate() {
            total += problem.p_xy(x, y) * (q - p).powi(2);
        }
    }
    Ok(total)
}

pub fn worst_case_tv(problem: &ConditionalProblem, sf: &ScoringFunction, theta: &[f64]) -> Result<f64> {
    check(problem, sf)?;
    let mut worst: f64 = 0.0;
    for x in 0..problem.m_x() {
        let est = sf.cond_prob(theta, x)?;
        let tv = 0.5 * problem.conditional(x).iter().zip(&est).map(|(p, q)| (p - q).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    Ok(worst)
}

pub fn evaluate(problem: &ConditionalProblem, sf: &ScoringFunction, theta: &[f64]) -> Result<EvalResult> {
    Ok(EvalResult {
        kl: kl_divergence(problem, sf, theta)?,
        d_metric: d_metric(problem, sf, theta)?,
        worst_tv: worst_case_tv(problem, sf, theta)?,
    })
}

/// `exp(−mean log p̂(y_t | x_t))` over `(context, label)` pairs.
pub fn perplexity(sf: &ScoringFunction, theta: &[f64], pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("perplexity of an empty stream".into()));
    }
    sf.check_params(theta)?;
    let mut cache: std::collections::HashMap<usize, Vec<f64>> = std::collections::HashMap::new();
    let mut nll = Vec::with_capacity(pairs.len());
    for &(x, y) in pairs {
        if y >= sf.num_labels() {
            return Err(Error::Config(format!("label {y} out of range")));
        }
        let log_p = cache.entry(x).or_insert_with(|| {
            let mut s = sf.all_scores(theta, x);
            let lse = crate::numeric::log_sum_exp(&s);
            s.iter_mut().for_each(|v| *v -= lse);
            s
        });
        nll.push(-log_p[y]);
    }
    Ok((crate::numeric::pairwise_sum(&nll) / pairs.len() as f64).exp())
}
