//! `--noise` specifications.

use nce_core::model::ConditionalProblem;
use nce_core::sampling::{unigram_power, NoiseDistribution};
use nce_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    Uniform,
    /// Label frequencies raised to a power; `unigram` is power 1.
    UnigramPow(f64),
}

impl std::str::FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(NoiseSpec::Uniform),
            "unigram" => Ok(NoiseSpec::UnigramPow(1.0)),
            _ => {
                let p = s
                    .strip_prefix("unigram-pow:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::field("noise", format!("expected uniform, unigram or unigram-pow:<p>, got `{s}`"))
                    })?;
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(Error::field("noise", format!("power must be >= 0, got {p}")));
                }
                Ok(NoiseSpec::UnigramPow(p))
            }
        }
    }
}

impl NoiseSpec {
    /// Noise over a problem's labels; the unigram is the label marginal
    /// `Σ_x p_X(x) p(y|x)`.
    pub fn for_problem(self, problem: &ConditionalProblem) -> Result<NoiseDistribution> {
        match self {
            NoiseSpec::Uniform => NoiseDistribution::uniform(problem.m_y()),
            NoiseSpec::UnigramPow(p) => {
                let mut marginal = vec![0.0; problem.m_y()];
                for x in 0..problem.m_x() {
                    for (m, c) in marginal.iter_mut().zip(problem.conditional(x)) {
                        *m += problem.p_x()[x] * c;
                    }
                }
                let w: Vec<f64> = marginal.iter().map(|m| m.powf(p)).collect();
                NoiseDistribution::from_weights(&w)
            }
        }
    }

    /// Noise over a vocabulary from token counts.
    pub fn for_counts(self, counts: &[u64]) -> Result<NoiseDistribution> {
        match self {
            NoiseSpec::Uniform => NoiseDistribution::uniform(counts.len()),
            NoiseSpec::UnigramPow(p) => unigram_power(counts, p),
        }
    }
}
