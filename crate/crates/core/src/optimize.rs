//! Maximizers for the sampled and population objectives.
//!
//! Full-batch fits use gradient ascent with a backtracking step: a trial
//! step that lowers the objective is halved, an accepted one grows by 10%.
//! A minibatch SGD loop is provided for the language-model experiment.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ConditionalProblem, ParamVector, ScoringFunction};
use crate::numeric::norm2;
use crate::objectives::{
    binary_value_and_grad, draw_regularizer_noise, mle_value_and_grad, population_binary_value_and_grad,
    population_ranking_exact, ranking_value_and_grad, regularizer, BinaryParams, RegularizerConfig,
};
use crate::rng;
use crate::sampling::{sample_negatives, Dataset, NoiseDistribution, Provenance, SamplingConfig};

pub const DEFAULT_GAMMA_RANGE: (f64, f64) = (-30.0, 30.0);

const MIN_STEP: f64 = 1e-18;
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Ranking,
    Binary,
    Mle,
    PopulationRanking { k: usize },
    PopulationBinary { k: usize },
}

impl ObjectiveKind {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Binary | Self::PopulationBinary { .. })
    }

    pub fn is_population(self) -> bool {
        matches!(self, Self::PopulationRanking { .. } | Self::PopulationBinary { .. })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ranking => "ranking",
            Self::Binary => "binary",
            Self::Mle => "mle",
            Self::PopulationRanking { .. } => "population-ranking",
            Self::PopulationBinary { .. } => "population-binary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    Zeros,
    SeededGaussian { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub objective: ObjectiveKind,
    pub regularizer: Option<RegularizerConfig>,
    pub max_iters: usize,
    pub initial_step: f64,
    pub tol: f64,
    pub gamma_range: (f64, f64),
    pub init: InitStrategy,
    pub seed: u64,
}

impl FitConfig {
    pub fn new(objective: ObjectiveKind) -> Self {
        Self {
            objective,
            regularizer: None,
            max_iters: 5000,
            initial_step: 1.0,
            tol: 1e-6,
            gamma_range: DEFAULT_GAMMA_RANGE,
            init: InitStrategy::Zeros,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::field("tol", "tolerance must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::field("max_iters", "at least one iteration is required"));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::field("initial_step", "step size must be positive"));
        }
        let (lo, hi) = self.gamma_range;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::field("gamma_range", format!("need lo < hi, got {lo}:{hi}")));
        }
        if let InitStrategy::SeededGaussian { sigma } = self.init {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::field("init", "gaussian init needs sigma > 0"));
            }
        }
        match self.objective {
            ObjectiveKind::PopulationRanking { k } | ObjectiveKind::PopulationBinary { k } if k == 0 => {
                Err(Error::field("K", "K must be at least 1"))
            }
            _ if self.regularizer.is_some() && self.objective.is_population() => Err(Error::Config(
                "the regularizer applies to sampled objectives only".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// What a fit runs against: a sampled dataset or a finite ground truth.
#[derive(Debug, Clone, Copy)]
pub enum FitData<'a> {
    Sample(&'a Dataset),
    Population(&'a ConditionalProblem),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub objective: String,
    pub theta: ParamVector,
    pub gamma: Option<f64>,
    pub final_objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
    pub config_hash: String,
    pub dataset_hash: Option<String>,
}

impl EstimationReport {
    /// `(θ̂, γ̂)` for binary fits.
    pub fn binary_params(&self) -> Option<BinaryParams> {
        self.gamma.map(|gamma| BinaryParams {
            theta: self.theta.clone(),
            gamma,
        })
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,objective,grad_norm,step\n");
        for r in &self.trace {
            out.push_str(&format!("{},{},{},{}\n", r.iter, r.objective, r.grad_norm, r.step));
        }
        out
    }
}

type Evaluation = Result<(f64, Vec<f64>)>;

fn initial_point(cfg: &FitConfig, len: usize) -> Result<Vec<f64>> {
    Ok(match cfg.init {
        InitStrategy::Zeros => vec![0.0; len],
        InitStrategy::SeededGaussian { sigma } => {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            let mut r = rng::stream(cfg.seed, INIT_STREAM);
            (0..len).map(|_| normal.sample(&mut r)).collect()
        }
    })
}

/// Gradient ascent on `f` from `x`, keeping the last coordinate inside
/// `gamma` when given.
fn ascend<F>(f: F, mut x: Vec<f64>, gamma: Option<(f64, f64)>, cfg: &FitConfig) -> Result<(Vec<f64>, Vec<TraceRow>, bool)>
where
    F: Fn(&[f64]) -> Evaluation,
{
    let project = |v: &mut Vec<f64>| {
        if let (Some((lo, hi)), Some(last)) = (gamma, v.last_mut()) {
            *last = last.clamp(lo, hi);
        }
    };
    project(&mut x);
    let (mut value, mut grad) = f(&x)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Init { value });
    }
    let mut step = cfg.initial_step;
    let mut trace = Vec::new();
    let mut gnorm = norm2(&grad);
    trace.push(TraceRow {
        iter: 0,
        objective: value,
        grad_norm: gnorm,
        step: 0.0,
    });
    for iter in 1..=cfg.max_iters {
        if gnorm <= cfg.tol {
            return Ok((x, trace, true));
        }
        loop {
            let mut trial: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
            project(&mut trial);
            let stalled = |step| Error::Stall {
                iterations: iter,
                step,
                objective: value,
                grad_norm: gnorm,
            };
            if trial == x {
                // the step no longer moves any coordinate
                return Err(stalled(step));
            }
            let accepted = match f(&trial) {
                Ok((v, g)) if v.is_finite() && v >= value && g.iter().all(|c| c.is_finite()) => {
                    Some((v, g))
                }
                Ok(_) | Err(Error::Numeric(_)) => None,
                Err(e) => return Err(e),
            };
            if let Some((v, g)) = accepted {
                x = trial;
                value = v;
                grad = g;
                gnorm = norm2(&grad);
                trace.push(TraceRow {
                    iter,
                    objective: value,
                    grad_norm: gnorm,
                    step,
                });
                step *= 1.1;
                break;
            }
            step *= 0.5;
            if step < MIN_STEP {
                return Err(stalled(step));
            }
        }
    }
    Ok((x, trace, gnorm <= cfg.tol))
}

fn check_noise_len(sf: &ScoringFunction, noise: &NoiseDistribution) -> Result<()> {
    if noise.len() != sf.num_labels() {
        return Err(Error::Config(format!(
            "noise distribution covers {} labels, model has {}",
            noise.len(),
            sf.num_labels()
        )));
    }
    Ok(())
}

/// Value and gradient of the configured objective at the flat point `p`
/// (`[θ]`, or `[θ, γ]` for binary objectives).
fn evaluate(
    sf: &ScoringFunction,
    data: FitData<'_>,
    noise: &NoiseDistribution,
    cfg: &FitConfig,
    reg_draws: Option<&[usize]>,
    p: &[f64],
) -> Evaluation {
    let d = sf.num_params();
    let (mut value, mut grad) = match (cfg.objective, data) {
        (ObjectiveKind::Ranking, FitData::Sample(ds)) => ranking_value_and_grad(sf, p, ds, noise)?,
        (ObjectiveKind::Mle, FitData::Sample(ds)) => mle_value_and_grad(sf, p, ds)?,
        (ObjectiveKind::Binary, FitData::Sample(ds)) => binary_value_and_grad(sf, &BinaryParams::from_flat(p)?, ds, noise)?,
        (ObjectiveKind::PopulationRanking { k }, FitData::Population(pr)) => {
            let (v, g) = population_ranking_exact(sf, p, pr, noise, k, true)?;
            (v, g.expect("gradient requested"))
        }
        (ObjectiveKind::PopulationBinary { k }, FitData::Population(pr)) => {
            population_binary_value_and_grad(sf, &BinaryParams::from_flat(p)?, pr, noise, k)?
        }
        (kind, _) => {
            return Err(Error::Config(format!(
                "objective {} does not match the supplied data",
                kind.name()
            )))
        }
    };
    if let (Some(rc), Some(draws), FitData::Sample(ds)) = (&cfg.regularizer, reg_draws, data) {
        let (pv, pg) = regularizer(sf, &p[..d], ds, noise, rc, draws)?;
        value -= pv;
        for (g, r) in grad.iter_mut().zip(&pg) {
            *g -= r;
        }
    }
    Ok((value, grad))
}

/// Maximizes the configured objective.
///
/// Regularizer noise is drawn once (epoch 0) and held fixed, so every
/// line-search comparison sees the same penalty.
pub fn fit(sf: &ScoringFunction, data: FitData<'_>, noise: &NoiseDistribution, cfg: &FitConfig) -> Result<EstimationReport> {
    cfg.validate()?;
    check_noise_len(sf, noise)?;
    let binary = cfg.objective.is_binary();
    let len = sf.num_params() + usize::from(binary);
    let mut x0 = initial_point(cfg, len)?;
    if binary {
        *x0.last_mut().expect("non-empty") = 0.0;
    }
    let draws = match (&cfg.regularizer, data) {
        (Some(rc), FitData::Sample(ds)) => {
            let ids: Vec<usize> = (0..ds.len()).collect();
            Some(draw_regularizer_noise(rc, noise, &ids, 0))
        }
        _ => None,
    };
    let gamma = binary.then_some(cfg.gamma_range);
    let (x, trace, converged) = ascend(|p| evaluate(sf, data, noise, cfg, draws.as_deref(), p), x0, gamma, cfg)?;
    let last = *trace.last().expect("trace has the initial point");
    let (theta, gamma) = if binary {
        let bp = BinaryParams::from_flat(&x)?;
        (bp.theta, Some(bp.gamma))
    } else {
        (ParamVector::new(x)?, None)
    };
    Ok(EstimationReport {
        objective: cfg.objective.name().to_string(),
        theta,
        gamma,
        final_objective: last.objective,
        grad_norm: last.grad_norm,
        iterations: last.iter,
        converged,
        trace,
        config_hash: cfg.hash(),
        dataset_hash: match data {
            FitData::Sample(ds) => Some(ds.hash()),
            FitData::Population(_) => None,
        },
    })
}

/// Runs `restarts` fits and keeps the one with the highest final objective.
/// Restart 0 uses `cfg` as given; later restarts use seeded Gaussian
/// initializations with derived seeds.
pub fn fit_with_restarts(
    sf: &ScoringFunction,
    data: FitData<'_>,
    noise: &NoiseDistribution,
    cfg: &FitConfig,
    restarts: usize,
) -> Result<EstimationReport> {
    if restarts == 0 {
        return Err(Error::field("restarts", "at least one restart is required"));
    }
    let sigma = match cfg.init {
        InitStrategy::SeededGaussian { sigma } => sigma,
        InitStrategy::Zeros => 1.0,
    };
    let mut best: Option<EstimationReport> = None;
    let mut last_err = None;
    for r in 0..restarts {
        let mut c = cfg.clone();
        if r > 0 {
            c.init = InitStrategy::SeededGaussian { sigma };
            c.seed = rng::derive(cfg.seed, &[r as u64]);
        }
        match fit(sf, data, noise, &c) {
            Ok(rep) => {
                if best.as_ref().is_none_or(|b| rep.final_objective > b.final_objective) {
                    best = Some(rep);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one restart ran"))
}

/// Minibatch SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate is divided by `1 + decay · epoch`.
    pub decay: f64,
    /// Draw fresh negatives at the start of every epoch.
    pub resample_negatives: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub objective: f64,
    pub learning_rate: f64,
}

/// Minibatch stochastic gradient ascent with a seed-fixed shuffle per epoch.
///
/// `on_epoch` runs after each epoch with the current flat parameters and may
/// record held-out metrics.
pub fn fit_minibatch<C>(
    sf: &ScoringFunction,
    data: &Dataset,
    noise: &NoiseDistribution,
    cfg: &FitConfig,
    sgd: &SgdConfig,
    mut on_epoch: C,
) -> Result<(EstimationReport, Vec<EpochRow>)>
where
    C: FnMut(usize, &[f64]) -> Result<()>,
{
    cfg.validate()?;
    check_noise_len(sf, noise)?;
    if cfg.objective.is_population() {
        return Err(Error::Config("minibatch fitting needs a sampled objective".into()));
    }
    if sgd.batch_size == 0 || sgd.epochs == 0 || !(sgd.learning_rate > 0.0) {
        return Err(Error::Config("SGD needs epochs, batch size and learning rate > 0".into()));
    }
    if data.is_empty() {
        return Err(Error::Domain("objective over an empty dataset".into()));
    }
    let binary = cfg.objective.is_binary();
    let d = sf.num_params();
    let mut x = initial_point(cfg, d + usize::from(binary))?;
    if binary {
        *x.last_mut().expect("non-empty") = 0.0;
    }
    let mut rows = Vec::with_capacity(sgd.epochs);
    let mut current = data.clone();
    let mut last = (f64::NAN, f64::NAN);
    for epoch in 0..sgd.epochs {
        if sgd.resample_negatives && epoch > 0 {
            let p = data.provenance();
            let stream = rng::derive(p.stream, &[epoch as u64]);
            let sc = SamplingConfig::new(data.k(), p.seed, stream)?;
            let provenance = Provenance {
                stream,
                ..p.clone()
            };
            current = data.with_negatives(sample_negatives(&sc, noise, data.len()), provenance)?;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng::substream(cfg.seed, INIT_STREAM + 1, &[epoch as u64]));
        let lr = sgd.learning_rate / (1.0 + sgd.decay * epoch as f64);
        let mut values = Vec::new();
        for batch in order.chunks(sgd.batch_size) {
            let sub = current.subset(batch);
            let draws = cfg
                .regularizer
                .as_ref()
                .map(|rc| draw_regularizer_noise(rc, noise, batch, epoch as u64));
            let (v, g) = evaluate(sf, FitData::Sample(&sub), noise, cfg, draws.as_deref(), &x)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("objective diverged in epoch {epoch}")));
            }
            values.push(v * batch.len() as f64);
            for (p, gi) in x.iter_mut().zip(&g) {
                *p += lr * gi;
            }
            if binary {
                let (lo, hi) = cfg.gamma_range;
                let last = x.last_mut().expect("non-empty");
                *last = last.clamp(lo, hi);
            }
            last = (v, norm2(&g));
        }
        let objective = crate::numeric::pairwise_sum(&values) / data.len() as f64;
        rows.push(EpochRow {
            epoch,
            objective,
            learning_rate: lr,
        });
        on_epoch(epoch, &x)?;
    }
    let (theta, gamma) = if binary {
        let bp = BinaryParams::from_flat(&x)?;
        (bp.theta, Some(bp.gamma))
    } else {
        (ParamVector::new(x)?, None)
    };
    let trace = rows
        .iter()
        .map(|r| TraceRow {
            iter: r.epoch + 1,
            objective: r.objective,
            grad_norm: f64::NAN,
            step: r.learning_rate,
        })
        .collect();
    Ok((
        EstimationReport {
            objective: cfg.objective.name().to_string(),
            theta,
            gamma,
            final_objective: rows.last().map_or(last.0, |r| r.objective),
            grad_norm: last.1,
            iterations: sgd.epochs,
            converged: false,
            trace,
            config_hash: cfg.hash(),
            dataset_hash: Some(data.hash()),
        },
        rows,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::counterexample_problem;

    #[test]
    fn config_validation() {
        let mut c = FitConfig::new(ObjectiveKind::Ranking);
        assert!(c.validate().is_ok());
        c.tol = 0.0;
        assert!(c.validate().is_err());
        let mut c = FitConfig::new(ObjectiveKind::Binary);
        c.gamma_range = (1.0, 1.0);
        assert!(c.validate().is_err());
        let mut c = FitConfig::new(ObjectiveKind::PopulationRanking { k: 1 });
        c.regularizer = Some(RegularizerConfig::new(0.1, 2, 0, 0).unwrap());
        assert!(c.validate().is_err());
    }

    #[test]
    fn mismatched_data_is_config_error() {
        let p = counterexample_problem();
        let sf = &p.truth().unwrap().scoring;
        let noise = NoiseDistribution::uniform(2).unwrap();
        let cfg = FitConfig::new(ObjectiveKind::Ranking);
        assert!(matches!(fit(sf, FitData::Population(&p), &noise, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn population_binary_counterexample_ratio() {
        let p = counterexample_problem();
        let sf = &p.truth().unwrap().scoring;
        let noise = NoiseDistribution::uniform(2).unwrap();
        let cfg = FitConfig::new(ObjectiveKind::PopulationBinary { k: 1 });
        let rep = fit(sf, FitData::Population(&p), &noise, &cfg).unwrap();
        assert!(rep.converged);
        let eta = rep.theta.as_slice();
        let ratio = (eta[0] - eta[1]).exp();
        assert!((ratio - 3.0 / 7.0).abs() < 1e-4, "{ratio}");
    }

    #[test]
    fn trace_is_monotone_and_deterministic() {
        let p = counterexample_problem();
        let sf = &p.truth().unwrap().scoring;
        let noise = NoiseDistribution::new(vec![0.3, 0.7]).unwrap();
        let cfg = FitConfig::new(ObjectiveKind::PopulationRanking { k: 2 });
        let a = fit(sf, FitData::Population(&p), &noise, &cfg).unwrap();
        for w in a.trace.windows(2) {
            assert!(w[1].objective >= w[0].objective);
        }
        let b = fit(sf, FitData::Population(&p), &noise, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn gamma_stays_in_range() {
        let p = counterexample_problem();
        let sf = &p.truth().unwrap().scoring;
        let noise = NoiseDistribution::uniform(2).unwrap();
        let mut cfg = FitConfig::new(ObjectiveKind::PopulationBinary { k: 1 });
        cfg.gamma_range = (0.5, 0.6);
        cfg.max_iters = 200;
        let rep = fit(sf, FitData::Population(&p), &noise, &cfg).unwrap();
        let g = rep.gamma.unwrap();
        assert!((0.5..=0.6).contains(&g));
    }
}
