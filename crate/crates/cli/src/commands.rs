//! One function per subcommand. Each returns the lines printed on success.

use std::collections::HashMap;
use std::path::Path;

use nce_core::asymptotics::{
    binary_rate_point, fisher_report, loglog_slope, ranking_rate_point, replicate, replication_seeds, CovMode,
    Estimator, RateRow, ReplicationSpec,
};
use nce_core::corpus::{ngram_pairs, split, tokenize, Vocabulary};
use nce_core::evaluation::{evaluate, perplexity};
use nce_core::model::{ConditionalProblem, LogBilinear, ProblemFile, ScoringFunction};
use nce_core::objectives::{draw_regularizer_noise, regularizer, RegularizerConfig};
use nce_core::optimize::{fit, fit_minibatch, FitConfig, FitData, InitStrategy, ObjectiveKind, SgdConfig};
use nce_core::sampling::{
    counterexample_problem, generate_dataset, make_self_normalized_problem, make_synthetic_problem,
    make_tabular_problem, sample_negatives, Dataset, NoiseDistribution, Provenance, SamplingConfig,
};
use nce_core::{Error, Result};
use serde::Serialize;

use crate::args::*;
use crate::manifest::{Run, RunManifest};
use crate::noise::NoiseSpec;

/// Toy corpus used by `lm` when no `--corpus` is given.
pub const BUNDLED_CORPUS: &str = include_str!("../data/toy_corpus.txt");

pub const PROBLEM_FILE: &str = "problem.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const COUNTEREXAMPLE_FILE: &str = "counterexample.csv";
pub const RATES_FILE: &str = "rates.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EPOCHS_FILE: &str = "epochs.csv";

/// Tolerance on the counterexample ratios.
const RATIO_TOL: f64 = 1e-4;
/// Regularizer sub-stream, kept apart from the negatives (stream 0).
const REG_STREAM: u64 = 1;

pub struct Outcome {
    pub manifest: RunManifest,
    pub lines: Vec<String>,
}

pub fn run(command: &Command) -> Result<Outcome> {
    let args = serde_json::to_value(command)?;
    let mut run = Run::new(command.name(), args, command.out())?;
    let lines = match command {
        Command::Synth(a) => synth(a, &mut run)?,
        Command::Sample(a) => sample(a, &mut run)?,
        Command::Fit(a) => fit_cmd(a, &mut run)?,
        Command::Counterexample(a) => counterexample(a, &mut run)?,
        Command::Asymptotics(a) => asymptotics(a, &mut run)?,
        Command::Replicate(a) => replicate_cmd(a, &mut run)?,
        Command::Lm(a) => lm(a, &mut run)?,
    };
    Ok(Outcome {
        manifest: run.finish()?,
        lines,
    })
}

pub fn parse_gamma_range(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::field("gamma-range", format!("expected lo:hi, got `{s}`"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::field("gamma-range", format!("need finite lo < hi, got {lo}:{hi}")));
    }
    Ok((lo, hi))
}

pub fn parse_k_list(s: &str) -> Result<Vec<usize>> {
    let ks = s
        .split(',')
        .map(|t| match t.trim().parse::<usize>() {
            Ok(k) if k >= 1 => Ok(k),
            _ => Err(Error::field("K", format!("expected positive integers, got `{t}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if ks.is_empty() {
        return Err(Error::field("K", "empty list"));
    }
    Ok(ks)
}

pub fn parse_mode(s: &str, seed: u64) -> Result<CovMode> {
    if s == "exact" {
        return Ok(CovMode::Exact);
    }
    match s.strip_prefix("mc:").map(str::parse::<usize>) {
        Some(Ok(samples)) if samples >= 2 => Ok(CovMode::MonteCarlo { samples, seed }),
        _ => Err(Error::field("mode", format!("expected exact or mc:<M> with M >= 2, got `{s}`"))),
    }
}

fn fit_config(objective: ObjectiveKind, flags: &FitFlags, seed: u64) -> Result<FitConfig> {
    let mut cfg = FitConfig::new(objective);
    cfg.gamma_range = parse_gamma_range(&flags.gamma_range)?;
    cfg.max_iters = flags.max_iters;
    cfg.tol = flags.tol;
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn objective_of(e: EstimatorArg) -> ObjectiveKind {
    match e {
        EstimatorArg::Mle => ObjectiveKind::Mle,
        EstimatorArg::Ranking => ObjectiveKind::Ranking,
        EstimatorArg::Binary => ObjectiveKind::Binary,
    }
}

fn estimator_of(e: EstimatorArg) -> Estimator {
    match e {
        EstimatorArg::Mle => Estimator::Mle,
        EstimatorArg::Ranking => Estimator::Ranking,
        EstimatorArg::Binary => Estimator::Binary,
    }
}

fn load_problem(run: &mut Run, path: &Path) -> Result<(ConditionalProblem, ProblemFile)> {
    let bytes = run.read_input("problem", path)?;
    let file: ProblemFile = serde_json::from_slice(&bytes)?;
    Ok((ConditionalProblem::from_file(file.clone())?, file))
}

fn synth(a: &SynthArgs, run: &mut Run) -> Result<Vec<String>> {
    let problem = match a.kind {
        ProblemKind::Synthetic => make_synthetic_problem(a.d, a.m_x, a.m_y, a.seed)?,
        ProblemKind::Tabular => make_tabular_problem(a.m_x, a.m_y, a.d, a.scale, a.seed)?,
        ProblemKind::SelfNormalized => make_self_normalized_problem(a.m_x, a.m_y, a.d, a.scale, a.seed)?,
        ProblemKind::Counterexample => counterexample_problem(),
    };
    let json = problem.to_json()?;
    // the written form must load back into the same problem
    if ConditionalProblem::from_json(&json)? != problem {
        return Err(Error::Numeric("problem does not survive a JSON round trip".into()));
    }
    let path = run.write_raw(PROBLEM_FILE, format!("{json}\n").as_bytes())?;
    Ok(vec![format!(
        "wrote {} (m_x = {}, m_y = {})",
        path.display(),
        problem.m_x(),
        problem.m_y()
    )])
}

fn sample(a: &SampleArgs, run: &mut Run) -> Result<Vec<String>> {
    let (problem, _) = load_problem(run, &a.problem)?;
    let noise = a.noise.parse::<NoiseSpec>()?.for_problem(&problem)?;
    let data = generate_dataset(&problem, a.n, &SamplingConfig::new(a.k, a.seed, 0)?, &noise)?;
    let mut bytes = Vec::new();
    data.write_jsonl(&mut bytes)?;
    let path = run.write_raw(DATASET_FILE, &bytes)?;
    Ok(vec![format!("wrote {} ({} examples, K = {})", path.display(), data.len(), data.k())])
}

#[derive(Serialize)]
struct FitOutput<'a> {
    estimator: EstimatorArg,
    #[serde(rename = "K")]
    k: usize,
    n: usize,
    noise: &'a str,
    context_bias: bool,
    kl: f64,
    d_metric: f64,
    worst_tv: f64,
    converged: bool,
    iterations: usize,
    final_objective: f64,
    grad_norm: f64,
    theta: &'a [f64],
    gamma: Option<f64>,
    config_hash: &'a str,
    dataset_hash: Option<&'a str>,
}

fn fit_cmd(a: &FitArgs, run: &mut Run) -> Result<Vec<String>> {
    let (problem, file) = load_problem(run, &a.problem)?;
    let sf = match problem.truth() {
        Some(t) => t.scoring.clone(),
        None => ConditionalProblem::scoring_from(&file)?
            .ok_or_else(|| Error::Config("problem carries no scoring function to fit".into()))?,
    };
    let sf = if a.context_bias { sf.with_context_bias() } else { sf };
    let noise = a.noise.parse::<NoiseSpec>()?.for_problem(&problem)?;
    let data = match &a.dataset {
        Some(path) => {
            let bytes = run.read_input("dataset", path)?;
            let data = Dataset::read_jsonl(bytes.as_slice())?;
            data.validate(problem.m_x(), problem.m_y())?;
            if data.provenance().noise_hash != noise.hash() {
                return Err(Error::Config(
                    "dataset negatives were drawn from a different noise distribution than --noise".into(),
                ));
            }
            data
        }
        None => generate_dataset(&problem, a.n, &SamplingConfig::new(a.k, a.seed, 0)?, &noise)?,
    };
    let mut cfg = fit_config(objective_of(a.estimator), &a.fit, a.seed)?;
    if a.reg_alpha != 0.0 {
        cfg.regularizer = Some(RegularizerConfig::new(a.reg_alpha, a.reg_m, a.seed, REG_STREAM)?);
    }
    let report = fit(&sf, FitData::Sample(&data), &noise, &cfg)?;
    let eval = evaluate(&problem, &sf, report.theta.as_slice())?;
    let out = FitOutput {
        estimator: a.estimator,
        k: data.k(),
        n: data.len(),
        noise: &a.noise,
        context_bias: a.context_bias,
        kl: eval.kl,
        d_metric: eval.d_metric,
        worst_tv: eval.worst_tv,
        converged: report.converged,
        iterations: report.iterations,
        final_objective: report.final_objective,
        grad_norm: report.grad_norm,
        theta: report.theta.as_slice(),
        gamma: report.gamma,
        config_hash: &report.config_hash,
        dataset_hash: report.dataset_hash.as_deref(),
    };
    run.write_json(REPORT_FILE, &out)?;
    let rows: Vec<String> = report
        .trace
        .iter()
        .map(|r| format!("{},{},{},{}", r.iter, r.objective, r.grad_norm, r.step))
        .collect();
    run.write_csv(TRACE_FILE, "iter,objective,grad_norm,step", &rows)?;
    let mut lines = vec![format!(
        "{} fit: KL = {:.6e}, d = {:.6e}, {} iterations{}",
        a.estimator.name(),
        eval.kl,
        eval.d_metric,
        report.iterations,
        if report.converged { "" } else { " (not converged)" }
    )];
    if !report.converged {
        lines.push(format!("warning: gradient norm {:.3e} above tolerance {:.1e}", report.grad_norm, cfg.tol));
    }
    Ok(lines)
}

/// Row of the counterexample table; `theta_i = exp(η_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterexampleRow {
    pub estimator: &'static str,
    pub k: usize,
    pub theta: [f64; 2],
    pub gamma: Option<f64>,
    pub ratio: f64,
    pub cond_ratio: f64,
    pub d_metric: f64,
}

pub const COUNTEREXAMPLE_HEADER: &str = "estimator,K,theta1,theta2,gamma,ratio,cond_ratio,true_cond_ratio,d_metric";

fn counterexample(a: &CounterexampleArgs, run: &mut Run) -> Result<Vec<String>> {
    let problem = counterexample_problem();
    let truth = problem.require_truth("counterexample")?;
    let sf = &truth.scoring;
    let noise = NoiseDistribution::uniform(2)?;
    let true_ratio = problem.conditional(0)[0] / problem.conditional(0)[1];
    let mut rows = Vec::new();
    for k in parse_k_list(&a.k)? {
        for (name, objective, target) in [
            ("binary", ObjectiveKind::PopulationBinary { k }, 3.0 / 7.0),
            ("ranking", ObjectiveKind::PopulationRanking { k }, 1.0 / 3.0),
        ] {
            let cfg = fit_config(objective, &a.fit, 0)?;
            let rep = fit(sf, FitData::Population(&problem), &noise, &cfg)?;
            let eta = rep.theta.as_slice();
            let q = sf.cond_prob(eta, 0)?;
            rows.push((
                target,
                CounterexampleRow {
                    estimator: name,
                    k,
                    theta: [eta[0].exp(), eta[1].exp()],
                    gamma: rep.gamma,
                    ratio: (eta[0] - eta[1]).exp(),
                    cond_ratio: q[0] / q[1],
                    d_metric: evaluate(&problem, sf, eta)?.d_metric,
                },
            ));
        }
    }
    let csv: Vec<String> = rows
        .iter()
        .map(|(_, r)| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                r.estimator,
                r.k,
                r.theta[0],
                r.theta[1],
                r.gamma.map_or(String::new(), |g| g.to_string()),
                r.ratio,
                r.cond_ratio,
                true_ratio,
                r.d_metric
            )
        })
        .collect();
    let path = run.write_csv(COUNTEREXAMPLE_FILE, COUNTEREXAMPLE_HEADER, &csv)?;
    let mut lines = vec![format!("wrote {}", path.display())];
    for (target, r) in &rows {
        lines.push(format!("{:>7} K = {:>3}: ratio {:.6} (expected {:.6})", r.estimator, r.k, r.ratio, target));
        if (r.ratio - target).abs() > RATIO_TOL {
            return Err(Error::Numeric(format!(
                "{} ratio at K = {} is {}, expected {} within {RATIO_TOL:e}",
                r.estimator, r.k, r.ratio, target
            )));
        }
    }
    for pair in rows.chunks(2) {
        let (b, rk) = (&pair[0].1, &pair[1].1);
        if !(b.d_metric > rk.d_metric + 1e-3) {
            return Err(Error::Numeric(format!(
                "at K = {} the binary maximizer's d ({}) does not exceed the ranking maximizer's ({}) by 1e-3",
                b.k, b.d_metric, rk.d_metric
            )));
        }
    }
    Ok(lines)
}

pub const RATES_HEADER: &str = "estimator,mse_infinity,K,norm_diff,mse_gap,mode,stderr";

#[derive(Serialize)]
struct RatesSummary {
    estimator: Estimator,
    fisher_mse_infinity: f64,
    /// Least-squares log-log slope of `norm_diff` against K, when every
    /// point is positive.
    slope: Option<f64>,
}

fn asymptotics(a: &AsymptoticsArgs, run: &mut Run) -> Result<Vec<String>> {
    let (problem, _) = load_problem(run, &a.problem)?;
    let truth = problem.require_truth("asymptotic covariances")?;
    let (sf, theta) = (&truth.scoring, truth.theta.as_slice());
    let noise = a.noise.parse::<NoiseSpec>()?.for_problem(&problem)?;
    let mode = parse_mode(&a.mode, a.seed)?;
    let ks = parse_k_list(&a.k)?;
    let estimator = estimator_of(a.estimator);
    let fisher = fisher_report(&problem, sf, theta)?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in &ks {
        let row = match estimator {
            Estimator::Mle => RateRow {
                k,
                norm_diff: 0.0,
                mse_gap: 0.0,
                mode: CovMode::Exact.label(),
                stderr: None,
            },
            Estimator::Ranking => ranking_rate_point(&problem, sf, theta, &noise, k, mode, &fisher)?,
            Estimator::Binary => {
                let gamma = truth.gamma.ok_or_else(|| {
                    Error::Precondition("binary asymptotics need a self-normalized problem".into())
                })?;
                binary_rate_point(&problem, sf, theta, gamma, &noise, k, &fisher)?
            }
        };
        rows.push(row);
    }
    let csv: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{}", estimator.name(), fisher.mse_infinity + r.mse_gap, r.to_csv()))
        .collect();
    let path = run.write_csv(RATES_FILE, RATES_HEADER, &csv)?;
    let xs: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.norm_diff).collect();
    let slope = loglog_slope(&xs, &ys).ok();
    run.write_json(
        SUMMARY_FILE,
        &RatesSummary {
            estimator,
            fisher_mse_infinity: fisher.mse_infinity,
            slope,
        },
    )?;
    let mut lines = vec![format!("wrote {}", path.display())];
    if let Some(s) = slope {
        lines.push(format!("log-log slope of the covariance gap: {s:.4}"));
    }
    Ok(lines)
}

fn replicate_cmd(a: &ReplicateArgs, run: &mut Run) -> Result<Vec<String>> {
    let (problem, _) = load_problem(run, &a.problem)?;
    let noise = a.noise.parse::<NoiseSpec>()?.for_problem(&problem)?;
    let spec = ReplicationSpec {
        estimator: estimator_of(a.estimator),
        k: a.k,
        noise,
        fit: fit_config(objective_of(a.estimator), &a.fit, a.seed)?,
    };
    let summary = replicate(&problem, &spec, a.n, &replication_seeds(a.seed, a.replications))?;
    let path = run.write_json(SUMMARY_FILE, &summary)?;
    Ok(vec![
        format!("wrote {}", path.display()),
        format!(
            "relative Frobenius error {:.4}, MSE {:.4} vs {:.4}",
            summary.rel_frobenius_error, summary.empirical_mse, summary.theoretical_mse
        ),
    ])
}

#[derive(Serialize)]
struct LmReport {
    vocab_size: usize,
    order: usize,
    dim: usize,
    estimator: EstimatorArg,
    #[serde(rename = "K")]
    k: usize,
    noise: String,
    context_bias: bool,
    reg_alpha: f64,
    reg_m: usize,
    train_tokens: usize,
    valid_tokens: usize,
    test_tokens: usize,
    train_perplexity: f64,
    valid_perplexity: f64,
    test_perplexity: Option<f64>,
    /// Variance of `log Z(x; θ̂)` over validation contexts.
    var_log_z: f64,
    mean_log_z: f64,
    /// Sampled estimate of `E_X[(log Z)²]` on validation contexts.
    sampled_log_z_square: f64,
    /// `α` times the sampled estimate.
    regularizer_target: f64,
    seconds_per_epoch: f64,
}

fn log_z_moments(sf: &ScoringFunction, theta: &[f64], pairs: &[(usize, usize)]) -> Result<(f64, f64)> {
    let mut cache: HashMap<usize, f64> = HashMap::new();
    let mut values = Vec::with_capacity(pairs.len());
    for &(x, _) in pairs {
        let v = match cache.get(&x) {
            Some(v) => *v,
            None => {
                let v = sf.log_partition(theta, x)?;
                cache.insert(x, v);
                v
            }
        };
        values.push(v);
    }
    let n = values.len() as f64;
    let mean = nce_core::numeric::pairwise_sum(&values) / n;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    Ok((mean, nce_core::numeric::pairwise_sum(&sq) / n))
}

fn pairs_dataset(pairs: &[(usize, usize)], k: usize, noise: &NoiseDistribution, seed: u64, stream: u64) -> Result<Dataset> {
    let cfg = SamplingConfig::new(k, seed, stream)?;
    Dataset::new(
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
        sample_negatives(&cfg, noise, pairs.len()),
        Provenance {
            seed,
            stream,
            k,
            noise_hash: noise.hash(),
        },
    )
}

fn lm(a: &LmArgs, run: &mut Run) -> Result<Vec<String>> {
    if a.order < 2 {
        return Err(Error::field("order", "n-gram order must be at least 2"));
    }
    let text = match &a.corpus {
        Some(path) => String::from_utf8(run.read_input("corpus", path)?)
            .map_err(|_| Error::field("corpus", "corpus is not valid UTF-8"))?,
        None => {
            run.record_input("corpus", BUNDLED_CORPUS.as_bytes());
            BUNDLED_CORPUS.to_string()
        }
    };
    let sentences = tokenize(&text);
    let (train, valid, test) = split(&sentences, 0.1, 0.1)?;
    let vocab = Vocabulary::build(&train, a.min_count)?;
    let v = vocab.len();
    let enc_train = vocab.encode(&train);
    let enc_valid = vocab.encode(&valid);
    let enc_test = vocab.encode(&test);
    let word_tokens = |enc: &[Vec<usize>]| enc.iter().flatten().filter(|&&w| w != vocab.eos()).count();
    let known_valid = enc_valid
        .iter()
        .flatten()
        .filter(|&&w| w != vocab.eos() && w != vocab.unk())
        .count();
    if word_tokens(&enc_valid) == 0 || known_valid == 0 {
        return Err(Error::Domain("validation split has no in-vocabulary words".into()));
    }
    let train_pairs = ngram_pairs(&enc_train, a.order, v, vocab.eos());
    let valid_pairs = ngram_pairs(&enc_valid, a.order, v, vocab.eos());
    let test_pairs = ngram_pairs(&enc_test, a.order, v, vocab.eos());
    let noise = a.noise.parse::<NoiseSpec>()?.for_counts(&vocab.counts(&enc_train))?;
    let sf = ScoringFunction::LogBilinear(LogBilinear::new(v, a.dim, a.order, a.context_bias)?);
    let k = if a.estimator == EstimatorArg::Mle { 1 } else { a.k };
    let data = pairs_dataset(&train_pairs, k, &noise, a.seed, 0)?;
    let reg_m = a.reg_m.unwrap_or((v / 10).max(1));
    let mut cfg = FitConfig::new(objective_of(a.estimator));
    cfg.init = InitStrategy::SeededGaussian { sigma: 0.1 };
    cfg.seed = a.seed;
    if a.reg_alpha != 0.0 {
        cfg.regularizer = Some(RegularizerConfig::new(a.reg_alpha, reg_m, a.seed, REG_STREAM)?);
    }
    let sgd = SgdConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        decay: a.decay,
        resample_negatives: true,
    };
    let started = std::time::Instant::now();
    let mut ppl = Vec::with_capacity(a.epochs);
    let (report, epochs) = fit_minibatch(&sf, &data, &noise, &cfg, &sgd, |_, theta| {
        ppl.push((perplexity(&sf, theta, &train_pairs)?, perplexity(&sf, theta, &valid_pairs)?));
        Ok(())
    })?;
    let seconds_per_epoch = started.elapsed().as_secs_f64() / a.epochs as f64;
    let theta = report.theta.as_slice();
    let (mean_log_z, var_log_z) = log_z_moments(&sf, theta, &valid_pairs)?;
    let probe_cfg = RegularizerConfig::new(1.0, reg_m, a.seed, REG_STREAM + 1)?;
    let probe = pairs_dataset(&valid_pairs, 1, &noise, a.seed, REG_STREAM + 1)?;
    let ids: Vec<usize> = (0..probe.len()).collect();
    let draws = draw_regularizer_noise(&probe_cfg, &noise, &ids, 0);
    let (sampled, _) = regularizer(&sf, theta, &probe, &noise, &probe_cfg, &draws)?;
    let rows: Vec<String> = epochs
        .iter()
        .zip(&ppl)
        .map(|(e, (tr, va))| format!("{},{},{},{},{}", e.epoch, e.objective, e.learning_rate, tr, va))
        .collect();
    run.write_csv(EPOCHS_FILE, "epoch,objective,learning_rate,train_perplexity,valid_perplexity", &rows)?;
    let (train_ppl, valid_ppl) = *ppl.last().expect("at least one epoch");
    let out = LmReport {
        vocab_size: v,
        order: a.order,
        dim: a.dim,
        estimator: a.estimator,
        k,
        noise: a.noise.clone(),
        context_bias: a.context_bias,
        reg_alpha: a.reg_alpha,
        reg_m,
        train_tokens: train_pairs.len(),
        valid_tokens: valid_pairs.len(),
        test_tokens: test_pairs.len(),
        train_perplexity: train_ppl,
        valid_perplexity: valid_ppl,
        test_perplexity: if test_pairs.is_empty() { None } else { Some(perplexity(&sf, theta, &test_pairs)?) },
        var_log_z,
        mean_log_z,
        sampled_log_z_square: sampled,
        regularizer_target: a.reg_alpha * sampled,
        seconds_per_epoch,
    };
    let path = run.write_json(REPORT_FILE, &out)?;
    Ok(vec![
        format!("wrote {}", path.display()),
        format!(
            "valid perplexity {valid_ppl:.3}, train perplexity {train_ppl:.3}, Var log Z {var_log_z:.4}"
        ),
    ])
}
