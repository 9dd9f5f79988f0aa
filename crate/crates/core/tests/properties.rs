use nce_core::model::{LinearFeatures, LinearSoftmax, LogBilinear, ParamVector, ScoringFunction};
use nce_core::numeric::{log_sigmoid, log_sum_exp};
use nce_core::objectives::{
    binary_objective, binary_value_and_grad, mle_objective, mle_value_and_grad, population_ranking_objective,
    posteriors, ranking_objective, ranking_objective_cross_entropy_form, ranking_value_and_grad, BinaryParams,
    EvalMode,
};
use nce_core::optimize::{fit, FitConfig, FitData, ObjectiveKind};
use nce_core::sampling::{
    generate_dataset, make_tabular_problem, Dataset, NoiseDistribution, Provenance, SamplingConfig,
};
use proptest::prelude::*;

fn provenance(k: usize) -> Provenance {
    Provenance {
        seed: 0,
        stream: 0,
        k,
        noise_hash: String::new(),
    }
}

/// A small random instance: scoring function, parameters, dataset and noise.
#[derive(Debug)]
struct Instance {
    sf: ScoringFunction,
    theta: Vec<f64>,
    data: Dataset,
    noise: NoiseDistribution,
}

fn instance(variant: usize) -> impl Strategy<Value = Instance> {
    (2usize..5, 2usize..6, 1usize..4, 1usize..5, 1usize..30).prop_flat_map(
        move |(m_x, m_y, d, k, n)| {
            let sf = match variant {
                0 => ScoringFunction::LinearFeatures(LinearFeatures::new(m_x, m_y, d, vec![0.0; m_x * m_y * d]).unwrap()),
                1 => ScoringFunction::LinearSoftmax(LinearSoftmax::new(m_y, d, vec![0.0; m_x * d]).unwrap()),
                2 => ScoringFunction::LinearFeatures(LinearFeatures::new(m_x, m_y, d, vec![0.0; m_x * m_y * d]).unwrap())
                    .with_context_bias(),
                _ => ScoringFunction::LogBilinear(LogBilinear::new(m_y + 1, d, 2, true).unwrap()),
            };
            let (m_x, m_y) = (sf.num_inputs(), sf.num_labels());
            let table_len = match &sf {
                ScoringFunction::LinearFeatures(_) => m_x * m_y * d,
                ScoringFunction::ContextBias(_) => m_x * m_y * d,
                ScoringFunction::LinearSoftmax(_) => m_x * d,
                _ => 0,
            };
            (
                Just(sf),
                prop::collection::vec(-1.5f64..1.5, table_len),
                prop::collection::vec(0..m_x, n),
                prop::collection::vec(0..m_y, n),
                prop::collection::vec(0..m_y, n * k),
                prop::collection::vec(0.1f64..1.0, m_y),
                Just(k),
            )
        },
    )
    .prop_flat_map(|(sf, table, xs, ys, negs, weights, k)| {
        let sf = with_table(sf, table);
        let p = sf.num_params();
        (
            Just(sf),
            prop::collection::vec(-1.0f64..1.0, p),
            Just((xs, ys, negs, weights, k)),
        )
    })
    .prop_map(|(sf, theta, (xs, ys, negs, weights, k))| Instance {
        sf,
        theta,
        data: Dataset::new(xs, ys, negs, provenance(k)).unwrap(),
        noise: NoiseDistribution::from_weights(&weights).unwrap(),
    })
}

fn with_table(sf: ScoringFunction, table: Vec<f64>) -> ScoringFunction {
    let (m_x, m_y) = (sf.num_inputs(), sf.num_labels());
    match sf {
        ScoringFunction::LinearFeatures(f) => {
            ScoringFunction::LinearFeatures(LinearFeatures::new(m_x, m_y, f.dim(), table).unwrap())
        }
        ScoringFunction::LinearSoftmax(f) => ScoringFunction::LinearSoftmax(LinearSoftmax::new(m_y, f.dim(), table).unwrap()),
        ScoringFunction::ContextBias(inner) => with_table(*inner, table).with_context_bias(),
        other => other,
    }
}

/// Per-example objectives written directly from their definitions.
fn naive_ranking(i: &Instance) -> f64 {
    let shifted = |x, y| i.sf.shifted_score(&i.theta, &i.noise, x, y).unwrap();
    let total: f64 = (0..i.data.len())
        .map(|n| {
            let x = i.data.x(n);
            let s: Vec<f64> = i.data.candidates(n).iter().map(|&y| shifted(x, y)).collect();
            s[0] - log_sum_exp(&s)
        })
        .sum();
    total / i.data.len() as f64
}

fn naive_binary(i: &Instance, gamma: f64) -> f64 {
    let k = i.data.k() as f64;
    let z = |x, y| i.sf.shifted_score(&i.theta, &i.noise, x, y).unwrap() - gamma - k.ln();
    let total: f64 = (0..i.data.len())
        .map(|n| {
            let x = i.data.x(n);
            log_sigmoid(z(x, i.data.y(n))) + i.data.negatives(n).iter().map(|&y| log_sigmoid(-z(x, y))).sum::<f64>()
        })
        .sum();
    total / i.data.len() as f64
}

fn naive_mle(i: &Instance) -> f64 {
    let total: f64 = (0..i.data.len())
        .map(|n| {
            let x = i.data.x(n);
            i.sf.score(&i.theta, x, i.data.y(n)).unwrap() - i.sf.log_partition(&i.theta, x).unwrap()
        })
        .sum();
    total / i.data.len() as f64
}

fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-5;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|j| {
            p[j] = x[j] + h;
            let up = f(&p);
            p[j] = x[j] - h;
            let down = f(&p);
            p[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor for gradients that vanish exactly.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-3)
}

fn any_instance() -> impl Strategy<Value = Instance> {
    prop_oneof![instance(0), instance(1), instance(2), instance(3)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregated_objectives_match_per_example_sums(i in any_instance(), gamma in -2.0f64..2.0) {
        let rank = ranking_objective(&i.sf, &i.theta, &i.data, &i.noise).unwrap();
        prop_assert!((rank - naive_ranking(&i)).abs() <= 1e-12 * (1.0 + rank.abs()));
        let bp = BinaryParams::new(ParamVector::new(i.theta.clone()).unwrap(), gamma).unwrap();
        let bin = binary_objective(&i.sf, &bp, &i.data, &i.noise).unwrap();
        prop_assert!((bin - naive_binary(&i, gamma)).abs() <= 1e-12 * (1.0 + bin.abs()));
        let mle = mle_objective(&i.sf, &i.theta, &i.data).unwrap();
        prop_assert!((mle - naive_mle(&i)).abs() <= 1e-12 * (1.0 + mle.abs()));
    }

    #[test]
    fn objectives_are_log_probabilities(i in any_instance(), gamma in -2.0f64..2.0) {
        prop_assert!(ranking_objective(&i.sf, &i.theta, &i.data, &i.noise).unwrap() <= 0.0);
        let bp = BinaryParams::new(ParamVector::new(i.theta.clone()).unwrap(), gamma).unwrap();
        prop_assert!(binary_objective(&i.sf, &bp, &i.data, &i.noise).unwrap() <= 0.0);
        prop_assert!(mle_objective(&i.sf, &i.theta, &i.data).unwrap() <= 0.0);
    }

    #[test]
    fn gradients_match_central_differences(i in any_instance(), gamma in -2.0f64..2.0) {
        let (_, g) = ranking_value_and_grad(&i.sf, &i.theta, &i.data, &i.noise).unwrap();
        let fd = fd_gradient(|p| ranking_objective(&i.sf, p, &i.data, &i.noise).unwrap(), &i.theta);
        prop_assert!(rel_err(&fd, &g) <= 1e-6);

        let bp = BinaryParams::new(ParamVector::new(i.theta.clone()).unwrap(), gamma).unwrap();
        let (_, g) = binary_value_and_grad(&i.sf, &bp, &i.data, &i.noise).unwrap();
        let fd = fd_gradient(
            |p| binary_objective(&i.sf, &BinaryParams::from_flat(p).unwrap(), &i.data, &i.noise).unwrap(),
            &bp.to_flat(),
        );
        prop_assert!(rel_err(&fd, &g) <= 1e-6);

        let (_, g) = mle_value_and_grad(&i.sf, &i.theta, &i.data).unwrap();
        let fd = fd_gradient(|p| mle_objective(&i.sf, p, &i.data).unwrap(), &i.theta);
        prop_assert!(rel_err(&fd, &g) <= 1e-6);
    }

    #[test]
    fn ranking_is_gauge_invariant(i in instance(2), shifts in prop::collection::vec(-5.0f64..5.0, 4)) {
        let inner = i.sf.num_params() - i.sf.num_inputs();
        let mut moved = i.theta.clone();
        for (x, c) in moved[inner..].iter_mut().zip(&shifts) {
            *x += c;
        }
        let a = ranking_objective(&i.sf, &i.theta, &i.data, &i.noise).unwrap();
        let b = ranking_objective(&i.sf, &moved, &i.data, &i.noise).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn binary_is_invariant_to_joint_shift(i in instance(2), gamma in -2.0f64..2.0, c in -5.0f64..5.0) {
        let inner = i.sf.num_params() - i.sf.num_inputs();
        let mut moved = i.theta.clone();
        // biases enter as s − c_x, so lowering them raises every score by c
        moved[inner..].iter_mut().for_each(|v| *v -= c);
        let p0 = BinaryParams::new(ParamVector::new(i.theta.clone()).unwrap(), gamma).unwrap();
        let p1 = BinaryParams::new(ParamVector::new(moved).unwrap(), gamma + c).unwrap();
        let a = binary_objective(&i.sf, &p0, &i.data, &i.noise).unwrap();
        let b = binary_objective(&i.sf, &p1, &i.data, &i.noise).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn posterior_equals_truth_at_true_parameters(
        seed in 0u64..1000,
        weights in prop::collection::vec(0.1f64..1.0, 4),
        cands in prop::collection::vec(0usize..4, 2..5),
        x in 0usize..3,
    ) {
        let problem = make_tabular_problem(3, 4, 2, 1.0, seed).unwrap();
        let noise = NoiseDistribution::from_weights(&weights).unwrap();
        let truth = problem.truth().unwrap();
        let post = posteriors(&truth.scoring, truth.theta.as_slice(), &problem, &noise, x, &cands).unwrap();
        let w: Vec<f64> = cands.iter().map(|&y| problem.conditional(x)[y] / noise.prob(y)).collect();
        let total: f64 = w.iter().sum();
        for ((q, b), wk) in post.q.iter().zip(&post.beta).zip(&w) {
            prop_assert!((q - wk / total).abs() <= 1e-12);
            prop_assert!((b - wk / total).abs() <= 1e-12);
        }
        prop_assert!((post.q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_form_matches_population_objective(
        seed in 0u64..1000,
        theta in prop::collection::vec(-1.0f64..1.0, 2),
        k in 1usize..3,
    ) {
        let problem = make_tabular_problem(2, 3, 2, 1.0, seed).unwrap();
        let sf = problem.truth().unwrap().scoring.clone();
        let noise = NoiseDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let direct = population_ranking_objective(&sf, &theta, &problem, &noise, k, EvalMode::Exact).unwrap().value;
        let ce = ranking_objective_cross_entropy_form(&sf, &theta, &problem, &noise, k).unwrap();
        prop_assert!((direct - ce).abs() <= 1e-12);
    }

    #[test]
    fn sampling_is_a_function_of_seed_and_stream(seed in any::<u64>(), stream in 0u64..4) {
        let problem = make_tabular_problem(3, 4, 2, 1.0, 1).unwrap();
        let noise = NoiseDistribution::uniform(4).unwrap();
        let cfg = SamplingConfig::new(3, seed, stream).unwrap();
        let a = generate_dataset(&problem, 200, &cfg, &noise).unwrap();
        let b = generate_dataset(&problem, 200, &cfg, &noise).unwrap();
        prop_assert_eq!(a.hash(), b.hash());
        let other = SamplingConfig::new(3, seed, stream + 1).unwrap();
        prop_assert_ne!(a.hash(), generate_dataset(&problem, 200, &other, &noise).unwrap().hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ascent_trace_never_decreases(i in any_instance(), objective in 0usize..3) {
        let kind = [ObjectiveKind::Ranking, ObjectiveKind::Binary, ObjectiveKind::Mle][objective];
        let mut cfg = FitConfig::new(kind);
        cfg.max_iters = 200;
        let report = fit(&i.sf, FitData::Sample(&i.data), &i.noise, &cfg);
        // degenerate data can still trip the divergence guard; a returned
        // trace must climb
        if let Ok(report) = report {
            for w in report.trace.windows(2) {
                prop_assert!(w[1].objective >= w[0].objective);
            }
            let again = fit(&i.sf, FitData::Sample(&i.data), &i.noise, &cfg).unwrap();
            prop_assert_eq!(report.theta, again.theta);
        }
    }
}
