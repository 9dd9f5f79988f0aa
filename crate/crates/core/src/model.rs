//! Conditional log-linear models `p(y|x;θ) = exp(s(x,y;θ)) / Z(x;θ)`.
//!
//! A [`ScoringFunction`] owns the structure of `s` (feature tables, input
//! vectors, vocabulary sizes); parameters always travel separately as a flat
//! [`ParamVector`]. Scores for one input are evaluated in batches over a
//! label list so that models with a shared per-input hidden state
//! (log-bilinear) pay for that state once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, softmax_in_place};
use crate::sampling::NoiseDistribution;

/// The finite label set `{0, .., size-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpace {
    size: usize,
    names: Option<Vec<String>>,
}

impl LabelSpace {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::field(
                "m_y",
                format!("label space needs at least 2 labels, got {size}"),
            ));
        }
        Ok(Self { size, names: None })
    }

    pub fn with_names(names: Vec<String>) -> Result<Self> {
        let mut space = Self::new(names.len())?;
        space.names = Some(names);
        Ok(space)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn name(&self, y: usize) -> Option<&str> {
        self.names.as_ref().and_then(|n| n.get(y)).map(String::as_str)
    }
}

/// The finite input set, optionally with a dense feature row per input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpace {
    size: usize,
    features: Option<(usize, Vec<f64>)>,
}

impl InputSpace {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::field("m_x", "input space must be non-empty"));
        }
        Ok(Self {
            size,
            features: None,
        })
    }

    pub fn with_features(size: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        let mut space = Self::new(size)?;
        if rows.len() != size * dim {
            return Err(Error::field(
                "features",
                format!("expected {size}x{dim} = {} entries, got {}", size * dim, rows.len()),
            ));
        }
        space.features = Some((dim, rows));
        Ok(space)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn feature(&self, x: usize) -> Option<&[f64]> {
        self.features
            .as_ref()
            .map(|(dim, rows)| &rows[x * dim..(x + 1) * dim])
    }
}

/// Flat parameter vector. Entries are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// `s(x,y;θ) = θ · f(x,y)` with a dense `m_x × m_y × dim` feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFeatures {
    m_x: usize,
    m_y: usize,
    dim: usize,
    table: Vec<f64>,
}

impl LinearFeatures {
    pub fn new(m_x: usize, m_y: usize, dim: usize, table: Vec<f64>) -> Result<Self> {
        if m_x == 0 || dim == 0 {
            return Err(Error::Config(
                "linear-features needs m_x >= 1 and d >= 1".into(),
            ));
        }
        LabelSpace::new(m_y)?;
        if table.len() != m_x * m_y * dim {
            return Err(Error::field(
                "features",
                format!(
                    "expected m_x*m_y*d = {} entries, got {}",
                    m_x * m_y * dim,
                    table.len()
                ),
            ));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::field("features", "entries must be finite"));
        }
        Ok(Self {
            m_x,
            m_y,
            dim,
            table,
        })
    }

    pub fn feature(&self, x: usize, y: usize) -> &[f64] {
        let start = (x * self.m_y + y) * self.dim;
        &self.table[start..start + self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }
}

/// `s(x,y;θ) = xᵀ θ_y`: one weight row per label applied to the input's
/// feature vector. Parameters are the `m_y × dim` rows, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmax {
    m_x: usize,
    m_y: usize,
    dim: usize,
    inputs: Vec<f64>,
}

impl LinearSoftmax {
    pub fn new(m_y: usize, dim: usize, inputs: Vec<f64>) -> Result<Self> {
        LabelSpace::new(m_y)?;
        if dim == 0 || inputs.is_empty() || !inputs.len().is_multiple_of(dim) {
            return Err(Error::field(
                "features",
                format!("input rows of length d={dim} expected, got {} values", inputs.len()),
            ));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::field("features", "entries must be finite"));
        }
        Ok(Self {
            m_x: inputs.len() / dim,
            m_y,
            dim,
            inputs,
        })
    }

    pub fn input(&self, x: usize) -> &[f64] {
        &self.inputs[x * self.dim..(x + 1) * self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }
}

/// Log-bilinear n-gram scorer:
/// `s(x,y) = (Σ_i C_i r_{w_i}) · q_y + b_y - c_x` where `w_1..w_{order-1}` is
/// the history encoded by `x` (oldest word most significant).
///
/// Parameter layout: `C_1..C_{order-1}` (each `dim × dim`, row-major), input
/// embeddings `r` (`vocab × dim`), output embeddings `q` (`vocab × dim`),
/// label bias `b` (`vocab`), then the context bias `c` (`vocab^(order-1)`)
/// when enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct LogBilinear {
    vocab: usize,
    dim: usize,
    order: usize,
    context_bias: bool,
}

impl LogBilinear {
    pub fn new(vocab: usize, dim: usize, order: usize, context_bias: bool) -> Result<Self> {
        LabelSpace::new(vocab)?;
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if !(2..=4).contains(&order) {
            return Err(Error::Config(format!(
                "n-gram order must be between 2 and 4, got {order}"
            )));
        }
        Ok(Self {
            vocab,
            dim,
            order,
            context_bias,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn has_context_bias(&self) -> bool {
        self.context_bias
    }

    pub fn num_contexts(&self) -> usize {
        self.vocab.pow((self.order - 1) as u32)
    }

    /// Context index of a history, oldest word first.
    pub fn context_index(&self, history: &[usize]) -> usize {
        debug_assert_eq!(history.len(), self.order - 1);
        history.iter().fold(0, |acc, &w| acc * self.vocab + w)
    }

    fn history(&self, x: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        // (position i, word) with position 0 the oldest word
        let n = self.order - 1;
        (0..n).map(move |i| {
            let shift = self.vocab.pow((n - 1 - i) as u32);
            (i, (x / shift) % self.vocab)
        })
    }

    fn offsets(&self) -> LblOffsets {
        let d = self.dim;
        let c = 0;
        let r = (self.order - 1) * d * d;
        let q = r + self.vocab * d;
        let b = q + self.vocab * d;
        let cx = b + self.vocab;
        let end = cx + if self.context_bias { self.num_contexts() } else { 0 };
        LblOffsets { c, r, q, b, cx, end }
    }

    fn hidden(&self, theta: &[f64], x: usize, off: &LblOffsets) -> Vec<f64> {
        let d = self.dim;
        let mut h = vec![0.0; d];
        for (i, w) in self.history(x) {
            let cm = &theta[off.c + i * d * d..off.c + (i + 1) * d * d];
            let r = &theta[off.r + w * d..off.r + (w + 1) * d];
            for a in 0..d {
                h[a] += crate::numeric::dot(&cm[a * d..(a + 1) * d], r);
            }
        }
        h
    }
}

struct LblOffsets {
    c: usize,
    r: usize,
    q: usize,
    b: usize,
    cx: usize,
    end: usize,
}

/// Parametric scoring function `s(x, y; θ)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoringFunction {
    LinearFeatures(LinearFeatures),
    LinearSoftmax(LinearSoftmax),
    /// `s(x,y;θ,c) = inner(x,y;θ) - c_x`; the `m_x` biases follow the inner
    /// parameters.
    ContextBias(Box<ScoringFunction>),
    LogBilinear(LogBilinear),
}

impl ScoringFunction {
    pub fn with_context_bias(self) -> Self {
        ScoringFunction::ContextBias(Box::new(self))
    }

    pub fn num_inputs(&self) -> usize {
        match self {
            ScoringFunction::LinearFeatures(f) => f.m_x,
            ScoringFunction::LinearSoftmax(f) => f.m_x,
            ScoringFunction::ContextBias(inner) => inner.num_inputs(),
            ScoringFunction::LogBilinear(f) => f.num_contexts(),
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            ScoringFunction::LinearFeatures(f) => f.m_y,
            ScoringFunction::LinearSoftmax(f) => f.m_y,
            ScoringFunction::ContextBias(inner) => inner.num_labels(),
            ScoringFunction::LogBilinear(f) => f.vocab,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            ScoringFunction::LinearFeatures(f) => f.dim,
            ScoringFunction::LinearSoftmax(f) => f.m_y * f.dim,
            ScoringFunction::ContextBias(inner) => inner.num_params() + inner.num_inputs(),
            ScoringFunction::LogBilinear(f) => f.offsets().end,
        }
    }

    /// Short tag used in file formats.
    pub fn variant_name(&self) -> String {
        match self {
            ScoringFunction::LinearFeatures(_) => "linear-features".into(),
            ScoringFunction::LinearSoftmax(_) => "linear-softmax".into(),
            ScoringFunction::ContextBias(inner) => format!("context-bias+{}", inner.variant_name()),
            ScoringFunction::LogBilinear(_) => "log-bilinear".into(),
        }
    }

    /// Verifies a parameter vector's length.
    pub fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::Config(format!(
                "{} expects {} parameters, got {}",
                self.variant_name(),
                self.num_params(),
                theta.len()
            )));
        }
        Ok(())
    }

    fn check(&self, theta: &[f64], x: usize, y: Option<usize>) -> Result<()> {
        self.check_params(theta)?;
        if x >= self.num_inputs() {
            return Err(Error::Config(format!(
                "input index {x} out of range (m_x = {})",
                self.num_inputs()
            )));
        }
        if let Some(y) = y {
            if y >= self.num_labels() {
                return Err(Error::Config(format!(
                    "label index {y} out of range (m_y = {})",
                    self.num_labels()
                )));
            }
        }
        Ok(())
    }

    /// Writes `s(x, labels[k]; θ)` into `out[k]`. Indices are not checked.
    pub fn scores_into(&self, theta: &[f64], x: usize, labels: &[usize], out: &mut [f64]) {
        debug_assert_eq!(labels.len(), out.len());
        match self {
            ScoringFunction::LinearFeatures(f) => {
                for (o, &y) in out.iter_mut().zip(labels) {
                    *o = crate::numeric::dot(theta, f.feature(x, y));
                }
            }
            ScoringFunction::LinearSoftmax(f) => {
                let input = f.input(x);
                for (o, &y) in out.iter_mut().zip(labels) {
                    *o = crate::numeric::dot(input, &theta[y * f.dim..(y + 1) * f.dim]);
                }
            }
            ScoringFunction::ContextBias(inner) => {
                let n = inner.num_params();
                inner.scores_into(&theta[..n], x, labels, out);
                let c = theta[n + x];
                for o in out.iter_mut() {
                    *o -= c;
                }
            }
            ScoringFunction::LogBilinear(f) => {
                let off = f.offsets();
                let d = f.dim;
                let h = f.hidden(theta, x, &off);
                let c = if f.context_bias { theta[off.cx + x] } else { 0.0 };
                for (o, &y) in out.iter_mut().zip(labels) {
                    let q = &theta[off.q + y * d..off.q + (y + 1) * d];
                    *o = crate::numeric::dot(&h, q) + theta[off.b + y] - c;
                }
            }
        }
    }

    /// Scores of every label at `x`.
    pub fn all_scores(&self, theta: &[f64], x: usize) -> Vec<f64> {
        let labels: Vec<usize> = (0..self.num_labels()).collect();
        let mut out = vec![0.0; labels.len()];
        self.scores_into(theta, x, &labels, &mut out);
        out
    }

    /// Adds `Σ_k weights[k] ∇_θ s(x, labels[k]; θ)` into `grad`.
    pub fn accumulate_grad(
        &self,
        theta: &[f64],
        x: usize,
        labels: &[usize],
        weights: &[f64],
        grad: &mut [f64],
    ) {
        debug_assert_eq!(labels.len(), weights.len());
        match self {
            ScoringFunction::LinearFeatures(f) => {
                for (&y, &w) in labels.iter().zip(weights) {
                    if w == 0.0 {
                        continue;
                    }
                    for (g, v) in grad.iter_mut().zip(f.feature(x, y)) {
                        *g += w * v;
                    }
                }
            }
            ScoringFunction::LinearSoftmax(f) => {
                let input = f.input(x);
                for (&y, &w) in labels.iter().zip(weights) {
                    let row = &mut grad[y * f.dim..(y + 1) * f.dim];
                    for (g, v) in row.iter_mut().zip(input) {
                        *g += w * v;
                    }
                }
            }
            ScoringFunction::ContextBias(inner) => {
                let n = inner.num_params();
                let (head, tail) = grad.split_at_mut(n);
                inner.accumulate_grad(&theta[..n], x, labels, weights, head);
                tail[x] -= weights.iter().sum::<f64>();
            }
            ScoringFunction::LogBilinear(f) => {
                let off = f.offsets();
                let d = f.dim;
                let h = f.hidden(theta, x, &off);
                let mut gh = vec![0.0; d];
                let mut total = 0.0;
                for (&y, &w) in labels.iter().zip(weights) {
                    if w == 0.0 {
                        continue;
                    }
                    total += w;
                    let q = &theta[off.q + y * d..off.q + (y + 1) * d];
                    for a in 0..d {
                        gh[a] += w * q[a];
                        grad[off.q + y * d + a] += w * h[a];
                    }
                    grad[off.b + y] += w;
                }
                if f.context_bias {
                    grad[off.cx + x] -= total;
                }
                for (i, word) in f.history(x) {
                    let cstart = off.c + i * d * d;
                    let rstart = off.r + word * d;
                    for a in 0..d {
                        if gh[a] == 0.0 {
                            continue;
                        }
                        for b in 0..d {
                            grad[cstart + a * d + b] += gh[a] * theta[rstart + b];
                            grad[rstart + b] += theta[cstart + a * d + b] * gh[a];
                        }
                    }
                }
            }
        }
    }

    /// `s(x, y; θ)`.
    pub fn score(&self, theta: &[f64], x: usize, y: usize) -> Result<f64> {
        self.check(theta, x, Some(y))?;
        let mut out = [0.0];
        self.scores_into(theta, x, &[y], &mut out);
        Ok(out[0])
    }

    /// `∇_θ s(x, y; θ)` as a dense vector of length [`Self::num_params`].
    pub fn score_grad(&self, theta: &[f64], x: usize, y: usize) -> Result<Vec<f64>> {
        self.check(theta, x, Some(y))?;
        let mut grad = vec![0.0; theta.len()];
        self.accumulate_grad(theta, x, &[y], &[1.0], &mut grad);
        Ok(grad)
    }

    /// `ŝ(x,y;θ) = s(x,y;θ) - log p_N(y)`.
    pub fn shifted_score(
        &self,
        theta: &[f64],
        noise: &NoiseDistribution,
        x: usize,
        y: usize,
    ) -> Result<f64> {
        let s = self.score(theta, x, y)?;
        let p = noise.prob(y);
        if p <= 0.0 {
            return Err(Error::Domain(format!("noise mass of label {y} is zero")));
        }
        Ok(s - p.ln())
    }

    /// `log Z(x;θ)` via log-sum-exp.
    pub fn log_partition(&self, theta: &[f64], x: usize) -> Result<f64> {
        self.check(theta, x, None)?;
        let lse = log_sum_exp(&self.all_scores(theta, x));
        if !lse.is_finite() {
            return Err(Error::Numeric(format!(
                "log partition function at input {x} is not finite"
            )));
        }
        Ok(lse)
    }

    /// `Z(x;θ) = Σ_y exp s(x,y;θ)`.
    pub fn partition(&self, theta: &[f64], x: usize) -> Result<f64> {
        let z = self.log_partition(theta, x)?.exp();
        if !z.is_finite() {
            return Err(Error::Numeric(format!(
                "partition function at input {x} overflows"
            )));
        }
        Ok(z)
    }

    /// `p(·|x;θ)`, the softmax of the scores at `x`.
    pub fn cond_prob(&self, theta: &[f64], x: usize) -> Result<Vec<f64>> {
        self.check(theta, x, None)?;
        let mut p = self.all_scores(theta, x);
        let lse = softmax_in_place(&mut p);
        if !lse.is_finite() {
            return Err(Error::Numeric(format!(
                "conditional distribution at input {x} is not finite"
            )));
        }
        Ok(p)
    }
}

/// Ground-truth parameters attached to a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scoring: ScoringFunction,
    pub theta: ParamVector,
    /// Present when the problem is self-normalized:
    /// `p(y|x) = exp(s(x,y;θ*) - γ*)` for every cell.
    pub gamma: Option<f64>,
}

/// A finite joint distribution `p_X(x) p_{Y|X}(y|x)`, optionally generated
/// by a known scoring function.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalProblem {
    inputs: InputSpace,
    labels: LabelSpace,
    p_x: Vec<f64>,
    p_y_given_x: Vec<f64>,
    truth: Option<GroundTruth>,
}

const SUM_TOL: f64 = 1e-12;
const MODEL_TOL: f64 = 1e-10;

impl ConditionalProblem {
    /// Builds a problem from explicit tables, validating every invariant.
    pub fn new(
        inputs: InputSpace,
        labels: LabelSpace,
        p_x: Vec<f64>,
        p_y_given_x: Vec<f64>,
        truth: Option<GroundTruth>,
    ) -> Result<Self> {
        let (m_x, m_y) = (inputs.size(), labels.size());
        if p_x.len() != m_x {
            return Err(Error::field(
                "p_x",
                format!("expected {m_x} entries, got {}", p_x.len()),
            ));
        }
        if let Some(i) = p_x.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::field(
                "p_x",
                format!("entry {i} must be strictly positive, got {}", p_x[i]),
            ));
        }
        let total: f64 = p_x.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::field("p_x", format!("sums to {total}, not 1")));
        }
        if p_y_given_x.len() != m_x * m_y {
            return Err(Error::field(
                "p_y_given_x",
                format!("expected {m_x}x{m_y} entries, got {}", p_y_given_x.len()),
            ));
        }
        for x in 0..m_x {
            let row = &p_y_given_x[x * m_y..(x + 1) * m_y];
            if let Some(y) = row.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
                return Err(Error::field(
                    "p_y_given_x",
                    format!("entry ({x},{y}) must be strictly positive, got {}", row[y]),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(Error::field(
                    "p_y_given_x",
                    format!("row {x} sums to {s}, not 1"),
                ));
            }
        }
        if let Some(t) = &truth {
            let sf = &t.scoring;
            if sf.num_inputs() != m_x || sf.num_labels() != m_y {
                return Err(Error::field(
                    "variant",
                    format!(
                        "scoring function covers {}x{} cells, problem has {m_x}x{m_y}",
                        sf.num_inputs(),
                        sf.num_labels()
                    ),
                ));
            }
            if t.theta.len() != sf.num_params() {
                return Err(Error::field(
                    "theta_star",
                    format!("expected {} parameters, got {}", sf.num_params(), t.theta.len()),
                ));
            }
            for x in 0..m_x {
                let row = &p_y_given_x[x * m_y..(x + 1) * m_y];
                match t.gamma {
                    Some(gamma) => {
                        if !gamma.is_finite() {
                            return Err(Error::field("gamma_star", "must be finite"));
                        }
                        let scores = sf.all_scores(t.theta.as_slice(), x);
                        for (y, (&p, s)) in row.iter().zip(scores).enumerate() {
                            let model = (s - gamma).exp();
                            if (p - model).abs() > MODEL_TOL {
                                return Err(Error::field(
                                    "gamma_star",
                                    format!(
                                        "problem is not self-normalized at ({x},{y}): p = {p}, exp(s - gamma) = {model}"
                                    ),
                                ));
                            }
                        }
                    }
                    None => {
                        let model = sf.cond_prob(t.theta.as_slice(), x)?;
                        for (y, (&p, q)) in row.iter().zip(model).enumerate() {
                            if (p - q).abs() > MODEL_TOL {
                                return Err(Error::field(
                                    "theta_star",
                                    format!("p_y_given_x({x},{y}) = {p} but the model gives {q}"),
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            inputs,
            labels,
            p_x,
            p_y_given_x,
            truth,
        })
    }

    /// The problem generated by `scoring` at `theta`: `p_{Y|X} = softmax(s)`.
    pub fn from_model(
        inputs: InputSpace,
        scoring: ScoringFunction,
        theta: ParamVector,
        p_x: Vec<f64>,
    ) -> Result<Self> {
        let labels = LabelSpace::new(scoring.num_labels())?;
        let mut table = Vec::with_capacity(inputs.size() * labels.size());
        for x in 0..inputs.size() {
            table.extend(scoring.cond_prob(theta.as_slice(), x)?);
        }
        let truth = GroundTruth {
            scoring,
            theta,
            gamma: None,
        };
        Self::new(inputs, labels, p_x, table, Some(truth))
    }

    /// Like [`Self::from_model`] for a self-normalized model: checks
    /// `Σ_y exp(s(x,y;θ*) - γ*) = 1` for every `x` and records `γ*`.
    pub fn from_self_normalized_model(
        inputs: InputSpace,
        scoring: ScoringFunction,
        theta: ParamVector,
        gamma: f64,
        p_x: Vec<f64>,
    ) -> Result<Self> {
        let labels = LabelSpace::new(scoring.num_labels())?;
        let mut table = Vec::with_capacity(inputs.size() * labels.size());
        for x in 0..inputs.size() {
            let row: Vec<f64> = scoring
                .all_scores(theta.as_slice(), x)
                .into_iter()
                .map(|s| (s - gamma).exp())
                .collect();
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > MODEL_TOL {
                return Err(Error::Precondition(format!(
                    "model is not self-normalized at input {x}: sum exp(s - gamma) = {total}"
                )));
            }
            // exact normalization keeps the row-sum invariant at 1e-12
            table.extend(row.into_iter().map(|p| p / total));
        }
        let truth = GroundTruth {
            scoring,
            theta,
            gamma: Some(gamma),
        };
        Self::new(inputs, labels, p_x, table, Some(truth))
    }

    pub fn m_x(&self) -> usize {
        self.inputs.size()
    }

    pub fn m_y(&self) -> usize {
        self.labels.size()
    }

    pub fn inputs(&self) -> &InputSpace {
        &self.inputs
    }

    pub fn labels(&self) -> &LabelSpace {
        &self.labels
    }

    pub fn p_x(&self) -> &[f64] {
        &self.p_x
    }

    pub fn conditional(&self, x: usize) -> &[f64] {
        let m_y = self.m_y();
        &self.p_y_given_x[x * m_y..(x + 1) * m_y]
    }

    pub fn p_y_given_x(&self) -> &[f64] {
        &self.p_y_given_x
    }

    pub fn p_xy(&self, x: usize, y: usize) -> f64 {
        self.p_x[x] * self.p_y_given_x[x * self.m_y() + y]
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    pub fn is_self_normalized(&self) -> bool {
        self.truth.as_ref().is_some_and(|t| t.gamma.is_some())
    }

    /// The ground truth or a precondition error naming `what` needs it.
    pub fn require_truth(&self, what: &str) -> Result<&GroundTruth> {
        self.truth.as_ref().ok_or_else(|| {
            Error::Precondition(format!("{what} needs a problem with ground-truth parameters"))
        })
    }
}

/// On-disk JSON form of a [`ConditionalProblem`]. All tables are flat and
/// row-major.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProblemFile {
    pub m_x: usize,
    pub m_y: usize,
    pub d: usize,
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_star: Option<f64>,
    pub p_x: Vec<f64>,
    pub p_y_given_x: Vec<f64>,
}

fn scoring_from_file(file: &ProblemFile) -> Result<Option<ScoringFunction>> {
    let (bias, base) = match file.variant.strip_prefix("context-bias+") {
        Some(rest) => (true, rest),
        None => (false, file.variant.as_str()),
    };
    let needs_features = || {
        file.features
            .clone()
            .ok_or_else(|| Error::field("features", format!("required by variant `{base}`")))
    };
    let sf = match base {
        "tabular" if !bias => return Ok(None),
        "linear-features" => ScoringFunction::LinearFeatures(
            LinearFeatures::new(file.m_x, file.m_y, file.d, needs_features()?)
                .map_err(|e| Error::field("features", e.to_string()))?,
        ),
        "linear-softmax" => {
            let inputs = needs_features()?;
            if inputs.len() != file.m_x * file.d {
                return Err(Error::field(
                    "features",
                    format!("expected m_x*d = {} entries, got {}", file.m_x * file.d, inputs.len()),
                ));
            }
            ScoringFunction::LinearSoftmax(
                LinearSoftmax::new(file.m_y, file.d, inputs)
                    .map_err(|e| Error::field("features", e.to_string()))?,
            )
        }
        other => {
            return Err(Error::field(
                "variant",
                format!("unknown variant `{other}` (expected tabular, linear-features, linear-softmax, optionally prefixed by context-bias+)"),
            ))
        }
    };
    Ok(Some(if bias { sf.with_context_bias() } else { sf }))
}

impl ConditionalProblem {
    pub fn to_file(&self) -> ProblemFile {
        let (variant, d, features, theta_star, gamma_star) = match &self.truth {
            None => ("tabular".to_string(), 0, None, None, None),
            Some(t) => {
                let (d, features) = features_of(&t.scoring);
                (
                    t.scoring.variant_name(),
                    d,
                    features,
                    Some(t.theta.as_slice().to_vec()),
                    t.gamma,
                )
            }
        };
        ProblemFile {
            m_x: self.m_x(),
            m_y: self.m_y(),
            d,
            variant,
            features,
            theta_star,
            gamma_star,
            p_x: self.p_x.clone(),
            p_y_given_x: self.p_y_given_x.clone(),
        }
    }

    pub fn from_file(file: ProblemFile) -> Result<Self> {
        let labels = LabelSpace::new(file.m_y)?;
        let scoring = scoring_from_file(&file)?;
        let inputs = match (&scoring, &file.features) {
            (Some(sf), Some(f)) if base_of(sf).is_linear_softmax() => {
                InputSpace::with_features(file.m_x, file.d, f.clone())?
            }
            _ => InputSpace::new(file.m_x)?,
        };
        let truth = match (scoring, file.theta_star) {
            (Some(scoring), Some(theta)) => Some(GroundTruth {
                scoring,
                theta: ParamVector::new(theta).map_err(|e| Error::field("theta_star", e.to_string()))?,
                gamma: file.gamma_star,
            }),
            (Some(_), None) => {
                if file.gamma_star.is_some() {
                    return Err(Error::field("gamma_star", "given without theta_star"));
                }
                None
            }
            (None, theta) => {
                if theta.is_some() || file.gamma_star.is_some() {
                    return Err(Error::field(
                        "theta_star",
                        "tabular problems carry no ground-truth parameters",
                    ));
                }
                None
            }
        };
        Self::new(inputs, labels, file.p_x, file.p_y_given_x, truth)
    }

    /// The scoring function stored with the problem, even when it carries no
    /// ground-truth parameters.
    pub fn scoring_from(file: &ProblemFile) -> Result<Option<ScoringFunction>> {
        scoring_from_file(file)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }
}

fn base_of(sf: &ScoringFunction) -> &ScoringFunction {
    match sf {
        ScoringFunction::ContextBias(inner) => base_of(inner),
        other => other,
    }
}

impl ScoringFunction {
    fn is_linear_softmax(&self) -> bool {
        matches!(self, ScoringFunction::LinearSoftmax(_))
    }
}

fn features_of(sf: &ScoringFunction) -> (usize, Option<Vec<f64>>) {
    match sf {
        ScoringFunction::LinearFeatures(f) => (f.dim, Some(f.table.clone())),
        ScoringFunction::LinearSoftmax(f) => (f.dim, Some(f.inputs.clone())),
        ScoringFunction::ContextBias(inner) => features_of(inner),
        ScoringFunction::LogBilinear(f) => (f.dim, None),
    }
}
