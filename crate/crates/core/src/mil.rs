//! Multi-instance sentence polarity learning.
//!
//! Reviews are bags of sentence embeddings carrying only a review-level label.
//! A logistic sentence classifier `y(x) = σ(θᵀ[x; 1])` is trained by minimizing
//!
//! ```text
//! L(θ) = 1/N² Σᵢ Σⱼ S(xᵢ, xⱼ) (y(xᵢ) − y(xⱼ))²  +  λ/K Σₖ (A(Rₖ) − lₖ)²
//! ```
//!
//! with `S(a, b) = exp(−‖a − b‖₂)` and `A(Rₖ)` the mean sentence prediction
//! over bag `k`. The double sum runs over ordered pairs; diagonal terms vanish.
//!
//! When `N²` exceeds the configured pair budget, training replaces the pair
//! term by a seeded uniform sample of ordered pairs scaled by the sample size.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarityModel {
    /// Weights followed by the bias (coefficient of the appended constant 1).
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub seed: u64,
    pub iterations: usize,
    /// NaN (written as `null`) for an untrained model.
    #[serde(deserialize_with = "nan_as_null")]
    pub initial_loss: f64,
    #[serde(deserialize_with = "nan_as_null")]
    pub final_loss: f64,
    /// Fingerprint of the embedder the model was trained on.
    pub embedder: String,
    /// Loss after each accepted iteration, starting with the initial loss.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

fn nan_as_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl PolarityModel {
    pub fn zeros(dim: usize, lambda: f64) -> Self {
        PolarityModel {
            theta: vec![0.0; dim + 1],
            lambda,
            seed: 0,
            iterations: 0,
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
            embedder: String::new(),
            trace: Vec::new(),
        }
    }

    /// Input dimension (without the bias).
    pub fn dim(&self) -> usize {
        self.theta.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingBag {
    /// Indices into the embedding list.
    pub sentences: Vec<usize>,
    pub label: u8,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `exp(−‖a − b‖₂)`; the norm is not squared.
pub fn rbf_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok((-sq_distance(a, b).sqrt()).exp())
}

fn linear(theta: &[f64], x: &[f64]) -> f64 {
    let (w, bias) = theta.split_at(theta.len() - 1);
    w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[0]
}

pub fn predict_sentence(model: &PolarityModel, x: &[f64]) -> Result<f64> {
    check_dim(model.dim(), x.len())?;
    Ok(sigmoid(linear(&model.theta, x)))
}

pub fn bag_prediction<E: AsRef<[f64]>>(
    model: &PolarityModel,
    embeddings: &[E],
    bag: &TrainingBag,
) -> Result<f64> {
    if bag.sentences.is_empty() {
        return Err(Error::InvalidArgument("empty bag".into()));
    }
    let mut sum = 0.0;
    for &i in &bag.sentences {
        let x = embeddings.get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("bag refers to sentence {i} of {}", embeddings.len()))
        })?;
        sum += predict_sentence(model, x.as_ref())?;
    }
    Ok(sum / bag.sentences.len() as f64)
}

/// 1 iff `p ≥ 0.5`.
pub fn label_sentence(p: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "probability must lie in [0, 1], got {p}"
        )));
    }
    Ok(u8::from(p >= 0.5))
}

/// Weighted pairs standing in for the double sum of the pair term.
#[derive(Debug, Clone)]
struct PairTerm {
    /// `(i, j, weight · S(xᵢ, xⱼ))`
    pairs: Vec<(u32, u32, f64)>,
    scale: f64,
    exact: bool,
}

const PAIR_CHUNK: usize = 1 << 14;

impl PairTerm {
    /// Every unordered pair once with weight 2, scaled by 1/N².
    fn exact<E: AsRef<[f64]> + Sync>(xs: &[E]) -> Self {
        let n = xs.len();
        let rows: Vec<Vec<(u32, u32, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = xs[i].as_ref();
                (i + 1..n)
                    .map(|j| {
                        let s = (-sq_distance(xi, xs[j].as_ref()).sqrt()).exp();
                        (i as u32, j as u32, 2.0 * s)
                    })
                    .collect()
            })
            .collect();
        PairTerm {
            pairs: rows.into_iter().flatten().collect(),
            scale: 1.0 / (n as f64 * n as f64),
            exact: true,
        }
    }

    /// `m` ordered pairs drawn uniformly from N × N, scaled by 1/m.
    fn sampled<E: AsRef<[f64]> + Sync>(xs: &[E], m: usize, seed: u64) -> Self {
        let n = xs.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<(u32, u32)> = (0..m)
            .map(|_| (rng.random_range(0..n) as u32, rng.random_range(0..n) as u32))
            .collect();
        let pairs = idx
            .par_iter()
            .map(|&(i, j)| {
                let d = sq_distance(xs[i as usize].as_ref(), xs[j as usize].as_ref());
                (i, j, (-d.sqrt()).exp())
            })
            .collect();
        PairTerm {
            pairs,
            scale: 1.0 / m as f64,
            exact: false,
        }
    }

    fn value(&self, p: &[f64]) -> f64 {
        let partial: Vec<f64> = self
            .pairs
            .par_chunks(PAIR_CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&(i, j, w)| {
                        let d = p[i as usize] - p[j as usize];
                        w * d * d
                    })
                    .sum::<f64>()
            })
            .collect();
        self.scale * partial.iter().sum::<f64>()
    }

    /// Adds ∂/∂pᵢ of the pair term, times `σ′ᵢ`, into `coef`.
    fn accumulate(&self, p: &[f64], dp: &[f64], coef: &mut [f64]) {
        for &(i, j, w) in &self.pairs {
            let (i, j) = (i as usize, j as usize);
            let g = 2.0 * self.scale * w * (p[i] - p[j]);
            coef[i] += g * dp[i];
            coef[j] -= g * dp[j];
        }
    }
}

/// The training objective over a fixed embedding set and bag list.
pub struct Objective<'a, E> {
    xs: &'a [E],
    bags: &'a [TrainingBag],
    lambda: f64,
    dim: usize,
    pairs: PairTerm,
}

impl<'a, E: AsRef<[f64]> + Sync> Objective<'a, E> {
    /// Exact pair term over all N² ordered pairs.
    pub fn exact(xs: &'a [E], bags: &'a [TrainingBag], lambda: f64) -> Result<Self> {
        Self::build(xs, bags, lambda, None)
    }

    /// Exact when `N² ≤ pair_budget`, otherwise `pair_budget` sampled pairs.
    pub fn with_budget(
        xs: &'a [E],
        bags: &'a [TrainingBag],
        lambda: f64,
        pair_budget: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::build(xs, bags, lambda, Some((pair_budget, seed)))
    }

    fn build(
        xs: &'a [E],
        bags: &'a [TrainingBag],
        lambda: f64,
        budget: Option<(usize, u64)>,
    ) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("no sentence embeddings".into()));
        }
        if bags.is_empty() {
            return Err(Error::InvalidArgument("no bags".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and non-negative, got {lambda}"
            )));
        }
        let dim = xs[0].as_ref().len();
        for x in xs {
            check_dim(dim, x.as_ref().len())?;
        }
        for (k, bag) in bags.iter().enumerate() {
            if bag.sentences.is_empty() {
                return Err(Error::InvalidArgument(format!("bag {k} is empty")));
            }
            if bag.label > 1 {
                return Err(Error::InvalidArgument(format!(
                    "bag {k} has non-binary label {}",
                    bag.label
                )));
            }
            if let Some(&i) = bag.sentences.iter().find(|&&i| i >= xs.len()) {
                return Err(Error::InvalidArgument(format!(
                    "bag {k} refers to sentence {i} of {}",
                    xs.len()
                )));
            }
        }
        let n = xs.len();
        let pairs = match budget {
            Some((m, seed)) if (n as u128) * (n as u128) > m as u128 && m > 0 => {
                PairTerm::sampled(xs, m, seed)
            }
            _ => PairTerm::exact(xs),
        };
        Ok(Objective {
            xs,
            bags,
            lambda,
            dim,
            pairs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_exact(&self) -> bool {
        self.pairs.exact
    }

    fn predictions(&self, theta: &[f64]) -> Vec<f64> {
        self.xs
            .par_iter()
            .map(|x| sigmoid(linear(theta, x.as_ref())))
            .collect()
    }

    fn bag_means(&self, p: &[f64]) -> Vec<f64> {
        self.bags
            .iter()
            .map(|b| b.sentences.iter().map(|&i| p[i]).sum::<f64>() / b.sentences.len() as f64)
            .collect()
    }

    fn bag_term(&self, means: &[f64]) -> f64 {
        let sse: f64 = means
            .iter()
            .zip(self.bags)
            .map(|(a, b)| (a - f64::from(b.label)).powi(2))
            .sum();
        self.lambda / self.bags.len() as f64 * sse
    }

    pub fn pair_term(&self, theta: &[f64]) -> f64 {
        self.pairs.value(&self.predictions(theta))
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let p = self.predictions(theta);
        self.pairs.value(&p) + self.bag_term(&self.bag_means(&p))
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.value_and_gradient(theta).1
    }

    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let p = self.predictions(theta);
        let dp: Vec<f64> = p.iter().map(|v| v * (1.0 - v)).collect();
        let means = self.bag_means(&p);
        let value = self.pairs.value(&p) + self.bag_term(&means);

        // coef[i] = ∂L/∂zᵢ where zᵢ = θᵀ[xᵢ; 1]
        let mut coef = vec![0.0; p.len()];
        self.pairs.accumulate(&p, &dp, &mut coef);
        let k = self.bags.len() as f64;
        for (bag, a) in self.bags.iter().zip(&means) {
            let g = 2.0 * self.lambda / k * (a - f64::from(bag.label)) / bag.sentences.len() as f64;
            for &i in &bag.sentences {
                coef[i] += g * dp[i];
            }
        }

        let mut grad = vec![0.0; self.dim + 1];
        for (x, c) in self.xs.iter().zip(&coef) {
            if *c == 0.0 {
                continue;
            }
            for (g, xv) in grad.iter_mut().zip(x.as_ref()) {
                *g += c * xv;
            }
            grad[self.dim] += c;
        }
        (value, grad)
    }
}

/// Exact loss (all N² pairs) at the model's θ and λ.
pub fn loss<E: AsRef<[f64]> + Sync>(
    model: &PolarityModel,
    embeddings: &[E],
    bags: &[TrainingBag],
) -> Result<f64> {
    let obj = Objective::exact(embeddings, bags, model.lambda)?;
    check_dim(obj.dim() + 1, model.theta.len())?;
    Ok(obj.value(&model.theta))
}

/// Exact analytic gradient of [`loss`] with respect to θ.
pub fn loss_gradient<E: AsRef<[f64]> + Sync>(
    model: &PolarityModel,
    embeddings: &[E],
    bags: &[TrainingBag],
) -> Result<Vec<f64>> {
    let obj = Objective::exact(embeddings, bags, model.lambda)?;
    check_dim(obj.dim() + 1, model.theta.len())?;
    Ok(obj.gradient(&model.theta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Ordered-pair budget for the pair term; above it pairs are sampled.
    pub pair_budget: usize,
    /// First trial step of the backtracking line search.
    pub initial_step: f64,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    pub grad_tol: f64,
    pub rel_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            max_iters: 500,
            seed: 0,
            pair_budget: 4_000_000,
            initial_step: 1.0,
            armijo: 1e-4,
            grad_tol: 1e-6,
            rel_tol: 1e-9,
        }
    }
}

/// Full-batch gradient descent with halving backtracking from θ = 0.
///
/// Each iteration starts its line search at twice the last accepted step.
pub fn train<E: AsRef<[f64]> + Sync>(
    bags: &[TrainingBag],
    embeddings: &[E],
    config: &TrainConfig,
) -> Result<PolarityModel> {
    let has = |l| bags.iter().any(|b| b.label == l);
    if !has(0) || !has(1) {
        return Err(Error::Validation(
            "training needs at least one positive and one negative bag".into(),
        ));
    }
    if config.max_iters == 0 || !(config.initial_step > 0.0) {
        return Err(Error::Config(
            "max_iters and initial_step must be positive".into(),
        ));
    }
    let obj = Objective::with_budget(
        embeddings,
        bags,
        config.lambda,
        config.pair_budget,
        config.seed,
    )?;

    let mut theta = vec![0.0; obj.dim() + 1];
    let (mut f, mut g) = obj.value_and_gradient(&theta);
    if !f.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            loss: f,
        });
    }
    let mut trace = vec![f];
    let mut step = config.initial_step;
    let mut iterations = 0;

    while iterations < config.max_iters {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax < config.grad_tol {
            break;
        }
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let mut t = step * 2.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(a, b)| a - t * b).collect();
            let fc = obj.value(&cand);
            if !fc.is_finite() {
                return Err(Error::Diverged {
                    iteration: iterations + 1,
                    loss: fc,
                });
            }
            if fc <= f - config.armijo * t * gg {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        iterations += 1;
        step = t;
        let rel = (f - fc).abs() / f.abs().max(f64::MIN_POSITIVE);
        theta = cand;
        let (fv, gv) = obj.value_and_gradient(&theta);
        if !fv.is_finite() || gv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration: iterations,
                loss: fv,
            });
        }
        f = fv;
        g = gv;
        trace.push(f);
        if rel < config.rel_tol {
            break;
        }
    }

    Ok(PolarityModel {
        theta,
        lambda: config.lambda,
        seed: config.seed,
        iterations,
        initial_loss: trace[0],
        final_loss: f,
        embedder: String::new(),
        trace,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_positive + self.true_negative) as f64 / self.total() as f64
    }
}

pub fn confusion<E: AsRef<[f64]>>(model: &PolarityModel, labeled: &[(E, u8)]) -> Result<Confusion> {
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("no labeled sentences".into()));
    }
    let mut c = Confusion::default();
    for (x, gold) in labeled {
        let pred = label_sentence(predict_sentence(model, x.as_ref())?)?;
        match (pred, *gold) {
            (1, 1) => c.true_positive += 1,
            (0, 0) => c.true_negative += 1,
            (1, 0) => c.false_positive += 1,
            (0, 1) => c.false_negative += 1,
            (_, g) => return Err(Error::InvalidArgument(format!("non-binary label {g}"))),
        }
    }
    Ok(c)
}

/// Share of sentences whose thresholded prediction equals the gold label.
pub fn evaluate_accuracy<E: AsRef<[f64]>>(model: &PolarityModel, labeled: &[(E, u8)]) -> Result<f64> {
    Ok(confusion(model, labeled)?.accuracy())
}

pub const MODEL_FORMAT: &str = "argchange-polarity-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// On-disk model container (pretty-printed JSON).
///
/// Floats are written in shortest round-trip form, so `θ` survives a
/// save/load cycle bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub generator: String,
    pub config_fingerprint: String,
    pub dim: usize,
    pub model: PolarityModel,
}

impl ModelFile {
    pub fn new(model: PolarityModel, config_fingerprint: impl Into<String>) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            generator: crate::GENERATOR.into(),
            config_fingerprint: config_fingerprint.into(),
            dim: model.dim(),
            model,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported model format {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        if file.model.theta.len() != file.dim + 1 || file.model.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{}: model parameters are inconsistent with dim {}",
                path.display(),
                file.dim
            )));
        }
        Ok(file)
    }
}
