//! Synthetic corpora with planted ground truth.
//!
//! All draws come from a single ChaCha8 stream (`rand_chacha` 0.9) seeded
//! with `SynthSpec::seed`; normals and counts use `rand_distr` 0.5. Generation
//! is single-threaded so output depends only on the spec.

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Review, ReviewCorpus};
use crate::error::{Error, Result};
use crate::glmm::zstandardize;
use crate::mil::{sigmoid, TrainingBag};
use crate::textfeats::{FeatureTable, Regressor};

/// Coefficients in design order: intercept, the nine covariates, interaction.
pub type PlantedBeta = [f64; 11];

pub const DEFAULT_BETA: PlantedBeta = [
    1.163, -0.051, 0.360, -0.176, -0.027, -0.126, 0.115, 0.554, 0.3, -0.036, -0.17,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_products: usize,
    pub reviews_per_product: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub dim: usize,
    /// Distance between the two cluster centers, in units of `spread`.
    pub separation: f64,
    /// Per-coordinate standard deviation around each center.
    pub spread: f64,
    /// Probability that a sentence shares its review's stance.
    pub agreement: f64,
    pub beta: PlantedBeta,
    pub sigma2_alpha: f64,
    /// Mean of `RVotes`, drawn as `1 + Poisson(votes_mean − 1)`.
    pub votes_mean: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            n_products: 20,
            reviews_per_product: 10,
            min_sentences: 2,
            max_sentences: 8,
            dim: 16,
            separation: 6.0,
            spread: 1.0,
            agreement: 0.85,
            beta: DEFAULT_BETA,
            sigma2_alpha: 0.25,
            votes_mean: 20.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_products == 0 || self.reviews_per_product == 0 {
            return fail("synth needs at least one product and one review per product".into());
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return fail(format!(
                "sentence range {}..={} is invalid",
                self.min_sentences, self.max_sentences
            ));
        }
        if self.dim < 2 {
            return fail(format!("synth dim must be >= 2, got {}", self.dim));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return fail("cluster centers must be distinct (separation > 0)".into());
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return fail(format!("spread must be positive, got {}", self.spread));
        }
        if !(0.0..=1.0).contains(&self.agreement) {
            return fail(format!("agreement must lie in [0, 1], got {}", self.agreement));
        }
        if !(self.sigma2_alpha >= 0.0 && self.sigma2_alpha.is_finite()) {
            return fail(format!("sigma2_alpha must be >= 0, got {}", self.sigma2_alpha));
        }
        if !(self.votes_mean >= 1.0 && self.votes_mean.is_finite()) {
            return fail(format!("votes_mean must be >= 1, got {}", self.votes_mean));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return fail("planted beta must be finite".into());
        }
        Ok(())
    }
}

fn rng(spec: &SynthSpec) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(spec.seed)
}

fn draw_votes(rng: &mut ChaCha8Rng, mean: f64) -> u32 {
    if mean <= 1.0 {
        return 1;
    }
    let extra: f64 = Poisson::new(mean - 1.0).expect("validated mean").sample(rng);
    1 + extra as u32
}

fn draw_binomial(rng: &mut ChaCha8Rng, n: u32, p: f64) -> u32 {
    Binomial::new(u64::from(n), p).expect("probability in [0, 1]").sample(rng) as u32
}

const POSITIVE_WORDS: &[&str] = &[
    "great", "excellent", "perfect", "reliable", "sturdy", "fantastic", "comfortable", "smooth",
    "recommend", "solid", "bright", "pleased",
];
const NEGATIVE_WORDS: &[&str] = &[
    "poor", "broken", "awful", "flimsy", "useless", "terrible", "cheap", "noisy", "returned",
    "worst", "faulty", "refund",
];
const NEUTRAL_WORDS: &[&str] = &[
    "the", "box", "arrived", "color", "size", "battery", "screen", "package", "week", "manual",
    "price", "kitchen", "cable", "model", "daily", "after",
];
const COGNITIVE_WORDS: &[&str] = &["think", "because", "know", "consider", "realize", "reason"];
const EMOTIVE_WORDS: &[&str] = &["happy", "love", "angry", "sad", "worried", "delighted"];

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

/// Placeholder sentence whose polarity words follow `label`.
fn placeholder_sentence(rng: &mut ChaCha8Rng, label: u8) -> String {
    let pool = if label == 1 { POSITIVE_WORDS } else { NEGATIVE_WORDS };
    let mut words = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        words.push(pick(rng, NEUTRAL_WORDS));
    }
    for _ in 0..rng.random_range(2..=3) {
        words.push(pick(rng, pool));
    }
    if rng.random_bool(0.3) {
        words.push(pick(rng, COGNITIVE_WORDS));
    }
    if rng.random_bool(0.3) {
        words.push(pick(rng, EMOTIVE_WORDS));
    }
    if rng.random_bool(0.2) {
        words.push("immediately");
    }
    // shuffle so the sentence does not always open with filler
    for i in (1..words.len()).rev() {
        let j = rng.random_range(0..=i);
        words.swap(i, j);
    }
    let mut s = words.join(" ");
    let first = s[..1].to_uppercase();
    s.replace_range(..1, &first);
    s.push('.');
    s
}

/// Multi-instance corpus with gold sentence labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MilCorpus {
    pub bags: Vec<TrainingBag>,
    /// One embedding per sentence, indexed by `TrainingBag::sentences`.
    pub embeddings: Vec<Vec<f64>>,
    pub gold: Vec<u8>,
    pub positive_center: Vec<f64>,
    pub negative_center: Vec<f64>,
    /// Reviews in the corpus JSONL schema; sentence `i` of the flattened
    /// corpus carries the placeholder text for embedding `i`.
    pub reviews: Vec<Review>,
}

impl MilCorpus {
    pub fn num_sentences(&self) -> usize {
        self.gold.len()
    }

    pub fn review_corpus(&self) -> Result<ReviewCorpus> {
        ReviewCorpus::new(self.reviews.clone(), None)
    }
}

/// Majority of gold labels; ties count as positive.
pub fn majority_label(labels: &[u8]) -> u8 {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    u8::from(2 * pos >= labels.len())
}

pub fn generate_mil_corpus(spec: &SynthSpec) -> Result<MilCorpus> {
    spec.validate()?;
    let mut rng = rng(spec);
    let normal = Normal::new(0.0, spec.spread).expect("validated spread");

    let mut dir: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let half = 0.5 * spec.separation * spec.spread;
    dir.iter_mut().for_each(|v| *v *= half / norm);
    let positive_center = dir.clone();
    let negative_center: Vec<f64> = dir.iter().map(|v| -v).collect();

    let start = NaiveDate::from_ymd_opt(2011, 1, 1).expect("valid date");
    let span_days = 6 * 365;

    let mut out = MilCorpus {
        bags: Vec::new(),
        embeddings: Vec::new(),
        gold: Vec::new(),
        positive_center,
        negative_center,
        reviews: Vec::new(),
    };
    for p in 0..spec.n_products {
        let product_id = format!("p{p:04}");
        let involvement = (p % 2) as u8;
        let alpha = spec.sigma2_alpha.sqrt() * rng.sample::<f64, _>(StandardNormal);
        for r in 0..spec.reviews_per_product {
            let stance = u8::from(rng.random_bool(0.5));
            let len = rng.random_range(spec.min_sentences..=spec.max_sentences);
            let mut labels = Vec::with_capacity(len);
            let mut idx = Vec::with_capacity(len);
            let mut sentences = Vec::with_capacity(len);
            for _ in 0..len {
                let label = if rng.random_bool(spec.agreement) { stance } else { 1 - stance };
                let center = if label == 1 { &out.positive_center } else { &out.negative_center };
                let x: Vec<f64> = center.iter().map(|c| c + normal.sample(&mut rng)).collect();
                idx.push(out.embeddings.len());
                out.embeddings.push(x);
                out.gold.push(label);
                labels.push(label);
                sentences.push(placeholder_sentence(&mut rng, label));
            }
            let label = majority_label(&labels);
            let stars = if label == 1 {
                rng.random_range(4..=5)
            } else {
                rng.random_range(1..=2)
            };
            let total = draw_votes(&mut rng, spec.votes_mean);
            let length_effect = 0.3 * (len as f64 - 0.5 * (spec.min_sentences + spec.max_sentences) as f64);
            let prob = sigmoid(0.5 + alpha + length_effect);
            let helpful = draw_binomial(&mut rng, total, prob);
            let post_date = start + Duration::days(rng.random_range(0..span_days));
            out.bags.push(TrainingBag {
                sentences: idx,
                label,
            });
            out.reviews.push(Review {
                review_id: format!("r{p:04}-{r:03}"),
                product_id: product_id.clone(),
                reviewer_id: None,
                involvement,
                stars,
                helpful_votes: helpful,
                total_votes: total,
                post_date,
                text: sentences.join(" "),
                sentences,
            });
        }
    }
    Ok(out)
}

/// Regression data drawn from the random-intercept binomial model.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmmCorpus {
    /// Covariates are exactly standardized, so re-standardizing them in
    /// `build_design` is the identity and the planted β is the estimand.
    pub table: FeatureTable,
    pub helpful_prob: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn generate_glmm_corpus(spec: &SynthSpec) -> Result<GlmmCorpus> {
    spec.validate()?;
    let mut rng = rng(spec);
    let n = spec.n_products * spec.reviews_per_product;
    if n < 3 {
        return Err(Error::Config(format!("synth regression needs at least 3 rows, got {n}")));
    }
    let alpha: Vec<f64> = (0..spec.n_products)
        .map(|_| spec.sigma2_alpha.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let raw: Vec<(&str, Vec<f64>)> = Regressor::ALL
        .iter()
        .map(|r| (r.name(), (0..n).map(|_| rng.sample(StandardNormal)).collect()))
        .collect();
    let (cols, _) = zstandardize(&raw)?;
    let inter: Vec<f64> = cols[Regressor::RLength.index()]
        .iter()
        .zip(&cols[Regressor::RAC.index()])
        .map(|(a, b)| a * b)
        .collect();
    let (inter, _) = zstandardize(&[("interaction", inter)])?;
    let inter = &inter[0];

    let mut table = FeatureTable::default();
    let mut helpful_prob = Vec::with_capacity(n);
    for i in 0..n {
        let g = i / spec.reviews_per_product;
        let mut eta = spec.beta[0] + alpha[g] + spec.beta[10] * inter[i];
        for (k, c) in cols.iter().enumerate() {
            eta += spec.beta[k + 1] * c[i];
        }
        let p = sigmoid(eta);
        let total = draw_votes(&mut rng, spec.votes_mean);
        let helpful = draw_binomial(&mut rng, total, p);
        let values: [f64; 9] = std::array::from_fn(|k| cols[k][i]);
        table.push(
            format!("s{i:06}"),
            format!("p{g:04}"),
            values,
            helpful,
            total,
        );
        helpful_prob.push(p);
    }
    Ok(GlmmCorpus {
        table,
        helpful_prob,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_specs() {
        let bad = SynthSpec {
            separation: 0.0,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_mil_corpus(&bad), Err(Error::Config(_))));
        let bad = SynthSpec {
            min_sentences: 5,
            max_sentences: 3,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        assert!(SynthSpec::default().validate().is_ok());
    }

    #[test]
    fn mil_corpus_shape() {
        let spec = SynthSpec {
            n_products: 3,
            reviews_per_product: 4,
            ..SynthSpec::default()
        };
        let c = generate_mil_corpus(&spec).unwrap();
        assert_eq!(c.bags.len(), 12);
        assert_eq!(c.embeddings.len(), c.gold.len());
        let sentences: usize = c.reviews.iter().map(|r| r.sentences.len()).sum();
        assert_eq!(sentences, c.num_sentences());
        for (bag, review) in c.bags.iter().zip(&c.reviews) {
            let labels: Vec<u8> = bag.sentences.iter().map(|&i| c.gold[i]).collect();
            assert_eq!(bag.label, majority_label(&labels));
            assert!((2..=8).contains(&labels.len()));
            assert_eq!(crate::corpus::split_sentences(&review.text), review.sentences);
            assert!(review.helpful_votes <= review.total_votes && review.total_votes >= 1);
        }
        assert_eq!(generate_mil_corpus(&spec).unwrap(), c);
    }

    #[test]
    fn majority_ties_positive() {
        assert_eq!(majority_label(&[1, 0]), 1);
        assert_eq!(majority_label(&[0, 0, 1]), 0);
        assert_eq!(majority_label(&[1]), 1);
    }

    #[test]
    fn glmm_corpus_is_standardized() {
        let spec = SynthSpec {
            n_products: 10,
            reviews_per_product: 5,
            ..SynthSpec::default()
        };
        let c = generate_glmm_corpus(&spec).unwrap();
        assert_eq!(c.table.len(), 50);
        for r in Regressor::ALL {
            let col = c.table.column(r);
            let mean = col.iter().sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-12);
        }
        assert!(c.table.helpful.iter().zip(&c.table.total).all(|(h, t)| h <= t));
        assert_eq!(generate_glmm_corpus(&spec).unwrap(), c);
    }
}
