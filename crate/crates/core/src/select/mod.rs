//! Model-guided knowledge selection: per-sample prediction error from a
//! two-snapshot ensemble, sigmoid importance weights and the resulting
//! per-class batch sampler.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;

use crate::cli_io::Dataset;
use crate::model::ModelSnapshot;
use crate::rng::Rng;
use crate::{Error, Result};

/// Draws class-conditional batches of local indices.
pub trait ClassSampler: Sync {
    /// `n` draws with replacement among the local indices of `class`.
    fn sample(&self, class: usize, n: usize, rng: &mut Rng) -> Vec<usize>;
}

/// Uniform draws within each class.
#[derive(Debug, Clone)]
pub struct UniformSampler {
    by_class: Vec<Vec<usize>>,
}

impl UniformSampler {
    pub fn new(data: &Dataset) -> Self {
        Self { by_class: data.indices_by_class() }
    }
}

impl ClassSampler for UniformSampler {
    fn sample(&self, class: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
        let pool = &self.by_class[class];
        assert!(!pool.is_empty(), "sampling from empty class {class}");
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Cross-entropy of the blend `alpha * p_cur + (1 - alpha) * p_prev` against `y`.
/// Without a previous row the current row is used alone.
pub fn refined_error(p_cur: &[f64], p_prev: Option<&[f64]>, alpha: f64, y: usize) -> f64 {
    let p = match p_prev {
        Some(prev) => alpha * p_cur[y] + (1.0 - alpha) * prev[y],
        None => p_cur[y],
    };
    -p.max(f64::MIN_POSITIVE).ln()
}

/// `1 / (1 + exp(-err + b))`.
pub fn importance_weight(err: f64, b: f64) -> f64 {
    1.0 / (1.0 + (b - err).exp())
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Normalization scope for importance probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    PerClass,
    /// Probabilities normalized over the whole local set. Class batches are
    /// still drawn from the class-conditional distribution.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectConfig {
    pub alpha: f64,
    /// `None` selects the median refined error of the round.
    pub b: Option<f64>,
    pub normalization: Normalization,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self { alpha: 0.7, b: None, normalization: Normalization::PerClass }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub errors: Vec<f64>,
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub b: f64,
    pub alpha: f64,
    pub normalization: Normalization,
}

impl ImportanceTable {
    pub fn from_errors(
        errors: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
        alpha: f64,
        b: Option<f64>,
        normalization: Normalization,
    ) -> Self {
        assert_eq!(errors.len(), labels.len());
        let b = b.unwrap_or_else(|| median(&errors));
        let weights: Vec<f64> = errors.iter().map(|&e| importance_weight(e, b)).collect();
        let mut probs = vec![0.0; weights.len()];
        match normalization {
            Normalization::PerClass => {
                let mut mass = vec![0.0; classes];
                for (w, &l) in weights.iter().zip(&labels) {
                    mass[l] += w;
                }
                for ((p, w), &l) in probs.iter_mut().zip(&weights).zip(&labels) {
                    *p = w / mass[l];
                }
            }
            Normalization::Global => {
                let total: f64 = weights.iter().sum();
                for (p, w) in probs.iter_mut().zip(&weights) {
                    *p = w / total;
                }
            }
        }
        Self { errors, weights, probs, labels, classes, b, alpha, normalization }
    }

    /// Refined errors of every local sample under the current snapshot and,
    /// when given, the previous one.
    pub fn build(
        current: &ModelSnapshot,
        previous: Option<&ModelSnapshot>,
        data: &Dataset,
        cfg: &SelectConfig,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", cfg.alpha)));
        }
        let x = data.to_tensor();
        let p_cur = current.predict_proba(&x)?;
        let p_prev = previous.map(|m| m.predict_proba(&x)).transpose()?;
        let labels = data.labels();
        let errors = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| refined_error(p_cur.row(i), p_prev.as_ref().map(|p| p.row(i)), cfg.alpha, y))
            .collect();
        Ok(Self::from_errors(errors, labels, data.classes, cfg.alpha, cfg.b, cfg.normalization))
    }

    /// `index,label,error,weight,probability` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,label,error,weight,probability\n");
        for i in 0..self.errors.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                i, self.labels[i], self.errors[i], self.weights[i], self.probs[i]
            ));
        }
        s
    }
}

/// Discrete distribution over one class's local indices.
#[derive(Debug, Clone)]
pub struct DiscreteSampler {
    indices: Vec<usize>,
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl DiscreteSampler {
    pub fn new(indices: Vec<usize>, weights: &[f64]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Protocol("sampler over an empty class".into()));
        }
        let total: f64 = weights.iter().sum();
        let probs = weights.iter().map(|w| w / total).collect();
        let dist = WeightedIndex::new(weights).map_err(|e| Error::Protocol(format!("sampler weights: {e}")))?;
        Ok(Self { indices, probs, dist })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

/// Within-class importance distribution `w_i / sum_j w_j`.
pub fn build_sampler(table: &ImportanceTable, class: usize) -> Result<DiscreteSampler> {
    let idx: Vec<usize> = (0..table.labels.len()).filter(|&i| table.labels[i] == class).collect();
    let w: Vec<f64> = idx.iter().map(|&i| table.weights[i]).collect();
    DiscreteSampler::new(idx, &w)
}

/// `n` i.i.d. draws (with replacement).
pub fn sample_batch(sampler: &DiscreteSampler, n: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| sampler.indices[sampler.dist.sample(rng)]).collect()
}

/// Importance sampling for every class present in the table.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    per_class: Vec<Option<DiscreteSampler>>,
}

impl WeightedSampler {
    pub fn new(table: &ImportanceTable) -> Result<Self> {
        let mut per_class = Vec::with_capacity(table.classes);
        for c in 0..table.classes {
            per_class.push(if table.labels.contains(&c) { Some(build_sampler(table, c)?) } else { None });
        }
        Ok(Self { per_class })
    }

    pub fn class(&self, c: usize) -> Option<&DiscreteSampler> {
        self.per_class.get(c).and_then(|s| s.as_ref())
    }
}

impl ClassSampler for WeightedSampler {
    fn sample(&self, class: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
        let s = self.per_class[class].as_ref().expect("sampling from absent class");
        sample_batch(s, n, rng)
    }
}
