//! Synthetic concept-annotated datasets with controllable label
//! correlation.
//!
//! Generation, per sample:
//! 1. the diagnosis `y` is uniform over classes;
//! 2. a shared latent quantile `u ~ U(0,1)` is drawn; each concept, with
//!    probability `correlation`, reuses `u`, otherwise draws its own; its
//!    value is the inverse CDF of `tables[y][k]` at that quantile. Every
//!    concept's class-conditional marginal is exactly `tables[y][k]`, and
//!    at correlation 1 all concepts are driven by the single latent `u`;
//! 3. concept `k` owns patch slots `k, k+K, k+2K, ... (mod P)`; the fixed
//!    signature vector of its value is added to each owned slot;
//! 4. every patch entry gets independent `N(0, noise²)` noise.
//!
//! Randomness is counter-based: sample `i` uses its own stream, so each
//! sample is a pure function of `(seed, i)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Manifest, Sample, SplitSizes, FORMAT_NAME, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::schema::{ConceptDictionary, ConceptSpec, DEFAULT_TEMPLATES};
use crate::tensor::Tensor;

/// Above this many concept-value combinations the Bayes accuracy is
/// estimated by sampling instead of exact enumeration.
const EXACT_BAYES_LIMIT: usize = 200_000;
const BAYES_MC_SAMPLES: usize = 200_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Number of values of each concept.
    pub values_per_concept: Vec<usize>,
    /// `tables[y][k][m]`: probability of value `m` of concept `k` in class
    /// `y`. When absent, tables are derived from per-class codes with
    /// `purity` mass on each class's code value.
    pub tables: Option<Vec<Vec<Vec<f64>>>>,
    pub purity: f64,
    /// Probability that a concept reuses the shared latent quantile.
    pub correlation: f64,
    pub num_patches: usize,
    pub patch_dim: usize,
    pub noise: f64,
    /// Total sample count, split 70/15/15 unless `split` is given.
    pub samples: usize,
    pub split: Option<SplitSizes>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            values_per_concept: vec![2, 3, 2, 3, 2],
            tables: None,
            purity: 0.99,
            correlation: 0.6,
            num_patches: 16,
            patch_dim: 32,
            noise: 0.3,
            samples: 2800,
            split: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn num_concepts(&self) -> usize {
        self.values_per_concept.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.values_per_concept.is_empty() || self.values_per_concept.iter().any(|&m| m < 2) {
            return bad("every concept needs at least 2 values".into());
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return bad(format!("correlation must be in [0, 1], got {}", self.correlation));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.purity) {
            return bad(format!("purity must be in [0, 1], got {}", self.purity));
        }
        if self.num_patches == 0 || self.patch_dim == 0 {
            return bad("patch grid must be non-empty".into());
        }
        let sizes = self.split_sizes();
        if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
            return bad(format!("every split needs at least one sample, got {sizes:?}"));
        }
        if let Some(tables) = &self.tables {
            check_tables(tables, self.num_classes, &self.values_per_concept)?;
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> SplitSizes {
        self.split.unwrap_or_else(|| {
            let n = self.samples;
            let train = (n as f64 * 0.7).round() as usize;
            let val = (n as f64 * 0.15).round() as usize;
            SplitSizes {
                train,
                val,
                test: n.saturating_sub(train + val),
            }
        })
    }

    /// Explicit tables, or the code-based ones.
    pub fn resolved_tables(&self) -> Vec<Vec<Vec<f64>>> {
        match &self.tables {
            Some(t) => t.clone(),
            None => {
                let codes = class_codes(self.num_classes, &self.values_per_concept);
                codes
                    .iter()
                    .map(|code| {
                        code.iter()
                            .zip(&self.values_per_concept)
                            .map(|(&c, &m_k)| {
                                let rest = (1.0 - self.purity) / (m_k - 1) as f64;
                                (0..m_k).map(|m| if m == c { self.purity } else { rest }).collect()
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }

    pub fn dictionary(&self) -> ConceptDictionary {
        let concepts = self
            .values_per_concept
            .iter()
            .enumerate()
            .map(|(k, &m_k)| {
                let names: Vec<String> = (0..m_k).map(|m| format!("c{k} v{m}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                ConceptSpec::new(format!("c{k}"), &refs)
            })
            .collect();
        ConceptDictionary::new(concepts, DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect())
            .expect("generated dictionary is valid")
    }
}

fn check_tables(tables: &[Vec<Vec<f64>>], classes: usize, sizes: &[usize]) -> Result<()> {
    if tables.len() != classes {
        return Err(Error::Config(format!("tables cover {} classes, expected {classes}", tables.len())));
    }
    for (y, per_class) in tables.iter().enumerate() {
        if per_class.len() != sizes.len() {
            return Err(Error::Config(format!("class {y} table covers {} concepts, expected {}", per_class.len(), sizes.len())));
        }
        for (k, row) in per_class.iter().enumerate() {
            if row.len() != sizes[k] || row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::Config(format!("class {y} concept {k}: invalid distribution row {row:?}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("class {y} concept {k}: row sums to {s}, not 1")));
            }
        }
    }
    Ok(())
}

/// One value index per concept for each class, chosen greedily to maximize
/// the minimum Hamming distance to the codes already chosen (first
/// candidate in lexicographic order wins ties).
pub fn class_codes(classes: usize, sizes: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = sizes.iter().product();
    let candidates: Vec<Vec<usize>> = if total <= 4096 {
        (0..total).map(|i| mixed_radix(i, sizes)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..4096)
            .map(|_| sizes.iter().map(|&m| rng.random_range(0..m)).collect())
            .collect()
    };
    let mut chosen: Vec<Vec<usize>> = vec![candidates[0].clone()];
    while chosen.len() < classes {
        let mut best: Option<(usize, usize)> = None;
        for (i, c) in candidates.iter().enumerate() {
            let d = chosen
                .iter()
                .map(|o| o.iter().zip(c).filter(|(a, b)| a != b).count())
                .min()
                .expect("non-empty");
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        chosen.push(candidates[best.expect("candidates exist").0].clone());
    }
    chosen
}

fn mixed_radix(mut i: usize, sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0; sizes.len()];
    for k in (0..sizes.len()).rev() {
        out[k] = i % sizes[k];
        i /= sizes[k];
    }
    out
}

fn inverse_cdf(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (m, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return m;
        }
    }
    // Rounding can leave the cumulative sum a hair below 1.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Independent generator derived from the seed and a label.
fn derived_rng(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// The fixed signature vector rendered for value `m` of concept `k`.
pub fn signature(seed: u64, k: usize, m: usize, dim: usize) -> Vec<f64> {
    let mut rng = derived_rng(seed, "signature", k as u64, m as u64);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Patch slots owned by concept `k`.
pub fn concept_slots(k: usize, num_concepts: usize, num_patches: usize) -> Vec<usize> {
    if num_concepts > num_patches {
        return vec![k % num_patches];
    }
    (k..num_patches).step_by(num_concepts).collect()
}

/// Draws the labels of sample `index`.
pub fn sample_labels(spec: &SyntheticSpec, tables: &[Vec<Vec<f64>>], index: u64) -> (usize, Vec<usize>) {
    let mut rng = derived_rng(spec.seed, "labels", index, 0);
    let y = rng.random_range(0..spec.num_classes);
    let shared: f64 = rng.random();
    let concepts = (0..spec.num_concepts())
        .map(|k| {
            let reuse = rng.random::<f64>() < spec.correlation;
            let own: f64 = rng.random();
            inverse_cdf(&tables[y][k], if reuse { shared } else { own })
        })
        .collect();
    (y, concepts)
}

/// Renders the patch grid of sample `index` with the given labels.
pub fn render(spec: &SyntheticSpec, signatures: &[Vec<Vec<f64>>], concepts: &[usize], index: u64) -> Tensor {
    let (p, d) = (spec.num_patches, spec.patch_dim);
    let mut data = vec![0.0; p * d];
    for (k, &a) in concepts.iter().enumerate() {
        for slot in concept_slots(k, spec.num_concepts(), p) {
            for (x, s) in data[slot * d..(slot + 1) * d].iter_mut().zip(&signatures[k][a]) {
                *x += s;
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("valid noise");
        let mut rng = derived_rng(spec.seed, "noise", index, 0);
        for x in &mut data {
            *x += normal.sample(&mut rng);
        }
    }
    Tensor::matrix(p, d, data).expect("grid shape")
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let tables = spec.resolved_tables();
    let signatures: Vec<Vec<Vec<f64>>> = spec
        .values_per_concept
        .iter()
        .enumerate()
        .map(|(k, &m_k)| (0..m_k).map(|m| signature(spec.seed, k, m, spec.patch_dim)).collect())
        .collect();
    let sizes = spec.split_sizes();
    let n = sizes.total();
    let samples: Vec<Sample> = (0..n as u64)
        .map(|i| {
            let (label, concepts) = sample_labels(spec, &tables, i);
            let patches = render(spec, &signatures, &concepts, i);
            Sample {
                id: i,
                label,
                concepts,
                patches,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(spec.seed, "split", 0, 0));
    let take = |range: std::ops::Range<usize>| {
        let mut idx: Vec<usize> = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| samples[i].clone()).collect::<Vec<Sample>>()
    };
    let train = take(0..sizes.train);
    let val = take(sizes.train..sizes.train + sizes.val);
    let test = take(sizes.train + sizes.val..n);

    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        schema: spec.dictionary(),
        class_names: (0..spec.num_classes).map(|y| format!("class{y}")).collect(),
        num_patches: spec.num_patches,
        patch_dim: spec.patch_dim,
        splits: sizes,
        bayes_accuracy: Some(bayes_accuracy(spec, &tables)),
        generator: Some(spec.clone()),
    };
    Ok(Dataset {
        manifest,
        train,
        val,
        test,
    })
}

/// Accuracy of the optimal diagnosis rule that sees the true concept
/// values. Exact: `P(a | y)` integrates the product of per-concept
/// mixtures over the shared quantile, which is piecewise constant between
/// the class's cumulative-probability breakpoints.
pub fn bayes_accuracy(spec: &SyntheticSpec, tables: &[Vec<Vec<f64>>]) -> f64 {
    let sizes = &spec.values_per_concept;
    let total: usize = sizes.iter().product();
    let rho = spec.correlation;
    if total > EXACT_BAYES_LIMIT {
        return bayes_monte_carlo(spec, tables);
    }
    // Per class: intervals of the shared quantile with the value each
    // concept takes there.
    let pieces: Vec<Vec<(f64, Vec<usize>)>> = tables
        .iter()
        .map(|per_class| {
            let mut cuts = vec![0.0, 1.0];
            for row in per_class {
                let mut acc = 0.0;
                for p in row {
                    acc += p;
                    if acc > 0.0 && acc < 1.0 {
                        cuts.push(acc);
                    }
                }
            }
            cuts.sort_by(f64::total_cmp);
            cuts.dedup();
            cuts.windows(2)
                .filter(|w| w[1] > w[0])
                .map(|w| {
                    let mid = 0.5 * (w[0] + w[1]);
                    (w[1] - w[0], per_class.iter().map(|row| inverse_cdf(row, mid)).collect())
                })
                .collect()
        })
        .collect();
    let prior = 1.0 / spec.num_classes as f64;
    let mut acc = 0.0;
    for i in 0..total {
        let a = mixed_radix(i, sizes);
        let mut best: f64 = 0.0;
        for (y, per_class) in tables.iter().enumerate() {
            let mut lik = 0.0;
            for (len, vals) in &pieces[y] {
                let mut prod = 1.0;
                for k in 0..a.len() {
                    let copied = if vals[k] == a[k] { rho } else { 0.0 };
                    prod *= copied + (1.0 - rho) * per_class[k][a[k]];
                }
                lik += len * prod;
            }
            best = best.max(prior * lik);
        }
        acc += best;
    }
    acc
}

fn bayes_monte_carlo(spec: &SyntheticSpec, tables: &[Vec<Vec<f64>>]) -> f64 {
    // Plug-in estimate: the most frequent class per observed combination.
    let mut counts: std::collections::HashMap<Vec<usize>, Vec<usize>> = std::collections::HashMap::new();
    let mc = SyntheticSpec {
        seed: spec.seed ^ 0x9e37_79b9_7f4a_7c15,
        ..spec.clone()
    };
    for i in 0..BAYES_MC_SAMPLES as u64 {
        let (y, a) = sample_labels(&mc, tables, i);
        counts.entry(a).or_insert_with(|| vec![0; spec.num_classes])[y] += 1;
    }
    let hits: usize = counts.values().map(|c| *c.iter().max().expect("classes")).sum();
    hits as f64 / BAYES_MC_SAMPLES as f64
}
