//! Deterministic prefix-safe observation extraction.
//!
//! Every extractor here is a pure function of the prefix and pre-fit
//! artifacts: marker coding over generated text, cluster assignment of prefix
//! hidden vectors, pooled-feature probe probabilities, latent-trajectory
//! scalars, and score orientation. Fitted artifacts (lexicons aside, which
//! are fixed up front) carry a fit-partition provenance tag and are refused
//! when tagged with the test partition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PrefixView;
use crate::logistic::{self, LogisticError, TrainConfig};
use crate::metrics;
use crate::provenance::Provenance;

#[derive(Debug, Error)]
pub enum ObserverError {
    #[error("marker family `{0}` has no triggers")]
    EmptyTriggers(String),
    #[error("duplicate marker code `{0}`")]
    DuplicateCode(String),
    #[error("trigger `{trigger}` in family `{family}` is not lowercase")]
    NonLowercaseTrigger { family: String, trigger: String },
    #[error("need at least {k} distinct vectors to fit {k} clusters, found {distinct}")]
    TooFewVectors { k: usize, distinct: usize },
    #[error("cluster count must be at least 2, got {0}")]
    BadClusterCount(usize),
    #[error("vector has dimension {found}, artifact expects {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("empty vector sequence")]
    EmptySequence,
    #[error("alignment direction has zero norm")]
    ZeroNormDirection,
    #[error("single-class input")]
    SingleClass,
    #[error("no event in the prefix carries vector `{0}`")]
    MissingVector(String),
    #[error(transparent)]
    Logistic(#[from] LogisticError),
}

/// One marker family: ordered position in the lexicon is its precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerFamily {
    pub name: String,
    pub triggers: Vec<String>,
    pub code: String,
}

/// Ordered trigger-substring lexicon. Coding lowercases the continuation and
/// emits the code of the first family with any matching substring; family
/// order is part of the lexicon and serialized with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerLexicon {
    pub families: Vec<MarkerFamily>,
    pub fallback_code: String,
}

impl MarkerLexicon {
    pub fn new(families: Vec<MarkerFamily>, fallback_code: impl Into<String>) -> Result<Self, ObserverError> {
        let fallback_code = fallback_code.into();
        let mut codes = std::collections::BTreeSet::new();
        for family in &families {
            if family.triggers.is_empty() {
                return Err(ObserverError::EmptyTriggers(family.name.clone()));
            }
            for trigger in &family.triggers {
                if *trigger != trigger.to_lowercase() {
                    return Err(ObserverError::NonLowercaseTrigger {
                        family: family.name.clone(),
                        trigger: trigger.clone(),
                    });
                }
            }
            if !codes.insert(family.code.clone()) {
                return Err(ObserverError::DuplicateCode(family.code.clone()));
            }
        }
        if !codes.insert(fallback_code.clone()) {
            return Err(ObserverError::DuplicateCode(fallback_code));
        }
        Ok(MarkerLexicon {
            families,
            fallback_code,
        })
    }

    fn family(name: &str, triggers: &[&str], code: &str) -> MarkerFamily {
        MarkerFamily {
            name: name.to_string(),
            triggers: triggers.iter().map(|t| t.to_string()).collect(),
            code: code.to_string(),
        }
    }

    /// Self-verification lexicon. Precedence: correction, then verification,
    /// uncertainty, alternative reasoning, answer commitment; corrections are
    /// the rarest signal, so they win ties.
    pub fn self_verification() -> Self {
        MarkerLexicon::new(
            vec![
                Self::family(
                    "correction",
                    &["wait", "actually", "mistake", "wrong", "fix", "reconsider"],
                    "sv_correction",
                ),
                Self::family(
                    "verification",
                    &["check", "double-check", "verify", "confirm", "make sure", "sanity check"],
                    "sv_verification",
                ),
                Self::family(
                    "uncertainty",
                    &["maybe", "perhaps", "not sure", "unclear", "might be", "could be"],
                    "sv_uncertainty",
                ),
                Self::family(
                    "alternative",
                    &["alternatively", "another way", "different approach", "try another"],
                    "sv_alternative",
                ),
                Self::family(
                    "commitment",
                    &["final answer", "answer is", "boxed"],
                    "sv_commit",
                ),
            ],
            "sv_none",
        )
        .expect("built-in lexicon is valid")
    }

    /// Reasoning-stage lexicon over the generated continuation. Same
    /// precedence principle; stage markers come after the self-referential
    /// families.
    pub fn text_stages() -> Self {
        MarkerLexicon::new(
            vec![
                Self::family(
                    "correction",
                    &["wait", "actually", "mistake", "wrong", "fix", "reconsider"],
                    "correction",
                ),
                Self::family(
                    "verification",
                    &["check", "double-check", "verify", "confirm", "make sure", "sanity check"],
                    "verification",
                ),
                Self::family(
                    "exploration",
                    &["alternatively", "another way", "different approach", "try another", "alternative approach"],
                    "exploration",
                ),
                Self::family(
                    "conclusion",
                    &["final answer", "answer is", "boxed", "conclusion"],
                    "conclusion",
                ),
                Self::family("calculation", &["calculate", "compute"], "calculation"),
                Self::family("setup", &["setup"], "setup"),
            ],
            "other",
        )
        .expect("built-in lexicon is valid")
    }

    /// All codes this lexicon can emit, fallback included, in precedence
    /// order. This is the concept alphabet downstream calibration uses.
    pub fn alphabet(&self) -> Vec<String> {
        let mut codes: Vec<String> = self.families.iter().map(|f| f.code.clone()).collect();
        codes.push(self.fallback_code.clone());
        codes
    }

    /// Code the model-generated continuation. Total function: lowercased
    /// substring match, first firing family wins, fallback otherwise.
    pub fn code(&self, text: &str) -> &str {
        let lowered = text.to_lowercase();
        for family in &self.families {
            if family.triggers.iter().any(|t| lowered.contains(t.as_str())) {
                return &family.code;
            }
        }
        &self.fallback_code
    }
}

/// Marker coding as a free function, for symmetry with the other extractors.
pub fn code_markers<'a>(text: &str, lexicon: &'a MarkerLexicon) -> &'a str {
    lexicon.code(text)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Train-split centroid codebook for hidden-cluster observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCodebook {
    /// Which named vector field this codebook consumes.
    pub feature_name: String,
    pub centroids: Vec<Vec<f64>>,
    pub k: usize,
    pub fit_seed: u64,
    pub provenance: Provenance,
}

impl ClusterCodebook {
    pub fn dimension(&self) -> usize {
        self.centroids[0].len()
    }

    /// Concept code for a cluster index.
    pub fn code_of(&self, index: usize) -> String {
        format!("c{index}")
    }

    /// Concept alphabet: one code per centroid.
    pub fn alphabet(&self) -> Vec<String> {
        (0..self.k).map(|i| self.code_of(i)).collect()
    }
}

/// Seeded Lloyd refinement with squared-Euclidean assignment. Initial
/// centroids are k distinct input vectors sampled by the seed; iteration
/// stops when assignments are stable or after 100 rounds.
pub fn fit_clusters(
    train_vectors: &[Vec<f64>],
    k: usize,
    seed: u64,
    feature_name: impl Into<String>,
) -> Result<ClusterCodebook, ObserverError> {
    if k < 2 {
        return Err(ObserverError::BadClusterCount(k));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for v in train_vectors {
        if !distinct.contains(&v) {
            distinct.push(v);
        }
    }
    if distinct.len() < k {
        return Err(ObserverError::TooFewVectors {
            k,
            distinct: distinct.len(),
        });
    }
    let dim = train_vectors[0].len();
    for v in train_vectors {
        if v.len() != dim {
            return Err(ObserverError::DimensionMismatch {
                found: v.len(),
                expected: dim,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..distinct.len()).collect();
    pool.shuffle(&mut rng);
    let mut centroids: Vec<Vec<f64>> = pool[..k].iter().map(|&i| distinct[i].clone()).collect();

    let mut assignment = vec![usize::MAX; train_vectors.len()];
    for _round in 0..100 {
        let mut changed = false;
        for (i, v) in train_vectors.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = squared_distance(v, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = squared_distance(v, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, v) in train_vectors.iter().enumerate() {
            let a = assignment[i];
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        for (j, sum) in sums.into_iter().enumerate() {
            if counts[j] > 0 {
                centroids[j] = sum.into_iter().map(|s| s / counts[j] as f64).collect();
            }
            // An emptied cluster keeps its previous centroid.
        }
    }

    Ok(ClusterCodebook {
        feature_name: feature_name.into(),
        centroids,
        k,
        fit_seed: seed,
        provenance: Provenance::train().with_seed(seed),
    })
}

/// Nearest centroid by squared Euclidean distance; ties break toward the
/// lowest centroid index.
pub fn assign_cluster(vector: &[f64], codebook: &ClusterCodebook) -> Result<usize, ObserverError> {
    if vector.len() != codebook.dimension() {
        return Err(ObserverError::DimensionMismatch {
            found: vector.len(),
            expected: codebook.dimension(),
        });
    }
    let mut best = 0usize;
    let mut best_d = squared_distance(vector, &codebook.centroids[0]);
    for (j, c) in codebook.centroids.iter().enumerate().skip(1) {
        let d = squared_distance(vector, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    Ok(best)
}

/// How pooled probe features are built from the prefix's vector sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PoolScope {
    /// The latest prefix vector.
    LastToken,
    /// Elementwise mean over the prefix.
    MeanPool,
    /// Elementwise max over the prefix.
    MaxPool,
    /// Mean over events selected by an explicit span mask carried in the
    /// input file as a one-dimensional named vector. An empty scope pools to
    /// the zero vector, so the probe emits its bias-only probability.
    Scoped { mask_name: String },
}

/// L2-regularized logistic probe over pooled prefix features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub pool_scope: PoolScope,
    pub regularization: f64,
    /// Named vector field the probe pools over.
    pub feature_name: String,
    pub provenance: Provenance,
}

/// Clamp applied to probe probabilities before any log-likelihood use.
pub const PROBABILITY_CLAMP: f64 = 1e-6;

impl ProbeModel {
    pub fn probability(&self, pooled: &[f64]) -> Result<f64, ObserverError> {
        if pooled.len() != self.weights.len() {
            return Err(ObserverError::DimensionMismatch {
                found: pooled.len(),
                expected: self.weights.len(),
            });
        }
        let mut z = self.bias;
        for (w, x) in self.weights.iter().zip(pooled) {
            z += w * x;
        }
        Ok(logistic::sigmoid(z).clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP))
    }

    /// Pool the view's vectors and score them.
    pub fn score(&self, view: &PrefixView<'_>) -> Result<f64, ObserverError> {
        let pooled = pooled_features(view, &self.feature_name, &self.pool_scope)?;
        self.probability(&pooled)
    }
}

/// Pooled feature vector for a prefix, per the declared scope.
pub fn pooled_features(
    view: &PrefixView<'_>,
    feature_name: &str,
    scope: &PoolScope,
) -> Result<Vec<f64>, ObserverError> {
    let present: Vec<&Vec<f64>> = view
        .events()
        .iter()
        .filter_map(|e| e.vectors.get(feature_name))
        .collect();
    if present.is_empty() {
        return Err(ObserverError::MissingVector(feature_name.to_string()));
    }
    let dim = present[0].len();
    match scope {
        PoolScope::LastToken => Ok(present.last().unwrap().to_vec()),
        PoolScope::MeanPool => {
            let mut out = vec![0.0; dim];
            for v in &present {
                for (o, x) in out.iter_mut().zip(v.iter()) {
                    *o += x;
                }
            }
            for o in &mut out {
                *o /= present.len() as f64;
            }
            Ok(out)
        }
        PoolScope::MaxPool => {
            let mut out = vec![f64::NEG_INFINITY; dim];
            for v in &present {
                for (o, x) in out.iter_mut().zip(v.iter()) {
                    *o = o.max(*x);
                }
            }
            Ok(out)
        }
        PoolScope::Scoped { mask_name } => {
            let mut out = vec![0.0; dim];
            let mut count = 0usize;
            for event in view.events() {
                let Some(v) = event.vectors.get(feature_name) else {
                    continue;
                };
                let in_scope = event
                    .vectors
                    .get(mask_name)
                    .map(|m| m.first().copied().unwrap_or(0.0) >= 0.5)
                    .unwrap_or(false);
                if in_scope {
                    for (o, x) in out.iter_mut().zip(v.iter()) {
                        *o += x;
                    }
                    count += 1;
                }
            }
            if count > 0 {
                for o in &mut out {
                    *o /= count as f64;
                }
            }
            Ok(out)
        }
    }
}

/// Fit a probe on (pooled feature, label) pairs from train questions.
pub fn fit_probe(
    train_features: &[(Vec<f64>, u8)],
    regularization: f64,
    pool_scope: PoolScope,
    feature_name: impl Into<String>,
) -> Result<ProbeModel, ObserverError> {
    let features: Vec<Vec<f64>> = train_features.iter().map(|(f, _)| f.clone()).collect();
    let labels: Vec<u8> = train_features.iter().map(|(_, y)| *y).collect();
    let fit = logistic::train(&features, &labels, &TrainConfig::with_l2(regularization))?;
    Ok(ProbeModel {
        weights: fit.weights,
        bias: fit.bias,
        pool_scope,
        regularization,
        feature_name: feature_name.into(),
        provenance: Provenance::train(),
    })
}

/// Latent-trajectory scalar over the prefix's vector sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TrajectoryMetric {
    /// Euclidean distance from the first to the current vector.
    NetChange,
    /// Sum of consecutive Euclidean step lengths.
    CumulativeChange,
    /// Displacement projected on a train-fitted unit direction.
    AlignedChange { direction: AlignmentDirection },
}

/// Unit direction fitted as the normalized train-mean final displacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDirection {
    pub direction: Vec<f64>,
    pub feature_name: String,
    pub provenance: Provenance,
}

/// Fit the aligned-change direction: mean of (v_T - v_1) over train
/// trajectories, normalized to unit length.
pub fn fit_alignment(
    train_trajectories: &[Vec<Vec<f64>>],
    feature_name: impl Into<String>,
) -> Result<AlignmentDirection, ObserverError> {
    let mut mean: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for traj in train_trajectories {
        if traj.is_empty() {
            continue;
        }
        let first = &traj[0];
        let last = traj.last().unwrap();
        let acc = mean.get_or_insert_with(|| vec![0.0; first.len()]);
        if acc.len() != first.len() {
            return Err(ObserverError::DimensionMismatch {
                found: first.len(),
                expected: acc.len(),
            });
        }
        for ((a, l), f) in acc.iter_mut().zip(last).zip(first) {
            *a += l - f;
        }
        count += 1;
    }
    let mut direction = mean.ok_or(ObserverError::EmptySequence)?;
    for d in &mut direction {
        *d /= count as f64;
    }
    let norm: f64 = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return Err(ObserverError::ZeroNormDirection);
    }
    for d in &mut direction {
        *d /= norm;
    }
    Ok(AlignmentDirection {
        direction,
        feature_name: feature_name.into(),
        provenance: Provenance::train(),
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Trajectory scalar for vectors v_1..v_t.
pub fn trajectory_score(vectors: &[Vec<f64>], metric: &TrajectoryMetric) -> Result<f64, ObserverError> {
    if vectors.is_empty() {
        return Err(ObserverError::EmptySequence);
    }
    let dim = vectors[0].len();
    for v in vectors {
        if v.len() != dim {
            return Err(ObserverError::DimensionMismatch {
                found: v.len(),
                expected: dim,
            });
        }
    }
    let first = &vectors[0];
    let last = vectors.last().unwrap();
    match metric {
        TrajectoryMetric::NetChange => Ok(euclidean(last, first)),
        TrajectoryMetric::CumulativeChange => Ok(vectors
            .windows(2)
            .map(|w| euclidean(&w[1], &w[0]))
            .sum()),
        TrajectoryMetric::AlignedChange { direction } => {
            if direction.direction.len() != dim {
                return Err(ObserverError::DimensionMismatch {
                    found: dim,
                    expected: direction.direction.len(),
                });
            }
            Ok(last
                .iter()
                .zip(first)
                .zip(&direction.direction)
                .map(|((l, f), u)| (l - f) * u)
                .sum())
        }
    }
}

/// Sign chosen on fitting data so that sign * score ranks positives higher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOrientation {
    /// +1.0 or -1.0.
    pub sign: f64,
    pub source_name: String,
    pub provenance: Provenance,
}

impl ScoreOrientation {
    pub fn apply(&self, score: f64) -> f64 {
        self.sign * score
    }
}

/// Orientation from (raw score, label) pairs: +1 when AUROC >= 0.5, else -1.
pub fn orient_score(
    pairs: &[(f64, u8)],
    source_name: impl Into<String>,
    provenance: Provenance,
) -> Result<ScoreOrientation, ObserverError> {
    let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
    let labels: Vec<u8> = pairs.iter().map(|(_, y)| *y).collect();
    let auroc = metrics::auroc_ranked(&scores, &labels).ok_or(ObserverError::SingleClass)?;
    Ok(ScoreOrientation {
        sign: if auroc >= 0.5 { 1.0 } else { -1.0 },
        source_name: source_name.into(),
        provenance,
    })
}
