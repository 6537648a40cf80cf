//! Synthetic two-state-chain corpora with known ground truth.
//!
//! The generator samples latent reliability paths from a two-state chain and
//! per-state score/concept emissions, then labels traces by the final state
//! (or a noisy readout of it). Because the generating model is known, the
//! filter run with the true model is the Bayes posterior, which turns
//! calibration claims into exact oracle tests. Separation knobs move the
//! score and concept channels independently so rank and probability-quality
//! regimes can be constructed on demand.
//!
//! Ground-truth latent paths go to a sidecar, never into the corpus file:
//! evaluation paths have no API that accepts [`GroundTruth`].

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    BinningKind, BinningSpec, ConceptLikelihood, EmissionMode, EmissionModel, FitMode, JointLikelihood,
    Orientation, Readout, ScoreLikelihood, StateTable, Transitions,
};
use crate::corpus::{CorpusError, ObservationEvent, TraceRecord};
use crate::metrics::derive_seed;
use crate::provenance::Provenance;
use crate::tracker::ReliabilityState;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Trace-length model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LengthModel {
    Fixed { t: usize },
    Uniform { min: usize, max: usize },
}

/// How final labels relate to the latent path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LabelRule {
    /// y = 1 iff the final latent state is H. Under this rule the identity
    /// readout of the true-model filter is the exact target probability.
    FinalStateIndicator,
    /// y drawn with probability rho[z_T].
    Readout { rho_low: f64, rho_high: f64 },
}

/// Generating-model parameters plus evidence-regime knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    /// Generating initial probability of the high state.
    pub initial_high_prob: f64,
    pub p_error: f64,
    pub p_recover: f64,
    /// Score sample space: bin count over [0, 1).
    pub score_bins: usize,
    /// Channel separation in [0, 1): 0 means the score distribution is
    /// identical across states.
    pub score_separation: f64,
    /// Concept alphabet size.
    pub concept_codes: usize,
    pub concept_separation: f64,
    pub emit_scores: bool,
    pub emit_concepts: bool,
    pub length: LengthModel,
    pub label_rule: LabelRule,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        RegimeConfig {
            initial_high_prob: 0.5,
            p_error: 0.05,
            p_recover: 0.05,
            score_bins: 8,
            score_separation: 0.5,
            concept_codes: 4,
            concept_separation: 0.0,
            emit_scores: true,
            emit_concepts: false,
            length: LengthModel::Uniform { min: 6, max: 14 },
            label_rule: LabelRule::FinalStateIndicator,
        }
    }
}

/// Linear tilt over the index range: the high state leans toward high
/// indices by `separation`, the low state mirrors it.
fn tilted(n: usize, separation: f64, high_state: bool) -> Vec<f64> {
    let sign = if high_state { 1.0 } else { -1.0 };
    let mut weights = Vec::with_capacity(n);
    for k in 0..n {
        let x = if n == 1 {
            0.0
        } else {
            (2.0 * k as f64 - (n as f64 - 1.0)) / (n as f64 - 1.0)
        };
        weights.push(1.0 + sign * separation * x);
    }
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

impl RegimeConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: &str| Err(SynthError::InvalidConfig(msg.to_string()));
        if !(0.0..=1.0).contains(&self.initial_high_prob) {
            return bad("initial_high_prob outside [0, 1]");
        }
        for p in [self.p_error, self.p_recover] {
            if !(0.0..=1.0).contains(&p) {
                return bad("transition probability outside [0, 1]");
            }
        }
        if !(0.0..1.0).contains(&self.score_separation)
            || !(0.0..1.0).contains(&self.concept_separation)
        {
            return bad("separation must lie in [0, 1)");
        }
        if self.emit_scores && self.score_bins == 0 {
            return bad("score_bins must be positive when scores are emitted");
        }
        if self.emit_concepts && self.concept_codes == 0 {
            return bad("concept_codes must be positive when concepts are emitted");
        }
        if !self.emit_scores && !self.emit_concepts {
            return bad("at least one channel must be emitted");
        }
        match self.length {
            LengthModel::Fixed { t } if t < 1 => return bad("length must be at least 1"),
            LengthModel::Uniform { min, max } if min < 1 || max < min => {
                return bad("uniform length needs 1 <= min <= max")
            }
            _ => {}
        }
        if let LabelRule::Readout { rho_low, rho_high } = self.label_rule {
            if !(0.0..=1.0).contains(&rho_low) || !(0.0..=1.0).contains(&rho_high) {
                return bad("readout probabilities outside [0, 1]");
            }
        }
        Ok(())
    }

    pub fn score_distribution(&self, state: ReliabilityState) -> Vec<f64> {
        tilted(
            self.score_bins,
            self.score_separation,
            state == ReliabilityState::High,
        )
    }

    pub fn concept_distribution(&self, state: ReliabilityState) -> Vec<f64> {
        tilted(
            self.concept_codes,
            self.concept_separation,
            state == ReliabilityState::High,
        )
    }

    pub fn concept_alphabet(&self) -> Vec<String> {
        (0..self.concept_codes).map(|i| format!("c{i}")).collect()
    }

    /// The generating model as an emission model: scores land uniformly
    /// inside their bin, so each bin's mass equals the sampling probability
    /// exactly and the filter is the Bayes posterior of the latent state.
    pub fn true_model(&self) -> EmissionModel {
        let mode = match (self.emit_scores, self.emit_concepts) {
            (true, true) => EmissionMode::Hybrid,
            (true, false) => EmissionMode::ScoreOnly,
            (false, true) => EmissionMode::ConceptOnly,
            (false, false) => unreachable!("validated"),
        };
        let score = self.emit_scores.then(|| ScoreLikelihood {
            binning: BinningSpec {
                kind: BinningKind::Histogram,
                requested_bins: self.score_bins,
                edges: (0..=self.score_bins)
                    .map(|i| i as f64 / self.score_bins as f64)
                    .collect(),
            },
            table: StateTable {
                low: self.score_distribution(ReliabilityState::Low),
                high: self.score_distribution(ReliabilityState::High),
            },
        });
        let concept = self.emit_concepts.then(|| ConceptLikelihood {
            alphabet: self.concept_alphabet(),
            table: StateTable {
                low: self.concept_distribution(ReliabilityState::Low),
                high: self.concept_distribution(ReliabilityState::High),
            },
        });
        EmissionModel {
            mode,
            score,
            concept,
            joint: None,
            transitions: Transitions::Stationary {
                p_error: self.p_error,
                p_recover: self.p_recover,
            },
            initial_belief: [1.0 - self.initial_high_prob, self.initial_high_prob],
            smoothing: 1.0,
            orientation: Orientation::Identity,
            readout: Readout::Identity,
            fit_mode: FitMode::Constructed,
            provenance: Provenance::train(),
        }
    }

    /// Joint-table variant of the true model (channels are independent given
    /// the state, so the joint factorizes exactly).
    pub fn true_model_joint(&self) -> EmissionModel {
        let mut model = self.true_model();
        if let (Some(score), Some(concept)) = (&model.score, &model.concept) {
            let n_codes = concept.alphabet.len();
            let mut low = Vec::with_capacity(score.table.low.len() * n_codes);
            let mut high = Vec::with_capacity(low.capacity());
            for k in 0..score.table.low.len() {
                for c in 0..n_codes {
                    low.push(score.table.low[k] * concept.table.low[c]);
                    high.push(score.table.high[k] * concept.table.high[c]);
                }
            }
            model.joint = Some(JointLikelihood {
                binning: score.binning.clone(),
                alphabet: concept.alphabet.clone(),
                table: StateTable { low, high },
            });
            model.mode = EmissionMode::Joint;
            model.score = None;
            model.concept = None;
        }
        model
    }
}

/// Marker value written into every sidecar line.
pub const ORACLE_TAINT: &str = "oracle-only";

fn default_taint() -> String {
    ORACLE_TAINT.to_string()
}

/// Latent path for one generated trace. Oracle-only: evaluation paths have
/// no API that consumes this type, and the serialized form carries an
/// explicit taint field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub trace_id: String,
    pub states: Vec<ReliabilityState>,
    #[serde(default = "default_taint")]
    pub taint: String,
}

/// A generated corpus plus its sidecar ground truth.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub records: Vec<TraceRecord>,
    pub truth: Vec<GroundTruth>,
}

fn sample_categorical(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let draw: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// Generate a corpus. Deterministic given the seed; each trace draws from
/// its own derived-seed stream, so generation order cannot matter.
pub fn generate(
    config: &RegimeConfig,
    n_questions: usize,
    traces_per_question: usize,
    seed: u64,
) -> Result<SynthCorpus, SynthError> {
    config.validate()?;
    if n_questions == 0 || traces_per_question == 0 {
        return Err(SynthError::InvalidConfig(
            "need at least one question and one trace per question".to_string(),
        ));
    }
    let score_dists = [
        config.score_distribution(ReliabilityState::Low),
        config.score_distribution(ReliabilityState::High),
    ];
    let concept_dists = [
        config.concept_distribution(ReliabilityState::Low),
        config.concept_distribution(ReliabilityState::High),
    ];
    let alphabet = config.concept_alphabet();

    let mut records = Vec::with_capacity(n_questions * traces_per_question);
    let mut truth = Vec::with_capacity(records.capacity());
    for q in 0..n_questions {
        let question_id = format!("q{q:05}");
        for i in 0..traces_per_question {
            let trace_id = format!("{question_id}-r{i:02}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                (q * traces_per_question + i) as u64,
            ));
            let t_len = match config.length {
                LengthModel::Fixed { t } => t,
                LengthModel::Uniform { min, max } => rng.gen_range(min..=max),
            };

            let mut state = if rng.gen::<f64>() < config.initial_high_prob {
                1usize
            } else {
                0usize
            };
            let mut events = Vec::with_capacity(t_len);
            let mut states = Vec::with_capacity(t_len);
            for t in 1..=t_len {
                if t > 1 {
                    let flip = if state == 1 {
                        config.p_error
                    } else {
                        config.p_recover
                    };
                    if rng.gen::<f64>() < flip {
                        state = 1 - state;
                    }
                }
                states.push(if state == 1 {
                    ReliabilityState::High
                } else {
                    ReliabilityState::Low
                });
                let mut event = ObservationEvent {
                    t,
                    score: None,
                    concept: None,
                    vectors: Default::default(),
                    text: None,
                };
                if config.emit_scores {
                    let bin = sample_categorical(&mut rng, &score_dists[state]);
                    let within: f64 = rng.gen::<f64>();
                    event.score = Some((bin as f64 + within) / config.score_bins as f64);
                }
                if config.emit_concepts {
                    let code = sample_categorical(&mut rng, &concept_dists[state]);
                    event.concept = Some(alphabet[code].clone());
                }
                events.push(event);
            }

            let final_label = match config.label_rule {
                LabelRule::FinalStateIndicator => u8::from(state == 1),
                LabelRule::Readout { rho_low, rho_high } => {
                    let rho = if state == 1 { rho_high } else { rho_low };
                    u8::from(rng.gen::<f64>() < rho)
                }
            };

            records.push(TraceRecord {
                question_id: question_id.clone(),
                trace_id: trace_id.clone(),
                final_label,
                events,
                meta: Default::default(),
            });
            truth.push(GroundTruth {
                trace_id,
                states,
                taint: default_taint(),
            });
        }
    }
    Ok(SynthCorpus { records, truth })
}

/// Write the ground-truth sidecar, one JSON object per line.
pub fn write_truth(path: impl AsRef<Path>, truth: &[GroundTruth]) -> Result<(), SynthError> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|source| {
        SynthError::Io {
            path: path.display().to_string(),
            source,
        }
    })?);
    for row in truth {
        let line = serde_json::to_string(row).expect("truth serializes");
        writeln!(out, "{line}").map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    out.flush().map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read a ground-truth sidecar (oracle tests only).
pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>, SynthError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut truth = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: GroundTruth =
            serde_json::from_str(&line).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        if row.taint != ORACLE_TAINT {
            return Err(SynthError::InvalidConfig(format!(
                "sidecar row `{}` has unexpected taint `{}`",
                row.trace_id, row.taint
            )));
        }
        truth.push(row);
    }
    Ok(truth)
}
