//! End-to-end evaluation pipeline: split, extract, calibrate, filter,
//! baselines, evaluate, aggregate.
//!
//! One run config drives everything and is echoed into the report bundle.
//! Every stage writes deterministic, newline-terminated files into a
//! directory-per-run layout, and the bundle closes with SHA-256 checksums of
//! everything written, so two runs with the same config produce byte-
//! identical bundles.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{self, Baseline, BaselineError, SummaryParams};
use crate::calibration::{
    self, BinningKind, CalibrationError, CalibrationSpec, EmissionMode, EmissionModel, Transitions,
};
use crate::corpus::{
    self, CorpusError, ObservationEvent, PartitionKind, PrefixView, SplitAssignment, TraceRecord,
};
use crate::decision::{self, DecisionError, LabeledSeries, UtilityTarget};
use crate::metrics::{
    self, BootstrapInterval, FractionRow, MetricError, MetricRow, SeedSummary, TraceScoreSeries,
};
use crate::observers::{
    self, AlignmentDirection, ClusterCodebook, MarkerLexicon, ObserverError, PoolScope, ProbeModel,
    ScoreOrientation, TrajectoryMetric,
};
use crate::provenance::{Provenance, ProvenanceError};
use crate::tracker::{self, BeliefTrajectory, TrackerError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}`: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("output directory `{0}` already contains a run; pass overwrite to replace it")]
    OutputExists(PathBuf),
    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config: {0}")]
    BadConfig(String),
}

impl PipelineError {
    fn stage(stage: &'static str, err: impl std::fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            message: err.to_string(),
        }
    }
}

macro_rules! stage_error {
    ($stage:literal, $ty:ty) => {
        impl From<$ty> for PipelineError {
            fn from(err: $ty) -> Self {
                PipelineError::stage($stage, err)
            }
        }
    };
}
stage_error!("corpus", CorpusError);
stage_error!("extract", ObserverError);
stage_error!("calibrate", CalibrationError);
stage_error!("filter", TrackerError);
stage_error!("baselines", BaselineError);
stage_error!("evaluate", MetricError);
stage_error!("utility", DecisionError);
stage_error!("provenance", ProvenanceError);

/// Which raw channel(s) an observation family is extracted from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ObserverSource {
    /// Use the record's own score/concept channels as-is.
    Native,
    /// Code the text channel with a marker lexicon.
    Markers { lexicon: LexiconChoice },
    /// Train-split cluster ids over a named vector field.
    Clusters { feature: String, k: usize },
    /// Pooled-feature probe probability over a named vector field.
    Probe {
        feature: String,
        scope: PoolScope,
        l2: f64,
    },
    /// Latent-trajectory scalar over a named vector field.
    Trajectory {
        feature: String,
        metric: TrajectoryChoice,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LexiconChoice {
    SelfVerification,
    TextStages,
    /// An inline lexicon: ordered families plus a fallback code.
    Custom { lexicon: MarkerLexicon },
}

impl LexiconChoice {
    pub fn lexicon(&self) -> MarkerLexicon {
        match self {
            LexiconChoice::SelfVerification => MarkerLexicon::self_verification(),
            LexiconChoice::TextStages => MarkerLexicon::text_stages(),
            LexiconChoice::Custom { lexicon } => lexicon.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryChoice {
    NetChange,
    CumulativeChange,
    AlignedChange,
}

/// How a family's emission model is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CalibrationMode {
    AllPrefix,
    FinalStep,
    /// EM re-estimation initialized from the all-prefix fit.
    Em { iterations: usize, tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutChoice {
    Identity,
    Outcome,
    Monotone,
}

/// One observation family to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverConfig {
    pub name: String,
    pub source: ObserverSource,
    pub mode: EmissionMode,
    #[serde(default = "default_true")]
    pub orient: bool,
    #[serde(default = "default_calibration_mode")]
    pub calibration: CalibrationMode,
    #[serde(default = "default_readout")]
    pub readout: ReadoutChoice,
}

fn default_true() -> bool {
    true
}
fn default_calibration_mode() -> CalibrationMode {
    CalibrationMode::AllPrefix
}
fn default_readout() -> ReadoutChoice {
    ReadoutChoice::Identity
}

/// Filter parameters and likelihood-fitting options shared by all families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub binning: BinningKind,
    pub k_bins: usize,
    pub lambda: f64,
    pub p_error: f64,
    pub p_recover: f64,
    /// Initial belief in the high state.
    pub initial_high: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            binning: BinningKind::Histogram,
            k_bins: 10,
            lambda: 1.0,
            p_error: 0.05,
            p_recover: 0.05,
            initial_high: 0.5,
        }
    }
}

impl CalibrationOptions {
    fn spec(&self, mode: EmissionMode, alphabet: Vec<String>) -> CalibrationSpec {
        CalibrationSpec {
            mode,
            binning: self.binning,
            k_bins: self.k_bins,
            alphabet,
            lambda: self.lambda,
            transitions: Transitions::Stationary {
                p_error: self.p_error,
                p_recover: self.p_recover,
            },
            initial_belief: [1.0 - self.initial_high, self.initial_high],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub window: usize,
    pub ema_alpha: f64,
    pub l2: f64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            window: 5,
            ema_alpha: 0.3,
            l2: 1.0,
        }
    }
}

impl BaselineOptions {
    fn params(&self) -> SummaryParams {
        SummaryParams {
            window: self.window,
            ema_alpha: self.ema_alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub ece_bins: usize,
    pub fractions: Vec<f64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            bootstrap_resamples: 1000,
            bootstrap_seed: 0,
            ece_bins: 10,
            fractions: vec![0.05, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityOptions {
    pub targets: Vec<UtilityTarget>,
}

/// The single run configuration, echoed verbatim into the bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub seeds: Vec<u64>,
    /// (train, calibration, test) fractions.
    pub fractions: (f64, f64, f64),
    pub observers: Vec<ObserverConfig>,
    #[serde(default)]
    pub calibration: CalibrationOptions,
    #[serde(default)]
    pub baselines: BaselineOptions,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default)]
    pub utility: Option<UtilityOptions>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.seeds.is_empty() {
            return Err(PipelineError::BadConfig("seeds list is empty".into()));
        }
        if self.observers.is_empty() {
            return Err(PipelineError::BadConfig("no observation families configured".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for o in &self.observers {
            if !names.insert(&o.name) {
                return Err(PipelineError::BadConfig(format!(
                    "duplicate observer name `{}`",
                    o.name
                )));
            }
        }
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<RunConfig, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::BadConfig(e.to_string()))
    }
}

/// Per-family fitted extraction artifacts for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionArtifacts {
    pub family: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<MarkerLexicon>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codebook: Option<ClusterCodebook>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentDirection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orientation: Option<ScoreOrientation>,
}

impl ExtractionArtifacts {
    /// Refuse any test-tagged fitted piece.
    pub fn check_usable(&self) -> Result<(), ProvenanceError> {
        if let Some(c) = &self.codebook {
            c.provenance.check_usable("codebook")?;
        }
        if let Some(p) = &self.probe {
            p.provenance.check_usable("probe")?;
        }
        if let Some(a) = &self.alignment {
            a.provenance.check_usable("alignment")?;
        }
        if let Some(o) = &self.orientation {
            o.provenance.check_usable("orientation")?;
        }
        Ok(())
    }
}

/// Extraction output: a derived corpus whose events carry the family's
/// score/concept channels, plus the fitted artifacts.
pub struct Extraction {
    pub records: Vec<TraceRecord>,
    pub artifacts: ExtractionArtifacts,
    pub alphabet: Vec<String>,
}

fn vectors_of<'a>(
    view: &PrefixView<'a>,
    feature: &str,
) -> Result<Vec<Vec<f64>>, ObserverError> {
    let mut out = Vec::with_capacity(view.len());
    for event in view.events() {
        if let Some(v) = event.vectors.get(feature) {
            out.push(v.clone());
        }
    }
    if out.is_empty() {
        return Err(ObserverError::MissingVector(feature.to_string()));
    }
    Ok(out)
}

/// Fit the family's extraction artifacts on the split's train partition and
/// derive the family corpus over all records.
pub fn extract_family(
    corpus_records: &[TraceRecord],
    split: &SplitAssignment,
    config: &ObserverConfig,
    seed: u64,
) -> Result<Extraction, PipelineError> {
    let train = split.traces_in(corpus_records, PartitionKind::Train);
    let mut artifacts = ExtractionArtifacts {
        family: config.name.clone(),
        seed,
        lexicon: None,
        codebook: None,
        probe: None,
        alignment: None,
        orientation: None,
    };

    // Per-record derived channels.
    let mut derived: Vec<TraceRecord> = Vec::with_capacity(corpus_records.len());
    let mut alphabet: Vec<String> = Vec::new();

    match &config.source {
        ObserverSource::Native => {
            for record in corpus_records {
                derived.push(strip_to_channels(record, true, true));
            }
            if config.mode.needs_concept() {
                // The alphabet is a pre-fit artifact: collected from the
                // train and calibration partitions only.
                let mut codes = std::collections::BTreeSet::new();
                for r in corpus_records {
                    let partition = split.partition_of(&r.question_id);
                    if partition == Some(PartitionKind::Test) || partition.is_none() {
                        continue;
                    }
                    for e in &r.events {
                        if let Some(c) = &e.concept {
                            codes.insert(c.clone());
                        }
                    }
                }
                alphabet = codes.into_iter().collect();
            }
        }
        ObserverSource::Markers { lexicon } => {
            let lex = lexicon.lexicon();
            alphabet = lex.alphabet();
            for record in corpus_records {
                let mut out = strip_to_channels(record, true, false);
                for (event, src) in out.events.iter_mut().zip(&record.events) {
                    let text = src.text.as_deref().ok_or_else(|| {
                        PipelineError::stage(
                            "extract",
                            format!(
                                "trace `{}` event t={} has no text channel for marker coding",
                                record.trace_id, src.t
                            ),
                        )
                    })?;
                    event.concept = Some(lex.code(text).to_string());
                }
                derived.push(out);
            }
            artifacts.lexicon = Some(lex);
        }
        ObserverSource::Clusters { feature, k } => {
            let mut train_vectors = Vec::new();
            for r in &train {
                for e in &r.events {
                    if let Some(v) = e.vectors.get(feature) {
                        train_vectors.push(v.clone());
                    }
                }
            }
            let codebook = observers::fit_clusters(
                &train_vectors,
                *k,
                metrics::derive_seed(seed, split.seed),
                feature.clone(),
            )?;
            alphabet = codebook.alphabet();
            for record in corpus_records {
                let mut out = strip_to_channels(record, true, false);
                for (event, src) in out.events.iter_mut().zip(&record.events) {
                    let v = src.vectors.get(feature).ok_or_else(|| {
                        PipelineError::stage(
                            "extract",
                            format!(
                                "trace `{}` event t={} has no `{feature}` vector",
                                record.trace_id, src.t
                            ),
                        )
                    })?;
                    let idx = observers::assign_cluster(v, &codebook)?;
                    event.concept = Some(codebook.code_of(idx));
                }
                derived.push(out);
            }
            artifacts.codebook = Some(codebook);
        }
        ObserverSource::Probe { feature, scope, l2 } => {
            let mut rows = Vec::new();
            for r in &train {
                let pooled = observers::pooled_features(&r.full_view(), feature, scope)?;
                rows.push((pooled, r.final_label));
            }
            let probe = observers::fit_probe(&rows, *l2, scope.clone(), feature.clone())?;
            for record in corpus_records {
                let mut out = strip_to_channels(record, false, false);
                for (event, t) in out.events.iter_mut().zip(1..) {
                    let view = record.prefix_view(t).map_err(|e| PipelineError::stage("extract", e))?;
                    event.score = Some(probe.score(&view)?);
                }
                derived.push(out);
            }
            artifacts.probe = Some(probe);
        }
        ObserverSource::Trajectory { feature, metric } => {
            let metric = match metric {
                TrajectoryChoice::NetChange => TrajectoryMetric::NetChange,
                TrajectoryChoice::CumulativeChange => TrajectoryMetric::CumulativeChange,
                TrajectoryChoice::AlignedChange => {
                    let trajectories: Vec<Vec<Vec<f64>>> = train
                        .iter()
                        .map(|r| vectors_of(&r.full_view(), feature))
                        .collect::<Result<_, _>>()?;
                    let direction = observers::fit_alignment(&trajectories, feature.clone())?;
                    artifacts.alignment = Some(direction.clone());
                    TrajectoryMetric::AlignedChange { direction }
                }
            };
            for record in corpus_records {
                let mut out = strip_to_channels(record, false, false);
                for (event, t) in out.events.iter_mut().zip(1..) {
                    let view = record.prefix_view(t).map_err(|e| PipelineError::stage("extract", e))?;
                    let vectors = vectors_of(&view, feature)?;
                    event.score = Some(observers::trajectory_score(&vectors, &metric)?);
                }
                derived.push(out);
            }
        }
    }

    // Score orientation fitted on train final-prefix scores.
    if config.orient && config.mode.needs_score() {
        let mut pairs = Vec::new();
        for record in &derived {
            if split.partition_of(&record.question_id) == Some(PartitionKind::Train) {
                if let Some(s) = record.events.last().and_then(|e| e.score) {
                    pairs.push((s, record.final_label));
                }
            }
        }
        let orientation = observers::orient_score(&pairs, config.name.clone(), Provenance::train())?;
        if orientation.sign < 0.0 {
            for record in &mut derived {
                for event in &mut record.events {
                    if let Some(s) = event.score.as_mut() {
                        *s = -*s;
                    }
                }
            }
        }
        artifacts.orientation = Some(orientation);
    }

    artifacts.check_usable()?;
    Ok(Extraction {
        records: derived,
        artifacts,
        alphabet,
    })
}

/// Copy a record keeping only the requested channels (score/concept).
fn strip_to_channels(record: &TraceRecord, keep_score: bool, keep_concept: bool) -> TraceRecord {
    TraceRecord {
        question_id: record.question_id.clone(),
        trace_id: record.trace_id.clone(),
        final_label: record.final_label,
        events: record
            .events
            .iter()
            .map(|e| ObservationEvent {
                t: e.t,
                score: if keep_score { e.score } else { None },
                concept: if keep_concept { e.concept.clone() } else { None },
                vectors: Default::default(),
                text: None,
            })
            .collect(),
        meta: record.meta.clone(),
    }
}

/// Calibrate a family's emission model on the calibration partition of the
/// derived corpus, fitting the configured readout afterwards.
pub fn calibrate_family(
    extraction: &Extraction,
    split: &SplitAssignment,
    config: &ObserverConfig,
    options: &CalibrationOptions,
) -> Result<EmissionModel, PipelineError> {
    let cal = split.traces_in(&extraction.records, PartitionKind::Calibration);
    let spec = options.spec(config.mode, extraction.alphabet.clone());
    let mut model = match config.calibration {
        CalibrationMode::AllPrefix => calibration::fit_allprefix(&cal, &spec)?,
        CalibrationMode::FinalStep => calibration::fit_finalstep(&cal, &spec)?,
        CalibrationMode::Em { iterations, tol } => {
            let init = calibration::fit_allprefix(&cal, &spec)?;
            calibration::fit_em(&cal, &init, iterations, tol)?.model
        }
    };

    match config.readout {
        ReadoutChoice::Identity => {}
        ReadoutChoice::Outcome | ReadoutChoice::Monotone => {
            let mut points = Vec::new();
            for record in &cal {
                let traj = tracker::filter_record(record, &model)?;
                for step in &traj.steps {
                    points.push((step.posterior, record.final_label));
                }
            }
            model.readout = calibration::fit_outcome_readout(
                &points,
                config.readout == ReadoutChoice::Monotone,
            )?;
        }
    }
    Ok(model)
}

/// Per-seed evaluation of one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySeedEvaluation {
    pub family: String,
    pub seed: u64,
    pub row: MetricRow,
    /// AUROC of every standard baseline on this split's test partition.
    pub baseline_aurocs: BTreeMap<String, Option<f64>>,
    pub pfc_auroc: Option<f64>,
    /// Method Brier minus EMA Brier (EMA clamped to [0, 1]); negative is
    /// better probability quality.
    pub brier_delta_vs_ema: Option<f64>,
    pub fixed_fractions: Vec<FractionRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utility: Option<Vec<UtilityRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub target: UtilityTarget,
    pub chosen: decision::OperatingPoint,
    pub on_test: decision::OperatingPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDeltaRow {
    pub family: String,
    pub metric: String,
    pub reference: String,
    pub seed: u64,
    pub point: f64,
    pub interval: BootstrapInterval,
}

/// Aggregated per-family section of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub name: String,
    pub summary: SeedSummary,
    pub mean_brier_delta_vs_ema: Option<f64>,
    pub brier_improvement_fraction: Option<f64>,
    pub rows: Vec<FamilySeedEvaluation>,
    /// Mean metric per fraction over valid seeds.
    pub fixed_fraction_means: Vec<FractionRow>,
    pub paired_deltas: Vec<PairedDeltaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_traces: usize,
    pub n_questions: usize,
    pub error_rate: f64,
    pub mean_observations: f64,
}

/// The full report bundle payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub corpus_stats: CorpusStats,
    pub families: Vec<FamilyReport>,
    pub valid_seeds: Vec<u64>,
    pub degenerate_seeds: Vec<u64>,
}

pub fn corpus_stats(records: &[TraceRecord]) -> CorpusStats {
    let n_traces = records.len();
    let questions: std::collections::BTreeSet<&str> =
        records.iter().map(|r| r.question_id.as_str()).collect();
    let errors = records.iter().filter(|r| r.final_label == 0).count();
    let observations: usize = records.iter().map(|r| r.len()).sum();
    CorpusStats {
        n_traces,
        n_questions: questions.len(),
        error_rate: errors as f64 / n_traces as f64,
        mean_observations: observations as f64 / n_traces as f64,
    }
}

/// Evaluate one family on one split, given the shared baseline artifacts.
#[allow(clippy::too_many_arguments)]
fn evaluate_family_seed(
    config: &RunConfig,
    family: &ObserverConfig,
    split: &SplitAssignment,
    extraction: &Extraction,
    model: &EmissionModel,
    standard: &[Baseline],
    source_records: &[TraceRecord],
) -> Result<(FamilySeedEvaluation, Vec<BeliefTrajectory>, Vec<BeliefTrajectory>), PipelineError> {
    model.provenance.check_usable("emission model")?;
    for baseline in standard {
        baseline.check_usable().map_err(|e| PipelineError::stage("baselines", e))?;
    }

    let test = split.traces_in(&extraction.records, PartitionKind::Test);
    let cal = split.traces_in(&extraction.records, PartitionKind::Calibration);

    // Filter test and calibration partitions.
    let mut test_trajectories = Vec::with_capacity(test.len());
    for record in &test {
        test_trajectories.push(tracker::filter_record(record, model)?);
    }
    let mut cal_trajectories = Vec::with_capacity(cal.len());
    for record in &cal {
        cal_trajectories.push(tracker::filter_record(record, model)?);
    }

    let labels: Vec<u8> = test.iter().map(|r| r.final_label).collect();
    let method_scores: Vec<f64> = test_trajectories.iter().map(|t| t.final_readout()).collect();

    // PFC audit on the family's own observation stream: native scores plus
    // the family's concept codes when it has any.
    let source_cal = split.traces_in(source_records, PartitionKind::Calibration);
    let source_test = split.traces_in(source_records, PartitionKind::Test);
    let pfc_alphabet = if extraction.alphabet.is_empty() {
        None
    } else {
        Some(extraction.alphabet.clone())
    };
    // PFC consumes native scores joined with family concepts.
    let pfc_cal: Vec<TraceRecord> = source_cal
        .iter()
        .zip(&cal)
        .map(|(src, fam)| merge_score_concept(src, fam))
        .collect();
    let pfc_test: Vec<TraceRecord> = source_test
        .iter()
        .zip(&test)
        .map(|(src, fam)| merge_score_concept(src, fam))
        .collect();
    let pfc_cal_refs: Vec<&TraceRecord> = pfc_cal.iter().collect();
    let pfc = baselines::fit_pfc(
        &pfc_cal_refs,
        config.baselines.params(),
        pfc_alphabet,
        config.baselines.l2,
    )?;
    let pfc_baseline = Baseline::Pfc { model: pfc };
    pfc_baseline.check_usable().map_err(|e| PipelineError::stage("baselines", e))?;

    // Baseline scores at the final prefix of each test trace.
    let mut baseline_aurocs: BTreeMap<String, Option<f64>> = BTreeMap::new();
    let mut standard_final: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for baseline in standard {
        let mut scores = Vec::with_capacity(source_test.len());
        for record in &source_test {
            scores.push(baseline.score(&record.full_view())?);
        }
        baseline_aurocs.insert(baseline.name(), metrics::auroc_ranked(&scores, &labels));
        standard_final.insert(baseline.name(), scores);
    }
    let mut pfc_scores = Vec::with_capacity(pfc_test.len());
    for record in &pfc_test {
        pfc_scores.push(pfc_baseline.score(&record.full_view())?);
    }
    let pfc_auroc = metrics::auroc_ranked(&pfc_scores, &labels);

    // Metric row.
    let method_auroc = metrics::auroc_ranked(&method_scores, &labels);
    let brier = metrics::brier(&method_scores, &labels)?;
    let ece_report = metrics::ece(&method_scores, &labels, config.metrics.ece_bins)?;
    let gaps = if split.auroc_valid {
        let standard_values: Vec<f64> = baseline_aurocs.values().flatten().copied().collect();
        match (method_auroc, pfc_auroc) {
            (Some(m), Some(p)) if !standard_values.is_empty() => {
                Some(metrics::gaps(m, &standard_values, p)?)
            }
            _ => None,
        }
    } else {
        None
    };
    let row = MetricRow {
        method: family.name.clone(),
        seed: split.seed,
        auroc: method_auroc,
        brier,
        ece: ece_report.ece,
        gaps,
        n_traces: test.len(),
    };

    // Brier delta against EMA (clamped into [0, 1] for probability use).
    let ema_scores: Vec<f64> = standard_final
        .get(&Baseline::Ema { alpha: config.baselines.ema_alpha }.name())
        .map(|scores| scores.iter().map(|s| s.clamp(0.0, 1.0)).collect())
        .unwrap_or_default();
    let brier_delta_vs_ema = if ema_scores.is_empty() {
        None
    } else {
        Some(brier - metrics::brier(&ema_scores, &labels)?)
    };

    // Fixed-fraction rows for the family readout.
    let series: Vec<TraceScoreSeries> = test_trajectories
        .iter()
        .zip(&labels)
        .map(|(traj, &label)| TraceScoreSeries {
            question_id: traj.question_id.clone(),
            trace_id: traj.trace_id.clone(),
            label,
            scores_by_prefix: traj.readout_series(),
        })
        .collect();
    let fixed_fractions = metrics::fixed_fraction_eval(&series, &config.metrics.fractions)?;

    // Utility operating points: chosen on calibration readouts, applied to
    // test readouts.
    let utility = match &config.utility {
        None => None,
        Some(options) => {
            let cal_series: Vec<LabeledSeries> = cal_trajectories
                .iter()
                .zip(cal.iter())
                .map(|(traj, record)| LabeledSeries {
                    trace_id: traj.trace_id.clone(),
                    label: record.final_label,
                    readouts: traj.readout_series(),
                })
                .collect();
            let test_series: Vec<LabeledSeries> = test_trajectories
                .iter()
                .zip(test.iter())
                .map(|(traj, record)| LabeledSeries {
                    trace_id: traj.trace_id.clone(),
                    label: record.final_label,
                    readouts: traj.readout_series(),
                })
                .collect();
            let mut rows = Vec::new();
            for &target in &options.targets {
                match decision::choose_threshold(&cal_series, target) {
                    Ok(chosen) => {
                        let on_test = decision::apply_threshold(&test_series, &chosen);
                        rows.push(UtilityRow { target, chosen, on_test });
                    }
                    Err(DecisionError::UnreachableTarget(_)) => {}
                    Err(e) => return Err(PipelineError::stage("utility", e)),
                }
            }
            Some(rows)
        }
    };

    Ok((
        FamilySeedEvaluation {
            family: family.name.clone(),
            seed: split.seed,
            row,
            baseline_aurocs,
            pfc_auroc,
            brier_delta_vs_ema,
            fixed_fractions,
            utility,
        },
        test_trajectories,
        cal_trajectories,
    ))
}

/// Join native scores with a family's concept channel for PFC features.
fn merge_score_concept(source: &TraceRecord, family: &TraceRecord) -> TraceRecord {
    let mut out = source.clone();
    for (event, fam_event) in out.events.iter_mut().zip(&family.events) {
        event.concept = fam_event.concept.clone();
        event.vectors = Default::default();
        event.text = None;
    }
    out
}

/// Paired question-cluster bootstrap for (method minus reference) deltas.
fn paired_delta(
    family: &str,
    metric_name: &str,
    reference_name: &str,
    seed: u64,
    bootstrap_resamples: usize,
    bootstrap_seed: u64,
    groups: &[QuestionPair],
) -> Result<Option<PairedDeltaRow>, PipelineError> {
    let stat = |sample: &[&QuestionPair]| -> Option<f64> {
        let mut method = Vec::new();
        let mut reference = Vec::new();
        let mut labels = Vec::new();
        for g in sample {
            for row in &g.rows {
                method.push(row.0);
                reference.push(row.1);
                labels.push(row.2);
            }
        }
        match metric_name {
            "auroc" => {
                let a = metrics::auroc_ranked(&method, &labels)?;
                let b = metrics::auroc_ranked(&reference, &labels)?;
                Some(a - b)
            }
            _ => {
                let clamp = |xs: &[f64]| -> Vec<f64> {
                    xs.iter().map(|x| x.clamp(0.0, 1.0)).collect()
                };
                let a = metrics::brier(&clamp(&method), &labels).ok()?;
                let b = metrics::brier(&clamp(&reference), &labels).ok()?;
                Some(a - b)
            }
        }
    };
    let point = {
        let all: Vec<&QuestionPair> = groups.iter().collect();
        stat(&all)
    };
    let Some(point) = point else {
        return Ok(None);
    };
    let interval = metrics::cluster_bootstrap(groups, bootstrap_resamples, bootstrap_seed, stat)
        .map_err(|e| PipelineError::stage("evaluate", e))?;
    Ok(Some(PairedDeltaRow {
        family: family.to_string(),
        metric: metric_name.to_string(),
        reference: reference_name.to_string(),
        seed,
        point,
        interval,
    }))
}

/// Per-question paired rows: (method score, reference score, label).
struct QuestionPair {
    rows: Vec<(f64, f64, u8)>,
}

/// Run the whole pipeline in memory (no files): used by the writer below
/// and directly by tests.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let records = corpus::load_corpus(&config.corpus)?;
    run_pipeline_on(config, &records)
}

/// Pipeline over already-loaded records.
pub fn run_pipeline_on(
    config: &RunConfig,
    records: &[TraceRecord],
) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let splits = corpus::make_splits(records, &config.seeds, config.fractions)?;

    let mut per_family_rows: BTreeMap<String, Vec<FamilySeedEvaluation>> = BTreeMap::new();
    let mut per_family_deltas: BTreeMap<String, Vec<PairedDeltaRow>> = BTreeMap::new();

    for split in &splits {
        split.check_consistent(records)?;
        // Standard baselines are shared across families: fitted on the native
        // score stream of the calibration partition.
        let source_cal = split.traces_in(records, PartitionKind::Calibration);
        let standard =
            baselines::fit_standard_set(&source_cal, config.baselines.params(), config.baselines.l2)?;

        for family in &config.observers {
            let extraction = extract_family(records, split, family, split.seed)?;
            let model = calibrate_family(&extraction, split, family, &config.calibration)?;
            let (eval, test_trajectories, _cal) = evaluate_family_seed(
                config,
                family,
                split,
                &extraction,
                &model,
                &standard,
                records,
            )?;

            // Paired deltas vs EMA on this seed. Zero resamples disables the
            // bootstrap section entirely.
            if config.metrics.bootstrap_resamples > 0 {
                let test = split.traces_in(records, PartitionKind::Test);
                let ema = Baseline::Ema {
                    alpha: config.baselines.ema_alpha,
                };
                let mut groups: BTreeMap<String, QuestionPair> = BTreeMap::new();
                for (record, traj) in test.iter().zip(&test_trajectories) {
                    let reference = ema.score(&record.full_view())?;
                    groups
                        .entry(record.question_id.clone())
                        .or_insert_with(|| QuestionPair { rows: Vec::new() })
                        .rows
                        .push((traj.final_readout(), reference, record.final_label));
                }
                let groups: Vec<QuestionPair> = groups.into_values().collect();
                for metric_name in ["auroc", "brier"] {
                    if let Some(rowd) = paired_delta(
                        &family.name,
                        metric_name,
                        "ema",
                        split.seed,
                        config.metrics.bootstrap_resamples,
                        metrics::derive_seed(config.metrics.bootstrap_seed, split.seed),
                        &groups,
                    )? {
                        per_family_deltas
                            .entry(family.name.clone())
                            .or_default()
                            .push(rowd);
                    }
                }
            }

            per_family_rows
                .entry(family.name.clone())
                .or_default()
                .push(eval);
        }
    }

    let valid_seeds: Vec<u64> = splits.iter().filter(|s| s.auroc_valid).map(|s| s.seed).collect();
    let degenerate_seeds: Vec<u64> = splits
        .iter()
        .filter(|s| !s.auroc_valid)
        .map(|s| s.seed)
        .collect();

    let mut families = Vec::new();
    for family in &config.observers {
        let rows = per_family_rows.remove(&family.name).unwrap_or_default();
        let metric_rows: Vec<MetricRow> = rows.iter().map(|r| r.row.clone()).collect();
        let summary = metrics::seed_summary(&metric_rows).map_err(|e| PipelineError::stage("evaluate", e))?;
        let deltas: Vec<f64> = rows.iter().filter_map(|r| r.brier_delta_vs_ema).collect();
        let mean_brier_delta_vs_ema = if deltas.is_empty() {
            None
        } else {
            Some(deltas.iter().sum::<f64>() / deltas.len() as f64)
        };
        let brier_improvement_fraction = if deltas.is_empty() {
            None
        } else {
            Some(deltas.iter().filter(|d| **d < 0.0).count() as f64 / deltas.len() as f64)
        };

        // Mean fixed-fraction metrics over seeds.
        let mut fixed_fraction_means = Vec::new();
        if let Some(first) = rows.first() {
            for (i, fr) in first.fixed_fractions.iter().enumerate() {
                let aurocs: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| r.fixed_fractions[i].auroc)
                    .collect();
                let briers: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| r.fixed_fractions[i].brier)
                    .collect();
                fixed_fraction_means.push(FractionRow {
                    fraction: fr.fraction,
                    auroc: if aurocs.is_empty() {
                        None
                    } else {
                        Some(aurocs.iter().sum::<f64>() / aurocs.len() as f64)
                    },
                    brier: if briers.is_empty() {
                        None
                    } else {
                        Some(briers.iter().sum::<f64>() / briers.len() as f64)
                    },
                    n_traces: fr.n_traces,
                });
            }
        }

        families.push(FamilyReport {
            name: family.name.clone(),
            summary,
            mean_brier_delta_vs_ema,
            brier_improvement_fraction,
            rows,
            fixed_fraction_means,
            paired_deltas: per_family_deltas.remove(&family.name).unwrap_or_default(),
        });
    }

    Ok(RunReport {
        config: config.clone(),
        corpus_stats: corpus_stats(records),
        families,
        valid_seeds,
        degenerate_seeds,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| PipelineError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    let mut f = std::fs::File::create(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(bytes).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("serializable");
    s.push('\n');
    s
}

fn json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Run the pipeline and write the full deterministic bundle under `out`.
///
/// Layout: `config.json`, `splits/seed_<r>.json`,
/// `artifacts/<family>/seed_<r>.json`, `models/<family>/seed_<r>.json`,
/// `trajectories/<family>/seed_<r>.{cal,test}.jsonl`,
/// `scores/baselines/seed_<r>.jsonl`, `metrics/rows.jsonl`,
/// `report/report.json`, `report/checksums.json`.
pub fn run_pipeline_to_dir(
    config: &RunConfig,
    out: &Path,
    overwrite: bool,
) -> Result<RunReport, PipelineError> {
    config.validate()?;
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !overwrite {
            return Err(PipelineError::OutputExists(out.to_path_buf()));
        }
        std::fs::remove_dir_all(out).map_err(|source| PipelineError::Io {
            path: out.display().to_string(),
            source,
        })?;
    }
    std::fs::create_dir_all(out).map_err(|source| PipelineError::Io {
        path: out.display().to_string(),
        source,
    })?;

    let records = corpus::load_corpus(&config.corpus)?;
    let splits = corpus::make_splits(&records, &config.seeds, config.fractions)?;

    let mut written: Vec<(String, Vec<u8>)> = Vec::new();
    let mut push = |rel: String, bytes: Vec<u8>| {
        written.push((rel, bytes));
    };

    push("config.json".into(), json_pretty(config));
    for split in &splits {
        push(format!("splits/seed_{:05}.json", split.seed), json_pretty(split));
    }

    // Stage artifacts per family/seed while the in-memory pipeline runs.
    for split in &splits {
        let source_cal = split.traces_in(&records, PartitionKind::Calibration);
        let standard =
            baselines::fit_standard_set(&source_cal, config.baselines.params(), config.baselines.l2)?;
        push(
            format!("baselines/seed_{:05}.json", split.seed),
            json_pretty(&standard),
        );

        // Baseline score export: per-(trace, t) rows over the test split.
        let source_test = split.traces_in(&records, PartitionKind::Test);
        let mut lines = String::new();
        for record in &source_test {
            for t in 1..=record.len() {
                let view = record.prefix_view(t).map_err(|e| PipelineError::stage("baselines", e))?;
                for baseline in &standard {
                    #[derive(Serialize)]
                    struct ScoreRow<'a> {
                        trace_id: &'a str,
                        t: usize,
                        baseline: String,
                        score: f64,
                    }
                    lines.push_str(&json_line(&ScoreRow {
                        trace_id: record.trace_id.as_str(),
                        t,
                        baseline: baseline.name(),
                        score: baseline.score(&view)?,
                    }));
                }
            }
        }
        push(
            format!("scores/baselines/seed_{:05}.jsonl", split.seed),
            lines.into_bytes(),
        );

        for family in &config.observers {
            let extraction = extract_family(&records, split, family, split.seed)?;
            push(
                format!("artifacts/{}/seed_{:05}.json", family.name, split.seed),
                json_pretty(&extraction.artifacts),
            );
            let model = calibrate_family(&extraction, split, family, &config.calibration)?;
            push(
                format!("models/{}/seed_{:05}.json", family.name, split.seed),
                json_pretty(&model),
            );
            for (partition, tag) in [(PartitionKind::Calibration, "cal"), (PartitionKind::Test, "test")] {
                let part = split.traces_in(&extraction.records, partition);
                let mut lines = String::new();
                for record in &part {
                    let traj = tracker::filter_record(record, &model)?;
                    for step in &traj.steps {
                        #[derive(Serialize)]
                        struct TrajRow<'a> {
                            trace_id: &'a str,
                            t: usize,
                            predictive: [f64; 2],
                            posterior: [f64; 2],
                            evidence: f64,
                            cumulative_log_odds: f64,
                            readout: f64,
                            fallback: bool,
                        }
                        lines.push_str(&json_line(&TrajRow {
                            trace_id: record.trace_id.as_str(),
                            t: step.t,
                            predictive: step.predictive,
                            posterior: step.posterior,
                            evidence: step.evidence,
                            cumulative_log_odds: step.cumulative_log_odds,
                            readout: step.readout,
                            fallback: step.fallback,
                        }));
                    }
                }
                push(
                    format!(
                        "trajectories/{}/seed_{:05}.{}.jsonl",
                        family.name, split.seed, tag
                    ),
                    lines.into_bytes(),
                );
            }
        }
    }

    // The aggregated report reuses the in-memory pipeline for the numbers.
    let report = run_pipeline_on(config, &records)?;
    let mut metric_lines = String::new();
    for fam in &report.families {
        for row in &fam.rows {
            metric_lines.push_str(&json_line(row));
        }
    }
    push("metrics/rows.jsonl".into(), metric_lines.into_bytes());
    push("report/report.json".into(), json_pretty(&report));

    // Write everything, then the checksum manifest over it.
    let mut checksums: BTreeMap<String, String> = BTreeMap::new();
    for (rel, bytes) in &written {
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        checksums.insert(rel.clone(), format!("{:x}", hasher.finalize()));
        write_file(&out.join(rel), bytes)?;
    }
    write_file(&out.join("report/checksums.json"), &json_pretty(&checksums))?;

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, LengthModel, RegimeConfig};

    fn small_config(corpus: PathBuf) -> RunConfig {
        RunConfig {
            corpus,
            seeds: vec![0, 1],
            fractions: (0.34, 0.33, 0.33),
            observers: vec![
                ObserverConfig {
                    name: "score".into(),
                    source: ObserverSource::Native,
                    mode: EmissionMode::ScoreOnly,
                    orient: true,
                    calibration: CalibrationMode::AllPrefix,
                    readout: ReadoutChoice::Identity,
                },
                ObserverConfig {
                    name: "concept".into(),
                    source: ObserverSource::Native,
                    mode: EmissionMode::ConceptOnly,
                    orient: false,
                    calibration: CalibrationMode::AllPrefix,
                    readout: ReadoutChoice::Identity,
                },
            ],
            calibration: CalibrationOptions {
                k_bins: 6,
                ..CalibrationOptions::default()
            },
            baselines: BaselineOptions::default(),
            metrics: MetricOptions {
                bootstrap_resamples: 50,
                ..MetricOptions::default()
            },
            utility: Some(UtilityOptions {
                targets: vec![UtilityTarget::RecallAtLeast(0.5)],
            }),
        }
    }

    fn synth_corpus_file(seed: u64) -> PathBuf {
        let config = RegimeConfig {
            emit_concepts: true,
            concept_separation: 0.5,
            score_separation: 0.4,
            length: LengthModel::Uniform { min: 3, max: 8 },
            ..RegimeConfig::default()
        };
        let corpus = synth::generate(&config, 60, 2, seed).unwrap();
        let path = std::env::temp_dir().join(format!(
            "sbbt-pipeline-test-{}-{}.jsonl",
            std::process::id(),
            seed
        ));
        corpus::write_corpus(&path, &corpus.records).unwrap();
        path
    }

    #[test]
    fn pipeline_produces_full_report() {
        let path = synth_corpus_file(5);
        let config = small_config(path.clone());
        let report = run_pipeline(&config).unwrap();
        assert_eq!(report.families.len(), 2);
        for fam in &report.families {
            assert_eq!(fam.rows.len(), 2);
            assert!(!fam.fixed_fraction_means.is_empty());
            assert!(!fam.paired_deltas.is_empty());
        }
        assert!(report.corpus_stats.n_traces == 120);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn bundle_is_byte_identical_across_runs() {
        let path = synth_corpus_file(6);
        let config = small_config(path.clone());
        let dir_a = std::env::temp_dir().join(format!("sbbt-bundle-a-{}", std::process::id()));
        let dir_b = std::env::temp_dir().join(format!("sbbt-bundle-b-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir_a);
        let _ = std::fs::remove_dir_all(&dir_b);
        run_pipeline_to_dir(&config, &dir_a, false).unwrap();
        run_pipeline_to_dir(&config, &dir_b, false).unwrap();

        let walk = |root: &Path| -> Vec<(String, Vec<u8>)> {
            let mut files = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(dir) = stack.pop() {
                for entry in std::fs::read_dir(&dir).unwrap() {
                    let entry = entry.unwrap();
                    let p = entry.path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        let rel = p.strip_prefix(root).unwrap().display().to_string();
                        files.push((rel, std::fs::read(&p).unwrap()));
                    }
                }
            }
            files.sort();
            files
        };
        let a = walk(&dir_a);
        let b = walk(&dir_b);
        assert_eq!(a.len(), b.len());
        for ((ra, ba), (rb, bb)) in a.iter().zip(b.iter()) {
            assert_eq!(ra, rb);
            assert_eq!(ba, bb, "file {ra} differs between runs");
        }

        // Rerun without overwrite is refused.
        assert!(matches!(
            run_pipeline_to_dir(&config, &dir_a, false),
            Err(PipelineError::OutputExists(_))
        ));

        std::fs::remove_dir_all(&dir_a).ok();
        std::fs::remove_dir_all(&dir_b).ok();
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn test_tagged_model_aborts_run() {
        let path = synth_corpus_file(7);
        let records = corpus::load_corpus(&path).unwrap();
        let config = small_config(path.clone());
        let splits = corpus::make_splits(&records, &[0], config.fractions).unwrap();
        let split = &splits[0];
        let family = &config.observers[0];
        let extraction = extract_family(&records, split, family, 0).unwrap();
        let mut model = calibrate_family(&extraction, split, family, &config.calibration).unwrap();
        model.provenance.partition = crate::provenance::FitPartition::Test;
        let standard = baselines::fit_standard_set(
            &split.traces_in(&records, PartitionKind::Calibration),
            config.baselines.params(),
            config.baselines.l2,
        )
        .unwrap();
        let err = evaluate_family_seed(
            &config,
            family,
            split,
            &extraction,
            &model,
            &standard,
            &records,
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::Stage { stage: "provenance", .. }));
        std::fs::remove_file(path).ok();
    }
}
