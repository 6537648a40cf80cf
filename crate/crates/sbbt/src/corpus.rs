//! Trace data model, line-delimited ingestion, question-level splits, and the
//! prefix-view access contract.
//!
//! A [`TraceRecord`] is one sampled trajectory for one question: an ordered
//! list of per-prefix observation events plus a binary final label. Raw
//! generated text never enters the corpus beyond the optional `text` field of
//! an event; everything downstream consumes extracted observations.
//!
//! Online consumers (the tracker and every baseline) are handed a
//! [`PrefixView`] rather than the record itself. A view constructed for
//! prefix `t` cannot yield any event with a later index, which turns
//! prefix-safety into an API contract instead of a convention.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error reading `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: invalid JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("line {line}: field `{field}` has the wrong type (expected {expected})")]
    FieldType {
        line: usize,
        field: String,
        expected: &'static str,
    },
    #[error("line {line}: record `{trace_id}` has non-binary final_label {value}")]
    NonBinaryLabel {
        line: usize,
        trace_id: String,
        value: i64,
    },
    #[error("line {line}: record `{trace_id}` has unordered events (expected t={expected}, found t={found})")]
    UnorderedEvents {
        line: usize,
        trace_id: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: record `{trace_id}` has an empty event list")]
    EmptyEvents { line: usize, trace_id: String },
    #[error("line {line}: record `{trace_id}` has empty question_id")]
    EmptyQuestionId { line: usize, trace_id: String },
    #[error("line {line}: record `{trace_id}` event t={t} carries no observation channel")]
    EmptyEvent {
        line: usize,
        trace_id: String,
        t: usize,
    },
    #[error("line {line}: record `{trace_id}` event t={t} has non-finite score")]
    NonFiniteScore {
        line: usize,
        trace_id: String,
        t: usize,
    },
    #[error("line {line}: record `{trace_id}` vector `{name}` has dimension {found}, corpus uses {expected}")]
    VectorDimensionMismatch {
        line: usize,
        trace_id: String,
        name: String,
        found: usize,
        expected: usize,
    },
    #[error("duplicate trace_id `{trace_id}` at line {line}")]
    DuplicateTraceId { line: usize, trace_id: String },
    #[error("split fractions {0:?} are invalid (must be positive and sum to 1)")]
    BadFractions((f64, f64, f64)),
    #[error("too few questions: {questions} question(s) cannot fill all three partitions with fractions {fractions:?}")]
    TooFewQuestions {
        questions: usize,
        fractions: (f64, f64, f64),
    },
    #[error("prefix index {t} out of range for trace `{trace_id}` with {len} events")]
    PrefixOutOfRange {
        trace_id: String,
        t: usize,
        len: usize,
    },
    #[error("trace `{trace_id}` of question `{question_id}` is assigned to no partition")]
    UnassignedQuestion {
        trace_id: String,
        question_id: String,
    },
    #[error("question `{question_id}` appears in more than one partition")]
    CrossPartitionQuestion { question_id: String },
}

/// One per-prefix observation: any non-empty subset of the channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEvent {
    /// 1-based prefix index.
    pub t: usize,
    /// Continuous score observation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Discrete concept code.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concept: Option<String>,
    /// Named fixed-dimension real vectors (hidden vectors, pooled spans,
    /// trajectory inputs, span masks).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub vectors: BTreeMap<String, Vec<f64>>,
    /// Raw generated-continuation text for marker coding.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl ObservationEvent {
    pub fn score_at(t: usize, score: f64) -> Self {
        ObservationEvent {
            t,
            score: Some(score),
            concept: None,
            vectors: BTreeMap::new(),
            text: None,
        }
    }

    pub fn concept_at(t: usize, concept: impl Into<String>) -> Self {
        ObservationEvent {
            t,
            score: None,
            concept: Some(concept.into()),
            vectors: BTreeMap::new(),
            text: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_none() && self.concept.is_none() && self.vectors.is_empty() && self.text.is_none()
    }
}

/// One question's sampled trajectory: ordered prefix observations plus the
/// final binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub question_id: String,
    pub trace_id: String,
    pub final_label: u8,
    pub events: Vec<ObservationEvent>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl TraceRecord {
    /// Number of prefixes `T`.
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Restricted view exposing only events `1..=t`.
    pub fn prefix_view(&self, t: usize) -> Result<PrefixView<'_>, CorpusError> {
        if t < 1 || t > self.events.len() {
            return Err(CorpusError::PrefixOutOfRange {
                trace_id: self.trace_id.clone(),
                t,
                len: self.events.len(),
            });
        }
        Ok(PrefixView { record: self, upto: t })
    }

    /// View of the whole trace (`t = T`).
    pub fn full_view(&self) -> PrefixView<'_> {
        PrefixView {
            record: self,
            upto: self.events.len(),
        }
    }
}

/// Read-only window onto the first `t` events of a trace.
///
/// This is the only access path online scoring code is given: the final label
/// and any later events are unreachable through it.
#[derive(Debug, Clone, Copy)]
pub struct PrefixView<'a> {
    record: &'a TraceRecord,
    upto: usize,
}

impl<'a> PrefixView<'a> {
    pub fn question_id(&self) -> &'a str {
        &self.record.question_id
    }

    pub fn trace_id(&self) -> &'a str {
        &self.record.trace_id
    }

    /// The prefix index `t` this view was built for.
    pub fn len(&self) -> usize {
        self.upto
    }

    pub fn is_empty(&self) -> bool {
        self.upto == 0
    }

    /// Events `1..=t`, in order.
    pub fn events(&self) -> &'a [ObservationEvent] {
        &self.record.events[..self.upto]
    }

    pub fn last_event(&self) -> &'a ObservationEvent {
        &self.record.events[self.upto - 1]
    }

    /// Further restriction: `view.prefix_view(s)` for `s <= t` equals
    /// `record.prefix_view(s)`.
    pub fn prefix_view(&self, s: usize) -> Result<PrefixView<'a>, CorpusError> {
        if s < 1 || s > self.upto {
            return Err(CorpusError::PrefixOutOfRange {
                trace_id: self.record.trace_id.clone(),
                t: s,
                len: self.upto,
            });
        }
        Ok(PrefixView {
            record: self.record,
            upto: s,
        })
    }
}

/// Which partition a question belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Train,
    Calibration,
    Test,
}

impl std::fmt::Display for PartitionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartitionKind::Train => write!(f, "train"),
            PartitionKind::Calibration => write!(f, "calibration"),
            PartitionKind::Test => write!(f, "test"),
        }
    }
}

/// Question-level split for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    /// (train, calibration, test) fractions; positive, sum to 1.
    pub fractions: (f64, f64, f64),
    pub partition: BTreeMap<String, PartitionKind>,
    /// True only when the test partition contains traces of both final-label
    /// classes. Degenerate splits are never used for rank claims.
    pub auroc_valid: bool,
}

impl SplitAssignment {
    pub fn partition_of(&self, question_id: &str) -> Option<PartitionKind> {
        self.partition.get(question_id).copied()
    }

    /// Question ids assigned to `kind`, in sorted order.
    pub fn questions_in(&self, kind: PartitionKind) -> Vec<&str> {
        self.partition
            .iter()
            .filter(|(_, p)| **p == kind)
            .map(|(q, _)| q.as_str())
            .collect()
    }

    /// Traces of `corpus` whose question falls in `kind`, in corpus order.
    pub fn traces_in<'a>(&self, corpus: &'a [TraceRecord], kind: PartitionKind) -> Vec<&'a TraceRecord> {
        corpus
            .iter()
            .filter(|r| self.partition_of(&r.question_id) == Some(kind))
            .collect()
    }

    /// Every trace of a question must fall in exactly one partition.
    pub fn check_consistent(&self, corpus: &[TraceRecord]) -> Result<(), CorpusError> {
        for record in corpus {
            if self.partition_of(&record.question_id).is_none() {
                return Err(CorpusError::UnassignedQuestion {
                    trace_id: record.trace_id.clone(),
                    question_id: record.question_id.clone(),
                });
            }
        }
        Ok(())
    }
}


/// Field-name mapping for ingesting record files whose keys differ from the
/// documented defaults. Every loader goes through one of these; the default
/// names the documented format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSchema {
    pub question_id: String,
    pub trace_id: String,
    pub final_label: String,
    pub events: String,
    pub t: String,
    pub score: String,
    pub concept: String,
    pub vectors: String,
    pub text: String,
    pub meta: String,
}

impl Default for RecordSchema {
    fn default() -> Self {
        RecordSchema {
            question_id: "question_id".into(),
            trace_id: "trace_id".into(),
            final_label: "final_label".into(),
            events: "events".into(),
            t: "t".into(),
            score: "score".into(),
            concept: "concept".into(),
            vectors: "vectors".into(),
            text: "text".into(),
            meta: "meta".into(),
        }
    }
}

fn value_str(
    obj: &serde_json::Map<String, serde_json::Value>,
    field: &str,
    line: usize,
) -> Result<String, CorpusError> {
    match obj.get(field) {
        None => Err(CorpusError::MissingField {
            line,
            field: field.to_string(),
        }),
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(CorpusError::FieldType {
            line,
            field: field.to_string(),
            expected: "string",
        }),
    }
}

fn parse_event(
    value: &serde_json::Value,
    line: usize,
    trace_id: &str,
    schema: &RecordSchema,
) -> Result<ObservationEvent, CorpusError> {
    let obj = value.as_object().ok_or_else(|| CorpusError::FieldType {
        line,
        field: "events[]".to_string(),
        expected: "object",
    })?;
    let t = obj
        .get(&schema.t)
        .ok_or_else(|| CorpusError::MissingField {
            line,
            field: "events[].t".to_string(),
        })?
        .as_u64()
        .ok_or_else(|| CorpusError::FieldType {
            line,
            field: "events[].t".to_string(),
            expected: "positive integer",
        })? as usize;

    let score = match obj.get(&schema.score) {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(v.as_f64().ok_or_else(|| CorpusError::FieldType {
            line,
            field: "events[].score".to_string(),
            expected: "number",
        })?),
    };
    let concept = match obj.get(&schema.concept) {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return Err(CorpusError::FieldType {
                line,
                field: "events[].concept".to_string(),
                expected: "string",
            })
        }
    };
    let text = match obj.get(&schema.text) {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return Err(CorpusError::FieldType {
                line,
                field: "events[].text".to_string(),
                expected: "string",
            })
        }
    };
    let mut vectors = BTreeMap::new();
    if let Some(v) = obj.get(&schema.vectors) {
        let map = v.as_object().ok_or_else(|| CorpusError::FieldType {
            line,
            field: "events[].vectors".to_string(),
            expected: "object of arrays",
        })?;
        for (name, arr) in map {
            let arr = arr.as_array().ok_or_else(|| CorpusError::FieldType {
                line,
                field: format!("events[].vectors.{name}"),
                expected: "array of numbers",
            })?;
            let mut vec = Vec::with_capacity(arr.len());
            for x in arr {
                vec.push(x.as_f64().ok_or_else(|| CorpusError::FieldType {
                    line,
                    field: format!("events[].vectors.{name}"),
                    expected: "array of numbers",
                })?);
            }
            vectors.insert(name.clone(), vec);
        }
    }

    let event = ObservationEvent {
        t,
        score,
        concept,
        vectors,
        text,
    };
    if event.is_empty() {
        return Err(CorpusError::EmptyEvent {
            line,
            trace_id: trace_id.to_string(),
            t,
        });
    }
    if let Some(s) = event.score {
        if !s.is_finite() {
            return Err(CorpusError::NonFiniteScore {
                line,
                trace_id: trace_id.to_string(),
                t,
            });
        }
    }
    Ok(event)
}

/// Parse and validate one record line.
fn parse_record(
    line_text: &str,
    line: usize,
    vector_dims: &mut BTreeMap<String, usize>,
    schema: &RecordSchema,
) -> Result<TraceRecord, CorpusError> {
    let value: serde_json::Value =
        serde_json::from_str(line_text).map_err(|e| CorpusError::Parse {
            line,
            message: e.to_string(),
        })?;
    let obj = value.as_object().ok_or_else(|| CorpusError::Parse {
        line,
        message: "record is not an object".to_string(),
    })?;

    let trace_id = value_str(obj, &schema.trace_id, line)?;
    let question_id = value_str(obj, &schema.question_id, line)?;
    if question_id.is_empty() {
        return Err(CorpusError::EmptyQuestionId {
            line,
            trace_id,
        });
    }
    let label_value = obj
        .get(&schema.final_label)
        .ok_or_else(|| CorpusError::MissingField {
            line,
            field: schema.final_label.clone(),
        })?
        .as_i64()
        .ok_or_else(|| CorpusError::FieldType {
            line,
            field: schema.final_label.clone(),
            expected: "integer",
        })?;
    if label_value != 0 && label_value != 1 {
        return Err(CorpusError::NonBinaryLabel {
            line,
            trace_id,
            value: label_value,
        });
    }

    let events_value = obj
        .get(&schema.events)
        .ok_or_else(|| CorpusError::MissingField {
            line,
            field: schema.events.clone(),
        })?
        .as_array()
        .ok_or_else(|| CorpusError::FieldType {
            line,
            field: schema.events.clone(),
            expected: "array",
        })?;
    if events_value.is_empty() {
        return Err(CorpusError::EmptyEvents { line, trace_id });
    }

    let mut events = Vec::with_capacity(events_value.len());
    for (idx, ev) in events_value.iter().enumerate() {
        let event = parse_event(ev, line, &trace_id, schema)?;
        let expected = idx + 1;
        if event.t != expected {
            return Err(CorpusError::UnorderedEvents {
                line,
                trace_id,
                expected,
                found: event.t,
            });
        }
        for (name, vec) in &event.vectors {
            match vector_dims.get(name) {
                Some(&dim) if dim != vec.len() => {
                    return Err(CorpusError::VectorDimensionMismatch {
                        line,
                        trace_id,
                        name: name.clone(),
                        found: vec.len(),
                        expected: dim,
                    });
                }
                Some(_) => {}
                None => {
                    vector_dims.insert(name.clone(), vec.len());
                }
            }
        }
        events.push(event);
    }

    let mut meta = BTreeMap::new();
    if let Some(v) = obj.get(&schema.meta) {
        let map = v.as_object().ok_or_else(|| CorpusError::FieldType {
            line,
            field: "meta".to_string(),
            expected: "object of strings",
        })?;
        for (k, val) in map {
            let s = val.as_str().ok_or_else(|| CorpusError::FieldType {
                line,
                field: format!("meta.{k}"),
                expected: "string",
            })?;
            meta.insert(k.clone(), s.to_string());
        }
    }

    Ok(TraceRecord {
        question_id,
        trace_id,
        final_label: label_value as u8,
        events,
        meta,
    })
}

/// Load a line-delimited record file in the documented format, rejecting
/// the whole file on the first invariant violation.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, CorpusError> {
    load_corpus_with(path, &RecordSchema::default())
}

/// Load with an explicit field-name mapping.
pub fn load_corpus_with(
    path: impl AsRef<Path>,
    schema: &RecordSchema,
) -> Result<Vec<TraceRecord>, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut vector_dims: BTreeMap<String, usize> = BTreeMap::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let record = parse_record(&text, line_no, &mut vector_dims, schema)?;
        if !seen_ids.insert(record.trace_id.clone()) {
            return Err(CorpusError::DuplicateTraceId {
                line: line_no,
                trace_id: record.trace_id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Write records in the documented line-delimited format, newline-terminated.
pub fn write_corpus(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|source| {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    })?);
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(out, "{line}").map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    out.flush().map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_fractions(fractions: (f64, f64, f64)) -> Result<(), CorpusError> {
    let (a, b, c) = fractions;
    let ok = a > 0.0 && b > 0.0 && c > 0.0 && (a + b + c - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(CorpusError::BadFractions(fractions))
    }
}

/// Deterministic question-level splits: question ids are sorted, shuffled by
/// a seeded permutation, then assigned contiguously by fraction. Train and
/// calibration sizes use floor; the remainder goes to test so that test is
/// never empty when the fractions are valid.
pub fn make_splits(
    corpus: &[TraceRecord],
    seeds: &[u64],
    fractions: (f64, f64, f64),
) -> Result<Vec<SplitAssignment>, CorpusError> {
    check_fractions(fractions)?;
    let questions: BTreeSet<&str> = corpus.iter().map(|r| r.question_id.as_str()).collect();
    let sorted: Vec<&str> = questions.into_iter().collect();
    let n = sorted.len();
    if n < 2 {
        return Err(CorpusError::TooFewQuestions {
            questions: n,
            fractions,
        });
    }

    let n_train = (fractions.0 * n as f64).floor() as usize;
    let n_cal = (fractions.1 * n as f64).floor() as usize;
    let n_test = n - n_train - n_cal;
    if n_train == 0 || n_cal == 0 || n_test == 0 {
        return Err(CorpusError::TooFewQuestions {
            questions: n,
            fractions,
        });
    }

    let mut splits = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut order = sorted.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);

        let mut partition = BTreeMap::new();
        for (i, q) in order.iter().enumerate() {
            let kind = if i < n_train {
                PartitionKind::Train
            } else if i < n_train + n_cal {
                PartitionKind::Calibration
            } else {
                PartitionKind::Test
            };
            partition.insert(q.to_string(), kind);
        }

        let mut saw_pos = false;
        let mut saw_neg = false;
        for record in corpus {
            if partition.get(&record.question_id) == Some(&PartitionKind::Test) {
                if record.final_label == 1 {
                    saw_pos = true;
                } else {
                    saw_neg = true;
                }
            }
        }

        splits.push(SplitAssignment {
            seed,
            fractions,
            partition,
            auroc_valid: saw_pos && saw_neg,
        });
    }
    Ok(splits)
}
