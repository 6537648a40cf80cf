//! Pipeline driver for prefix-safe belief tracking.
//!
//! Single-stage subcommands read and write the documented file formats so
//! stages can be composed or rerun; `sweep` drives the whole pipeline from
//! one config file into a deterministic directory-per-run bundle.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sbbt::baselines::{self, SummaryParams};
use sbbt::calibration::{self, BinningKind, CalibrationSpec, EmissionModel, Transitions};
use sbbt::corpus::{self, PartitionKind, SplitAssignment, TraceRecord};
use sbbt::decision::{self, LabeledSeries, RolloutGroup, UtilityTarget};
use sbbt::metrics::{self, MetricRow};
use sbbt::pipeline::{self, ObserverConfig, RunConfig};
use sbbt::synth::{self, RegimeConfig};
use sbbt::tracker;

#[derive(Parser)]
#[command(name = "sbbt", version, about = "Prefix-safe belief tracking over sequential traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a ground-truth sidecar.
    Synth(SynthArgs),
    /// Make deterministic question-level splits.
    Split(SplitArgs),
    /// Extract one observation family into a derived corpus.
    Extract(ExtractArgs),
    /// Fit an emission model on the calibration partition.
    Calibrate(CalibrateArgs),
    /// Filter traces into belief trajectories.
    Filter(FilterArgs),
    /// Fit the standard baseline set and export per-prefix scores.
    Baselines(BaselinesArgs),
    /// Compute metric rows for one family and split.
    Evaluate(EvaluateArgs),
    /// Summarize metric rows across seeds (gap and audit algebra).
    Audit(AuditArgs),
    /// Choose and apply early bad-trace detection thresholds.
    Utility(UtilityArgs),
    /// Join belief trajectories to rollout outcomes.
    RolloutJoin(RolloutJoinArgs),
    /// Run the full pipeline from a config file into a run directory.
    Sweep(SweepArgs),
    /// Print the summary tables of a finished run.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Regime config JSON (see the guide for the schema).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    questions: usize,
    #[arg(long, default_value_t = 1)]
    traces_per_question: usize,
    #[arg(long)]
    seed: u64,
    /// Output corpus file (line-delimited records).
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar (oracle tests only; never an evaluation input).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated split seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long)]
    train: f64,
    #[arg(long)]
    calibration: f64,
    #[arg(long)]
    test: f64,
    /// Directory receiving one seed_<r>.json per seed.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Split file (seed_<r>.json).
    #[arg(long)]
    split: PathBuf,
    /// Observer family config JSON (name, source, mode, orient, ...).
    #[arg(long)]
    family: PathBuf,
    /// Derived corpus output.
    #[arg(long)]
    out: PathBuf,
    /// Fitted extraction artifacts (lexicon/codebook/probe/orientation).
    #[arg(long)]
    artifacts: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Derived (extracted) corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Observer family config JSON (mode and calibration kind are read from
    /// it).
    #[arg(long)]
    family: PathBuf,
    #[arg(long, default_value = "histogram")]
    binning: String,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.05)]
    p_error: f64,
    #[arg(long, default_value_t = 0.05)]
    p_recover: f64,
    /// Initial belief in the high state.
    #[arg(long, default_value_t = 0.5)]
    pi0_high: f64,
    /// Concept alphabet override (comma-separated). By default concept
    /// modes collect the alphabet from the calibration partition.
    #[arg(long, value_delimiter = ',')]
    alphabet: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    /// Derived corpus matching the model's channels.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Which partition to filter: train, calibration, test, or all.
    #[arg(long, default_value = "test")]
    partition: String,
    /// Trajectory rows (one JSON object per trace prefix).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselinesArgs {
    /// Source corpus (native score channel).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 0.3)]
    ema_alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    l2: f64,
    /// Also fit the PFC audit using this extracted corpus's concept channel.
    #[arg(long)]
    concepts_from: Option<PathBuf>,
    #[arg(long)]
    out_artifacts: PathBuf,
    /// Per-(trace, t, baseline) score rows over the test partition.
    #[arg(long)]
    out_scores: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Source corpus (for labels).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Method trajectory rows (filter output) on the test partition.
    #[arg(long)]
    trajectories: PathBuf,
    /// Baseline score rows (baselines output).
    #[arg(long)]
    baseline_scores: PathBuf,
    /// Method name recorded in the row.
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 10)]
    ece_bins: usize,
    /// Metric row output (JSONL, one row).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    /// Metric rows (JSONL) across seeds, possibly several methods.
    #[arg(long)]
    rows: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UtilityArgs {
    /// Calibration-partition trajectory rows.
    #[arg(long)]
    calibration_trajectories: PathBuf,
    /// Test-partition trajectory rows to apply the chosen threshold to.
    #[arg(long)]
    test_trajectories: PathBuf,
    /// Source corpus (labels).
    #[arg(long)]
    corpus: PathBuf,
    /// Target, e.g. `recall:0.8` or `fpr:0.2`.
    #[arg(long)]
    target: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RolloutJoinArgs {
    /// Test trajectory rows (belief readouts).
    #[arg(long)]
    trajectories: PathBuf,
    /// Baseline score rows used as the source score.
    #[arg(long)]
    baseline_scores: PathBuf,
    /// Which baseline kind provides the source score.
    #[arg(long, default_value = "last-score")]
    source_baseline: String,
    /// Rollout rows: {trace_id, t, k, successes} per line.
    #[arg(long)]
    rollouts: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Run directory for the report bundle.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory written by `sweep`.
    #[arg(long)]
    run: PathBuf,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading `{}`", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing `{}`", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing `{}`", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        writeln!(out, "{}", serde_json::to_string(row)?)?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening `{}`", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .with_context(|| format!("`{}` line {}", path.display(), i + 1))?,
        );
    }
    Ok(rows)
}

fn parse_partition(name: &str) -> Result<Option<PartitionKind>> {
    Ok(match name {
        "train" => Some(PartitionKind::Train),
        "calibration" => Some(PartitionKind::Calibration),
        "test" => Some(PartitionKind::Test),
        "all" => None,
        other => bail!("unknown partition `{other}`"),
    })
}

/// One exported trajectory row; the shared per-(trace, t) format.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrajectoryRow {
    trace_id: String,
    t: usize,
    predictive: [f64; 2],
    posterior: [f64; 2],
    evidence: f64,
    cumulative_log_odds: f64,
    readout: f64,
    fallback: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BaselineScoreRow {
    trace_id: String,
    t: usize,
    baseline: String,
    score: f64,
}

/// Group trajectory rows into per-trace readout series (sorted by t).
fn series_from_rows(rows: &[TrajectoryRow]) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut map: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for row in rows {
        map.entry(row.trace_id.clone())
            .or_default()
            .push((row.t, row.readout));
    }
    for series in map.values_mut() {
        series.sort_by_key(|(t, _)| *t);
    }
    map
}

fn labels_by_trace(records: &[TraceRecord]) -> BTreeMap<&str, u8> {
    records
        .iter()
        .map(|r| (r.trace_id.as_str(), r.final_label))
        .collect()
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config: RegimeConfig = read_json(&args.config)?;
    let corpus = synth::generate(&config, args.questions, args.traces_per_question, args.seed)?;
    corpus::write_corpus(&args.out, &corpus.records)?;
    if let Some(truth) = &args.truth {
        synth::write_truth(truth, &corpus.truth)?;
    }
    println!(
        "wrote {} traces over {} questions to {}",
        corpus.records.len(),
        args.questions,
        args.out.display()
    );
    Ok(())
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let records = corpus::load_corpus(&args.corpus)?;
    let splits = corpus::make_splits(&records, &args.seeds, (args.train, args.calibration, args.test))?;
    std::fs::create_dir_all(&args.out_dir)?;
    for split in &splits {
        let path = args.out_dir.join(format!("seed_{:05}.json", split.seed));
        write_json(&path, split)?;
    }
    println!("wrote {} split file(s) to {}", splits.len(), args.out_dir.display());
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let records = corpus::load_corpus(&args.corpus)?;
    let split: SplitAssignment = read_json(&args.split)?;
    let family: ObserverConfig = read_json(&args.family)?;
    let extraction = pipeline::extract_family(&records, &split, &family, split.seed)?;
    corpus::write_corpus(&args.out, &extraction.records)?;
    write_json(&args.artifacts, &extraction.artifacts)?;
    println!(
        "extracted family `{}`: {} traces, alphabet size {}",
        family.name,
        extraction.records.len(),
        extraction.alphabet.len()
    );
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let records = corpus::load_corpus(&args.corpus)?;
    let split: SplitAssignment = read_json(&args.split)?;
    let family: ObserverConfig = read_json(&args.family)?;
    let cal = split.traces_in(&records, PartitionKind::Calibration);

    let binning = match args.binning.as_str() {
        "histogram" => BinningKind::Histogram,
        "quantile" => BinningKind::Quantile,
        other => bail!("unknown binning `{other}`"),
    };
    let alphabet = match args.alphabet {
        Some(codes) => codes,
        None if family.mode.needs_concept() => {
            let mut codes = std::collections::BTreeSet::new();
            for r in &cal {
                for e in &r.events {
                    if let Some(c) = &e.concept {
                        codes.insert(c.clone());
                    }
                }
            }
            codes.into_iter().collect()
        }
        None => Vec::new(),
    };
    let spec = CalibrationSpec {
        mode: family.mode,
        binning,
        k_bins: args.bins,
        alphabet,
        lambda: args.lambda,
        transitions: Transitions::Stationary {
            p_error: args.p_error,
            p_recover: args.p_recover,
        },
        initial_belief: [1.0 - args.pi0_high, args.pi0_high],
    };
    let model = match family.calibration {
        pipeline::CalibrationMode::AllPrefix => calibration::fit_allprefix(&cal, &spec)?,
        pipeline::CalibrationMode::FinalStep => calibration::fit_finalstep(&cal, &spec)?,
        pipeline::CalibrationMode::Em { iterations, tol } => {
            let init = calibration::fit_allprefix(&cal, &spec)?;
            let fit = calibration::fit_em(&cal, &init, iterations, tol)?;
            println!(
                "EM: {} iteration(s), converged = {}, final objective {:.6}, data log-likelihood {:.6}",
                fit.objectives.len() - 1,
                fit.converged,
                fit.objectives.last().unwrap(),
                fit.data_log_likelihoods.last().unwrap()
            );
            fit.model
        }
    };
    model.write_json(&args.out)?;
    println!("wrote emission model to {}", args.out.display());
    Ok(())
}

fn cmd_filter(args: FilterArgs) -> Result<()> {
    let records = corpus::load_corpus(&args.corpus)?;
    let split: SplitAssignment = read_json(&args.split)?;
    let model = EmissionModel::read_json(&args.model)?;
    model.provenance.check_usable("emission model")?;
    let wanted = parse_partition(&args.partition)?;

    let mut rows: Vec<TrajectoryRow> = Vec::new();
    let mut n_traces = 0usize;
    for record in &records {
        let partition = split.partition_of(&record.question_id);
        let keep = match (wanted, partition) {
            (_, None) => bail!(
                "trace `{}` has question `{}` outside the split",
                record.trace_id,
                record.question_id
            ),
            (None, Some(_)) => true,
            (Some(w), Some(p)) => w == p,
        };
        if !keep {
            continue;
        }
        n_traces += 1;
        let trajectory = tracker::filter_record(record, &model)?;
        for step in &trajectory.steps {
            rows.push(TrajectoryRow {
                trace_id: record.trace_id.clone(),
                t: step.t,
                predictive: step.predictive,
                posterior: step.posterior,
                evidence: step.evidence,
                cumulative_log_odds: step.cumulative_log_odds,
                readout: step.readout,
                fallback: step.fallback,
            });
        }
    }
    write_jsonl(&args.out, &rows)?;
    println!("filtered {} trace(s) into {}", n_traces, args.out.display());
    Ok(())
}

fn cmd_baselines(args: BaselinesArgs) -> Result<()> {
    let records = corpus::load_corpus(&args.corpus)?;
    let split: SplitAssignment = read_json(&args.split)?;
    let params = SummaryParams {
        window: args.window,
        ema_alpha: args.ema_alpha,
    };
    let cal = split.traces_in(&records, PartitionKind::Calibration);
    let mut set = baselines::fit_standard_set(&cal, params, args.l2)?;

    if let Some(concept_path) = &args.concepts_from {
        let concept_records = corpus::load_corpus(concept_path)?;
        let by_id: BTreeMap<&str, &TraceRecord> = concept_records
            .iter()
            .map(|r| (r.trace_id.as_str(), r))
            .collect();
        let mut alphabet = std::collections::BTreeSet::new();
        let mut merged = Vec::new();
        for record in &cal {
            let concepts = by_id.get(record.trace_id.as_str()).with_context(|| {
                format!("trace `{}` missing from {}", record.trace_id, concept_path.display())
            })?;
            let mut joined = (*record).clone();
            for (event, c) in joined.events.iter_mut().zip(&concepts.events) {
                event.concept = c.concept.clone();
                if let Some(code) = &c.concept {
                    alphabet.insert(code.clone());
                }
            }
            merged.push(joined);
        }
        let refs: Vec<&TraceRecord> = merged.iter().collect();
        let pfc = baselines::fit_pfc(
            &refs,
            params,
            Some(alphabet.into_iter().collect()),
            args.l2,
        )?;
        set.push(baselines::Baseline::Pfc { model: pfc });
    } else {
        let pfc = baselines::fit_pfc(&cal, params, None, args.l2)?;
        set.push(baselines::Baseline::Pfc { model: pfc });
    }
    write_json(&args.out_artifacts, &set)?;

    // Score the test partition per prefix. PFC scoring needs the concept
    // channel joined in when one was provided.
    let concept_records = match &args.concepts_from {
        Some(path) => Some(corpus::load_corpus(path)?),
        None => None,
    };
    let concept_by_id: BTreeMap<&str, &TraceRecord> = concept_records
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .map(|r| (r.trace_id.as_str(), r))
        .collect();

    let test = split.traces_in(&records, PartitionKind::Test);
    let mut rows = Vec::new();
    for record in &test {
        let joined: TraceRecord = match concept_by_id.get(record.trace_id.as_str()) {
            Some(concepts) => {
                let mut j = (*record).clone();
                for (event, c) in j.events.iter_mut().zip(&concepts.events) {
                    event.concept = c.concept.clone();
                }
                j
            }
            None => (*record).clone(),
        };
        for t in 1..=record.len() {
            for baseline in &set {
                baseline.check_usable()?;
                let view = if baseline.is_audit() {
                    joined.prefix_view(t)?
                } else {
                    record.prefix_view(t)?
                };
                rows.push(BaselineScoreRow {
                    trace_id: record.trace_id.clone(),
                    t,
                    baseline: baseline.name(),
                    score: baseline.score(&view)?,
                });
            }
        }
    }
    write_jsonl(&args.out_scores, &rows)?;
    println!(
        "fitted {} baseline(s); wrote {} score rows to {}",
        set.len(),
        rows.len(),
        args.out_scores.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let records = corpus::load_corpus(&args.corpus)?;
    let split: SplitAssignment = read_json(&args.split)?;
    let trajectory_rows: Vec<TrajectoryRow> = read_jsonl(&args.trajectories)?;
    let score_rows: Vec<BaselineScoreRow> = read_jsonl(&args.baseline_scores)?;
    let labels = labels_by_trace(&records);

    let series = series_from_rows(&trajectory_rows);
    let mut method_scores = Vec::new();
    let mut label_vec = Vec::new();
    for (trace_id, readouts) in &series {
        let label = labels
            .get(trace_id.as_str())
            .with_context(|| format!("trace `{trace_id}` missing from corpus"))?;
        method_scores.push(readouts.last().unwrap().1);
        label_vec.push(*label);
    }

    // Final-prefix baseline scores per kind.
    let mut final_by_kind: BTreeMap<String, BTreeMap<&str, (usize, f64)>> = BTreeMap::new();
    for row in &score_rows {
        let slot = final_by_kind
            .entry(row.baseline.clone())
            .or_default()
            .entry(row.trace_id.as_str())
            .or_insert((0, 0.0));
        if row.t >= slot.0 {
            *slot = (row.t, row.score);
        }
    }
    let mut standard = Vec::new();
    let mut pfc_auroc = None;
    for (kind, finals) in &final_by_kind {
        let mut scores = Vec::new();
        let mut labs = Vec::new();
        for (trace_id, (_, score)) in finals {
            if let Some(label) = labels.get(trace_id) {
                scores.push(*score);
                labs.push(*label);
            }
        }
        let value = metrics::auroc_ranked(&scores, &labs);
        if kind == "pfc" {
            pfc_auroc = value;
        } else if let Some(v) = value {
            standard.push(v);
        }
    }

    let method_auroc = metrics::auroc_ranked(&method_scores, &label_vec);
    let brier = metrics::brier(&method_scores, &label_vec)?;
    let ece = metrics::ece(&method_scores, &label_vec, args.ece_bins)?;
    let gaps = match (split.auroc_valid, method_auroc, pfc_auroc) {
        (true, Some(m), Some(p)) if !standard.is_empty() => Some(metrics::gaps(m, &standard, p)?),
        _ => None,
    };
    let row = MetricRow {
        method: args.method.clone(),
        seed: split.seed,
        auroc: method_auroc,
        brier,
        ece: ece.ece,
        gaps,
        n_traces: method_scores.len(),
    };
    write_jsonl(&args.out, &[row])?;
    println!("wrote metric row to {}", args.out.display());
    Ok(())
}

fn cmd_audit(args: AuditArgs) -> Result<()> {
    let rows: Vec<MetricRow> = read_jsonl(&args.rows)?;
    let mut by_method: BTreeMap<String, Vec<MetricRow>> = BTreeMap::new();
    for row in rows {
        by_method.entry(row.method.clone()).or_default().push(row);
    }
    let mut summaries = Vec::new();
    for (_, rows) in by_method {
        summaries.push(metrics::seed_summary(&rows)?);
    }
    write_json(&args.out, &summaries)?;
    println!("wrote {} method summaries to {}", summaries.len(), args.out.display());
    Ok(())
}

fn parse_target(text: &str) -> Result<UtilityTarget> {
    let (kind, value) = text
        .split_once(':')
        .context("target must look like `recall:0.8` or `fpr:0.2`")?;
    let value: f64 = value.parse()?;
    Ok(match kind {
        "recall" => UtilityTarget::RecallAtLeast(value),
        "fpr" => UtilityTarget::FprAtMost(value),
        other => bail!("unknown target kind `{other}`"),
    })
}

fn labeled_series(rows: &[TrajectoryRow], labels: &BTreeMap<&str, u8>) -> Result<Vec<LabeledSeries>> {
    let series = series_from_rows(rows);
    let mut out = Vec::with_capacity(series.len());
    for (trace_id, readouts) in series {
        let label = labels
            .get(trace_id.as_str())
            .with_context(|| format!("trace `{trace_id}` missing from corpus"))?;
        out.push(LabeledSeries {
            trace_id,
            label: *label,
            readouts: readouts.into_iter().map(|(_, r)| r).collect(),
        });
    }
    Ok(out)
}

fn cmd_utility(args: UtilityArgs) -> Result<()> {
    let records = corpus::load_corpus(&args.corpus)?;
    let labels = labels_by_trace(&records);
    let cal_rows: Vec<TrajectoryRow> = read_jsonl(&args.calibration_trajectories)?;
    let test_rows: Vec<TrajectoryRow> = read_jsonl(&args.test_trajectories)?;
    let target = parse_target(&args.target)?;

    let cal_series = labeled_series(&cal_rows, &labels)?;
    let test_series = labeled_series(&test_rows, &labels)?;
    let chosen = decision::choose_threshold(&cal_series, target)?;
    let on_test = decision::apply_threshold(&test_series, &chosen);

    #[derive(Serialize)]
    struct UtilityReport {
        target: UtilityTarget,
        chosen: decision::OperatingPoint,
        on_test: decision::OperatingPoint,
    }
    write_json(&args.out, &UtilityReport { target, chosen, on_test })?;
    println!("wrote operating point to {}", args.out.display());
    Ok(())
}

fn cmd_rollout_join(args: RolloutJoinArgs) -> Result<()> {
    let trajectory_rows: Vec<TrajectoryRow> = read_jsonl(&args.trajectories)?;
    let score_rows: Vec<BaselineScoreRow> = read_jsonl(&args.baseline_scores)?;
    let groups: Vec<RolloutGroup> = read_jsonl(&args.rollouts)?;

    let mut scores = decision::PrefixScores::new();
    let mut sources: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for row in &score_rows {
        if row.baseline == args.source_baseline {
            sources.insert((row.trace_id.clone(), row.t), row.score);
        }
    }
    for row in &trajectory_rows {
        if let Some(source) = sources.get(&(row.trace_id.clone(), row.t)) {
            scores.insert((row.trace_id.clone(), row.t), (*source, row.readout));
        }
    }
    let (rows, summary) = decision::rollout_join(&scores, &groups)?;

    #[derive(Serialize)]
    struct JoinReport {
        source_baseline: String,
        summary: decision::RolloutSummary,
        rows: Vec<decision::JoinedRow>,
    }
    write_json(
        &args.out,
        &JoinReport {
            source_baseline: args.source_baseline.clone(),
            summary,
            rows,
        },
    )?;
    println!("wrote rollout join to {}", args.out.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let config = RunConfig::read_json(&args.config)?;
    let report = pipeline::run_pipeline_to_dir(&config, &args.out, args.overwrite)?;
    println!(
        "run complete: {} familie(s), {} valid seed(s), {} degenerate",
        report.families.len(),
        report.valid_seeds.len(),
        report.degenerate_seeds.len()
    );
    print_report(&report);
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let report: pipeline::RunReport = read_json(&args.run.join("report/report.json"))?;
    print_report(&report);
    Ok(())
}

fn print_report(report: &pipeline::RunReport) {
    let stats = &report.corpus_stats;
    println!(
        "corpus: {} traces / {} questions, error rate {:.1}%, mean observations {:.1}",
        stats.n_traces,
        stats.n_questions,
        100.0 * stats.error_rate,
        stats.mean_observations
    );
    println!(
        "{:<16} {:>6} {:>10} {:>8} {:>10} {:>10} {:>12} {:>10}",
        "family", "seeds", "gap(std)", "pos", "gap(pfc)", "gap(audit)", "brier-d(ema)", "ece"
    );
    for fam in &report.families {
        let s = &fam.summary;
        println!(
            "{:<16} {:>6} {:>10.4} {:>8.2} {:>10.4} {:>10.4} {:>12} {:>10.4}",
            fam.name,
            s.valid_seeds,
            s.mean_standard_gap,
            s.positive_fraction,
            s.mean_pfc_gap,
            s.mean_audit_gap,
            fam.mean_brier_delta_vs_ema
                .map(|d| format!("{d:+.4}"))
                .unwrap_or_else(|| "-".into()),
            s.mean_ece,
        );
    }
    for fam in &report.families {
        if fam.paired_deltas.is_empty() {
            continue;
        }
        println!("paired deltas vs ema ({}):", fam.name);
        for d in &fam.paired_deltas {
            println!(
                "  seed {:<5} {:<6} {:+.4} [{:+.4}, {:+.4}] ({} resamples, {} dropped)",
                d.seed, d.metric, d.point, d.interval.lo, d.interval.hi, d.interval.resamples, d.interval.dropped
            );
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Split(args) => cmd_split(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Filter(args) => cmd_filter(args),
        Command::Baselines(args) => cmd_baselines(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Audit(args) => cmd_audit(args),
        Command::Utility(args) => cmd_utility(args),
        Command::RolloutJoin(args) => cmd_rollout_join(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
