//! Shared test oracles: exhaustive latent-path enumeration and random
//! model/trace generators. Everything here is independent of the library's
//! recursion code paths; it multiplies path weights directly.

// Each test binary uses a different subset of this module.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbbt::calibration::{
    BinningKind, BinningSpec, EmissionMode, EmissionModel, FitMode, Orientation, Readout,
    ScoreLikelihood, StateTable, Transitions,
};
use sbbt::corpus::{ObservationEvent, TraceRecord};
use sbbt::provenance::Provenance;

/// Everything the exhaustive enumeration can answer about one trace.
pub struct PathEnumeration {
    /// P(z_T = s | o_{1:T}).
    pub final_posterior: [f64; 2],
    /// P(z_t = s | o_{1:T}) for every t.
    pub gammas: Vec<[f64; 2]>,
    /// Maximum path log-probability.
    pub best_log_prob: f64,
    /// log P(o_{1:T}).
    pub log_likelihood: f64,
}

/// Enumerate all 2^T latent paths of a record under a model.
pub fn enumerate_paths(record: &TraceRecord, model: &EmissionModel) -> PathEnumeration {
    let t_len = record.len();
    assert!(t_len <= 20, "enumeration oracle is exponential in T");
    let likelihoods: Vec<[f64; 2]> = record
        .events
        .iter()
        .map(|e| {
            let pair = model.likelihoods(e, &record.trace_id).expect("likelihood");
            [pair.low, pair.high]
        })
        .collect();

    let mut total = 0.0f64;
    let mut gamma_mass = vec![[0.0f64; 2]; t_len];
    let mut best_log_prob = f64::NEG_INFINITY;
    for assignment in 0..(1u64 << t_len) {
        let mut weight = 1.0f64;
        let mut log_prob = 0.0f64;
        let mut prev = usize::MAX;
        for t in 0..t_len {
            let state = ((assignment >> t) & 1) as usize;
            let transition = if t == 0 {
                model.initial_belief[state]
            } else {
                model.transitions.matrix_at(t + 1)[prev][state]
            };
            weight *= transition * likelihoods[t][state];
            log_prob += transition.ln() + likelihoods[t][state].ln();
            prev = state;
        }
        total += weight;
        for t in 0..t_len {
            gamma_mass[t][((assignment >> t) & 1) as usize] += weight;
        }
        if log_prob > best_log_prob {
            best_log_prob = log_prob;
        }
    }

    let gammas: Vec<[f64; 2]> = gamma_mass
        .iter()
        .map(|m| [m[0] / total, m[1] / total])
        .collect();
    PathEnumeration {
        final_posterior: gammas[t_len - 1],
        gammas,
        best_log_prob,
        log_likelihood: total.ln(),
    }
}

/// Truncate a record to its first `t` events (for prefix-posterior oracles).
pub fn truncated(record: &TraceRecord, t: usize) -> TraceRecord {
    TraceRecord {
        question_id: record.question_id.clone(),
        trace_id: record.trace_id.clone(),
        final_label: record.final_label,
        events: record.events[..t].to_vec(),
        meta: record.meta.clone(),
    }
}

/// Random strictly positive normalized table.
fn random_table(rng: &mut ChaCha8Rng, bins: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..bins).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Random score-only emission model over unit-interval bins.
pub fn random_model(rng: &mut ChaCha8Rng) -> EmissionModel {
    let bins = rng.gen_range(2..=4);
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let pi_high: f64 = rng.gen_range(0.05..0.95);
    EmissionModel {
        mode: EmissionMode::ScoreOnly,
        score: Some(ScoreLikelihood {
            binning: BinningSpec {
                kind: BinningKind::Histogram,
                requested_bins: bins,
                edges,
            },
            table: StateTable {
                low: random_table(rng, bins),
                high: random_table(rng, bins),
            },
        }),
        concept: None,
        joint: None,
        transitions: Transitions::Stationary {
            p_error: rng.gen_range(0.0..0.9),
            p_recover: rng.gen_range(0.0..0.9),
        },
        initial_belief: [1.0 - pi_high, pi_high],
        smoothing: 1.0,
        orientation: Orientation::Identity,
        readout: Readout::Identity,
        fit_mode: FitMode::Constructed,
        provenance: Provenance::calibration(),
    }
}

/// Random score trace with `t_len` events.
pub fn random_trace(rng: &mut ChaCha8Rng, id: usize, t_len: usize) -> TraceRecord {
    TraceRecord {
        question_id: format!("q{id}"),
        trace_id: format!("t{id}"),
        final_label: rng.gen_range(0..2u8),
        events: (1..=t_len)
            .map(|t| ObservationEvent::score_at(t, rng.gen::<f64>()))
            .collect(),
        meta: Default::default(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
