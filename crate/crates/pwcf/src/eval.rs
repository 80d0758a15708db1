//! Retrieval quality: average precision, MAP, precision/recall at k, and
//! the repeated random-query-split protocol.
//!
//! Per trial, a fixed number of target samples become queries and the rest
//! stay as training data; the encoder is fitted per the chosen method, the
//! queries are ranked against the protocol's database (source codes for
//! cross-domain, remaining target codes for single-domain), and class
//! labels decide relevance.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{fit_baseline, BaselineKind};
use crate::dataio::{DatasetPair, FeatureMatrix, LabelVector, RunConfig, TrainView};
use crate::error::{Error, Result};
use crate::hamming::{retrieve, BinaryCodes, RankedResult};
use crate::optimizer::train;

/// Retrieval scores, aggregated over one or more trials.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean average precision over queries, averaged over trials.
    pub map: f64,
    /// Sample standard deviation of the per-trial MAP (0 for one trial).
    pub map_std: f64,
    pub trial_maps: Vec<f64>,
    /// Mean precision within the top k, per requested k (clamped to the
    /// database size).
    pub precision_at: Vec<(usize, f64)>,
    /// Mean recall within the top k; queries with no relevant items are
    /// excluded from recall averaging.
    pub recall_at: Vec<(usize, f64)>,
    pub num_queries: usize,
    pub num_database: usize,
}

/// `AP = (1/R) * sum over relevant positions p of (relevant <= p) / p`,
/// and 0 when nothing is relevant.
pub fn average_precision(flags: &[bool]) -> f64 {
    let relevant = flags.iter().filter(|&&f| f).count();
    if relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &flag) in flags.iter().enumerate() {
        if flag {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    sum / relevant as f64
}

/// Scores one ranked result set against ground-truth labels.
pub fn evaluate(
    results: &RankedResult,
    query_labels: &[usize],
    db_labels: &[usize],
    k_grid: &[usize],
) -> Result<EvalReport> {
    let num_queries = results.num_queries();
    if num_queries == 0 {
        return Err(Error::InvalidInput("no queries to evaluate".into()));
    }
    if query_labels.len() != num_queries {
        return Err(Error::shape("query label count", num_queries, query_labels.len()));
    }
    let num_database = results.neighbors[0].len();
    if db_labels.len() != num_database {
        return Err(Error::shape("database label count", num_database, db_labels.len()));
    }

    let clamped: Vec<usize> = k_grid.iter().map(|&k| k.min(num_database)).collect();
    if clamped.iter().zip(k_grid).any(|(&c, &k)| c != k) {
        eprintln!(
            "pwcf: warning: clamped curve positions beyond the database size ({num_database})"
        );
    }

    let mut ap_sum = 0.0;
    let mut precision_sums = vec![0.0; clamped.len()];
    let mut recall_sums = vec![0.0; clamped.len()];
    let mut recall_queries = 0usize;
    for (q, ranking) in results.neighbors.iter().enumerate() {
        if ranking.len() != num_database {
            return Err(Error::shape("ranking length", num_database, ranking.len()));
        }
        let flags: Vec<bool> = ranking
            .iter()
            .map(|&(i, _)| db_labels[i] == query_labels[q])
            .collect();
        ap_sum += average_precision(&flags);

        let total_relevant = flags.iter().filter(|&&f| f).count();
        let mut cumulative = vec![0usize; flags.len() + 1];
        for (i, &f) in flags.iter().enumerate() {
            cumulative[i + 1] = cumulative[i] + usize::from(f);
        }
        for (slot, &k) in clamped.iter().enumerate() {
            if k == 0 {
                continue;
            }
            precision_sums[slot] += cumulative[k] as f64 / k as f64;
            if total_relevant > 0 {
                recall_sums[slot] += cumulative[k] as f64 / total_relevant as f64;
            }
        }
        if total_relevant > 0 {
            recall_queries += 1;
        }
    }

    let map = ap_sum / num_queries as f64;
    let precision_at = clamped
        .iter()
        .zip(&precision_sums)
        .map(|(&k, &s)| (k, s / num_queries as f64))
        .collect();
    let recall_at = clamped
        .iter()
        .zip(&recall_sums)
        .map(|(&k, &s)| {
            let denom = recall_queries.max(1) as f64;
            (k, s / denom)
        })
        .collect();
    Ok(EvalReport {
        map,
        map_std: 0.0,
        trial_maps: vec![map],
        precision_at,
        recall_at,
        num_queries,
        num_database,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Queries from the target domain against the source database.
    CrossDomain,
    /// Queries from the target domain against the remaining target samples.
    SingleDomain,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::CrossDomain => "cross",
            Protocol::SingleDomain => "single",
        }
    }
}

/// Which encoder a trial fits.
#[derive(Debug, Clone)]
pub enum Method {
    Pwcf(RunConfig),
    Lsh { code_len: usize, seed: u64 },
    PcaSign { code_len: usize, seed: u64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Pwcf(_) => "pwcf",
            Method::Lsh { .. } => "lsh",
            Method::PcaSign { .. } => "pca_sign",
        }
    }

    fn base_seed(&self) -> u64 {
        match self {
            Method::Pwcf(cfg) => cfg.seed,
            Method::Lsh { seed, .. } | Method::PcaSign { seed, .. } => *seed,
        }
    }
}

/// Draws `count` distinct indices from `0..n`, returned sorted, plus the
/// sorted complement.
fn split_indices(n: usize, count: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut all: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        all.swap(i, j);
    }
    let mut chosen = all[..count].to_vec();
    let mut rest = all[count..].to_vec();
    chosen.sort_unstable();
    rest.sort_unstable();
    (chosen, rest)
}

/// The per-trial encodings of queries and database.
struct TrialCodes {
    queries: BinaryCodes,
    database: BinaryCodes,
    db_labels: Vec<usize>,
}

fn run_one_trial(
    pair: &DatasetPair,
    truth: &LabelVector,
    method: &Method,
    protocol: Protocol,
    query_idx: &[usize],
    rest_idx: &[usize],
    trial: u64,
) -> Result<TrialCodes> {
    let query_features = pair.target_features.select_columns(query_idx);
    let rest_features = pair.target_features.select_columns(rest_idx);
    let rest_truth = truth.select(rest_idx);

    match method {
        Method::Pwcf(config) => {
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(trial);
            let view = TrainView {
                source: &pair.source_features,
                source_labels: &pair.source_labels,
                target: &rest_features,
            };
            let (model, codes) = train(&view, &cfg)?;
            let queries = model.encode(&query_features)?;
            let (database, db_labels) = match protocol {
                Protocol::CrossDomain => (
                    BinaryCodes::pack(&codes.source)?,
                    pair.source_labels.labels().to_vec(),
                ),
                Protocol::SingleDomain => (
                    BinaryCodes::pack(&codes.target)?,
                    rest_truth.labels().to_vec(),
                ),
            };
            Ok(TrialCodes {
                queries,
                database,
                db_labels,
            })
        }
        Method::Lsh { code_len, seed } | Method::PcaSign { code_len, seed } => {
            let kind = match method {
                Method::Lsh { .. } => BaselineKind::Lsh,
                _ => BaselineKind::PcaSign,
            };
            // baselines are unsupervised: fit on all pooled training data
            let d = pair.dim();
            let n_pool = rest_features.count() + pair.source_features.count();
            let mut pooled = nalgebra::DMatrix::zeros(d, n_pool);
            pooled
                .view_mut((0, 0), (d, rest_features.count()))
                .copy_from(rest_features.data());
            pooled
                .view_mut((0, rest_features.count()), (d, pair.source_features.count()))
                .copy_from(pair.source_features.data());
            let pooled = FeatureMatrix::new(pooled)?;
            let model = fit_baseline(kind, &pooled, *code_len, seed.wrapping_add(trial))?;
            let queries = model.encode(&query_features)?;
            let (database, db_labels) = match protocol {
                Protocol::CrossDomain => (
                    model.encode(&pair.source_features)?,
                    pair.source_labels.labels().to_vec(),
                ),
                Protocol::SingleDomain => {
                    (model.encode(&rest_features)?, rest_truth.labels().to_vec())
                }
            };
            Ok(TrialCodes {
                queries,
                database,
                db_labels,
            })
        }
    }
}

/// Repeats the split/fit/retrieve/score protocol and aggregates MAP and
/// the precision/recall curves over trials. Trial `t` draws its query
/// split from `base seed + t`.
pub fn run_trials(
    pair: &DatasetPair,
    method: &Method,
    protocol: Protocol,
    num_trials: usize,
    queries_per_trial: usize,
    k_grid: &[usize],
) -> Result<EvalReport> {
    let truth = pair
        .target_truth
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("evaluation requires target ground truth".into()))?;
    let n_t = pair.target_features.count();
    if queries_per_trial == 0 {
        return Err(Error::InvalidInput("need at least one query per trial".into()));
    }
    if queries_per_trial >= n_t {
        return Err(Error::InvalidInput(format!(
            "queries_per_trial {queries_per_trial} leaves no target training samples (n_t = {n_t})"
        )));
    }
    if num_trials == 0 {
        return Err(Error::InvalidInput("need at least one trial".into()));
    }

    let base_seed = method.base_seed();
    let mut trial_maps = Vec::with_capacity(num_trials);
    let mut precision_acc: Vec<(usize, f64)> = Vec::new();
    let mut recall_acc: Vec<(usize, f64)> = Vec::new();
    let mut num_queries = 0;
    let mut num_database = 0;

    for t in 0..num_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(t as u64));
        let (query_idx, rest_idx) = split_indices(n_t, queries_per_trial, &mut rng);
        let codes = run_one_trial(pair, truth, method, protocol, &query_idx, &rest_idx, t as u64)?;
        let ranked = retrieve(&codes.queries, &codes.database)?;
        let query_labels: Vec<usize> = query_idx.iter().map(|&i| truth.get(i)).collect();
        let report = evaluate(&ranked, &query_labels, &codes.db_labels, k_grid)?;

        trial_maps.push(report.map);
        num_queries = report.num_queries;
        num_database = report.num_database;
        if precision_acc.is_empty() {
            precision_acc = report.precision_at.clone();
            recall_acc = report.recall_at.clone();
        } else {
            for (acc, cur) in precision_acc.iter_mut().zip(&report.precision_at) {
                acc.1 += cur.1;
            }
            for (acc, cur) in recall_acc.iter_mut().zip(&report.recall_at) {
                acc.1 += cur.1;
            }
        }
    }

    let scale = |acc: Vec<(usize, f64)>| -> Vec<(usize, f64)> {
        acc.into_iter().map(|(k, v)| (k, v / num_trials as f64)).collect()
    };
    let map = trial_maps.iter().sum::<f64>() / num_trials as f64;
    let map_std = if num_trials > 1 {
        let var = trial_maps.iter().map(|m| (m - map) * (m - map)).sum::<f64>()
            / (num_trials - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        map,
        map_std,
        trial_maps,
        precision_at: scale(precision_acc),
        recall_at: scale(recall_acc),
        num_queries,
        num_database,
    })
}

/// Machine-readable `key=value` rendering.
pub fn render_kv(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "map={:.6}", report.map);
    let _ = writeln!(out, "map_std={:.6}", report.map_std);
    let _ = writeln!(out, "num_queries={}", report.num_queries);
    let _ = writeln!(out, "num_database={}", report.num_database);
    let _ = writeln!(out, "trials={}", report.trial_maps.len());
    for (t, m) in report.trial_maps.iter().enumerate() {
        let _ = writeln!(out, "trial_{t}_map={m:.6}");
    }
    for &(k, v) in &report.precision_at {
        let _ = writeln!(out, "precision_{k}={v:.6}");
    }
    for &(k, v) in &report.recall_at {
        let _ = writeln!(out, "recall_{k}={v:.6}");
    }
    out
}

/// Human-readable table rendering.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "queries: {}   database: {}   trials: {}",
        report.num_queries,
        report.num_database,
        report.trial_maps.len()
    );
    let _ = writeln!(out, "MAP: {:.4} (std {:.4})", report.map, report.map_std);
    for (t, m) in report.trial_maps.iter().enumerate() {
        let _ = writeln!(out, "  trial {t}: map {m:.4}");
    }
    if !report.precision_at.is_empty() {
        let _ = writeln!(out, "{:>8} {:>12} {:>12}", "k", "precision", "recall");
        for (&(k, p), &(_, r)) in report.precision_at.iter().zip(&report.recall_at) {
            let _ = writeln!(out, "{k:>8} {p:>12.4} {r:>12.4}");
        }
    }
    out
}

/// Two-column curve file, one `k value` line per grid point.
pub fn write_curve_file(path: impl AsRef<Path>, curve: &[(usize, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for &(k, v) in curve {
        let _ = writeln!(out, "{k} {v:.6}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
