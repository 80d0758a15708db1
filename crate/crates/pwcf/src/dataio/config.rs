//! Run configuration and dataset manifests, both stored as UTF-8
//! `key = value` lines with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::format::{load_feature_matrix, load_labels, MatrixFormat};
use super::DatasetPair;

/// Loss-term switches for the ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    /// Drop the focal-triplet term entirely.
    pub disable_triplet: bool,
    /// Keep the triplet term but force every weight to 1.
    pub standard_triplet: bool,
    /// Drop the manifold term (no affinity graph is built).
    pub disable_manifold: bool,
    /// Drop the classification term; the classifier stays zero.
    pub disable_classifier: bool,
    /// Compare cross-domain samples by raw features instead of
    /// neighbor-class histograms, both in triplet mining and in the graph.
    pub disable_hfon: bool,
    /// Drop the quantization term; codes are never updated from their
    /// random initialization.
    pub disable_quantization: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 6] = [
        "disable_triplet",
        "standard_triplet",
        "disable_manifold",
        "disable_classifier",
        "disable_hfon",
        "disable_quantization",
    ];

    pub fn set(&mut self, name: &str, value: bool) -> Result<()> {
        match name {
            "disable_triplet" => self.disable_triplet = value,
            "standard_triplet" => self.standard_triplet = value,
            "disable_manifold" => self.disable_manifold = value,
            "disable_classifier" => self.disable_classifier = value,
            "disable_hfon" => self.disable_hfon = value,
            "disable_quantization" => self.disable_quantization = value,
            _ => return Err(Error::config(name, "unknown ablation flag")),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        match name {
            "disable_triplet" => Some(self.disable_triplet),
            "standard_triplet" => Some(self.standard_triplet),
            "disable_manifold" => Some(self.disable_manifold),
            "disable_classifier" => Some(self.disable_classifier),
            "disable_hfon" => Some(self.disable_hfon),
            "disable_quantization" => Some(self.disable_quantization),
            _ => None,
        }
    }
}

/// Training hyperparameters. Defaults follow the method's reference
/// settings: theta = 1e2, lambda1 = 1, lambda2 = 1e3, lambda3 = 1e4,
/// tau = 0.1; the remaining values are this implementation's defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Code length r.
    pub code_len: usize,
    /// Neighbor count k for pseudo-labels, histograms, and the graph.
    pub neighbors: usize,
    /// Triplet margin m (applied after standardization).
    pub margin: f64,
    /// Focal exponent gamma; 0 recovers the standard triplet loss.
    pub gamma: f64,
    /// Quantization weight theta.
    pub theta: f64,
    /// Classification weight lambda1.
    pub lambda1: f64,
    /// Classifier regularization weight lambda2.
    pub lambda2: f64,
    /// Manifold weight lambda3.
    pub lambda3: f64,
    /// Initial Cayley step size tau.
    pub tau: f64,
    /// Relative objective change below which the outer loop stops; 0 runs
    /// the full iteration budget.
    pub convergence_tol: f64,
    /// Maximum outer iterations T.
    pub max_iters: usize,
    /// Projection updates per outer iteration.
    pub inner_w_iters: usize,
    pub seed: u64,
    pub flags: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            code_len: 32,
            neighbors: 10,
            margin: 1.0,
            gamma: 1.0,
            theta: 1e2,
            lambda1: 1.0,
            lambda2: 1e3,
            lambda3: 1e4,
            tau: 0.1,
            convergence_tol: 1e-4,
            max_iters: 50,
            inner_w_iters: 5,
            seed: 0,
            flags: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.code_len < 1 {
            return Err(Error::config("r", "must be at least 1"));
        }
        if self.neighbors < 1 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau", "must be positive"));
        }
        if !(self.convergence_tol >= 0.0) || !self.convergence_tol.is_finite() {
            return Err(Error::config("convergence_tol", "must be finite and nonnegative"));
        }
        for (key, v) in [
            ("theta", self.theta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be finite and nonnegative"));
            }
        }
        if !self.margin.is_finite() {
            return Err(Error::config("m", "must be finite"));
        }
        Ok(())
    }

    /// Renders every field, defaults included, as `key = value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "r = {}", self.code_len);
        let _ = writeln!(out, "k = {}", self.neighbors);
        let _ = writeln!(out, "m = {:?}", self.margin);
        let _ = writeln!(out, "gamma = {:?}", self.gamma);
        let _ = writeln!(out, "theta = {:?}", self.theta);
        let _ = writeln!(out, "lambda1 = {:?}", self.lambda1);
        let _ = writeln!(out, "lambda2 = {:?}", self.lambda2);
        let _ = writeln!(out, "lambda3 = {:?}", self.lambda3);
        let _ = writeln!(out, "tau = {:?}", self.tau);
        let _ = writeln!(out, "convergence_tol = {:?}", self.convergence_tol);
        let _ = writeln!(out, "max_iters = {}", self.max_iters);
        let _ = writeln!(out, "inner_w_iters = {}", self.inner_w_iters);
        let _ = writeln!(out, "seed = {}", self.seed);
        for name in AblationFlags::NAMES {
            let _ = writeln!(out, "{} = {}", name, self.flags.get(name).unwrap());
        }
        out
    }
}

/// Splits `key = value` lines, dropping comments and blanks.
pub(crate) fn parse_kv_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(
                line,
                format!("line {}: expected `key = value`", lineno + 1),
            ));
        };
        out.push((
            lineno + 1,
            key.trim().to_string(),
            value.trim().to_string(),
        ));
    }
    Ok(out)
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    if let Ok(signed) = value.parse::<i64>() {
        if signed < 0 {
            return Err(Error::config(key, format!("must be nonnegative, got {signed}")));
        }
    }
    value
        .parse::<usize>()
        .map_err(|_| Error::config(key, format!("not a nonnegative integer: `{value}`")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::config(key, format!("not a number: `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("not a boolean: `{value}`"))),
    }
}

/// Parses a config document; missing keys keep their defaults, unknown keys
/// are rejected by name.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (_, key, value) in parse_kv_lines(text)? {
        match key.as_str() {
            "r" => cfg.code_len = parse_usize("r", &value)?,
            "k" => cfg.neighbors = parse_usize("k", &value)?,
            "m" => cfg.margin = parse_f64("m", &value)?,
            "gamma" => cfg.gamma = parse_f64("gamma", &value)?,
            "theta" => cfg.theta = parse_f64("theta", &value)?,
            "lambda1" => cfg.lambda1 = parse_f64("lambda1", &value)?,
            "lambda2" => cfg.lambda2 = parse_f64("lambda2", &value)?,
            "lambda3" => cfg.lambda3 = parse_f64("lambda3", &value)?,
            "tau" => cfg.tau = parse_f64("tau", &value)?,
            "convergence_tol" => cfg.convergence_tol = parse_f64("convergence_tol", &value)?,
            "max_iters" => cfg.max_iters = parse_usize("max_iters", &value)?,
            "inner_w_iters" => cfg.inner_w_iters = parse_usize("inner_w_iters", &value)?,
            "seed" => {
                cfg.seed = value
                    .parse::<u64>()
                    .map_err(|_| Error::config("seed", format!("not a u64: `{value}`")))?
            }
            other if AblationFlags::NAMES.contains(&other) => {
                let v = parse_bool(other, &value)?;
                cfg.flags.set(other, v)?;
            }
            other => return Err(Error::config(other, "unknown key")),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Ties the data files of one dataset pair together so commands take a
/// single handle. Paths are resolved relative to the manifest's directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub source_features: PathBuf,
    pub source_labels: PathBuf,
    pub target_features: PathBuf,
    pub target_labels: Option<PathBuf>,
    pub classes: usize,
    pub extra: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut source_features = None;
        let mut source_labels = None;
        let mut target_features = None;
        let mut target_labels = None;
        let mut classes = None;
        let mut extra = BTreeMap::new();
        for (_, key, value) in parse_kv_lines(&text)? {
            match key.as_str() {
                "source_features" => source_features = Some(base.join(&value)),
                "source_labels" => source_labels = Some(base.join(&value)),
                "target_features" => target_features = Some(base.join(&value)),
                "target_labels" => target_labels = Some(base.join(&value)),
                "classes" => classes = Some(parse_usize("classes", &value)?),
                other => {
                    extra.insert(other.to_string(), value);
                }
            }
        }
        let missing = |what: &str| Error::config(what, "missing from manifest");
        Ok(Manifest {
            source_features: source_features.ok_or_else(|| missing("source_features"))?,
            source_labels: source_labels.ok_or_else(|| missing("source_labels"))?,
            target_features: target_features.ok_or_else(|| missing("target_features"))?,
            target_labels,
            classes: classes.ok_or_else(|| missing("classes"))?,
            extra,
        })
    }

    pub fn load_pair(&self) -> Result<DatasetPair> {
        let source = load_feature_matrix(&self.source_features, MatrixFormat::Binary)?;
        let labels = load_labels(&self.source_labels, self.classes)?;
        let target = load_feature_matrix(&self.target_features, MatrixFormat::Binary)?;
        let truth = match &self.target_labels {
            Some(p) => Some(load_labels(p, self.classes)?),
            None => None,
        };
        DatasetPair::new(source, labels, target, truth)
    }
}
