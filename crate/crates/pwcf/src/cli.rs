//! Command-line front end: data synthesis, training, encoding, retrieval,
//! evaluation, and ablation sweeps.
//!
//! Every failure goes to standard error with the prefix `pwcf: error:` and
//! a nonzero exit code; every run prints the fully resolved configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::AnyModel;
use crate::dataio::{
    generate_synthetic_pair, parse_config, save_feature_matrix, save_labels, AblationFlags,
    Manifest, MatrixFormat, RunConfig, ShiftSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    render_kv, render_table, run_trials, write_curve_file, evaluate, EvalReport, Method, Protocol,
};
use crate::hamming::{retrieve, BinaryCodes};
use crate::optimizer::train;

#[derive(Parser, Debug)]
#[command(name = "pwcf", version, about = "Compact binary codes for domain adaptive retrieval")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-domain dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Encode a feature file into packed binary codes with a model.
    Encode(EncodeArgs),
    /// Rank a database codes file for every query code.
    Retrieve(RetrieveArgs),
    /// Evaluate a trained model over repeated random query splits.
    Eval(EvalArgs),
    /// Train and evaluate the ablation variants side by side.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Source-domain sample count.
    #[arg(long = "n-source", default_value_t = 1000)]
    n_source: usize,
    /// Target-domain sample count.
    #[arg(long = "n-target", default_value_t = 1000)]
    n_target: usize,
    /// Rotation angle in degrees per rotated coordinate plane.
    #[arg(long = "rotation-deg", default_value_t = 0.0)]
    rotation_deg: f64,
    /// Number of coordinate planes the rotation acts on.
    #[arg(long = "rotation-pairs", default_value_t = 1)]
    rotation_pairs: usize,
    /// Translation length along the all-ones direction.
    #[arg(long, default_value_t = 0.0)]
    translation: f64,
    /// Target-domain noise multiplier.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the data files and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output model path; the loss trace lands next to it.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured code length.
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated ablation flags to switch on.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    /// Model file (trained or baseline).
    #[arg(long)]
    model: PathBuf,
    /// Feature file to encode.
    #[arg(long)]
    input: PathBuf,
    /// Output codes path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    /// Query codes file.
    #[arg(long)]
    queries: PathBuf,
    /// Database codes file.
    #[arg(long)]
    database: PathBuf,
    /// Output ranking path.
    #[arg(long)]
    out: PathBuf,
    /// Keep only the best N matches per query.
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Cross,
    Single,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Protocol {
        match p {
            ProtocolArg::Cross => Protocol::CrossDomain,
            ProtocolArg::Single => Protocol::SingleDomain,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model file to evaluate (no retraining happens).
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest; target ground truth is required.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    /// Expected code length; rejected if the model disagrees.
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Queries drawn from the target domain per trial.
    #[arg(long, default_value_t = 100)]
    queries: usize,
    /// Comma-separated curve positions.
    #[arg(long = "k-grid", value_delimiter = ',')]
    k_grid: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output prefix for the report files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cross")]
    protocol: ProtocolArg,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 100)]
    queries: usize,
    #[arg(long = "k-grid", value_delimiter = ',')]
    k_grid: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Variants to run (default: all six plus the full model).
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Output prefix for the comparison table.
    #[arg(long)]
    out: PathBuf,
}

/// Seed precedence: `--seed`, then `PWCF_SEED`, then the config value.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("PWCF_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map_err(|_| Error::config("PWCF_SEED", format!("not a u64: `{v}`"))),
        Err(_) => Ok(fallback),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_overrides(
    config: &mut RunConfig,
    bits: Option<usize>,
    seed: Option<u64>,
    ablate: &[String],
) -> Result<()> {
    if let Some(b) = bits {
        config.code_len = b;
    }
    config.seed = resolve_seed(seed, config.seed)?;
    for flag in ablate {
        let name = flag.trim();
        if name.is_empty() {
            continue;
        }
        config.flags.set(name, true)?;
    }
    config.validate()
}

fn emit_config(config: &RunConfig) {
    println!("resolved configuration:");
    for line in config.render().lines() {
        println!("  {line}");
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Retrieve(args) => cmd_retrieve(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let seed = resolve_seed(args.seed, 0)?;
    let shift = ShiftSpec {
        rotation_deg: args.rotation_deg,
        rotation_pairs: args.rotation_pairs,
        translation: args.translation,
        noise: args.noise,
    };
    let pair = generate_synthetic_pair(
        args.classes,
        args.dim,
        args.n_source,
        args.n_target,
        &shift,
        seed,
    )?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    save_feature_matrix(args.out.join("source_features.pwf"), &pair.source_features, MatrixFormat::Binary)?;
    save_labels(args.out.join("source_labels.txt"), &pair.source_labels)?;
    save_feature_matrix(args.out.join("target_features.pwf"), &pair.target_features, MatrixFormat::Binary)?;
    let truth = pair.target_truth.as_ref().expect("synthetic pairs carry truth");
    save_labels(args.out.join("target_labels.txt"), truth)?;

    let counts = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    let mut manifest = String::new();
    let _ = writeln!(manifest, "source_features = source_features.pwf");
    let _ = writeln!(manifest, "source_labels = source_labels.txt");
    let _ = writeln!(manifest, "target_features = target_features.pwf");
    let _ = writeln!(manifest, "target_labels = target_labels.txt");
    let _ = writeln!(manifest, "classes = {}", args.classes);
    let _ = writeln!(manifest, "dim = {}", args.dim);
    let _ = writeln!(manifest, "n_source = {}", args.n_source);
    let _ = writeln!(manifest, "n_target = {}", args.n_target);
    let _ = writeln!(manifest, "seed = {seed}");
    let _ = writeln!(manifest, "rotation_deg = {:?}", args.rotation_deg);
    let _ = writeln!(manifest, "rotation_pairs = {}", args.rotation_pairs);
    let _ = writeln!(manifest, "translation = {:?}", args.translation);
    let _ = writeln!(manifest, "noise = {:?}", args.noise);
    let _ = writeln!(manifest, "counts_source = {}", counts(&pair.source_labels.class_counts()));
    let _ = writeln!(manifest, "counts_target = {}", counts(&truth.class_counts()));
    write_text(&args.out.join("manifest.cfg"), &manifest)?;

    println!("synthesized {} classes, dim {}: {} source + {} target samples (seed {seed})",
        args.classes, args.dim, args.n_source, args.n_target);
    println!("manifest: {}", args.out.join("manifest.cfg").display());
    Ok(())
}

/// Loss-trace table: one row per recorded iteration plus a weights header
/// so the total column can be recombined from the term columns.
fn render_trace(model: &crate::optimizer::PwcfModel) -> String {
    let cfg = &model.config;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# theta={:?} lambda1={:?} lambda2={:?} lambda3={:?}",
        cfg.theta, cfg.lambda1, cfg.lambda2, cfg.lambda3
    );
    let _ = writeln!(
        out,
        "# iter triplet quantization classification regularizer manifold total ortho_error"
    );
    for (i, rec) in model.trace.iter().enumerate() {
        let l = &rec.losses;
        let _ = writeln!(
            out,
            "{i} {:?} {:?} {:?} {:?} {:?} {:?} {:e}",
            l.triplet, l.quantization, l.classification, l.regularizer, l.manifold, l.total,
            rec.ortho_error
        );
    }
    out
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    apply_overrides(&mut config, args.bits, args.seed, &args.ablate)?;
    emit_config(&config);

    let manifest = Manifest::load(&args.data)?;
    let pair = manifest.load_pair()?;
    let (model, codes) = train(&pair.train_view(), &config)?;
    model.save(&args.out)?;

    let trace_path = args.out.with_extension("trace.txt");
    write_text(&trace_path, &render_trace(&model))?;

    let codes_path = args.out.with_extension("codes.pwb");
    BinaryCodes::pack(&codes.source)?.save(&codes_path)?;
    let target_codes_path = args.out.with_extension("target_codes.pwb");
    BinaryCodes::pack(&codes.target)?.save(&target_codes_path)?;

    let last = model.trace.last().expect("trace has the initial record");
    println!(
        "trained {} iterations: total {:.6e} -> {:.6e} (ortho drift {:.2e})",
        model.trace.len() - 1,
        model.trace[0].losses.total,
        last.losses.total,
        last.ortho_error
    );
    println!("model: {}", args.out.display());
    println!("trace: {}", trace_path.display());
    println!("source codes: {}", codes_path.display());
    println!("target codes: {}", target_codes_path.display());
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let model = AnyModel::load(&args.model)?;
    let features = crate::dataio::load_feature_matrix(&args.input, MatrixFormat::Binary)?;
    if features.dim() != model.dim() {
        return Err(Error::shape("encode feature dimension", model.dim(), features.dim()));
    }
    let codes = model.encode(&features)?;
    codes.save(&args.out)?;
    println!(
        "encoded {} samples to {}-bit codes ({} model)",
        codes.count(),
        codes.code_len(),
        model.kind_name()
    );
    println!("codes: {}", args.out.display());
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let queries = BinaryCodes::load(&args.queries)?;
    let database = BinaryCodes::load(&args.database)?;
    let ranked = retrieve(&queries, &database)?;
    let mut out = String::new();
    let _ = writeln!(out, "# query_index: database_index:distance ...");
    for (q, neighbors) in ranked.neighbors.iter().enumerate() {
        let limit = args.top.unwrap_or(neighbors.len()).min(neighbors.len());
        let entries: Vec<String> = neighbors[..limit]
            .iter()
            .map(|&(i, d)| format!("{i}:{d}"))
            .collect();
        let _ = writeln!(out, "{q}: {}", entries.join(" "));
    }
    write_text(&args.out, &out)?;
    println!(
        "ranked {} queries against {} database codes",
        queries.count(),
        database.count()
    );
    println!("ranking: {}", args.out.display());
    Ok(())
}

/// Fixed-model evaluation: per trial, a seeded query split of the target
/// domain is encoded and ranked against the protocol's database, without
/// retraining.
fn eval_fixed_model(
    model: &AnyModel,
    pair: &crate::dataio::DatasetPair,
    protocol: Protocol,
    trials: usize,
    queries_per_trial: usize,
    k_grid: &[usize],
    base_seed: u64,
) -> Result<EvalReport> {
    use rand::{Rng, SeedableRng};
    let truth = pair
        .target_truth
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("evaluation requires target ground truth".into()))?;
    let n_t = pair.target_features.count();
    if queries_per_trial == 0 || queries_per_trial >= n_t {
        return Err(Error::InvalidInput(format!(
            "queries per trial must be in [1, {n_t}), got {queries_per_trial}"
        )));
    }
    let mut trial_maps = Vec::with_capacity(trials);
    let mut precision_acc: Vec<(usize, f64)> = Vec::new();
    let mut recall_acc: Vec<(usize, f64)> = Vec::new();
    let (mut num_queries, mut num_database) = (0, 0);
    for t in 0..trials {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(t as u64));
        let mut all: Vec<usize> = (0..n_t).collect();
        for i in 0..queries_per_trial {
            let j = rng.random_range(i..n_t);
            all.swap(i, j);
        }
        let mut query_idx = all[..queries_per_trial].to_vec();
        let mut rest_idx = all[queries_per_trial..].to_vec();
        query_idx.sort_unstable();
        rest_idx.sort_unstable();

        let query_features = pair.target_features.select_columns(&query_idx);
        let queries = model.encode(&query_features)?;
        let (database, db_labels) = match protocol {
            Protocol::CrossDomain => (
                model.encode(&pair.source_features)?,
                pair.source_labels.labels().to_vec(),
            ),
            Protocol::SingleDomain => {
                let rest_features = pair.target_features.select_columns(&rest_idx);
                (
                    model.encode(&rest_features)?,
                    truth.select(&rest_idx).labels().to_vec(),
                )
            }
        };
        let ranked = retrieve(&queries, &database)?;
        let query_labels: Vec<usize> = query_idx.iter().map(|&i| truth.get(i)).collect();
        let report = evaluate(&ranked, &query_labels, &db_labels, k_grid)?;
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
    let map = trial_maps.iter().sum::<f64>() / trials as f64;
    let map_std = if trials > 1 {
        (trial_maps.iter().map(|m| (m - map) * (m - map)).sum::<f64>() / (trials - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        map,
        map_std,
        trial_maps,
        precision_at: precision_acc.into_iter().map(|(k, v)| (k, v / trials as f64)).collect(),
        recall_at: recall_acc.into_iter().map(|(k, v)| (k, v / trials as f64)).collect(),
        num_queries,
        num_database,
    })
}

fn write_report_files(prefix: &Path, report: &EvalReport) -> Result<()> {
    let with_suffix = |suffix: &str| -> PathBuf {
        let mut name = prefix.file_name().unwrap_or_default().to_os_string();
        name.push(suffix);
        prefix.with_file_name(name)
    };
    write_text(&with_suffix(".txt"), &render_table(report))?;
    write_text(&with_suffix(".kv"), &render_kv(report))?;
    if !report.precision_at.is_empty() {
        write_curve_file(with_suffix(".precision.txt"), &report.precision_at)?;
        write_curve_file(with_suffix(".recall.txt"), &report.recall_at)?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = AnyModel::load(&args.model)?;
    if let Some(bits) = args.bits {
        if bits != model.code_len() {
            return Err(Error::shape("model code length", bits, model.code_len()));
        }
    }
    let manifest = Manifest::load(&args.data)?;
    let pair = manifest.load_pair()?;
    if pair.dim() != model.dim() {
        return Err(Error::shape("feature dimension", model.dim(), pair.dim()));
    }
    let seed = resolve_seed(args.seed, 0)?;
    let grid = args
        .k_grid
        .iter()
        .map(|k| k.to_string())
        .collect::<Vec<_>>()
        .join(",");
    println!(
        "evaluating {} model ({} bits) under the {} protocol: {} trials x {} queries, \
         k-grid [{grid}], seed {seed}",
        model.kind_name(),
        model.code_len(),
        Protocol::from(args.protocol).name(),
        args.trials,
        args.queries
    );
    let report = eval_fixed_model(
        &model,
        &pair,
        args.protocol.into(),
        args.trials,
        args.queries,
        &args.k_grid,
        seed,
    )?;
    write_report_files(&args.out, &report)?;
    print!("{}", render_table(&report));
    println!("report prefix: {}", args.out.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    apply_overrides(&mut config, args.bits, args.seed, &[])?;
    emit_config(&config);

    let manifest = Manifest::load(&args.data)?;
    let pair = manifest.load_pair()?;
    let variants: Vec<String> = if args.ablate.is_empty() {
        AblationFlags::NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        args.ablate.clone()
    };

    let protocol: Protocol = args.protocol.into();
    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    let full = run_trials(
        &pair,
        &Method::Pwcf(config.clone()),
        protocol,
        args.trials,
        args.queries,
        &args.k_grid,
    )?;
    println!("full: map {:.4} (std {:.4})", full.map, full.map_std);
    rows.push(("full".to_string(), full));
    for name in &variants {
        let mut cfg = config.clone();
        cfg.flags.set(name.trim(), true)?;
        let report = run_trials(
            &pair,
            &Method::Pwcf(cfg),
            protocol,
            args.trials,
            args.queries,
            &args.k_grid,
        )?;
        println!("{name}: map {:.4} (std {:.4})", report.map, report.map_std);
        rows.push((name.clone(), report));
    }

    let mut table = String::new();
    let _ = writeln!(table, "{:<24} {:>10} {:>10}", "variant", "map", "std");
    let mut kv = String::new();
    for (name, report) in &rows {
        let _ = writeln!(table, "{name:<24} {:>10.4} {:>10.4}", report.map, report.map_std);
        let _ = writeln!(kv, "{name}_map={:.6}", report.map);
        let _ = writeln!(kv, "{name}_map_std={:.6}", report.map_std);
    }
    let with_suffix = |suffix: &str| -> PathBuf {
        let mut name = args.out.file_name().unwrap_or_default().to_os_string();
        name.push(suffix);
        args.out.with_file_name(name)
    };
    write_text(&with_suffix(".txt"), &table)?;
    write_text(&with_suffix(".kv"), &kv)?;
    print!("{table}");
    println!("ablation report prefix: {}", args.out.display());
    Ok(())
}
