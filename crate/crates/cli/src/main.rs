//! Experiment command line: dataset generation, model fitting, scoring,
//! evaluation, hyperparameter sweeps, and leave-one-domain-out runs.
//!
//! Run verbs (`train`, `sweep`, `lodo`) take their settings from a JSON run
//! config (`--config`), from flags mirroring its fields, or both — flags win.
//! Exit code is 0 only when every grid point completed.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use divad::dataset::{extract_windows, load_dataset, Role, Sequence};
use divad::experiment::{
    evaluate_scored, load_bundle, read_summary_csv, render_report, run_experiment, run_lodo,
    score_fitted, DatasetSource, GridConfig, Method, MetricsEntry, RunConfig, RunSummary,
    StrategyChoice, Variant,
};
use divad::scoring::{
    score_windows, smooth, write_scores_csv, ScoredSequence, Smoothing, GAMMA_GRID,
};
use divad::synthgen::{describe, generate, validate, write_dataset, SynthConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "divad", version, about = "Domain-shift-robust anomaly detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset and write it to disk.
    Generate(GenerateArgs),
    /// Fit a single hyperparameter point end to end.
    Train(RunArgs),
    /// Score sequences with a persisted model bundle.
    Score(ScoreArgs),
    /// Re-evaluate a persisted model bundle against a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Run the full hyperparameter grid.
    Sweep(RunArgs),
    /// Leave-one-domain-out protocol over the grid.
    Lodo(RunArgs),
    /// Print the best rows of a finished run.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator config file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator seed (overrides the config's).
    #[arg(long)]
    seed: u64,
    /// Directory for traces, labels, and the manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Run config file (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest path.
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Generator config file for an in-memory synthetic dataset.
    #[arg(long)]
    synth: Option<PathBuf>,
    /// divad-g | divad-gm | pca | maha | dense-ae | dense-vae
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// dense | recurrent (two-encoder methods only)
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// prior | agg-posterior | both (two-encoder methods only)
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<StrategyChoice>,
    #[arg(long)]
    window_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed run directory name segment instead of a timestamp.
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    alpha_d: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    encoding_dim: Option<Vec<usize>>,
    /// Mixture components (mixture-prior method only).
    #[arg(long, value_delimiter = ',')]
    components: Option<Vec<usize>>,
    /// Learning-rate grid searched within each fit.
    #[arg(long, value_delimiter = ',')]
    lr: Option<Vec<f64>>,
    /// Smoothing factors evaluated per grid point.
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Hidden widths of the dense stacks.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    vae_samples: Option<usize>,
    #[arg(long)]
    conv_filters: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    gru_units: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Persisted model bundle (bundle.json of a finished grid point).
    #[arg(long)]
    bundle: PathBuf,
    /// Dataset manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Smoothing factor for the smoothed column.
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// prior | agg-posterior | both (two-encoder bundles only)
    #[arg(long, value_parser = parse_strategy, default_value = "prior")]
    strategy: StrategyChoice,
    /// Score training-role sequences too.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Persisted model bundle (bundle.json of a finished grid point).
    #[arg(long)]
    bundle: PathBuf,
    /// Dataset manifest path; test sequences need labels.
    #[arg(long)]
    data: PathBuf,
    /// Smoothing factors to evaluate (defaults to the standard grid).
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    /// prior | agg-posterior | both (two-encoder bundles only)
    #[arg(long, value_parser = parse_strategy, default_value = "prior")]
    strategy: StrategyChoice,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory holding summary.csv or lodo_summary.csv.
    #[arg(long)]
    run: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Ok(match s {
        "divad-g" => Method::DivadG,
        "divad-gm" => Method::DivadGm,
        "pca" => Method::Pca,
        "maha" => Method::Maha,
        "dense-ae" => Method::DenseAe,
        "dense-vae" => Method::DenseVae,
        _ => {
            return Err(format!(
                "unknown method `{s}` (divad-g | divad-gm | pca | maha | dense-ae | dense-vae)"
            ))
        }
    })
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Ok(match s {
        "dense" => Variant::Dense,
        "recurrent" => Variant::Recurrent,
        _ => return Err(format!("unknown variant `{s}` (dense | recurrent)")),
    })
}

fn parse_strategy(s: &str) -> Result<StrategyChoice, String> {
    Ok(match s {
        "prior" => StrategyChoice::Prior,
        "agg-posterior" => StrategyChoice::AggPosterior,
        "both" => StrategyChoice::Both,
        _ => return Err(format!("unknown strategy `{s}` (prior | agg-posterior | both)")),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn flag_dataset(args: &RunArgs) -> Result<Option<DatasetSource>> {
    Ok(match (&args.data, &args.synth) {
        (Some(path), _) => Some(DatasetSource::Manifest { path: path.clone() }),
        (None, Some(path)) => Some(DatasetSource::Synth {
            config: read_json(path)?,
        }),
        (None, None) => None,
    })
}

/// Config file first, then flag overrides; without a file the required
/// fields must all come from flags.
fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let dataset = flag_dataset(args)?;
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            dataset: dataset
                .clone()
                .context("--data or --synth is required without --config")?,
            method: args.method.context("--method is required without --config")?,
            variant: Variant::default(),
            grid: GridConfig::default(),
            strategy: StrategyChoice::default(),
            window_len: args
                .window_len
                .context("--window-len is required without --config")?,
            seed: args.seed.context("--seed is required without --config")?,
            output_dir: args.out.clone().context("--out is required without --config")?,
            run_id: None,
            fit: Default::default(),
        },
    };
    if let Some(v) = dataset {
        cfg.dataset = v;
    }
    if let Some(v) = args.method {
        cfg.method = v;
    }
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(v) = args.strategy {
        cfg.strategy = v;
    }
    if let Some(v) = args.window_len {
        cfg.window_len = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.out {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &args.run_id {
        cfg.run_id = Some(v.clone());
    }
    macro_rules! set {
        ($($target:expr => $flag:ident),* $(,)?) => {
            $(if let Some(v) = &args.$flag { $target = v.clone(); })*
        };
    }
    set!(
        cfg.grid.beta => beta,
        cfg.grid.alpha_d => alpha_d,
        cfg.grid.encoding_dim => encoding_dim,
        cfg.grid.components => components,
        cfg.grid.lr => lr,
        cfg.grid.gamma => gamma,
        cfg.fit.hidden => hidden,
    );
    set!(
        cfg.fit.epochs => epochs,
        cfg.fit.patience => patience,
        cfg.fit.batch_size => batch_size,
        cfg.fit.weight_decay => weight_decay,
        cfg.fit.val_fraction => val_fraction,
        cfg.fit.vae_samples => vae_samples,
        cfg.fit.conv_filters => conv_filters,
        cfg.fit.kernel => kernel,
        cfg.fit.stride => stride,
        cfg.fit.gru_units => gru_units,
    );
    Ok(cfg)
}

fn cmd_generate(args: &GenerateArgs) -> Result<ExitCode> {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SynthConfig::default(),
    };
    cfg.seed = args.seed;
    let ds = generate(&cfg)?;
    let manifest = write_dataset(&args.out, &ds)?;
    let summary = describe(&ds.sequences);
    println!(
        "wrote {} sequences ({} domains, {} labeled ranges) -> {}",
        ds.sequences.len(),
        summary.domains.len(),
        ds.ranges.len(),
        manifest.display()
    );

    let report = validate(&ds, cfg.n_invariant)?;
    if !report.ok {
        eprintln!(
            "validity checks FAILED: invariant KS {:.4} (critical {:.4}), \
             specific KS {:.4}, {}/{} ranges escape the normal ellipsoid",
            report.invariant_ks_max,
            report.ks_critical,
            report.specific_ks_min,
            report.ranges_escaping,
            report.ranges_total
        );
        return Ok(ExitCode::FAILURE);
    }
    println!(
        "validity checks passed: invariant KS {:.4} < {:.4} critical, \
         specific KS {:.4}, {}/{} ranges escape",
        report.invariant_ks_max,
        report.ks_critical,
        report.specific_ks_min,
        report.ranges_escaping,
        report.ranges_total
    );
    Ok(ExitCode::SUCCESS)
}

fn finish_run(summary: &RunSummary) -> ExitCode {
    print!("{}", render_report(&summary.rows));
    println!(
        "{} grid point(s) completed, {} failed -> {}",
        summary.completed,
        summary.failed,
        summary.run_dir.display()
    );
    if summary.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cmd_train(args: &RunArgs) -> Result<ExitCode> {
    if args.seed.is_none() {
        bail!("train requires an explicit --seed");
    }
    let cfg = build_config(args)?;
    let points = cfg.grid_points().len();
    if points != 1 {
        bail!("train fits exactly one hyperparameter point; this config has {points} (use sweep)");
    }
    Ok(finish_run(&run_experiment(&cfg)?))
}

fn cmd_sweep(args: &RunArgs) -> Result<ExitCode> {
    let cfg = build_config(args)?;
    Ok(finish_run(&run_experiment(&cfg)?))
}

fn cmd_lodo(args: &RunArgs) -> Result<ExitCode> {
    let cfg = build_config(args)?;
    let summary = run_lodo(&cfg)?;
    for fold in &summary.folds {
        match fold.status.as_str() {
            "ok" => println!(
                "domain {:>4}  ok       best f1 {:.4} ({}, gamma {:.5}), {} point(s) failed",
                fold.domain_id,
                fold.best_peak_f1.unwrap_or(f64::NAN),
                fold.best_strategy.as_deref().unwrap_or("-"),
                fold.best_gamma.unwrap_or(f64::NAN),
                fold.failed
            ),
            "skipped" => println!("domain {:>4}  skipped  (no labeled anomalies)", fold.domain_id),
            _ => println!(
                "domain {:>4}  FAILED   {}",
                fold.domain_id,
                fold.error.as_deref().unwrap_or("")
            ),
        }
    }
    println!("-> {}", summary.run_dir.display());
    Ok(if summary.all_completed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_score(args: &ScoreArgs) -> Result<ExitCode> {
    let fitted = load_bundle(&args.bundle)?;
    let window_len = fitted.window_len();
    let sequences = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut written = 0;
    for (tag, scorer) in fitted.scorers(args.strategy)? {
        for seq in sequences.iter().filter(|s| args.all || s.role == Role::Test) {
            let ws = extract_windows(seq, window_len)?;
            let raw = score_windows(scorer.as_ref(), &ws.windows)?;
            let scored = ScoredSequence {
                window_len,
                smoothed: smooth(&raw, window_len, args.gamma, Smoothing::Renormalized)?,
                raw,
            };
            let path = args.out.join(format!("scores-{tag}-{}.csv", seq.id));
            write_scores_csv(&path, &seq.timestamps, &scored)?;
            written += 1;
        }
    }
    if written == 0 {
        bail!("no sequences to score (pass --all to include training-role sequences)");
    }
    println!("wrote {written} score file(s) to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<ExitCode> {
    let fitted = load_bundle(&args.bundle)?;
    let window_len = fitted.window_len();
    let sequences = load_dataset(&args.data)?;
    let train: Vec<&Sequence> = sequences.iter().filter(|s| s.role == Role::Train).collect();
    let test: Vec<&Sequence> = sequences.iter().filter(|s| s.role == Role::Test).collect();
    if test.is_empty() {
        bail!("no test sequences in {}", args.data.display());
    }
    let gammas = args.gamma.clone().unwrap_or_else(|| GAMMA_GRID.to_vec());

    let mut entries: Vec<MetricsEntry> = Vec::new();
    for scores in score_fitted(&fitted, args.strategy, &train, &test, window_len)? {
        let strategy_entries = evaluate_scored(&scores, &gammas, &train, &test, window_len)?;
        let best = strategy_entries
            .iter()
            .max_by(|a, b| a.report.peak_f1.total_cmp(&b.report.peak_f1));
        if let Some(best) = best {
            println!(
                "{:<15} best peak f1 {:.4} at gamma {:.5} (threshold {:.4})",
                scores.tag, best.report.peak_f1, best.gamma, best.report.best_threshold
            );
        }
        entries.extend(strategy_entries);
    }

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let path = args.out.join("metrics.json");
    let mut text = serde_json::to_string_pretty(&entries)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("-> {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: &ReportArgs) -> Result<ExitCode> {
    let lodo = args.run.join("lodo_summary.csv");
    if lodo.is_file() {
        print!(
            "{}",
            std::fs::read_to_string(&lodo).with_context(|| format!("reading {}", lodo.display()))?
        );
        return Ok(ExitCode::SUCCESS);
    }
    let summary = args.run.join("summary.csv");
    if !summary.is_file() {
        bail!(
            "{} holds neither summary.csv nor lodo_summary.csv",
            args.run.display()
        );
    }
    print!("{}", render_report(&read_summary_csv(&summary)?));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Score(args) => cmd_score(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Lodo(args) => cmd_lodo(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
