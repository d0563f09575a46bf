//! Experiment runner: dataset resolution, method dispatch, hyperparameter
//! grid sweeps, scoring, evaluation, leave-one-domain-out folds, and run
//! persistence.
//!
//! A [`RunConfig`] names a dataset (manifest path or generator config), a
//! detection method, the hyperparameter grids, and the scoring strategy.
//! [`run_experiment`] trains one model per grid point, scores every test
//! sequence, evaluates each smoothing factor, and persists everything under
//! `<output_dir>/<timestamp>-<method>/<grid-point-hash>/`. Failures are
//! recorded per grid point and the sweep continues. [`run_lodo`] wraps the
//! same sweep in a leave-one-domain-out protocol.
//!
//! Test-sequence data never reaches fitting or standardizer statistics;
//! every sweep audits this before training and fails loudly on a violation.

use crate::baselines::{
    BaselineError, BaselineTrainConfig, ComponentCount, DenseAe, DenseAeBundle, DenseAeConfig,
    DenseVae, DenseVaeBundle, DenseVaeConfig, MahalanobisModel, PcaModel,
};
use crate::dataset::{
    apply_standardizer, balance_by_domain, extract_windows, fit_standardizer, load_dataset,
    DatasetError, Role, Sequence, Standardizer, WindowSet,
};
use crate::evaluation::{evaluate, EvalError, EvalInstance, EvaluationReport};
use crate::model::{
    fit_aggregated_posterior, train, AggPosterior, ArchKind, DivadBundle, DivadModel, DivadSpec,
    ModelError, PriorKind, TrainConfig, TrainHistory,
};
use crate::scoring::{
    score_windows, smooth, DivadScorer, ScoreStrategy, ScoredSequence, ScoringError, Smoothing,
    WindowScorer, GAMMA_GRID,
};
use crate::synthgen::{generate, SynthConfig, SynthError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("test data leaked into fitting: {0}")]
    Provenance(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where the sequences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// A manifest on disk, in the `dataset` module's format.
    Manifest { path: PathBuf },
    /// Generated in memory from a generator config.
    Synth { config: SynthConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DivadG,
    DivadGm,
    Pca,
    Maha,
    DenseAe,
    DenseVae,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::DivadG => "divad-g",
            Method::DivadGm => "divad-gm",
            Method::Pca => "pca",
            Method::Maha => "maha",
            Method::DenseAe => "dense-ae",
            Method::DenseVae => "dense-vae",
        }
    }

    pub fn is_divad(&self) -> bool {
        matches!(self, Method::DivadG | Method::DivadGm)
    }
}

/// Encoder/decoder family for the two-encoder methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Dense,
    Recurrent,
}

/// Which latent densities to score against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyChoice {
    #[default]
    Prior,
    AggPosterior,
    Both,
}

impl StrategyChoice {
    fn strategies(&self) -> Vec<ScoreStrategy> {
        match self {
            StrategyChoice::Prior => vec![ScoreStrategy::Prior],
            StrategyChoice::AggPosterior => vec![ScoreStrategy::AggPosterior],
            StrategyChoice::Both => vec![ScoreStrategy::Prior, ScoreStrategy::AggPosterior],
        }
    }
}

/// Hyperparameter grids. Methods ignore the axes they do not use: the
/// two-encoder methods sweep `beta x alpha_d x encoding_dim` (times
/// `components` for the mixture prior); the autoencoder baselines sweep
/// `encoding_dim`; the subspace baseline reads `encoding_dim` as component
/// counts; the distance baseline has a single point. Learning rates are
/// swept inside each fit (lowest validation loss wins) and smoothing factors
/// at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub beta: Vec<f64>,
    pub alpha_d: Vec<f64>,
    pub encoding_dim: Vec<usize>,
    pub components: Vec<usize>,
    pub lr: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            beta: vec![1.0],
            alpha_d: vec![1e5],
            encoding_dim: vec![4],
            components: vec![2],
            lr: crate::model::DEFAULT_LR_GRID.to_vec(),
            gamma: GAMMA_GRID.to_vec(),
        }
    }
}

/// Fit-protocol knobs shared by every grid point. Defaults are desk-scale;
/// raise `epochs`/`patience` for paper-protocol runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub val_fraction: f64,
    /// Hidden widths of the dense stacks.
    pub hidden: Vec<usize>,
    /// Monte Carlo draws frozen into the VAE baseline's scorer.
    pub vae_samples: usize,
    pub conv_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub gru_units: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            patience: 30,
            batch_size: 128,
            weight_decay: 0.01,
            val_fraction: 0.2,
            hidden: vec![64],
            vae_samples: 64,
            conv_filters: 16,
            kernel: 4,
            stride: 2,
            gru_units: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub method: Method,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub strategy: StrategyChoice,
    pub window_len: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Overrides the timestamp part of the run directory name.
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub fit: FitOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.window_len == 0 {
            return bad("window length must be at least 1".into());
        }
        if self.grid.gamma.is_empty() {
            return bad("the smoothing grid is empty".into());
        }
        if self.grid.encoding_dim.is_empty() && self.method != Method::Maha {
            return bad("the encoding-dimension grid is empty".into());
        }
        if self.method.is_divad() {
            if self.grid.beta.is_empty() || self.grid.alpha_d.is_empty() {
                return bad("beta and alpha_d grids must be nonempty".into());
            }
            if self.grid.lr.is_empty() {
                return bad("the learning-rate grid is empty".into());
            }
            if self.method == Method::DivadGm && self.grid.components.is_empty() {
                return bad("the mixture-component grid is empty".into());
            }
        } else {
            if self.variant == Variant::Recurrent {
                return bad(format!(
                    "the recurrent variant only applies to the two-encoder methods, not {}",
                    self.method.as_str()
                ));
            }
            if self.strategy != StrategyChoice::Prior {
                return bad(format!(
                    "scoring strategies only apply to the two-encoder methods, not {}",
                    self.method.as_str()
                ));
            }
            if matches!(self.method, Method::DenseAe | Method::DenseVae)
                && self.grid.lr.is_empty()
            {
                return bad("the learning-rate grid is empty".into());
            }
        }
        Ok(())
    }

    /// Cartesian product of the grid axes the method uses.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        let mut points = Vec::new();
        match self.method {
            Method::DivadG | Method::DivadGm => {
                let comps: Vec<Option<usize>> = if self.method == Method::DivadGm {
                    self.grid.components.iter().map(|&k| Some(k)).collect()
                } else {
                    vec![None]
                };
                for &beta in &self.grid.beta {
                    for &alpha_d in &self.grid.alpha_d {
                        for &m in &self.grid.encoding_dim {
                            for &components in &comps {
                                points.push(GridPoint {
                                    beta: Some(beta),
                                    alpha_d: Some(alpha_d),
                                    encoding_dim: Some(m),
                                    components,
                                });
                            }
                        }
                    }
                }
            }
            Method::Pca | Method::DenseAe | Method::DenseVae => {
                for &m in &self.grid.encoding_dim {
                    points.push(GridPoint {
                        encoding_dim: Some(m),
                        ..GridPoint::default()
                    });
                }
            }
            Method::Maha => points.push(GridPoint::default()),
        }
        points
    }
}

/// One point of the hyperparameter grid; axes the method ignores are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub beta: Option<f64>,
    pub alpha_d: Option<f64>,
    pub encoding_dim: Option<usize>,
    pub components: Option<usize>,
}

/// FNV-1a over the canonical JSON of whatever identifies the run point.
fn stable_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("hash input serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in json.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Loads or generates the sequences a config points at.
pub fn resolve_dataset(source: &DatasetSource) -> Result<Vec<Sequence>, ExperimentError> {
    match source {
        DatasetSource::Manifest { path } => Ok(load_dataset(path)?),
        DatasetSource::Synth { config } => Ok(generate(config)?.sequences),
    }
}

/// Sliding windows of `seq` that contain no labeled-anomalous record.
pub fn normal_windows(seq: &Sequence, window_len: usize) -> Result<WindowSet, DatasetError> {
    let all = extract_windows(seq, window_len)?;
    match &seq.labels {
        None => Ok(all),
        Some(labels) => {
            let mut out = WindowSet::empty(all.window_len, all.n_features);
            for i in 0..all.len() {
                let end = all.end_indices[i];
                let span = end + 1 - window_len..=end;
                if span.clone().all(|t| labels[t] == 0) {
                    out.push(
                        all.windows[i].clone(),
                        all.domain_ids[i],
                        all.sequence_ids[i].clone(),
                        end,
                    );
                }
            }
            Ok(out)
        }
    }
}

/// Fails if any window's provenance names a forbidden (test) sequence.
pub fn assert_provenance(
    windows: &WindowSet,
    forbidden: &BTreeSet<&str>,
) -> Result<(), ExperimentError> {
    for id in &windows.sequence_ids {
        if forbidden.contains(id.as_str()) {
            return Err(ExperimentError::Provenance(format!(
                "window from test sequence `{id}` in the training set"
            )));
        }
    }
    Ok(())
}

/// A fitted detector with everything scoring needs.
pub enum FittedMethod {
    Divad {
        model: DivadModel,
        agg: Option<AggPosterior>,
        history: TrainHistory,
    },
    Pca(PcaModel),
    Maha(MahalanobisModel),
    DenseAe(DenseAe, TrainHistory),
    DenseVae(DenseVae, TrainHistory),
}

impl FittedMethod {
    pub fn window_len(&self) -> usize {
        match self {
            FittedMethod::Divad { model, .. } => model.spec().window_len,
            FittedMethod::Pca(m) => m.window_len(),
            FittedMethod::Maha(m) => m.window_len(),
            FittedMethod::DenseAe(m, _) => m.window_len(),
            FittedMethod::DenseVae(m, _) => m.window_len(),
        }
    }

    fn history(&self) -> Option<&TrainHistory> {
        match self {
            FittedMethod::Divad { history, .. } => Some(history),
            FittedMethod::DenseAe(_, h) | FittedMethod::DenseVae(_, h) => Some(h),
            FittedMethod::Pca(_) | FittedMethod::Maha(_) => None,
        }
    }

    /// Scorers to run, tagged for reports: the strategy name for the
    /// two-encoder methods, `single` for baselines.
    pub fn scorers<'m>(
        &'m self,
        choice: StrategyChoice,
    ) -> Result<Vec<(String, Box<dyn WindowScorer + 'm>)>, ExperimentError> {
        match self {
            FittedMethod::Divad { model, agg, .. } => choice
                .strategies()
                .into_iter()
                .map(|s| {
                    let scorer = match s {
                        ScoreStrategy::Prior => DivadScorer::prior(model),
                        ScoreStrategy::AggPosterior => {
                            let agg = agg.as_ref().ok_or_else(|| {
                                ExperimentError::Config(
                                    "aggregated-posterior scoring without a fitted density"
                                        .into(),
                                )
                            })?;
                            DivadScorer::agg_posterior(model, agg)
                        }
                    };
                    let tag = match s {
                        ScoreStrategy::Prior => "prior".to_string(),
                        ScoreStrategy::AggPosterior => "agg-posterior".to_string(),
                    };
                    Ok((tag, Box::new(scorer) as Box<dyn WindowScorer + 'm>))
                })
                .collect(),
            FittedMethod::Pca(m) => Ok(vec![("single".into(), Box::new(m.clone()))]),
            FittedMethod::Maha(m) => Ok(vec![("single".into(), Box::new(m.clone()))]),
            FittedMethod::DenseAe(m, _) => Ok(vec![("single".into(), Box::new(m.clone()))]),
            FittedMethod::DenseVae(m, _) => Ok(vec![("single".into(), Box::new(m.clone()))]),
        }
    }
}

/// Serialized form of any fitted detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum MethodBundle {
    Divad {
        bundle: DivadBundle,
        agg: Option<AggPosterior>,
    },
    Pca(PcaModel),
    Maha(MahalanobisModel),
    DenseAe(DenseAeBundle),
    DenseVae(DenseVaeBundle),
}

pub fn save_bundle(path: &Path, fitted: &FittedMethod) -> Result<(), ExperimentError> {
    let bundle = match fitted {
        FittedMethod::Divad { model, agg, .. } => MethodBundle::Divad {
            bundle: model.to_bundle(),
            agg: agg.clone(),
        },
        FittedMethod::Pca(m) => MethodBundle::Pca(m.clone()),
        FittedMethod::Maha(m) => MethodBundle::Maha(m.clone()),
        FittedMethod::DenseAe(m, _) => MethodBundle::DenseAe(m.to_bundle()),
        FittedMethod::DenseVae(m, _) => MethodBundle::DenseVae(m.to_bundle()),
    };
    write_json(path, &bundle)
}

/// Rebuilds a scoreable detector from disk; histories are not persisted in
/// the bundle, so reloaded models carry an empty one.
pub fn load_bundle(path: &Path) -> Result<FittedMethod, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bundle: MethodBundle =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let empty = TrainHistory {
        runs: Vec::new(),
        chosen: 0,
    };
    Ok(match bundle {
        MethodBundle::Divad { bundle, agg } => FittedMethod::Divad {
            model: DivadModel::from_bundle(bundle)?,
            agg,
            history: empty,
        },
        MethodBundle::Pca(m) => FittedMethod::Pca(m),
        MethodBundle::Maha(m) => FittedMethod::Maha(m),
        MethodBundle::DenseAe(b) => FittedMethod::DenseAe(DenseAe::from_bundle(b)?, empty),
        MethodBundle::DenseVae(b) => FittedMethod::DenseVae(DenseVae::from_bundle(b)?, empty),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Balanced, standardized training windows plus the frozen standardizer.
///
/// Windows overlapping labeled-anomalous records are dropped, the remainder
/// is rebalanced per domain, and the standardizer is fitted on exactly the
/// windows that train the model.
pub fn prepare_training(
    train_seqs: &[&Sequence],
    window_len: usize,
    seed: u64,
) -> Result<(WindowSet, Standardizer), ExperimentError> {
    let mut ws: Option<WindowSet> = None;
    for seq in train_seqs {
        let nw = normal_windows(seq, window_len)?;
        match &mut ws {
            None => ws = Some(nw),
            Some(all) => all.extend(nw),
        }
    }
    let ws = ws.ok_or_else(|| ExperimentError::Config("no training sequences".into()))?;
    let balanced = balance_by_domain(&ws, seed)?;
    let standardizer = fit_standardizer(&balanced)?;
    let standardized = apply_standardizer(&standardizer, &balanced);
    Ok((standardized, standardizer))
}

fn fit_method(
    cfg: &RunConfig,
    point: &GridPoint,
    std_windows: &WindowSet,
    standardizer: &Standardizer,
) -> Result<FittedMethod, ExperimentError> {
    let need = |axis: Option<usize>| {
        axis.ok_or_else(|| ExperimentError::Config("grid point missing an axis".into()))
    };
    match cfg.method {
        Method::DivadG | Method::DivadGm => {
            let prior = if cfg.method == Method::DivadG {
                PriorKind::FixedGaussian
            } else {
                PriorKind::LearnedGm {
                    components: need(point.components)?,
                }
            };
            let arch = match cfg.variant {
                Variant::Dense => ArchKind::Dense {
                    hidden: cfg.fit.hidden.clone(),
                },
                Variant::Recurrent => ArchKind::Recurrent {
                    conv_filters: cfg.fit.conv_filters,
                    kernel: cfg.fit.kernel,
                    stride: cfg.fit.stride,
                    gru_units: cfg.fit.gru_units,
                },
            };
            let spec = DivadSpec {
                window_len: cfg.window_len,
                n_features: std_windows.n_features,
                encoding_dim: need(point.encoding_dim)?,
                arch,
                prior,
                domain_prior_hidden: 64,
            };
            let tc = TrainConfig {
                beta: point
                    .beta
                    .ok_or_else(|| ExperimentError::Config("grid point missing beta".into()))?,
                alpha_d: point.alpha_d.ok_or_else(|| {
                    ExperimentError::Config("grid point missing alpha_d".into())
                })?,
                lr_grid: cfg.grid.lr.clone(),
                epochs: cfg.fit.epochs,
                patience: cfg.fit.patience,
                batch_size: cfg.fit.batch_size,
                weight_decay: cfg.fit.weight_decay,
                val_fraction: cfg.fit.val_fraction,
                seed: cfg.seed,
            };
            let result = train(std_windows, standardizer, &spec, &tc)?;
            let agg = match cfg.strategy {
                StrategyChoice::Prior => None,
                _ => Some(fit_aggregated_posterior(&result.model, std_windows)?),
            };
            Ok(FittedMethod::Divad {
                model: result.model,
                agg,
                history: result.history,
            })
        }
        Method::Pca => Ok(FittedMethod::Pca(PcaModel::fit(
            std_windows,
            standardizer,
            ComponentCount::Count(need(point.encoding_dim)?),
        )?)),
        Method::Maha => Ok(FittedMethod::Maha(MahalanobisModel::fit(
            std_windows,
            standardizer,
        )?)),
        Method::DenseAe => {
            let config = DenseAeConfig {
                hidden: cfg.fit.hidden.clone(),
                latent: need(point.encoding_dim)?,
                train: baseline_train(cfg),
            };
            let (model, history) = DenseAe::fit(std_windows, standardizer, &config)?;
            Ok(FittedMethod::DenseAe(model, history))
        }
        Method::DenseVae => {
            let config = DenseVaeConfig {
                hidden: cfg.fit.hidden.clone(),
                latent: need(point.encoding_dim)?,
                samples: cfg.fit.vae_samples,
                train: baseline_train(cfg),
            };
            let (model, history) = DenseVae::fit(std_windows, standardizer, &config)?;
            Ok(FittedMethod::DenseVae(model, history))
        }
    }
}

fn baseline_train(cfg: &RunConfig) -> BaselineTrainConfig {
    BaselineTrainConfig {
        lr_grid: cfg.grid.lr.clone(),
        epochs: cfg.fit.epochs,
        patience: cfg.fit.patience,
        batch_size: cfg.fit.batch_size,
        weight_decay: cfg.fit.weight_decay,
        val_fraction: cfg.fit.val_fraction,
        seed: cfg.seed,
    }
}

/// Raw window scores for each sequence, in window order.
fn raw_scores_per_seq(
    scorer: &dyn WindowScorer,
    seqs: &[&Sequence],
    window_len: usize,
) -> Result<Vec<Vec<f64>>, ExperimentError> {
    seqs.iter()
        .map(|seq| {
            let ws = extract_windows(seq, window_len)?;
            Ok(score_windows(scorer, &ws.windows)?)
        })
        .collect()
}

/// Raw (unsmoothed) per-sequence scores for one scoring strategy.
pub struct FittedScores {
    pub tag: String,
    pub raw_train: Vec<Vec<f64>>,
    pub raw_test: Vec<Vec<f64>>,
}

/// Scores every sequence once per strategy. Smoothing is cheap and happens
/// downstream, once per smoothing factor.
pub fn score_fitted(
    fitted: &FittedMethod,
    strategy: StrategyChoice,
    train_seqs: &[&Sequence],
    test_seqs: &[&Sequence],
    window_len: usize,
) -> Result<Vec<FittedScores>, ExperimentError> {
    fitted
        .scorers(strategy)?
        .into_iter()
        .map(|(tag, scorer)| {
            Ok(FittedScores {
                tag,
                raw_train: raw_scores_per_seq(scorer.as_ref(), train_seqs, window_len)?,
                raw_test: raw_scores_per_seq(scorer.as_ref(), test_seqs, window_len)?,
            })
        })
        .collect()
}

/// Smooths and evaluates one strategy's raw scores at every smoothing
/// factor. The train-side population feeding the overlap statistic keeps
/// records whose label is 0 (all records when unlabeled).
pub fn evaluate_scored(
    scores: &FittedScores,
    gammas: &[f64],
    train_seqs: &[&Sequence],
    test_seqs: &[&Sequence],
    window_len: usize,
) -> Result<Vec<MetricsEntry>, ExperimentError> {
    let mut entries = Vec::new();
    for &gamma in gammas {
        let mut train_scores = Vec::new();
        for (seq, raw) in train_seqs.iter().zip(&scores.raw_train) {
            let sm = smooth(raw, window_len, gamma, Smoothing::Renormalized)?;
            match &seq.labels {
                None => train_scores.extend(sm),
                Some(labels) => train_scores
                    .extend(sm.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(s, _)| *s)),
            }
        }
        let instances: Vec<EvalInstance> = test_seqs
            .iter()
            .zip(&scores.raw_test)
            .map(|(seq, raw)| {
                Ok(EvalInstance {
                    scores: smooth(raw, window_len, gamma, Smoothing::Renormalized)?,
                    labels: seq.labels.clone().unwrap_or_else(|| vec![0; seq.len()]),
                })
            })
            .collect::<Result<_, ExperimentError>>()?;
        let report = evaluate(&train_scores, &instances, window_len)?;
        entries.push(MetricsEntry {
            strategy: scores.tag.clone(),
            gamma,
            report,
        });
    }
    Ok(entries)
}

/// One (strategy, smoothing factor) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub strategy: String,
    pub gamma: f64,
    pub report: EvaluationReport,
}

/// Per-grid-point artifact, reproducible from config + seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPointMetrics {
    pub point: GridPoint,
    pub seed: u64,
    pub entries: Vec<MetricsEntry>,
}

/// One `summary.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub grid_hash: String,
    pub method: String,
    pub variant: String,
    pub beta: Option<f64>,
    pub alpha_d: Option<f64>,
    pub encoding_dim: Option<usize>,
    pub components: Option<usize>,
    pub strategy: String,
    pub gamma: Option<f64>,
    pub status: String,
    pub peak_f1: Option<f64>,
    pub best_threshold: Option<f64>,
    pub precision: Option<f64>,
    pub recall_avg: Option<f64>,
    /// Fraction of test-normal scores above the median train-normal score.
    pub overlap: Option<f64>,
    pub masked: Option<usize>,
    pub error: Option<String>,
}

impl SummaryRow {
    fn failed(cfg: &RunConfig, hash: &str, point: &GridPoint, error: String) -> Self {
        Self {
            grid_hash: hash.to_string(),
            method: cfg.method.as_str().to_string(),
            variant: format!("{:?}", cfg.variant).to_lowercase(),
            beta: point.beta,
            alpha_d: point.alpha_d,
            encoding_dim: point.encoding_dim,
            components: point.components,
            strategy: String::new(),
            gamma: None,
            status: "failed".into(),
            peak_f1: None,
            best_threshold: None,
            precision: None,
            recall_avg: None,
            overlap: None,
            masked: None,
            error: Some(error),
        }
    }
}

const SUMMARY_HEADER: [&str; 17] = [
    "grid_hash",
    "method",
    "variant",
    "beta",
    "alpha_d",
    "encoding_dim",
    "components",
    "strategy",
    "gamma",
    "status",
    "peak_f1",
    "best_threshold",
    "precision",
    "recall_avg",
    "overlap",
    "masked",
    "error",
];

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, T::to_string)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), ExperimentError> {
    let fail = |msg: String| ExperimentError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| fail(e.to_string()))?;
    w.write_record(SUMMARY_HEADER)
        .map_err(|e| fail(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.grid_hash.clone(),
            r.method.clone(),
            r.variant.clone(),
            opt_str(&r.beta),
            opt_str(&r.alpha_d),
            opt_str(&r.encoding_dim),
            opt_str(&r.components),
            r.strategy.clone(),
            opt_str(&r.gamma),
            r.status.clone(),
            opt_str(&r.peak_f1),
            opt_str(&r.best_threshold),
            opt_str(&r.precision),
            opt_str(&r.recall_avg),
            opt_str(&r.overlap),
            opt_str(&r.masked),
            opt_str(&r.error),
        ])
        .map_err(|e| fail(e.to_string()))?;
    }
    w.flush().map_err(|e| fail(e.to_string()))
}

/// Trains, scores, evaluates, and persists one grid point; returns its
/// summary rows.
fn run_grid_point(
    cfg: &RunConfig,
    point: &GridPoint,
    hash: &str,
    point_dir: &Path,
    std_windows: &WindowSet,
    standardizer: &Standardizer,
    train_seqs: &[&Sequence],
    test_seqs: &[&Sequence],
) -> Result<Vec<SummaryRow>, ExperimentError> {
    std::fs::create_dir_all(point_dir).map_err(|e| io_err(point_dir, e))?;
    let fitted = fit_method(cfg, point, std_windows, standardizer)?;
    save_bundle(&point_dir.join("bundle.json"), &fitted)?;
    if let Some(history) = fitted.history() {
        write_json(&point_dir.join("history.json"), history)?;
    }

    let mut rows = Vec::new();
    let mut metrics = GridPointMetrics {
        point: point.clone(),
        seed: cfg.seed,
        entries: Vec::new(),
    };
    for scores in score_fitted(&fitted, cfg.strategy, train_seqs, test_seqs, cfg.window_len)? {
        let entries = evaluate_scored(&scores, &cfg.grid.gamma, train_seqs, test_seqs, cfg.window_len)?;
        // Score files use the strategy's best smoothing factor (first wins
        // ties, matching the grid order).
        let mut best: Option<&MetricsEntry> = None;
        for e in &entries {
            if best.is_none_or(|b| e.report.peak_f1 > b.report.peak_f1) {
                best = Some(e);
            }
        }
        if let Some(best) = best {
            for (seq, raw) in test_seqs.iter().zip(&scores.raw_test) {
                let scored = ScoredSequence {
                    window_len: cfg.window_len,
                    raw: raw.clone(),
                    smoothed: smooth(raw, cfg.window_len, best.gamma, Smoothing::Renormalized)?,
                };
                crate::scoring::write_scores_csv(
                    &point_dir.join(format!("scores-{}-{}.csv", scores.tag, seq.id)),
                    &seq.timestamps,
                    &scored,
                )?;
            }
        }
        for e in &entries {
            rows.push(SummaryRow {
                grid_hash: hash.to_string(),
                method: cfg.method.as_str().to_string(),
                variant: format!("{:?}", cfg.variant).to_lowercase(),
                beta: point.beta,
                alpha_d: point.alpha_d,
                encoding_dim: point.encoding_dim,
                components: point.components,
                strategy: e.strategy.clone(),
                gamma: Some(e.gamma),
                status: "ok".into(),
                peak_f1: Some(e.report.peak_f1),
                best_threshold: Some(e.report.best_threshold),
                precision: Some(e.report.precision_at_best),
                recall_avg: Some(e.report.recall_avg_at_best),
                overlap: e.report.overlap.test_normal_above_train_median,
                masked: Some(e.report.masked_count),
                error: None,
            });
        }
        metrics.entries.extend(entries);
    }
    write_json(&point_dir.join("metrics.json"), &metrics)?;
    Ok(rows)
}

/// Shared sweep core: one model per grid point over fixed train/test splits,
/// with per-point failure isolation and a `summary.csv` at `run_dir`.
fn run_sweep(
    cfg: &RunConfig,
    run_dir: &Path,
    train_seqs: &[&Sequence],
    test_seqs: &[&Sequence],
) -> Result<Vec<SummaryRow>, ExperimentError> {
    std::fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    write_json(&run_dir.join("run_config.json"), cfg)?;

    let forbidden: BTreeSet<&str> = test_seqs.iter().map(|s| s.id.as_str()).collect();
    let (std_windows, standardizer) = prepare_training(train_seqs, cfg.window_len, cfg.seed)?;
    assert_provenance(&std_windows, &forbidden)?;

    let mut rows = Vec::new();
    for point in cfg.grid_points() {
        let hash = stable_hash(&(
            cfg.method,
            cfg.variant,
            cfg.window_len,
            cfg.seed,
            cfg.strategy,
            &point,
            &cfg.grid.lr,
            &cfg.fit,
        ));
        let point_dir = run_dir.join(&hash);
        match run_grid_point(
            cfg,
            &point,
            &hash,
            &point_dir,
            &std_windows,
            &standardizer,
            train_seqs,
            test_seqs,
        ) {
            Ok(mut point_rows) => rows.append(&mut point_rows),
            Err(e) => {
                log::warn!("grid point {hash} failed: {e}");
                rows.push(SummaryRow::failed(cfg, &hash, &point, e.to_string()));
            }
        }
    }
    write_summary_csv(&run_dir.join("summary.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub rows: Vec<SummaryRow>,
    /// Grid points that trained, scored, and evaluated end to end.
    pub completed: usize,
    pub failed: usize,
}

fn count_failures(rows: &[SummaryRow]) -> (usize, usize) {
    let failed = rows.iter().filter(|r| r.status == "failed").count();
    let completed: BTreeSet<&str> = rows
        .iter()
        .filter(|r| r.status == "ok")
        .map(|r| r.grid_hash.as_str())
        .collect();
    (completed.len(), failed)
}

fn run_dir_name(cfg: &RunConfig) -> String {
    let stamp = cfg.run_id.clone().unwrap_or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs().to_string())
            .unwrap_or_else(|_| "0".into())
    });
    format!("{stamp}-{}", cfg.method.as_str())
}

/// Full experiment: resolve the dataset, split by role, sweep the grid.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    let sequences = resolve_dataset(&cfg.dataset)?;
    let train_seqs: Vec<&Sequence> = sequences.iter().filter(|s| s.role == Role::Train).collect();
    let test_seqs: Vec<&Sequence> = sequences.iter().filter(|s| s.role == Role::Test).collect();
    if train_seqs.is_empty() || test_seqs.is_empty() {
        return Err(ExperimentError::Config(format!(
            "need both roles: {} training and {} test sequences",
            train_seqs.len(),
            test_seqs.len()
        )));
    }
    let run_dir = cfg.output_dir.join(run_dir_name(cfg));
    let rows = run_sweep(cfg, &run_dir, &train_seqs, &test_seqs)?;
    let (completed, failed) = count_failures(&rows);
    Ok(RunSummary {
        run_dir,
        rows,
        completed,
        failed,
    })
}

/// One held-out domain of a leave-one-domain-out run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoFold {
    pub domain_id: u32,
    /// `ok`, `skipped` (no labeled anomalies), or `failed`.
    pub status: String,
    pub completed: usize,
    pub failed: usize,
    pub best_peak_f1: Option<f64>,
    pub best_strategy: Option<String>,
    pub best_gamma: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LodoSummary {
    pub run_dir: PathBuf,
    pub folds: Vec<LodoFold>,
}

impl LodoSummary {
    /// True if every evaluable fold completed all its grid points.
    pub fn all_completed(&self) -> bool {
        self.folds
            .iter()
            .all(|f| f.status == "skipped" || (f.status == "ok" && f.failed == 0))
    }
}

fn write_lodo_csv(path: &Path, folds: &[LodoFold]) -> Result<(), ExperimentError> {
    let fail = |msg: String| ExperimentError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| fail(e.to_string()))?;
    w.write_record([
        "domain_id",
        "status",
        "completed",
        "failed",
        "best_peak_f1",
        "best_strategy",
        "best_gamma",
        "error",
    ])
    .map_err(|e| fail(e.to_string()))?;
    for f in folds {
        w.write_record([
            f.domain_id.to_string(),
            f.status.clone(),
            f.completed.to_string(),
            f.failed.to_string(),
            opt_str(&f.best_peak_f1),
            opt_str(&f.best_strategy),
            opt_str(&f.best_gamma),
            opt_str(&f.error),
        ])
        .map_err(|e| fail(e.to_string()))?;
    }
    w.flush().map_err(|e| fail(e.to_string()))
}

/// Leave-one-domain-out protocol: every domain is held out once as the test
/// set while the others train (with anomalous windows removed). Domains
/// without labeled anomalies cannot be evaluated and are skipped with a
/// warning. Returns per-fold outcomes; `lodo_summary.csv` aggregates them.
pub fn run_lodo(cfg: &RunConfig) -> Result<LodoSummary, ExperimentError> {
    cfg.validate()?;
    let sequences = resolve_dataset(&cfg.dataset)?;
    let domains: BTreeSet<u32> = sequences.iter().map(|s| s.domain_id).collect();
    if domains.len() < 2 {
        return Err(ExperimentError::Config(format!(
            "leave-one-domain-out needs at least 2 domains, found {}",
            domains.len()
        )));
    }
    let run_dir = cfg.output_dir.join(format!("{}-lodo", run_dir_name(cfg)));
    std::fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;

    let mut folds = Vec::new();
    for &held_out in &domains {
        let test_seqs: Vec<&Sequence> = sequences
            .iter()
            .filter(|s| s.domain_id == held_out)
            .collect();
        let train_seqs: Vec<&Sequence> = sequences
            .iter()
            .filter(|s| s.domain_id != held_out)
            .collect();
        let has_anomalies = test_seqs
            .iter()
            .any(|s| s.labels.as_ref().is_some_and(|l| l.iter().any(|&x| x != 0)));
        if !has_anomalies {
            log::warn!("domain {held_out} has no labeled anomalies; skipping its fold");
            folds.push(LodoFold {
                domain_id: held_out,
                status: "skipped".into(),
                completed: 0,
                failed: 0,
                best_peak_f1: None,
                best_strategy: None,
                best_gamma: None,
                error: None,
            });
            continue;
        }
        let fold_dir = run_dir.join(format!("domain-{held_out}"));
        match run_sweep(cfg, &fold_dir, &train_seqs, &test_seqs) {
            Ok(rows) => {
                let (completed, failed) = count_failures(&rows);
                let best = rows
                    .iter()
                    .filter(|r| r.status == "ok")
                    .max_by(|a, b| {
                        a.peak_f1
                            .partial_cmp(&b.peak_f1)
                            .unwrap_or(std::cmp::Ordering::Equal)
                    });
                folds.push(LodoFold {
                    domain_id: held_out,
                    status: "ok".into(),
                    completed,
                    failed,
                    best_peak_f1: best.and_then(|r| r.peak_f1),
                    best_strategy: best.map(|r| r.strategy.clone()),
                    best_gamma: best.and_then(|r| r.gamma),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("fold for domain {held_out} failed: {e}");
                folds.push(LodoFold {
                    domain_id: held_out,
                    status: "failed".into(),
                    completed: 0,
                    failed: 0,
                    best_peak_f1: None,
                    best_strategy: None,
                    best_gamma: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    write_lodo_csv(&run_dir.join("lodo_summary.csv"), &folds)?;
    Ok(LodoSummary { run_dir, folds })
}

/// Renders the best row per (method, strategy) of a summary into a compact
/// text table; the `report` CLI verb prints it.
pub fn render_report(rows: &[SummaryRow]) -> String {
    let mut best: Vec<&SummaryRow> = Vec::new();
    for row in rows.iter().filter(|r| r.status == "ok") {
        match best
            .iter_mut()
            .find(|b| b.method == row.method && b.strategy == row.strategy)
        {
            Some(b) => {
                if row.peak_f1 > b.peak_f1 {
                    *b = row;
                }
            }
            None => best.push(row),
        }
    }
    let mut out = String::new();
    out.push_str("method       strategy        gamma    peak_f1  threshold\n");
    for r in &best {
        let gamma = r.gamma.map_or_else(String::new, |g| format!("{g:.5}"));
        let f1 = r.peak_f1.map_or_else(String::new, |v| format!("{v:.4}"));
        let thr = r.best_threshold.map_or_else(String::new, |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:<12} {:<15} {:<8} {:<8} {}",
            r.method, r.strategy, gamma, f1, thr
        );
    }
    let failed = rows.iter().filter(|r| r.status == "failed").count();
    if failed > 0 {
        let _ = writeln!(out, "[{failed} grid point(s) failed]");
    }
    out
}

/// Reads a `summary.csv` back into rows.
pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let fail = |msg: String| ExperimentError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let headers = r.headers().map_err(|e| fail(e.to_string()))?.clone();
    if headers.iter().ne(SUMMARY_HEADER) {
        return Err(fail(format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        let opt = |i: usize| -> Option<&str> {
            let s = rec.get(i).unwrap_or("");
            (!s.is_empty()).then_some(s)
        };
        let parse_f64 = |i: usize| -> Result<Option<f64>, ExperimentError> {
            opt(i)
                .map(|s| s.parse::<f64>().map_err(|e| fail(e.to_string())))
                .transpose()
        };
        let parse_usize = |i: usize| -> Result<Option<usize>, ExperimentError> {
            opt(i)
                .map(|s| s.parse::<usize>().map_err(|e| fail(e.to_string())))
                .transpose()
        };
        rows.push(SummaryRow {
            grid_hash: rec.get(0).unwrap_or("").to_string(),
            method: rec.get(1).unwrap_or("").to_string(),
            variant: rec.get(2).unwrap_or("").to_string(),
            beta: parse_f64(3)?,
            alpha_d: parse_f64(4)?,
            encoding_dim: parse_usize(5)?,
            components: parse_usize(6)?,
            strategy: rec.get(7).unwrap_or("").to_string(),
            gamma: parse_f64(8)?,
            status: rec.get(9).unwrap_or("").to_string(),
            peak_f1: parse_f64(10)?,
            best_threshold: parse_f64(11)?,
            precision: parse_f64(12)?,
            recall_avg: parse_f64(13)?,
            overlap: parse_f64(14)?,
            masked: parse_usize(15)?,
            error: opt(16).map(str::to_string),
        });
    }
    Ok(rows)
}
