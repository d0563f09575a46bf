//! Early-stopped minibatch training with best-checkpoint restore, plus the
//! learning-rate-grid sweep that picks the model with the lowest
//! validation loss.

use super::graph::DivadObjective;
use super::optim::AdamW;
use super::{build_parts, DivadModel, DivadSpec, ModelError, TrainConfig};
use crate::dataset::{train_val_split, Standardizer, WindowSet};
use crate::networks::tape::{Grads, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Mean loss pieces for one evaluation: reconstruction log-likelihood and
/// the three penalties. Objectives without a term report it as zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub recon: f64,
    pub kl_y: f64,
    pub kl_d: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_components: LossComponents,
    pub val_components: LossComponents,
}

/// Per-epoch record of one fit, with the checkpointed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    pub lr: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; 0 if none completed.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl FitHistory {
    fn empty(lr: f64) -> Self {
        Self {
            lr,
            epochs: Vec::new(),
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
        }
    }
}

/// A batch-loss function trainable by [`fit_loop`]. `eval` returns the
/// mean loss over the index list and, when `grads` is supplied, adds the
/// gradient of that mean into it (`grads` must arrive zeroed).
pub(crate) trait Objective: Sync {
    fn eval(
        &self,
        params: &ParamStore,
        idx: &[usize],
        noise_key: u64,
        grads: Option<&mut Grads>,
    ) -> Result<(f64, LossComponents), ModelError>;
}

pub(crate) struct FitSpec {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

/// splitmix64 finalizer; decorrelates seeds derived from small integers.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub(crate) fn mix_key(seed: u64, a: u64, b: u64) -> u64 {
    mix(seed ^ mix(a ^ mix(b)))
}

const SHUFFLE_TAG: u64 = 0x5348;
const VAL_NOISE_TAG: u64 = 0x564e;

/// Minibatch gradient descent with early stopping on validation loss.
///
/// Validation noise is fixed across epochs so epoch losses are
/// comparable. On a non-finite loss the parameters are restored to the
/// best checkpoint and a divergence error carrying the partial history is
/// returned; otherwise the best checkpoint is restored at the end.
pub(crate) fn fit_loop<O: Objective>(
    params: &mut ParamStore,
    obj: &O,
    train_idx: &[usize],
    val_idx: &[usize],
    fs: &FitSpec,
) -> Result<FitHistory, ModelError> {
    if train_idx.is_empty() {
        return Err(ModelError::Empty);
    }
    if val_idx.is_empty() {
        return Err(ModelError::BadConfig("empty validation split".into()));
    }
    let mut opt = AdamW::new(params, fs.lr, fs.weight_decay);
    let mut grads = Grads::zeros_like(params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_key(fs.seed, SHUFFLE_TAG, 0));
    let val_key = mix_key(fs.seed, VAL_NOISE_TAG, 0);

    let mut history = FitHistory::empty(fs.lr);
    let mut best_params = params.clone();
    let mut since_best = 0usize;
    let mut order: Vec<usize> = train_idx.to_vec();
    let n_train = train_idx.len() as f64;

    let diverge = |params: &mut ParamStore,
                   best: &ParamStore,
                   history: FitHistory,
                   epoch: usize,
                   loss: f64,
                   comps: LossComponents| {
        params.assign_from(best);
        Err(ModelError::Diverged {
            epoch,
            breakdown: format!(
                "loss {loss}; recon {:.6e}, kl_y {:.6e}, kl_d {:.6e}, ce {:.6e}",
                comps.recon, comps.kl_y, comps.kl_d, comps.ce
            ),
            history: Box::new(history),
        })
    };

    for epoch in 1..=fs.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_sum = 0.0;
        let mut comp_sum = LossComponents::default();
        for (bi, batch) in order.chunks(fs.batch_size).enumerate() {
            let key = mix_key(fs.seed, epoch as u64, bi as u64);
            grads.zero();
            let (loss, comps) = obj.eval(params, batch, key, Some(&mut grads))?;
            if !loss.is_finite() {
                return diverge(params, &best_params, history, epoch, loss, comps);
            }
            opt.step(params, &grads);
            let w = batch.len() as f64;
            train_sum += loss * w;
            comp_sum.recon += comps.recon * w;
            comp_sum.kl_y += comps.kl_y * w;
            comp_sum.kl_d += comps.kl_d * w;
            comp_sum.ce += comps.ce * w;
        }
        let train_loss = train_sum / n_train;
        let train_components = LossComponents {
            recon: comp_sum.recon / n_train,
            kl_y: comp_sum.kl_y / n_train,
            kl_d: comp_sum.kl_d / n_train,
            ce: comp_sum.ce / n_train,
        };
        let (val_loss, val_components) = obj.eval(params, val_idx, val_key, None)?;
        if !val_loss.is_finite() {
            return diverge(params, &best_params, history, epoch, val_loss, val_components);
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_components,
            val_components,
        });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best_params.assign_from(params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= fs.patience.max(1) {
                break;
            }
        }
    }
    params.assign_from(&best_params);
    Ok(history)
}

/// One learning-rate candidate of a training sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrRun {
    pub lr: f64,
    pub diverged: bool,
    pub fit: FitHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub runs: Vec<LrRun>,
    /// Index of the winning run in `runs`.
    pub chosen: usize,
}

impl TrainHistory {
    pub fn chosen_fit(&self) -> &FitHistory {
        &self.runs[self.chosen].fit
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: DivadModel,
    pub history: TrainHistory,
}

/// Trains one model per learning rate in the grid (identical seeded
/// initialization each time) and keeps the one with the lowest validation
/// loss. `windows` must be standardized already; `standardizer` is stored
/// in the returned model so it can score raw windows later.
pub fn train(
    windows: &WindowSet,
    standardizer: &Standardizer,
    spec: &DivadSpec,
    config: &TrainConfig,
) -> Result<TrainResult, ModelError> {
    spec.validate()?;
    config.validate()?;
    if windows.is_empty() {
        return Err(ModelError::Empty);
    }
    if windows.window_len != spec.window_len || windows.n_features != spec.n_features {
        return Err(ModelError::BadConfig(format!(
            "window set is {}x{} but the model expects {}x{}",
            windows.window_len, windows.n_features, spec.window_len, spec.n_features
        )));
    }
    let domains = windows.distinct_domains();
    let (tr, va) = train_val_split(windows, config.val_fraction, config.seed)?;
    if va.is_empty() {
        return Err(ModelError::BadConfig(
            "validation split is empty; provide sequences with at least two windows".into(),
        ));
    }
    let train_idx: Vec<usize> = (0..tr.len()).collect();
    let val_idx: Vec<usize> = (tr.len()..tr.len() + va.len()).collect();
    let mut combined = tr;
    combined.extend(va);

    let mut runs: Vec<LrRun> = Vec::with_capacity(config.lr_grid.len());
    let mut best: Option<(usize, DivadModel)> = None;
    let mut last_diverged: Option<ModelError> = None;
    for &lr in &config.lr_grid {
        let (parts, mut store) = build_parts(spec, domains.len(), config.seed)?;
        let obj = DivadObjective::new(
            &parts,
            spec,
            &combined,
            &domains,
            config.beta,
            config.alpha_d,
        )?;
        let fs = FitSpec {
            epochs: config.epochs,
            patience: config.patience,
            batch_size: config.batch_size,
            lr,
            weight_decay: config.weight_decay,
            seed: config.seed,
        };
        match fit_loop(&mut store, &obj, &train_idx, &val_idx, &fs) {
            Ok(fit) => {
                let candidate_better = best.as_ref().map_or(true, |(i, _)| {
                    fit.best_val_loss < runs[*i].fit.best_val_loss
                });
                runs.push(LrRun {
                    lr,
                    diverged: false,
                    fit,
                });
                if candidate_better {
                    drop(obj);
                    best = Some((
                        runs.len() - 1,
                        DivadModel {
                            spec: spec.clone(),
                            domains: domains.clone(),
                            standardizer: standardizer.clone(),
                            parts,
                            params: store,
                        },
                    ));
                }
            }
            Err(ModelError::Diverged {
                epoch,
                breakdown,
                history,
            }) => {
                log::warn!("learning rate {lr}: diverged at epoch {epoch} ({breakdown})");
                runs.push(LrRun {
                    lr,
                    diverged: true,
                    fit: *history.clone(),
                });
                last_diverged = Some(ModelError::Diverged {
                    epoch,
                    breakdown,
                    history,
                });
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((chosen, model)) => Ok(TrainResult {
            model,
            history: TrainHistory { runs, chosen },
        }),
        None => Err(last_diverged.expect("at least one learning rate was attempted")),
    }
}
