//! The domain-invariant VAE: two encoders without shared parameters, a
//! decoder over the concatenated latents, a conditional domain prior, a
//! domain-classification head, and a fixed-Gaussian or learned
//! Gaussian-mixture prior over the invariant latent.
//!
//! Training minimizes the mean over a batch of
//! `-(ELBO + alpha_d * L_d)` where the ELBO weights both KL terms by
//! `beta` and `L_d` is the (negated) domain cross-entropy on a
//! reparameterized domain-latent sample.

mod graph;
mod optim;
mod posterior;
mod train;

pub use posterior::{
    fit_aggregated_posterior, fit_full_gaussian, fit_full_gmm, gm_log_prob, AggPosterior,
    FullCovGaussian, FullCovGmm,
};
pub use train::{train, EpochRecord, FitHistory, LossComponents, LrRun, TrainHistory, TrainResult};

pub(crate) use graph::{gaussian_logprob_rows, kl_std_rows, GRAD_CHUNK};
pub(crate) use posterior::population_mean_cov;
pub(crate) use train::{fit_loop, mix_key, FitSpec, Objective};

use crate::dataset::{DatasetError, Standardizer, WindowSet};
use crate::networks::tape::{ParamId, ParamStore, Tape};
use crate::networks::{
    gaussian_log_prob, DenseStack, DenseStackSpec, GaussianParams, NetworkError, OutputHead,
    RecurrentDecoder, RecurrentDecoderSpec, RecurrentEncoder, RecurrentEncoderSpec, STD_EPS,
};
use crate::par;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default learning-rate grid swept during training; the run with the
/// lowest validation loss wins.
pub const DEFAULT_LR_GRID: [f64; 4] = [1e-5, 3e-5, 1e-4, 3e-4];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("empty batch or window set")]
    Empty,
    #[error("domain index {d} out of range for {n} domains")]
    DomainOutOfRange { d: usize, n: usize },
    #[error("training diverged at epoch {epoch}: {breakdown}; parameters restored to the best checkpoint")]
    Diverged {
        epoch: usize,
        breakdown: String,
        history: Box<FitHistory>,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Prior over the invariant latent `z_y`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorKind {
    /// Standard normal.
    FixedGaussian,
    /// Diagonal Gaussian mixture with trained weights, means, and stds.
    LearnedGm { components: usize },
}

/// Encoder/decoder family shared by both encoders and the decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchKind {
    /// Fully connected stacks over the flattened window.
    Dense { hidden: Vec<usize> },
    /// Convolution + GRU encoders and a repeat-vector GRU decoder with a
    /// transposed-convolution output head.
    Recurrent {
        conv_filters: usize,
        kernel: usize,
        stride: usize,
        gru_units: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivadSpec {
    pub window_len: usize,
    pub n_features: usize,
    /// Latent dimension M' of each encoder; the decoder consumes `2 * M'`.
    pub encoding_dim: usize,
    pub arch: ArchKind,
    pub prior: PriorKind,
    /// Hidden width of the one-hidden-layer conditional domain prior net.
    #[serde(default = "default_prior_hidden")]
    pub domain_prior_hidden: usize,
}

fn default_prior_hidden() -> usize {
    64
}

impl DivadSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.window_len == 0
            || self.n_features == 0
            || self.encoding_dim == 0
            || self.domain_prior_hidden == 0
        {
            return Err(ModelError::BadConfig(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        if let ArchKind::Dense { hidden } = &self.arch {
            if hidden.contains(&0) {
                return Err(ModelError::BadConfig("zero-width hidden layer".into()));
            }
        }
        if let PriorKind::LearnedGm { components } = self.prior {
            if components == 0 {
                return Err(ModelError::BadConfig(
                    "mixture prior needs at least one component".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight on both KL terms of the ELBO.
    pub beta: f64,
    /// Weight on the domain-classification loss.
    pub alpha_d: f64,
    /// Candidate learning rates; one model is trained per entry.
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    /// Consecutive epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            alpha_d: 1e5,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            epochs: 300,
            patience: 100,
            batch_size: 128,
            weight_decay: 0.01,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.beta > 0.0) {
            return Err(ModelError::BadConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.alpha_d >= 0.0) {
            return Err(ModelError::BadConfig(format!(
                "alpha_d must be >= 0, got {}",
                self.alpha_d
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ModelError::BadConfig(
                "batch size and epoch count must be positive".into(),
            ));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(lr > &0.0)) {
            return Err(ModelError::BadConfig(
                "learning-rate grid must be nonempty and positive".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(ModelError::BadConfig(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// One reparameterization draw per encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePair {
    pub y: Vec<f64>,
    pub d: Vec<f64>,
}

impl NoisePair {
    pub fn standard(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            y: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
            d: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

/// Unweighted ELBO pieces; the ELBO itself is
/// `recon - beta * kl_y - beta * kl_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboComponents {
    pub recon: f64,
    pub kl_y: f64,
    pub kl_d: f64,
}

/// Values of a learned mixture prior, extracted from the parameter store:
/// normalized log weights plus per-component means and stds (rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmPriorValues {
    pub log_weights: Vec<f64>,
    pub means: Array2<f64>,
    pub stds: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) enum Nets {
    Dense {
        enc_y: DenseStack,
        enc_d: DenseStack,
        dec: DenseStack,
    },
    Recurrent {
        enc_y: RecurrentEncoder,
        enc_d: RecurrentEncoder,
        dec: RecurrentDecoder,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct GmIds {
    pub logits: ParamId,
    pub means: ParamId,
    pub raw_stds: ParamId,
}

/// Network definitions plus parameter ids; arrays live in the store.
#[derive(Debug, Clone)]
pub(crate) struct DivadParts {
    pub nets: Nets,
    pub prior_net: DenseStack,
    pub clf: (ParamId, ParamId),
    pub gm: Option<GmIds>,
}

/// A trained (or freshly initialized) model with its parameter store, the
/// sorted domain vocabulary, and the standardizer its inputs expect.
#[derive(Debug, Clone)]
pub struct DivadModel {
    spec: DivadSpec,
    domains: Vec<u32>,
    standardizer: Standardizer,
    parts: DivadParts,
    params: ParamStore,
}

pub(crate) fn build_parts(
    spec: &DivadSpec,
    n_dom: usize,
    seed: u64,
) -> Result<(DivadParts, ParamStore), ModelError> {
    spec.validate()?;
    if n_dom == 0 {
        return Err(ModelError::BadConfig("need at least one domain".into()));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mp = spec.encoding_dim;
    let nets = match &spec.arch {
        ArchKind::Dense { hidden } => {
            let flat = spec.window_len * spec.n_features;
            let enc_spec = DenseStackSpec {
                input_dim: flat,
                hidden_dims: hidden.clone(),
                output: OutputHead::Gaussian { dim: mp },
            };
            let enc_y = DenseStack::init(&mut store, "enc_y", enc_spec.clone(), &mut rng)?;
            let enc_d = DenseStack::init(&mut store, "enc_d", enc_spec, &mut rng)?;
            let mut rev = hidden.clone();
            rev.reverse();
            let dec = DenseStack::init(
                &mut store,
                "dec",
                DenseStackSpec {
                    input_dim: 2 * mp,
                    hidden_dims: rev,
                    output: OutputHead::Gaussian { dim: flat },
                },
                &mut rng,
            )?;
            Nets::Dense { enc_y, enc_d, dec }
        }
        ArchKind::Recurrent {
            conv_filters,
            kernel,
            stride,
            gru_units,
        } => {
            let enc_spec = RecurrentEncoderSpec {
                window_len: spec.window_len,
                in_features: spec.n_features,
                conv_filters: *conv_filters,
                kernel: *kernel,
                stride: *stride,
                gru_units: *gru_units,
                encoding_dim: mp,
            };
            let enc_y = RecurrentEncoder::init(&mut store, "enc_y", enc_spec.clone(), &mut rng)?;
            let enc_d = RecurrentEncoder::init(&mut store, "enc_d", enc_spec, &mut rng)?;
            let dec = RecurrentDecoder::init(
                &mut store,
                "dec",
                RecurrentDecoderSpec {
                    window_len: spec.window_len,
                    out_features: spec.n_features,
                    latent_dim: 2 * mp,
                    kernel: *kernel,
                    stride: *stride,
                    gru_units: *gru_units,
                },
                &mut rng,
            )?;
            Nets::Recurrent { enc_y, enc_d, dec }
        }
    };
    let prior_net = DenseStack::init(
        &mut store,
        "prior_d",
        DenseStackSpec {
            input_dim: n_dom,
            hidden_dims: vec![spec.domain_prior_hidden],
            output: OutputHead::Gaussian { dim: mp },
        },
        &mut rng,
    )?;
    let clf = store.register_linear("clf", mp, n_dom, &mut rng);
    let gm = match spec.prior {
        PriorKind::FixedGaussian => None,
        PriorKind::LearnedGm { components } => {
            let logits = store.register("prior_y.logits", Array2::zeros((components, 1)));
            let means = store.register(
                "prior_y.means",
                Array2::from_shape_fn((components, mp), |_| rng.sample(StandardNormal)),
            );
            // softplus(raw) + STD_EPS == 1 exactly at initialization.
            let raw = ((1.0 - STD_EPS).exp() - 1.0).ln();
            let raw_stds = store.register(
                "prior_y.raw_stds",
                Array2::from_elem((components, mp), raw),
            );
            Some(GmIds {
                logits,
                means,
                raw_stds,
            })
        }
    };
    Ok((
        DivadParts {
            nets,
            prior_net,
            clf,
            gm,
        },
        store,
    ))
}

impl DivadModel {
    /// Fresh model with seeded initialization. `domains` is deduplicated
    /// and sorted; its positions become the classifier/one-hot indices.
    pub fn init(
        spec: DivadSpec,
        domains: &[u32],
        standardizer: Standardizer,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut domains = domains.to_vec();
        domains.sort_unstable();
        domains.dedup();
        let (parts, params) = build_parts(&spec, domains.len(), seed)?;
        Ok(Self {
            spec,
            domains,
            standardizer,
            parts,
            params,
        })
    }

    pub fn spec(&self) -> &DivadSpec {
        &self.spec
    }

    pub fn domains(&self) -> &[u32] {
        &self.domains
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    #[cfg(test)]
    pub(crate) fn parts(&self) -> &DivadParts {
        &self.parts
    }

    /// Position of a domain id in the sorted vocabulary.
    pub fn domain_index(&self, domain_id: u32) -> Result<usize, ModelError> {
        self.domains
            .binary_search(&domain_id)
            .map_err(|_| ModelError::BadConfig(format!("unknown domain id {domain_id}")))
    }

    fn check_window(&self, x: &Array2<f64>) -> Result<(), ModelError> {
        let want = (self.spec.window_len, self.spec.n_features);
        if x.dim() != want {
            return Err(NetworkError::ShapeMismatch {
                context: "model input window".into(),
                expected: format!("{want:?}"),
                got: format!("{:?}", x.dim()),
            }
            .into());
        }
        Ok(())
    }

    fn check_domain(&self, d: usize) -> Result<(), ModelError> {
        if d >= self.domains.len() {
            return Err(ModelError::DomainOutOfRange {
                d,
                n: self.domains.len(),
            });
        }
        Ok(())
    }

    fn check_noise(&self, noise: &NoisePair) -> Result<(), ModelError> {
        let mp = self.spec.encoding_dim;
        if noise.y.len() != mp || noise.d.len() != mp {
            return Err(ModelError::BadConfig(format!(
                "noise dimension must be {mp}, got ({}, {})",
                noise.y.len(),
                noise.d.len()
            )));
        }
        Ok(())
    }

    /// Single-window evidence lower bound under one reparameterized sample
    /// per encoder. `x` must already be standardized.
    pub fn elbo(
        &self,
        x: &Array2<f64>,
        d: usize,
        noise: &NoisePair,
        beta: f64,
    ) -> Result<(f64, ElboComponents), ModelError> {
        self.check_window(x)?;
        self.check_domain(d)?;
        self.check_noise(noise)?;
        let v = graph::sample_values(&self.parts, &self.spec, self.domains.len(), &self.params, x, d, noise);
        let comps = ElboComponents {
            recon: v.recon,
            kl_y: v.kl_y,
            kl_d: v.kl_d,
        };
        let elbo = v.recon - beta * v.kl_y - beta * v.kl_d;
        if !elbo.is_finite() {
            return Err(ModelError::Numerical(format!(
                "non-finite ELBO: {comps:?}"
            )));
        }
        Ok((elbo, comps))
    }

    /// Domain cross-entropy on the same reparameterized `z_d` sample the
    /// ELBO uses.
    pub fn domain_loss(
        &self,
        x: &Array2<f64>,
        d: usize,
        noise: &NoisePair,
    ) -> Result<f64, ModelError> {
        self.check_window(x)?;
        self.check_domain(d)?;
        self.check_noise(noise)?;
        let v = graph::sample_values(&self.parts, &self.spec, self.domains.len(), &self.params, x, d, noise);
        if !v.ce.is_finite() {
            return Err(ModelError::Numerical(format!("non-finite cross-entropy {}", v.ce)));
        }
        Ok(v.ce)
    }

    /// Mean over the batch of `-(ELBO) + alpha_d * cross-entropy`, the
    /// quantity gradient descent minimizes, under caller-supplied noise.
    pub fn total_objective_with_noise(
        &self,
        windows: &[&Array2<f64>],
        d: &[usize],
        noises: &[NoisePair],
        beta: f64,
        alpha_d: f64,
    ) -> Result<f64, ModelError> {
        if windows.is_empty() {
            return Err(ModelError::Empty);
        }
        if windows.len() != d.len() || windows.len() != noises.len() {
            return Err(ModelError::BadConfig(
                "windows, domains, and noise draws must align".into(),
            ));
        }
        let mut total = 0.0;
        for ((x, &di), noise) in windows.iter().zip(d).zip(noises) {
            let (elbo, _) = self.elbo(x, di, noise, beta)?;
            let ce = self.domain_loss(x, di, noise)?;
            total += -elbo + alpha_d * ce;
        }
        Ok(total / windows.len() as f64)
    }

    /// As [`total_objective_with_noise`](Self::total_objective_with_noise)
    /// but over a window set, drawing one noise pair per window (y then d,
    /// in window order) from the seeded generator.
    pub fn total_objective(
        &self,
        ws: &WindowSet,
        beta: f64,
        alpha_d: f64,
        noise_seed: u64,
    ) -> Result<f64, ModelError> {
        if ws.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mp = self.spec.encoding_dim;
        let noises: Vec<NoisePair> = (0..ws.len())
            .map(|_| NoisePair::standard(mp, &mut rng))
            .collect();
        let d: Vec<usize> = ws
            .domain_ids
            .iter()
            .map(|&id| self.domain_index(id))
            .collect::<Result<_, _>>()?;
        let windows: Vec<&Array2<f64>> = ws.windows.iter().collect();
        self.total_objective_with_noise(&windows, &d, &noises, beta, alpha_d)
    }

    /// Compare the analytic gradient of the total objective against central
    /// finite differences, perturbing every scalar parameter in turn. The
    /// noise draws are pinned by `noise_seed`, so the analytic and numeric
    /// passes see the same stochastic objective. Intended for small models;
    /// cost is two forward passes per parameter.
    pub fn gradcheck_objective(
        &mut self,
        ws: &WindowSet,
        beta: f64,
        alpha_d: f64,
        noise_seed: u64,
        tolerance: f64,
    ) -> Result<crate::networks::GradCheckReport, ModelError> {
        if ws.is_empty() {
            return Err(ModelError::Empty);
        }
        let obj =
            graph::DivadObjective::new(&self.parts, &self.spec, ws, &self.domains, beta, alpha_d)?;
        let idx: Vec<usize> = (0..ws.len()).collect();
        let key = train::mix_key(noise_seed, 99, 0);
        crate::networks::gradient_check(&mut self.params, tolerance, |p, grads| match grads {
            Some(g) => obj.eval(p, &idx, key, Some(g)).map(|v| v.0).unwrap_or(f64::NAN),
            None => obj.eval(p, &idx, key, None).map(|v| v.0).unwrap_or(f64::NAN),
        })
        .map_err(ModelError::from)
    }

    fn encoder_posterior(
        &self,
        x: &Array2<f64>,
        invariant: bool,
    ) -> Result<GaussianParams, ModelError> {
        self.check_window(x)?;
        match &self.parts.nets {
            Nets::Dense { enc_y, enc_d, .. } => {
                let flat: Vec<f64> = x.iter().cloned().collect();
                let enc = if invariant { enc_y } else { enc_d };
                Ok(enc.forward_single(&self.params, &flat)?.into_gaussian())
            }
            Nets::Recurrent { enc_y, enc_d, .. } => {
                let mut t = Tape::new(&self.params);
                let xv = t.input(x.clone());
                let enc = if invariant { enc_y } else { enc_d };
                let (mv, sv) = enc.forward_tape(&mut t, xv);
                Ok(GaussianParams {
                    mean: t.value(mv).iter().cloned().collect(),
                    std: t.value(sv).iter().cloned().collect(),
                })
            }
        }
    }

    /// Deterministic invariant encoding: the mean of `q(z_y | x)`.
    pub fn encode_y(&self, x: &Array2<f64>) -> Result<Vec<f64>, ModelError> {
        Ok(self.encoder_posterior(x, true)?.mean)
    }

    /// Mean of the domain posterior `q(z_d | x)`.
    pub fn encode_d(&self, x: &Array2<f64>) -> Result<Vec<f64>, ModelError> {
        Ok(self.encoder_posterior(x, false)?.mean)
    }

    /// Invariant encodings for every window, one row per window.
    pub fn encode_y_batch(&self, ws: &WindowSet) -> Result<Array2<f64>, ModelError> {
        if ws.is_empty() {
            return Err(ModelError::Empty);
        }
        let idx: Vec<usize> = (0..ws.len()).collect();
        let rows = par::map_chunks(&idx, 64, |chunk| {
            chunk
                .iter()
                .map(|&i| self.encode_y(&ws.windows[i]))
                .collect::<Result<Vec<_>, _>>()
        });
        let mut out = Array2::zeros((ws.len(), self.spec.encoding_dim));
        let mut r = 0;
        for chunk in rows {
            for enc in chunk? {
                for (j, v) in enc.iter().enumerate() {
                    out[[r, j]] = *v;
                }
                r += 1;
            }
        }
        Ok(out)
    }

    /// Classifier logits on the mean of `q(z_d | x)`.
    pub fn domain_logits(&self, x: &Array2<f64>) -> Result<Vec<f64>, ModelError> {
        let zd = self.encode_d(x)?;
        let w = self.params.get(self.parts.clf.0);
        let b = self.params.get(self.parts.clf.1);
        let n = self.domains.len();
        let mut logits = vec![0.0; n];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut acc = b[[0, j]];
            for (i, z) in zd.iter().enumerate() {
                acc += z.max(0.0) * w[[i, j]];
            }
            *l = acc;
        }
        Ok(logits)
    }

    /// Domain id with the highest classifier logit.
    pub fn classify_domain(&self, x: &Array2<f64>) -> Result<u32, ModelError> {
        let logits = self.domain_logits(x)?;
        let best = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("at least one domain");
        Ok(self.domains[best])
    }

    /// Values of the learned mixture prior, if the model has one.
    pub fn gm_prior_values(&self) -> Option<GmPriorValues> {
        let gm = self.parts.gm.as_ref()?;
        let logits = self.params.get(gm.logits);
        let lse = {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
        };
        let log_weights: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let means = self.params.get(gm.means).clone();
        let stds = self
            .params
            .get(gm.raw_stds)
            .mapv(|r| softplus_val(r) + STD_EPS);
        Some(GmPriorValues {
            log_weights,
            means,
            stds,
        })
    }

    /// Log density of the invariant-latent prior at `z`.
    pub fn prior_log_prob(&self, z: &[f64]) -> Result<f64, ModelError> {
        if z.len() != self.spec.encoding_dim {
            return Err(ModelError::BadConfig(format!(
                "latent dimension must be {}, got {}",
                self.spec.encoding_dim,
                z.len()
            )));
        }
        Ok(match self.gm_prior_values() {
            None => gaussian_log_prob(&GaussianParams::standard(z.len()), z),
            Some(gm) => gm_log_prob(&gm, z),
        })
    }
}

/// One named parameter array, as persisted in a model bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub values: Array2<f64>,
}

/// Everything needed to reconstruct a trained model from disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivadBundle {
    pub spec: DivadSpec,
    pub domains: Vec<u32>,
    pub standardizer: Standardizer,
    pub params: Vec<NamedParam>,
}

impl DivadModel {
    pub fn to_bundle(&self) -> DivadBundle {
        let params = (0..self.params.len())
            .map(|i| {
                let id = crate::networks::ParamId(i);
                NamedParam {
                    name: self.params.name(id).to_string(),
                    values: self.params.get(id).clone(),
                }
            })
            .collect();
        DivadBundle {
            spec: self.spec.clone(),
            domains: self.domains.clone(),
            standardizer: self.standardizer.clone(),
            params,
        }
    }

    /// Rebuilds the model around a fresh parameter store, then overwrites
    /// every array by name; bundles from a different topology are rejected.
    pub fn from_bundle(bundle: DivadBundle) -> Result<Self, ModelError> {
        let mut model = Self::init(bundle.spec, &bundle.domains, bundle.standardizer, 0)?;
        if bundle.params.len() != model.params.len() {
            return Err(ModelError::BadConfig(format!(
                "bundle has {} parameter arrays, the topology needs {}",
                bundle.params.len(),
                model.params.len()
            )));
        }
        for p in bundle.params {
            let id = model.params.find(&p.name).ok_or_else(|| {
                ModelError::BadConfig(format!("bundle parameter `{}` is unknown", p.name))
            })?;
            let dst = model.params.get_mut(id);
            if dst.dim() != p.values.dim() {
                return Err(ModelError::BadConfig(format!(
                    "bundle parameter `{}` is {:?}, expected {:?}",
                    p.name,
                    p.values.dim(),
                    dst.dim()
                )));
            }
            *dst = p.values;
        }
        Ok(model)
    }
}

pub(crate) fn softplus_val(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `KL(q || N(0, I))` for a diagonal Gaussian, in closed form.
pub fn kl_diag_standard(q: &GaussianParams) -> f64 {
    q.mean
        .iter()
        .zip(&q.std)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum()
}

/// `KL(q || p)` between two diagonal Gaussians, in closed form.
pub fn kl_diag_gaussians(q: &GaussianParams, p: &GaussianParams) -> f64 {
    assert_eq!(q.dim(), p.dim(), "dimension mismatch");
    q.mean
        .iter()
        .zip(&q.std)
        .zip(p.mean.iter().zip(&p.std))
        .map(|((mq, sq), (mp, sp))| {
            let dm = mq - mp;
            (sp / sq).ln() + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5
        })
        .sum()
}
