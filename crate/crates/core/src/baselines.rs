//! Reference window scorers: PCA reconstruction error, squared Mahalanobis
//! distance, and dense autoencoder/VAE detectors.
//!
//! All four satisfy the [`WindowScorer`] contract, so they slot into the
//! online scorer and the evaluation pipeline exactly like the main model.
//! The two trained baselines reuse its fitting protocol (AdamW, learning
//! rate grid, early stopping with best-checkpoint restore).

use crate::dataset::{train_val_split, DatasetError, Standardizer, WindowSet};
use crate::model::{
    fit_loop, gaussian_logprob_rows, kl_std_rows, mix_key, population_mean_cov, FitSpec,
    LossComponents, LrRun, ModelError, NamedParam, Objective, TrainHistory, DEFAULT_LR_GRID,
    GRAD_CHUNK,
};
use crate::networks::tape::{Grads, ParamId, ParamStore, Tape};
use crate::networks::{
    gaussian_log_prob, reparameterize, DenseStack, DenseStackSpec, HeadOut, NetworkError,
    OutputHead,
};
use crate::par;
use crate::scoring::{ScoringError, WindowScorer};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ridge added to fitted covariances before inversion.
pub const COV_RIDGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("{k} components requested for {dim}-dimensional windows")]
    BadCount { k: usize, dim: usize },
    #[error("variance fraction {0} is outside (0, 1]")]
    BadFraction(f64),
    #[error("empty window set")]
    Empty,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// How many principal directions to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentCount {
    Count(usize),
    /// Smallest count whose cumulative explained variance reaches the
    /// fraction.
    VarianceFraction(f64),
}

fn flatten_rows(ws: &WindowSet) -> Array2<f64> {
    let d = ws.window_len * ws.n_features;
    let mut x = Array2::zeros((ws.len(), d));
    for (r, w) in ws.windows.iter().enumerate() {
        for (c, v) in w.iter().enumerate() {
            x[[r, c]] = *v;
        }
    }
    x
}

fn check_shape(window: &ArrayView2<'_, f64>, l: usize, m: usize) -> Result<(), ScoringError> {
    if window.nrows() != l || window.ncols() != m {
        return Err(ScoringError::Model(ModelError::BadConfig(format!(
            "window is {}x{} but the scorer expects {l}x{m}",
            window.nrows(),
            window.ncols()
        ))));
    }
    Ok(())
}

fn standardized_flat(s: &Standardizer, window: &ArrayView2<'_, f64>) -> Vec<f64> {
    let mut x = window.to_owned();
    s.transform_inplace(&mut x);
    x.iter().cloned().collect()
}

/// Linear-subspace detector: scores a window by the mean squared distance
/// between its flattened form and the projection onto the leading principal
/// directions of the training windows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaModel {
    window_len: usize,
    n_features: usize,
    standardizer: Standardizer,
    mean: Vec<f64>,
    /// `(k, d)`, orthonormal rows, leading directions first.
    components: Array2<f64>,
    /// Fraction of the total variance captured by each retained direction.
    explained: Vec<f64>,
}

impl PcaModel {
    /// Fits on standardized windows; `standardizer` is kept so raw windows
    /// can be scored later.
    pub fn fit(
        windows: &WindowSet,
        standardizer: &Standardizer,
        select: ComponentCount,
    ) -> Result<Self, BaselineError> {
        if windows.is_empty() {
            return Err(BaselineError::Empty);
        }
        let x = flatten_rows(windows);
        let d = x.ncols();
        let (mean, cov) = population_mean_cov(&x);
        let sym = nalgebra::DMatrix::from_fn(d, d, |r, c| cov[[r, c]]);
        let eig = sym.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let evals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let total: f64 = evals.iter().sum();
        let k = match select {
            ComponentCount::Count(k) => {
                if k == 0 || k > d {
                    return Err(BaselineError::BadCount { k, dim: d });
                }
                k
            }
            ComponentCount::VarianceFraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(BaselineError::BadFraction(f));
                }
                let mut acc = 0.0;
                let mut k = d;
                for (i, ev) in evals.iter().enumerate() {
                    acc += ev;
                    if acc >= f * total {
                        k = i + 1;
                        break;
                    }
                }
                k
            }
        };
        let components = Array2::from_shape_fn((k, d), |(r, c)| eig.eigenvectors[(c, order[r])]);
        let explained = evals[..k]
            .iter()
            .map(|ev| if total > 0.0 { ev / total } else { 0.0 })
            .collect();
        Ok(Self {
            window_len: windows.window_len,
            n_features: windows.n_features,
            standardizer: standardizer.clone(),
            mean: mean.to_vec(),
            components,
            explained,
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn components(&self) -> &Array2<f64> {
        &self.components
    }

    pub fn explained(&self) -> &[f64] {
        &self.explained
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    fn score_flat(&self, v: &[f64]) -> f64 {
        let d = v.len();
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let mut residual = centered.clone();
        for row in self.components.rows() {
            let coef: f64 = centered.iter().zip(row).map(|(c, e)| c * e).sum();
            for (r, e) in residual.iter_mut().zip(row) {
                *r -= coef * e;
            }
        }
        residual.iter().map(|r| r * r).sum::<f64>() / d as f64
    }
}

impl WindowScorer for PcaModel {
    fn method(&self) -> &'static str {
        "pca"
    }

    fn window_len(&self) -> usize {
        self.window_len
    }

    fn score_window(&self, window: ArrayView2<'_, f64>) -> Result<f64, ScoringError> {
        check_shape(&window, self.window_len, self.n_features)?;
        Ok(self.score_flat(&standardized_flat(&self.standardizer, &window)))
    }
}

/// Squared Mahalanobis distance to the training mean under the (ridged)
/// training covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MahalanobisModel {
    window_len: usize,
    n_features: usize,
    standardizer: Standardizer,
    mean: Vec<f64>,
    /// Ridged covariance actually inverted.
    cov: Array2<f64>,
    precision: Array2<f64>,
}

impl MahalanobisModel {
    pub fn fit(windows: &WindowSet, standardizer: &Standardizer) -> Result<Self, BaselineError> {
        if windows.is_empty() {
            return Err(BaselineError::Empty);
        }
        let x = flatten_rows(windows);
        let d = x.ncols();
        let (mean, mut cov) = population_mean_cov(&x);
        for i in 0..d {
            cov[[i, i]] += COV_RIDGE;
        }
        let sym = nalgebra::DMatrix::from_fn(d, d, |r, c| cov[[r, c]]);
        let inv = sym
            .cholesky()
            .ok_or_else(|| BaselineError::Numerical("ridged covariance not positive definite".into()))?
            .inverse();
        let precision = Array2::from_shape_fn((d, d), |(r, c)| inv[(r, c)]);
        Ok(Self {
            window_len: windows.window_len,
            n_features: windows.n_features,
            standardizer: standardizer.clone(),
            mean: mean.to_vec(),
            cov,
            precision,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Array2<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &Array2<f64> {
        &self.precision
    }

    fn score_flat(&self, v: &[f64]) -> f64 {
        let d: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let mut s = 0.0;
        for (i, di) in d.iter().enumerate() {
            for (j, dj) in d.iter().enumerate() {
                s += di * self.precision[[i, j]] * dj;
            }
        }
        s
    }
}

impl WindowScorer for MahalanobisModel {
    fn method(&self) -> &'static str {
        "mahalanobis"
    }

    fn window_len(&self) -> usize {
        self.window_len
    }

    fn score_window(&self, window: ArrayView2<'_, f64>) -> Result<f64, ScoringError> {
        check_shape(&window, self.window_len, self.n_features)?;
        Ok(self.score_flat(&standardized_flat(&self.standardizer, &window)))
    }
}

/// Optimization settings shared by the trained baselines; mirrors the main
/// model's protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineTrainConfig {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        Self {
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

impl BaselineTrainConfig {
    fn validate(&self) -> Result<(), BaselineError> {
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(*lr > 0.0)) {
            return Err(BaselineError::Numerical(
                "learning-rate grid must be nonempty and positive".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(BaselineError::Numerical(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(BaselineError::Numerical(
                "validation fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn fit_spec(&self, lr: f64) -> FitSpec {
        FitSpec {
            epochs: self.epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseAeConfig {
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub train: BaselineTrainConfig,
}

impl Default for DenseAeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![200],
            latent: 16,
            train: BaselineTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseVaeConfig {
    pub hidden: Vec<usize>,
    pub latent: usize,
    /// Encoder samples averaged per scored window.
    pub samples: usize,
    pub train: BaselineTrainConfig,
}

impl Default for DenseVaeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![200],
            latent: 16,
            samples: 256,
            train: BaselineTrainConfig::default(),
        }
    }
}

fn ae_nets(
    d: usize,
    hidden: &[usize],
    latent: usize,
    gaussian: bool,
    seed: u64,
) -> Result<(DenseStack, DenseStack, ParamStore), BaselineError> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc_head = if gaussian {
        OutputHead::Gaussian { dim: latent }
    } else {
        OutputHead::Linear { dim: latent }
    };
    let dec_head = if gaussian {
        OutputHead::Gaussian { dim: d }
    } else {
        OutputHead::Linear { dim: d }
    };
    let enc = DenseStack::init(
        &mut store,
        "enc",
        DenseStackSpec {
            input_dim: d,
            hidden_dims: hidden.to_vec(),
            output: enc_head,
        },
        &mut rng,
    )?;
    let mut rev = hidden.to_vec();
    rev.reverse();
    let dec = DenseStack::init(
        &mut store,
        "dec",
        DenseStackSpec {
            input_dim: latent,
            hidden_dims: rev,
            output: dec_head,
        },
        &mut rng,
    )?;
    Ok((enc, dec, store))
}

/// Mean squared reconstruction error through a linear-head bottleneck.
struct AeObjective<'a> {
    data: &'a Array2<f64>,
    enc: &'a DenseStack,
    dec: &'a DenseStack,
}

impl AeObjective<'_> {
    fn chunk_eval(
        &self,
        params: &ParamStore,
        chunk: &[usize],
        want_grads: bool,
    ) -> (f64, f64, Option<Grads>) {
        let mut t = Tape::new(params);
        let d = self.data.ncols();
        let mut xb = Array2::zeros((chunk.len(), d));
        for (r, &i) in chunk.iter().enumerate() {
            xb.row_mut(r).assign(&self.data.row(i));
        }
        let xv = t.input(xb);
        let HeadOut::Linear(z) = self.enc.forward_tape(&mut t, xv) else {
            unreachable!("autoencoder heads are linear")
        };
        let HeadOut::Linear(out) = self.dec.forward_tape(&mut t, z) else {
            unreachable!("autoencoder heads are linear")
        };
        let diff = t.sub(out, xv);
        let sq = t.square(diff);
        let rows = t.sum_rows(sq);
        let mse = t.scale(rows, 1.0 / d as f64);
        let loss = t.sum(mse);
        let grads = if want_grads {
            let mut g = Grads::zeros_like(params);
            t.backward(loss, &mut g);
            Some(g)
        } else {
            None
        };
        (t.scalar(loss), t.value(mse).iter().sum(), grads)
    }
}

impl Objective for AeObjective<'_> {
    fn eval(
        &self,
        params: &ParamStore,
        idx: &[usize],
        _noise_key: u64,
        grads: Option<&mut Grads>,
    ) -> Result<(f64, LossComponents), ModelError> {
        if idx.is_empty() {
            return Err(ModelError::Empty);
        }
        let want = grads.is_some();
        let parts = par::map_chunks(idx, GRAD_CHUNK, |c| self.chunk_eval(params, c, want));
        let n = idx.len() as f64;
        let mut loss = 0.0;
        let mut recon = 0.0;
        let mut acc: Option<Grads> = None;
        for (l, r, g) in parts {
            loss += l;
            recon += r;
            if let Some(g) = g {
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => a.add_assign(&g),
                }
            }
        }
        if let (Some(out), Some(mut a)) = (grads, acc) {
            a.scale(1.0 / n);
            out.add_assign(&a);
        }
        Ok((
            loss / n,
            LossComponents {
                recon: recon / n,
                ..LossComponents::default()
            },
        ))
    }
}

/// Single-sample negative ELBO against a standard-normal latent prior.
struct VaeObjective<'a> {
    data: &'a Array2<f64>,
    enc: &'a DenseStack,
    dec: &'a DenseStack,
    latent: usize,
}

struct VaeSample {
    idx: usize,
    eps: Vec<f64>,
}

impl VaeObjective<'_> {
    fn chunk_eval(
        &self,
        params: &ParamStore,
        chunk: &[VaeSample],
        want_grads: bool,
    ) -> (f64, LossComponents, Option<Grads>) {
        let mut t = Tape::new(params);
        let d = self.data.ncols();
        let mut xb = Array2::zeros((chunk.len(), d));
        let mut eps = Array2::zeros((chunk.len(), self.latent));
        for (r, s) in chunk.iter().enumerate() {
            xb.row_mut(r).assign(&self.data.row(s.idx));
            for (c, e) in s.eps.iter().enumerate() {
                eps[[r, c]] = *e;
            }
        }
        let xv = t.input(xb);
        let ev = t.input(eps);
        let (mu, sd) = self.enc.forward_gaussian_tape(&mut t, xv);
        let noise = t.mul(sd, ev);
        let z = t.add(mu, noise);
        let (mx, sx) = self.dec.forward_gaussian_tape(&mut t, z);
        let recon = gaussian_logprob_rows(&mut t, xv, mx, sx);
        let kl = kl_std_rows(&mut t, mu, sd);
        let nrec = t.neg(recon);
        let per_row = t.add(nrec, kl);
        let loss = t.sum(per_row);
        let grads = if want_grads {
            let mut g = Grads::zeros_like(params);
            t.backward(loss, &mut g);
            Some(g)
        } else {
            None
        };
        let comps = LossComponents {
            recon: t.value(recon).iter().sum(),
            kl_y: t.value(kl).iter().sum(),
            ..LossComponents::default()
        };
        (t.scalar(loss), comps, grads)
    }
}

impl Objective for VaeObjective<'_> {
    fn eval(
        &self,
        params: &ParamStore,
        idx: &[usize],
        noise_key: u64,
        grads: Option<&mut Grads>,
    ) -> Result<(f64, LossComponents), ModelError> {
        if idx.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise_key);
        let samples: Vec<VaeSample> = idx
            .iter()
            .map(|&i| VaeSample {
                idx: i,
                eps: (0..self.latent).map(|_| rng.sample(StandardNormal)).collect(),
            })
            .collect();
        let want = grads.is_some();
        let parts = par::map_chunks(&samples, GRAD_CHUNK, |c| self.chunk_eval(params, c, want));
        let n = idx.len() as f64;
        let mut loss = 0.0;
        let mut comps = LossComponents::default();
        let mut acc: Option<Grads> = None;
        for (l, c, g) in parts {
            loss += l;
            comps.recon += c.recon;
            comps.kl_y += c.kl_y;
            if let Some(g) = g {
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => a.add_assign(&g),
                }
            }
        }
        if let (Some(out), Some(mut a)) = (grads, acc) {
            a.scale(1.0 / n);
            out.add_assign(&a);
        }
        comps.recon /= n;
        comps.kl_y /= n;
        Ok((loss / n, comps))
    }
}

/// Deterministic dense autoencoder scored by mean squared reconstruction
/// error.
#[derive(Debug, Clone)]
pub struct DenseAe {
    window_len: usize,
    n_features: usize,
    standardizer: Standardizer,
    hidden: Vec<usize>,
    latent: usize,
    enc: DenseStack,
    dec: DenseStack,
    params: ParamStore,
}

/// Disk form of a [`DenseAe`]: the stacks are rebuilt from the layer sizes
/// and every parameter array is overwritten by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseAeBundle {
    pub window_len: usize,
    pub n_features: usize,
    pub standardizer: Standardizer,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub params: Vec<NamedParam>,
}

fn named_params(store: &ParamStore) -> Vec<NamedParam> {
    (0..store.len())
        .map(|i| {
            let id = ParamId(i);
            NamedParam {
                name: store.name(id).to_string(),
                values: store.get(id).clone(),
            }
        })
        .collect()
}

fn restore_params(store: &mut ParamStore, params: Vec<NamedParam>) -> Result<(), BaselineError> {
    if params.len() != store.len() {
        return Err(BaselineError::Numerical(format!(
            "bundle has {} parameter arrays, the topology needs {}",
            params.len(),
            store.len()
        )));
    }
    for p in params {
        let id = store.find(&p.name).ok_or_else(|| {
            BaselineError::Numerical(format!("bundle parameter `{}` is unknown", p.name))
        })?;
        let dst = store.get_mut(id);
        if dst.dim() != p.values.dim() {
            return Err(BaselineError::Numerical(format!(
                "bundle parameter `{}` is {:?}, expected {:?}",
                p.name,
                p.values.dim(),
                dst.dim()
            )));
        }
        *dst = p.values;
    }
    Ok(())
}

impl DenseAe {
    /// Fits on standardized windows with one run per learning rate, keeping
    /// the lowest validation loss.
    pub fn fit(
        windows: &WindowSet,
        standardizer: &Standardizer,
        config: &DenseAeConfig,
    ) -> Result<(Self, TrainHistory), BaselineError> {
        config.train.validate()?;
        if windows.is_empty() {
            return Err(BaselineError::Empty);
        }
        let d = windows.window_len * windows.n_features;
        let (tr, va) = train_val_split(windows, config.train.val_fraction, config.train.seed)?;
        if va.is_empty() {
            return Err(BaselineError::Model(ModelError::BadConfig(
                "validation split is empty; provide sequences with at least two windows".into(),
            )));
        }
        let train_idx: Vec<usize> = (0..tr.len()).collect();
        let val_idx: Vec<usize> = (tr.len()..tr.len() + va.len()).collect();
        let mut combined = tr;
        combined.extend(va);
        let flat = flatten_rows(&combined);

        let mut runs: Vec<LrRun> = Vec::with_capacity(config.train.lr_grid.len());
        let mut best: Option<(usize, DenseAe)> = None;
        let mut last_diverged: Option<ModelError> = None;
        for &lr in &config.train.lr_grid {
            let (enc, dec, mut store) =
                ae_nets(d, &config.hidden, config.latent, false, config.train.seed)?;
            let obj = AeObjective {
                data: &flat,
                enc: &enc,
                dec: &dec,
            };
            match fit_loop(&mut store, &obj, &train_idx, &val_idx, &config.train.fit_spec(lr)) {
                Ok(fit) => {
                    let better = best.as_ref().map_or(true, |(i, _)| {
                        fit.best_val_loss < runs[*i].fit.best_val_loss
                    });
                    runs.push(LrRun {
                        lr,
                        diverged: false,
                        fit,
                    });
                    if better {
                        drop(obj);
                        best = Some((
                            runs.len() - 1,
                            DenseAe {
                                window_len: windows.window_len,
                                n_features: windows.n_features,
                                standardizer: standardizer.clone(),
                                hidden: config.hidden.clone(),
                                latent: config.latent,
                                enc,
                                dec,
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
                Err(e) => return Err(e.into()),
            }
        }
        match best {
            Some((chosen, model)) => Ok((model, TrainHistory { runs, chosen })),
            None => Err(last_diverged
                .expect("at least one learning rate was attempted")
                .into()),
        }
    }

    fn reconstruct(&self, flat: &[f64]) -> Result<Vec<f64>, ScoringError> {
        let z = match self.enc.forward_single(&self.params, flat).map_err(ModelError::from)? {
            crate::networks::SingleOut::Linear(z) => z,
            _ => unreachable!("autoencoder heads are linear"),
        };
        match self.dec.forward_single(&self.params, &z).map_err(ModelError::from)? {
            crate::networks::SingleOut::Linear(o) => Ok(o),
            _ => unreachable!("autoencoder heads are linear"),
        }
    }
}

impl DenseAe {
    pub fn to_bundle(&self) -> DenseAeBundle {
        DenseAeBundle {
            window_len: self.window_len,
            n_features: self.n_features,
            standardizer: self.standardizer.clone(),
            hidden: self.hidden.clone(),
            latent: self.latent,
            params: named_params(&self.params),
        }
    }

    pub fn from_bundle(bundle: DenseAeBundle) -> Result<Self, BaselineError> {
        let d = bundle.window_len * bundle.n_features;
        let (enc, dec, mut store) = ae_nets(d, &bundle.hidden, bundle.latent, false, 0)?;
        restore_params(&mut store, bundle.params)?;
        Ok(Self {
            window_len: bundle.window_len,
            n_features: bundle.n_features,
            standardizer: bundle.standardizer,
            hidden: bundle.hidden,
            latent: bundle.latent,
            enc,
            dec,
            params: store,
        })
    }
}

impl WindowScorer for DenseAe {
    fn method(&self) -> &'static str {
        "dense-ae"
    }

    fn window_len(&self) -> usize {
        self.window_len
    }

    fn score_window(&self, window: ArrayView2<'_, f64>) -> Result<f64, ScoringError> {
        check_shape(&window, self.window_len, self.n_features)?;
        let flat = standardized_flat(&self.standardizer, &window);
        let out = self.reconstruct(&flat)?;
        let d = flat.len() as f64;
        Ok(flat
            .iter()
            .zip(&out)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / d)
    }
}

/// Dense VAE scored by the negative reconstruction log-likelihood averaged
/// over a fixed set of encoder samples.
///
/// The per-window noise draws are frozen when the model is fitted, so
/// scoring is deterministic.
#[derive(Debug, Clone)]
pub struct DenseVae {
    window_len: usize,
    n_features: usize,
    standardizer: Standardizer,
    hidden: Vec<usize>,
    latent: usize,
    enc: DenseStack,
    dec: DenseStack,
    params: ParamStore,
    /// `(samples, latent)` standard-normal draws reused for every window.
    noise: Array2<f64>,
}

/// Disk form of a [`DenseVae`], including the frozen scoring noise so loaded
/// models score bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseVaeBundle {
    pub window_len: usize,
    pub n_features: usize,
    pub standardizer: Standardizer,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub params: Vec<NamedParam>,
    pub noise: Array2<f64>,
}

const VAE_SCORE_NOISE_TAG: u64 = 0x5653;

fn frozen_noise(samples: usize, latent: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_key(seed, VAE_SCORE_NOISE_TAG, 0));
    Array2::from_shape_fn((samples, latent), |_| rng.sample(StandardNormal))
}

impl DenseVae {
    /// Fits on standardized windows with one run per learning rate, keeping
    /// the lowest validation loss.
    pub fn fit(
        windows: &WindowSet,
        standardizer: &Standardizer,
        config: &DenseVaeConfig,
    ) -> Result<(Self, TrainHistory), BaselineError> {
        config.train.validate()?;
        if config.samples == 0 {
            return Err(BaselineError::Numerical(
                "the sample count must be positive".into(),
            ));
        }
        if windows.is_empty() {
            return Err(BaselineError::Empty);
        }
        let d = windows.window_len * windows.n_features;
        let (tr, va) = train_val_split(windows, config.train.val_fraction, config.train.seed)?;
        if va.is_empty() {
            return Err(BaselineError::Model(ModelError::BadConfig(
                "validation split is empty; provide sequences with at least two windows".into(),
            )));
        }
        let train_idx: Vec<usize> = (0..tr.len()).collect();
        let val_idx: Vec<usize> = (tr.len()..tr.len() + va.len()).collect();
        let mut combined = tr;
        combined.extend(va);
        let flat = flatten_rows(&combined);

        let mut runs: Vec<LrRun> = Vec::with_capacity(config.train.lr_grid.len());
        let mut best: Option<(usize, DenseVae)> = None;
        let mut last_diverged: Option<ModelError> = None;
        for &lr in &config.train.lr_grid {
            let (enc, dec, mut store) =
                ae_nets(d, &config.hidden, config.latent, true, config.train.seed)?;
            let obj = VaeObjective {
                data: &flat,
                enc: &enc,
                dec: &dec,
                latent: config.latent,
            };
            match fit_loop(&mut store, &obj, &train_idx, &val_idx, &config.train.fit_spec(lr)) {
                Ok(fit) => {
                    let better = best.as_ref().map_or(true, |(i, _)| {
                        fit.best_val_loss < runs[*i].fit.best_val_loss
                    });
                    runs.push(LrRun {
                        lr,
                        diverged: false,
                        fit,
                    });
                    if better {
                        drop(obj);
                        best = Some((
                            runs.len() - 1,
                            DenseVae {
                                window_len: windows.window_len,
                                n_features: windows.n_features,
                                standardizer: standardizer.clone(),
                                hidden: config.hidden.clone(),
                                latent: config.latent,
                                enc,
                                dec,
                                params: store,
                                noise: frozen_noise(
                                    config.samples,
                                    config.latent,
                                    config.train.seed,
                                ),
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
                Err(e) => return Err(e.into()),
            }
        }
        match best {
            Some((chosen, model)) => Ok((model, TrainHistory { runs, chosen })),
            None => Err(last_diverged
                .expect("at least one learning rate was attempted")
                .into()),
        }
    }

    /// Negative reconstruction log-likelihood under each frozen noise draw.
    fn nll_samples(&self, flat: &[f64]) -> Result<Vec<f64>, ScoringError> {
        let q = self
            .enc
            .forward_single(&self.params, flat)
            .map_err(ModelError::from)?
            .into_gaussian();
        let mut out = Vec::with_capacity(self.noise.nrows());
        for eps in self.noise.rows() {
            let z = reparameterize(&q, eps.as_slice().expect("noise rows are contiguous"));
            let p = self
                .dec
                .forward_single(&self.params, &z)
                .map_err(ModelError::from)?
                .into_gaussian();
            out.push(-gaussian_log_prob(&p, flat));
        }
        Ok(out)
    }
}

impl DenseVae {
    pub fn to_bundle(&self) -> DenseVaeBundle {
        DenseVaeBundle {
            window_len: self.window_len,
            n_features: self.n_features,
            standardizer: self.standardizer.clone(),
            hidden: self.hidden.clone(),
            latent: self.latent,
            params: named_params(&self.params),
            noise: self.noise.clone(),
        }
    }

    pub fn from_bundle(bundle: DenseVaeBundle) -> Result<Self, BaselineError> {
        let d = bundle.window_len * bundle.n_features;
        let (enc, dec, mut store) = ae_nets(d, &bundle.hidden, bundle.latent, true, 0)?;
        restore_params(&mut store, bundle.params)?;
        if bundle.noise.ncols() != bundle.latent {
            return Err(BaselineError::Numerical(format!(
                "bundle noise is {} wide, the latent is {}",
                bundle.noise.ncols(),
                bundle.latent
            )));
        }
        Ok(Self {
            window_len: bundle.window_len,
            n_features: bundle.n_features,
            standardizer: bundle.standardizer,
            hidden: bundle.hidden,
            latent: bundle.latent,
            enc,
            dec,
            params: store,
            noise: bundle.noise,
        })
    }
}

impl WindowScorer for DenseVae {
    fn method(&self) -> &'static str {
        "dense-vae"
    }

    fn window_len(&self) -> usize {
        self.window_len
    }

    fn score_window(&self, window: ArrayView2<'_, f64>) -> Result<f64, ScoringError> {
        check_shape(&window, self.window_len, self.n_features)?;
        let flat = standardized_flat(&self.standardizer, &window);
        let nlls = self.nll_samples(&flat)?;
        Ok(nlls.iter().sum::<f64>() / nlls.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Role;
    use crate::scoring::{OnlineScorer, Smoothing};

    fn identity_standardizer(m: usize) -> Standardizer {
        Standardizer {
            mean: vec![0.0; m],
            std: vec![1.0; m],
            floor: 1e-8,
        }
    }

    /// Windows of seeded noise, several sequences so validation splits work.
    fn noise_windows(l: usize, m: usize, n: usize, seed: u64) -> WindowSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ws = WindowSet::empty(l, m);
        for i in 0..n {
            let w = Array2::from_shape_fn((l, m), |_| rng.sample::<f64, _>(StandardNormal));
            ws.push(w, 0, format!("s{}", i % 4), i);
        }
        ws
    }

    #[test]
    fn full_rank_pca_reconstructs_everything_exactly() {
        let ws = noise_windows(2, 3, 50, 1);
        let pca = PcaModel::fit(&ws, &identity_standardizer(3), ComponentCount::Count(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let w = Array2::from_shape_fn((2, 3), |_| rng.sample::<f64, _>(StandardNormal));
            assert!(pca.score_window(w.view()).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn the_training_mean_scores_zero() {
        let ws = noise_windows(2, 3, 40, 3);
        let pca = PcaModel::fit(&ws, &identity_standardizer(3), ComponentCount::Count(2)).unwrap();
        let mean = Array2::from_shape_vec((2, 3), pca.mean().to_vec()).unwrap();
        assert!(pca.score_window(mean.view()).unwrap() <= 1e-18);

        let maha = MahalanobisModel::fit(&ws, &identity_standardizer(3)).unwrap();
        let mean = Array2::from_shape_vec((2, 3), maha.mean().to_vec()).unwrap();
        assert!(maha.score_window(mean.view()).unwrap() <= 1e-18);
    }

    #[test]
    fn rank_one_data_is_scored_by_orthogonal_distance() {
        // Windows lie exactly on the line through `u`.
        let u = [0.6, -0.3, 0.4, 0.2, -0.5, 0.1];
        let mut ws = WindowSet::empty(2, 3);
        for i in 0..30 {
            let s = (i as f64 - 15.0) / 5.0;
            let w = Array2::from_shape_fn((2, 3), |(r, c)| s * u[r * 3 + c]);
            ws.push(w, 0, "line".into(), i);
        }
        let pca = PcaModel::fit(&ws, &identity_standardizer(3), ComponentCount::Count(1)).unwrap();

        let norm2: f64 = u.iter().map(|x| x * x).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let p: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let centered: Vec<f64> = p.iter().zip(pca.mean()).map(|(x, m)| x - m).collect();
            let along: f64 = centered.iter().zip(&u).map(|(c, e)| c * e).sum::<f64>() / norm2;
            let resid2: f64 = centered
                .iter()
                .zip(&u)
                .map(|(c, e)| {
                    let r = c - along * e;
                    r * r
                })
                .sum();
            let want = resid2 / 6.0;
            let w = Array2::from_shape_vec((2, 3), p).unwrap();
            let got = pca.score_window(w.view()).unwrap();
            assert!((got - want).abs() <= 1e-8 * (1.0 + want), "{got} vs {want}");
        }
    }

    #[test]
    fn retained_components_are_orthonormal() {
        let ws = noise_windows(1, 5, 80, 5);
        let pca = PcaModel::fit(&ws, &identity_standardizer(5), ComponentCount::Count(3)).unwrap();
        let c = pca.components();
        let gram = c.dot(&c.t());
        for r in 0..3 {
            for col in 0..3 {
                let want = if r == col { 1.0 } else { 0.0 };
                assert!((gram[[r, col]] - want).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn scores_are_invariant_to_rotating_the_retained_basis() {
        let ws = noise_windows(1, 4, 60, 6);
        let pca = PcaModel::fit(&ws, &identity_standardizer(4), ComponentCount::Count(2)).unwrap();
        // Random orthogonal 2x2 mix of the retained directions.
        let theta = 0.83f64;
        let (s, c) = theta.sin_cos();
        let r = ndarray::array![[c, s], [-s, c]];
        let mut rotated = pca.clone();
        rotated.components = r.dot(&pca.components);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let w = Array2::from_shape_fn((1, 4), |_| rng.sample::<f64, _>(StandardNormal));
            let a = pca.score_window(w.view()).unwrap();
            let b = rotated.score_window(w.view()).unwrap();
            assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }
    }

    #[test]
    fn variance_fraction_keeps_the_smallest_sufficient_count() {
        // Independent axes with variances ~9, ~1, ~0.25.
        let scales = [3.0, 1.0, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ws = WindowSet::empty(1, 3);
        for i in 0..2000 {
            let w = Array2::from_shape_fn((1, 3), |(_, c)| {
                scales[c] * rng.sample::<f64, _>(StandardNormal)
            });
            ws.push(w, 0, "s".into(), i);
        }
        let std = identity_standardizer(3);
        let k = |f| {
            PcaModel::fit(&ws, &std, ComponentCount::VarianceFraction(f))
                .unwrap()
                .n_components()
        };
        assert_eq!(k(0.5), 1);
        assert_eq!(k(0.95), 2);
        assert_eq!(k(0.99), 3);
    }

    #[test]
    fn bad_component_requests_are_rejected() {
        let ws = noise_windows(2, 3, 20, 9);
        let std = identity_standardizer(3);
        assert!(matches!(
            PcaModel::fit(&ws, &std, ComponentCount::Count(7)),
            Err(BaselineError::BadCount { k: 7, dim: 6 })
        ));
        assert!(matches!(
            PcaModel::fit(&ws, &std, ComponentCount::Count(0)),
            Err(BaselineError::BadCount { .. })
        ));
        assert!(matches!(
            PcaModel::fit(&ws, &std, ComponentCount::VarianceFraction(0.0)),
            Err(BaselineError::BadFraction(_))
        ));
        assert!(matches!(
            PcaModel::fit(&ws, &std, ComponentCount::VarianceFraction(1.2)),
            Err(BaselineError::BadFraction(_))
        ));
    }

    #[test]
    fn identity_covariance_reduces_to_squared_euclidean_distance() {
        let d = 4;
        let model = MahalanobisModel {
            window_len: 1,
            n_features: d,
            standardizer: identity_standardizer(d),
            mean: vec![0.0; d],
            cov: Array2::eye(d),
            precision: Array2::eye(d),
        };
        let w = ndarray::array![[1.0, -2.0, 0.5, 3.0]];
        let want = 1.0 + 4.0 + 0.25 + 9.0;
        assert_eq!(model.score_window(w.view()).unwrap(), want);
    }

    #[test]
    fn correlated_gaussian_scores_match_a_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ws = WindowSet::empty(1, 2);
        for i in 0..500 {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let w = ndarray::array![[a + 0.5, 0.8 * a + 0.3 * b - 1.0]];
            ws.push(w, 0, "s".into(), i);
        }
        let model = MahalanobisModel::fit(&ws, &identity_standardizer(2)).unwrap();

        // precision * cov = I after regularization.
        let prod = model.precision().dot(model.cov());
        for r in 0..2 {
            for c in 0..2 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((prod[[r, c]] - want).abs() <= 1e-8);
            }
        }

        let chol = nalgebra::DMatrix::from_fn(2, 2, |r, c| model.cov()[[r, c]])
            .cholesky()
            .unwrap();
        for _ in 0..10 {
            let p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let d = nalgebra::DVector::from_vec(vec![p[0] - model.mean()[0], p[1] - model.mean()[1]]);
            let want = d.dot(&chol.solve(&d));
            let w = ndarray::array![[p[0], p[1]]];
            let got = model.score_window(w.view()).unwrap();
            assert!((got - want).abs() <= 1e-10 * (1.0 + want), "{got} vs {want}");
        }
    }

    #[test]
    fn training_scores_average_to_the_dimension_on_gaussian_data() {
        let ws = noise_windows(1, 4, 2000, 12);
        let model = MahalanobisModel::fit(&ws, &identity_standardizer(4)).unwrap();
        let mean_score = ws
            .windows
            .iter()
            .map(|w| model.score_window(w.view()).unwrap())
            .sum::<f64>()
            / ws.len() as f64;
        assert!((mean_score - 4.0).abs() / 4.0 <= 0.05, "{mean_score}");
    }

    fn tiny_ae_config(seed: u64) -> DenseAeConfig {
        DenseAeConfig {
            hidden: vec![16],
            latent: 2,
            train: BaselineTrainConfig {
                lr_grid: vec![3e-3],
                epochs: 40,
                patience: 40,
                batch_size: 16,
                seed,
                ..BaselineTrainConfig::default()
            },
        }
    }

    /// Windows concentrated near a 1-D manifold so a 2-D bottleneck can
    /// reconstruct them well.
    fn line_windows(n: usize, seed: u64) -> WindowSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ws = WindowSet::empty(1, 4);
        for i in 0..n {
            let s: f64 = rng.random_range(-2.0..2.0);
            let w = Array2::from_shape_fn((1, 4), |(_, c)| {
                s * [1.0, -0.5, 0.25, 0.75][c] + 0.05 * rng.sample::<f64, _>(StandardNormal)
            });
            ws.push(w, 0, format!("s{}", i % 4), i);
        }
        ws
    }

    #[test]
    fn a_zeroed_autoencoder_scores_zero_input_as_zero() {
        let (enc, dec, mut store) = ae_nets(4, &[8], 2, false, 0).unwrap();
        for a in store.arrays_mut() {
            a.fill(0.0);
        }
        let ae = DenseAe {
            window_len: 1,
            n_features: 4,
            standardizer: identity_standardizer(4),
            hidden: vec![8],
            latent: 2,
            enc,
            dec,
            params: store,
        };
        let w = Array2::zeros((1, 4));
        assert_eq!(ae.score_window(w.view()).unwrap(), 0.0);
    }

    #[test]
    fn the_autoencoder_learns_the_manifold_and_flags_points_off_it() {
        let ws = line_windows(120, 13);
        let (ae, history) = DenseAe::fit(&ws, &identity_standardizer(4), &tiny_ae_config(1)).unwrap();
        let fit = history.chosen_fit();
        let min = fit
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(fit.best_val_loss, min);

        let on = ndarray::array![[1.0, -0.5, 0.25, 0.75]];
        let off = ndarray::array![[2.0, 2.0, -2.0, -2.0]];
        let s_on = ae.score_window(on.view()).unwrap();
        let s_off = ae.score_window(off.view()).unwrap();
        assert!(s_off > 5.0 * s_on, "on {s_on} off {s_off}");
    }

    #[test]
    fn refitting_with_the_same_seed_scores_identically() {
        let ws = line_windows(60, 14);
        let cfg = tiny_ae_config(2);
        let (a, _) = DenseAe::fit(&ws, &identity_standardizer(4), &cfg).unwrap();
        let (b, _) = DenseAe::fit(&ws, &identity_standardizer(4), &cfg).unwrap();
        let w = ndarray::array![[0.4, 0.1, -0.3, 0.9]];
        assert_eq!(
            a.score_window(w.view()).unwrap().to_bits(),
            b.score_window(w.view()).unwrap().to_bits()
        );
    }

    fn untrained_vae(samples: usize, noise_seed: u64) -> DenseVae {
        let (enc, dec, store) = ae_nets(4, &[8], 2, true, 17).unwrap();
        DenseVae {
            window_len: 1,
            n_features: 4,
            standardizer: identity_standardizer(4),
            hidden: vec![8],
            latent: 2,
            enc,
            dec,
            params: store,
            noise: frozen_noise(samples, 2, noise_seed),
        }
    }

    #[test]
    fn one_sample_with_degenerate_noise_is_the_deterministic_likelihood() {
        let mut vae = untrained_vae(1, 0);
        vae.noise.fill(0.0);
        let w = ndarray::array![[0.3, -0.8, 0.2, 1.1]];
        let got = vae.score_window(w.view()).unwrap();

        let flat: Vec<f64> = w.iter().cloned().collect();
        let q = vae.enc.forward_single(&vae.params, &flat).unwrap().into_gaussian();
        let p = vae.dec.forward_single(&vae.params, &q.mean).unwrap().into_gaussian();
        let want = -gaussian_log_prob(&p, &flat);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn scores_from_independent_noise_draws_agree_within_monte_carlo_error() {
        let a = untrained_vae(256, 100);
        let b = untrained_vae(256, 200);
        let w = ndarray::array![[0.5, -0.2, 0.9, -1.3]];
        let flat: Vec<f64> = w.iter().cloned().collect();
        let sa = a.nll_samples(&flat).unwrap();
        let sb = b.nll_samples(&flat).unwrap();
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
            (m, (var / n).sqrt())
        };
        let (ma, se_a) = stats(&sa);
        let (mb, se_b) = stats(&sb);
        let tol = 4.0 * (se_a * se_a + se_b * se_b).sqrt();
        assert!((ma - mb).abs() <= tol, "{ma} vs {mb} (tol {tol})");
    }

    #[test]
    fn trained_baselines_plug_into_the_online_scorer() {
        let ws = line_windows(60, 15);
        let std = identity_standardizer(4);
        let cfg = DenseVaeConfig {
            hidden: vec![8],
            latent: 2,
            samples: 16,
            train: BaselineTrainConfig {
                lr_grid: vec![3e-3],
                epochs: 5,
                patience: 5,
                batch_size: 16,
                seed: 3,
                ..BaselineTrainConfig::default()
            },
        };
        let (vae, _) = DenseVae::fit(&ws, &std, &cfg).unwrap();
        let pca = PcaModel::fit(&ws, &std, ComponentCount::Count(2)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let values = Array2::from_shape_fn((20, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let seq = crate::dataset::Sequence::new(
            "s",
            0,
            (0..20).collect(),
            values,
            None,
            Role::Test,
        )
        .unwrap();
        for scorer in [&vae as &dyn WindowScorer, &pca] {
            let os = OnlineScorer::with_smoothing(scorer, 0.9, Smoothing::Renormalized).unwrap();
            let s = os.score_sequence(&seq).unwrap();
            assert_eq!(s.smoothed.len(), 20);
            assert!(s.smoothed.iter().all(|v| v.is_finite()));
            assert_eq!(s.raw.len(), 20);
        }
    }

    #[test]
    fn vae_refit_with_identical_seed_is_deterministic() {
        let ws = line_windows(60, 18);
        let std = identity_standardizer(4);
        let cfg = DenseVaeConfig {
            hidden: vec![8],
            latent: 2,
            samples: 8,
            train: BaselineTrainConfig {
                lr_grid: vec![1e-3],
                epochs: 4,
                patience: 4,
                batch_size: 16,
                seed: 5,
                ..BaselineTrainConfig::default()
            },
        };
        let (a, ha) = DenseVae::fit(&ws, &std, &cfg).unwrap();
        let (b, hb) = DenseVae::fit(&ws, &std, &cfg).unwrap();
        assert_eq!(ha, hb);
        let w = ndarray::array![[0.4, 0.1, -0.3, 0.9]];
        assert_eq!(
            a.score_window(w.view()).unwrap().to_bits(),
            b.score_window(w.view()).unwrap().to_bits()
        );
    }
}
