//! Density estimates over the invariant latent: the full-covariance
//! Gaussian and Gaussian-mixture fits of the aggregated posterior, and the
//! log density of the learned (diagonal) mixture prior.

use super::{DivadModel, GmPriorValues, ModelError, PriorKind};
use crate::dataset::WindowSet;
use crate::networks::LN_2PI;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log density of a diagonal Gaussian mixture at `z`, stabilized by
/// log-sum-exp over components.
pub fn gm_log_prob(prior: &GmPriorValues, z: &[f64]) -> f64 {
    let k = prior.log_weights.len();
    assert_eq!(prior.means.ncols(), z.len(), "latent dimension mismatch");
    let mut terms = Vec::with_capacity(k);
    for j in 0..k {
        let mut s = prior.log_weights[j];
        for (i, &zi) in z.iter().enumerate() {
            let sd = prior.stds[[j, i]];
            let t = (zi - prior.means[[j, i]]) / sd;
            s += -0.5 * LN_2PI - sd.ln() - 0.5 * t * t;
        }
        terms.push(s);
    }
    logsumexp(&terms)
}

/// Cholesky factor of `cov`, ridge-regularizing with `1e-6 I` (repeatedly,
/// with a warning) when the matrix is not positive definite.
fn chol_with_ridge(cov: &Array2<f64>, context: &str) -> Result<(Array2<f64>, f64, bool), ModelError> {
    let d = cov.nrows();
    let to_na = |a: &Array2<f64>| nalgebra::DMatrix::from_fn(d, d, |r, c| a[[r, c]]);
    let mut work = cov.clone();
    let mut ridged = false;
    for attempt in 0..8 {
        if let Some(ch) = nalgebra::Cholesky::new(to_na(&work)) {
            let l = ch.l();
            let lower = Array2::from_shape_fn((d, d), |(r, c)| l[(r, c)]);
            let log_det = 2.0 * (0..d).map(|i| lower[[i, i]].ln()).sum::<f64>();
            return Ok((lower, log_det, ridged));
        }
        log::warn!("{context}: covariance not positive definite (attempt {attempt}); adding 1e-6 ridge");
        for i in 0..d {
            work[[i, i]] += 1e-6;
        }
        ridged = true;
    }
    Err(ModelError::Numerical(format!(
        "{context}: covariance stayed singular after ridge regularization"
    )))
}

fn solve_lower(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for j in 0..i {
            s -= l[[i, j]] * y[j];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Maximum-likelihood full-covariance Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullCovGaussian {
    pub mean: Vec<f64>,
    pub cov: Array2<f64>,
    chol_lower: Array2<f64>,
    log_det: f64,
    pub ridged: bool,
}

impl FullCovGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, z: &[f64]) -> f64 {
        assert_eq!(z.len(), self.mean.len(), "dimension mismatch");
        let centered: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let y = solve_lower(&self.chol_lower, &centered);
        let quad: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * (self.mean.len() as f64 * LN_2PI + self.log_det + quad)
    }
}

pub(crate) fn population_mean_cov(data: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = data.nrows() as f64;
    let mean = data.mean_axis(Axis(0)).expect("nonempty data");
    let centered = data - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / n;
    (mean, cov)
}

/// Fits mean and population covariance to the rows of `data`.
pub fn fit_full_gaussian(data: &Array2<f64>) -> Result<FullCovGaussian, ModelError> {
    if data.nrows() == 0 || data.ncols() == 0 {
        return Err(ModelError::Empty);
    }
    let (mean, cov) = population_mean_cov(data);
    let (chol_lower, log_det, ridged) = chol_with_ridge(&cov, "aggregated-posterior Gaussian")?;
    Ok(FullCovGaussian {
        mean: mean.to_vec(),
        cov,
        chol_lower,
        log_det,
        ridged,
    })
}

/// Full-covariance Gaussian mixture fitted by expectation-maximization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullCovGmm {
    pub weights: Vec<f64>,
    pub means: Array2<f64>,
    pub covs: Vec<Array2<f64>>,
    chol_lowers: Vec<Array2<f64>>,
    log_dets: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub mean_log_likelihood: f64,
}

impl FullCovGmm {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn component_log_prob(&self, j: usize, z: &[f64]) -> f64 {
        let centered: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(i, v)| v - self.means[[j, i]])
            .collect();
        let y = solve_lower(&self.chol_lowers[j], &centered);
        let quad: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * (z.len() as f64 * LN_2PI + self.log_dets[j] + quad)
    }

    pub fn log_prob(&self, z: &[f64]) -> f64 {
        assert_eq!(z.len(), self.means.ncols(), "dimension mismatch");
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|j| self.weights[j].ln() + self.component_log_prob(j, z))
            .collect();
        logsumexp(&terms)
    }
}

/// Deterministic initial means: evenly spaced quantile rows of the
/// lexicographically sorted distinct data rows, so duplicating the data
/// set leaves the initialization unchanged.
fn initial_means(data: &Array2<f64>, k: usize) -> Array2<f64> {
    let mut rows: Vec<Vec<f64>> = data.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).expect("finite encodings"));
    rows.dedup();
    let n = rows.len();
    Array2::from_shape_fn((k, data.ncols()), |(j, c)| {
        let pos = ((j as f64 + 0.5) / k as f64 * n as f64).floor() as usize;
        rows[pos.min(n - 1)][c]
    })
}

const EM_MAX_ITER: usize = 200;

/// EM for a `k`-component full-covariance mixture over the rows of `data`.
/// Non-convergence after 200 iterations returns the best iterate with a
/// warning; singular covariances are ridge-regularized.
pub fn fit_full_gmm(data: &Array2<f64>, k: usize) -> Result<FullCovGmm, ModelError> {
    let (n, d) = data.dim();
    if n == 0 || d == 0 {
        return Err(ModelError::Empty);
    }
    if k == 0 {
        return Err(ModelError::BadConfig("need at least one component".into()));
    }
    if n < k {
        return Err(ModelError::BadConfig(format!(
            "cannot fit {k} components to {n} points"
        )));
    }
    let (_, global_cov) = population_mean_cov(data);

    let mut weights = vec![1.0 / k as f64; k];
    let mut means = initial_means(data, k);
    let mut covs = vec![global_cov.clone(); k];
    let mut factors: Vec<(Array2<f64>, f64)> = Vec::with_capacity(k);
    for c in &covs {
        let (l, ld, _) = chol_with_ridge(c, "mixture initialization")?;
        factors.push((l, ld));
    }

    let mut best: Option<(f64, Vec<f64>, Array2<f64>, Vec<Array2<f64>>)> = None;
    let mut prev_ll = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    let comp_logpdf = |means: &Array2<f64>, factors: &[(Array2<f64>, f64)], j: usize, row: ndarray::ArrayView1<f64>| {
        let centered: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(i, v)| v - means[[j, i]])
            .collect();
        let y = solve_lower(&factors[j].0, &centered);
        let quad: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * (d as f64 * LN_2PI + factors[j].1 + quad)
    };

    for iter in 1..=EM_MAX_ITER {
        iterations = iter;
        // E step in log space.
        let mut resp = Array2::zeros((n, k));
        let mut ll_sum = 0.0;
        for (i, row) in data.rows().into_iter().enumerate() {
            let logs: Vec<f64> = (0..k)
                .map(|j| weights[j].ln() + comp_logpdf(&means, &factors, j, row))
                .collect();
            let lse = logsumexp(&logs);
            ll_sum += lse;
            for j in 0..k {
                resp[[i, j]] = (logs[j] - lse).exp();
            }
        }
        let ll = ll_sum / n as f64;
        if best.as_ref().map_or(true, |(b, ..)| ll > *b) {
            best = Some((ll, weights.clone(), means.clone(), covs.clone()));
        }
        if (ll - prev_ll).abs() < 1e-10 * (1.0 + ll.abs()) {
            converged = true;
            break;
        }
        prev_ll = ll;

        // M step.
        for j in 0..k {
            let nk: f64 = resp.column(j).sum();
            if nk < 1e-12 {
                log::warn!("mixture component {j} collapsed to zero weight; reseeding from the data mean");
                let (gm, gc) = population_mean_cov(data);
                for c in 0..d {
                    means[[j, c]] = gm[c];
                }
                covs[j] = gc;
                weights[j] = 1.0 / n as f64;
                continue;
            }
            weights[j] = nk / n as f64;
            for c in 0..d {
                let mut s = 0.0;
                for i in 0..n {
                    s += resp[[i, j]] * data[[i, c]];
                }
                means[[j, c]] = s / nk;
            }
            let mut cov = Array2::zeros((d, d));
            for i in 0..n {
                let r = resp[[i, j]];
                if r == 0.0 {
                    continue;
                }
                for a in 0..d {
                    let da = data[[i, a]] - means[[j, a]];
                    for b in a..d {
                        let v = r * da * (data[[i, b]] - means[[j, b]]);
                        cov[[a, b]] += v;
                    }
                }
            }
            for a in 0..d {
                for b in 0..a {
                    cov[[a, b]] = cov[[b, a]];
                }
            }
            covs[j] = cov / nk;
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
        for j in 0..k {
            let (l, ld, ridged) = chol_with_ridge(&covs[j], "mixture M step")?;
            if ridged {
                // Keep the regularized matrix so the stored covariance and
                // its factor agree.
                covs[j] = l.dot(&l.t());
            }
            factors[j] = (l, ld);
        }
    }

    if !converged {
        log::warn!("mixture EM did not converge after {EM_MAX_ITER} iterations; keeping the best iterate");
        if let Some((ll, w, m, c)) = &best {
            weights = w.clone();
            means = m.clone();
            covs = c.clone();
            prev_ll = *ll;
            factors.clear();
            for cov in &covs {
                let (l, ld, _) = chol_with_ridge(cov, "mixture best iterate")?;
                factors.push((l, ld));
            }
        }
    }

    let mean_ll = if converged {
        best.as_ref().map(|(ll, ..)| *ll).unwrap_or(prev_ll)
    } else {
        prev_ll
    };
    let (chol_lowers, log_dets): (Vec<_>, Vec<_>) = factors.into_iter().unzip();
    Ok(FullCovGmm {
        weights,
        means,
        covs,
        chol_lowers,
        log_dets,
        converged,
        iterations,
        mean_log_likelihood: mean_ll,
    })
}

/// Density estimate of the aggregated posterior `q(z_y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggPosterior {
    Gaussian(FullCovGaussian),
    Mixture(FullCovGmm),
}

impl AggPosterior {
    pub fn log_prob(&self, z: &[f64]) -> f64 {
        match self {
            AggPosterior::Gaussian(g) => g.log_prob(z),
            AggPosterior::Mixture(m) => m.log_prob(z),
        }
    }
}

/// Fits the aggregated posterior over the invariant encodings of
/// `windows` (already standardized): a full-covariance Gaussian for a
/// fixed-Gaussian prior, a mixture with the prior's component count for a
/// learned-mixture prior.
pub fn fit_aggregated_posterior(
    model: &DivadModel,
    windows: &WindowSet,
) -> Result<AggPosterior, ModelError> {
    let encodings = model.encode_y_batch(windows)?;
    match model.spec().prior {
        PriorKind::FixedGaussian => Ok(AggPosterior::Gaussian(fit_full_gaussian(&encodings)?)),
        PriorKind::LearnedGm { components } => {
            Ok(AggPosterior::Mixture(fit_full_gmm(&encodings, components)?))
        }
    }
}
