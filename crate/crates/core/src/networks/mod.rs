//! Differentiable building blocks: dense and convolutional/recurrent stacks
//! with Gaussian heads, reparameterized sampling, log-density primitives,
//! and a finite-difference gradient checker.
//!
//! All stacks register their weights in a caller-owned [`ParamStore`] and
//! expose tape-based forward passes; the free functions here wrap one-off
//! tapes for plain (inference) evaluation so training and scoring share a
//! single forward implementation.

mod dense;
mod gradcheck;
mod recurrent;
pub mod tape;

pub use dense::{forward_gaussian, DenseStack, DenseStackSpec, HeadOut, OutputHead, SingleOut};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use recurrent::{RecurrentDecoder, RecurrentDecoderSpec, RecurrentEncoder, RecurrentEncoderSpec};
pub use tape::{Grads, ParamId, ParamStore, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shift added to every softplus std head so standard deviations stay
/// strictly positive.
pub const STD_EPS: f64 = 1e-4;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("shape mismatch at {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },
    #[error("bad architecture: {0}")]
    BadConfig(String),
    #[error("domain index {d} out of range for {n} classes")]
    DomainOutOfRange { d: usize, n: usize },
    #[error("non-finite loss ({0}) in gradient check")]
    NonFiniteLoss(f64),
}

/// A diagonal Gaussian over a latent or output vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }
}

/// `mean + std * noise`, the reparameterization-trick sample.
pub fn reparameterize(g: &GaussianParams, noise: &[f64]) -> Vec<f64> {
    assert_eq!(noise.len(), g.mean.len(), "noise length");
    g.mean
        .iter()
        .zip(&g.std)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// Sum over dimensions of the diagonal-Gaussian log density of `x`.
pub fn gaussian_log_prob(g: &GaussianParams, x: &[f64]) -> f64 {
    assert_eq!(x.len(), g.mean.len(), "dimension mismatch");
    x.iter()
        .zip(&g.mean)
        .zip(&g.std)
        .map(|((xv, m), s)| {
            let z = (xv - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * z * z
        })
        .sum()
}

/// `-log softmax(logits)[d]`, the domain-classification loss for one sample.
pub fn categorical_cross_entropy(logits: &[f64], d: usize) -> Result<f64, NetworkError> {
    if d >= logits.len() {
        return Err(NetworkError::DomainOutOfRange {
            d,
            n: logits.len(),
        });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[d])
}
