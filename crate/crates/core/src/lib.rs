//! Unsupervised anomaly detection in multivariate time series under domain
//! shift.
//!
//! The library trains deep generative detectors on windows drawn from several
//! source domains and scores test windows from domains never seen in
//! training. Its centerpiece is a variational autoencoder with two encoders:
//! one captures domain-invariant factors (`z_y`), the other domain-specific
//! factors (`z_d`), and only the invariant code is used for anomaly scoring.
//! Classical baselines (PCA, Mahalanobis, dense autoencoders and VAEs), a
//! threshold-free evaluation protocol, and a synthetic multi-domain benchmark
//! generator round out the toolkit.
//!
//! Modules follow the pipeline order:
//!
//! * [`dataset`]: sequences, sliding windows, domain balancing,
//!   standardization, train/validation splits, file formats.
//! * [`networks`]: hand-rolled differentiable building blocks (dense and
//!   convolutional/recurrent stacks with Gaussian heads) plus a finite
//!   difference gradient checker.
//! * [`model`]: the two-encoder VAE, its objective, training loop, and
//!   aggregated-posterior density fits.
//! * [`scoring`]: window scores from latent densities and online smoothing of
//!   record scores.
//! * [`baselines`]: PCA, Mahalanobis, dense autoencoder, dense VAE.
//! * [`evaluation`]: point-based precision/recall with post-anomaly masking,
//!   peak F1, score-distribution exports.
//! * [`synthgen`]: seeded multi-domain benchmark generator with injected
//!   anomalies and validity checks.
//! * [`experiment`]: grid sweeps, leave-one-domain-out runs, and run-directory
//!   persistence shared by the CLI.
//!
//! Heavy loops (batch gradients, window scoring, sweeps) run on a rayon pool
//! when the default `parallel` feature is enabled and fall back to sequential
//! iteration when it is not; results are bit-identical either way.

pub mod baselines;
pub mod dataset;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod networks;
pub mod par;
pub mod scoring;
pub mod synthgen;
