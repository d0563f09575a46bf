//! Window scores from latent densities and the per-record online scorer.
//!
//! A [`WindowScorer`] turns one window into one scalar (higher = more
//! anomalous). An [`OnlineScorer`] slides it along a sequence and smooths the
//! raw scores with a bias-corrected exponentially weighted moving average,
//! emitting one score per record; records that close no complete window get
//! `-inf`.

use crate::dataset::Sequence;
use crate::model::{AggPosterior, DivadModel, ModelError};
use crate::par;
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Default grid of smoothing factors swept during evaluation.
pub const GAMMA_GRID: [f64; 12] = [
    0.0, 0.8, 0.9, 0.95, 0.96667, 0.975, 0.98, 0.98333, 0.9875, 0.99167, 0.99375, 0.995,
];

const SCORE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("smoothing factor {0} is outside [0, 1)")]
    BadGamma(f64),
    #[error("no raw scores to smooth")]
    EmptyScores,
    #[error("window length must be at least 1")]
    BadWindow,
    #[error("{method} scoring requires a fitted density estimate")]
    NotFitted { method: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

fn parse_err(path: &Path, msg: impl Into<String>) -> ScoringError {
    ScoringError::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// A fitted window-scoring strategy: a pure, deterministic function from a
/// window to a scalar where higher means more anomalous.
///
/// Implementations receive raw (unstandardized) windows and apply whatever
/// frozen preprocessing they learned during fitting.
pub trait WindowScorer: Sync {
    /// Short tag naming the strategy, used in file names and reports.
    fn method(&self) -> &'static str;

    /// Number of records per window.
    fn window_len(&self) -> usize;

    fn score_window(&self, window: ArrayView2<'_, f64>) -> Result<f64, ScoringError>;
}

/// Scores every window of a set, in order.
pub fn score_windows<S>(scorer: &S, windows: &[Array2<f64>]) -> Result<Vec<f64>, ScoringError>
where
    S: WindowScorer + ?Sized,
{
    let chunks = par::map_chunks(windows, SCORE_CHUNK, |chunk| {
        chunk
            .iter()
            .map(|w| scorer.score_window(w.view()))
            .collect::<Result<Vec<_>, _>>()
    });
    let mut out = Vec::with_capacity(windows.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Negative log density of the invariant encoding under the model's latent
/// prior (standard normal, or the learned mixture). `x` must already be
/// standardized.
pub fn score_prior(model: &DivadModel, x: &Array2<f64>) -> Result<f64, ScoringError> {
    let z = model.encode_y(x)?;
    Ok(-model.prior_log_prob(&z)?)
}

/// Negative log density of the invariant encoding under a density estimate
/// fitted to the training encodings. `x` must already be standardized.
pub fn score_agg_posterior(
    model: &DivadModel,
    agg: &AggPosterior,
    x: &Array2<f64>,
) -> Result<f64, ScoringError> {
    let z = model.encode_y(x)?;
    Ok(-agg.log_prob(&z))
}

/// Which latent density the detector scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreStrategy {
    /// The model's own prior over the invariant latent.
    Prior,
    /// A density estimate fitted to the training encodings, which has no
    /// mass in regions the encoder never visits.
    AggPosterior,
}

/// Window scorer backed by a trained model, standardizing each window with
/// the model's frozen statistics before encoding it.
#[derive(Debug, Clone)]
pub struct DivadScorer<'m> {
    model: &'m DivadModel,
    strategy: ScoreStrategy,
    agg: Option<&'m AggPosterior>,
}

impl<'m> DivadScorer<'m> {
    pub fn prior(model: &'m DivadModel) -> Self {
        Self {
            model,
            strategy: ScoreStrategy::Prior,
            agg: None,
        }
    }

    pub fn agg_posterior(model: &'m DivadModel, agg: &'m AggPosterior) -> Self {
        Self {
            model,
            strategy: ScoreStrategy::AggPosterior,
            agg: Some(agg),
        }
    }

    /// Assembles a scorer from parts that may lack the density estimate;
    /// scoring then fails with a state error rather than at construction.
    pub fn with_strategy(
        model: &'m DivadModel,
        strategy: ScoreStrategy,
        agg: Option<&'m AggPosterior>,
    ) -> Self {
        Self {
            model,
            strategy,
            agg,
        }
    }

    pub fn strategy(&self) -> ScoreStrategy {
        self.strategy
    }
}

impl WindowScorer for DivadScorer<'_> {
    fn method(&self) -> &'static str {
        match self.strategy {
            ScoreStrategy::Prior => "divad-prior",
            ScoreStrategy::AggPosterior => "divad-agg-posterior",
        }
    }

    fn window_len(&self) -> usize {
        self.model.spec().window_len
    }

    fn score_window(&self, window: ArrayView2<'_, f64>) -> Result<f64, ScoringError> {
        let mut x = window.to_owned();
        self.model.standardizer().transform_inplace(&mut x);
        match self.strategy {
            ScoreStrategy::Prior => score_prior(self.model, &x),
            ScoreStrategy::AggPosterior => {
                let agg = self.agg.ok_or(ScoringError::NotFitted {
                    method: "divad-agg-posterior",
                })?;
                score_agg_posterior(self.model, agg, &x)
            }
        }
    }
}

/// How the exponentially weighted mean is bias-corrected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Divides the previous, already-corrected mean again at every step:
    /// `m_t = (gamma * m_{t-1} + (1 - gamma) * y_t) / (1 - gamma^(t+1))`
    /// with `t` the 1-based record index and `m_L = (1 - gamma) * y_L`.
    #[default]
    Renormalized,
    /// Classic bias correction: an uncorrected accumulator
    /// `u_i = gamma * u_{i-1} + (1 - gamma) * y_i` (with `u_0 = 0`) divided
    /// once by `1 - gamma^i`, where `i` counts scores seen so far.
    Classic,
}

/// Smooths the raw window scores `y_L..y_T` into one score per record,
/// `g_1..g_T`; the first `window_len - 1` outputs are `-inf`.
pub fn smooth(
    raw: &[f64],
    window_len: usize,
    gamma: f64,
    kind: Smoothing,
) -> Result<Vec<f64>, ScoringError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(ScoringError::BadGamma(gamma));
    }
    if window_len == 0 {
        return Err(ScoringError::BadWindow);
    }
    if raw.is_empty() {
        return Err(ScoringError::EmptyScores);
    }
    let mut out = vec![f64::NEG_INFINITY; window_len - 1];
    out.reserve(raw.len());
    match kind {
        Smoothing::Renormalized => {
            let mut m = (1.0 - gamma) * raw[0];
            out.push(m);
            for (k, &y) in raw.iter().enumerate().skip(1) {
                // Absolute 1-based record index of this score.
                let t = window_len + k;
                m = (gamma * m + (1.0 - gamma) * y) / (1.0 - gamma.powi(t as i32 + 1));
                out.push(m);
            }
        }
        Smoothing::Classic => {
            let mut u = 0.0;
            for (k, &y) in raw.iter().enumerate() {
                u = gamma * u + (1.0 - gamma) * y;
                out.push(u / (1.0 - gamma.powi(k as i32 + 1)));
            }
        }
    }
    Ok(out)
}

/// A window scorer plus a smoothing factor: assigns one score to every
/// record of a sequence, using only records at or before it.
pub struct OnlineScorer<'s> {
    scorer: &'s dyn WindowScorer,
    gamma: f64,
    smoothing: Smoothing,
}

impl<'s> OnlineScorer<'s> {
    pub fn new(scorer: &'s dyn WindowScorer, gamma: f64) -> Result<Self, ScoringError> {
        Self::with_smoothing(scorer, gamma, Smoothing::default())
    }

    pub fn with_smoothing(
        scorer: &'s dyn WindowScorer,
        gamma: f64,
        smoothing: Smoothing,
    ) -> Result<Self, ScoringError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(ScoringError::BadGamma(gamma));
        }
        Ok(Self {
            scorer,
            gamma,
            smoothing,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Scores every complete window of `seq` and smooths the results. A
    /// sequence shorter than one window yields empty output with a warning.
    pub fn score_sequence(&self, seq: &Sequence) -> Result<ScoredSequence, ScoringError> {
        let l = self.scorer.window_len();
        let t = seq.len();
        if t < l {
            log::warn!(
                "sequence {} has {t} records, shorter than one {l}-record window; no scores",
                seq.id
            );
            return Ok(ScoredSequence {
                window_len: l,
                raw: Vec::new(),
                smoothed: Vec::new(),
            });
        }
        let starts: Vec<usize> = (0..=t - l).collect();
        let chunks = par::map_chunks(&starts, SCORE_CHUNK, |chunk| {
            chunk
                .iter()
                .map(|&s0| self.scorer.score_window(seq.values.slice(s![s0..s0 + l, ..])))
                .collect::<Result<Vec<_>, _>>()
        });
        let mut raw = Vec::with_capacity(starts.len());
        for c in chunks {
            raw.extend(c?);
        }
        let smoothed = smooth(&raw, l, self.gamma, self.smoothing)?;
        Ok(ScoredSequence {
            window_len: l,
            raw,
            smoothed,
        })
    }
}

/// Per-record scores for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub window_len: usize,
    /// One raw score per complete window: records `window_len..T`, 1-based.
    pub raw: Vec<f64>,
    /// One smoothed score per record; the first `window_len - 1` are `-inf`.
    pub smoothed: Vec<f64>,
}

impl ScoredSequence {
    pub fn len(&self) -> usize {
        self.smoothed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smoothed.is_empty()
    }
}

/// Writes `timestamp,raw_score,smoothed_score` rows; the raw cell is empty
/// for records that close no complete window, and `-inf` appears literally.
pub fn write_scores_csv(
    path: &Path,
    timestamps: &[i64],
    scores: &ScoredSequence,
) -> Result<(), ScoringError> {
    assert_eq!(timestamps.len(), scores.smoothed.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    w.write_record(["timestamp", "raw_score", "smoothed_score"])
        .map_err(|e| parse_err(path, e.to_string()))?;
    let head = scores.window_len - 1;
    for (i, (&ts, &g)) in timestamps.iter().zip(&scores.smoothed).enumerate() {
        let raw = if i < head {
            String::new()
        } else {
            scores.raw[i - head].to_string()
        };
        w.write_record([ts.to_string(), raw, g.to_string()])
            .map_err(|e| parse_err(path, e.to_string()))?;
    }
    w.flush().map_err(|e| parse_err(path, e.to_string()))?;
    Ok(())
}

/// Reads a file written by [`write_scores_csv`], recovering the window
/// length from the run of leading empty raw cells.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<i64>, ScoredSequence), ScoringError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let header = r.headers().map_err(|e| parse_err(path, e.to_string()))?;
    if header.len() != 3 || header.get(0) != Some("timestamp") {
        return Err(parse_err(path, "expected timestamp,raw_score,smoothed_score"));
    }
    let mut timestamps = Vec::new();
    let mut raw = Vec::new();
    let mut smoothed = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        if rec.len() != 3 {
            return Err(parse_err(path, format!("row {i}: {} fields", rec.len())));
        }
        let ts: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(path, format!("row {i}: bad timestamp `{}`", &rec[0])))?;
        timestamps.push(ts);
        if rec[1].is_empty() {
            if !raw.is_empty() {
                return Err(parse_err(path, format!("row {i}: empty raw cell after scores began")));
            }
        } else {
            let v: f64 = rec[1]
                .parse()
                .map_err(|_| parse_err(path, format!("row {i}: bad raw score `{}`", &rec[1])))?;
            raw.push(v);
        }
        let g: f64 = rec[2]
            .parse()
            .map_err(|_| parse_err(path, format!("row {i}: bad smoothed score `{}`", &rec[2])))?;
        smoothed.push(g);
    }
    if smoothed.is_empty() {
        return Err(parse_err(path, "no records"));
    }
    let window_len = smoothed.len() - raw.len() + 1;
    Ok((
        timestamps,
        ScoredSequence {
            window_len,
            raw,
            smoothed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Role, Standardizer};
    use crate::model::{ArchKind, DivadSpec, PriorKind};
    use crate::networks::{gaussian_log_prob, GaussianParams};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Independent recomputation of the printed recursion: every output is
    /// rebuilt from the first raw score with explicit absolute indices.
    fn renormalized_oracle(raw: &[f64], l: usize, gamma: f64) -> Vec<f64> {
        let t_max = l - 1 + raw.len();
        let mut out = vec![f64::NEG_INFINITY; l - 1];
        for t in l..=t_max {
            let mut m = (1.0 - gamma) * raw[0];
            for s in (l + 1)..=t {
                m = (gamma * m + (1.0 - gamma) * raw[s - l]) / (1.0 - gamma.powi(s as i32 + 1));
            }
            out.push(m);
        }
        out
    }

    /// Direct weighted-sum form of the classic bias-corrected average.
    fn classic_oracle(raw: &[f64], l: usize, gamma: f64) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; l - 1];
        for k in 0..raw.len() {
            let num: f64 = (0..=k)
                .map(|j| gamma.powi((k - j) as i32) * (1.0 - gamma) * raw[j])
                .sum();
            out.push(num / (1.0 - gamma.powi(k as i32 + 1)));
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            if x.is_infinite() || y.is_infinite() {
                assert_eq!(x, y);
            } else {
                assert!((x - y).abs() <= tol * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn smoothing_matches_step_by_step_recomputation_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..100 {
            let n = rng.random_range(1..=40);
            let l = rng.random_range(1..=6);
            let gamma = if case % 3 == 0 {
                GAMMA_GRID[case % GAMMA_GRID.len()]
            } else {
                rng.random_range(0.0..1.0)
            };
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let got = smooth(&raw, l, gamma, Smoothing::Renormalized).unwrap();
            close(&got, &renormalized_oracle(&raw, l, gamma), 1e-12);
            let got = smooth(&raw, l, gamma, Smoothing::Classic).unwrap();
            close(&got, &classic_oracle(&raw, l, gamma), 1e-12);
        }
    }

    #[test]
    fn zero_gamma_is_the_identity_on_raw_scores() {
        let raw = vec![3.0, -1.0, 4.0, 1.0, -5.0];
        for kind in [Smoothing::Renormalized, Smoothing::Classic] {
            let out = smooth(&raw, 3, 0.0, kind).unwrap();
            assert_eq!(out[0], f64::NEG_INFINITY);
            assert_eq!(out[1], f64::NEG_INFINITY);
            assert_eq!(&out[2..], &raw[..]);
        }
    }

    #[test]
    fn records_before_the_first_window_get_negative_infinity() {
        let out = smooth(&[1.0, 2.0], 4, 0.9, Smoothing::Renormalized).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out[..3].iter().all(|v| *v == f64::NEG_INFINITY));
        assert!(out[3..].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_gamma_is_rejected() {
        for g in [1.0, 1.5, -0.2, f64::NAN] {
            assert!(matches!(
                smooth(&[1.0], 2, g, Smoothing::Renormalized),
                Err(ScoringError::BadGamma(_))
            ));
        }
        assert!(matches!(
            smooth(&[], 2, 0.5, Smoothing::Renormalized),
            Err(ScoringError::EmptyScores)
        ));
    }

    #[test]
    fn gamma_grid_is_sorted_and_in_range() {
        assert_eq!(GAMMA_GRID.len(), 12);
        assert_eq!(GAMMA_GRID[0], 0.0);
        for w in GAMMA_GRID.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(GAMMA_GRID.iter().all(|g| (0.0..1.0).contains(g)));
    }

    struct SumScorer {
        l: usize,
    }

    impl WindowScorer for SumScorer {
        fn method(&self) -> &'static str {
            "sum"
        }
        fn window_len(&self) -> usize {
            self.l
        }
        fn score_window(&self, window: ArrayView2<'_, f64>) -> Result<f64, ScoringError> {
            Ok(window.sum())
        }
    }

    /// Strictly increasing transform of the sum.
    struct CubedSumScorer {
        l: usize,
    }

    impl WindowScorer for CubedSumScorer {
        fn method(&self) -> &'static str {
            "cubed-sum"
        }
        fn window_len(&self) -> usize {
            self.l
        }
        fn score_window(&self, window: ArrayView2<'_, f64>) -> Result<f64, ScoringError> {
            let s = window.sum();
            Ok(s * s * s + 2.0 * s)
        }
    }

    fn random_sequence(t: usize, m: usize, seed: u64) -> Sequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array2::from_shape_fn((t, m), |_| rng.sample::<f64, _>(StandardNormal));
        Sequence::new(
            format!("seq{seed}"),
            0,
            (0..t as i64).collect(),
            values,
            None,
            Role::Test,
        )
        .unwrap()
    }

    fn prefix(seq: &Sequence, t: usize) -> Sequence {
        Sequence::new(
            seq.id.clone(),
            seq.domain_id,
            seq.timestamps[..t].to_vec(),
            seq.values.slice(s![..t, ..]).to_owned(),
            None,
            seq.role,
        )
        .unwrap()
    }

    #[test]
    fn every_record_score_depends_only_on_the_prefix_up_to_it() {
        let seq = random_sequence(30, 2, 9);
        let scorer = SumScorer { l: 4 };
        let os = OnlineScorer::new(&scorer, 0.9).unwrap();
        let full = os.score_sequence(&seq).unwrap();
        for t in 4..=30 {
            let part = os.score_sequence(&prefix(&seq, t)).unwrap();
            assert_eq!(&full.smoothed[..t], &part.smoothed[..]);
            assert_eq!(&full.raw[..t - 3], &part.raw[..]);
        }
    }

    #[test]
    fn unit_window_and_zero_gamma_score_each_record_alone() {
        let seq = random_sequence(12, 3, 10);
        let scorer = SumScorer { l: 1 };
        let os = OnlineScorer::new(&scorer, 0.0).unwrap();
        let s = os.score_sequence(&seq).unwrap();
        for (t, row) in seq.values.rows().into_iter().enumerate() {
            assert_eq!(s.smoothed[t], row.sum());
            assert_eq!(s.raw[t], row.sum());
        }
    }

    #[test]
    fn a_constant_zero_scorer_yields_all_zero_finite_scores() {
        struct Zero;
        impl WindowScorer for Zero {
            fn method(&self) -> &'static str {
                "zero"
            }
            fn window_len(&self) -> usize {
                3
            }
            fn score_window(&self, _w: ArrayView2<'_, f64>) -> Result<f64, ScoringError> {
                Ok(0.0)
            }
        }
        let seq = random_sequence(10, 2, 11);
        let os = OnlineScorer::new(&Zero, 0.995).unwrap();
        let s = os.score_sequence(&seq).unwrap();
        assert!(s.smoothed[..2].iter().all(|v| *v == f64::NEG_INFINITY));
        assert!(s.smoothed[2..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sequences_shorter_than_one_window_score_to_nothing() {
        let seq = random_sequence(3, 2, 12);
        let scorer = SumScorer { l: 5 };
        let os = OnlineScorer::new(&scorer, 0.5).unwrap();
        let s = os.score_sequence(&seq).unwrap();
        assert!(s.raw.is_empty());
        assert!(s.smoothed.is_empty());
    }

    #[test]
    fn a_monotone_transform_of_raw_scores_preserves_the_record_ranking() {
        fn ranking(scores: &[f64]) -> Vec<usize> {
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
            idx
        }
        let seq = random_sequence(25, 2, 13);
        let plain = OnlineScorer::new(&SumScorer { l: 3 }, 0.0)
            .unwrap()
            .score_sequence(&seq)
            .unwrap();
        let warped = OnlineScorer::new(&CubedSumScorer { l: 3 }, 0.0)
            .unwrap()
            .score_sequence(&seq)
            .unwrap();
        assert_eq!(ranking(&plain.smoothed[2..]), ranking(&warped.smoothed[2..]));
    }

    fn identity_standardizer(m: usize) -> Standardizer {
        Standardizer {
            mean: vec![0.0; m],
            std: vec![1.0; m],
            floor: 1e-8,
        }
    }

    fn dense_model(prior: PriorKind, seed: u64) -> DivadModel {
        let spec = DivadSpec {
            window_len: 4,
            n_features: 2,
            encoding_dim: 2,
            arch: ArchKind::Dense { hidden: vec![3] },
            prior,
            domain_prior_hidden: 3,
        };
        DivadModel::init(spec, &[0, 1], identity_standardizer(2), seed).unwrap()
    }

    /// Zeroes the invariant mean head so the encoding equals its bias, which
    /// the test can then steer directly.
    fn rig_encoding(model: &mut DivadModel, enc: &[f64]) {
        let w = model.params().find("enc_y.mean.w").unwrap();
        model.params_mut().get_mut(w).fill(0.0);
        let b = model.params().find("enc_y.mean.b").unwrap();
        let bias = model.params_mut().get_mut(b);
        for (j, v) in enc.iter().enumerate() {
            bias[[0, j]] = *v;
        }
    }

    #[test]
    fn fixed_prior_score_of_a_zero_encoding_is_ln_two_pi() {
        let mut model = dense_model(PriorKind::FixedGaussian, 21);
        rig_encoding(&mut model, &[0.0, 0.0]);
        let x = Array2::from_elem((4, 2), 0.3);
        let s = score_prior(&model, &x).unwrap();
        assert!((s - (2.0 * std::f64::consts::PI).ln()).abs() <= 1e-12, "{s}");
    }

    #[test]
    fn fixed_prior_scores_grow_with_the_encoding_norm() {
        let mut model = dense_model(PriorKind::FixedGaussian, 22);
        let x = Array2::from_elem((4, 2), 0.3);
        // Different directions, increasing norms.
        let encs = [[0.3, 0.0], [-0.5, 0.7], [1.4, -0.9], [-2.0, 1.5]];
        let mut last = f64::NEG_INFINITY;
        for e in encs {
            rig_encoding(&mut model, &e);
            let s = score_prior(&model, &x).unwrap();
            assert!(s > last, "score {s} did not grow");
            last = s;
        }
    }

    #[test]
    fn a_standard_single_component_mixture_scores_like_the_fixed_prior() {
        let mut model = dense_model(PriorKind::LearnedGm { components: 1 }, 23);
        let means = model.params().find("prior_y.means").unwrap();
        model.params_mut().get_mut(means).fill(0.0);
        let raws = model.params().find("prior_y.raw_stds").unwrap();
        let unit = ((1.0 - crate::networks::STD_EPS).exp() - 1.0).ln();
        model.params_mut().get_mut(raws).fill(unit);
        let logits = model.params().find("prior_y.logits").unwrap();
        model.params_mut().get_mut(logits).fill(0.7);

        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..10 {
            let x = Array2::from_shape_fn((4, 2), |_| rng.sample::<f64, _>(StandardNormal));
            let s = score_prior(&model, &x).unwrap();
            let z = model.encode_y(&x).unwrap();
            let want = -gaussian_log_prob(&GaussianParams::standard(2), &z);
            assert!((s - want).abs() <= 1e-9, "{s} vs {want}");
        }
    }

    fn fitted_gaussian_posterior(seed: u64) -> AggPosterior {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Correlated encodings around (1, -1).
        let data = Array2::from_shape_fn((300, 2), |(r, c)| {
            let shared = ((r * 37 + 11) % 101) as f64 / 101.0 - 0.5;
            let noise: f64 = rng.sample(StandardNormal);
            if c == 0 {
                1.0 + shared + 0.3 * noise
            } else {
                -1.0 + 0.8 * shared + 0.2 * noise
            }
        });
        AggPosterior::Gaussian(crate::model::fit_full_gaussian(&data).unwrap())
    }

    #[test]
    fn gaussian_posterior_score_is_half_mahalanobis_plus_a_constant() {
        let agg = fitted_gaussian_posterior(31);
        let AggPosterior::Gaussian(g) = &agg else {
            unreachable!()
        };
        let cov = nalgebra::DMatrix::from_fn(2, 2, |r, c| g.cov[[r, c]]);
        let inv = cov.try_inverse().unwrap();
        let mut model = dense_model(PriorKind::FixedGaussian, 32);
        let x = Array2::from_elem((4, 2), 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut diffs = Vec::new();
        for _ in 0..12 {
            let z = [rng.random_range(-2.0..3.0), rng.random_range(-3.0..2.0)];
            rig_encoding(&mut model, &z);
            let s = score_agg_posterior(&model, &agg, &x).unwrap();
            let d = nalgebra::DVector::from_vec(vec![z[0] - g.mean[0], z[1] - g.mean[1]]);
            let maha = (d.transpose() * &inv * &d)[(0, 0)];
            diffs.push(s - 0.5 * maha);
        }
        let spread = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - diffs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread <= 1e-9, "spread {spread}");
    }

    #[test]
    fn the_fitted_mean_scores_lowest_along_every_ray() {
        let agg = fitted_gaussian_posterior(41);
        let AggPosterior::Gaussian(g) = &agg else {
            unreachable!()
        };
        let mu = [g.mean[0], g.mean[1]];
        let mut model = dense_model(PriorKind::FixedGaussian, 42);
        let x = Array2::from_elem((4, 2), 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        rig_encoding(&mut model, &mu);
        let at_mean = score_agg_posterior(&model, &agg, &x).unwrap();
        for _ in 0..8 {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = [theta.cos(), theta.sin()];
            let mut last = at_mean;
            for t in [0.5, 1.0, 2.0] {
                rig_encoding(&mut model, &[mu[0] + t * dir[0], mu[1] + t * dir[1]]);
                let s = score_agg_posterior(&model, &agg, &x).unwrap();
                assert!(s > last, "score not increasing along the ray");
                last = s;
            }
        }
    }

    #[test]
    fn identical_windows_get_bitwise_identical_scores() {
        let model = dense_model(PriorKind::FixedGaussian, 51);
        let agg = fitted_gaussian_posterior(52);
        let prior = DivadScorer::prior(&model);
        let post = DivadScorer::agg_posterior(&model, &agg);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let w = Array2::from_shape_fn((4, 2), |_| rng.sample::<f64, _>(StandardNormal));
        assert_eq!(
            prior.score_window(w.view()).unwrap().to_bits(),
            prior.score_window(w.view()).unwrap().to_bits()
        );
        assert_eq!(
            post.score_window(w.view()).unwrap().to_bits(),
            post.score_window(w.view()).unwrap().to_bits()
        );
        assert_eq!(prior.method(), "divad-prior");
        assert_eq!(post.method(), "divad-agg-posterior");
    }

    #[test]
    fn scoring_without_the_density_estimate_is_a_state_error() {
        let model = dense_model(PriorKind::FixedGaussian, 61);
        let scorer = DivadScorer::with_strategy(&model, ScoreStrategy::AggPosterior, None);
        let w = Array2::from_elem((4, 2), 0.2);
        assert!(matches!(
            scorer.score_window(w.view()),
            Err(ScoringError::NotFitted { .. })
        ));
    }

    #[test]
    fn score_files_round_trip_including_sentinels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let scored = ScoredSequence {
            window_len: 3,
            raw: vec![0.25, f64::NEG_INFINITY, 4.5],
            smoothed: vec![
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
                0.25,
                f64::NEG_INFINITY,
                4.125,
            ],
        };
        let timestamps = vec![10, 20, 30, 40, 50];
        write_scores_csv(&path, &timestamps, &scored).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("timestamp,raw_score,smoothed_score"));
        assert_eq!(lines.next(), Some("10,,-inf"));
        assert_eq!(lines.next(), Some("20,,-inf"));
        assert_eq!(lines.next(), Some("30,0.25,0.25"));

        let (ts, back) = read_scores_csv(&path).unwrap();
        assert_eq!(ts, timestamps);
        assert_eq!(back, scored);
    }

    #[test]
    fn truncating_a_sequence_leaves_earlier_scores_unchanged() {
        let seq = random_sequence(18, 2, 71);
        let scorer = SumScorer { l: 3 };
        let os = OnlineScorer::with_smoothing(&scorer, 0.98, Smoothing::Classic).unwrap();
        let full = os.score_sequence(&seq).unwrap();
        let cut = os.score_sequence(&prefix(&seq, 11)).unwrap();
        assert_eq!(&full.smoothed[..11], &cut.smoothed[..]);
    }
}
