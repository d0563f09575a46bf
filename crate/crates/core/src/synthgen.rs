//! Seeded generator of multi-domain multivariate traces with domain shift
//! and injected anomalies.
//!
//! Each domain observes the same smooth latent process through its own
//! affine-plus-oscillation transform (domain-specific features), while a
//! fixed subset of features depends on the latent process only and is
//! therefore identically distributed across domains (invariant features).
//! Test domains draw their offsets from a band strictly above every training
//! domain's, so the training domains' parameter hull never covers them while
//! the displacement stays a modest fraction of the data's spread.
//!
//! Anomalies are injected only into test sequences, and all of them are
//! excursions of the shared latent state: during an anomalous span the
//! latent factors are blended toward a state normal operation never visits,
//! and the invariant features follow through the fixed mixing. A detector
//! that models the latent state therefore sees every anomaly, whatever the
//! root cause, while the domain transforms keep confusing detectors that
//! model raw features. Contextual and point anomalies additionally carry a
//! small component orthogonal to the mixing — outside the span of anything
//! normal data produces — so any record-level model can in principle find
//! them. Collective anomalies carry no such component: they stay exactly on
//! the mixing manifold, and only the joint density of the latent state
//! betrays them.

use crate::dataset::{ranges_to_labels, DatasetError, LabeledRange, Role, Sequence};
use crate::model::population_mean_cov;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// AR(1) coefficient of the shared latent process. Kept moderate: stickier
/// paths inflate the realized Kolmogorov-Smirnov distance between noisy
/// observations of the same path well beyond the iid critical value.
const LATENT_RHO: f64 = 0.85;
/// Invariant features carry only a fraction of the configured observation
/// noise; their signal is a function of the shared latent process, so the
/// cross-domain distribution match must survive the noise.
const INVARIANT_NOISE_FRAC: f64 = 0.3;
/// Minimum gap kept between injected anomaly ranges.
const PLACEMENT_GAP: usize = 16;
/// Earliest record an anomaly may start at.
const MIN_START: usize = 40;
/// Two-sample Kolmogorov-Smirnov critical coefficient at the 1% level,
/// `sqrt(-ln(alpha/2)/2)`.
const KS_COEFF_1PCT: f64 = 1.6276236115189503;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("infeasible anomaly placement: {0}")]
    Placement(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// A domain-specific feature moves to a level that is normal globally
    /// but outside its own domain's range, while the latent state drifts
    /// moderately off its normal orbit (staying inside every invariant
    /// feature's marginal range).
    Contextual,
    /// The latent state surges along one invariant feature's mixing
    /// direction until that feature leaves the global normal range outright.
    Point,
    /// The latent state holds an off-orbit plateau where oscillation and
    /// noise normally live, altering the temporal shape of the invariant
    /// features without leaving their marginal ranges.
    Collective,
}

impl AnomalyKind {
    /// Event-type code used in labels; `0` is reserved for normal.
    pub fn code(&self) -> u32 {
        match self {
            AnomalyKind::Contextual => 1,
            AnomalyKind::Point => 2,
            AnomalyKind::Collective => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Ranges injected per test sequence.
    pub count: usize,
    /// Inclusive range the duration is drawn from.
    pub duration: (usize, usize),
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train_domains: usize,
    pub n_test_domains: usize,
    /// Records per sequence.
    pub t_len: usize,
    pub n_features: usize,
    /// Leading features carrying the domain-invariant signal.
    pub n_invariant: usize,
    pub offset_range: (f64, f64),
    pub scale_range: (f64, f64),
    /// Oscillation frequency in cycles per record.
    pub freq_range: (f64, f64),
    pub osc_amp: f64,
    pub noise_level: f64,
    pub anomalies: Vec<AnomalySpec>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train_domains: 6,
            n_test_domains: 2,
            t_len: 2000,
            n_features: 12,
            n_invariant: 4,
            offset_range: (-5.0, 5.0),
            scale_range: (0.6, 1.4),
            freq_range: (0.002, 0.02),
            osc_amp: 0.8,
            noise_level: 0.1,
            anomalies: vec![
                AnomalySpec {
                    kind: AnomalyKind::Contextual,
                    count: 2,
                    duration: (12, 30),
                    magnitude: 1.0,
                },
                AnomalySpec {
                    kind: AnomalyKind::Point,
                    count: 2,
                    duration: (3, 10),
                    magnitude: 1.5,
                },
                AnomalySpec {
                    kind: AnomalyKind::Collective,
                    count: 4,
                    duration: (16, 40),
                    magnitude: 1.0,
                },
            ],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::BadConfig(msg));
        if self.n_train_domains == 0 || self.n_test_domains == 0 {
            return bad("at least one training and one test domain are required".into());
        }
        if self.n_invariant == 0 || self.n_invariant >= self.n_features {
            return bad(format!(
                "need 1 <= n_invariant < n_features, got {} of {}",
                self.n_invariant, self.n_features
            ));
        }
        if self.n_invariant < 3 {
            return bad(
                "need n_invariant >= 3: anomalies are latent-state excursions, which require \
                 at least two shared factors plus a direction orthogonal to the mixing"
                    .into(),
            );
        }
        if self.t_len < 2 * MIN_START {
            return bad(format!("t_len {} is too short to place anomalies", self.t_len));
        }
        if !(self.offset_range.0 < self.offset_range.1) {
            return bad(format!("empty offset range {:?}", self.offset_range));
        }
        if !(0.0 < self.scale_range.0 && self.scale_range.0 <= self.scale_range.1) {
            return bad(format!("bad scale range {:?}", self.scale_range));
        }
        if !(0.0 < self.freq_range.0 && self.freq_range.0 <= self.freq_range.1) {
            return bad(format!("bad frequency range {:?}", self.freq_range));
        }
        if self.osc_amp < 0.0 || self.noise_level < 0.0 {
            return bad("oscillation amplitude and noise level must be nonnegative".into());
        }
        let total: usize = self.anomalies.iter().map(|a| a.count).sum();
        if total == 0 {
            return bad(
                "no anomalies configured; test sequences need at least one to be evaluable"
                    .into(),
            );
        }
        for a in &self.anomalies {
            if a.count == 0 {
                continue;
            }
            if a.duration.0 == 0 || a.duration.0 > a.duration.1 {
                return bad(format!("bad duration range {:?}", a.duration));
            }
            if a.duration.1 > self.t_len {
                return Err(SynthError::Placement(format!(
                    "duration up to {} exceeds sequence length {}",
                    a.duration.1, self.t_len
                )));
            }
            if !(a.magnitude > 0.0) {
                return bad(format!("magnitude must be positive, got {}", a.magnitude));
            }
        }
        Ok(())
    }

    fn n_specific(&self) -> usize {
        self.n_features - self.n_invariant
    }
}

/// One injected anomaly, recorded so validity checks can audit the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedAnomaly {
    pub sequence_id: String,
    /// Inclusive record range.
    pub start: usize,
    pub end: usize,
    pub kind: AnomalyKind,
    /// Root-cause feature: domain-specific for contextual anomalies,
    /// invariant for point and collective ones.
    pub feature: usize,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub sequences: Vec<Sequence>,
    pub ranges: Vec<LabeledRange>,
    pub injected: Vec<InjectedAnomaly>,
}

struct DomainParams {
    offset: f64,
    scale: f64,
    freq: f64,
    phase: f64,
}

fn draw_domains(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<DomainParams> {
    let (lo, hi) = cfg.offset_range;
    let span = hi - lo;
    let mut out = Vec::with_capacity(cfg.n_train_domains + cfg.n_test_domains);
    // Training offsets are stratified so every pair of domains is separated,
    // which keeps the domain-difference test decisive.
    for d in 0..cfg.n_train_domains {
        let u: f64 = rng.random_range(0.0..1.0);
        let offset = lo + span * (d as f64 + 0.2 + 0.6 * u) / cfg.n_train_domains as f64;
        out.push(DomainParams {
            offset,
            scale: rng.random_range(cfg.scale_range.0..=cfg.scale_range.1),
            freq: rng.random_range(cfg.freq_range.0..=cfg.freq_range.1),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        });
    }
    // Test offsets sit strictly above every training offset: outside the
    // training parameter hull along the offset axis, so every test domain is
    // a level no detector has seen. The band hugs the hull — a fraction of a
    // training standard deviation away — because the point of the shift is an
    // unseen operating level, not inputs so far out that every model's
    // behavior degenerates into arbitrary extrapolation.
    let top = out
        .iter()
        .map(|p| p.offset)
        .fold(f64::NEG_INFINITY, f64::max);
    let step = (0.16 * span).max(0.3);
    for d in 0..cfg.n_test_domains {
        let u: f64 = rng.random_range(0.0..1.0);
        let offset = top + step * (d as f64 + 0.5 + 0.5 * u);
        out.push(DomainParams {
            offset,
            scale: rng.random_range(cfg.scale_range.0..=cfg.scale_range.1),
            freq: rng.random_range(cfg.freq_range.0..=cfg.freq_range.1),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        });
    }
    out
}

/// Stationary AR(1) path with standard-normal marginals.
fn latent_path(t_len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut path = Vec::with_capacity(t_len);
    let mut x: f64 = rng.sample(StandardNormal);
    path.push(x);
    let innov = (1.0 - LATENT_RHO * LATENT_RHO).sqrt();
    for _ in 1..t_len {
        let e: f64 = rng.sample(StandardNormal);
        x = LATENT_RHO * x + innov * e;
        path.push(x);
    }
    path
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 1e-12 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Uniform direction on the unit sphere of `dim` dimensions.
fn random_direction(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v) > 1e-6 {
            return v;
        }
    }
}

/// Mixing of the shared latent factors into the invariant features: one row
/// of weights per invariant feature, `n_invariant - 1` factors, so the
/// normal invariant vectors live on a proper subspace (plus noise) and a
/// direction orthogonal to all of it always exists.
struct InvariantMixing {
    /// `n_invariant` rows of `k` weights each.
    rows: Vec<Vec<f64>>,
    k: usize,
}

impl InvariantMixing {
    fn draw(n_invariant: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = n_invariant - 1;
        let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
        // Redraw until the mixing is well conditioned: a near-degenerate
        // matrix would make some latent directions invisible in the
        // features, weakening both the anomaly signal and its audit.
        for _ in 0..200 {
            let rows: Vec<Vec<f64>> = (0..n_invariant)
                .map(|_| {
                    let rho: f64 = rng.random_range(0.8..1.2);
                    let mut row = random_direction(k, rng);
                    for x in row.iter_mut() {
                        *x *= rho;
                    }
                    row
                })
                .collect();
            let m = nalgebra::DMatrix::from_fn(n_invariant, k, |r, c| rows[r][c]);
            let sv = m.singular_values();
            let min_sv = sv.iter().cloned().fold(f64::INFINITY, f64::min);
            if min_sv >= 0.45 {
                return Self { rows, k };
            }
            if best.as_ref().is_none_or(|(b, _)| min_sv > *b) {
                best = Some((min_sv, rows));
            }
        }
        let (_, rows) = best.expect("at least one draw");
        Self { rows, k }
    }

    /// Row norm: how strongly feature `j` responds to the latent state.
    fn row_norm(&self, j: usize) -> f64 {
        dot(&self.rows[j], &self.rows[j]).sqrt()
    }

    /// Latent direction responding most in feature `f` and proportionally in
    /// the others: the normalized mixing row.
    fn feature_direction(&self, f: usize) -> Vec<f64> {
        let mut v = self.rows[f].clone();
        normalize(&mut v);
        v
    }

    /// Latent direction every feature responds to only weakly — the best of
    /// many random candidates. Excursions along it travel far from the
    /// normal latent orbit per unit of marginal feature movement.
    fn gap_direction(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut best = random_direction(self.k, rng);
        let response = |v: &[f64]| -> f64 {
            self.rows
                .iter()
                .map(|row| {
                    let n = dot(row, row).sqrt().max(1e-12);
                    (dot(row, v) / n).abs()
                })
                .fold(0.0, f64::max)
        };
        let mut best_score = response(&best);
        for _ in 0..512 {
            let v = random_direction(self.k, rng);
            let s = response(&v);
            if s < best_score {
                best_score = s;
                best = v;
            }
        }
        best
    }

    /// Unit vector in feature space orthogonal to every mixing column.
    /// Normal data has only observation noise along it, so even a small
    /// shift there leaves the joint distribution of normal invariant
    /// vectors. Always exists because there are more features than factors.
    fn off_manifold_direction(&self) -> Vec<f64> {
        let n = self.rows.len();
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.k);
        for c in 0..self.k {
            let mut col: Vec<f64> = self.rows.iter().map(|r| r[c]).collect();
            for q in &basis {
                let d = dot(&col, q);
                for (x, y) in col.iter_mut().zip(q) {
                    *x -= d * y;
                }
            }
            if normalize(&mut col) > 1e-9 {
                basis.push(col);
            }
        }
        for i in 0..n {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            for q in &basis {
                let d = dot(&v, q);
                for (x, y) in v.iter_mut().zip(q) {
                    *x -= d * y;
                }
            }
            if normalize(&mut v) > 1e-6 {
                return v;
            }
        }
        unreachable!("k < n_invariant guarantees an orthogonal direction");
    }
}

/// Normal (pre-injection) values for one domain.
fn normal_values(
    cfg: &SynthConfig,
    mixing: &InvariantMixing,
    factors: &[Vec<f64>],
    specific_latents: &[Vec<f64>],
    params: &DomainParams,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let n_spec = cfg.n_specific();
    let sigma_inv = INVARIANT_NOISE_FRAC * cfg.noise_level;
    let mut values = Array2::zeros((cfg.t_len, cfg.n_features));
    for t in 0..cfg.t_len {
        for j in 0..cfg.n_features {
            let noise: f64 = rng.sample(StandardNormal);
            values[[t, j]] = if j < cfg.n_invariant {
                let signal: f64 = mixing.rows[j]
                    .iter()
                    .enumerate()
                    .map(|(c, &w)| w * factors[c][t])
                    .sum();
                signal + sigma_inv * noise
            } else {
                let k = j - cfg.n_invariant;
                let osc = (std::f64::consts::TAU
                    * (params.freq * t as f64 + k as f64 / n_spec as f64)
                    + params.phase)
                    .sin();
                params.offset
                    + params.scale * specific_latents[k][t]
                    + cfg.osc_amp * osc
                    + cfg.noise_level * noise
            };
        }
    }
    values
}

struct Placement {
    kind: AnomalyKind,
    start: usize,
    end: usize,
    magnitude: f64,
}

fn place_anomalies(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Placement>, SynthError> {
    let mut placed: Vec<Placement> = Vec::new();
    for spec in &cfg.anomalies {
        for _ in 0..spec.count {
            let duration = rng.random_range(spec.duration.0..=spec.duration.1);
            if MIN_START + duration > cfg.t_len {
                return Err(SynthError::Placement(format!(
                    "duration {duration} does not fit in {} records",
                    cfg.t_len
                )));
            }
            let mut attempts = 0;
            let (start, end) = loop {
                attempts += 1;
                if attempts > 1000 {
                    return Err(SynthError::Placement(format!(
                        "could not place {} anomalies of {duration} records in {} records",
                        placed.len() + 1,
                        cfg.t_len
                    )));
                }
                let start = rng.random_range(MIN_START..=cfg.t_len - duration);
                let end = start + duration - 1;
                let clear = placed.iter().all(|p| {
                    end + PLACEMENT_GAP < p.start || p.end + PLACEMENT_GAP < start
                });
                if clear {
                    break (start, end);
                }
            };
            placed.push(Placement {
                kind: spec.kind,
                start,
                end,
                magnitude: spec.magnitude,
            });
        }
    }
    placed.sort_by_key(|p| p.start);
    Ok(placed)
}

/// Per-feature (min, max) over rows.
fn feature_ranges(values: &[&Array2<f64>]) -> Vec<(f64, f64)> {
    let m = values[0].ncols();
    let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); m];
    for v in values {
        for row in v.rows() {
            for (j, &x) in row.iter().enumerate() {
                out[j].0 = out[j].0.min(x);
                out[j].1 = out[j].1.max(x);
            }
        }
    }
    out
}

/// Trapezoid envelope over a span of `len` records: ramps over roughly a
/// quarter of the span at each edge, full strength in between.
fn trapezoid(t_rel: usize, len: usize) -> f64 {
    let ramp = (len / 4).max(1) as f64;
    let up = (t_rel + 1) as f64 / ramp;
    let down = (len - t_rel) as f64 / ramp;
    up.min(down).min(1.0)
}

/// Largest excursion radius along latent direction `v` that keeps every
/// invariant feature within `margin` times its per-sign normal extent,
/// leaving room for the off-manifold shift `g` and observation noise.
fn max_radius_within_ranges(
    mixing: &InvariantMixing,
    v: &[f64],
    ranges: &[(f64, f64)],
    g: f64,
    off_dir: &[f64],
    sigma_inv: f64,
    margin: f64,
) -> f64 {
    let mut r_max = f64::INFINITY;
    for (j, row) in mixing.rows.iter().enumerate() {
        let response = dot(row, v).abs();
        if response < 1e-9 {
            continue;
        }
        let (lo, hi) = ranges[j];
        let bound = (-lo).min(hi).max(0.0);
        let slack = margin * bound - (g * off_dir[j]).abs() - 4.0 * sigma_inv;
        r_max = r_max.min((slack / response).max(0.0));
    }
    if r_max.is_finite() {
        r_max
    } else {
        0.0
    }
}

/// Rewrites the invariant features of `values[start..=end]` as an excursion
/// of the shared latent state: the factors are blended toward `radius`
/// times the latent direction `v`, an off-manifold shift of size `g` along
/// `off_dir` is layered on top, and fresh observation noise is drawn. The
/// trapezoid envelope keeps the entry and exit smooth.
#[allow(clippy::too_many_arguments)]
fn inject_latent_excursion(
    values: &mut Array2<f64>,
    start: usize,
    end: usize,
    mixing: &InvariantMixing,
    factors: &[Vec<f64>],
    v: &[f64],
    radius: f64,
    g: f64,
    off_dir: &[f64],
    sigma_inv: f64,
    rng: &mut ChaCha8Rng,
) {
    let len = end - start + 1;
    for t in start..=end {
        let env = trapezoid(t - start, len);
        for (j, row) in mixing.rows.iter().enumerate() {
            let signal: f64 = row
                .iter()
                .enumerate()
                .map(|(c, &w)| {
                    let u_eff = (1.0 - env) * factors[c][t] + env * radius * v[c];
                    w * u_eff
                })
                .sum();
            let noise: f64 = rng.sample(StandardNormal);
            values[[t, j]] = signal + env * g * off_dir[j] + sigma_inv * noise;
        }
    }
}

/// Generates the full dataset: one training sequence per training domain and
/// one labeled test sequence per test domain. Deterministic in the seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mixing = InvariantMixing::draw(cfg.n_invariant, &mut rng);
    let off_dir = mixing.off_manifold_direction();
    let gap_dir = mixing.gap_direction(&mut rng);
    let domains = draw_domains(cfg, &mut rng);

    // One latent realization shared by every sequence: invariant features
    // are then identically distributed across domains by construction.
    let factors: Vec<Vec<f64>> = (0..mixing.k)
        .map(|_| latent_path(cfg.t_len, &mut rng))
        .collect();
    let specific_latents: Vec<Vec<f64>> = (0..cfg.n_specific())
        .map(|_| latent_path(cfg.t_len, &mut rng))
        .collect();

    let mut all_values: Vec<Array2<f64>> = domains
        .iter()
        .map(|p| normal_values(cfg, &mixing, &factors, &specific_latents, p, &mut rng))
        .collect();

    // Ranges over pre-injection data. Training-domain ranges are the stable
    // anchor: that data is never modified, so values kept inside them stay
    // inside any normal range computed later.
    let train_refs: Vec<&Array2<f64>> = all_values[..cfg.n_train_domains].iter().collect();
    let train_ranges = feature_ranges(&train_refs);
    let global_ranges = feature_ranges(&all_values.iter().collect::<Vec<_>>());

    let mut ranges = Vec::new();
    let mut injected = Vec::new();
    let n_spec = cfg.n_specific();
    let sigma_inv = INVARIANT_NOISE_FRAC * cfg.noise_level;
    // Off-manifold shift for contextual and point anomalies: enough to leave
    // the normal joint distribution on its own (normal data has only noise in
    // that direction), small enough to stay inside every marginal range.
    // Collective anomalies deliberately omit it — they stay on the manifold.
    let booster = (4.0 * sigma_inv).max(0.12);
    // Invariant feature most responsive to the gap direction; reported as
    // the root-cause feature of latent-orbit anomalies.
    let gap_feature = (0..cfg.n_invariant)
        .max_by(|&a, &b| {
            let ra = dot(&mixing.rows[a], &gap_dir).abs();
            let rb = dot(&mixing.rows[b], &gap_dir).abs();
            ra.total_cmp(&rb)
        })
        .expect("at least one invariant feature");

    for d in 0..cfg.n_test_domains {
        let seq_id = format!("test-{d}");
        let domain_idx = cfg.n_train_domains + d;
        let placements = place_anomalies(cfg, &mut rng)?;
        let home_ranges = feature_ranges(&[&all_values[domain_idx]]);
        let values = &mut all_values[domain_idx];
        let mut counters: BTreeMap<u32, usize> = BTreeMap::new();

        for p in &placements {
            let idx = {
                let c = counters.entry(p.kind.code()).or_insert(0);
                let i = *c;
                *c += 1;
                i
            };
            // Alternate the excursion's side of the orbit across instances.
            let side = if idx % 2 == 0 { 1.0 } else { -1.0 };
            let feature = match p.kind {
                AnomalyKind::Contextual => {
                    let f = cfg.n_invariant + idx % n_spec;
                    // Level just below everything this domain produces but
                    // inside the training domains' (hence the global) normal
                    // range. Staying near the home range keeps the level
                    // globally unremarkable; only its own domain's context
                    // makes it anomalous.
                    let floor = train_ranges[f].0;
                    let home_lo = home_ranges[f].0;
                    if home_lo - floor < 0.1 {
                        return Err(SynthError::Placement(format!(
                            "no headroom for a contextual level on feature {f}"
                        )));
                    }
                    let headroom = home_lo - floor;
                    let ripple = (0.05 * headroom).min(0.1);
                    let depth = (0.3 * p.magnitude + 2.0 * cfg.noise_level + 2.0 * ripple)
                        .min(0.5 * headroom);
                    let target = home_lo - depth;
                    for t in p.start..=p.end {
                        values[[t, f]] = target + ripple * (0.7 * t as f64).sin();
                    }
                    // The root cause also knocks the shared state off its
                    // orbit, inside the invariant marginal ranges.
                    let dir: Vec<f64> = gap_dir.iter().map(|&x| side * x).collect();
                    let r_max = max_radius_within_ranges(
                        &mixing,
                        &dir,
                        &train_ranges[..cfg.n_invariant],
                        booster,
                        &off_dir,
                        sigma_inv,
                        0.92,
                    );
                    inject_latent_excursion(
                        values,
                        p.start,
                        p.end,
                        &mixing,
                        &factors,
                        &dir,
                        0.95 * r_max,
                        booster,
                        &off_dir,
                        sigma_inv,
                        &mut rng,
                    );
                    f
                }
                AnomalyKind::Point => {
                    let f = idx % cfg.n_invariant;
                    // Surge along this feature's mixing direction until the
                    // feature clears the global normal range by `magnitude`.
                    let dir = mixing.feature_direction(f);
                    let radius = (global_ranges[f].1 + p.magnitude) / mixing.row_norm(f);
                    inject_latent_excursion(
                        values,
                        p.start,
                        p.end,
                        &mixing,
                        &factors,
                        &dir,
                        radius,
                        booster,
                        &off_dir,
                        sigma_inv,
                        &mut rng,
                    );
                    // Pin the peak above the range even when the span is too
                    // short for the envelope to reach full strength.
                    let c = (p.start + p.end) / 2;
                    values[[c, f]] = global_ranges[f].1 + p.magnitude;
                    f
                }
                AnomalyKind::Collective => {
                    // Hold an off-orbit plateau as far out as the marginal
                    // ranges allow — and nothing else. The values stay exactly
                    // on the mixing manifold (no off-manifold shift), every
                    // cross-feature relation holds, and every marginal stays
                    // in range: only the joint density of the shared state
                    // over the window is wrong. Detectors that model that
                    // density can see it; detectors that check marginals or
                    // reconstruct records from the manifold cannot.
                    let dir: Vec<f64> = gap_dir.iter().map(|&x| side * x).collect();
                    let r_max = max_radius_within_ranges(
                        &mixing,
                        &dir,
                        &train_ranges[..cfg.n_invariant],
                        0.0,
                        &off_dir,
                        sigma_inv,
                        0.92,
                    );
                    inject_latent_excursion(
                        values,
                        p.start,
                        p.end,
                        &mixing,
                        &factors,
                        &dir,
                        r_max,
                        0.0,
                        &off_dir,
                        sigma_inv,
                        &mut rng,
                    );
                    gap_feature
                }
            };
            ranges.push(LabeledRange {
                sequence_id: seq_id.clone(),
                start: p.start,
                end: p.end,
                event_type: p.kind.code(),
            });
            injected.push(InjectedAnomaly {
                sequence_id: seq_id.clone(),
                start: p.start,
                end: p.end,
                kind: p.kind,
                feature,
            });
        }
    }

    let timestamps: Vec<i64> = (0..cfg.t_len as i64).collect();
    let mut sequences = Vec::with_capacity(domains.len());
    for (i, values) in all_values.into_iter().enumerate() {
        let (id, role) = if i < cfg.n_train_domains {
            (format!("train-{i}"), Role::Train)
        } else {
            (format!("test-{}", i - cfg.n_train_domains), Role::Test)
        };
        let labels = if role == Role::Test {
            Some(ranges_to_labels(&id, cfg.t_len, &ranges)?)
        } else {
            None
        };
        sequences.push(Sequence::new(
            id,
            i as u32,
            timestamps.clone(),
            values,
            labels,
            role,
        )?);
    }

    Ok(SynthDataset {
        sequences,
        ranges,
        injected,
    })
}

/// Writes `traces/<id>.csv` per sequence, `labels.csv`, `injected.json`, and
/// `manifest.json`; returns the manifest path.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<PathBuf, SynthError> {
    use crate::dataset::{write_labels_csv, write_trace_csv, Manifest, ManifestEntry};
    let traces = dir.join("traces");
    std::fs::create_dir_all(&traces).map_err(|e| SynthError::Dataset(DatasetError::Io {
        path: traces.clone(),
        source: e,
    }))?;
    let labels_path = dir.join("labels.csv");
    write_labels_csv(&labels_path, &ds.ranges)?;
    let injected_path = dir.join("injected.json");
    let text = serde_json::to_string_pretty(&ds.injected).expect("metadata serializes");
    std::fs::write(&injected_path, text).map_err(|e| {
        SynthError::Dataset(DatasetError::Io {
            path: injected_path,
            source: e,
        })
    })?;

    let mut entries = Vec::with_capacity(ds.sequences.len());
    for seq in &ds.sequences {
        let rel = format!("traces/{}.csv", seq.id);
        write_trace_csv(&dir.join(&rel), &seq.timestamps, &seq.values)?;
        entries.push(ManifestEntry {
            id: seq.id.clone(),
            path: rel,
            domain_id: seq.domain_id,
            role: seq.role,
            label_path: (seq.role == Role::Test).then(|| "labels.csv".to_string()),
        });
    }
    let manifest_path = dir.join("manifest.json");
    Manifest {
        sequences: entries,
    }
    .write(&manifest_path)?;
    Ok(manifest_path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain_id: u32,
    pub role: Role,
    /// Per-feature (min, max) over normal records.
    pub feature_ranges: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub domains: Vec<DomainSummary>,
    /// Labeled ranges per event-type code.
    pub anomaly_counts: BTreeMap<u32, usize>,
    /// Per-feature |mean over train-domain normal - mean over test-domain normal|.
    pub shift: Vec<f64>,
}

/// Summary statistics over a dataset's normal records.
pub fn describe(sequences: &[Sequence]) -> DatasetSummary {
    let m = sequences.first().map_or(0, |s| s.n_features());
    let mut by_domain: BTreeMap<u32, (Role, Vec<(f64, f64)>)> = BTreeMap::new();
    let mut sums = [vec![0.0; m], vec![0.0; m]];
    let mut counts = [0usize; 2];
    let mut anomaly_counts: BTreeMap<u32, usize> = BTreeMap::new();

    for seq in sequences {
        let entry = by_domain
            .entry(seq.domain_id)
            .or_insert_with(|| (seq.role, vec![(f64::INFINITY, f64::NEG_INFINITY); m]));
        let side = if seq.role == Role::Train { 0 } else { 1 };
        let mut prev_code = 0u32;
        for (t, row) in seq.values.rows().into_iter().enumerate() {
            let code = seq.labels.as_ref().map_or(0, |l| l[t]);
            if code != 0 && code != prev_code {
                *anomaly_counts.entry(code).or_insert(0) += 1;
            }
            prev_code = code;
            if code != 0 {
                continue;
            }
            counts[side] += 1;
            for (j, &x) in row.iter().enumerate() {
                entry.1[j].0 = entry.1[j].0.min(x);
                entry.1[j].1 = entry.1[j].1.max(x);
                sums[side][j] += x;
            }
        }
    }

    let shift = (0..m)
        .map(|j| {
            if counts[0] == 0 || counts[1] == 0 {
                0.0
            } else {
                (sums[0][j] / counts[0] as f64 - sums[1][j] / counts[1] as f64).abs()
            }
        })
        .collect();
    DatasetSummary {
        domains: by_domain
            .into_iter()
            .map(|(domain_id, (role, feature_ranges))| DomainSummary {
                domain_id,
                role,
                feature_ranges,
            })
            .collect(),
        anomaly_counts,
        shift,
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let fa = i as f64 / a.len() as f64;
        let fb = j as f64 / b.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

/// Critical value of the two-sample KS statistic at the 1% level.
pub fn ks_critical_1pct(n: usize, m: usize) -> f64 {
    KS_COEFF_1PCT * ((n + m) as f64 / (n * m) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub ks_critical: f64,
    /// Largest KS statistic over invariant features and domain pairs; must
    /// stay below the critical value.
    pub invariant_ks_max: f64,
    /// Smallest KS statistic over domain-specific features and domain pairs;
    /// must exceed the critical value.
    pub specific_ks_min: f64,
    /// Empirical 99.9th percentile of squared Mahalanobis distances of
    /// normal invariant vectors.
    pub ellipsoid_threshold: f64,
    pub ranges_total: usize,
    /// Ranges that verifiably leave normal behavior: contextual and point
    /// ranges must put at least one record beyond the threshold; collective
    /// ranges must put their span-averaged invariant vector beyond the
    /// 99.9th percentile of same-length rolling means of normal data.
    pub ranges_escaping: usize,
    pub contextual_ok: usize,
    pub contextual_total: usize,
    pub point_ok: usize,
    pub point_total: usize,
    pub collective_ok: usize,
    pub collective_total: usize,
    pub ok: bool,
}

/// Checks the generator's statistical contracts against the actual data:
/// invariant features identically distributed across domains, domain-specific
/// features not, and every labeled range leaving the normal invariant-feature
/// ellipsoid, with the per-kind shape constraints on top.
pub fn validate(ds: &SynthDataset, n_invariant: usize) -> Result<ValidityReport, SynthError> {
    let m = ds
        .sequences
        .first()
        .ok_or_else(|| SynthError::Numerical("empty dataset".into()))?
        .n_features();
    if n_invariant == 0 || n_invariant > m {
        return Err(SynthError::BadConfig(format!(
            "n_invariant {n_invariant} out of range for {m} features"
        )));
    }

    // Normal records per domain, capped for the KS tests.
    let mut per_domain: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for seq in &ds.sequences {
        let dest = per_domain.entry(seq.domain_id).or_default();
        for (t, row) in seq.values.rows().into_iter().enumerate() {
            if seq.labels.as_ref().is_some_and(|l| l[t] != 0) {
                continue;
            }
            if dest.len() >= 2000 {
                break;
            }
            dest.push(row.to_vec());
        }
    }
    let domains: Vec<u32> = per_domain.keys().cloned().collect();
    if domains.len() < 2 {
        return Err(SynthError::Numerical("need at least two domains".into()));
    }

    let mut invariant_ks_max = 0.0f64;
    let mut specific_ks_min = f64::INFINITY;
    let mut ks_critical = 0.0f64;
    for (i, &da) in domains.iter().enumerate() {
        for &db in &domains[i + 1..] {
            let (ra, rb) = (&per_domain[&da], &per_domain[&db]);
            ks_critical = ks_critical.max(ks_critical_1pct(ra.len(), rb.len()));
            for j in 0..m {
                let a: Vec<f64> = ra.iter().map(|r| r[j]).collect();
                let b: Vec<f64> = rb.iter().map(|r| r[j]).collect();
                let d = ks_two_sample(&a, &b);
                if j < n_invariant {
                    invariant_ks_max = invariant_ks_max.max(d);
                } else {
                    specific_ks_min = specific_ks_min.min(d);
                }
            }
        }
    }

    // Ellipsoid of normal invariant vectors, pooled over all domains.
    let normal_rows: Vec<Vec<f64>> = per_domain.values().flatten().cloned().collect();
    let mut inv = Array2::zeros((normal_rows.len(), n_invariant));
    for (r, row) in normal_rows.iter().enumerate() {
        for j in 0..n_invariant {
            inv[[r, j]] = row[j];
        }
    }
    let (mean, mut cov) = population_mean_cov(&inv);
    let ridge = 1e-9 * (1.0 + cov.diag().sum() / n_invariant as f64);
    for i in 0..n_invariant {
        cov[[i, i]] += ridge;
    }
    let sym = nalgebra::DMatrix::from_fn(n_invariant, n_invariant, |r, c| cov[[r, c]]);
    let precision = sym
        .cholesky()
        .ok_or_else(|| SynthError::Numerical("invariant covariance not positive definite".into()))?
        .inverse();
    let mahal2 = |row: &[f64]| -> f64 {
        let d: Vec<f64> = (0..n_invariant).map(|j| row[j] - mean[j]).collect();
        let mut s = 0.0;
        for (i, di) in d.iter().enumerate() {
            for (j, dj) in d.iter().enumerate() {
                s += di * precision[(i, j)] * dj;
            }
        }
        s
    };
    let mut normal_m2: Vec<f64> = normal_rows.iter().map(|r| mahal2(r)).collect();
    normal_m2.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q_idx = ((0.999 * normal_m2.len() as f64).ceil() as usize).min(normal_m2.len()) - 1;
    let ellipsoid_threshold = normal_m2[q_idx];

    // Global and per-domain normal ranges for the per-kind shape checks.
    let mut global = vec![(f64::INFINITY, f64::NEG_INFINITY); m];
    let mut domain_ranges: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for (&d, rows) in &per_domain {
        let dr = domain_ranges
            .entry(d)
            .or_insert_with(|| vec![(f64::INFINITY, f64::NEG_INFINITY); m]);
        for row in rows {
            for (j, &x) in row.iter().enumerate() {
                dr[j].0 = dr[j].0.min(x);
                dr[j].1 = dr[j].1.max(x);
                global[j].0 = global[j].0.min(x);
                global[j].1 = global[j].1.max(x);
            }
        }
    }

    let seq_by_id = |id: &str| ds.sequences.iter().find(|s| s.id == id);

    // Null distribution for window-level escape checks. Collective ranges
    // hold a plateau of individually unremarkable records, so their departure
    // shows in the span's average invariant vector: averaging shrinks normal
    // variation (records decorrelate along the span) but leaves a held level
    // untouched. Same-length rolling means over the fully normal sequences
    // give the matching null.
    let mut rolling_thresholds: BTreeMap<usize, f64> = BTreeMap::new();
    let mut rolling_threshold = |len: usize| -> f64 {
        *rolling_thresholds.entry(len).or_insert_with(|| {
            let mut vals = Vec::new();
            for seq in &ds.sequences {
                let normal = seq
                    .labels
                    .as_ref()
                    .is_none_or(|l| l.iter().all(|&x| x == 0));
                if !normal || seq.values.nrows() < len {
                    continue;
                }
                let mut sums = vec![0.0; n_invariant];
                for t in 0..seq.values.nrows() {
                    for (j, s) in sums.iter_mut().enumerate() {
                        *s += seq.values[[t, j]];
                    }
                    if t + 1 >= len {
                        let mean: Vec<f64> = sums.iter().map(|s| s / len as f64).collect();
                        vals.push(mahal2(&mean));
                        for (j, s) in sums.iter_mut().enumerate() {
                            *s -= seq.values[[t + 1 - len, j]];
                        }
                    }
                }
            }
            if vals.is_empty() {
                return ellipsoid_threshold;
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = ((0.999 * vals.len() as f64).ceil() as usize).min(vals.len()) - 1;
            vals[q]
        })
    };

    let mut ranges_escaping = 0;
    for r in &ds.ranges {
        let seq = seq_by_id(&r.sequence_id)
            .ok_or_else(|| SynthError::Numerical(format!("unknown sequence {}", r.sequence_id)))?;
        let escaped = if r.event_type == AnomalyKind::Collective.code() {
            let len = r.end - r.start + 1;
            let mut mean = vec![0.0; n_invariant];
            for t in r.start..=r.end {
                for (j, mj) in mean.iter_mut().enumerate() {
                    *mj += seq.values[[t, j]];
                }
            }
            for mj in mean.iter_mut() {
                *mj /= len as f64;
            }
            mahal2(&mean) > rolling_threshold(len)
        } else {
            (r.start..=r.end).any(|t| {
                let row: Vec<f64> = seq.values.row(t).to_vec();
                mahal2(&row) > ellipsoid_threshold
            })
        };
        if escaped {
            ranges_escaping += 1;
        }
    }

    let mut counts: BTreeMap<AnomalyKind, (usize, usize)> = BTreeMap::new();
    for a in &ds.injected {
        let seq = seq_by_id(&a.sequence_id)
            .ok_or_else(|| SynthError::Numerical(format!("unknown sequence {}", a.sequence_id)))?;
        let dr = &domain_ranges[&seq.domain_id];
        let ok = match a.kind {
            AnomalyKind::Contextual => (a.start..=a.end).any(|t| {
                let x = seq.values[[t, a.feature]];
                let (g_lo, g_hi) = global[a.feature];
                let (d_lo, d_hi) = dr[a.feature];
                x > g_lo && x < g_hi && (x < d_lo || x > d_hi)
            }),
            AnomalyKind::Point => (a.start..=a.end).any(|t| {
                let x = seq.values[[t, a.feature]];
                x < global[a.feature].0 || x > global[a.feature].1
            }),
            AnomalyKind::Collective => (a.start..=a.end).all(|t| {
                (0..n_invariant).all(|j| {
                    let x = seq.values[[t, j]];
                    x >= global[j].0 && x <= global[j].1
                })
            }),
        };
        let slot = counts.entry(a.kind).or_insert((0, 0));
        slot.1 += 1;
        if ok {
            slot.0 += 1;
        }
    }
    let get = |k: AnomalyKind| counts.get(&k).copied().unwrap_or((0, 0));
    let (contextual_ok, contextual_total) = get(AnomalyKind::Contextual);
    let (point_ok, point_total) = get(AnomalyKind::Point);
    let (collective_ok, collective_total) = get(AnomalyKind::Collective);

    let ok = invariant_ks_max < ks_critical
        && specific_ks_min > ks_critical
        && ranges_escaping == ds.ranges.len()
        && contextual_ok == contextual_total
        && point_ok == point_total
        && collective_ok == collective_total;
    Ok(ValidityReport {
        ks_critical,
        invariant_ks_max,
        specific_ks_min,
        ellipsoid_threshold,
        ranges_total: ds.ranges.len(),
        ranges_escaping,
        contextual_ok,
        contextual_total,
        point_ok,
        point_total,
        collective_ok,
        collective_total,
        ok,
    })
}

impl PartialOrd for AnomalyKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AnomalyKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.code().cmp(&other.code())
    }
}
