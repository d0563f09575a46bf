//! Threshold-sweep evaluation of per-record anomaly scores: precision/recall
//! over every observed threshold, per-event-type recall averaging, masking of
//! the records trailing each anomaly, peak F1, and score-distribution
//! diagnostics (labeled populations, kernel density curves, overlap
//! statistics).
//!
//! Labels are `0` for normal records and a positive event-type code for
//! anomalous ones. Scores of `-inf` (records before the first full window)
//! are always predicted normal and never become threshold candidates.

use crate::par;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Points in each kernel-density curve.
pub const KDE_GRID_POINTS: usize = 512;
/// Fraction of the score span padded on each side of the density grid.
pub const KDE_MARGIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("window length must be at least 1")]
    BadWindowLen,
    #[error("sequence {seq}: {labels} labels but {scores} scores")]
    LengthMismatch {
        seq: usize,
        labels: usize,
        scores: usize,
    },
    #[error("no unmasked {class} records to evaluate")]
    MissingClass { class: &'static str },
    #[error("non-finite score at unmasked position {pos} of sequence {seq}")]
    BadScore { seq: usize, pos: usize },
    #[error("failed to write {path}: {msg}")]
    Csv { path: PathBuf, msg: String },
}

/// Serializes a float as a number when finite and as `"inf"`/`"-inf"`/`"nan"`
/// otherwise, so thresholds survive JSON round-trips exactly.
pub mod float_token {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    struct TokenVisitor;

    impl Visitor<'_> for TokenVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a float or one of \"inf\", \"-inf\", \"nan\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            v.parse().map_err(|_| E::custom(format!("bad float token {v:?}")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(TokenVisitor)
    }
}

/// Per-record scores and labels for one test sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub scores: Vec<f64>,
    /// `0` = normal; positive values are event-type codes.
    pub labels: Vec<u32>,
}

/// One operating point of the threshold sweep; prediction is `score > threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    #[serde(with = "float_token")]
    pub threshold: f64,
    pub precision: f64,
    pub recall_avg: f64,
    pub f1: f64,
}

/// Scores grouped by where they came from and what they labeled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistributions {
    pub train_normal: Vec<f64>,
    pub test_normal: Vec<f64>,
    pub test_anomalous: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Population {
    TrainNormal,
    TestNormal,
    TestAnomalous,
}

impl Population {
    pub fn as_str(&self) -> &'static str {
        match self {
            Population::TrainNormal => "train-normal",
            Population::TestNormal => "test-normal",
            Population::TestAnomalous => "test-anomalous",
        }
    }
}

impl ScoreDistributions {
    pub fn populations(&self) -> [(Population, &[f64]); 3] {
        [
            (Population::TrainNormal, &self.train_normal),
            (Population::TestNormal, &self.test_normal),
            (Population::TestAnomalous, &self.test_anomalous),
        ]
    }
}

/// How strongly the test-normal score population sits above reference
/// populations; each entry is a fraction of test-normal scores and is `None`
/// when either population is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    /// Fraction of test-normal scores above the median train-normal score.
    /// Near 0.5 when the two populations align; near 1.0 when test normals
    /// are systematically scored higher than training normals.
    pub test_normal_above_train_median: Option<f64>,
    /// Fraction of test-normal scores above the median test-anomalous score.
    pub test_normal_above_anomalous_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub pr_points: Vec<PrPoint>,
    pub peak_f1: f64,
    /// Threshold attaining the peak F1; ties go to the larger threshold.
    #[serde(with = "float_token")]
    pub best_threshold: f64,
    pub precision_at_best: f64,
    pub recall_avg_at_best: f64,
    /// Per-event-type recall at the best threshold.
    pub recall_per_type: BTreeMap<u32, f64>,
    pub masked_count: usize,
    pub distributions: ScoreDistributions,
    pub overlap: OverlapStats,
}

/// Marks the `window_len - 1` normal records immediately after each maximal
/// anomalous run for exclusion from metric counting.
///
/// Anomalous records are never masked. Panics if `window_len` is zero.
pub fn mask_post_anomaly(labels: &[u32], window_len: usize) -> Vec<bool> {
    assert!(window_len >= 1, "window length must be at least 1");
    let mut mask = vec![false; labels.len()];
    let mut i = 0;
    while i < labels.len() {
        if labels[i] == 0 {
            i += 1;
            continue;
        }
        let mut end = i;
        while end + 1 < labels.len() && labels[end + 1] != 0 {
            end += 1;
        }
        for p in end + 1..(end + window_len).min(labels.len()) {
            if labels[p] == 0 {
                mask[p] = true;
            }
        }
        i = end + 1;
    }
    mask
}

/// Unmasked records pooled across sequences.
struct Pooled {
    /// `(score, label)` per retained record.
    records: Vec<(f64, u32)>,
    masked_count: usize,
}

fn pool(instances: &[EvalInstance], window_len: usize) -> Result<Pooled, EvalError> {
    if window_len == 0 {
        return Err(EvalError::BadWindowLen);
    }
    let mut records = Vec::new();
    let mut masked_count = 0;
    for (seq, inst) in instances.iter().enumerate() {
        if inst.scores.len() != inst.labels.len() {
            return Err(EvalError::LengthMismatch {
                seq,
                labels: inst.labels.len(),
                scores: inst.scores.len(),
            });
        }
        let mask = mask_post_anomaly(&inst.labels, window_len);
        for (pos, ((&score, &label), &masked)) in
            inst.scores.iter().zip(&inst.labels).zip(&mask).enumerate()
        {
            if masked {
                masked_count += 1;
                continue;
            }
            if score.is_nan() || score == f64::INFINITY {
                return Err(EvalError::BadScore { seq, pos });
            }
            records.push((score, label));
        }
    }
    if !records.iter().any(|(_, l)| *l != 0) {
        return Err(EvalError::MissingClass { class: "anomalous" });
    }
    if !records.iter().any(|(_, l)| *l == 0) {
        return Err(EvalError::MissingClass { class: "normal" });
    }
    Ok(Pooled {
        records,
        masked_count,
    })
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Threshold candidates are every distinct finite pooled score, plus `-inf`
/// as the predict-everything sentinel. Points come back in ascending
/// threshold order.
fn sweep(pooled: &Pooled) -> Vec<PrPoint> {
    let counts_per_type: BTreeMap<u32, usize> =
        pooled
            .records
            .iter()
            .filter(|(_, l)| *l != 0)
            .fold(BTreeMap::new(), |mut m, (_, l)| {
                *m.entry(*l).or_insert(0) += 1;
                m
            });

    // Group records by distinct finite score, descending, so each sweep step
    // flips one group from predicted-normal to predicted-anomalous.
    let mut finite: Vec<&(f64, u32)> = pooled
        .records
        .iter()
        .filter(|(s, _)| s.is_finite())
        .collect();
    finite.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut groups: Vec<(f64, usize, BTreeMap<u32, usize>)> = Vec::new();
    for (score, label) in finite {
        match groups.last_mut() {
            Some((s, total, by_type)) if *s == *score => {
                *total += 1;
                if *label != 0 {
                    *by_type.entry(*label).or_insert(0) += 1;
                }
            }
            _ => {
                let mut by_type = BTreeMap::new();
                if *label != 0 {
                    by_type.insert(*label, 1);
                }
                groups.push((*score, 1, by_type));
            }
        }
    }

    let mut positives = 0usize;
    let mut tp_total = 0usize;
    let mut tp_per_type: BTreeMap<u32, usize> =
        counts_per_type.keys().map(|&t| (t, 0)).collect();
    let mut points = Vec::with_capacity(groups.len() + 1);
    for i in 0..=groups.len() {
        let threshold = if i < groups.len() {
            groups[i].0
        } else {
            f64::NEG_INFINITY
        };
        let precision = if positives > 0 {
            tp_total as f64 / positives as f64
        } else {
            1.0
        };
        let recall_avg = counts_per_type
            .iter()
            .map(|(t, &n)| tp_per_type[t] as f64 / n as f64)
            .sum::<f64>()
            / counts_per_type.len() as f64;
        points.push(PrPoint {
            threshold,
            precision,
            recall_avg,
            f1: f1_of(precision, recall_avg),
        });
        if i < groups.len() {
            let (_, total, by_type) = &groups[i];
            positives += total;
            for (t, n) in by_type {
                tp_total += n;
                *tp_per_type.get_mut(t).unwrap() += n;
            }
        }
    }
    points.reverse();
    points
}

/// Precision/recall at every observed threshold, pooled over sequences after
/// masking. Precision counts all unmasked records together; recall is
/// computed per event type and averaged over the types present.
pub fn pr_curve(instances: &[EvalInstance], window_len: usize) -> Result<Vec<PrPoint>, EvalError> {
    Ok(sweep(&pool(instances, window_len)?))
}

/// Maximum F1 over the curve and its threshold; ties go to the larger
/// threshold. `None` on an empty curve.
pub fn peak_f1(points: &[PrPoint]) -> Option<(f64, f64)> {
    let mut best: Option<&PrPoint> = None;
    for p in points {
        // Ascending threshold order, so >= keeps the largest tied threshold.
        if best.map_or(true, |b| p.f1 >= b.f1) {
            best = Some(p);
        }
    }
    best.map(|p| (p.f1, p.threshold))
}

/// Direct recount of the metrics at one threshold.
fn metrics_at(records: &[(f64, u32)], threshold: f64) -> (f64, f64, BTreeMap<u32, f64>) {
    let mut positives = 0usize;
    let mut tp_total = 0usize;
    let mut n_per_type: BTreeMap<u32, usize> = BTreeMap::new();
    let mut tp_per_type: BTreeMap<u32, usize> = BTreeMap::new();
    for &(score, label) in records {
        let predicted = score > threshold;
        if predicted {
            positives += 1;
        }
        if label != 0 {
            *n_per_type.entry(label).or_insert(0) += 1;
            if predicted {
                tp_total += 1;
                *tp_per_type.entry(label).or_insert(0) += 1;
            }
        }
    }
    let precision = if positives > 0 {
        tp_total as f64 / positives as f64
    } else {
        1.0
    };
    let per_type: BTreeMap<u32, f64> = n_per_type
        .iter()
        .map(|(&t, &n)| (t, *tp_per_type.get(&t).unwrap_or(&0) as f64 / n as f64))
        .collect();
    let recall_avg = per_type.values().sum::<f64>() / per_type.len() as f64;
    (precision, recall_avg, per_type)
}

fn finite(scores: &[f64]) -> Vec<f64> {
    scores.iter().cloned().filter(|s| s.is_finite()).collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Fraction of `sample` strictly above the median of `reference`; `None` if
/// either is empty.
pub fn fraction_above_median(reference: &[f64], sample: &[f64]) -> Option<f64> {
    if reference.is_empty() || sample.is_empty() {
        return None;
    }
    let mut sorted = reference.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = median(&sorted);
    Some(sample.iter().filter(|&&s| s > med).count() as f64 / sample.len() as f64)
}

/// Labeled score populations from training scores plus masked test
/// sequences, with overlap statistics. Non-finite scores (pre-window
/// records) are dropped from the populations.
pub fn export_score_distributions(
    train_scores: &[f64],
    instances: &[EvalInstance],
    window_len: usize,
) -> Result<(ScoreDistributions, OverlapStats), EvalError> {
    let pooled = pool(instances, window_len)?;
    Ok(distributions_of(train_scores, &pooled))
}

fn distributions_of(train_scores: &[f64], pooled: &Pooled) -> (ScoreDistributions, OverlapStats) {
    let mut dists = ScoreDistributions {
        train_normal: finite(train_scores),
        ..ScoreDistributions::default()
    };
    for &(score, label) in &pooled.records {
        if !score.is_finite() {
            continue;
        }
        if label == 0 {
            dists.test_normal.push(score);
        } else {
            dists.test_anomalous.push(score);
        }
    }
    let overlap = OverlapStats {
        test_normal_above_train_median: fraction_above_median(
            &dists.train_normal,
            &dists.test_normal,
        ),
        test_normal_above_anomalous_median: fraction_above_median(
            &dists.test_anomalous,
            &dists.test_normal,
        ),
    };
    (dists, overlap)
}

/// Full evaluation of smoothed per-record scores against labels: threshold
/// sweep, peak F1 with its operating point, and distribution diagnostics.
pub fn evaluate(
    train_scores: &[f64],
    instances: &[EvalInstance],
    window_len: usize,
) -> Result<EvaluationReport, EvalError> {
    let pooled = pool(instances, window_len)?;
    let pr_points = sweep(&pooled);
    let (peak, best_threshold) = peak_f1(&pr_points).expect("sweep emits at least one point");
    let (precision_at_best, recall_avg_at_best, recall_per_type) =
        metrics_at(&pooled.records, best_threshold);
    debug_assert_eq!(f1_of(precision_at_best, recall_avg_at_best), peak);
    let (distributions, overlap) = distributions_of(train_scores, &pooled);
    Ok(EvaluationReport {
        pr_points,
        peak_f1: peak,
        best_threshold,
        precision_at_best,
        recall_avg_at_best,
        recall_per_type,
        masked_count: pooled.masked_count,
        distributions,
        overlap,
    })
}

/// Bandwidth by Scott's rule, `sigma * n^(-1/5)`, with a small positive
/// fallback for degenerate samples.
pub fn scott_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sigma = if samples.len() > 1 {
        (samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let h = sigma * n.powf(-0.2);
    if h > 0.0 && h.is_finite() {
        h
    } else {
        1e-3 * (1.0 + mean.abs())
    }
}

/// Gaussian-kernel density of `samples` evaluated at each grid point.
pub fn kde(samples: &[f64], grid: &[f64]) -> Vec<f64> {
    let h = scott_bandwidth(samples);
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    par::map_collect(grid, |&x| {
        samples
            .iter()
            .map(|&s| {
                let z = (x - s) / h;
                (-0.5 * z * z).exp()
            })
            .sum::<f64>()
            * norm
    })
}

/// Shared evaluation grid spanning all samples with a proportional margin.
pub fn kde_grid(populations: &[&[f64]]) -> Option<Vec<f64>> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in populations {
        for &s in *p {
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    let pad = if hi > lo { KDE_MARGIN * (hi - lo) } else { 1.0 };
    let (lo, hi) = (lo - pad, hi + pad);
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    Some((0..KDE_GRID_POINTS).map(|i| lo + step * i as f64).collect())
}

/// Density curves for each nonempty population on a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeBundle {
    pub grid: Vec<f64>,
    pub curves: Vec<(Population, Vec<f64>)>,
}

/// `None` when every population is empty; empty populations are omitted with
/// a warning.
pub fn kde_curves(dists: &ScoreDistributions) -> Option<KdeBundle> {
    let present: Vec<(Population, &[f64])> = dists
        .populations()
        .into_iter()
        .filter(|(pop, scores)| {
            if scores.is_empty() {
                log::warn!("population {} is empty; omitting its density curve", pop.as_str());
                false
            } else {
                true
            }
        })
        .collect();
    let grid = kde_grid(&present.iter().map(|(_, s)| *s).collect::<Vec<_>>())?;
    let curves = present
        .into_iter()
        .map(|(pop, scores)| (pop, kde(scores, &grid)))
        .collect();
    Some(KdeBundle { grid, curves })
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Header `threshold,precision,recall_avg,f1`; `-inf` is written literally.
pub fn write_pr_curve_csv(path: &Path, points: &[PrPoint]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["threshold", "precision", "recall_avg", "f1"])
        .map_err(|e| csv_err(path, e))?;
    for p in points {
        w.write_record([
            p.threshold.to_string(),
            p.precision.to_string(),
            p.recall_avg.to_string(),
            p.f1.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

/// One row per score, labeled by population.
pub fn write_distributions_csv(path: &Path, dists: &ScoreDistributions) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["population", "score"])
        .map_err(|e| csv_err(path, e))?;
    for (pop, scores) in dists.populations() {
        for s in scores {
            w.write_record([pop.as_str(), &s.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| csv_err(path, e))
}

/// One row per population and grid point: `population,x,density`.
pub fn write_kde_csv(path: &Path, bundle: &KdeBundle) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["population", "x", "density"])
        .map_err(|e| csv_err(path, e))?;
    for (pop, density) in &bundle.curves {
        for (x, d) in bundle.grid.iter().zip(density) {
            w.write_record([pop.as_str(), &x.to_string(), &d.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| csv_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Lookback formulation of the masking rule: a normal record is masked
    /// iff any of the window_len - 1 records before it is anomalous.
    fn mask_oracle(labels: &[u32], l: usize) -> Vec<bool> {
        (0..labels.len())
            .map(|p| {
                labels[p] == 0
                    && (p.saturating_sub(l - 1)..p).any(|j| labels[j] != 0)
            })
            .collect()
    }

    #[test]
    fn unit_window_masks_nothing() {
        let labels = vec![0, 1, 1, 0, 2, 0, 0];
        assert!(mask_post_anomaly(&labels, 1).iter().all(|m| !m));
    }

    #[test]
    fn a_long_window_masks_the_trailing_records_of_a_run() {
        // One run ending at index 5 in a 30-record sequence.
        let mut labels = vec![0u32; 30];
        for l in labels.iter_mut().take(6).skip(3) {
            *l = 1;
        }
        let mask = mask_post_anomaly(&labels, 20);
        for (i, &m) in mask.iter().enumerate() {
            let expect = (6..=24).contains(&i);
            assert_eq!(m, expect, "position {i}");
        }
    }

    #[test]
    fn masking_matches_the_lookback_oracle_on_every_short_label_string() {
        // All label strings over {0,1,2} up to length 7, all window lengths
        // up to 4.
        for len in 1..=7usize {
            for code in 0..3usize.pow(len as u32) {
                let mut labels = Vec::with_capacity(len);
                let mut c = code;
                for _ in 0..len {
                    labels.push((c % 3) as u32);
                    c /= 3;
                }
                for l in 1..=4usize {
                    let got = mask_post_anomaly(&labels, l);
                    assert_eq!(got, mask_oracle(&labels, l), "labels {labels:?} l {l}");
                    for (i, &m) in got.iter().enumerate() {
                        assert!(!(m && labels[i] != 0), "masked an anomalous record");
                    }
                }
            }
        }
    }

    /// Brute-force recount at every candidate threshold, built independently
    /// of the incremental sweep.
    fn oracle_pr(instances: &[EvalInstance], l: usize) -> Vec<PrPoint> {
        let mut records: Vec<(f64, u32)> = Vec::new();
        for inst in instances {
            let mask = mask_post_anomaly(&inst.labels, l);
            for ((&s, &lab), &m) in inst.scores.iter().zip(&inst.labels).zip(&mask) {
                if !m {
                    records.push((s, lab));
                }
            }
        }
        let mut cands: Vec<f64> = records
            .iter()
            .map(|(s, _)| *s)
            .filter(|s| s.is_finite())
            .collect();
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cands.dedup();
        cands.insert(0, f64::NEG_INFINITY);

        cands
            .into_iter()
            .map(|delta| {
                let (precision, recall_avg, _) = metrics_at(&records, delta);
                PrPoint {
                    threshold: delta,
                    precision,
                    recall_avg,
                    f1: f1_of(precision, recall_avg),
                }
            })
            .collect()
    }

    fn random_instances(rng: &mut ChaCha8Rng) -> (Vec<EvalInstance>, usize) {
        loop {
            let l = rng.random_range(1..=5);
            let n_seq = rng.random_range(1..=3);
            let instances: Vec<EvalInstance> = (0..n_seq)
                .map(|_| {
                    let n = rng.random_range(1..=66);
                    let labels: Vec<u32> = (0..n)
                        .map(|_| {
                            if rng.random_bool(0.3) {
                                rng.random_range(1..=3)
                            } else {
                                0
                            }
                        })
                        .collect();
                    let scores: Vec<f64> = (0..n)
                        .map(|i| {
                            if i + 1 < l && rng.random_bool(0.5) {
                                f64::NEG_INFINITY
                            } else {
                                // Coarse values so ties are common.
                                (rng.random_range(-8..=8) as f64) / 4.0
                            }
                        })
                        .collect();
                    EvalInstance { scores, labels }
                })
                .collect();
            if pool(&instances, l).is_ok() {
                return (instances, l);
            }
        }
    }

    #[test]
    fn the_sweep_equals_a_brute_force_recount_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..200 {
            let (instances, l) = random_instances(&mut rng);
            let got = pr_curve(&instances, l).unwrap();
            let want = oracle_pr(&instances, l);
            assert_eq!(got, want);
            let (pf, pd) = peak_f1(&got).unwrap();
            // Oracle peak: max F1, ties to the larger threshold.
            let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for p in &want {
                if p.f1 > best.0 || (p.f1 == best.0 && p.threshold > best.1) {
                    best = (p.f1, p.threshold);
                }
            }
            assert_eq!((pf, pd), best);
        }
    }

    #[test]
    fn a_perfect_scorer_reaches_peak_f1_one() {
        let inst = EvalInstance {
            scores: vec![0.1, 0.3, 0.2, 5.0, 7.0],
            labels: vec![0, 0, 0, 1, 2],
        };
        let report = evaluate(&[], &[inst], 1).unwrap();
        assert_eq!(report.peak_f1, 1.0);
    }

    #[test]
    fn a_constant_scorer_peaks_at_the_predict_everything_detector() {
        let inst = EvalInstance {
            scores: vec![2.0; 6],
            labels: vec![0, 0, 1, 0, 2, 0],
        };
        let report = evaluate(&[], &[inst], 1).unwrap();
        // Only two candidates: the constant (nothing predicted) and -inf
        // (everything predicted). The latter has precision 1/3, recall 1.
        assert_eq!(report.pr_points.len(), 2);
        let p = 2.0 / 6.0;
        assert_eq!(report.peak_f1, 2.0 * p / (p + 1.0));
        assert_eq!(report.best_threshold, f64::NEG_INFINITY);
    }

    #[test]
    fn the_six_record_two_type_example_peaks_at_threshold_four() {
        let inst = EvalInstance {
            scores: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            labels: vec![0, 0, 0, 0, 1, 2],
        };
        let report = evaluate(&[], &[inst], 1).unwrap();
        assert_eq!(report.pr_points.len(), 7);
        assert_eq!(report.peak_f1, 1.0);
        assert_eq!(report.best_threshold, 4.0);
        assert_eq!(report.precision_at_best, 1.0);
        assert_eq!(report.recall_avg_at_best, 1.0);
        assert_eq!(report.recall_per_type[&1], 1.0);
        assert_eq!(report.recall_per_type[&2], 1.0);
        assert_eq!(report.masked_count, 0);
    }

    #[test]
    fn peak_f1_ties_break_toward_the_larger_threshold() {
        let mk = |threshold, f1| PrPoint {
            threshold,
            precision: 0.0,
            recall_avg: 0.0,
            f1,
        };
        let points = vec![mk(1.0, 0.5), mk(2.0, 0.8), mk(3.0, 0.8), mk(4.0, 0.2)];
        assert_eq!(peak_f1(&points), Some((0.8, 3.0)));
        assert_eq!(peak_f1(&[]), None);
    }

    #[test]
    fn dominated_points_never_change_the_peak() {
        let mk = |threshold, f1| PrPoint {
            threshold,
            precision: 0.0,
            recall_avg: 0.0,
            f1,
        };
        let mut points = vec![mk(1.0, 0.7), mk(2.0, 0.9)];
        let before = peak_f1(&points);
        points.insert(1, mk(1.5, 0.3));
        assert_eq!(peak_f1(&points), before);
    }

    #[test]
    fn peak_f1_is_invariant_under_strictly_increasing_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..30 {
            let (instances, l) = random_instances(&mut rng);
            let (f_base, _) = peak_f1(&pr_curve(&instances, l).unwrap()).unwrap();
            let transformed: Vec<EvalInstance> = instances
                .iter()
                .map(|inst| EvalInstance {
                    scores: inst
                        .scores
                        .iter()
                        .map(|&s| if s.is_finite() { (0.5 * s).exp() + s } else { s })
                        .collect(),
                    labels: inst.labels.clone(),
                })
                .collect();
            let (f_t, _) = peak_f1(&pr_curve(&transformed, l).unwrap()).unwrap();
            assert_eq!(f_base, f_t);
        }
    }

    #[test]
    fn metrics_stay_in_the_unit_interval_and_recall_decreases_with_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let (instances, l) = random_instances(&mut rng);
            let points = pr_curve(&instances, l).unwrap();
            for w in points.windows(2) {
                assert!(w[0].threshold < w[1].threshold);
                assert!(w[0].recall_avg >= w[1].recall_avg, "recall must not rise");
            }
            for p in &points {
                for v in [p.precision, p.recall_avg, p.f1] {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn pooled_precision_is_not_monotone_in_the_threshold() {
        // Recall is monotone; precision is not, which is why the curve has
        // to be swept rather than bisected.
        let inst = EvalInstance {
            scores: vec![3.0, 2.0, 1.0],
            labels: vec![1, 0, 1],
        };
        let points = pr_curve(&[inst], 1).unwrap();
        let precisions: Vec<f64> = points.iter().map(|p| p.precision).collect();
        assert_eq!(precisions, vec![2.0 / 3.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn perturbing_masked_scores_leaves_the_report_unchanged() {
        let labels = vec![0, 1, 1, 0, 0, 0, 0, 1, 0, 0];
        let scores: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 - 2.0).collect();
        let l = 3;
        let base = evaluate(
            &[0.5, 0.2],
            &[EvalInstance {
                scores: scores.clone(),
                labels: labels.clone(),
            }],
            l,
        )
        .unwrap();
        assert_eq!(base.masked_count, 4);

        let mask = mask_post_anomaly(&labels, l);
        let mut perturbed = scores;
        for (s, &m) in perturbed.iter_mut().zip(&mask) {
            if m {
                *s = f64::NAN;
            }
        }
        let report = evaluate(
            &[0.5, 0.2],
            &[EvalInstance {
                scores: perturbed,
                labels,
            }],
            l,
        )
        .unwrap();
        assert_eq!(report, base);
    }

    #[test]
    fn records_before_the_first_window_count_as_permanent_misses() {
        // The first record is anomalous but scored -inf, so one of the two
        // type-1 instances can never be recalled.
        let inst = EvalInstance {
            scores: vec![f64::NEG_INFINITY, 0.1, 0.2, 5.0],
            labels: vec![1, 0, 0, 1],
        };
        let report = evaluate(&[], &[inst], 1).unwrap();
        assert!(report.pr_points.iter().all(|p| p.recall_avg <= 0.5));
        assert_eq!(report.peak_f1, 2.0 / 3.0);
        assert_eq!(report.best_threshold, 0.2);
    }

    #[test]
    fn degenerate_labels_name_the_missing_class() {
        let all_normal = EvalInstance {
            scores: vec![1.0, 2.0],
            labels: vec![0, 0],
        };
        assert!(matches!(
            pr_curve(&[all_normal], 1),
            Err(EvalError::MissingClass { class: "anomalous" })
        ));
        let all_anomalous = EvalInstance {
            scores: vec![1.0, 2.0],
            labels: vec![1, 1],
        };
        assert!(matches!(
            pr_curve(&[all_anomalous], 1),
            Err(EvalError::MissingClass { class: "normal" })
        ));
        // Normal records exist but all are masked away.
        let masked_normals = EvalInstance {
            scores: vec![1.0, 2.0, 3.0],
            labels: vec![1, 0, 0],
        };
        assert!(matches!(
            pr_curve(&[masked_normals], 4),
            Err(EvalError::MissingClass { class: "normal" })
        ));
    }

    #[test]
    fn bad_inputs_are_rejected_with_positions() {
        let inst = EvalInstance {
            scores: vec![1.0, f64::NAN, 2.0],
            labels: vec![0, 0, 1],
        };
        assert!(matches!(
            pr_curve(&[inst], 1),
            Err(EvalError::BadScore { seq: 0, pos: 1 })
        ));
        let short = EvalInstance {
            scores: vec![1.0],
            labels: vec![0, 1],
        };
        assert!(matches!(
            pr_curve(&[short], 1),
            Err(EvalError::LengthMismatch { seq: 0, labels: 2, scores: 1 })
        ));
        assert!(matches!(
            pr_curve(&[], 0),
            Err(EvalError::BadWindowLen)
        ));
    }

    #[test]
    fn fraction_above_median_handles_odd_and_even_references() {
        assert_eq!(fraction_above_median(&[1.0, 2.0, 3.0], &[3.0, 1.0]), Some(0.5));
        assert_eq!(fraction_above_median(&[4.0, 1.0, 2.0, 3.0], &[3.0]), Some(1.0));
        assert_eq!(fraction_above_median(&[], &[1.0]), None);
        assert_eq!(fraction_above_median(&[1.0], &[]), None);
    }

    #[test]
    fn aligned_populations_sit_near_one_half_and_separated_ones_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let draw = |rng: &mut ChaCha8Rng, mu: f64, n: usize| -> Vec<f64> {
            (0..n).map(|_| mu + rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let a = draw(&mut rng, 0.0, 1000);
        let b = draw(&mut rng, 0.0, 1000);
        let aligned = fraction_above_median(&a, &b).unwrap();
        assert!((aligned - 0.5).abs() < 0.06, "{aligned}");

        let high = draw(&mut rng, 10.0, 400);
        let low = draw(&mut rng, 0.0, 400);
        let separated = fraction_above_median(&high, &low).unwrap();
        assert!(separated < 0.05, "{separated}");
    }

    #[test]
    fn identical_populations_produce_identical_density_curves() {
        let scores: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let dists = ScoreDistributions {
            train_normal: scores.clone(),
            test_normal: scores.clone(),
            test_anomalous: scores,
        };
        let bundle = kde_curves(&dists).unwrap();
        assert_eq!(bundle.curves.len(), 3);
        assert_eq!(bundle.curves[0].1, bundle.curves[1].1);
        assert_eq!(bundle.curves[0].1, bundle.curves[2].1);
    }

    #[test]
    fn a_unit_mass_population_peaks_at_its_location() {
        let dists = ScoreDistributions {
            train_normal: vec![0.0; 25],
            ..ScoreDistributions::default()
        };
        let bundle = kde_curves(&dists).unwrap();
        assert_eq!(bundle.curves.len(), 1);
        let density = &bundle.curves[0].1;
        let argmax = (0..density.len())
            .max_by(|&a, &b| density[a].partial_cmp(&density[b]).unwrap())
            .unwrap();
        let step = bundle.grid[1] - bundle.grid[0];
        assert!(bundle.grid[argmax].abs() <= step, "peak at {}", bundle.grid[argmax]);
    }

    #[test]
    fn density_curves_integrate_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let samples: Vec<f64> = (0..500).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let grid = kde_grid(&[&samples]).unwrap();
        let density = kde(&samples, &grid);
        let mut integral = 0.0;
        for i in 1..grid.len() {
            integral += 0.5 * (density[i] + density[i - 1]) * (grid[i] - grid[i - 1]);
        }
        assert!((integral - 1.0).abs() < 0.03, "{integral}");
    }

    #[test]
    fn empty_populations_are_omitted_from_the_bundle() {
        let dists = ScoreDistributions {
            train_normal: vec![1.0, 2.0, 3.0],
            test_normal: vec![1.5, 2.5],
            test_anomalous: vec![],
        };
        let bundle = kde_curves(&dists).unwrap();
        assert_eq!(bundle.curves.len(), 2);
        assert!(bundle
            .curves
            .iter()
            .all(|(p, _)| *p != Population::TestAnomalous));
        assert!(kde_curves(&ScoreDistributions::default()).is_none());
    }

    #[test]
    fn reports_round_trip_through_json_with_infinite_thresholds() {
        let inst = EvalInstance {
            scores: vec![2.0; 5],
            labels: vec![0, 1, 0, 0, 2],
        };
        let report = evaluate(&[1.0, 2.0, 3.0], &[inst], 1).unwrap();
        assert_eq!(report.best_threshold, f64::NEG_INFINITY);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"-inf\""));
        let back: EvaluationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn csv_exports_have_the_documented_shape() {
        let dir = tempfile::tempdir().unwrap();
        let inst = EvalInstance {
            scores: vec![1.0, 4.0, 2.5],
            labels: vec![0, 1, 0],
        };
        let report = evaluate(&[0.5], &[inst], 1).unwrap();

        let pr_path = dir.path().join("pr_curve.csv");
        write_pr_curve_csv(&pr_path, &report.pr_points).unwrap();
        let text = std::fs::read_to_string(&pr_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "threshold,precision,recall_avg,f1");
        assert_eq!(lines.len(), 1 + report.pr_points.len());
        assert!(lines[1].starts_with("-inf,"));

        let d_path = dir.path().join("distributions.csv");
        write_distributions_csv(&d_path, &report.distributions).unwrap();
        let text = std::fs::read_to_string(&d_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "population,score");
        assert_eq!(lines[1], "train-normal,0.5");
        assert_eq!(lines.len(), 5);

        let k_path = dir.path().join("kde.csv");
        let bundle = kde_curves(&report.distributions).unwrap();
        write_kde_csv(&k_path, &bundle).unwrap();
        let text = std::fs::read_to_string(&k_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "population,x,density");
        assert_eq!(lines.len(), 1 + 3 * KDE_GRID_POINTS);
    }

    #[test]
    fn masked_counts_accumulate_across_sequences() {
        let a = EvalInstance {
            scores: vec![1.0, 2.0, 3.0, 4.0, 0.5],
            labels: vec![0, 1, 0, 0, 0],
        };
        let b = EvalInstance {
            scores: vec![1.0, 9.0, 3.0],
            labels: vec![0, 2, 0],
        };
        let report = evaluate(&[], &[a, b], 3).unwrap();
        // Two masked after the run in `a`, one after the run in `b`.
        assert_eq!(report.masked_count, 3);
    }
}
