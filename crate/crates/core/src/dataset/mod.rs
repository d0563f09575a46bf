//! Sequences, sliding windows, domain balancing, standardization, and
//! train/validation splitting.
//!
//! A [`Sequence`] is a `T x M` matrix of real features recorded at strictly
//! increasing integer timestamps, tagged with the domain it was collected
//! from. Detectors consume fixed-length sliding windows
//! ([`extract_windows`]); multi-domain training sets are rebalanced so every
//! domain contributes the same number of windows ([`balance_by_domain`]);
//! features are standardized with statistics fitted on training windows only
//! ([`fit_standardizer`]); and validation windows are held out per sequence
//! ([`train_val_split`]).

mod io;

pub use io::{
    load_dataset, read_labels_csv, read_trace_csv, write_labels_csv, write_trace_csv, Manifest,
    ManifestEntry,
};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sequence `{sequence}`: window length {window} exceeds sequence length {len}")]
    WindowTooLong {
        sequence: String,
        window: usize,
        len: usize,
    },
    #[error("window length must be at least 1")]
    ZeroWindow,
    #[error("window set is empty")]
    EmptyWindowSet,
    #[error("validation fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("sequence `{sequence}`: {reason}")]
    InvalidSequence { sequence: String, reason: String },
    #[error(
        "label range [{start}, {end}] invalid for sequence `{sequence}` of length {len}"
    )]
    LabelOutOfRange {
        sequence: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

/// Whether a sequence belongs to the training or the test split of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

/// A multivariate time series from one domain.
///
/// `labels`, when present, holds one integer per record: 0 for normal, `k >=
/// 1` for an anomalous record of event type `k`. Training traces are usually
/// unlabeled.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: String,
    pub domain_id: u32,
    pub timestamps: Vec<i64>,
    /// `T x M` feature matrix, one row per record.
    pub values: Array2<f64>,
    pub labels: Option<Vec<u32>>,
    pub role: Role,
}

impl Sequence {
    pub fn new(
        id: impl Into<String>,
        domain_id: u32,
        timestamps: Vec<i64>,
        values: Array2<f64>,
        labels: Option<Vec<u32>>,
        role: Role,
    ) -> Result<Self, DatasetError> {
        let id = id.into();
        let t = values.nrows();
        if t == 0 {
            return Err(DatasetError::InvalidSequence {
                sequence: id,
                reason: "no records".into(),
            });
        }
        if timestamps.len() != t {
            return Err(DatasetError::InvalidSequence {
                sequence: id,
                reason: format!("{} timestamps for {} records", timestamps.len(), t),
            });
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DatasetError::InvalidSequence {
                sequence: id,
                reason: "timestamps not strictly increasing".into(),
            });
        }
        if let Some(ref l) = labels {
            if l.len() != t {
                return Err(DatasetError::InvalidSequence {
                    sequence: id,
                    reason: format!("{} labels for {} records", l.len(), t),
                });
            }
        }
        Ok(Self {
            id,
            domain_id,
            timestamps,
            values,
            labels,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }
}

/// An inclusive range of anomalous record indices within one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRange {
    pub sequence_id: String,
    pub start: usize,
    pub end: usize,
    pub event_type: u32,
}

/// Expands inclusive ranges into a per-record label vector for a sequence of
/// length `len` (0 = normal).
pub fn ranges_to_labels(
    sequence_id: &str,
    len: usize,
    ranges: &[LabeledRange],
) -> Result<Vec<u32>, DatasetError> {
    let mut labels = vec![0u32; len];
    for r in ranges.iter().filter(|r| r.sequence_id == sequence_id) {
        if r.end < r.start || r.end >= len {
            return Err(DatasetError::LabelOutOfRange {
                sequence: sequence_id.to_string(),
                start: r.start,
                end: r.end,
                len,
            });
        }
        for l in &mut labels[r.start..=r.end] {
            *l = r.event_type;
        }
    }
    Ok(labels)
}

/// A collection of equally shaped `L x M` windows with provenance.
///
/// The parallel vectors `domain_ids`, `sequence_ids` and `end_indices`
/// record, for each window, the domain it came from, its source sequence,
/// and the record index of its last row within that sequence.
#[derive(Debug, Clone, Default)]
pub struct WindowSet {
    pub window_len: usize,
    pub n_features: usize,
    pub windows: Vec<Array2<f64>>,
    pub domain_ids: Vec<u32>,
    pub sequence_ids: Vec<String>,
    pub end_indices: Vec<usize>,
}

impl WindowSet {
    pub fn empty(window_len: usize, n_features: usize) -> Self {
        Self {
            window_len,
            n_features,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn push(&mut self, window: Array2<f64>, domain_id: u32, sequence_id: String, end: usize) {
        debug_assert_eq!(window.dim(), (self.window_len, self.n_features));
        self.windows.push(window);
        self.domain_ids.push(domain_id);
        self.sequence_ids.push(sequence_id);
        self.end_indices.push(end);
    }

    /// Appends all windows of `other`; shapes must match.
    pub fn extend(&mut self, other: WindowSet) {
        assert_eq!(self.window_len, other.window_len);
        assert_eq!(self.n_features, other.n_features);
        self.windows.extend(other.windows);
        self.domain_ids.extend(other.domain_ids);
        self.sequence_ids.extend(other.sequence_ids);
        self.end_indices.extend(other.end_indices);
    }

    /// New set containing the windows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> WindowSet {
        let mut out = WindowSet::empty(self.window_len, self.n_features);
        for &i in indices {
            out.push(
                self.windows[i].clone(),
                self.domain_ids[i],
                self.sequence_ids[i].clone(),
                self.end_indices[i],
            );
        }
        out
    }

    /// Sorted distinct domain ids present in the set.
    pub fn distinct_domains(&self) -> Vec<u32> {
        let mut d: Vec<u32> = self.domain_ids.clone();
        d.sort_unstable();
        d.dedup();
        d
    }
}

/// All sliding windows of length `window_len` over a sequence, in time
/// order: exactly `T - L + 1` windows, the one ending at record `t` holding
/// rows `t - L + 1 ..= t`.
pub fn extract_windows(seq: &Sequence, window_len: usize) -> Result<WindowSet, DatasetError> {
    if window_len == 0 {
        return Err(DatasetError::ZeroWindow);
    }
    let t = seq.len();
    if window_len > t {
        return Err(DatasetError::WindowTooLong {
            sequence: seq.id.clone(),
            window: window_len,
            len: t,
        });
    }
    let mut ws = WindowSet::empty(window_len, seq.n_features());
    for end in (window_len - 1)..t {
        let start = end + 1 - window_len;
        let window = seq.values.slice(ndarray::s![start..=end, ..]).to_owned();
        ws.push(window, seq.domain_id, seq.id.clone(), end);
    }
    Ok(ws)
}

/// Windows from every sequence of the slice, concatenated in input order.
pub fn extract_windows_all(
    seqs: &[Sequence],
    window_len: usize,
) -> Result<WindowSet, DatasetError> {
    let mut it = seqs.iter();
    let first = it.next().ok_or(DatasetError::EmptyWindowSet)?;
    let mut ws = extract_windows(first, window_len)?;
    for seq in it {
        if seq.n_features() != ws.n_features {
            return Err(DatasetError::InvalidSequence {
                sequence: seq.id.clone(),
                reason: format!(
                    "feature count {} differs from {}",
                    seq.n_features(),
                    ws.n_features
                ),
            });
        }
        ws.extend(extract_windows(seq, window_len)?);
    }
    Ok(ws)
}

/// Rebalances a window set so every domain contributes the same number of
/// windows, up to the remainder of the division.
///
/// The output cardinality equals the input cardinality. Over-represented
/// domains are randomly undersampled without replacement; under-represented
/// domains keep all their windows and are topped up by sampling with
/// replacement. Deterministic for a fixed seed.
pub fn balance_by_domain(ws: &WindowSet, seed: u64) -> Result<WindowSet, DatasetError> {
    if ws.is_empty() {
        return Err(DatasetError::EmptyWindowSet);
    }
    let domains = ws.distinct_domains();
    let total = ws.len();
    let base = total / domains.len();
    let rem = total % domains.len();

    let mut by_domain: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &d) in ws.domain_ids.iter().enumerate() {
        by_domain.entry(d).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(total);
    for (pos, d) in domains.iter().enumerate() {
        let target = base + usize::from(pos < rem);
        let idx = &by_domain[d];
        if idx.len() >= target {
            let mut picked = rand::seq::index::sample(&mut rng, idx.len(), target).into_vec();
            picked.sort_unstable();
            selected.extend(picked.into_iter().map(|p| idx[p]));
        } else {
            selected.extend_from_slice(idx);
            for _ in 0..(target - idx.len()) {
                selected.push(idx[rng.random_range(0..idx.len())]);
            }
        }
    }
    debug_assert_eq!(selected.len(), total);
    Ok(ws.select(&selected))
}

/// Per-feature affine normalization fitted on training windows.
///
/// Constant features get their standard deviation replaced by `floor` so the
/// transform stays defined; they map to exactly zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub floor: f64,
}

pub const STD_FLOOR: f64 = 1e-8;

/// Fits per-feature mean and population standard deviation over all records
/// of all training windows.
pub fn fit_standardizer(train: &WindowSet) -> Result<Standardizer, DatasetError> {
    if train.is_empty() {
        return Err(DatasetError::EmptyWindowSet);
    }
    let m = train.n_features;
    let count = (train.len() * train.window_len) as f64;
    let mut mean = vec![0.0; m];
    for w in &train.windows {
        for row in w.rows() {
            for (j, v) in row.iter().enumerate() {
                mean[j] += v;
            }
        }
    }
    for v in &mut mean {
        *v /= count;
    }
    let mut var = vec![0.0; m];
    for w in &train.windows {
        for row in w.rows() {
            for (j, v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / count).sqrt();
            if s < STD_FLOOR {
                log::warn!("constant feature: std floored to {STD_FLOOR}");
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    Ok(Standardizer {
        mean,
        std,
        floor: STD_FLOOR,
    })
}

impl Standardizer {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / std`, in place over an `L x M` window.
    pub fn transform_inplace(&self, window: &mut Array2<f64>) {
        for mut row in window.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }

    pub fn transform_window(&self, window: &Array2<f64>) -> Array2<f64> {
        let mut out = window.clone();
        self.transform_inplace(&mut out);
        out
    }

    pub fn inverse_window(&self, window: &Array2<f64>) -> Array2<f64> {
        let mut out = window.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}

/// Applies a fitted standardizer to every window of a set.
pub fn apply_standardizer(s: &Standardizer, ws: &WindowSet) -> WindowSet {
    let mut out = ws.clone();
    for w in &mut out.windows {
        s.transform_inplace(w);
    }
    out
}

/// Splits a window set into training and validation parts, stratified by
/// source sequence.
///
/// Each sequence contributes `round(fraction * n)` of its windows to
/// validation (clamped so at least one window stays in training). Sequences
/// with fewer than two windows go entirely to training with a warning. Both
/// outputs preserve the input order; their union is the input.
pub fn train_val_split(
    ws: &WindowSet,
    fraction: f64,
    seed: u64,
) -> Result<(WindowSet, WindowSet), DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::BadFraction(fraction));
    }
    if ws.is_empty() {
        return Err(DatasetError::EmptyWindowSet);
    }
    let mut by_seq: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, sid) in ws.sequence_ids.iter().enumerate() {
        by_seq.entry(sid).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; ws.len()];
    for (sid, idx) in &by_seq {
        if idx.len() < 2 {
            log::warn!("sequence `{sid}` contributes {} window(s); all go to training", idx.len());
            continue;
        }
        let n_val = ((fraction * idx.len() as f64).round() as usize).min(idx.len() - 1);
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        for &i in shuffled.iter().take(n_val) {
            is_val[i] = true;
        }
    }
    let train_idx: Vec<usize> = (0..ws.len()).filter(|&i| !is_val[i]).collect();
    let val_idx: Vec<usize> = (0..ws.len()).filter(|&i| is_val[i]).collect();
    Ok((ws.select(&train_idx), ws.select(&val_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn seq_with(values: Array2<f64>, id: &str, domain: u32) -> Sequence {
        let t = values.nrows();
        Sequence::new(id, domain, (0..t as i64).collect(), values, None, Role::Train).unwrap()
    }

    fn ramp_sequence(t: usize, m: usize, id: &str, domain: u32) -> Sequence {
        let values = Array2::from_shape_fn((t, m), |(i, j)| i as f64 + 1000.0 * j as f64);
        seq_with(values, id, domain)
    }

    #[test]
    fn window_of_length_one_yields_every_record() {
        let seq = ramp_sequence(5, 2, "s", 0);
        let ws = extract_windows(&seq, 1).unwrap();
        assert_eq!(ws.len(), 5);
        for (i, w) in ws.windows.iter().enumerate() {
            assert_eq!(w.dim(), (1, 2));
            assert_eq!(w[[0, 0]], i as f64);
        }
    }

    #[test]
    fn full_length_window_is_the_sequence() {
        let seq = ramp_sequence(5, 2, "s", 0);
        let ws = extract_windows(&seq, 5).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws.windows[0], seq.values);
        assert_eq!(ws.end_indices[0], 4);
    }

    #[test]
    fn sliding_windows_match_direct_slices() {
        // Oracle: slice the value matrix directly for every offset.
        let seq = ramp_sequence(100, 3, "s", 0);
        let ws = extract_windows(&seq, 20).unwrap();
        assert_eq!(ws.len(), 81);
        for (k, w) in ws.windows.iter().enumerate() {
            let expect = seq.values.slice(ndarray::s![k..k + 20, ..]).to_owned();
            assert_eq!(*w, expect);
            assert_eq!(ws.end_indices[k], k + 19);
        }
    }

    #[test]
    fn window_longer_than_sequence_is_rejected() {
        let seq = ramp_sequence(4, 1, "short", 0);
        let err = extract_windows(&seq, 5).unwrap_err();
        assert!(matches!(err, DatasetError::WindowTooLong { .. }));
        assert!(err.to_string().contains("short"));
    }

    fn ws_with_counts(counts: &[(u32, usize)]) -> WindowSet {
        let mut ws = WindowSet::empty(1, 1);
        for &(d, n) in counts {
            for k in 0..n {
                ws.push(array![[d as f64 * 100.0 + k as f64]], d, format!("seq{d}"), k);
            }
        }
        ws
    }

    fn domain_counts(ws: &WindowSet) -> BTreeMap<u32, usize> {
        let mut c = BTreeMap::new();
        for &d in &ws.domain_ids {
            *c.entry(d).or_insert(0) += 1;
        }
        c
    }

    #[test]
    fn balanced_input_is_left_balanced() {
        let ws = ws_with_counts(&[(0, 10), (1, 10)]);
        let out = balance_by_domain(&ws, 7).unwrap();
        assert_eq!(domain_counts(&out), BTreeMap::from([(0, 10), (1, 10)]));
    }

    #[test]
    fn skewed_domains_are_evened_out() {
        // Counting oracle: {A:18, B:2} over 20 windows -> {10, 10}.
        let ws = ws_with_counts(&[(0, 18), (1, 2)]);
        let out = balance_by_domain(&ws, 3).unwrap();
        assert_eq!(out.len(), 20);
        assert_eq!(domain_counts(&out), BTreeMap::from([(0, 10), (1, 10)]));
    }

    #[test]
    fn three_equal_domains_stay_put() {
        let ws = ws_with_counts(&[(0, 7), (1, 7), (2, 7)]);
        let out = balance_by_domain(&ws, 0).unwrap();
        assert_eq!(
            domain_counts(&out),
            BTreeMap::from([(0, 7), (1, 7), (2, 7)])
        );
    }

    #[test]
    fn balancing_is_deterministic_and_draws_from_input() {
        let ws = ws_with_counts(&[(0, 13), (1, 4), (2, 9)]);
        let a = balance_by_domain(&ws, 42).unwrap();
        let b = balance_by_domain(&ws, 42).unwrap();
        for (x, y) in a.windows.iter().zip(&b.windows) {
            assert_eq!(x, y);
        }
        // Every emitted window is one of the input windows.
        let inputs: Vec<f64> = ws.windows.iter().map(|w| w[[0, 0]]).collect();
        for w in &a.windows {
            assert!(inputs.contains(&w[[0, 0]]));
        }
    }

    #[test]
    fn remainder_spreads_at_most_one_extra() {
        let ws = ws_with_counts(&[(0, 5), (1, 9), (2, 6)]);
        let out = balance_by_domain(&ws, 1).unwrap();
        let counts = domain_counts(&out);
        assert_eq!(out.len(), 20);
        let max = counts.values().max().unwrap();
        let min = counts.values().min().unwrap();
        assert!(max - min <= 1, "counts {counts:?}");
    }

    #[test]
    fn standardizer_hand_case() {
        // Values {0, 2}: mean 1, population std 1, transformed {-1, +1}.
        let mut ws = WindowSet::empty(1, 1);
        ws.push(array![[0.0]], 0, "s".into(), 0);
        ws.push(array![[2.0]], 0, "s".into(), 1);
        let s = fit_standardizer(&ws).unwrap();
        assert!((s.mean[0] - 1.0).abs() < 1e-12);
        assert!((s.std[0] - 1.0).abs() < 1e-12);
        let out = apply_standardizer(&s, &ws);
        assert_eq!(out.windows[0][[0, 0]], -1.0);
        assert_eq!(out.windows[1][[0, 0]], 1.0);
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let mut ws = WindowSet::empty(2, 2);
        for k in 0..4 {
            ws.push(array![[3.0, k as f64], [3.0, k as f64 + 0.5]], 0, "s".into(), k + 1);
        }
        let s = fit_standardizer(&ws).unwrap();
        assert_eq!(s.std[0], STD_FLOOR);
        let out = apply_standardizer(&s, &ws);
        for w in &out.windows {
            assert_eq!(w[[0, 0]], 0.0);
            assert_eq!(w[[1, 0]], 0.0);
        }
    }

    #[test]
    fn transformed_training_data_has_zero_mean_unit_std() {
        let seq = ramp_sequence(50, 3, "s", 0);
        let ws = extract_windows(&seq, 4).unwrap();
        let s = fit_standardizer(&ws).unwrap();
        let out = apply_standardizer(&s, &ws);
        let refit = fit_standardizer(&out).unwrap();
        for j in 0..3 {
            assert!(refit.mean[j].abs() < 1e-6);
            assert!((refit.std[j] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn split_counts_single_sequence() {
        let seq = ramp_sequence(10, 1, "s", 0);
        let ws = extract_windows(&seq, 1).unwrap();
        let (train, val) = train_val_split(&ws, 0.2, 11).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
    }

    #[test]
    fn split_is_stratified_per_sequence() {
        let mut ws = extract_windows(&ramp_sequence(10, 1, "a", 0), 1).unwrap();
        ws.extend(extract_windows(&ramp_sequence(10, 1, "b", 1), 1).unwrap());
        let (_, val) = train_val_split(&ws, 0.2, 5).unwrap();
        let counts: Vec<usize> = ["a", "b"]
            .iter()
            .map(|s| val.sequence_ids.iter().filter(|x| x == s).count())
            .collect();
        assert_eq!(counts, vec![2, 2]);
    }

    #[test]
    fn tiny_sequences_go_to_training() {
        let mut ws = extract_windows(&ramp_sequence(10, 1, "big", 0), 1).unwrap();
        ws.extend(extract_windows(&ramp_sequence(1, 1, "tiny", 0), 1).unwrap());
        let (train, val) = train_val_split(&ws, 0.2, 5).unwrap();
        assert!(val.sequence_ids.iter().all(|s| s != "tiny"));
        assert!(train.sequence_ids.iter().any(|s| s == "tiny"));
    }

    #[test]
    fn split_is_deterministic() {
        let ws = extract_windows(&ramp_sequence(40, 2, "s", 0), 3).unwrap();
        let (t1, v1) = train_val_split(&ws, 0.2, 123).unwrap();
        let (t2, v2) = train_val_split(&ws, 0.2, 123).unwrap();
        assert_eq!(t1.end_indices, t2.end_indices);
        assert_eq!(v1.end_indices, v2.end_indices);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ws = extract_windows(&ramp_sequence(10, 1, "s", 0), 1).unwrap();
        assert!(matches!(
            train_val_split(&ws, 0.0, 0),
            Err(DatasetError::BadFraction(_))
        ));
        assert!(matches!(
            train_val_split(&ws, 1.0, 0),
            Err(DatasetError::BadFraction(_))
        ));
    }

    proptest! {
        #[test]
        fn windowing_round_trip(t in 1usize..60, l in 1usize..20, m in 1usize..4) {
            prop_assume!(l <= t);
            let seq = ramp_sequence(t, m, "s", 0);
            let ws = extract_windows(&seq, l).unwrap();
            prop_assert_eq!(ws.len(), t - l + 1);
            // Last rows of consecutive windows reconstruct rows L-1..T-1.
            for (k, w) in ws.windows.iter().enumerate() {
                let last = w.row(l - 1);
                let orig = seq.values.row(l - 1 + k);
                prop_assert_eq!(last, orig);
            }
        }

        #[test]
        fn balance_preserves_count_and_provenance(
            counts in proptest::collection::vec(1usize..12, 1..5),
            seed in 0u64..1000,
        ) {
            let spec: Vec<(u32, usize)> = counts.iter().enumerate()
                .map(|(d, &n)| (d as u32, n)).collect();
            let ws = ws_with_counts(&spec);
            let out = balance_by_domain(&ws, seed).unwrap();
            prop_assert_eq!(out.len(), ws.len());
            let dc = domain_counts(&out);
            let max = dc.values().max().unwrap();
            let min = dc.values().min().unwrap();
            prop_assert!(max - min <= 1);
            // Multiset of emitted (domain, end) pairs is drawn from the input.
            for (d, e) in out.domain_ids.iter().zip(&out.end_indices) {
                prop_assert!(ws.domain_ids.iter().zip(&ws.end_indices).any(|(dd, ee)| dd == d && ee == e));
            }
        }

        #[test]
        fn standardize_round_trip(vals in proptest::collection::vec(-100.0f64..100.0, 6..40)) {
            let n = vals.len() / 2;
            prop_assume!(n >= 2);
            let values = Array2::from_shape_fn((n, 2), |(i, j)| vals[2 * i + j]);
            let seq = seq_with(values, "s", 0);
            let ws = extract_windows(&seq, 2).unwrap();
            let s = fit_standardizer(&ws).unwrap();
            for w in &ws.windows {
                let back = s.inverse_window(&s.transform_window(w));
                for (a, b) in back.iter().zip(w.iter()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn split_partitions_input(t in 4usize..50, seed in 0u64..100) {
            let ws = extract_windows(&ramp_sequence(t, 1, "s", 0), 1).unwrap();
            let (train, val) = train_val_split(&ws, 0.2, seed).unwrap();
            prop_assert_eq!(train.len() + val.len(), ws.len());
            let mut all: Vec<usize> = train.end_indices.iter().chain(&val.end_indices).copied().collect();
            all.sort_unstable();
            let expect: Vec<usize> = (0..t).collect();
            prop_assert_eq!(all, expect);
        }
    }
}
