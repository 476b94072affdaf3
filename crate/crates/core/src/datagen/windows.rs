//! Sliding windows, device-level splits and feature normalization.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DatagenError, TraceRow};
use crate::rng::{global_stream, StreamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Window starts and any-step labels for one device trace. Per-step labels
/// stay on the rows for the per-step classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceWindows {
    pub window: usize,
    pub stride: usize,
    pub starts: Vec<usize>,
    /// 1 iff any contained step is labeled anomalous.
    pub labels: Vec<u8>,
}

/// Overlapping sliding windows over one trace. The window label follows the
/// any-step rule.
pub fn make_windows(
    rows: &[TraceRow],
    window: usize,
    stride: usize,
) -> Result<DeviceWindows, DatagenError> {
    if window == 0 || stride == 0 || rows.len() < window {
        return Err(DatagenError::BadWindowSpec {
            window,
            stride,
            len: rows.len(),
        });
    }
    let mut starts = Vec::new();
    let mut labels = Vec::new();
    let mut start = 0usize;
    while start + window <= rows.len() {
        starts.push(start);
        let label = rows[start..start + window].iter().any(|r| r.label != 0);
        labels.push(u8::from(label));
        start += stride;
    }
    Ok(DeviceWindows {
        window,
        stride,
        starts,
        labels,
    })
}

/// Dense feature matrix for one window: `window x (F + 4 + 5)` laid out as
/// physical features, drift inputs, time-aware features.
pub fn window_matrix(rows: &[TraceRow], start: usize, window: usize) -> Array2<f64> {
    let f = rows[start].x.len();
    let mut m = Array2::zeros((window, f + 9));
    for (wi, row) in rows[start..start + window].iter().enumerate() {
        for (c, &v) in row.x.iter().enumerate() {
            m[(wi, c)] = v;
        }
        for (c, &v) in row.d.iter().enumerate() {
            m[(wi, f + c)] = v;
        }
        for (c, &v) in row.time_features.iter().enumerate() {
            m[(wi, f + 4 + c)] = v;
        }
    }
    m
}

/// Deterministic shuffled partition of devices into train/val/test. Counts
/// use largest-remainder rounding, adjusted so every split is non-empty.
pub fn split_by_device(
    device_ids: &[usize],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<Split>, DatagenError> {
    let n = device_ids.len();
    if n < 3 {
        return Err(DatagenError::TooFewDevices { need: 3, got: n });
    }
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| f <= 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatagenError::InvalidConfig(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }

    let raw: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    // Hand out remainders by largest fractional part, ties in split order.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut cursor = 0;
    while assigned < n {
        counts[order[cursor % 3]] += 1;
        assigned += 1;
        cursor += 1;
    }
    // Non-emptiness overrides the exact ratio.
    for i in 0..3 {
        while counts[i] == 0 {
            let largest = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[largest] -= 1;
            counts[i] += 1;
        }
    }

    let mut shuffled: Vec<usize> = (0..n).collect();
    let mut rng = global_stream(seed, StreamKind::Split);
    // Fisher-Yates with the seeded stream.
    for i in (1..n).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        shuffled.swap(i, j);
    }

    let mut assignment = vec![Split::Train; n];
    for (pos, &idx) in shuffled.iter().enumerate() {
        assignment[idx] = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(assignment)
}

/// Per-feature normalization statistics fitted on training rows only.
/// Layout: physical features, then [spacing, drift, offset], then the four
/// continuous time features. Binary flags are excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn continuous_features(row: &TraceRow) -> Vec<f64> {
    let mut v = row.x.clone();
    v.extend_from_slice(&row.d[..3]);
    v.extend_from_slice(&row.time_features[..4]);
    v
}

/// Fit z-score statistics (population standard deviation) on training rows.
pub fn normalize_fit(train_rows: &[&TraceRow], n_features: usize) -> NormStats {
    let mut names: Vec<String> = (1..=n_features).map(|i| format!("x_{i}")).collect();
    names.extend(
        ["dt", "delta", "eta", "timestamp_drift", "drift_rate", "jitter_ms", "ntp_offset_ms"]
            .iter()
            .map(|s| s.to_string()),
    );
    let dim = names.len();
    let n = train_rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for row in train_rows {
        for (i, v) in continuous_features(row).into_iter().enumerate() {
            mean[i] += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for row in train_rows {
        for (i, v) in continuous_features(row).into_iter().enumerate() {
            let d = v - mean[i];
            var[i] += d * d;
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    NormStats { names, mean, std }
}

impl NormStats {
    /// z-score one feature by index; a zero-spread feature passes through
    /// centered but unscaled.
    fn apply_one(&self, i: usize, v: f64) -> f64 {
        if self.std[i] == 0.0 {
            v - self.mean[i]
        } else {
            (v - self.mean[i]) / self.std[i]
        }
    }
}

/// Apply fitted statistics, returning transformed rows. Binary columns
/// (rollover state and flag) pass through.
pub fn normalize_apply(rows: &[TraceRow], stats: &NormStats) -> Vec<TraceRow> {
    let f = stats.names.len() - 7;
    rows.iter()
        .map(|row| {
            let mut out = row.clone();
            for (i, v) in row.x.iter().enumerate() {
                out.x[i] = stats.apply_one(i, *v);
            }
            for k in 0..3 {
                out.d[k] = stats.apply_one(f + k, row.d[k]);
            }
            for k in 0..4 {
                out.time_features[k] = stats.apply_one(f + 3 + k, row.time_features[k]);
            }
            out
        })
        .collect()
}
