//! Evaluation suite: classification metrics, rank-based AUC, detection
//! delay, Welch's t-test, Cohen's d, percentile bootstrap confidence
//! intervals and the Kruskal-Wallis H test.

pub mod report;
pub mod special;

use serde::{Deserialize, Serialize};

pub use special::{chi_square_sf, t_two_tailed_p};

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("inputs have mismatched lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("labels must contain both classes")]
    SingleClass,
    #[error("sample too small: need at least {need}, got {got}")]
    TooSmall { need: usize, got: usize },
    #[error("both variances are zero; statistic undefined")]
    ZeroVariance,
    #[error("degenerate data: every value is identical")]
    AllEqual,
    #[error("need at least {need} groups, got {got}")]
    TooFewGroups { need: usize, got: usize },
    #[error("group {0} is empty")]
    EmptyGroup(usize),
}

/// Classification and detection summary. Every rate is recomputable from the
/// confusion counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
    /// Mean steps between onset and first detection, over detected cases.
    pub mean_delay: Option<f64>,
    /// Cases where no detection fired at or after the onset. Never folded
    /// into `mean_delay`.
    pub missed: u64,
    /// False when the zero-denominator convention forced precision to 0.
    pub precision_defined: bool,
    /// False when the zero-denominator convention forced recall to 0.
    pub recall_defined: bool,
}

impl MetricReport {
    pub fn from_confusion(tp: u64, fp: u64, tn: u64, fnn: u64) -> Self {
        let total = (tp + fp + tn + fnn) as f64;
        let accuracy = if total > 0.0 {
            (tp + tn) as f64 / total
        } else {
            0.0
        };
        let precision_defined = tp + fp > 0;
        let recall_defined = tp + fnn > 0;
        let precision = if precision_defined {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if recall_defined {
            tp as f64 / (tp + fnn) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            accuracy,
            precision,
            recall,
            f1,
            auc: None,
            true_pos: tp,
            false_pos: fp,
            true_neg: tn,
            false_neg: fnn,
            mean_delay: None,
            missed: 0,
            precision_defined,
            recall_defined,
        }
    }
}

/// Result of a hypothesis test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// Degrees of freedom; fractional for Welch-Satterthwaite.
    pub dof: f64,
    pub p_value: f64,
    pub effect_size: Option<f64>,
}

/// Confusion-count metrics over binary labels and predictions.
pub fn classification_metrics(labels: &[u8], predictions: &[u8]) -> Result<MetricReport, StatsError> {
    if labels.is_empty() {
        return Err(StatsError::Empty);
    }
    if labels.len() != predictions.len() {
        return Err(StatsError::LengthMismatch(labels.len(), predictions.len()));
    }
    let (mut tp, mut fp, mut tn, mut fnn) = (0u64, 0u64, 0u64, 0u64);
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y != 0, p != 0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fnn += 1,
        }
    }
    Ok(MetricReport::from_confusion(tp, fp, tn, fnn))
}

/// Rank-based (Mann-Whitney) AUC with midrank tie handling.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64, StatsError> {
    if labels.len() != scores.len() {
        return Err(StatsError::LengthMismatch(labels.len(), scores.len()));
    }
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::SingleClass);
    }
    let ranks = midranks(scores);
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&y, _)| y != 0)
        .map(|(_, &r)| r)
        .sum();
    let n_pos = n_pos as f64;
    let n_neg = n_neg as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// 1-based midranks of `values` (ties share the average rank).
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("NaN in ranks"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Steps from `onset` to the first detection fired at or after it.
/// `None` means the case was missed; callers report misses separately.
pub fn detection_delay(onset: usize, fired_steps: &[usize]) -> Option<f64> {
    fired_steps
        .iter()
        .filter(|&&s| s >= onset)
        .min()
        .map(|&s| (s - onset) as f64)
}

/// Mean delay over detected cases plus the number of misses.
pub fn mean_detection_delay(cases: &[(usize, Vec<usize>)]) -> (Option<f64>, u64) {
    let mut delays = Vec::new();
    let mut missed = 0u64;
    for (onset, fired) in cases {
        match detection_delay(*onset, fired) {
            Some(d) => delays.push(d),
            None => missed += 1,
        }
    }
    let mean = if delays.is_empty() {
        None
    } else {
        Some(delays.iter().sum::<f64>() / delays.len() as f64)
    };
    (mean, missed)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (divisor n - 1).
fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Two-tailed Welch's t-test for unequal variances, with the
/// Welch-Satterthwaite degrees of freedom and an equal-n pooled Cohen's d as
/// the effect size.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(StatsError::TooSmall { need: 2, got: s.len() });
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a), sample_variance(b));
    if va == 0.0 && vb == 0.0 {
        if ma == mb {
            // Identical constant samples: no evidence of difference.
            return Ok(TestResult {
                statistic: 0.0,
                dof: na + nb - 2.0,
                p_value: 1.0,
                effect_size: Some(0.0),
            });
        }
        return Err(StatsError::ZeroVariance);
    }
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    let p = special::t_two_tailed_p(t, dof);
    let d = cohens_d(ma, va.sqrt(), mb, vb.sqrt()).ok();
    Ok(TestResult {
        statistic: t,
        dof,
        p_value: p,
        effect_size: d,
    })
}

/// Cohen's d with the equal-n pooled standard deviation
/// `sqrt((s_a^2 + s_b^2) / 2)`.
pub fn cohens_d(mean_a: f64, std_a: f64, mean_b: f64, std_b: f64) -> Result<f64, StatsError> {
    if std_a == 0.0 && std_b == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let pooled = ((std_a * std_a + std_b * std_b) / 2.0).sqrt();
    Ok((mean_b - mean_a) / pooled)
}

/// Cohen's d with the sample-size-weighted pooled standard deviation.
pub fn cohens_d_weighted(
    mean_a: f64,
    std_a: f64,
    n_a: usize,
    mean_b: f64,
    std_b: f64,
    n_b: usize,
) -> Result<f64, StatsError> {
    if std_a == 0.0 && std_b == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    if n_a < 2 || n_b < 2 {
        return Err(StatsError::TooSmall { need: 2, got: n_a.min(n_b) });
    }
    let (na, nb) = (n_a as f64, n_b as f64);
    let pooled =
        (((na - 1.0) * std_a * std_a + (nb - 1.0) * std_b * std_b) / (na + nb - 2.0)).sqrt();
    Ok((mean_b - mean_a) / pooled)
}

/// Percentile bootstrap confidence interval for the sample mean.
/// Deterministic for a fixed seed.
pub fn bootstrap_ci(
    sample: &[f64],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), StatsError> {
    if sample.is_empty() {
        return Err(StatsError::Empty);
    }
    if sample.len() < 2 {
        return Err(StatsError::TooSmall { need: 2, got: sample.len() });
    }
    if n_resamples < 100 {
        return Err(StatsError::TooSmall { need: 100, got: n_resamples });
    }
    assert!(level > 0.0 && level < 1.0, "level must be in (0, 1)");
    let mut rng = crate::rng::global_stream(seed, crate::rng::StreamKind::Bootstrap);
    let n = sample.len();
    let mut means = Vec::with_capacity(n_resamples);
    for _ in 0..n_resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            let idx = rand::Rng::random_range(&mut rng, 0..n);
            acc += sample[idx];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("NaN in bootstrap means"));
    let alpha = 1.0 - level;
    Ok((quantile_sorted(&means, alpha / 2.0), quantile_sorted(&means, 1.0 - alpha / 2.0)))
}

/// Linear-interpolation quantile of an ascending-sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Kruskal-Wallis H test with midrank ties and tie correction. The p-value
/// comes from the chi-square approximation with k - 1 degrees of freedom;
/// the effect size is eta^2 = (H - k + 1) / (n - k).
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups { need: 2, got: groups.len() });
    }
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(StatsError::EmptyGroup(i));
        }
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    if n < 5 {
        return Err(StatsError::TooSmall { need: 5, got: n });
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    if pooled.iter().all(|&x| x == pooled[0]) {
        return Err(StatsError::AllEqual);
    }
    let ranks = midranks(&pooled);
    let nf = n as f64;
    let mut h = 0.0;
    let mut offset = 0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        h += r * r / g.len() as f64;
        offset += g.len();
    }
    h = 12.0 / (nf * (nf + 1.0)) * h - 3.0 * (nf + 1.0);

    // Tie correction over the pooled sample.
    let mut sorted = pooled.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in groups"));
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let correction = 1.0 - tie_sum / (nf * nf * nf - nf);
    // correction == 0 only when every value ties, handled above.
    h /= correction;

    let k = groups.len() as f64;
    let dof = k - 1.0;
    let p = special::chi_square_sf(h.max(0.0), dof);
    let eta_sq = (h - k + 1.0) / (nf - k);
    Ok(TestResult {
        statistic: h,
        dof,
        p_value: p,
        effect_size: Some(eta_sq),
    })
}
