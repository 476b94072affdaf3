//! Table and plot-data emitters. Tables are plain CSV; plot data is
//! (x, y, series) CSV for external rendering. No plotting happens here.

use std::io::Write;
use std::path::Path;

use super::{MetricReport, TestResult};

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Per-model metric table: model, accuracy, precision, recall, f1, auc,
/// mean_delay, missed.
pub fn write_metrics_table(
    path: &Path,
    rows: &[(String, MetricReport)],
) -> std::io::Result<()> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "model,accuracy,precision,recall,f1,auc,mean_delay,missed")?;
    for (name, m) in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            name,
            fmt(m.accuracy),
            fmt(m.precision),
            fmt(m.recall),
            fmt(m.f1),
            fmt_opt(m.auc),
            fmt_opt(m.mean_delay),
            m.missed
        )?;
    }
    Ok(())
}

/// Pairwise comparison table: comparison, statistic, dof, p_value,
/// effect_size.
pub fn write_comparison_table(
    path: &Path,
    rows: &[(String, TestResult)],
) -> std::io::Result<()> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "comparison,t_statistic,dof,p_value,effect_size")?;
    for (name, r) in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            name,
            fmt(r.statistic),
            fmt(r.dof),
            fmt(r.p_value),
            fmt_opt(r.effect_size)
        )?;
    }
    Ok(())
}

/// Component-contribution table: variant, f1, delay.
pub fn write_ablation_table(
    path: &Path,
    rows: &[(String, f64, Option<f64>)],
) -> std::io::Result<()> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "variant,f1,delay")?;
    for (variant, f1, delay) in rows {
        writeln!(out, "{},{},{}", variant, fmt(*f1), fmt_opt(*delay))?;
    }
    Ok(())
}

/// Long-format plot data: one (x, y, series) row per point.
pub fn write_plot_data(
    path: &Path,
    series: &[(String, Vec<(f64, f64)>)],
) -> std::io::Result<()> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "x,y,series")?;
    for (name, points) in series {
        for (x, y) in points {
            writeln!(out, "{},{},{}", fmt(*x), fmt(*y), name)?;
        }
    }
    Ok(())
}

/// Histogram series (bin center, density) of `scores` split by binary label,
/// for score-distribution figures.
pub fn score_distribution_series(
    labels: &[u8],
    scores: &[f64],
    bins: usize,
) -> Vec<(String, Vec<(f64, f64)>)> {
    assert_eq!(labels.len(), scores.len());
    assert!(bins >= 1);
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for &s in scores {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    if !lo.is_finite() || lo >= hi {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut out = Vec::new();
    for (class, name) in [(0u8, "nominal"), (1u8, "anomalous")] {
        let class_scores: Vec<f64> = labels
            .iter()
            .zip(scores)
            .filter(|(&y, _)| y == class)
            .map(|(_, &s)| s)
            .collect();
        if class_scores.is_empty() {
            continue;
        }
        let mut counts = vec![0usize; bins];
        for &s in &class_scores {
            let mut b = ((s - lo) / width) as usize;
            if b >= bins {
                b = bins - 1;
            }
            counts[b] += 1;
        }
        let n = class_scores.len() as f64;
        let points = counts
            .iter()
            .enumerate()
            .map(|(b, &c)| {
                let center = lo + (b as f64 + 0.5) * width;
                (center, c as f64 / (n * width))
            })
            .collect();
        out.push((name.to_string(), points));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_round_trip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let m = MetricReport::from_confusion(8, 1, 9, 2);
        let path = dir.path().join("metrics.csv");
        write_metrics_table(&path, &[("full".into(), m)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "model,accuracy,precision,recall,f1,auc,mean_delay,missed"
        );
        assert!(lines.next().unwrap().starts_with("full,0.85,"));

        let abl = dir.path().join("ablation.csv");
        write_ablation_table(
            &abl,
            &[("full".into(), 0.93, Some(2.3)), ("no_gat".into(), 0.87, None)],
        )
        .unwrap();
        let text = std::fs::read_to_string(&abl).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("no_gat,0.87,"));
    }

    #[test]
    fn score_histogram_is_a_density() {
        let labels = vec![0, 0, 0, 1, 1, 1];
        let scores = vec![0.1, 0.2, 0.15, 0.8, 0.9, 0.85];
        let series = score_distribution_series(&labels, &scores, 8);
        assert_eq!(series.len(), 2);
        for (_, points) in &series {
            let width = points[1].0 - points[0].0;
            let mass: f64 = points.iter().map(|(_, y)| y * width).sum();
            assert!((mass - 1.0).abs() < 1e-9, "mass {mass}");
        }
    }
}
