//! Evaluation kernels: ligand RMSD, centroid distance, pocket-center
//! distance (DCC), and the percentile / %-below summary table.

use thiserror::Error;

use crate::geom::{self, Vec3};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("coordinate count mismatch: {pred} predicted vs {truth} true")]
    CountMismatch { pred: usize, truth: usize },
    #[error("no complexes to aggregate")]
    Empty,
}

/// Root-mean-square deviation over atoms, no alignment; poses live in the
/// shared receptor frame.
pub fn ligand_rmsd(pred: &[Vec3], truth: &[Vec3]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricError::CountMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let ss: f64 = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| {
            let d = geom::sub(*a, *b);
            geom::dot(d, d)
        })
        .sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// Distance between the two pose centroids.
pub fn centroid_distance(pred: &[Vec3], truth: &[Vec3]) -> Result<f64, MetricError> {
    if pred.is_empty() || truth.is_empty() {
        return Err(MetricError::CountMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    Ok(geom::dist(geom::centroid(pred), geom::centroid(truth)))
}

/// Distance between predicted and native pocket centers.
pub fn dcc(pred_center: Vec3, native_center: Vec3) -> f64 {
    geom::dist(pred_center, native_center)
}

#[derive(Clone, Copy, Debug)]
pub struct PerComplexMetrics {
    pub rmsd: f64,
    pub centroid: f64,
    pub dcc: f64,
}

#[derive(Clone, Debug)]
pub struct MetricSummary {
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub mean: f64,
    /// Fraction strictly below each threshold, in threshold order.
    pub below: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub n: usize,
    pub rmsd: MetricSummary,
    pub centroid: MetricSummary,
    pub dcc: MetricSummary,
}

/// Linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    assert!((0.0..=100.0).contains(&p));
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}

fn fraction_below(values: &[f64], t: f64) -> f64 {
    values.iter().filter(|&&v| v < t).count() as f64 / values.len() as f64
}

fn summarize(values: &[f64], thresholds: &[f64]) -> MetricSummary {
    // aggregate over a sorted copy so the report is independent of input
    // order down to the last bit
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    MetricSummary {
        p25: percentile(&v, 25.0),
        p50: percentile(&v, 50.0),
        p75: percentile(&v, 75.0),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        below: thresholds.iter().map(|&t| (t, fraction_below(&v, t))).collect(),
    }
}

pub fn metric_table(per: &[PerComplexMetrics]) -> Result<MetricReport, MetricError> {
    if per.is_empty() {
        return Err(MetricError::Empty);
    }
    let rmsd: Vec<f64> = per.iter().map(|m| m.rmsd).collect();
    let cen: Vec<f64> = per.iter().map(|m| m.centroid).collect();
    let d: Vec<f64> = per.iter().map(|m| m.dcc).collect();
    Ok(MetricReport {
        n: per.len(),
        rmsd: summarize(&rmsd, &[2.0, 5.0]),
        centroid: summarize(&cen, &[2.0, 5.0]),
        dcc: summarize(&d, &[3.0, 4.0, 5.0]),
    })
}

/// Aligned text table: percentiles, mean, and %-below columns per metric.
pub fn render_table(report: &MetricReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("n={}\n", report.n));
    s.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>8} {:>8}  {}\n",
        "metric", "p25", "p50", "p75", "mean", "% below"
    ));
    for (name, m) in [
        ("rmsd", &report.rmsd),
        ("centroid", &report.centroid),
        ("dcc", &report.dcc),
    ] {
        let below: Vec<String> = m
            .below
            .iter()
            .map(|(t, f)| format!("<{t}A {:.1}%", f * 100.0))
            .collect();
        s.push_str(&format!(
            "{:<10} {:>8.3} {:>8.3} {:>8.3} {:>8.3}  {}\n",
            name,
            m.p25,
            m.p50,
            m.p75,
            m.mean,
            below.join("  ")
        ));
    }
    s
}

/// Machine-readable flat CSV of the same report.
pub fn render_csv(report: &MetricReport) -> String {
    let mut s = String::from("metric,p25,p50,p75,mean,thresholds,fractions\n");
    for (name, m) in [
        ("rmsd", &report.rmsd),
        ("centroid", &report.centroid),
        ("dcc", &report.dcc),
    ] {
        let ts: Vec<String> = m.below.iter().map(|(t, _)| format!("{t}")).collect();
        let fs: Vec<String> = m.below.iter().map(|(_, f)| format!("{f}")).collect();
        s.push_str(&format!(
            "{name},{},{},{},{},{},{}\n",
            m.p25,
            m.p50,
            m.p75,
            m.mean,
            ts.join(";"),
            fs.join(";")
        ));
    }
    s
}
