//! Evaluation metrics: Chamfer distance ×10³ and F-score at a distance
//! threshold, aggregated overall and per category.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest, Point, PointCloud};
use crate::loss::{chamfer, sorted_mean};

/// Threshold used by the reference benchmark tables.
pub const DEFAULT_TAU: f64 = 0.001;

/// Whether a nearest-neighbor match counts at threshold `tau`.
///
/// Compares the Euclidean (not squared) distance, strictly.
#[inline]
pub fn within_threshold(sq_distance: f64, tau: f64) -> bool {
    sq_distance.sqrt() < tau
}

/// Harmonic mean of precision (predicted points near the truth) and recall
/// (true points near the prediction). Zero when both are zero.
pub fn f_score(y: &[Point], y_hat: &[Point], tau: f64) -> Result<f64> {
    if y.is_empty() || y_hat.is_empty() {
        return Err(Error::arg("f-score of an empty cloud"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::arg(format!("f-score threshold must be positive, got {tau}")));
    }
    let frac = |from: &[Point], to: &[Point]| {
        let hits = nearest(from, to)
            .into_iter()
            .filter(|&(_, d)| within_threshold(d, tau))
            .count();
        hits as f64 / from.len() as f64
    };
    let precision = frac(y_hat, y);
    let recall = frac(y, y_hat);
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub category: String,
    pub cd: f64,
    pub fscore: f64,
}

impl SampleMetrics {
    pub fn compute(
        id: impl Into<String>,
        category: impl Into<String>,
        y: &PointCloud,
        y_hat: &PointCloud,
        tau: f64,
    ) -> Result<Self> {
        Ok(SampleMetrics {
            id: id.into(),
            category: category.into(),
            cd: chamfer(y.points(), y_hat.points())?,
            fscore: f_score(y.points(), y_hat.points(), tau)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub count: usize,
    pub cd_x1e3: f64,
    pub fscore: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tau: f64,
    pub samples: usize,
    pub mean_cd_times_1e3: f64,
    pub f_score_at_tau: f64,
    pub per_category: BTreeMap<String, CategoryMetrics>,
}

impl MetricsReport {
    /// Aggregate per-sample scores. Means are taken over samples with
    /// order-independent summation.
    pub fn from_samples(samples: &[SampleMetrics], tau: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::arg("cannot report metrics of an empty batch"));
        }
        let aggregate = |rows: &[&SampleMetrics]| {
            let mut cds: Vec<f64> = rows.iter().map(|s| s.cd).collect();
            let mut fs: Vec<f64> = rows.iter().map(|s| s.fscore).collect();
            CategoryMetrics {
                count: rows.len(),
                cd_x1e3: sorted_mean(&mut cds) * 1e3,
                fscore: sorted_mean(&mut fs),
            }
        };
        let mut groups: BTreeMap<&str, Vec<&SampleMetrics>> = BTreeMap::new();
        for s in samples {
            groups.entry(&s.category).or_default().push(s);
        }
        let per_category = groups
            .into_iter()
            .map(|(name, rows)| (name.to_string(), aggregate(&rows)))
            .collect();
        let all: Vec<&SampleMetrics> = samples.iter().collect();
        let overall = aggregate(&all);
        Ok(MetricsReport {
            tau,
            samples: samples.len(),
            mean_cd_times_1e3: overall.cd_x1e3,
            f_score_at_tau: overall.fscore,
            per_category,
        })
    }

    /// CSV with columns `category,count,cd_x1e3,fscore`; one row per
    /// category, then an `overall` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,count,cd_x1e3,fscore\n");
        for (name, m) in &self.per_category {
            let _ = writeln!(out, "{},{},{},{}", name, m.count, m.cd_x1e3, m.fscore);
        }
        let _ = writeln!(
            out,
            "overall,{},{},{}",
            self.samples, self.mean_cd_times_1e3, self.f_score_at_tau
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Score every `(truth, prediction, category)` triple and aggregate.
pub fn evaluate_batch(pairs: &[(PointCloud, PointCloud, String)], tau: f64) -> Result<MetricsReport> {
    let samples = pairs
        .iter()
        .enumerate()
        .map(|(i, (y, y_hat, cat))| SampleMetrics::compute(i.to_string(), cat.clone(), y, y_hat, tau))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_samples(&samples, tau)
}

/// CSV of per-sample rows: `id,category,cd_x1e3,fscore`.
pub fn samples_csv(samples: &[SampleMetrics]) -> String {
    let mut out = String::from("id,category,cd_x1e3,fscore\n");
    for s in samples {
        let _ = writeln!(out, "{},{},{},{}", s.id, s.category, s.cd * 1e3, s.fscore);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Provenance;

    fn pc(points: Vec<Point>) -> PointCloud {
        PointCloud::new(points, Provenance::Synthetic).unwrap()
    }

    #[test]
    fn f_score_examples() {
        let tau = 0.001;
        let y = vec![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert_eq!(f_score(&y, &y, tau).unwrap(), 1.0);
        let far = vec![[50.0, 0.0, 0.0]];
        assert_eq!(f_score(&y, &far, tau).unwrap(), 0.0);
        let h = vec![[0.0005, 0.0, 0.0], [10.0 + 5.0 * tau, 0.0, 0.0]];
        assert!((f_score(&y, &h, tau).unwrap() - 0.5).abs() < 1e-15);
        assert!(f_score(&y, &[], tau).is_err());
        assert!(f_score(&y, &y, 0.0).is_err());
    }

    #[test]
    fn threshold_is_strict_euclidean() {
        assert!(within_threshold(0.0009 * 0.0009, 0.001));
        assert!(!within_threshold(0.001 * 0.001, 0.001));
        // a squared-distance comparison would accept this one
        assert!(!within_threshold(0.0005, 0.001));
    }

    #[test]
    fn batch_examples() {
        let a = pc(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        let r = evaluate_batch(&[(a.clone(), a.clone(), "x".into())], DEFAULT_TAU).unwrap();
        assert_eq!(r.mean_cd_times_1e3, 0.0);
        assert_eq!(r.f_score_at_tau, 1.0);

        let mk = |cd: f64| SampleMetrics {
            id: String::new(),
            category: "c".into(),
            cd,
            fscore: 0.0,
        };
        let r = MetricsReport::from_samples(&[mk(2e-3), mk(4e-3)], DEFAULT_TAU).unwrap();
        assert!((r.mean_cd_times_1e3 - 3.0).abs() < 1e-12);
        assert!(MetricsReport::from_samples(&[], DEFAULT_TAU).is_err());
    }

    #[test]
    fn per_category_means_ignore_interleaving() {
        let s = |cat: &str, cd: f64, f: f64| SampleMetrics {
            id: String::new(),
            category: cat.into(),
            cd,
            fscore: f,
        };
        let a = vec![s("A", 0.1, 0.3), s("B", 0.2, 0.9), s("B", 0.7, 0.1)];
        let b = vec![s("B", 0.7, 0.1), s("A", 0.1, 0.3), s("B", 0.2, 0.9)];
        let ra = MetricsReport::from_samples(&a, 0.01).unwrap();
        let rb = MetricsReport::from_samples(&b, 0.01).unwrap();
        assert_eq!(ra, rb);
        // explicit partition
        let bm = &ra.per_category["B"];
        assert_eq!(bm.count, 2);
        assert!((bm.cd_x1e3 - 450.0).abs() < 1e-9);
        assert!((bm.fscore - 0.5).abs() < 1e-12);
        assert_eq!(ra.per_category["A"].count, 1);
    }

    #[test]
    fn csv_layout() {
        let a = pc(vec![[0.0; 3]]);
        let r = evaluate_batch(&[(a.clone(), a, "chair".into())], 0.01).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "category,count,cd_x1e3,fscore");
        assert_eq!(lines[1], "chair,1,0,1");
        assert_eq!(lines[2], "overall,1,0,1");
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
