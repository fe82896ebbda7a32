//! Evaluation over a dataset split.

use std::path::Path;

use crate::data::io::write_atomic;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::{samples_csv, MetricsReport, SampleMetrics};
use crate::model::Model;

pub struct Evaluation {
    pub report: MetricsReport,
    pub samples: Vec<SampleMetrics>,
}

/// Score every sample. With no model the ground truth is scored against
/// itself, which checks the metric plumbing.
pub fn evaluate(model: Option<&Model>, samples: &[&Sample], tau: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::config("no samples to evaluate"));
    }
    let rows = samples
        .iter()
        .map(|s| {
            let pred: PointCloud = match model {
                Some(m) => m.complete(&s.partial)?,
                None => s.gt.clone(),
            };
            SampleMetrics::compute(s.id.clone(), s.category.clone(), &s.gt, &pred, tau)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        report: MetricsReport::from_samples(&rows, tau)?,
        samples: rows,
    })
}

impl Evaluation {
    /// Write `metrics.csv`, `metrics.json` and `samples.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("metrics.csv"), self.report.to_csv().as_bytes())?;
        write_atomic(&dir.join("metrics.json"), self.report.to_json().as_bytes())?;
        write_atomic(&dir.join("samples.csv"), samples_csv(&self.samples).as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Dataset, DatasetSpec};

    #[test]
    fn bypass_is_perfect_and_files_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            shapes: 5,
            points: 64,
            ..DatasetSpec::default()
        };
        generate_dataset(&spec.shape_specs().unwrap(), 0.5, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let all: Vec<&Sample> = ds.samples.iter().collect();
        let ev = evaluate(None, &all, 0.01).unwrap();
        assert_eq!(ev.report.mean_cd_times_1e3, 0.0);
        assert_eq!(ev.report.f_score_at_tau, 1.0);
        assert_eq!(ev.report.per_category.len(), 5);
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        ev.write(&a).unwrap();
        evaluate(None, &all, 0.01).unwrap().write(&b).unwrap();
        for f in ["metrics.csv", "metrics.json", "samples.csv"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        }
        assert!(evaluate(None, &[], 0.01).is_err());
    }
}
