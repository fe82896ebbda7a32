//! Synthetic datasets: shape sampling, the partial-view simulator, files
//! and manifests.

pub mod io;
pub mod shapes;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Provenance};
pub use shapes::{Family, FamilyName, ShapeSpec};

/// Keep the `⌈keep_ratio · N⌉` points that project farthest along
/// `viewpoint`, in their original order. Ties go to the lower index.
pub fn make_partial(cloud: &PointCloud, viewpoint: [f64; 3], keep_ratio: f64) -> Result<PointCloud> {
    if !viewpoint.iter().all(|v| v.is_finite()) || viewpoint.iter().all(|&v| v == 0.0) {
        return Err(Error::arg(format!("degenerate viewpoint {viewpoint:?}")));
    }
    if !(keep_ratio > 0.0 && keep_ratio < 1.0) {
        return Err(Error::arg(format!("keep ratio must lie in (0, 1), got {keep_ratio}")));
    }
    let pts = cloud.points();
    let keep = (keep_ratio * pts.len() as f64).ceil() as usize;
    let proj = |i: usize| pts[i][0] * viewpoint[0] + pts[i][1] * viewpoint[1] + pts[i][2] * viewpoint[2];
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| proj(b).total_cmp(&proj(a)).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    let mut out = PointCloud::new(kept.iter().map(|&i| pts[i]).collect(), Provenance::Partial)?;
    out.transform = cloud.transform;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    All,
}

impl Split {
    /// Even shape seeds train, odd ones validate.
    pub fn of_seed(seed: u64) -> Split {
        if seed.is_multiple_of(2) {
            Split::Train
        } else {
            Split::Val
        }
    }

    pub fn contains(self, seed: u64) -> bool {
        self == Split::All || self == Split::of_seed(seed)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "all" => Ok(Split::All),
            _ => Err(Error::config(format!("unknown split {s:?}"))),
        }
    }
}

/// Recipe for a whole synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub shapes: usize,
    /// Ground-truth sample count per shape.
    pub points: usize,
    pub keep_ratio: f64,
    /// Cycled through in order.
    pub families: Vec<FamilyName>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            shapes: 8,
            points: 256,
            keep_ratio: 0.5,
            families: FamilyName::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Shape `i` gets seed `seed + i` and the family `families[i % len]`
    /// with sizes drawn from a generator seeded by `seed`.
    pub fn shape_specs(&self) -> Result<Vec<ShapeSpec>> {
        if self.shapes == 0 {
            return Err(Error::config("dataset needs at least one shape"));
        }
        if self.families.is_empty() {
            return Err(Error::config("dataset needs at least one shape family"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.shapes)
            .map(|i| ShapeSpec {
                family: self.families[i % self.families.len()].random(&mut rng),
                points: self.points,
                seed: self.seed.wrapping_add(i as u64),
            })
            .collect())
    }
}

/// Viewing direction used for a shape's partial scan.
pub fn viewpoint_for(seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    UnitSphere.sample(&mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub category: String,
    pub seed: u64,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub gt: PathBuf,
    pub partial: PathBuf,
    pub viewpoint: [f64; 3],
    pub keep_ratio: f64,
    pub spec: ShapeSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub shapes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// Sample every shape, write its ground truth and partial scan, and write
/// the manifest last.
pub fn generate_dataset(specs: &[ShapeSpec], keep_ratio: f64, out_dir: &Path) -> Result<Manifest> {
    if specs.is_empty() {
        return Err(Error::config("no shapes to generate"));
    }
    let mut shapes = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("{i:04}");
        let gt = spec.sample()?;
        let viewpoint = viewpoint_for(spec.seed);
        let partial = make_partial(&gt, viewpoint, keep_ratio)?;
        let entry = ManifestEntry {
            category: spec.family.name().to_string(),
            seed: spec.seed,
            split: Split::of_seed(spec.seed),
            gt: PathBuf::from(format!("gt/{id}.pcf")),
            partial: PathBuf::from(format!("partial/{id}.pcf")),
            viewpoint,
            keep_ratio,
            spec: *spec,
            id,
        };
        io::write_pcf(&out_dir.join(&entry.gt), gt.points())?;
        io::write_pcf(&out_dir.join(&entry.partial), partial.points())?;
        shapes.push(entry);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        shapes,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    io::write_atomic(&out_dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub category: String,
    pub seed: u64,
    pub gt: PointCloud,
    pub partial: PointCloud,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Load from a dataset directory or a manifest path.
    pub fn load(path: &Path) -> Result<Dataset> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let bytes = io::read_bytes(&manifest_path)?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(
                &manifest_path,
                format!("unsupported manifest version {}", manifest.version),
            ));
        }
        let samples = manifest
            .shapes
            .into_iter()
            .map(|e| {
                Ok(Sample {
                    gt: io::read_cloud(&root.join(&e.gt), Provenance::GroundTruth)?,
                    partial: io::read_cloud(&root.join(&e.partial), Provenance::Partial)?,
                    id: e.id,
                    category: e.category,
                    seed: e.seed,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { root, samples })
    }

    /// Samples of a split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| split.contains(s.seed)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cmp_points, Point};

    fn sphere() -> PointCloud {
        ShapeSpec {
            family: Family::Sphere { radius: 1.0 },
            points: 256,
            seed: 4,
        }
        .sample()
        .unwrap()
    }

    #[test]
    fn partial_sizes_and_subset() {
        let c = sphere();
        for (ratio, want) in [(0.5, 128), (0.3, 77), (0.999, 256), (0.001, 1)] {
            let p = make_partial(&c, [0.3, -0.2, 0.9], ratio).unwrap();
            assert_eq!(p.len(), want);
            assert!(p.points().iter().all(|q| c.points().contains(q)));
        }
        let full = make_partial(&c, [0.0, 0.0, 1.0], 0.999).unwrap();
        assert_eq!(full.points(), c.points());
    }

    #[test]
    fn antipodal_views_split_a_symmetric_cloud() {
        let c = sphere();
        let v = [0.4, 0.5, -0.2];
        let a = make_partial(&c, v, 0.5).unwrap();
        let b = make_partial(&c, v.map(|x| -x), 0.5).unwrap();
        let mut union: Vec<Point> = a.points().iter().chain(b.points()).copied().collect();
        union.sort_by(cmp_points);
        let mut all = c.points().to_vec();
        all.sort_by(cmp_points);
        assert_eq!(union, all);
    }

    #[test]
    fn partial_errors() {
        let c = sphere();
        assert!(make_partial(&c, [0.0; 3], 0.5).is_err());
        assert!(make_partial(&c, [f64::NAN, 0.0, 1.0], 0.5).is_err());
        assert!(make_partial(&c, [0.0, 0.0, 1.0], 1.0).is_err());
        assert!(make_partial(&c, [0.0, 0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn dataset_files_are_deterministic() {
        let spec = DatasetSpec {
            shapes: 5,
            points: 64,
            ..DatasetSpec::default()
        };
        let specs = spec.shape_specs().unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_dataset(&specs, 0.5, a.path()).unwrap();
        generate_dataset(&specs, 0.5, b.path()).unwrap();
        assert_eq!(ma.shapes.len(), 5);
        for rel in ["manifest.json", "gt/0000.pcf", "partial/0004.pcf"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
        let ds = Dataset::load(a.path()).unwrap();
        assert_eq!(ds.samples.len(), 5);
        let s = &ds.samples[2];
        assert_eq!(s.gt.points(), specs[2].sample().unwrap().points());
        assert_eq!(s.partial.len(), 32);
        assert!(s.partial.points().iter().all(|p| s.gt.points().contains(p)));
        let train = ds.split(Split::Train);
        let val = ds.split(Split::Val);
        assert_eq!(train.len() + val.len(), 5);
        assert!(train.iter().all(|s| s.seed % 2 == 0));
        let cats: Vec<&str> = ds.samples.iter().map(|s| s.category.as_str()).collect();
        assert_eq!(cats, ["sphere", "box", "cylinder", "torus", "plane_union"]);
    }

    #[test]
    fn loading_reports_bad_manifests() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap_err().exit_code(), 3);
        std::fs::write(dir.path().join(MANIFEST_FILE), "{").unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { .. })));
    }
}
