//! Synthetic shape families sampled on their surfaces.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, Point, PointCloud, Provenance};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Sphere {
        radius: f64,
    },
    Box {
        half_extents: [f64; 3],
    },
    /// Closed cylinder along z.
    Cylinder {
        radius: f64,
        half_height: f64,
    },
    /// Ring around z.
    Torus {
        major: f64,
        minor: f64,
    },
    /// Two perpendicular rectangles crossing on the z axis.
    PlaneUnion {
        half_width: f64,
        half_height: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Sphere,
    Box,
    Cylinder,
    Torus,
    PlaneUnion,
}

impl FamilyName {
    pub const ALL: [FamilyName; 5] = [
        FamilyName::Sphere,
        FamilyName::Box,
        FamilyName::Cylinder,
        FamilyName::Torus,
        FamilyName::PlaneUnion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FamilyName::Sphere => "sphere",
            FamilyName::Box => "box",
            FamilyName::Cylinder => "cylinder",
            FamilyName::Torus => "torus",
            FamilyName::PlaneUnion => "plane_union",
        }
    }

    /// A family member with size parameters drawn from `rng`.
    pub fn random(self, rng: &mut impl Rng) -> Family {
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        match self {
            FamilyName::Sphere => Family::Sphere { radius: u(0.5, 1.5) },
            FamilyName::Box => Family::Box {
                half_extents: [u(0.2, 1.0), u(0.2, 1.0), u(0.2, 1.0)],
            },
            FamilyName::Cylinder => Family::Cylinder {
                radius: u(0.2, 0.8),
                half_height: u(0.3, 1.0),
            },
            FamilyName::Torus => {
                let major = u(0.5, 1.0);
                Family::Torus {
                    major,
                    minor: major * u(0.15, 0.5),
                }
            }
            FamilyName::PlaneUnion => Family::PlaneUnion {
                half_width: u(0.4, 1.0),
                half_height: u(0.4, 1.0),
            },
        }
    }
}

impl fmt::Display for FamilyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FamilyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FamilyName::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown shape family {s:?}")))
    }
}

impl Family {
    pub fn name(&self) -> FamilyName {
        match self {
            Family::Sphere { .. } => FamilyName::Sphere,
            Family::Box { .. } => FamilyName::Box,
            Family::Cylinder { .. } => FamilyName::Cylinder,
            Family::Torus { .. } => FamilyName::Torus,
            Family::PlaneUnion { .. } => FamilyName::PlaneUnion,
        }
    }

    fn validate(&self) -> Result<()> {
        let sizes: Vec<f64> = match *self {
            Family::Sphere { radius } => vec![radius],
            Family::Box { half_extents } => half_extents.to_vec(),
            Family::Cylinder { radius, half_height } => vec![radius, half_height],
            Family::Torus { major, minor } => {
                if minor >= major {
                    return Err(Error::config("torus minor radius must be below the major radius"));
                }
                vec![major, minor]
            }
            Family::PlaneUnion {
                half_width,
                half_height,
            } => vec![half_width, half_height],
        };
        if sizes.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::config(format!("{}: sizes must be positive", self.name())))
        }
    }

    /// One point, uniform with respect to surface area.
    fn sample_point(&self, rng: &mut impl Rng) -> Point {
        match *self {
            Family::Sphere { radius } => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    break v.map(|c| radius * c / n);
                }
            },
            Family::Box {
                half_extents: [a, b, c],
            } => {
                // pairs of faces normal to x, y, z
                let areas = [b * c, a * c, a * b];
                let axis = pick(rng, &areas);
                let ext = [a, b, c];
                let mut p = [0.0; 3];
                for (i, e) in ext.iter().enumerate() {
                    p[i] = if i == axis {
                        if rng.gen_bool(0.5) {
                            *e
                        } else {
                            -*e
                        }
                    } else {
                        rng.gen_range(-*e..*e)
                    };
                }
                p
            }
            Family::Cylinder { radius, half_height } => {
                let side = TAU * radius * 2.0 * half_height;
                let caps = 2.0 * PI * radius * radius;
                let t = rng.gen_range(0.0..TAU);
                if pick(rng, &[side, caps]) == 0 {
                    [
                        radius * t.cos(),
                        radius * t.sin(),
                        rng.gen_range(-half_height..half_height),
                    ]
                } else {
                    let r = radius * rng.gen::<f64>().sqrt();
                    let z = if rng.gen_bool(0.5) { half_height } else { -half_height };
                    [r * t.cos(), r * t.sin(), z]
                }
            }
            Family::Torus { major, minor } => loop {
                let u = rng.gen_range(0.0..TAU);
                let v = rng.gen_range(0.0..TAU);
                let w = major + minor * v.cos();
                if rng.gen_range(0.0..major + minor) < w {
                    break [w * u.cos(), w * u.sin(), minor * v.sin()];
                }
            },
            Family::PlaneUnion {
                half_width,
                half_height,
            } => {
                let s = rng.gen_range(-half_width..half_width);
                let z = rng.gen_range(-half_height..half_height);
                if rng.gen_bool(0.5) {
                    [s, 0.0, z]
                } else {
                    [0.0, s, z]
                }
            }
        }
    }
}

fn pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub family: Family,
    /// Sample count (N_gt).
    pub points: usize,
    pub seed: u64,
}

impl ShapeSpec {
    /// Sample the surface, normalize to the unit sphere and round to the
    /// single precision used on disk.
    ///
    /// Every family is symmetric about the origin and points are drawn in
    /// antipodal pairs `p, -p`, so the centroid is exactly the origin and a
    /// sphere normalizes to radius 1.
    pub fn sample(&self) -> Result<PointCloud> {
        self.family.validate()?;
        if self.points < 2 || !self.points.is_multiple_of(2) {
            return Err(Error::config(format!(
                "shape sample count must be even and at least 2, got {}",
                self.points
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut pts = Vec::with_capacity(self.points);
        for _ in 0..self.points / 2 {
            let p = self.family.sample_point(&mut rng);
            pts.push(p);
            pts.push(p.map(|c| -c));
        }
        let raw = PointCloud::new(pts, Provenance::GroundTruth)?;
        let (normalized, transform) = normalize_unit_sphere(&raw);
        let rounded = normalized
            .into_points()
            .into_iter()
            .map(|p| p.map(|c| c as f32 as f64))
            .collect();
        let mut cloud = PointCloud::new(rounded, Provenance::GroundTruth)?;
        cloud.transform = Some(transform);
        Ok(cloud)
    }
}
