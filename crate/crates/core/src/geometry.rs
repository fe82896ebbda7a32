//! Point clouds and the exact geometric kernels used across the model:
//! farthest point sampling, k-nearest neighbors, neighborhood gathering
//! and unit-sphere normalization.
//!
//! All distance comparisons use squared Euclidean distance. Ties are broken
//! toward the lower index everywhere so results are reproducible.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub type Point = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Partial,
    GroundTruth,
    Predicted,
    Synthetic,
}

/// Normalization applied to a cloud: `normalized = (original - center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub center: Point,
    pub scale: f64,
}

impl Transform {
    pub fn apply(&self, p: Point) -> Point {
        [
            (p[0] - self.center[0]) / self.scale,
            (p[1] - self.center[1]) / self.scale,
            (p[2] - self.center[2]) / self.scale,
        ]
    }

    pub fn invert(&self, p: Point) -> Point {
        [
            p[0] * self.scale + self.center[0],
            p[1] * self.scale + self.center[1],
            p[2] * self.scale + self.center[2],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    pub provenance: Provenance,
    pub transform: Option<Transform>,
}

impl PointCloud {
    /// Non-empty cloud with finite coordinates.
    pub fn new(points: Vec<Point>, provenance: Provenance) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::arg("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::arg(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud {
            points,
            provenance,
            transform: None,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Points as an `N × 3` tensor.
    pub fn to_tensor(&self) -> Tensor {
        points_to_tensor(&self.points)
    }

    /// Undo the recorded normalization, if any.
    pub fn denormalized(&self) -> PointCloud {
        match self.transform {
            None => self.clone(),
            Some(t) => PointCloud {
                points: self.points.iter().map(|&p| t.invert(p)).collect(),
                provenance: self.provenance,
                transform: None,
            },
        }
    }
}

pub fn points_to_tensor(points: &[Point]) -> Tensor {
    let data = points.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::new([points.len(), 3], data).expect("non-empty point set")
}

/// Interpret an `N × 3` tensor as points.
pub fn tensor_to_points(t: &Tensor) -> Result<Vec<Point>> {
    if t.rank() != 2 || t.shape()[1] != 3 {
        return Err(Error::Dimension {
            op: "points",
            lhs: t.shape().to_vec(),
            rhs: vec![3],
        });
    }
    Ok(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling.
///
/// The first pick is `start`; every following pick maximizes the minimum
/// squared distance to the points already picked, ties going to the lowest
/// index. Picked indices are never repeated, even among duplicate points.
pub fn fps(points: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::arg(format!("cannot sample {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::arg(format!("start index {start} out of range for {n} points")));
    }
    let mut picked = Vec::with_capacity(m);
    // selected points are marked with -1 so they can never win again
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    loop {
        picked.push(current);
        min_d[current] = -1.0;
        if picked.len() == m {
            return Ok(picked);
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, (p, d)) in points.iter().zip(min_d.iter_mut()).enumerate() {
            if *d < 0.0 {
                continue;
            }
            let nd = sq_dist(p, &c);
            if nd < *d {
                *d = nd;
            }
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        current = best;
    }
}

/// Row-major `queries × k` neighbor index matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl Neighbors {
    pub fn queries(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }
}

/// Brute-force k nearest neighbors, each row sorted by (squared distance,
/// index). A query that coincides with a reference point finds itself.
pub fn knn(queries: &[Point], references: &[Point], k: usize) -> Result<Neighbors> {
    let r = references.len();
    if k == 0 || k > r {
        return Err(Error::arg(format!("cannot take {k} neighbors of {r} references")));
    }
    let by_dist_then_index = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(r);
    for q in queries {
        scratch.clear();
        scratch.extend(references.iter().enumerate().map(|(i, p)| (sq_dist(q, p), i)));
        if k < r {
            scratch.select_nth_unstable_by(k - 1, by_dist_then_index);
        }
        let nearest = &mut scratch[..k];
        nearest.sort_unstable_by(by_dist_then_index);
        indices.extend(nearest.iter().map(|&(_, i)| i));
    }
    Ok(Neighbors { k, indices })
}

/// Index and squared distance of the nearest reference for every query,
/// lowest index on ties.
pub fn nearest(queries: &[Point], references: &[Point]) -> Vec<(usize, f64)> {
    queries
        .iter()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (i, p) in references.iter().enumerate() {
                let d = sq_dist(q, p);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best
        })
        .collect()
}

/// Gather neighbor features: `features` is `R × C`, the result is
/// `Q × k × C`. Gradients scatter back additively.
pub fn group(tape: &mut Tape, features: Var, neighbors: &Neighbors) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension {
            op: "group",
            lhs: shape,
            rhs: vec![neighbors.queries(), neighbors.k],
        });
    }
    let gathered = tape.index_select(features, &neighbors.indices)?;
    tape.reshape(gathered, [neighbors.queries(), neighbors.k, shape[1]])
}

/// Center on the centroid and scale so the farthest point has norm 1.
/// A cloud whose points all coincide keeps scale 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> (PointCloud, Transform) {
    let n = cloud.len() as f64;
    let mut center = [0.0; 3];
    for p in cloud.points() {
        for a in 0..3 {
            center[a] += p[a];
        }
    }
    for c in &mut center {
        *c /= n;
    }
    let max_norm = cloud
        .points()
        .iter()
        .map(|p| sq_dist(p, &center))
        .fold(0.0, f64::max)
        .sqrt();
    let scale = if max_norm > 0.0 { max_norm } else { 1.0 };
    let transform = Transform { center, scale };
    let points = cloud.points().iter().map(|&p| transform.apply(p)).collect();
    let normalized = PointCloud {
        points,
        provenance: cloud.provenance,
        transform: Some(transform),
    };
    (normalized, transform)
}

/// Lexicographic total order on points; used to compare point multisets.
pub fn cmp_points(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}
