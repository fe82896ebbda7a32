//! Chamfer distance as a differentiable tape operation, plus the pluggable
//! loss interface.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest, tensor_to_points, Point};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Sum after sorting, with pairwise (tree) accumulation. Invariant to the
/// input order by construction.
pub fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    pairwise_sum(values)
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n if n <= 8 => v.iter().sum(),
        n => {
            let (a, b) = v.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

pub fn sorted_mean(values: &mut [f64]) -> f64 {
    let n = values.len() as f64;
    sorted_sum(values) / n
}

/// Both nearest-neighbor assignments and the two mean squared distances.
struct ChamferTerms {
    y_to_hat: Vec<usize>,
    hat_to_y: Vec<usize>,
    value: f64,
}

fn chamfer_terms(y: &[Point], y_hat: &[Point]) -> Result<ChamferTerms> {
    if y.is_empty() || y_hat.is_empty() {
        return Err(Error::arg("chamfer distance of an empty cloud"));
    }
    let fwd = nearest(y, y_hat);
    let bwd = nearest(y_hat, y);
    let mut d1: Vec<f64> = fwd.iter().map(|x| x.1).collect();
    let mut d2: Vec<f64> = bwd.iter().map(|x| x.1).collect();
    let value = sorted_mean(&mut d1) + sorted_mean(&mut d2);
    Ok(ChamferTerms {
        y_to_hat: fwd.into_iter().map(|x| x.0).collect(),
        hat_to_y: bwd.into_iter().map(|x| x.0).collect(),
        value,
    })
}

/// Symmetric Chamfer distance with squared Euclidean distances and a mean
/// over each cloud.
pub fn chamfer(y: &[Point], y_hat: &[Point]) -> Result<f64> {
    Ok(chamfer_terms(y, y_hat)?.value)
}

struct ChamferOp {
    y_to_hat: Vec<usize>,
    hat_to_y: Vec<usize>,
}

impl CustomOp for ChamferOp {
    fn name(&self) -> &str {
        "chamfer_distance"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (y, yh) = (inputs[0].data(), inputs[1].data());
        let mut gy = vec![0.0; y.len()];
        let mut gh = vec![0.0; yh.len()];
        let c1 = 2.0 * grad[0] / self.y_to_hat.len() as f64;
        for (i, &j) in self.y_to_hat.iter().enumerate() {
            for a in 0..3 {
                let d = y[3 * i + a] - yh[3 * j + a];
                gy[3 * i + a] += c1 * d;
                gh[3 * j + a] -= c1 * d;
            }
        }
        let c2 = 2.0 * grad[0] / self.hat_to_y.len() as f64;
        for (j, &i) in self.hat_to_y.iter().enumerate() {
            for a in 0..3 {
                let d = y[3 * i + a] - yh[3 * j + a];
                gy[3 * i + a] += c2 * d;
                gh[3 * j + a] -= c2 * d;
            }
        }
        vec![Some(gy), Some(gh)]
    }

    fn flops(&self, inputs: &[&Tensor], _out: &Tensor) -> u64 {
        // 3 subtractions, 3 multiplies, 2 adds per pair, both directions
        16 * (inputs[0].shape()[0] * inputs[1].shape()[0]) as u64
    }
}

/// Differentiable Chamfer distance between two `N × 3` variables.
///
/// The nearest-neighbor pairing is fixed at the forward pass (lowest index
/// on ties) and treated as constant by the backward rule.
pub fn chamfer_distance(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
    let yp = tensor_to_points(tape.value(y))?;
    let hp = tensor_to_points(tape.value(y_hat))?;
    let terms = chamfer_terms(&yp, &hp)?;
    let op = ChamferOp {
        y_to_hat: terms.y_to_hat,
        hat_to_y: terms.hat_to_y,
    };
    tape.custom(Box::new(op), &[y, y_hat], Tensor::scalar(terms.value))
}

/// A training loss between ground truth and prediction.
pub trait PointSetLoss: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VanillaChamfer;

impl PointSetLoss for VanillaChamfer {
    fn name(&self) -> &str {
        "vanilla_cd"
    }

    fn forward(&self, tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
        chamfer_distance(tape, y, y_hat)
    }
}

/// Which loss to train with. External variants are resolved by name from a
/// [`LossRegistry`].
///
/// Serialized as its display string, or as a table with `name` and
/// `parameters` when parameters are present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossRepr", into = "LossRepr")]
pub enum LossKind {
    #[default]
    VanillaCd,
    External {
        name: String,
        parameters: BTreeMap<String, f64>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LossRepr {
    Name(String),
    Table {
        name: String,
        #[serde(default)]
        parameters: BTreeMap<String, f64>,
    },
}

impl TryFrom<LossRepr> for LossKind {
    type Error = Error;

    fn try_from(r: LossRepr) -> Result<Self> {
        match r {
            LossRepr::Name(s) => s.parse(),
            LossRepr::Table { name, parameters } => match name.parse()? {
                LossKind::External { name, .. } => Ok(LossKind::External { name, parameters }),
                LossKind::VanillaCd if parameters.is_empty() => Ok(LossKind::VanillaCd),
                LossKind::VanillaCd => Err(Error::config("vanilla_cd takes no parameters")),
            },
        }
    }
}

impl From<LossKind> for LossRepr {
    fn from(k: LossKind) -> Self {
        match k {
            LossKind::External { ref parameters, .. } if !parameters.is_empty() => LossRepr::Table {
                name: k.to_string(),
                parameters: parameters.clone(),
            },
            k => LossRepr::Name(k.to_string()),
        }
    }
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossKind::VanillaCd => Ok(()),
            LossKind::External { name, .. } if name.is_empty() => Err(Error::config("external loss needs a name")),
            LossKind::External { .. } => Ok(()),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::VanillaCd => f.write_str("vanilla_cd"),
            LossKind::External { name, .. } => write!(f, "external:{name}"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// `vanilla_cd` (alias `cd`) or `external:<name>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla_cd" | "cd" => Ok(LossKind::VanillaCd),
            _ => match s.strip_prefix("external:") {
                Some(name) if !name.is_empty() => Ok(LossKind::External {
                    name: name.to_string(),
                    parameters: BTreeMap::new(),
                }),
                _ => Err(Error::config(format!("unknown loss {s:?}"))),
            },
        }
    }
}

pub type LossFactory = Arc<dyn Fn(&BTreeMap<String, f64>) -> Result<Box<dyn PointSetLoss>> + Send + Sync>;

/// Named constructors for external loss variants.
#[derive(Clone, Default)]
pub struct LossRegistry {
    factories: HashMap<String, LossFactory>,
}

impl LossRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, factory: LossFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn build(&self, kind: &LossKind) -> Result<Box<dyn PointSetLoss>> {
        match kind {
            LossKind::VanillaCd => Ok(Box::new(VanillaChamfer)),
            LossKind::External { name, parameters } => {
                let factory = self
                    .factories
                    .get(name)
                    .ok_or_else(|| Error::config(format!("no external loss registered as {name:?}")))?;
                factory(parameters)
            }
        }
    }
}
