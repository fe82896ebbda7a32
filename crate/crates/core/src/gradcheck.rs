//! Finite-difference checks of every differentiable operation.
//!
//! Each case registers its inputs as parameters, builds a graph from them
//! and is reduced to a scalar by a fixed random weighting of its output.
//! Tape gradients are compared against central differences at wide
//! precision. An element fails when
//! `|analytic - numeric| > tol · max(|analytic|, |numeric|, 1e-3)`, i.e. the
//! relative error exceeds `tol` or, for tiny gradients, the absolute error
//! exceeds `tol · 1e-3`.
//!
//! Inputs that land within a step of a kink (ReLU at zero, a max tie, a
//! nearest-neighbor switch) are detected by comparing differences at two
//! step sizes and redrawn.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderKind, DecoderParams};
use crate::encoder::{ExtractorKind, FeaturePyramid, PointTransformerBlock, PyramidLevel, SetAbstraction};
use crate::error::Result;
use crate::fusion::{Fusion, FusionMode, FusionParams, SelfFusionBlock};
use crate::geometry::{group, knn, Point};
use crate::loss::chamfer_distance;
use crate::nn::{AttentionBlock, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Precision, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
/// Absolute differences at or below this always pass.
pub const FLOOR: f64 = 1e-8;
pub const DEFAULT_SEEDS: usize = 20;
/// Elements checked per parameter set; larger cases are subsampled.
const MAX_ELEMENTS: usize = 48;
const MAX_REDRAWS: usize = 10;

type Build = Box<dyn Fn(&mut Graph) -> Result<Var>>;

/// A differentiable function of the tensors in `store`.
pub struct Case {
    pub store: ParamStore,
    pub build: Build,
}

pub type MakeCase = fn(&mut ChaCha8Rng) -> Result<Case>;

pub struct OpSpec {
    pub name: &'static str,
    pub tolerance: f64,
    pub make: MakeCase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpResult {
    pub name: String,
    pub seeds: usize,
    pub tolerance: f64,
    /// Largest relative error among elements whose absolute difference
    /// exceeds the floor.
    pub max_error: f64,
    pub max_abs_error: f64,
    pub checked_elements: usize,
    /// Inputs redrawn because they sat on a kink.
    pub redraws: usize,
    pub passed: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub ops: Vec<OpResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<28} {:>6} {:>12} {:>12} {:>9} {:>8}  result\n",
            "op", "seeds", "max_rel_err", "max_abs_err", "tol", "redraws"
        );
        for o in &self.ops {
            s.push_str(&format!(
                "{:<28} {:>6} {:>12.3e} {:>12.3e} {:>9.0e} {:>8}  {}{}\n",
                o.name,
                o.seeds,
                o.max_error,
                o.max_abs_error,
                o.tolerance,
                o.redraws,
                if o.passed { "pass" } else { "FAIL" },
                o.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn uniform(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Result<ParamId> {
    store.add(name, shape.to_vec(), Init::FanIn { fan_in: 1 }, rng)
}

/// Values in `±[0.05, 1]`, away from the ReLU kink.
fn off_zero(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Result<ParamId> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let id = uniform(store, rng, name, shape)?;
    *store.tensor_mut(id) = Tensor::new(shape.to_vec(), data)?;
    Ok(id)
}

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect()
}

macro_rules! unary {
    ($shape:expr, |$g:ident, $x:ident| $body:expr) => {
        |rng: &mut ChaCha8Rng| {
            let mut store = ParamStore::new();
            let x = uniform(&mut store, rng, "x", &$shape)?;
            Ok(Case {
                store,
                build: Box::new(move |$g: &mut Graph| {
                    let $x = $g.p(x);
                    $body
                }),
            })
        }
    };
}

macro_rules! binary {
    ($sa:expr, $sb:expr, |$g:ident, $a:ident, $b:ident| $body:expr) => {
        |rng: &mut ChaCha8Rng| {
            let mut store = ParamStore::new();
            let a = uniform(&mut store, rng, "a", &$sa)?;
            let b = uniform(&mut store, rng, "b", &$sb)?;
            Ok(Case {
                store,
                build: Box::new(move |$g: &mut Graph| {
                    let ($a, $b) = ($g.p(a), $g.p(b));
                    $body
                }),
            })
        }
    };
}

fn op(name: &'static str, make: MakeCase) -> OpSpec {
    OpSpec {
        name,
        tolerance: TOLERANCE,
        make,
    }
}

/// Every differentiable operation of the library, primitives first.
pub fn registry() -> Vec<OpSpec> {
    vec![
        op("matmul", binary!([3, 4], [4, 2], |g, a, b| g.tape.matmul(a, b))),
        op(
            "matmul_broadcast",
            binary!([2, 1, 3, 4], [3, 4, 2], |g, a, b| g.tape.matmul(a, b)),
        ),
        op("add", binary!([3, 4], [3, 4], |g, a, b| g.tape.add(a, b))),
        op("add_broadcast", binary!([2, 3, 4], [4], |g, a, b| g.tape.add(a, b))),
        op("sub", binary!([2, 3, 4], [3, 4], |g, a, b| g.tape.sub(a, b))),
        op("mul", binary!([3, 4], [3, 4], |g, a, b| g.tape.mul(a, b))),
        op("mul_broadcast", binary!([2, 3, 4], [3, 4], |g, a, b| g.tape.mul(a, b))),
        op("scale", unary!([3, 4], |g, x| g.tape.scale(x, -0.37))),
        op("relu", |rng| {
            let mut store = ParamStore::new();
            let x = off_zero(&mut store, rng, "x", &[4, 5])?;
            Ok(Case {
                store,
                build: Box::new(move |g| g.tape.relu(g.p(x))),
            })
        }),
        op("softmax", unary!([3, 5], |g, x| g.tape.softmax(x))),
        op("layer_norm", |rng| {
            let mut store = ParamStore::new();
            let x = uniform(&mut store, rng, "x", &[4, 6])?;
            let gamma = uniform(&mut store, rng, "gamma", &[6])?;
            let beta = uniform(&mut store, rng, "beta", &[6])?;
            Ok(Case {
                store,
                build: Box::new(move |g| {
                    let (x, gm, bt) = (g.p(x), g.p(gamma), g.p(beta));
                    g.tape.layer_norm(x, gm, bt, 1e-5)
                }),
            })
        }),
        op("concat", binary!([2, 3], [2, 2], |g, a, b| g.tape.concat(&[a, b], 1))),
        op("narrow", unary!([4, 5], |g, x| g.tape.narrow(x, 1, 1, 3))),
        op("reduce_max", unary!([4, 5], |g, x| g.tape.reduce_max(x, 1))),
        op("sum", unary!([3, 4], |g, x| g.tape.sum(x))),
        op("mean", unary!([3, 4], |g, x| g.tape.mean(x))),
        op("reshape", unary!([3, 4], |g, x| g.tape.reshape(x, [2, 6]))),
        op("permute", unary!([2, 3, 4], |g, x| g.tape.permute(x, &[2, 0, 1]))),
        op("transpose", unary!([2, 3, 4], |g, x| g.tape.transpose(x))),
        op(
            "index_select",
            unary!([5, 3], |g, x| g.tape.index_select(x, &[4, 0, 0, 2])),
        ),
        op(
            "chamfer_distance",
            binary!([6, 3], [5, 3], |g, a, b| chamfer_distance(&mut g.tape, a, b)),
        ),
        op("group", |rng| {
            let mut store = ParamStore::new();
            let f = uniform(&mut store, rng, "features", &[7, 4])?;
            let pts = points(rng, 7);
            let nb = knn(&pts[..3], &pts, 3)?;
            Ok(Case {
                store,
                build: Box::new(move |g| {
                    let f = g.p(f);
                    group(&mut g.tape, f, &nb)
                }),
            })
        }),
        op("linear", |rng| {
            let mut store = ParamStore::new();
            let x = uniform(&mut store, rng, "x", &[2, 3, 4])?;
            let l = Linear::new(&mut store, rng, "l", 4, 3)?;
            Ok(Case {
                store,
                build: Box::new(move |g| l.forward(g, g.p(x))),
            })
        }),
        op("mlp", |rng| {
            let mut store = ParamStore::new();
            let x = uniform(&mut store, rng, "x", &[5, 3])?;
            let m = Mlp::new(&mut store, rng, "m", &[3, 6, 2], true)?;
            Ok(Case {
                store,
                build: Box::new(move |g| m.forward(g, g.p(x))),
            })
        }),
        op("multi_head_attention", |rng| {
            let mut store = ParamStore::new();
            let q = uniform(&mut store, rng, "q", &[3, 4])?;
            let kv = uniform(&mut store, rng, "kv", &[5, 4])?;
            let bias = uniform(&mut store, rng, "bias", &[2, 3, 5])?;
            let a = MultiHeadAttention::new(&mut store, rng, "attn", 4, 2)?;
            Ok(Case {
                store,
                build: Box::new(move |g| {
                    let out = a.forward(g, g.p(q), g.p(kv), Some(g.p(bias)))?;
                    let w = g.tape.permute(out.weights, &[1, 0, 2])?;
                    let w = g.tape.reshape(w, [3, 10])?;
                    g.tape.concat(&[out.out, w], 1)
                }),
            })
        }),
        op("attention_block", |rng| {
            let mut store = ParamStore::new();
            let q = uniform(&mut store, rng, "q", &[3, 4])?;
            let kv = uniform(&mut store, rng, "kv", &[4, 4])?;
            let b = AttentionBlock::new(&mut store, rng, "blk", 4, 2)?;
            Ok(Case {
                store,
                build: Box::new(move |g| Ok(b.forward(g, g.p(q), g.p(kv), None)?.0)),
            })
        }),
        op("point_transformer_block", |rng| {
            let mut store = ParamStore::new();
            let x = uniform(&mut store, rng, "x", &[5, 4])?;
            let blk = PointTransformerBlock::new(&mut store, rng, "pt", 4, 2, 3)?;
            let c = points(rng, 5);
            Ok(Case {
                store,
                build: Box::new(move |g| Ok(blk.forward(g, &c, g.p(x))?.0)),
            })
        }),
        op("set_abstraction", |rng| {
            set_abstraction_case(rng, ExtractorKind::SetAbstractionKnn)
        }),
        op("graph_feature", |rng| {
            set_abstraction_case(rng, ExtractorKind::GraphFeature)
        }),
        op("self_fusion_block", |rng| {
            let mut store = ParamStore::new();
            let src = uniform(&mut store, rng, "src", &[3, 4])?;
            let ctx = uniform(&mut store, rng, "ctx", &[4, 4])?;
            let b = SelfFusionBlock::new(&mut store, rng, "fb", 4, 2, 1, 5)?;
            Ok(Case {
                store,
                build: Box::new(move |g| Ok(b.forward(g, g.p(src), g.p(ctx))?.tokens)),
            })
        }),
        op("fusion_end_to_end", fusion_case),
        op("decoder_query", |rng| {
            decoder_case(rng, DecoderKind::QueryCrossAttention)
        }),
        op("decoder_upsampling", |rng| {
            decoder_case(rng, DecoderKind::TransformerUpsampling)
        }),
    ]
}

fn set_abstraction_case(rng: &mut ChaCha8Rng, extractor: ExtractorKind) -> Result<Case> {
    let mut store = ParamStore::new();
    let x = uniform(&mut store, rng, "tokens", &[8, 3])?;
    let first = match extractor {
        ExtractorKind::SetAbstractionKnn => 6,
        ExtractorKind::GraphFeature => 9,
    };
    let sa = SetAbstraction {
        mlp: Mlp::new(&mut store, rng, "sa", &[first, 5, 5], true)?,
        neighbors: 3,
        extractor,
    };
    let pts = points(rng, 8);
    Ok(Case {
        store,
        build: Box::new(move |g| Ok(sa.forward(g, &pts, g.p(x), 4, 0)?.1)),
    })
}

/// All fusion parameters and the pyramid tokens of both branches, through
/// positional encoding and every block.
fn fusion_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let params = FusionParams {
        branches: 2,
        level_widths: vec![4, 4, 4],
        heads: 2,
        width: 3,
        depth: 1,
        mode: FusionMode::Double,
        positional_encoding: true,
        pos_hidden: 2,
    };
    let mut store = ParamStore::new();
    let sizes = [4, 3, 2];
    let mut tokens = Vec::new();
    let mut centroids = Vec::new();
    for b in 0..2 {
        for (l, (&m, &c)) in sizes.iter().zip(&params.level_widths).enumerate() {
            tokens.push(uniform(&mut store, rng, &format!("tokens{b}.{l}"), &[m, c])?);
            centroids.push(points(rng, m));
        }
    }
    let fusion = Fusion::new(&mut store, rng, "fusion", &params)?;
    Ok(Case {
        store,
        build: Box::new(move |g| {
            let pyramids: Vec<FeaturePyramid> = (0..2)
                .map(|b| FeaturePyramid {
                    branch_id: b,
                    levels: (0..3)
                        .map(|l| PyramidLevel {
                            centroids: centroids[3 * b + l].clone(),
                            tokens: g.p(tokens[3 * b + l]),
                        })
                        .collect(),
                })
                .collect();
            Ok(fusion.fuse_branches(g, &pyramids)?.concat)
        }),
    })
}

fn decoder_case(rng: &mut ChaCha8Rng, kind: DecoderKind) -> Result<Case> {
    let params = DecoderParams {
        kind,
        queries: 3,
        heads: 2,
        width: 4,
        layers: 1,
        memory_width: 5,
        output_points: 4,
    };
    let mut store = ParamStore::new();
    let memory = uniform(&mut store, rng, "memory", &[4, 5])?;
    let dec = Decoder::new(&mut store, rng, "decoder", &params)?;
    Ok(Case {
        store,
        build: Box::new(move |g| {
            let concat = g.p(memory);
            let fused = crate::fusion::FusedFeatures {
                token_sets: Vec::new(),
                concat,
            };
            dec.decode_missing(g, &fused)
        }),
    })
}

enum Outcome {
    Checked {
        max_error: f64,
        max_abs: f64,
        elements: usize,
    },
    Kink,
}

fn error(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff <= FLOOR {
        0.0
    } else {
        diff / a.abs().max(n.abs())
    }
}

/// Weighted sum of the case output with the given weights.
fn evaluate(case: &Case, weights: &Tensor) -> Result<f64> {
    let mut g = case.store.bind(Precision::Wide);
    let out = (case.build)(&mut g)?;
    let w = g.tape.constant(weights.clone());
    let prod = g.tape.mul(out, w)?;
    let s = g.tape.sum(prod)?;
    Ok(g.tape.value(s).item())
}

fn numeric(case: &mut Case, weights: &Tensor, id: ParamId, i: usize, h: f64) -> Result<f64> {
    let x0 = case.store.by_id(id).tensor.data()[i];
    case.store.tensor_mut(id).data_mut()[i] = x0 + h;
    let fp = evaluate(case, weights)?;
    case.store.tensor_mut(id).data_mut()[i] = x0 - h;
    let fm = evaluate(case, weights)?;
    case.store.tensor_mut(id).data_mut()[i] = x0;
    Ok((fp - fm) / (2.0 * h))
}

fn check_once(case: &mut Case, rng: &mut ChaCha8Rng, tol: f64) -> Result<Outcome> {
    let mut g = case.store.bind(Precision::Wide);
    let out = (case.build)(&mut g)?;
    let shape = g.tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let weights = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = g.tape.constant(weights.clone());
    let prod = g.tape.mul(out, w)?;
    let s = g.tape.sum(prod)?;
    let grads = g.tape.backward(s)?;

    let mut slots: Vec<(ParamId, usize)> = Vec::new();
    for k in 0..case.store.len() {
        let len = case.store.by_id(ParamId(k)).tensor.numel();
        slots.extend((0..len).map(|i| (ParamId(k), i)));
    }
    let chosen: Vec<usize> = if slots.len() <= MAX_ELEMENTS {
        (0..slots.len()).collect()
    } else {
        let mut v = sample(rng, slots.len(), MAX_ELEMENTS).into_vec();
        v.sort_unstable();
        v
    };
    let analytic: Vec<Tensor> = (0..case.store.len())
        .map(|k| {
            grads
                .wrt(g.p(ParamId(k)))
                .cloned()
                .expect("every parameter has a gradient")
        })
        .collect();
    let mut max_error = 0.0f64;
    let mut max_abs = 0.0f64;
    for &c in &chosen {
        let (id, i) = slots[c];
        let a = analytic[id.0].data()[i];
        let num = numeric(case, &weights, id, i, STEP)?;
        let err = error(a, num);
        if err > tol {
            let fine = numeric(case, &weights, id, i, STEP / 10.0)?;
            if error(num, fine) > 1e-6 {
                return Ok(Outcome::Kink);
            }
        }
        max_error = max_error.max(err);
        max_abs = max_abs.max((a - num).abs());
    }
    Ok(Outcome::Checked {
        max_error,
        max_abs,
        elements: chosen.len(),
    })
}

/// Run one operation over `seeds` independent draws.
pub fn check_op(name: &str, make: MakeCase, tolerance: f64, seed: u64, seeds: usize) -> OpResult {
    let mut result = OpResult {
        name: name.to_string(),
        seeds,
        tolerance,
        max_error: 0.0,
        max_abs_error: 0.0,
        checked_elements: 0,
        redraws: 0,
        passed: true,
        note: None,
    };
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let mut done = false;
        for _ in 0..=MAX_REDRAWS {
            let outcome = (make)(&mut rng).and_then(|mut case| check_once(&mut case, &mut rng, tolerance));
            match outcome {
                Ok(Outcome::Checked {
                    max_error,
                    max_abs,
                    elements,
                }) => {
                    result.max_error = result.max_error.max(max_error);
                    result.max_abs_error = result.max_abs_error.max(max_abs);
                    result.checked_elements += elements;
                    done = true;
                    break;
                }
                Ok(Outcome::Kink) => result.redraws += 1,
                Err(e) => {
                    result.passed = false;
                    result.note = Some(e.to_string());
                    return result;
                }
            }
        }
        if !done {
            result.passed = false;
            result.note = Some("every draw landed on a kink".into());
            return result;
        }
    }
    result.passed = result.max_error <= tolerance;
    result
}

/// The full suite, deterministic in `seed`.
pub fn run(seed: u64, seeds: usize) -> GradcheckReport {
    GradcheckReport {
        seed,
        step: STEP,
        ops: registry()
            .into_iter()
            .map(|spec| check_op(spec.name, spec.make, spec.tolerance, seed, seeds))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::CustomOp;

    /// `sum(x²)` with a backward rule that is off by one percent.
    struct BrokenSquare;

    impl CustomOp for BrokenSquare {
        fn name(&self) -> &str {
            "broken_square"
        }

        fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
            vec![Some(inputs[0].data().iter().map(|x| 2.02 * x * grad[0]).collect())]
        }
    }

    fn broken(rng: &mut ChaCha8Rng) -> Result<Case> {
        let mut store = ParamStore::new();
        let x = uniform(&mut store, rng, "x", &[4])?;
        Ok(Case {
            store,
            build: Box::new(move |g| {
                let xv = g.p(x);
                let v: f64 = g.tape.value(xv).data().iter().map(|x| x * x).sum();
                g.tape.custom(Box::new(BrokenSquare), &[xv], Tensor::scalar(v))
            }),
        })
    }

    #[test]
    fn corrupted_rule_is_reported() {
        let r = check_op("broken_square", broken, TOLERANCE, 0, 3);
        assert!(!r.passed);
        assert!(r.max_error > 1e-3);
        assert_eq!(r.redraws, 0);
    }

    #[test]
    fn primitives_pass_on_a_few_seeds() {
        for spec in registry().into_iter().take(8) {
            let r = check_op(spec.name, spec.make, spec.tolerance, 1, 3);
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn report_is_deterministic() {
        let specs = registry();
        let relu = specs.iter().find(|s| s.name == "relu").unwrap();
        let a = check_op(relu.name, relu.make, relu.tolerance, 5, 2);
        let b = check_op(relu.name, relu.make, relu.tolerance, 5, 2);
        assert_eq!(a, b);
    }
}
