//! Per-branch hierarchical encoder.
//!
//! Each of the three levels downsamples with FPS, groups K-NN
//! neighborhoods, encodes them with a shared pointwise MLP reduced by max
//! (set abstraction), then refines the tokens with a point transformer
//! block. Every level's output is kept.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fps, group, knn, points_to_tensor, Point, PointCloud};
use crate::nn::{AttentionBlock, Mlp};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const LEVELS: usize = 3;

/// Backbone used for neighborhood encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Relative position ⊕ neighbor token.
    #[default]
    SetAbstractionKnn,
    /// Edge features: center token ⊕ (neighbor − center) ⊕ relative position.
    GraphFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    /// Centroids kept at this level (M_l).
    pub points: usize,
    /// Token width (C_l).
    pub width: usize,
    /// Neighborhood size (K).
    pub neighbors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub levels: Vec<LevelParams>,
    pub heads: usize,
    /// Hidden width of the positional-bias MLP in the transformer block.
    pub pos_hidden: usize,
    pub extractor: ExtractorKind,
}

/// Width of the per-point input features before the first level.
pub const INPUT_WIDTH: usize = 3;

impl EncoderParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != LEVELS {
            return Err(Error::config(format!("encoder needs exactly {LEVELS} levels")));
        }
        for (l, lv) in self.levels.iter().enumerate() {
            if lv.points == 0 || lv.width == 0 || lv.neighbors == 0 {
                return Err(Error::config(format!("level {l}: sizes must be positive")));
            }
            if lv.width % self.heads != 0 {
                return Err(Error::config(format!(
                    "level {l}: {} heads do not divide width {}",
                    self.heads, lv.width
                )));
            }
            if l > 0 {
                let prev = &self.levels[l - 1];
                if lv.points >= prev.points {
                    return Err(Error::config("level point counts must strictly decrease"));
                }
                if lv.width < prev.width {
                    return Err(Error::config("level widths must not decrease"));
                }
                if lv.neighbors > prev.points {
                    return Err(Error::config(format!(
                        "level {l}: K = {} exceeds the {} points of the level below",
                        lv.neighbors, prev.points
                    )));
                }
            }
        }
        if self.heads == 0 || self.pos_hidden == 0 {
            return Err(Error::config("heads and pos_hidden must be positive"));
        }
        Ok(())
    }

    fn in_width(&self, level: usize) -> usize {
        if level == 0 {
            INPUT_WIDTH
        } else {
            self.levels[level - 1].width
        }
    }

    fn mlp_dims(&self, level: usize) -> [usize; 3] {
        let c_in = self.in_width(level);
        let c_out = self.levels[level].width;
        let first = match self.extractor {
            ExtractorKind::SetAbstractionKnn => 3 + c_in,
            ExtractorKind::GraphFeature => 3 + 2 * c_in,
        };
        [first, c_out, c_out]
    }

    /// Parameter count of one branch, from the architecture alone.
    pub fn param_count(&self) -> usize {
        (0..LEVELS)
            .map(|l| {
                let c = self.levels[l].width;
                Mlp::param_count(&self.mlp_dims(l))
                    + AttentionBlock::param_count(c)
                    + Mlp::param_count(&[3, self.pos_hidden, self.heads])
            })
            .sum()
    }
}

/// Multi-head self-attention over centroid tokens with an additive bias
/// computed from pairwise centroid offsets, then `LN(x + attn)`.
#[derive(Clone, Debug)]
pub struct PointTransformerBlock {
    pub block: AttentionBlock,
    pub pos_bias: Mlp,
    pub heads: usize,
}

impl PointTransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
        pos_hidden: usize,
    ) -> Result<Self> {
        Ok(PointTransformerBlock {
            block: AttentionBlock::new(store, rng, &format!("{name}.self"), width, heads)?,
            pos_bias: Mlp::new(store, rng, &format!("{name}.pos_bias"), &[3, pos_hidden, heads], false)?,
            heads,
        })
    }

    /// Returns the refined tokens and the attention weights.
    pub fn forward(&self, g: &mut Graph, centroids: &[Point], tokens: Var) -> Result<(Var, Var)> {
        let m = centroids.len();
        if g.tape.shape(tokens)[0] != m {
            return Err(Error::Dimension {
                op: "point_transformer_block",
                lhs: g.tape.shape(tokens).to_vec(),
                rhs: vec![m],
            });
        }
        let mut offsets = Vec::with_capacity(m * m * 3);
        for a in centroids {
            for b in centroids {
                offsets.extend([b[0] - a[0], b[1] - a[1], b[2] - a[2]]);
            }
        }
        let offsets = g.tape.constant(Tensor::new([m * m, 3], offsets)?);
        let bias = self.pos_bias.forward(g, offsets)?;
        let bias = g.tape.reshape(bias, [m, m, self.heads])?;
        let bias = g.tape.permute(bias, &[2, 0, 1])?;
        self.block.forward(g, tokens, tokens, Some(bias))
    }
}

/// Neighborhood encoder for one level.
#[derive(Clone, Debug)]
pub struct SetAbstraction {
    pub mlp: Mlp,
    pub neighbors: usize,
    pub extractor: ExtractorKind,
}

impl SetAbstraction {
    /// Downsample `points` to `m_out` centroids (FPS from `start`) and
    /// encode each centroid's K-NN neighborhood. Returns the centroid
    /// indices into `points` and the `m_out × C_out` tokens.
    pub fn forward(
        &self,
        g: &mut Graph,
        points: &[Point],
        tokens: Var,
        m_out: usize,
        start: usize,
    ) -> Result<(Vec<usize>, Var)> {
        let k = self.neighbors;
        let centroid_idx = fps(points, m_out, start)?;
        let centroids: Vec<Point> = centroid_idx.iter().map(|&i| points[i]).collect();
        let nb = knn(&centroids, points, k)?;

        let mut rel = Vec::with_capacity(m_out * k * 3);
        for (q, c) in centroids.iter().enumerate() {
            for &j in nb.row(q) {
                let p = points[j];
                rel.extend([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            }
        }
        let rel = g.tape.constant(Tensor::new([m_out, k, 3], rel)?);
        let neighbor_tokens = group(&mut g.tape, tokens, &nb)?;
        let features = match self.extractor {
            ExtractorKind::SetAbstractionKnn => g.tape.concat(&[rel, neighbor_tokens], 2)?,
            ExtractorKind::GraphFeature => {
                let c_in = g.tape.shape(tokens)[1];
                let repeated: Vec<usize> = centroid_idx.iter().flat_map(|&i| std::iter::repeat_n(i, k)).collect();
                let center = g.tape.index_select(tokens, &repeated)?;
                let center = g.tape.reshape(center, [m_out, k, c_in])?;
                let edge = g.tape.sub(neighbor_tokens, center)?;
                g.tape.concat(&[center, edge, rel], 2)?
            }
        };
        let encoded = self.mlp.forward(g, features)?;
        let pooled = g.tape.reduce_max(encoded, 1)?;
        Ok((centroid_idx, pooled))
    }
}

#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub centroids: Vec<Point>,
    /// `M_l × C_l` tokens on the graph's tape.
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub branch_id: usize,
    pub levels: Vec<PyramidLevel>,
}

/// One branch's encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub params: EncoderParams,
    pub set_abstractions: Vec<SetAbstraction>,
    pub transformers: Vec<PointTransformerBlock>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, params: &EncoderParams) -> Result<Self> {
        params.validate()?;
        let mut set_abstractions = Vec::with_capacity(LEVELS);
        let mut transformers = Vec::with_capacity(LEVELS);
        for (l, lv) in params.levels.iter().enumerate() {
            set_abstractions.push(SetAbstraction {
                mlp: Mlp::new(store, rng, &format!("{name}.sa{l}.mlp"), &params.mlp_dims(l), true)?,
                neighbors: lv.neighbors,
                extractor: params.extractor,
            });
            transformers.push(PointTransformerBlock::new(
                store,
                rng,
                &format!("{name}.pt{l}"),
                lv.width,
                params.heads,
                params.pos_hidden,
            )?);
        }
        Ok(Encoder {
            params: params.clone(),
            set_abstractions,
            transformers,
        })
    }

    /// Encode a cloud into a three-level pyramid. Every level starts its
    /// FPS from index 0 of the level below, so the first input point is a
    /// centroid at every level.
    pub fn encode(&self, g: &mut Graph, cloud: &PointCloud, branch_id: usize) -> Result<FeaturePyramid> {
        let first = &self.params.levels[0];
        if cloud.len() < first.points || cloud.len() < first.neighbors {
            return Err(Error::arg(format!(
                "cloud of {} points is smaller than the first level ({} centroids, K = {})",
                cloud.len(),
                first.points,
                first.neighbors
            )));
        }
        let mut points = cloud.points().to_vec();
        let mut tokens = g.tape.constant(points_to_tensor(&points));
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let m = self.params.levels[l].points;
            let (idx, sa) = self.set_abstractions[l].forward(g, &points, tokens, m, 0)?;
            points = idx.iter().map(|&i| points[i]).collect();
            let (refined, _) = self.transformers[l].forward(g, &points, sa)?;
            tokens = refined;
            levels.push(PyramidLevel {
                centroids: points.clone(),
                tokens,
            });
        }
        Ok(FeaturePyramid { branch_id, levels })
    }
}
