//! Self-fusion of branch pyramids.
//!
//! For every ordered branch pair `(i, j)` and every level, a fusion block
//! lets branch `i`'s tokens query branch `j`'s (cross-attention), refines
//! the result with self-attention, and projects it to a common width so
//! token sets from all levels can be concatenated for the decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::geometry::points_to_tensor;
use crate::nn::{AttentionBlock, Linear, Mlp};
use crate::tensor::{Graph, ParamStore, Var};

/// Fused token width.
pub const FUSION_WIDTH: usize = 512;

/// Which ordered branch pairs get a fusion block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Only `i → j` with `i < j`.
    Single,
    /// Both directions of every pair.
    #[default]
    Double,
}

impl FusionMode {
    /// Ordered `(source, context)` pairs in lexicographic order.
    pub fn pairs(self, branches: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..branches {
            for j in 0..branches {
                let keep = match self {
                    FusionMode::Single => i < j,
                    FusionMode::Double => i != j,
                };
                if keep {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub branches: usize,
    /// Token width of each pyramid level.
    pub level_widths: Vec<usize>,
    pub heads: usize,
    /// Output width of every block's projection.
    pub width: usize,
    /// Number of stacked (cross, self) attention pairs per block.
    pub depth: usize,
    pub mode: FusionMode,
    /// Add a learned function of the centroid positions to each token.
    pub positional_encoding: bool,
    pub pos_hidden: usize,
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.branches < 2 {
            return Err(Error::config(format!(
                "fusion needs at least two branches, got {}",
                self.branches
            )));
        }
        if self.level_widths.len() != LEVELS {
            return Err(Error::config(format!("fusion expects {LEVELS} levels")));
        }
        if self.heads == 0 || self.level_widths.iter().any(|w| w % self.heads != 0) {
            return Err(Error::config("fusion heads must divide every level width"));
        }
        if self.depth == 0 || self.width == 0 || self.pos_hidden == 0 {
            return Err(Error::config("fusion depth, width and pos_hidden must be positive"));
        }
        Ok(())
    }

    pub fn token_sets(&self) -> usize {
        self.mode.pairs(self.branches).len() * LEVELS
    }

    fn block_params(&self, c: usize) -> usize {
        self.depth * 2 * AttentionBlock::param_count(c) + Linear::param_count(c, self.width)
    }

    pub fn param_count(&self) -> usize {
        let pairs = self.mode.pairs(self.branches).len();
        let blocks: usize = self.level_widths.iter().map(|&c| self.block_params(c)).sum();
        let pe: usize = if self.positional_encoding {
            self.level_widths
                .iter()
                .map(|&c| Mlp::param_count(&[3, self.pos_hidden, c]))
                .sum::<usize>()
                * self.branches
        } else {
            0
        };
        pairs * blocks + pe
    }
}

/// Cross-attention then self-attention (repeated `depth` times), then a
/// linear projection to the fusion width.
#[derive(Clone, Debug)]
pub struct SelfFusionBlock {
    pub layers: Vec<(AttentionBlock, AttentionBlock)>,
    pub projection: Linear,
}

pub struct BlockOutput {
    pub tokens: Var,
    /// Attention weights of every cross and self layer, in order.
    pub weights: Vec<Var>,
}

impl SelfFusionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
        depth: usize,
        out_width: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|d| {
                Ok((
                    AttentionBlock::new(store, rng, &format!("{name}.{d}.cross"), width, heads)?,
                    AttentionBlock::new(store, rng, &format!("{name}.{d}.self"), width, heads)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(SelfFusionBlock {
            layers,
            projection: Linear::new(store, rng, &format!("{name}.proj"), width, out_width)?,
        })
    }

    /// `src` queries `ctx`; both `M × C` with equal `C`.
    pub fn forward(&self, g: &mut Graph, src: Var, ctx: Var) -> Result<BlockOutput> {
        let (cs, cc) = (g.tape.shape(src)[1], g.tape.shape(ctx)[1]);
        if cs != cc {
            return Err(Error::config(format!(
                "fusion width mismatch: source {cs}, context {cc}"
            )));
        }
        let mut x = src;
        let mut weights = Vec::with_capacity(2 * self.layers.len());
        for (cross, selfattn) in &self.layers {
            let (y, wc) = cross.forward(g, x, ctx, None)?;
            let (y, ws) = selfattn.forward(g, y, y, None)?;
            weights.extend([wc, ws]);
            x = y;
        }
        let tokens = self.projection.forward(g, x)?;
        Ok(BlockOutput { tokens, weights })
    }
}

#[derive(Clone, Debug)]
pub struct TokenSet {
    pub source: usize,
    pub context: usize,
    pub level: usize,
    /// `M_l × width`.
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct FusedFeatures {
    pub token_sets: Vec<TokenSet>,
    /// All token sets stacked along the token axis, in `token_sets` order.
    pub concat: Var,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub params: FusionParams,
    /// Per branch, per level.
    pub positional: Vec<Vec<Mlp>>,
    /// `(source, context, blocks per level)` in pair order.
    pub blocks: Vec<(usize, usize, Vec<SelfFusionBlock>)>,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, params: &FusionParams) -> Result<Self> {
        params.validate()?;
        let positional = if params.positional_encoding {
            (0..params.branches)
                .map(|b| {
                    params
                        .level_widths
                        .iter()
                        .enumerate()
                        .map(|(l, &c)| {
                            Mlp::new(
                                store,
                                rng,
                                &format!("{name}.pe.{b}.{l}"),
                                &[3, params.pos_hidden, c],
                                false,
                            )
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let blocks = params
            .mode
            .pairs(params.branches)
            .into_iter()
            .map(|(i, j)| {
                let per_level = params
                    .level_widths
                    .iter()
                    .enumerate()
                    .map(|(l, &c)| {
                        SelfFusionBlock::new(
                            store,
                            rng,
                            &format!("{name}.block.{i}_{j}.{l}"),
                            c,
                            params.heads,
                            params.depth,
                            params.width,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((i, j, per_level))
            })
            .collect::<Result<_>>()?;
        Ok(Fusion {
            params: params.clone(),
            positional,
            blocks,
        })
    }

    /// `tokens[l] += MLP_l(centroids[l])` for one branch. Identity when
    /// positional encoding is disabled.
    pub fn add_positional_encoding(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        if !self.params.positional_encoding {
            return Ok(pyramid.clone());
        }
        let mlps = self
            .positional
            .get(pyramid.branch_id)
            .ok_or_else(|| Error::config(format!("no positional encoding for branch {}", pyramid.branch_id)))?;
        let mut out = pyramid.clone();
        for (level, mlp) in out.levels.iter_mut().zip(mlps) {
            let pos = g.tape.constant(points_to_tensor(&level.centroids));
            let offset = mlp.forward(g, pos)?;
            level.tokens = g.tape.add(level.tokens, offset)?;
        }
        Ok(out)
    }

    /// Run every fusion block on already position-encoded pyramids.
    pub fn fuse(&self, g: &mut Graph, pyramids: &[FeaturePyramid]) -> Result<FusedFeatures> {
        if pyramids.len() != self.params.branches {
            return Err(Error::config(format!(
                "fusion built for {} branches, got {} pyramids",
                self.params.branches,
                pyramids.len()
            )));
        }
        for p in pyramids {
            if p.levels.len() != LEVELS {
                return Err(Error::config("pyramids must have three levels"));
            }
        }
        let mut token_sets = Vec::with_capacity(self.params.token_sets());
        for (i, j, per_level) in &self.blocks {
            for (l, block) in per_level.iter().enumerate() {
                let src = pyramids[*i].levels[l].tokens;
                let ctx = pyramids[*j].levels[l].tokens;
                let out = block.forward(g, src, ctx)?;
                token_sets.push(TokenSet {
                    source: *i,
                    context: *j,
                    level: l,
                    tokens: out.tokens,
                });
            }
        }
        let parts: Vec<Var> = token_sets.iter().map(|t| t.tokens).collect();
        let concat = g.tape.concat(&parts, 0)?;
        Ok(FusedFeatures { token_sets, concat })
    }

    /// Positional encoding followed by [`Fusion::fuse`].
    pub fn fuse_branches(&self, g: &mut Graph, pyramids: &[FeaturePyramid]) -> Result<FusedFeatures> {
        let encoded = pyramids
            .iter()
            .map(|p| self.add_positional_encoding(g, p))
            .collect::<Result<Vec<_>>>()?;
        self.fuse(g, &encoded)
    }
}
