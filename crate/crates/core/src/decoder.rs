//! Point generation from fused features, and the merge with the partial
//! input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedFeatures;
use crate::geometry::{fps, points_to_tensor, tensor_to_points, Point};
use crate::nn::{AttentionBlock, LayerNorm, Linear, Mlp};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Learned queries cross-attend to the fused tokens; an MLP head maps
    /// each query to a point.
    #[default]
    QueryCrossAttention,
    /// The same, followed by a self-attention refinement stage that
    /// predicts per-point offsets.
    TransformerUpsampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub kind: DecoderKind,
    /// Number of predicted points (N_miss).
    pub queries: usize,
    pub heads: usize,
    pub width: usize,
    /// Cross-attention layers.
    pub layers: usize,
    /// Width of the fused tokens.
    pub memory_width: usize,
    /// Points after the merge (N_out).
    pub output_points: usize,
}

impl DecoderParams {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 {
            return Err(Error::config("decoder needs at least one query"));
        }
        if self.width < 2 || self.layers == 0 || self.memory_width == 0 || self.output_points == 0 {
            return Err(Error::config(
                "decoder widths, layer count and output size must be positive",
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "decoder: {} heads do not divide width {}",
                self.heads, self.width
            )));
        }
        Ok(())
    }

    fn head_dims(&self) -> [usize; 3] {
        [self.width, self.width / 2, 3]
    }

    fn ffn_dims(&self) -> [usize; 3] {
        [self.width, 2 * self.width, self.width]
    }

    pub fn param_count(&self) -> usize {
        let d = self.width;
        let layer = AttentionBlock::param_count(d) + Mlp::param_count(&self.ffn_dims()) + LayerNorm::param_count(d);
        let base = self.queries * d
            + Linear::param_count(self.memory_width, d)
            + self.layers * layer
            + Mlp::param_count(&self.head_dims());
        match self.kind {
            DecoderKind::QueryCrossAttention => base,
            DecoderKind::TransformerUpsampling => {
                base + Linear::param_count(3, d) + AttentionBlock::param_count(d) + Mlp::param_count(&self.head_dims())
            }
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    cross: AttentionBlock,
    ffn: Mlp,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct Refinement {
    embed: Linear,
    attn: AttentionBlock,
    offset: Mlp,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub params: DecoderParams,
    queries: ParamId,
    memory: Linear,
    layers: Vec<DecoderLayer>,
    head: Mlp,
    refinement: Option<Refinement>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, params: &DecoderParams) -> Result<Self> {
        params.validate()?;
        let d = params.width;
        let queries = store.add(
            format!("{name}.queries"),
            [params.queries, d],
            Init::FanIn { fan_in: 1 },
            rng,
        )?;
        let memory = Linear::new(store, rng, &format!("{name}.memory"), params.memory_width, d)?;
        let layers = (0..params.layers)
            .map(|i| {
                Ok(DecoderLayer {
                    cross: AttentionBlock::new(store, rng, &format!("{name}.layer{i}.cross"), d, params.heads)?,
                    ffn: Mlp::new(store, rng, &format!("{name}.layer{i}.ffn"), &params.ffn_dims(), false)?,
                    norm: LayerNorm::new(store, rng, &format!("{name}.layer{i}.norm"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        let head = Mlp::new(store, rng, &format!("{name}.head"), &params.head_dims(), false)?;
        let refinement = match params.kind {
            DecoderKind::QueryCrossAttention => None,
            DecoderKind::TransformerUpsampling => Some(Refinement {
                embed: Linear::new(store, rng, &format!("{name}.refine.embed"), 3, d)?,
                attn: AttentionBlock::new(store, rng, &format!("{name}.refine.attn"), d, params.heads)?,
                offset: Mlp::new(store, rng, &format!("{name}.refine.offset"), &params.head_dims(), false)?,
            }),
        };
        Ok(Decoder {
            params: params.clone(),
            queries,
            memory,
            layers,
            head,
            refinement,
        })
    }

    /// Zero every layer that emits coordinates, so all predicted points sit
    /// at the origin.
    pub fn zero_coordinate_head(&self, store: &mut ParamStore) {
        self.head.last().zero(store);
        if let Some(r) = &self.refinement {
            r.offset.last().zero(store);
        }
    }

    /// Predict `N_miss × 3` coordinates from the fused tokens.
    pub fn decode_missing(&self, g: &mut Graph, fused: &FusedFeatures) -> Result<Var> {
        let memory_shape = g.tape.shape(fused.concat).to_vec();
        if memory_shape.len() != 2 || memory_shape[0] == 0 || memory_shape[1] != self.params.memory_width {
            return Err(Error::config(format!(
                "decoder expects fused tokens of width {}, got shape {:?}",
                self.params.memory_width, memory_shape
            )));
        }
        let memory = self.memory.forward(g, fused.concat)?;
        let mut x = g.p(self.queries);
        for layer in &self.layers {
            let (y, _) = layer.cross.forward(g, x, memory, None)?;
            let f = layer.ffn.forward(g, y)?;
            let s = g.tape.add(y, f)?;
            x = layer.norm.forward(g, s)?;
        }
        let coarse = self.head.forward(g, x)?;
        match &self.refinement {
            None => Ok(coarse),
            Some(r) => {
                let e = r.embed.forward(g, coarse)?;
                let e = g.tape.add(e, x)?;
                let (h, _) = r.attn.forward(g, e, e, None)?;
                let offset = r.offset.forward(g, h)?;
                g.tape.add(coarse, offset)
            }
        }
    }
}

/// Result of [`merge_and_resample`].
pub struct Merged {
    /// `n_out × 3`.
    pub points: Var,
    /// Index of each output point in `partial ⊕ missing`, in FPS order.
    pub selection: Vec<usize>,
}

/// Concatenate the (constant) partial cloud with the predicted points and
/// keep `n_out` of them by farthest point sampling from `start`.
///
/// The selection itself is not differentiated; gradients reach the
/// selected predicted points only.
pub fn merge_and_resample(
    tape: &mut Tape,
    partial: &[Point],
    missing: Var,
    n_out: usize,
    start: usize,
) -> Result<Merged> {
    let predicted = tensor_to_points(tape.value(missing))?;
    let total = partial.len() + predicted.len();
    if n_out == 0 || n_out > total {
        return Err(Error::arg(format!(
            "cannot resample {n_out} points from {} partial + {} predicted",
            partial.len(),
            predicted.len()
        )));
    }
    let mut union = partial.to_vec();
    union.extend_from_slice(&predicted);
    let selection = fps(&union, n_out, start)?;
    let joined = if partial.is_empty() {
        missing
    } else {
        let p = tape.constant(points_to_tensor(partial));
        tape.concat(&[p, missing], 0)?
    };
    let points = tape.index_select(joined, &selection)?;
    Ok(Merged { points, selection })
}
