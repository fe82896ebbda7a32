//! Layers built from tape operations. Each layer registers its parameters
//! in a [`ParamStore`] at construction and looks them up in a [`Graph`]
//! during the forward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let init = Init::FanIn { fan_in: in_dim };
        let weight = store.add(format!("{name}.weight"), [in_dim, out_dim], init.clone(), rng)?;
        let bias = store.add(format!("{name}.bias"), [out_dim], init, rng)?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    /// Applies to the last axis of `x`, any leading shape.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::Dimension {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 {
            x
        } else {
            g.tape.reshape(x, [rows, self.in_dim])?
        };
        let y = g.tape.matmul(flat, g.p(self.weight))?;
        let y = g.tape.add(y, g.p(self.bias))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.out_dim;
            g.tape.reshape(y, out_shape)
        }
    }

    /// Set weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.weight, self.bias] {
            let shape = store.by_id(id).tensor.shape().to_vec();
            *store.tensor_mut(id) = Tensor::zeros(shape);
        }
    }
}

/// Stack of linear layers with ReLU in between (and optionally after the
/// last one).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
        relu_last: bool,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config(format!("{name}: an MLP needs at least two widths")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, relu_last })
    }

    pub fn param_count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| Linear::param_count(w[0], w[1])).sum()
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last || self.relu_last {
                x = g.tape.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty MLP")
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), [dim], Init::Ones, rng)?;
        let beta = store.add(format!("{name}.beta"), [dim], Init::Zeros, rng)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.p(self.gamma), g.p(self.beta));
        g.tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Scaled dot-product attention with `heads` heads over width `dim`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    /// `Mq × dim`, before any residual.
    pub out: Var,
    /// `heads × Mq × Mk`, rows sum to one.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{name}: {heads} heads do not divide width {dim}"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim)?,
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim)?,
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim)?,
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim)
    }

    /// `[M, dim] → [heads, M, dim/heads]`
    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let m = g.tape.shape(x)[0];
        let x = g.tape.reshape(x, [m, self.heads, self.dim / self.heads])?;
        g.tape.permute(x, &[1, 0, 2])
    }

    /// Queries from `xq` (`Mq × dim`), keys and values from `xkv`
    /// (`Mk × dim`). `bias`, if given, is added to the `heads × Mq × Mk`
    /// scores before the softmax.
    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, bias: Option<Var>) -> Result<AttentionOutput> {
        for x in [xq, xkv] {
            let s = g.tape.shape(x);
            if s.len() != 2 || s[1] != self.dim {
                return Err(Error::config(format!(
                    "attention width {} does not match tokens of shape {:?}",
                    self.dim, s
                )));
            }
        }
        let mq = g.tape.shape(xq)[0];
        let q = self.query.forward(g, xq)?;
        let k = self.key.forward(g, xkv)?;
        let v = self.value.forward(g, xkv)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let kt = g.tape.transpose(k)?;
        let scores = g.tape.matmul(q, kt)?;
        let mut scores = g.tape.scale(scores, 1.0 / ((self.dim / self.heads) as f64).sqrt())?;
        if let Some(b) = bias {
            scores = g.tape.add(scores, b)?;
        }
        let weights = g.tape.softmax(scores)?;
        let ctx = g.tape.matmul(weights, v)?;
        let ctx = g.tape.permute(ctx, &[1, 0, 2])?;
        let ctx = g.tape.reshape(ctx, [mq, self.dim])?;
        let out = self.output.forward(g, ctx)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Attention sublayer with a residual connection followed by layer
/// normalization: `LN(xq + attn(xq, xkv))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(AttentionBlock {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        MultiHeadAttention::param_count(dim) + LayerNorm::param_count(dim)
    }

    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, bias: Option<Var>) -> Result<(Var, Var)> {
        let a = self.attn.forward(g, xq, xkv, bias)?;
        let sum = g.tape.add(xq, a.out)?;
        Ok((self.norm.forward(g, sum)?, a.weights))
    }
}
