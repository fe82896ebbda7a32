//! Differentiable operations.
//!
//! Each forward method on [`Tape`] validates shapes, computes the value and
//! records an [`Op`] holding the parent ids plus whatever its backward rule
//! needs beyond the parent values (argmax positions, normalization stats).

use super::gemm::{gemm_acc, MatRef};
use super::tape::{Node, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// User-defined operation with a hand-written backward rule.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the tape only needs the vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// Gradient contribution for each input (same order as recorded), or
    /// `None` for inputs that receive no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;

    /// Floating point operations attributed to one forward evaluation.
    fn flops(&self, _inputs: &[&Tensor], _output: &Tensor) -> u64 {
        0
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        /// (a offset, b offset) of every output batch.
        batches: Vec<(usize, usize)>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Relu {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    ReduceMax {
        a: usize,
        argmax: Vec<usize>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    IndexSelect {
        a: usize,
        indices: Vec<usize>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    pub fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Softmax { a }
            | Op::Narrow { a, .. }
            | Op::ReduceMax { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::IndexSelect { a, .. } => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub fn flops(&self, nodes: &[Node], out: &Tensor) -> u64 {
        match self {
            Op::MatMul { a, .. } => {
                let k = *nodes[*a].value.shape().last().unwrap() as u64;
                2 * k * out.numel() as u64
            }
            Op::Softmax { .. } | Op::LayerNorm { .. } => 5 * out.numel() as u64,
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
                op.flops(&ins, out)
            }
            _ => 0,
        }
    }

    /// Vector-Jacobian products for every parent.
    pub fn backward(
        &self,
        nodes: &[Node],
        out: &Tensor,
        g: &[f64],
        precision: super::Precision,
    ) -> Vec<(usize, Vec<f64>)> {
        let val = |i: usize| &nodes[i].value;
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, batches } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = mat_dims(av);
                let n = bv.shape()[bv.rank() - 1];
                let mut ga = vec![0.0; av.numel()];
                let mut gb = vec![0.0; bv.numel()];
                for (bi, &(ao, bo)) in batches.iter().enumerate() {
                    let gm = MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n);
                    let am = MatRef::row_major(&av.data()[ao..ao + m * k], m, k);
                    let bm = MatRef::row_major(&bv.data()[bo..bo + k * n], k, n);
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    gemm_acc(precision, gm, bm.t(), &mut ga[ao..ao + m * k]);
                    gemm_acc(precision, am.t(), gm, &mut gb[bo..bo + k * n]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, reduce_leading(g, val(*b).numel()))],
            Op::Sub { a, b } => {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                vec![(*a, g.to_vec()), (*b, reduce_leading(&neg, val(*b).numel()))]
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let nb = bd.len();
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bd[i % nb]).collect();
                let gab: Vec<f64> = g.iter().zip(ad).map(|(gi, ai)| gi * ai).collect();
                vec![(*a, ga), (*b, reduce_leading(&gab, nb))]
            }
            Op::Scale { a, factor } => vec![(*a, g.iter().map(|v| v * factor).collect())],
            Op::Relu { a } => {
                let ad = val(*a).data();
                vec![(
                    *a,
                    g.iter()
                        .zip(ad)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Softmax { a } => {
                let n = *out.shape().last().unwrap();
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out_r) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in out_r.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![(*a, gx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma).data();
                let c = gam.len();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for (r, ((grow, hrow), xrow)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..c {
                        gg[j] += grow[j] * hrow[j];
                        gbeta[j] += grow[j];
                        let gh = grow[j] * gam[j];
                        mean_gh += gh;
                        mean_ghx += gh * hrow[j];
                    }
                    mean_gh /= c as f64;
                    mean_ghx /= c as f64;
                    for j in 0..c {
                        let gh = grow[j] * gam[j];
                        xrow[j] = rstd[r] * (gh - mean_gh - hrow[j] * mean_ghx);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let width = val(p).shape()[*axis] * inner;
                        let mut gp = Vec::with_capacity(outer * width);
                        for o in 0..outer {
                            let s = o * total + offset;
                            gp.extend_from_slice(&g[s..s + width]);
                        }
                        offset += width;
                        (p, gp)
                    })
                    .collect()
            }
            Op::Narrow { a, axis, start } => {
                let src = val(*a).shape();
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let src_w = src[*axis] * inner;
                let w = out.shape()[*axis] * inner;
                let mut ga = vec![0.0; val(*a).numel()];
                for o in 0..outer {
                    let s = o * src_w + start * inner;
                    ga[s..s + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![(*a, ga)]
            }
            Op::ReduceMax { a, argmax } => {
                let mut ga = vec![0.0; val(*a).numel()];
                for (gi, &src) in g.iter().zip(argmax) {
                    ga[src] += gi;
                }
                vec![(*a, ga)]
            }
            Op::Sum { a } => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::Mean { a } => {
                let n = val(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Reshape { a } => vec![(*a, g.to_vec())],
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                vec![(*a, permute_data(g, out.shape(), &inverse))]
            }
            Op::IndexSelect { a, indices } => {
                let av = val(*a);
                let row = av.numel() / av.shape()[0];
                let mut ga = vec![0.0; av.numel()];
                for (k, &src) in indices.iter().enumerate() {
                    for (d, s) in ga[src * row..(src + 1) * row]
                        .iter_mut()
                        .zip(&g[k * row..(k + 1) * row])
                    {
                        *d += s;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
                op.backward(&ins, out, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, &i)| gi.map(|gi| (i, gi)))
                    .collect()
            }
        }
    }
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    let r = t.rank();
    (t.shape()[r - 2], t.shape()[r - 1])
}

/// Sum a gradient of `g.len()` elements down to the trailing `n` elements
/// (inverse of repeating a suffix-shaped operand over leading axes).
fn reduce_leading(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output of permuting `data` (laid out as `shape`) by `axes`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return data.to_vec();
    }
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (n_last, s_last) = (out_shape[last], step[last]);
    let mut base = 0usize;
    loop {
        let mut p = base;
        for _ in 0..n_last {
            out.push(data[p]);
            p += s_last;
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn suffix_compatible(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl Tape {
    fn val(&self, v: Var) -> Result<&Tensor> {
        let id = self.check(v)?;
        Ok(&self.nodes[id].value)
    }

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]`.
    ///
    /// Leading batch axes broadcast in the usual right-aligned way (equal
    /// extents or extent 1); a rank-2 operand is shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        let dim_err = || Error::Dimension {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.rank() < 2 || bv.rank() < 2 {
            return Err(dim_err());
        }
        let (m, k) = mat_dims(av);
        let (k2, n) = mat_dims(bv);
        if k != k2 {
            return Err(dim_err());
        }
        let ab = &av.shape()[..av.rank() - 2];
        let bb = &bv.shape()[..bv.rank() - 2];
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(dim_err());
            }
            batch_shape.push(x.max(y));
        }
        let (sa, sb) = (strides(&pa), strides(&pb));
        let n_batches: usize = batch_shape.iter().product();
        let mut batches = Vec::with_capacity(n_batches);
        let mut idx = vec![0usize; rank];
        for _ in 0..n_batches {
            let (mut ao, mut bo) = (0, 0);
            for ax in 0..rank {
                if pa[ax] != 1 {
                    ao += idx[ax] * sa[ax];
                }
                if pb[ax] != 1 {
                    bo += idx[ax] * sb[ax];
                }
            }
            batches.push((ao * m * k, bo * k * n));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < batch_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut data = vec![0.0; n_batches * m * n];
        for (bi, &(ao, bo)) in batches.iter().enumerate() {
            gemm_acc(
                self.precision(),
                MatRef::row_major(&av.data()[ao..ao + m * k], m, k),
                MatRef::row_major(&bv.data()[bo..bo + k * n], k, n),
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.id,
                b: b.id,
                batches,
            },
        ))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        if !suffix_compatible(av.shape(), bv.shape()) {
            return Err(Error::Dimension {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let nb = bv.numel();
        let bd = bv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + b`, where `b`'s shape must equal a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a: a.id, b: b.id }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a: a.id, b: b.id }))
    }

    /// Elementwise product with the same suffix rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a: a.id, b: b.id }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = self.val(a)?;
        let data = av.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale { a: a.id, factor }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a)?;
        let data = av.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Relu { a: a.id }))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a)?;
        let n = *av.shape().last().ok_or_else(|| Error::arg("softmax of a scalar"))?;
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { a: a.id }))
    }

    /// Normalize each last-axis slice to zero mean and unit population
    /// variance (plus `eps`), then apply `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::arg(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (xv, gv, bv) = (self.val(x)?, self.val(gamma)?, self.val(beta)?);
        let c = *xv.shape().last().ok_or_else(|| Error::arg("layer_norm of a scalar"))?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.numel() / c;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                data.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let shape0 = self.val(*first)?.shape().to_vec();
        if axis >= shape0.len() {
            return Err(Error::Dimension {
                op: "concat",
                lhs: shape0,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.val(p)?.shape();
            let conforms =
                s.len() == shape0.len() && s.iter().zip(&shape0).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !conforms {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: shape0,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.val(p)?;
                let w = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = shape0;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.val(a)?;
        let shape = av.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                lhs: shape.to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_w = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = o * src_w + start * inner;
            data.extend_from_slice(&av.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Narrow { a: a.id, axis, start }))
    }

    /// Split into consecutive pieces of the given sizes along `axis`.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Maximum over `axis` (removed from the shape). Gradient goes to the
    /// first maximal element along the axis.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.val(a)?;
        let shape = av.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "reduce_max",
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let d = av.data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for j in 1..len {
                    let p = base + j * inner;
                    if d[p] > d[best] {
                        best = p;
                    }
                }
                data.push(d[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::ReduceMax { a: a.id, argmax }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a)?.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: a.id }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a)?;
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean { a: a.id }))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.val(a)?.reshaped(shape)?;
        Ok(self.push_exact(value, Op::Reshape { a: a.id }))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.val(a)?;
        let rank = av.rank();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank
            && axes
                .iter()
                .all(|&ax| ax < rank && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(Error::Dimension {
                op: "permute",
                lhs: av.shape().to_vec(),
                rhs: axes.to_vec(),
            });
        }
        let data = permute_data(av.data(), av.shape(), axes);
        let shape: Vec<usize> = axes.iter().map(|&ax| av.shape()[ax]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                a: a.id,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.val(a)?.rank();
        if rank < 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: self.val(a)?.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Gather entries of the first axis. Repeated indices are allowed; their
    /// gradients add up.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.val(a)?;
        if av.rank() == 0 || indices.is_empty() {
            return Err(Error::arg("index_select needs a non-scalar source and indices"));
        }
        let rows = av.shape()[0];
        let row = av.numel() / rows;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::arg(format!("index {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&av.data()[i * row..(i + 1) * row]);
        }
        let mut shape = av.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::IndexSelect {
                a: a.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Record an operation whose forward `value` was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Result<Var> {
        let inputs = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        Ok(self.push(value, Op::Custom { inputs, op }))
    }
}
