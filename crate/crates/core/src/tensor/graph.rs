use std::collections::BTreeMap;
use std::rc::Rc;

use super::conv;
use super::param::ParamSet;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Add,
    Mul,
    Scale,
    Sum,
    MatMul,
    Permute,
    Reshape,
    Softmax,
    Gelu,
    Sigmoid,
    LayerNorm,
    Conv2d,
    ConvTranspose2d,
    Concat,
    Upsample,
    Mse,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::MatMul,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Softmax,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::LayerNorm,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::Concat,
        OpKind::Upsample,
        OpKind::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::MatMul => "matmul",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::Concat => "concat",
            OpKind::Upsample => "upsample",
            OpKind::Mse => "mse",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MatMul { a: Var, b: Var, shared_rhs: bool },
    /// `out[i] = in[index[i]]`
    Permute(Var, Rc<[u32]>),
    Reshape(Var),
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat(Var, Var),
    Upsample(Var),
    Mse {
        pred: Var,
        target: Var,
        weights: Option<Rc<[T]>>,
        denom: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Permute(..) => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::Concat(..) => OpKind::Concat,
            Op::Upsample(..) => OpKind::Upsample,
            Op::Mse { .. } => OpKind::Mse,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Parameter name to graph handle, as registered by [`Graph::params`].
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gradients produced by [`Graph::backward`]; kept for leaf nodes only.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    names: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the loss does not reach it.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradients of every named trainable leaf, keyed like the parameter set.
    pub fn into_param_grads(self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        let Gradients {
            mut grads,
            names,
            shapes,
        } = self;
        for (name, v) in names {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&shapes[v.0]));
            out.insert(name, g);
        }
        out
    }
}

/// Recorded computation. Nodes are appended in evaluation order, so the
/// record is topologically sorted by construction.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    names: Vec<(String, Var)>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of one operation kind. Only used to prove
    /// that gradient checks catch broken rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.names.push((name.into(), v));
        v
    }

    /// Registers every tensor of `params` as a trainable leaf.
    pub fn params(&mut self, params: &ParamSet<T>) -> ParamVars {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(name, t.clone())))
            .collect();
        ParamVars { vars }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn rank4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(Error::Shape(format!("{what}: expected rank 4, got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Batched matrix product `[.., t, k] x [.., k, u] -> [.., t, u]`. A rank-2
    /// right operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul: operands {sa:?} x {sb:?}")));
        }
        let (t, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, u) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        let batch_ok = shared_rhs || sa[..sa.len() - 2] == sb[..sb.len() - 2];
        if k != kb || !batch_ok {
            return Err(Error::Shape(format!("matmul: operands {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = u;
        let mut out = vec![T::zero(); batch * t * u];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_rhs {
                T::gemm(false, false, batch * t, u, k, T::one(), av, bv, T::zero(), &mut out);
            } else {
                for i in 0..batch {
                    T::gemm(
                        false,
                        false,
                        t,
                        u,
                        k,
                        T::one(),
                        &av[i * t * k..(i + 1) * t * k],
                        &bv[i * k * u..(i + 1) * k * u],
                        T::zero(),
                        &mut out[i * t * u..(i + 1) * t * u],
                    );
                }
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, Op::MatMul { a, b, shared_rhs }, &[a, b]))
    }

    /// Gathers `out[i] = x[index[i]]` into a tensor of `shape`. `index` must
    /// be a permutation of `0..numel`.
    pub fn permute(&mut self, x: Var, index: Rc<[u32]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if index.len() != src.len() || shape.iter().product::<usize>() != src.len() {
            return Err(Error::Shape(format!(
                "permute: index of {} entries for {} values into {shape:?}",
                index.len(),
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i as usize]).collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Permute(x, index), &[x]))
    }

    /// Swaps the last two extents.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose: rank {}", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let mut index = Vec::with_capacity(batch * r * c);
        for b in 0..batch {
            for j in 0..c {
                for i in 0..r {
                    index.push((b * r * c + i * c + j) as u32);
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        self.permute(x, index.into(), &shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Softmax over the last extent, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::Shape("softmax over an empty extent".into()));
        }
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            let inv = T::one() / total;
            for e in row.iter_mut() {
                *e *= inv;
            }
        }
        let out = Tensor::from_vec(v.shape(), data)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// `x * Phi(x)` with the exact normal CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_value);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_value);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Standardizes the channel vector at every `(n, h, w)` position, then
    /// applies the per-channel affine `gamma`, `beta`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "layer_norm: {c} channels, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = vec![T::zero(); n * plane];
        let mut rstd = vec![T::zero(); n * plane];
        let inv_c = T::one() / T::from_f64(c as f64);
        for b in 0..n {
            let base = b * c * plane;
            let m = &mut mean[b * plane..(b + 1) * plane];
            let r = &mut rstd[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let row = &xv[base + ch * plane..base + (ch + 1) * plane];
                for (acc, &v) in m.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            m.iter_mut().for_each(|v| *v *= inv_c);
            for ch in 0..c {
                let row = &xv[base + ch * plane..base + (ch + 1) * plane];
                for ((acc, &v), &mu) in r.iter_mut().zip(row).zip(m.iter()) {
                    *acc += (v - mu) * (v - mu);
                }
            }
            r.iter_mut().for_each(|v| *v = T::one() / (*v * inv_c + eps).sqrt());
            for ch in 0..c {
                let off = base + ch * plane;
                for p in 0..plane {
                    out[off + p] = (xv[off + p] - m[p]) * r[p] * gv[ch] + bv[ch];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Strided cross-correlation with zero padding plus per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.rank4(x, "conv2d input")?;
        let ws = self.rank4(w, "conv2d kernel")?;
        let geom = conv::ConvGeom::new(xs, ws, stride, pad)?;
        if self.shape(b) != [ws[0]] {
            return Err(Error::Shape(format!(
                "conv2d: bias {:?} for {} output channels",
                self.shape(b),
                ws[0]
            )));
        }
        let out = conv::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out = Tensor::from_vec(&geom.out_shape(), out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[x, w, b],
        ))
    }

    /// Kernel-2 stride-2 transposed convolution: exact 2x upsampling.
    /// Kernel layout `[cin, cout, 2, 2]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, cin, h, wd] = self.rank4(x, "conv_transpose2d input")?;
        let ws = self.rank4(w, "conv_transpose2d kernel")?;
        if ws[0] != cin || ws[2] != 2 || ws[3] != 2 {
            return Err(Error::Shape(format!(
                "conv_transpose2d: kernel {ws:?} for {cin} input channels (need [cin, cout, 2, 2])"
            )));
        }
        let cout = ws[1];
        if self.shape(b) != [cout] {
            return Err(Error::Shape(format!(
                "conv_transpose2d: bias {:?} for {cout} output channels",
                self.shape(b)
            )));
        }
        let out = conv::conv_t2_forward(
            [n, cin, h, wd],
            cout,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let out = Tensor::from_vec(&[n, cout, 2 * h, 2 * wd], out)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b }, &[x, w, b]))
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.rank4(a, "concat")?;
        let [nb, cb, hb, wb] = self.rank4(b, "concat")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = ha * wa;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..na {
            data.extend_from_slice(&av[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&bv[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::from_vec(&[na, ca + cb, ha, wa], data)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4(x, "upsample")?;
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, 2 * h, 2 * w], data)?;
        Ok(self.push(out, Op::Upsample(x), &[x]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let n = self.value(pred).numel();
        self.mse_impl(pred, target, None, T::from_f64(n as f64))
    }

    /// Squared error averaged over the elements where `weights` is non-zero,
    /// each term scaled by its weight.
    pub fn mse_weighted(&mut self, pred: Var, target: Var, weights: Rc<[T]>) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        if weights.len() != self.value(pred).numel() {
            return Err(Error::Shape(format!(
                "mse: {} weights for {} values",
                weights.len(),
                self.value(pred).numel()
            )));
        }
        let denom: T = weights.iter().copied().sum();
        if denom <= T::zero() {
            return Err(Error::Shape("mse: weights sum to zero".into()));
        }
        self.mse_impl(pred, target, Some(weights), denom)
    }

    fn mse_impl(&mut self, pred: Var, target: Var, weights: Option<Rc<[T]>>, denom: T) -> Result<Var> {
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let mut acc = 0.0f64;
        for (i, (&a, &b)) in p.iter().zip(t).enumerate() {
            let d = (a - b).as_f64();
            let w = weights.as_ref().map_or(1.0, |w| w[i].as_f64());
            acc += w * d * d;
        }
        let out = Tensor::scalar(T::from_f64(acc / denom.as_f64()));
        Ok(self.push(
            out,
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            },
            &[pred, target],
        ))
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must hold a single value, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = Sink {
                graph: self,
                grads: &mut grads,
                fault: self.fault.filter(|k| Some(*k) == node.op.kind()),
            };
            self.backprop(Var(i), &g, &mut sink)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            names: self.names.clone(),
            shapes,
        })
    }

    fn backprop(&self, out: Var, g: &Tensor<T>, sink: &mut Sink<'_, T>) -> Result<()> {
        let node = &self.nodes[out.0];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink.add(*a, g.clone());
                sink.add(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.needs(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                    sink.add(*a, Tensor::from_vec(va.shape(), d)?);
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                    sink.add(*b, Tensor::from_vec(vb.shape(), d)?);
                }
            }
            Op::Scale(a, s) => sink.add(*a, g.map(|v| v * *s)),
            Op::Sum(a) => {
                sink.add(*a, Tensor::full(self.shape(*a), gd[0]));
            }
            Op::MatMul { a, b, shared_rhs } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (t, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let u = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); av.len()];
                    if *shared_rhs {
                        T::gemm(false, true, batch * t, k, u, T::one(), gd, bv, T::zero(), &mut ga);
                    } else {
                        for i in 0..batch {
                            T::gemm(
                                false,
                                true,
                                t,
                                k,
                                u,
                                T::one(),
                                &gd[i * t * u..(i + 1) * t * u],
                                &bv[i * k * u..(i + 1) * k * u],
                                T::zero(),
                                &mut ga[i * t * k..(i + 1) * t * k],
                            );
                        }
                    }
                    sink.add(*a, Tensor::from_vec(sa, ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    if *shared_rhs {
                        T::gemm(true, false, k, u, batch * t, T::one(), av, gd, T::zero(), &mut gb);
                    } else {
                        for i in 0..batch {
                            T::gemm(
                                true,
                                false,
                                k,
                                u,
                                t,
                                T::one(),
                                &av[i * t * k..(i + 1) * t * k],
                                &gd[i * t * u..(i + 1) * t * u],
                                T::zero(),
                                &mut gb[i * k * u..(i + 1) * k * u],
                            );
                        }
                    }
                    sink.add(*b, Tensor::from_vec(sb, gb)?);
                }
            }
            Op::Permute(x, index) => {
                let mut gx = vec![T::zero(); gd.len()];
                for (&src, &gv) in index.iter().zip(gd) {
                    gx[src as usize] += gv;
                }
                sink.add(*x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::Reshape(x) => {
                sink.add(*x, g.clone().reshape(self.shape(*x))?);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(gd.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                sink.add(*x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = xv.iter().zip(gd).map(|(&v, &gv)| gv * gelu_grad(v)).collect();
                sink.add(*x, Tensor::from_vec(self.shape(*x), d)?);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = y
                    .iter()
                    .zip(gd)
                    .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                    .collect();
                sink.add(*x, Tensor::from_vec(self.shape(*x), d)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let [n, c, h, w] = self.rank4(*x, "layer_norm")?;
                let plane = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); xv.len()];
                let inv_c = T::one() / T::from_f64(c as f64);
                let mut s1 = vec![T::zero(); plane];
                let mut s2 = vec![T::zero(); plane];
                for b in 0..n {
                    let base = b * c * plane;
                    let m = &mean[b * plane..(b + 1) * plane];
                    let r = &rstd[b * plane..(b + 1) * plane];
                    s1.iter_mut().for_each(|v| *v = T::zero());
                    s2.iter_mut().for_each(|v| *v = T::zero());
                    for ch in 0..c {
                        let off = base + ch * plane;
                        for p in 0..plane {
                            let xhat = (xv[off + p] - m[p]) * r[p];
                            let go = gd[off + p];
                            ggamma[ch] += go * xhat;
                            gbeta[ch] += go;
                            let gxhat = go * gv[ch];
                            s1[p] += gxhat;
                            s2[p] += gxhat * xhat;
                        }
                    }
                    for ch in 0..c {
                        let off = base + ch * plane;
                        for p in 0..plane {
                            let xhat = (xv[off + p] - m[p]) * r[p];
                            let gxhat = gd[off + p] * gv[ch];
                            gx[off + p] = r[p] * (gxhat - (s1[p] + xhat * s2[p]) * inv_c);
                        }
                    }
                }
                if self.needs(*x) {
                    sink.add(*x, Tensor::from_vec(&[n, c, h, w], gx)?);
                }
                if self.needs(*gamma) {
                    sink.add(*gamma, Tensor::from_vec(&[c], ggamma)?);
                }
                if self.needs(*beta) {
                    sink.add(*beta, Tensor::from_vec(&[c], gbeta)?);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.rank4(*x, "conv2d")?;
                let ws = self.rank4(*w, "conv2d")?;
                let geom = conv::ConvGeom::new(xs, ws, *stride, *pad)?;
                let grads = conv::conv2d_backward(
                    &geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    [self.needs(*x), self.needs(*w), self.needs(*b)],
                );
                if let Some(gx) = grads.x {
                    sink.add(*x, Tensor::from_vec(&xs, gx)?);
                }
                if let Some(gw) = grads.w {
                    sink.add(*w, Tensor::from_vec(&ws, gw)?);
                }
                if let Some(gb) = grads.b {
                    sink.add(*b, Tensor::from_vec(&[ws[0]], gb)?);
                }
            }
            Op::ConvTranspose2d { x, w, b } => {
                let xs = self.rank4(*x, "conv_transpose2d")?;
                let ws = self.rank4(*w, "conv_transpose2d")?;
                let grads = conv::conv_t2_backward(
                    xs,
                    ws[1],
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    [self.needs(*x), self.needs(*w), self.needs(*b)],
                );
                if let Some(gx) = grads.x {
                    sink.add(*x, Tensor::from_vec(&xs, gx)?);
                }
                if let Some(gw) = grads.w {
                    sink.add(*w, Tensor::from_vec(&ws, gw)?);
                }
                if let Some(gb) = grads.b {
                    sink.add(*b, Tensor::from_vec(&[ws[1]], gb)?);
                }
            }
            Op::Concat(a, b) => {
                let ca = self.shape(*a)[1];
                let c = g.shape()[1];
                sink.add(*a, g.slice_channels(0, ca));
                sink.add(*b, g.slice_channels(ca, c));
            }
            Op::Upsample(x) => {
                let [n, c, h, w] = self.rank4(*x, "upsample")?;
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                sink.add(*x, Tensor::from_vec(&[n, c, h, w], gx)?);
            }
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let k = T::from_f64(2.0) * gd[0] / *denom;
                let d: Vec<T> = p
                    .iter()
                    .zip(t)
                    .enumerate()
                    .map(|(i, (&a, &b))| {
                        let w = weights.as_ref().map_or(T::one(), |w| w[i]);
                        k * w * (a - b)
                    })
                    .collect();
                if self.needs(*target) {
                    let neg = d.iter().map(|&v| -v).collect();
                    sink.add(*target, Tensor::from_vec(self.shape(*target), neg)?);
                }
                if self.needs(*pred) {
                    sink.add(*pred, Tensor::from_vec(self.shape(*pred), d)?);
                }
            }
        }
        Ok(())
    }
}

/// Accumulates input gradients during the reverse sweep.
struct Sink<'a, T> {
    graph: &'a Graph<T>,
    grads: &'a mut Vec<Option<Tensor<T>>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Sink<'_, T> {
    fn add(&mut self, v: Var, mut t: Tensor<T>) {
        if !self.graph.needs(v) {
            return;
        }
        if self.fault.is_some() {
            let (k, off) = (T::from_f64(1.5), T::from_f64(1e-2));
            t.data_mut().iter_mut().for_each(|e| *e = *e * k + off);
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }
}

pub(crate) fn gelu_value<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub(crate) fn sigmoid_value<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
