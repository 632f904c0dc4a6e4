//! Reverse-mode automatic differentiation over a creation-ordered tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards is always a
//! valid reverse topological order. Gradients from several consumers of one
//! node are summed in tape order, which keeps accumulation deterministic.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, BnSaved, ConvDims};
use crate::param::{Param, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied differentiable op. The graph stores the forward value;
/// `backward` maps the upstream gradient to one gradient per input.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>)
        -> Vec<Tensor<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Depthwise {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    BnEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Ln(..) => "ln",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::MatMul(..) => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::BnTrain { .. } => "batch_norm",
            Op::BnEval { .. } => "batch_norm_eval",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::Upsample { .. } => "upsample_nearest2x",
            Op::Concat { .. } => "concat_channels",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of one forward computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn conv_dims(op: &'static str, x: &[usize], w: &[usize]) -> Result<ConvDims> {
    if x.len() != 4 {
        return Err(Error::InvalidShape {
            shape: x.to_vec(),
            reason: format!("{op} expects a B×C×H×W input"),
        });
    }
    Ok(ConvDims {
        batch: x[0],
        c_in: x[1],
        c_out: w[0],
        height: x[2],
        width: x[3],
        kernel: *w.last().unwrap_or(&1),
    })
}

/// Shape contract for the elementwise binary ops: equal shapes, or one side
/// holds a single element.
fn broadcast_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

#[inline]
fn at<T: Scalar>(t: &Tensor<T>, i: usize) -> T {
    let d = t.data();
    if d.len() == 1 {
        d[0]
    } else {
        d[i]
    }
}

/// Folds a full-size gradient back onto an operand that may have been broadcast.
fn unbroadcast<T: Scalar>(target: &Tensor<T>, grad: Vec<T>) -> Tensor<T> {
    if target.len() == 1 && grad.len() != 1 {
        let s: T = grad.into_iter().sum();
        Tensor::full(target.shape(), s)
    } else {
        Tensor::new(target.shape().to_vec(), grad).expect("gradient matches operand")
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, false)
    }

    /// A free leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Binds a parameter; repeated calls return the same node so that
    /// multiple uses accumulate into one gradient.
    pub fn param(&mut self, p: &Param<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(&p.id()) {
            return Ok(v);
        }
        let v = self.push_leaf(p.value().clone(), true)?;
        self.params.insert(p.id(), v);
        Ok(v)
    }

    /// Fingerprint of every piecewise choice made on the tape: ReLU signs,
    /// clamp regions and max-pool winners. Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    for &v in self.value(*x).data() {
                        let region: u8 = if v < *lo {
                            0
                        } else if v > *hi {
                            2
                        } else {
                            1
                        };
                        region.hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, [Var; 2])> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, ta, tb)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        Ok((Tensor::new(shape, data)?, [a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &ins)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &ins)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &ins)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("div", a, b, |x, y| x / y)?;
        self.push(t, Op::Div(a, b), &ins)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.ln());
        self.push(t, Op::Ln(x), &[x])
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input lies inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(t, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let n = T::from_usize(src.len()).expect("length fits");
        let t = Tensor::scalar(src.sum() / n);
        self.push(t, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (batch, m, n) = matrix_dims(src.shape())?;
        let mut data = Vec::with_capacity(src.len());
        for b in 0..batch {
            data.extend(kernels::transpose(&src.data()[b * m * n..(b + 1) * m * n], m, n));
        }
        let mut shape = src.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Transpose(x), &[x])
    }

    /// Matrix product of rank-2 operands, or a batched product of rank-3
    /// operands with equal leading dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != tb.rank() {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (ba, m, k) = matrix_dims(ta.shape())?;
        let (bb, k2, n) = matrix_dims(tb.shape())?;
        if ba != bb || k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(ba * m * n);
        for i in 0..ba {
            data.extend(kernels::matmul(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let shape = if ta.rank() == 2 { vec![m, n] } else { vec![ba, m, n] };
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = kernels::softmax(src.data(), outer, len, inner);
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Stride-1 "same" convolution. `w` is `[C_out, C_in, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: ws.to_vec(),
                reason: "conv2d weight must be C_out×C_in×k×k with odd k".into(),
            });
        }
        let dims = conv_dims("conv2d", xs, ws)?;
        if dims.c_in != ws[1] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [dims.c_out] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[dims.c_out]));
            }
        }
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            dims,
        );
        let t = Tensor::new(vec![dims.batch, dims.c_out, dims.height, dims.width], data)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(t, Op::Conv2d { x, w, b, dims }, &ins)
    }

    /// Per-channel convolution; `w` is `[C, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 3 || ws[1] != ws[2] || ws[1] % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: ws.to_vec(),
                reason: "depthwise weight must be C×k×k with odd k".into(),
            });
        }
        let mut dims = conv_dims("depthwise_conv2d", xs, ws)?;
        if dims.c_in != ws[0] {
            return Err(Error::shape("depthwise_conv2d", xs, ws));
        }
        dims.c_out = dims.c_in;
        let data = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), dims);
        let t = Tensor::new(xs.to_vec(), data)?;
        self.push(t, Op::Depthwise { x, w, dims }, &[x, w])
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::InvalidShape {
                shape: xs.to_vec(),
                reason: "batch norm expects B×C×H×W".into(),
            });
        }
        if self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape("batch_norm", xs, self.shape(gamma)));
        }
        Ok((xs[0], xs[1], xs[2] * xs[3]))
    }

    /// Train-mode batch norm using statistics of this batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (b, c, plane) = self.bn_dims(x, gamma, beta)?;
        let (data, saved) = kernels::batchnorm_train(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            b,
            c,
            plane,
            eps,
        );
        let stats = BatchStats {
            mean: saved.mean.clone(),
            var: saved.var.clone(),
        };
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let v = self.push(
            t,
            Op::BnTrain {
                x,
                gamma,
                beta,
                saved,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (b, c, plane) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm_eval", &[c], &[mean.len()]));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xv, g, be) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for i in off..off + plane {
                    xhat[i] = (xv[i] - mean[ci]) * inv_std[ci];
                    y[i] = g[ci] * xhat[i] + be[ci];
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), y)?;
        self.push(
            t,
            Op::BnEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::InvalidShape {
                shape: xs,
                reason: "maxpool2x2 needs B×C×H×W with H, W ≥ 2".into(),
            });
        }
        let (data, argmax) = kernels::maxpool2x2(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3]);
        let t = Tensor::new(vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2], data)?;
        self.push(t, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidShape {
                shape: xs,
                reason: "upsample expects B×C×H×W".into(),
            });
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let data = kernels::upsample_nearest2x(self.value(x).data(), planes, h, w);
        let t = Tensor::new(vec![xs[0], xs[1], 2 * h, 2 * w], data)?;
        self.push(t, Op::Upsample { x, planes, h, w }, &[x])
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let (batch, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for i in 0..batch {
            data.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let t = Tensor::new(vec![batch, ca + cb, sa[2], sa[3]], data)?;
        self.push(t, Op::Concat { a, b }, &[a, b])
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gin) in self.input_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gin)?,
                    slot @ None => *slot = Some(gin),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| {
            Tensor::new(val(v).shape().to_vec(), data).expect("gradient matches operand")
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, unbroadcast(val(*a), gd.to_vec())),
                (*b, unbroadcast(val(*b), gd.to_vec())),
            ],
            Op::Sub(a, b) => vec![
                (*a, unbroadcast(val(*a), gd.to_vec())),
                (*b, unbroadcast(val(*b), gd.iter().map(|&x| -x).collect())),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = gd.iter().enumerate().map(|(i, &x)| x * at(tb, i)).collect();
                let gb = gd.iter().enumerate().map(|(i, &x)| x * at(ta, i)).collect();
                vec![(*a, unbroadcast(ta, ga)), (*b, unbroadcast(tb, gb))]
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = gd.iter().enumerate().map(|(i, &x)| x / at(tb, i)).collect();
                let gb = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let d = at(tb, i);
                        -x * at(ta, i) / (d * d)
                    })
                    .collect();
                vec![(*a, unbroadcast(ta, ga)), (*b, unbroadcast(tb, gb))]
            }
            Op::Scale(x, c) => vec![(*x, like(*x, gd.iter().map(|&v| v * *c).collect()))],
            Op::AddScalar(x) => vec![(*x, like(*x, gd.to_vec()))],
            Op::Relu(x) => {
                let xv = val(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*x, like(*x, d))]
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                    .collect();
                vec![(*x, like(*x, d))]
            }
            Op::Ln(x) => {
                let xv = val(*x).data();
                vec![(*x, like(*x, gd.iter().zip(xv).map(|(&gi, &xi)| gi / xi).collect()))]
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { T::zero() })
                    .collect();
                vec![(*x, like(*x, d))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
            Op::Mean(x) => {
                let n = T::from_usize(val(*x).len()).expect("length fits");
                vec![(*x, Tensor::full(val(*x).shape(), gd[0] / n))]
            }
            Op::Reshape(x) => vec![(*x, like(*x, gd.to_vec()))],
            Op::Transpose(x) => {
                // g has the transposed shape; transpose it back
                let (batch, m, n) = matrix_dims(g.shape()).expect("rank checked at forward");
                let mut d = Vec::with_capacity(gd.len());
                for b in 0..batch {
                    d.extend(kernels::transpose(&gd[b * m * n..(b + 1) * m * n], m, n));
                }
                vec![(*x, like(*x, d))]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (batch, m, k) = matrix_dims(ta.shape()).expect("checked");
                let n = *tb.shape().last().expect("checked");
                let mut ga = Vec::with_capacity(ta.len());
                let mut gb = Vec::with_capacity(tb.len());
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                    let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                    ga.extend(kernels::matmul(gi, &kernels::transpose(bi, k, n), m, n, k));
                    gb.extend(kernels::matmul(&kernels::transpose(ai, m, k), gi, k, m, n));
                }
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let d = kernels::softmax_backward(node.value.data(), gd, *outer, *len, *inner);
                vec![(*x, like(*x, d))]
            }
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x).data(), val(*w).data(), gd, *dims);
                let mut out = vec![(*x, like(*x, dx)), (*w, like(*w, dw))];
                if let Some(b) = b {
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::Depthwise { x, w, dims } => {
                let (dx, dw) =
                    kernels::depthwise_backward(val(*x).data(), val(*w).data(), gd, *dims);
                vec![(*x, like(*x, dx)), (*w, like(*w, dw))]
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                saved,
            } => {
                let s = val(*x).shape();
                let (dx, dg, db) = kernels::batchnorm_train_backward(
                    gd,
                    val(*gamma).data(),
                    saved,
                    s[0],
                    s[1],
                    s[2] * s[3],
                );
                vec![(*x, like(*x, dx)), (*gamma, like(*gamma, dg)), (*beta, like(*beta, db))]
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = val(*x).shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let gam = val(*gamma).data();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (i, (&gi, &h)) in gd.iter().zip(xhat).enumerate() {
                    let ci = (i / plane) % c;
                    dx[i] = gi * gam[ci] * inv_std[ci];
                    dg[ci] += gi * h;
                    db[ci] += gi;
                }
                vec![(*x, like(*x, dx)), (*gamma, like(*gamma, dg)), (*beta, like(*beta, db))]
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); val(*x).len()];
                for (&gi, &src) in gd.iter().zip(argmax) {
                    d[src] += gi;
                }
                vec![(*x, like(*x, d))]
            }
            Op::Upsample { x, planes, h, w } => {
                let d = kernels::upsample_nearest2x_backward(gd, *planes, *h, *w);
                vec![(*x, like(*x, d))]
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (batch, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let mut ga = Vec::with_capacity(val(*a).len());
                let mut gb = Vec::with_capacity(val(*b).len());
                let stride = (ca + cb) * plane;
                for i in 0..batch {
                    ga.extend_from_slice(&gd[i * stride..i * stride + ca * plane]);
                    gb.extend_from_slice(&gd[i * stride + ca * plane..(i + 1) * stride]);
                }
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(op.backward(&ins, &node.value, g))
                    .collect()
            }
        }
    }
}

fn matrix_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [m, n] => Ok((1, m, n)),
        [b, m, n] => Ok((b, m, n)),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected a rank-2 or rank-3 tensor".into(),
        }),
    }
}

/// Result of [`Graph::backward`]: gradients of every leaf and parameter that
/// requires one.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter bound with [`Graph::param`]; `None` when the
    /// parameter did not take part in the loss.
    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.params.get(&p.id()).and_then(|&v| self.get(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let r = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);

        let n = g.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let r = g.matmul(m, n).unwrap();
        assert_eq!(g.value(r).data(), &[19.0, 22.0, 43.0, 50.0]);

        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[4, 2])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[3])).unwrap();
        let s = g.softmax(z, 0).unwrap();
        for &v in g.value(s).data().iter() {
            let v: f64 = v;
            assert!((v - 1.0_f64 / 3.0).abs() < 1e-15);
        }
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        // e^k / (e + e^2 + e^3)
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expect = [1f64.exp() / denom, 2f64.exp() / denom, 3f64.exp() / denom];
        for (v, e) in g.value(s).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
        assert!((g.value(s).data()[2] - 0.6652).abs() < 1e-4);
        assert!(matches!(g.softmax(x, 1), Err(Error::AxisOutOfRange { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.input(Tensor::scalar(0.0)).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let a = g.input(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.input(t(&[2], &[3.0, 4.0])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let bad = g.input(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert!(g.add(a, bad).is_err());
        let two = g.input(Tensor::scalar(2.0)).unwrap();
        let m = g.mul(a, two).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 4.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[0.3, -1.2, 2.0, 0.7])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn two_consumers_accumulate() {
        // l = sum(3x) + sum(x ⊙ x) → dl/dx = 3 + 2x
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, -2.0])).unwrap();
        let a = g.scale(x, 3.0).unwrap();
        let b = g.mul(x, x).unwrap();
        let sa = g.sum(a).unwrap();
        let sb = g.sum(b).unwrap();
        let l = g.add(sa, sb).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::ones(&[2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros(&[2])).unwrap();
        assert!(matches!(g.ln(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn param_binding_is_shared() {
        let p = Param::new(Tensor::<f64>::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&p).unwrap();
        let b = g.param(&p).unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(&p).unwrap().data(), &[4.0]);
    }
}
