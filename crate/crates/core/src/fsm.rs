//! Feature similarity module: non-local attention over every spatial
//! position of a feature map.
//!
//! For an input `x0` with `C₀` channels the module computes
//!
//! ```text
//! X     = reduce(x0)                      C = ⌊C₀/8⌋ channels
//! f_ij  = softmax_j( α(X)_iᵀ β(X)_j )     N × N, N = H·W
//! Z_i   = Σ_j f_ij · Y_j + X_i            Y = proj_y(X)
//! out   = proj_out(Z) + x0
//! ```
//!
//! where every projection is a bias-carrying 1×1 convolution. Attention is
//! computed independently for each batch element.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv2d;
use crate::param::{join, Module, Param};
use crate::tensor::{Scalar, Tensor};

/// Channel reduction factor between the module input and its inner width.
pub const REDUCTION: usize = 8;

#[derive(Clone, Debug)]
pub struct FsmLayer<T> {
    pub conv_reduce: Conv2d<T>,
    pub conv_alpha: Conv2d<T>,
    pub conv_beta: Conv2d<T>,
    pub conv_y: Conv2d<T>,
    pub conv_out: Conv2d<T>,
}

impl<T: Scalar> FsmLayer<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, rng: &mut R) -> Result<Self> {
        let c = in_channels / REDUCTION;
        if c == 0 {
            return Err(Error::Config(format!(
                "feature similarity module needs at least {REDUCTION} input channels, got {in_channels}"
            )));
        }
        Ok(FsmLayer {
            conv_reduce: Conv2d::new(in_channels, c, 1, rng)?,
            conv_alpha: Conv2d::new(c, c, 1, rng)?,
            conv_beta: Conv2d::new(c, c, 1, rng)?,
            conv_y: Conv2d::new(c, c, 1, rng)?,
            conv_out: Conv2d::new(c, in_channels, 1, rng)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv_reduce.c_in
    }

    pub fn inner_channels(&self) -> usize {
        self.conv_reduce.c_out
    }

    /// Flattens `[B, C, H, W]` to `[B, C, N]`.
    fn flatten(g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        g.reshape(x, &[s[0], s[1], s[2] * s[3]])
    }

    /// Attention map `[B, N, N]` for an already-reduced map `x` (`[B, C, H, W]`).
    /// Row `i` holds the softmax over `j` of `α(x_i)ᵀβ(x_j)`.
    pub fn attention(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.inner_channels() {
            return Err(Error::shape("fsm_attention", s, &[self.inner_channels()]));
        }
        let a = self.conv_alpha.forward(g, x)?;
        let b = self.conv_beta.forward(g, x)?;
        let a = Self::flatten(g, a)?;
        let b = Self::flatten(g, b)?;
        let at = g.transpose(a)?; // [B, N, C]
        let logits = g.matmul(at, b)?; // [B, N, N]
        g.softmax(logits, 2)
    }

    pub fn forward(&self, g: &mut Graph<T>, x0: Var) -> Result<Var> {
        let s = g.shape(x0).to_vec();
        if s.len() != 4 || s[1] != self.in_channels() {
            return Err(Error::shape("fsm_forward", &s, &[self.in_channels()]));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let c = self.inner_channels();
        let x = self.conv_reduce.forward(g, x0)?;
        let f = self.attention(g, x)?;
        let y = self.conv_y.forward(g, x)?;
        let y = Self::flatten(g, y)?;
        let yt = g.transpose(y)?; // [B, N, C]
        let agg = g.matmul(f, yt)?; // Σ_j f_ij Y_j, [B, N, C]
        let agg = g.transpose(agg)?;
        let agg = g.reshape(agg, &[b, c, h, w])?;
        let z = g.add(agg, x)?;
        let out = self.conv_out.forward(g, z)?;
        g.add(out, x0)
    }
}

impl<T: Scalar> Module<T> for FsmLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.conv_reduce.visit_params(&join(prefix, "conv_reduce"), f);
        self.conv_alpha.visit_params(&join(prefix, "conv_alpha"), f);
        self.conv_beta.visit_params(&join(prefix, "conv_beta"), f);
        self.conv_y.visit_params(&join(prefix, "conv_y"), f);
        self.conv_out.visit_params(&join(prefix, "conv_out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.conv_reduce.visit_params_mut(&join(prefix, "conv_reduce"), f);
        self.conv_alpha.visit_params_mut(&join(prefix, "conv_alpha"), f);
        self.conv_beta.visit_params_mut(&join(prefix, "conv_beta"), f);
        self.conv_y.visit_params_mut(&join(prefix, "conv_y"), f);
        self.conv_out.visit_params_mut(&join(prefix, "conv_out"), f);
    }
}

/// Closed-form trainable parameter count for an input width `c0`.
pub fn fsm_param_count(c0: usize) -> usize {
    let c = c0 / REDUCTION;
    (c0 * c + c) + 3 * (c * c + c) + (c * c0 + c0)
}

/// Result of [`reference_forward`].
#[derive(Clone, Debug)]
pub struct ReferenceFsm {
    /// `attention[b][i][j]`.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Module output in `[B, C₀, H, W]` layout.
    pub output: Vec<f64>,
}

/// 1×1 convolution at one position: `W v + b`.
fn pointwise(conv: &Conv2d<f64>, v: &[f64]) -> Vec<f64> {
    let w = conv.weight.value().data();
    let b = conv.bias.value().data();
    (0..conv.c_out)
        .map(|o| b[o] + (0..conv.c_in).map(|i| w[o * conv.c_in + i] * v[i]).sum::<f64>())
        .collect()
}

/// Literal per-position evaluation of the module's defining sums with plain
/// loops. Slow; exists to cross-check the vectorised graph path.
pub fn reference_forward(layer: &FsmLayer<f64>, x0: &Tensor<f64>) -> Result<ReferenceFsm> {
    let s = x0.shape();
    if s.len() != 4 || s[1] != layer.in_channels() {
        return Err(Error::shape("fsm_reference", s, &[layer.in_channels()]));
    }
    let (batch, c0, n) = (s[0], s[1], s[2] * s[3]);
    let at = |b: usize, c: usize, p: usize| x0.data()[(b * c0 + c) * n + p];
    let mut attention = Vec::with_capacity(batch);
    let mut output = vec![0.0; x0.len()];
    for b in 0..batch {
        let x: Vec<Vec<f64>> = (0..n)
            .map(|p| pointwise(&layer.conv_reduce, &(0..c0).map(|c| at(b, c, p)).collect::<Vec<_>>()))
            .collect();
        let alpha: Vec<Vec<f64>> = x.iter().map(|v| pointwise(&layer.conv_alpha, v)).collect();
        let beta: Vec<Vec<f64>> = x.iter().map(|v| pointwise(&layer.conv_beta, v)).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|v| pointwise(&layer.conv_y, v)).collect();
        let mut f = vec![vec![0.0; n]; n];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| alpha[i].iter().zip(&beta[j]).map(|(a, b)| a * b).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..n {
                f[i][j] = (logits[j] - m).exp() / denom;
            }
        }
        for i in 0..n {
            let z: Vec<f64> = (0..x[i].len())
                .map(|k| (0..n).map(|j| f[i][j] * y[j][k]).sum::<f64>() + x[i][k])
                .collect();
            let out = pointwise(&layer.conv_out, &z);
            for ch in 0..c0 {
                output[(b * c0 + ch) * n + i] = out[ch] + at(b, ch, i);
            }
        }
        attention.push(f);
    }
    Ok(ReferenceFsm { attention, output })
}
