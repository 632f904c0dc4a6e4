//! Convolutional layers: standard, depthwise separable, and batch norm.
//! Pooling, upsampling and channel concatenation are parameter-free and live
//! directly on [`Graph`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{join, Module, Param};
use crate::tensor::{lit, Scalar, Tensor};

/// Whether batch norm uses batch statistics (and updates its running stats)
/// or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// He-normal initialisation, variance 2 / fan_in.
fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn check_channels(op: &'static str, g: &Graph<impl Scalar>, x: Var, expected: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != expected {
        return Err(Error::shape(op, s, &[expected]));
    }
    Ok(())
}

/// Stride-1 convolution with zero "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel.is_multiple_of(2) || c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!(
                "conv2d needs odd kernel and positive channels, got k={kernel} {c_in}->{c_out}"
            )));
        }
        Ok(Conv2d {
            weight: Param::new(he_normal(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng)),
            bias: Param::new(Tensor::zeros(&[c_out])),
            c_in,
            c_out,
            kernel,
        })
    }

    /// Builds a layer from explicit tensors (`weight` is C_out×C_in×k×k).
    pub fn from_tensors(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weight.shape().to_vec();
        if s.len() != 4 || s[2] != s[3] || s[2].is_multiple_of(2) || bias.shape() != [s[0]] {
            return Err(Error::shape("conv2d", &s, bias.shape()));
        }
        Ok(Conv2d {
            c_out: s[0],
            c_in: s[1],
            kernel: s[2],
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        check_channels("conv2d", g, x, self.c_in)?;
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        g.conv2d(x, w, Some(b))
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// A bias-free per-channel k×k convolution followed by a biased 1×1 convolution.
#[derive(Clone, Debug)]
pub struct DepthwiseSeparableConv<T> {
    /// One k×k filter per input channel, `[C_in, k, k]`.
    pub depthwise: Param<T>,
    pub pointwise: Conv2d<T>,
}

impl<T: Scalar> DepthwiseSeparableConv<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("depthwise kernel must be odd, got {kernel}")));
        }
        Ok(DepthwiseSeparableConv {
            depthwise: Param::new(he_normal(&[c_in, kernel, kernel], kernel * kernel, rng)),
            pointwise: Conv2d::new(c_in, c_out, 1, rng)?,
        })
    }

    pub fn from_tensors(depthwise: Tensor<T>, pointwise: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let pw = Conv2d::from_tensors(pointwise, bias)?;
        let ds = depthwise.shape();
        if ds.len() != 3 || ds[0] != pw.c_in || pw.kernel != 1 {
            return Err(Error::shape("depthwise_separable", ds, pw.weight.value().shape()));
        }
        Ok(DepthwiseSeparableConv {
            depthwise: Param::new(depthwise),
            pointwise: pw,
        })
    }

    pub fn c_in(&self) -> usize {
        self.pointwise.c_in
    }

    pub fn c_out(&self) -> usize {
        self.pointwise.c_out
    }

    pub fn kernel(&self) -> usize {
        self.depthwise.value().shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        check_channels("depthwise_separable", g, x, self.c_in())?;
        let dw = g.param(&self.depthwise)?;
        let h = g.depthwise_conv2d(x, dw)?;
        self.pointwise.forward(g, h)
    }
}

impl<T: Scalar> Module<T> for DepthwiseSeparableConv<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(join(prefix, "depthwise"), &self.depthwise);
        self.pointwise.visit_params(&join(prefix, "pointwise"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "depthwise"), &mut self.depthwise);
        self.pointwise.visit_params_mut(&join(prefix, "pointwise"), f);
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel batch normalisation with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    /// running ← momentum·running + (1 − momentum)·batch
    pub momentum: T,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::ones(&[channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: lit(BN_EPS),
            momentum: lit(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        check_channels("batch_norm", g, x, self.channels())?;
        if g.value(x).is_empty() {
            return Err(Error::InvalidShape {
                shape: g.shape(x).to_vec(),
                reason: "empty batch".into(),
            });
        }
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                let keep = self.momentum;
                let take = T::one() - keep;
                for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + take * m;
                }
                for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + take * v;
                }
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            ),
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Closed-form trainable parameter count of a depthwise separable convolution.
pub fn dsc_param_count(c_in: usize, c_out: usize, k: usize) -> usize {
    k * k * c_in + c_in * c_out + c_out
}

/// Closed-form trainable parameter count of a standard convolution with bias.
pub fn conv_param_count(c_in: usize, c_out: usize, k: usize) -> usize {
    k * k * c_in * c_out + c_out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let conv = Conv2d::from_tensors(w, Tensor::zeros(&[1])).unwrap();
        let x = Tensor::randn(&[2, 1, 5, 4], 1.0, &mut rng());
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let y = conv.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let conv = Conv2d::from_tensors(Tensor::<f64>::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1])).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[1, 1, 4, 4])).unwrap();
        let y = conv.forward(&mut g, x).unwrap();
        let out = g.value(y).data();
        // zero padding: corners see 4 pixels, edges 6, interior 9
        let expect = [
            4.0, 6.0, 6.0, 4.0, 6.0, 9.0, 9.0, 6.0, 6.0, 9.0, 9.0, 6.0, 4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(out, &expect);
    }

    #[test]
    fn pointwise_is_affine() {
        let conv = Conv2d::from_tensors(
            Tensor::<f64>::new(vec![1, 1, 1, 1], vec![2.5]).unwrap(),
            Tensor::new(vec![1], vec![-1.0]).unwrap(),
        )
        .unwrap();
        let x = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut rng());
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let y = conv.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x.map(|v| 2.5 * v - 1.0));
    }

    #[test]
    fn conv_channel_mismatch() {
        let conv = Conv2d::<f64>::new(3, 4, 3, &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        assert!(matches!(conv.forward(&mut g, x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn same_padding_preserves_spatial_dims() {
        for k in [1, 3, 5, 7] {
            let conv = Conv2d::<f64>::new(2, 3, k, &mut rng()).unwrap();
            let mut g = Graph::new();
            let x = g.input(Tensor::ones(&[1, 2, 5, 3])).unwrap();
            let y = conv.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(y), &[1, 3, 5, 3]);
        }
    }

    #[test]
    fn dsc_identity_configuration() {
        let c = 3;
        let mut dw = Tensor::<f64>::zeros(&[c, 3, 3]);
        for ch in 0..c {
            dw.data_mut()[ch * 9 + 4] = 1.0;
        }
        let pw = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let dsc = DepthwiseSeparableConv::from_tensors(dw, pw, Tensor::zeros(&[c])).unwrap();
        let x = Tensor::randn(&[2, c, 4, 4], 1.0, &mut rng());
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let y = dsc.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn parameter_counts() {
        let mut r = rng();
        assert_eq!(Conv2d::<f32>::new(64, 128, 1, &mut r).unwrap().count_params(), 8320);
        let dsc = DepthwiseSeparableConv::<f32>::new(64, 128, 3, &mut r).unwrap();
        assert_eq!(dsc.count_params(), 8896);
        assert_eq!(dsc_param_count(64, 128, 3), 8896);
        assert_eq!(Conv2d::<f32>::new(64, 128, 3, &mut r).unwrap().count_params(), 73856);
        assert_eq!(conv_param_count(64, 128, 3), 73856);
        let ratio: f64 = 8896.0 / 73856.0;
        assert!((ratio - 0.120).abs() < 5e-4);
        assert_eq!(BatchNorm2d::<f32>::new(128).count_params(), 256);
    }

    #[test]
    fn batchnorm_train_standardises() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 37) % 11) as f64 * 0.7 - 2.0);
        let mut g = Graph::new();
        let xv = g.input(x).unwrap();
        let y = bn.forward(&mut g, xv, Mode::Train).unwrap();
        let out = g.value(y).data();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| out[(b * 2 + c) * 16..(b * 2 + c + 1) * 16].to_vec())
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running stats moved 1% toward the batch statistics
        assert!(bn.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn batchnorm_affine_shift_and_scale() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.gamma.value_mut().data_mut()[0] = 2.0;
        bn.beta.value_mut().data_mut()[0] = 3.0;
        let x = Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64).sin() * 4.0);
        let mut g = Graph::new();
        let xv = g.input(x).unwrap();
        let y = bn.forward(&mut g, xv, Mode::Train).unwrap();
        let out = g.value(y).data();
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 3.0).abs() < 1e-12);
        assert!((std - 2.0).abs() < 1e-3);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.gamma.value_mut().data_mut()[0] = 1.5;
        bn.beta.value_mut().data_mut()[0] = -0.5;
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let y = bn.forward(&mut g, xv, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (o, i) in g.value(y).data().iter().zip(x.data()) {
            assert!((o - (1.5 * i * scale - 0.5)).abs() < 1e-15);
        }
        assert_eq!(bn.running_mean.data(), &[0.0]);
    }

    #[test]
    fn batchnorm_running_update_rule() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap()).unwrap();
        bn.forward(&mut g, x, Mode::Train).unwrap();
        // batch mean 2, biased var 1
        assert!((bn.running_mean.data()[0] - 0.02).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - 1.0).abs() < 1e-15);
    }
}
