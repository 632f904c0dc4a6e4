//! The finite-difference gradient suite: every layer type plus the full
//! reduced-width network, each probed in f64 through a random linear
//! read-out so no gradient is trivially symmetric.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fsm::FsmLayer;
use crate::gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::losses::combined_loss;
use crate::model::{Model, ModelConfig, XBlock};
use crate::nn::{BatchNorm2d, Conv2d, DepthwiseSeparableConv, Mode};
use crate::param::{join, Module, Param, ParamSet};
use crate::tensor::Tensor;

/// Per-layer relative-error bound.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Bound for the whole network, where errors compound through depth.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per parameter tensor of the full network.
pub const NETWORK_COORDS: usize = 6;

/// A layer together with a trainable input, so input gradients are checked
/// alongside parameter gradients.
pub struct Probe<M> {
    pub input: Param<f64>,
    pub layer: M,
}

impl<M: Module<f64>> Module<f64> for Probe<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<f64>)) {
        f(join(prefix, "input"), &self.input);
        self.layer.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<f64>)) {
        f(join(prefix, "input"), &mut self.input);
        self.layer.visit_params_mut(prefix, f);
    }
}

/// `sum(y ⊙ r)` for a fixed random `r` shaped like `y`.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = Tensor::randn(g.shape(y), 1.0, &mut rng);
    let r = g.input(r)?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn layer_cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        tolerance: LAYER_TOLERANCE,
        seed,
        ..GradCheckConfig::default()
    }
}

fn probe<M>(input_shape: &[usize], layer: M, rng: &mut ChaCha8Rng) -> Probe<M> {
    Probe {
        input: Param::new(Tensor::randn(input_shape, 1.0, rng)),
        layer,
    }
}

/// Runs every check; returns `(case name, report)` in a fixed order.
pub fn gradcheck_suite(seed: u64) -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = layer_cfg(seed);
    let mut add = |name: &str, r: GradCheckReport| out.push((name.to_string(), r));

    let mut p = probe(&[2, 3, 5, 6], Conv2d::<f64>::new(3, 4, 3, &mut rng).expect("conv"), &mut rng);
    add(
        "conv2d",
        gradcheck(&mut p, &cfg, |m, g| {
            let x = g.param(&m.input)?;
            let y = m.layer.forward(g, x)?;
            readout(g, y, seed)
        }),
    );

    let mut p = probe(
        &[2, 3, 5, 6],
        DepthwiseSeparableConv::<f64>::new(3, 4, 3, &mut rng).expect("dsc"),
        &mut rng,
    );
    add(
        "depthwise_separable_conv",
        gradcheck(&mut p, &cfg, |m, g| {
            let x = g.param(&m.input)?;
            let y = m.layer.forward(g, x)?;
            readout(g, y, seed)
        }),
    );

    let mut bn = BatchNorm2d::<f64>::new(3);
    bn.gamma = Param::new(Tensor::randn(&[3], 1.0, &mut rng));
    bn.beta = Param::new(Tensor::randn(&[3], 1.0, &mut rng));
    let mut p = probe(&[3, 3, 4, 4], bn, &mut rng);
    add(
        "batch_norm_train",
        gradcheck(&mut p, &cfg, |m, g| {
            let x = g.param(&m.input)?;
            let y = m.layer.forward(g, x, Mode::Train)?;
            readout(g, y, seed)
        }),
    );

    let mut p = probe(&[2, 3, 6, 4], ParamSet::new(), &mut rng);
    add(
        "maxpool2x2",
        gradcheck(&mut p, &cfg, |m, g| {
            let x = g.param(&m.input)?;
            let y = g.maxpool2x2(x)?;
            readout(g, y, seed)
        }),
    );

    let mut p = probe(&[2, 3, 3, 4], ParamSet::new(), &mut rng);
    add(
        "upsample_nearest2x",
        gradcheck(&mut p, &cfg, |m, g| {
            let x = g.param(&m.input)?;
            let y = g.upsample_nearest2x(x)?;
            readout(g, y, seed)
        }),
    );

    let mut other = ParamSet::new();
    other.push("other", Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng));
    let mut p = probe(&[2, 2, 4, 4], other, &mut rng);
    add(
        "concat_channels",
        gradcheck(&mut p, &cfg, |m, g| {
            let a = g.param(&m.input)?;
            let b = g.param(m.layer.get(0))?;
            let y = g.concat_channels(a, b)?;
            readout(g, y, seed)
        }),
    );

    let mut p = probe(&[2, 16, 3, 4], FsmLayer::<f64>::new(16, &mut rng).expect("fsm"), &mut rng);
    add(
        "feature_similarity_module",
        gradcheck(&mut p, &cfg, |m, g| {
            let x = g.param(&m.input)?;
            let y = m.layer.forward(g, x)?;
            readout(g, y, seed)
        }),
    );

    let mut xb = XBlock::<f64>::new(3, 4, &mut rng).expect("xblock");
    for bn in xb.bn.iter_mut().chain(std::iter::once(&mut xb.residual_bn)) {
        bn.gamma = Param::new(Tensor::uniform(&[4], 0.5, 1.5, &mut rng));
        bn.beta = Param::new(Tensor::randn(&[4], 0.5, &mut rng));
    }
    let mut p = probe(&[2, 3, 4, 4], xb, &mut rng);
    add(
        "x_block",
        gradcheck(&mut p, &cfg, |m, g| {
            let x = g.param(&m.input)?;
            let y = m.layer.forward(g, x, Mode::Train)?;
            readout(g, y, seed)
        }),
    );

    let target = Tensor::from_fn(&[2, 1, 4, 4], |i| if (i * 7 + seed as usize).is_multiple_of(3) { 1.0 } else { 0.0 });
    let mut p = probe(&[2, 1, 4, 4], ParamSet::new(), &mut rng);
    add(
        "combined_loss",
        gradcheck(&mut p, &cfg, |m, g| {
            let logits = g.param(&m.input)?;
            let probs = g.sigmoid(logits)?;
            let t = g.input(target.clone())?;
            combined_loss(g, probs, t)
        }),
    );

    add("x_net_divisor_8", network_check(seed));
    out
}

/// The full reduced-width network on a single 32×32 slice, through the
/// combined loss plus a random read-out of the probabilities.
pub fn network_check(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let model = Model::<f64>::new(ModelConfig::desk_scale(), &mut rng).expect("desk-scale model");
    let target = Tensor::from_fn(&[1, 1, 32, 32], |i| {
        let (r, c) = ((i / 32) as f64 - 15.5, (i % 32) as f64 - 15.5);
        if r * r + c * c < 60.0 {
            1.0
        } else {
            0.0
        }
    });
    let cfg = GradCheckConfig {
        tolerance: NETWORK_TOLERANCE,
        max_coords: Some(NETWORK_COORDS),
        seed,
        refine_kinks: true,
        ..GradCheckConfig::default()
    };
    let mut joint = probe(&[1, 1, 32, 32], model, &mut rng);
    gradcheck(&mut joint, &cfg, |m, g| {
        let x = g.param(&m.input)?;
        let probs = m.layer.forward(g, x, Mode::Train)?;
        let t = g.input(target.clone())?;
        let loss = combined_loss(g, probs, t)?;
        let r = readout(g, probs, seed)?;
        g.add(loss, r)
    })
}
