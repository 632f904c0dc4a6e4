//! X-block, the encoder-decoder assembly, and the double-conv U-Net baseline.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsm::{FsmLayer, REDUCTION};
use crate::graph::{Graph, Var};
use crate::metrics::Mask;
use crate::nn::{BatchNorm2d, Conv2d, DepthwiseSeparableConv, Mode};
use crate::param::{join, Module, Param};
use crate::tensor::{lit, Scalar, Tensor};

/// Number of resolution levels; inputs must be divisible by 2^(LEVELS-1).
pub const LEVELS: usize = 5;
pub const SPATIAL_MULTIPLE: usize = 1 << (LEVELS - 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Xnet,
    Unet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Xnet => "xnet",
            Arch::Unet => "unet",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xnet" => Ok(Arch::Xnet),
            "unet" => Ok(Arch::Unet),
            other => Err(Error::Config(format!("unknown arch {other:?} (xnet|unet)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_widths: Vec<usize>,
    pub width_divisor: usize,
    /// Feature similarity module on the deepest encoder output.
    pub fsm_enabled: bool,
    pub arch: Arch,
    /// Extra attachment points beyond the bottleneck, added by [`Model::attach_fsm`].
    pub fsm_locations: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            out_channels: 1,
            base_widths: vec![64, 128, 256, 512, 1024],
            width_divisor: 1,
            fsm_enabled: true,
            arch: Arch::Xnet,
            fsm_locations: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// The default topology scaled down by 8 (widths 8..128).
    pub fn desk_scale() -> Self {
        ModelConfig {
            width_divisor: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_widths.len() != LEVELS {
            return bad(format!("base_widths must list {LEVELS} widths"));
        }
        if self.width_divisor == 0 {
            return bad("width_divisor must be positive".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        for &w in &self.base_widths {
            if w == 0 || w % self.width_divisor != 0 {
                return bad(format!(
                    "width {w} is not a positive multiple of width_divisor {}",
                    self.width_divisor
                ));
            }
        }
        if self.fsm_enabled && self.widths()[LEVELS - 1] < REDUCTION {
            return bad(format!(
                "deepest width {} is below {REDUCTION}; the feature similarity module cannot reduce it",
                self.widths()[LEVELS - 1]
            ));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.base_widths
            .iter()
            .map(|w| w / self.width_divisor.max(1))
            .collect()
    }
}

/// Three cascaded depthwise separable convolutions with batch norm, plus a
/// 1×1-convolution shortcut; output = ReLU(main + shortcut).
#[derive(Clone, Debug)]
pub struct XBlock<T> {
    pub dsc: [DepthwiseSeparableConv<T>; 3],
    pub bn: [BatchNorm2d<T>; 3],
    pub residual: Conv2d<T>,
    pub residual_bn: BatchNorm2d<T>,
}

impl<T: Scalar> XBlock<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Ok(XBlock {
            dsc: [
                DepthwiseSeparableConv::new(c_in, c_out, 3, rng)?,
                DepthwiseSeparableConv::new(c_out, c_out, 3, rng)?,
                DepthwiseSeparableConv::new(c_out, c_out, 3, rng)?,
            ],
            bn: [
                BatchNorm2d::new(c_out),
                BatchNorm2d::new(c_out),
                BatchNorm2d::new(c_out),
            ],
            residual: Conv2d::new(c_in, c_out, 1, rng)?,
            residual_bn: BatchNorm2d::new(c_out),
        })
    }

    pub fn c_in(&self) -> usize {
        self.residual.c_in
    }

    pub fn c_out(&self) -> usize {
        self.residual.c_out
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for i in 0..3 {
            h = self.dsc[i].forward(g, h)?;
            h = self.bn[i].forward(g, h, mode)?;
            if i < 2 {
                h = g.relu(h)?;
            }
        }
        let r = self.residual.forward(g, x)?;
        let r = self.residual_bn.forward(g, r, mode)?;
        let sum = g.add(h, r)?;
        g.relu(sum)
    }
}

impl<T: Scalar> Module<T> for XBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        for i in 0..3 {
            self.dsc[i].visit_params(&join(prefix, &format!("dsc{}", i + 1)), f);
            self.bn[i].visit_params(&join(prefix, &format!("bn{}", i + 1)), f);
        }
        self.residual.visit_params(&join(prefix, "residual"), f);
        self.residual_bn.visit_params(&join(prefix, "residual_bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for i in 0..3 {
            self.dsc[i].visit_params_mut(&join(prefix, &format!("dsc{}", i + 1)), f);
            self.bn[i].visit_params_mut(&join(prefix, &format!("bn{}", i + 1)), f);
        }
        self.residual.visit_params_mut(&join(prefix, "residual"), f);
        self.residual_bn.visit_params_mut(&join(prefix, "residual_bn"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for i in 0..3 {
            self.bn[i].visit_buffers(&join(prefix, &format!("bn{}", i + 1)), f);
        }
        self.residual_bn.visit_buffers(&join(prefix, "residual_bn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for i in 0..3 {
            self.bn[i].visit_buffers_mut(&join(prefix, &format!("bn{}", i + 1)), f);
        }
        self.residual_bn.visit_buffers_mut(&join(prefix, "residual_bn"), f);
    }
}

/// Classic U-Net block: two 3×3 conv → BN → ReLU layers.
#[derive(Clone, Debug)]
pub struct UnetBlock<T> {
    pub conv: [Conv2d<T>; 2],
    pub bn: [BatchNorm2d<T>; 2],
}

impl<T: Scalar> UnetBlock<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Ok(UnetBlock {
            conv: [Conv2d::new(c_in, c_out, 3, rng)?, Conv2d::new(c_out, c_out, 3, rng)?],
            bn: [BatchNorm2d::new(c_out), BatchNorm2d::new(c_out)],
        })
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for i in 0..2 {
            h = self.conv[i].forward(g, h)?;
            h = self.bn[i].forward(g, h, mode)?;
            h = g.relu(h)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for UnetBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        for i in 0..2 {
            self.conv[i].visit_params(&join(prefix, &format!("conv{}", i + 1)), f);
            self.bn[i].visit_params(&join(prefix, &format!("bn{}", i + 1)), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for i in 0..2 {
            self.conv[i].visit_params_mut(&join(prefix, &format!("conv{}", i + 1)), f);
            self.bn[i].visit_params_mut(&join(prefix, &format!("bn{}", i + 1)), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for i in 0..2 {
            self.bn[i].visit_buffers(&join(prefix, &format!("bn{}", i + 1)), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for i in 0..2 {
            self.bn[i].visit_buffers_mut(&join(prefix, &format!("bn{}", i + 1)), f);
        }
    }
}

#[derive(Clone, Debug)]
pub enum Block<T> {
    X(XBlock<T>),
    Unet(UnetBlock<T>),
}

impl<T: Scalar> Block<T> {
    fn new<R: Rng + ?Sized>(arch: Arch, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Ok(match arch {
            Arch::Xnet => Block::X(XBlock::new(c_in, c_out, rng)?),
            Arch::Unet => Block::Unet(UnetBlock::new(c_in, c_out, rng)?),
        })
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Block::X(b) => b.forward(g, x, mode),
            Block::Unet(b) => b.forward(g, x, mode),
        }
    }

    fn as_module(&self) -> &dyn Module<T> {
        match self {
            Block::X(b) => b,
            Block::Unet(b) => b,
        }
    }

    fn as_module_mut(&mut self) -> &mut dyn Module<T> {
        match self {
            Block::X(b) => b,
            Block::Unet(b) => b,
        }
    }
}

/// Canonical names of the feature maps an FSM can be attached after.
pub const LOCATIONS: [&str; 9] = [
    "enc1", "enc2", "enc3", "enc4", "enc5", "dec4", "dec3", "dec2", "dec1",
];
pub const BOTTLENECK: &str = "enc5";

fn canonical_location(name: &str) -> Result<&'static str> {
    let name = if name == "bottleneck" { BOTTLENECK } else { name };
    LOCATIONS
        .iter()
        .copied()
        .find(|&l| l == name)
        .ok_or_else(|| Error::Config(format!("unknown feature map location {name:?}")))
}

/// The assembled encoder-decoder.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    encoder: Vec<Block<T>>,
    /// Deepest level first (`dec4` … `dec1`).
    decoder: Vec<Block<T>>,
    fsm: BTreeMap<&'static str, FsmLayer<T>>,
    head: Conv2d<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.widths();
        let mut encoder = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let c_in = if i == 0 { config.in_channels } else { w[i - 1] };
            encoder.push(Block::new(config.arch, c_in, w[i], rng)?);
        }
        let mut decoder = Vec::with_capacity(LEVELS - 1);
        for l in (0..LEVELS - 1).rev() {
            decoder.push(Block::new(config.arch, w[l] + w[l + 1], w[l], rng)?);
        }
        let head = Conv2d::new(w[0], config.out_channels, 1, rng)?;
        let extra = config.fsm_locations.clone();
        let mut model = Model {
            config: ModelConfig {
                fsm_locations: Vec::new(),
                ..config
            },
            encoder,
            decoder,
            fsm: BTreeMap::new(),
            head,
        };
        if model.config.fsm_enabled {
            model.insert_fsm(BOTTLENECK, rng)?;
        }
        for loc in extra {
            model.attach_fsm(&loc, rng)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> &Conv2d<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Conv2d<T> {
        &mut self.head
    }

    pub fn fsm(&self, location: &str) -> Option<&FsmLayer<T>> {
        canonical_location(location)
            .ok()
            .and_then(|l| self.fsm.get(l))
    }

    pub fn fsm_mut(&mut self, location: &str) -> Option<&mut FsmLayer<T>> {
        let l = canonical_location(location).ok()?;
        self.fsm.get_mut(l)
    }

    /// Channel width of the feature map at a location.
    pub fn location_channels(&self, location: &str) -> Result<usize> {
        let l = canonical_location(location)?;
        let w = self.config.widths();
        let idx = LOCATIONS.iter().position(|&x| x == l).expect("canonical");
        Ok(if idx < LEVELS {
            w[idx]
        } else {
            w[LOCATIONS.len() - 1 - idx]
        })
    }

    fn insert_fsm<R: Rng + ?Sized>(&mut self, location: &str, rng: &mut R) -> Result<&'static str> {
        let l = canonical_location(location)?;
        if self.fsm.contains_key(l) {
            return Err(Error::Config(format!("a feature similarity module is already attached at {l}")));
        }
        let c0 = self.location_channels(l)?;
        let layer = FsmLayer::new(c0, rng)?;
        self.fsm.insert(l, layer);
        Ok(l)
    }

    /// Inserts a feature similarity module after the named feature map.
    pub fn attach_fsm<R: Rng + ?Sized>(&mut self, location: &str, rng: &mut R) -> Result<()> {
        let l = self.insert_fsm(location, rng)?;
        if l == BOTTLENECK {
            self.config.fsm_enabled = true;
        } else {
            self.config.fsm_locations.push(l.to_string());
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == 4
            && shape[1] == self.config.in_channels
            && shape[2].is_multiple_of(SPATIAL_MULTIPLE)
            && shape[3].is_multiple_of(SPATIAL_MULTIPLE);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!(
                    "model expects B×{}×H×W with H and W divisible by {SPATIAL_MULTIPLE}",
                    self.config.in_channels
                ),
            })
        }
    }

    fn apply_fsm(&self, g: &mut Graph<T>, location: &str, h: Var) -> Result<Var> {
        match self.fsm.get(location) {
            Some(f) => f.forward(g, h),
            None => Ok(h),
        }
    }

    /// Forward pass returning per-pixel probabilities `[B, out_channels, H, W]`.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut skips = Vec::with_capacity(LEVELS - 1);
        let mut h = x;
        for i in 0..LEVELS {
            h = self.encoder[i].forward(g, h, mode)?;
            h = self.apply_fsm(g, LOCATIONS[i], h)?;
            if i < LEVELS - 1 {
                skips.push(h);
                h = g.maxpool2x2(h)?;
            }
        }
        for (j, block) in self.decoder.iter_mut().enumerate() {
            let level = LEVELS - 2 - j;
            let up = g.upsample_nearest2x(h)?;
            let merged = g.concat_channels(skips[level], up)?;
            h = block.forward(g, merged, mode)?;
            if let Some(f) = self.fsm.get(LOCATIONS[LEVELS + j]) {
                h = f.forward(g, h)?;
            }
        }
        let logits = self.head.forward(g, h)?;
        g.sigmoid(logits)
    }

    /// Eval-mode probabilities for a batch of images.
    pub fn predict_probs(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(images.clone())?;
        let y = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    /// Binary mask of a single `[1, 1, H, W]` image, thresholded at 0.5.
    pub fn predict_mask(&mut self, image: &Tensor<T>) -> Result<Mask> {
        let s = image.shape().to_vec();
        if s.len() != 4 || s[0] != 1 || s[1] != 1 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "predict_mask expects a 1×1×H×W image".into(),
            });
        }
        let probs = self.predict_probs(image)?;
        Ok(Mask::threshold(probs.data(), s[2], s[3], lit(0.5)))
    }

    /// Trainable parameter count per top-level component, in forward order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            out.push((LOCATIONS[i].to_string(), b.as_module().count_params()));
            if let Some(f) = self.fsm.get(LOCATIONS[i]) {
                out.push((format!("fsm.{}", LOCATIONS[i]), f.count_params()));
            }
        }
        for (j, b) in self.decoder.iter().enumerate() {
            let loc = LOCATIONS[LEVELS + j];
            out.push((loc.to_string(), b.as_module().count_params()));
            if let Some(f) = self.fsm.get(loc) {
                out.push((format!("fsm.{loc}"), f.count_params()));
            }
        }
        out.push(("head".into(), self.head.count_params()));
        out
    }

    /// All parameters and buffers keyed by name.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, p| out.push((n, p.value().clone())));
        self.visit_buffers("", &mut |n, t| out.push((n, t.clone())));
        out
    }

    /// Overwrites parameters and buffers from `state`; every name must be
    /// present with a matching shape.
    pub fn load_state(&mut self, state: &HashMap<String, Tensor<T>>) -> Result<()> {
        let mut err: Option<Error> = None;
        let mut check = |name: &str, dst: &mut Tensor<T>| {
            if err.is_some() {
                return;
            }
            match state.get(name) {
                Some(src) if src.shape() == dst.shape() => *dst = src.clone(),
                Some(src) => err = Some(Error::shape("load_state", dst.shape(), src.shape())),
                None => err = Some(Error::Config(format!("missing tensor {name}"))),
            }
        };
        self.visit_params_mut("", &mut |n, p| check(&n, p.value_mut()));
        self.visit_buffers_mut("", &mut |n, t| check(&n, t));
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.as_module().visit_params(&join(prefix, LOCATIONS[i]), f);
        }
        for (loc, layer) in &self.fsm {
            layer.visit_params(&join(prefix, &format!("fsm.{loc}")), f);
        }
        for (j, b) in self.decoder.iter().enumerate() {
            b.as_module().visit_params(&join(prefix, LOCATIONS[LEVELS + j]), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.as_module_mut().visit_params_mut(&join(prefix, LOCATIONS[i]), f);
        }
        for (loc, layer) in self.fsm.iter_mut() {
            layer.visit_params_mut(&join(prefix, &format!("fsm.{loc}")), f);
        }
        for (j, b) in self.decoder.iter_mut().enumerate() {
            b.as_module_mut().visit_params_mut(&join(prefix, LOCATIONS[LEVELS + j]), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.as_module().visit_buffers(&join(prefix, LOCATIONS[i]), f);
        }
        for (j, b) in self.decoder.iter().enumerate() {
            b.as_module().visit_buffers(&join(prefix, LOCATIONS[LEVELS + j]), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.as_module_mut().visit_buffers_mut(&join(prefix, LOCATIONS[i]), f);
        }
        for (j, b) in self.decoder.iter_mut().enumerate() {
            b.as_module_mut().visit_buffers_mut(&join(prefix, LOCATIONS[LEVELS + j]), f);
        }
    }
}

/// Closed-form trainable parameter count of an X-block.
pub fn xblock_param_count(c_in: usize, c_out: usize) -> usize {
    use crate::nn::dsc_param_count;
    dsc_param_count(c_in, c_out, 3)
        + 2 * dsc_param_count(c_out, c_out, 3)
        + (c_in * c_out + c_out)
        + 4 * 2 * c_out
}
