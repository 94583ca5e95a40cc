//! The command-conditioned two-stage grasp detector.
//!
//! Image branch: a stack of stride-2 convolutions, a region proposal head
//! over a fixed anchor grid, ROI align and a small feature head producing one
//! visual vector per region. Command branch: word embedding, two stacked
//! LSTMs and a rectified projection. The two are fused by an element-wise
//! product; a classifier over orientation bins plus two garbage classes reads
//! the fused vector, while box regression reads the visual vector alone.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::Vocabulary;
use crate::geometry::{class_count, class_to_theta, AxisBox, GeometryError, Grasp5D, OrientationClass};
use crate::manifest::{config_hash, RunManifest};
use crate::nn::{
    conv2d, conv2d_backward, linear, linear_backward, lstm_backward, lstm_forward, relu_backward_inplace,
    relu_inplace, roi_align, roi_align_backward, roi_align_plan, sigmoid, softmax, ConvOut, ConvShape, LstmTrace,
    LstmWeights, Real, RoiAlignPlan, Tensor,
};
use crate::scene::Image;

/// Largest log-size delta applied when decoding, to keep `exp` finite.
const MAX_LOG_DELTA: f64 = 4.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image is {found_w}x{found_h}, model expects {expected_w}x{expected_h}")]
    ImageSize {
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("empty command")]
    EmptyCommand,
    #[error("token index {index} outside vocabulary of {vocab}")]
    TokenOutOfRange { index: usize, vocab: usize },
    #[error("{what} has width {found}, expected {expected}")]
    Width { what: &'static str, expected: usize, found: usize },
    #[error("no proposals given")]
    EmptyProposals,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config hash mismatch")]
    ConfigHash,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandMode {
    /// Learned encoder over the tokenized command.
    Learned,
    /// Command branch replaced by an all-ones vector (task-agnostic detector).
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPool {
    Flatten,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    /// Square-root area of each anchor, in pixels.
    pub scales: Vec<f64>,
    /// Height over width.
    pub ratios: Vec<f64>,
}

impl AnchorSpec {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Output channels of each stride-2 3x3 stage.
    pub backbone: Vec<usize>,
    pub rpn_channels: usize,
    pub pool: usize,
    pub head_channels: usize,
    pub head_pool: HeadPool,
    pub d_i: usize,
    pub d_c: usize,
    pub d_e: usize,
    pub lstm_widths: (usize, usize),
    pub n_orient: usize,
    pub n_p_train: usize,
    pub n_p_test: usize,
    pub proposal_nms: f64,
    pub detection_nms: f64,
    pub min_proposal_size: f64,
    pub anchors: AnchorSpec,
    pub command_mode: CommandMode,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            image_width: 128,
            image_height: 128,
            backbone: vec![16, 32, 64, 64],
            rpn_channels: 64,
            pool: 7,
            head_channels: 32,
            head_pool: HeadPool::Flatten,
            d_i: 256,
            d_c: 128,
            d_e: 32,
            lstm_widths: (64, 128),
            n_orient: 19,
            n_p_train: 64,
            n_p_test: 300,
            proposal_nms: 0.7,
            detection_nms: 0.3,
            min_proposal_size: 4.0,
            anchors: AnchorSpec {
                scales: vec![12.0, 20.0, 32.0],
                ratios: vec![0.5, 1.0, 2.0],
            },
            command_mode: CommandMode::Learned,
            vocab_size: 0,
        }
    }

    /// Widths of the full-size network. The backbone is still a plain
    /// convolution stack; only the feature widths follow the original.
    pub fn full_scale() -> Self {
        Self {
            backbone: vec![64, 256, 512, 1024],
            rpn_channels: 512,
            head_channels: 1024,
            head_pool: HeadPool::Average,
            d_i: 2048,
            d_c: 512,
            d_e: 128,
            lstm_widths: (256, 512),
            ..Self::toy()
        }
    }

    pub fn with_vocab(mut self, n: usize) -> Self {
        self.vocab_size = n;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        let widths = [
            self.rpn_channels,
            self.head_channels,
            self.d_i,
            self.d_c,
            self.d_e,
            self.lstm_widths.0,
            self.lstm_widths.1,
        ];
        if widths.contains(&0) || self.backbone.contains(&0) {
            return bad("all widths must be at least 1");
        }
        if self.backbone.is_empty() {
            return bad("backbone needs at least one stage");
        }
        if self.n_orient == 0 {
            return bad("n_orient must be at least 1");
        }
        let s = self.stride();
        if self.image_width == 0 || self.image_height == 0 || self.image_width % s != 0 || self.image_height % s != 0 {
            return bad("image size must be a positive multiple of the backbone stride");
        }
        if self.pool < 2 {
            return bad("pool must be at least 2");
        }
        if self.n_p_train == 0 || self.n_p_test == 0 {
            return bad("proposal counts must be at least 1");
        }
        if self.anchors.per_cell() == 0
            || self.anchors.scales.iter().chain(&self.anchors.ratios).any(|v| !(v.is_finite() && *v > 0.0))
        {
            return bad("anchors need positive scales and ratios");
        }
        for t in [self.proposal_nms, self.detection_nms] {
            if !(t > 0.0 && t <= 1.0) {
                return bad("nms thresholds must be in (0, 1]");
            }
        }
        if self.command_mode == CommandMode::Learned && self.vocab_size == 0 {
            return bad("vocab_size must be set for a learned command encoder");
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.backbone.len()
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.image_height / self.stride(), self.image_width / self.stride())
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone.last().expect("validated backbone")
    }

    pub fn n_classes(&self) -> usize {
        class_count(self.n_orient)
    }

    fn head_conv_shape(&self) -> ConvShape {
        ConvShape {
            c_in: self.feature_channels(),
            c_out: self.head_channels,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn head_conv_dims(&self) -> (usize, usize) {
        self.head_conv_shape().out_dims(self.pool, self.pool)
    }

    fn head_flat(&self) -> usize {
        match self.head_pool {
            HeadPool::Flatten => {
                let (h, w) = self.head_conv_dims();
                self.head_channels * h * w
            }
            HeadPool::Average => self.head_channels,
        }
    }

    fn stage_shape(&self, i: usize) -> ConvShape {
        ConvShape {
            c_in: if i == 0 { 3 } else { self.backbone[i - 1] },
            c_out: self.backbone[i],
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn rpn_shapes(&self) -> (ConvShape, ConvShape, ConvShape) {
        let a = self.anchors.per_cell();
        let c = self.rpn_channels;
        let hidden = ConvShape { c_in: self.feature_channels(), c_out: c, kernel: 3, stride: 1, pad: 1 };
        let cls = ConvShape { c_in: c, c_out: a, kernel: 1, stride: 1, pad: 0 };
        let reg = ConvShape { c_in: c, c_out: 4 * a, kernel: 1, stride: 1, pad: 0 };
        (hidden, cls, reg)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CommandLayout {
    embed: usize,
    lstm: [(usize, usize, usize); 2],
    fc: (usize, usize),
}

/// Parameter indices, fixed by construction order.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    backbone: Vec<(usize, usize)>,
    rpn_conv: (usize, usize),
    rpn_cls: (usize, usize),
    rpn_reg: (usize, usize),
    head_conv: (usize, usize),
    head_fc: (usize, usize),
    command: Option<CommandLayout>,
    reduce: Option<(usize, usize)>,
    cls: (usize, usize),
    reg: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    He,
    Small,
    Recurrent,
    Embedding,
    Zero,
    ForgetBias,
}

/// Names, shapes and initializers of every parameter, in a fixed order.
fn param_specs(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>, Init)>, Layout) {
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        specs.push((name, shape, init));
        specs.len() - 1
    };
    let conv = |push: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, name: &str, s: ConvShape, init: Init| {
        let w = push(format!("{name}.weight"), vec![s.c_out, s.patch()], init);
        let b = push(format!("{name}.bias"), vec![s.c_out], Init::Zero);
        (w, b)
    };
    let backbone = (0..cfg.backbone.len())
        .map(|i| conv(&mut push, &format!("backbone.{i}"), cfg.stage_shape(i), Init::He))
        .collect();
    let (hid, cls_s, reg_s) = cfg.rpn_shapes();
    let rpn_conv = conv(&mut push, "rpn.conv", hid, Init::He);
    let rpn_cls = conv(&mut push, "rpn.cls", cls_s, Init::Small);
    let rpn_reg = conv(&mut push, "rpn.reg", reg_s, Init::Small);
    let head_conv = conv(&mut push, "head.conv", cfg.head_conv_shape(), Init::He);
    let lin = |push: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, name: &str, d_in: usize, d_out: usize, init: Init| {
        let w = push(format!("{name}.weight"), vec![d_out, d_in], init);
        let b = push(format!("{name}.bias"), vec![d_out], Init::Zero);
        (w, b)
    };
    let head_fc = lin(&mut push, "head.fc", cfg.head_flat(), cfg.d_i, Init::He);
    let command = match cfg.command_mode {
        CommandMode::Constant => None,
        CommandMode::Learned => {
            let embed = push("command.embed".into(), vec![cfg.vocab_size, cfg.d_e], Init::Embedding);
            let (h1, h2) = cfg.lstm_widths;
            let mut lstm = [(0, 0, 0); 2];
            for (l, (inp, hid)) in [(cfg.d_e, h1), (h1, h2)].into_iter().enumerate() {
                lstm[l] = (
                    push(format!("command.lstm{l}.w_x"), vec![4 * hid, inp], Init::Recurrent),
                    push(format!("command.lstm{l}.w_h"), vec![4 * hid, hid], Init::Recurrent),
                    push(format!("command.lstm{l}.bias"), vec![4 * hid], Init::ForgetBias),
                );
            }
            let fc = lin(&mut push, "command.fc", h2, cfg.d_c, Init::He);
            Some(CommandLayout { embed, lstm, fc })
        }
    };
    let reduce = (cfg.d_i != cfg.d_c).then(|| lin(&mut push, "reduce", cfg.d_i, cfg.d_c, Init::Recurrent));
    let cls = lin(&mut push, "cls", cfg.d_c, cfg.n_classes(), Init::Small);
    let reg = lin(&mut push, "reg", cfg.d_i, 4 * cfg.n_orient, Init::Small);
    let layout = Layout {
        backbone,
        rpn_conv,
        rpn_cls,
        rpn_reg,
        head_conv,
        head_fc,
        command,
        reduce,
        cls,
        reg,
    };
    (specs, layout)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// All network parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

impl<T: Real> Weights<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, layout) = param_specs(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let fan_in = shape.get(1).copied().unwrap_or(1) as f64;
                let value = match init {
                    Init::He => Tensor::randn(&shape, (2.0 / fan_in).sqrt(), &mut rng),
                    Init::Small => Tensor::randn(&shape, 0.01, &mut rng),
                    Init::Recurrent => Tensor::randn(&shape, 1.0 / fan_in.sqrt(), &mut rng),
                    Init::Embedding => Tensor::randn(&shape, 0.3, &mut rng),
                    Init::Zero => Tensor::zeros(&shape),
                    Init::ForgetBias => {
                        let mut t = Tensor::zeros(&shape);
                        let hid = shape[0] / 4;
                        t.data[hid..2 * hid].iter_mut().for_each(|v| *v = T::one());
                        t
                    }
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { config: config.clone(), params, layout })
    }

    /// Rebuild from stored tensors; names and shapes must match the config.
    pub fn from_params(config: &ModelConfig, params: Vec<Param<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, layout) = param_specs(config);
        if specs.len() != params.len() {
            return Err(ModelError::Corrupt(format!("expected {} tensors, found {}", specs.len(), params.len())));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if name != &p.name || shape != &p.value.shape || p.value.data.len() != shape.iter().product::<usize>() {
                return Err(ModelError::Corrupt(format!("tensor `{}` does not match `{name}` {shape:?}", p.name)));
            }
        }
        Ok(Self { config: config.clone(), params, layout })
    }

    pub fn zeros_like(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|p| Param { name: p.name.clone(), value: Tensor::zeros(&p.value.shape) })
            .collect();
        Self { config: self.config.clone(), params, layout: self.layout.clone() }
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights {
            config: self.config.clone(),
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn fill(&mut self, v: T) {
        self.params.iter_mut().for_each(|p| p.value.fill(v));
    }

    fn t(&self, i: usize) -> &[T] {
        &self.params[i].value.data
    }

    fn pair_mut(&mut self, (a, b): (usize, usize)) -> (&mut [T], &mut [T]) {
        assert!(a < b);
        let (lo, hi) = self.params.split_at_mut(b);
        (&mut lo[a].value.data, &mut hi[0].value.data)
    }

    fn triple_mut(&mut self, (a, b, c): (usize, usize, usize)) -> (&mut [T], &mut [T], &mut [T]) {
        assert!(a < b && b < c);
        let (lo, rest) = self.params.split_at_mut(b);
        let (mid, hi) = rest.split_at_mut(c - b);
        (&mut lo[a].value.data, &mut mid[0].value.data, &mut hi[0].value.data)
    }
}

/// Axis-aligned anchors in anchor-index order: `a · (hf·wf) + y · wf + x`,
/// matching the channel-major layout of the proposal head outputs.
pub fn generate_anchors(cfg: &ModelConfig) -> Vec<AxisBox> {
    let (hf, wf) = cfg.feature_dims();
    let s = cfg.stride() as f64;
    let mut out = Vec::with_capacity(cfg.anchors.per_cell() * hf * wf);
    for &scale in &cfg.anchors.scales {
        for &ratio in &cfg.anchors.ratios {
            let (w, h) = (scale / ratio.sqrt(), scale * ratio.sqrt());
            for y in 0..hf {
                for x in 0..wf {
                    out.push(AxisBox::new((x as f64 + 0.5) * s, (y as f64 + 0.5) * s, w, h));
                }
            }
        }
    }
    out
}

/// Regression target of box `(x, y, w, h)` relative to `roi`.
pub fn encode_box(roi: &AxisBox, x: f64, y: f64, w: f64, h: f64) -> [f64; 4] {
    [(x - roi.x) / roi.w, (y - roi.y) / roi.h, (w / roi.w).ln(), (h / roi.h).ln()]
}

fn apply_delta(roi: &AxisBox, d: [f64; 4]) -> (f64, f64, f64, f64) {
    (
        roi.x + d[0] * roi.w,
        roi.y + d[1] * roi.h,
        roi.w * d[2].min(MAX_LOG_DELTA).exp(),
        roi.h * d[3].min(MAX_LOG_DELTA).exp(),
    )
}

pub fn decode_axis(roi: &AxisBox, delta: [f64; 4]) -> AxisBox {
    let (x, y, w, h) = apply_delta(roi, delta);
    AxisBox::new(x, y, w, h)
}

pub fn decode_box(roi: &AxisBox, delta: [f64; 4], class: OrientationClass, n_orient: usize) -> Result<Grasp5D, GeometryError> {
    let theta = class_to_theta(class, n_orient)?;
    let (x, y, w, h) = apply_delta(roi, delta);
    Grasp5D::new(x, y, theta, w, h)
}

/// `(3, h, w)` planar tensor scaled to roughly `[-1, 1]`.
pub fn image_tensor<T: Real>(img: &Image) -> Vec<T> {
    let n = img.width * img.height;
    let mut out = vec![T::zero(); 3 * n];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = T::of(px[c] as f64 / 127.5 - 1.0);
        }
    }
    out
}

pub fn check_image(cfg: &ModelConfig, img: &Image) -> Result<(), ModelError> {
    if img.width != cfg.image_width || img.height != cfg.image_height || img.pixels.len() != img.width * img.height * 3 {
        return Err(ModelError::ImageSize {
            expected_w: cfg.image_width,
            expected_h: cfg.image_height,
            found_w: img.width,
            found_h: img.height,
        });
    }
    Ok(())
}

/// Activations of the image branch up to the proposal head.
pub struct VisualTrace<T> {
    stages: Vec<ConvOut<T>>,
    rpn_hidden: ConvOut<T>,
    rpn_cls_cols: Vec<T>,
    /// Objectness logits, one per anchor.
    pub logits: Vec<T>,
    /// Anchor deltas, channel `a·4 + k` at each cell.
    pub deltas: Vec<T>,
    pub hf: usize,
    pub wf: usize,
}

impl<T: Real> VisualTrace<T> {
    pub fn features(&self) -> &[T] {
        &self.stages.last().expect("nonempty backbone").out
    }

    pub fn anchor_delta(&self, anchor: usize) -> [T; 4] {
        let hw = self.hf * self.wf;
        let (a, pos) = (anchor / hw, anchor % hw);
        std::array::from_fn(|k| self.deltas[(a * 4 + k) * hw + pos])
    }
}

pub fn visual_forward<T: Real>(w: &Weights<T>, image: &[T]) -> VisualTrace<T> {
    let cfg = &w.config;
    let l = &w.layout;
    let (mut h, mut wd) = (cfg.image_height, cfg.image_width);
    let mut stages: Vec<ConvOut<T>> = Vec::with_capacity(cfg.backbone.len());
    for (i, &(wi, bi)) in l.backbone.iter().enumerate() {
        let input = stages.last().map(|s| &s.out[..]).unwrap_or(image);
        let mut o = conv2d(input, h, wd, w.t(wi), w.t(bi), &cfg.stage_shape(i));
        relu_inplace(&mut o.out);
        (h, wd) = (o.h, o.w);
        stages.push(o);
    }
    let (hid, cls_s, reg_s) = cfg.rpn_shapes();
    let feat = &stages.last().expect("nonempty backbone").out;
    let mut rpn_hidden = conv2d(feat, h, wd, w.t(l.rpn_conv.0), w.t(l.rpn_conv.1), &hid);
    relu_inplace(&mut rpn_hidden.out);
    let cls = conv2d(&rpn_hidden.out, h, wd, w.t(l.rpn_cls.0), w.t(l.rpn_cls.1), &cls_s);
    let reg = conv2d(&rpn_hidden.out, h, wd, w.t(l.rpn_reg.0), w.t(l.rpn_reg.1), &reg_s);
    VisualTrace {
        stages,
        rpn_hidden,
        rpn_cls_cols: cls.cols,
        logits: cls.out,
        deltas: reg.out,
        hf: h,
        wf: wd,
    }
}

/// Backpropagates proposal-head gradients and feature-map gradients from the
/// ROI head down through the backbone.
pub fn visual_backward<T: Real>(
    w: &Weights<T>,
    trace: &VisualTrace<T>,
    d_logits: &[T],
    d_deltas: &[T],
    mut d_features: Vec<T>,
    g: &mut Weights<T>,
) {
    let cfg = &w.config;
    let l = &w.layout;
    let (hf, wf) = (trace.hf, trace.wf);
    let (hid, cls_s, reg_s) = cfg.rpn_shapes();
    let (dw, db) = g.pair_mut(l.rpn_cls);
    let mut d_hidden =
        conv2d_backward(d_logits, &trace.rpn_cls_cols, hf, wf, w.t(l.rpn_cls.0), &cls_s, dw, db, true).expect("grad");
    // 1x1 conv: the columns are the hidden activations themselves.
    let (dw, db) = g.pair_mut(l.rpn_reg);
    let d2 = conv2d_backward(d_deltas, &trace.rpn_hidden.out, hf, wf, w.t(l.rpn_reg.0), &reg_s, dw, db, true)
        .expect("grad");
    d_hidden.iter_mut().zip(&d2).for_each(|(a, &b)| *a += b);
    relu_backward_inplace(&mut d_hidden, &trace.rpn_hidden.out);
    let (dw, db) = g.pair_mut(l.rpn_conv);
    let d_feat = conv2d_backward(&d_hidden, &trace.rpn_hidden.cols, hf, wf, w.t(l.rpn_conv.0), &hid, dw, db, true)
        .expect("grad");
    d_features.iter_mut().zip(&d_feat).for_each(|(a, &b)| *a += b);

    let mut d = d_features;
    for i in (0..trace.stages.len()).rev() {
        relu_backward_inplace(&mut d, &trace.stages[i].out);
        let (h_in, w_in) = if i == 0 {
            (cfg.image_height, cfg.image_width)
        } else {
            (trace.stages[i - 1].h, trace.stages[i - 1].w)
        };
        let (dw, db) = g.pair_mut(l.backbone[i]);
        let d_in = conv2d_backward(&d, &trace.stages[i].cols, h_in, w_in, w.t(l.backbone[i].0), &cfg.stage_shape(i), dw, db, i > 0);
        match d_in {
            Some(v) => d = v,
            None => break,
        }
    }
}

/// A region kept after proposal decoding and suppression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub anchor: usize,
    pub rho: f64,
    pub roi: AxisBox,
}

/// Greedy suppression on axis-aligned boxes; input must be sorted by score.
fn axis_nms(sorted: &[Proposal], threshold: f64, keep: usize) -> Vec<Proposal> {
    let mut out: Vec<Proposal> = Vec::with_capacity(keep);
    for p in sorted {
        if out.len() == keep {
            break;
        }
        if out.iter().all(|q| q.roi.iou(&p.roi) <= threshold) {
            out.push(*p);
        }
    }
    out
}

/// Top `keep` proposals by objectness after decoding, clipping and
/// suppression. Ties keep anchor order.
pub fn propose<T: Real>(cfg: &ModelConfig, anchors: &[AxisBox], trace: &VisualTrace<T>, keep: usize) -> Vec<Proposal> {
    let (iw, ih) = (cfg.image_width as f64, cfg.image_height as f64);
    let mut all: Vec<Proposal> = anchors
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let d = trace.anchor_delta(i).map(|v| v.f64());
            if d.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let roi = decode_axis(a, d).clip(iw, ih);
            (roi.w >= cfg.min_proposal_size && roi.h >= cfg.min_proposal_size).then(|| Proposal {
                anchor: i,
                rho: sigmoid(trace.logits[i]).f64(),
                roi,
            })
        })
        .collect();
    all.sort_by(|a, b| b.rho.total_cmp(&a.rho));
    axis_nms(&all, cfg.proposal_nms, keep)
}

/// Activations of the ROI feature head for a batch of regions.
pub struct HeadTrace<T> {
    plans: Vec<RoiAlignPlan>,
    convs: Vec<ConvOut<T>>,
    flat: Vec<T>,
    /// `(rois, d_i)` rectified visual features.
    pub y_img: Vec<T>,
}

pub fn roi_plans(cfg: &ModelConfig, rois: &[AxisBox], hf: usize, wf: usize) -> Vec<RoiAlignPlan> {
    rois.iter()
        .map(|r| roi_align_plan([r.x1(), r.y1(), r.x2(), r.y2()], cfg.stride() as f64, hf, wf, cfg.pool))
        .collect()
}

pub fn head_forward<T: Real>(w: &Weights<T>, features: &[T], hf: usize, wf: usize, rois: &[AxisBox]) -> HeadTrace<T> {
    let cfg = &w.config;
    let l = &w.layout;
    let c = cfg.feature_channels();
    let plans = roi_plans(cfg, rois, hf, wf);
    let shape = cfg.head_conv_shape();
    let flat_w = cfg.head_flat();
    let mut flat = vec![T::zero(); rois.len() * flat_w];
    let mut convs = Vec::with_capacity(rois.len());
    for (r, plan) in plans.iter().enumerate() {
        let pooled = roi_align(features, c, hf, wf, plan);
        let mut o = conv2d(&pooled, cfg.pool, cfg.pool, w.t(l.head_conv.0), w.t(l.head_conv.1), &shape);
        relu_inplace(&mut o.out);
        let dst = &mut flat[r * flat_w..(r + 1) * flat_w];
        match cfg.head_pool {
            HeadPool::Flatten => dst.copy_from_slice(&o.out),
            HeadPool::Average => {
                let n = o.h * o.w;
                for (ch, v) in dst.iter_mut().enumerate() {
                    *v = o.out[ch * n..(ch + 1) * n].iter().copied().sum::<T>() / T::of(n as f64);
                }
            }
        }
        convs.push(o);
    }
    let mut y_img = linear(&flat, rois.len(), w.t(l.head_fc.0), w.t(l.head_fc.1), flat_w, cfg.d_i);
    relu_inplace(&mut y_img);
    HeadTrace { plans, convs, flat, y_img }
}

/// Returns the gradient w.r.t. the shared feature map.
pub fn head_backward<T: Real>(
    w: &Weights<T>,
    trace: &HeadTrace<T>,
    d_y_img: &[T],
    hf: usize,
    wf: usize,
    g: &mut Weights<T>,
) -> Vec<T> {
    let cfg = &w.config;
    let l = &w.layout;
    let c = cfg.feature_channels();
    let n = trace.plans.len();
    let flat_w = cfg.head_flat();
    let mut d_y = d_y_img.to_vec();
    relu_backward_inplace(&mut d_y, &trace.y_img);
    let (dw, db) = g.pair_mut(l.head_fc);
    let d_flat = linear_backward(&d_y, &trace.flat, n, w.t(l.head_fc.0), flat_w, cfg.d_i, dw, db);
    let shape = cfg.head_conv_shape();
    let mut d_features = vec![T::zero(); c * hf * wf];
    for r in 0..n {
        let o = &trace.convs[r];
        let src = &d_flat[r * flat_w..(r + 1) * flat_w];
        let mut d_o = match cfg.head_pool {
            HeadPool::Flatten => src.to_vec(),
            HeadPool::Average => {
                let cells = o.h * o.w;
                let scale = T::one() / T::of(cells as f64);
                src.iter().flat_map(|&v| std::iter::repeat_n(v * scale, cells)).collect()
            }
        };
        relu_backward_inplace(&mut d_o, &o.out);
        let (dw, db) = g.pair_mut(l.head_conv);
        let d_pooled = conv2d_backward(&d_o, &o.cols, cfg.pool, cfg.pool, w.t(l.head_conv.0), &shape, dw, db, true)
            .expect("grad");
        roi_align_backward(&d_pooled, c, hf, wf, &trace.plans[r], &mut d_features);
    }
    d_features
}

/// Activations of the command branch.
pub struct CommandTrace<T> {
    tokens: Vec<usize>,
    x: Vec<T>,
    l1: Option<LstmTrace<T>>,
    l2: Option<LstmTrace<T>>,
    /// `(d_c)` command feature.
    pub y_cmd: Vec<T>,
}

fn lstm_weights<T: Real>(w: &Weights<T>, (wx, wh, b): (usize, usize, usize), input: usize, hidden: usize) -> LstmWeights<'_, T> {
    LstmWeights { w_x: w.t(wx), w_h: w.t(wh), b: w.t(b), input, hidden }
}

pub fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyCommand);
    }
    if cfg.command_mode == CommandMode::Learned {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { index: bad, vocab: cfg.vocab_size });
        }
    }
    Ok(())
}

/// Tokens must already be validated with [`check_tokens`].
pub fn command_forward<T: Real>(w: &Weights<T>, tokens: &[usize]) -> CommandTrace<T> {
    let cfg = &w.config;
    let Some(cl) = &w.layout.command else {
        return CommandTrace { tokens: tokens.to_vec(), x: Vec::new(), l1: None, l2: None, y_cmd: vec![T::one(); cfg.d_c] };
    };
    let de = cfg.d_e;
    let emb = w.t(cl.embed);
    let x: Vec<T> = tokens.iter().flat_map(|&t| emb[t * de..(t + 1) * de].iter().copied()).collect();
    let (h1, h2) = cfg.lstm_widths;
    let steps = tokens.len();
    let l1 = lstm_forward(&x, steps, &lstm_weights(w, cl.lstm[0], de, h1));
    let l2 = lstm_forward(&l1.h, steps, &lstm_weights(w, cl.lstm[1], h1, h2));
    let last = &l2.h[(steps - 1) * h2..];
    let mut y_cmd = linear(last, 1, w.t(cl.fc.0), w.t(cl.fc.1), h2, cfg.d_c);
    relu_inplace(&mut y_cmd);
    CommandTrace { tokens: tokens.to_vec(), x, l1: Some(l1), l2: Some(l2), y_cmd }
}

pub fn command_backward<T: Real>(w: &Weights<T>, trace: &CommandTrace<T>, d_y_cmd: &[T], g: &mut Weights<T>) {
    let cfg = &w.config;
    let (Some(cl), Some(l1), Some(l2)) = (&w.layout.command, &trace.l1, &trace.l2) else {
        return;
    };
    let (h1, h2) = cfg.lstm_widths;
    let steps = trace.tokens.len();
    let mut d_y = d_y_cmd.to_vec();
    relu_backward_inplace(&mut d_y, &trace.y_cmd);
    let last = &l2.h[(steps - 1) * h2..];
    let (dw, db) = g.pair_mut(cl.fc);
    let d_last = linear_backward(&d_y, last, 1, w.t(cl.fc.0), h2, cfg.d_c, dw, db);
    let mut dh2 = vec![T::zero(); steps * h2];
    dh2[(steps - 1) * h2..].copy_from_slice(&d_last);
    let (a, b, c) = g.triple_mut(cl.lstm[1]);
    let dh1 = lstm_backward(&l1.h, l2, &dh2, &lstm_weights(w, cl.lstm[1], h1, h2), a, b, c);
    let (a, b, c) = g.triple_mut(cl.lstm[0]);
    let dx = lstm_backward(&trace.x, l1, &dh1, &lstm_weights(w, cl.lstm[0], cfg.d_e, h1), a, b, c);
    let de = cfg.d_e;
    let d_emb = &mut g.params[cl.embed].value.data;
    for (s, &t) in trace.tokens.iter().enumerate() {
        for k in 0..de {
            d_emb[t * de + k] += dx[s * de + k];
        }
    }
}

/// Activations of fusion and the two output heads for a batch of regions.
pub struct OutputTrace<T> {
    reduced: Vec<T>,
    merged: Vec<T>,
    /// `(rois, n_orient + 2)` class scores before normalization.
    pub logits: Vec<T>,
    /// `(rois, n_orient + 2)` class probabilities.
    pub gamma: Vec<T>,
    /// `(rois, 4 · n_orient)` box deltas.
    pub deltas: Vec<T>,
}

fn reduce_forward<T: Real>(w: &Weights<T>, y_img: &[T], rows: usize) -> Vec<T> {
    let cfg = &w.config;
    match w.layout.reduce {
        Some((wi, bi)) => linear(y_img, rows, w.t(wi), w.t(bi), cfg.d_i, cfg.d_c),
        None => y_img.to_vec(),
    }
}

/// Fusion plus both output heads for `rows` regions.
pub fn output_forward<T: Real>(w: &Weights<T>, y_img: &[T], rows: usize, y_cmd: &[T]) -> OutputTrace<T> {
    let cfg = &w.config;
    let l = &w.layout;
    let reduced = reduce_forward(w, y_img, rows);
    let merged: Vec<T> = reduced
        .chunks(cfg.d_c)
        .flat_map(|r| r.iter().zip(y_cmd).map(|(&a, &b)| a * b))
        .collect();
    let k = cfg.n_classes();
    let logits = linear(&merged, rows, w.t(l.cls.0), w.t(l.cls.1), cfg.d_c, k);
    let gamma = logits.chunks(k).flat_map(softmax).collect();
    let deltas = linear(y_img, rows, w.t(l.reg.0), w.t(l.reg.1), cfg.d_i, 4 * cfg.n_orient);
    OutputTrace { reduced, merged, logits, gamma, deltas }
}

/// Given gradients w.r.t. the class logits and the box deltas, accumulates
/// parameter gradients and `d_y_cmd`, returning `d_y_img`.
#[allow(clippy::too_many_arguments)]
pub fn output_backward<T: Real>(
    w: &Weights<T>,
    trace: &OutputTrace<T>,
    y_img: &[T],
    rows: usize,
    y_cmd: &[T],
    d_logits: &[T],
    d_deltas: &[T],
    d_y_cmd: &mut [T],
    g: &mut Weights<T>,
) -> Vec<T> {
    let cfg = &w.config;
    let l = &w.layout;
    let (dw, db) = g.pair_mut(l.cls);
    let d_merged = linear_backward(d_logits, &trace.merged, rows, w.t(l.cls.0), cfg.d_c, cfg.n_classes(), dw, db);
    let mut d_reduced = vec![T::zero(); rows * cfg.d_c];
    for r in 0..rows {
        for j in 0..cfg.d_c {
            let gm = d_merged[r * cfg.d_c + j];
            d_reduced[r * cfg.d_c + j] = gm * y_cmd[j];
            d_y_cmd[j] += gm * trace.reduced[r * cfg.d_c + j];
        }
    }
    let (dw, db) = g.pair_mut(l.reg);
    let mut d_y_img = linear_backward(d_deltas, y_img, rows, w.t(l.reg.0), cfg.d_i, 4 * cfg.n_orient, dw, db);
    match l.reduce {
        Some(pair) => {
            let (dw, db) = g.pair_mut(pair);
            let d = linear_backward(&d_reduced, y_img, rows, w.t(pair.0), cfg.d_i, cfg.d_c, dw, db);
            d_y_img.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
        }
        None => d_y_img.iter_mut().zip(&d_reduced).for_each(|(a, &b)| *a += b),
    }
    d_y_img
}

/// One region from the image branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalOutput<T> {
    pub rho: f64,
    pub roi: AxisBox,
    pub y_img: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandFeature<T> {
    pub y_cmd: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspPrediction<T> {
    pub gamma: Vec<T>,
    /// `(n_orient, 4)` row-major.
    pub box_deltas: Vec<T>,
}

impl<T: Real> GraspPrediction<T> {
    pub fn delta(&self, orientation: usize) -> [f64; 4] {
        std::array::from_fn(|k| self.box_deltas[orientation * 4 + k].f64())
    }
}

/// Proposals of one image with their visual features, `n_p_test` at most.
pub fn extract_proposals<T: Real>(image: &Image, w: &Weights<T>) -> Result<Vec<ProposalOutput<T>>, ModelError> {
    let cfg = w.config();
    check_image(cfg, image)?;
    let trace = visual_forward(w, &image_tensor::<T>(image));
    let props = propose(cfg, &generate_anchors(cfg), &trace, cfg.n_p_test);
    let rois: Vec<AxisBox> = props.iter().map(|p| p.roi).collect();
    let head = head_forward(w, trace.features(), trace.hf, trace.wf, &rois);
    Ok(props
        .iter()
        .zip(head.y_img.chunks(cfg.d_i))
        .map(|(p, y)| ProposalOutput { rho: p.rho, roi: p.roi, y_img: y.to_vec() })
        .collect())
}

pub fn encode_command<T: Real>(tokens: &[usize], w: &Weights<T>) -> Result<CommandFeature<T>, ModelError> {
    check_tokens(w.config(), tokens)?;
    Ok(CommandFeature { y_cmd: command_forward(w, tokens).y_cmd })
}

pub fn merge_features<T: Real>(y_img: &[T], y_cmd: &[T], w: &Weights<T>) -> Result<Vec<T>, ModelError> {
    let cfg = w.config();
    if y_img.len() != cfg.d_i {
        return Err(ModelError::Width { what: "y_img", expected: cfg.d_i, found: y_img.len() });
    }
    if y_cmd.len() != cfg.d_c {
        return Err(ModelError::Width { what: "y_cmd", expected: cfg.d_c, found: y_cmd.len() });
    }
    Ok(reduce_forward(w, y_img, 1).iter().zip(y_cmd).map(|(&a, &b)| a * b).collect())
}

pub fn predict_grasps<T: Real>(
    proposals: &[ProposalOutput<T>],
    y_cmd: &CommandFeature<T>,
    w: &Weights<T>,
) -> Result<Vec<GraspPrediction<T>>, ModelError> {
    let cfg = w.config();
    if proposals.is_empty() {
        return Err(ModelError::EmptyProposals);
    }
    if y_cmd.y_cmd.len() != cfg.d_c {
        return Err(ModelError::Width { what: "y_cmd", expected: cfg.d_c, found: y_cmd.y_cmd.len() });
    }
    let mut y_img = Vec::with_capacity(proposals.len() * cfg.d_i);
    for p in proposals {
        if p.y_img.len() != cfg.d_i {
            return Err(ModelError::Width { what: "y_img", expected: cfg.d_i, found: p.y_img.len() });
        }
        y_img.extend_from_slice(&p.y_img);
    }
    let out = output_forward(w, &y_img, proposals.len(), &y_cmd.y_cmd);
    let k = cfg.n_classes();
    let r = 4 * cfg.n_orient;
    Ok(out
        .gamma
        .chunks(k)
        .zip(out.deltas.chunks(r))
        .map(|(g, d)| GraspPrediction { gamma: g.to_vec(), box_deltas: d.to_vec() })
        .collect())
}

/// Adam moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(w: &Weights<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = w.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: Weights<f32>,
    pub vocab: Vocabulary,
    pub manifest: RunManifest,
    pub iteration: u64,
    pub optimizer: Option<OptimizerState>,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const CK_HEADER: usize = 4 + 4 + 32 + 8 + 8;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocab: Vocabulary,
    manifest: RunManifest,
    iteration: u64,
    tensors: Vec<(String, Vec<usize>)>,
    optimizer_step: Option<u64>,
}

fn push_f32(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let cfg = ck.weights.config();
    let meta = CheckpointMeta {
        config: cfg.clone(),
        vocab: ck.vocab.clone(),
        manifest: ck.manifest.clone(),
        iteration: ck.iteration,
        tensors: ck.weights.params().iter().map(|p| (p.name.clone(), p.value.shape.clone())).collect(),
        optimizer_step: ck.optimizer.as_ref().map(|o| o.step),
    };
    let meta = serde_json::to_vec(&meta).expect("meta serializes");
    let mut data = Vec::new();
    for p in ck.weights.params() {
        push_f32(&mut data, &p.value.data);
    }
    if let Some(o) = &ck.optimizer {
        for buf in o.m.iter().chain(&o.v) {
            push_f32(&mut data, buf);
        }
    }
    let mut out = Vec::with_capacity(CK_HEADER + meta.len() + data.len() + 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&hex::decode(config_hash(cfg)).expect("hex digest"));
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&data);
    let crc = crc32fast::hash(&out[CK_HEADER..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let corrupt = |m: &str| ModelError::Corrupt(m.to_string());
    if bytes.len() < CK_HEADER + 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic or truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let hash = hex::encode(&bytes[8..40]);
    let meta_len = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes")) as usize;
    let data_len = u64::from_le_bytes(bytes[48..56].try_into().expect("8 bytes")) as usize;
    let end = CK_HEADER
        .checked_add(meta_len)
        .and_then(|v| v.checked_add(data_len))
        .ok_or_else(|| corrupt("length overflow"))?;
    if bytes.len() != end + 4 {
        return Err(corrupt("length fields do not match file size"));
    }
    let crc = u32::from_le_bytes(bytes[end..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[CK_HEADER..end]) != crc {
        return Err(corrupt("checksum mismatch"));
    }
    let mut meta: CheckpointMeta = serde_json::from_slice(&bytes[CK_HEADER..CK_HEADER + meta_len])
        .map_err(|e| ModelError::Corrupt(format!("metadata: {e}")))?;
    if config_hash(&meta.config) != hash {
        return Err(ModelError::ConfigHash);
    }
    meta.vocab.reindex();
    let floats: Vec<f32> = bytes[CK_HEADER + meta_len..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if data_len % 4 != 0 {
        return Err(corrupt("tensor block not a whole number of floats"));
    }
    let mut at = 0;
    let mut take = |n: usize| -> Result<Vec<f32>, ModelError> {
        let s = floats.get(at..at + n).ok_or_else(|| corrupt("tensor block too short"))?.to_vec();
        at += n;
        Ok(s)
    };
    let mut params = Vec::with_capacity(meta.tensors.len());
    for (name, shape) in &meta.tensors {
        let data = take(shape.iter().product())?;
        params.push(Param { name: name.clone(), value: Tensor::from_vec(shape, data) });
    }
    let weights = Weights::from_params(&meta.config, params)?;
    let optimizer = match meta.optimizer_step {
        None => None,
        Some(step) => {
            let sizes: Vec<usize> = weights.params().iter().map(|p| p.value.len()).collect();
            let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
            let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
            Some(OptimizerState { step, m, v })
        }
    };
    if at != floats.len() {
        return Err(corrupt("trailing tensor data"));
    }
    Ok(Checkpoint { weights, vocab: meta.vocab, manifest: meta.manifest, iteration: meta.iteration, optimizer })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};
    use approx::assert_abs_diff_eq;

    fn toy() -> ModelConfig {
        ModelConfig::toy().with_vocab(20)
    }

    fn scene_image(cfg: &ModelConfig) -> Image {
        let sc = SceneConfig { width: cfg.image_width, height: cfg.image_height, ..Default::default() };
        generate_scene(&sc, 3).unwrap().image
    }

    #[test]
    fn presets() {
        let p = ModelConfig::full_scale();
        assert_eq!((p.d_i, p.d_c, p.d_e, p.lstm_widths, p.n_orient), (2048, 512, 128, (256, 512), 19));
        let t = ModelConfig::toy();
        assert_eq!((t.d_i, t.d_c, t.d_e, t.lstm_widths, t.n_orient), (256, 128, 32, (64, 128), 19));
        assert_eq!(t.stride(), 16);
        assert_eq!(t.n_classes(), 21);
        assert!(ModelConfig { d_i: 0, ..toy() }.validate().is_err());
        assert!(ModelConfig::toy().validate().is_err(), "learned encoder needs a vocabulary");
        assert_eq!(ModelConfig::from_toml(&toy().to_toml()).unwrap(), toy());
        assert!(ModelConfig::from_toml("d_q = 3").unwrap_err().to_string().contains("d_q"));
    }

    #[test]
    fn feature_map_is_sixteenth_of_image() {
        let cfg = toy();
        let w = Weights::<f32>::new(&cfg, 0).unwrap();
        let img = scene_image(&cfg);
        let tr = visual_forward(&w, &image_tensor(&img));
        assert_eq!((tr.hf, tr.wf), (128 / 16, 128 / 16));
        assert_eq!(tr.features().len(), 64 * 8 * 8);
        assert_eq!(tr.logits.len(), 9 * 64);
        assert_eq!(generate_anchors(&cfg).len(), 9 * 64);
    }

    #[test]
    fn full_scale_preset_shapes() {
        let cfg = ModelConfig {
            image_width: 64,
            image_height: 64,
            n_p_test: 3,
            ..ModelConfig::full_scale().with_vocab(10)
        };
        let w = Weights::<f32>::new(&cfg, 1).unwrap();
        let img = Image { width: 64, height: 64, pixels: vec![128; 64 * 64 * 3] };
        let props = extract_proposals(&img, &w).unwrap();
        assert_eq!(props.len(), 3);
        assert!(props.iter().all(|p| p.y_img.len() == 2048));
        let cmd = encode_command(&[1, 2, 3], &w).unwrap();
        assert_eq!(cmd.y_cmd.len(), 512);
        let preds = predict_grasps(&props, &cmd, &w).unwrap();
        assert_eq!(preds[0].gamma.len(), 21);
        assert_eq!(preds[0].box_deltas.len(), 19 * 4);
    }

    #[test]
    fn zero_weights_give_uniform_scores() {
        let cfg = toy();
        let mut w = Weights::<f32>::new(&cfg, 0).unwrap();
        w.fill(0.0);
        let props = extract_proposals(&scene_image(&cfg), &w).unwrap();
        assert_eq!(props.len(), cfg.n_p_test.min(9 * 64));
        assert!(props.iter().all(|p| p.rho == 0.5));
    }

    #[test]
    fn extraction_is_deterministic_and_size_checked() {
        let cfg = toy();
        let w = Weights::<f32>::new(&cfg, 5).unwrap();
        let img = scene_image(&cfg);
        let a = extract_proposals(&img, &w).unwrap();
        let b = extract_proposals(&img, &w).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| (0.0..=1.0).contains(&p.rho) && p.roi.w > 0.0 && p.roi.h > 0.0));
        let small = Image { width: 64, height: 64, pixels: vec![0; 64 * 64 * 3] };
        assert!(matches!(extract_proposals(&small, &w), Err(ModelError::ImageSize { .. })));
    }

    #[test]
    fn command_encoder_contract() {
        let cfg = toy();
        let w = Weights::<f64>::new(&cfg, 2).unwrap();
        let one = encode_command(&[4], &w).unwrap().y_cmd;
        let two = encode_command(&[4, 4], &w).unwrap().y_cmd;
        assert_eq!(one.len(), 128);
        assert!(one.iter().chain(&two).all(|&v| v >= 0.0));
        assert_ne!(one, two);
        assert!(matches!(encode_command(&[], &w), Err(ModelError::EmptyCommand)));
        assert!(matches!(encode_command(&[20], &w), Err(ModelError::TokenOutOfRange { index: 20, vocab: 20 })));
    }

    #[test]
    fn merge_identities() {
        let cfg = toy();
        let w = Weights::<f64>::new(&cfg, 2).unwrap();
        let y_img: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin()).collect();
        let zeros = vec![0.0; 128];
        assert!(merge_features(&y_img, &zeros, &w).unwrap().iter().all(|&v| v == 0.0));
        assert!(merge_features(&y_img[..10], &zeros, &w).is_err());

        // With D_I = D_C the reduction is the identity, so ones ⊙ y_cmd = y_cmd.
        let same = ModelConfig { d_i: 128, ..toy() };
        let w = Weights::<f64>::new(&same, 2).unwrap();
        assert!(w.get("reduce.weight").is_none());
        let ones = vec![1.0; 128];
        let y_cmd: Vec<f64> = (0..128).map(|i| i as f64 * 0.1).collect();
        assert_eq!(merge_features(&ones, &y_cmd, &w).unwrap(), y_cmd);
    }

    #[test]
    fn grasp_head_wiring() {
        let cfg = toy();
        let w = Weights::<f64>::new(&cfg, 9).unwrap();
        let props = extract_proposals(&scene_image(&cfg), &w).unwrap();
        let props = &props[..5];
        let a = predict_grasps(props, &encode_command(&[1, 2], &w).unwrap(), &w).unwrap();
        let b = predict_grasps(props, &encode_command(&[3, 7, 7], &w).unwrap(), &w).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.gamma.len(), 21);
            assert_eq!(p.box_deltas.len(), 76);
            assert_abs_diff_eq!(p.gamma.iter().sum::<f64>(), 1.0, epsilon = 1e-5);
            assert_eq!(p.box_deltas, q.box_deltas);
        }
        assert!(a.iter().zip(&b).any(|(p, q)| p.gamma != q.gamma));
        assert!(matches!(predict_grasps(&[], &encode_command(&[1], &w).unwrap(), &w), Err(ModelError::EmptyProposals)));
    }

    #[test]
    fn box_coding() {
        let roi = AxisBox::new(40.0, 50.0, 20.0, 10.0);
        let g = decode_box(&roi, [0.0; 4], OrientationClass::Orientation(3), 19).unwrap();
        assert_eq!((g.x(), g.y(), g.w(), g.h()), (40.0, 50.0, 20.0, 10.0));
        assert_abs_diff_eq!(g.theta(), class_to_theta(OrientationClass::Orientation(3), 19).unwrap());
        let g = decode_box(&roi, [0.0, 0.0, 2f64.ln(), 0.0], OrientationClass::Orientation(0), 19).unwrap();
        assert_abs_diff_eq!(g.w(), 40.0, epsilon = 1e-12);
        assert!(decode_box(&roi, [0.0; 4], OrientationClass::Background, 19).is_err());
        assert!(decode_box(&roi, [0.0; 4], OrientationClass::NotTarget, 19).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        for _ in 0..200 {
            let r = AxisBox::new(rng.random_range(0.0..128.0), rng.random_range(0.0..128.0), rng.random_range(4.0..60.0), rng.random_range(4.0..60.0));
            let (x, y, w, h) = (rng.random_range(0.0..128.0), rng.random_range(0.0..128.0), rng.random_range(4.0..60.0), rng.random_range(4.0..60.0));
            let k = rng.random_range(0..19);
            let g = decode_box(&r, encode_box(&r, x, y, w, h), OrientationClass::Orientation(k), 19).unwrap();
            for (a, b) in [(g.x(), x), (g.y(), y), (g.w(), w), (g.h(), h)] {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = toy();
        let w = Weights::<f32>::new(&cfg, 1).unwrap();
        let mut opt = OptimizerState::new(&w);
        opt.step = 7;
        opt.m[0][0] = 0.5;
        let ck = Checkpoint {
            weights: w,
            vocab: Vocabulary::from_words((0..19).map(|i| format!("w{i}"))),
            manifest: RunManifest::new().with_seed("train", 3),
            iteration: 7,
            optimizer: Some(opt),
        };
        let bytes = encode_checkpoint(&ck);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 100] ^= 1;
        assert!(matches!(decode_checkpoint(&bad), Err(ModelError::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(matches!(decode_checkpoint(&bad), Err(ModelError::ConfigHash)));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(ModelError::Version { .. })));
    }
}
