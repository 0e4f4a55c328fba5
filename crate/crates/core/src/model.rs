//! The network: a small convolutional backbone, a region proposal network with
//! an identity branch, a detection head and a re-identification head.
//!
//! Inference goes through [`search_forward`]. Training goes through
//! [`loss_and_grad`], which evaluates every loss term for a fixed
//! [`Supervision`] plan and back-propagates by hand into a gradient
//! [`ModelParams`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, decode_box, generate_anchors, nms, roi_pool, roi_pool_backward, BBox, Detection};
use crate::losses::{self, oim_forward, softmax_ce, LossParts, OimState, PersonLabel, SoftmaxClassifier};
use crate::numerics::{
    self, conv2d, conv2d_backward, l2_normalize, l2_normalize_backward, linear, linear_backward, maxpool2d,
    maxpool2d_backward, relu, relu_backward, Normalized, PoolOutput, Rng, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneLayer {
    pub channels: usize,
    pub kernel: usize,
    /// Convolution stride.
    pub stride: usize,
    /// Max-pool window and stride after the ReLU; 1 disables pooling.
    pub pool: usize,
}

impl BackboneLayer {
    pub const fn new(channels: usize, pool: usize) -> Self {
        BackboneLayer {
            channels,
            kernel: 3,
            stride: 1,
            pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub backbone: Vec<BackboneLayer>,
    pub rpn_channels: usize,
    pub anchor_sizes: Vec<f64>,
    /// Height over width.
    pub anchor_ratios: Vec<f64>,
    pub roi_size: usize,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub rpn_nms_thresh: f64,
    pub min_box_size: f64,
    pub score_thresh: f64,
    pub final_nms_thresh: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 96,
            image_width: 96,
            image_channels: 3,
            backbone: vec![BackboneLayer::new(8, 2), BackboneLayer::new(16, 2), BackboneLayer::new(32, 1)],
            rpn_channels: 32,
            anchor_sizes: vec![20.0, 28.0, 36.0],
            anchor_ratios: vec![1.0],
            roi_size: 7,
            feature_dim: 64,
            embedding_dim: 32,
            pre_nms_top_n: 300,
            post_nms_top_n: 50,
            rpn_nms_thresh: 0.7,
            min_box_size: 4.0,
            score_thresh: 0.5,
            final_nms_thresh: 0.3,
            norm_eps: numerics::DEFAULT_NORM_EPS,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration that still exercises every component.
    pub fn tiny() -> Self {
        ModelConfig {
            image_height: 32,
            image_width: 32,
            image_channels: 3,
            backbone: vec![BackboneLayer::new(2, 2), BackboneLayer::new(2, 2)],
            rpn_channels: 2,
            anchor_sizes: vec![8.0, 16.0],
            anchor_ratios: vec![1.0],
            roi_size: 2,
            feature_dim: 4,
            embedding_dim: 3,
            pre_nms_top_n: 40,
            post_nms_top_n: 10,
            ..ModelConfig::default()
        }
    }

    pub fn feature_stride(&self) -> usize {
        self.backbone.iter().map(|l| l.stride * l.pool).product()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.last().map_or(self.image_channels, |l| l.channels)
    }

    pub fn feature_size(&self) -> (usize, usize) {
        let s = self.feature_stride();
        (self.image_height / s, self.image_width / s)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }

    pub fn pooled_len(&self) -> usize {
        self.feature_channels() * self.roi_size * self.roi_size
    }

    pub fn anchors(&self) -> Vec<BBox> {
        let (h, w) = self.feature_size();
        generate_anchors(h, w, self.feature_stride(), &self.anchor_sizes, &self.anchor_ratios)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.backbone.is_empty() {
            return fail("backbone needs at least one layer".into());
        }
        for (i, l) in self.backbone.iter().enumerate() {
            if l.channels == 0 || l.kernel == 0 || l.kernel % 2 == 0 || l.stride == 0 || l.pool == 0 {
                return fail(format!("backbone layer {i} is invalid: {l:?}"));
            }
            if l.stride != 1 && l.kernel == 1 {
                return fail(format!("backbone layer {i}: strided 1x1 convolution is not supported"));
            }
        }
        let s = self.feature_stride();
        if self.image_height % s != 0 || self.image_width % s != 0 {
            return fail(format!(
                "image {}x{} is not divisible by feature stride {s}",
                self.image_height, self.image_width
            ));
        }
        if self.image_channels == 0 || self.rpn_channels == 0 || self.roi_size == 0 || self.feature_dim == 0 {
            return fail("channel counts and roi size must be positive".into());
        }
        if self.embedding_dim < 2 {
            return fail(format!("embedding_dim must be >= 2, got {}", self.embedding_dim));
        }
        if self.anchor_sizes.is_empty() || self.anchor_ratios.is_empty() {
            return fail("anchor sizes and ratios must be non-empty".into());
        }
        if self.anchor_sizes.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0)) {
            return fail("anchor sizes and ratios must be positive".into());
        }
        for (name, v) in [
            ("rpn_nms_thresh", self.rpn_nms_thresh),
            ("final_nms_thresh", self.final_nms_thresh),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return fail(format!("score_thresh must lie in [0, 1], got {}", self.score_thresh));
        }
        if self.post_nms_top_n == 0 || self.pre_nms_top_n == 0 {
            return fail("proposal counts must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        let (fh, fw) = self.feature_size();
        if fh == 0 || fw == 0 {
            return fail("feature map would be empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `[F, C, k, k]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    fn init(out: usize, inp: usize, k: usize, std: f64, rng: &mut Rng) -> Self {
        Conv {
            weight: Tensor::randn(&[out, inp, k, k], std, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn zeros_like(&self) -> Self {
        Conv {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[D_out, D_in]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn init(out: usize, inp: usize, std: f64, rng: &mut Rng) -> Self {
        Dense {
            weight: Tensor::randn(&[out, inp], std, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        linear(x, &self.weight, self.bias.data())
    }

    /// Accumulates parameter gradients, returns the input gradient.
    fn backward_into(&self, x: &[f64], grad_out: &[f64], acc: &mut Dense) -> Result<Vec<f64>> {
        let g = linear_backward(x, &self.weight, grad_out)?;
        acc.weight.axpy(1.0, &g.weights);
        for (a, b) in acc.bias.data_mut().iter_mut().zip(&g.bias) {
            *a += b;
        }
        Ok(g.input)
    }
}

/// All learnable tensors. The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<Conv>,
    pub rpn_conv: Conv,
    /// 1x1, two logits (background, person) per anchor.
    pub rpn_cls: Conv,
    /// 1x1, four deltas per anchor.
    pub rpn_reg: Conv,
    /// Identity projection of pooled proposal features.
    pub rpn_embed: Dense,
    pub head_fc: Dense,
    pub det_cls: Dense,
    pub det_reg: Dense,
    pub reid_proj: Dense,
    pub reid_classifier: SoftmaxClassifier,
}

impl ModelParams {
    /// He-initialized backbone and hidden layers, small output layers.
    pub fn init(cfg: &ModelConfig, identities: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if identities == 0 {
            return Err(Error::Config("at least one labeled identity is required".into()));
        }
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let mut backbone = Vec::with_capacity(cfg.backbone.len());
        let mut c = cfg.image_channels;
        for l in &cfg.backbone {
            backbone.push(Conv::init(l.channels, c, l.kernel, he(c * l.kernel * l.kernel), rng));
            c = l.channels;
        }
        let a = cfg.anchors_per_cell();
        let pooled = cfg.pooled_len();
        let e = cfg.embedding_dim;
        Ok(ModelParams {
            backbone,
            rpn_conv: Conv::init(cfg.rpn_channels, c, 3, he(c * 9), rng),
            rpn_cls: Conv::init(2 * a, cfg.rpn_channels, 1, 0.01, rng),
            rpn_reg: Conv::init(4 * a, cfg.rpn_channels, 1, 0.01, rng),
            rpn_embed: Dense::init(e, pooled, (1.0 / pooled as f64).sqrt(), rng),
            head_fc: Dense::init(cfg.feature_dim, pooled, he(pooled), rng),
            det_cls: Dense::init(2, cfg.feature_dim, 0.01, rng),
            det_reg: Dense::init(4, cfg.feature_dim, 0.001, rng),
            reid_proj: Dense::init(e, cfg.feature_dim, (1.0 / cfg.feature_dim as f64).sqrt(), rng),
            reid_classifier: SoftmaxClassifier::init(e, identities, 0.01, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            backbone: self.backbone.iter().map(Conv::zeros_like).collect(),
            rpn_conv: self.rpn_conv.zeros_like(),
            rpn_cls: self.rpn_cls.zeros_like(),
            rpn_reg: self.rpn_reg.zeros_like(),
            rpn_embed: self.rpn_embed.zeros_like(),
            head_fc: self.head_fc.zeros_like(),
            det_cls: self.det_cls.zeros_like(),
            det_reg: self.det_reg.zeros_like(),
            reid_proj: self.reid_proj.zeros_like(),
            reid_classifier: SoftmaxClassifier {
                weights: self.reid_classifier.weights.zeros_like(),
            },
        }
    }

    pub fn identities(&self) -> usize {
        self.reid_classifier.num_classes() - 1
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &c.weight));
            out.push((format!("backbone.{i}.bias"), &c.bias));
        }
        let convs = [("rpn.conv", &self.rpn_conv), ("rpn.cls", &self.rpn_cls), ("rpn.reg", &self.rpn_reg)];
        for (n, c) in convs {
            out.push((format!("{n}.weight"), &c.weight));
            out.push((format!("{n}.bias"), &c.bias));
        }
        let dense = [
            ("rpn.embed", &self.rpn_embed),
            ("head.fc", &self.head_fc),
            ("det.cls", &self.det_cls),
            ("det.reg", &self.det_reg),
            ("reid.proj", &self.reid_proj),
        ];
        for (n, d) in dense {
            out.push((format!("{n}.weight"), &d.weight));
            out.push((format!("{n}.bias"), &d.bias));
        }
        out.push(("reid.classifier".to_string(), &self.reid_classifier.weights));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for c in &mut self.backbone {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for c in [&mut self.rpn_conv, &mut self.rpn_cls, &mut self.rpn_reg] {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for d in [
            &mut self.rpn_embed,
            &mut self.head_fc,
            &mut self.det_cls,
            &mut self.det_reg,
            &mut self.reid_proj,
        ] {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out.push(&mut self.reid_classifier.weights);
        out
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Rebuilds parameters from tensors ordered as [`ModelParams::named`],
    /// using `self` as the shape template.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", slots.len(), tensors.len())));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.dims() != t.dims() {
                return Err(Error::Shape(format!("tensor shape {:?} vs {:?}", t.dims(), slot.dims())));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    pub fn to_named_map(&self) -> BTreeMap<String, Tensor> {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Reconstructs parameters from a name map, checking every shape against
    /// what `cfg` implies.
    pub fn from_named_map(cfg: &ModelConfig, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let classifier = map
            .get("reid.classifier")
            .ok_or_else(|| Error::Validation("checkpoint lacks `reid.classifier`".into()))?;
        if classifier.dims().len() != 2 || classifier.dims()[1] < 2 {
            return Err(Error::Validation(format!("bad classifier shape {:?}", classifier.dims())));
        }
        let identities = classifier.dims()[1] - 1;
        let template = ModelParams::init(cfg, identities, &mut Rng::new(0))?;
        let names: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
        if map.len() != names.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model expects {}",
                map.len(),
                names.len()
            )));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for n in &names {
            let t = map
                .get(n)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor `{n}`")))?;
            if !t.is_finite() {
                return Err(Error::Validation(format!("tensor `{n}` has non-finite entries")));
            }
            tensors.push(t.clone());
        }
        template
            .with_tensors(&tensors)
            .map_err(|e| Error::Validation(format!("checkpoint shapes do not match config: {e}")))
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

struct LayerTrace {
    input: Tensor,
    pre: Tensor,
    pool: Option<(Vec<usize>, Vec<usize>)>,
}

/// Intermediate values of a backbone pass kept for back-propagation.
pub struct BackboneTrace {
    layers: Vec<LayerTrace>,
}

fn check_image(cfg: &ModelConfig, image: &Tensor) -> Result<()> {
    let &[c, h, w] = image.dims() else {
        return Err(Error::Shape(format!("image must be [C,H,W], got {:?}", image.dims())));
    };
    let s = cfg.feature_stride();
    if h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!("image {h}x{w} not divisible by feature stride {s}")));
    }
    if c != cfg.image_channels {
        return Err(Error::Shape(format!("image has {c} channels, model expects {}", cfg.image_channels)));
    }
    Ok(())
}

fn backbone_impl(params: &ModelParams, cfg: &ModelConfig, image: &Tensor, keep: bool) -> Result<(Tensor, BackboneTrace)> {
    check_image(cfg, image)?;
    let mut x = image.clone();
    let mut layers = Vec::new();
    for (conv, spec) in params.backbone.iter().zip(&cfg.backbone) {
        let pre = conv2d(&x, &conv.weight, conv.bias.data(), spec.stride)?;
        let act = relu(&pre);
        let (next, pool) = if spec.pool > 1 {
            let PoolOutput { output, argmax } = maxpool2d(&act, spec.pool, spec.pool)?;
            (output, Some((act.dims().to_vec(), argmax)))
        } else {
            (act, None)
        };
        if keep {
            layers.push(LayerTrace { input: x, pre, pool });
        }
        x = next;
    }
    Ok((x, BackboneTrace { layers }))
}

/// Feature map `[C, H / stride, W / stride]`.
pub fn backbone_forward(params: &ModelParams, cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    backbone_impl(params, cfg, image, false).map(|(f, _)| f)
}

pub fn backbone_forward_traced(params: &ModelParams, cfg: &ModelConfig, image: &Tensor) -> Result<(Tensor, BackboneTrace)> {
    backbone_impl(params, cfg, image, true)
}

/// Back-propagates a feature-map gradient through the backbone; returns the
/// image gradient.
pub fn backbone_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    trace: &BackboneTrace,
    grad_features: Tensor,
    grads: &mut ModelParams,
) -> Result<Tensor> {
    let mut g = grad_features;
    for (i, layer) in trace.layers.iter().enumerate().rev() {
        if let Some((dims, argmax)) = &layer.pool {
            g = maxpool2d_backward(dims, argmax, &g);
        }
        g = relu_backward(&layer.pre, &g);
        let cg = conv2d_backward(&layer.input, &params.backbone[i].weight, cfg.backbone[i].stride, &g)?;
        grads.backbone[i].weight.axpy(1.0, &cg.weights);
        for (a, b) in grads.backbone[i].bias.data_mut().iter_mut().zip(&cg.bias) {
            *a += b;
        }
        g = cg.input;
    }
    Ok(g)
}

/// Proposal network outputs over the feature grid.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `[A, Hf, Wf]` person probabilities.
    pub objectness: Tensor,
    /// `[4A, Hf, Wf]`, channels `4a..4a+4` are the deltas of anchor `a`.
    pub deltas: Tensor,
    /// `[2A, Hf, Wf]` raw (background, person) logits.
    pub logits: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

impl RpnOutput {
    /// Flat anchor index (generation order) → `(a, i, j)`.
    pub fn anchor_position(&self, anchor: usize) -> (usize, usize, usize) {
        let [a_n, _, w] = [self.objectness.dims()[0], self.objectness.dims()[1], self.objectness.dims()[2]];
        let a = anchor % a_n;
        let cell = anchor / a_n;
        (a, cell / w, cell % w)
    }

    pub fn num_anchors(&self) -> usize {
        self.objectness.len()
    }

    pub fn score(&self, anchor: usize) -> f64 {
        let (a, i, j) = self.anchor_position(anchor);
        self.objectness.at(&[a, i, j])
    }

    pub fn anchor_deltas(&self, anchor: usize) -> [f64; 4] {
        let (a, i, j) = self.anchor_position(anchor);
        std::array::from_fn(|k| self.deltas.at(&[4 * a + k, i, j]))
    }
}

pub fn rpn_forward(params: &ModelParams, cfg: &ModelConfig, features: &Tensor) -> Result<RpnOutput> {
    let hidden_pre = conv2d(features, &params.rpn_conv.weight, params.rpn_conv.bias.data(), 1)?;
    let hidden = relu(&hidden_pre);
    let logits = conv2d(&hidden, &params.rpn_cls.weight, params.rpn_cls.bias.data(), 1)?;
    let deltas = conv2d(&hidden, &params.rpn_reg.weight, params.rpn_reg.bias.data(), 1)?;
    let a = cfg.anchors_per_cell();
    let (_, h, w) = (logits.dims()[0], logits.dims()[1], logits.dims()[2]);
    if logits.dims()[0] != 2 * a {
        return Err(Error::Shape(format!("rpn logits have {} channels, expected {}", logits.dims()[0], 2 * a)));
    }
    let mut objectness = Tensor::zeros(&[a, h, w]);
    let hw = h * w;
    let ld = logits.data();
    for ai in 0..a {
        for p in 0..hw {
            let bg = ld[(2 * ai) * hw + p];
            let fg = ld[(2 * ai + 1) * hw + p];
            objectness.data_mut()[ai * hw + p] = numerics::softmax(&[bg, fg])[1];
        }
    }
    Ok(RpnOutput {
        objectness,
        deltas,
        logits,
        hidden_pre,
        hidden,
    })
}

/// Decodes, clips, filters and suppresses anchor boxes into proposals.
///
/// Steps: decode every anchor, clip to the image, drop boxes with a side
/// below `min_box_size`, keep the `pre_nms_top_n` best scores (ties by anchor
/// index), suppress at `rpn_nms_thresh`, keep the first `post_nms_top_n`.
pub fn propose(rpn: &RpnOutput, anchors: &[BBox], cfg: &ModelConfig) -> Vec<Detection> {
    assert_eq!(anchors.len(), rpn.num_anchors(), "anchor count mismatch");
    let (iw, ih) = (cfg.image_width as f64, cfg.image_height as f64);
    let mut cands: Vec<Detection> = Vec::new();
    for (n, anchor) in anchors.iter().enumerate() {
        let b = decode_box(&rpn.anchor_deltas(n), anchor).clip(iw, ih);
        if b.width() < cfg.min_box_size || b.height() < cfg.min_box_size {
            continue;
        }
        cands.push(Detection::new(b, rpn.score(n)));
    }
    let order = geometry::score_order(cands.iter().map(|d| d.score));
    let top: Vec<Detection> = order
        .into_iter()
        .take(cfg.pre_nms_top_n)
        .map(|i| cands[i].clone())
        .collect();
    nms(&top, cfg.rpn_nms_thresh)
        .into_iter()
        .take(cfg.post_nms_top_n)
        .map(|i| top[i].clone())
        .collect()
}

/// Pooled region features flattened channel-major.
pub fn pool_box(cfg: &ModelConfig, features: &Tensor, bbox: &BBox) -> Result<geometry::RoiPoolOutput> {
    roi_pool(features, bbox, cfg.roi_size, cfg.roi_size, cfg.feature_stride())
}

/// Identity embeddings of proposals from the RPN branch.
#[derive(Debug, Clone, Default)]
pub struct RpnEmbeddings {
    /// `(proposal index, unit embedding)`.
    pub embeddings: Vec<(usize, Vec<f64>)>,
    pub skipped: usize,
}

pub fn rpn_identity_embed(
    params: &ModelParams,
    cfg: &ModelConfig,
    features: &Tensor,
    proposals: &[BBox],
) -> Result<RpnEmbeddings> {
    let mut out = RpnEmbeddings::default();
    for (i, b) in proposals.iter().enumerate() {
        let pooled = match pool_box(cfg, features, b) {
            Ok(p) if p.argmax.iter().any(Option::is_some) => p,
            Ok(_) | Err(Error::OutOfBounds(_)) => {
                out.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let raw = params.rpn_embed.apply(pooled.output.data())?;
        match l2_normalize(&raw, cfg.norm_eps) {
            Ok(n) => out.embeddings.push((i, n.unit)),
            Err(Error::DegenerateVector { .. }) => out.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn head_hidden(params: &ModelParams, pooled: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pre = params.head_fc.apply(pooled)?;
    let post = pre.iter().map(|v| v.max(0.0)).collect();
    Ok((pre, post))
}

/// `(person probabilities [background, person], box refinement deltas)`.
pub fn detection_head(params: &ModelParams, pooled: &Tensor) -> Result<([f64; 2], [f64; 4])> {
    let (_, hidden) = head_hidden(params, pooled.data())?;
    let logits = params.det_cls.apply(&hidden)?;
    let p = numerics::softmax(&logits);
    let d = params.det_reg.apply(&hidden)?;
    Ok(([p[0], p[1]], [d[0], d[1], d[2], d[3]]))
}

/// Unit-norm re-identification embedding of a pooled region.
pub fn reid_head(params: &ModelParams, cfg: &ModelConfig, pooled: &Tensor) -> Result<Vec<f64>> {
    let (_, hidden) = head_hidden(params, pooled.data())?;
    let raw = params.reid_proj.apply(&hidden)?;
    Ok(l2_normalize(&raw, cfg.norm_eps)?.unit)
}

/// Embedding of an arbitrary box on a precomputed feature map; gallery
/// detections and queries both go through here.
pub fn embed_box(params: &ModelParams, cfg: &ModelConfig, features: &Tensor, bbox: &BBox) -> Result<Vec<f64>> {
    let pooled = pool_box(cfg, features, bbox)?;
    reid_head(params, cfg, &pooled.output)
}

/// Full inference on one scene: detections sorted by descending score, each
/// with its embedding (absent only if the re-id projection collapsed).
pub fn search_forward(params: &ModelParams, cfg: &ModelConfig, image: &Tensor) -> Result<Vec<Detection>> {
    let features = backbone_forward(params, cfg, image)?;
    search_on_features(params, cfg, &features)
}

pub fn search_on_features(params: &ModelParams, cfg: &ModelConfig, features: &Tensor) -> Result<Vec<Detection>> {
    let rpn = rpn_forward(params, cfg, features)?;
    let proposals = propose(&rpn, &cfg.anchors(), cfg);
    let (iw, ih) = (cfg.image_width as f64, cfg.image_height as f64);
    let mut scored = Vec::new();
    for p in &proposals {
        let pooled = pool_box(cfg, features, &p.bbox)?;
        let (probs, deltas) = detection_head(params, &pooled.output)?;
        if probs[1] < cfg.score_thresh {
            continue;
        }
        let refined = decode_box(&deltas, &p.bbox).clip(iw, ih);
        if refined.width() < cfg.min_box_size || refined.height() < cfg.min_box_size {
            continue;
        }
        scored.push(Detection::new(refined, probs[1]));
    }
    let keep = nms(&scored, cfg.final_nms_thresh);
    let mut out = Vec::with_capacity(keep.len());
    for i in keep {
        let mut d = scored[i].clone();
        d.embedding = match embed_box(params, cfg, features, &d.bbox) {
            Ok(e) => Some(e),
            Err(Error::DegenerateVector { .. }) => None,
            Err(e) => return Err(e),
        };
        out.push(d);
    }
    Ok(out)
}

/// One sampled anchor for the proposal losses.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnSample {
    pub anchor: usize,
    pub positive: bool,
    /// Regression target, present iff positive.
    pub target: Option<[f64; 4]>,
}

/// One sampled region for the head losses.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample {
    pub bbox: BBox,
    pub foreground: bool,
    pub target: Option<[f64; 4]>,
    /// Identity of a foreground region; `None` for background.
    pub label: Option<PersonLabel>,
}

/// Everything the losses need to know about one training image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Supervision {
    pub rpn: Vec<RpnSample>,
    pub rois: Vec<RoiSample>,
}

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub rpn_oim: bool,
    pub reid_oim: bool,
    pub reid_softmax: bool,
}

impl LossToggles {
    pub const ALL: LossToggles = LossToggles {
        rpn_oim: true,
        reid_oim: true,
        reid_softmax: true,
    };
    pub const DETECTION_ONLY: LossToggles = LossToggles {
        rpn_oim: false,
        reid_oim: false,
        reid_softmax: false,
    };
}

#[derive(Debug, Clone)]
pub struct TrainStep {
    pub parts: LossParts,
    pub grads: ModelParams,
    /// Head embeddings of foreground regions with their labels, for the
    /// post-step memory update.
    pub memory_feed: Vec<(Vec<f64>, PersonLabel)>,
    /// Regions dropped from re-id terms because their embedding collapsed.
    pub degenerate: usize,
}

struct RoiTrace {
    pooled: geometry::RoiPoolOutput,
    fc_pre: Vec<f64>,
    fc: Vec<f64>,
    emb: Option<Normalized>,
}

/// Evaluates all active losses on `image` under `sup` and back-propagates
/// them into parameter gradients. Loss terms are averaged over their samples:
/// proposal classification over sampled anchors, proposal regression over
/// positive anchors, detection classification over regions, detection
/// regression over foreground regions, re-id terms over the regions that
/// carry an identity target.
pub fn loss_and_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    oim: &OimState,
    image: &Tensor,
    sup: &Supervision,
    toggles: LossToggles,
) -> Result<TrainStep> {
    let fwd = train_forward(params, cfg, image)?;
    train_backward(params, cfg, oim, &fwd, sup, toggles)
}

/// Training-mode forward pass over the shared layers.
pub struct TrainForward {
    pub features: Tensor,
    pub rpn: RpnOutput,
    trace: BackboneTrace,
}

pub fn train_forward(params: &ModelParams, cfg: &ModelConfig, image: &Tensor) -> Result<TrainForward> {
    let (features, trace) = backbone_forward_traced(params, cfg, image)?;
    let rpn = rpn_forward(params, cfg, &features)?;
    Ok(TrainForward { features, rpn, trace })
}

/// Losses and gradients for a completed [`train_forward`]; see [`loss_and_grad`].
pub fn train_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    oim: &OimState,
    fwd: &TrainForward,
    sup: &Supervision,
    toggles: LossToggles,
) -> Result<TrainStep> {
    let TrainForward { features, rpn, trace } = fwd;
    let mut grads = params.zeros_like();
    let mut parts = LossParts::default();

    // Proposal classification and regression.
    let mut g_logits = rpn.logits.zeros_like();
    let mut g_deltas = rpn.deltas.zeros_like();
    if !sup.rpn.is_empty() {
        let inv = 1.0 / sup.rpn.len() as f64;
        let mut cls = 0.0;
        let (mut pred, mut tgt, mut pos) = (Vec::new(), Vec::new(), Vec::new());
        for s in &sup.rpn {
            let (a, i, j) = rpn.anchor_position(s.anchor);
            let z = [rpn.logits.at(&[2 * a, i, j]), rpn.logits.at(&[2 * a + 1, i, j])];
            let y = usize::from(s.positive);
            cls += numerics::log_sum_exp(&z) - z[y];
            let p = numerics::softmax(&z);
            for (k, pk) in p.iter().enumerate() {
                let d = (pk - if k == y { 1.0 } else { 0.0 }) * inv;
                let idx = [2 * a + k, i, j];
                g_logits.set(&idx, g_logits.at(&idx) + d);
            }
            if let (true, Some(t)) = (s.positive, s.target) {
                pred.extend(rpn.anchor_deltas(s.anchor));
                tgt.extend(t);
                pos.push((a, i, j));
            }
        }
        parts.rpn_cls = Some(cls * inv);
        let (reg, g) = losses::smoothed_l1(&pred, &tgt)?;
        parts.rpn_reg = Some(reg);
        for (n, &(a, i, j)) in pos.iter().enumerate() {
            for k in 0..4 {
                let idx = [4 * a + k, i, j];
                g_deltas.set(&idx, g_deltas.at(&idx) + g[4 * n + k]);
            }
        }
    } else {
        parts.rpn_cls = Some(0.0);
        parts.rpn_reg = Some(0.0);
    }

    let mut g_features = features.zeros_like();

    // Head forward over sampled regions.
    let mut traces = Vec::with_capacity(sup.rois.len());
    let mut degenerate = 0;
    for r in &sup.rois {
        let pooled = pool_box(cfg, &features, &r.bbox)?;
        let (fc_pre, fc) = head_hidden(params, pooled.output.data())?;
        let wants_emb = r.foreground || toggles.reid_softmax;
        let emb = if wants_emb {
            let raw = params.reid_proj.apply(&fc)?;
            match l2_normalize(&raw, cfg.norm_eps) {
                Ok(n) => Some(n),
                Err(Error::DegenerateVector { .. }) => {
                    degenerate += 1;
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        traces.push(RoiTrace { pooled, fc_pre, fc, emb });
    }

    let n_rois = sup.rois.len();
    let fg: Vec<usize> = (0..n_rois).filter(|&i| sup.rois[i].foreground).collect();
    let labeled: Vec<(usize, usize)> = fg
        .iter()
        .filter_map(|&i| match sup.rois[i].label {
            Some(PersonLabel::Labeled(t)) if traces[i].emb.is_some() => Some((i, t)),
            _ => None,
        })
        .collect();
    let softmax_targets: Vec<(usize, usize)> = if toggles.reid_softmax {
        let bg = params.reid_classifier.background();
        (0..n_rois)
            .filter(|&i| traces[i].emb.is_some())
            .filter_map(|i| match (sup.rois[i].foreground, sup.rois[i].label) {
                (true, Some(PersonLabel::Labeled(t))) => Some((i, t)),
                (false, _) => Some((i, bg)),
                _ => None,
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut g_fc: Vec<Vec<f64>> = traces.iter().map(|t| vec![0.0; t.fc.len()]).collect();
    let mut g_emb: Vec<Vec<f64>> = traces.iter().map(|t| vec![0.0; cfg.embedding_dim * usize::from(t.emb.is_some())]).collect();

    // Detection classification and regression.
    if n_rois > 0 {
        let inv = 1.0 / n_rois as f64;
        let mut cls = 0.0;
        for (i, (r, t)) in sup.rois.iter().zip(&traces).enumerate() {
            let z = params.det_cls.apply(&t.fc)?;
            let y = usize::from(r.foreground);
            cls += numerics::log_sum_exp(&z) - z[y];
            let mut dz = numerics::softmax(&z);
            dz[y] -= 1.0;
            dz.iter_mut().for_each(|d| *d *= inv);
            let gi = params.det_cls.backward_into(&t.fc, &dz, &mut grads.det_cls)?;
            add(&mut g_fc[i], &gi);
        }
        parts.det_cls = Some(cls * inv);
        let (mut pred, mut tgt) = (Vec::new(), Vec::new());
        for &i in &fg {
            if let Some(t) = sup.rois[i].target {
                pred.extend(params.det_reg.apply(&traces[i].fc)?);
                tgt.extend(t);
            }
        }
        let (reg, g) = losses::smoothed_l1(&pred, &tgt)?;
        parts.det_reg = Some(reg);
        let mut n = 0;
        for &i in &fg {
            if sup.rois[i].target.is_some() {
                let gi = params.det_reg.backward_into(&traces[i].fc, &g[4 * n..4 * n + 4], &mut grads.det_reg)?;
                add(&mut g_fc[i], &gi);
                n += 1;
            }
        }
    } else {
        parts.det_cls = Some(0.0);
        parts.det_reg = Some(0.0);
    }

    // Head OIM.
    if toggles.reid_oim {
        let mut total = 0.0;
        if !labeled.is_empty() {
            let inv = 1.0 / labeled.len() as f64;
            for &(i, t) in &labeled {
                let e = traces[i].emb.as_ref().expect("labeled rois have embeddings");
                let out = oim_forward(oim, &e.unit, PersonLabel::Labeled(t))?;
                total += out.loss;
                for (g, d) in g_emb[i].iter_mut().zip(&out.grad_x) {
                    *g += d * inv;
                }
            }
            total *= inv;
        }
        parts.reid_oim = Some(total);
    }

    // Re-id softmax over identities plus background.
    if toggles.reid_softmax {
        let mut total = 0.0;
        if !softmax_targets.is_empty() {
            let inv = 1.0 / softmax_targets.len() as f64;
            for &(i, t) in &softmax_targets {
                let e = traces[i].emb.as_ref().expect("softmax targets have embeddings");
                let out = softmax_ce(&params.reid_classifier, &e.unit, t)?;
                total += out.loss;
                grads.reid_classifier.weights.axpy(inv, &out.grad_weights);
                for (g, d) in g_emb[i].iter_mut().zip(&out.grad_x) {
                    *g += d * inv;
                }
            }
            total *= inv;
        }
        parts.reid_softmax = Some(total);
    }

    // Embedding gradients back through normalization and projection.
    for (i, t) in traces.iter().enumerate() {
        if let Some(e) = &t.emb {
            if g_emb[i].iter().any(|&v| v != 0.0) {
                let graw = l2_normalize_backward(e, &g_emb[i]);
                let gi = params.reid_proj.backward_into(&t.fc, &graw, &mut grads.reid_proj)?;
                add(&mut g_fc[i], &gi);
            }
        }
    }

    // Shared hidden layer back to pooled features.
    for (i, t) in traces.iter().enumerate() {
        if g_fc[i].iter().all(|&v| v == 0.0) {
            continue;
        }
        let g_pre: Vec<f64> = g_fc[i]
            .iter()
            .zip(&t.fc_pre)
            .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
            .collect();
        let g_pooled = params.head_fc.backward_into(t.pooled.output.data(), &g_pre, &mut grads.head_fc)?;
        let g_pooled = Tensor::new(t.pooled.output.dims().to_vec(), g_pooled)?;
        roi_pool_backward(&t.pooled.argmax, &g_pooled, &mut g_features);
    }

    // Identity branch of the proposal network.
    if toggles.rpn_oim {
        let mut total = 0.0;
        if !labeled.is_empty() {
            let inv = 1.0 / labeled.len() as f64;
            let mut pending = Vec::new();
            for &(i, t) in &labeled {
                let pooled = &traces[i].pooled;
                let raw = params.rpn_embed.apply(pooled.output.data())?;
                let Ok(n) = l2_normalize(&raw, cfg.norm_eps) else {
                    continue;
                };
                let out = oim_forward(oim, &n.unit, PersonLabel::Labeled(t))?;
                total += out.loss;
                pending.push((i, n, out.grad_x));
            }
            for (i, n, g) in pending {
                let g: Vec<f64> = g.iter().map(|v| v * inv).collect();
                let graw = l2_normalize_backward(&n, &g);
                let pooled = &traces[i].pooled;
                let gp = params.rpn_embed.backward_into(pooled.output.data(), &graw, &mut grads.rpn_embed)?;
                roi_pool_backward(&pooled.argmax, &Tensor::new(pooled.output.dims().to_vec(), gp)?, &mut g_features);
            }
            total *= inv;
        }
        parts.rpn_oim = Some(total);
    }

    // Proposal network back to features.
    let mut g_hidden = Tensor::zeros(rpn.hidden.dims());
    for (head, g_out, acc) in [
        (&params.rpn_cls, &g_logits, &mut grads.rpn_cls),
        (&params.rpn_reg, &g_deltas, &mut grads.rpn_reg),
    ] {
        let cg = conv2d_backward(&rpn.hidden, &head.weight, 1, g_out)?;
        acc.weight.axpy(1.0, &cg.weights);
        add(acc.bias.data_mut(), &cg.bias);
        g_hidden.axpy(1.0, &cg.input);
    }
    let g_hidden_pre = relu_backward(&rpn.hidden_pre, &g_hidden);
    let cg = conv2d_backward(&features, &params.rpn_conv.weight, 1, &g_hidden_pre)?;
    grads.rpn_conv.weight.axpy(1.0, &cg.weights);
    add(grads.rpn_conv.bias.data_mut(), &cg.bias);
    g_features.axpy(1.0, &cg.input);

    backbone_backward(params, cfg, trace, g_features, &mut grads)?;

    let memory_feed = fg
        .iter()
        .filter_map(|&i| match (&traces[i].emb, sup.rois[i].label) {
            (Some(e), Some(l)) => Some((e.unit.clone(), l)),
            _ => None,
        })
        .collect();

    Ok(TrainStep {
        parts,
        grads,
        memory_feed,
        degenerate,
    })
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk model: configuration, named parameter tensors and the identity
/// memory, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub oim_state: OimState,
}

impl Checkpoint {
    pub fn new(cfg: &ModelConfig, params: &ModelParams, oim: &OimState) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config: cfg.clone(),
            tensors: params.to_named_map(),
            oim_state: oim.clone(),
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::from_named_map(&self.model_config, &self.tensors)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported checkpoint format_version {}",
                path.display(),
                ck.format_version
            )));
        }
        ck.model_config.validate()?;
        ck.params()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params(cfg: &ModelConfig, k: usize) -> ModelParams {
        ModelParams::init(cfg, k, &mut Rng::new(0)).unwrap().zeros_like()
    }

    #[test]
    fn feature_map_shape() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.feature_stride(), 4);
        let params = ModelParams::init(&cfg, 4, &mut Rng::new(1)).unwrap();
        let img = Tensor::uniform(&[3, 96, 96], -0.5, 0.5, &mut Rng::new(2));
        let f = backbone_forward(&params, &cfg, &img).unwrap();
        assert_eq!(f.dims(), &[32, 24, 24]);
        let bad = Tensor::zeros(&[3, 90, 96]);
        assert!(matches!(backbone_forward(&params, &cfg, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_image_zero_features() {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::init(&cfg, 4, &mut Rng::new(1)).unwrap();
        for c in &mut params.backbone {
            c.bias.fill(0.0);
        }
        let f = backbone_forward(&params, &cfg, &Tensor::zeros(&[3, 96, 96])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rpn_shapes_and_range() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 4, &mut Rng::new(3)).unwrap();
        let feats = Tensor::randn(&[32, 24, 24], 3.0, &mut Rng::new(4));
        let out = rpn_forward(&params, &cfg, &feats).unwrap();
        assert_eq!(out.objectness.dims(), &[3, 24, 24]);
        assert_eq!(out.deltas.dims(), &[12, 24, 24]);
        assert!(out.objectness.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn anchor_position_matches_generation_order() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 4, &mut Rng::new(3)).unwrap();
        let out = rpn_forward(&params, &cfg, &Tensor::zeros(&[32, 24, 24])).unwrap();
        let anchors = cfg.anchors();
        for n in [0, 1, 2, 3, 37, 1727] {
            let (a, i, j) = out.anchor_position(n);
            let (cx, cy) = anchors[n].center();
            assert_eq!((cx, cy), ((j as f64 + 0.5) * 4.0, (i as f64 + 0.5) * 4.0));
            assert_eq!(anchors[n].width(), cfg.anchor_sizes[a]);
        }
    }

    #[test]
    fn detection_head_zero_weights_is_uniform() {
        let cfg = ModelConfig::default();
        let params = zero_params(&cfg, 3);
        let pooled = Tensor::full(&[32, 7, 7], 0.3);
        let (p, d) = detection_head(&params, &pooled).unwrap();
        assert_eq!(p, [0.5, 0.5]);
        assert_eq!(d, [0.0; 4]);
    }

    #[test]
    fn reid_head_unit_and_self_similar() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 3, &mut Rng::new(8)).unwrap();
        let pooled = Tensor::uniform(&[32, 7, 7], 0.0, 1.0, &mut Rng::new(9));
        let a = reid_head(&params, &cfg, &pooled).unwrap();
        let b = reid_head(&params, &cfg, &pooled).unwrap();
        assert!((numerics::norm(&a) - 1.0).abs() < 1e-9);
        assert!((numerics::dot(&a, &b) - 1.0).abs() < 1e-12);
        let zero = zero_params(&cfg, 3);
        assert!(matches!(reid_head(&zero, &cfg, &pooled), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn zero_model_search_completes() {
        let cfg = ModelConfig::default();
        let params = zero_params(&cfg, 3);
        let img = Tensor::uniform(&[3, 96, 96], -0.5, 0.5, &mut Rng::new(5));
        let dets = search_forward(&params, &cfg, &img).unwrap();
        for d in &dets {
            assert_eq!(d.score, 0.5);
            assert!(d.embedding.is_none());
        }
    }

    #[test]
    fn propose_ties_fall_back_to_index_order() {
        let cfg = ModelConfig {
            rpn_nms_thresh: 0.99,
            ..ModelConfig::default()
        };
        let params = zero_params(&cfg, 3);
        let rpn = rpn_forward(&params, &cfg, &Tensor::zeros(&[32, 24, 24])).unwrap();
        let anchors = cfg.anchors();
        let props = propose(&rpn, &anchors, &cfg);
        assert_eq!(props.len(), cfg.post_nms_top_n);
        let clipped: Vec<BBox> = anchors.iter().map(|a| a.clip(96.0, 96.0)).collect();
        let mut last = 0;
        for p in &props {
            let idx = clipped.iter().position(|a| *a == p.bbox).unwrap();
            assert!(idx >= last);
            last = idx;
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = ModelConfig::tiny();
        let mut rng = Rng::new(17);
        let params = ModelParams::init(&cfg, 3, &mut rng).unwrap();
        let mut oim = OimState::new(3, cfg.embedding_dim, 4, 0.1, 0.5, &mut rng).unwrap();
        losses::oim_update(&mut oim, &[0.6, 0.8, 0.0], PersonLabel::Unlabeled).unwrap();
        let ck = Checkpoint::new(&cfg, &params, &oim);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), params);
        assert_eq!(back.to_json(), ck.to_json());
    }
}
