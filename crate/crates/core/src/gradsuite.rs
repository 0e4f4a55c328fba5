//! Finite-difference suite over every differentiable operation, including the
//! complete training loss of a tiny model.

use std::time::{Duration, Instant};

use crate::error::Result;
use crate::geometry::{roi_pool, roi_pool_backward, BBox};
use crate::losses::{oim_forward_unchecked, smoothed_l1, softmax_ce, OimState, PersonLabel, SoftmaxClassifier};
use crate::model::{self, LossToggles, ModelConfig, ModelParams, RoiSample, RpnSample, Supervision};
use crate::numerics::{
    conv2d, conv2d_backward, finite_diff_check_with, l2_normalize, l2_normalize_backward, linear,
    linear_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, Differentiable, GradCheckOptions,
    GradCheckReport, Rng, Tensor, DEFAULT_NORM_EPS,
};

pub const OPS: [&str; 10] = [
    "conv2d",
    "linear",
    "relu",
    "maxpool2d",
    "roi_pool",
    "l2_normalize",
    "softmax_ce",
    "smoothed_l1",
    "oim_forward",
    "model_composite",
];

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Operation whose analytic gradient is deliberately perturbed.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            instances: 20,
            seed: 2024,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub op: &'static str,
    pub instances: usize,
    pub report: GradCheckReport,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub entries: Vec<SuiteEntry>,
    pub elapsed: Duration,
}

impl SuiteResult {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>9} {:>8} {:>8} {:>12}  status\n", "op", "instances", "checked", "skipped", "max_rel_err");
        for e in &self.entries {
            s.push_str(&format!(
                "{:<16} {:>9} {:>8} {:>8} {:>12.3e}  {}\n",
                e.op,
                e.instances,
                e.report.checked,
                e.report.skipped,
                e.report.max_rel_error,
                if e.passed { "pass" } else { "FAIL" }
            ));
        }
        s
    }
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut entries = Vec::with_capacity(OPS.len());
    for (k, &op) in OPS.iter().enumerate() {
        let mut total = GradCheckReport::default();
        for i in 0..opts.instances {
            let mut rng = Rng::new(opts.seed).fork(((k as u64) << 32) | i as u64);
            let (case, point) = make_case(op, &mut rng)?;
            let corrupt = opts.corrupt.as_deref() == Some(op);
            let checked = Corruptible { inner: case, corrupt };
            let check = GradCheckOptions {
                step: opts.step,
                ..GradCheckOptions::default()
            };
            total.merge(&finite_diff_check_with(&checked, &point, &check)?);
        }
        entries.push(SuiteEntry {
            op,
            instances: opts.instances,
            passed: total.checked > 0 && total.max_rel_error <= opts.tolerance,
            report: total,
        });
    }
    Ok(SuiteResult {
        entries,
        elapsed: start.elapsed(),
    })
}

struct Corruptible {
    inner: Box<dyn Differentiable>,
    corrupt: bool,
}

impl Differentiable for Corruptible {
    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        self.inner.value(inputs)
    }

    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut g = self.inner.gradient(inputs)?;
        if self.corrupt {
            for t in g.iter_mut() {
                for v in t.data_mut() {
                    *v = *v * 1.01 + 1e-2;
                }
            }
        }
        Ok(g)
    }
}

fn contract(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct ConvCase {
    stride: usize,
    upstream: Tensor,
}

impl Differentiable for ConvCase {
    fn value(&self, x: &[Tensor]) -> Result<f64> {
        let y = conv2d(&x[0], &x[1], x[2].data(), self.stride)?;
        Ok(contract(y.data(), self.upstream.data()))
    }

    fn gradient(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        let g = conv2d_backward(&x[0], &x[1], self.stride, &self.upstream)?;
        Ok(vec![g.input, g.weights, Tensor::new(x[2].dims().to_vec(), g.bias)?])
    }
}

struct LinearCase {
    upstream: Vec<f64>,
}

impl Differentiable for LinearCase {
    fn value(&self, x: &[Tensor]) -> Result<f64> {
        Ok(contract(&linear(x[0].data(), &x[1], x[2].data())?, &self.upstream))
    }

    fn gradient(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        let g = linear_backward(x[0].data(), &x[1], &self.upstream)?;
        Ok(vec![
            Tensor::new(x[0].dims().to_vec(), g.input)?,
            g.weights,
            Tensor::new(x[2].dims().to_vec(), g.bias)?,
        ])
    }
}

struct ReluCase {
    upstream: Tensor,
}

impl Differentiable for ReluCase {
    fn value(&self, x: &[Tensor]) -> Result<f64> {
        Ok(contract(relu(&x[0]).data(), self.upstream.data()))
    }

    fn gradient(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![relu_backward(&x[0], &self.upstream)])
    }
}

struct PoolCase {
    window: usize,
    upstream: Tensor,
}

impl Differentiable for PoolCase {
    fn value(&self, x: &[Tensor]) -> Result<f64> {
        let p = maxpool2d(&x[0], self.window, self.window)?;
        Ok(contract(p.output.data(), self.upstream.data()))
    }

    fn gradient(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        let p = maxpool2d(&x[0], self.window, self.window)?;
        Ok(vec![maxpool2d_backward(x[0].dims(), &p.argmax, &self.upstream)])
    }
}

struct RoiCase {
    bbox: BBox,
    out: usize,
    stride: usize,
    upstream: Tensor,
}

impl Differentiable for RoiCase {
    fn value(&self, x: &[Tensor]) -> Result<f64> {
        let p = roi_pool(&x[0], &self.bbox, self.out, self.out, self.stride)?;
        Ok(contract(p.output.data(), self.upstream.data()))
    }

    fn gradient(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        let p = roi_pool(&x[0], &self.bbox, self.out, self.out, self.stride)?;
        let mut g = x[0].zeros_like();
        roi_pool_backward(&p.argmax, &self.upstream, &mut g);
        Ok(vec![g])
    }
}

struct NormCase {
    upstream: Vec<f64>,
}

impl Differentiable for NormCase {
    fn value(&self, x: &[Tensor]) -> Result<f64> {
        Ok(contract(&l2_normalize(x[0].data(), DEFAULT_NORM_EPS)?.unit, &self.upstream))
    }

    fn gradient(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        let n = l2_normalize(x[0].data(), DEFAULT_NORM_EPS)?;
        Ok(vec![Tensor::new(x[0].dims().to_vec(), l2_normalize_backward(&n, &self.upstream))?])
    }
}

struct SoftmaxCase {
    target: usize,
}

impl Differentiable for SoftmaxCase {
    fn value(&self, x: &[Tensor]) -> Result<f64> {
        Ok(softmax_ce(&SoftmaxClassifier::new(x[1].clone())?, x[0].data(), self.target)?.loss)
    }

    fn gradient(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        let out = softmax_ce(&SoftmaxClassifier::new(x[1].clone())?, x[0].data(), self.target)?;
        Ok(vec![Tensor::new(x[0].dims().to_vec(), out.grad_x)?, out.grad_weights])
    }
}

struct SmoothL1Case {
    target: Vec<f64>,
}

impl Differentiable for SmoothL1Case {
    fn value(&self, x: &[Tensor]) -> Result<f64> {
        Ok(smoothed_l1(x[0].data(), &self.target)?.0)
    }

    fn gradient(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        let (_, g) = smoothed_l1(x[0].data(), &self.target)?;
        Ok(vec![Tensor::new(x[0].dims().to_vec(), g)?])
    }
}

struct OimCase {
    state: OimState,
    target: usize,
}

impl Differentiable for OimCase {
    fn value(&self, x: &[Tensor]) -> Result<f64> {
        Ok(oim_forward_unchecked(&self.state, x[0].data(), PersonLabel::Labeled(self.target)).loss)
    }

    fn gradient(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        let out = oim_forward_unchecked(&self.state, x[0].data(), PersonLabel::Labeled(self.target));
        Ok(vec![Tensor::new(x[0].dims().to_vec(), out.grad_x)?])
    }
}

/// Total training loss of a tiny model as a function of all its parameters.
pub struct CompositeCase {
    pub cfg: ModelConfig,
    pub template: ModelParams,
    pub oim: OimState,
    pub image: Tensor,
    pub supervision: Supervision,
}

impl Differentiable for CompositeCase {
    fn value(&self, x: &[Tensor]) -> Result<f64> {
        let params = self.template.with_tensors(x)?;
        let step = model::loss_and_grad(&params, &self.cfg, &self.oim, &self.image, &self.supervision, LossToggles::ALL)?;
        Ok(crate::losses::compose_losses(&step.parts)?.l_total)
    }

    fn gradient(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        let params = self.template.with_tensors(x)?;
        let step = model::loss_and_grad(&params, &self.cfg, &self.oim, &self.image, &self.supervision, LossToggles::ALL)?;
        Ok(step.grads.to_tensors())
    }
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    l2_normalize(&v, DEFAULT_NORM_EPS).map(|n| n.unit).unwrap_or_else(|_| {
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        e
    })
}

fn random_box(w: f64, h: f64, min: f64, rng: &mut Rng) -> BBox {
    let bw = rng.range(min, w * 0.7);
    let bh = rng.range(min, h * 0.7);
    let x1 = rng.range(0.0, w - bw);
    let y1 = rng.range(0.0, h - bh);
    BBox::new(x1, y1, x1 + bw, y1 + bh)
}

fn random_oim(identities: usize, dim: usize, queue: usize, rng: &mut Rng) -> Result<OimState> {
    let gamma = [0.1, 0.5, 1.0][rng.below(3)];
    let mut state = OimState::new(identities, dim, queue.max(1), gamma, 0.5, rng)?;
    for _ in 0..queue {
        let u = random_unit(dim, rng);
        crate::losses::oim_update(&mut state, &u, PersonLabel::Unlabeled)?;
    }
    Ok(state)
}

/// A random tiny-model instance with a hand-built supervision plan that
/// activates every loss term.
pub fn composite_case(rng: &mut Rng) -> Result<(CompositeCase, Vec<Tensor>)> {
    let cfg = ModelConfig::tiny();
    let identities = 3;
    let params = ModelParams::init(&cfg, identities, rng)?;
    let image = Tensor::uniform(&[3, cfg.image_height, cfg.image_width], -0.5, 0.5, rng);
    let oim = random_oim(identities, cfg.embedding_dim, 2, rng)?;
    let n_anchors = cfg.anchors().len();
    let rand4 = |rng: &mut Rng| -> [f64; 4] { std::array::from_fn(|_| rng.range(-0.5, 0.5)) };
    let mut sup = Supervision::default();
    for k in 0..8 {
        let positive = k % 2 == 0;
        sup.rpn.push(RpnSample {
            anchor: rng.below(n_anchors),
            positive,
            target: positive.then(|| rand4(rng)),
        });
    }
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let labels = [
        Some(PersonLabel::Labeled(rng.below(identities))),
        Some(PersonLabel::Labeled(rng.below(identities))),
        Some(PersonLabel::Unlabeled),
        None,
        None,
    ];
    for label in labels {
        let foreground = label.is_some();
        sup.rois.push(RoiSample {
            bbox: random_box(w, h, 8.0, rng),
            foreground,
            target: foreground.then(|| rand4(rng)),
            label,
        });
    }
    let point = params.to_tensors();
    Ok((
        CompositeCase {
            cfg,
            template: params,
            oim,
            image,
            supervision: sup,
        },
        point,
    ))
}

fn make_case(op: &str, rng: &mut Rng) -> Result<(Box<dyn Differentiable>, Vec<Tensor>)> {
    Ok(match op {
        "conv2d" => {
            let c = 1 + rng.below(3);
            let f = 1 + rng.below(3);
            let k = [1, 3][rng.below(2)];
            let stride = 1 + rng.below(2);
            let (h, w) = (4 + rng.below(4), 4 + rng.below(4));
            let x = Tensor::randn(&[c, h, w], 1.0, rng);
            let wt = Tensor::randn(&[f, c, k, k], 0.5, rng);
            let b = Tensor::randn(&[f], 0.5, rng);
            let out = conv2d(&x, &wt, b.data(), stride)?;
            let upstream = Tensor::randn(out.dims(), 1.0, rng);
            (Box::new(ConvCase { stride, upstream }), vec![x, wt, b])
        }
        "linear" => {
            let (din, dout) = (1 + rng.below(8), 1 + rng.below(6));
            let x = Tensor::randn(&[din], 1.0, rng);
            let wt = Tensor::randn(&[dout, din], 0.5, rng);
            let b = Tensor::randn(&[dout], 0.5, rng);
            let upstream = (0..dout).map(|_| rng.normal()).collect();
            (Box::new(LinearCase { upstream }), vec![x, wt, b])
        }
        "relu" => {
            let x = Tensor::randn(&[2, 3, 4], 1.0, rng);
            let upstream = Tensor::randn(&[2, 3, 4], 1.0, rng);
            (Box::new(ReluCase { upstream }), vec![x])
        }
        "maxpool2d" => {
            let window = 2 + rng.below(2);
            let n = window * (2 + rng.below(2));
            let x = Tensor::randn(&[2, n, n], 1.0, rng);
            let o = n / window;
            let upstream = Tensor::randn(&[2, o, o], 1.0, rng);
            (Box::new(PoolCase { window, upstream }), vec![x])
        }
        "roi_pool" => {
            let stride = 4;
            let (c, fh, fw) = (2, 6 + rng.below(3), 6 + rng.below(3));
            let x = Tensor::randn(&[c, fh, fw], 1.0, rng);
            let bbox = random_box((fw * stride) as f64, (fh * stride) as f64, 4.0, rng);
            let out = 2 + rng.below(2);
            let upstream = Tensor::randn(&[c, out, out], 1.0, rng);
            (Box::new(RoiCase { bbox, out, stride, upstream }), vec![x])
        }
        "l2_normalize" => {
            let d = 2 + rng.below(7);
            let x = Tensor::randn(&[d], 1.0, rng);
            let upstream = (0..d).map(|_| rng.normal()).collect();
            (Box::new(NormCase { upstream }), vec![x])
        }
        "softmax_ce" => {
            let (d, classes) = (2 + rng.below(5), 2 + rng.below(5));
            let x = Tensor::randn(&[d], 1.0, rng);
            let wt = Tensor::randn(&[d, classes], 1.0, rng);
            let target = rng.below(classes);
            (Box::new(SoftmaxCase { target }), vec![x, wt])
        }
        "smoothed_l1" => {
            let n = 1 + rng.below(4);
            let pred = Tensor::randn(&[4 * n], 1.5, rng);
            let target = (0..4 * n).map(|_| rng.normal()).collect();
            (Box::new(SmoothL1Case { target }), vec![pred])
        }
        "oim_forward" => {
            let (k, d) = (2 + rng.below(5), 2 + rng.below(7));
            let q = rng.below(5);
            let state = random_oim(k, d, q, rng)?;
            let x = Tensor::from_vec(random_unit(d, rng));
            let target = rng.below(k);
            (Box::new(OimCase { state, target }), vec![x])
        }
        "model_composite" => {
            let (case, point) = composite_case(rng)?;
            (Box::new(case), point)
        }
        other => unreachable!("unknown op {other}"),
    })
}
