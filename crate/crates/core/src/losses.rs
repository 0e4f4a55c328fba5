//! Loss terms: softmax cross-entropy, smoothed L1, the online instance
//! matching (OIM) loss with its lookup table and unlabeled queue, and the
//! bookkeeping that sums them into the detection, re-id, RPN and total losses.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, l2_normalize, Rng, Tensor, DEFAULT_NORM_EPS};

/// Tolerance on `‖x‖ = 1` for embeddings handed to the OIM loss.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Identity supervision for one sample. Labeled ids are 0-based class
/// indices into the lookup table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PersonLabel {
    Labeled(usize),
    Unlabeled,
}

/// Linear classifier over embeddings with `K + 1` classes; the last class
/// (index `K`) is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    /// `[D, K + 1]`, column `i` is the weight vector of class `i`.
    pub weights: Tensor,
}

impl SoftmaxClassifier {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.dims().len() != 2 || weights.dims()[1] < 2 {
            return Err(Error::Shape(format!(
                "classifier weights must be [D, K+1] with K >= 1, got {:?}",
                weights.dims()
            )));
        }
        Ok(SoftmaxClassifier { weights })
    }

    pub fn init(dim: usize, identities: usize, std: f64, rng: &mut Rng) -> Self {
        SoftmaxClassifier {
            weights: Tensor::randn(&[dim, identities + 1], std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn background(&self) -> usize {
        self.num_classes() - 1
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let k = self.num_classes();
        let mut z = vec![0.0; k];
        for (row, &xi) in self.weights.data().chunks_exact(k).zip(x) {
            for (zj, &w) in z.iter_mut().zip(row) {
                *zj += w * xi;
            }
        }
        z
    }
}

#[derive(Debug, Clone)]
pub struct SoftmaxCe {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub grad_weights: Tensor,
}

/// Cross-entropy of `softmax(Wᵀx)` against class `target`.
pub fn softmax_ce(classifier: &SoftmaxClassifier, x: &[f64], target: usize) -> Result<SoftmaxCe> {
    let k = classifier.num_classes();
    if x.len() != classifier.dim() {
        return Err(Error::Shape(format!(
            "softmax_ce: input dim {} but classifier dim {}",
            x.len(),
            classifier.dim()
        )));
    }
    if target >= k {
        return Err(Error::Index {
            what: "softmax target class",
            index: target,
            len: k,
        });
    }
    let z = classifier.logits(x);
    let loss = numerics::log_sum_exp(&z) - z[target];
    let probs = numerics::softmax(&z);
    let mut dz = probs.clone();
    dz[target] -= 1.0;
    let mut grad_x = vec![0.0; x.len()];
    let mut grad_w = vec![0.0; x.len() * k];
    for ((row, grow), (&xi, gx)) in classifier
        .weights
        .data()
        .chunks_exact(k)
        .zip(grad_w.chunks_exact_mut(k))
        .zip(x.iter().zip(grad_x.iter_mut()))
    {
        *gx = row.iter().zip(&dz).map(|(w, d)| w * d).sum();
        for (g, &d) in grow.iter_mut().zip(&dz) {
            *g = xi * d;
        }
    }
    Ok(SoftmaxCe {
        loss,
        probs,
        grad_x,
        grad_weights: Tensor::new(classifier.weights.dims().to_vec(), grad_w)?,
    })
}

/// Smoothed L1 summed over coordinates and divided by the number of boxes
/// `n = pred.len() / 4`. Returns `(loss, d loss / d pred)`; with no boxes the
/// loss is zero.
pub fn smoothed_l1(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.len() % 4 != 0 {
        return Err(Error::Shape(format!(
            "smoothed_l1: lengths {} and {} must match and be a multiple of 4",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() / 4;
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            d.clamp(-1.0, 1.0) * inv
        })
        .collect();
    Ok((loss * inv, grad))
}

/// Identity memory for the OIM loss: one unit-norm row per labeled identity
/// plus a bounded FIFO of recent unlabeled features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OimState {
    /// `[K, D]`.
    pub lookup: Tensor,
    pub queue: VecDeque<Vec<f64>>,
    pub capacity: usize,
    pub gamma: f64,
    pub momentum: f64,
}

impl OimState {
    /// Lookup rows start as random unit vectors.
    pub fn new(identities: usize, dim: usize, capacity: usize, gamma: f64, momentum: f64, rng: &mut Rng) -> Result<Self> {
        if identities == 0 || dim == 0 {
            return Err(Error::Config("OIM state needs at least one identity and dimension".into()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("OIM temperature must lie in (0, 1], got {gamma}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("OIM momentum must lie in [0, 1), got {momentum}")));
        }
        let mut lookup = Tensor::zeros(&[identities, dim]);
        for row in lookup.data_mut().chunks_exact_mut(dim) {
            loop {
                for v in row.iter_mut() {
                    *v = rng.normal();
                }
                if let Ok(n) = l2_normalize(row, DEFAULT_NORM_EPS) {
                    row.copy_from_slice(&n.unit);
                    break;
                }
            }
        }
        Ok(OimState {
            lookup,
            queue: VecDeque::with_capacity(capacity),
            capacity,
            gamma,
            momentum,
        })
    }

    pub fn identities(&self) -> usize {
        self.lookup.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.lookup.dims()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.lookup.data()[i * d..(i + 1) * d]
    }

    fn check(&self, x: &[f64], label: PersonLabel) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("OIM: feature dim {} but table dim {}", x.len(), self.dim())));
        }
        let n = numerics::norm(x);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm { norm: n });
        }
        if let PersonLabel::Labeled(t) = label {
            if t >= self.identities() {
                return Err(Error::Index {
                    what: "OIM identity",
                    index: t,
                    len: self.identities(),
                });
            }
        }
        Ok(())
    }

    fn similarities(&self, x: &[f64]) -> Vec<f64> {
        self.lookup
            .data()
            .chunks_exact(self.dim())
            .map(|v| numerics::dot(v, x))
            .chain(self.queue.iter().map(|u| numerics::dot(u, x)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct OimOutput {
    pub loss: f64,
    /// Over the `K` lookup rows followed by the queue entries.
    pub probs: Vec<f64>,
    pub grad_x: Vec<f64>,
}

/// OIM loss of a unit-norm feature. Unlabeled samples yield zero loss and
/// zero gradient; their only role is to enter the queue via [`oim_update`].
pub fn oim_forward(state: &OimState, x: &[f64], label: PersonLabel) -> Result<OimOutput> {
    state.check(x, label)?;
    Ok(oim_forward_unchecked(state, x, label))
}

/// [`oim_forward`] without the unit-norm and range checks, so the loss can be
/// probed at perturbed points. `x` must still have the table dimension.
pub fn oim_forward_unchecked(state: &OimState, x: &[f64], label: PersonLabel) -> OimOutput {
    let logits: Vec<f64> = state.similarities(x).into_iter().map(|s| s / state.gamma).collect();
    let probs = numerics::softmax(&logits);
    let PersonLabel::Labeled(t) = label else {
        return OimOutput {
            loss: 0.0,
            probs,
            grad_x: vec![0.0; x.len()],
        };
    };
    let loss = numerics::log_sum_exp(&logits) - logits[t];
    let mut grad_x = vec![0.0; x.len()];
    let k = state.identities();
    for (i, &p) in probs.iter().enumerate() {
        let row = if i < k { state.row(i) } else { &state.queue[i - k] };
        for (g, &v) in grad_x.iter_mut().zip(row) {
            *g += p * v;
        }
    }
    for (g, &v) in grad_x.iter_mut().zip(state.row(t)) {
        *g = (*g - v) / state.gamma;
    }
    OimOutput { loss, probs, grad_x }
}

/// Memory update for one feature: labeled rows move toward `x` with momentum
/// and are renormalized; unlabeled features are enqueued, evicting the oldest
/// entry at capacity.
pub fn oim_update(state: &mut OimState, x: &[f64], label: PersonLabel) -> Result<()> {
    state.check(x, label)?;
    match label {
        PersonLabel::Labeled(t) => {
            let mu = state.momentum;
            let d = state.dim();
            let row = &mut state.lookup.data_mut()[t * d..(t + 1) * d];
            if mu == 0.0 {
                row.copy_from_slice(x);
                return Ok(());
            }
            let mixed: Vec<f64> = row.iter().zip(x).map(|(v, xi)| mu * v + (1.0 - mu) * xi).collect();
            // Opposite vectors at mu = 0.5 cancel; keep the old row then.
            if let Ok(n) = l2_normalize(&mixed, DEFAULT_NORM_EPS) {
                row.copy_from_slice(&n.unit);
            }
        }
        PersonLabel::Unlabeled => {
            if state.capacity == 0 {
                return Ok(());
            }
            if state.queue.len() == state.capacity {
                state.queue.pop_front();
            }
            state.queue.push_back(x.to_vec());
        }
    }
    Ok(())
}

/// Per-term losses going into [`compose_losses`]. `None` marks a term that is
/// disabled in the current stage; it counts as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub rpn_cls: Option<f64>,
    pub rpn_reg: Option<f64>,
    pub rpn_oim: Option<f64>,
    pub det_cls: Option<f64>,
    pub det_reg: Option<f64>,
    pub reid_softmax: Option<f64>,
    pub reid_oim: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_oim: f64,
    pub l_softmax: f64,
    pub l_cls_rpn: f64,
    pub l_reg_rpn: f64,
    pub l_oim_rpn: f64,
    pub l_rpn: f64,
    pub l_det: f64,
    pub l_reid: f64,
    pub l_total: f64,
}

/// Sums the parts: `rpn = cls + reg + oim` at the proposal network,
/// `det = cls + reg` and `reid = softmax + oim` at the heads and
/// `total = det + reid + rpn`.
pub fn compose_losses(parts: &LossParts) -> Result<LossReport> {
    let take = |name: &str, v: Option<f64>| -> Result<f64> {
        let v = v.unwrap_or(0.0);
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Numeric {
                term: name.to_string(),
                value: v,
            });
        }
        Ok(v)
    };
    let l_cls_rpn = take("l_cls_rpn", parts.rpn_cls)?;
    let l_reg_rpn = take("l_reg_rpn", parts.rpn_reg)?;
    let l_oim_rpn = take("l_oim_rpn", parts.rpn_oim)?;
    let l_cls = take("l_cls", parts.det_cls)?;
    let l_reg = take("l_reg", parts.det_reg)?;
    let l_softmax = take("l_softmax", parts.reid_softmax)?;
    let l_oim = take("l_oim", parts.reid_oim)?;
    let l_rpn = l_cls_rpn + l_reg_rpn + l_oim_rpn;
    let l_det = l_cls + l_reg;
    let l_reid = l_softmax + l_oim;
    Ok(LossReport {
        l_cls,
        l_reg,
        l_oim,
        l_softmax,
        l_cls_rpn,
        l_reg_rpn,
        l_oim_rpn,
        l_rpn,
        l_det,
        l_reid,
        l_total: l_det + l_reid + l_rpn,
    })
}

impl LossReport {
    /// Largest violation of the additivity identities.
    pub fn composition_error(&self) -> f64 {
        [
            self.l_rpn - (self.l_cls_rpn + self.l_reg_rpn + self.l_oim_rpn),
            self.l_det - (self.l_cls + self.l_reg),
            self.l_reid - (self.l_softmax + self.l_oim),
            self.l_total - (self.l_det + self.l_reid + self.l_rpn),
        ]
        .iter()
        .map(|d| d.abs())
        .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        l2_normalize(v, DEFAULT_NORM_EPS).unwrap().unit
    }

    fn state_from_rows(rows: &[Vec<f64>], queue: &[Vec<f64>], gamma: f64) -> OimState {
        let d = rows[0].len();
        OimState {
            lookup: Tensor::new(vec![rows.len(), d], rows.concat()).unwrap(),
            queue: queue.iter().cloned().collect(),
            capacity: 8,
            gamma,
            momentum: 0.5,
        }
    }

    #[test]
    fn softmax_ce_symmetric_two_class() {
        let c = SoftmaxClassifier::new(Tensor::zeros(&[3, 2])).unwrap();
        let out = softmax_ce(&c, &[0.1, 0.2, 0.3], 0).unwrap();
        assert!((out.probs[0] - 0.5).abs() < 1e-15);
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softmax_ce_saturates() {
        // Target logit 20 above the rest.
        let mut w = Tensor::zeros(&[1, 3]);
        w.set(&[0, 1], 20.0);
        let c = SoftmaxClassifier::new(w).unwrap();
        let out = softmax_ce(&c, &[1.0], 1).unwrap();
        assert!(out.loss < 1e-8);
        assert!(matches!(softmax_ce(&c, &[1.0], 3), Err(Error::Index { .. })));
    }

    #[test]
    fn smoothed_l1_values() {
        assert_eq!(smoothed_l1(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap().0, 0.0);
        let (l, g) = smoothed_l1(&[0.5, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        assert!((l - 0.125).abs() < 1e-15);
        assert_eq!(g[0], 0.5);
        let (l, g) = smoothed_l1(&[2.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        assert!((l - 1.5).abs() < 1e-15);
        assert_eq!(g[0], 1.0);
        let (l, g) = smoothed_l1(&[], &[]).unwrap();
        assert_eq!((l, g.len()), (0.0, 0));
        // Two boxes halve the per-box contribution.
        let (l, _) = smoothed_l1(&[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 8]).unwrap();
        assert!((l - 0.75).abs() < 1e-15);
    }

    #[test]
    fn oim_sole_class() {
        let x = unit(&[1.0, 2.0]);
        let s = state_from_rows(&[x.clone()], &[], 0.1);
        let out = oim_forward(&s, &x, PersonLabel::Labeled(0)).unwrap();
        assert_eq!(out.probs, vec![1.0]);
        assert!(out.loss.abs() < 1e-15);
    }

    #[test]
    fn oim_three_way_symmetry() {
        let x = vec![1.0, 0.0, 0.0];
        let r = |a: f64, b: f64| vec![0.5, a, b];
        let rows = [unit(&r(0.3, 0.4)), unit(&r(-0.5, 0.0))];
        let q = [unit(&r(0.0, -0.5))];
        let s = state_from_rows(&rows, &q, 0.1);
        let out = oim_forward(&s, &x, PersonLabel::Labeled(1)).unwrap();
        for p in &out.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn oim_temperature_example() {
        // v1·x = 1, v2·x = 0, u1·x = 0, gamma = 0.5.
        let x = vec![1.0, 0.0, 0.0];
        let s = state_from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], &[vec![0.0, 0.0, 1.0]], 0.5);
        let out = oim_forward(&s, &x, PersonLabel::Labeled(0)).unwrap();
        let e2 = 2f64.exp();
        assert!((out.probs[0] - e2 / (e2 + 2.0)).abs() < 1e-15);
        assert!((out.probs[0] - 0.78698).abs() < 1e-5);
        assert!((out.loss - 0.23955).abs() < 1e-5);
    }

    #[test]
    fn oim_unlabeled_has_no_loss() {
        let x = unit(&[1.0, 1.0]);
        let s = state_from_rows(&[unit(&[1.0, 0.0])], &[], 0.1);
        let out = oim_forward(&s, &x, PersonLabel::Unlabeled).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_x.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn oim_contract_errors() {
        let s = state_from_rows(&[unit(&[1.0, 0.0])], &[], 0.1);
        assert!(matches!(
            oim_forward(&s, &[2.0, 0.0], PersonLabel::Labeled(0)),
            Err(Error::NotUnitNorm { .. })
        ));
        assert!(matches!(
            oim_forward(&s, &[1.0, 0.0], PersonLabel::Labeled(1)),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn oim_update_rules() {
        let mut s = state_from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[], 0.1);
        s.momentum = 0.0;
        let x = unit(&[1.0, 1.0]);
        oim_update(&mut s, &x, PersonLabel::Labeled(0)).unwrap();
        assert_eq!(s.row(0), x.as_slice());

        s.momentum = 0.5;
        let y = vec![1.0, 0.0];
        oim_update(&mut s, &y, PersonLabel::Labeled(1)).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.row(1)[0] - h).abs() < 1e-15 && (s.row(1)[1] - h).abs() < 1e-15);

        s.capacity = 2;
        let xs = [vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        for x in &xs {
            oim_update(&mut s, x, PersonLabel::Unlabeled).unwrap();
        }
        assert_eq!(s.queue, VecDeque::from(vec![xs[1].clone(), xs[2].clone()]));
    }

    #[test]
    fn compose_examples() {
        let r = compose_losses(&LossParts {
            det_cls: Some(0.3),
            det_reg: Some(0.2),
            ..Default::default()
        })
        .unwrap();
        assert!((r.l_det - 0.5).abs() < 1e-15);
        assert_eq!(compose_losses(&LossParts::default()).unwrap().l_total, 0.0);
        let r = compose_losses(&LossParts {
            reid_oim: Some(1.25),
            reid_softmax: None,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(r.l_reid, r.l_oim);
        let e = compose_losses(&LossParts {
            rpn_reg: Some(f64::NAN),
            ..Default::default()
        })
        .unwrap_err();
        assert!(e.to_string().contains("l_reg_rpn"));
    }
}
