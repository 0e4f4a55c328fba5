//! Target assignment, minibatch sampling, the SGD loop and its three stages.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::{encode_box, iou, BBox};
use crate::losses::{compose_losses, oim_update, LossReport, OimState, PersonLabel};
use crate::model::{self, LossToggles, ModelConfig, ModelParams, RoiSample, RpnSample, Supervision};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objectness {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub objectness: Objectness,
    /// Present iff positive.
    pub regression: Option<[f64; 4]>,
    /// Present only for positives.
    pub label: Option<PersonLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignedTargets {
    pub targets: Vec<Target>,
}

impl AssignedTargets {
    pub fn indices(&self, kind: Objectness) -> Vec<usize> {
        (0..self.targets.len())
            .filter(|&i| self.targets[i].objectness == kind)
            .collect()
    }
}

/// Ground-truth person: a box and its pid (`-1` for unlabeled).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub pid: i64,
}

impl GroundTruth {
    pub fn label(&self) -> PersonLabel {
        if self.pid >= 0 {
            PersonLabel::Labeled(self.pid as usize)
        } else {
            PersonLabel::Unlabeled
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub total_iters: usize,
    /// First iteration of stage 1.
    pub s1_end: usize,
    /// First iteration of stage 2.
    pub s2_end: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub head_fg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub head_batch: usize,
    pub head_fg_fraction: f64,
    pub oim_gamma: f64,
    pub oim_momentum: f64,
    pub oim_queue: usize,
    /// Identity supervision on the proposal network.
    pub rpn_person_labels: bool,
    /// Softmax identity loss alongside OIM in the last stage.
    pub multiple_loss: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            decay_factor: 0.9,
            decay_every: 2000,
            total_iters: 15000,
            s1_end: 3000,
            s2_end: 7500,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            head_fg_iou: 0.5,
            rpn_batch: 64,
            rpn_fg_fraction: 0.5,
            head_batch: 32,
            head_fg_fraction: 0.25,
            oim_gamma: 0.1,
            oim_momentum: 0.5,
            oim_queue: 64,
            rpn_person_labels: true,
            multiple_loss: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_every == 0 {
            return fail("decay_every must be positive".into());
        }
        if !(self.s1_end < self.s2_end && self.s2_end <= self.total_iters) {
            return fail(format!(
                "stage boundaries must satisfy s1_end < s2_end <= total_iters, got {} / {} / {}",
                self.s1_end, self.s2_end, self.total_iters
            ));
        }
        if !(0.0 <= self.rpn_neg_iou && self.rpn_neg_iou < self.rpn_pos_iou && self.rpn_pos_iou <= 1.0) {
            return fail("rpn IoU thresholds must satisfy 0 <= neg < pos <= 1".into());
        }
        if !(self.head_fg_iou > 0.0 && self.head_fg_iou <= 1.0) {
            return fail(format!("head_fg_iou must lie in (0, 1], got {}", self.head_fg_iou));
        }
        if self.rpn_batch == 0 || self.head_batch == 0 {
            return fail("batch sizes must be at least 1".into());
        }
        for (n, f) in [("rpn_fg_fraction", self.rpn_fg_fraction), ("head_fg_fraction", self.head_fg_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return fail(format!("{n} must lie in [0, 1], got {f}"));
            }
        }
        if !(self.oim_gamma > 0.0 && self.oim_gamma <= 1.0) {
            return fail(format!("oim_gamma must lie in (0, 1], got {}", self.oim_gamma));
        }
        if !(0.0..1.0).contains(&self.oim_momentum) {
            return fail(format!("oim_momentum must lie in [0, 1), got {}", self.oim_momentum));
        }
        Ok(())
    }

    pub fn stage(&self, t: usize) -> u8 {
        if t < self.s1_end {
            0
        } else if t < self.s2_end {
            1
        } else {
            2
        }
    }

    pub fn toggles(&self, stage: u8) -> LossToggles {
        LossToggles {
            rpn_oim: stage >= 1 && self.rpn_person_labels,
            reid_oim: stage >= 1,
            reid_softmax: stage >= 2 && self.multiple_loss,
        }
    }
}

fn iou_matrix(boxes: &[BBox], gt: &[GroundTruth]) -> Vec<Vec<f64>> {
    boxes
        .iter()
        .map(|b| gt.iter().map(|g| iou(b, &g.bbox)).collect())
        .collect()
}

/// Best gt per row, ties to the lowest gt index.
fn best_gt(row: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (g, &v) in row.iter().enumerate() {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((g, v));
        }
    }
    best
}

fn positive(bbox: &BBox, g: &GroundTruth) -> Target {
    Target {
        objectness: Objectness::Positive,
        regression: Some(encode_box(&g.bbox, bbox)),
        label: Some(g.label()),
    }
}

const NEGATIVE: Target = Target {
    objectness: Objectness::Negative,
    regression: None,
    label: None,
};

const IGNORE: Target = Target {
    objectness: Objectness::Ignore,
    regression: None,
    label: None,
};

/// Anchor labels: positive at IoU ≥ `rpn_pos_iou` with some gt or as the
/// lowest-index best anchor of a gt, negative at max IoU ≤ `rpn_neg_iou`,
/// ignored otherwise.
pub fn assign_rpn_targets(anchors: &[BBox], gt: &[GroundTruth], cfg: &TrainConfig) -> AssignedTargets {
    if gt.is_empty() {
        return AssignedTargets {
            targets: vec![NEGATIVE; anchors.len()],
        };
    }
    let m = iou_matrix(anchors, gt);
    let mut forced = vec![false; anchors.len()];
    for g in 0..gt.len() {
        let mut best: Option<(usize, f64)> = None;
        for (a, row) in m.iter().enumerate() {
            if row[g] > 0.0 && best.map_or(true, |(_, b)| row[g] > b) {
                best = Some((a, row[g]));
            }
        }
        if let Some((a, _)) = best {
            forced[a] = true;
        }
    }
    let targets = anchors
        .iter()
        .zip(&m)
        .zip(&forced)
        .map(|((a, row), &forced)| {
            let (g, v) = best_gt(row).expect("gt is non-empty");
            if v >= cfg.rpn_pos_iou || forced {
                positive(a, &gt[g])
            } else if v <= cfg.rpn_neg_iou {
                NEGATIVE
            } else {
                IGNORE
            }
        })
        .collect();
    AssignedTargets { targets }
}

/// Region labels: foreground at max IoU ≥ `head_fg_iou` (inclusive), else
/// background.
pub fn assign_head_targets(proposals: &[BBox], gt: &[GroundTruth], cfg: &TrainConfig) -> AssignedTargets {
    let m = iou_matrix(proposals, gt);
    let targets = proposals
        .iter()
        .zip(&m)
        .map(|(p, row)| match best_gt(row) {
            Some((g, v)) if v >= cfg.head_fg_iou => positive(p, &gt[g]),
            _ => NEGATIVE,
        })
        .collect();
    AssignedTargets { targets }
}

/// Up to `floor(fg_fraction * batch)` positives, the rest negatives, each
/// drawn uniformly without replacement. Positives come first.
pub fn sample_minibatch(targets: &AssignedTargets, batch: usize, fg_fraction: f64, rng: &mut Rng) -> Vec<usize> {
    assert!(batch >= 1, "batch must be at least 1");
    let pos = targets.indices(Objectness::Positive);
    let neg = targets.indices(Objectness::Negative);
    let quota = (fg_fraction * batch as f64).floor() as usize;
    let mut out = rng.choose_k(&pos, quota.min(batch));
    let rest = batch - out.len();
    out.extend(rng.choose_k(&neg, rest));
    out
}

pub fn lr_schedule(cfg: &TrainConfig, t: usize) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((t / cfg.decay_every) as i32)
}

/// `p ← p − lr·g` for every tensor. Nothing is modified if any gradient
/// entry is non-finite.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
    for (name, g) in grads.named() {
        if let Some(&v) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                term: format!("gradient of {name}"),
                value: v,
            });
        }
    }
    for (p, (_, g)) in params.tensors_mut().into_iter().zip(grads.named()) {
        p.axpy(-lr, g);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub stage: u8,
    pub lr: f64,
    pub image: usize,
    pub losses: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedIter {
    pub iter: usize,
    pub image: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iter: usize,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub skipped: Vec<SkippedIter>,
    pub snapshots: Vec<Snapshot>,
}

pub const LOG_COLUMNS: [&str; 14] = [
    "iter", "stage", "lr", "l_cls", "l_reg", "l_oim", "l_softmax", "l_rpn", "l_det", "l_reid", "l_total",
    "l_cls_rpn", "l_reg_rpn", "l_oim_rpn",
];

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = LOG_COLUMNS.join(",");
        s.push('\n');
        for e in &self.entries {
            let r = &e.losses;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                e.iter,
                e.stage,
                e.lr,
                r.l_cls,
                r.l_reg,
                r.l_oim,
                r.l_softmax,
                r.l_rpn,
                r.l_det,
                r.l_reid,
                r.l_total,
                r.l_cls_rpn,
                r.l_reg_rpn,
                r.l_oim_rpn
            )
            .expect("writing to a String cannot fail");
        }
        s
    }

    /// Mean `l_total` over entries with `lo <= iter < hi`.
    pub fn mean_total(&self, lo: usize, hi: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.iter >= lo && e.iter < hi)
            .map(|e| e.losses.l_total)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub oim: OimState,
    pub log: TrainLog,
}

/// State visible to a [`train_with_hook`] callback after each iteration.
pub struct Progress<'a> {
    /// Number of iterations completed.
    pub done: usize,
    pub params: &'a ModelParams,
    pub oim: &'a OimState,
    pub log: &'a TrainLog,
}

/// Labeled identity count: one more than the largest labeled pid.
pub fn labeled_identities(scenes: &[Scene]) -> usize {
    scenes
        .iter()
        .flat_map(|s| s.annotation.pids.iter())
        .filter(|&&p| p >= 0)
        .map(|&p| p as usize + 1)
        .max()
        .unwrap_or(0)
}

pub fn ground_truth(scene: &Scene) -> Vec<GroundTruth> {
    scene
        .annotation
        .boxes
        .iter()
        .zip(&scene.annotation.pids)
        .map(|(&bbox, &pid)| GroundTruth { bbox, pid })
        .collect()
}

pub fn train(scenes: &[Scene], mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(scenes, mcfg, tcfg, &mut |_| Ok(None))
}

/// Runs the staged loop. `hook` is called after every iteration and may
/// return a snapshot to append to the log.
pub fn train_with_hook(
    scenes: &[Scene],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    hook: &mut dyn FnMut(&Progress) -> Result<Option<Snapshot>>,
) -> Result<TrainOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let k = labeled_identities(scenes);
    if k == 0 {
        return Err(Error::Config("training split has no labeled identities".into()));
    }
    let root = Rng::new(tcfg.seed);
    let mut params = ModelParams::init(mcfg, k, &mut root.fork(1))?;
    let mut oim = OimState::new(
        k,
        mcfg.embedding_dim,
        tcfg.oim_queue,
        tcfg.oim_gamma,
        tcfg.oim_momentum,
        &mut root.fork(2),
    )?;
    let mut order_rng = root.fork(3);
    let mut sample_rng = root.fork(4);
    let anchors = mcfg.anchors();
    let gts: Vec<Vec<GroundTruth>> = scenes.iter().map(ground_truth).collect();
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();

    for t in 0..tcfg.total_iters {
        if order.is_empty() {
            order = (0..scenes.len()).collect();
            order_rng.shuffle(&mut order);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let stage = tcfg.stage(t);
        let lr = lr_schedule(tcfg, t);
        let gt = &gts[idx];

        let fwd = model::train_forward(&params, mcfg, &scenes[idx].image)?;
        let rpn_targets = assign_rpn_targets(&anchors, gt, tcfg);
        let rpn_batch = sample_minibatch(&rpn_targets, tcfg.rpn_batch, tcfg.rpn_fg_fraction, &mut sample_rng);
        let mut rois: Vec<BBox> = model::propose(&fwd.rpn, &anchors, mcfg).into_iter().map(|d| d.bbox).collect();
        rois.extend(gt.iter().map(|g| g.bbox));
        let head_targets = assign_head_targets(&rois, gt, tcfg);
        let head_batch = sample_minibatch(&head_targets, tcfg.head_batch, tcfg.head_fg_fraction, &mut sample_rng);

        if rpn_batch.is_empty() || head_batch.is_empty() {
            log.skipped.push(SkippedIter {
                iter: t,
                image: idx,
                reason: "empty minibatch".into(),
            });
        } else {
            let sup = Supervision {
                rpn: rpn_batch
                    .iter()
                    .map(|&a| RpnSample {
                        anchor: a,
                        positive: rpn_targets.targets[a].objectness == Objectness::Positive,
                        target: rpn_targets.targets[a].regression,
                    })
                    .collect(),
                rois: head_batch
                    .iter()
                    .map(|&r| {
                        let tg = &head_targets.targets[r];
                        RoiSample {
                            bbox: rois[r],
                            foreground: tg.objectness == Objectness::Positive,
                            target: tg.regression,
                            label: tg.label,
                        }
                    })
                    .collect(),
            };
            let step = model::train_backward(&params, mcfg, &oim, &fwd, &sup, tcfg.toggles(stage))?;
            let losses = compose_losses(&step.parts)?;
            sgd_step(&mut params, &step.grads, lr)?;
            if stage >= 1 {
                for (x, label) in &step.memory_feed {
                    oim_update(&mut oim, x, *label)?;
                }
            }
            log.entries.push(LogEntry {
                iter: t,
                stage,
                lr,
                image: idx,
                losses,
            });
        }

        if (t + 1) % 500 == 0 {
            if let Some(e) = log.entries.last() {
                log::info!("iter {} stage {} lr {:.2e} l_total {:.4}", t + 1, stage, lr, e.losses.l_total);
            }
        }
        let snap = hook(&Progress {
            done: t + 1,
            params: &params,
            oim: &oim,
            log: &log,
        })?;
        if let Some(s) = snap {
            log.snapshots.push(s);
        }
    }
    Ok(TrainOutcome { params, oim, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(b: BBox, pid: i64) -> GroundTruth {
        GroundTruth { bbox: b, pid }
    }

    fn targets(kinds: &[Objectness]) -> AssignedTargets {
        AssignedTargets {
            targets: kinds
                .iter()
                .map(|&objectness| Target {
                    objectness,
                    regression: None,
                    label: None,
                })
                .collect(),
        }
    }

    #[test]
    fn identical_anchor_is_positive() {
        let a = BBox::new(10.0, 10.0, 30.0, 40.0);
        let t = assign_rpn_targets(&[a], &[gt(a, 3)], &TrainConfig::default());
        assert_eq!(t.targets[0].objectness, Objectness::Positive);
        assert_eq!(t.targets[0].label, Some(PersonLabel::Labeled(3)));
        assert_eq!(t.targets[0].regression, Some([0.0; 4]));
    }

    #[test]
    fn low_overlap_is_negative_and_best_anchor_forced() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let half = BBox::new(0.0, 0.0, 10.0, 20.0); // IoU 0.5
        let far = BBox::new(50.0, 50.0, 60.0, 60.0);
        let small = BBox::new(0.0, 0.0, 10.0, 1.0); // IoU 0.1
        let t = assign_rpn_targets(&[far, half, small], &[gt(g, -1)], &TrainConfig::default());
        let kinds: Vec<_> = t.targets.iter().map(|t| t.objectness).collect();
        assert_eq!(kinds, vec![Objectness::Negative, Objectness::Positive, Objectness::Negative]);
        assert_eq!(t.targets[1].label, Some(PersonLabel::Unlabeled));
    }

    #[test]
    fn no_gt_means_all_negative() {
        let a = [BBox::new(0.0, 0.0, 5.0, 5.0); 3];
        let t = assign_rpn_targets(&a, &[], &TrainConfig::default());
        assert!(t.targets.iter().all(|t| t.objectness == Objectness::Negative));
    }

    #[test]
    fn ignore_band_and_gt_ties() {
        let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let a = BBox::new(0.0, 0.0, 10.0, 20.0);
        let best = BBox::new(0.0, 0.0, 10.0, 11.0);
        let t = assign_rpn_targets(&[a, best], &[gt(g1, 0), gt(g1, 1)], &TrainConfig::default());
        assert_eq!(t.targets[0].objectness, Objectness::Ignore);
        assert_eq!(t.targets[1].label, Some(PersonLabel::Labeled(0)));
    }

    #[test]
    fn head_targets_inclusive_threshold() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let props = [g, BBox::new(0.0, 0.0, 10.0, 20.0), BBox::new(40.0, 40.0, 50.0, 50.0)];
        let t = assign_head_targets(&props, &[gt(g, 5)], &TrainConfig::default());
        assert_eq!(t.targets[0].label, Some(PersonLabel::Labeled(5)));
        assert_eq!(t.targets[1].objectness, Objectness::Positive);
        assert_eq!(t.targets[2].objectness, Objectness::Negative);
        assert_eq!(t.targets[2].label, None);
    }

    #[test]
    fn minibatch_quota_and_shortfall() {
        let mut kinds = vec![Objectness::Positive; 10];
        kinds.extend(vec![Objectness::Negative; 100]);
        kinds.push(Objectness::Ignore);
        let t = targets(&kinds);
        let b = sample_minibatch(&t, 32, 0.25, &mut Rng::new(1));
        assert_eq!(b.iter().filter(|&&i| i < 10).count(), 8);
        assert_eq!(b.len(), 32);
        assert!(!b.contains(&110));
        let mut few = vec![Objectness::Positive; 2];
        few.extend(vec![Objectness::Negative; 100]);
        let b = sample_minibatch(&targets(&few), 32, 0.25, &mut Rng::new(1));
        assert_eq!(b.iter().filter(|&&i| i < 2).count(), 2);
        assert_eq!(b.len(), 32);
        assert_eq!(b, sample_minibatch(&targets(&few), 32, 0.25, &mut Rng::new(1)));
        assert!(sample_minibatch(&targets(&[Objectness::Ignore]), 4, 0.5, &mut Rng::new(0)).is_empty());
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig {
            decay_every: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(&cfg, 0), 0.001);
        assert!((lr_schedule(&cfg, 1000) - 0.0009).abs() < 1e-18);
        let flat = TrainConfig {
            decay_factor: 1.0,
            ..cfg
        };
        assert_eq!(lr_schedule(&flat, 0), lr_schedule(&flat, 12345));
    }

    #[test]
    fn sgd_arithmetic_and_fail_fast() {
        let cfg = ModelConfig::tiny();
        let mut p = ModelParams::init(&cfg, 2, &mut Rng::new(0)).unwrap();
        let mut g = p.zeros_like();
        g.reid_classifier.weights.data_mut()[0] = 2.0;
        p.reid_classifier.weights.data_mut()[0] = 1.0;
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p.reid_classifier.weights.data()[0] - 0.8).abs() < 1e-15);
        let before = p.clone();
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
        g.head_fc.bias.data_mut()[0] = f64::NAN;
        let err = sgd_step(&mut p, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("head.fc.bias"), "{err}");
        assert_eq!(p, before);
    }

    #[test]
    fn stage_gating() {
        let cfg = TrainConfig {
            total_iters: 10,
            s1_end: 2,
            s2_end: 5,
            ..TrainConfig::default()
        };
        assert_eq!((cfg.stage(1), cfg.stage(2), cfg.stage(4), cfg.stage(5)), (0, 1, 1, 2));
        assert_eq!(cfg.toggles(0), LossToggles::DETECTION_ONLY);
        assert!(!cfg.toggles(1).reid_softmax && cfg.toggles(1).reid_oim && cfg.toggles(1).rpn_oim);
        assert_eq!(cfg.toggles(2), LossToggles::ALL);
        let baseline = TrainConfig {
            rpn_person_labels: false,
            multiple_loss: false,
            ..cfg
        };
        assert!(!baseline.toggles(2).rpn_oim && !baseline.toggles(2).reid_softmax);
        assert!(TrainConfig { s1_end: 5, ..cfg }.validate().is_err());
    }
}
