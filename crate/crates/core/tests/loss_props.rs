use approx::assert_relative_eq;
use proptest::prelude::*;

use fmt_search_core::losses::{
    compose_losses, oim_forward, oim_update, smoothed_l1, softmax_ce, LossParts, OimState, PersonLabel,
    SoftmaxClassifier,
};
use fmt_search_core::numerics::{l2_normalize, norm, softmax};
use fmt_search_core::{Rng, Tensor};

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    l2_normalize(&v, 1e-12).unwrap().unit
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn filled_state(seed: u64, k: usize, d: usize, queued: usize, gamma: f64) -> OimState {
    let mut rng = Rng::new(seed);
    let mut s = OimState::new(k, d, 8, gamma, 0.5, &mut rng).unwrap();
    for _ in 0..queued {
        let u = unit(&mut rng, d);
        oim_update(&mut s, &u, PersonLabel::Unlabeled).unwrap();
    }
    s
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-300.0..300.0f64, 1..40)) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert_eq!(argmax(&p), argmax(&v));
    }

    #[test]
    fn oim_probs_sum_to_one_and_argmax_ignores_gamma(seed in 0u64..10_000, queued in 0usize..12) {
        let mut rng = Rng::new(seed ^ 0x55);
        let x = unit(&mut rng, 6);
        let mut winners = Vec::new();
        for gamma in [0.05, 0.1, 0.5, 1.0] {
            let s = filled_state(seed, 5, 6, queued, gamma);
            let out = oim_forward(&s, &x, PersonLabel::Labeled(seed as usize % 5)).unwrap();
            prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert_eq!(out.probs.len(), 5 + queued.min(8));
            winners.push(argmax(&out.probs));
        }
        prop_assert!(winners.windows(2).all(|w| w[0] == w[1]), "{winners:?}");
    }

    #[test]
    fn oim_update_keeps_rows_unit_and_queue_bounded(seed in 0u64..10_000, n in 1usize..30) {
        let mut rng = Rng::new(seed);
        let mut s = OimState::new(3, 4, 5, 0.1, 0.5, &mut rng).unwrap();
        for i in 0..n {
            let u = unit(&mut rng, 4);
            let label = if i % 3 == 0 { PersonLabel::Unlabeled } else { PersonLabel::Labeled(i % 3) };
            oim_update(&mut s, &u, label).unwrap();
        }
        for r in 0..3 {
            prop_assert!((norm(s.row(r)) - 1.0).abs() <= 1e-9);
        }
        prop_assert_eq!(s.queue.len(), n.div_ceil(3).min(5));
    }

    #[test]
    fn report_is_additive(v in prop::collection::vec(prop::option::of(0.0..50.0f64), 7)) {
        let parts = LossParts {
            rpn_cls: v[0], rpn_reg: v[1], rpn_oim: v[2], det_cls: v[3],
            det_reg: v[4], reid_softmax: v[5], reid_oim: v[6],
        };
        let r = compose_losses(&parts).unwrap();
        prop_assert!(r.composition_error() <= 1e-12);
        let direct: f64 = v.iter().map(|x| x.unwrap_or(0.0)).sum();
        prop_assert!((r.l_total - direct).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn smoothed_l1_matches_piecewise_oracle(n in 1usize..5, seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let d: Vec<(f64, f64)> = (0..4 * n).map(|_| (rng.range(-4.0, 4.0), rng.range(-4.0, 4.0))).collect();
        let (p, t): (Vec<f64>, Vec<f64>) = d.into_iter().unzip();
        let (loss, _) = smoothed_l1(&p, &t).unwrap();
        let oracle: f64 = p.iter().zip(&t).map(|(a, b)| {
            let e: f64 = a - b;
            if e.abs() < 1.0 { 0.5 * e * e } else { e.abs() - 0.5 }
        }).sum::<f64>() / n as f64;
        assert_relative_eq!(loss, oracle, epsilon = 1e-12);
    }
}

#[test]
fn unlabeled_oim_is_inert() {
    let s = filled_state(3, 4, 5, 2, 0.1);
    let x = unit(&mut Rng::new(9), 5);
    let out = oim_forward(&s, &x, PersonLabel::Unlabeled).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.grad_x.iter().all(|&g| g == 0.0));
    assert!(oim_forward(&s, &[1.0, 1.0, 0.0, 0.0, 0.0], PersonLabel::Labeled(0)).is_err());
    assert!(oim_forward(&s, &x, PersonLabel::Labeled(4)).is_err());
}

#[test]
fn softmax_ce_loss_is_negative_log_probability() {
    let mut rng = Rng::new(5);
    let cls = SoftmaxClassifier::new(Tensor::randn(&[4, 6], 1.0, &mut rng)).unwrap();
    let x = [0.3, -0.2, 0.9, 0.1];
    for t in 0..6 {
        let out = softmax_ce(&cls, &x, t).unwrap();
        assert_relative_eq!(out.loss, -out.probs[t].ln(), epsilon = 1e-12);
    }
    assert!(softmax_ce(&cls, &x, 6).is_err());
}

#[test]
fn compose_rejects_bad_terms() {
    for bad in [f64::NAN, f64::INFINITY, -1.0] {
        let parts = LossParts {
            det_cls: Some(bad),
            ..LossParts::default()
        };
        assert!(compose_losses(&parts).is_err());
    }
}
