use approx::assert_relative_eq;
use proptest::prelude::*;

use fmt_search_core::geometry::{decode_box, encode_box, generate_anchors, iou, nms, roi_pool};
use fmt_search_core::{BBox, Detection, Tensor};

fn int_box() -> impl Strategy<Value = BBox> {
    (0u32..20, 0u32..20, 1u32..12, 1u32..12)
        .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
}

fn real_box() -> impl Strategy<Value = BBox> {
    (0.0..80.0f64, 0.0..80.0f64, 2.0..40.0f64, 2.0..40.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

// Counts covered unit cells; exact for integer-aligned boxes.
fn cell_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..40 {
        for x in 0..40 {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let ina = cx > a.x1 && cx < a.x2 && cy > a.y1 && cy < a.y2;
            let inb = cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2;
            inter += usize::from(ina && inb);
            union += usize::from(ina || inb);
        }
    }
    inter as f64 / union as f64
}

// Repeatedly takes the best remaining box and deletes whatever it overlaps.
fn nms_oracle(dets: &[Detection], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if dets[i].score > dets[best].score || (dets[i].score == dets[best].score && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && iou(&dets[best].bbox, &dets[i].bbox) <= thresh);
    }
    keep
}

proptest! {
    #[test]
    fn iou_matches_cell_count(a in int_box(), b in int_box()) {
        assert_relative_eq!(iou(&a, &b), cell_iou(&a, &b), epsilon = 1e-12);
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        assert_relative_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn nms_agrees_with_oracle(
        raw in prop::collection::vec((real_box(), 0u8..8), 0..50),
        thresh in prop_oneof![Just(0.3), Just(0.5), Just(0.7), 0.0..1.0f64],
    ) {
        // Coarse scores force ties.
        let dets: Vec<Detection> = raw.into_iter().map(|(b, s)| Detection::new(b, s as f64 / 8.0)).collect();
        let kept = nms(&dets, thresh);
        prop_assert_eq!(&kept, &nms_oracle(&dets, thresh));
        for (n, &i) in kept.iter().enumerate() {
            for &j in &kept[n + 1..] {
                prop_assert!(iou(&dets[i].bbox, &dets[j].bbox) <= thresh);
                prop_assert!(dets[i].score >= dets[j].score);
            }
        }
    }

    #[test]
    fn encode_decode_roundtrip(gt in real_box(), anchor in real_box()) {
        let back = decode_box(&encode_box(&gt, &anchor), &anchor);
        for (u, v) in <[f64; 4]>::from(back).iter().zip(<[f64; 4]>::from(gt).iter()) {
            prop_assert!((u - v).abs() <= 1e-9, "{back:?} vs {gt:?}");
        }
    }

    #[test]
    fn roi_pool_takes_region_maxima(b in real_box(), seed in 0u64..1000) {
        let mut rng = fmt_search_core::Rng::new(seed);
        let f = Tensor::randn(&[2, 30, 30], 1.0, &mut rng);
        let Ok(out) = roi_pool(&f, &b, 3, 3, 4) else { return Ok(()) };
        let flat = f.data();
        for (o, a) in out.output.data().iter().zip(&out.argmax) {
            match a {
                Some(k) => prop_assert_eq!(*o, flat[*k]),
                None => prop_assert_eq!(*o, 0.0),
            }
        }
        let (x0, y0) = ((b.x1 / 4.0).floor().max(0.0) as usize, (b.y1 / 4.0).floor().max(0.0) as usize);
        let (x1, y1) = ((b.x2 / 4.0).ceil().min(30.0) as usize, (b.y2 / 4.0).ceil().min(30.0) as usize);
        for ch in 0..2 {
            let mut region = f64::MIN;
            for y in y0..y1 {
                for x in x0..x1 {
                    region = region.max(f.at(&[ch, y, x]));
                }
            }
            let pooled = out.output.data()[ch * 9..(ch + 1) * 9].iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(pooled, region);
        }
    }
}

#[test]
fn anchors_tile_the_grid() {
    let a = generate_anchors(3, 4, 8, &[16.0, 32.0], &[0.5, 1.0, 2.0]);
    assert_eq!(a.len(), 3 * 4 * 6);
    for (n, b) in a.iter().enumerate() {
        let cell = n / 6;
        let (cx, cy) = b.center();
        assert_relative_eq!(cx, ((cell % 4) as f64 + 0.5) * 8.0, epsilon = 1e-12);
        assert_relative_eq!(cy, ((cell / 4) as f64 + 0.5) * 8.0, epsilon = 1e-12);
        let s = [16.0, 32.0][(n % 6) / 3];
        assert_relative_eq!(b.area(), s * s, epsilon = 1e-9);
    }
}
