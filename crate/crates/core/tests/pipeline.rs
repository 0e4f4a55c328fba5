use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use fmt_search_core::data::{self, SynthConfig};
use fmt_search_core::evalsearch;
use fmt_search_core::geometry::iou;
use fmt_search_core::model::{Checkpoint, ModelConfig};
use fmt_search_core::training::{self, lr_schedule, TrainConfig};
use fmt_search_core::ErrorKind;

fn tiny_data() -> SynthConfig {
    SynthConfig {
        n_identities: 5,
        scenes_train: 6,
        scenes_test: 8,
        image_height: 32,
        image_width: 32,
        persons_min: 1,
        persons_max: 2,
        patch_min: 8,
        patch_max: 12,
        ..SynthConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        lr0: 0.01,
        total_iters: 24,
        s1_end: 8,
        s2_end: 16,
        head_batch: 8,
        rpn_batch: 16,
        ..TrainConfig::default()
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_and_valid() {
    let cfg = SynthConfig {
        scenes_train: 5,
        scenes_test: 12,
        ..SynthConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    data::generate_synthetic(&cfg, a.path()).unwrap();
    data::generate_synthetic(&cfg, b.path()).unwrap();
    let fa = files(a.path());
    assert_eq!(fa.len(), 2 + 5 + 12);
    assert_eq!(fa, files(b.path()));

    let labeled = cfg.labeled_count() as i64;
    for split in ["train", "test"] {
        let ds = data::load_dataset(&data::split_manifest(a.path(), split)).unwrap();
        for s in &ds.scenes {
            let ann = &s.annotation;
            assert!((cfg.persons_min..=cfg.persons_max).contains(&ann.boxes.len()));
            let mut seen = BTreeSet::new();
            for (i, (b, &p)) in ann.boxes.iter().zip(&ann.pids).enumerate() {
                assert!(b.within(96.0, 96.0));
                assert!(p == -1 || (0..labeled).contains(&p), "pid {p}");
                if p >= 0 {
                    assert!(seen.insert(p));
                }
                for c in &ann.boxes[i + 1..] {
                    assert!(iou(b, c) <= data::MAX_OVERLAP_IOU);
                }
            }
            assert!(s.image.data().iter().all(|v| (-0.5..=0.5).contains(v)));
        }
        if split == "test" {
            for pid in 0..labeled {
                let n = ds.scenes.iter().filter(|s| s.annotation.pids.contains(&pid)).count();
                assert!(n >= 2, "pid {pid} appears in {n} test scenes");
            }
        }
    }
}

#[test]
fn bad_synth_config_is_a_config_error() {
    let cfg = SynthConfig {
        n_identities: 1,
        ..SynthConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let err = data::generate_synthetic(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
}

#[test]
fn protocol_galleries_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = data::generate_synthetic(
        &SynthConfig {
            scenes_train: 1,
            ..SynthConfig::default()
        },
        dir.path(),
    )
    .unwrap();
    let sizes = [2, 5, 10, 20, 40];
    let p = data::make_protocol(&test.scenes, &sizes, 3).unwrap();
    assert_eq!(p, data::make_protocol(&test.scenes, &sizes, 3).unwrap());
    assert!(p.excluded.is_empty());
    let pid_of = |id: &str| test.scenes.iter().find(|s| s.image_id == id).unwrap().pids.clone();
    for (setting, &g) in p.settings.iter().zip(&sizes) {
        assert_eq!(setting.effective_size, g.min(39));
        for q in &setting.queries {
            assert_eq!(q.gallery.len(), setting.effective_size);
            assert!(!q.gallery.contains(&q.query.image_id));
            assert!(q.gallery.iter().any(|id| pid_of(id).contains(&q.query.pid)));
        }
    }
    for w in p.settings.windows(2) {
        for (small, large) in w[0].queries.iter().zip(&w[1].queries) {
            assert_eq!(small.query, large.query);
            assert!(small.gallery.iter().all(|id| large.gallery.contains(id)));
        }
    }
}

#[test]
fn lr_never_increases() {
    let cfg = TrainConfig::default();
    let mut prev = f64::INFINITY;
    for t in 0..cfg.total_iters {
        let lr = lr_schedule(&cfg, t);
        assert!(lr <= prev && lr > 0.0);
        prev = lr;
    }
    assert_eq!(lr_schedule(&cfg, 0), cfg.lr0);
}

#[test]
fn tiny_training_is_deterministic_and_staged() {
    let dir = tempfile::tempdir().unwrap();
    data::generate_synthetic(&tiny_data(), dir.path()).unwrap();
    let train = data::load_dataset(&data::split_manifest(dir.path(), "train")).unwrap();
    let mcfg = ModelConfig::tiny();
    let tcfg = tiny_train();
    let a = training::train(&train.scenes, &mcfg, &tcfg).unwrap();
    let b = training::train(&train.scenes, &mcfg, &tcfg).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    let (ca, cb) = (
        Checkpoint::new(&mcfg, &a.params, &a.oim).to_json(),
        Checkpoint::new(&mcfg, &b.params, &b.oim).to_json(),
    );
    assert_eq!(ca, cb);

    assert_eq!(a.log.entries.len() + a.log.skipped.len(), tcfg.total_iters);
    for e in &a.log.entries {
        assert_eq!(e.stage, tcfg.stage(e.iter));
        assert!(e.losses.composition_error() <= 1e-12);
        if e.iter < tcfg.s1_end {
            assert_eq!(e.losses.l_oim + e.losses.l_oim_rpn, 0.0);
        }
        if e.iter < tcfg.s2_end {
            assert_eq!(e.losses.l_softmax, 0.0);
        }
    }

    let other = training::train(&train.scenes, &mcfg, &TrainConfig { seed: 1, ..tcfg }).unwrap();
    assert_ne!(other.log.to_csv(), a.log.to_csv());

    let test = data::load_dataset(&data::split_manifest(dir.path(), "test")).unwrap();
    let ann: Vec<_> = test.scenes.iter().map(|s| s.annotation.clone()).collect();
    let proto = data::make_protocol(&ann, &[2, 8], 0).unwrap();
    let report = evalsearch::evaluate(&a.params, &mcfg, &test, &proto).unwrap();
    assert_eq!(report.settings.len(), 2);
    for s in &report.settings {
        assert!((0.0..=1.0).contains(&s.map) && (0.0..=1.0).contains(&s.top1));
        assert!(s.top1 <= s.top5 && s.top5 <= s.top10);
    }
}

#[test]
fn checkpoint_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    data::generate_synthetic(&tiny_data(), dir.path()).unwrap();
    let train = data::load_dataset(&data::split_manifest(dir.path(), "train")).unwrap();
    let mcfg = ModelConfig::tiny();
    let out = training::train(&train.scenes, &mcfg, &tiny_train()).unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::new(&mcfg, &out.params, &out.oim).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.params().unwrap(), out.params);
    assert_eq!(back.oim_state, out.oim);

    std::fs::write(&path, b"{\"format_version\": 1}").unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().kind(), ErrorKind::Config);
}
