use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fmt_search_core::losses::OimState;
use fmt_search_core::model::{Checkpoint, ModelConfig, ModelParams};
use fmt_search_core::training::LOG_COLUMNS;
use fmt_search_core::Rng;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmt-search"))
        .arg("--config")
        .arg(smoke_config())
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    root: PathBuf,
    data: PathBuf,
    train: PathBuf,
}

// One generated dataset and one trained model shared by every test.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&root);
        let data = root.join("data");
        let train = root.join("train");
        ok(&["gen-data", "--out-dir", s(&data)]);
        ok(&["train", "--data-dir", s(&data), "--out-dir", s(&train)]);
        Fixture { root, data, train }
    })
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_identical() {
    let f = fixture();
    let again = f.root.join("data_again");
    ok(&["gen-data", "--out-dir", s(&again)]);
    let (a, b) = (tree(&f.data), tree(&again));
    assert_eq!(a.len(), 2 + 12 + 8);
    assert_eq!(a, b);
}

#[test]
fn invalid_inputs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(code(&["gen-data", "--out-dir", out, "--data.n_identities=1"]), 2);
    assert_eq!(code(&["gen-data", "--out-dir", out, "--data.nope", "3"]), 2);
    assert_eq!(code(&["gen-data", "--out-dir", out, "--train.s1_end=500"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["train", "--data-dir", s(&dir.path().join("missing"))]), 2);
}

#[test]
fn train_log_has_stages_and_columns() {
    let f = fixture();
    assert!(f.train.join("checkpoint.json").is_file());
    let csv = std::fs::read_to_string(f.train.join("train_log.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, LOG_COLUMNS);
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert!(!rows.is_empty() && rows.len() <= 200);
    for r in &rows {
        let (iter, stage) = (r[col("iter")] as usize, r[col("stage")] as u8);
        let want = if iter < 60 { 0 } else if iter < 120 { 1 } else { 2 };
        assert_eq!(stage, want, "iter {iter}");
        if stage < 2 {
            assert_eq!(r[col("l_softmax")], 0.0);
        }
        if stage == 0 {
            assert_eq!(r[col("l_oim")], 0.0);
        }
        let sum = r[col("l_det")] + r[col("l_reid")] + r[col("l_rpn")];
        assert!((r[col("l_total")] - sum).abs() <= 1e-12);
    }
}

#[test]
fn eval_writes_a_row_per_gallery_size() {
    let f = fixture();
    let out = f.root.join("eval");
    let ck = f.train.join("checkpoint.json");
    let stdout = ok(&["eval", "--checkpoint", s(&ck), "--data-dir", s(&f.data), "--out-dir", s(&out)]);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(stdout, csv);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for (r, g) in rows.iter().zip(["2", "5"]) {
        let v: Vec<&str> = r.split(',').collect();
        assert_eq!(v[0], g);
        for x in &v[1..] {
            assert!((0.0..=1.0).contains(&x.parse::<f64>().unwrap()));
        }
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["settings"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_of_an_untrained_model_runs() {
    let f = fixture();
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(smoke_config()).unwrap()).unwrap();
    let mcfg: ModelConfig = serde_json::from_value(cfg["model"].clone()).unwrap();
    let mut rng = Rng::new(1);
    let params = ModelParams::init(&mcfg, 4, &mut rng).unwrap();
    let oim = OimState::new(4, mcfg.embedding_dim, 8, 0.1, 0.5, &mut rng).unwrap();
    let ck = f.root.join("untrained.json");
    Checkpoint::new(&mcfg, &params, &oim).save(&ck).unwrap();
    let out = f.root.join("eval_untrained");
    ok(&["eval", "--checkpoint", s(&ck), "--data-dir", s(&f.data), "--out-dir", s(&out)]);
    assert!(out.join("report.csv").is_file());
}

#[test]
fn eval_with_missing_checkpoint_is_a_config_error() {
    let f = fixture();
    let ck = f.root.join("nope.json");
    assert_eq!(code(&["eval", "--checkpoint", s(&ck), "--data-dir", s(&f.data)]), 2);
    let bad = f.root.join("bad.json");
    std::fs::write(&bad, "not json").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", s(&bad), "--data-dir", s(&f.data)]), 2);
}

#[test]
fn search_ranks_gallery_detections() {
    let f = fixture();
    let ck = f.train.join("checkpoint.json");
    let img = |i: usize| f.data.join(format!("test/images/test_{i:04}.png"));
    let (q, g1, g2) = (img(0), img(1), img(2));
    let stdout = ok(&[
        "search", "--checkpoint", s(&ck), "--query-image", s(&q), "--query-box", "4,4,16,16",
        "--gallery", s(&g1), s(&g2), "--top-n", "3",
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    if lines[0] != "no detections in the gallery" {
        assert!(lines[0].starts_with("rank"));
        assert!(lines.len() <= 4);
        let d: Vec<f64> = lines[1..].iter().map(|l| l.rsplit('\t').next().unwrap().parse().unwrap()).collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
    }
    let args = |b: &'static str| {
        code(&["search", "--checkpoint", s(&ck), "--query-image", s(&q), "--query-box", b, "--gallery", s(&g1)])
    };
    assert_eq!(args("1,2,3"), 2);
    assert_eq!(args("10,10,5,5"), 2);
    assert_eq!(args("20,20,60,60"), 2);
}

#[test]
fn sweep_reports_means() {
    let f = fixture();
    let ck = f.train.join("checkpoint.json");
    let out = f.root.join("sweep");
    let stdout = ok(&["sweep", "--checkpoint", s(&ck), "--data-dir", s(&f.data), "--out-dir", s(&out)]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("mean,")).count(), 2);
    assert_eq!(stdout.lines().count(), 1 + 2 * 2 + 2);
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    assert_eq!(code(&["gradcheck", "--instances", "2"]), 0);
    assert_eq!(code(&["gradcheck", "--instances", "2", "--corrupt", "linear"]), 1);
    assert_eq!(code(&["gradcheck", "--corrupt", "bogus"]), 2);
}

#[test]
fn ablation_toggles_show_in_logs() {
    let f = fixture();
    let out = f.root.join("ablate");
    let stdout = ok(&["ablate", "--data-dir", s(&f.data), "--out-dir", s(&out)]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(stdout.starts_with(&csv));
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["baseline", "plabel_rpn", "fmt_full"]);
    let column_sum = |variant: &str, name: &str| {
        let log = std::fs::read_to_string(out.join(variant).join("train_log.csv")).unwrap();
        let mut lines = log.lines();
        let i = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
        lines.map(|l| l.split(',').nth(i).unwrap().parse::<f64>().unwrap()).sum::<f64>()
    };
    assert_eq!(column_sum("baseline", "l_oim_rpn"), 0.0);
    assert_eq!(column_sum("baseline", "l_softmax"), 0.0);
    assert_eq!(column_sum("plabel_rpn", "l_softmax"), 0.0);
    assert!(column_sum("plabel_rpn", "l_oim_rpn") > 0.0);
    assert!(column_sum("fmt_full", "l_softmax") > 0.0);
}
