use std::path::{Path, PathBuf};

use fmt_search_core::data::{self, Dataset, SceneAnnotation};
use fmt_search_core::evalsearch::{self, EvalReport, GalleryCache, QuerySpec, RankedEntry, ReportFormat};
use fmt_search_core::gradsuite::{self, SuiteOptions, SuiteResult};
use fmt_search_core::model::{self, Checkpoint};
use fmt_search_core::training::{self, Snapshot, TrainLog};
use fmt_search_core::{BBox, Error};

use crate::{CliError, RunConfig};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(crate::exit::IO, format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_split(data_dir: &Path, split: &str) -> Result<Dataset, CliError> {
    let path = data::split_manifest(data_dir, split);
    if !path.is_file() {
        return Err(CliError::config(format!("no {split} manifest at {}", path.display())));
    }
    Ok(data::load_dataset(&path)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::config(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::config(e.to_string()))
}

fn annotations(ds: &Dataset) -> Vec<SceneAnnotation> {
    ds.scenes.iter().map(|s| s.annotation.clone()).collect()
}

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub train_scenes: usize,
    pub test_scenes: usize,
}

pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<GenSummary, CliError> {
    let (train, test) = data::generate_synthetic(&cfg.data, out_dir)?;
    Ok(GenSummary {
        train_scenes: train.scenes.len(),
        test_scenes: test.scenes.len(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub log: TrainLog,
    pub checkpoint: PathBuf,
}

/// Trains on `<data_dir>/train`; writes `checkpoint.json` and `train_log.csv`.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainSummary, CliError> {
    let ds = load_split(data_dir, "train")?;
    ensure_dir(out_dir)?;
    let every = cfg.output.checkpoint_every;
    let total = cfg.train.total_iters;
    let mut hook = |p: &training::Progress| -> fmt_search_core::Result<Option<Snapshot>> {
        if every > 0 && p.done % every == 0 && p.done < total {
            Checkpoint::new(&cfg.model, p.params, p.oim).save(&out_dir.join(format!("checkpoint_{}.json", p.done)))?;
        }
        Ok(None)
    };
    let outcome = training::train_with_hook(&ds.scenes, &cfg.model, &cfg.train, &mut hook)?;
    let checkpoint = out_dir.join("checkpoint.json");
    Checkpoint::new(&cfg.model, &outcome.params, &outcome.oim).save(&checkpoint)?;
    write(&out_dir.join("train_log.csv"), &outcome.log.to_csv())?;
    for s in &outcome.log.skipped {
        log::warn!("iteration {} skipped on image {}: {}", s.iter, s.image, s.reason);
    }
    Ok(TrainSummary {
        log: outcome.log,
        checkpoint,
    })
}

/// Evaluates a checkpoint; writes `report.csv` and `report.json`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    gallery_sizes: &[usize],
    out_dir: &Path,
) -> Result<EvalReport, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let params = ck.params()?;
    let test = load_split(data_dir, "test")?;
    let protocol = data::make_protocol(&annotations(&test), gallery_sizes, cfg.protocol.seed)?;
    let report = evalsearch::evaluate(&params, &ck.model_config, &test, &protocol)?;
    ensure_dir(out_dir)?;
    evalsearch::emit_report(&report, &out_dir.join("report.csv"), ReportFormat::Csv)?;
    evalsearch::emit_report(&report, &out_dir.join("report.json"), ReportFormat::Json)?;
    Ok(report)
}

pub fn parse_box(s: &str) -> Result<BBox, CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::config(format!("box `{s}` must be four comma-separated numbers")))?;
    let [x1, y1, x2, y2] = v[..] else {
        return Err(CliError::config(format!("box `{s}` must have four coordinates")));
    };
    let b = BBox::new(x1, y1, x2, y2);
    if !b.is_valid() {
        return Err(CliError::config(format!("box `{s}` is degenerate")));
    }
    Ok(b)
}

fn load_image(path: &Path, cfg: &model::ModelConfig) -> Result<fmt_search_core::Tensor, CliError> {
    let (rgb, h, w) = data::read_png(path)?;
    if (h, w) != (cfg.image_height, cfg.image_width) {
        return Err(CliError::config(format!(
            "{} is {h}x{w}, the model expects {}x{}",
            path.display(),
            cfg.image_height,
            cfg.image_width
        )));
    }
    Ok(data::rgb_to_tensor(&rgb, h, w)?)
}

fn image_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn cmd_search(
    checkpoint: &Path,
    query_image: &Path,
    query_box: &str,
    gallery: &[PathBuf],
    top_n: usize,
) -> Result<Vec<RankedEntry>, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let params = ck.params()?;
    let cfg = &ck.model_config;
    let query = QuerySpec {
        image_id: image_id(query_image),
        bbox: parse_box(query_box)?,
        pid: 0,
    };
    let qimg = load_image(query_image, cfg)?;
    let q = evalsearch::embed_query(&params, cfg, &query, &qimg).map_err(|e| match e {
        Error::OutOfBounds(m) => CliError::config(m),
        e => e.into(),
    })?;
    let mut dets = Vec::with_capacity(gallery.len());
    for g in gallery {
        dets.push((image_id(g), model::search_forward(&params, cfg, &load_image(g, cfg)?)?));
    }
    let mut ranked = evalsearch::rank_gallery(&q, &dets)?;
    ranked.entries.truncate(top_n);
    Ok(ranked.entries)
}

pub fn format_search_hits(hits: &[RankedEntry]) -> String {
    if hits.is_empty() {
        return "no detections in the gallery\n".to_string();
    }
    let mut s = String::from("rank\timage_id\tbox\tdistance\n");
    for (i, h) in hits.iter().enumerate() {
        let b = h.detection.bbox;
        s.push_str(&format!(
            "{}\t{}\t{:.1},{:.1},{:.1},{:.1}\t{:.6}\n",
            i + 1,
            h.image_id,
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            h.distance
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub runs: Vec<(u64, EvalReport)>,
}

impl Sweep {
    /// Mean of `f` over protocol seeds at one gallery size.
    pub fn mean(&self, gallery_size: usize, f: impl Fn(&evalsearch::GalleryMetrics) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter_map(|(_, r)| r.at(gallery_size).map(&f)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("protocol_seed,gallery_size,mAP,top1,top5,top10,det_recall\n");
        for (seed, r) in &self.runs {
            for m in &r.settings {
                s.push_str(&format!(
                    "{seed},{},{},{},{},{},{}\n",
                    m.gallery_size, m.map, m.top1, m.top5, m.top10, r.det_recall
                ));
            }
        }
        if let Some((_, first)) = self.runs.first() {
            for m in &first.settings {
                let g = m.gallery_size;
                let mean = |f: fn(&evalsearch::GalleryMetrics) -> f64| self.mean(g, f).unwrap_or(0.0);
                s.push_str(&format!(
                    "mean,{g},{},{},{},{},{}\n",
                    mean(|m| m.map),
                    mean(|m| m.top1),
                    mean(|m| m.top5),
                    mean(|m| m.top10),
                    first.det_recall
                ));
            }
        }
        s
    }
}

/// Evaluates one checkpoint under several protocol seeds, reusing the
/// gallery detections; writes `sweep.csv`.
pub fn cmd_sweep(
    checkpoint: &Path,
    data_dir: &Path,
    seeds: &[u64],
    gallery_sizes: &[usize],
    out_dir: &Path,
) -> Result<Sweep, CliError> {
    if seeds.is_empty() {
        return Err(CliError::config("sweep needs at least one protocol seed"));
    }
    let ck = load_checkpoint(checkpoint)?;
    let params = ck.params()?;
    let test = load_split(data_dir, "test")?;
    let cache = GalleryCache::build(&params, &ck.model_config, &test)?;
    let anns = annotations(&test);
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let protocol = data::make_protocol(&anns, gallery_sizes, seed)?;
        runs.push((
            seed,
            evalsearch::evaluate_cached(&params, &ck.model_config, &test, &protocol, &cache)?,
        ));
    }
    let sweep = Sweep { runs };
    ensure_dir(out_dir)?;
    write(&out_dir.join("sweep.csv"), &sweep.to_csv())?;
    Ok(sweep)
}

pub fn cmd_gradcheck(instances: usize, seed: u64, corrupt: Option<String>) -> Result<SuiteResult, CliError> {
    if instances == 0 {
        return Err(CliError::config("instances must be at least 1"));
    }
    if let Some(op) = &corrupt {
        if !gradsuite::OPS.contains(&op.as_str()) {
            return Err(CliError::config(format!("unknown op `{op}`")));
        }
    }
    Ok(gradsuite::run_suite(&SuiteOptions {
        instances,
        seed,
        corrupt,
        ..SuiteOptions::default()
    })?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub rpn_person_labels: bool,
    pub multiple_loss: bool,
}

pub const VARIANTS: [AblationVariant; 3] = [
    AblationVariant {
        name: "baseline",
        rpn_person_labels: false,
        multiple_loss: false,
    },
    AblationVariant {
        name: "plabel_rpn",
        rpn_person_labels: true,
        multiple_loss: false,
    },
    AblationVariant {
        name: "fmt_full",
        rpn_person_labels: true,
        multiple_loss: true,
    },
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub log: TrainLog,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub gallery_size: usize,
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mAP,top1,top5\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.variant.name, r.map, r.top1, r.top5));
        }
        s
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    pub fn summary(&self) -> String {
        match (self.row("fmt_full"), self.row("baseline")) {
            (Some(f), Some(b)) => format!(
                "fmt_full - baseline at gallery size {}: mAP {:+.4}, top1 {:+.4}, top5 {:+.4}",
                self.gallery_size,
                f.map - b.map,
                f.top1 - b.top1,
                f.top5 - b.top5
            ),
            _ => "incomplete ablation".to_string(),
        }
    }
}

/// Trains and evaluates every variant with the same seed; writes per-variant
/// runs under `out_dir/<variant>/`, `ablation.csv` and `ablation_summary.txt`.
pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<Ablation, CliError> {
    let g = cfg.protocol.ablation_gallery_size;
    let mut sizes = cfg.protocol.gallery_sizes.clone();
    if !sizes.contains(&g) {
        sizes.push(g);
    }
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for v in VARIANTS {
        let mut run = cfg.clone();
        run.train.rpn_person_labels = v.rpn_person_labels;
        run.train.multiple_loss = v.multiple_loss;
        let dir = out_dir.join(v.name);
        let trained = cmd_train(&run, data_dir, &dir)?;
        let report = cmd_eval(&run, &trained.checkpoint, data_dir, &sizes, &dir)?;
        let m = report.at(g).expect("ablation gallery size is evaluated").clone();
        rows.push(AblationRow {
            variant: v,
            map: m.map,
            top1: m.top1,
            top5: m.top5,
            log: trained.log,
            report,
        });
    }
    let ab = Ablation { gallery_size: g, rows };
    write(&out_dir.join("ablation.csv"), &ab.to_csv())?;
    write(&out_dir.join("ablation_summary.txt"), &(ab.summary() + "\n"))?;
    Ok(ab)
}
