//! Query embedding, gallery ranking, matching and retrieval metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Protocol};
pub use crate::data::QuerySpec;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};
use crate::losses::UNIT_NORM_TOL;
use crate::model::{self, ModelConfig, ModelParams};
use crate::numerics::{self, Tensor};

pub const MATCH_IOU: f64 = 0.5;
pub const CMC_KS: [usize; 3] = [1, 5, 10];

/// Embeds the query person through the same pooling and re-id pathway as
/// gallery detections.
pub fn embed_query(params: &ModelParams, cfg: &ModelConfig, query: &QuerySpec, image: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = (image.dims()[1] as f64, image.dims()[2] as f64);
    if !query.bbox.is_valid() || !query.bbox.within(w, h) {
        return Err(Error::OutOfBounds(format!(
            "query box {:?} is not inside the {w}x{h} image `{}`",
            <[f64; 4]>::from(query.bbox),
            query.image_id
        )));
    }
    let features = model::backbone_forward(params, cfg, image)?;
    model::embed_box(params, cfg, &features, &query.bbox)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: String,
    /// Index of the detection within its image's detection list.
    pub det_index: usize,
    pub detection: Detection,
    pub distance: f64,
    pub is_match: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.is_match).collect()
    }
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = numerics::norm(v);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::NotUnitNorm { norm: n });
    }
    Ok(())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Ranks every embedded gallery detection by ascending Euclidean distance,
/// ties by `(image_id, det_index)`. Detections without an embedding are left
/// out. `is_match` is left false; see [`mark_matches`].
pub fn rank_gallery(query_emb: &[f64], gallery: &[(String, Vec<Detection>)]) -> Result<RankedList> {
    check_unit(query_emb)?;
    let mut entries = Vec::new();
    for (image_id, dets) in gallery {
        for (i, d) in dets.iter().enumerate() {
            let Some(e) = &d.embedding else { continue };
            if e.len() != query_emb.len() {
                return Err(Error::Shape(format!("embedding dim {} vs query dim {}", e.len(), query_emb.len())));
            }
            check_unit(e)?;
            entries.push(RankedEntry {
                image_id: image_id.clone(),
                det_index: i,
                detection: d.clone(),
                distance: euclidean(query_emb, e),
                is_match: false,
            });
        }
    }
    entries.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then(a.det_index.cmp(&b.det_index))
    });
    Ok(RankedList { entries })
}

/// Claims the best-overlapping unclaimed gt box with IoU ≥ 0.5, if any.
pub fn match_detection(det: &BBox, gt_boxes: &[BBox], claimed: &mut [bool]) -> bool {
    let mut best: Option<(usize, f64)> = None;
    for (g, b) in gt_boxes.iter().enumerate() {
        let o = iou(det, b);
        if !claimed[g] && o >= MATCH_IOU && best.map_or(true, |(_, v)| o > v) {
            best = Some((g, o));
        }
    }
    if let Some((g, _)) = best {
        claimed[g] = true;
        true
    } else {
        false
    }
}

/// Resolves matches in rank order, so a gt box goes to its highest-ranked
/// claimant. `gt` maps image ids to the query identity's boxes there.
pub fn mark_matches(ranked: &mut RankedList, gt: &BTreeMap<String, Vec<BBox>>) {
    let mut claimed: BTreeMap<&str, Vec<bool>> = gt.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
    for e in &mut ranked.entries {
        e.is_match = match (gt.get(&e.image_id), claimed.get_mut(e.image_id.as_str())) {
            (Some(boxes), Some(c)) => match_detection(&e.detection.bbox, boxes, c),
            _ => false,
        };
    }
}

/// Mean over matched ranks of the precision at that rank, divided by the
/// number of positives; `None` when there are none.
pub fn average_precision(flags: &[bool], n_positives: usize) -> Option<f64> {
    if n_positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &m) in flags.iter().enumerate() {
        if m {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / n_positives as f64)
}

pub fn cmc_hit(flags: &[bool], k: usize) -> bool {
    assert!(k >= 1, "k must be at least 1");
    flags.iter().take(k).any(|&m| m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryMetrics {
    pub gallery_size: usize,
    pub effective_size: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    /// In protocol query order; queries without positives are omitted.
    pub per_query_ap: Vec<f64>,
    pub query_pids: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: Vec<GalleryMetrics>,
    pub det_recall: f64,
}

impl EvalReport {
    pub fn at(&self, gallery_size: usize) -> Option<&GalleryMetrics> {
        self.settings.iter().find(|s| s.gallery_size == gallery_size)
    }
}

/// Detections for every scene of a dataset, computed once.
#[derive(Debug, Clone)]
pub struct GalleryCache {
    pub detections: BTreeMap<String, Vec<Detection>>,
}

impl GalleryCache {
    pub fn build(params: &ModelParams, cfg: &ModelConfig, dataset: &Dataset) -> Result<Self> {
        let mut detections = BTreeMap::new();
        for s in &dataset.scenes {
            detections.insert(s.annotation.image_id.clone(), model::search_forward(params, cfg, &s.image)?);
        }
        Ok(GalleryCache { detections })
    }
}

/// Fraction of all gt boxes covered by some detection at IoU ≥ 0.5.
pub fn detection_recall(dataset: &Dataset, cache: &GalleryCache) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in &dataset.scenes {
        let dets = &cache.detections[&s.annotation.image_id];
        for g in &s.annotation.boxes {
            total += 1;
            if dets.iter().any(|d| iou(&d.bbox, g) >= MATCH_IOU) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, dataset: &Dataset, protocol: &Protocol) -> Result<EvalReport> {
    let cache = GalleryCache::build(params, cfg, dataset)?;
    evaluate_cached(params, cfg, dataset, protocol, &cache)
}

pub fn evaluate_cached(
    params: &ModelParams,
    cfg: &ModelConfig,
    dataset: &Dataset,
    protocol: &Protocol,
    cache: &GalleryCache,
) -> Result<EvalReport> {
    let scene = |id: &str| {
        dataset
            .find(id)
            .ok_or_else(|| Error::Validation(format!("protocol references unknown scene `{id}`")))
    };
    let mut query_emb: BTreeMap<(String, i64), Vec<f64>> = BTreeMap::new();
    let mut settings = Vec::with_capacity(protocol.settings.len());
    for setting in &protocol.settings {
        let mut aps = Vec::new();
        let mut pids = Vec::new();
        let mut hits = [0usize; 3];
        for pq in &setting.queries {
            let q = &pq.query;
            let key = (q.image_id.clone(), q.pid);
            if !query_emb.contains_key(&key) {
                let e = embed_query(params, cfg, q, &scene(&q.image_id)?.image)?;
                query_emb.insert(key.clone(), e);
            }
            let mut gallery = Vec::with_capacity(pq.gallery.len());
            let mut gt = BTreeMap::new();
            for id in &pq.gallery {
                let s = scene(id)?;
                let boxes: Vec<BBox> = s
                    .annotation
                    .boxes
                    .iter()
                    .zip(&s.annotation.pids)
                    .filter(|(_, &p)| p == q.pid)
                    .map(|(b, _)| *b)
                    .collect();
                if !boxes.is_empty() {
                    gt.insert(id.clone(), boxes);
                }
                gallery.push((id.clone(), cache.detections[id].clone()));
            }
            let n_pos: usize = gt.values().map(Vec::len).sum();
            let mut ranked = rank_gallery(&query_emb[&key], &gallery)?;
            mark_matches(&mut ranked, &gt);
            let flags = ranked.flags();
            let Some(ap) = average_precision(&flags, n_pos) else {
                log::warn!("query pid {} in `{}` has no positives in its gallery", q.pid, q.image_id);
                continue;
            };
            aps.push(ap);
            pids.push(q.pid);
            for (h, &k) in hits.iter_mut().zip(&CMC_KS) {
                *h += usize::from(cmc_hit(&flags, k));
            }
        }
        let n = aps.len().max(1) as f64;
        settings.push(GalleryMetrics {
            gallery_size: setting.gallery_size,
            effective_size: setting.effective_size,
            map: aps.iter().sum::<f64>() / n,
            top1: hits[0] as f64 / n,
            top5: hits[1] as f64 / n,
            top10: hits[2] as f64 / n,
            per_query_ap: aps,
            query_pids: pids,
        });
    }
    Ok(EvalReport {
        settings,
        det_recall: detection_recall(dataset, cache),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const REPORT_COLUMNS: [&str; 6] = ["gallery_size", "mAP", "top1", "top5", "top10", "det_recall"];

pub fn report_csv(report: &EvalReport) -> String {
    let mut s = REPORT_COLUMNS.join(",") + "\n";
    for m in &report.settings {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.gallery_size, m.map, m.top1, m.top5, m.top10, report.det_recall
        ));
    }
    s
}

pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serialization cannot fail") + "\n",
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
