//! Recall@K under the object, predicate, phrase and relation protocols.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{GroundTruth, GtRelation, Instance, SyntheticImage};
use crate::error::{Error, Result};
use crate::geometry::{iou, union_box, BBox};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::wsod::{DetectConfig, RefineConfig};
use crate::wspp::{enumerate_pairs, RelationPrediction, WsppHead};

pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecallResult {
    pub k: usize,
    pub hits: usize,
    pub total: usize,
    /// Mean over images with at least one ground truth.
    pub recall: f64,
    pub images: usize,
}

/// Greedy recall of the top `k` predictions of every image. Predictions are
/// ranked by descending confidence with ties kept in input order; each one
/// consumes at most one unmatched ground truth.
pub fn recall_at_k<P, G>(
    per_image: &[(Vec<P>, Vec<G>)],
    k: usize,
    confidence: impl Fn(&P) -> f64,
    matcher: impl Fn(&P, &G) -> bool,
) -> RecallResult {
    let (mut hits, mut total, mut images, mut sum) = (0, 0, 0, 0.0);
    for (preds, gts) in per_image {
        if gts.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| confidence(&preds[b]).total_cmp(&confidence(&preds[a])));
        let mut used = vec![false; gts.len()];
        let mut matched = 0;
        for &p in order.iter().take(k) {
            if let Some(g) = (0..gts.len()).find(|&g| !used[g] && matcher(&preds[p], &gts[g])) {
                used[g] = true;
                matched += 1;
            }
        }
        hits += matched;
        total += gts.len();
        images += 1;
        sum += matched as f64 / gts.len() as f64;
    }
    RecallResult {
        k,
        hits,
        total,
        recall: if images == 0 { 0.0 } else { sum / images as f64 },
        images,
    }
}

/// Detection record as written to JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Instance-level ground-truth triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtTriplet {
    pub sub_box: BBox,
    pub obj_box: BBox,
    pub sub_class: usize,
    pub predicate: usize,
    pub obj_class: usize,
}

pub fn gt_triplets(gt: &GroundTruth) -> Vec<GtTriplet> {
    gt.relations
        .iter()
        .map(|r| {
            let (s, o) = (&gt.instances[r.subject], &gt.instances[r.object]);
            GtTriplet {
                sub_box: s.bbox,
                obj_box: o.bbox,
                sub_class: s.class,
                predicate: r.predicate,
                obj_class: o.class,
            }
        })
        .collect()
}

pub fn match_object(pred: &DetectionRecord, gt: &Instance) -> bool {
    pred.class == gt.class && iou(&pred.bbox, &gt.bbox) > MATCH_IOU
}

fn same_labels(pred: &RelationPrediction, gt: &GtTriplet) -> bool {
    pred.sub_class == gt.sub_class && pred.predicate == gt.predicate && pred.obj_class == gt.obj_class
}

pub fn match_phrase(pred: &RelationPrediction, gt: &GtTriplet) -> bool {
    same_labels(pred, gt)
        && iou(&union_box(&pred.sub_box, &pred.obj_box), &union_box(&gt.sub_box, &gt.obj_box)) > MATCH_IOU
}

pub fn match_relation(pred: &RelationPrediction, gt: &GtTriplet) -> bool {
    same_labels(pred, gt) && iou(&pred.sub_box, &gt.sub_box) > MATCH_IOU && iou(&pred.obj_box, &gt.obj_box) > MATCH_IOU
}

/// Predicate guess for an ordered pair of ground-truth instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredicatePrediction {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub score: f64,
}

pub fn match_predicate(pred: &PredicatePrediction, gt: &GtRelation) -> bool {
    pred.subject == gt.subject && pred.object == gt.object && pred.predicate == gt.predicate
}

/// Scores every ordered pair of ground-truth boxes and keeps the
/// `per_pair` best predicates of each pair.
pub fn predicate_predictions(
    head: &WsppHead,
    features: &Tensor,
    instances: &[Instance],
    per_pair: usize,
) -> Result<Vec<PredicatePrediction>> {
    if instances.len() < 2 {
        return Ok(Vec::new());
    }
    let boxes: Vec<BBox> = instances.iter().map(|i| i.bbox).collect();
    let scores = head.score(features, &boxes)?;
    let mut out = Vec::new();
    for (p, &(i, j)) in enumerate_pairs(boxes.len()).iter().enumerate() {
        let row = scores.scores.row(p);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &r in order.iter().take(per_pair) {
            out.push(PredicatePrediction {
                subject: i,
                object: j,
                predicate: r,
                score: row[r],
            });
        }
    }
    Ok(out)
}

pub fn predicate_prediction_eval(
    head: &WsppHead,
    images: &[SyntheticImage],
    k: usize,
    per_pair: usize,
) -> Result<RecallResult> {
    let per_image = images
        .iter()
        .map(|img| {
            Ok((
                predicate_predictions(head, &img.weak.features, &img.gt.instances, per_pair)?,
                img.gt.relations.clone(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(recall_at_k(&per_image, k, |p| p.score, match_predicate))
}

/// Expected predicate-prediction recall of a scorer that picks one predicate
/// per pair uniformly at random and ranks pairs randomly.
pub fn uniform_predicate_baseline(images: &[SyntheticImage], predicates: usize, k: usize) -> f64 {
    let (mut sum, mut count) = (0.0, 0);
    for img in images {
        let gt = &img.gt.relations;
        if gt.is_empty() {
            continue;
        }
        let n = img.gt.instances.len();
        let pairs = n * (n - 1);
        let reach = (k as f64 / pairs as f64).min(1.0);
        // a pair with m annotated predicates is hit with probability m / R
        sum += reach / predicates as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ObjectDetection,
    PredicatePrediction,
    PhraseDetection,
    RelationDetection,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::ObjectDetection,
        Protocol::PredicatePrediction,
        Protocol::PhraseDetection,
        Protocol::RelationDetection,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReportRow {
    pub protocol: Protocol,
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub refine: RefineConfig,
    pub detect: DetectConfig,
    /// Predicates kept per pair under the predicate protocol.
    pub predicates_per_pair: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![50, 100],
            refine: RefineConfig::default(),
            detect: DetectConfig::default(),
            predicates_per_pair: 1,
        }
    }
}

/// Per-image predictions of a model on a split.
#[derive(Debug, Clone, Default)]
pub struct Predictions {
    pub detections: Vec<Vec<DetectionRecord>>,
    pub relations: Vec<Vec<RelationPrediction>>,
}

pub fn predict(model: &Model, images: &[SyntheticImage], config: &EvalConfig) -> Result<Predictions> {
    let limit = config.ks.iter().copied().max().unwrap_or(0);
    let mut out = Predictions::default();
    for img in images {
        let inf = model.infer(&img.weak, &config.refine, &config.detect, limit)?;
        let mut dets: Vec<DetectionRecord> = inf
            .detections
            .detections
            .iter()
            .map(|d| DetectionRecord {
                image_id: img.weak.id.clone(),
                bbox: d.bbox,
                class: d.class,
                score: d.score,
            })
            .collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.detections.push(dets);
        out.relations.push(inf.relations);
    }
    Ok(out)
}

/// All four protocols at every K of the config.
pub fn evaluate(
    model: &Model,
    images: &[SyntheticImage],
    config: &EvalConfig,
) -> Result<(Vec<ReportRow>, Predictions)> {
    let preds = predict(model, images, config)?;
    let objects: Vec<_> = preds
        .detections
        .iter()
        .zip(images)
        .map(|(d, img)| (d.clone(), img.gt.instances.clone()))
        .collect();
    let relations: Vec<_> = preds
        .relations
        .iter()
        .zip(images)
        .map(|(r, img)| (r.clone(), gt_triplets(&img.gt)))
        .collect();
    let mut rows = Vec::new();
    for &k in &config.ks {
        for protocol in Protocol::ALL {
            let recall = match protocol {
                Protocol::ObjectDetection => recall_at_k(&objects, k, |p| p.score, match_object),
                Protocol::PredicatePrediction => {
                    predicate_prediction_eval(&model.wspp, images, k, config.predicates_per_pair)?
                }
                Protocol::PhraseDetection => recall_at_k(&relations, k, |p| p.score, match_phrase),
                Protocol::RelationDetection => recall_at_k(&relations, k, |p| p.score, match_relation),
            }
            .recall;
            rows.push(ReportRow { protocol, k, recall });
        }
    }
    Ok((rows, preds))
}

pub fn recall_of(rows: &[ReportRow], protocol: Protocol, k: usize) -> Option<f64> {
    rows.iter()
        .find(|r| r.protocol == protocol && r.k == k)
        .map(|r| r.recall)
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}
