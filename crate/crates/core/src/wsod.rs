//! Weakly supervised object detection head.
//!
//! Two position-sensitive map stacks (localization and classification) are
//! produced from the feature map by 1×1 convolutions and pooled per region.
//! The localization scores are normalized over regions, the classification
//! scores over classes, and their product is the detection score `S[i, c]`.
//! Class 0 is background.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms, BBox};
use crate::numerics::{conv1x1, conv1x1_backward_params, Axis, Matrix, ParamTensor, Tensor};
use crate::pooling::{single_roi_pool_backward, GradAccumulator, IntegralMap};

/// Lower clamp applied before every logarithm.
pub const LOG_EPS: f64 = 1e-7;

pub(crate) fn clamp_prob(p: f64) -> (f64, bool) {
    if p < LOG_EPS {
        (LOG_EPS, false)
    } else if p > 1.0 - LOG_EPS {
        (1.0 - LOG_EPS, false)
    } else {
        (p, true)
    }
}

pub(crate) fn random_param(rng: &mut impl Rng, rows: usize, cols: usize, std: f32) -> ParamTensor {
    let normal = Normal::new(0.0f32, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    ParamTensor::new(Tensor::from_vec(&[rows, cols], data).expect("finite init"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsodHead {
    pub k: usize,
    pub classes: usize,
    pub loc_weight: ParamTensor,
    pub loc_bias: ParamTensor,
    pub cls_weight: ParamTensor,
    pub cls_bias: ParamTensor,
}

/// Position-sensitive map stacks, `H×W×(k²·(C+1))` each.
#[derive(Debug, Clone)]
pub struct WsodMaps {
    pub loc: Tensor,
    pub cls: Tensor,
    pub k: usize,
    pub labels: usize,
}

impl WsodHead {
    pub fn new(dim: usize, classes: usize, k: usize, init_std: f32, rng: &mut impl Rng) -> Self {
        let channels = k * k * (classes + 1);
        Self {
            k,
            classes,
            loc_weight: random_param(rng, dim, channels, init_std),
            loc_bias: ParamTensor::zeros(&[channels]),
            cls_weight: random_param(rng, dim, channels, init_std),
            cls_bias: ParamTensor::zeros(&[channels]),
        }
    }

    /// Labels including background, `C + 1`.
    pub fn labels(&self) -> usize {
        self.classes + 1
    }

    pub fn maps(&self, features: &Tensor) -> Result<WsodMaps> {
        Ok(WsodMaps {
            loc: conv1x1(features, &self.loc_weight, &self.loc_bias)?,
            cls: conv1x1(features, &self.cls_weight, &self.cls_bias)?,
            k: self.k,
            labels: self.labels(),
        })
    }

    /// Detection scores of `boxes` on `features`.
    pub fn score(&self, features: &Tensor, boxes: &[BBox]) -> Result<DetectionScores> {
        let raw = region_class_scores(&self.maps(features)?, boxes)?;
        Ok(wsod_detection_scores(&raw))
    }

    pub fn params(&self) -> [&ParamTensor; 4] {
        [&self.loc_weight, &self.loc_bias, &self.cls_weight, &self.cls_bias]
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor; 4] {
        [
            &mut self.loc_weight,
            &mut self.loc_bias,
            &mut self.cls_weight,
            &mut self.cls_bias,
        ]
    }

    pub fn output_channels(&self) -> usize {
        2 * self.k * self.k * self.labels()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Backpropagates `∂L/∂raw_loc` and `∂L/∂raw_cls` into the head's gradients.
    pub fn backward(
        &mut self,
        features: &Tensor,
        boxes: &[BBox],
        grad: &RegionScores,
    ) -> Result<()> {
        let (h, w, _) = features.dims3()?;
        let labels = self.labels();
        let mut loc = GradAccumulator::new(h, w, self.k, labels);
        let mut cls = GradAccumulator::new(h, w, self.k, labels);
        for (i, b) in boxes.iter().enumerate() {
            single_roi_pool_backward(grad.raw_loc.row(i), b, &mut loc);
            single_roi_pool_backward(grad.raw_cls.row(i), b, &mut cls);
        }
        conv1x1_backward_params(&loc.finish(), features, &mut self.loc_weight, &mut self.loc_bias)?;
        conv1x1_backward_params(&cls.finish(), features, &mut self.cls_weight, &mut self.cls_bias)?;
        Ok(())
    }
}

/// Raw pooled scores, `N×(C+1)` per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionScores {
    pub raw_loc: Matrix,
    pub raw_cls: Matrix,
}

/// Single-RoI pooling of every box on both branches.
pub fn region_class_scores(maps: &WsodMaps, boxes: &[BBox]) -> Result<RegionScores> {
    let loc = IntegralMap::new(&maps.loc, maps.k, maps.labels)?;
    let cls = IntegralMap::new(&maps.cls, maps.k, maps.labels)?;
    let mut raw_loc = Matrix::zeros(boxes.len(), maps.labels);
    let mut raw_cls = Matrix::zeros(boxes.len(), maps.labels);
    for (i, b) in boxes.iter().enumerate() {
        raw_loc.row_mut(i).copy_from_slice(&loc.single_pool(b)?);
        raw_cls.row_mut(i).copy_from_slice(&cls.single_pool(b)?);
    }
    Ok(RegionScores { raw_loc, raw_cls })
}

/// Normalized detection scores of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScores {
    /// Localization softmax over regions, per class.
    pub loc: Matrix,
    /// Classification softmax over classes, per region.
    pub cls: Matrix,
    /// `S = loc ∘ cls`, `N×(C+1)`.
    pub scores: Matrix,
}

impl DetectionScores {
    pub fn regions(&self) -> usize {
        self.scores.rows()
    }

    pub fn labels(&self) -> usize {
        self.scores.cols()
    }

    /// `S_c = Σ_i S[i, c]` for every label (index 0 is background).
    pub fn image_scores(&self) -> Vec<f64> {
        (0..self.labels())
            .map(|c| self.scores.column(c).sum())
            .collect()
    }

    /// Maps `∂L/∂S` to gradients of the raw branch scores.
    pub fn backward(&self, d_scores: &Matrix) -> RegionScores {
        let d_loc = d_scores.hadamard(&self.cls);
        let d_cls = d_scores.hadamard(&self.loc);
        RegionScores {
            raw_loc: self.loc.softmax_backward(&d_loc, Axis::Rows),
            raw_cls: self.cls.softmax_backward(&d_cls, Axis::Cols),
        }
    }
}

pub fn wsod_detection_scores(raw: &RegionScores) -> DetectionScores {
    let loc = raw.raw_loc.softmax(Axis::Rows);
    let cls = raw.raw_cls.softmax(Axis::Cols);
    let scores = loc.hadamard(&cls);
    DetectionScores { loc, cls, scores }
}

/// Image-level multi-label loss over foreground classes. Returns the loss and
/// adds `∂L/∂S` into `grad` when given.
pub fn wsod_image_loss_with_grad(
    det: &DetectionScores,
    present: &BTreeSet<usize>,
    mut grad: Option<&mut Matrix>,
) -> f64 {
    let image = det.image_scores();
    let mut loss = 0.0;
    for (c, &s) in image.iter().enumerate().skip(1) {
        let (p, live) = clamp_prob(s);
        let is_present = present.contains(&c);
        let d = if is_present {
            loss -= p.ln();
            -1.0 / p
        } else {
            loss -= (1.0 - p).ln();
            1.0 / (1.0 - p)
        };
        if let (Some(g), true) = (grad.as_deref_mut(), live) {
            for i in 0..det.regions() {
                *g.at_mut(i, c) += d;
            }
        }
    }
    loss
}

pub fn wsod_image_loss(det: &DetectionScores, present: &BTreeSet<usize>) -> f64 {
    wsod_image_loss_with_grad(det, present, None)
}

/// Pseudo positive regions per class and pseudo background regions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoRegions {
    /// `(class, region)` pairs, `class ≥ 1`.
    pub positives: Vec<(usize, usize)>,
    pub backgrounds: Vec<usize>,
}

impl PseudoRegions {
    pub fn len(&self) -> usize {
        self.positives.len() + self.backgrounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top: usize,
    pub positive_iou: f64,
    pub background_iou: (f64, f64),
    pub batch: usize,
    pub background_fraction: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top: 5,
            positive_iou: 0.5,
            background_iou: (0.1, 0.5),
            batch: 256,
            background_fraction: 0.75,
        }
    }
}

/// Indices of the `n` largest values of `column`, ties to the lower index.
pub(crate) fn top_indices(column: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..column.len()).collect();
    idx.sort_by(|&a, &b| column[b].total_cmp(&column[a]));
    idx.truncate(n);
    idx
}

/// Builds the pseudo positive pools (top regions of each present class plus
/// their IoU ≥ 0.5 neighbours) and the pseudo background pool (IoU band
/// neighbours of any positive), then samples a batch in which backgrounds
/// make up at least the configured fraction whenever the pools allow.
pub fn pseudo_region_sampling(
    det: &DetectionScores,
    boxes: &[BBox],
    present: &BTreeSet<usize>,
    config: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<PseudoRegions> {
    if boxes.len() != det.regions() {
        return Err(Error::Dimension(format!(
            "{} boxes for {} scored regions",
            boxes.len(),
            det.regions()
        )));
    }
    let n = boxes.len();
    let mut pos_pool = Vec::new();
    let mut is_positive = vec![false; n];
    for &c in present {
        if c == 0 || c >= det.labels() {
            continue;
        }
        let column: Vec<f64> = det.scores.column(c).collect();
        let top = top_indices(&column, config.top);
        let mut members: BTreeSet<usize> = top.iter().copied().collect();
        for i in 0..n {
            if top.iter().any(|&t| iou(&boxes[i], &boxes[t]) >= config.positive_iou) {
                members.insert(i);
            }
        }
        for &i in &members {
            is_positive[i] = true;
            pos_pool.push((c, i));
        }
    }
    let positives_all: Vec<usize> = (0..n).filter(|&i| is_positive[i]).collect();
    let (lo, hi) = config.background_iou;
    let bg_pool: Vec<usize> = (0..n)
        .filter(|&i| !is_positive[i])
        .filter(|&i| {
            positives_all.iter().any(|&p| {
                let v = iou(&boxes[i], &boxes[p]);
                v >= lo && v <= hi
            })
        })
        .collect();

    let max_pos = config.batch - (config.batch as f64 * config.background_fraction).ceil() as usize;
    let n_pos = pos_pool.len().min(max_pos);
    let n_bg = bg_pool.len().min(config.batch - n_pos);
    let mut positives: Vec<(usize, usize)> = rand::seq::index::sample(rng, pos_pool.len(), n_pos)
        .into_iter()
        .map(|i| pos_pool[i])
        .collect();
    let mut backgrounds: Vec<usize> = rand::seq::index::sample(rng, bg_pool.len(), n_bg)
        .into_iter()
        .map(|i| bg_pool[i])
        .collect();
    positives.sort_unstable();
    backgrounds.sort_unstable();
    Ok(PseudoRegions {
        positives,
        backgrounds,
    })
}

/// Spatial smoothness regularizer over sampled pseudo regions. Adds `∂L/∂S`
/// into `grad` when given.
pub fn wsod_reg_loss_with_grad(
    det: &DetectionScores,
    regions: &PseudoRegions,
    mut grad: Option<&mut Matrix>,
) -> f64 {
    let mut loss = 0.0;
    let mut term = |i: usize, c: usize| {
        let s = det.scores.at(i, c);
        let p = s.max(LOG_EPS);
        loss -= p.ln();
        if let (Some(g), true) = (grad.as_deref_mut(), s >= LOG_EPS) {
            *g.at_mut(i, c) -= 1.0 / p;
        }
    };
    for &(c, i) in &regions.positives {
        term(i, c);
    }
    for &i in &regions.backgrounds {
        term(i, 0);
    }
    loss
}

pub fn wsod_reg_loss(det: &DetectionScores, regions: &PseudoRegions) -> f64 {
    wsod_reg_loss_with_grad(det, regions, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub min_objectness: f64,
    pub nms_iou: f64,
    pub max_keep: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            min_objectness: 0.2,
            nms_iou: 0.4,
            max_keep: 1000,
        }
    }
}

/// Filters proposals by objectness (sum of foreground scores), then NMS on
/// objectness. Returns kept indices in descending objectness.
pub fn proposal_refine(
    proposals: &[BBox],
    scores: &Matrix,
    config: &RefineConfig,
) -> Result<Vec<usize>> {
    if proposals.len() != scores.rows() {
        return Err(Error::Dimension(format!(
            "{} proposals for {} score rows",
            proposals.len(),
            scores.rows()
        )));
    }
    let objectness: Vec<f64> = (0..scores.rows())
        .map(|i| scores.row(i)[1..].iter().sum())
        .collect();
    let candidates: Vec<usize> = (0..proposals.len())
        .filter(|&i| objectness[i] >= config.min_objectness)
        .collect();
    let boxes: Vec<BBox> = candidates.iter().map(|&i| proposals[i]).collect();
    let obj: Vec<f64> = candidates.iter().map(|&i| objectness[i]).collect();
    let mut kept: Vec<usize> = nms(&boxes, &obj, config.nms_iou)?
        .into_iter()
        .map(|j| candidates[j])
        .collect();
    kept.truncate(config.max_keep);
    Ok(kept)
}

/// How the detection score threshold is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdBasis {
    /// Against `S[i, c]` rescaled to `[0, 1]` within the image and class.
    MinMax,
    /// Against `S[i, c]` as is.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub basis: ThresholdBasis,
    pub nms_iou: f64,
    pub max_per_class: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.7,
            basis: ThresholdBasis::MinMax,
            nms_iou: 0.4,
            max_per_class: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: usize,
    /// Detection score `S[i, c]`.
    pub score: f64,
    /// Index of the proposal the detection came from.
    pub region: usize,
}

/// Detections of one image, grouped by class with descending scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn of_class(&self, class: usize) -> impl Iterator<Item = &Detection> {
        self.detections.iter().filter(move |d| d.class == class)
    }
}

/// Per-class thresholding and NMS over detection scores.
pub fn detect_from_scores(
    scores: &Matrix,
    boxes: &[BBox],
    config: &DetectConfig,
) -> Result<DetectionSet> {
    if boxes.len() != scores.rows() {
        return Err(Error::Dimension(format!(
            "{} boxes for {} score rows",
            boxes.len(),
            scores.rows()
        )));
    }
    let mut set = DetectionSet::default();
    if boxes.is_empty() {
        return Ok(set);
    }
    for c in 1..scores.cols() {
        let column: Vec<f64> = scores.column(c).collect();
        let (lo, hi) = column
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let basis = |v: f64| match config.basis {
            ThresholdBasis::Raw => v,
            ThresholdBasis::MinMax if hi > lo => (v - lo) / (hi - lo),
            // every region ties for the maximum
            ThresholdBasis::MinMax => 1.0,
        };
        let candidates: Vec<usize> = (0..boxes.len())
            .filter(|&i| basis(column[i]) > config.score_threshold)
            .collect();
        let cand_boxes: Vec<BBox> = candidates.iter().map(|&i| boxes[i]).collect();
        let cand_scores: Vec<f64> = candidates.iter().map(|&i| column[i]).collect();
        for j in nms(&cand_boxes, &cand_scores, config.nms_iou)?
            .into_iter()
            .take(config.max_per_class)
        {
            let i = candidates[j];
            set.detections.push(Detection {
                bbox: boxes[i],
                class: c,
                score: column[i],
                region: i,
            });
        }
    }
    Ok(set)
}

impl WsodHead {
    pub fn detect(
        &self,
        features: &Tensor,
        proposals: &[BBox],
        config: &DetectConfig,
    ) -> Result<DetectionSet> {
        if proposals.is_empty() {
            return Ok(DetectionSet::default());
        }
        let det = self.score(features, proposals)?;
        detect_from_scores(&det.scores, proposals, config)
    }
}
