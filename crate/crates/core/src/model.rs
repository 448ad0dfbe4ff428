//! The full detector: a WSOD head, a WSPP head and the frozen proposal
//! refiner captured after bootstrap training.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{WeakImage, WeakLabels};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::{read_tensor, write_tensor, Matrix, ParamTensor, Tensor};
use crate::wsod::{
    proposal_refine, pseudo_region_sampling, top_indices, wsod_image_loss_with_grad,
    wsod_reg_loss_with_grad, DetectConfig, DetectionScores, DetectionSet, PseudoRegions,
    RefineConfig, SamplingConfig, WsodHead,
};
use crate::wspp::{
    overall_loss, wspp_image_loss_with_grad, PairScores, RelationPrediction, WsppHead,
};

pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub predicates: usize,
    pub k: usize,
    pub dim: usize,
    pub init_std: f32,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.predicates == 0 || self.k == 0 || self.dim == 0 {
            return Err(Error::Config("classes, predicates, k and dim must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Settings used when the model selects regions and loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    /// Regions per class forming `C_s` / `C_o` for the predicate loss.
    pub top_m: usize,
    pub sampling: SamplingConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: crate::wspp::DEFAULT_ALPHA,
            top_m: 15,
            sampling: SamplingConfig::default(),
        }
    }
}

/// Which terms contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Detection terms only.
    Bootstrap,
    /// Detection and predicate terms.
    Full,
}

/// Discrete choices made from the current scores, held fixed while the loss
/// is evaluated and differentiated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selections {
    pub pseudo: PseudoRegions,
    pub class_regions: BTreeMap<usize, Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub obj: f64,
    pub pred: f64,
    pub reg: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.obj += o.obj;
        self.pred += o.pred;
        self.reg += o.reg;
        self.total += o.total;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub wsod: WsodHead,
    pub wspp: WsppHead,
    /// Detection head snapshot used to refine proposals; absent before bootstrap.
    pub refiner: Option<WsodHead>,
}

fn region_sets(det: &DetectionScores, classes: impl IntoIterator<Item = usize>, top_m: usize) -> BTreeMap<usize, Vec<usize>> {
    classes
        .into_iter()
        .filter(|&c| c < det.labels())
        .map(|c| {
            let column: Vec<f64> = det.scores.column(c).collect();
            let mut top = top_indices(&column, top_m);
            top.sort_unstable();
            (c, top)
        })
        .collect()
}

fn relation_classes(labels: &WeakLabels) -> BTreeSet<usize> {
    labels
        .triplets
        .iter()
        .flat_map(|t| [t.subject, t.object])
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let wsod = WsodHead::new(config.dim, config.classes, config.k, config.init_std, &mut rng);
        let wspp = WsppHead::new(config.dim, config.predicates, config.k, config.init_std, &mut rng);
        Ok(Self {
            config,
            wsod,
            wspp,
            refiner: None,
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.wsod.params_mut().into_iter().chain(self.wspp.params_mut())
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        let (_, _, d) = features.dims3()?;
        if d != self.config.dim {
            return Err(Error::Dimension(format!(
                "features have {d} channels, model expects {}",
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Indices of the proposals kept by the refiner, or all of them when the
    /// refiner is absent or keeps fewer than two.
    pub fn refine(&self, features: &Tensor, proposals: &[BBox], config: &RefineConfig) -> Result<Vec<usize>> {
        let all = || (0..proposals.len()).collect();
        let Some(refiner) = &self.refiner else {
            return Ok(all());
        };
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let det = refiner.score(features, proposals)?;
        let mut kept = proposal_refine(proposals, &det.scores, config)?;
        if kept.len() < 2 {
            return Ok(all());
        }
        kept.sort_unstable();
        Ok(kept)
    }

    /// Draws the pseudo regions and per-class region sets from the current
    /// detection scores.
    pub fn select(
        &self,
        features: &Tensor,
        boxes: &[BBox],
        labels: &WeakLabels,
        config: &LossConfig,
        rng: &mut impl Rng,
    ) -> Result<Selections> {
        let det = self.wsod.score(features, boxes)?;
        Ok(Selections {
            pseudo: pseudo_region_sampling(&det, boxes, &labels.classes, &config.sampling, rng)?,
            class_regions: region_sets(&det, relation_classes(labels), config.top_m),
        })
    }

    /// Loss of one image under fixed selections; accumulates parameter
    /// gradients when `backward` is set.
    pub fn loss(
        &mut self,
        features: &Tensor,
        boxes: &[BBox],
        labels: &WeakLabels,
        selections: &Selections,
        alpha: f64,
        stage: Stage,
        backward: bool,
    ) -> Result<LossBreakdown> {
        self.check_features(features)?;
        let det = self.wsod.score(features, boxes)?;
        let mut d_obj = backward.then(|| Matrix::zeros(det.regions(), det.labels()));
        let obj = wsod_image_loss_with_grad(&det, &labels.classes, d_obj.as_mut());
        let mut d_reg = backward.then(|| Matrix::zeros(det.regions(), det.labels()));
        let reg = wsod_reg_loss_with_grad(&det, &selections.pseudo, d_reg.as_mut());
        if let (Some(mut g), Some(r)) = (d_obj, d_reg) {
            for (a, b) in g.data_mut().iter_mut().zip(r.data()) {
                *a += alpha * b;
            }
            let raw = det.backward(&g);
            self.wsod.backward(features, boxes, &raw)?;
        }

        let mut pred = 0.0;
        if stage == Stage::Full && boxes.len() >= 2 && !labels.triplets.is_empty() {
            let scores = self.wspp.score(features, boxes)?;
            let mut d = backward.then(|| Matrix::zeros(scores.len(), scores.predicates()));
            pred = wspp_image_loss_with_grad(&scores, &labels.triplets, &selections.class_regions, d.as_mut());
            if let Some(d) = d {
                let raw = scores.backward(&d);
                self.wspp.backward(features, boxes, &scores, &raw)?;
            }
        }
        let total = overall_loss(obj, pred, reg, alpha);
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total}")));
        }
        Ok(LossBreakdown { obj, pred, reg, total })
    }

    /// Selects, evaluates and backpropagates the loss of one weak image.
    pub fn train_step(
        &mut self,
        image: &WeakImage,
        boxes: &[BBox],
        config: &LossConfig,
        stage: Stage,
        rng: &mut impl Rng,
    ) -> Result<LossBreakdown> {
        let sel = self.select(&image.features, boxes, &image.labels, config, rng)?;
        self.loss(&image.features, boxes, &image.labels, &sel, config.alpha, stage, true)
    }

    /// Detections and ranked relation triplets for one image.
    pub fn infer(
        &self,
        image: &WeakImage,
        refine: &RefineConfig,
        detect: &DetectConfig,
        max_relations: usize,
    ) -> Result<Inference> {
        self.check_features(&image.features)?;
        let kept = self.refine(&image.features, &image.proposals, refine)?;
        let boxes: Vec<BBox> = kept.iter().map(|&i| image.proposals[i]).collect();
        let detections = self.wsod.detect(&image.features, &boxes, detect)?;
        let mut relations = Vec::new();
        if boxes.len() >= 2 && !detections.is_empty() {
            let scores = self.wspp.score(&image.features, &boxes)?;
            relations = rank_relations(&image.id, &detections, &scores, boxes.len(), max_relations);
        }
        Ok(Inference {
            boxes,
            detections,
            relations,
        })
    }

    /// Writes `model.json` and one tensor file per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = ModelFile {
            config: self.config.clone(),
            has_refiner: self.refiner.is_some(),
        };
        let path = dir.join(MODEL_FILE);
        let text = serde_json::to_string_pretty(&header).expect("model header serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        for (name, t) in self.named_tensors() {
            write_tensor(&dir.join(format!("{name}.pprt")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::format(&path, "checkpoint header not found"),
            _ => Error::io(&path, e),
        })?;
        let header: ModelFile =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut model = Model::new(header.config)?;
        if header.has_refiner {
            model.refiner = Some(model.wsod.clone());
        }
        for (name, param) in model.named_params_mut() {
            let file = dir.join(format!("{name}.pprt"));
            let t = read_tensor(&file)?;
            if t.shape() != param.shape() {
                return Err(Error::format(
                    &file,
                    format!("shape {:?}, expected {:?}", t.shape(), param.shape()),
                ));
            }
            *param = ParamTensor::new(t);
        }
        Ok(model)
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let wsod_names = ["loc_weight", "loc_bias", "cls_weight", "cls_bias"];
        for (n, p) in wsod_names.iter().zip(self.wsod.params()) {
            out.push((format!("wsod_{n}"), &p.value));
        }
        if let Some(r) = &self.refiner {
            for (n, p) in wsod_names.iter().zip(r.params()) {
                out.push((format!("refiner_{n}"), &p.value));
            }
        }
        for (n, p) in wspp_names().into_iter().zip(self.wspp.params()) {
            out.push((n, &p.value));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut ParamTensor)> {
        let wsod_names = ["loc_weight", "loc_bias", "cls_weight", "cls_bias"];
        let mut out: Vec<(String, &mut ParamTensor)> = Vec::new();
        for (n, p) in wsod_names.iter().zip(self.wsod.params_mut()) {
            out.push((format!("wsod_{n}"), p));
        }
        if let Some(r) = &mut self.refiner {
            for (n, p) in wsod_names.iter().zip(r.params_mut()) {
                out.push((format!("refiner_{n}"), p));
            }
        }
        for (n, p) in wspp_names().into_iter().zip(self.wspp.params_mut()) {
            out.push((n, p));
        }
        out
    }
}

fn wspp_names() -> Vec<String> {
    let maps = ["single_subject", "single_object", "joint_subject", "joint_object"];
    let mut out = Vec::new();
    for branch in ["sel", "cls"] {
        for m in maps {
            for part in ["weight", "bias"] {
                out.push(format!("wspp_{branch}_{m}_{part}"));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    has_refiner: bool,
}

/// Output of [`Model::infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Refined proposals the detections index into.
    pub boxes: Vec<BBox>,
    pub detections: DetectionSet,
    pub relations: Vec<RelationPrediction>,
}

/// Ranks `subject score × predicate score × object score` over ordered pairs
/// of detections on distinct regions, keeping the best `limit`.
pub fn rank_relations(
    image_id: &str,
    detections: &DetectionSet,
    scores: &PairScores,
    regions: usize,
    limit: usize,
) -> Vec<RelationPrediction> {
    let pair_row = |i: usize, j: usize| i * (regions - 1) + if j < i { j } else { j - 1 };
    let mut out = Vec::new();
    for a in &detections.detections {
        for b in &detections.detections {
            if a.region == b.region {
                continue;
            }
            let row = scores.scores.row(pair_row(a.region, b.region));
            for (r, &s) in row.iter().enumerate() {
                out.push(RelationPrediction {
                    image_id: image_id.to_string(),
                    sub_box: a.bbox,
                    obj_box: b.bbox,
                    sub_class: a.class,
                    predicate: r,
                    obj_class: b.class,
                    score: a.score * s * b.score,
                });
            }
        }
    }
    // stable: ties keep enumeration order
    out.sort_by(|x, y| y.score.total_cmp(&x.score));
    out.truncate(limit);
    out
}
