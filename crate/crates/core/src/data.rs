//! Synthetic relation dataset: generation, manifest I/O and augmentation.
//!
//! Training code only ever sees [`WeakImage`], which carries features,
//! proposals and image-level labels. Instance boxes and instance-level
//! relations live in [`GroundTruth`] and are reachable only through
//! [`SyntheticImage`], which the evaluation code consumes.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::numerics::{read_tensor, write_tensor, Tensor};
use crate::wspp::Triplet;

/// Spatial predicate vocabulary; a dataset with `R` predicates uses the first `R`.
pub const PREDICATE_NAMES: [&str; 5] = ["above", "below", "left_of", "right_of", "overlaps"];

pub const ABOVE: usize = 0;
pub const BELOW: usize = 1;
pub const LEFT_OF: usize = 2;
pub const RIGHT_OF: usize = 3;
pub const OVERLAPS: usize = 4;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";

/// Predicates that hold for the ordered pair `(a, b)` under a vocabulary of
/// size `predicates`.
///
/// The positional predicate follows the dominant axis of the displacement
/// between box centres (vertical wins ties); coincident centres have none.
/// `overlaps` is added for intersecting boxes.
pub fn spatial_predicates(a: &BBox, b: &BBox, predicates: usize) -> Vec<usize> {
    // doubled centres keep the arithmetic in integers
    let dx = (b.x1() + b.x2()) - (a.x1() + a.x2());
    let dy = (b.y1() + b.y2()) - (a.y1() + a.y2());
    let mut out = Vec::new();
    let positional = if dx == 0 && dy == 0 {
        None
    } else if dy.abs() >= dx.abs() {
        Some(if dy > 0 { ABOVE } else { BELOW })
    } else {
        Some(if dx > 0 { LEFT_OF } else { RIGHT_OF })
    };
    if let Some(p) = positional.filter(|&p| p < predicates) {
        out.push(p);
    }
    if OVERLAPS < predicates && a.intersection(b).is_some() {
        out.push(OVERLAPS);
    }
    out
}

/// Predicate index after a horizontal mirror.
pub fn mirror_predicate(p: usize) -> usize {
    match p {
        LEFT_OF => RIGHT_OF,
        RIGHT_OF => LEFT_OF,
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_train: usize,
    pub num_test: usize,
    pub classes: usize,
    pub predicates: usize,
    /// Grid resolution recorded for downstream training.
    pub k: usize,
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Proposals per image, including the ground-truth boxes.
    pub proposals: usize,
    pub jitter_copies: usize,
    /// Largest IoU allowed between two objects of one image.
    pub max_object_iou: f64,
    pub signature_strength: f32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_train: 500,
            num_test: 100,
            classes: 5,
            predicates: 4,
            k: 3,
            dim: 16,
            height: 48,
            width: 48,
            min_objects: 2,
            max_objects: 4,
            min_size: 8,
            max_size: 20,
            proposals: 20,
            jitter_copies: 2,
            max_object_iou: 0.3,
            signature_strength: 1.0,
            noise: 0.5,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes == 0 || self.dim == 0 || self.height == 0 || self.width == 0 || self.k == 0 {
            return fail("classes, dim, k, height and width must be positive".into());
        }
        if self.predicates == 0 || self.predicates > PREDICATE_NAMES.len() {
            return fail(format!(
                "predicate count {} outside 1..={}",
                self.predicates,
                PREDICATE_NAMES.len()
            ));
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return fail(format!(
                "object range {}..={} must start at 2 or more and be non-empty",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > self.classes {
            return fail(format!(
                "{} objects per image need at least as many classes, have {}",
                self.max_objects, self.classes
            ));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return fail(format!("box size range {}..={} is empty", self.min_size, self.max_size));
        }
        if self.max_size > self.height.min(self.width) {
            return fail(format!(
                "boxes up to {} pixels do not fit a {}×{} canvas",
                self.max_size, self.height, self.width
            ));
        }
        if self.proposals < self.max_objects {
            return fail(format!(
                "{} proposals cannot cover {} objects",
                self.proposals, self.max_objects
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn num_images(&self) -> usize {
        self.num_train + self.num_test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakLabels {
    pub classes: BTreeSet<usize>,
    pub triplets: BTreeSet<Triplet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: usize,
}

/// Instance-level relation: indices into the instance list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GtRelation {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub instances: Vec<Instance>,
    pub relations: Vec<GtRelation>,
}

/// What training may see of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakImage {
    pub id: String,
    pub features: Tensor,
    pub proposals: Vec<BBox>,
    pub labels: WeakLabels,
}

/// A full image with ground truth, for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub weak: WeakImage,
    pub gt: GroundTruth,
}

fn flip_features(features: &Tensor) -> Tensor {
    let (h, w, d) = features.dims3().expect("feature maps are rank 3");
    let src = features.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let from = (y * w + x) * d;
            let to = (y * w + (w - 1 - x)) * d;
            out[to..to + d].copy_from_slice(&src[from..from + d]);
        }
    }
    Tensor::from_vec(features.shape(), out).expect("same shape")
}

fn flip_triplet(t: &Triplet) -> Triplet {
    Triplet {
        predicate: mirror_predicate(t.predicate),
        ..*t
    }
}

impl WeakImage {
    pub fn height(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    /// Mirror image along the width axis.
    pub fn flipped(&self) -> WeakImage {
        let w = self.width() as i32;
        WeakImage {
            id: self.id.clone(),
            features: flip_features(&self.features),
            proposals: self.proposals.iter().map(|b| b.flip_horizontal(w)).collect(),
            labels: WeakLabels {
                classes: self.labels.classes.clone(),
                triplets: self.labels.triplets.iter().map(flip_triplet).collect(),
            },
        }
    }
}

/// Mirrors features, boxes and left/right predicates.
pub fn horizontal_flip(image: &SyntheticImage) -> SyntheticImage {
    let w = image.weak.width() as i32;
    SyntheticImage {
        weak: image.weak.flipped(),
        gt: GroundTruth {
            instances: image
                .gt
                .instances
                .iter()
                .map(|i| Instance {
                    bbox: i.bbox.flip_horizontal(w),
                    class: i.class,
                })
                .collect(),
            relations: image
                .gt
                .relations
                .iter()
                .map(|r| GtRelation {
                    predicate: mirror_predicate(r.predicate),
                    ..*r
                })
                .collect(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub split: Split,
    /// Relative to the dataset directory.
    pub feature_file: String,
    pub proposals: Vec<BBox>,
    pub weak_labels: WeakLabels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DataConfig,
    pub predicate_names: Vec<String>,
    pub images: Vec<ImageRecord>,
}

/// A dataset directory with a loaded manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Reads the manifest and checks that every tensor file exists.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::format(&path, "manifest not found"),
            _ => Error::io(&path, e),
        })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        manifest.config.validate()?;
        for rec in &manifest.images {
            let file = root.join(&rec.feature_file);
            if !file.is_file() {
                return Err(Error::format(&file, format!("feature tensor of image {} is missing", rec.id)));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn config(&self) -> &DataConfig {
        &self.manifest.config
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.manifest.images.iter().filter(move |r| r.split == split)
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.manifest.images.iter().find(|r| r.id == id)
    }

    fn features(&self, rec: &ImageRecord) -> Result<Tensor> {
        let path = self.root.join(&rec.feature_file);
        let t = read_tensor(&path)?;
        let c = self.config();
        if t.shape() != [c.height, c.width, c.dim] {
            return Err(Error::format(
                &path,
                format!("shape {:?}, manifest declares [{}, {}, {}]", t.shape(), c.height, c.width, c.dim),
            ));
        }
        Ok(t)
    }

    /// Loads the training view of an image.
    pub fn load_weak(&self, rec: &ImageRecord) -> Result<WeakImage> {
        Ok(WeakImage {
            id: rec.id.clone(),
            features: self.features(rec)?,
            proposals: rec.proposals.clone(),
            labels: rec.weak_labels.clone(),
        })
    }

    /// Loads an image with its ground truth.
    pub fn load(&self, rec: &ImageRecord) -> Result<SyntheticImage> {
        let gt = rec.gt.clone().ok_or_else(|| {
            Error::format(self.root.join(MANIFEST_FILE), format!("image {} has no ground truth", rec.id))
        })?;
        Ok(SyntheticImage {
            weak: self.load_weak(rec)?,
            gt,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SyntheticImage>> {
        self.records(split).map(|r| self.load(r)).collect()
    }

    pub fn load_weak_split(&self, split: Split) -> Result<Vec<WeakImage>> {
        self.records(split).map(|r| self.load_weak(r)).collect()
    }
}

/// Writes images and their manifest under `root`.
pub fn save_dataset(root: &Path, config: &DataConfig, images: &[(Split, SyntheticImage)]) -> Result<Manifest> {
    let tensors = root.join(TENSOR_DIR);
    fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    let mut records = Vec::with_capacity(images.len());
    for (split, img) in images {
        let rel = format!("{TENSOR_DIR}/{}.pprt", img.weak.id);
        write_tensor(&root.join(&rel), &img.weak.features)?;
        records.push(ImageRecord {
            id: img.weak.id.clone(),
            split: *split,
            feature_file: rel,
            proposals: img.weak.proposals.clone(),
            weak_labels: img.weak.labels.clone(),
            gt: Some(img.gt.clone()),
        });
    }
    let manifest = Manifest {
        config: config.clone(),
        predicate_names: PREDICATE_NAMES[..config.predicates].iter().map(|s| s.to_string()).collect(),
        images: records,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates the dataset in memory and writes it to `root`.
pub fn generate_dataset(root: &Path, config: &DataConfig) -> Result<Manifest> {
    let images = generate_images(config)?;
    save_dataset(root, config, &images)
}

/// Unit-norm signature per class, index 0 unused.
pub fn class_signatures(config: &DataConfig) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..=config.classes)
        .map(|_| {
            let v: Vec<f32> = (0..config.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn image_id(split: Split, index: usize) -> String {
    match split {
        Split::Train => format!("train_{index:05}"),
        Split::Test => format!("test_{index:05}"),
    }
}

pub fn generate_images(config: &DataConfig) -> Result<Vec<(Split, SyntheticImage)>> {
    config.validate()?;
    let signatures = class_signatures(config);
    (0..config.num_images())
        .into_par_iter()
        .map(|n| {
            let (split, index) = if n < config.num_train {
                (Split::Train, n)
            } else {
                (Split::Test, n - config.num_train)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(n as u64 + 1);
            generate_image(config, &signatures, image_id(split, index), &mut rng).map(|img| (split, img))
        })
        .collect()
}

const PLACEMENT_ATTEMPTS: usize = 2000;

fn random_box(config: &DataConfig, rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(config.min_size..=config.max_size) as i32;
    let h = rng.random_range(config.min_size..=config.max_size) as i32;
    let x = rng.random_range(0..=config.width as i32 - w);
    let y = rng.random_range(0..=config.height as i32 - h);
    BBox::new(x, y, x + w, y + h).expect("positive size")
}

fn same_centre(a: &BBox, b: &BBox) -> bool {
    a.x1() + a.x2() == b.x1() + b.x2() && a.y1() + a.y2() == b.y1() + b.y2()
}

fn place_objects(config: &DataConfig, count: usize, rng: &mut impl Rng) -> Option<Vec<BBox>> {
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    for _ in 0..PLACEMENT_ATTEMPTS {
        if boxes.len() == count {
            break;
        }
        let cand = random_box(config, rng);
        if boxes
            .iter()
            .all(|b| iou(b, &cand) < config.max_object_iou && !same_centre(b, &cand))
        {
            boxes.push(cand);
        }
    }
    (boxes.len() == count).then_some(boxes)
}

fn jitter(bbox: &BBox, config: &DataConfig, rng: &mut impl Rng) -> BBox {
    let (w, h) = (config.width as i32, config.height as i32);
    loop {
        let dx = (bbox.width() / 5).max(1);
        let dy = (bbox.height() / 5).max(1);
        let x1 = (bbox.x1() + rng.random_range(-dx..=dx)).clamp(0, w - 1);
        let y1 = (bbox.y1() + rng.random_range(-dy..=dy)).clamp(0, h - 1);
        let x2 = (bbox.x2() + rng.random_range(-dx..=dx)).clamp(1, w);
        let y2 = (bbox.y2() + rng.random_range(-dy..=dy)).clamp(1, h);
        if let Ok(b) = BBox::new(x1, y1, x2, y2) {
            if b != *bbox {
                return b;
            }
        }
    }
}

/// Ground-truth relations of a layout, in ordered-pair order.
pub fn derive_relations(instances: &[Instance], predicates: usize) -> Vec<GtRelation> {
    let mut out = Vec::new();
    for (a, ia) in instances.iter().enumerate() {
        for (b, ib) in instances.iter().enumerate() {
            if a == b {
                continue;
            }
            for p in spatial_predicates(&ia.bbox, &ib.bbox, predicates) {
                out.push(GtRelation {
                    subject: a,
                    object: b,
                    predicate: p,
                });
            }
        }
    }
    out
}

fn generate_image(
    config: &DataConfig,
    signatures: &[Vec<f32>],
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticImage> {
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let boxes = (0..64)
        .find_map(|_| place_objects(config, count, rng))
        .ok_or_else(|| {
            Error::Config(format!(
                "could not place {count} objects with IoU < {} on a {}×{} canvas",
                config.max_object_iou, config.height, config.width
            ))
        })?;
    let mut classes: Vec<usize> = (1..=config.classes).collect();
    classes.shuffle(rng);
    let instances: Vec<Instance> = boxes
        .iter()
        .zip(&classes)
        .map(|(&bbox, &class)| Instance { bbox, class })
        .collect();
    let relations = derive_relations(&instances, config.predicates);

    let (h, w, d) = (config.height, config.width, config.dim);
    let normal = Normal::new(0.0f32, config.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut data: Vec<f32> = (0..h * w * d).map(|_| normal.sample(rng)).collect();
    for inst in &instances {
        let sig = &signatures[inst.class];
        for y in inst.bbox.y1()..inst.bbox.y2() {
            for x in inst.bbox.x1()..inst.bbox.x2() {
                let at = (y as usize * w + x as usize) * d;
                for (v, s) in data[at..at + d].iter_mut().zip(sig) {
                    *v += config.signature_strength * s;
                }
            }
        }
    }
    let features = Tensor::from_vec(&[h, w, d], data)?;

    let mut proposals: Vec<BBox> = boxes.clone();
    for b in &boxes {
        for _ in 0..config.jitter_copies {
            if proposals.len() < config.proposals {
                proposals.push(jitter(b, config, rng));
            }
        }
    }
    while proposals.len() < config.proposals {
        proposals.push(random_box(config, rng));
    }
    proposals.shuffle(rng);

    let labels = WeakLabels {
        classes: instances.iter().map(|i| i.class).collect(),
        triplets: relations
            .iter()
            .map(|r| Triplet {
                subject: instances[r.subject].class,
                predicate: r.predicate,
                object: instances[r.object].class,
            })
            .collect(),
    };
    Ok(SyntheticImage {
        weak: WeakImage {
            id,
            features,
            proposals,
            labels,
        },
        gt: GroundTruth {
            instances,
            relations,
        },
    })
}
