//! Weakly supervised predicate prediction head.
//!
//! A selection branch and a classification branch each own a bundle of four
//! role maps. Every ordered region pair is scored on both bundles; selection
//! scores are normalized over pairs, classification scores over predicates,
//! and their product ranks `(pair, predicate)` entries.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::{conv1x1, conv1x1_backward_params, Axis, Matrix, ParamTensor, Tensor};
use crate::pooling::{
    BundleGradients, PoolScratch, PreparedBundle, Role, RoleScoreMap, ScoreMapBundle,
};
use crate::wsod::{clamp_prob, random_param};

pub const DEFAULT_ALPHA: f64 = 0.2;

/// Ordered pairs `(i, j)`, `i ≠ j`, in lexicographic order.
pub fn enumerate_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// `l_obj + l_pred + α·l_reg`.
pub fn overall_loss(l_obj: f64, l_pred: f64, l_reg: f64, alpha: f64) -> f64 {
    l_obj + l_pred + alpha * l_reg
}

/// 1×1 filters for one role map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFilters {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

/// The four filter banks of one branch, in bundle order.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFilters {
    pub banks: [MapFilters; 4],
}

const BANK_ROLES: [Role; 4] = [Role::Subject, Role::Object, Role::Subject, Role::Object];

impl BranchFilters {
    fn new(dim: usize, channels: usize, std: f32, rng: &mut impl Rng) -> Self {
        Self {
            banks: std::array::from_fn(|_| MapFilters {
                weight: random_param(rng, dim, channels, std),
                bias: ParamTensor::zeros(&[channels]),
            }),
        }
    }

    fn bundle(&self, features: &Tensor, k: usize, predicates: usize) -> Result<ScoreMapBundle> {
        let [a, b, c, d] = std::array::from_fn::<_, 4, _>(|i| {
            let f = &self.banks[i];
            conv1x1(features, &f.weight, &f.bias)
                .and_then(|m| RoleScoreMap::new(m, BANK_ROLES[i], k, predicates))
        });
        ScoreMapBundle::new(a?, b?, c?, d?)
    }

    fn backward(&mut self, features: &Tensor, grads: BundleGradients) -> Result<()> {
        for (bank, g) in self.banks.iter_mut().zip(grads.finish()) {
            conv1x1_backward_params(&g, features, &mut bank.weight, &mut bank.bias)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Sel,
    Cls,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsppHead {
    pub k: usize,
    pub predicates: usize,
    pub sel: BranchFilters,
    pub cls: BranchFilters,
}

/// Score-map bundles of both branches, ready for pooling.
#[derive(Debug, Clone)]
pub struct WsppMaps {
    pub sel: ScoreMapBundle,
    pub cls: ScoreMapBundle,
}

impl WsppMaps {
    pub fn prepare(&self) -> PreparedMaps {
        PreparedMaps {
            sel: self.sel.prepare(),
            cls: self.cls.prepare(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedMaps {
    pub sel: PreparedBundle,
    pub cls: PreparedBundle,
}

impl WsppHead {
    pub fn new(dim: usize, predicates: usize, k: usize, init_std: f32, rng: &mut impl Rng) -> Self {
        let channels = k * k * predicates;
        Self {
            k,
            predicates,
            sel: BranchFilters::new(dim, channels, init_std, rng),
            cls: BranchFilters::new(dim, channels, init_std, rng),
        }
    }

    pub fn maps(&self, features: &Tensor) -> Result<WsppMaps> {
        Ok(WsppMaps {
            sel: self.sel.bundle(features, self.k, self.predicates)?,
            cls: self.cls.bundle(features, self.k, self.predicates)?,
        })
    }

    /// Score maps of one branch.
    pub fn branch_bundle(&self, features: &Tensor, branch: Branch) -> Result<ScoreMapBundle> {
        match branch {
            Branch::Sel => self.sel.bundle(features, self.k, self.predicates),
            Branch::Cls => self.cls.bundle(features, self.k, self.predicates),
        }
    }

    /// Scores every ordered pair of `boxes`.
    pub fn score(&self, features: &Tensor, boxes: &[BBox]) -> Result<PairScores> {
        let maps = self.maps(features)?.prepare();
        score_pairs(&maps, boxes, &enumerate_pairs(boxes.len()))
    }

    /// Output channels of all 1×1 filters: two branches of `2·2·k²R`.
    pub fn output_channels(&self) -> usize {
        2 * 2 * 2 * self.k * self.k * self.predicates
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamTensor> {
        self.sel
            .banks
            .iter()
            .chain(self.cls.banks.iter())
            .flat_map(|b| [&b.weight, &b.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.sel
            .banks
            .iter_mut()
            .chain(self.cls.banks.iter_mut())
            .flat_map(|b| [&mut b.weight, &mut b.bias])
    }

    pub fn parameter_count(&self) -> usize {
        self.params().map(|p| p.len()).sum()
    }

    /// Backpropagates raw-score gradients of both branches into the filters.
    pub fn backward(
        &mut self,
        features: &Tensor,
        boxes: &[BBox],
        scores: &PairScores,
        grad: &PairGradients,
    ) -> Result<()> {
        let (h, w, _) = features.dims3()?;
        let (k, r) = (self.k, self.predicates);
        let sel = pair_backward(&grad.raw_sel, &scores.pairs, boxes, BundleGradients::new(h, w, k, r));
        self.sel.backward(features, sel)?;
        let cls = pair_backward(&grad.raw_cls, &scores.pairs, boxes, BundleGradients::new(h, w, k, r));
        self.cls.backward(features, cls)
    }
}

// Single-RoI terms are summed per box before scattering, joint terms per pair.
fn pair_backward(
    upstream: &Matrix,
    pairs: &[(usize, usize)],
    boxes: &[BBox],
    mut grads: BundleGradients,
) -> BundleGradients {
    let r = upstream.cols();
    let mut subj = Matrix::zeros(boxes.len(), r);
    let mut obj = Matrix::zeros(boxes.len(), r);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let u = upstream.row(p);
        if u.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (s, v) in subj.row_mut(i).iter_mut().zip(u) {
            *s += v;
        }
        for (o, v) in obj.row_mut(j).iter_mut().zip(u) {
            *o += v;
        }
        grads.add_joint(u, &boxes[i], &boxes[j]);
    }
    for (i, b) in boxes.iter().enumerate() {
        grads.add_single_subject(subj.row(i), b);
        grads.add_single_object(obj.row(i), b);
    }
    grads
}

/// Raw and normalized scores of an ordered pair list.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub pairs: Vec<(usize, usize)>,
    pub raw_sel: Matrix,
    pub raw_cls: Matrix,
    /// Softmax over pairs, per predicate.
    pub sel_norm: Matrix,
    /// Softmax over predicates, per pair.
    pub cls_norm: Matrix,
    /// `sel_norm ∘ cls_norm`.
    pub scores: Matrix,
}

/// `∂L/∂raw` for both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradients {
    pub raw_sel: Matrix,
    pub raw_cls: Matrix,
}

const PAIR_CHUNK: usize = 256;

/// `pair_score` of every listed pair on one bundle, `P×R`.
pub fn raw_pair_scores(
    bundle: &PreparedBundle,
    boxes: &[BBox],
    pairs: &[(usize, usize)],
) -> Result<Matrix> {
    let r = bundle.predicates();
    let (subj, obj) = bundle.single_terms(boxes)?;
    let mut raw = Matrix::zeros(pairs.len(), r);
    raw.data_mut()
        .par_chunks_mut(PAIR_CHUNK * r)
        .zip(pairs.par_chunks(PAIR_CHUNK))
        .for_each_init(PoolScratch::default, |scratch, (out, chunk)| {
            for (row, &(i, j)) in out.chunks_mut(r).zip(chunk) {
                for ((o, s), b) in row.iter_mut().zip(&subj[i * r..(i + 1) * r]).zip(&obj[j * r..(j + 1) * r]) {
                    *o = s + b;
                }
                bundle.joint_into(&boxes[i], &boxes[j], scratch, row);
            }
        });
    Ok(raw)
}

pub fn score_pairs(
    maps: &PreparedMaps,
    boxes: &[BBox],
    pairs: &[(usize, usize)],
) -> Result<PairScores> {
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i == j || i >= boxes.len() || j >= boxes.len()) {
        return Err(Error::Domain(format!(
            "pair ({i}, {j}) is invalid for {} regions",
            boxes.len()
        )));
    }
    let raw_sel = raw_pair_scores(&maps.sel, boxes, pairs)?;
    let raw_cls = raw_pair_scores(&maps.cls, boxes, pairs)?;
    Ok(PairScores::from_raw(pairs.to_vec(), raw_sel, raw_cls))
}

impl PairScores {
    pub fn from_raw(pairs: Vec<(usize, usize)>, raw_sel: Matrix, raw_cls: Matrix) -> Self {
        let sel_norm = raw_sel.softmax(Axis::Rows);
        let cls_norm = raw_cls.softmax(Axis::Cols);
        let scores = sel_norm.hadamard(&cls_norm);
        Self {
            pairs,
            raw_sel,
            raw_cls,
            sel_norm,
            cls_norm,
            scores,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn predicates(&self) -> usize {
        self.scores.cols()
    }

    /// Row of the pair `(i, j)`, if scored.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        self.pairs.iter().position(|&p| p == (i, j))
    }

    /// Maps `∂L/∂scores` to raw-score gradients.
    pub fn backward(&self, d_scores: &Matrix) -> PairGradients {
        PairGradients {
            raw_sel: self
                .sel_norm
                .softmax_backward(&d_scores.hadamard(&self.cls_norm), Axis::Rows),
            raw_cls: self
                .cls_norm
                .softmax_backward(&d_scores.hadamard(&self.sel_norm), Axis::Cols),
        }
    }

    fn members(&self, subjects: &[usize], objects: &[usize]) -> Vec<usize> {
        let n = self.pairs.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0);
        let mut in_s = vec![false; n];
        let mut in_o = vec![false; n];
        subjects.iter().filter(|&&i| i < n).for_each(|&i| in_s[i] = true);
        objects.iter().filter(|&&j| j < n).for_each(|&j| in_o[j] = true);
        (0..self.len())
            .filter(|&p| {
                let (i, j) = self.pairs[p];
                in_s[i] && in_o[j]
            })
            .collect()
    }
}

/// `S_r = Σ_{i∈C_s, j∈C_o} scores[(i, j), r]`.
pub fn image_predicate_score(scores: &PairScores, subjects: &[usize], objects: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; scores.predicates()];
    for p in scores.members(subjects, objects) {
        for (o, v) in out.iter_mut().zip(scores.scores.row(p)) {
            *o += v;
        }
    }
    out
}

/// Subject class, predicate, object class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

/// Image-level predicate loss. Each distinct `(s, o)` class pair among the
/// triplets contributes a multi-label loss over predicates; adds
/// `∂L/∂scores` into `grad` when given.
pub fn wspp_image_loss_with_grad(
    scores: &PairScores,
    triplets: &BTreeSet<Triplet>,
    class_regions: &BTreeMap<usize, Vec<usize>>,
    mut grad: Option<&mut Matrix>,
) -> f64 {
    let mut groups: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for t in triplets {
        groups.entry((t.subject, t.object)).or_default().insert(t.predicate);
    }
    let empty = Vec::new();
    let mut loss = 0.0;
    for ((s, o), positive) in groups {
        let cs = class_regions.get(&s).unwrap_or(&empty);
        let co = class_regions.get(&o).unwrap_or(&empty);
        let members = scores.members(cs, co);
        for r in 0..scores.predicates() {
            let total: f64 = members.iter().map(|&p| scores.scores.at(p, r)).sum();
            let (p, live) = clamp_prob(total);
            let d = if positive.contains(&r) {
                loss -= p.ln();
                -1.0 / p
            } else {
                loss -= (1.0 - p).ln();
                1.0 / (1.0 - p)
            };
            if let (Some(g), true) = (grad.as_deref_mut(), live) {
                for &m in &members {
                    *g.at_mut(m, r) += d;
                }
            }
        }
    }
    loss
}

pub fn wspp_image_loss(
    scores: &PairScores,
    triplets: &BTreeSet<Triplet>,
    class_regions: &BTreeMap<usize, Vec<usize>>,
) -> f64 {
    wspp_image_loss_with_grad(scores, triplets, class_regions, None)
}

/// One ranked relation prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationPrediction {
    pub image_id: String,
    pub sub_box: BBox,
    pub obj_box: BBox,
    pub sub_class: usize,
    pub predicate: usize,
    pub obj_class: usize,
    pub score: f64,
}
