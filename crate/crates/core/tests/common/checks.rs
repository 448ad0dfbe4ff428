//! Checks shared by the integration tests and the acceptance runner. Each
//! returns `Ok(detail)` on success and `Err(detail)` on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use pprfcn::bench::{run_bench, BenchConfig};
use pprfcn::data::{generate_images, DataConfig, Split, SyntheticImage, WeakImage};
use pprfcn::eval::{evaluate, recall_of, uniform_predicate_baseline, EvalConfig, Protocol};
use pprfcn::geometry::BBox;
use pprfcn::model::{Model, ModelConfig, Selections, Stage};
use pprfcn::numerics::{check_gradient, conv1x1, conv1x1_backward, Matrix, ParamTensor, Tensor, Tolerance};
use pprfcn::pooling::{joint_pool, pair_score, pooling_backward, single_roi_pool, Role, RoleScoreMap, ScoreMapBundle};
use pprfcn::train::{train, TrainConfig};
use pprfcn::wsod::{
    pseudo_region_sampling, wsod_detection_scores, wsod_image_loss, wsod_image_loss_with_grad, wsod_reg_loss,
    wsod_reg_loss_with_grad, PseudoRegions, RegionScores, SamplingConfig, WsodHead,
};
use pprfcn::wspp::{overall_loss, wspp_image_loss, wspp_image_loss_with_grad, PairScores, Triplet, WsppHead};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{joint_pool as oracle_joint, single_pool as oracle_single};

pub type Check = Result<String, String>;

/// Fails with `msg` unless `cond` holds.
fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_box(rng: &mut impl Rng, h: usize, w: usize) -> [i32; 4] {
    let x1 = rng.random_range(0..w as i32);
    let y1 = rng.random_range(0..h as i32);
    [x1, y1, rng.random_range(x1 + 1..=w as i32), rng.random_range(y1 + 1..=h as i32)]
}

pub fn bbox(c: [i32; 4]) -> BBox {
    BBox::new(c[0], c[1], c[2], c[3]).unwrap()
}

fn random_bundle(rng: &mut impl Rng, h: usize, w: usize, k: usize, r: usize) -> ([Tensor; 4], ScoreMapBundle) {
    let maps: [Tensor; 4] = std::array::from_fn(|_| random_tensor(rng, &[h, w, k * k * r], 2.0));
    (maps.clone(), bundle_from(&maps, k, r))
}

fn bundle_from(maps: &[Tensor; 4], k: usize, r: usize) -> ScoreMapBundle {
    let roles = [Role::Subject, Role::Object, Role::Subject, Role::Object];
    let [a, b, c, d] = std::array::from_fn(|i| RoleScoreMap::new(maps[i].clone(), roles[i], k, r).unwrap());
    ScoreMapBundle::new(a, b, c, d).unwrap()
}

// ---------------------------------------------------------------- pooling

pub const POOL_CASES: usize = 200;
pub const POOL_TOL: f64 = 1e-6;
pub const POOL_BUDGET: Duration = Duration::from_secs(30);

/// Forward pooling against the pixel-loop reference on random cases.
pub fn pooling_oracle() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..POOL_CASES {
        let k = [1, 3, 5][case % 3];
        let r = [1, 4][(case / 3) % 2];
        let h = rng.random_range(6..20);
        let w = rng.random_range(6..20);
        let (maps, bundle) = random_bundle(&mut rng, h, w, k, r);
        let (pi, pj) = (random_box(&mut rng, h, w), random_box(&mut rng, h, w));
        let single_s = single_roi_pool(&bundle.single_subject, &bbox(pi)).map_err(err)?;
        let single_o = single_roi_pool(&bundle.single_object, &bbox(pj)).map_err(err)?;
        let joint = joint_pool(&bundle.joint_subject, &bundle.joint_object, &bbox(pi), &bbox(pj)).map_err(err)?;
        let total = pair_score(&bundle, &bbox(pi), &bbox(pj)).map_err(err)?;
        let want_s = oracle_single(&maps[0], k, r, pi);
        let want_o = oracle_single(&maps[1], k, r, pj);
        let want_j = oracle_joint(&maps[2], &maps[3], k, r, pi, pj);
        for i in 0..r {
            let diffs = [
                single_s[i] - want_s[i],
                single_o[i] - want_o[i],
                joint[i] - want_j[i],
                total[i] - (want_s[i] + want_o[i] + want_j[i]),
            ];
            for d in diffs {
                worst = worst.max(d.abs());
            }
        }
        ensure(worst <= POOL_TOL, || format!("case {case} (k={k}, R={r}): error {worst:.3e}"))?;
    }
    let elapsed = t.elapsed();
    ensure(elapsed < POOL_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{POOL_CASES} cases, max error {worst:.2e}, {elapsed:.2?}"))
}

// -------------------------------------------------------------- gradients

pub const GRAD_EPS: f64 = 1e-3;
pub const GRAD_TOL: Tolerance = Tolerance { abs: 1e-3, rel: 1e-2 };
pub const GRAD_BUDGET: Duration = Duration::from_secs(60);

/// The tiny image: 12×12, four proposals, two classes, two predicates.
pub struct Tiny {
    pub features: Tensor,
    pub boxes: Vec<BBox>,
    pub present: BTreeSet<usize>,
    pub triplets: BTreeSet<Triplet>,
    pub selections: Selections,
    pub config: ModelConfig,
}

pub fn tiny() -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let features = random_tensor(&mut rng, &[12, 12, 3], 1.0);
    let boxes = [[0, 0, 6, 6], [5, 1, 12, 7], [2, 6, 8, 12], [7, 7, 12, 12]].map(bbox).to_vec();
    let triplets = [Triplet { subject: 1, predicate: 0, object: 2 }, Triplet { subject: 2, predicate: 1, object: 1 }]
        .into_iter()
        .collect();
    Tiny {
        features,
        boxes,
        present: [1, 2].into_iter().collect(),
        triplets,
        selections: Selections {
            pseudo: PseudoRegions { positives: vec![(1, 0), (2, 2)], backgrounds: vec![1, 3] },
            class_regions: [(1, vec![0, 1]), (2, vec![2, 3])].into_iter().collect(),
        },
        config: ModelConfig { classes: 2, predicates: 2, k: 3, dim: 3, init_std: 0.5, seed: 5 },
    }
}

fn fd(name: &str, value: &Tensor, analytic: &Tensor, f: impl FnMut(&Tensor) -> pprfcn::Result<f64>) -> Result<usize, String> {
    let report = check_gradient(value, analytic, GRAD_EPS, GRAD_TOL, f).map_err(err)?;
    ensure(report.passed(), || {
        format!(
            "{name}: entry {} analytic {:.6} numeric {:.6}",
            report.worst_index, report.analytic_at_worst, report.numeric_at_worst
        )
    })?;
    Ok(report.checked)
}

pub fn grad_conv1x1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[12, 12, 3], 1.0);
    let mut w = ParamTensor::new(random_tensor(&mut rng, &[3, 5], 1.0));
    let mut b = ParamTensor::new(random_tensor(&mut rng, &[5], 1.0));
    let u = random_tensor(&mut rng, &[12, 12, 5], 1.0);
    let dot = |t: &Tensor| t.data().iter().zip(u.data()).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
    let dx = conv1x1_backward(&u, &x, &mut w, &mut b).map_err(err)?;
    let mut n = 0;
    n += fd("weights", &w.value, &w.grad, |p| {
        Ok(dot(&conv1x1(&x, &ParamTensor::new(p.clone()), &b)?))
    })?;
    n += fd("bias", &b.value, &b.grad, |p| Ok(dot(&conv1x1(&x, &w, &ParamTensor::new(p.clone()))?)))?;
    n += fd("features", &x, &dx, |p| Ok(dot(&conv1x1(p, &w, &b)?)))?;
    Ok(format!("{n} entries"))
}

pub fn grad_pooling() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (k, r) = (3, 2);
    let (maps, bundle) = random_bundle(&mut rng, 12, 12, k, r);
    let u = [0.7, -1.3];
    let pairs = [([1, 2, 9, 8], [4, 0, 12, 11]), ([0, 0, 12, 12], [3, 4, 6, 7]), ([2, 2, 5, 5], [7, 8, 11, 12])];
    let mut n = 0;
    for (pi, pj) in pairs {
        let (p, q) = (bbox(pi), bbox(pj));
        let grads = pooling_backward(&bundle, &p, &q, &u).map_err(err)?;
        for (m, name) in ["single_subject", "single_object", "joint_subject", "joint_object"].iter().enumerate() {
            n += fd(name, &maps[m], &grads[m], |probe| {
                let mut ms = maps.clone();
                ms[m] = probe.clone();
                let s = pair_score(&bundle_from(&ms, k, r), &p, &q)?;
                Ok(s.iter().zip(u).map(|(a, b)| a * b).sum())
            })?;
        }
    }
    Ok(format!("{n} entries over 3 pairs"))
}

fn set_param<T>(owner: &T, index: usize, probe: &Tensor, params: impl Fn(&mut T) -> Vec<&mut ParamTensor>) -> T
where
    T: Clone,
{
    let mut copy = owner.clone();
    params(&mut copy)[index].value = probe.clone();
    copy
}

fn wsod_params(h: &mut WsodHead) -> Vec<&mut ParamTensor> {
    h.params_mut().into_iter().collect()
}

fn wspp_params(h: &mut WsppHead) -> Vec<&mut ParamTensor> {
    h.params_mut().collect()
}

fn model_params(m: &mut Model) -> Vec<&mut ParamTensor> {
    m.params_mut().collect()
}

/// Checks one detection-head loss, given as value-with-optional-gradient.
fn grad_wsod_loss(loss: impl Fn(&pprfcn::wsod::DetectionScores, Option<&mut Matrix>) -> f64) -> Check {
    let t = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut head = WsodHead::new(3, 2, 3, 0.5, &mut rng);
    let det = head.score(&t.features, &t.boxes).map_err(err)?;
    let mut g = Matrix::zeros(det.regions(), det.labels());
    loss(&det, Some(&mut g));
    let raw = det.backward(&g);
    head.backward(&t.features, &t.boxes, &raw).map_err(err)?;
    let mut n = 0;
    for i in 0..4 {
        let p = head.params()[i];
        n += fd(&format!("param {i}"), &p.value, &p.grad, |probe| {
            let h = set_param(&head, i, probe, wsod_params);
            Ok(loss(&h.score(&t.features, &t.boxes)?, None))
        })?;
    }
    Ok(format!("{n} entries"))
}

pub fn grad_image_loss() -> Check {
    let present = tiny().present;
    grad_wsod_loss(|det, g| wsod_image_loss_with_grad(det, &present, g))
}

pub fn grad_reg_loss() -> Check {
    let pseudo = tiny().selections.pseudo;
    grad_wsod_loss(|det, g| wsod_reg_loss_with_grad(det, &pseudo, g))
}

pub fn grad_predicate_loss() -> Check {
    let t = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut head = WsppHead::new(3, 2, 3, 0.5, &mut rng);
    let regions = &t.selections.class_regions;
    let scores = head.score(&t.features, &t.boxes).map_err(err)?;
    let mut g = Matrix::zeros(scores.len(), scores.predicates());
    wspp_image_loss_with_grad(&scores, &t.triplets, regions, Some(&mut g));
    let raw = scores.backward(&g);
    head.backward(&t.features, &t.boxes, &scores, &raw).map_err(err)?;
    let snapshot: Vec<ParamTensor> = head.params().cloned().collect();
    let mut n = 0;
    for (i, p) in snapshot.iter().enumerate() {
        n += fd(&format!("param {i}"), &p.value, &p.grad, |probe| {
            let h = set_param(&head, i, probe, wspp_params);
            Ok(wspp_image_loss(&h.score(&t.features, &t.boxes)?, &t.triplets, regions))
        })?;
    }
    Ok(format!("{n} entries over {} tensors", snapshot.len()))
}

pub fn grad_overall_loss() -> Check {
    let t = tiny();
    let labels = pprfcn::data::WeakLabels { classes: t.present.clone(), triplets: t.triplets.clone() };
    let mut model = Model::new(t.config.clone()).map_err(err)?;
    model.params_mut().for_each(ParamTensor::zero_grad);
    let alpha = 0.2;
    model
        .loss(&t.features, &t.boxes, &labels, &t.selections, alpha, Stage::Full, true)
        .map_err(err)?;
    let snapshot: Vec<ParamTensor> = model.params_mut().map(|p| p.clone()).collect();
    let mut n = 0;
    for (i, p) in snapshot.iter().enumerate() {
        n += fd(&format!("param {i}"), &p.value, &p.grad, |probe| {
            let mut m = set_param(&model, i, probe, model_params);
            let l = m.loss(&t.features, &t.boxes, &labels, &t.selections, alpha, Stage::Full, false)?;
            Ok(l.total)
        })?;
    }
    Ok(format!("{n} entries over {} tensors", snapshot.len()))
}

pub fn gradients() -> Check {
    let t = Instant::now();
    let parts: [(&str, fn() -> Check); 6] = [
        ("conv1x1", grad_conv1x1),
        ("pooling", grad_pooling),
        ("image loss", grad_image_loss),
        ("predicate loss", grad_predicate_loss),
        ("regularizer", grad_reg_loss),
        ("overall", grad_overall_loss),
    ];
    let mut done = Vec::new();
    for (name, check) in parts {
        let detail = check().map_err(|e| format!("{name}: {e}"))?;
        done.push(format!("{name} {detail}"));
    }
    let elapsed = t.elapsed();
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{}; {elapsed:.2?}", done.join(", ")))
}

// ------------------------------------------------------------- invariants

pub const NORM_TOL: f64 = 1e-4;

pub fn random_boxes(rng: &mut impl Rng, n: usize, h: usize, w: usize) -> Vec<BBox> {
    (0..n).map(|_| bbox(random_box(rng, h, w))).collect()
}

/// Selection softmax sums to one over pairs, classification softmax over
/// predicates.
pub fn normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for n in [2, 10, 50] {
        let head = WsppHead::new(8, 4, 3, 1.0, &mut rng);
        let features = random_tensor(&mut rng, &[32, 32, 8], 2.0);
        let boxes = random_boxes(&mut rng, n, 32, 32);
        let s = head.score(&features, &boxes).map_err(err)?;
        ensure(s.len() == n * (n - 1), || format!("N={n}: {} pairs", s.len()))?;
        for r in 0..s.predicates() {
            worst = worst.max((s.sel_norm.column(r).sum::<f64>() - 1.0).abs());
        }
        for p in 0..s.len() {
            worst = worst.max((s.cls_norm.row(p).iter().sum::<f64>() - 1.0).abs());
        }
        ensure(worst <= NORM_TOL, || format!("N={n}: deviation {worst:.3e}"))?;
    }
    Ok(format!("max deviation {worst:.2e}"))
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn in_unit(m: &Matrix) -> bool {
    m.data().iter().all(|v| (0.0..=1.0).contains(v))
}

/// Scores lie in [0, 1] and losses stay finite when softmaxes saturate.
pub fn bounds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100 {
        let n = rng.random_range(1..30);
        let scale = [1.0, 10.0, 100.0][case % 3];
        let det = wsod_detection_scores(&RegionScores {
            raw_loc: random_matrix(&mut rng, n, 4, scale),
            raw_cls: random_matrix(&mut rng, n, 4, scale),
        });
        ensure(in_unit(&det.scores), || format!("case {case}: S_c outside [0, 1]"))?;
        ensure(det.image_scores().iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)), || {
            format!("case {case}: image score outside [0, 1]")
        })?;
        let m = rng.random_range(2..12);
        let pairs = pprfcn::wspp::enumerate_pairs(m);
        let p = pairs.len();
        let s = PairScores::from_raw(pairs, random_matrix(&mut rng, p, 3, scale), random_matrix(&mut rng, p, 3, scale));
        ensure(in_unit(&s.scores), || format!("case {case}: S_r outside [0, 1]"))?;
    }

    // saturated: one region and one pair take all the mass, others none
    let mut checked = 0;
    for sign in [1.0, -1.0] {
        let mut raw = Matrix::zeros(6, 3);
        raw.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i % 4 == 0 { sign * 1e4 } else { -sign * 1e4 });
        let det = wsod_detection_scores(&RegionScores { raw_loc: raw.clone(), raw_cls: raw.clone() });
        let present: BTreeSet<usize> = [1].into_iter().collect();
        let pseudo = PseudoRegions { positives: vec![(1, 0), (2, 3)], backgrounds: vec![1, 2, 5] };
        let pairs = pprfcn::wspp::enumerate_pairs(3);
        let s = PairScores::from_raw(pairs, raw.clone(), raw.clone());
        let triplets: BTreeSet<Triplet> = [Triplet { subject: 1, predicate: 2, object: 2 }].into_iter().collect();
        let regions: BTreeMap<usize, Vec<usize>> = [(1, vec![0, 1]), (2, vec![2])].into_iter().collect();
        let (obj, reg) = (wsod_image_loss(&det, &present), wsod_reg_loss(&det, &pseudo));
        let pred = wspp_image_loss(&s, &triplets, &regions);
        let total = overall_loss(obj, pred, reg, 0.2);
        for (name, v) in [("image", obj), ("regularizer", reg), ("predicate", pred), ("overall", total)] {
            ensure(v.is_finite(), || format!("{name} loss {v} under saturation"))?;
            checked += 1;
        }
    }
    Ok(format!("100 random inputs in [0, 1]; {checked} saturated losses finite"))
}

/// Joint pooling is exactly invariant to swapping roles together with
/// boxes, while the full pair score depends on order.
pub fn role_swap() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let (k, r) = ([1, 2, 3][case % 3], 1 + case % 4);
        let (h, w) = (rng.random_range(4..16), rng.random_range(4..16));
        let a = random_tensor(&mut rng, &[h, w, k * k * r], 3.0);
        let b = random_tensor(&mut rng, &[h, w, k * k * r], 3.0);
        let map = |t: &Tensor, role| RoleScoreMap::new(t.clone(), role, k, r).unwrap();
        let (p, q) = (bbox(random_box(&mut rng, h, w)), bbox(random_box(&mut rng, h, w)));
        let fwd = joint_pool(&map(&a, Role::Subject), &map(&b, Role::Object), &p, &q).map_err(err)?;
        let back = joint_pool(&map(&b, Role::Subject), &map(&a, Role::Object), &q, &p).map_err(err)?;
        let same = fwd.iter().zip(&back).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("case {case}: {fwd:?} vs {back:?}"))?;
    }
    // one map per role, the object maps zero: order shows through geometry
    let mut maps: [Tensor; 4] = std::array::from_fn(|_| Tensor::zeros(&[8, 8, 9]));
    for y in 0..8 {
        for x in 0..8 {
            for c in 0..9 {
                let v = if c == 0 { 1.0 } else { 0.0 };
                maps[0].data_mut()[(y * 8 + x) * 9 + c] = v;
                maps[2].data_mut()[(y * 8 + x) * 9 + c] = v;
            }
        }
    }
    let bundle = bundle_from(&maps, 3, 1);
    let (p, q) = (bbox([0, 0, 3, 3]), bbox([5, 5, 8, 8]));
    let pq = pair_score(&bundle, &p, &q).map_err(err)?[0];
    let qp = pair_score(&bundle, &q, &p).map_err(err)?[0];
    ensure((pq - qp).abs() > 1e-3, || format!("pair score symmetric: {pq} vs {qp}"))?;
    Ok(format!("100 exact swaps; asymmetric pair {pq:.4} vs {qp:.4}"))
}

fn grid_starts(lo: i32, hi: i32, k: usize) -> Vec<i32> {
    let len = (hi - lo) as i64;
    (0..=k as i64).map(|s| lo + ((s * len + k as i64 - 1) / k as i64) as i32).collect()
}

/// Pixels outside a role box's share of a union cell get exactly 0.0.
pub fn empty_cells() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w, k, r) = (14, 14, 3, 2);
    let mut empty_cells = 0;
    let mut zero_pixels = 0usize;
    let mut cases: Vec<([i32; 4], [i32; 4])> = vec![([0, 0, 4, 4], [7, 7, 14, 14]), ([1, 1, 13, 13], [5, 5, 8, 8])];
    cases.extend((0..50).map(|_| (random_box(&mut rng, h, w), random_box(&mut rng, h, w))));
    for (pi, pj) in cases {
        let (_, bundle) = random_bundle(&mut rng, h, w, k, r);
        let grads = pooling_backward(&bundle, &bbox(pi), &bbox(pj), &[1.5, -0.5]).map_err(err)?;
        let u = [pi[0].min(pj[0]), pi[1].min(pj[1]), pi[2].max(pj[2]), pi[3].max(pj[3])];
        let (xs, ys) = (grid_starts(u[0], u[2], k), grid_starts(u[1], u[3], k));
        for (grad, role_box) in [(&grads[2], pi), (&grads[3], pj)] {
            for row in 0..k {
                for col in 0..k {
                    let cell = [xs[col], ys[row], xs[col + 1], ys[row + 1]];
                    let inter = [
                        cell[0].max(role_box[0]),
                        cell[1].max(role_box[1]),
                        cell[2].min(role_box[2]),
                        cell[3].min(role_box[3]),
                    ];
                    let empty = inter[0] >= inter[2] || inter[1] >= inter[3];
                    empty_cells += usize::from(empty);
                    for y in 0..h as i32 {
                        for x in 0..w as i32 {
                            let inside = !empty && x >= inter[0] && x < inter[2] && y >= inter[1] && y < inter[3];
                            if inside {
                                continue;
                            }
                            for p in 0..r {
                                let ch = (row * k + col) * r + p;
                                let v = grad.at3(y as usize, x as usize, ch);
                                ensure(v.to_bits() == 0, || {
                                    format!("pair {pi:?}/{pj:?}: cell ({row},{col}) pixel ({x},{y}) got {v:e}")
                                })?;
                                zero_pixels += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    ensure(empty_cells > 0, || "no empty cells exercised".into())?;
    Ok(format!("{empty_cells} empty cells; {zero_pixels} entries bitwise zero"))
}

pub const SAMPLE_BATCH: usize = 256;
pub const SAMPLE_BG_FRACTION: f64 = 0.75;

fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0) as f64;
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0) as f64;
    let inter = iw * ih;
    inter / (a.area() as f64 + b.area() as f64 - inter)
}

/// Boxes jittered around a few anchors so the IoU bands are populated.
fn clustered_boxes(rng: &mut impl Rng, n: usize) -> Vec<BBox> {
    let anchors: Vec<[i32; 4]> = (0..3)
        .map(|_| {
            let (x, y) = (rng.random_range(0..40), rng.random_range(0..40));
            [x, y, x + rng.random_range(12..24), y + rng.random_range(12..24)]
        })
        .collect();
    (0..n)
        .map(|_| {
            let a = anchors[rng.random_range(0..anchors.len())];
            let mut j = || rng.random_range(-8..=8);
            let (x1, y1) = ((a[0] + j()).max(0), (a[1] + j()).max(0));
            let (x2, y2) = ((a[2] + j()).max(x1 + 1), (a[3] + j()).max(y1 + 1));
            bbox([x1, y1, x2, y2])
        })
        .collect()
}

/// Batch size and background share of the pseudo region sampler.
pub fn sampling() -> Check {
    let mut permitting = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(40..700);
        let boxes = clustered_boxes(&mut rng, n);
        let det = wsod_detection_scores(&RegionScores {
            raw_loc: random_matrix(&mut rng, n, 4, 3.0),
            raw_cls: random_matrix(&mut rng, n, 4, 3.0),
        });
        let present: BTreeSet<usize> = (1..4).filter(|_| rng.random_bool(0.6)).collect();
        let cfg = SamplingConfig::default();
        let out = pseudo_region_sampling(&det, &boxes, &present, &cfg, &mut rng).map_err(err)?;

        // independent pool construction
        let mut positive = vec![false; n];
        for &c in &present {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| det.scores.at(b, c).total_cmp(&det.scores.at(a, c)));
            let top = &idx[..5.min(n)];
            for i in 0..n {
                if top.contains(&i) || top.iter().any(|&t| iou(&boxes[i], &boxes[t]) >= 0.5) {
                    positive[i] = true;
                }
            }
        }
        let bg_pool: BTreeSet<usize> = (0..n)
            .filter(|&i| !positive[i])
            .filter(|&i| (0..n).any(|p| positive[p] && (0.1..=0.5).contains(&iou(&boxes[i], &boxes[p]))))
            .collect();

        let total = out.len();
        let bg = out.backgrounds.len();
        ensure(total <= SAMPLE_BATCH, || format!("seed {seed}: {total} regions"))?;
        ensure(out.backgrounds.iter().all(|i| bg_pool.contains(i)), || format!("seed {seed}: background outside pool"))?;
        ensure(out.positives.iter().all(|&(c, i)| positive[i] && present.contains(&c)), || {
            format!("seed {seed}: positive outside pool")
        })?;
        if bg_pool.len() >= (SAMPLE_BATCH as f64 * SAMPLE_BG_FRACTION) as usize {
            permitting += 1;
            ensure(bg as f64 >= SAMPLE_BG_FRACTION * total as f64, || {
                format!("seed {seed}: {bg} backgrounds of {total}")
            })?;
        }
    }
    ensure(permitting >= 10, || format!("only {permitting} layouts had large enough pools"))?;
    Ok(format!("50 layouts, {permitting} with full background pools"))
}

fn head_parameters(c: usize, r: usize, k: usize, d: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let wsod = WsodHead::new(d, c, k, 0.01, &mut rng);
    let wspp = WsppHead::new(d, r, k, 0.01, &mut rng);
    (wspp.output_channels(), wsod.parameter_count() + wspp.parameter_count())
}

/// Output channel count of the relation head and linear growth of the
/// total head size in C and R.
pub fn parameter_scaling() -> Check {
    let (k, d) = (3, 16);
    let kk = k * k;
    let mut lines = Vec::new();
    for (c, r) in [(5, 4), (50, 40)] {
        let (channels, params) = head_parameters(c, r, k, d);
        ensure(channels == 2 * 2 * 2 * kk * r, || format!("(C={c}, R={r}): {channels} channels"))?;
        // one D×out weight plus bias per output channel
        let expected = (d + 1) * (2 * kk * (c + 1) + 8 * kk * r);
        ensure(params == expected, || format!("(C={c}, R={r}): {params} parameters, expected {expected}"))?;
        lines.push(format!("(C={c},R={r}) {channels} ch {params} params"));
    }
    let f = |c, r| head_parameters(c, r, k, d).1 as i64;
    let additive = f(50, 40) - f(5, 40) == f(50, 4) - f(5, 4) && f(50, 40) - f(50, 4) == f(5, 40) - f(5, 4);
    ensure(additive, || "growth in C depends on R".into())?;
    Ok(lines.join(", "))
}

// ------------------------------------------------------------ end to end

pub const E2E_MAX_EPOCHS: usize = 30;
pub const E2E_BUDGET: Duration = Duration::from_secs(600);
pub const E2E_PREDICATE_FACTOR: f64 = 2.0;
pub const E2E_K: usize = 50;

pub fn end_to_end() -> Check {
    let t = Instant::now();
    let data = DataConfig::default();
    let images = generate_images(&data).map_err(err)?;
    let train_set: Vec<WeakImage> =
        images.iter().filter(|(s, _)| *s == Split::Train).map(|(_, i)| i.weak.clone()).collect();
    let test_set: Vec<SyntheticImage> =
        images.iter().filter(|(s, _)| *s == Split::Test).map(|(_, i)| i.clone()).collect();
    let model_cfg = ModelConfig {
        classes: data.classes,
        predicates: data.predicates,
        k: data.k,
        dim: data.dim,
        init_std: 0.01,
        seed: 7,
    };
    let train_cfg = TrainConfig::default();
    let epochs = train_cfg.epochs + train_cfg.bootstrap_epochs;
    ensure(epochs <= E2E_MAX_EPOCHS, || format!("{epochs} epochs"))?;
    let random = Model::new(model_cfg.clone()).map_err(err)?;
    let mut model = Model::new(model_cfg).map_err(err)?;
    train(&mut model, &train_set, &train_cfg, |_| {}).map_err(err)?;

    let eval_cfg = EvalConfig { ks: vec![E2E_K], ..EvalConfig::default() };
    let (rows, _) = evaluate(&model, &test_set, &eval_cfg).map_err(err)?;
    let (random_rows, _) = evaluate(&random, &test_set, &eval_cfg).map_err(err)?;
    let elapsed = t.elapsed();
    let pred = recall_of(&rows, Protocol::PredicatePrediction, E2E_K).unwrap_or(0.0);
    let rel = recall_of(&rows, Protocol::RelationDetection, E2E_K).unwrap_or(0.0);
    let rel_random = recall_of(&random_rows, Protocol::RelationDetection, E2E_K).unwrap_or(0.0);
    let baseline = uniform_predicate_baseline(&test_set, data.predicates, E2E_K);
    let detail = format!(
        "{epochs} epochs in {elapsed:.1?}; predicate R@50 {pred:.4} vs uniform {baseline:.4}; \
         relation R@50 {rel:.4} vs random init {rel_random:.4}"
    );
    ensure(elapsed <= E2E_BUDGET, || format!("over time budget: {detail}"))?;
    ensure(pred >= E2E_PREDICATE_FACTOR * baseline, || format!("predicate recall too low: {detail}"))?;
    ensure(rel > rel_random, || format!("relation recall not above random: {detail}"))?;
    Ok(detail)
}

pub const BENCH_MIN_SPEEDUP: f64 = 1.5;
pub const BENCH_REPEATS: usize = 9;

pub fn benchmark() -> Check {
    let cfg = BenchConfig { n_proposals: 100, repeats: BENCH_REPEATS, ..BenchConfig::default() };
    let (report, out) = run_bench(&cfg).map_err(err)?;
    ensure(report.pairs == 9900, || format!("{} pairs", report.pairs))?;
    ensure(out.shared.rows() == out.fc.rows() && out.shared.cols() == out.fc.cols(), || "shape mismatch".into())?;
    let detail = format!(
        "shared {:.2} ms, fc {:.2} ms, speedup {:.2}x (median of {}, {} threads)",
        report.shared_ms, report.fc_ms, report.speedup, report.repeats, report.threads
    );
    ensure(report.speedup >= BENCH_MIN_SPEEDUP, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ determinism

pub fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_pprfcn"))
}

/// Runs the CLI in `dir`; returns stderr on failure.
pub fn run_cli(dir: &Path, args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(binary()).current_dir(dir).args(args).output().map_err(err)
}

fn run_ok(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = run_cli(dir, args)?;
    ensure(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

/// Relative path → contents of every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let (ta, tb) = (tree(a), tree(b));
    ensure(ta.keys().eq(tb.keys()), || format!("{} and {} list different files", a.display(), b.display()))?;
    for (name, bytes) in &ta {
        ensure(tb[name] == *bytes, || format!("{} differs", name.display()))?;
    }
    Ok(ta.len())
}

pub fn determinism() -> Check {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for run in &runs {
        let dir = run.path();
        run_ok(dir, &["gen-data", "--out", "d", "--seed", "7", "--num-train", "60", "--num-test", "10"])?;
        run_ok(dir, &["train", "--data", "d", "--out", "c", "--seed", "7", "--epochs", "3", "--bootstrap-epochs", "1"])?;
    }
    let data = same_tree(&runs[0].path().join("d"), &runs[1].path().join("d"))?;
    let ckpt = same_tree(&runs[0].path().join("c"), &runs[1].path().join("c"))?;
    Ok(format!("{data} dataset files and {ckpt} checkpoint files identical"))
}
