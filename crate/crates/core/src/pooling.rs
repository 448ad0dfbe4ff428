//! Position-role-sensitive RoI pooling.
//!
//! A score map stack has `k²·R` channels laid out grid-major: channel
//! `(row·k + col)·R + r` holds predicate `r` for grid position `(row, col)`.
//!
//! * single-RoI pooling splits one box into `k×k` cells, mean-pools every cell
//!   over its own channel group and averages the `k²` results;
//! * joint pooling splits the union of two boxes into `k×k` cells and, per cell,
//!   adds the subject map's mean over `cell ∩ subject` to the object map's mean
//!   over `cell ∩ object`. A piece with no pixels contributes zero and receives
//!   no gradient;
//! * a pair score is single(subject) + single(object) + joint(subject, object).
//!
//! Every cell counts in the vote denominator, including empty ones, so each
//! pooled value is linear in the maps.
//!
//! Forward passes read rectangle sums from a summed-area table; backward passes
//! scatter constant rectangles into a difference array. Both are driven by the
//! same list of [`CellPiece`]s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cell_span, grid_bounds, union_box, BBox};
use crate::numerics::Tensor;

/// Grid resolution used unless configured otherwise.
pub const DEFAULT_GRID: usize = 3;

/// Number of votes each pooled value is averaged over.
#[inline]
pub fn vote_denominator(k: usize) -> f64 {
    (k * k) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Subject,
    Object,
}

/// A `H×W×(k²·R)` score map tagged with the role it scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleScoreMap {
    map: Tensor,
    role: Role,
    k: usize,
    predicates: usize,
}

impl RoleScoreMap {
    pub fn new(map: Tensor, role: Role, k: usize, predicates: usize) -> Result<Self> {
        check_layout(&map, k, predicates)?;
        Ok(Self {
            map,
            role,
            k,
            predicates,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn predicates(&self) -> usize {
        self.predicates
    }

    pub fn map(&self) -> &Tensor {
        &self.map
    }

    pub fn into_map(self) -> Tensor {
        self.map
    }

    pub fn integral(&self) -> IntegralMap {
        IntegralMap::build(&self.map, self.k, self.predicates)
    }
}

/// Channel holding predicate `r` at grid position `(row, col)`.
#[inline]
pub fn channel_index(k: usize, predicates: usize, row: usize, col: usize, r: usize) -> usize {
    (row * k + col) * predicates + r
}

fn check_layout(map: &Tensor, k: usize, predicates: usize) -> Result<(usize, usize)> {
    let (h, w, c) = map.dims3()?;
    if k == 0 || predicates == 0 {
        return Err(Error::Domain(format!(
            "grid resolution ({k}) and predicate count ({predicates}) must be positive"
        )));
    }
    if c != k * k * predicates {
        return Err(Error::Dimension(format!(
            "score map has {c} channels, expected k²·R = {}",
            k * k * predicates
        )));
    }
    Ok((h, w))
}

/// The four map stacks of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMapBundle {
    pub single_subject: RoleScoreMap,
    pub single_object: RoleScoreMap,
    pub joint_subject: RoleScoreMap,
    pub joint_object: RoleScoreMap,
}

impl ScoreMapBundle {
    pub fn new(
        single_subject: RoleScoreMap,
        single_object: RoleScoreMap,
        joint_subject: RoleScoreMap,
        joint_object: RoleScoreMap,
    ) -> Result<Self> {
        let bundle = Self {
            single_subject,
            single_object,
            joint_subject,
            joint_object,
        };
        let expect = [Role::Subject, Role::Object, Role::Subject, Role::Object];
        for (m, role) in bundle.maps().iter().zip(expect) {
            if m.role != role {
                return Err(Error::Usage(format!(
                    "bundle slot expects a {role:?} map, got {:?}",
                    m.role
                )));
            }
            if m.map.shape() != bundle.single_subject.map.shape()
                || m.k != bundle.single_subject.k
                || m.predicates != bundle.single_subject.predicates
            {
                return Err(Error::Dimension(
                    "bundle maps must share H, W, k and R".into(),
                ));
            }
        }
        Ok(bundle)
    }

    pub fn maps(&self) -> [&RoleScoreMap; 4] {
        [
            &self.single_subject,
            &self.single_object,
            &self.joint_subject,
            &self.joint_object,
        ]
    }

    pub fn k(&self) -> usize {
        self.single_subject.k
    }

    pub fn predicates(&self) -> usize {
        self.single_subject.predicates
    }

    pub fn prepare(&self) -> PreparedBundle {
        PreparedBundle {
            single_subject: self.single_subject.integral(),
            single_object: self.single_object.integral(),
            joint_subject: self.joint_subject.integral(),
            joint_object: self.joint_object.integral(),
        }
    }
}

/// Summed-area table over every channel of a score map, in `f64`.
#[derive(Debug, Clone)]
pub struct IntegralMap {
    height: usize,
    width: usize,
    k: usize,
    predicates: usize,
    // k² planes of (height+1) × (width+1) × R; row/column 0 are zero.
    table: Vec<f64>,
}

impl IntegralMap {
    /// Builds the table for a `H×W×(k²·R)` map.
    pub fn new(map: &Tensor, k: usize, predicates: usize) -> Result<Self> {
        check_layout(map, k, predicates)?;
        Ok(Self::build(map, k, predicates))
    }

    fn build(map: &Tensor, k: usize, predicates: usize) -> Self {
        let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let r = predicates;
        let plane = (h + 1) * (w + 1) * r;
        let row = (w + 1) * r;
        let mut table = vec![0.0f64; (k * k) * plane];
        let data = map.data();
        let mut acc = vec![0.0f64; r];
        for (cell, dst) in table.chunks_mut(plane).enumerate() {
            for y in 0..h {
                acc.fill(0.0);
                let (prev, next) = dst[y * row..(y + 2) * row].split_at_mut(row);
                for x in 0..w {
                    let px = &data[(y * w + x) * c + cell * r..][..r];
                    let o = (x + 1) * r;
                    for i in 0..r {
                        acc[i] += px[i] as f64;
                        next[o + i] = prev[o + i] + acc[i];
                    }
                }
            }
        }
        Self {
            height: h,
            width: w,
            k,
            predicates,
            table,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn predicates(&self) -> usize {
        self.predicates
    }

    /// Adds `scale · Σ_rect map[·, ·, cell·R + r]` into `out[r]`.
    #[inline]
    fn accumulate(&self, rect: &BBox, cell: usize, scale: f64, out: &mut [f64]) {
        self.accumulate_span((rect.y1(), rect.y2()), (rect.x1(), rect.x2()), cell, scale, out);
    }

    #[inline]
    fn accumulate_span(&self, (y1, y2): (i32, i32), (x1, x2): (i32, i32), cell: usize, scale: f64, out: &mut [f64]) {
        let r = self.predicates;
        let row = (self.width + 1) * r;
        let base = cell * (self.height + 1) * row;
        let at = |y: i32, x: i32| base + y as usize * row + x as usize * r;
        let (a, b, d, e) = (at(y2, x2), at(y1, x2), at(y2, x1), at(y1, x1));
        let n = out.len();
        let t = &self.table;
        let (ta, tb, td, te) = (&t[a..a + n], &t[b..b + n], &t[d..d + n], &t[e..e + n]);
        for r in 0..n {
            out[r] += scale * (ta[r] - tb[r] - td[r] + te[r]);
        }
    }

    fn check_box(&self, bbox: &BBox) -> Result<()> {
        if bbox.fits(self.height, self.width) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "box {bbox} lies outside the {}×{} score map",
                self.height, self.width
            )))
        }
    }

    /// Per-cell mean pooled values of a single RoI.
    pub fn single_cells(&self, bbox: &BBox) -> Result<CellGrid> {
        self.check_box(bbox)?;
        let mut pieces = Vec::new();
        single_pieces(self.k, bbox, &mut pieces);
        let mut grid = CellGrid::new(self.k, self.predicates);
        for p in &pieces {
            grid.present[p.cell] = true;
            let r = self.predicates;
            self.accumulate(
                &p.rect,
                p.cell,
                1.0 / p.rect.area() as f64,
                &mut grid.values[p.cell * r..(p.cell + 1) * r],
            );
        }
        Ok(grid)
    }

    /// Single-RoI pooling of `bbox`: one value per predicate.
    pub fn single_pool(&self, bbox: &BBox) -> Result<Vec<f64>> {
        self.check_box(bbox)?;
        let mut out = vec![0.0; self.predicates];
        self.single_pool_into(bbox, &mut Vec::new(), &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`Self::single_pool`] that adds into `out`,
    /// reusing `scratch` for the cell list.
    pub(crate) fn single_pool_into(&self, bbox: &BBox, scratch: &mut Vec<CellPiece>, out: &mut [f64]) {
        single_pieces(self.k, bbox, scratch);
        for p in scratch.iter() {
            self.accumulate(&p.rect, p.cell, p.weight, out);
        }
    }
}

/// Pooled per-cell means of one RoI (or one role of a joint RoI).
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid {
    pub k: usize,
    pub predicates: usize,
    /// `k²·R` means in channel layout; zero for empty cells.
    pub values: Vec<f64>,
    /// Whether each of the `k²` cells held any pixels.
    pub present: Vec<bool>,
}

impl CellGrid {
    fn new(k: usize, predicates: usize) -> Self {
        Self {
            k,
            predicates,
            values: vec![0.0; k * k * predicates],
            present: vec![false; k * k],
        }
    }

    pub fn value(&self, row: usize, col: usize, r: usize) -> f64 {
        self.values[channel_index(self.k, self.predicates, row, col, r)]
    }

    /// Average vote over all `k²` cells.
    pub fn vote(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.predicates];
        for cell in self.values.chunks_exact(self.predicates) {
            for (o, v) in out.iter_mut().zip(cell) {
                *o += v;
            }
        }
        let denom = vote_denominator(self.k);
        out.iter_mut().for_each(|v| *v /= denom);
        out
    }
}

/// One non-empty rectangle that feeds grid cell `cell`, with the weight
/// `1 / (k² · area)` it carries in the pooled output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPiece {
    pub role: Role,
    pub cell: usize,
    pub rect: BBox,
    pub weight: f64,
}

fn spans(lo: i32, hi: i32, k: usize) -> impl Iterator<Item = (usize, i32, i32)> {
    (0..k).map(move |i| {
        let (a, b) = cell_span(lo, hi, k, i);
        (i, a, b)
    })
}

fn single_pieces(k: usize, bbox: &BBox, out: &mut Vec<CellPiece>) {
    out.clear();
    let votes = vote_denominator(k);
    for (row, y1, y2) in spans(bbox.y1(), bbox.y2(), k) {
        if y1 == y2 {
            continue;
        }
        for (col, x1, x2) in spans(bbox.x1(), bbox.x2(), k) {
            if x1 == x2 {
                continue;
            }
            let rect = BBox::new(x1, y1, x2, y2).expect("non-empty cell");
            out.push(CellPiece {
                role: Role::Subject,
                cell: row * k + col,
                weight: 1.0 / (votes * rect.area() as f64),
                rect,
            });
        }
    }
}

/// Pieces of the joint pooling of `(subject, object)`: for every cell of the
/// union box, its non-empty intersections with the subject and object boxes.
pub fn joint_pieces(k: usize, subject: &BBox, object: &BBox, out: &mut Vec<CellPiece>) {
    out.clear();
    let union = union_box(subject, object);
    let votes = vote_denominator(k);
    for (row, y1, y2) in spans(union.y1(), union.y2(), k) {
        if y1 == y2 {
            continue;
        }
        for (col, x1, x2) in spans(union.x1(), union.x2(), k) {
            if x1 == x2 {
                continue;
            }
            let cell = BBox::new(x1, y1, x2, y2).expect("non-empty cell");
            for (role, bbox) in [(Role::Subject, subject), (Role::Object, object)] {
                if let Some(rect) = cell.intersection(bbox) {
                    out.push(CellPiece {
                        role,
                        cell: row * k + col,
                        weight: 1.0 / (votes * rect.area() as f64),
                        rect,
                    });
                }
            }
        }
    }
}

/// Single-RoI pooling of `bbox` over `map` (the role is irrelevant here).
pub fn single_roi_pool(map: &RoleScoreMap, bbox: &BBox) -> Result<Vec<f64>> {
    map.integral().single_pool(bbox)
}

fn check_joint_roles(sub: &RoleScoreMap, obj: &RoleScoreMap) -> Result<()> {
    if sub.role != Role::Subject || obj.role != Role::Object {
        return Err(Error::Usage(format!(
            "joint pooling needs (subject, object) maps, got ({:?}, {:?})",
            sub.role, obj.role
        )));
    }
    if sub.map.shape() != obj.map.shape() || sub.k != obj.k || sub.predicates != obj.predicates {
        return Err(Error::Dimension(
            "subject and object maps must share H, W, k and R".into(),
        ));
    }
    Ok(())
}

/// Joint pooling of the ordered pair `(p_i, p_j)` over the union box.
pub fn joint_pool(
    sub_map: &RoleScoreMap,
    obj_map: &RoleScoreMap,
    p_i: &BBox,
    p_j: &BBox,
) -> Result<Vec<f64>> {
    check_joint_roles(sub_map, obj_map)?;
    joint_pool_prepared(&sub_map.integral(), &obj_map.integral(), p_i, p_j)
}

/// [`joint_pool`] on prebuilt summed-area tables.
pub fn joint_pool_prepared(
    sub: &IntegralMap,
    obj: &IntegralMap,
    p_i: &BBox,
    p_j: &BBox,
) -> Result<Vec<f64>> {
    sub.check_box(p_i)?;
    sub.check_box(p_j)?;
    let mut out = vec![0.0; sub.predicates];
    joint_pool_into(sub, obj, p_i, p_j, &mut PoolScratch::default(), &mut out);
    Ok(out)
}

type Span = Option<(i32, i32)>;

/// Reusable buffers for the pooling loops.
#[derive(Debug, Clone, Default)]
pub struct PoolScratch {
    pieces: Vec<CellPiece>,
    subject: Vec<f64>,
    object: Vec<f64>,
    /// Per union column: the subject and object overlap spans.
    cols: Vec<(Span, Span)>,
    bounds: Vec<i32>,
}

fn overlap(lo: i32, hi: i32, a: i32, b: i32) -> Option<(i32, i32)> {
    let (l, h) = (lo.max(a), hi.min(b));
    (l < h).then_some((l, h))
}

// Subject and object terms are summed separately and added last, so swapping
// the roles of the two maps (and boxes) reproduces the result bit for bit.
// Same cells, weights and summation order as `joint_pieces`.
fn joint_pool_into(
    sub: &IntegralMap,
    obj: &IntegralMap,
    p_i: &BBox,
    p_j: &BBox,
    scratch: &mut PoolScratch,
    out: &mut [f64],
) {
    let PoolScratch {
        subject,
        object,
        cols,
        bounds,
        ..
    } = scratch;
    let k = sub.k;
    let union = union_box(p_i, p_j);
    let votes = vote_denominator(k);
    subject.clear();
    subject.resize(out.len(), 0.0);
    object.clear();
    object.resize(out.len(), 0.0);
    grid_bounds(union.x1(), union.x2(), k, bounds);
    cols.clear();
    cols.extend(bounds.windows(2).map(|w| {
        (overlap(w[0], w[1], p_i.x1(), p_i.x2()), overlap(w[0], w[1], p_j.x1(), p_j.x2()))
    }));
    grid_bounds(union.y1(), union.y2(), k, bounds);
    for row in 0..k {
        let (y1, y2) = (bounds[row], bounds[row + 1]);
        let sy = overlap(y1, y2, p_i.y1(), p_i.y2());
        let oy = overlap(y1, y2, p_j.y1(), p_j.y2());
        if sy.is_none() && oy.is_none() {
            continue;
        }
        for (col, &(sx, ox)) in cols.iter().enumerate() {
            let cell = row * k + col;
            if let (Some(ys), Some(xs)) = (sy, sx) {
                let area = ((ys.1 - ys.0) as i64 * (xs.1 - xs.0) as i64) as f64;
                sub.accumulate_span(ys, xs, cell, 1.0 / (votes * area), subject);
            }
            if let (Some(ys), Some(xs)) = (oy, ox) {
                let area = ((ys.1 - ys.0) as i64 * (xs.1 - xs.0) as i64) as f64;
                obj.accumulate_span(ys, xs, cell, 1.0 / (votes * area), object);
            }
        }
    }
    for ((o, s), b) in out.iter_mut().zip(subject.iter()).zip(object.iter()) {
        *o += s + b;
    }
}

/// Per-cell joint pooling means, split by role.
pub fn joint_cells(
    sub: &IntegralMap,
    obj: &IntegralMap,
    p_i: &BBox,
    p_j: &BBox,
) -> Result<(CellGrid, CellGrid)> {
    sub.check_box(p_i)?;
    sub.check_box(p_j)?;
    let mut pieces = Vec::new();
    joint_pieces(sub.k, p_i, p_j, &mut pieces);
    let r = sub.predicates;
    let mut grids = (CellGrid::new(sub.k, r), CellGrid::new(sub.k, r));
    for p in &pieces {
        let (map, grid) = match p.role {
            Role::Subject => (sub, &mut grids.0),
            Role::Object => (obj, &mut grids.1),
        };
        grid.present[p.cell] = true;
        map.accumulate(
            &p.rect,
            p.cell,
            1.0 / p.rect.area() as f64,
            &mut grid.values[p.cell * r..(p.cell + 1) * r],
        );
    }
    Ok(grids)
}

/// Summed-area tables for the four maps of a bundle.
#[derive(Debug, Clone)]
pub struct PreparedBundle {
    pub single_subject: IntegralMap,
    pub single_object: IntegralMap,
    pub joint_subject: IntegralMap,
    pub joint_object: IntegralMap,
}

impl PreparedBundle {
    pub fn k(&self) -> usize {
        self.single_subject.k
    }

    pub fn predicates(&self) -> usize {
        self.single_subject.predicates
    }

    pub fn check_box(&self, bbox: &BBox) -> Result<()> {
        self.single_subject.check_box(bbox)
    }

    /// Subject and object single-RoI terms for every box (`N×R` each).
    pub fn single_terms(&self, boxes: &[BBox]) -> Result<(Vec<f64>, Vec<f64>)> {
        let r = self.predicates();
        let mut subj = vec![0.0; boxes.len() * r];
        let mut obj = vec![0.0; boxes.len() * r];
        let mut scratch = Vec::new();
        for (i, b) in boxes.iter().enumerate() {
            self.check_box(b)?;
            self.single_subject
                .single_pool_into(b, &mut scratch, &mut subj[i * r..(i + 1) * r]);
            self.single_object
                .single_pool_into(b, &mut scratch, &mut obj[i * r..(i + 1) * r]);
        }
        Ok((subj, obj))
    }

    /// Adds the joint term of `(p_i, p_j)` into `out`. Boxes must already be
    /// validated.
    pub(crate) fn joint_into(&self, p_i: &BBox, p_j: &BBox, scratch: &mut PoolScratch, out: &mut [f64]) {
        joint_pool_into(&self.joint_subject, &self.joint_object, p_i, p_j, scratch, out);
    }

    pub fn pair_score(&self, p_i: &BBox, p_j: &BBox) -> Result<Vec<f64>> {
        self.check_box(p_i)?;
        self.check_box(p_j)?;
        let mut out = vec![0.0; self.predicates()];
        let mut scratch = PoolScratch::default();
        self.single_subject.single_pool_into(p_i, &mut scratch.pieces, &mut out);
        self.single_object.single_pool_into(p_j, &mut scratch.pieces, &mut out);
        self.joint_into(p_i, p_j, &mut scratch, &mut out);
        Ok(out)
    }
}

/// `single(subject map, p_i) + single(object map, p_j) + joint(p_i, p_j)`.
pub fn pair_score(bundle: &ScoreMapBundle, p_i: &BBox, p_j: &BBox) -> Result<Vec<f64>> {
    bundle.prepare().pair_score(p_i, p_j)
}

/// Gradient sink for one score map: constant-valued rectangles are recorded
/// in a 2-D difference array and integrated once in [`Self::finish`].
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    height: usize,
    width: usize,
    k: usize,
    predicates: usize,
    diff: Vec<f64>,
    // Per (corner, cell) coverage counts, so uncovered pixels come out as exact zeros.
    cover: Vec<i32>,
}

impl GradAccumulator {
    pub fn new(height: usize, width: usize, k: usize, predicates: usize) -> Self {
        let corners = (height + 1) * (width + 1);
        Self {
            height,
            width,
            k,
            predicates,
            diff: vec![0.0; corners * k * k * predicates],
            cover: vec![0; corners * k * k],
        }
    }

    pub fn for_map(map: &Tensor, k: usize, predicates: usize) -> Result<Self> {
        let (h, w) = check_layout(map, k, predicates)?;
        Ok(Self::new(h, w, k, predicates))
    }

    /// Adds `values[r]` to channel `cell·R + r` at every pixel of `rect`.
    pub fn add_rect(&mut self, rect: &BBox, cell: usize, values: &[f64]) {
        let r = self.predicates;
        let cells = self.k * self.k;
        let corner = |y: i32, x: i32| y as usize * (self.width + 1) + x as usize;
        for (y, x, sign) in [
            (rect.y1(), rect.x1(), 1.0),
            (rect.y1(), rect.x2(), -1.0),
            (rect.y2(), rect.x1(), -1.0),
            (rect.y2(), rect.x2(), 1.0),
        ] {
            let at = corner(y, x);
            self.cover[at * cells + cell] += sign as i32;
            let base = (at * cells + cell) * r;
            for (d, v) in self.diff[base..base + r].iter_mut().zip(values) {
                *d += sign * v;
            }
        }
    }

    /// Integrates the recorded rectangles into an `H×W×(k²·R)` gradient.
    pub fn finish(mut self) -> Tensor {
        let cells = self.k * self.k;
        let c = cells * self.predicates;
        let (h, w) = (self.height, self.width);
        let stride = w + 1;
        // prefix sums along x, then along y
        for y in 0..=h {
            for x in 1..=w {
                let (prev, cur) = ((y * stride + x - 1), (y * stride + x));
                for ch in 0..c {
                    self.diff[cur * c + ch] += self.diff[prev * c + ch];
                }
                for g in 0..cells {
                    self.cover[cur * cells + g] += self.cover[prev * cells + g];
                }
            }
        }
        for y in 1..=h {
            for x in 0..=w {
                let (prev, cur) = (((y - 1) * stride + x), (y * stride + x));
                for ch in 0..c {
                    self.diff[cur * c + ch] += self.diff[prev * c + ch];
                }
                for g in 0..cells {
                    self.cover[cur * cells + g] += self.cover[prev * cells + g];
                }
            }
        }
        let mut out = vec![0.0f32; h * w * c];
        for y in 0..h {
            for x in 0..w {
                let src = y * stride + x;
                let dst = (y * w + x) * c;
                for g in 0..cells {
                    if self.cover[src * cells + g] == 0 {
                        continue;
                    }
                    for r in 0..self.predicates {
                        let ch = g * self.predicates + r;
                        out[dst + ch] = self.diff[src * c + ch] as f32;
                    }
                }
            }
        }
        Tensor::from_vec(&[h, w, c], out).expect("finite gradient")
    }
}

fn scatter(pieces: &[CellPiece], upstream: &[f64], sub: &mut GradAccumulator, obj: &mut GradAccumulator, buf: &mut Vec<f64>) {
    for p in pieces {
        buf.clear();
        buf.extend(upstream.iter().map(|u| u * p.weight));
        match p.role {
            Role::Subject => sub.add_rect(&p.rect, p.cell, buf),
            Role::Object => obj.add_rect(&p.rect, p.cell, buf),
        }
    }
}

/// Scatters `∂L/∂single(bbox)` into `acc`.
pub fn single_roi_pool_backward(upstream: &[f64], bbox: &BBox, acc: &mut GradAccumulator) {
    let mut pieces = Vec::new();
    single_pieces(acc.k, bbox, &mut pieces);
    let mut buf = Vec::with_capacity(upstream.len());
    for p in &pieces {
        buf.clear();
        buf.extend(upstream.iter().map(|u| u * p.weight));
        acc.add_rect(&p.rect, p.cell, &buf);
    }
}

/// Scatters `∂L/∂joint(p_i, p_j)` into the subject and object accumulators.
/// Cells whose intersection with a box is empty receive nothing.
pub fn joint_pool_backward(
    upstream: &[f64],
    p_i: &BBox,
    p_j: &BBox,
    sub: &mut GradAccumulator,
    obj: &mut GradAccumulator,
) {
    let mut pieces = Vec::new();
    joint_pieces(sub.k, p_i, p_j, &mut pieces);
    scatter(&pieces, upstream, sub, obj, &mut Vec::new());
}

/// Gradient accumulators for the four maps of a bundle.
#[derive(Debug, Clone)]
pub struct BundleGradients {
    pub single_subject: GradAccumulator,
    pub single_object: GradAccumulator,
    pub joint_subject: GradAccumulator,
    pub joint_object: GradAccumulator,
    scratch: Vec<CellPiece>,
    buf: Vec<f64>,
}

impl BundleGradients {
    pub fn new(height: usize, width: usize, k: usize, predicates: usize) -> Self {
        let acc = || GradAccumulator::new(height, width, k, predicates);
        Self {
            single_subject: acc(),
            single_object: acc(),
            joint_subject: acc(),
            joint_object: acc(),
            scratch: Vec::new(),
            buf: Vec::new(),
        }
    }

    pub fn for_bundle(bundle: &ScoreMapBundle) -> Self {
        let s = bundle.single_subject.map.shape();
        Self::new(s[0], s[1], bundle.k(), bundle.predicates())
    }

    /// Scatters `∂L/∂single(subject map, bbox)`.
    pub fn add_single_subject(&mut self, upstream: &[f64], bbox: &BBox) {
        single_roi_pool_backward(upstream, bbox, &mut self.single_subject);
    }

    /// Scatters `∂L/∂single(object map, bbox)`.
    pub fn add_single_object(&mut self, upstream: &[f64], bbox: &BBox) {
        single_roi_pool_backward(upstream, bbox, &mut self.single_object);
    }

    /// Scatters `∂L/∂joint(p_i, p_j)`.
    pub fn add_joint(&mut self, upstream: &[f64], p_i: &BBox, p_j: &BBox) {
        joint_pieces(self.joint_subject.k, p_i, p_j, &mut self.scratch);
        scatter(
            &self.scratch,
            upstream,
            &mut self.joint_subject,
            &mut self.joint_object,
            &mut self.buf,
        );
    }

    /// Scatters `∂L/∂pair_score(p_i, p_j)` into all four maps.
    pub fn add_pair(&mut self, upstream: &[f64], p_i: &BBox, p_j: &BBox) {
        self.add_single_subject(upstream, p_i);
        self.add_single_object(upstream, p_j);
        self.add_joint(upstream, p_i, p_j);
    }

    /// Gradients w.r.t. `[single_subject, single_object, joint_subject, joint_object]`.
    pub fn finish(self) -> [Tensor; 4] {
        [
            self.single_subject.finish(),
            self.single_object.finish(),
            self.joint_subject.finish(),
            self.joint_object.finish(),
        ]
    }
}

/// Gradients of `upstream · pair_score(bundle, p_i, p_j)` with respect to the
/// four maps of the bundle.
pub fn pooling_backward(
    bundle: &ScoreMapBundle,
    p_i: &BBox,
    p_j: &BBox,
    upstream: &[f64],
) -> Result<[Tensor; 4]> {
    let shape = bundle.single_subject.map.shape();
    for b in [p_i, p_j] {
        if !b.fits(shape[0], shape[1]) {
            return Err(Error::Domain(format!("box {b} lies outside the score map")));
        }
    }
    if upstream.len() != bundle.predicates() {
        return Err(Error::Dimension(format!(
            "upstream has {} entries, bundle scores {} predicates",
            upstream.len(),
            bundle.predicates()
        )));
    }
    let mut grads = BundleGradients::for_bundle(bundle);
    grads.add_pair(upstream, p_i, p_j);
    Ok(grads.finish())
}
