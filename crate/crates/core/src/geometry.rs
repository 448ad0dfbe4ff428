//! Integer boxes on the feature map, IoU, union boxes, k×k grid partitions and
//! greedy non-maximum suppression.
//!
//! Boxes are half-open pixel intervals `[x1, x2) × [y1, y2)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i32; 4]", into = "[i32; 4]")]
pub struct BBox {
    x1: i32,
    y1: i32,
    x2: i32,
    y2: i32,
}

impl BBox {
    pub fn new(x1: i32, y1: i32, x2: i32, y2: i32) -> Result<Self> {
        if x1 < 0 || y1 < 0 {
            return Err(Error::Domain(format!(
                "box ({x1},{y1},{x2},{y2}) has negative coordinates"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::Domain(format!(
                "box ({x1},{y1},{x2},{y2}) has no area"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> i32 {
        self.x1
    }
    pub fn y1(&self) -> i32 {
        self.y1
    }
    pub fn x2(&self) -> i32 {
        self.x2
    }
    pub fn y2(&self) -> i32 {
        self.y2
    }

    pub fn width(&self) -> i32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> i64 {
        self.width() as i64 * self.height() as i64
    }

    pub fn contains(&self, x: i32, y: i32) -> bool {
        (self.x1..self.x2).contains(&x) && (self.y1..self.y2).contains(&y)
    }

    /// True when the box lies inside an `height × width` map.
    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x2 as usize <= width && self.y2 as usize <= height
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 < x2 && y1 < y2).then_some(BBox { x1, y1, x2, y2 })
    }

    /// Mirror across the vertical axis of a map of the given width.
    pub fn flip_horizontal(&self, width: i32) -> BBox {
        BBox {
            x1: width - self.x2,
            y1: self.y1,
            x2: width - self.x1,
            y2: self.y2,
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x1, self.y1, self.x2, self.y2)
    }
}

impl TryFrom<[i32; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [i32; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [i32; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Smallest box covering both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Pixel range `[start, end)` of grid slot `index` when `[lo, hi)` is split
/// into `k` slots. A pixel at offset `t` belongs to slot
/// `min(k−1, floor(t·k / len))`; the slot is empty when `start == end`.
pub fn cell_span(lo: i32, hi: i32, k: usize, index: usize) -> (i32, i32) {
    let len = (hi - lo) as i64;
    let k = k as i64;
    let first = |slot: i64| -> i32 {
        if slot >= k {
            hi
        } else {
            // smallest t with floor(t·k/len) >= slot, i.e. ceil(slot·len / k)
            lo + ((slot * len + k - 1) / k) as i32
        }
    };
    (first(index as i64), first(index as i64 + 1))
}

/// The `k + 1` slot boundaries of `[lo, hi)`: slot `i` spans
/// `[out[i], out[i + 1])`, matching [`cell_span`].
pub fn grid_bounds(lo: i32, hi: i32, k: usize, out: &mut Vec<i32>) {
    out.clear();
    let len = (hi - lo) as u64;
    let kk = k as u64;
    out.extend((0..=kk).map(|slot| lo + (slot * len).div_ceil(kk) as i32));
}

/// Grid cell `(row, col)` of `bbox` under a `k×k` split, or `None` when the
/// cell holds no pixels.
pub fn grid_cell(bbox: &BBox, k: usize, row: usize, col: usize) -> Option<BBox> {
    let (x1, x2) = cell_span(bbox.x1, bbox.x2, k, col);
    let (y1, y2) = cell_span(bbox.y1, bbox.y2, k, row);
    (x1 < x2 && y1 < y2).then_some(BBox { x1, y1, x2, y2 })
}

/// Grid cell `(row, col)` that pixel `(x, y)` falls into, or `None` when the
/// pixel lies outside the box.
pub fn grid_assign(bbox: &BBox, k: usize, x: i32, y: i32) -> Option<(usize, usize)> {
    assert!(k >= 1, "grid resolution must be at least 1");
    if !bbox.contains(x, y) {
        return None;
    }
    let slot = |t: i32, len: i32| -> usize {
        let s = (t as i64 * k as i64 / len as i64) as usize;
        s.min(k - 1)
    };
    Some((slot(y - bbox.y1, bbox.height()), slot(x - bbox.x1, bbox.width())))
}

/// Greedy non-maximum suppression. Returns the kept indices in descending
/// score order; equal scores keep the lower index first. A box is suppressed
/// when its IoU with an already kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Dimension(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        if kept
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[idx]) <= iou_threshold)
        {
            kept.push(idx);
        }
    }
    Ok(kept)
}
