//! Score-map dumps: one 8-bit PGM and one CSV per channel, plus the pooled
//! per-cell values of a region pair.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::Tensor;
use crate::pooling::{joint_cells, CellGrid, RoleScoreMap, ScoreMapBundle};

pub const STACK_NAMES: [&str; 4] = ["single_subject", "single_object", "joint_subject", "joint_object"];

/// Binary PGM of channel `ch`, min-max scaled to `0..=255`.
pub fn channel_pgm(map: &Tensor, ch: usize) -> Result<Vec<u8>> {
    let (h, w, c) = map.dims3()?;
    if ch >= c {
        return Err(Error::Domain(format!("channel {ch} of {c}")));
    }
    let values: Vec<f32> = map.data().iter().skip(ch).step_by(c).copied().collect();
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Raw values of channel `ch` as CSV, one map row per line.
pub fn channel_csv(map: &Tensor, ch: usize) -> Result<String> {
    let (h, w, c) = map.dims3()?;
    let mut out = String::new();
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| map.at3(y, x, ch).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    debug_assert!(ch < c);
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<stack>/r<row>_c<col>_p<predicate>.{pgm,csv}` for every
/// channel of the four stacks. Returns the number of PGM files.
pub fn dump_bundle(bundle: &ScoreMapBundle, dir: &Path) -> Result<usize> {
    let (k, r) = (bundle.k(), bundle.predicates());
    let mut count = 0;
    for (name, map) in STACK_NAMES.iter().zip(bundle.maps()) {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for row in 0..k {
            for col in 0..k {
                for p in 0..r {
                    let ch = (row * k + col) * r + p;
                    let stem = format!("r{row}_c{col}_p{p}");
                    write(&sub.join(format!("{stem}.pgm")), &channel_pgm(map.map(), ch)?)?;
                    write(&sub.join(format!("{stem}.csv")), channel_csv(map.map(), ch)?.as_bytes())?;
                    count += 1;
                }
            }
        }
    }
    Ok(count)
}

/// One pooled cell value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PooledCell {
    /// `single` or `joint`.
    pub term: &'static str,
    pub row: usize,
    pub col: usize,
    pub predicate: usize,
    pub value: f64,
    /// Whether the cell held pixels of the role's box.
    pub present: bool,
}

fn cells(term: &'static str, grid: &CellGrid) -> Vec<PooledCell> {
    let k = grid.k;
    let mut out = Vec::new();
    for row in 0..k {
        for col in 0..k {
            for p in 0..grid.predicates {
                out.push(PooledCell {
                    term,
                    row,
                    col,
                    predicate: p,
                    value: grid.value(row, col, p),
                    present: grid.present[row * k + col],
                });
            }
        }
    }
    out
}

/// Per-cell pooled values of `(p_i, p_j)`, keyed by role: the subject rows
/// hold the single-RoI cells of `p_i` and its share of the joint cells; the
/// object rows likewise for `p_j`.
pub fn pooled_cells(bundle: &ScoreMapBundle, p_i: &BBox, p_j: &BBox) -> Result<[Vec<PooledCell>; 2]> {
    let single = |m: &RoleScoreMap, b: &BBox| m.integral().single_cells(b);
    let (js, jo) = joint_cells(
        &bundle.joint_subject.integral(),
        &bundle.joint_object.integral(),
        p_i,
        p_j,
    )?;
    let mut subject = cells("single", &single(&bundle.single_subject, p_i)?);
    subject.extend(cells("joint", &js));
    let mut object = cells("single", &single(&bundle.single_object, p_j)?);
    object.extend(cells("joint", &jo));
    Ok([subject, object])
}

/// Writes `pooled_subject.csv` and `pooled_object.csv`.
pub fn dump_pooled(bundle: &ScoreMapBundle, p_i: &BBox, p_j: &BBox, dir: &Path) -> Result<()> {
    let [s, o] = pooled_cells(bundle, p_i, p_j)?;
    for (name, rows) in [("pooled_subject.csv", s), ("pooled_object.csv", o)] {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        for row in rows {
            w.serialize(row).map_err(|e| Error::format(&path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// `(term, row, col, predicate, value)` as read back from a pooled CSV.
pub type PooledRow = (String, usize, usize, usize, f64);

pub fn read_pooled(path: &Path) -> Result<Vec<PooledRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or_default().to_string();
        let num = |i: usize| -> Result<usize> {
            field(i).parse().map_err(|_| Error::format(path, format!("bad integer in column {i}")))
        };
        let value: f64 = field(4)
            .parse()
            .map_err(|_| Error::format(path, "bad value column"))?;
        out.push((field(0), num(1)?, num(2)?, num(3)?, value));
    }
    Ok(out)
}
