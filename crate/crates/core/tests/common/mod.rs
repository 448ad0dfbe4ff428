//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod checks;

use pprfcn::numerics::Tensor;

/// Grid slot of offset `t` in a span of `len` pixels split `k` ways.
fn slot(t: i32, len: i32, k: usize) -> usize {
    ((t as i64 * k as i64) / len as i64).min(k as i64 - 1) as usize
}

/// Pixel-loop single-RoI pooling of box `[x1, y1, x2, y2]`.
pub fn single_pool(map: &Tensor, k: usize, r_count: usize, bx: [i32; 4]) -> Vec<f64> {
    let [x1, y1, x2, y2] = bx;
    let mut sums = vec![0.0f64; k * k * r_count];
    let mut counts = vec![0usize; k * k];
    for y in y1..y2 {
        for x in x1..x2 {
            let g = slot(y - y1, y2 - y1, k) * k + slot(x - x1, x2 - x1, k);
            counts[g] += 1;
            for r in 0..r_count {
                sums[g * r_count + r] += map.at3(y as usize, x as usize, g * r_count + r) as f64;
            }
        }
    }
    vote(&sums, &counts, k, r_count)
}

fn vote(sums: &[f64], counts: &[usize], k: usize, r_count: usize) -> Vec<f64> {
    let mut out = vec![0.0; r_count];
    for g in 0..k * k {
        if counts[g] > 0 {
            for r in 0..r_count {
                out[r] += sums[g * r_count + r] / counts[g] as f64;
            }
        }
    }
    out.iter().map(|v| v / (k * k) as f64).collect()
}

fn inside(bx: [i32; 4], x: i32, y: i32) -> bool {
    x >= bx[0] && x < bx[2] && y >= bx[1] && y < bx[3]
}

/// Pixel-loop joint pooling: walks every pixel of the union box.
pub fn joint_pool(sub: &Tensor, obj: &Tensor, k: usize, r_count: usize, pi: [i32; 4], pj: [i32; 4]) -> Vec<f64> {
    let u = [pi[0].min(pj[0]), pi[1].min(pj[1]), pi[2].max(pj[2]), pi[3].max(pj[3])];
    let mut s_sums = vec![0.0f64; k * k * r_count];
    let mut o_sums = vec![0.0f64; k * k * r_count];
    let mut s_counts = vec![0usize; k * k];
    let mut o_counts = vec![0usize; k * k];
    for y in u[1]..u[3] {
        for x in u[0]..u[2] {
            let g = slot(y - u[1], u[3] - u[1], k) * k + slot(x - u[0], u[2] - u[0], k);
            if inside(pi, x, y) {
                s_counts[g] += 1;
                for r in 0..r_count {
                    s_sums[g * r_count + r] += sub.at3(y as usize, x as usize, g * r_count + r) as f64;
                }
            }
            if inside(pj, x, y) {
                o_counts[g] += 1;
                for r in 0..r_count {
                    o_sums[g * r_count + r] += obj.at3(y as usize, x as usize, g * r_count + r) as f64;
                }
            }
        }
    }
    let a = vote(&s_sums, &s_counts, k, r_count);
    let b = vote(&o_sums, &o_counts, k, r_count);
    a.iter().zip(&b).map(|(x, y)| x + y).collect()
}
