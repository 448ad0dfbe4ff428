//! Pair scoring cost: shared score maps with pairwise pooling versus a
//! per-pair fully connected scorer.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::{gemm, Matrix, Tensor};
use crate::pooling::IntegralMap;
use crate::wspp::{enumerate_pairs, WsppHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_proposals: usize,
    pub predicates: usize,
    pub classes: usize,
    pub dim: usize,
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_proposals: 100,
            predicates: 4,
            classes: 5,
            dim: 16,
            k: 3,
            height: 48,
            width: 48,
            hidden: 256,
            repeats: 5,
            seed: 7,
        }
    }
}

/// Per-pair MLP: concatenated subject and object RoI features → hidden → R.
#[derive(Debug, Clone)]
pub struct FcPairScorer {
    pub dim: usize,
    pub hidden: usize,
    pub outputs: usize,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

impl FcPairScorer {
    pub fn new(dim: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let mut init = |n: usize, fan_in: usize| -> Vec<f32> {
            let s = (2.0 / fan_in as f32).sqrt();
            (0..n).map(|_| { let z: f32 = StandardNormal.sample(rng); s * z }).collect()
        };
        Self {
            dim,
            hidden,
            outputs,
            w1: init(2 * dim * hidden, 2 * dim),
            b1: vec![0.0; hidden],
            w2: init(hidden * outputs, hidden),
            b2: vec![0.0; outputs],
        }
    }

    /// Scores every pair from mean-pooled RoI features.
    pub fn score(&self, features: &Tensor, boxes: &[BBox], pairs: &[(usize, usize)]) -> Result<Matrix> {
        let d = self.dim;
        let pooled = IntegralMap::new(features, 1, d)?;
        let roi: Vec<f32> = boxes
            .iter()
            .map(|b| pooled.single_pool(b))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .map(|v| v as f32)
            .collect();
        let p = pairs.len();
        let mut input = vec![0.0f32; p * 2 * d];
        for (row, &(i, j)) in input.chunks_mut(2 * d).zip(pairs) {
            row[..d].copy_from_slice(&roi[i * d..(i + 1) * d]);
            row[d..].copy_from_slice(&roi[j * d..(j + 1) * d]);
        }
        let mut hidden: Vec<f32> = self.b1.iter().copied().cycle().take(p * self.hidden).collect();
        gemm(&input, &self.w1, &mut hidden, p, 2 * d, self.hidden, 1.0);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out: Vec<f32> = self.b2.iter().copied().cycle().take(p * self.outputs).collect();
        gemm(&hidden, &self.w2, &mut out, p, self.hidden, self.outputs, 1.0);
        Ok(Matrix::from_vec(p, self.outputs, out.into_iter().map(f64::from).collect()))
    }
}

/// Random features and proposals matching `config`.
pub fn bench_inputs(config: &BenchConfig) -> Result<(Tensor, Vec<BBox>)> {
    if config.n_proposals < 2 {
        return Err(Error::Config("bench needs at least two proposals".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (h, w, d) = (config.height, config.width, config.dim);
    let data: Vec<f32> = (0..h * w * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let features = Tensor::from_vec(&[h, w, d], data)?;
    let boxes = (0..config.n_proposals)
        .map(|_| {
            let bw = rng.random_range(2..=w as i32 / 2);
            let bh = rng.random_range(2..=h as i32 / 2);
            let x = rng.random_range(0..=w as i32 - bw);
            let y = rng.random_range(0..=h as i32 - bh);
            BBox::new(x, y, x + bw, y + bh)
        })
        .collect::<Result<_>>()?;
    Ok((features, boxes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub n_proposals: usize,
    pub pairs: usize,
    pub predicates: usize,
    pub fc_hidden: usize,
    pub repeats: usize,
    pub threads: usize,
    pub shared_ms: f64,
    pub fc_ms: f64,
    /// `fc_ms / shared_ms`.
    pub speedup: f64,
}

/// Outputs of one repeat, for determinism checks.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutputs {
    pub shared: Matrix,
    pub fc: Matrix,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times both scorers over all ordered pairs of `n_proposals` boxes.
///
/// The shared path runs one branch of score maps (four role maps from the
/// 1×1 filters) and pools every pair; the baseline pools each RoI once and
/// runs the MLP on every concatenated pair.
pub fn run_bench(config: &BenchConfig) -> Result<(BenchReport, BenchOutputs)> {
    if config.repeats == 0 {
        return Err(Error::Config("bench needs at least one repeat".into()));
    }
    let (features, boxes) = bench_inputs(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);
    let head = WsppHead::new(config.dim, config.predicates, config.k, 0.1, &mut rng);
    let fc = FcPairScorer::new(config.dim, config.hidden, config.predicates, &mut rng);
    let pairs = enumerate_pairs(boxes.len());

    let mut shared_t = Vec::new();
    let mut fc_t = Vec::new();
    let mut outputs = None;
    for _ in 0..config.repeats {
        let t = Instant::now();
        let bundle = head.branch_bundle(&features, crate::wspp::Branch::Cls)?.prepare();
        let shared = crate::wspp::raw_pair_scores(&bundle, &boxes, &pairs)?;
        shared_t.push(t.elapsed().as_secs_f64() * 1e3);

        let t = Instant::now();
        let base = fc.score(&features, &boxes, &pairs)?;
        fc_t.push(t.elapsed().as_secs_f64() * 1e3);
        outputs.get_or_insert(BenchOutputs { shared, fc: base });
    }
    let (shared_ms, fc_ms) = (median(shared_t), median(fc_t));
    Ok((
        BenchReport {
            n_proposals: config.n_proposals,
            pairs: pairs.len(),
            predicates: config.predicates,
            fc_hidden: config.hidden,
            repeats: config.repeats,
            threads: rayon::current_num_threads(),
            shared_ms,
            fc_ms,
            speedup: fc_ms / shared_ms,
        },
        outputs.expect("at least one repeat"),
    ))
}
