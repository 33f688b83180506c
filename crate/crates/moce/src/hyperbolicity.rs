//! Gromov δ-hyperbolicity estimation.
//!
//! The four-point condition bounds how far a metric space deviates from a
//! tree: `(x,z)_w >= min{(x,y)_w, (y,z)_w} - delta` for all quadruples, where
//! `(y,z)_x = (d(x,y) + d(x,z) - d(y,z)) / 2` is the Gromov product. Trees
//! satisfy it with `delta = 0`. For cross-dataset comparability the estimate
//! is diameter-normalized: `delta_rel = 2 delta / diam` in `[0, 1]` — lower
//! means more tree-like.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Exact enumeration is O(n^4); beyond this size use [`delta_rel_sampled`].
pub const EXACT_MAX_POINTS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Precomputed,
}

/// A finite metric space: either points with the Euclidean metric or a
/// precomputed distance matrix.
#[derive(Debug, Clone)]
pub struct MetricCloud {
    source: Source,
}

#[derive(Debug, Clone)]
enum Source {
    Euclidean(Vec<Vec<f64>>),
    Precomputed(Vec<Vec<f64>>),
}

impl MetricCloud {
    pub fn euclidean(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("MetricCloud"));
        }
        let d = points[0].len();
        for row in &points {
            if row.len() != d {
                return Err(Error::dim("MetricCloud rows", d, row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("MetricCloud point"));
            }
        }
        Ok(MetricCloud {
            source: Source::Euclidean(points),
        })
    }

    /// Validates symmetry, zero diagonal, and non-negativity.
    pub fn precomputed(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let n = matrix.len();
        for (i, row) in matrix.iter().enumerate() {
            if row.len() != n {
                return Err(Error::dim("distance matrix", n, row.len()));
            }
            if matrix[i][i] != 0.0 {
                return Err(Error::Data(format!("distance matrix diagonal [{i}] != 0")));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Data(format!("invalid distance at [{i}][{j}]: {v}")));
                }
                let vt = matrix[j][i];
                if (v - vt).abs() > 1e-9 * v.abs().max(vt.abs()).max(1.0) {
                    return Err(Error::Data(format!(
                        "distance matrix not symmetric at [{i}][{j}]"
                    )));
                }
            }
        }
        Ok(MetricCloud {
            source: Source::Precomputed(matrix),
        })
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Euclidean(p) => p.len(),
            Source::Precomputed(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn metric(&self) -> Metric {
        match &self.source {
            Source::Euclidean(_) => Metric::Euclidean,
            Source::Precomputed(_) => Metric::Precomputed,
        }
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        match &self.source {
            Source::Euclidean(p) => p[i]
                .iter()
                .zip(&p[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            Source::Precomputed(m) => m[i][j],
        }
    }

    /// Dense distance matrix over a subset of indices.
    fn submatrix(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter()
            .map(|&i| idx.iter().map(|&j| self.distance(i, j)).collect())
            .collect()
    }
}

/// Gromov product `(x, y)_w = (d(w,x) + d(w,y) - d(x,y)) / 2`.
pub fn gromov_product(cloud: &MetricCloud, x: usize, y: usize, basepoint: usize) -> f64 {
    0.5 * (cloud.distance(basepoint, x) + cloud.distance(basepoint, y) - cloud.distance(x, y))
}

fn delta_from_matrix(d: &[Vec<f64>]) -> f64 {
    let n = d.len();
    let mut delta: f64 = 0.0;
    let mut products = vec![vec![0.0; n]; n];
    for w in 0..n {
        let dw = &d[w];
        for x in 0..n {
            let row = &mut products[x];
            let dx = &d[x];
            for y in 0..n {
                row[y] = 0.5 * (dw[x] + dw[y] - dx[y]);
            }
        }
        // Largest violation of (x,z)_w >= min{(x,y)_w, (y,z)_w} over triples,
        // via the max-min product of the Gromov matrix with itself.
        for x in 0..n {
            let ax = &products[x];
            for z in 0..n {
                let axz = ax[z];
                let mut best = f64::NEG_INFINITY;
                for (y, py) in products.iter().enumerate() {
                    best = best.max(ax[y].min(py[z]));
                }
                delta = delta.max(best - axz);
            }
        }
    }
    delta.max(0.0)
}

/// Exact δ over all basepoints and triples, floored at 0. Limited to
/// [`EXACT_MAX_POINTS`] points.
pub fn delta_exact(cloud: &MetricCloud) -> Result<f64> {
    let n = cloud.len();
    if n < 4 {
        return Err(Error::dim("delta_exact", 4, n));
    }
    if n > EXACT_MAX_POINTS {
        return Err(Error::Parameter(format!(
            "delta_exact is limited to {EXACT_MAX_POINTS} points (got {n}); \
             use delta_rel_sampled for larger clouds"
        )));
    }
    let all: Vec<usize> = (0..n).collect();
    Ok(delta_from_matrix(&cloud.submatrix(&all)))
}

/// One sampled batch: raw δ, diameter, and normalized `2δ/diam`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchDelta {
    pub delta: f64,
    pub diameter: f64,
    pub delta_rel: f64,
}

/// Diameter-normalized δ-hyperbolicity report over sampled batches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaReport {
    /// Mean raw δ across batches.
    pub delta: f64,
    /// Mean batch diameter.
    pub diameter: f64,
    /// Mean `delta_rel` across batches (equals `mean` below).
    pub delta_rel: f64,
    pub batches: usize,
    pub batch_size: usize,
    /// Mean of per-batch `delta_rel`.
    pub mean: f64,
    /// Sample standard deviation of per-batch `delta_rel` (0 for one batch).
    pub std: f64,
    /// What the spread is measured across.
    pub spread: String,
    pub seed: u64,
    pub per_batch: Vec<BatchDelta>,
}

/// Estimate `delta_rel` by sampling `n_batches` batches of `batch_size`
/// points without replacement (all points when the cloud is smaller, in
/// which case a single deterministic batch is evaluated).
pub fn delta_rel_sampled(
    cloud: &MetricCloud,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<DeltaReport> {
    if batch_size < 4 {
        return Err(Error::Parameter(format!(
            "batch_size must be >= 4, got {batch_size}"
        )));
    }
    if n_batches < 1 {
        return Err(Error::Parameter("n_batches must be >= 1".into()));
    }
    let n = cloud.len();
    if n < 4 {
        return Err(Error::dim("delta_rel_sampled", 4, n));
    }
    let effective = batch_size.min(n);
    let batches = if n <= batch_size { 1 } else { n_batches };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_batch = Vec::with_capacity(batches);
    for _ in 0..batches {
        let idx: Vec<usize> = if n <= batch_size {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(effective);
            all
        };
        let d = cloud.submatrix(&idx);
        let delta = delta_from_matrix(&d);
        let diameter = d
            .iter()
            .flat_map(|row| row.iter().copied())
            .fold(0.0f64, f64::max);
        if diameter <= 0.0 {
            return Err(Error::Data(
                "degenerate batch: diameter is zero (all points coincide)".into(),
            ));
        }
        per_batch.push(BatchDelta {
            delta,
            diameter,
            delta_rel: 2.0 * delta / diameter,
        });
    }

    let m = per_batch.len() as f64;
    let mean = per_batch.iter().map(|b| b.delta_rel).sum::<f64>() / m;
    let std = if per_batch.len() < 2 {
        0.0
    } else {
        let ss = per_batch
            .iter()
            .map(|b| (b.delta_rel - mean) * (b.delta_rel - mean))
            .sum::<f64>();
        (ss / (m - 1.0)).sqrt()
    };
    Ok(DeltaReport {
        delta: per_batch.iter().map(|b| b.delta).sum::<f64>() / m,
        diameter: per_batch.iter().map(|b| b.diameter).sum::<f64>() / m,
        delta_rel: mean,
        batches: per_batch.len(),
        batch_size: effective,
        mean,
        std,
        spread: "std across sampled batches".into(),
        seed,
        per_batch,
    })
}
