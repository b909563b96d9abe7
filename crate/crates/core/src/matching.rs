//! Exact rectangular assignment and the two matching costs: teacher proposals
//! against student predictions, and sampled region boxes against student
//! boxes.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::detector::ProposalSet;
use crate::error::{Error, Result};
use crate::geometry::{giou_loss, l1_coord_loss, BoxSet};

/// Dense row-major cost matrix. Rows are sources, columns targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} cost matrix given {} entries", entries.len())));
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("cost matrix entry {bad} is not finite")));
        }
        Ok(CostMatrix { rows, cols, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn transpose(&self) -> CostMatrix {
        let mut entries = vec![0.0; self.entries.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                entries[c * self.rows + r] = self.get(r, c);
            }
        }
        CostMatrix { rows: self.cols, cols: self.rows, entries }
    }
}

/// Injective source→target assignment, sorted by source index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl MatchAssignment {
    /// Target of `source`, if matched.
    pub fn target(&self, source: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == source).map(|p| p.1)
    }

    /// Dense source→target map for a full assignment over `n` sources.
    pub fn as_permutation(&self, n: usize) -> Result<Vec<usize>> {
        let mut out = vec![usize::MAX; n];
        for &(s, t) in &self.pairs {
            if s >= n {
                return Err(Error::Contract(format!("source {s} out of range {n}")));
            }
            out[s] = t;
        }
        if out.contains(&usize::MAX) {
            return Err(Error::Contract(format!("assignment covers {} of {n} sources", self.pairs.len())));
        }
        Ok(out)
    }
}

/// Minimum-cost assignment covering `min(rows, cols)` pairs.
///
/// Shortest augmenting paths with row/column potentials, O(rows² · cols).
/// When there are more rows than columns the matrix is solved transposed.
pub fn hungarian(c: &CostMatrix) -> MatchAssignment {
    if c.rows == 0 || c.cols == 0 {
        return MatchAssignment { pairs: Vec::new(), total_cost: 0.0 };
    }
    if c.rows > c.cols {
        let t = hungarian(&c.transpose());
        let mut pairs: Vec<(usize, usize)> = t.pairs.into_iter().map(|(a, b)| (b, a)).collect();
        pairs.sort_unstable();
        return MatchAssignment { pairs, total_cost: t.total_cost };
    }

    let (n, m) = (c.rows, c.cols);
    // 1-based internals; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&j| row_of[j] != 0).map(|j| (row_of[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, col)| c.get(r, col)).sum();
    MatchAssignment { pairs, total_cost }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Teacher (rows) against student (columns):
/// `-λ_sim·cos(z, ẑ) + λ_coord·L1(b, b̂) + λ_giou·(1 - GIoU(b, b̂))`.
pub fn proposal_cost(teacher: &ProposalSet, student: &ProposalSet, cfg: &RunConfig) -> Result<CostMatrix> {
    let n = teacher.len();
    if student.len() != n {
        return Err(Error::Contract(format!(
            "proposal matching needs equal sizes, teacher has {n}, student {}",
            student.len()
        )));
    }
    let mut entries = Vec::with_capacity(n * n);
    for j in 0..n {
        let (tz, tb) = (teacher.embeddings.row(j), &teacher.boxes.boxes[j]);
        for s in 0..n {
            let (sz, sb) = (student.embeddings.row(s), &student.boxes.boxes[s]);
            entries.push(
                -cfg.lambda_sim * cosine(tz, sz)
                    + cfg.lambda_coord * l1_coord_loss(tb, sb)
                    + cfg.lambda_giou * giou_loss(tb, sb),
            );
        }
    }
    CostMatrix::new(n, n, entries)
}

/// Sampled region boxes (rows) against student boxes (columns):
/// `λ_coord·L1 + λ_giou·(1 - GIoU)`. Needs `K ≤ N`.
pub fn box_cost(ss: &BoxSet, student: &ProposalSet, cfg: &RunConfig) -> Result<CostMatrix> {
    let (k, n) = (ss.len(), student.len());
    if k > n {
        return Err(Error::Contract(format!(
            "box matching has {k} sampled boxes but only {n} predictions"
        )));
    }
    let mut entries = Vec::with_capacity(k * n);
    for a in &ss.boxes {
        for b in &student.boxes.boxes {
            entries.push(cfg.lambda_coord * l1_coord_loss(a, b) + cfg.lambda_giou * giou_loss(a, b));
        }
    }
    CostMatrix::new(k, n, entries)
}
