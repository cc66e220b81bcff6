//! Optimal one-to-one assignment between predicted queries and ground-truth
//! segments.
//!
//! [`hungarian`] solves the rectangular assignment problem exactly with the
//! O(n³) potential-based Kuhn–Munkres method, then resolves ties so that the
//! returned pair list is the lexicographically smallest among all optima.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if rows * cols != costs.len() {
            return Err(Error::Shape(format!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                costs.len()
            )));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        Ok(Self { rows, cols, costs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [r, c] => Self::new(*r, *c, t.data().to_vec()),
            s => Err(Error::Shape(format!("cost matrix must be 2-D, got {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.costs[r * self.cols + c]
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(query, target)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Target matched to `query`, if any.
    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(q, _)| *q == query)
            .map(|&(_, t)| t)
    }
}

/// Dense square assignment by shortest augmenting paths with potentials.
/// Returns the column assigned to each row.
fn solve_square(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Square view of a cost matrix, padding missing rows/columns with
/// `max_entry + 1`.
struct Padded<'a> {
    m: &'a CostMatrix,
    n: usize,
    pad: f64,
}

impl Padded<'_> {
    fn at(&self, r: usize, c: usize) -> f64 {
        if r < self.m.rows && c < self.m.cols {
            self.m.get(r, c)
        } else {
            self.pad
        }
    }

    /// Minimum cost over the sub-problem restricted to `rows × cols`, along
    /// with the optimal column for each listed row.
    fn solve(&self, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
        let k = rows.len();
        let picks = solve_square(k, |i, j| self.at(rows[i], cols[j]));
        let total = picks
            .iter()
            .enumerate()
            .map(|(i, &j)| self.at(rows[i], cols[j]))
            .sum();
        (total, picks.into_iter().map(|j| cols[j]).collect())
    }
}

/// Minimum-cost one-to-one assignment. Rectangular inputs match
/// `min(rows, cols)` pairs.
pub fn hungarian(c: &CostMatrix) -> Result<Assignment> {
    if c.rows == 0 || c.cols == 0 {
        return Err(Error::invalid("empty cost matrix"));
    }
    let n = c.rows.max(c.cols);
    let max_entry = c.costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_abs = c.costs.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let padded = Padded {
        m: c,
        n,
        pad: max_entry + 1.0,
    };
    let tol = 1e-10 * n as f64 * max_abs;

    let all: Vec<usize> = (0..padded.n).collect();
    let (optimum, mut current) = padded.solve(&all, &all);

    // Fix rows in order, each to the smallest column that still admits an
    // optimal completion.
    let mut fixed_cost = 0.0;
    let mut free_cols = all.clone();
    let mut chosen = Vec::with_capacity(n);
    for row in 0..n {
        let rest_rows: Vec<usize> = (row + 1..n).collect();
        let mut pick = current[0];
        for &col in free_cols.iter().filter(|&&col| col < current[0]) {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&j| j != col).collect();
            let (rest, rest_pick) = padded.solve(&rest_rows, &rest_cols);
            if (fixed_cost + padded.at(row, col) + rest - optimum).abs() <= tol {
                pick = col;
                current = std::iter::once(col).chain(rest_pick).collect();
                break;
            }
        }
        fixed_cost += padded.at(row, pick);
        free_cols.retain(|&j| j != pick);
        chosen.push(pick);
        current.remove(0);
    }

    let pairs: Vec<(usize, usize)> = chosen
        .into_iter()
        .enumerate()
        .filter(|&(r, col)| r < c.rows && col < c.cols)
        .collect();
    let total_cost = pairs.iter().map(|&(r, col)| c.get(r, col)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// A ground-truth segment: its class and a soft region map with values in
/// `[0, 1]` on the same grid as the query masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSegment {
    pub class_id: usize,
    pub region: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchWeights {
    pub class: f64,
    pub dice: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            dice: 1.0,
        }
    }
}

/// Soft Dice coefficient; two empty maps count as a perfect match.
pub fn dice(a: &[f64], b: &[f64]) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let denom: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>();
    if denom == 0.0 {
        1.0
    } else {
        2.0 * inter / denom
    }
}

/// `cost(q, t) = −w_class·p_q(class_t) + w_dice·(1 − Dice(m_q, r_t))`.
///
/// `query_probs` is `(N, K)` with simplex rows; `query_masks` is `(N, h, w)`
/// holding per-pixel foreground probabilities.
pub fn matching_cost(
    query_probs: &Tensor,
    query_masks: &Tensor,
    segments: &[GtSegment],
    weights: MatchWeights,
) -> Result<CostMatrix> {
    let [n, k] = *query_probs.shape() else {
        return Err(Error::Shape("query_probs must be (N, K)".into()));
    };
    let [nm, h, w] = *query_masks.shape() else {
        return Err(Error::Shape("query_masks must be (N, h, w)".into()));
    };
    if nm != n {
        return Err(Error::Shape(format!(
            "{n} query distributions but {nm} query masks"
        )));
    }
    for (q, row) in query_probs.data().chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "query {q} probabilities are not a simplex point"
            )));
        }
    }
    for (t, seg) in segments.iter().enumerate() {
        if seg.region.shape() != [h, w] {
            return Err(Error::Shape(format!(
                "segment {t} region {:?} vs mask grid {h}x{w}",
                seg.region.shape()
            )));
        }
        if seg.class_id >= k {
            return Err(Error::invalid(format!(
                "segment {t} class {} outside {k} query classes",
                seg.class_id
            )));
        }
    }
    let plane = h * w;
    let mut costs = Vec::with_capacity(n * segments.len());
    for q in 0..n {
        let probs = &query_probs.data()[q * k..(q + 1) * k];
        let mask = &query_masks.data()[q * plane..(q + 1) * plane];
        for seg in segments {
            costs.push(
                -weights.class * probs[seg.class_id]
                    + weights.dice * (1.0 - dice(mask, seg.region.data())),
            );
        }
    }
    CostMatrix::new(n, segments.len(), costs)
}
