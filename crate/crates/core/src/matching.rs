//! Minimum-cost bipartite matching between query sequences and targets.
//!
//! [`hungarian`] solves the rectangular assignment problem exactly
//! (Kuhn–Munkres with potentials, `O(M²N)`), then refines the solution so
//! that among all cost-minimal assignments the lexicographically smallest
//! one is returned. The two cost builders produce the matrices used during
//! pre-training: online predictions against proposal boxes, and online
//! predictions against the momentum branch's predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_distance_with, BoundingBox, GIOU_WEIGHT};
use crate::model::SequencePrediction;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before `log`.
pub const PROB_EPS: f64 = 1e-8;

/// Dense `queries x targets` cost matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "cost_matrix",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCost {
                row: k / cols.max(1),
                col: k % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("cost matrix rows have unequal lengths"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self::new(rows, cols, data)
    }

    /// Number of queries.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of targets.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, query: usize, target: usize) -> f64 {
        self.data[query * self.cols + target]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Injective map from every target to a distinct query.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment {
    /// `query_for_target[j]` is the query matched to target `j`.
    pub query_for_target: Vec<usize>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.query_for_target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_for_target.is_empty()
    }

    /// `(target, query)` pairs in target order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.query_for_target.iter().copied().enumerate()
    }

    /// Total cost, summed in target order.
    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs().map(|(t, q)| cost.get(q, t)).sum()
    }

    /// Per-query flag: matched to some target.
    pub fn matched_queries(&self, n_queries: usize) -> Vec<bool> {
        let mut out = vec![false; n_queries];
        for &q in &self.query_for_target {
            out[q] = true;
        }
        out
    }

    pub fn is_injective(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.query_for_target.iter().all(|q| seen.insert(*q))
    }
}

/// Which matcher pairs momentum and online sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    #[default]
    Hungarian,
    OneByOne,
}

/// Classification and box weights of the matching cost, plus the GIoU
/// weight inside the box distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub class: f64,
    pub bbox: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            bbox: 5.0,
            giou: GIOU_WEIGHT,
        }
    }
}

/// Solve the potentials formulation for a `targets x queries` matrix
/// (`targets <= queries`). Returns the query for each target.
fn solve_potentials(n_targets: usize, n_queries: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let (n, m) = (n_targets, n_queries);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
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
            for j in 0..=m {
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal completion of targets `first..` given that `taken` queries are used.
fn complete(cost: &CostMatrix, first: usize, taken: &[bool]) -> (Vec<usize>, f64) {
    let free: Vec<usize> = (0..cost.rows()).filter(|&q| !taken[q]).collect();
    let n_t = cost.cols() - first;
    if n_t == 0 {
        return (Vec::new(), 0.0);
    }
    let local = solve_potentials(n_t, free.len(), |t, q| cost.get(free[q], first + t));
    let queries: Vec<usize> = local.iter().map(|&q| free[q]).collect();
    let total = queries
        .iter()
        .enumerate()
        .map(|(t, &q)| cost.get(q, first + t))
        .sum();
    (queries, total)
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

/// Exact minimum-cost assignment of every target to a distinct query.
///
/// Among equal-cost optima the lexicographically smallest
/// `query_for_target` vector is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.rows(), cost.cols());
    if m == 0 {
        return Err(Error::NoTargets);
    }
    if m > n {
        return Err(Error::TooManyTargets {
            targets: m,
            queries: n,
        });
    }
    let (mut best, _) = complete(cost, 0, &vec![false; n]);
    let optimum = Assignment {
        query_for_target: best.clone(),
    }
    .cost(cost);

    // Walk targets in order and pin each to the smallest query that still
    // admits an optimal completion.
    let mut taken = vec![false; n];
    let mut prefix_cost = 0.0;
    for t in 0..m {
        for q in 0..best[t] {
            if taken[q] {
                continue;
            }
            taken[q] = true;
            let (rest, rest_cost) = complete(cost, t + 1, &taken);
            taken[q] = false;
            if near(prefix_cost + cost.get(q, t) + rest_cost, optimum) {
                best.truncate(t);
                best.push(q);
                best.extend(rest);
                break;
            }
        }
        taken[best[t]] = true;
        prefix_cost += cost.get(best[t], t);
    }
    Ok(Assignment {
        query_for_target: best,
    })
}

/// Identity pairing `i -> i`, the ablation baseline for branch matching.
pub fn one_by_one(n: usize) -> Assignment {
    Assignment {
        query_for_target: (0..n).collect(),
    }
}

pub(crate) fn clamped_log(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// Cost of matching online queries (rows) to proposal boxes (columns).
///
/// Every proposal is foreground, so the class term is `-w_c log p_fg`.
pub fn build_rps_cost(
    pred: &SequencePrediction,
    proposals: &[BoundingBox],
    weights: MatchWeights,
) -> Result<CostMatrix> {
    if proposals.is_empty() {
        return Err(Error::NoTargets);
    }
    let n = pred.len();
    if proposals.len() > n {
        return Err(Error::TooManyTargets {
            targets: proposals.len(),
            queries: n,
        });
    }
    CostMatrix::from_fn(n, proposals.len(), |i, j| {
        -weights.class * clamped_log(pred.fg_prob(i))
            + weights.bbox * box_distance_with(pred.boxes[i], proposals[j], weights.giou)
    })
}

/// Cost of matching online queries (rows) to momentum queries (columns).
///
/// A momentum query counts as foreground when its probability is at least
/// 0.5; only foreground targets contribute a box term.
pub fn build_branch_cost(
    online: &SequencePrediction,
    momentum: &SequencePrediction,
    weights: MatchWeights,
) -> Result<CostMatrix> {
    if online.len() != momentum.len() {
        return Err(Error::Shape {
            op: "branch_cost",
            lhs: vec![online.len()],
            rhs: vec![momentum.len()],
        });
    }
    let n = online.len();
    let fg: Vec<bool> = (0..n).map(|j| momentum.fg_prob(j) >= 0.5).collect();
    CostMatrix::from_fn(n, n, |i, j| {
        let p = online.fg_prob(i);
        let class = if fg[j] {
            -clamped_log(p)
        } else {
            -clamped_log(1.0 - p)
        };
        let bbox = if fg[j] {
            box_distance_with(momentum.boxes[j], online.boxes[i], weights.giou)
        } else {
            0.0
        };
        weights.class * class + weights.bbox * bbox
    })
}
