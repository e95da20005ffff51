//! Minimum-cost bipartite assignment and the two matching levels built on it:
//! predictions to ground-truth objects, and offsets to ground-truth voxels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::losses::LossWeights;
use crate::objects::{GroundTruthObject, ObjectPrediction};

/// Dense row-major cost matrix with finite entries and `rows <= cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: rows * cols,
                got: values.len(),
            });
        }
        if rows > cols {
            return Err(Error::TooFewColumns { rows, cols });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCost {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Format("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self::new(rows, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Sum of the chosen entries, accumulated in row order.
    pub fn cost_of(&self, row_to_col: &[usize]) -> f64 {
        row_to_col
            .iter()
            .enumerate()
            .map(|(r, c)| self.get(r, *c))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row; all distinct.
    pub row_to_col: Vec<usize>,
    pub total_cost: f64,
}

/// Solves the rectangular assignment problem with the O(n^2 m) shortest
/// augmenting path form of the Hungarian method.
///
/// Rows are inserted in order and columns scanned ascending with strict
/// comparisons, so equal-cost optima resolve toward lower column indices
/// and the result is fully deterministic.
pub fn hungarian_solve(costs: &CostMatrix) -> Assignment {
    let n = costs.rows;
    let m = costs.cols;
    if n == 0 {
        return Assignment {
            row_to_col: Vec::new(),
            total_cost: 0.0,
        };
    }
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut col_owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut min_slack = vec![f64::INFINITY; m + 1];
    let mut used = vec![false; m + 1];

    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        min_slack.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_slack[j] {
                    min_slack[j] = reduced;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if col_owner[j] != 0 {
            row_to_col[col_owner[j] - 1] = j - 1;
        }
    }
    let total_cost = costs.cost_of(&row_to_col);
    Assignment {
        row_to_col,
        total_cost,
    }
}

/// Cost of pairing a prediction with a real ground-truth object.
/// A prediction paired with padding costs 0.
pub fn object_match_cost(pred: &ObjectPrediction, gt: &GroundTruthObject, w: &LossWeights) -> f64 {
    let probs = pred.class_probs();
    let p = probs.get(gt.class_id as usize).copied().unwrap_or(0.0);
    w.lambda1 * -p + w.lambda2 * geom::dist(pred.center, gt.center)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAssignment {
    /// Ground-truth index per prediction; `None` means background.
    pub sigma_det: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl ObjectAssignment {
    /// `(prediction, ground truth)` pairs in prediction order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sigma_det
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| (i, j)))
    }
}

/// Matches predictions to objects; ground truth is padded with no-object
/// columns up to the prediction count.
pub fn match_objects(
    preds: &[ObjectPrediction],
    gts: &[GroundTruthObject],
    w: &LossWeights,
) -> Result<ObjectAssignment> {
    let q = preds.len();
    if q < gts.len() {
        return Err(Error::TooFewPredictions {
            predictions: q,
            targets: gts.len(),
        });
    }
    let costs = CostMatrix::from_fn(q, q, |i, j| match gts.get(j) {
        Some(gt) => object_match_cost(&preds[i], gt, w),
        None => 0.0,
    })?;
    let a = hungarian_solve(&costs);
    let sigma_det = a
        .row_to_col
        .iter()
        .map(|j| (*j < gts.len()).then_some(*j))
        .collect();
    Ok(ObjectAssignment {
        sigma_det,
        total_cost: a.total_cost,
    })
}

/// Cost of assigning one offset's point to a ground-truth voxel center, or
/// to padding when `target` is `None`.
pub fn voxel_match_cost(point: Vec3, score: f64, target: Option<Vec3>) -> f64 {
    match target {
        Some(t) => -score + geom::dist(point, t),
        None => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelAssignment {
    /// Index into the object's voxel list per offset; `None` is padding.
    pub sigma_occ: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl VoxelAssignment {
    pub fn matched_count(&self) -> usize {
        self.sigma_occ.iter().filter(|s| s.is_some()).count()
    }
}

/// Matches all K offsets (regardless of score) to the object's voxel centers
/// padded with empty targets up to K.
pub fn match_voxels(
    pred: &ObjectPrediction,
    gt: &GroundTruthObject,
    anchor: Vec3,
) -> Result<VoxelAssignment> {
    match_voxel_points(&pred.offsets, &pred.scores, anchor, &gt.voxel_centers)
}

pub(crate) fn match_voxel_points(
    offsets: &[Vec3],
    scores: &[f64],
    anchor: Vec3,
    targets: &[Vec3],
) -> Result<VoxelAssignment> {
    let k = offsets.len();
    if k < targets.len() {
        return Err(Error::TooFewOffsets {
            offsets: k,
            voxels: targets.len(),
        });
    }
    let points: Vec<Vec3> = offsets.iter().map(|o| geom::add(anchor, *o)).collect();
    let costs = CostMatrix::from_fn(k, k, |r, c| {
        voxel_match_cost(points[r], scores[r], targets.get(c).copied())
    })?;
    let a = hungarian_solve(&costs);
    let sigma_occ = a
        .row_to_col
        .iter()
        .map(|c| (*c < targets.len()).then_some(*c))
        .collect();
    Ok(VoxelAssignment {
        sigma_occ,
        total_cost: a.total_cost,
    })
}

/// Exhaustive minimum over all injective row-to-column maps. Exponential;
/// meant as a reference for small instances.
pub fn brute_force_assignment(costs: &CostMatrix) -> Assignment {
    fn recurse(
        costs: &CostMatrix,
        row: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<usize>,
        best: &mut Option<Assignment>,
    ) {
        if row == costs.rows() {
            let total = costs.cost_of(current);
            if best.as_ref().is_none_or(|b| total < b.total_cost) {
                *best = Some(Assignment {
                    row_to_col: current.clone(),
                    total_cost: total,
                });
            }
            return;
        }
        for c in 0..costs.cols() {
            if used[c] {
                continue;
            }
            used[c] = true;
            current.push(c);
            recurse(costs, row + 1, used, current, best);
            current.pop();
            used[c] = false;
        }
    }
    let mut best = None;
    recurse(
        costs,
        0,
        &mut vec![false; costs.cols()],
        &mut Vec::with_capacity(costs.rows()),
        &mut best,
    );
    best.unwrap_or(Assignment {
        row_to_col: Vec::new(),
        total_cost: 0.0,
    })
}
