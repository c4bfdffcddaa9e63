//! Optimal one-to-one assignment (Kuhn–Munkres with potentials).

use crate::boxes::{ActorBox, ActorClass};
use crate::geometry::{self, Vec3};

/// Minimum-cost assignment for a row-major `rows × cols` cost matrix.
/// Returns the column matched to each row; when `rows > cols` some rows stay
/// unmatched.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    assert_eq!(cost.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let t: Vec<f64> = (0..cols * rows).map(|k| cost[(k % rows) * cols + k / rows]).collect();
        let col_to_row = hungarian(&t, cols, rows);
        let mut out = vec![None; rows];
        for (c, r) in col_to_row.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    let (n, m) = (rows, cols);
    let a = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[f64], cols: usize, assign: &[Option<usize>]) -> f64 {
    assign.iter().enumerate().filter_map(|(i, c)| c.map(|c| cost[i * cols + c])).sum()
}

/// Pairwise detection-to-truth cost: center distance plus `class_penalty`
/// when the predicted class differs.
pub fn match_cost(centers: &[Vec3], classes: &[Option<ActorClass>], gt: &[ActorBox], class_penalty: f64) -> Vec<f64> {
    let mut cost = Vec::with_capacity(centers.len() * gt.len());
    for (c, cls) in centers.iter().zip(classes) {
        for g in gt {
            let pen = if *cls == Some(g.class) { 0.0 } else { class_penalty };
            cost.push(geometry::dist(*c, g.center) + pen);
        }
    }
    cost
}

/// Ground-truth index assigned to each detection; `None` means background.
pub fn match_detections(
    centers: &[Vec3],
    classes: &[Option<ActorClass>],
    gt: &[ActorBox],
    class_penalty: f64,
) -> Vec<Option<usize>> {
    let cost = match_cost(centers, classes, gt, class_penalty);
    hungarian(&cost, centers.len(), gt.len())
}
