//! Optimal one-to-one association of predicted track boxes with detections.

use serde::{Deserialize, Serialize};

use crate::geometry::{overlap_area_ratio, BoundingBox};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    /// `(track_idx, det_idx)` pairs, sorted by track index.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Minimum-cost assignment of every row to a distinct column of a
/// `rows x cols` matrix with `rows <= cols` (potentials / shortest
/// augmenting path form of the Hungarian method, O(rows² · cols)).
///
/// Returns the column assigned to each row.
fn hungarian(cost: &[Vec<f64>], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols);
    // 1-based indexing; column 0 is the virtual root
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for row in 1..=rows {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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

    let mut assigned = vec![usize::MAX; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assigned[owner[j] - 1] = j - 1;
        }
    }
    assigned
}

/// IoU score a pair contributes to the objective; pairs below the
/// threshold (or disjoint) contribute nothing and are never matched.
pub fn gated_iou(track: &BoundingBox, det: &BoundingBox, iou_threshold: f64) -> f64 {
    let iou = overlap_area_ratio(track, det);
    if iou > 0.0 && iou >= iou_threshold {
        iou
    } else {
        0.0
    }
}

/// Matches tracks to detections maximizing the total IoU over all
/// one-to-one assignments. Pairs with IoU below `iou_threshold` are gated
/// out of the objective and never reported as matches.
pub fn associate(tracks: &[BoundingBox], detections: &[BoundingBox], iou_threshold: f64) -> Association {
    let (n_t, n_d) = (tracks.len(), detections.len());
    if n_t == 0 || n_d == 0 {
        return Association {
            matches: Vec::new(),
            unmatched_tracks: (0..n_t).collect(),
            unmatched_detections: (0..n_d).collect(),
        };
    }

    let scores: Vec<Vec<f64>> = tracks
        .iter()
        .map(|t| detections.iter().map(|d| gated_iou(t, d, iou_threshold)).collect())
        .collect();
    assign_by_score(&scores, n_d)
}

/// Maximum-total-score one-to-one assignment over a `tracks x detections`
/// score matrix. Non-positive entries are never matched.
pub fn assign_by_score(scores: &[Vec<f64>], n_detections: usize) -> Association {
    let (n_t, n_d) = (scores.len(), n_detections);
    if n_t == 0 || n_d == 0 {
        return Association {
            matches: Vec::new(),
            unmatched_tracks: (0..n_t).collect(),
            unmatched_detections: (0..n_d).collect(),
        };
    }

    // the solver wants rows <= cols; transpose when there are more tracks
    let transposed = n_t > n_d;
    let (rows, cols) = if transposed { (n_d, n_t) } else { (n_t, n_d) };
    let cost: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| if transposed { -scores[c][r] } else { -scores[r][c] })
                .collect()
        })
        .collect();
    let assigned = hungarian(&cost, rows, cols);

    let mut track_match = vec![None; n_t];
    for (r, &c) in assigned.iter().enumerate() {
        let (t, d) = if transposed { (c, r) } else { (r, c) };
        if scores[t][d] > 0.0 {
            track_match[t] = Some(d);
        }
    }

    let mut det_used = vec![false; n_d];
    let mut out = Association::default();
    for (t, m) in track_match.iter().enumerate() {
        match m {
            Some(d) => {
                det_used[*d] = true;
                out.matches.push((t, *d));
            }
            None => out.unmatched_tracks.push(t),
        }
    }
    out.unmatched_detections = (0..n_d).filter(|&d| !det_used[d]).collect();
    out
}
