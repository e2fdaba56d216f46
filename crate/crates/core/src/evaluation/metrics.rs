use std::collections::BTreeMap;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

fn check_shapes(pred: &ArrayView2<u8>, gt: &ArrayView2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            field: "labels".into(),
            detail: format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim()),
        });
    }
    Ok(())
}

/// Pixel pairs `(pred, gt)` that take part in scoring.
fn scored_pixels<'a>(
    pred: &'a ArrayView2<u8>,
    gt: &'a ArrayView2<u8>,
    foreground_only: bool,
) -> impl Iterator<Item = (u8, u8)> + 'a {
    pred.iter()
        .zip(gt.iter())
        .map(|(&p, &g)| (p, g))
        .filter(move |&(_, g)| !foreground_only || g != 0)
}

fn comb2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two pixel partitions. With `foreground_only`
/// only pixels whose ground-truth label is non-zero are scored. Returns
/// `None` when no pixel is scored. When neither side has more than one
/// cluster, or the index is otherwise undefined, the result is 1.0 for
/// identical partitions and 0.0 otherwise.
pub fn ari(pred: &ArrayView2<u8>, gt: &ArrayView2<u8>, foreground_only: bool) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let mut table: BTreeMap<(u8, u8), f64> = BTreeMap::new();
    let mut rows: BTreeMap<u8, f64> = BTreeMap::new();
    let mut cols: BTreeMap<u8, f64> = BTreeMap::new();
    let mut n = 0.0;
    for (p, g) in scored_pixels(pred, gt, foreground_only) {
        *table.entry((p, g)).or_default() += 1.0;
        *rows.entry(p).or_default() += 1.0;
        *cols.entry(g).or_default() += 1.0;
        n += 1.0;
    }
    if n == 0.0 {
        return Ok(None);
    }
    // Identical up to relabeling iff every cluster on each side maps to
    // exactly one cluster on the other.
    let identical = table.len() == rows.len() && table.len() == cols.len();
    if rows.len() <= 1 && cols.len() <= 1 {
        return Ok(Some(if identical { 1.0 } else { 0.0 }));
    }
    let index: f64 = table.values().map(|&v| comb2(v)).sum();
    let a: f64 = rows.values().map(|&v| comb2(v)).sum();
    let b: f64 = cols.values().map(|&v| comb2(v)).sum();
    let expected = a * b / comb2(n);
    let max = (a + b) / 2.0;
    if max == expected {
        return Ok(Some(if identical { 1.0 } else { 0.0 }));
    }
    Ok(Some((index - expected) / (max - expected)))
}

/// Mean IoU over ground-truth classes under the one-to-one matching of
/// predicted to ground-truth regions that maximizes total IoU. Unmatched
/// classes score 0. With `foreground_only` the background class (label 0)
/// is not a match target; IoU is still computed over all pixels. Returns
/// `None` when there is no class to score.
pub fn mean_iou(pred: &ArrayView2<u8>, gt: &ArrayView2<u8>, foreground_only: bool) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let mut inter: BTreeMap<(u8, u8), f64> = BTreeMap::new();
    let mut pred_area: BTreeMap<u8, f64> = BTreeMap::new();
    let mut gt_area: BTreeMap<u8, f64> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        *inter.entry((p, g)).or_default() += 1.0;
        *pred_area.entry(p).or_default() += 1.0;
        *gt_area.entry(g).or_default() += 1.0;
    }
    let classes: Vec<u8> = gt_area
        .keys()
        .copied()
        .filter(|&g| !foreground_only || g != 0)
        .collect();
    if classes.is_empty() {
        return Ok(None);
    }
    let preds: Vec<u8> = pred_area.keys().copied().collect();
    let iou: Vec<Vec<f64>> = classes
        .iter()
        .map(|&g| {
            preds
                .iter()
                .map(|&p| {
                    let i = inter.get(&(p, g)).copied().unwrap_or(0.0);
                    i / (pred_area[&p] + gt_area[&g] - i)
                })
                .collect()
        })
        .collect();
    let assignment = hungarian_max(&iou);
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(r, c)| c.map_or(0.0, |c| iou[r][c]))
        .sum();
    Ok(Some(total / classes.len() as f64))
}

/// Assignment of rows to distinct columns maximizing the summed weight
/// (Kuhn–Munkres with potentials). Rows left without a real column map to
/// `None`.
pub fn hungarian_max(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0.0
        }
    };
    // 1-based arrays following the classic potential formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
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
            }
            for j in 0..=n {
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
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Per-frame mean absolute error over objects and the six state components.
pub fn state_mae(pred: &[Vec<[f64; 6]>], gt: &[Vec<[f64; 6]>]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            field: "states".into(),
            detail: format!("{} predicted frames vs {} ground-truth frames", pred.len(), gt.len()),
        });
    }
    pred.iter()
        .zip(gt)
        .enumerate()
        .map(|(t, (p, g))| {
            if p.len() != g.len() || p.is_empty() {
                return Err(Error::ShapeMismatch {
                    field: "states".into(),
                    detail: format!("frame {t}: {} predicted objects vs {}", p.len(), g.len()),
                });
            }
            let sum: f64 = p
                .iter()
                .zip(g)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .sum();
            Ok(sum / (6 * p.len()) as f64)
        })
        .collect()
}
