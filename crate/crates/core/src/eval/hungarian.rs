//! Maximum-weight bipartite assignment.

/// Minimum-cost perfect assignment on a square cost matrix via shortest
/// augmenting paths with potentials. Returns `col_of_row`.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
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
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    col_of_row
}

fn pad_square(weights: &[Vec<f64>], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let n = rows.max(cols);
    (0..n)
        .map(|i| (0..n).map(|j| if i < rows && j < cols { weights[i][j] } else { 0.0 }).collect())
        .collect()
}

fn best_total(w: &[Vec<f64>]) -> f64 {
    let cost: Vec<Vec<f64>> = w.iter().map(|r| r.iter().map(|&x| -x).collect()).collect();
    min_cost_assignment(&cost).iter().enumerate().map(|(i, &j)| w[i][j]).sum()
}

fn without(w: &[Vec<f64>], row: usize, col: usize) -> Vec<Vec<f64>> {
    w.iter()
        .enumerate()
        .filter(|&(i, _)| i != row)
        .map(|(_, r)| r.iter().enumerate().filter(|&(j, _)| j != col).map(|(_, &x)| x).collect())
        .collect()
}

/// Result of [`hungarian_match`].
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(prediction, ground truth)` pairs in increasing prediction order.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

const TIE_TOL: f64 = 1e-12;

/// One-to-one assignment of `min(P, G)` pairs maximizing total IoU for a
/// row-major `P×G` matrix. Among optimal assignments the one whose column
/// sequence is lexicographically smallest is returned.
pub fn hungarian_match(iou: &[Vec<f64>]) -> Assignment {
    let rows = iou.len();
    let cols = iou.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Assignment {
            pairs: Vec::new(),
            total: 0.0,
        };
    }
    let mut w = pad_square(iou, rows, cols);
    let n = w.len();
    let cost: Vec<Vec<f64>> = w.iter().map(|r| r.iter().map(|&x| -x).collect()).collect();
    let initial = min_cost_assignment(&cost);
    let optimum: f64 = initial.iter().enumerate().map(|(i, &j)| w[i][j]).sum();
    let tol = TIE_TOL * (1.0 + optimum.abs());

    // Fix rows in order, taking the smallest column that still admits an
    // optimal completion. `w` shrinks as rows and columns are fixed.
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut fixed = 0.0;
    let mut col_of_row = Vec::with_capacity(n);
    let mut hint = initial;
    for _ in 0..n {
        let k = (0..free_cols.len())
            .find(|&k| k == hint[0] || fixed + w[0][k] + best_total(&without(&w, 0, k)) >= optimum - tol)
            .expect("the held assignment is always optimal");
        fixed += w[0][k];
        col_of_row.push(free_cols.remove(k));
        let rest = without(&w, 0, k);
        let rest_cost: Vec<Vec<f64>> = rest.iter().map(|r| r.iter().map(|&x| -x).collect()).collect();
        hint = if k == hint[0] {
            hint[1..].iter().map(|&j| if j > k { j - 1 } else { j }).collect()
        } else {
            min_cost_assignment(&rest_cost)
        };
        w = rest;
    }

    let pairs: Vec<(usize, usize)> = col_of_row
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < rows && j < cols)
        .map(|(i, &j)| (i, j))
        .collect();
    let total = pairs.iter().map(|&(i, j)| iou[i][j]).sum();
    Assignment { pairs, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_dominant() {
        let a = hungarian_match(&[vec![0.9, 0.2], vec![0.3, 0.8]]);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert!((a.total - 1.7).abs() < 1e-15);
    }

    #[test]
    fn ties_prefer_lexicographically_smallest() {
        let a = hungarian_match(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        let a = hungarian_match(&[vec![0.0, 0.0, 0.0]]);
        assert_eq!(a.pairs, vec![(0, 0)]);
    }

    #[test]
    fn rectangular_matches_min_side() {
        let a = hungarian_match(&[vec![0.1, 0.9], vec![0.8, 0.2], vec![0.7, 0.6]]);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert!(hungarian_match(&[]).pairs.is_empty());
    }
}
