use crate::scalar::Real;

/// One-to-one pairing of predictions with ground truths.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(prediction, ground truth)`, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// Total cost of the pairs, summed in prediction order.
    pub fn cost<T: Real>(&self, cost: &[Vec<T>]) -> T {
        self.pairs.iter().fold(T::zero(), |acc, &(p, g)| acc + cost[p][g])
    }
}

/// Minimum-cost assignment for a `rows × cols` cost matrix (rows ≤ cols),
/// by shortest augmenting paths with dual potentials. Returns the column of
/// each row.
fn solve<T: Real>(rows: usize, cols: usize, at: impl Fn(usize, usize) -> T) -> Vec<usize> {
    let inf = T::infinity();
    // 1-based with a virtual column 0
    let mut u = vec![T::zero(); rows + 1];
    let mut v = vec![T::zero(); cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut col_of = vec![usize::MAX; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Hungarian matching on `cost[pred][gt]`; rectangular matrices match
/// `min(n_pred, n_gt)` pairs.
pub fn hungarian<T: Real>(cost: &[Vec<T>]) -> Assignment {
    let n_pred = cost.len();
    let n_gt = cost.first().map_or(0, Vec::len);
    if n_pred == 0 || n_gt == 0 {
        return Assignment { pairs: Vec::new(), unmatched: (0..n_pred).collect() };
    }
    let mut pairs: Vec<(usize, usize)> = if n_pred <= n_gt {
        solve(n_pred, n_gt, |i, j| cost[i][j]).into_iter().enumerate().collect()
    } else {
        solve(n_gt, n_pred, |i, j| cost[j][i]).into_iter().enumerate().map(|(g, p)| (p, g)).collect()
    };
    pairs.sort_unstable();
    let mut matched = vec![false; n_pred];
    for &(p, _) in &pairs {
        matched[p] = true;
    }
    let unmatched = (0..n_pred).filter(|&p| !matched[p]).collect();
    Assignment { pairs, unmatched }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_preference() {
        let c = vec![vec![0.0, 5.0, 5.0], vec![5.0, 0.0, 5.0], vec![5.0, 5.0, 0.0]];
        assert_eq!(hungarian(&c).pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn three_by_three_example() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(a.cost(&c), 5.0);
    }

    #[test]
    fn rectangular_both_ways() {
        let tall = vec![vec![3.0], vec![1.0], vec![2.0]];
        let a = hungarian(&tall);
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.unmatched, vec![0, 2]);
        let wide = vec![vec![3.0f32, 1.0, 2.0]];
        assert_eq!(hungarian(&wide).pairs, vec![(0, 1)]);
        assert!(hungarian::<f64>(&[]).pairs.is_empty());
        assert_eq!(hungarian::<f64>(&[vec![], vec![]]).unmatched, vec![0, 1]);
    }
}
