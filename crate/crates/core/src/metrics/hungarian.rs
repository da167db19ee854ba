/// Minimum-cost assignment for a `K × L` cost matrix.
///
/// Returns `(row, col)` pairs; every row is matched when `K <= L`, every
/// column otherwise. Shortest augmenting paths with dual potentials,
/// `O(n² m)` for `n = min(K, L)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let k = cost.len();
    if k == 0 {
        return Vec::new();
    }
    let l = cost[0].len();
    assert!(cost.iter().all(|r| r.len() == l), "ragged cost matrix");
    assert!(cost.iter().flatten().all(|c| c.is_finite()), "costs must be finite");
    if l == 0 {
        return Vec::new();
    }
    if k > l {
        let t: Vec<Vec<f64>> = (0..l).map(|c| (0..k).map(|r| cost[r][c]).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = solve(&t).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    solve(cost)
}

/// Rows ≤ columns. Indices inside are 1-based with column 0 as the sentinel.
fn solve(a: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = a.len();
    let m = a[0].len();
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
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(cost: &[Vec<f64>]) -> f64 {
        let (k, l) = (cost.len(), cost[0].len());
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, transpose: bool) {
            let (k, l) = if transpose { (cost[0].len(), cost.len()) } else { (cost.len(), cost[0].len()) };
            if row == k {
                *best = best.min(acc);
                return;
            }
            for c in 0..l {
                if !used[c] {
                    used[c] = true;
                    let v = if transpose { cost[c][row] } else { cost[row][c] };
                    rec(cost, row + 1, used, acc + v, best, transpose);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        let transpose = k > l;
        rec(cost, 0, &mut vec![false; k.max(l)], 0.0, &mut best, transpose);
        best
    }

    fn total(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| cost[r][c]).sum()
    }

    #[test]
    fn diagonal_preference() {
        let cost: Vec<Vec<f64>> = (0..4).map(|r| (0..4).map(|c| if r == c { 0.0 } else { 1.0 }).collect()).collect();
        assert_eq!(hungarian(&cost), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn integer_square_and_rectangular_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, l) in [(4, 4), (2, 4), (4, 2)] {
            for _ in 0..50 {
                let cost: Vec<Vec<f64>> = (0..k).map(|_| (0..l).map(|_| rng.random_range(0..10) as f64).collect()).collect();
                let pairs = hungarian(&cost);
                assert_eq!(pairs.len(), k.min(l));
                let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
                let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
                rows.dedup();
                cols.sort_unstable();
                cols.dedup();
                assert_eq!((rows.len(), cols.len()), (k.min(l), k.min(l)));
                assert_eq!(total(&cost, &pairs), brute(&cost));
            }
        }
    }

    #[test]
    fn empty_inputs() {
        assert!(hungarian(&[]).is_empty());
        assert!(hungarian(&[vec![], vec![]]).is_empty());
    }
}
