//! Exact (unregularized) OT for small uniform clouds, used as a test oracle.

use crate::error::{Error, Result};
use crate::numeric::sq_dist;

use super::PointCloud;

/// Largest cloud size the oracle accepts on either side.
pub const EXACT_MAX_POINTS: usize = 8;

/// Exact squared-Euclidean OT cost between uniform clouds.
///
/// Equal sizes: the optimum of a uniform transport problem is attained at a
/// permutation, so every matching is enumerated. Unequal sizes `n, m`: each
/// point is split into `lcm(n, m) / n` (resp. `/ m`) equal atoms, which
/// leaves the OT value unchanged and yields a balanced assignment problem
/// solved with the Hungarian method.
pub fn exact_ot_oracle(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("cloud dims {} vs {}", a.dim(), b.dim())));
    }
    if a.len() > EXACT_MAX_POINTS || b.len() > EXACT_MAX_POINTS {
        return Err(Error::TooLarge(format!(
            "exact OT supports at most {EXACT_MAX_POINTS} points per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !a.is_uniform() || !b.is_uniform() {
        return Err(Error::invalid("exact OT oracle requires uniform weights"));
    }
    let (n, m) = (a.len(), b.len());
    if n == m {
        let cost: Vec<Vec<f64>> = a
            .points()
            .iter_rows()
            .map(|x| b.points().iter_rows().map(|y| sq_dist(x, y)).collect())
            .collect();
        return Ok(best_permutation(&cost) / n as f64);
    }
    let l = lcm(n, m);
    let (ra, rb) = (l / n, l / m);
    let cost: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            let x = a.points().row(i / ra);
            (0..l).map(|j| sq_dist(x, b.points().row(j / rb))).collect()
        })
        .collect();
    Ok(hungarian(&cost) / l as f64)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Minimum total cost over all permutations (Heap's algorithm).
fn best_permutation(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    let mut best = total(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Minimum-cost perfect matching on a square cost matrix, O(n^3)
/// shortest augmenting paths with row/column potentials.
pub(crate) fn hungarian(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
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
    (1..=n).map(|j| cost[row_of[j] - 1][j - 1]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Matrix;
    use crate::rng::Rng;

    fn cloud(rows: &[&[f64]]) -> PointCloud {
        let d = rows[0].len();
        PointCloud::uniform(Matrix::from_rows(rows, d).unwrap()).unwrap()
    }

    #[test]
    fn single_atoms() {
        let a = cloud(&[&[0., 0.]]);
        let b = cloud(&[&[1., 2.]]);
        assert_eq!(exact_ot_oracle(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn permuted_identical_clouds() {
        let a = cloud(&[&[0., 0.], &[1., 3.], &[2., -1.]]);
        let b = cloud(&[&[2., -1.], &[0., 0.], &[1., 3.]]);
        assert_eq!(exact_ot_oracle(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_matchings() {
        // matchings cost (1 + 1) / 2 = 1 and (2 + 2) / 2 = 2
        let a = cloud(&[&[0., 0.], &[1., 0.]]);
        let b = cloud(&[&[0., 1.], &[1., 1.]]);
        assert!((exact_ot_oracle(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_large_instances() {
        let big = PointCloud::uniform(Matrix::zeros(9, 2)).unwrap();
        let small = cloud(&[&[0., 0.]]);
        assert!(matches!(exact_ot_oracle(&big, &small), Err(Error::TooLarge(_))));
    }

    #[test]
    fn one_to_many_is_mean_distance() {
        let a = cloud(&[&[0., 0.]]);
        let b = cloud(&[&[1., 0.], &[0., 2.], &[3., 0.]]);
        let want = (1.0 + 4.0 + 9.0) / 3.0;
        assert!((exact_ot_oracle(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_enumeration() {
        let mut rng = Rng::new(5);
        for n in 1..=7 {
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.uniform_range(0.0, 10.0)).collect())
                .collect();
            let h = hungarian(&cost);
            let e = best_permutation(&cost);
            assert!((h - e).abs() < 1e-9, "n={n}: {h} vs {e}");
        }
    }
}
