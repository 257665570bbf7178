use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest `K` handled by exhaustive permutation search.
pub const EXHAUSTIVE_MAX_K: usize = 8;

/// Permutation-matched RMS atom error together with the matching, where `perm[k]` is
/// the row of `theta_hat` paired with row `k` of `theta_true`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaMatch {
    pub err: f64,
    pub perm: Vec<usize>,
}

fn cost_matrix(theta_true: &DMatrix<f64>, theta_hat: &DMatrix<f64>) -> DMatrix<f64> {
    let k = theta_true.nrows();
    DMatrix::from_fn(k, k, |a, b| (theta_true.row(a) - theta_hat.row(b)).norm_squared())
}

/// Minimum of `Σ_k C[k, perm[k]]`, scanning permutations in lexicographic order so the
/// first optimum wins ties.
fn exhaustive(cost: &DMatrix<f64>) -> Vec<usize> {
    let k = cost.nrows();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let c: f64 = perm.iter().enumerate().map(|(a, &b)| cost[(a, b)]).sum();
        if c < best_cost {
            best_cost = c;
            best.clone_from(&perm);
        }
        // next lexicographic permutation
        let Some(i) = (0..k.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else {
            break;
        };
        let j = (i + 1..k).rev().find(|&j| perm[j] > perm[i]).expect("successor exists");
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
    best
}

/// Optimal assignment by the shortest-augmenting-path Hungarian method, `O(K³)`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let reduced = cost[(r - 1, c - 1)] - u[r] - v[c];
                if reduced < minv[c] {
                    minv[c] = reduced;
                    way[c] = col0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    col1 = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for c in 1..=n {
        perm[owner[c] - 1] = c - 1;
    }
    perm
}

/// `(K⁻¹ Σ_k ‖θ*_k − θ̂_{ϱ(k)}‖²)^{1/2}` minimised over permutations `ϱ`.
pub fn err_theta(theta_true: &DMatrix<f64>, theta_hat: &DMatrix<f64>) -> Result<ThetaMatch> {
    if theta_true.shape() != theta_hat.shape() {
        return Err(Error::invalid(format!(
            "atom matrices differ in shape: {:?} vs {:?}",
            theta_true.shape(),
            theta_hat.shape()
        )));
    }
    let k = theta_true.nrows();
    if k == 0 {
        return Err(Error::invalid("atom matrices are empty"));
    }
    let cost = cost_matrix(theta_true, theta_hat);
    let perm = if k <= EXHAUSTIVE_MAX_K {
        exhaustive(&cost)
    } else {
        hungarian(&cost)
    };
    let total: f64 = perm.iter().enumerate().map(|(a, &b)| cost[(a, b)]).sum();
    Ok(ThetaMatch {
        err: (total / k as f64).sqrt(),
        perm,
    })
}

/// `Σ_k |α*_k − α̂_{ϱ(k)}|` under a given matching.
pub fn err_alpha(alpha_true: &DVector<f64>, alpha_hat: &DVector<f64>, perm: &[usize]) -> Result<f64> {
    if alpha_true.len() != alpha_hat.len() || perm.len() != alpha_true.len() {
        return Err(Error::invalid("weight vectors and permutation differ in length"));
    }
    Ok(perm
        .iter()
        .enumerate()
        .map(|(a, &b)| (alpha_true[a] - alpha_hat[b]).abs())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random(k: usize, l: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = Stream::root(seed).rng();
        DMatrix::from_fn(k, l, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn all_perms(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in all_perms(k - 1) {
            for pos in 0..k {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let k = a.nrows();
        all_perms(k)
            .iter()
            .map(|p| {
                let s: f64 = (0..k).map(|i| (a.row(i) - b.row(p[i])).norm_squared()).sum();
                (s / k as f64).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn permuted_rows_give_zero() {
        let a = random(4, 3, 1);
        let b = DMatrix::from_fn(4, 3, |i, j| a[([2, 0, 3, 1][i], j)]);
        let m = err_theta(&a, &b).unwrap();
        assert_eq!(m.err, 0.0);
        for k in 0..4 {
            assert_eq!(a.row(k), b.row(m.perm[k]));
        }
    }

    #[test]
    fn single_atom_distance() {
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.3, 0.0]);
        assert!((err_theta(&a, &b).unwrap().err - 0.3).abs() < 1e-15);
    }

    #[test]
    fn three_atoms_match_brute_force() {
        for seed in 0..20 {
            let a = random(3, 4, seed);
            let b = random(3, 4, seed + 100);
            assert!((err_theta(&a, &b).unwrap().err - brute(&a, &b)).abs() < 1e-14);
        }
    }

    #[test]
    fn hungarian_agrees_with_exhaustive() {
        for seed in 0..30 {
            for k in 2..=7 {
                let c = random(k, k, seed * 10 + k as u64).map(|v| v.abs());
                let h = hungarian(&c);
                let e = exhaustive(&c);
                let total = |p: &[usize]| p.iter().enumerate().map(|(a, &b)| c[(a, b)]).sum::<f64>();
                assert!((total(&h) - total(&e)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_k_uses_assignment() {
        let a = random(12, 5, 3);
        let perm: Vec<usize> = (0..12).rev().collect();
        let b = DMatrix::from_fn(12, 5, |i, j| a[(perm[i], j)] + 1e-3);
        let m = err_theta(&a, &b).unwrap();
        assert!((m.err - (5.0f64 * 1e-6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(err_theta(&random(2, 3, 0), &random(3, 3, 0)).is_err());
    }

    #[test]
    fn alpha_error_definition() {
        let a = DVector::from_vec(vec![0.5, 0.5]);
        let b = DVector::from_vec(vec![0.6, 0.4]);
        assert!((err_alpha(&a, &b, &[0, 1]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(err_alpha(&a, &a, &[1, 0]).unwrap(), 0.0);
        // the θ-matching is used even when swapping would fit α better
        let t = DVector::from_vec(vec![0.2, 0.8]);
        let h = DVector::from_vec(vec![0.2, 0.8]);
        assert!((err_alpha(&t, &h, &[1, 0]).unwrap() - 1.2).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pseudometric(seed in 0u64..10_000, k in 1usize..5, l in 1usize..4) {
            let a = random(k, l, seed);
            let b = random(k, l, seed + 1);
            let c = random(k, l, seed + 2);
            let ab = err_theta(&a, &b).unwrap().err;
            let ba = err_theta(&b, &a).unwrap().err;
            let bc = err_theta(&b, &c).unwrap().err;
            let ac = err_theta(&a, &c).unwrap().err;
            prop_assert!((ab - ba).abs() <= 1e-10);
            prop_assert!(ac <= ab + bc + 1e-10);
            prop_assert_eq!(err_theta(&a, &a).unwrap().err, 0.0);
            prop_assert!(ab > 0.0);
        }
    }
}
