//! Small dense linear algebra: symmetric eigendecomposition and SVD.
//!
//! Matrices are row-major `Vec<S>`. Both routines are cyclic Jacobi sweeps,
//! which are accurate for the small sizes used here (3x3 to 64x64).

use crate::scalar::Real;

/// Eigenvalues (ascending) and column eigenvectors of a symmetric `n x n` matrix.
pub fn symmetric_eigen<S: Real>(a: &[S], n: usize) -> (Vec<S>, Vec<S>) {
    assert_eq!(a.len(), n * n, "matrix is not {n}x{n}");
    let mut m = a.to_vec();
    let mut v = vec![S::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = S::one();
    }
    let tol = S::epsilon() * S::of(0.5);
    for _sweep in 0..100 {
        let mut off = S::zero();
        let mut diag = S::zero();
        for i in 0..n {
            diag = diag + m[i * n + i] * m[i * n + i];
            for j in (i + 1)..n {
                off = off + m[i * n + j] * m[i * n + j];
            }
        }
        if off <= tol * tol * diag || off == S::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (S::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| m[i * n + i].partial_cmp(&m[j * n + j]).unwrap_or(std::cmp::Ordering::Equal));
    let values = idx.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![S::zero(); n * n];
    for (col, &i) in idx.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + col] = v[k * n + i];
        }
    }
    (values, vectors)
}

/// Thin SVD of an `n x n` matrix: `a = u * diag(s) * v^T`, singular values descending.
pub fn svd_square<S: Real>(a: &[S], n: usize) -> (Vec<S>, Vec<S>, Vec<S>) {
    assert_eq!(a.len(), n * n, "matrix is not {n}x{n}");
    // one-sided Jacobi on the columns of a working copy
    let mut w = a.to_vec();
    let mut v = vec![S::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = S::one();
    }
    let tol = S::epsilon();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (S::zero(), S::zero(), S::zero());
                for k in 0..n {
                    let (wp, wq) = (w[k * n + p], w[k * n + q]);
                    alpha = alpha + wp * wp;
                    beta = beta + wq * wq;
                    gamma = gamma + wp * wq;
                }
                if gamma == S::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (S::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (S::one() + zeta * zeta).sqrt());
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let (wp, wq) = (w[k * n + p], w[k * n + q]);
                    w[k * n + p] = c * wp - s * wq;
                    w[k * n + q] = s * wp + c * wq;
                    let (vp, vq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vp - s * vq;
                    v[k * n + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<S> = (0..n)
        .map(|j| (0..n).map(|k| w[k * n + j] * w[k * n + j]).sum::<S>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut u = vec![S::zero(); n * n];
    let mut vv = vec![S::zero(); n * n];
    let mut s = vec![S::zero(); n];
    for (col, &j) in order.iter().enumerate() {
        s[col] = norms[j];
        for k in 0..n {
            vv[k * n + col] = v[k * n + j];
            if norms[j] > S::zero() {
                u[k * n + col] = w[k * n + j] / norms[j];
            }
        }
    }
    complete_orthonormal(&mut u, &s, n);
    (u, s, vv)
}

/// Fills columns of `u` belonging to zero singular values with an orthonormal completion.
fn complete_orthonormal<S: Real>(u: &mut [S], s: &[S], n: usize) {
    let scale = s.first().copied().unwrap_or(S::zero());
    for col in 0..n {
        if s[col] > scale * S::of(1e-14) && s[col] > S::zero() {
            continue;
        }
        // try unit vectors until one survives Gram-Schmidt
        for e in 0..n {
            let mut cand = vec![S::zero(); n];
            cand[e] = S::one();
            for other in 0..n {
                if other == col || (other > col && !(s[other] > scale * S::of(1e-14))) {
                    continue;
                }
                let d: S = (0..n).map(|k| cand[k] * u[k * n + other]).sum();
                for k in 0..n {
                    cand[k] = cand[k] - d * u[k * n + other];
                }
            }
            let norm = cand.iter().map(|x| *x * *x).sum::<S>().sqrt();
            if norm > S::of(1e-6) {
                for k in 0..n {
                    u[k * n + col] = cand[k] / norm;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    c[i * n + j] += a[i * n + k] * b[k * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], n: usize) -> Vec<f64> {
        (0..n * n).map(|idx| a[(idx % n) * n + idx / n]).collect()
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 3, 8, 20] {
            let r: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() - 0.5).collect();
            let a = matmul(&r, &transpose(&r, n), n);
            let (vals, vecs) = symmetric_eigen(&a, n);
            assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = vals[i];
            }
            let back = matmul(&matmul(&vecs, &d, n), &transpose(&vecs, n), n);
            for (x, y) in a.iter().zip(&back) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn svd_reconstructs_and_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [2, 3, 5] {
            let a: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() - 0.5).collect();
            let (u, s, v) = svd_square(&a, n);
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = s[i];
            }
            let back = matmul(&matmul(&u, &d, n), &transpose(&v, n), n);
            for (x, y) in a.iter().zip(&back) {
                assert!((x - y).abs() < 1e-12);
            }
            let utu = matmul(&transpose(&u, n), &u, n);
            for i in 0..n {
                for j in 0..n {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((utu[i * n + j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn svd_of_rank_deficient_matrix_has_orthonormal_u() {
        // rank 1
        let a: Vec<f64> = vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 0.0];
        let (u, s, _) = svd_square(&a, 3);
        assert!(s[1].abs() < 1e-12 && s[2].abs() < 1e-12);
        let utu = matmul(&transpose(&u, 3), &u, 3);
        for i in 0..3 {
            assert!((utu[i * 3 + i] - 1.0).abs() < 1e-10);
        }
    }
}
