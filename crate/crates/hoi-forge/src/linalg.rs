//! Small dense linear-algebra helpers shared by geometry and metrics.

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors stored as
/// columns of a row-major `n x n` matrix, sorted ascending by eigenvalue.
/// Input is `n x n` row-major; only the symmetric part is used.
pub fn sym_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n, "matrix size mismatch");
    let mut m: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            0.5 * (a[i * n + j] + a[j * n + i])
        })
        .collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
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

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].partial_cmp(&m[j * n + j]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut eigvecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            eigvecs[row * n + new_col] = v[row * n + old_col];
        }
    }
    (eigvals, eigvecs)
}

/// `a @ b` for row-major `m x k` and `k x n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Symmetric positive semidefinite square root via eigendecomposition.
/// Negative eigenvalues (numerical noise) are clamped to zero.
pub fn sym_sqrt(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = sym_eigen(a, n);
    // V * diag(sqrt(max(vals,0))) * V^T
    let mut scaled = vec![0.0; n * n];
    for col in 0..n {
        let s = vals[col].max(0.0).sqrt();
        for row in 0..n {
            scaled[row * n + col] = vecs[row * n + col] * s;
        }
    }
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            vt[i * n + j] = vecs[j * n + i];
        }
    }
    matmul(&scaled, &vt, n, n, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_identity() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let (vals, _) = sym_eigen(&a, 2);
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_known_2x2() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let a = [2.0, 1.0, 1.0, 2.0];
        let (vals, vecs) = sym_eigen(&a, 2);
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        // Reconstruct A = V diag V^T.
        let mut recon = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    recon[i * 2 + j] += vecs[i * 2 + k] * vals[k] * vecs[j * 2 + k];
                }
            }
        }
        for (r, e) in recon.iter().zip(a.iter()) {
            assert!((r - e).abs() < 1e-10);
        }
    }

    #[test]
    fn sqrt_of_diagonal() {
        let a = [4.0, 0.0, 0.0, 9.0];
        let s = sym_sqrt(&a, 2);
        assert!((s[0] - 2.0).abs() < 1e-10);
        assert!((s[3] - 3.0).abs() < 1e-10);
        assert!(s[1].abs() < 1e-10 && s[2].abs() < 1e-10);
    }

    #[test]
    fn sqrt_squares_back() {
        // Random-ish symmetric PSD matrix: B^T B.
        let b = [1.0, 2.0, 0.5, -1.0, 0.3, 2.2, 0.0, 1.1, -0.7];
        let mut a = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    a[i * 3 + j] += b[k * 3 + i] * b[k * 3 + j];
                }
            }
        }
        let s = sym_sqrt(&a, 3);
        let s2 = matmul(&s, &s, 3, 3, 3);
        for (x, y) in s2.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}
