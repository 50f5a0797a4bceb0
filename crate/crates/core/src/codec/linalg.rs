//! Blocked dense kernels for symmetric positive definite systems.
//!
//! Matrices are row-major `Vec<f64>` with explicit dimensions; all heavy
//! lifting goes through [`gemm`].

use crate::error::{Error, Result};
use crate::tensor_core::gemm;

const BLOCK: usize = 64;

/// `A·Aᵀ` for a row-major `rows × cols` matrix.
pub fn gram(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut g = vec![0.0; rows * rows];
    gemm(
        rows,
        cols,
        rows,
        1.0,
        a,
        (cols, 1),
        a,
        (1, cols),
        0.0,
        &mut g,
        (rows, 1),
    );
    g
}

/// Lower Cholesky factor of an `n × n` SPD matrix.
///
/// Fails when a pivot drops below `rel_tol` times the largest diagonal
/// entry, i.e. when the matrix is numerically singular.
pub fn cholesky(mut g: Vec<f64>, n: usize, rel_tol: f64) -> Result<Vec<f64>> {
    let max_diag = (0..n).map(|i| g[i * n + i]).fold(0.0, f64::max);
    let floor = rel_tol * max_diag;
    if !(max_diag > 0.0) {
        return Err(Error::Numerical("Gram matrix has no positive diagonal".into()));
    }
    for k0 in (0..n).step_by(BLOCK) {
        let kb = BLOCK.min(n - k0);
        // Factor the diagonal block in place.
        for j in k0..k0 + kb {
            let mut d = g[j * n + j];
            for p in k0..j {
                d -= g[j * n + p] * g[j * n + p];
            }
            if !(d > floor) {
                return Err(Error::Numerical(format!(
                    "pivot {j} is {d:.3e}, below {floor:.3e}: matrix is rank deficient"
                )));
            }
            let d = d.sqrt();
            g[j * n + j] = d;
            for i in j + 1..k0 + kb {
                let mut s = g[i * n + j];
                for p in k0..j {
                    s -= g[i * n + p] * g[j * n + p];
                }
                g[i * n + j] = s / d;
            }
        }
        let rest = n - k0 - kb;
        if rest == 0 {
            continue;
        }
        // Panel: L21 = A21 · L11⁻ᵀ, row by row.
        for i in k0 + kb..n {
            for j in k0..k0 + kb {
                let mut s = g[i * n + j];
                for p in k0..j {
                    s -= g[i * n + p] * g[j * n + p];
                }
                g[i * n + j] = s / g[j * n + j];
            }
        }
        // Trailing update: A22 -= L21·L21ᵀ (full square; upper half is ignored).
        let panel: Vec<f64> = (k0 + kb..n)
            .flat_map(|i| g[i * n + k0..i * n + k0 + kb].to_vec())
            .collect();
        let off = (k0 + kb) * n + k0 + kb;
        gemm(
            rest,
            kb,
            rest,
            -1.0,
            &panel,
            (kb, 1),
            &panel,
            (1, kb),
            1.0,
            &mut g[off..],
            (n, 1),
        );
    }
    for i in 0..n {
        for j in i + 1..n {
            g[i * n + j] = 0.0;
        }
    }
    Ok(g)
}

/// Solves `L·X = B` in place (`B` is `n × m`).
pub fn solve_lower(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for k0 in (0..n).step_by(BLOCK) {
        let kb = BLOCK.min(n - k0);
        if k0 > 0 {
            // B[k0..k0+kb] -= L[k0.., 0..k0] · X[0..k0]
            let (done, rest) = b.split_at_mut(k0 * m);
            gemm(
                kb,
                k0,
                m,
                -1.0,
                &l[k0 * n..],
                (n, 1),
                done,
                (m, 1),
                1.0,
                &mut rest[..kb * m],
                (m, 1),
            );
        }
        for i in k0..k0 + kb {
            for p in k0..i {
                let c = l[i * n + p];
                let (head, tail) = b.split_at_mut(i * m);
                let src = &head[p * m..p * m + m];
                tail[..m].iter_mut().zip(src).for_each(|(x, s)| *x -= c * s);
            }
            let d = l[i * n + i];
            b[i * m..i * m + m].iter_mut().for_each(|x| *x /= d);
        }
    }
}

/// Solves `Lᵀ·X = B` in place (`B` is `n × m`).
pub fn solve_lower_transposed(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    let blocks: Vec<usize> = (0..n).step_by(BLOCK).collect();
    for &k0 in blocks.iter().rev() {
        let kb = BLOCK.min(n - k0);
        let end = k0 + kb;
        if end < n {
            // B[k0..end] -= (L[end.., k0..end])ᵀ · X[end..]
            let (head, done) = b.split_at_mut(end * m);
            gemm(
                kb,
                n - end,
                m,
                -1.0,
                &l[end * n + k0..],
                (1, n),
                done,
                (m, 1),
                1.0,
                &mut head[k0 * m..],
                (m, 1),
            );
        }
        for i in (k0..end).rev() {
            for p in i + 1..end {
                let c = l[p * n + i];
                let (head, tail) = b.split_at_mut(p * m);
                head[i * m..i * m + m]
                    .iter_mut()
                    .zip(&tail[..m])
                    .for_each(|(x, s)| *x -= c * s);
            }
            let d = l[i * n + i];
            b[i * m..i * m + m].iter_mut().for_each(|x| *x /= d);
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Row-major product of `m × k` and `k × n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, (k, 1), b, (n, 1), 0.0, &mut c, (n, 1));
    c
}

pub fn frobenius_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
