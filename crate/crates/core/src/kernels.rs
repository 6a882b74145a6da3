//! Dense kernels shared by the similarity and construction code.

use crate::tensor_io::EmbeddingMatrix;

/// `C (m x n) = A (m x k) · Bᵀ` where `B` is `n x k`, all row-major.
pub(crate) fn dgemm_abt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the slice lengths above cover every element addressed by the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `C (m x n) = A (m x k) · B (k x n)`, all row-major.
pub(crate) fn dgemm_ab(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// f32 variant of [`dgemm_abt`].
pub(crate) fn sgemm_abt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: as above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

pub(crate) fn norm_f64(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// Unit-normalized copies of the selected rows in f64; zero rows stay zero.
pub(crate) fn unit_rows_f64(m: &EmbeddingMatrix, ids: impl IntoIterator<Item = usize>) -> Vec<f64> {
    let mut out = Vec::new();
    for i in ids {
        let row = m.row(i);
        let n = norm_f64(row);
        if n > 0.0 {
            out.extend(row.iter().map(|&v| f64::from(v) / n));
        } else {
            out.extend(std::iter::repeat_n(0.0, row.len()));
        }
    }
    out
}

/// Unit-normalized copy of the whole matrix in f32; zero rows stay zero.
pub(crate) fn unit_rows_f32(m: &EmbeddingMatrix) -> Vec<f32> {
    let mut out = Vec::with_capacity(m.values().len());
    for i in 0..m.rows() {
        let row = m.row(i);
        let n = norm_f64(row);
        if n > 0.0 {
            out.extend(row.iter().map(|&v| (f64::from(v) / n) as f32));
        } else {
            out.extend(std::iter::repeat_n(0.0f32, row.len()));
        }
    }
    out
}

/// Cosine similarity by definition; 0 when either vector has zero norm.
pub(crate) fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let (na, nb) = (norm_f64(a), norm_f64(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, bt: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let bv = if bt { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += a[i * k + p] * bv;
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        for (x, y) in dgemm_abt(&a, &b, m, k, n).iter().zip(naive(&a, &b, m, k, n, true)) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in dgemm_ab(&a, &b, m, k, n).iter().zip(naive(&a, &b, m, k, n, false)) {
            assert!((x - y).abs() < 1e-12);
        }
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        for (x, y) in sgemm_abt(&af, &bf, m, k, n).iter().zip(naive(&a, &b, m, k, n, true)) {
            assert!((f64::from(*x) - y).abs() < 1e-5);
        }
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine_f64(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(cosine_f64(&[3.0, 0.0], &[-2.0, 0.0]), -1.0);
    }
}
