//! Dense matrix-product kernels shared by the forward and backward passes.

/// Below this many multiply-adds the packing overhead of the blocked kernel
/// dominates, so a direct triple loop is used instead.
const SMALL_PRODUCT: usize = 4096;

/// `c = a·b + beta·c` where `a` is logically `m×k` and `b` is `k×n`.
///
/// `trans_a` means `a` is stored as `k×m`; `trans_b` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };

    if m * k * n <= SMALL_PRODUCT {
        if beta == 0.0 {
            c.fill(0.0);
        } else if beta != 1.0 {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * rsa + p * csa];
                if csb == 1 {
                    let brow = &b[p * rsb..p * rsb + n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                } else {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += aip * b[p * rsb + j * csb];
                    }
                }
            }
        }
        return;
    }

    // SAFETY: the strides above describe the exact extents of `a`, `b` and `c`,
    // whose lengths were checked against m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    acc += av * bv;
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn both_paths_agree_with_naive_for_all_transposes() {
        for &(m, k, n) in &[(3, 4, 5), (40, 17, 23)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 11) as f64) * 0.5 - 2.0).collect();
            for ta in [false, true] {
                for tb in [false, true] {
                    let want = naive(m, k, n, &a, ta, &b, tb);
                    let mut got = vec![1.0; m * n];
                    gemm(m, k, n, &a, ta, &b, tb, &mut got, 0.0);
                    for (g, w) in got.iter().zip(&want) {
                        assert!((g - w).abs() < 1e-9);
                    }
                    let mut acc = want.clone();
                    gemm(m, k, n, &a, ta, &b, tb, &mut acc, 1.0);
                    for (g, w) in acc.iter().zip(&want) {
                        assert!((g - 2.0 * w).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
