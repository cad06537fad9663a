//! Symmetric eigendecomposition.
//!
//! Small matrices use cyclic Jacobi rotations. Larger ones go through
//! Householder tridiagonalisation and implicit QR (via `nalgebra`), because
//! Jacobi's per-sweep cost makes the 784×784 and 1024×1024 problems in the
//! experiments too slow on a single core.

use nalgebra::DMatrix;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest size handled by the Jacobi route in [`eigh_symmetric`].
pub const JACOBI_MAX_DIM: usize = 64;

const SYMMETRY_TOL: f64 = 1e-10;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues in ascending order with matching unit eigenvectors.
#[derive(Clone, Debug)]
pub struct Eigh {
    pub values: Vec<f64>,
    /// `m×m`, eigenvector `i` in column `i`.
    pub vectors: Tensor,
}

impl Eigh {
    pub fn vector(&self, i: usize) -> Vec<f64> {
        let m = self.values.len();
        (0..m).map(|r| self.vectors.data()[r * m + i]).collect()
    }
}

fn check_symmetric(a: &Tensor) -> Result<usize> {
    let m = match a.shape() {
        [r, c] if r == c => *r,
        s => return Err(Error::invalid(format!("eigh needs a square matrix, got {s:?}"))),
    };
    if !a.is_finite() {
        return Err(Error::invalid("eigh input has non-finite entries"));
    }
    let d = a.data();
    let scale = d.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..m {
        for j in i + 1..m {
            if (d[i * m + j] - d[j * m + i]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    d[i * m + j],
                    d[j * m + i]
                )));
            }
        }
    }
    Ok(m)
}

/// Symmetric eigendecomposition, routed by size.
pub fn eigh_symmetric(a: &Tensor) -> Result<Eigh> {
    let m = check_symmetric(a)?;
    if m <= JACOBI_MAX_DIM {
        jacobi_eigh(a)
    } else {
        tridiagonal_eigh(a)
    }
}

/// Cyclic Jacobi rotations until the off-diagonal norm is below
/// `1e-12·‖A‖_F` or 100 sweeps have run.
pub fn jacobi_eigh(a: &Tensor) -> Result<Eigh> {
    let m = check_symmetric(a)?;
    let mut w = a.data().to_vec();
    // symmetrise exactly so rotations stay consistent
    for i in 0..m {
        for j in i + 1..m {
            let avg = 0.5 * (w[i * m + j] + w[j * m + i]);
            w[i * m + j] = avg;
            w[j * m + i] = avg;
        }
    }
    let mut v = Tensor::identity(m).into_data();
    let frob = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = JACOBI_TOL * frob.max(f64::MIN_POSITIVE);

    let off_norm = |w: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    s += w[i * m + j] * w[i * m + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off_norm(&w) > target {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::numeric(format!(
                "Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {:.3e})",
                off_norm(&w)
            )));
        }
        sweeps += 1;
        for p in 0..m {
            for q in p + 1..m {
                let apq = w[p * m + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (w[p * m + p], w[q * m + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..m {
                    let (akp, akq) = (w[k * m + p], w[k * m + q]);
                    w[k * m + p] = c * akp - s * akq;
                    w[k * m + q] = s * akp + c * akq;
                }
                for k in 0..m {
                    let (apk, aqk) = (w[p * m + k], w[q * m + k]);
                    w[p * m + k] = c * apk - s * aqk;
                    w[q * m + k] = s * apk + c * aqk;
                }
                for k in 0..m {
                    let (vkp, vkq) = (v[k * m + p], v[k * m + q]);
                    v[k * m + p] = c * vkp - s * vkq;
                    v[k * m + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values: Vec<f64> = (0..m).map(|i| w[i * m + i]).collect();
    Ok(finish(values, v, m))
}

/// Householder tridiagonalisation followed by implicit symmetric QR.
pub fn tridiagonal_eigh(a: &Tensor) -> Result<Eigh> {
    let m = check_symmetric(a)?;
    let mat = DMatrix::from_row_slice(m, m, a.data());
    let eig = nalgebra::SymmetricEigen::try_new(mat, 1e-15, 0)
        .ok_or_else(|| Error::numeric(format!("symmetric QR failed to converge on a {m}×{m} matrix")))?;
    let values = eig.eigenvalues.iter().copied().collect();
    let mut v = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            v[r * m + c] = eig.eigenvectors[(r, c)];
        }
    }
    Ok(finish(values, v, m))
}

/// Sorts ascending and fixes signs so each vector's largest-magnitude entry is positive.
fn finish(values: Vec<f64>, v: Vec<f64>, m: usize) -> Eigh {
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let mut vectors = vec![0.0; m * m];
    for (dst, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for r in 0..m {
            if v[r * m + src].abs() > v[pivot * m + src].abs() {
                pivot = r;
            }
        }
        let sign = if v[pivot * m + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..m {
            vectors[r * m + dst] = sign * v[r * m + src];
        }
    }
    Eigh {
        values: order.iter().map(|&i| values[i]).collect(),
        vectors: Tensor::new(vec![m, m], vectors).expect("square"),
    }
}

/// Flips `v` so its largest-magnitude component is positive.
pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut pivot = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v.get(pivot).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(m: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Tensor::randn(vec![m, m], 1.0, &mut rng);
        let mut d = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                d[i * m + j] = r.at(i, j) + r.at(j, i);
            }
        }
        Tensor::new(vec![m, m], d).unwrap()
    }

    fn reconstruct(e: &Eigh) -> Tensor {
        let m = e.values.len();
        let mut out = vec![0.0; m * m];
        for k in 0..m {
            let v = e.vector(k);
            for i in 0..m {
                for j in 0..m {
                    out[i * m + j] += e.values[k] * v[i] * v[j];
                }
            }
        }
        Tensor::new(vec![m, m], out).unwrap()
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let e = eigh_symmetric(&Tensor::identity(2)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);
    }

    #[test]
    fn two_node_laplacian() {
        let a = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let e = eigh_symmetric(&a).unwrap();
        assert!(e.values[0].abs() < 1e-12);
        assert!((e.values[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn random_8x8_reconstructs() {
        let a = random_symmetric(8, 3);
        let e = eigh_symmetric(&a).unwrap();
        assert!(reconstruct(&e).max_abs_diff(&a) < 1e-8);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        let vtv = e.vectors.transpose().unwrap().matmul(&e.vectors).unwrap();
        assert!(vtv.max_abs_diff(&Tensor::identity(8)) < 1e-8);
    }

    #[test]
    fn both_routes_agree() {
        for m in [5, 30, 70] {
            let a = random_symmetric(m, m as u64);
            let j = jacobi_eigh(&a).unwrap();
            let t = tridiagonal_eigh(&a).unwrap();
            for (x, y) in j.values.iter().zip(&t.values) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
            // distinct eigenvalues with the sign rule give identical vectors
            assert!(j.vectors.max_abs_diff(&t.vectors) < 1e-7);
            let norm = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..m {
                let v = t.vector(k);
                let av: Vec<f64> = (0..m).map(|i| (0..m).map(|c| a.at(i, c) * v[c]).sum()).collect();
                let resid = av.iter().zip(&v).map(|(x, y)| (x - t.values[k] * y).abs()).fold(0.0, f64::max);
                assert!(resid < 1e-8 * norm);
            }
        }
    }

    #[test]
    fn sign_rule_makes_largest_component_positive() {
        let a = random_symmetric(6, 11);
        let e = eigh_symmetric(&a).unwrap();
        for k in 0..6 {
            let v = e.vector(k);
            let big = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(eigh_symmetric(&a), Err(Error::Validation(_))));
    }
}
