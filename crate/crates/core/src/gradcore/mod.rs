//! Dense `f64` tensors with a reverse-mode tape, plus the symmetric
//! eigensolver the spectral bases are built on.

mod check;
mod graph;
pub(crate) mod kernels;
mod linalg;
mod tensor;

pub use check::grad_check;
pub(crate) use graph::{sigmoid, softplus};
pub use graph::{Gradients, Graph, OpKind, Var};
pub(crate) use linalg::fix_sign;
pub use linalg::{eigh_symmetric, jacobi_eigh, tridiagonal_eigh, Eigh, JACOBI_MAX_DIM};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;

    fn rand_t(shape: Vec<usize>, seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Contracts an op output with fixed random weights so every output entry
    /// influences the scalar.
    fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let w = rand_t(g.value(y).shape().to_vec(), seed);
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = rand_t(vec![3, 4], 1);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let mv = g.constant(m.clone());
        let out = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(out), &m);

        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a = rand_t(vec![4, 5], 2);
        let b = rand_t(vec![5, 3], 3);
        let bb = b.clone();
        let err_a = grad_check(
            |g, x| {
                let c = g.constant(bb.clone());
                let y = g.matmul(x, c)?;
                weighted(g, y, 9)
            },
            &a,
            STEP,
        )
        .unwrap();
        let err_b = grad_check(
            |g, x| {
                let c = g.constant(a.clone());
                let y = g.matmul(c, x)?;
                weighted(g, y, 9)
            },
            &b,
            STEP,
        )
        .unwrap();
        assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0; 4], vec![0.0, 3f64.ln(), 0.0, 0.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        assert!(v.row(0).iter().all(|p| (p - 0.25).abs() < 1e-15));
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax_rows(x), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn softmax_gradient() {
        let x = rand_t(vec![3, 4], 4);
        let err = grad_check(
            |g, v| {
                let y = g.softmax_rows(v)?;
                weighted(g, y, 5)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_of_constant_is_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 4], 3.0));
        let gamma = g.constant(Tensor::full(vec![4], 2.0));
        let beta = g.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn gelu_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1]));
        let y = g.gelu(x);
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn elementwise_and_layout_gradients() {
        let x = rand_t(vec![6, 4], 10);
        type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
        let cases: Vec<(&str, Build)> = vec![
            (
                "add",
                Box::new(|g, v| {
                    let c = g.constant(rand_t(vec![6, 4], 1));
                    let y = g.add(v, c)?;
                    let y = g.mul(y, y)?;
                    weighted(g, y, 2)
                }),
            ),
            (
                "mul",
                Box::new(|g, v| {
                    let c = g.constant(rand_t(vec![6, 4], 3));
                    let y = g.mul(v, c)?;
                    let y = g.mul(y, v)?;
                    weighted(g, y, 2)
                }),
            ),
            (
                "scale",
                Box::new(|g, v| {
                    let y = g.scale(v, -1.7);
                    let y = g.mul(y, v)?;
                    weighted(g, y, 2)
                }),
            ),
            (
                "add_row",
                Box::new(|g, v| {
                    let b = g.constant(rand_t(vec![4], 4));
                    let y = g.add_row(v, b)?;
                    let y = g.mul(y, y)?;
                    weighted(g, y, 2)
                }),
            ),
            (
                "mul_col",
                Box::new(|g, v| {
                    let c = g.constant(rand_t(vec![6, 1], 5));
                    let y = g.mul_col(v, c)?;
                    let y = g.mul(y, v)?;
                    weighted(g, y, 2)
                }),
            ),
            (
                "layer_norm",
                Box::new(|g, v| {
                    let gamma = g.constant(rand_t(vec![4], 6));
                    let beta = g.constant(rand_t(vec![4], 7));
                    let y = g.layer_norm(v, gamma, beta)?;
                    weighted(g, y, 2)
                }),
            ),
            (
                "gelu",
                Box::new(|g, v| {
                    let y = g.gelu(v);
                    weighted(g, y, 2)
                }),
            ),
            (
                "mean_rows",
                Box::new(|g, v| {
                    let y = g.mean_rows(v, 3)?;
                    let y = g.mul(y, y)?;
                    weighted(g, y, 2)
                }),
            ),
            (
                "transpose",
                Box::new(|g, v| {
                    let y = g.transpose(v)?;
                    let y = g.mul(y, y)?;
                    weighted(g, y, 2)
                }),
            ),
            (
                "tile_rows",
                Box::new(|g, v| {
                    let y = g.tile_rows(v, 3)?;
                    let y = g.mul(y, y)?;
                    weighted(g, y, 2)
                }),
            ),
            (
                "heads",
                Box::new(|g, v| {
                    let y = g.split_heads(v, 2, 3, 2)?;
                    let y = g.mul(y, y)?;
                    let y = g.merge_heads(y, 2, 3, 2)?;
                    weighted(g, y, 2)
                }),
            ),
            (
                "prepend_take",
                Box::new(|g, v| {
                    let r = g.constant(rand_t(vec![1, 4], 8));
                    let y = g.prepend_row(v, r, 2)?;
                    let y = g.mul(y, y)?;
                    let z = g.take_first_row(y, 3)?;
                    let a = weighted(g, y, 2)?;
                    let b = weighted(g, z, 3)?;
                    g.add(a, b)
                }),
            ),
            (
                "bmm",
                Box::new(|g, v| {
                    let a = g.split_heads(v, 2, 3, 2)?; // [4, 3, 2]
                    let t = g.constant(rand_t(vec![4, 2, 5], 9));
                    let y = g.bmm(a, t)?;
                    let s = g.bmm_nt(a, a)?;
                    let p = weighted(g, y, 2)?;
                    let q = weighted(g, s, 3)?;
                    g.add(p, q)
                }),
            ),
            (
                "bce",
                Box::new(|g, v| {
                    let z = g.mean_rows(v, 6)?; // [1, 4]
                    g.bce_with_logits(z, &[1.0, 0.0, 1.0, 0.0])
                }),
            ),
            (
                "focal",
                Box::new(|g, v| {
                    let z = g.mean_rows(v, 6)?;
                    g.focal_with_logits(z, &[1.0, 0.0, 0.0, 1.0], 2.0, 0.25)
                }),
            ),
        ];
        for (name, f) in cases {
            let err = grad_check(|g, v| f(g, v), &x, STEP).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let x = g.leaf(rand_t(vec![2, 2], 1));
        let a = g.mul(x, x).unwrap();
        let b = g.add(a, x).unwrap();
        let c = g.add(b, a).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.visited(), g.len());
        // d/dx of sum(2x² + x) = 4x + 1
        let xv = g.value(x).data().to_vec();
        for (gv, xv) in grads.get(x).unwrap().iter().zip(xv) {
            assert!((gv - (4.0 * xv + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn injected_fault_breaks_gradient_check() {
        let x = rand_t(vec![3, 4], 2);
        let build = |fault: Option<OpKind>| {
            move |g: &mut Graph, v: Var| {
                if let Some(k) = fault {
                    g.inject_fault(k);
                }
                let y = g.softmax_rows(v)?;
                weighted(g, y, 3)
            }
        };
        assert!(grad_check(build(None), &x, STEP).unwrap() < 1e-6);
        assert!(grad_check(build(Some(OpKind::SoftmaxRows)), &x, STEP).unwrap() > 1.0);
    }

    #[test]
    fn multiply_counter_tracks_products() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![4, 5]));
        let b = g.constant(Tensor::zeros(vec![5, 3]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.multiplies(), 60);
        let p = g.constant(Tensor::zeros(vec![2, 3, 4]));
        let q = g.constant(Tensor::zeros(vec![2, 5, 4]));
        g.bmm_nt(p, q).unwrap();
        assert_eq!(g.multiplies(), 60 + 2 * 3 * 4 * 5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in prop::collection::vec(-700.0f64..700.0, 12)) {
                let mut g = Graph::new();
                let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
                let y = g.softmax_rows(x).unwrap();
                for r in 0..3 {
                    let s: f64 = g.value(y).row(r).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    prop_assert!(g.value(y).row(r).iter().all(|p| *p >= 0.0));
                }
            }
        }
    }
}
