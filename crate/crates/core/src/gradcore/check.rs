use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Entries whose gradient is below this magnitude are compared absolutely;
/// a central difference cannot resolve them beyond rounding noise.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Largest relative gap between the tape gradient of `f` at `x` and a
/// central finite difference with step `step`.
///
/// `f` must record a scalar-valued computation of its input on the given graph.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let input = graph.leaf(x.clone());
    let out = f(&mut graph, input)?;
    let analytic = graph.backward(out)?.get_or_zeros(input, x.len());

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(probe);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - step;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(DENOM_FLOOR);
        let err = (analytic[i] - numeric).abs() / denom;
        if !err.is_finite() {
            return Err(Error::numeric(format!("gradient check produced {err} at entry {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |g: &mut Graph, v: Var| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let out = f(&mut g, v).unwrap();
        assert_eq!(g.backward(out).unwrap().get(v).unwrap(), &[2.0, 4.0]);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let z = g.scale(v, 0.0);
                Ok(g.sum(z))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
