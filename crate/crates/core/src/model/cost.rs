use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{attention_graph, ModelSpec, Variant};
use crate::error::Result;
use crate::gradcore::{Graph, Tensor};

/// Closed-form multiply counts of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub cost_spec: u64,
    pub cost_embed: u64,
    pub cost_trans_per_layer: u64,
    pub total: u64,
}

/// `total = cost_spec + cost_embed + L·cost_trans` with
/// `cost_trans = 3·n·d_e² + 2·n²·d_e`.
///
/// For a spectral model `cost_spec = n·m` (basis projection) and
/// `cost_embed = n·d_e`. For a spatial model the patch embedding touches every
/// pixel once per output channel, `cost_spec = m·d_e`, and `cost_embed = N_P·d_e`
/// covers the positional embedding; `n` in the transformer term is `N_P`.
pub fn count_cost(spec: &ModelSpec) -> Cost {
    let n = spec.n_tokens as u64;
    let d = spec.d_e as u64;
    let m = spec.m() as u64;
    let cost_spec = match spec.variant {
        Variant::Spectral => n * m,
        Variant::Spatial => m * d,
    };
    let cost_embed = n * d;
    let cost_trans_per_layer = 3 * n * d * d + 2 * n * n * d;
    Cost {
        cost_spec,
        cost_embed,
        cost_trans_per_layer,
        total: cost_spec + cost_embed + spec.layers as u64 * cost_trans_per_layer,
    }
}

/// Runs the Q/K/V projections and the two attention products of one layer on
/// random `n×d_e` tokens and returns the graph's scalar-multiply counter.
pub fn stripped_layer_multiplies(n: usize, d_e: usize, heads: usize, seed: u64) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let h = g.constant(Tensor::randn(vec![n, d_e], 1.0, &mut rng));
    let mut proj = || g.constant(Tensor::randn(vec![d_e, d_e], 0.1, &mut rng));
    let (wq, wk, wv) = (proj(), proj(), proj());
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let q = g.split_heads(q, 1, n, heads)?;
    let k = g.split_heads(k, 1, n, heads)?;
    let v = g.split_heads(v, 1, n, heads)?;
    attention_graph(&mut g, q, k, v, d_e / heads)?;
    Ok(g.multiplies())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::BasisKind;

    #[test]
    fn simulation_config_costs() {
        let c = count_cost(&ModelSpec::spectral(BasisKind::Pca));
        assert_eq!(c.cost_trans_per_layer, 3 * 16 * 256 + 2 * 256 * 16);
        assert_eq!(c.cost_trans_per_layer, 20480);
        assert_eq!(c.cost_spec, 12544);
        assert_eq!(c.cost_embed, 256);
        assert_eq!(c.total, 12544 + 256 + 2 * 20480);
    }

    #[test]
    fn instrumented_count_matches_closed_form() {
        for (n, d, h) in [(16, 16, 2), (5, 8, 1), (33, 12, 4), (1, 4, 2)] {
            let spec = ModelSpec { n_tokens: n, d_e: d, heads: h, ..ModelSpec::spectral(BasisKind::Pca) };
            assert_eq!(stripped_layer_multiplies(n, d, h, 0).unwrap(), count_cost(&spec).cost_trans_per_layer);
        }
    }
}
