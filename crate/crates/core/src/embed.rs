//! Spectral token embedding: `h_i = (s_i·ω_i)·W_φ,i (+ b_φ,i) + e_pos,i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcore::{Graph, Tensor, Var};
use crate::spectra::TokenSequence;

/// Standard deviation of the normal initialisation used for all weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralEmbedder {
    n: usize,
    d_e: usize,
    shared: bool,
    /// `n×d_e`, or `1×d_e` when shared.
    pub projection: Tensor,
    /// `n×d_e` when enabled.
    pub bias: Option<Tensor>,
    /// `n×d_e` learned spectral positional embeddings.
    pub positions: Tensor,
    /// Fixed hierarchy weights ω, one per component.
    weights: Vec<f64>,
}

/// Graph handles for the trainable embedder tensors.
#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    pub projection: Var,
    pub bias: Option<Var>,
    pub positions: Var,
}

/// Creates an embedder with `N(0, 0.02²)` projection and positions, zero bias,
/// and unit hierarchy weights (see [`SpectralEmbedder::with_weights`]).
pub fn init_embedder(n: usize, d_e: usize, shared: bool, bias: bool, seed: u64) -> Result<SpectralEmbedder> {
    if n == 0 || d_e == 0 {
        return Err(Error::invalid(format!("embedder needs n ≥ 1 and d_e ≥ 1, got n = {n}, d_e = {d_e}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj_rows = if shared { 1 } else { n };
    let projection = Tensor::randn(vec![proj_rows, d_e], INIT_STD, &mut rng);
    let positions = Tensor::randn(vec![n, d_e], INIT_STD, &mut rng);
    Ok(SpectralEmbedder {
        n,
        d_e,
        shared,
        projection,
        bias: bias.then(|| Tensor::zeros(vec![n, d_e])),
        positions,
        weights: vec![1.0; n],
    })
}

impl SpectralEmbedder {
    pub fn with_weights(mut self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.n {
            return Err(Error::dim(format!("{} hierarchy weights for {} components", weights.len(), self.n)));
        }
        self.weights = weights.to_vec();
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn param_count(&self) -> usize {
        self.projection.len() + self.bias.as_ref().map_or(0, Tensor::len) + self.positions.len()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("embed.projection", &self.projection)];
        if let Some(b) = &self.bias {
            out.push(("embed.bias", b));
        }
        out.push(("embed.positions", &self.positions));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.projection];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out.push(&mut self.positions);
        out
    }

    pub fn bind(&self, g: &mut Graph) -> EmbedVars {
        EmbedVars {
            projection: g.leaf(self.projection.clone()),
            bias: self.bias.as_ref().map(|b| g.leaf(b.clone())),
            positions: g.leaf(self.positions.clone()),
        }
    }

    /// Embeds `batch` token sequences stored back to back in `tokens`
    /// (`batch·n` values), returning a `[batch·n, d_e]` node.
    pub fn embed_graph(&self, g: &mut Graph, vars: EmbedVars, tokens: &[f64], batch: usize) -> Result<Var> {
        if tokens.len() != batch * self.n {
            return Err(Error::dim(format!(
                "{} token values for a batch of {batch} sequences of {}",
                tokens.len(),
                self.n
            )));
        }
        let scaled: Vec<f64> =
            tokens.chunks(self.n).flat_map(|seq| seq.iter().zip(&self.weights).map(|(s, w)| s * w)).collect();
        let coeffs = g.constant(Tensor::new(vec![batch * self.n, 1], scaled)?);
        let reps = if self.shared { batch * self.n } else { batch };
        let proj = g.tile_rows(vars.projection, reps)?;
        let mut h = g.mul_col(proj, coeffs)?;
        if let Some(b) = vars.bias {
            let tiled = g.tile_rows(b, batch)?;
            h = g.add(h, tiled)?;
        }
        let pos = g.tile_rows(vars.positions, batch)?;
        g.add(h, pos)
    }

    /// Embedding matrix `H` (`n×d_e`) of one token sequence.
    pub fn embed(&self, tokens: &TokenSequence) -> Result<Tensor> {
        if tokens.len() != self.n {
            return Err(Error::dim(format!("{} tokens for an embedder of {} components", tokens.len(), self.n)));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let h = self.embed_graph(&mut g, vars, &tokens.coefficients, 1)?;
        Ok(g.value(h).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::grad_check;
    use crate::spectra::BasisKind;

    fn tokens(c: Vec<f64>) -> TokenSequence {
        let n = c.len();
        TokenSequence { coefficients: c, kind: BasisKind::Pca, ordering_keys: (1..=n).map(|i| i as f64).collect() }
    }

    fn singular_values(h: &Tensor) -> Vec<f64> {
        let hth = h.transpose().unwrap().matmul(h).unwrap();
        let mut vals: Vec<f64> =
            crate::gradcore::eigh_symmetric(&hth).unwrap().values.iter().map(|v| v.max(0.0).sqrt()).collect();
        vals.reverse();
        vals
    }

    #[test]
    fn zero_tokens_give_positions() {
        let e = init_embedder(5, 4, false, false, 1).unwrap();
        let h = e.embed(&tokens(vec![0.0; 5])).unwrap();
        assert_eq!(h, e.positions);
    }

    #[test]
    fn pca_weights_halve_second_component() {
        let mut e = init_embedder(2, 3, false, false, 2).unwrap();
        let row = e.projection.row(0).to_vec();
        e.projection.data_mut()[3..].copy_from_slice(&row);
        let e = e.with_weights(&[1.0, 0.5]).unwrap();
        let h = e.embed(&tokens(vec![2.0, 2.0])).unwrap();
        for j in 0..3 {
            let first = h.at(0, j) - e.positions.at(0, j);
            let second = h.at(1, j) - e.positions.at(1, j);
            assert!((second - 0.5 * first).abs() < 1e-15);
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(init_embedder(16, 16, false, true, 7).unwrap(), init_embedder(16, 16, false, true, 7).unwrap());
        assert_ne!(init_embedder(16, 16, false, false, 7).unwrap(), init_embedder(16, 16, false, false, 8).unwrap());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(init_embedder(16, 16, true, false, 0).unwrap().projection.shape(), &[1, 16]);
        assert_eq!(init_embedder(16, 16, false, false, 0).unwrap().param_count(), 512);
        assert_eq!(init_embedder(16, 16, false, true, 0).unwrap().param_count(), 768);
        assert!(init_embedder(0, 4, false, false, 0).is_err());
        assert!(init_embedder(4, 0, false, false, 0).is_err());
    }

    #[test]
    fn length_mismatch_rejected() {
        let e = init_embedder(4, 2, false, false, 0).unwrap();
        assert!(matches!(e.embed(&tokens(vec![1.0; 3])), Err(Error::Dimension(_))));
    }

    #[test]
    fn shared_mode_is_rank_one_after_positions() {
        let e = init_embedder(6, 5, true, false, 3).unwrap().with_weights(&[1.0, 0.5, 0.3, 0.25, 0.2, 0.1]).unwrap();
        let h = e.embed(&tokens(vec![1.0, -2.0, 0.5, 3.0, 0.7, -1.1])).unwrap();
        let diff: Vec<f64> = h.data().iter().zip(e.positions.data()).map(|(a, b)| a - b).collect();
        let sv = singular_values(&Tensor::new(vec![6, 5], diff).unwrap());
        assert!(sv[0] > 1e-3);
        assert!(sv[1..].iter().all(|s| *s < 1e-7 * sv[0]), "{sv:?}");

        let e = init_embedder(6, 5, false, false, 3).unwrap();
        let h = e.embed(&tokens(vec![1.0, -2.0, 0.5, 3.0, 0.7, -1.1])).unwrap();
        let diff: Vec<f64> = h.data().iter().zip(e.positions.data()).map(|(a, b)| a - b).collect();
        let sv = singular_values(&Tensor::new(vec![6, 5], diff).unwrap());
        assert!(sv[4] > 1e-6, "component-wise mode should reach full rank: {sv:?}");
    }

    #[test]
    fn degenerate_components_stay_distinct() {
        // equal weights, equal coefficients and equal projection rows
        let mut e = init_embedder(4, 3, true, false, 5).unwrap();
        e.positions =
            Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]])
                .unwrap();
        let h = e.embed(&tokens(vec![0.8; 4])).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                let d = h.row(i).iter().zip(h.row(j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(d > 0.5);
            }
        }
    }

    #[test]
    fn linear_in_tokens_without_bias() {
        let e = init_embedder(5, 4, false, false, 9).unwrap().with_weights(&[1.0, 0.5, 0.4, 0.3, 0.2]).unwrap();
        let s = vec![0.3, -1.2, 2.0, 0.1, -0.7];
        let a = 3.7;
        let h1 = e.embed(&tokens(s.clone())).unwrap();
        let h2 = e.embed(&tokens(s.iter().map(|v| a * v).collect())).unwrap();
        for ((x, y), p) in h1.data().iter().zip(h2.data()).zip(e.positions.data()) {
            assert!(((y - p) - a * (x - p)).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let e = init_embedder(3, 4, false, true, 4).unwrap().with_weights(&[1.0, 0.5, 1.0 / 3.0]).unwrap();
        let toks = vec![0.4, -1.5, 2.2, 1.0, 0.3, -0.6];
        let target = Tensor::randn(vec![6, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let loss = |g: &mut Graph, vars: EmbedVars| -> Result<Var> {
            let h = e.embed_graph(g, vars, &toks, 2)?;
            let t = g.constant(target.clone());
            let p = g.mul(h, t)?;
            let q = g.mul(p, h)?;
            Ok(g.sum(q))
        };
        let bind_with = |g: &mut Graph, which: usize, x: Var| {
            let mut vars = e.bind(g);
            match which {
                0 => vars.projection = x,
                1 => vars.bias = Some(x),
                _ => vars.positions = x,
            }
            vars
        };
        for (which, t) in [&e.projection, e.bias.as_ref().unwrap(), &e.positions].into_iter().enumerate() {
            let t = Tensor::randn(t.shape().to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(which as u64 + 10));
            let err = grad_check(
                |g, x| {
                    let v = bind_with(g, which, x);
                    loss(g, v)
                },
                &t,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "tensor {which}: {err}");
        }
    }
}
