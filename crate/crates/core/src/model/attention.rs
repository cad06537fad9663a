use crate::error::{Error, Result};
use crate::gradcore::{Graph, Tensor, Var};

/// Scaled dot-product attention recorded on a graph.
///
/// `q`, `k`, `v` are `[groups, seq, d_k]`; returns `(output, weights)` where
/// `weights` is the `[groups, seq, seq]` softmax of `QKᵀ/√d_k`.
pub fn attention_graph(g: &mut Graph, q: Var, k: Var, v: Var, d_k: usize) -> Result<(Var, Var)> {
    if d_k == 0 {
        return Err(Error::invalid("key dimension d_k must be positive"));
    }
    let scores = g.bmm_nt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax_rows(scaled)?;
    let out = g.bmm(weights, v)?;
    Ok((out, weights))
}

fn as_batched(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [r, c] => t.clone().reshape(vec![1, *r, *c]),
        s => Err(Error::dim(format!("expected a matrix, got {s:?}"))),
    }
}

/// `softmax(QKᵀ/√d_k)·V` for single matrices, returning the output and the
/// attention weights.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, d_k: usize) -> Result<(Tensor, Tensor)> {
    if d_k == 0 {
        return Err(Error::invalid("key dimension d_k must be positive"));
    }
    if q.rows() != k.rows() || k.rows() != v.rows() {
        return Err(Error::dim(format!(
            "attention needs equal row counts, got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(as_batched(q)?), g.constant(as_batched(k)?), g.constant(as_batched(v)?));
    let (out, weights) = attention_graph(&mut g, qv, kv, vv, d_k)?;
    let n = q.rows();
    Ok((g.value(out).clone().reshape(vec![n, v.cols()])?, g.value(weights).clone().reshape(vec![n, n])?))
}

/// Interaction weights `α_ij = softmax_j((h_i W_Q)(h_j W_K)ᵀ/√d_k)`.
pub fn attention_weights(h: &Tensor, w_q: &Tensor, w_k: &Tensor, d_k: usize) -> Result<Tensor> {
    let q = h.matmul(w_q)?;
    let k = h.matmul(w_k)?;
    if q.cols() != k.cols() {
        return Err(Error::dim(format!("query width {} differs from key width {}", q.cols(), k.cols())));
    }
    let v = Tensor::zeros(vec![h.rows(), 1]);
    Ok(attention(&q, &k, &v, d_k)?.1)
}

/// Records `h′ = α·(H W_V)` on a graph; rows of `alpha` are mixing weights.
pub fn contextualize_graph(g: &mut Graph, h: Var, alpha: Var, w_v: Var) -> Result<Var> {
    let values = g.matmul(h, w_v)?;
    g.matmul(alpha, values)
}

/// Contextualised tokens `h′_i = Σ_k α_ik (h_k W_V)`.
pub fn contextualize(h: &Tensor, alpha: &Tensor, w_v: &Tensor) -> Result<Tensor> {
    let n = h.rows();
    if alpha.shape() != [n, n] {
        return Err(Error::dim(format!("alpha {:?} does not match {n} tokens", alpha.shape())));
    }
    for r in 0..n {
        let s: f64 = alpha.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("alpha row {r} sums to {s}, not 1")));
        }
    }
    let mut g = Graph::new();
    let (hv, av, wv) = (g.constant(h.clone()), g.constant(alpha.clone()), g.constant(w_v.clone()));
    let out = contextualize_graph(&mut g, hv, av, wv)?;
    Ok(g.value(out).clone())
}
