//! Spectral and spatial ViT classifiers sharing one pre-norm transformer
//! backbone.
//!
//! All trainable tensors are exposed as a flat, ordered list
//! ([`VitClassifier::params`]). Training binds that list as graph leaves,
//! calls [`VitClassifier::forward_graph`] and reads gradients back in the same
//! order, so checkpoint blobs, optimiser state and gradient checks all share
//! one layout.

mod attention;
mod checkpoint;
mod cost;
mod patch;

pub use attention::{attention, attention_graph, attention_weights, contextualize, contextualize_graph};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry};
pub use cost::{count_cost, stripped_layer_multiplies, Cost};
pub use patch::{patchify, patchify_batch, unpatchify};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{init_embedder, EmbedVars, SpectralEmbedder, INIT_STD};
use crate::error::{Error, Result};
use crate::gradcore::{Graph, Tensor, Var};
use crate::spectra::{BasisKind, SpectralBasis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Spectral,
    Spatial,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    ClassToken,
}

/// Architecture description. Binary classification with a single logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Basis used by the spectral variant; ignored for spatial models.
    pub basis_kind: BasisKind,
    /// Spectral components `n`, or patches `N_P` for the spatial variant.
    pub n_tokens: usize,
    /// Patch side `p` (spatial only).
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
    pub d_e: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub shared_embed: bool,
    #[serde(default)]
    pub bias: bool,
    /// Laplacian diffusion scale.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    1.0
}

impl ModelSpec {
    /// The compact spectral configuration used in the simulation study:
    /// 28×28 images, 16 components, `d_e = 16`, 2 heads, 2 layers.
    pub fn spectral(kind: BasisKind) -> Self {
        ModelSpec {
            variant: Variant::Spectral,
            basis_kind: kind,
            n_tokens: 16,
            patch_size: 0,
            height: 28,
            width: 28,
            d_e: 16,
            d_ff: 32,
            heads: 2,
            layers: 2,
            pooling: Pooling::Mean,
            shared_embed: false,
            bias: false,
            tau: 1.0,
        }
    }

    /// The matching spatial ViT: 7×7 patches (16 tokens) on 28×28 images.
    pub fn spatial() -> Self {
        ModelSpec { variant: Variant::Spatial, patch_size: 7, ..ModelSpec::spectral(BasisKind::Pca) }
    }

    /// Pixels per image.
    pub fn m(&self) -> usize {
        self.height * self.width
    }

    /// Key dimension per head.
    pub fn d_k(&self) -> usize {
        self.d_e / self.heads.max(1)
    }

    /// Sequence length seen by the backbone, including a class token.
    pub fn seq_len(&self) -> usize {
        self.n_tokens + usize::from(self.pooling == Pooling::ClassToken)
    }

    /// Feature values per image fed to [`VitClassifier::forward_graph`].
    pub fn feature_len(&self) -> usize {
        match self.variant {
            Variant::Spectral => self.n_tokens,
            Variant::Spatial => self.m(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_tokens", self.n_tokens),
            ("height", self.height),
            ("width", self.width),
            ("d_e", self.d_e),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !self.d_e.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("d_e = {} is not divisible by {} heads", self.d_e, self.heads)));
        }
        match self.variant {
            Variant::Spatial => {
                let p = self.patch_size;
                if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
                    return Err(Error::invalid(format!(
                        "patch size {p} does not divide a {}×{} image",
                        self.height, self.width
                    )));
                }
                let np = (self.height / p) * (self.width / p);
                if self.n_tokens != np {
                    return Err(Error::invalid(format!("n_tokens = {} but {p}×{p} patches give {np}", self.n_tokens)));
                }
            }
            Variant::Spectral => {
                if self.n_tokens > self.m() {
                    return Err(Error::invalid(format!("{} components exceed {} pixels", self.n_tokens, self.m())));
                }
                if !(self.tau >= 0.0 && self.tau.is_finite()) {
                    return Err(Error::invalid(format!("tau must be finite and ≥ 0, got {}", self.tau)));
                }
            }
        }
        Ok(())
    }
}

/// Trainable tensors of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
}

const LAYER_TENSOR_NAMES: [&str; 12] =
    ["ln1_gamma", "ln1_beta", "w_q", "w_k", "w_v", "w_o", "ln2_gamma", "ln2_beta", "ff1_w", "ff1_b", "ff2_w", "ff2_b"];

impl LayerParams {
    fn init(d_e: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = |r, c| Tensor::randn(vec![r, c], INIT_STD, rng);
        let (w_q, w_k, w_v, w_o) = (w(d_e, d_e), w(d_e, d_e), w(d_e, d_e), w(d_e, d_e));
        let (ff1_w, ff2_w) = (w(d_e, d_ff), w(d_ff, d_e));
        LayerParams {
            ln1_gamma: Tensor::full(vec![1, d_e], 1.0),
            ln1_beta: Tensor::zeros(vec![1, d_e]),
            w_q,
            w_k,
            w_v,
            w_o,
            ln2_gamma: Tensor::full(vec![1, d_e], 1.0),
            ln2_beta: Tensor::zeros(vec![1, d_e]),
            ff1_w,
            ff1_b: Tensor::zeros(vec![1, d_ff]),
            ff2_w,
            ff2_b: Tensor::zeros(vec![1, d_e]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.ff1_w,
            &self.ff1_b,
            &self.ff2_w,
            &self.ff2_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Token construction in front of the backbone.
#[derive(Clone, Debug, PartialEq)]
pub enum Tokenizer {
    Spectral {
        basis: SpectralBasis,
        embedder: SpectralEmbedder,
    },
    Spatial {
        /// `p²×d_e` linear patch embedding `E`.
        projection: Tensor,
        /// `1×d_e`.
        bias: Tensor,
        /// `N_P×d_e` spatial positional embeddings.
        positions: Tensor,
    },
}

/// Trainable parameter totals split by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub embedding: usize,
    pub class_token: usize,
    pub layers: usize,
    pub final_norm: usize,
    pub head: usize,
    pub total: usize,
}

/// Attention weights of every layer for one forward pass, each
/// `[batch·heads, seq, seq]`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    pub attention: Vec<Tensor>,
}

/// Graph nodes produced by [`VitClassifier::forward_graph`].
#[derive(Clone, Debug)]
pub struct GraphOutput {
    /// `[batch, 1]`.
    pub logits: Var,
    /// Per layer `[batch·heads, seq, seq]`.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitClassifier {
    spec: ModelSpec,
    pub tokenizer: Tokenizer,
    pub class_token: Option<Tensor>,
    pub layers: Vec<LayerParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    /// `d_e×1`.
    pub head_w: Tensor,
    /// `1×1`.
    pub head_b: Tensor,
}

/// Images per forward chunk at inference time.
const INFERENCE_CHUNK: usize = 128;

impl VitClassifier {
    /// Spectral ViT over a fixed basis. The basis must agree with `spec` in
    /// kind, component count and image size.
    pub fn spectral(spec: ModelSpec, basis: SpectralBasis, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.variant != Variant::Spectral {
            return Err(Error::invalid("spectral constructor called with a spatial spec"));
        }
        if basis.kind() != spec.basis_kind
            || basis.n() != spec.n_tokens
            || basis.height() != spec.height
            || basis.width() != spec.width
        {
            return Err(Error::invalid(format!(
                "basis ({} n={} {}×{}) does not match spec ({} n={} {}×{})",
                basis.kind().name(),
                basis.n(),
                basis.height(),
                basis.width(),
                spec.basis_kind.name(),
                spec.n_tokens,
                spec.height,
                spec.width
            )));
        }
        let embedder = init_embedder(spec.n_tokens, spec.d_e, spec.shared_embed, spec.bias, seed)?
            .with_weights(basis.weights())?;
        Ok(Self::with_tokenizer(spec, Tokenizer::Spectral { basis, embedder }, seed))
    }

    /// Patch-based ViT.
    pub fn spatial(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.variant != Variant::Spatial {
            return Err(Error::invalid("spatial constructor called with a spectral spec"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p2 = spec.patch_size * spec.patch_size;
        let tokenizer = Tokenizer::Spatial {
            projection: Tensor::randn(vec![p2, spec.d_e], INIT_STD, &mut rng),
            bias: Tensor::zeros(vec![1, spec.d_e]),
            positions: Tensor::randn(vec![spec.n_tokens, spec.d_e], INIT_STD, &mut rng),
        };
        Ok(Self::with_tokenizer(spec, tokenizer, seed))
    }

    fn with_tokenizer(spec: ModelSpec, tokenizer: Tokenizer, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let d = spec.d_e;
        let class_token = (spec.pooling == Pooling::ClassToken).then(|| Tensor::randn(vec![1, d], INIT_STD, &mut rng));
        let layers = (0..spec.layers).map(|_| LayerParams::init(d, spec.d_ff, &mut rng)).collect();
        let head_w = Tensor::randn(vec![d, 1], INIT_STD, &mut rng);
        VitClassifier {
            spec,
            tokenizer,
            class_token,
            layers,
            norm_gamma: Tensor::full(vec![1, d], 1.0),
            norm_beta: Tensor::zeros(vec![1, d]),
            head_w,
            head_b: Tensor::zeros(vec![1, 1]),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn basis(&self) -> Option<&SpectralBasis> {
        match &self.tokenizer {
            Tokenizer::Spectral { basis, .. } => Some(basis),
            Tokenizer::Spatial { .. } => None,
        }
    }

    /// Every trainable tensor with a stable name, in blob order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = match &self.tokenizer {
            Tokenizer::Spectral { embedder, .. } => {
                embedder.tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect()
            }
            Tokenizer::Spatial { projection, bias, positions } => vec![
                ("patch.projection".into(), projection),
                ("patch.bias".into(), bias),
                ("patch.positions".into(), positions),
            ],
        };
        if let Some(c) = &self.class_token {
            out.push(("class_token".into(), c));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("norm.gamma".into(), &self.norm_gamma));
        out.push(("norm.beta".into(), &self.norm_beta));
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    /// Mutable view in the same order as [`VitClassifier::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = match &mut self.tokenizer {
            Tokenizer::Spectral { embedder, .. } => embedder.tensors_mut(),
            Tokenizer::Spatial { projection, bias, positions } => vec![projection, bias, positions],
        };
        if let Some(c) = &mut self.class_token {
            out.push(c);
        }
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.norm_gamma);
        out.push(&mut self.norm_beta);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn param_breakdown(&self) -> ParamCount {
        let embedding = match &self.tokenizer {
            Tokenizer::Spectral { embedder, .. } => embedder.param_count(),
            Tokenizer::Spatial { projection, bias, positions } => projection.len() + bias.len() + positions.len(),
        };
        let class_token = self.class_token.as_ref().map_or(0, Tensor::len);
        let layers = self.layers.iter().map(LayerParams::param_count).sum();
        let final_norm = self.norm_gamma.len() + self.norm_beta.len();
        let head = self.head_w.len() + self.head_b.len();
        ParamCount {
            embedding,
            class_token,
            layers,
            final_norm,
            head,
            total: embedding + class_token + layers + final_norm + head,
        }
    }

    /// Binds every parameter as a graph leaf, in [`VitClassifier::params`] order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| g.leaf(t.clone())).collect()
    }

    /// Per-image model inputs: spectral tokens (`n` each) or flattened
    /// patches (`m` each, patch-major). `images` holds `count` row-major
    /// images back to back.
    pub fn features(&self, images: &[f64], count: usize) -> Result<Vec<f64>> {
        let m = self.spec.m();
        if images.len() != count * m {
            return Err(Error::invalid(format!(
                "{} values for {count} images of {}×{}",
                images.len(),
                self.spec.height,
                self.spec.width
            )));
        }
        match &self.tokenizer {
            Tokenizer::Spectral { basis, .. } => basis.tokenize_batch(images, count),
            Tokenizer::Spatial { .. } => {
                patchify_batch(images, count, self.spec.height, self.spec.width, self.spec.patch_size)
            }
        }
    }

    /// Records the forward pass for `batch` feature vectors on `g`.
    /// `vars` must come from [`VitClassifier::bind`] on the same graph.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], features: &[f64], batch: usize) -> Result<GraphOutput> {
        let spec = &self.spec;
        if features.len() != batch * spec.feature_len() {
            return Err(Error::dim(format!(
                "{} feature values for a batch of {batch} (expected {} each)",
                features.len(),
                spec.feature_len()
            )));
        }
        let mut next = vars.iter().copied();
        let mut take = || next.next().ok_or_else(|| Error::invalid("parameter list too short"));
        let n = spec.n_tokens;
        let mut x = match &self.tokenizer {
            Tokenizer::Spectral { embedder, .. } => {
                let projection = take()?;
                let bias = if embedder.bias.is_some() { Some(take()?) } else { None };
                let positions = take()?;
                embedder.embed_graph(g, EmbedVars { projection, bias, positions }, features, batch)?
            }
            Tokenizer::Spatial { .. } => {
                let (proj, bias, pos) = (take()?, take()?, take()?);
                let p2 = spec.patch_size * spec.patch_size;
                let patches = g.constant(Tensor::new(vec![batch * n, p2], features.to_vec())?);
                let e = g.matmul(patches, proj)?;
                let e = g.add_row(e, bias)?;
                let pos = g.tile_rows(pos, batch)?;
                g.add(e, pos)?
            }
        };
        if self.class_token.is_some() {
            let cls = take()?;
            x = g.prepend_row(x, cls, n)?;
        }
        let seq = spec.seq_len();
        let (heads, d_k) = (spec.heads, spec.d_k());
        let mut attention = Vec::with_capacity(self.layers.len());
        for _ in &self.layers {
            let [ln1_g, ln1_b, w_q, w_k, w_v, w_o, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b] =
                std::array::from_fn::<_, 12, _>(|_| take());
            let a = g.layer_norm(x, ln1_g?, ln1_b?)?;
            let q = g.matmul(a, w_q?)?;
            let k = g.matmul(a, w_k?)?;
            let v = g.matmul(a, w_v?)?;
            let q = g.split_heads(q, batch, seq, heads)?;
            let k = g.split_heads(k, batch, seq, heads)?;
            let v = g.split_heads(v, batch, seq, heads)?;
            let (o, weights) = attention_graph(g, q, k, v, d_k)?;
            attention.push(weights);
            let o = g.merge_heads(o, batch, seq, heads)?;
            let o = g.matmul(o, w_o?)?;
            x = g.add(x, o)?;
            let b = g.layer_norm(x, ln2_g?, ln2_b?)?;
            let f = g.matmul(b, ff1_w?)?;
            let f = g.add_row(f, ff1_b?)?;
            let f = g.gelu(f);
            let f = g.matmul(f, ff2_w?)?;
            let f = g.add_row(f, ff2_b?)?;
            x = g.add(x, f)?;
        }
        let (norm_g, norm_b, head_w, head_b) = (take()?, take()?, take()?, take()?);
        let x = g.layer_norm(x, norm_g, norm_b)?;
        let pooled = match spec.pooling {
            Pooling::Mean => g.mean_rows(x, seq)?,
            Pooling::ClassToken => g.take_first_row(x, seq)?,
        };
        let z = g.matmul(pooled, head_w)?;
        let logits = g.add_row(z, head_b)?;
        if next.next().is_some() {
            return Err(Error::invalid("parameter list too long"));
        }
        Ok(GraphOutput { logits, attention })
    }

    /// Logits for precomputed features, evaluated in fixed-size chunks.
    pub fn logits_from_features(&self, features: &[f64], count: usize) -> Result<Vec<f64>> {
        let per = self.spec.feature_len();
        if features.len() != count * per {
            return Err(Error::dim(format!("{} feature values for {count} inputs", features.len())));
        }
        let mut out = Vec::with_capacity(count);
        for chunk in features.chunks(INFERENCE_CHUNK * per) {
            let mut g = Graph::new();
            let vars = self.bind_constants(&mut g);
            let res = self.forward_graph(&mut g, &vars, chunk, chunk.len() / per)?;
            out.extend_from_slice(g.value(res.logits).data());
        }
        Ok(out)
    }

    fn bind_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|(_, t)| g.constant(t.clone())).collect()
    }

    /// Logits of `count` images.
    pub fn logits(&self, images: &[f64], count: usize) -> Result<Vec<f64>> {
        let feats = self.features(images, count)?;
        self.logits_from_features(&feats, count)
    }

    /// Logit of one image.
    pub fn forward(&self, image: &[f64]) -> Result<f64> {
        Ok(self.logits(image, 1)?[0])
    }

    /// Logits plus the attention weights of every layer.
    pub fn forward_trace(&self, images: &[f64], count: usize) -> Result<ForwardTrace> {
        let feats = self.features(images, count)?;
        let mut g = Graph::new();
        let vars = self.bind_constants(&mut g);
        let res = self.forward_graph(&mut g, &vars, &feats, count)?;
        Ok(ForwardTrace {
            logits: g.value(res.logits).data().to_vec(),
            attention: res.attention.iter().map(|v| g.value(*v).clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::grad_check;
    use crate::spectra::{build_fourier, build_laplacian, GridAdjacency};
    use rand::Rng;

    fn image(seed: u64, m: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| rng.random::<f64>()).collect()
    }

    fn fourier_model(seed: u64) -> VitClassifier {
        let spec = ModelSpec::spectral(BasisKind::Fourier);
        VitClassifier::spectral(spec, build_fourier(28, 28, 16).unwrap(), seed).unwrap()
    }

    #[test]
    fn default_parameter_counts_are_balanced() {
        let spectral = fourier_model(0);
        let spatial = VitClassifier::spatial(ModelSpec::spatial(), 0).unwrap();
        let (a, b) = (spectral.param_count(), spatial.param_count());
        // per layer: 4·16² + (16·32 + 32 + 32·16 + 16) + 4·16 = 2160
        assert_eq!(spectral.param_breakdown().layers, 2 * 2160);
        assert_eq!(spectral.param_breakdown().head, 17);
        assert_eq!(a, 512 + 4320 + 32 + 17);
        assert_eq!(b, 49 * 16 + 16 + 256 + 4320 + 32 + 17);
        let ratio = a.max(b) as f64 / a.min(b) as f64;
        assert!(ratio < 2.0, "{a} vs {b}");
        assert!((1_000..10_000).contains(&a) && (1_000..10_000).contains(&b));
    }

    #[test]
    fn doubling_layers_doubles_layer_subtotal() {
        let mut spec = ModelSpec::spatial();
        let one = VitClassifier::spatial(spec.clone(), 1).unwrap().param_breakdown();
        spec.layers *= 2;
        let two = VitClassifier::spatial(spec, 1).unwrap().param_breakdown();
        assert_eq!(two.layers, 2 * one.layers);
        assert_eq!(two.total - two.layers, one.total - one.layers);
    }

    #[test]
    fn spec_validation() {
        let mut s = ModelSpec::spectral(BasisKind::Pca);
        s.heads = 3;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::spatial();
        s.patch_size = 5;
        assert!(s.validate().is_err());
        assert!(ModelSpec::spatial().validate().is_ok());
        assert_eq!(ModelSpec::spectral(BasisKind::Pca).d_k(), 8);
    }

    #[test]
    fn forward_is_deterministic_and_rejects_bad_size() {
        let model = fourier_model(3);
        let v = image(1, 784);
        let a = model.forward(&v).unwrap();
        assert_eq!(a.to_bits(), model.forward(&v).unwrap().to_bits());
        assert!(model.forward(&v[..700]).is_err());
    }

    #[test]
    fn batched_logits_match_single() {
        let model = VitClassifier::spatial(ModelSpec::spatial(), 4).unwrap();
        let imgs: Vec<f64> = (0..5).flat_map(|s| image(s, 784)).collect();
        let batch = model.logits(&imgs, 5).unwrap();
        for (i, z) in batch.iter().enumerate() {
            let single = model.forward(&imgs[i * 784..(i + 1) * 784]).unwrap();
            assert!((z - single).abs() < 1e-12);
        }
    }

    #[test]
    fn token_preserving_permutation_leaves_logit_unchanged() {
        // a 180° rotation maps every Fourier mode to its conjugate,
        // so all magnitudes (and hence the tokens) are unchanged
        let model = fourier_model(5);
        let v = image(2, 784);
        let rotated: Vec<f64> = (0..784)
            .map(|i| {
                let (r, c) = (i / 28, i % 28);
                v[((28 - r) % 28) * 28 + (28 - c) % 28]
            })
            .collect();
        let (a, b) = (model.forward(&v).unwrap(), model.forward(&rotated).unwrap());
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn fourier_model_is_shift_invariant() {
        let model = fourier_model(6);
        let v = image(3, 784);
        let base = model.forward(&v).unwrap();
        for (dr, dc) in [(1, 0), (0, 5), (13, 27), (27, 1)] {
            let shifted: Vec<f64> =
                (0..784).map(|i| v[((i / 28 + 28 - dr) % 28) * 28 + (i % 28 + 28 - dc) % 28]).collect();
            assert!((model.forward(&shifted).unwrap() - base).abs() < 1e-7);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_at_every_layer() {
        let mut spec = ModelSpec::spectral(BasisKind::Laplacian);
        spec.pooling = Pooling::ClassToken;
        let basis = build_laplacian(28, 28, GridAdjacency::FourNeighbor, 1.0, 16).unwrap();
        let mut model = VitClassifier::spectral(spec, basis, 7).unwrap();
        // larger weights so the softmax is far from uniform
        for t in model.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
        let imgs: Vec<f64> = (0..3).flat_map(|s| image(s, 784)).collect();
        let trace = model.forward_trace(&imgs, 3).unwrap();
        assert_eq!(trace.attention.len(), 2);
        for a in &trace.attention {
            assert_eq!(a.shape(), &[6, 17, 17]);
            for row in a.data().chunks(17) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn basis_mismatch_rejected() {
        let spec = ModelSpec::spectral(BasisKind::Pca);
        assert!(VitClassifier::spectral(spec, build_fourier(28, 28, 16).unwrap(), 0).is_err());
    }

    /// Finite-difference check of every parameter group on a miniature model.
    fn check_all_groups(model: &VitClassifier, imgs: &[f64], count: usize, labels: &[f64]) {
        let feats = model.features(imgs, count).unwrap();
        let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
        for (gi, (name, _)) in model.params().iter().enumerate() {
            let err = grad_check(
                |g, x| {
                    let vars: Vec<Var> = params
                        .iter()
                        .enumerate()
                        .map(|(i, t)| if i == gi { x } else { g.constant(t.clone()) })
                        .collect();
                    let out = model.forward_graph(g, &vars, &feats, count)?;
                    g.bce_with_logits(out.logits, labels)
                },
                &params[gi],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    fn scaled(mut model: VitClassifier, factor: f64) -> VitClassifier {
        for t in model.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        model
    }

    #[test]
    fn full_model_gradients_spectral() {
        let spec = ModelSpec {
            n_tokens: 4,
            height: 6,
            width: 6,
            d_e: 8,
            d_ff: 8,
            bias: true,
            pooling: Pooling::ClassToken,
            ..ModelSpec::spectral(BasisKind::Fourier)
        };
        let model = VitClassifier::spectral(spec, build_fourier(6, 6, 4).unwrap(), 11).unwrap();
        // O(1) weights keep every group's gradient well above rounding noise
        let model = scaled(model, 25.0);
        let imgs: Vec<f64> = (0..3).flat_map(|s| image(s, 36)).collect();
        check_all_groups(&model, &imgs, 3, &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn full_model_gradients_spatial() {
        let spec =
            ModelSpec { n_tokens: 4, patch_size: 3, height: 6, width: 6, d_e: 8, d_ff: 8, ..ModelSpec::spatial() };
        let model = scaled(VitClassifier::spatial(spec, 12).unwrap(), 25.0);
        let imgs: Vec<f64> = (0..2).flat_map(|s| image(s + 10, 36)).collect();
        check_all_groups(&model, &imgs, 2, &[0.0, 1.0]);
    }
}
