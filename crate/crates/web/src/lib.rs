//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The exported functions wrap plain Rust functions of the same name with a
//! `_impl` suffix; those return the core crate's errors and are what the
//! native tests exercise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use spectral_vit::datagen::gen_pattern;
use spectral_vit::model::{count_cost, ModelSpec};
use spectral_vit::spectra::{
    build_fourier, build_laplacian, fit_pca, nonredundant_frequency_count, psnr, shepp_logan, shepp_logan_variant,
    BasisKind, GridAdjacency, Projection, SpectralBasis,
};
use spectral_vit::{Error, Result};
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_kind(name: &str) -> Result<BasisKind> {
    match name {
        "pca" => Ok(BasisKind::Pca),
        "fourier" => Ok(BasisKind::Fourier),
        "laplacian" => Ok(BasisKind::Laplacian),
        other => Err(Error::Validation(format!("unknown basis '{other}'"))),
    }
}

/// A phantom with its projection onto each of the three bases, so moving the
/// component slider only costs a partial reconstruction.
#[wasm_bindgen]
pub struct PhantomLab {
    size: usize,
    phantom: Vec<f64>,
    bases: Vec<(SpectralBasis, Projection)>,
}

impl PhantomLab {
    pub fn build(size: usize, pca_images: usize, seed: u64) -> Result<Self> {
        if pca_images < 2 {
            return Err(Error::Validation("PCA needs at least 2 phantom variants".into()));
        }
        let phantom = shepp_logan(size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ensemble = Vec::with_capacity(pca_images * size * size);
        for _ in 0..pca_images {
            ensemble.extend(shepp_logan_variant(size, &mut rng)?);
        }
        let probe = fit_pca(&ensemble, pca_images, size, size, 1)?;
        let top = probe.eigenvalues()[0];
        let rank = probe.eigenvalues().iter().take_while(|&&l| l > 1e-12 * top).count();
        let raw = [
            fit_pca(&ensemble, pca_images, size, size, rank.min(pca_images - 1))?,
            build_fourier(size, size, nonredundant_frequency_count(size, size))?,
            build_laplacian(size, size, GridAdjacency::FourNeighbor, 1.0, size * size)?,
        ];
        let bases = raw
            .into_iter()
            .map(|b| {
                let p = b.project(&phantom)?;
                Ok((b, p))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PhantomLab { size, phantom, bases })
    }

    fn entry(&self, basis: &str) -> Result<&(SpectralBasis, Projection)> {
        let kind = parse_kind(basis)?;
        Ok(self.bases.iter().find(|(b, _)| b.kind() == kind).expect("all kinds are built"))
    }

    pub fn reconstruct_impl(&self, basis: &str, n: usize) -> Result<Reconstruction> {
        let (b, p) = self.entry(basis)?;
        let n = n.clamp(1, b.n());
        let image = b.reconstruct_rank(p, n)?;
        Ok(Reconstruction { psnr_db: psnr(&self.phantom, &image)?, image, n })
    }

    pub fn max_components_impl(&self, basis: &str) -> Result<usize> {
        Ok(self.entry(basis)?.0.n())
    }
}

#[wasm_bindgen]
impl PhantomLab {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, pca_images: usize, seed: u64) -> std::result::Result<PhantomLab, JsError> {
        Self::build(size, pca_images, seed).map_err(js)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn phantom(&self) -> Vec<f64> {
        self.phantom.clone()
    }

    /// Largest component count available for `basis`.
    pub fn max_components(&self, basis: &str) -> std::result::Result<usize, JsError> {
        self.max_components_impl(basis).map_err(js)
    }

    /// Reconstruction from the first `n` components (clamped to the basis size).
    pub fn reconstruct(&self, basis: &str, n: usize) -> std::result::Result<Reconstruction, JsError> {
        self.reconstruct_impl(basis, n).map_err(js)
    }
}

#[wasm_bindgen]
pub struct Reconstruction {
    image: Vec<f64>,
    psnr_db: f64,
    n: usize,
}

#[wasm_bindgen]
impl Reconstruction {
    #[wasm_bindgen(getter)]
    pub fn image(&self) -> Vec<f64> {
        self.image.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn psnr_db(&self) -> f64 {
        self.psnr_db
    }

    #[wasm_bindgen(getter)]
    pub fn n(&self) -> usize {
        self.n
    }
}

/// One 28×28 checkerboard-in-noise image of the requested class.
pub fn pattern_sample_impl(snr: f64, label: u8, seed: u64) -> Result<Vec<f64>> {
    let set = gen_pattern(2, snr, seed, 28)?;
    let want = f64::from(label.min(1));
    let i = set.labels.iter().position(|&y| y == want).expect("two samples are balanced");
    Ok(set.image(i).to_vec())
}

#[wasm_bindgen]
pub fn pattern_sample(snr: f64, label: u8, seed: u64) -> std::result::Result<Vec<f64>, JsError> {
    pattern_sample_impl(snr, label, seed).map_err(js)
}

#[derive(Debug, Serialize)]
pub struct CostLine {
    pub variant: &'static str,
    pub n_tokens: usize,
    pub cost_spec: u64,
    pub cost_embed: u64,
    pub cost_trans_per_layer: u64,
    pub total: u64,
}

/// Multiply counts of a spectral model with `n_tokens` components and of the
/// spatial ViT with `patch`-sized patches on the same `side×side` images.
pub fn cost_table_impl(side: usize, n_tokens: usize, d_e: usize, layers: usize, patch: usize) -> Result<Vec<CostLine>> {
    if patch == 0 || !side.is_multiple_of(patch) {
        return Err(Error::Validation(format!("patch size {patch} does not tile a {side}×{side} image")));
    }
    let base = |spec: ModelSpec| ModelSpec { height: side, width: side, d_e, layers, ..spec };
    let specs = [
        ("spectral", ModelSpec { n_tokens, ..base(ModelSpec::spectral(BasisKind::Pca)) }),
        ("spatial", ModelSpec { n_tokens: (side / patch).pow(2), patch_size: patch, ..base(ModelSpec::spatial()) }),
    ];
    Ok(specs
        .into_iter()
        .map(|(variant, spec)| {
            let c = count_cost(&spec);
            CostLine {
                variant,
                n_tokens: spec.n_tokens,
                cost_spec: c.cost_spec,
                cost_embed: c.cost_embed,
                cost_trans_per_layer: c.cost_trans_per_layer,
                total: c.total,
            }
        })
        .collect())
}

/// JSON array of [`CostLine`] records.
#[wasm_bindgen]
pub fn cost_table(
    side: usize,
    n_tokens: usize,
    d_e: usize,
    layers: usize,
    patch: usize,
) -> std::result::Result<String, JsError> {
    let rows = cost_table_impl(side, n_tokens, d_e, layers, patch).map_err(js)?;
    serde_json::to_string(&rows).map_err(|e| JsError::new(&e.to_string()))
}
