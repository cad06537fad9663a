//! Spectral bases (PCA, Fourier, graph Laplacian), tokenization and
//! reconstruction, and the signal-representation measures built on them.

mod fourier;
mod io;
mod laplacian;
mod pca;
mod phantom;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fourier::{build_fourier, nonredundant_frequency_count};
pub use io::{read_basis, write_basis};
pub use laplacian::{build_laplacian, build_laplacian_from_adjacency, grid_adjacency, GridAdjacency};
pub use pca::{fit_pca, fit_pca_padded};
pub use phantom::{shepp_logan, shepp_logan_variant, Ellipse, MODIFIED_SHEPP_LOGAN};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Pca,
    Fourier,
    Laplacian,
}

impl BasisKind {
    pub fn name(self) -> &'static str {
        match self {
            BasisKind::Pca => "pca",
            BasisKind::Fourier => "fourier",
            BasisKind::Laplacian => "laplacian",
        }
    }
}

impl std::str::FromStr for BasisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(BasisKind::Pca),
            "fourier" => Ok(BasisKind::Fourier),
            "laplacian" => Ok(BasisKind::Laplacian),
            other => Err(Error::invalid(format!("unknown basis kind {other:?}"))),
        }
    }
}

/// An ordered set of `n` basis images over an `height×width` grid.
///
/// For the Fourier kind every mode owns two planes, stored at rows `2i`
/// (real part of `e^{-i2π⟨k,x⟩}`) and `2i+1` (imaginary part).
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBasis {
    pub(crate) kind: BasisKind,
    pub(crate) height: usize,
    pub(crate) width: usize,
    pub(crate) n: usize,
    pub(crate) vectors: Vec<f64>,
    pub(crate) ordering_keys: Vec<f64>,
    pub(crate) mean: Vec<f64>,
    pub(crate) weights: Vec<f64>,
    pub(crate) tau: f64,
    /// PCA: full covariance spectrum, descending. Laplacian: retained eigenvalues.
    pub(crate) eigenvalues: Vec<f64>,
    /// Fourier only: `(k_row, k_col)` per mode.
    pub(crate) frequencies: Vec<(i64, i64)>,
}

/// Coefficients `s_i` of one image, in basis order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub coefficients: Vec<f64>,
    pub kind: BasisKind,
    pub ordering_keys: Vec<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }
}

/// Full projection of an image, including Fourier phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub kind: BasisKind,
    pub real: Vec<f64>,
    /// Empty for real-valued bases.
    pub imag: Vec<f64>,
}

impl SpectralBasis {
    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Pixel count `m`.
    pub fn m(&self) -> usize {
        self.height * self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ordering_keys(&self) -> &[f64] {
        &self.ordering_keys
    }

    /// Hierarchy weights ω.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn frequencies(&self) -> &[(i64, i64)] {
        &self.frequencies
    }

    /// Basis image `i` (for Fourier, its real plane).
    pub fn vector(&self, i: usize) -> &[f64] {
        let m = self.m();
        let row = if self.kind == BasisKind::Fourier { 2 * i } else { i };
        &self.vectors[row * m..(row + 1) * m]
    }

    /// Imaginary plane of Fourier mode `i`.
    pub fn imag_plane(&self, i: usize) -> Option<&[f64]> {
        (self.kind == BasisKind::Fourier).then(|| {
            let m = self.m();
            &self.vectors[(2 * i + 1) * m..(2 * i + 2) * m]
        })
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.m() {
            return Err(Error::dim(format!("image has {} values, basis expects {}", v.len(), self.m())));
        }
        Ok(())
    }

    /// Projects `v` onto every basis vector, keeping Fourier phase.
    pub fn project(&self, v: &[f64]) -> Result<Projection> {
        self.check_len(v)?;
        let m = self.m();
        let dot = |row: usize, centered: bool| -> f64 {
            let w = &self.vectors[row * m..(row + 1) * m];
            if centered {
                v.iter().zip(&self.mean).zip(w).map(|((x, mu), w)| (x - mu) * w).sum()
            } else {
                v.iter().zip(w).map(|(x, w)| x * w).sum()
            }
        };
        Ok(match self.kind {
            BasisKind::Pca => {
                Projection { kind: self.kind, real: (0..self.n).map(|i| dot(i, true)).collect(), imag: Vec::new() }
            }
            BasisKind::Laplacian => {
                Projection { kind: self.kind, real: (0..self.n).map(|i| dot(i, false)).collect(), imag: Vec::new() }
            }
            BasisKind::Fourier => Projection {
                kind: self.kind,
                real: (0..self.n).map(|i| dot(2 * i, false)).collect(),
                imag: (0..self.n).map(|i| dot(2 * i + 1, false)).collect(),
            },
        })
    }

    /// Spectral tokens of `v`. Fourier tokens are coefficient magnitudes.
    pub fn tokenize(&self, v: &[f64]) -> Result<TokenSequence> {
        let p = self.project(v)?;
        let coefficients = match self.kind {
            BasisKind::Fourier => p.real.iter().zip(&p.imag).map(|(a, b)| a.hypot(*b)).collect(),
            _ => p.real,
        };
        Ok(TokenSequence { coefficients, kind: self.kind, ordering_keys: self.ordering_keys.clone() })
    }

    /// Tokens for `count` images stored back to back, as a `count·n` buffer.
    pub fn tokenize_batch(&self, images: &[f64], count: usize) -> Result<Vec<f64>> {
        let m = self.m();
        if images.len() != count * m {
            return Err(Error::dim(format!("{} values for {count} images of {m} pixels", images.len())));
        }
        let mut out = Vec::with_capacity(count * self.n);
        for img in images.chunks(m.max(1)).take(count) {
            out.extend(self.tokenize(img)?.coefficients);
        }
        Ok(out)
    }

    /// Image from the first `rank` components of a projection.
    pub fn reconstruct_rank(&self, p: &Projection, rank: usize) -> Result<Vec<f64>> {
        if p.kind != self.kind || p.real.len() != self.n {
            return Err(Error::invalid(format!(
                "projection ({}, {} coefficients) does not belong to this {} basis with {} components",
                p.kind.name(),
                p.real.len(),
                self.kind.name(),
                self.n
            )));
        }
        if rank > self.n {
            return Err(Error::invalid(format!("rank {rank} exceeds basis size {}", self.n)));
        }
        let m = self.m();
        let mut out = self.mean.clone();
        match self.kind {
            BasisKind::Pca | BasisKind::Laplacian => {
                for i in 0..rank {
                    let s = p.real[i];
                    for (o, w) in out.iter_mut().zip(self.vector(i)) {
                        *o += s * w;
                    }
                }
            }
            BasisKind::Fourier => {
                if p.imag.len() != self.n {
                    return Err(Error::invalid("Fourier projection lacks phase"));
                }
                let inv_m = 1.0 / m as f64;
                for i in 0..rank {
                    let (kr, kc) = self.frequencies[i];
                    let mult = if fourier::self_conjugate(kr, kc, self.height, self.width) { 1.0 } else { 2.0 };
                    let (re, im) = (p.real[i], p.imag[i]);
                    let re_plane = self.vector(i);
                    let im_plane = self.imag_plane(i).expect("fourier");
                    for ((o, c), s) in out.iter_mut().zip(re_plane).zip(im_plane) {
                        *o += mult * inv_m * (re * c + im * s);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, p: &Projection) -> Result<Vec<f64>> {
        self.reconstruct_rank(p, self.n)
    }

    /// Reconstruction from tokens alone. Not available for Fourier tokens,
    /// which carry no phase.
    pub fn reconstruct_tokens(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        if tokens.kind != self.kind {
            return Err(Error::invalid(format!("{} tokens given to a {} basis", tokens.kind.name(), self.kind.name())));
        }
        if self.kind == BasisKind::Fourier {
            return Err(Error::invalid("Fourier magnitude tokens carry no phase; reconstruct from the projection"));
        }
        self.reconstruct(&Projection { kind: self.kind, real: tokens.coefficients.clone(), imag: Vec::new() })
    }
}

/// Peak signal-to-noise ratio in dB with peak = max(reference); capped at 200 dB.
pub fn psnr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::dim(format!("psnr of {} and {} values", reference.len(), estimate.len())));
    }
    let mse = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / reference.len() as f64;
    let peak = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Ratio of retained to discarded eigenvalue mass for a rank-`n` truncation.
/// Returns `f64::INFINITY` when nothing is discarded.
pub fn energy_compaction_snr(eigenvalues: &[f64], n: usize) -> Result<f64> {
    let m = eigenvalues.len();
    if n == 0 || n >= m {
        return Err(Error::invalid(format!("need 1 ≤ n < m, got n = {n}, m = {m}")));
    }
    let scale = eigenvalues.first().copied().unwrap_or(0.0).abs().max(1.0);
    if eigenvalues.iter().any(|l| *l < -1e-12 * scale) {
        return Err(Error::invalid("eigenvalues must be nonnegative"));
    }
    if eigenvalues.windows(2).any(|w| w[1] > w[0] + 1e-12 * scale) {
        return Err(Error::invalid("eigenvalues must be in descending order"));
    }
    let retained: f64 = eigenvalues[..n].iter().map(|l| l.max(0.0)).sum();
    let discarded: f64 = eigenvalues[n..].iter().map(|l| l.max(0.0)).sum();
    if discarded <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(retained / discarded)
}
