use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{fmt_f, header_line, write_json, CsvSink, Experiment, RunConfig};
use crate::error::{Error, Result};
use crate::spectra::{
    build_fourier, build_laplacian, fit_pca, nonredundant_frequency_count, psnr, shepp_logan, shepp_logan_variant,
    BasisKind, GridAdjacency, SpectralBasis,
};

/// Circular shift applied to the phantom for the token-invariance column.
pub const DEMO_SHIFT: (usize, usize) = (3, 5);
/// Basis vectors exported as images per basis.
pub const EXPORTED_VECTORS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BasisDemoRow {
    pub basis: String,
    pub n: usize,
    pub psnr_db: f64,
    pub mse: f64,
    /// Largest token change under a circular shift of the phantom
    /// (Fourier only).
    pub shift_token_max_diff: Option<f64>,
}

#[derive(Serialize)]
struct BlobEntry {
    name: String,
    basis: String,
    n: usize,
    offset: usize,
    height: usize,
    width: usize,
}

fn shift_image(img: &[f64], size: usize, dr: usize, dc: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for r in 0..size {
        for c in 0..size {
            out[((r + dr) % size) * size + (c + dc) % size] = img[r * size + c];
        }
    }
    out
}

fn demo_bases(config: &RunConfig) -> Result<Vec<SpectralBasis>> {
    let dc = &config.basis_demo;
    let size = dc.size;
    let m = size * size;
    let max_n = dc.n_grid.iter().copied().max().unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(dc.seed);
    let mut ensemble = Vec::with_capacity(dc.pca_images * m);
    for _ in 0..dc.pca_images {
        ensemble.extend(shepp_logan_variant(size, &mut rng)?);
    }
    // The phantom family has fewer degrees of freedom than pixels, so the
    // PCA basis stops at the numerical rank of the ensemble.
    let probe = fit_pca(&ensemble, dc.pca_images, size, size, 1)?;
    let top = probe.eigenvalues()[0];
    let rank = probe.eigenvalues().iter().take_while(|&&l| l > 1e-12 * top).count();
    let pca_n = max_n.min(dc.pca_images - 1).min(rank);
    Ok(vec![
        fit_pca(&ensemble, dc.pca_images, size, size, pca_n)?,
        build_fourier(size, size, max_n.min(nonredundant_frequency_count(size, size)))?,
        build_laplacian(size, size, GridAdjacency::FourNeighbor, config.spectral.tau, max_n.min(m))?,
    ])
}

/// Tokenizes and reconstructs the Shepp–Logan phantom in every basis at every
/// `n` of the grid (clipped to the basis size). Writes `basis_demo.csv`,
/// `basis_demo_images.bin` (little-endian f64) and its JSON index.
pub fn run_basis_demo(config: &RunConfig, out: &Path) -> Result<Vec<BasisDemoRow>> {
    let dc = &config.basis_demo;
    if dc.n_grid.is_empty() || dc.n_grid.contains(&0) {
        return Err(Error::invalid("basis demo grid needs positive component counts"));
    }
    if dc.pca_images < 2 {
        return Err(Error::invalid("PCA needs at least 2 phantom variants"));
    }
    let size = dc.size;
    let phantom = shepp_logan(size)?;
    let shifted = shift_image(&phantom, size, DEMO_SHIFT.0, DEMO_SHIFT.1);
    let bases = demo_bases(config)?;
    std::fs::create_dir_all(out)?;

    let header = header_line(Experiment::BasisDemo, config);
    let mut csv = CsvSink::create(
        &out.join("basis_demo.csv"),
        &header,
        &["basis", "n", "psnr_db", "mse", "shift_token_max_diff"],
    )?;
    let mut blob = std::io::BufWriter::new(std::fs::File::create(out.join("basis_demo_images.bin"))?);
    let mut index = Vec::new();
    let mut offset = 0usize;
    let mut push_image = |name: String, basis: &str, n: usize, img: &[f64], index: &mut Vec<BlobEntry>| -> Result<()> {
        for v in img {
            blob.write_all(&v.to_le_bytes())?;
        }
        index.push(BlobEntry { name, basis: basis.into(), n, offset, height: size, width: size });
        offset += img.len();
        Ok(())
    };
    push_image("phantom".into(), "none", 0, &phantom, &mut index)?;

    let mut rows = Vec::new();
    for basis in &bases {
        let name = basis.kind().name();
        for i in 0..EXPORTED_VECTORS.min(basis.n()) {
            push_image(format!("{name}_vector_{i}"), name, i + 1, basis.vector(i), &mut index)?;
        }
        let projection = basis.project(&phantom)?;
        let tokens = basis.tokenize(&phantom)?.coefficients;
        let shifted_tokens = basis.tokenize(&shifted)?.coefficients;
        let mut grid: Vec<usize> = dc.n_grid.iter().map(|&n| n.min(basis.n())).collect();
        grid.dedup();
        for n in grid {
            let recon = basis.reconstruct_rank(&projection, n)?;
            let mse = phantom.iter().zip(&recon).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / phantom.len() as f64;
            let shift_diff = (basis.kind() == BasisKind::Fourier)
                .then(|| tokens[..n].iter().zip(&shifted_tokens[..n]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            let row = BasisDemoRow {
                basis: name.into(),
                n,
                psnr_db: psnr(&phantom, &recon)?,
                mse,
                shift_token_max_diff: shift_diff,
            };
            csv.row(&format!(
                "{},{},{},{},{}",
                row.basis,
                row.n,
                fmt_f(row.psnr_db),
                fmt_f(row.mse),
                row.shift_token_max_diff.map_or_else(String::new, fmt_f)
            ))?;
            push_image(format!("{name}_recon_{n}"), name, n, &recon, &mut index)?;
            rows.push(row);
        }
    }
    blob.flush()?;
    write_json(&out.join("basis_demo_images.json"), Experiment::BasisDemo, config, &index)?;
    Ok(rows)
}
