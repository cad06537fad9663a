use serde::{Deserialize, Serialize};

use super::{BasisKind, SpectralBasis};
use crate::error::{Error, Result};
use crate::gradcore::{eigh_symmetric, Tensor};

/// Pixel connectivity used to build a grid graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAdjacency {
    /// 4-neighbour grid with open borders.
    #[default]
    FourNeighbor,
    /// 4-neighbour grid that wraps at the borders (every vertex has degree 4).
    FourNeighborPeriodic,
}

/// Unit-weight adjacency matrix of an `height×width` grid.
pub fn grid_adjacency(height: usize, width: usize, kind: GridAdjacency) -> Tensor {
    let m = height * width;
    let mut w = vec![0.0; m * m];
    let mut link = |a: usize, b: usize| {
        if a != b {
            w[a * m + b] += 1.0;
            w[b * m + a] += 1.0;
        }
    };
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            match kind {
                GridAdjacency::FourNeighbor => {
                    if c + 1 < width {
                        link(i, i + 1);
                    }
                    if r + 1 < height {
                        link(i, i + width);
                    }
                }
                GridAdjacency::FourNeighborPeriodic => {
                    if width > 1 {
                        link(i, r * width + (c + 1) % width);
                    }
                    if height > 1 {
                        link(i, ((r + 1) % height) * width + c);
                    }
                }
            }
        }
    }
    Tensor::new(vec![m, m], w).expect("square")
}

/// Normalised-Laplacian basis of a grid graph.
pub fn build_laplacian(
    height: usize,
    width: usize,
    adjacency: GridAdjacency,
    tau: f64,
    n: usize,
) -> Result<SpectralBasis> {
    build_laplacian_from_adjacency(&grid_adjacency(height, width, adjacency), height, width, tau, n)
}

/// Basis of the first `n` eigenvectors of `L = I − D^{-1/2} W D^{-1/2}`,
/// ascending in eigenvalue, with hierarchy weights `exp(−λτ)`.
pub fn build_laplacian_from_adjacency(
    adjacency: &Tensor,
    height: usize,
    width: usize,
    tau: f64,
    n: usize,
) -> Result<SpectralBasis> {
    let m = height * width;
    if adjacency.shape() != [m, m] {
        return Err(Error::dim(format!("adjacency {:?} does not match a {height}×{width} grid", adjacency.shape())));
    }
    if n > m {
        return Err(Error::invalid(format!("{n} eigenvectors requested from {m} vertices")));
    }
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("diffusion scale must be finite and ≥ 0, got {tau}")));
    }
    let w = adjacency.data();
    for i in 0..m {
        for j in i + 1..m {
            if (w[i * m + j] - w[j * m + i]).abs() > 1e-12 {
                return Err(Error::invalid(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    if w.iter().any(|x| *x < 0.0) {
        return Err(Error::invalid("adjacency weights must be nonnegative"));
    }
    let degree: Vec<f64> = (0..m).map(|i| w[i * m..(i + 1) * m].iter().sum()).collect();
    if let Some(i) = degree.iter().position(|d| *d <= 0.0) {
        return Err(Error::invalid(format!("vertex {i} is isolated")));
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut lap = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let delta = if i == j { 1.0 } else { 0.0 };
            lap[i * m + j] = delta - inv_sqrt[i] * w[i * m + j] * inv_sqrt[j];
        }
    }
    let eig = eigh_symmetric(&Tensor::new(vec![m, m], lap)?)?;
    let eigenvalues: Vec<f64> = eig.values[..n].to_vec();
    let mut vectors = Vec::with_capacity(n * m);
    for i in 0..n {
        vectors.extend(eig.vector(i));
    }
    Ok(SpectralBasis {
        kind: BasisKind::Laplacian,
        height,
        width,
        n,
        vectors,
        ordering_keys: eigenvalues.clone(),
        mean: vec![0.0; m],
        weights: eigenvalues.iter().map(|l| (-l * tau).exp()).collect(),
        tau,
        eigenvalues,
        frequencies: Vec::new(),
    })
}
