use super::{BasisKind, SpectralBasis};
use crate::error::{Error, Result};
use crate::gradcore::{eigh_symmetric, fix_sign, Tensor};

/// Fits a rank-`n` PCA basis to `count` flattened images of `height×width`.
///
/// Uses the `m×m` covariance when `m ≤ 4·count`, otherwise the `count×count`
/// Gram matrix. Eigenvalues are population variances (divisor `count`), so
/// the mean squared residual of a rank-`n` reconstruction over the fitting
/// set equals the sum of the discarded eigenvalues.
pub fn fit_pca(images: &[f64], count: usize, height: usize, width: usize, n: usize) -> Result<SpectralBasis> {
    let m = height * width;
    if images.len() != count * m {
        return Err(Error::dim(format!("{} values for {count} images of {m} pixels", images.len())));
    }
    if count < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 images, got {count}")));
    }
    if n > (count - 1).min(m) {
        return Err(Error::invalid(format!(
            "{n} components requested from {count} images of {m} pixels (max {})",
            (count - 1).min(m)
        )));
    }
    if !images.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("images contain non-finite values"));
    }

    let mut mean = vec![0.0; m];
    for img in images.chunks(m) {
        for (mu, v) in mean.iter_mut().zip(img) {
            *mu += v;
        }
    }
    mean.iter_mut().for_each(|mu| *mu /= count as f64);
    let mut centered = images.to_vec();
    for img in centered.chunks_mut(m) {
        for (v, mu) in img.iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    let total_variance: f64 = centered.iter().map(|v| v * v).sum::<f64>() / count as f64;
    if total_variance <= f64::MIN_POSITIVE {
        return Err(Error::invalid("images have zero variance"));
    }

    let xc = Tensor::new(vec![count, m], centered)?;
    let (eigenvalues, vectors) =
        if m <= 4 * count { covariance_route(&xc, count, m, n)? } else { gram_route(&xc, count, m, n)? };
    if let Some(&last) = eigenvalues.get(n.saturating_sub(1)) {
        if n > 0 && last <= 1e-12 * eigenvalues[0] {
            return Err(Error::invalid(format!(
                "component {n} has zero variance; data rank is below the requested component count"
            )));
        }
    }

    Ok(SpectralBasis {
        kind: BasisKind::Pca,
        height,
        width,
        n,
        vectors,
        ordering_keys: (1..=n).map(|i| i as f64).collect(),
        mean,
        weights: (1..=n).map(|i| 1.0 / i as f64).collect(),
        tau: 0.0,
        eigenvalues,
        frequencies: Vec::new(),
    })
}

/// Like [`fit_pca`], but when the data cannot support `n` components the
/// basis holds the `min(n, count − 1)` fitted eigenimages followed by
/// zero vectors. Padded components always produce a zero token, so a model
/// keeps its sequence length on very small training sets.
pub fn fit_pca_padded(images: &[f64], count: usize, height: usize, width: usize, n: usize) -> Result<SpectralBasis> {
    let m = height * width;
    let fitted = n.min(count.saturating_sub(1)).min(m);
    let mut basis = fit_pca(images, count, height, width, fitted)?;
    if fitted < n {
        basis.vectors.resize(n * m, 0.0);
        basis.n = n;
        basis.ordering_keys = (1..=n).map(|i| i as f64).collect();
        basis.weights = (1..=n).map(|i| 1.0 / i as f64).collect();
    }
    Ok(basis)
}

fn covariance_route(xc: &Tensor, count: usize, m: usize, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut cov = xc.transpose()?.matmul(xc)?;
    cov.data_mut().iter_mut().for_each(|v| *v /= count as f64);
    symmetrize(&mut cov);
    let eig = eigh_symmetric(&cov)?;
    let eigenvalues: Vec<f64> = eig.values.iter().rev().map(|l| l.max(0.0)).collect();
    let mut vectors = Vec::with_capacity(n * m);
    for i in 0..n {
        vectors.extend(eig.vector(m - 1 - i));
    }
    Ok((eigenvalues, vectors))
}

fn gram_route(xc: &Tensor, count: usize, m: usize, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut gram = xc.matmul(&xc.transpose()?)?;
    gram.data_mut().iter_mut().for_each(|v| *v /= count as f64);
    symmetrize(&mut gram);
    let eig = eigh_symmetric(&gram)?;
    let mut eigenvalues: Vec<f64> = eig.values.iter().rev().map(|l| l.max(0.0)).collect();
    eigenvalues.resize(m, 0.0);
    let mut vectors = Vec::with_capacity(n * m);
    for i in 0..n {
        let u = eig.vector(count - 1 - i);
        // w = Xcᵀ u, normalised
        let mut w = vec![0.0; m];
        for (r, ur) in u.iter().enumerate() {
            for (wj, xj) in w.iter_mut().zip(xc.row(r)) {
                *wj += ur * xj;
            }
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= f64::MIN_POSITIVE {
            return Err(Error::invalid(format!("component {} has zero variance", i + 1)));
        }
        w.iter_mut().for_each(|v| *v /= norm);
        fix_sign(&mut w);
        vectors.extend(w);
    }
    Ok((eigenvalues, vectors))
}

fn symmetrize(a: &mut Tensor) {
    let m = a.rows();
    let d = a.data_mut();
    for i in 0..m {
        for j in i + 1..m {
            let avg = 0.5 * (d[i * m + j] + d[j * m + i]);
            d[i * m + j] = avg;
            d[j * m + i] = avg;
        }
    }
}
