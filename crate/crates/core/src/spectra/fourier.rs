use std::f64::consts::PI;

use super::{BasisKind, SpectralBasis};
use crate::error::{Error, Result};

fn signed(k: i64, extent: usize) -> i64 {
    let e = extent as i64;
    let r = k.rem_euclid(e);
    if r > e / 2 {
        r - e
    } else {
        r
    }
}

fn conjugate(kr: i64, kc: i64, h: usize, w: usize) -> (i64, i64) {
    (signed(-kr, h), signed(-kc, w))
}

pub(crate) fn self_conjugate(kr: i64, kc: i64, h: usize, w: usize) -> bool {
    conjugate(kr, kc, h, w) == (kr, kc)
}

fn angle(kr: i64, kc: i64) -> f64 {
    (kr as f64).atan2(kc as f64).rem_euclid(2.0 * PI)
}

fn tie_key(k: (i64, i64)) -> (f64, i64, i64) {
    (angle(k.0, k.1), k.0, k.1)
}

fn less(a: (f64, i64, i64), b: (f64, i64, i64)) -> bool {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).is_lt()
}

/// One representative per conjugate pair, sorted by radial frequency, then
/// angle in `[0, 2π)`, then `(k_row, k_col)`.
fn canonical_frequencies(h: usize, w: usize) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let k = (signed(r, h), signed(c, w));
            let conj = conjugate(k.0, k.1, h, w);
            if k == conj || less(tie_key(k), tie_key(conj)) {
                out.push(k);
            }
        }
    }
    out.sort_by(|a, b| {
        let ra = ((a.0 * a.0 + a.1 * a.1) as f64).sqrt();
        let rb = ((b.0 * b.0 + b.1 * b.1) as f64).sqrt();
        ra.total_cmp(&rb).then(tie_key(*a).0.total_cmp(&tie_key(*b).0)).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });
    out
}

/// Number of frequencies left after dropping one of each conjugate pair.
pub fn nonredundant_frequency_count(height: usize, width: usize) -> usize {
    canonical_frequencies(height, width).len()
}

/// The `n` lowest radial frequencies of an `height×width` DFT, DC first,
/// with hierarchy weights `1/(1+ρ)`.
pub fn build_fourier(height: usize, width: usize, n: usize) -> Result<SpectralBasis> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("empty image grid"));
    }
    let freqs = canonical_frequencies(height, width);
    if n > freqs.len() {
        return Err(Error::invalid(format!(
            "{n} Fourier modes requested; a {height}×{width} grid has {} non-redundant frequencies",
            freqs.len()
        )));
    }
    let frequencies: Vec<(i64, i64)> = freqs.into_iter().take(n).collect();
    let m = height * width;
    let mut vectors = Vec::with_capacity(2 * n * m);
    let mut ordering_keys = Vec::with_capacity(n);
    for &(kr, kc) in &frequencies {
        let mut re = Vec::with_capacity(m);
        let mut im = Vec::with_capacity(m);
        for r in 0..height {
            for c in 0..width {
                // reduce the phase index exactly before converting to radians
                let num =
                    (kr * r as i64 * width as i64 + kc * c as i64 * height as i64).rem_euclid((height * width) as i64);
                let theta = 2.0 * PI * num as f64 / m as f64;
                re.push(theta.cos());
                im.push(-theta.sin());
            }
        }
        vectors.extend(re);
        vectors.extend(im);
        ordering_keys.push(((kr * kr + kc * kc) as f64).sqrt());
    }
    Ok(SpectralBasis {
        kind: BasisKind::Fourier,
        height,
        width,
        n,
        vectors,
        weights: ordering_keys.iter().map(|rho| 1.0 / (1.0 + rho)).collect(),
        ordering_keys,
        mean: vec![0.0; m],
        tau: 0.0,
        eigenvalues: Vec::new(),
        frequencies,
    })
}
