//! Flat binary basis files.
//!
//! Layout: one JSON header line terminated by `\n`, then little-endian `f64`
//! values in this order: mean (`m`), basis planes (`planes × m`, row-major),
//! ordering keys (`n`), hierarchy weights (`n`).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{BasisKind, SpectralBasis};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: BasisKind,
    n: usize,
    m: usize,
    height: usize,
    width: usize,
    tau: f64,
    planes: usize,
    #[serde(default)]
    eigenvalues: Vec<f64>,
    #[serde(default)]
    frequencies: Vec<(i64, i64)>,
}

const FORMAT: &str = "spectral-basis";

pub fn write_basis<W: Write>(basis: &SpectralBasis, mut out: W) -> Result<()> {
    let planes = basis.vectors.len() / basis.m().max(1);
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        kind: basis.kind,
        n: basis.n,
        m: basis.m(),
        height: basis.height,
        width: basis.width,
        tau: basis.tau,
        planes,
        eigenvalues: basis.eigenvalues.clone(),
        frequencies: basis.frequencies.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for v in basis.mean.iter().chain(&basis.vectors).chain(&basis.ordering_keys).chain(&basis.weights) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_basis<R: BufRead>(mut input: R) -> Result<SpectralBasis> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())?;
    if header.format != FORMAT || header.version != 1 {
        return Err(Error::invalid(format!("unsupported basis file {} v{}", header.format, header.version)));
    }
    let expected_planes = match header.kind {
        BasisKind::Fourier => 2 * header.n,
        _ => header.n,
    };
    if header.planes != expected_planes || header.height * header.width != header.m {
        return Err(Error::invalid("inconsistent basis header"));
    }
    let mut read_vec = |len: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        input.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
    };
    let mean = read_vec(header.m)?;
    let vectors = read_vec(header.planes * header.m)?;
    let ordering_keys = read_vec(header.n)?;
    let weights = read_vec(header.n)?;
    Ok(SpectralBasis {
        kind: header.kind,
        height: header.height,
        width: header.width,
        n: header.n,
        vectors,
        ordering_keys,
        mean,
        weights,
        tau: header.tau,
        eigenvalues: header.eigenvalues,
        frequencies: header.frequencies,
    })
}
