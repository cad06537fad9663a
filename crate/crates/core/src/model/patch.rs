use crate::error::{Error, Result};

fn check(height: usize, width: usize, p: usize) -> Result<()> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::invalid(format!("patch size {p} does not divide a {height}×{width} image")));
    }
    Ok(())
}

/// Splits a row-major `height×width` image into non-overlapping `p×p`
/// patches in row-major patch order, each flattened row-major.
pub fn patchify(image: &[f64], height: usize, width: usize, p: usize) -> Result<Vec<Vec<f64>>> {
    check(height, width, p)?;
    if image.len() != height * width {
        return Err(Error::invalid(format!("{} values for a {height}×{width} image", image.len())));
    }
    let mut patches = Vec::with_capacity((height / p) * (width / p));
    for pr in 0..height / p {
        for pc in 0..width / p {
            let mut patch = Vec::with_capacity(p * p);
            for r in 0..p {
                let start = (pr * p + r) * width + pc * p;
                patch.extend_from_slice(&image[start..start + p]);
            }
            patches.push(patch);
        }
    }
    Ok(patches)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[Vec<f64>], height: usize, width: usize, p: usize) -> Result<Vec<f64>> {
    check(height, width, p)?;
    let per_row = width / p;
    if patches.len() != (height / p) * per_row || patches.iter().any(|q| q.len() != p * p) {
        return Err(Error::dim(format!("{} patches do not tile a {height}×{width} image at size {p}", patches.len())));
    }
    let mut image = vec![0.0; height * width];
    for (i, patch) in patches.iter().enumerate() {
        let (pr, pc) = (i / per_row, i % per_row);
        for r in 0..p {
            let start = (pr * p + r) * width + pc * p;
            image[start..start + p].copy_from_slice(&patch[r * p..(r + 1) * p]);
        }
    }
    Ok(image)
}

/// Patchifies `count` images stored back to back into one flat buffer of
/// `count·N_P` rows of `p²` values.
pub fn patchify_batch(images: &[f64], count: usize, height: usize, width: usize, p: usize) -> Result<Vec<f64>> {
    let m = height * width;
    if images.len() != count * m {
        return Err(Error::invalid(format!("{} values for {count} images", images.len())));
    }
    let mut out = Vec::with_capacity(images.len());
    for img in images.chunks(m) {
        for patch in patchify(img, height, width, p)? {
            out.extend(patch);
        }
    }
    Ok(out)
}
