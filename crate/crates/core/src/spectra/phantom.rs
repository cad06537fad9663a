use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One additive ellipse on `[-1, 1]²`; `angle_deg` rotates counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub angle_deg: f64,
}

impl Ellipse {
    const fn new(intensity: f64, semi_x: f64, semi_y: f64, center_x: f64, center_y: f64, angle_deg: f64) -> Self {
        Ellipse { intensity, semi_x, semi_y, center_x, center_y, angle_deg }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

/// Ten-ellipse Shepp–Logan head with the high-contrast (Toft) intensities,
/// whose composition lies in `[0, 1]`.
pub const MODIFIED_SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse::new(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    Ellipse::new(-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    Ellipse::new(-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    Ellipse::new(-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    Ellipse::new(0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    Ellipse::new(0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    Ellipse::new(0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    Ellipse::new(0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    Ellipse::new(0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    Ellipse::new(0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
];

/// Pixel-centre coordinates: column `c` ↦ x, row `r` ↦ y (row 0 at the top).
fn pixel_xy(r: usize, c: usize, size: usize) -> (f64, f64) {
    let step = 2.0 / size as f64;
    (-1.0 + (c as f64 + 0.5) * step, 1.0 - (r as f64 + 0.5) * step)
}

/// Rasterises ellipses additively, clamping negative sums to zero.
pub fn render_ellipses(ellipses: &[Ellipse], size: usize) -> Vec<f64> {
    let mut img = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let (x, y) = pixel_xy(r, c, size);
            let v: f64 = ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
            img[r * size + c] = v.max(0.0);
        }
    }
    img
}

/// `size×size` Shepp–Logan phantom, row-major.
pub fn shepp_logan(size: usize) -> Result<Vec<f64>> {
    if size < 16 {
        return Err(Error::invalid(format!("phantom size must be at least 16, got {size}")));
    }
    Ok(render_ellipses(&MODIFIED_SHEPP_LOGAN, size))
}

/// A randomly perturbed phantom: every interior ellipse gets jittered
/// intensity, axes and centre. Values are clamped to `[0, 1]`.
pub fn shepp_logan_variant<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<Vec<f64>> {
    if size < 16 {
        return Err(Error::invalid(format!("phantom size must be at least 16, got {size}")));
    }
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let mut ellipses = MODIFIED_SHEPP_LOGAN;
    for e in ellipses.iter_mut().skip(2) {
        e.intensity *= 1.0 + 0.3 * normal();
        e.semi_x *= (1.0 + 0.1 * normal()).max(0.3);
        e.semi_y *= (1.0 + 0.1 * normal()).max(0.3);
        e.center_x += 0.02 * normal();
        e.center_y += 0.02 * normal();
        e.angle_deg += 5.0 * normal();
    }
    let scale = 1.0 + 0.03 * normal();
    for e in ellipses.iter_mut() {
        e.semi_x *= scale;
        e.semi_y *= scale;
        e.center_x *= scale;
        e.center_y *= scale;
    }
    let mut img = render_ellipses(&ellipses, size);
    img.iter_mut().for_each(|v| *v = v.min(1.0));
    Ok(img)
}
