//! Synthetic binary image tasks and dataset splitting.
//!
//! * Pattern task: class 1 is `√snr·C + noise` with a ±1 checkerboard `C`,
//!   class 0 is noise alone.
//! * Object task: two bright square blocks, labelled by their separation,
//!   optionally placed so that vertical position correlates with the label
//!   in one direction during training and the opposite direction at test.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIZE: usize = 28;
/// Checkerboard cell side in pixels.
pub const CHECKER_CELL: usize = 4;
/// Object block side in pixels.
pub const BLOCK: usize = 3;
/// Centre-distance range of near (class 0) pairs, `[lo, hi)`.
pub const NEAR_RANGE: (f64, f64) = (4.0, 8.0);
/// Centre-distance range of far (class 1) pairs, `[lo, hi]`.
pub const FAR_RANGE: (f64, f64) = (12.0, 20.0);
/// Pairs closer than this are class 0.
pub const DISTANCE_THRESHOLD: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spurious {
    /// Pairs are placed anywhere.
    #[default]
    None,
    /// Near pairs in the upper half, far pairs in the lower half.
    Train,
    /// Near pairs in the lower half, far pairs in the upper half.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImageSet {
    pub height: usize,
    pub width: usize,
    /// `count` row-major images back to back.
    pub images: Vec<f64>,
    pub labels: Vec<f64>,
    pub seed: u64,
    pub snr: Option<f64>,
    pub spurious: Option<Spurious>,
}

impl LabeledImageSet {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn m(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.m()..(i + 1) * self.m()]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        let mut images = Vec::with_capacity(indices.len() * self.m());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        LabeledImageSet { images, labels: indices.iter().map(|&i| self.labels[i]).collect(), ..self.clone_meta() }
    }

    fn clone_meta(&self) -> LabeledImageSet {
        LabeledImageSet {
            height: self.height,
            width: self.width,
            images: Vec::new(),
            labels: Vec::new(),
            seed: self.seed,
            snr: self.snr,
            spurious: self.spurious,
        }
    }

    /// Writes `manifest.json` and `images.bin` (little-endian `f64`, row-major).
    pub fn export(&self, dir: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            count: usize,
            height: usize,
            width: usize,
            seed: u64,
            snr: Option<f64>,
            spurious: Option<Spurious>,
            labels: &'a [f64],
        }
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            count: self.count(),
            height: self.height,
            width: self.width,
            seed: self.seed,
            snr: self.snr,
            spurious: self.spurious,
            labels: &self.labels,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("images.bin"))?);
        for v in &self.images {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }
}

/// ±1 checkerboard with `cell×cell` squares, `+1` at the top-left.
pub fn checkerboard(size: usize, cell: usize) -> Vec<f64> {
    (0..size * size)
        .map(|i| if ((i / size) / cell + (i % size) / cell).is_multiple_of(2) { 1.0 } else { -1.0 })
        .collect()
}

/// Labels for `count` samples, ⌈count/2⌉ of class 0, in a seeded random order.
fn balanced_labels(count: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut labels: Vec<f64> = (0..count).map(|i| (i % 2) as f64).collect();
    labels.shuffle(rng);
    labels
}

/// Checkerboard-in-noise task with signal amplitude `a = √snr` and unit noise.
pub fn gen_pattern(count: usize, snr: f64, seed: u64, size: usize) -> Result<LabeledImageSet> {
    if count < 2 {
        return Err(Error::invalid(format!("pattern task needs at least 2 samples, got {count}")));
    }
    if !(snr > 0.0 && snr.is_finite()) {
        return Err(Error::invalid(format!("SNR must be positive, got {snr}")));
    }
    if size < CHECKER_CELL {
        return Err(Error::invalid(format!("image size {size} is smaller than one checker cell")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(count, &mut rng);
    let board = checkerboard(size, CHECKER_CELL);
    let a = snr.sqrt();
    let mut images = Vec::with_capacity(count * size * size);
    for &y in &labels {
        for &c in &board {
            let noise: f64 = rng.sample(StandardNormal);
            images.push(y * a * c + noise);
        }
    }
    Ok(LabeledImageSet { height: size, width: size, images, labels, seed, snr: Some(snr), spurious: None })
}

/// Integer block displacements `(dy, dx)` admissible for a class.
fn displacements(label: f64, size: usize, spurious: Spurious) -> Vec<(i64, i64)> {
    let half = (size / 2) as i64;
    let b = BLOCK as i64;
    // vertical room for a pair confined to one half of the image
    let max_dy = if spurious == Spurious::None { size as i64 - b } else { half - b };
    // keeping |dx|, |dy| ≤ size/2 makes toroidal and Euclidean distance agree
    let lim = half.min(max_dy);
    let limx = half.min(size as i64 - b);
    let mut out = Vec::new();
    for dy in -lim..=lim {
        for dx in -limx..=limx {
            let d = ((dy * dy + dx * dx) as f64).sqrt();
            let ok =
                if label == 0.0 { d >= NEAR_RANGE.0 && d < NEAR_RANGE.1 } else { d >= FAR_RANGE.0 && d <= FAR_RANGE.1 };
            if ok {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Rows a pair may occupy: `[lo, hi)`.
fn row_band(label: f64, size: usize, spurious: Spurious) -> (i64, i64) {
    let half = (size / 2) as i64;
    let upper = (0, half);
    let lower = (half, size as i64);
    match (spurious, label == 0.0) {
        (Spurious::None, _) => (0, size as i64),
        (Spurious::Train, true) | (Spurious::Test, false) => upper,
        (Spurious::Train, false) | (Spurious::Test, true) => lower,
    }
}

/// Two-block object task. Blocks have intensity 1 on a zero background.
pub fn gen_objects(count: usize, seed: u64, spurious: Spurious, size: usize) -> Result<LabeledImageSet> {
    if count < 2 {
        return Err(Error::invalid(format!("object task needs at least 2 samples, got {count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(count, &mut rng);
    let tables = [displacements(0.0, size, spurious), displacements(1.0, size, spurious)];
    if tables.iter().any(Vec::is_empty) {
        return Err(Error::invalid(format!("cannot place object pairs on a {size}×{size} image")));
    }
    let b = BLOCK as i64;
    let n = size as i64;
    let mut images = vec![0.0; count * size * size];
    for (k, &y) in labels.iter().enumerate() {
        let (lo, hi) = row_band(y, size, spurious);
        let table = &tables[y as usize];
        let (dy, dx) = table[rng.random_range(0..table.len())];
        // top-left corner of the first block so both blocks fit in the band
        let r_min = lo.max(lo - dy);
        let r_max = (hi - b).min(hi - b - dy);
        let c_min = 0.max(-dx);
        let c_max = (n - b).min(n - b - dx);
        if r_min > r_max || c_min > c_max {
            return Err(Error::invalid(format!("displacement ({dy}, {dx}) does not fit a {size}×{size} image")));
        }
        let r = rng.random_range(r_min..=r_max);
        let c = rng.random_range(c_min..=c_max);
        let img = &mut images[k * size * size..(k + 1) * size * size];
        for (r0, c0) in [(r, c), (r + dy, c + dx)] {
            for i in 0..b {
                for j in 0..b {
                    img[((r0 + i) * n + c0 + j) as usize] = 1.0;
                }
            }
        }
    }
    Ok(LabeledImageSet { height: size, width: size, images, labels, seed, snr: None, spurious: Some(spurious) })
}

/// Centre distance of the two blocks in an object image, found from its
/// connected bright components. `None` if the image does not hold exactly two.
pub fn block_distance(image: &[f64], size: usize) -> Option<f64> {
    let mut seen = vec![false; image.len()];
    let mut centres = Vec::new();
    for start in 0..image.len() {
        if image[start] <= 0.5 || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let (mut sr, mut sc, mut k) = (0.0, 0.0, 0.0);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / size, p % size);
            sr += r as f64;
            sc += c as f64;
            k += 1.0;
            let mut push = |q: usize| {
                if image[q] > 0.5 && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                push(p - size);
            }
            if r + 1 < size {
                push(p + size);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < size {
                push(p + 1);
            }
        }
        centres.push((sr / k, sc / k));
    }
    match centres.as_slice() {
        [a, b] => Some(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()),
        _ => None,
    }
}

/// Intensity-weighted row centroid.
pub fn centroid_row(image: &[f64], width: usize) -> f64 {
    let total: f64 = image.iter().sum();
    image.iter().enumerate().map(|(i, v)| (i / width) as f64 * v).sum::<f64>() / total
}

/// A position-only classifier: thresholds the row centroid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CentroidOracle {
    pub threshold: f64,
    /// Label predicted for centroids above the threshold.
    pub label_below: f64,
}

impl CentroidOracle {
    /// Threshold halfway between the class-mean centroids.
    pub fn fit(set: &LabeledImageSet) -> Result<Self> {
        let mut sums = [0.0; 2];
        let mut counts = [0.0; 2];
        for i in 0..set.count() {
            let y = set.labels[i] as usize;
            sums[y] += centroid_row(set.image(i), set.width);
            counts[y] += 1.0;
        }
        if counts.contains(&0.0) {
            return Err(Error::invalid("centroid oracle needs both classes"));
        }
        let (m0, m1) = (sums[0] / counts[0], sums[1] / counts[1]);
        Ok(CentroidOracle { threshold: (m0 + m1) / 2.0, label_below: if m0 < m1 { 0.0 } else { 1.0 } })
    }

    pub fn predict(&self, image: &[f64], width: usize) -> f64 {
        if centroid_row(image, width) < self.threshold {
            self.label_below
        } else {
            1.0 - self.label_below
        }
    }

    pub fn accuracy(&self, set: &LabeledImageSet) -> f64 {
        let hits = (0..set.count()).filter(|&i| self.predict(set.image(i), set.width) == set.labels[i]).count();
        hits as f64 / set.count() as f64
    }
}

/// How to partition a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Part sizes as fractions summing to 1 (largest-remainder rounding).
    Fractions(Vec<f64>),
    /// Exact part sizes summing to the dataset size.
    Counts(Vec<usize>),
    /// `k` near-equal folds.
    Folds(usize),
}

fn part_sizes(total: usize, spec: &SplitSpec) -> Result<Vec<usize>> {
    let sizes = match spec {
        SplitSpec::Counts(c) => {
            if c.iter().sum::<usize>() != total {
                return Err(Error::invalid(format!("split counts {c:?} do not sum to {total}")));
            }
            c.clone()
        }
        SplitSpec::Folds(k) => {
            if *k < 2 {
                return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
            }
            (0..*k).map(|i| total / k + usize::from(i < total % k)).collect()
        }
        SplitSpec::Fractions(f) => {
            let sum: f64 = f.iter().sum();
            if f.is_empty() || f.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("split fractions {f:?} must be nonnegative and sum to 1")));
            }
            let raw: Vec<f64> = f.iter().map(|x| x * total as f64).collect();
            let mut sizes: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
            let mut order: Vec<usize> = (0..f.len()).collect();
            order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
            let short = total - sizes.iter().sum::<usize>();
            for &i in order.iter().take(short) {
                sizes[i] += 1;
            }
            sizes
        }
    };
    if let Some(i) = sizes.iter().position(|s| *s == 0) {
        return Err(Error::invalid(format!("split part {i} would be empty")));
    }
    Ok(sizes)
}

/// Disjoint index sets covering `0..labels.len()`, deterministic in `seed`.
///
/// With `stratified`, samples are arranged so that every prefix of the
/// permutation holds `⌊t·p⌋` positives (`p` the global positive fraction);
/// any contiguous part then has a class count within one sample of
/// proportional.
pub fn split(labels: &[f64], spec: &SplitSpec, seed: u64, stratified: bool) -> Result<Vec<Vec<usize>>> {
    let total = labels.len();
    let sizes = part_sizes(total, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = if stratified {
        let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..total).partition(|&i| labels[i] == 1.0);
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let n_pos = pos.len();
        let (mut pi, mut ni) = (pos.into_iter(), neg.into_iter());
        (1..=total)
            .map(|t| {
                let want = t * n_pos / total;
                let have = (t - 1) * n_pos / total;
                if want > have { pi.next() } else { ni.next() }.expect("class counts add up")
            })
            .collect()
    } else {
        let mut o: Vec<usize> = (0..total).collect();
        o.shuffle(&mut rng);
        o
    };
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        parts.push(order[start..start + s].to_vec());
        start += s;
    }
    Ok(parts)
}
