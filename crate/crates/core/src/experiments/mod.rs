//! Batch experiments: configuration, result files and the shared plumbing
//! (seed derivation, basis fitting behind a leakage guard, evaluation).

mod audit;
mod basis_demo;
mod cost_report;
mod pattern;
mod shift;

pub use audit::{run_grad_audit, AuditCase, AuditReport};
pub use basis_demo::{run_basis_demo, BasisDemoRow};
pub use cost_report::{run_cost_report, CostRow};
pub use pattern::{run_pattern_sweep, CrossoverEntry, SweepReport};
pub use shift::{run_shift, ShiftReport};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledImageSet;
use crate::error::{Error, Result};
use crate::metrics::{auc, confusion_metrics, ConfusionMetrics, ScoredPredictions};
use crate::model::{ModelSpec, Variant, VitClassifier};
use crate::spectra::{build_fourier, build_laplacian, fit_pca_padded, BasisKind, GridAdjacency, SpectralBasis};
use crate::training::{train, TrainConfig};

/// Version tag written into every result file header.
pub const SCHEMA_VERSION: u32 = 1;

/// Column order of per-run result CSVs.
pub const RESULT_COLUMNS: [&str; 13] = [
    "experiment",
    "model",
    "basis",
    "snr",
    "n_train",
    "seed",
    "auc",
    "accuracy",
    "balanced_accuracy",
    "specificity",
    "f1",
    "params",
    "train_seconds",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    PatternSweep,
    Shift,
    BasisDemo,
    CostReport,
    GradAudit,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::PatternSweep => "pattern-sweep",
            Experiment::Shift => "shift",
            Experiment::BasisDemo => "basis-demo",
            Experiment::CostReport => "cost-report",
            Experiment::GradAudit => "grad-audit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig { train_size: 10_000, test_size: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisDemoConfig {
    /// Phantom side length.
    pub size: usize,
    /// Component counts; values above a basis' maximum are clipped to it.
    pub n_grid: Vec<usize>,
    /// Random phantom variants used to fit the PCA basis.
    pub pca_images: usize,
    pub seed: u64,
}

impl Default for BasisDemoConfig {
    fn default() -> Self {
        BasisDemoConfig { size: 32, n_grid: vec![1, 4, 16, 64, 256, 1024], pca_images: 300, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    /// Square image sides.
    pub sides: Vec<usize>,
    /// Spectral component counts.
    pub n_tokens: Vec<usize>,
    pub d_e: Vec<usize>,
    pub layers: Vec<usize>,
    /// Patch side of the spatial rows.
    pub patch_size: usize,
    pub heads: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            sides: vec![28, 56, 112],
            n_tokens: vec![16, 64],
            d_e: vec![16, 32],
            layers: vec![2],
            patch_size: 7,
            heads: 2,
        }
    }
}

/// Full experiment configuration. Every field has a default, so a JSON
/// config only needs the values it overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: usize,
    /// Added to every seed index, so disjoint seed ranges can be run apart.
    pub seed_offset: u64,
    pub n_grid: Vec<usize>,
    pub snr: Vec<f64>,
    pub test_size: usize,
    pub spectral: ModelSpec,
    pub spatial: ModelSpec,
    pub train: TrainConfig,
    /// Comparable-performance tolerance on mean AUC.
    pub delta: f64,
    pub workers: usize,
    /// Record wall-clock training time (makes result files non-reproducible).
    pub timing: bool,
    pub shift: ShiftConfig,
    pub basis_demo: BasisDemoConfig,
    pub cost: CostConfig,
    /// Grad audit only: negate the backward rule of this op.
    pub inject_fault: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: 20,
            seed_offset: 0,
            n_grid: vec![10, 32, 100, 316, 1000],
            snr: vec![1.0],
            test_size: 500,
            spectral: ModelSpec::spectral(BasisKind::Pca),
            spatial: ModelSpec::spatial(),
            train: TrainConfig::default(),
            delta: crate::metrics::CROSSOVER_DELTA,
            workers: 1,
            timing: false,
            shift: ShiftConfig::default(),
            basis_demo: BasisDemoConfig::default(),
            cost: CostConfig::default(),
            inject_fault: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::invalid("seeds must be at least 1"));
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("N grid must be nonempty and strictly increasing"));
        }
        if self.n_grid[0] < 2 {
            return Err(Error::invalid("every N must be at least 2"));
        }
        if self.snr.is_empty() || self.snr.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("SNR list must be nonempty and positive"));
        }
        if self.test_size < 2 {
            return Err(Error::invalid("test set needs at least 2 images"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid("delta must be finite and ≥ 0"));
        }
        if self.spectral.variant != Variant::Spectral || self.spatial.variant != Variant::Spatial {
            return Err(Error::invalid("`spectral` and `spatial` must hold specs of those variants"));
        }
        self.spectral.validate()?;
        self.spatial.validate()?;
        self.train.validate()?;
        if self.shift.train_size < 2 || self.shift.test_size < 2 {
            return Err(Error::invalid("shift train and test sizes must be at least 2"));
        }
        if let Some(name) = &self.inject_fault {
            if crate::gradcore::OpKind::from_name(name).is_none() {
                return Err(Error::invalid(format!("unknown op `{name}` for fault injection")));
            }
        }
        Ok(())
    }

    /// Compact single-line JSON echo used in file headers.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}

/// Deterministic seed from a list of integers (SplitMix64 finaliser chain).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x5EED_5EED_5EED_5EED;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Refuses to proceed when basis-fitting indices overlap evaluation indices.
pub fn ensure_disjoint(fit: &[usize], eval: &[usize]) -> Result<()> {
    let fit: BTreeSet<usize> = fit.iter().copied().collect();
    if let Some(i) = eval.iter().find(|i| fit.contains(i)) {
        return Err(Error::invalid(format!("leakage guard: sample {i} is used for basis fitting and evaluation")));
    }
    Ok(())
}

/// Basis for a spectral spec, fitted (PCA) on the `fit` subset of `data` only.
pub fn fit_basis(spec: &ModelSpec, data: &LabeledImageSet, fit: &[usize], eval: &[usize]) -> Result<SpectralBasis> {
    ensure_disjoint(fit, eval)?;
    let (h, w, n) = (spec.height, spec.width, spec.n_tokens);
    if data.height != h || data.width != w {
        return Err(Error::invalid(format!("data are {}×{} but the spec expects {h}×{w}", data.height, data.width)));
    }
    match spec.basis_kind {
        BasisKind::Pca => {
            let subset = data.subset(fit);
            fit_pca_padded(&subset.images, subset.count(), h, w, n)
        }
        BasisKind::Fourier => build_fourier(h, w, n),
        BasisKind::Laplacian => build_laplacian(h, w, GridAdjacency::FourNeighbor, spec.tau, n),
    }
}

/// Builds the model described by `spec` (fitting its basis on `train_idx`).
pub fn build_model(
    spec: &ModelSpec,
    data: &LabeledImageSet,
    train_idx: &[usize],
    eval_idx: &[usize],
    seed: u64,
) -> Result<VitClassifier> {
    match spec.variant {
        Variant::Spectral => {
            let basis = fit_basis(spec, data, train_idx, eval_idx)?;
            VitClassifier::spectral(spec.clone(), basis, seed)
        }
        Variant::Spatial => {
            ensure_disjoint(train_idx, eval_idx)?;
            VitClassifier::spatial(spec.clone(), seed)
        }
    }
}

/// Test-set evaluation of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub auc: f64,
    pub confusion: ConfusionMetrics,
    pub correct: Vec<bool>,
    pub predictions: ScoredPredictions,
}

pub fn evaluate(model: &VitClassifier, test: &LabeledImageSet) -> Result<Evaluation> {
    let logits = model.logits(&test.images, test.count())?;
    let preds = ScoredPredictions::new(logits, test.labels.clone())?;
    Ok(Evaluation {
        auc: auc(&preds)?,
        confusion: confusion_metrics(&preds)?,
        correct: preds.correct(),
        predictions: preds,
    })
}

/// Trains a freshly built model and evaluates it on `test`.
pub fn train_and_evaluate(
    model: &mut VitClassifier,
    train_set: &LabeledImageSet,
    test: &LabeledImageSet,
    config: &TrainConfig,
) -> Result<(Evaluation, f64)> {
    let start = std::time::Instant::now();
    train(model, &train_set.images, &train_set.labels, config)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok((evaluate(model, test)?, seconds))
}

/// One row of a result CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub model: String,
    pub basis: String,
    pub snr: Option<f64>,
    pub n_train: usize,
    pub seed: u64,
    pub auc: f64,
    pub confusion: ConfusionMetrics,
    pub params: usize,
    pub train_seconds: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        let c = &self.confusion;
        [
            self.experiment.clone(),
            self.model.clone(),
            self.basis.clone(),
            self.snr.map_or_else(String::new, |s| s.to_string()),
            self.n_train.to_string(),
            self.seed.to_string(),
            self.auc.to_string(),
            opt(c.accuracy),
            opt(c.balanced_accuracy),
            opt(c.specificity),
            opt(c.f1),
            self.params.to_string(),
            self.train_seconds.map_or_else(String::new, |s| format!("{s:.3}")),
        ]
        .join(",")
    }
}

/// Header comment line carrying the schema version and the resolved config.
pub fn header_line(experiment: Experiment, config: &RunConfig) -> String {
    format!("# spectral-vit schema=v{SCHEMA_VERSION} experiment={} config={}", experiment.name(), config.echo())
}

/// Append-only CSV writer that flushes after every row.
pub struct CsvSink {
    out: BufWriter<File>,
}

impl CsvSink {
    pub fn create(path: &Path, header: &str, columns: &[&str]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{header}")?;
        writeln!(out, "{}", columns.join(","))?;
        out.flush()?;
        Ok(CsvSink { out })
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Writes a pretty JSON document that also carries the config echo.
pub fn write_json<T: Serialize>(path: &Path, experiment: Experiment, config: &RunConfig, body: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        schema: u32,
        experiment: &'static str,
        config: &'a RunConfig,
        result: &'a T,
    }
    let doc = Doc { schema: SCHEMA_VERSION, experiment: experiment.name(), config, result: body };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Formats a float for CSV output (shortest round-trip representation).
pub(crate) fn fmt_f(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").expect("string write");
    s
}

/// Outcome of an acceptance-band check for `--assert`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Runs `f` on `items` with `workers` threads, returning results in input
/// order.
pub(crate) fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if workers <= 1 {
        return Ok(items.iter().map(f).collect());
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_pattern;

    #[test]
    fn guard_rejects_overlap() {
        assert!(ensure_disjoint(&[1, 2, 3], &[4, 5]).is_ok());
        let err = ensure_disjoint(&[1, 2, 3], &[5, 3]).unwrap_err();
        assert!(matches!(err, Error::Validation(m) if m.contains("leakage")));
        let data = gen_pattern(20, 1.0, 0, 28).unwrap();
        let spec = ModelSpec::spectral(BasisKind::Pca);
        let fit: Vec<usize> = (0..12).collect();
        assert!(fit_basis(&spec, &data, &fit, &[11, 12]).is_err());
        assert!(fit_basis(&spec, &data, &fit, &[12, 13]).is_ok());
    }

    #[test]
    fn pca_basis_sees_only_the_fit_subset() {
        let data = gen_pattern(30, 1.0, 4, 28).unwrap();
        let spec = ModelSpec::spectral(BasisKind::Pca);
        let fit: Vec<usize> = (0..20).collect();
        let eval: Vec<usize> = (20..30).collect();
        let from_guard = fit_basis(&spec, &data, &fit, &eval).unwrap();
        let sub = data.subset(&fit);
        let direct = fit_pca_padded(&sub.images, 20, 28, 28, 16).unwrap();
        assert_eq!(from_guard, direct);
    }

    #[test]
    fn config_round_trip_and_partial_json() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.echo()).unwrap(), cfg);
        let partial = RunConfig::from_json(r#"{"seeds": 3, "snr": [0.25]}"#).unwrap();
        assert_eq!(partial.seeds, 3);
        assert_eq!(partial.n_grid, cfg.n_grid);
        assert!(RunConfig::from_json(r#"{"sedes": 3}"#).is_err());
        let bad = RunConfig { n_grid: vec![100, 10], ..RunConfig::default() };
        assert!(bad.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 2, 3]));
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 3, 2]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u64> = (0..50).collect();
        let seq = parallel_map(&items, 1, |x| x * x).unwrap();
        let par = parallel_map(&items, 3, |x| x * x).unwrap();
        assert_eq!(seq, par);
    }
}
