use std::path::Path;

use serde::Serialize;

use super::{
    build_model, derive_seed, fmt_f, header_line, parallel_map, train_and_evaluate, write_json, BandCheck, CsvSink,
    Experiment, ResultRow, RunConfig, RESULT_COLUMNS,
};
use crate::datagen::{gen_pattern, split, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{crossover, AucCurve};
use crate::model::{ModelSpec, Variant};

/// Crossover result for one SNR level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossoverEntry {
    pub snr: f64,
    /// `None` when the gap never closes on the grid (or curves are missing).
    pub n_star: Option<f64>,
    /// Spectral minus spatial mean AUC per grid point.
    pub gap: Vec<f64>,
    pub spectral: Option<AucCurve>,
    pub spatial: Option<AucCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunFailure {
    pub model: String,
    pub snr: f64,
    pub n_train: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<RunFailure>,
    pub crossovers: Vec<CrossoverEntry>,
}

impl SweepReport {
    pub fn crossover_at(&self, snr: f64) -> Option<&CrossoverEntry> {
        self.crossovers.iter().find(|c| c.snr == snr)
    }

    /// Acceptance bands that apply to the SNR levels present in the sweep.
    pub fn band_checks(&self) -> Vec<BandCheck> {
        let mut checks = Vec::new();
        let show = |n: Option<f64>| n.map_or_else(|| "none".to_string(), |v| format!("{v:.1}"));
        if let Some(c) = self.crossover_at(1.0) {
            let pass = c.n_star.is_some_and(|n| (10.0..=100.0).contains(&n));
            checks.push(BandCheck {
                name: "crossover N* at SNR=1 within [10, 100]".into(),
                pass,
                detail: format!("N* = {}", show(c.n_star)),
            });
        }
        if let Some(c) = self.crossover_at(0.25) {
            let gap = c.spectral.as_ref().and_then(|s| s.n_grid.iter().position(|&n| n == 100)).map(|i| c.gap[i]);
            checks.push(BandCheck {
                name: "spectral AUC advantage at SNR=1/4, N=100 ≥ 0.05".into(),
                pass: gap.is_some_and(|g| g >= 0.05),
                detail: format!("gap = {}", gap.map_or_else(|| "n/a".into(), |g| format!("{g:.4}"))),
            });
            checks.push(BandCheck {
                name: "no crossover at SNR=1/4 for N ≤ 316".into(),
                pass: c.n_star.is_none_or(|n| n > 316.0),
                detail: format!("N* = {}", show(c.n_star)),
            });
        }
        if let (Some(hi), Some(lo)) = (self.crossover_at(1.0), self.crossover_at(0.25)) {
            let pass = match (hi.n_star, lo.n_star) {
                (Some(a), Some(b)) => a < b,
                (Some(_), None) => true,
                _ => false,
            };
            checks.push(BandCheck {
                name: "N*(SNR=1) < N*(SNR=1/4)".into(),
                pass,
                detail: format!("{} vs {}", show(hi.n_star), show(lo.n_star)),
            });
        }
        checks
    }
}

struct Cell {
    snr: f64,
    n: usize,
    seed: u64,
}

fn model_label(spec: &ModelSpec) -> (&'static str, String) {
    match spec.variant {
        Variant::Spectral => ("spectral", spec.basis_kind.name().to_string()),
        Variant::Spatial => ("spatial", "patch".to_string()),
    }
}

fn run_cell(config: &RunConfig, cell: &Cell) -> Result<Vec<std::result::Result<ResultRow, RunFailure>>> {
    let size = config.spectral.height;
    let data_seed = derive_seed(&[cell.seed, cell.snr.to_bits(), cell.n as u64]);
    let data = gen_pattern(cell.n + config.test_size, cell.snr, data_seed, size)?;
    let parts = split(&data.labels, &SplitSpec::Counts(vec![cell.n, config.test_size]), data_seed ^ 1, true)?;
    let (train_idx, test_idx) = (&parts[0], &parts[1]);
    let train_set = data.subset(train_idx);
    let test_set = data.subset(test_idx);
    let mut out = Vec::with_capacity(2);
    for (k, spec) in [&config.spectral, &config.spatial].into_iter().enumerate() {
        let (model, basis) = model_label(spec);
        let outcome = (|| {
            let mut m = build_model(spec, &data, train_idx, test_idx, derive_seed(&[cell.seed, 100 + k as u64]))?;
            let mut train_cfg = config.train.clone();
            train_cfg.seed = derive_seed(&[cell.seed, cell.n as u64, 200 + k as u64]);
            let (eval, seconds) = train_and_evaluate(&mut m, &train_set, &test_set, &train_cfg)?;
            Ok::<_, Error>(ResultRow {
                experiment: Experiment::PatternSweep.name().into(),
                model: model.into(),
                basis: basis.clone(),
                snr: Some(cell.snr),
                n_train: cell.n,
                seed: cell.seed,
                auc: eval.auc,
                confusion: eval.confusion,
                params: m.param_count(),
                train_seconds: config.timing.then_some(seconds),
            })
        })();
        out.push(outcome.map_err(|e| RunFailure {
            model: model.into(),
            snr: cell.snr,
            n_train: cell.n,
            seed: cell.seed,
            error: e.to_string(),
        }));
    }
    Ok(out)
}

fn curve_from(grid: &[usize], aucs: &[Vec<f64>]) -> Option<AucCurve> {
    if aucs.iter().any(Vec::is_empty) {
        return None;
    }
    let seeds = aucs.iter().map(Vec::len).min()?;
    let mut curve =
        AucCurve::from_runs(grid.to_vec(), &aucs.iter().map(|a| a[..seeds].to_vec()).collect::<Vec<_>>()).ok()?;
    // Means and spreads over every successful seed, not only the common prefix.
    for (i, a) in aucs.iter().enumerate() {
        let c = AucCurve::from_runs(vec![grid[i]], std::slice::from_ref(a)).ok()?;
        curve.mean[i] = c.mean[0];
        curve.std[i] = c.std[0];
    }
    Some(curve)
}

/// Runs the SNR × N × seed grid, writing `pattern_sweep.csv`,
/// `pattern_curves.csv`, `crossover.json` and `failures.csv` into `out`.
pub fn run_pattern_sweep(config: &RunConfig, out: &Path) -> Result<SweepReport> {
    config.validate()?;
    if config.spectral.height != config.spatial.height || config.spectral.width != config.spatial.width {
        return Err(Error::invalid("spectral and spatial specs must share the image size"));
    }
    if config.spectral.height != config.spectral.width {
        return Err(Error::invalid("pattern images are square"));
    }
    std::fs::create_dir_all(out)?;
    let header = header_line(Experiment::PatternSweep, config);
    let mut rows_out = CsvSink::create(&out.join("pattern_sweep.csv"), &header, &RESULT_COLUMNS)?;
    let mut fail_out =
        CsvSink::create(&out.join("failures.csv"), &header, &["model", "snr", "n_train", "seed", "error"])?;

    let mut cells = Vec::new();
    for &snr in &config.snr {
        for &n in &config.n_grid {
            for s in 0..config.seeds as u64 {
                cells.push(Cell { snr, n, seed: config.seed_offset + s });
            }
        }
    }

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for batch in cells.chunks(config.workers.max(1) * 2) {
        let results = parallel_map(batch, config.workers, |c| run_cell(config, c))?;
        for result in results {
            for outcome in result? {
                match outcome {
                    Ok(row) => {
                        rows_out.row(&row.to_csv())?;
                        rows.push(row);
                    }
                    Err(f) => {
                        let msg = f.error.replace([',', '\n'], ";");
                        fail_out.row(&format!("{},{},{},{},{msg}", f.model, fmt_f(f.snr), f.n_train, f.seed))?;
                        failures.push(f);
                    }
                }
            }
        }
    }

    let mut curves_out = CsvSink::create(
        &out.join("pattern_curves.csv"),
        &header,
        &["snr", "n_train", "model", "mean_auc", "std_auc", "runs"],
    )?;
    let mut crossovers = Vec::new();
    for &snr in &config.snr {
        let collect = |model: &str| -> Vec<Vec<f64>> {
            config
                .n_grid
                .iter()
                .map(|&n| {
                    rows.iter()
                        .filter(|r| r.model == model && r.snr == Some(snr) && r.n_train == n)
                        .map(|r| r.auc)
                        .collect()
                })
                .collect()
        };
        let (spec_aucs, spat_aucs) = (collect("spectral"), collect("spatial"));
        for (i, &n) in config.n_grid.iter().enumerate() {
            for (model, aucs) in [("spectral", &spec_aucs[i]), ("spatial", &spat_aucs[i])] {
                if let Some(c) = curve_from(&[n], std::slice::from_ref(aucs)) {
                    curves_out.row(&format!(
                        "{},{n},{model},{},{},{}",
                        fmt_f(snr),
                        fmt_f(c.mean[0]),
                        fmt_f(c.std[0]),
                        aucs.len()
                    ))?;
                }
            }
        }
        let spectral = curve_from(&config.n_grid, &spec_aucs);
        let spatial = curve_from(&config.n_grid, &spat_aucs);
        let (n_star, gap) = match (&spectral, &spatial) {
            (Some(a), Some(b)) => {
                let n = crossover(a, b, config.delta)?;
                (n.is_finite().then_some(n), a.mean.iter().zip(&b.mean).map(|(x, y)| x - y).collect())
            }
            _ => (None, Vec::new()),
        };
        crossovers.push(CrossoverEntry { snr, n_star, gap, spectral, spatial });
    }
    write_json(&out.join("crossover.json"), Experiment::PatternSweep, config, &crossovers)?;
    Ok(SweepReport { rows, failures, crossovers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TrainConfig;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig {
            seeds: 2,
            n_grid: vec![10, 20],
            snr: vec![1.0],
            test_size: 20,
            train: TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() },
            ..RunConfig::default()
        };
        for spec in [&mut cfg.spectral, &mut cfg.spatial] {
            spec.layers = 1;
        }
        cfg
    }

    #[test]
    fn row_count_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { seeds: 3, n_grid: vec![10], ..tiny() };
        let report = run_pattern_sweep(&cfg, dir.path()).unwrap();
        assert_eq!(report.rows.len(), 2 * 3);
        assert!(report.failures.is_empty());
        let text = std::fs::read_to_string(dir.path().join("pattern_sweep.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# spectral-vit schema=v1 experiment=pattern-sweep config={"));
        assert_eq!(lines[1], RESULT_COLUMNS.join(","));
        assert_eq!(lines.len(), 2 + 6);
        assert!(lines[2..].iter().all(|l| l.split(',').count() == RESULT_COLUMNS.len()));
        // The echoed config parses back to the one that ran.
        let echoed = lines[0].split_once("config=").unwrap().1;
        assert_eq!(RunConfig::from_json(echoed).unwrap(), cfg);
    }

    #[test]
    fn reruns_are_byte_identical_and_workers_do_not_matter() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = tiny();
        run_pattern_sweep(&cfg, a.path()).unwrap();
        run_pattern_sweep(&cfg, b.path()).unwrap();
        for f in ["pattern_sweep.csv", "pattern_curves.csv", "crossover.json"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let c = tempfile::tempdir().unwrap();
        let par = RunConfig { workers: 2, ..cfg.clone() };
        run_pattern_sweep(&par, c.path()).unwrap();
        let body = |p: &Path| {
            let t = std::fs::read_to_string(p.join("pattern_sweep.csv")).unwrap();
            t.lines().skip(1).map(str::to_owned).collect::<Vec<_>>()
        };
        assert_eq!(body(a.path()), body(c.path()));
    }

    #[test]
    fn failing_runs_are_recorded_and_the_sweep_continues() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        // A learning rate this large drives the loss to NaN.
        cfg.train.lr = 1e300;
        let report = run_pattern_sweep(&cfg, dir.path()).unwrap();
        assert_eq!(report.rows.len() + report.failures.len(), 2 * 2 * 2);
        assert!(!report.failures.is_empty());
        let text = std::fs::read_to_string(dir.path().join("failures.csv")).unwrap();
        assert_eq!(text.lines().count(), 2 + report.failures.len());
    }

    #[test]
    fn invalid_config_is_rejected_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { snr: vec![], ..tiny() };
        assert!(matches!(run_pattern_sweep(&cfg, dir.path()), Err(Error::Validation(_))));
        assert!(!dir.path().join("pattern_sweep.csv").exists());
    }
}
