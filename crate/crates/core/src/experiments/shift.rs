use std::path::Path;

use serde::Serialize;

use super::{
    build_model, derive_seed, header_line, train_and_evaluate, write_json, BandCheck, CsvSink, Experiment, ResultRow,
    RunConfig, RESULT_COLUMNS,
};
use crate::datagen::{gen_objects, CentroidOracle, Spurious};
use crate::error::Result;
use crate::metrics::{delong_test, mcnemar_test, DeLongResult, McNemarResult, SignificanceReport};
use crate::spectra::BasisKind;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftReport {
    pub train_size: usize,
    pub test_size: usize,
    pub spectral_accuracy: f64,
    pub spatial_accuracy: f64,
    pub spectral_auc: f64,
    pub spatial_auc: f64,
    pub mcnemar: McNemarResult,
    pub delong: DeLongResult,
    pub significance: Vec<SignificanceReport>,
    /// Accuracy of a row-centroid threshold fitted on the training split;
    /// shows how much of the training signal is pure position.
    pub position_oracle_train: f64,
    pub position_oracle_test: f64,
    pub rows: Vec<ResultRow>,
}

impl ShiftReport {
    pub fn band_checks(&self) -> Vec<BandCheck> {
        vec![
            BandCheck {
                name: "Fourier spectral accuracy ≥ 0.97".into(),
                pass: self.spectral_accuracy >= 0.97,
                detail: format!("{:.4}", self.spectral_accuracy),
            },
            BandCheck {
                name: "spatial accuracy ≤ 0.45".into(),
                pass: self.spatial_accuracy <= 0.45,
                detail: format!("{:.4}", self.spatial_accuracy),
            },
            BandCheck {
                name: "McNemar p < 0.01".into(),
                pass: self.mcnemar.p < 0.01,
                detail: format!("p = {:.3e} (b01 {}, b10 {})", self.mcnemar.p, self.mcnemar.b01, self.mcnemar.b10),
            },
        ]
    }
}

/// Trains a Fourier-basis spectral model and the spatial model on the
/// spurious-train split and evaluates both on the reversed test split.
/// Writes `shift.csv` and `shift_report.json` into `out`.
pub fn run_shift(config: &RunConfig, out: &Path) -> Result<ShiftReport> {
    config.validate()?;
    let mut spectral_spec = config.spectral.clone();
    spectral_spec.basis_kind = BasisKind::Fourier;
    spectral_spec.validate()?;
    let size = spectral_spec.height;
    if config.spatial.height != size || config.spatial.width != size || spectral_spec.width != size {
        return Err(crate::Error::invalid("shift models need square images of one size"));
    }
    std::fs::create_dir_all(out)?;
    let sc = &config.shift;
    let train_set = gen_objects(sc.train_size, derive_seed(&[sc.seed, 10]), Spurious::Train, size)?;
    let test_set = gen_objects(sc.test_size, derive_seed(&[sc.seed, 11]), Spurious::Test, size)?;
    let train_idx: Vec<usize> = (0..train_set.count()).collect();

    let header = header_line(Experiment::Shift, config);
    let mut csv = CsvSink::create(&out.join("shift.csv"), &header, &RESULT_COLUMNS)?;
    let mut evals = Vec::new();
    let mut rows = Vec::new();
    for (k, (spec, model, basis)) in
        [(&spectral_spec, "spectral", "fourier"), (&config.spatial, "spatial", "patch")].into_iter().enumerate()
    {
        // The evaluation split is a separately generated set, so no training
        // index can appear in it.
        let mut m = build_model(spec, &train_set, &train_idx, &[], derive_seed(&[sc.seed, 100 + k as u64]))?;
        let mut train_cfg = config.train.clone();
        train_cfg.seed = derive_seed(&[sc.seed, 200 + k as u64]);
        let (eval, seconds) = train_and_evaluate(&mut m, &train_set, &test_set, &train_cfg)?;
        let row = ResultRow {
            experiment: Experiment::Shift.name().into(),
            model: model.into(),
            basis: basis.into(),
            snr: None,
            n_train: sc.train_size,
            seed: sc.seed,
            auc: eval.auc,
            confusion: eval.confusion,
            params: m.param_count(),
            train_seconds: config.timing.then_some(seconds),
        };
        csv.row(&row.to_csv())?;
        rows.push(row);
        evals.push(eval);
    }
    let (spec_eval, spat_eval) = (&evals[0], &evals[1]);
    let mcnemar = mcnemar_test(&spec_eval.correct, &spat_eval.correct)?;
    let delong = delong_test(&spec_eval.predictions, &spat_eval.predictions)?;
    let oracle = CentroidOracle::fit(&train_set)?;
    let accuracy = |e: &super::Evaluation| e.confusion.accuracy.unwrap_or(f64::NAN);
    let report = ShiftReport {
        train_size: sc.train_size,
        test_size: sc.test_size,
        spectral_accuracy: accuracy(spec_eval),
        spatial_accuracy: accuracy(spat_eval),
        spectral_auc: spec_eval.auc,
        spatial_auc: spat_eval.auc,
        mcnemar,
        delong,
        significance: vec![
            SignificanceReport { test: "mcnemar".into(), statistic: mcnemar.statistic, p: mcnemar.p, n: sc.test_size },
            SignificanceReport { test: "delong".into(), statistic: delong.z, p: delong.p, n: sc.test_size },
        ],
        position_oracle_train: oracle.accuracy(&train_set),
        position_oracle_test: oracle.accuracy(&test_set),
        rows,
    };
    write_json(&out.join("shift_report.json"), Experiment::Shift, config, &report)?;
    Ok(report)
}
