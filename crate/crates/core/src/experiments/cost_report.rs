use std::path::Path;

use serde::Serialize;

use super::{fmt_f, header_line, write_json, CsvSink, Experiment, RunConfig};
use crate::error::{Error, Result};
use crate::model::{count_cost, stripped_layer_multiplies, Cost, ModelSpec};
use crate::spectra::BasisKind;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub variant: String,
    pub side: usize,
    pub m: usize,
    pub n_tokens: usize,
    pub d_e: usize,
    pub layers: usize,
    pub cost: Cost,
    pub cost_trans_instrumented: u64,
    /// Layer cost relative to the spectral cell with the smallest `n` at the
    /// same `d_e`.
    pub layer_ratio: f64,
}

impl CostRow {
    pub fn matches(&self) -> bool {
        self.cost.cost_trans_per_layer == self.cost_trans_instrumented
    }
}

#[derive(Serialize)]
struct CostDoc<'a> {
    /// Cost decomposition of the default spectral model.
    reference: Cost,
    all_match: bool,
    rows: &'a [CostRow],
}

/// Closed-form and instrumented multiply counts for spectral and spatial
/// specs across the configured grid. Writes `cost_report.csv` and
/// `cost_report.json`.
pub fn run_cost_report(config: &RunConfig, out: &Path) -> Result<Vec<CostRow>> {
    let cc = &config.cost;
    if cc.sides.is_empty() || cc.n_tokens.is_empty() || cc.d_e.is_empty() || cc.layers.is_empty() {
        return Err(Error::invalid("cost grid axes must be nonempty"));
    }
    let base_n = *cc.n_tokens.iter().min().expect("nonempty");
    let mut rows = Vec::new();
    for &side in &cc.sides {
        for &d_e in &cc.d_e {
            for &layers in &cc.layers {
                let common =
                    |spec: ModelSpec| ModelSpec { height: side, width: side, d_e, layers, heads: cc.heads, ..spec };
                let mut specs: Vec<ModelSpec> = cc
                    .n_tokens
                    .iter()
                    .map(|&n| ModelSpec { n_tokens: n, ..common(ModelSpec::spectral(BasisKind::Pca)) })
                    .collect();
                if cc.patch_size > 0 && side % cc.patch_size == 0 {
                    let np = (side / cc.patch_size).pow(2);
                    specs.push(ModelSpec { n_tokens: np, patch_size: cc.patch_size, ..common(ModelSpec::spatial()) });
                }
                let reference = 3 * base_n * d_e * d_e + 2 * base_n * base_n * d_e;
                for spec in specs {
                    spec.validate()?;
                    let cost = count_cost(&spec);
                    let instrumented = stripped_layer_multiplies(spec.n_tokens, d_e, spec.heads, 0)?;
                    rows.push(CostRow {
                        variant: match spec.variant {
                            crate::model::Variant::Spectral => "spectral".into(),
                            crate::model::Variant::Spatial => "spatial".into(),
                        },
                        side,
                        m: spec.m(),
                        n_tokens: spec.n_tokens,
                        d_e,
                        layers,
                        cost,
                        cost_trans_instrumented: instrumented,
                        layer_ratio: cost.cost_trans_per_layer as f64 / reference as f64,
                    });
                }
            }
        }
    }
    std::fs::create_dir_all(out)?;
    let mut csv = CsvSink::create(
        &out.join("cost_report.csv"),
        &header_line(Experiment::CostReport, config),
        &[
            "variant",
            "side",
            "m",
            "n_tokens",
            "d_e",
            "layers",
            "cost_spec",
            "cost_embed",
            "cost_trans_closed",
            "cost_trans_instrumented",
            "match",
            "total",
            "layer_ratio",
        ],
    )?;
    for r in &rows {
        csv.row(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.side,
            r.m,
            r.n_tokens,
            r.d_e,
            r.layers,
            r.cost.cost_spec,
            r.cost.cost_embed,
            r.cost.cost_trans_per_layer,
            r.cost_trans_instrumented,
            r.matches(),
            r.cost.total,
            fmt_f(r.layer_ratio)
        ))?;
    }
    let doc =
        CostDoc { reference: count_cost(&config.spectral), all_match: rows.iter().all(CostRow::matches), rows: &rows };
    write_json(&out.join("cost_report.json"), Experiment::CostReport, config, &doc)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_matches_and_spatial_grows_quadratically() {
        let dir = tempfile::tempdir().unwrap();
        let rows = run_cost_report(&RunConfig::default(), dir.path()).unwrap();
        assert!(rows.iter().all(CostRow::matches));
        let cell =
            rows.iter().find(|r| r.variant == "spectral" && r.side == 28 && r.n_tokens == 16 && r.d_e == 16).unwrap();
        assert_eq!(cell.cost.cost_trans_per_layer, 20480);
        // Spectral layer cost does not depend on the image side.
        let spectral16: Vec<u64> = rows
            .iter()
            .filter(|r| r.variant == "spectral" && r.n_tokens == 16 && r.d_e == 16)
            .map(|r| r.cost.cost_trans_per_layer)
            .collect();
        assert!(spectral16.windows(2).all(|w| w[0] == w[1]));
        // Spatial: the attention term scales with N_P².
        let spatial: Vec<&CostRow> = rows.iter().filter(|r| r.variant == "spatial" && r.d_e == 16).collect();
        assert_eq!(spatial.iter().map(|r| r.n_tokens).collect::<Vec<_>>(), vec![16, 64, 256]);
        for r in &spatial {
            let np = r.n_tokens as u64;
            let d = r.d_e as u64;
            assert_eq!(r.cost.cost_trans_per_layer - 3 * np * d * d, 2 * np * np * d);
        }
        assert!(spatial[2].layer_ratio > 30.0);
        let json = std::fs::read_to_string(dir.path().join("cost_report.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["result"]["all_match"], true);
        assert_eq!(v["result"]["reference"]["cost_trans_per_layer"], 20480);
        assert_eq!(v["result"]["reference"]["total"], 12544 + 256 + 2 * 20480);
    }
}
