use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{write_json, Experiment, RunConfig};
use crate::error::{Error, Result};
use crate::gradcore::{grad_check, Graph, OpKind, Tensor, Var};
use crate::model::{ModelSpec, Pooling, VitClassifier};
use crate::spectra::{build_fourier, BasisKind};

pub const AUDIT_STEP: f64 = 1e-5;
pub const AUDIT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditCase {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Model cases: parameter group with the largest error.
    pub worst_group: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub step: f64,
    pub tolerance: f64,
    pub injected_fault: Option<String>,
    pub cases: Vec<AuditCase>,
    pub all_pass: bool,
}

impl AuditReport {
    pub fn failures(&self) -> Vec<&AuditCase> {
        self.cases.iter().filter(|c| !c.pass).collect()
    }
}

type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn rand_t(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Scalar `Σ w ⊙ y` with fixed random `w`.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_t(g.value(y).shape().to_vec(), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// One check per differentiable op; the input `[6, 4]` flows through the op
/// under test.
fn op_cases() -> Vec<(OpKind, Build)> {
    vec![
        (
            OpKind::Matmul,
            Box::new(|g, x| {
                let c = g.constant(rand_t(vec![4, 3], 1));
                let y = g.matmul(x, c)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::Bmm,
            Box::new(|g, x| {
                let a = g.split_heads(x, 2, 3, 2)?;
                let t = g.constant(rand_t(vec![4, 2, 5], 3));
                let y = g.bmm(a, t)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::BmmNt,
            Box::new(|g, x| {
                let a = g.split_heads(x, 2, 3, 2)?;
                let y = g.bmm_nt(a, a)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::Add,
            Box::new(|g, x| {
                let c = g.constant(rand_t(vec![6, 4], 4));
                let y = g.add(x, c)?;
                let y = g.add(y, x)?;
                let y = g.mul(y, y)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::AddRow,
            Box::new(|g, x| {
                let c = g.constant(rand_t(vec![6, 4], 5));
                let b = g.mean_rows(x, 6)?;
                let y = g.add_row(c, b)?;
                let y = g.add_row(y, b)?;
                let y = g.mul(y, y)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::Mul,
            Box::new(|g, x| {
                let c = g.constant(rand_t(vec![6, 4], 6));
                let y = g.mul(x, c)?;
                let y = g.mul(y, x)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::MulCol,
            Box::new(|g, x| {
                let col = g.constant(rand_t(vec![4, 1], 7));
                let c = g.matmul(x, col)?;
                let y = g.mul_col(x, c)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::Scale,
            Box::new(|g, x| {
                let y = g.scale(x, -1.7);
                let y = g.mul(y, x)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::LayerNorm,
            Box::new(|g, x| {
                let gamma = g.constant(rand_t(vec![4], 8));
                let y = g.layer_norm(x, gamma, gamma)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::Gelu,
            Box::new(|g, x| {
                let y = g.gelu(x);
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::SoftmaxRows,
            Box::new(|g, x| {
                let y = g.softmax_rows(x)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::MeanRows,
            Box::new(|g, x| {
                let y = g.mean_rows(x, 3)?;
                let y = g.mul(y, y)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::Transpose,
            Box::new(|g, x| {
                let y = g.transpose(x)?;
                let y = g.mul(y, y)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::TileRows,
            Box::new(|g, x| {
                let y = g.tile_rows(x, 3)?;
                let y = g.mul(y, y)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::SplitHeads,
            Box::new(|g, x| {
                let y = g.split_heads(x, 2, 3, 2)?;
                let y = g.mul(y, y)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::MergeHeads,
            Box::new(|g, x| {
                let h = g.split_heads(x, 2, 3, 2)?;
                let y = g.merge_heads(h, 2, 3, 2)?;
                let y = g.mul(y, y)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::PrependRow,
            Box::new(|g, x| {
                let r = g.mean_rows(x, 6)?;
                let y = g.prepend_row(x, r, 3)?;
                let y = g.mul(y, y)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::TakeFirstRow,
            Box::new(|g, x| {
                let y = g.take_first_row(x, 2)?;
                let y = g.mul(y, y)?;
                weighted(g, y, 2)
            }),
        ),
        (
            OpKind::Sum,
            Box::new(|g, x| {
                let s = g.sum(x);
                g.mul(s, s)
            }),
        ),
        (
            OpKind::BceWithLogits,
            Box::new(|g, x| {
                let z = g.mean_rows(x, 6)?;
                g.bce_with_logits(z, &[1.0, 0.0, 1.0, 0.0])
            }),
        ),
        (
            OpKind::FocalWithLogits,
            Box::new(|g, x| {
                let z = g.mean_rows(x, 6)?;
                g.focal_with_logits(z, &[1.0, 0.0, 0.0, 1.0], 2.0, 0.25)
            }),
        ),
    ]
}

fn images(count: usize, m: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count * m).map(|_| rng.random::<f64>()).collect()
}

/// Checks every parameter group of `model` against finite differences of
/// the BCE loss; returns the largest error and its group.
fn check_model(model: &VitClassifier, imgs: &[f64], labels: &[f64], fault: Option<OpKind>) -> Result<(f64, String)> {
    let count = labels.len();
    let feats = model.features(imgs, count)?;
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    let mut worst = (0.0, String::new());
    for (gi, (name, _)) in model.params().iter().enumerate() {
        let err = grad_check(
            |g, x| {
                if let Some(k) = fault {
                    g.inject_fault(k);
                }
                let vars: Vec<Var> =
                    params.iter().enumerate().map(|(i, t)| if i == gi { x } else { g.constant(t.clone()) }).collect();
                let out = model.forward_graph(g, &vars, &feats, count)?;
                g.bce_with_logits(out.logits, labels)
            },
            &params[gi],
            AUDIT_STEP,
        )?;
        if err >= worst.0 {
            worst = (err, name.clone());
        }
    }
    Ok(worst)
}

fn scaled(mut model: VitClassifier, factor: f64) -> VitClassifier {
    for t in model.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
    model
}

/// Miniature spectral and spatial models. Weights are scaled up from the
/// N(0, 0.02) init so attention is far from uniform, but only enough to keep
/// the loss near 1: the rounding error of a central difference grows with
/// the loss value.
fn audit_models() -> Result<Vec<(&'static str, VitClassifier)>> {
    let spectral = ModelSpec {
        n_tokens: 4,
        height: 6,
        width: 6,
        d_e: 8,
        d_ff: 8,
        bias: true,
        pooling: Pooling::ClassToken,
        ..ModelSpec::spectral(BasisKind::Fourier)
    };
    let spatial =
        ModelSpec { n_tokens: 4, patch_size: 3, height: 6, width: 6, d_e: 8, d_ff: 8, ..ModelSpec::spatial() };
    Ok(vec![
        ("model_spectral", scaled(VitClassifier::spectral(spectral, build_fourier(6, 6, 4)?, 11)?, 5.0)),
        ("model_spatial", scaled(VitClassifier::spatial(spatial, 12)?, 5.0)),
    ])
}

/// Runs every registered gradient check, optionally with the backward rule
/// of one op negated. Writes `grad_audit.json` into `out` when given.
pub fn run_grad_audit(config: &RunConfig, out: Option<&Path>) -> Result<AuditReport> {
    let fault = match &config.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::invalid(format!("unknown op `{name}`")))?),
        None => None,
    };
    let x = rand_t(vec![6, 4], 42);
    let mut cases = Vec::new();
    for (kind, build) in op_cases() {
        let err = grad_check(
            |g, v| {
                if let Some(k) = fault {
                    g.inject_fault(k);
                }
                build(g, v)
            },
            &x,
            AUDIT_STEP,
        )?;
        cases.push(AuditCase {
            name: kind.name().into(),
            max_rel_err: err,
            pass: err < AUDIT_TOLERANCE,
            worst_group: None,
        });
    }
    for (name, model) in audit_models()? {
        let labels = [1.0, 0.0, 1.0];
        let imgs = images(labels.len(), model.spec().m(), 7);
        let (err, group) = check_model(&model, &imgs, &labels, fault)?;
        cases.push(AuditCase {
            name: name.into(),
            max_rel_err: err,
            pass: err < AUDIT_TOLERANCE,
            worst_group: Some(group),
        });
    }
    let report = AuditReport {
        step: AUDIT_STEP,
        tolerance: AUDIT_TOLERANCE,
        injected_fault: fault.map(|k| k.name().to_string()),
        all_pass: cases.iter().all(|c| c.pass),
        cases,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("grad_audit.json"), Experiment::GradAudit, config, &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_differentiable_op_is_registered() {
        let names: Vec<OpKind> = op_cases().into_iter().map(|(k, _)| k).collect();
        assert_eq!(names, OpKind::DIFFERENTIABLE.to_vec());
    }

    #[test]
    fn clean_build_passes() {
        let report = run_grad_audit(&RunConfig::default(), None).unwrap();
        assert!(report.all_pass, "{:?}", report.failures());
        assert_eq!(report.cases.len(), OpKind::DIFFERENTIABLE.len() + 2);
    }

    #[test]
    fn injected_fault_fails_that_op() {
        for op in ["gelu", "layer_norm", "bmm_nt"] {
            let cfg = RunConfig { inject_fault: Some(op.into()), ..RunConfig::default() };
            let report = run_grad_audit(&cfg, None).unwrap();
            let case = report.cases.iter().find(|c| c.name == op).unwrap();
            assert!(!case.pass, "{op}: {}", case.max_rel_err);
            assert!(!report.all_pass);
            // Both models use these ops, so they fail as well.
            assert!(report.cases.iter().filter(|c| c.name.starts_with("model_")).all(|c| !c.pass));
        }
    }

    #[test]
    fn report_is_json() {
        let dir = tempfile::tempdir().unwrap();
        run_grad_audit(&RunConfig::default(), Some(dir.path())).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("grad_audit.json")).unwrap()).unwrap();
        assert_eq!(v["result"]["all_pass"], true);
        assert!(v["result"]["cases"][0]["max_rel_err"].is_number());
    }
}
