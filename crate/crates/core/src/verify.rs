//! Compare a distributed run against the reference trainer.

use serde::Serialize;

use crate::config::RunConfig;
use crate::model::{Batch, Example, TrainedModel};
use crate::oracle::train_reference;
use crate::pipeline::{run_training, PipelineError};

/// Largest tolerated relative AUC difference.
pub const AUC_TOLERANCE: f64 = 1e-3;
/// Largest tolerated relative parameter difference in deterministic mode.
pub const PARAM_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative difference, so values near zero are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamDiff {
    /// `key:<k>[<i>]` or `dense[<i>]`.
    pub param: String,
    pub distributed: f32,
    pub reference: f32,
    pub rel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelDiff {
    pub bit_exact: bool,
    pub max_rel: f64,
    /// Largest differences, worst first.
    pub worst: Vec<ParamDiff>,
    pub compared: usize,
}

/// Element-wise comparison; keys present on one side only compare against
/// zero.
pub fn compare_models(distributed: &TrainedModel, reference: &TrainedModel, top: usize) -> ModelDiff {
    let mut diffs: Vec<ParamDiff> = Vec::new();
    let mut bit_exact = distributed.dense.weights.len() == reference.dense.weights.len()
        && distributed.sparse.keys().eq(reference.sparse.keys());
    let mut push = |param: &dyn Fn() -> String, a: f32, b: f32| {
        if a.to_bits() != b.to_bits() {
            bit_exact = false;
        }
        diffs.push(ParamDiff { param: param(), distributed: a, reference: b, rel: rel_diff(a.into(), b.into()) });
    };
    for (i, (&a, &b)) in distributed.dense.weights.iter().zip(&reference.dense.weights).enumerate() {
        push(&|| format!("dense[{i}]"), a, b);
    }
    let keys: std::collections::BTreeSet<_> = distributed.sparse.keys().chain(reference.sparse.keys()).collect();
    let width = reference.dense.input_width();
    let zero = vec![0.0f32; width];
    for k in keys {
        let a = distributed.sparse.get(k).map_or(&zero, |p| &p.embedding);
        let b = reference.sparse.get(k).map_or(&zero, |p| &p.embedding);
        for i in 0..width {
            push(&|| format!("key:{k}[{i}]"), a[i], b[i]);
        }
    }
    let compared = diffs.len();
    let max_rel = diffs.iter().map(|d| d.rel).fold(0.0, f64::max);
    diffs.sort_by(|a, b| b.rel.total_cmp(&a.rel));
    diffs.retain(|d| d.rel > 0.0);
    diffs.truncate(top);
    ModelDiff { bit_exact, max_rel, worst: diffs, compared }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub params: ModelDiff,
    /// Whether the run was required to match bit for bit.
    pub require_bit_exact: bool,
    pub auc_distributed: Option<f64>,
    pub auc_reference: Option<f64>,
    pub auc_rel_diff: Option<f64>,
    pub failures: Vec<String>,
}

fn eval_auc(model: &TrainedModel, holdout: &[Example]) -> Result<Option<f64>, PipelineError> {
    let positives = holdout.iter().filter(|e| e.label == 1).count();
    if positives == 0 || positives == holdout.len() {
        return Ok(None);
    }
    Ok(Some(model.auc(holdout)?))
}

/// Judge an already trained pair of models.
pub fn judge(
    cfg: &RunConfig,
    distributed: &TrainedModel,
    reference: &TrainedModel,
    holdout: &[Example],
) -> Result<VerifyReport, PipelineError> {
    let params = compare_models(distributed, reference, 10);
    let require_bit_exact = cfg.deterministic && cfg.nodes == 1 && cfg.devices == 1;
    let mut failures = Vec::new();
    if require_bit_exact && !params.bit_exact {
        failures.push(format!("parameters are not bit-identical (max relative difference {:e})", params.max_rel));
    }
    if cfg.deterministic && params.max_rel >= PARAM_TOLERANCE {
        failures.push(format!(
            "max relative parameter difference {:e} exceeds {PARAM_TOLERANCE:e}",
            params.max_rel
        ));
    }
    let auc_distributed = eval_auc(distributed, holdout)?;
    let auc_reference = eval_auc(reference, holdout)?;
    let auc_rel_diff = auc_distributed.zip(auc_reference).map(|(a, b)| (a - b).abs() / b);
    if let Some(d) = auc_rel_diff {
        if d >= AUC_TOLERANCE {
            failures.push(format!("relative AUC difference {d:e} exceeds {AUC_TOLERANCE:e}"));
        }
    }
    Ok(VerifyReport {
        passed: failures.is_empty(),
        params,
        require_bit_exact,
        auc_distributed,
        auc_reference,
        auc_rel_diff,
        failures,
    })
}

/// Train with the distributed engine and with the reference trainer, then
/// compare parameters and held-out AUC.
pub fn verify(cfg: &RunConfig, batches: &[Batch], holdout: &[Example]) -> Result<VerifyReport, PipelineError> {
    let run = run_training(cfg, batches)?;
    let reference = train_reference(cfg, batches)?;
    judge(cfg, &run.model, &reference, holdout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenseParams, ParamKey, SparseParam};
    use std::collections::BTreeMap;

    fn model(dense: Vec<f32>, sparse: &[(u64, f32)]) -> TrainedModel {
        let mut d = DenseParams::zeros(&[1, 1]).unwrap();
        d.weights = dense;
        let s: BTreeMap<ParamKey, SparseParam> =
            sparse.iter().map(|&(k, v)| (ParamKey(k), SparseParam::from_embedding(vec![v]))).collect();
        TrainedModel::new(d, s)
    }

    #[test]
    fn relative_difference_has_a_floor() {
        assert_eq!(rel_diff(1.0, 1.0), 0.0);
        assert!((rel_diff(2.0, 1.0) - 0.5).abs() < 1e-12);
        assert!((rel_diff(0.0, 1e-6) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn comparison_ranks_offenders_and_counts_missing_keys() {
        let a = model(vec![1.0, 0.5], &[(1, 0.25), (2, 1.0)]);
        let b = model(vec![1.0, 0.5], &[(1, 0.25), (3, 0.0)]);
        let d = compare_models(&a, &b, 5);
        assert!(!d.bit_exact);
        assert_eq!(d.compared, 5);
        assert_eq!(d.worst.len(), 1);
        assert_eq!(d.worst[0].param, "key:2[0]");
        assert_eq!(d.max_rel, 1.0);
        let same = compare_models(&a, &a, 5);
        assert!(same.bit_exact && same.worst.is_empty());
    }

    #[test]
    fn empty_data_passes_trivially() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { store_dir: dir.path().to_path_buf(), deterministic: true, ..RunConfig::default() };
        let r = verify(&cfg, &[], &[]).unwrap();
        assert!(r.passed, "{:?}", r.failures);
    }
}
