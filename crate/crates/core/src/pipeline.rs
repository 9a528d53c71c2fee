//! End-to-end steps: calibrate a float model, quantize it for a plan,
//! evaluate, and sweep over many plans.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::calibration::{compute_quant_params, ScaleMethod, DEFAULT_PERCENTILE};
use crate::engine::{run_calibration, Batch, Engine};
use crate::error::{PtqError, Result};
use crate::graph::{
    fold_batchnorm, insert_quant_nodes, ModelGraph, Op, QuantPlan, ResidualMode, WeightGranularity,
};
use crate::metrics::{agreement, energy_estimate, mac_count, memory_footprint, top1_accuracy, EnergyModel};
use crate::profile::CalibrationProfile;
use crate::quant::{quant_mse, Signedness};
use crate::report::{map_mean, ExperimentRecord, SweepRow};
use crate::reservoir::DEFAULT_CAPACITY;
use crate::tensor::Tensor;

pub const DEFAULT_CALIB_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub samples: usize,
    pub seed: u64,
    pub capacity: usize,
    /// Percentiles recorded per site, for AbsP.
    pub percentiles: Vec<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            samples: DEFAULT_CALIB_SAMPLES,
            seed: 0,
            capacity: DEFAULT_CAPACITY,
            percentiles: vec![DEFAULT_PERCENTILE],
        }
    }
}

fn ensure_float(model: &ModelGraph) -> Result<()> {
    if model.plan.is_some() || model.count_kind("quant") > 0 {
        return Err(PtqError::InvalidArgument(
            "model is already quantized; start from the float model".into(),
        ));
    }
    Ok(())
}

/// Quant sites are independent of everything in a plan except the residual
/// mode, and qRes has a superset of fpRes's sites; this plan exposes them all.
fn all_sites_plan() -> QuantPlan {
    QuantPlan {
        wl_w: 8,
        wl_a: 8,
        wsm: ScaleMethod::AbsMax,
        asm: ScaleMethod::AbsMax,
        weight_group: WeightGranularity::Layer,
        residual: ResidualMode::QRes,
    }
}

/// Runs calibration on the BN-folded model and summarizes every site that
/// any plan can use.
pub fn calibrate(model: &ModelGraph, inputs: &Tensor, cfg: &CalibrationConfig) -> Result<CalibrationProfile> {
    ensure_float(model)?;
    let probe = insert_quant_nodes(&fold_batchnorm(model)?, &all_sites_plan())?;
    let sink = run_calibration(&probe, inputs, cfg.samples, cfg.seed, cfg.capacity)?;
    CalibrationProfile::from_sink(&sink, &cfg.percentiles, cfg.samples, cfg.seed, cfg.capacity)
}

/// Folds BN, inserts Quant nodes for `plan` and resolves every scale:
/// activations from the profile, weights from the weights themselves.
pub fn quantize_model(model: &ModelGraph, profile: &CalibrationProfile, plan: &QuantPlan) -> Result<ModelGraph> {
    ensure_float(model)?;
    plan.validate()?;
    let mut g = insert_quant_nodes(&fold_batchnorm(model)?, plan)?;

    let missing: Vec<&str> = g
        .quant_sites()
        .into_iter()
        .map(|(id, _)| id)
        .filter(|id| !profile.sites.contains_key(*id))
        .collect();
    if !missing.is_empty() {
        return Err(PtqError::Missing(format!(
            "profile lacks sites: {}",
            missing.join(", ")
        )));
    }

    let mut issues = Vec::new();
    for n in &mut g.nodes {
        if let Op::Quant { slot, .. } = &mut n.op {
            let site = &profile.sites[&n.id];
            match compute_quant_params(slot.method, slot.group, site, slot.bits, slot.signedness) {
                Ok(p) => slot.params = Some(p),
                Err(e) => issues.push((n.id.clone(), e)),
            }
        }
    }
    for (name, slot) in g.weight_quant.iter_mut() {
        match compute_quant_params(slot.method, slot.group, &g.tensors[name], slot.bits, Signedness::Signed) {
            Ok(p) => slot.params = Some(p),
            Err(e) => issues.push((name.clone(), e)),
        }
    }
    if issues.is_empty() {
        return Ok(g);
    }
    let all_missing = issues.iter().all(|(_, e)| matches!(e, PtqError::Missing(_)));
    let listing = issues
        .iter()
        .map(|(id, e)| format!("{id}: {e}"))
        .collect::<Vec<_>>()
        .join("; ");
    Err(if all_missing {
        PtqError::Missing(listing)
    } else {
        PtqError::Degenerate(listing)
    })
}

/// Accuracy, agreement, error and cost figures of `g` on a labelled batch.
///
/// `float_logits` are the reference model's logits on the same batch; when
/// absent they are computed from `g` with Quant nodes passed through.
pub fn evaluate(
    g: &ModelGraph,
    batch: &Batch,
    energy: &EnergyModel,
    float_logits: Option<&Tensor>,
) -> Result<ExperimentRecord> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| PtqError::Missing("dataset has no labels".into()))?;
    let engine = Engine::new(g)?;
    let computed_float;
    let float_logits = match float_logits {
        Some(l) => l,
        None => {
            computed_float = engine.run_dataset(&batch.inputs, false)?.0;
            &computed_float
        }
    };

    let mut weight_mse = BTreeMap::new();
    let mut activation_mse = BTreeMap::new();
    let mut activation_clamps = 0;
    let (logits, wl) = match &g.plan {
        None => (float_logits.clone(), (32, 32)),
        Some(plan) => {
            let (logits, trace) = engine.run_dataset(&batch.inputs, true)?;
            let qw = engine.quantized_weights()?;
            for name in g.weight_quant.keys() {
                weight_mse.insert(name.clone(), quant_mse(&g.tensors[name], &qw[name])?);
            }
            for (site, t) in &trace.sites {
                activation_mse.insert(site.clone(), t.mse());
                activation_clamps += t.clamps.total();
            }
            (logits, (plan.wl_w as u32, plan.wl_a as u32))
        }
    };
    let macs = mac_count(g)?;
    Ok(ExperimentRecord {
        plan: g.plan,
        samples: batch.len(),
        top1: top1_accuracy(&logits, labels)?,
        agreement_with_float: agreement(&logits, float_logits)?,
        weight_mse_mean: map_mean(&weight_mse),
        weight_mse,
        activation_mse_mean: map_mean(&activation_mse),
        activation_mse,
        activation_clamps,
        macs,
        footprint_bytes: memory_footprint(g, wl.0, wl.1)?,
        energy_joules: energy_estimate(macs, energy, wl.0, wl.1)?,
    })
}

/// Quantizes and evaluates every plan. Failures are recorded in their row;
/// rows come back in canonical plan order whatever the completion order.
pub fn sweep(
    model: &ModelGraph,
    batch: &Batch,
    profile: &CalibrationProfile,
    plans: &[QuantPlan],
    energy: &EnergyModel,
) -> Result<Vec<SweepRow>> {
    ensure_float(model)?;
    let float_logits = Engine::new(model)?.run_dataset(&batch.inputs, false)?.0;
    let mut plans = plans.to_vec();
    plans.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(plans
        .par_iter()
        .map(|plan| {
            let outcome = quantize_model(model, profile, plan)
                .and_then(|g| evaluate(&g, batch, energy, Some(&float_logits)));
            SweepRow::from_outcome(plan, &outcome)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{gen_dataset, gen_toy_model, FixtureSpec};
    use crate::report::{grid_plans, Grid};

    fn setup() -> (ModelGraph, Batch, CalibrationProfile) {
        let spec = FixtureSpec {
            dataset_size: 60,
            ..FixtureSpec::default()
        };
        let model = gen_toy_model(&spec).unwrap();
        let data = gen_dataset(&model, &spec).unwrap();
        let cfg = CalibrationConfig {
            samples: 40,
            capacity: 1 << 14,
            ..CalibrationConfig::default()
        };
        let profile = calibrate(&model, &data.inputs, &cfg).unwrap();
        (model, data, profile)
    }

    fn plan(bits: u8, residual: ResidualMode) -> QuantPlan {
        QuantPlan {
            wl_w: bits,
            wl_a: bits,
            wsm: ScaleMethod::abs_p(),
            asm: ScaleMethod::abs_p(),
            weight_group: WeightGranularity::Channel,
            residual,
        }
    }

    #[test]
    fn float_model_is_perfect() {
        let (model, data, _) = setup();
        let r = evaluate(&model, &data, &EnergyModel::default(), None).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.agreement_with_float, 1.0);
        assert_eq!(r.weight_mse_mean, 0.0);
        assert_eq!(r.activation_mse_mean, 0.0);
    }

    #[test]
    fn quantized_record_is_populated() {
        let (model, data, profile) = setup();
        let g = quantize_model(&model, &profile, &plan(8, ResidualMode::FpRes)).unwrap();
        let r = evaluate(&g, &data, &EnergyModel::default(), None).unwrap();
        assert!(r.top1 > 0.8, "{}", r.top1);
        assert_eq!(r.weight_mse.len(), g.weight_quant.len());
        assert_eq!(r.activation_mse.len(), g.quant_sites().len());
        for v in r.weight_mse.values().chain(r.activation_mse.values()) {
            assert!(v.is_finite() && *v > 0.0);
        }
        assert!(r.footprint_bytes > 0.0 && r.energy_joules > 0.0);
    }

    #[test]
    fn residual_modes_differ_by_add_count() {
        let (model, _, profile) = setup();
        let fp = quantize_model(&model, &profile, &plan(8, ResidualMode::FpRes)).unwrap();
        let q = quantize_model(&model, &profile, &plan(8, ResidualMode::QRes)).unwrap();
        assert_eq!(
            q.count_kind("quant") - fp.count_kind("quant"),
            model.count_kind("add")
        );
    }

    #[test]
    fn quantizing_twice_is_rejected() {
        let (model, _, profile) = setup();
        let g = quantize_model(&model, &profile, &plan(8, ResidualMode::FpRes)).unwrap();
        assert!(quantize_model(&g, &profile, &plan(8, ResidualMode::FpRes)).is_err());
    }

    #[test]
    fn missing_sites_and_percentiles_are_reported() {
        let (model, _, mut profile) = setup();
        let mut other = plan(8, ResidualMode::FpRes);
        other.asm = ScaleMethod::AbsP { k: 99.0 };
        assert!(matches!(
            quantize_model(&model, &profile, &other),
            Err(PtqError::Missing(_))
        ));
        profile.sites.remove("q_in");
        let err = quantize_model(&model, &profile, &plan(8, ResidualMode::FpRes)).unwrap_err();
        assert!(err.to_string().contains("q_in"), "{err}");
    }

    #[test]
    fn sweep_rows_match_single_evaluations() {
        let (model, data, profile) = setup();
        let plans = grid_plans(Grid::Equal6To8, DEFAULT_PERCENTILE);
        let energy = EnergyModel::default();
        let rows = sweep(&model, &data, &profile, &plans[..6], &energy).unwrap();
        assert_eq!(rows.len(), 6);
        for row in &rows {
            let p = row.plan().unwrap();
            let g = quantize_model(&model, &profile, &p).unwrap();
            let single = SweepRow::from_outcome(&p, &evaluate(&g, &data, &energy, None));
            assert_eq!(&single, row);
        }
    }
}
