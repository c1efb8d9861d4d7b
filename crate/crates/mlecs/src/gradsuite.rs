//! Randomized central-finite-difference verification of every gradient
//! path: the closed-form volume gradient and the four tape-built training
//! losses (device CCL and AMT, server SE-CCL on both sides). Analytic
//! gradients come from one backward pass per case; spot-checked coordinates
//! are re-evaluated through the same forward used for training.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::device::{ccl_batch_loss, supervised_batch_loss};
use crate::models::graph::{GradientSet, ParamKey, TrainFlags};
use crate::models::{
    normalize_or_e1, AdaptedBackbone, BackboneSpec, ConnectorSpec, UnifiedModel,
};
use crate::numeric::grad_check;
use crate::rng::stream_rng;
use crate::server::{se_llm_batch_loss, se_slm_batch_loss};
use crate::volume::{vector_volume, volume_gradient, RepresentationSet};
use crate::{Error, Result};

const FD_STEP: f64 = 1e-5;
const COORDS_PER_CASE: usize = 8;

#[derive(Debug, Clone)]
pub struct PathReport {
    pub name: &'static str,
    pub cases: usize,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl PathReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct GradSuiteReport {
    pub paths: Vec<PathReport>,
    pub total_cases: usize,
    pub runtime_secs: f64,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.paths.iter().all(PathReport::passed)
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    normalize_or_e1(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

/// Closed-form volume gradient against central differences, all
/// coordinates, skipping near-degenerate sets where the clamped volume is
/// locally flat.
fn volume_path(seed: u64, cases: usize) -> Result<PathReport> {
    let mut rng = stream_rng(seed, "gradsuite-volume", 0);
    let mut worst = 0.0_f64;
    let mut done = 0;
    while done < cases {
        let dim = rng.random_range(3..7);
        let k = rng.random_range(1..=3.min(dim));
        let vectors: Vec<Vec<f64>> = (0..k).map(|_| random_unit(dim, &mut rng)).collect();
        let set = RepresentationSet::new(vectors.clone())?;
        if vector_volume(&set) <= 1e-6 {
            continue;
        }
        let analytic: Vec<f64> = volume_gradient(&set, 1e-8)?.concat();
        let flat: Vec<f64> = vectors.concat();
        let report = grad_check(
            |x| {
                let vs: Vec<Vec<f64>> = x.chunks(dim).map(<[f64]>::to_vec).collect();
                vector_volume(&RepresentationSet::new(vs).expect("same shapes"))
            },
            &flat,
            &analytic,
            FD_STEP,
        )?;
        worst = worst.max(report.max_rel_err);
        done += 1;
    }
    Ok(PathReport {
        name: "volume_closed_form",
        cases,
        worst_rel_err: worst,
        tolerance: 1e-4,
    })
}

struct Fixture {
    model: UnifiedModel,
    slm: AdaptedBackbone,
    slm_soft_tokens: usize,
    batch: Vec<Sample>,
    anchors: BTreeMap<u64, Vec<f64>>,
    kt_bins: usize,
}

fn random_fixture(rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let n_modalities = rng.random_range(2..=3usize);
    let raw_dims: Vec<usize> = (0..n_modalities).map(|_| rng.random_range(3..6)).collect();
    let latent = rng.random_range(3..5);
    let vocab = rng.random_range(3..5);
    let token_width = rng.random_range(4..6);
    let conn = ConnectorSpec {
        raw_dims: raw_dims.clone(),
        encoder_hidden: rng.random_range(4..7),
        encoded_dim: rng.random_range(3..5),
        latent_dim: latent,
        fusion_hidden: rng.random_range(4..7),
        spg_hidden: rng.random_range(4..7),
    };
    let soft_tokens = rng.random_range(2..4);
    let backbone_spec = BackboneSpec {
        token_width,
        hidden_width: rng.random_range(4..7),
        hidden_layers: rng.random_range(1..3),
        vocab,
        rank: 1,
        lora_scale: 1.0,
        lora_slots: None,
    };
    let mut backbone = AdaptedBackbone::build(&backbone_spec, rng)?;
    for ad in backbone.adapters.iter_mut().flatten() {
        for v in ad.b.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let names: Vec<String> = (0..n_modalities).map(|m| format!("m{m}")).collect();
    let modalities = (0..n_modalities).collect();
    let model = UnifiedModel::build(&modalities, &names, &conn, backbone, soft_tokens, rng)?;

    let mut slm = AdaptedBackbone::build(
        &BackboneSpec {
            hidden_width: rng.random_range(4..6),
            hidden_layers: 1,
            ..backbone_spec
        },
        rng,
    )?;
    for ad in slm.adapters.iter_mut().flatten() {
        for v in ad.b.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }

    let n = rng.random_range(2..4);
    let mut batch = Vec::with_capacity(n);
    let mut anchors = BTreeMap::new();
    for id in 0..n {
        let features: BTreeMap<usize, Vec<f64>> = (0..n_modalities)
            .map(|m| {
                (m, (0..raw_dims[m]).map(|_| rng.random_range(-1.0..1.0)).collect())
            })
            .collect();
        batch.push(Sample {
            id: id as u64,
            label: rng.random_range(0..vocab),
            features,
        });
        anchors.insert(id as u64, random_unit(latent, rng));
    }
    let slm_soft_tokens = soft_tokens.min(2);
    Ok(Fixture {
        model,
        slm,
        slm_soft_tokens,
        batch,
        anchors,
        kt_bins: 2,
    })
}

/// Spot-check `COORDS_PER_CASE` random coordinates of an analytic gradient
/// set against central differences of `loss_at` evaluated on a perturbed
/// model clone.
fn spot_check<LA>(
    grads: &GradientSet,
    rng: &mut ChaCha8Rng,
    read: impl Fn(ParamKey, usize) -> f64,
    loss_at: LA,
) -> Result<f64>
where
    LA: Fn(ParamKey, usize, f64) -> Result<f64>,
{
    let coords: Vec<(ParamKey, usize)> = grads
        .0
        .iter()
        .flat_map(|(k, g)| (0..g.len()).map(move |i| (*k, i)))
        .collect();
    if coords.is_empty() {
        return Err(Error::Empty { what: "gradient coordinates" });
    }
    let mut worst = 0.0_f64;
    for _ in 0..COORDS_PER_CASE {
        let (key, idx) = coords[rng.random_range(0..coords.len())];
        let analytic = grads
            .get(key)
            .map(|g| g[idx])
            .expect("coordinate taken from the gradient set");
        let base = read(key, idx);
        let report = grad_check(
            |x| loss_at(key, idx, x[0]).expect("perturbed loss evaluates"),
            &[base],
            &[analytic],
            FD_STEP,
        )?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}

fn read_model_param(model: &UnifiedModel, key: ParamKey, idx: usize) -> f64 {
    let mut clone = model.clone();
    crate::models::graph::param_slice_mut(&mut clone, key)[idx]
}

fn slm_param(slm: &AdaptedBackbone, key: ParamKey) -> &[f64] {
    match key {
        ParamKey::AdapterA { slot } => slm.adapters[slot].as_ref().expect("adapted slot").a.data(),
        ParamKey::AdapterB { slot } => slm.adapters[slot].as_ref().expect("adapted slot").b.data(),
        other => unreachable!("slm path yielded key {other:?}"),
    }
}

fn slm_param_mut(slm: &mut AdaptedBackbone, key: ParamKey) -> &mut [f64] {
    match key {
        ParamKey::AdapterA { slot } => slm.adapters[slot].as_mut().expect("adapted slot").a.data_mut(),
        ParamKey::AdapterB { slot } => slm.adapters[slot].as_mut().expect("adapted slot").b.data_mut(),
        other => unreachable!("slm path yielded key {other:?}"),
    }
}

fn model_path(
    seed: u64,
    cases: usize,
    name: &'static str,
    flags: TrainFlags,
    use_anchors: bool,
) -> Result<PathReport> {
    let mut rng = stream_rng(seed, name, 0);
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let fixture = random_fixture(&mut rng)?;
        let refs: Vec<&Sample> = fixture.batch.iter().collect();
        let build = |model: &UnifiedModel| -> Result<f64> {
            let (graph, loss) = if use_anchors {
                ccl_batch_loss(model, &refs, &fixture.anchors, flags)?
            } else {
                supervised_batch_loss(model, &refs, flags)?
            };
            Ok(graph.loss_value(loss))
        };
        let (graph, loss) = if use_anchors {
            ccl_batch_loss(&fixture.model, &refs, &fixture.anchors, flags)?
        } else {
            supervised_batch_loss(&fixture.model, &refs, flags)?
        };
        let grads = graph.gradients(loss);
        let err = spot_check(
            &grads,
            &mut rng,
            |key, idx| read_model_param(&fixture.model, key, idx),
            |key, idx, value| {
                let mut probe = fixture.model.clone();
                crate::models::graph::param_slice_mut(&mut probe, key)[idx] = value;
                build(&probe)
            },
        )?;
        worst = worst.max(err);
    }
    Ok(PathReport {
        name,
        cases,
        worst_rel_err: worst,
        tolerance: 1e-3,
    })
}

fn se_llm_path(seed: u64, cases: usize) -> Result<PathReport> {
    let mut rng = stream_rng(seed, "gradsuite-se-llm", 0);
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let fixture = random_fixture(&mut rng)?;
        let refs: Vec<&Sample> = fixture.batch.iter().collect();
        let anchor_mod = rng.random_range(0..fixture.model.universe_size());
        let build = |model: &UnifiedModel| -> Result<f64> {
            let (graph, loss) = se_llm_batch_loss(
                model,
                &fixture.slm,
                fixture.slm_soft_tokens,
                &refs,
                anchor_mod,
                fixture.kt_bins,
                TrainFlags::CCL,
            )?;
            Ok(graph.loss_value(loss))
        };
        let (graph, loss) = se_llm_batch_loss(
            &fixture.model,
            &fixture.slm,
            fixture.slm_soft_tokens,
            &refs,
            anchor_mod,
            fixture.kt_bins,
            TrainFlags::CCL,
        )?;
        let grads = graph.gradients(loss);
        let err = spot_check(
            &grads,
            &mut rng,
            |key, idx| read_model_param(&fixture.model, key, idx),
            |key, idx, value| {
                let mut probe = fixture.model.clone();
                crate::models::graph::param_slice_mut(&mut probe, key)[idx] = value;
                build(&probe)
            },
        )?;
        worst = worst.max(err);
    }
    Ok(PathReport {
        name: "se_ccl_unified_loss",
        cases,
        worst_rel_err: worst,
        tolerance: 1e-3,
    })
}

fn se_slm_path(seed: u64, cases: usize) -> Result<PathReport> {
    let mut rng = stream_rng(seed, "gradsuite-se-slm", 0);
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let fixture = random_fixture(&mut rng)?;
        let refs: Vec<&Sample> = fixture.batch.iter().collect();
        let build = |slm: &AdaptedBackbone| -> Result<f64> {
            let (graph, loss) = se_slm_batch_loss(
                slm,
                &fixture.model,
                fixture.slm_soft_tokens,
                &refs,
                fixture.kt_bins,
                true,
            )?;
            Ok(graph.tape.scalar(loss))
        };
        let (graph, loss) = se_slm_batch_loss(
            &fixture.slm,
            &fixture.model,
            fixture.slm_soft_tokens,
            &refs,
            fixture.kt_bins,
            true,
        )?;
        let grads = graph.gradients(loss);
        let err = spot_check(
            &grads,
            &mut rng,
            |key, idx| slm_param(&fixture.slm, key)[idx],
            |key, idx, value| {
                let mut probe = fixture.slm.clone();
                slm_param_mut(&mut probe, key)[idx] = value;
                build(&probe)
            },
        )?;
        worst = worst.max(err);
    }
    Ok(PathReport {
        name: "se_ccl_slm_loss",
        cases,
        worst_rel_err: worst,
        tolerance: 1e-3,
    })
}

/// Run every gradient path. `cases_per_path` scales the whole suite; the
/// default CLI invocation uses 20 (120 cases total).
pub fn run_gradient_suite(seed: u64, cases_per_path: usize) -> Result<GradSuiteReport> {
    let start = Instant::now();
    let paths = vec![
        volume_path(seed, cases_per_path * 2)?,
        model_path(seed, cases_per_path, "ccl_loss", TrainFlags::CCL, true)?,
        model_path(seed, cases_per_path, "amt_loss", TrainFlags::AMT, false)?,
        se_llm_path(seed, cases_per_path)?,
        se_slm_path(seed, cases_per_path)?,
    ];
    let total_cases = paths.iter().map(|p| p.cases).sum();
    Ok(GradSuiteReport {
        paths,
        total_cases,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_gradient_suite(11, 4).unwrap();
        assert!(report.total_cases >= 20);
        for path in &report.paths {
            assert!(
                path.passed(),
                "{} worst rel err {} over {}",
                path.name,
                path.worst_rel_err,
                path.tolerance
            );
        }
    }
}
