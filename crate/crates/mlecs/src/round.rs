//! The round protocol and experiment driver.
//!
//! One round of the full protocol executes, in order: the server generates
//! and distributes fused public representations; every device runs CCL then
//! AMT and uploads its adapters; the server computes aggregation weights,
//! aggregates into its SLM, runs SE-CCL, and distributes the SLM adapters;
//! every device installs them. Baselines and ablations drop or replace
//! individual steps but keep the same reporting shape.
//!
//! Devices fan out to a worker pool. Every entity draws only from its own
//! RNG stream and exchanges only immutable payloads at barriers, so results
//! are identical whatever the worker count.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{DatasetConfig, ExperimentConfig, Mode};
use crate::data::{assign_modalities, partition_data, synth_dataset, SyntheticTaskSpec};
use crate::device::DeviceState;
use crate::models::{AdaptedBackbone, BackboneSpec, ConnectorSpec, UnifiedModel};
use crate::report::{
    DeviceRoundMetrics, RoundReport, ServerRoundMetrics, Summary, WIRE_BYTES_PER_PARAM,
};
use crate::rng::{roles, stream_rng};
use crate::server::{mma_aggregate, mma_weights, AggregationWeights, ServerState};
use crate::{Error, Result};

/// Build the server and devices for a validated config: shared data
/// synthesis and partitioning, Bernoulli modality assignment, one shared
/// frozen SLM backbone for every party, and per-entity RNG streams.
pub fn setup_experiment(config: &ExperimentConfig) -> Result<(ServerState, Vec<DeviceState>)> {
    config.validate()?;
    let seed = config.seed;
    let n_modalities = config.modalities.len();

    let dataset = match &config.dataset {
        DatasetConfig::Synthetic {
            samples,
            latent_dim,
            classes,
            noise_std,
        } => {
            let mut rng = stream_rng(seed, roles::DATA, 0);
            let spec = SyntheticTaskSpec::random(
                *latent_dim,
                *classes,
                *noise_std,
                *samples,
                &config.dims.raw,
                &mut rng,
            )?;
            synth_dataset(&spec, &mut rng)?
        }
        DatasetConfig::External { path } => {
            let dataset = crate::data::load_external(std::path::Path::new(path))?;
            if dataset.modality_dims != config.dims.raw {
                return Err(Error::InvalidConfig {
                    detail: format!(
                        "external dataset dims {:?} do not match dims.raw {:?}",
                        dataset.modality_dims, config.dims.raw
                    ),
                });
            }
            if dataset.num_classes != config.dims.vocab {
                return Err(Error::InvalidConfig {
                    detail: format!(
                        "external dataset has {} classes, dims.vocab is {}",
                        dataset.num_classes, config.dims.vocab
                    ),
                });
            }
            dataset
        }
    };

    let mer = config.mer.per_modality(n_modalities);
    let mut assign_rng = stream_rng(seed, roles::ASSIGN, 0);
    let assignments = assign_modalities(config.n_devices, n_modalities, &mer, &mut assign_rng)?;
    let mut partition_rng = stream_rng(seed, roles::DATA, 1);
    let partition = partition_data(&dataset, &assignments, &mut partition_rng)?;

    let conn = ConnectorSpec {
        raw_dims: config.dims.raw.clone(),
        encoder_hidden: config.dims.encoder_hidden,
        encoded_dim: config.dims.encoded,
        latent_dim: config.dims.latent,
        fusion_hidden: config.dims.fusion_hidden,
        spg_hidden: config.dims.spg_hidden,
    };
    let slm_spec = BackboneSpec {
        token_width: config.dims.token_width,
        hidden_width: config.dims.slm_hidden,
        hidden_layers: config.dims.slm_layers,
        vocab: config.dims.vocab,
        rank: config.train.rank,
        lora_scale: 1.0,
        lora_slots: config.train.lora_slots.clone(),
    };
    let llm_spec = BackboneSpec {
        token_width: config.dims.token_width,
        hidden_width: config.dims.llm_hidden,
        hidden_layers: config.dims.llm_layers,
        vocab: config.dims.vocab,
        rank: config.train.rank,
        lora_scale: 1.0,
        lora_slots: config.train.lora_slots.clone(),
    };

    // one shared frozen SLM checkpoint for every device and the server copy
    let mut slm_rng = stream_rng(seed, roles::BACKBONE_SLM, 0);
    let shared_slm = AdaptedBackbone::build(&slm_spec, &mut slm_rng)?;
    let mut llm_rng = stream_rng(seed, roles::BACKBONE_LLM, 0);
    let llm_backbone = AdaptedBackbone::build(&llm_spec, &mut llm_rng)?;

    let omni: BTreeSet<usize> = (0..n_modalities).collect();
    let mut server_model_rng = stream_rng(seed, roles::SERVER_MODEL, 0);
    let unified = UnifiedModel::build(
        &omni,
        &config.modalities,
        &conn,
        llm_backbone,
        config.dims.soft_tokens_llm,
        &mut server_model_rng,
    )?;
    let server = ServerState {
        unified,
        slm: shared_slm.clone(),
        slm_soft_tokens: config.dims.soft_tokens_slm,
        public_train: partition.public_train,
        public_test: partition.public_test,
        rng: stream_rng(seed, roles::SERVER_TRAIN, 0),
    };

    let mut devices = Vec::with_capacity(config.n_devices);
    for (j, modalities) in assignments.into_iter().enumerate() {
        let mut model_rng = stream_rng(seed, roles::DEVICE_MODEL, j as u64);
        let model = UnifiedModel::build(
            &modalities,
            &config.modalities,
            &conn,
            shared_slm.clone(),
            config.dims.soft_tokens_slm,
            &mut model_rng,
        )?;
        devices.push(DeviceState {
            id: j,
            modalities,
            model,
            private_train: partition.private_train[j].clone(),
            private_test: partition.private_test[j].clone(),
            shard_train: partition.shard_train[j].clone(),
            shard_test: partition.shard_test[j].clone(),
            rng: stream_rng(seed, roles::DEVICE_TRAIN, j as u64),
        });
    }
    Ok((server, devices))
}

struct DevicePhaseOutcome {
    ccl_loss: f64,
    amt_loss: f64,
    upload: Option<crate::device::LoRAUpload>,
}

/// Execute round `t` (1-based) of the configured protocol.
pub fn run_round(
    t: usize,
    server: &mut ServerState,
    devices: &mut [DeviceState],
    config: &ExperimentConfig,
    pool: &rayon::ThreadPool,
) -> Result<RoundReport> {
    let start = Instant::now();
    let lr = config.train.lr;
    let batch = config.train.negatives;
    let (epochs_ccl, epochs_amt, epochs_se) = (
        config.train.epochs_ccl,
        config.train.epochs_amt,
        config.train.epochs_se,
    );
    let step = |e: Error, step: &'static str| e.in_round(t, step);

    let collaborative = matches!(config.mode, Mode::Mlecs | Mode::MlecsWoMma | Mode::MlecsWoSeccl);
    let anchors = if collaborative {
        Some(server.generate_fused_public().map_err(|e| step(e, "generate_fused_public"))?)
    } else {
        None
    };

    let wants_upload = collaborative || config.mode == Mode::FedavgUniform;
    let outcomes: Vec<DevicePhaseOutcome> = pool
        .install(|| {
            devices
                .par_iter_mut()
                .map(|device| -> Result<DevicePhaseOutcome> {
                    let ccl_loss = match &anchors {
                        Some(map) => device.run_ccl(map, epochs_ccl, lr, batch)?,
                        None => device.run_public_supervised(epochs_ccl, lr, batch)?,
                    };
                    let amt_loss = device.run_amt(epochs_amt, lr, batch)?;
                    let upload = wants_upload.then(|| device.make_upload());
                    Ok(DevicePhaseOutcome {
                        ccl_loss,
                        amt_loss,
                        upload,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .map_err(|e| step(e, "device_phase"))?;

    let mut aggregation_weights = Vec::new();
    let mut uplink_params = 0u64;
    let mut downlink_params = 0u64;
    let mut server_llm_loss = None;
    let mut server_slm_loss = None;

    if wants_upload {
        let uploads: Vec<crate::device::LoRAUpload> = outcomes
            .iter()
            .map(|o| o.upload.clone().expect("upload requested"))
            .collect();
        // one modality-count scalar rides along with each adapter payload
        uplink_params = uploads.iter().map(|u| u.param_count() + 1).sum();

        let weights = match config.mode {
            Mode::Mlecs | Mode::MlecsWoSeccl => {
                let counts: Vec<usize> = uploads.iter().map(|u| u.modality_count).collect();
                mma_weights(&counts).map_err(|e| step(e, "mma_weights"))?
            }
            _ => AggregationWeights::uniform(uploads.len()),
        };
        aggregation_weights = weights.weights().to_vec();

        let aggregated = mma_aggregate(&uploads, &weights).map_err(|e| step(e, "mma_aggregate"))?;
        server.apply_aggregate(&aggregated).map_err(|e| step(e, "apply_aggregate"))?;

        if config.mode != Mode::MlecsWoSeccl && config.mode != Mode::FedavgUniform {
            let (llm, slm) = server
                .se_ccl(epochs_se, lr, config.train.kt_bins, batch)
                .map_err(|e| step(e, "se_ccl"))?;
            server_llm_loss = Some(llm);
            server_slm_loss = Some(slm);
        }

        let distributed = server.distribute_adapters();
        let dist_params: u64 = distributed.iter().map(|ad| ad.param_count()).sum();
        let anchor_floats: u64 = anchors
            .as_ref()
            .map(|map| (map.len() * server.unified.latent_dim) as u64)
            .unwrap_or(0);
        downlink_params = devices.len() as u64 * (dist_params + anchor_floats);

        pool.install(|| {
            devices
                .par_iter_mut()
                .map(|device| device.apply_server_adapters(&distributed))
                .collect::<Result<Vec<_>>>()
        })
        .map_err(|e| step(e, "apply_server_adapters"))?;
    } else {
        // standalone: the server trains its own model on its own data
        let llm = server
            .train_supervised_public(epochs_se, lr, batch)
            .map_err(|e| step(e, "train_supervised_public"))?;
        server_llm_loss = Some(llm);
    }

    let f1s: Vec<f64> = pool
        .install(|| {
            devices
                .par_iter()
                .map(|d| d.test_f1())
                .collect::<Result<Vec<_>>>()
        })
        .map_err(|e| step(e, "device_eval"))?;
    let server_f1 = server.test_f1().map_err(|e| step(e, "server_eval"))?;

    let device_metrics: Vec<DeviceRoundMetrics> = devices
        .iter()
        .zip(&outcomes)
        .zip(&f1s)
        .map(|((device, outcome), &test_f1)| DeviceRoundMetrics {
            device_id: device.id,
            modality_count: device.modalities.len(),
            ccl_loss: outcome.ccl_loss,
            amt_loss: outcome.amt_loss,
            test_f1,
        })
        .collect();

    Ok(RoundReport {
        round: t,
        devices: device_metrics,
        server: ServerRoundMetrics {
            llm_loss: server_llm_loss,
            slm_loss: server_slm_loss,
            test_f1: server_f1,
        },
        aggregation_weights,
        uplink_params,
        uplink_bytes: uplink_params * WIRE_BYTES_PER_PARAM,
        downlink_params,
        downlink_bytes: downlink_params * WIRE_BYTES_PER_PARAM,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Everything a finished experiment leaves behind: the per-round records,
/// the summary, and the final states (for checkpointing or inspection).
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    pub server: ServerState,
    pub devices: Vec<DeviceState>,
}

/// Run the full T-round experiment on a pool of `workers` threads.
pub fn run_experiment_full(config: &ExperimentConfig, workers: usize) -> Result<ExperimentOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig {
            detail: format!("worker pool: {e}"),
        })?;
    let (mut server, mut devices) = setup_experiment(config)?;
    let mut reports = Vec::with_capacity(config.rounds);
    for t in 1..=config.rounds {
        reports.push(run_round(t, &mut server, &mut devices, config, &pool)?);
    }
    let summary = Summary::from_reports(config.mode.name(), config.seed, &reports)?;
    Ok(ExperimentOutcome {
        reports,
        summary,
        server,
        devices,
    })
}

/// Convenience wrapper returning just the records and summary.
pub fn run_experiment(
    config: &ExperimentConfig,
    workers: usize,
) -> Result<(Vec<RoundReport>, Summary)> {
    let outcome = run_experiment_full(config, workers)?;
    Ok((outcome.reports, outcome.summary))
}

/// Analytic per-round uplink parameter count for a config:
/// `Σ_devices (Σ_slots r·(p+q) + 1)`.
pub fn analytic_uplink_params(config: &ExperimentConfig, devices: &[DeviceState]) -> u64 {
    devices
        .iter()
        .map(|d| {
            let per_device: u64 = d
                .model
                .backbone
                .adapters
                .iter()
                .flatten()
                .map(|ad| {
                    let (p, q) = ad.shape();
                    (config.train.rank * (p + q)) as u64
                })
                .sum();
            per_device + 1
        })
        .sum()
}
