//! On-device training.
//!
//! Each round a device runs two stages against its own RNG stream:
//!
//! * **CCL** on its public shard — supervised loss plus the symmetric
//!   volume-contrastive loss, anchored by the server's fused omni-modal
//!   vectors (constants; no gradient flows into an anchor). Trains the
//!   connector and adapters, freezes encoders.
//! * **AMT** on its private data — supervised loss only. Trains encoders
//!   and adapters, freezes the connector.
//!
//! The negative count `U` doubles as the minibatch size (candidates are the
//! in-batch samples); a short trailing batch uses its own length.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::models::graph::{
    apply_sgd, contrastive_nodes, ModelGraph, TrainFlags,
};
use crate::models::{digest_adapters, LoRAAdapter, UnifiedModel};
use crate::{Error, Result};

/// One edge device: its modality subset, model, data, and RNG stream.
#[derive(Debug)]
pub struct DeviceState {
    pub id: usize,
    pub modalities: BTreeSet<usize>,
    pub model: UnifiedModel,
    pub private_train: Vec<Sample>,
    pub private_test: Vec<Sample>,
    pub shard_train: Vec<Sample>,
    pub shard_test: Vec<Sample>,
    pub rng: ChaCha8Rng,
}

/// The uplink payload: deep-copied adapters plus the modality count the
/// server needs for aggregation weights.
#[derive(Debug, Clone)]
pub struct LoRAUpload {
    pub device_id: usize,
    pub adapters: Vec<LoRAAdapter>,
    pub modality_count: usize,
}

impl LoRAUpload {
    pub fn param_count(&self) -> u64 {
        self.adapters.iter().map(LoRAAdapter::param_count).sum()
    }

    pub fn digest(&self) -> u64 {
        digest_adapters(&self.adapters)
    }
}

/// Build the CCL loss graph for one minibatch: per-sample supervised loss
/// plus half the sum of both contrastive directions, with server anchors as
/// constants.
pub(crate) fn ccl_batch_loss<'m>(
    model: &'m UnifiedModel,
    batch: &[&Sample],
    anchors: &BTreeMap<u64, Vec<f64>>,
    flags: TrainFlags,
) -> Result<(ModelGraph<'m>, crate::autodiff::NodeId)> {
    let mut graph = ModelGraph::new(model, flags);
    let mut supervised_terms = Vec::with_capacity(batch.len());
    let mut anchor_nodes = Vec::with_capacity(batch.len());
    let mut other_nodes = Vec::with_capacity(batch.len());
    for sample in batch {
        let anchor = anchors
            .get(&sample.id)
            .ok_or(Error::MissingAnchor { id: sample.id })?;
        let reps = graph.represent(&sample.features)?;
        anchor_nodes.push(graph.tape.constant_vec(anchor));
        other_nodes.push(reps.values().copied().collect::<Vec<_>>());

        let fused = graph.fuse(&reps);
        let tokens = graph.soft_tokens(fused);
        let logits = graph.backbone_logits(&tokens);
        supervised_terms.push(graph.supervised(&logits, sample.label));
    }
    let lb = graph.tape.mean_scalars(&supervised_terms);
    let (o2a, a2o) = contrastive_nodes(&mut graph.tape, &anchor_nodes, &other_nodes, batch.len());
    let sym = graph.tape.sum_scalars(&[o2a, a2o], 0.5);
    let loss = graph.tape.add(lb, sym);
    Ok((graph, loss))
}

/// Supervised-only loss graph over a minibatch (AMT, and the baselines'
/// public-shard stage).
pub(crate) fn supervised_batch_loss<'m>(
    model: &'m UnifiedModel,
    batch: &[&Sample],
    flags: TrainFlags,
) -> Result<(ModelGraph<'m>, crate::autodiff::NodeId)> {
    let mut graph = ModelGraph::new(model, flags);
    let mut terms = Vec::with_capacity(batch.len());
    for sample in batch {
        let term = graph.sample_supervised(&sample.features, sample.label)?;
        terms.push(term);
    }
    let loss = graph.tape.mean_scalars(&terms);
    Ok((graph, loss))
}

/// Epoch driver shared by every device stage. `epochs == 0` runs a single
/// evaluation pass in natural order (no RNG consumed, no updates) and
/// returns its mean loss; otherwise returns the final epoch's mean loss,
/// each batch valued before its update.
fn train_epochs<B>(
    model: &mut UnifiedModel,
    rng: &mut ChaCha8Rng,
    samples: &[Sample],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    flags: TrainFlags,
    build: B,
) -> Result<f64>
where
    B: for<'m> Fn(
        &'m UnifiedModel,
        &[&Sample],
        TrainFlags,
    ) -> Result<(ModelGraph<'m>, crate::autodiff::NodeId)>,
{
    if samples.is_empty() {
        return Err(Error::Empty { what: "training samples" });
    }
    let batch_size = batch_size.max(1);
    if epochs == 0 {
        let mut total = 0.0;
        for chunk in samples.chunks(batch_size) {
            let batch: Vec<&Sample> = chunk.iter().collect();
            let (graph, loss) = build(model, &batch, TrainFlags::NONE)?;
            total += graph.loss_value(loss) * batch.len() as f64;
        }
        return Ok(total / samples.len() as f64);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last_epoch_mean = 0.0;
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (graph, loss) = build(model, &batch, flags)?;
            total += graph.loss_value(loss) * batch.len() as f64;
            let grads = graph.gradients(loss);
            apply_sgd(model, &grads, lr);
        }
        last_epoch_mean = total / samples.len() as f64;
    }
    Ok(last_epoch_mean)
}

impl DeviceState {
    /// Cross-modal contrastive learning over the public shard, anchored by
    /// the server's fused representations. Anchors must cover every shard
    /// sample id.
    pub fn run_ccl(
        &mut self,
        anchors: &BTreeMap<u64, Vec<f64>>,
        epochs: usize,
        lr: f64,
        batch_size: usize,
    ) -> Result<f64> {
        for sample in &self.shard_train {
            if !anchors.contains_key(&sample.id) {
                return Err(Error::MissingAnchor { id: sample.id });
            }
        }
        train_epochs(
            &mut self.model,
            &mut self.rng,
            &self.shard_train,
            epochs,
            lr,
            batch_size,
            TrainFlags::CCL,
            |model, batch, flags| ccl_batch_loss(model, batch, anchors, flags),
        )
    }

    /// Adaptive multimodal tuning: supervised loss on the private shard,
    /// updating encoders and adapters only.
    pub fn run_amt(&mut self, epochs: usize, lr: f64, batch_size: usize) -> Result<f64> {
        if self.private_train.is_empty() {
            return Err(Error::Empty { what: "private training set" });
        }
        train_epochs(
            &mut self.model,
            &mut self.rng,
            &self.private_train,
            epochs,
            lr,
            batch_size,
            TrainFlags::AMT,
            supervised_batch_loss,
        )
    }

    /// Supervised-only pass over the public shard with the CCL trainable
    /// set; what the standalone and plain-averaging baselines run in place
    /// of CCL (no anchors exist without the collaborative protocol).
    pub fn run_public_supervised(&mut self, epochs: usize, lr: f64, batch_size: usize) -> Result<f64> {
        train_epochs(
            &mut self.model,
            &mut self.rng,
            &self.shard_train,
            epochs,
            lr,
            batch_size,
            TrainFlags::CCL,
            supervised_batch_loss,
        )
    }

    /// Deep-copied adapter payload; later device training never mutates it.
    pub fn make_upload(&self) -> LoRAUpload {
        LoRAUpload {
            device_id: self.id,
            adapters: self.model.extract_lora(),
            modality_count: self.modalities.len(),
        }
    }

    /// Replace this device's adapters with the server's.
    pub fn apply_server_adapters(&mut self, adapters: &[LoRAAdapter]) -> Result<()> {
        self.model.apply_lora(adapters)
    }

    /// Macro-F1 over the private test split.
    pub fn test_f1(&self) -> Result<f64> {
        let mut preds = Vec::with_capacity(self.private_test.len());
        let mut labels = Vec::with_capacity(self.private_test.len());
        for sample in &self.private_test {
            preds.push(self.model.forward_sample(&sample.features)?.predicted_class());
            labels.push(sample.label);
        }
        Ok(crate::metrics::macro_f1(&preds, &labels, self.model.backbone.head.out_dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_data, synth_dataset, SyntheticTaskSpec};
    use crate::models::graph::ParamKey;
    use crate::models::{AdaptedBackbone, BackboneSpec, ConnectorSpec, DigestState};
    use crate::rng::{roles, stream_rng};
    use rand::Rng;

    fn fixture(seed: u64, modalities: &[usize]) -> DeviceState {
        let mut drng = stream_rng(seed, roles::DATA, 0);
        let spec = SyntheticTaskSpec::random(3, 3, 0.05, 80, &[5, 4], &mut drng).unwrap();
        let dataset = synth_dataset(&spec, &mut drng).unwrap();
        let mods: BTreeSet<usize> = modalities.iter().copied().collect();
        let partition = partition_data(&dataset, &[mods.clone()], &mut drng).unwrap();

        let conn = ConnectorSpec {
            raw_dims: vec![5, 4],
            encoder_hidden: 6,
            encoded_dim: 4,
            latent_dim: 3,
            fusion_hidden: 6,
            spg_hidden: 6,
        };
        let bspec = BackboneSpec {
            token_width: 5,
            hidden_width: 6,
            hidden_layers: 1,
            vocab: 3,
            rank: 2,
            lora_scale: 1.0,
            lora_slots: None,
        };
        let mut brng = stream_rng(seed, roles::BACKBONE_SLM, 0);
        let backbone = AdaptedBackbone::build(&bspec, &mut brng).unwrap();
        let mut mrng = stream_rng(seed, roles::DEVICE_MODEL, 0);
        let model = UnifiedModel::build(
            &mods,
            &["a".into(), "b".into()],
            &conn,
            backbone,
            2,
            &mut mrng,
        )
        .unwrap();
        DeviceState {
            id: 0,
            modalities: mods,
            model,
            private_train: partition.private_train[0].clone(),
            private_test: partition.private_test[0].clone(),
            shard_train: partition.shard_train[0].clone(),
            shard_test: partition.shard_test[0].clone(),
            rng: stream_rng(seed, roles::DEVICE_TRAIN, 0),
        }
    }

    fn anchors_for(device: &DeviceState, seed: u64) -> BTreeMap<u64, Vec<f64>> {
        let mut r = stream_rng(seed, "anchor-fixture", 0);
        device
            .shard_train
            .iter()
            .chain(&device.shard_test)
            .map(|s| {
                let v: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
                (s.id, crate::models::normalize_or_e1(&v))
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged_and_reports_loss() {
        let mut device = fixture(1, &[0, 1]);
        let anchors = anchors_for(&device, 1);
        let digest = device.model.param_digest();
        let loss = device.run_ccl(&anchors, 0, 0.1, 4).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(device.model.param_digest(), digest);
        let loss = device.run_amt(0, 0.1, 4).unwrap();
        assert!(loss.is_finite());
        assert_eq!(device.model.param_digest(), digest);
    }

    #[test]
    fn ccl_with_single_candidate_reduces_to_supervised() {
        let mut a = fixture(2, &[0, 1]);
        let mut b = fixture(2, &[0, 1]);
        let anchors = anchors_for(&a, 2);
        a.run_ccl(&anchors, 1, 0.05, 1).unwrap();
        b.run_public_supervised(1, 0.05, 1).unwrap();
        assert_eq!(a.model.param_digest(), b.model.param_digest());
    }

    #[test]
    fn ccl_is_deterministic_across_identical_devices() {
        let mut a = fixture(3, &[0, 1]);
        let mut b = fixture(3, &[0, 1]);
        let anchors = anchors_for(&a, 3);
        let la = a.run_ccl(&anchors, 2, 0.05, 4).unwrap();
        let lb = b.run_ccl(&anchors, 2, 0.05, 4).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.model.param_digest(), b.model.param_digest());
    }

    #[test]
    fn ccl_rejects_missing_anchor() {
        let mut device = fixture(4, &[0]);
        let mut anchors = anchors_for(&device, 4);
        let dropped = device.shard_train[0].id;
        anchors.remove(&dropped);
        let err = device.run_ccl(&anchors, 1, 0.05, 4).unwrap_err();
        assert!(matches!(err, Error::MissingAnchor { id } if id == dropped));
    }

    #[test]
    fn anchors_stay_constant_through_ccl() {
        let mut device = fixture(5, &[0, 1]);
        let anchors = anchors_for(&device, 5);
        let digest_before = {
            let mut d = DigestState::new();
            for v in anchors.values() {
                d.update(v);
            }
            d.finish()
        };
        device.run_ccl(&anchors, 2, 0.1, 4).unwrap();
        let digest_after = {
            let mut d = DigestState::new();
            for v in anchors.values() {
                d.update(v);
            }
            d.finish()
        };
        assert_eq!(digest_before, digest_after);
    }

    #[test]
    fn amt_freezes_connector_and_trains_encoders() {
        let mut device = fixture(6, &[0, 1]);
        let connector = device.model.connector_digest();
        let encoders = device.model.encoder_digest();
        device.run_amt(2, 0.05, 4).unwrap();
        assert_eq!(device.model.connector_digest(), connector);
        assert_ne!(device.model.encoder_digest(), encoders);
    }

    #[test]
    fn amt_loss_decreases_with_more_epochs() {
        let mut wins = 0;
        for seed in 0..5 {
            let mut one = fixture(100 + seed, &[0, 1]);
            let mut five = fixture(100 + seed, &[0, 1]);
            let after_one = one.run_amt(1, 0.05, 4).unwrap();
            let after_five = five.run_amt(5, 0.05, 4).unwrap();
            if after_five <= after_one {
                wins += 1;
            }
        }
        assert!(wins >= 4, "descent failed on {}/5 seeds", 5 - wins);
    }

    #[test]
    fn upload_is_immune_to_later_training() {
        let mut device = fixture(7, &[0, 1]);
        let payload = device.make_upload();
        assert_eq!(payload.modality_count, 2);
        assert!(payload
            .adapters
            .iter()
            .all(|ad| ad.b.data().iter().all(|&v| v == 0.0)));
        let digest = payload.digest();
        device.run_amt(2, 0.1, 4).unwrap();
        assert_eq!(payload.digest(), digest);
        assert_ne!(digest_adapters(&device.model.extract_lora()), digest);
    }

    #[test]
    fn apply_then_extract_round_trips() {
        let mut device = fixture(8, &[0, 1]);
        let mut incoming = device.model.extract_lora();
        for ad in incoming.iter_mut() {
            for v in ad.b.data_mut() {
                *v = 0.25;
            }
        }
        device.apply_server_adapters(&incoming).unwrap();
        assert_eq!(digest_adapters(&device.model.extract_lora()), digest_adapters(&incoming));

        let wrong = vec![incoming[0].clone()];
        assert!(matches!(
            device.apply_server_adapters(&wrong),
            Err(Error::TopologyMismatch { .. })
        ));
    }

    #[test]
    fn modality_restriction_raises_unknown_modality() {
        let device = fixture(9, &[0]);
        let mut features = device.private_train[0].features.clone();
        features.insert(1, vec![0.0; 4]);
        assert!(matches!(
            device.model.forward_sample(&features),
            Err(Error::UnknownModality { .. })
        ));
    }

    #[test]
    fn trainable_sets_partition_the_parameters() {
        let device = fixture(10, &[0, 1]);
        let anchors = anchors_for(&device, 10);
        let batch: Vec<&Sample> = device.shard_train.iter().take(3).collect();

        let (graph, loss) = ccl_batch_loss(&device.model, &batch, &anchors, TrainFlags::CCL).unwrap();
        let ccl_keys: BTreeSet<ParamKey> = graph.gradients(loss).0.into_iter().map(|(k, _)| k).collect();
        let priv_batch: Vec<&Sample> = device.private_train.iter().take(3).collect();
        let (graph, loss) =
            supervised_batch_loss(&device.model, &priv_batch, TrainFlags::AMT).unwrap();
        let amt_keys: BTreeSet<ParamKey> = graph.gradients(loss).0.into_iter().map(|(k, _)| k).collect();

        let is_encoder =
            |k: &ParamKey| matches!(k, ParamKey::EncoderWeight { .. } | ParamKey::EncoderBias { .. });
        let is_adapter = |k: &ParamKey| matches!(k, ParamKey::AdapterA { .. } | ParamKey::AdapterB { .. });
        assert!(ccl_keys.iter().all(|k| !is_encoder(k)));
        assert!(amt_keys.iter().all(|k| is_encoder(k) || is_adapter(k)));
        // union covers connector + encoders + adapters
        let union: BTreeSet<ParamKey> = ccl_keys.union(&amt_keys).copied().collect();
        assert!(union.iter().any(|k| matches!(k, ParamKey::FusionWeight { .. })));
        assert!(union.iter().any(|k| matches!(k, ParamKey::SpgWeight { .. })));
        assert!(union.iter().any(|k| matches!(k, ParamKey::ProjectorWeight { .. })));
        assert!(union.iter().any(is_encoder));
        assert!(union.iter().any(is_adapter));
    }
}
