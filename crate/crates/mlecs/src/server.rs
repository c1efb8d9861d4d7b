//! Server-side protocol steps.
//!
//! The server owns two models: an omni-modal unified model with the larger
//! backbone, and a bare small backbone ("SLM") that mirrors the devices'
//! topology and receives the aggregated adapters. Per round it
//!
//! * generates fused omni-modal representations of the public training set
//!   (the devices' contrastive anchors),
//! * aggregates uploaded adapters with modality-aware weights
//!   `w_j = |M_j| / Σ|M_i|`, averaging the `A` and `B` factors separately
//!   so the payload stays low-rank on the wire,
//! * runs SE-CCL: alternating minibatch steps where the unified model
//!   minimizes its contrastive objective plus a pooled-logit KL toward the
//!   SLM, and the SLM minimizes supervised loss plus the reverse KL — each
//!   side's transfer target detached from the other's step.
//!
//! The pooled knowledge-transfer loss sorts each position's logits
//! descending, average-pools them into equal-width bins (remainder to the
//! leading bins), softmaxes, and accumulates KL over the first
//! `min(S₁, S₂)` positions. Pooling makes the comparison vocabulary-size
//! agnostic and smooths the sparse output distributions that otherwise
//! blow up the divergence.
//!
//! Both models share the soft prompts generated by the unified connector
//! (the SLM consumes the leading tokens), so the transfer compares
//! distributions over identical inputs.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::data::Sample;
use crate::device::LoRAUpload;
use crate::models::graph::{
    apply_sgd, apply_sgd_backbone, contrastive_nodes, BackboneGraph, ModelGraph, TrainFlags,
};
use crate::models::{normalize_or_e1, AdaptedBackbone, LoRAAdapter, LogitSequence, UnifiedModel};
use crate::numeric::{self, Matrix};
use crate::{Error, Result};

/// The cloud side: unified model, aggregated SLM backbone, public data, and
/// the server's RNG stream.
#[derive(Debug)]
pub struct ServerState {
    pub unified: UnifiedModel,
    pub slm: AdaptedBackbone,
    pub slm_soft_tokens: usize,
    pub public_train: Vec<Sample>,
    pub public_test: Vec<Sample>,
    pub rng: ChaCha8Rng,
}

/// Per-device aggregation weights: nonnegative, summing to one.
#[derive(Debug, Clone)]
pub struct AggregationWeights {
    weights: Vec<f64>,
}

impl AggregationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty { what: "aggregation weights" });
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument {
                detail: "aggregation weights must be nonnegative".into(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument {
                detail: format!("aggregation weights must sum to 1, got {sum}"),
            });
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Modality-aware weights: `w_j = counts[j] / Σ counts`.
pub fn mma_weights(modality_counts: &[usize]) -> Result<AggregationWeights> {
    if modality_counts.is_empty() {
        return Err(Error::Empty { what: "modality counts" });
    }
    if modality_counts.iter().any(|&c| c == 0) {
        return Err(Error::InvalidArgument {
            detail: "every device must keep at least one modality".into(),
        });
    }
    let total: usize = modality_counts.iter().sum();
    AggregationWeights::new(
        modality_counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect(),
    )
}

/// Weighted elementwise mean of the uploaded adapter factors, layer by
/// layer: `A = Σ w_j A_j`, `B = Σ w_j B_j`. Averaging the factors (rather
/// than the products `B_j·A_j`) keeps the result in the low-rank wire
/// format; note `Σ w_j B_j A_j ≠ (Σ w_j B_j)(Σ w_j A_j)` in general.
pub fn mma_aggregate(
    uploads: &[LoRAUpload],
    weights: &AggregationWeights,
) -> Result<Vec<LoRAAdapter>> {
    if uploads.is_empty() {
        return Err(Error::Empty { what: "uploads" });
    }
    if weights.weights().len() != uploads.len() {
        return Err(Error::LengthMismatch {
            left: weights.weights().len(),
            right: uploads.len(),
        });
    }
    let template = &uploads[0].adapters;
    for upload in uploads.iter().skip(1) {
        if upload.adapters.len() != template.len() {
            return Err(Error::TopologyMismatch {
                layer: 0,
                detail: format!(
                    "device {} uploaded {} adapters, expected {}",
                    upload.device_id,
                    upload.adapters.len(),
                    template.len()
                ),
            });
        }
        for (layer, (a, b)) in template.iter().zip(&upload.adapters).enumerate() {
            if a.shape() != b.shape() || a.rank != b.rank || a.scale != b.scale {
                return Err(Error::TopologyMismatch {
                    layer,
                    detail: format!(
                        "device {} has {:?} rank {}, expected {:?} rank {}",
                        upload.device_id,
                        b.shape(),
                        b.rank,
                        a.shape(),
                        a.rank
                    ),
                });
            }
        }
    }
    let mut out = Vec::with_capacity(template.len());
    for layer in 0..template.len() {
        let mut a = Matrix::zeros(template[layer].a.rows(), template[layer].a.cols());
        let mut b = Matrix::zeros(template[layer].b.rows(), template[layer].b.cols());
        for (upload, &w) in uploads.iter().zip(weights.weights()) {
            let ad = &upload.adapters[layer];
            for (acc, v) in a.data_mut().iter_mut().zip(ad.a.data()) {
                *acc += w * v;
            }
            for (acc, v) in b.data_mut().iter_mut().zip(ad.b.data()) {
                *acc += w * v;
            }
        }
        out.push(LoRAAdapter {
            a,
            b,
            rank: template[layer].rank,
            scale: template[layer].scale,
        });
    }
    Ok(out)
}

// ---- pooled knowledge transfer ----------------------------------------------

/// Indices that sort `v` descending; ties break toward the smaller index so
/// the permutation (and therefore gradient routing) is deterministic.
pub(crate) fn argsort_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).expect("finite logits").then(a.cmp(&b)));
    idx
}

/// Sort descending and average-pool into `bins` probabilities.
fn pooled_probs(logits: &[f64], bins: usize) -> Vec<f64> {
    let idx = argsort_desc(logits);
    let sorted: Vec<f64> = idx.iter().map(|&i| logits[i]).collect();
    let pooled: Vec<f64> = crate::autodiff::bin_segments(sorted.len(), bins)
        .map(|(start, width)| sorted[start..start + width].iter().sum::<f64>() / width as f64)
        .collect();
    numeric::softmax(&pooled).expect("pooled logits finite")
}

/// Pooling-based knowledge-transfer loss: sum over the first
/// `min(S₁, S₂)` positions of `KL(pooled(y_a_i) ‖ pooled(y_b_i))`.
pub fn pooled_kt_loss(y_a: &LogitSequence, y_b: &LogitSequence, bins: usize) -> Result<f64> {
    if bins < 1 {
        return Err(Error::InvalidArgument {
            detail: "kt pooling needs at least one bin".into(),
        });
    }
    let vocab = y_a.vocab().min(y_b.vocab());
    if bins > vocab {
        return Err(Error::BinsExceedVocab { bins, vocab });
    }
    let positions = y_a.positions().min(y_b.positions());
    let mut total = 0.0;
    for i in 0..positions {
        let pa = pooled_probs(y_a.position(i), bins);
        let pb = pooled_probs(y_b.position(i), bins);
        total += numeric::kl_divergence(&pa, &pb)?;
    }
    Ok(total)
}

/// Tape-side sum of pooled-KL terms for the variable logits against fixed
/// pooled targets, mirroring `pooled_kt_loss` position pairing.
fn kt_sum_node(tape: &mut Tape, var_logits: &[NodeId], targets: &[Vec<f64>], bins: usize) -> NodeId {
    let positions = var_logits.len().min(targets.len());
    let mut terms = Vec::with_capacity(positions);
    for i in 0..positions {
        let z = var_logits[i];
        let idx = argsort_desc(tape.value(z));
        let sorted = tape.gather(z, idx);
        let pooled = tape.pool_bins(sorted, bins);
        terms.push(tape.kl_to_softmax(pooled, targets[i].clone()));
    }
    tape.sum_scalars(&terms, 1.0)
}

pub(crate) fn draw_anchor_modality(rng: &mut ChaCha8Rng, universe: usize) -> usize {
    rng.random_range(0..universe)
}

/// Leading soft-prompt tokens of the unified model for one sample, as plain
/// vectors (the SLM's shared input).
fn slm_tokens_for(unified: &UnifiedModel, sample: &Sample, count: usize) -> Result<Vec<Vec<f64>>> {
    let reps = unified.represent(&sample.features)?;
    let fused = unified.fuse(&reps)?;
    let tokens = unified.soft_prompt(&fused)?;
    Ok((0..count).map(|t| tokens.row(t).to_vec()).collect())
}

/// Unified-model loss graph for one SE-CCL minibatch: contrastive objective
/// with the drawn anchor modality plus pooled KL toward the (detached) SLM
/// logits, averaged per batch.
pub(crate) fn se_llm_batch_loss<'m>(
    unified: &'m UnifiedModel,
    slm: &AdaptedBackbone,
    slm_soft_tokens: usize,
    batch: &[&Sample],
    anchor_mod: usize,
    kt_bins: usize,
    flags: TrainFlags,
) -> Result<(ModelGraph<'m>, NodeId)> {
    let mut graph = ModelGraph::new(unified, flags);
    let mut supervised_terms = Vec::with_capacity(batch.len());
    let mut kt_terms = Vec::with_capacity(batch.len());
    let mut anchor_nodes = Vec::with_capacity(batch.len());
    let mut other_nodes = Vec::with_capacity(batch.len());
    for sample in batch {
        let reps = graph.represent(&sample.features)?;
        let anchor = *reps.get(&anchor_mod).ok_or_else(|| Error::UnknownModality {
            name: format!("anchor index {anchor_mod}"),
        })?;
        anchor_nodes.push(anchor);
        other_nodes.push(
            reps.iter()
                .filter(|(&m, _)| m != anchor_mod)
                .map(|(_, &n)| n)
                .collect::<Vec<_>>(),
        );

        let fused = graph.fuse(&reps);
        let tokens = graph.soft_tokens(fused);
        let logits = graph.backbone_logits(&tokens);
        supervised_terms.push(graph.supervised(&logits, sample.label));

        // detached transfer target: current SLM logits on the shared prompts
        let slm_tokens = slm_tokens_for(unified, sample, slm_soft_tokens)?;
        let slm_logits = slm.forward_tokens(&Matrix::from_rows(&slm_tokens)?, true)?;
        let targets: Vec<Vec<f64>> = (0..slm_logits.positions())
            .map(|i| pooled_probs(slm_logits.position(i), kt_bins))
            .collect();
        kt_terms.push(kt_sum_node(&mut graph.tape, &logits, &targets, kt_bins));
    }
    let lb = graph.tape.mean_scalars(&supervised_terms);
    let kt = graph.tape.mean_scalars(&kt_terms);
    let loss = if other_nodes.iter().all(|o| !o.is_empty()) {
        let (o2a, a2o) = contrastive_nodes(&mut graph.tape, &anchor_nodes, &other_nodes, batch.len());
        let sym = graph.tape.sum_scalars(&[o2a, a2o], 0.5);
        let ccl = graph.tape.add(lb, sym);
        graph.tape.add(ccl, kt)
    } else {
        graph.tape.add(lb, kt)
    };
    Ok((graph, loss))
}

/// SLM loss graph for one SE-CCL minibatch: supervised loss plus pooled KL
/// toward the (detached) unified-model logits, on shared soft prompts.
pub(crate) fn se_slm_batch_loss<'b>(
    slm: &'b AdaptedBackbone,
    unified: &UnifiedModel,
    slm_soft_tokens: usize,
    batch: &[&Sample],
    kt_bins: usize,
    train_adapters: bool,
) -> Result<(BackboneGraph<'b>, NodeId)> {
    let mut graph = BackboneGraph::new(slm, train_adapters);
    let mut supervised_terms = Vec::with_capacity(batch.len());
    let mut kt_terms = Vec::with_capacity(batch.len());
    for sample in batch {
        let slm_tokens = slm_tokens_for(unified, sample, slm_soft_tokens)?;
        let logits = graph.logits_for_tokens(&slm_tokens);
        supervised_terms.push(graph.supervised(&logits, sample.label));

        let llm_logits = unified.forward_sample(&sample.features)?;
        let targets: Vec<Vec<f64>> = (0..llm_logits.positions())
            .map(|i| pooled_probs(llm_logits.position(i), kt_bins))
            .collect();
        kt_terms.push(kt_sum_node(&mut graph.tape, &logits, &targets, kt_bins));
    }
    let lb = graph.tape.mean_scalars(&supervised_terms);
    let kt = graph.tape.mean_scalars(&kt_terms);
    let loss = graph.tape.add(lb, kt);
    Ok((graph, loss))
}

impl ServerState {
    /// Fused, L2-normalized omni-modal representation per public training
    /// sample; the devices' contrastive anchors.
    pub fn generate_fused_public(&self) -> Result<BTreeMap<u64, Vec<f64>>> {
        let mut anchors = BTreeMap::new();
        for sample in &self.public_train {
            let reps = self.unified.represent(&sample.features)?;
            let fused = self.unified.fuse(&reps)?;
            anchors.insert(sample.id, normalize_or_e1(&fused));
        }
        Ok(anchors)
    }

    /// Install aggregated adapters into the server SLM.
    pub fn apply_aggregate(&mut self, adapters: &[LoRAAdapter]) -> Result<()> {
        self.slm.apply_adapters(adapters)
    }

    /// Deep copies of the SLM adapters, the round's downlink payload.
    pub fn distribute_adapters(&self) -> Vec<LoRAAdapter> {
        self.slm.extract_adapters()
    }

    /// SLM-enhanced contrastive learning: per minibatch, draw an anchor
    /// modality, step the unified model, then step the SLM; each side's
    /// transfer target is a detached constant. Returns the final-epoch mean
    /// losses `(unified_side, slm_side)`. `epochs == 0` evaluates one pass
    /// without updating either model.
    pub fn se_ccl(
        &mut self,
        epochs: usize,
        lr: f64,
        kt_bins: usize,
        batch_size: usize,
    ) -> Result<(f64, f64)> {
        if self.public_train.is_empty() {
            return Err(Error::Empty { what: "public training set" });
        }
        let universe = self.unified.universe_size();
        let batch_size = batch_size.max(1);
        let n = self.public_train.len();
        let eval_only = epochs == 0;
        let passes = epochs.max(1);
        let mut order: Vec<usize> = (0..n).collect();
        let (mut llm_mean, mut slm_mean) = (0.0, 0.0);
        for _ in 0..passes {
            if !eval_only {
                use rand::seq::SliceRandom;
                order.shuffle(&mut self.rng);
            }
            let mut llm_total = 0.0;
            let mut slm_total = 0.0;
            for chunk in order.chunks(batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &self.public_train[i]).collect();
                let anchor_mod = draw_anchor_modality(&mut self.rng, universe);

                let flags = if eval_only { TrainFlags::NONE } else { TrainFlags::CCL };
                let (graph, loss) = se_llm_batch_loss(
                    &self.unified,
                    &self.slm,
                    self.slm_soft_tokens,
                    &batch,
                    anchor_mod,
                    kt_bins,
                    flags,
                )?;
                llm_total += graph.loss_value(loss) * batch.len() as f64;
                if !eval_only {
                    let grads = graph.gradients(loss);
                    apply_sgd(&mut self.unified, &grads, lr);
                }

                let (graph, loss) = se_slm_batch_loss(
                    &self.slm,
                    &self.unified,
                    self.slm_soft_tokens,
                    &batch,
                    kt_bins,
                    !eval_only,
                )?;
                slm_total += graph.tape.scalar(loss) * batch.len() as f64;
                if !eval_only {
                    let grads = graph.gradients(loss);
                    apply_sgd_backbone(&mut self.slm, &grads, lr);
                }
            }
            llm_mean = llm_total / n as f64;
            slm_mean = slm_total / n as f64;
        }
        Ok((llm_mean, slm_mean))
    }

    /// Supervised-only training of the unified model on the public set (the
    /// standalone baseline's server-side stage).
    pub fn train_supervised_public(&mut self, epochs: usize, lr: f64, batch_size: usize) -> Result<f64> {
        if self.public_train.is_empty() {
            return Err(Error::Empty { what: "public training set" });
        }
        let batch_size = batch_size.max(1);
        if epochs == 0 {
            let mut total = 0.0;
            for chunk in self.public_train.chunks(batch_size) {
                let batch: Vec<&Sample> = chunk.iter().collect();
                let (graph, loss) =
                    crate::device::supervised_batch_loss(&self.unified, &batch, TrainFlags::NONE)?;
                total += graph.loss_value(loss) * batch.len() as f64;
            }
            return Ok(total / self.public_train.len() as f64);
        }
        let mut order: Vec<usize> = (0..self.public_train.len()).collect();
        let mut last = 0.0;
        for _ in 0..epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch_size) {
                let batch: Vec<&Sample> =
                    chunk.iter().map(|&i| &self.public_train[i]).collect();
                let (graph, loss) =
                    crate::device::supervised_batch_loss(&self.unified, &batch, TrainFlags::CCL)?;
                total += graph.loss_value(loss) * batch.len() as f64;
                let grads = graph.gradients(loss);
                apply_sgd(&mut self.unified, &grads, lr);
            }
            last = total / self.public_train.len() as f64;
        }
        Ok(last)
    }

    /// Macro-F1 of the unified model over the public test split.
    pub fn test_f1(&self) -> Result<f64> {
        let mut preds = Vec::with_capacity(self.public_test.len());
        let mut labels = Vec::with_capacity(self.public_test.len());
        for sample in &self.public_test {
            preds.push(self.unified.forward_sample(&sample.features)?.predicted_class());
            labels.push(sample.label);
        }
        Ok(crate::metrics::macro_f1(
            &preds,
            &labels,
            self.unified.backbone.head.out_dim(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_data, synth_dataset, SyntheticTaskSpec};
    use crate::models::{BackboneSpec, ConnectorSpec};
    use crate::rng::{roles, stream_rng};
    use crate::volume::{symmetric_contrastive_loss, ContrastiveBatch};
    use std::collections::BTreeSet;

    fn slm_spec() -> BackboneSpec {
        BackboneSpec {
            token_width: 5,
            hidden_width: 6,
            hidden_layers: 1,
            vocab: 3,
            rank: 2,
            lora_scale: 1.0,
            lora_slots: None,
        }
    }

    fn fixture(seed: u64) -> ServerState {
        let mut drng = stream_rng(seed, roles::DATA, 0);
        let spec = SyntheticTaskSpec::random(3, 3, 0.05, 60, &[5, 4], &mut drng).unwrap();
        let dataset = synth_dataset(&spec, &mut drng).unwrap();
        let assignments = vec![[0usize, 1].into_iter().collect::<BTreeSet<_>>()];
        let partition = partition_data(&dataset, &assignments, &mut drng).unwrap();

        let conn = ConnectorSpec {
            raw_dims: vec![5, 4],
            encoder_hidden: 6,
            encoded_dim: 4,
            latent_dim: 3,
            fusion_hidden: 6,
            spg_hidden: 6,
        };
        let llm_spec = BackboneSpec {
            token_width: 5,
            hidden_width: 8,
            hidden_layers: 2,
            vocab: 3,
            rank: 2,
            lora_scale: 1.0,
            lora_slots: None,
        };
        let mut brng = stream_rng(seed, roles::BACKBONE_LLM, 0);
        let llm = crate::models::AdaptedBackbone::build(&llm_spec, &mut brng).unwrap();
        let mut srng = stream_rng(seed, roles::BACKBONE_SLM, 0);
        let slm = crate::models::AdaptedBackbone::build(&slm_spec(), &mut srng).unwrap();
        let mut mrng = stream_rng(seed, roles::SERVER_MODEL, 0);
        let unified = UnifiedModel::build(
            &[0usize, 1].into_iter().collect(),
            &["a".into(), "b".into()],
            &conn,
            llm,
            3,
            &mut mrng,
        )
        .unwrap();
        ServerState {
            unified,
            slm,
            slm_soft_tokens: 2,
            public_train: partition.public_train,
            public_test: partition.public_test,
            rng: stream_rng(seed, roles::SERVER_TRAIN, 0),
        }
    }

    fn upload_with(b_fill: f64, seed: u64, device_id: usize, modality_count: usize) -> LoRAUpload {
        let mut rng = stream_rng(seed, "upload-fixture", device_id as u64);
        let bb = crate::models::AdaptedBackbone::build(&slm_spec(), &mut rng).unwrap();
        let mut adapters = bb.extract_adapters();
        for ad in adapters.iter_mut() {
            for v in ad.b.data_mut() {
                *v = b_fill;
            }
        }
        LoRAUpload {
            device_id,
            adapters,
            modality_count,
        }
    }

    #[test]
    fn mma_weights_cases() {
        let w = mma_weights(&[2, 2, 2]).unwrap();
        for &x in w.weights() {
            assert_eq!(x, 1.0 / 3.0);
        }
        let w = mma_weights(&[1, 2, 3]).unwrap();
        assert_eq!(w.weights(), &[1.0 / 6.0, 1.0 / 3.0, 0.5]);
        let w = mma_weights(&[3; 20]).unwrap();
        for &x in w.weights() {
            assert_eq!(x, 0.05);
        }
        assert!(mma_weights(&[1, 0, 2]).is_err());
        let sum: f64 = mma_weights(&[1, 2, 3, 4]).unwrap().weights().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn aggregate_identical_uploads_is_fixed_point() {
        let uploads: Vec<LoRAUpload> = (0..3).map(|j| upload_with(0.5, 1, j, 2)).collect();
        let weights = mma_weights(&[1, 2, 3]).unwrap();
        let agg = mma_aggregate(&uploads, &weights).unwrap();
        for (a, b) in agg.iter().zip(&uploads[0].adapters) {
            for (x, y) in a.a.data().iter().zip(b.a.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.b.data().iter().zip(b.b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_selects_with_unit_weight() {
        let uploads: Vec<LoRAUpload> = (0..3).map(|j| upload_with(j as f64, 2 + j as u64, j, 1)).collect();
        let weights = AggregationWeights::new(vec![1.0, 0.0, 0.0]).unwrap();
        let agg = mma_aggregate(&uploads, &weights).unwrap();
        for (a, b) in agg.iter().zip(&uploads[0].adapters) {
            assert_eq!(a.a.data(), b.a.data());
            assert_eq!(a.b.data(), b.b.data());
        }
    }

    #[test]
    fn aggregate_matches_summation_oracle_and_convexity() {
        let uploads: Vec<LoRAUpload> =
            (0..3).map(|j| upload_with(0.1 * j as f64 - 0.05, 10 + j as u64, j, j + 1)).collect();
        let weights = mma_weights(&[1, 2, 3]).unwrap();
        let agg = mma_aggregate(&uploads, &weights).unwrap();
        for layer in 0..agg.len() {
            for idx in 0..agg[layer].a.data().len() {
                let want: f64 = uploads
                    .iter()
                    .zip(weights.weights())
                    .map(|(u, &w)| w * u.adapters[layer].a.data()[idx])
                    .sum();
                let got = agg[layer].a.data()[idx];
                assert!((got - want).abs() < 1e-12);
                let lo = uploads
                    .iter()
                    .map(|u| u.adapters[layer].a.data()[idx])
                    .fold(f64::INFINITY, f64::min);
                let hi = uploads
                    .iter()
                    .map(|u| u.adapters[layer].a.data()[idx])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_rejects_topology_mismatch() {
        let mut uploads: Vec<LoRAUpload> = (0..2).map(|j| upload_with(0.0, 20, j, 1)).collect();
        uploads[1].adapters.pop();
        let weights = AggregationWeights::uniform(2);
        assert!(matches!(
            mma_aggregate(&uploads, &weights),
            Err(Error::TopologyMismatch { .. })
        ));
    }

    fn logit_seq(rows: &[Vec<f64>]) -> LogitSequence {
        LogitSequence::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn pooled_kt_zero_at_identity() {
        let y = logit_seq(&[vec![0.3, -0.8, 1.2, 0.0], vec![2.0, 1.0, -1.0, 0.5]]);
        for bins in 1..=4 {
            assert!(pooled_kt_loss(&y, &y, bins).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_kt_uses_min_position_count() {
        let mut r = stream_rng(30, "kt", 0);
        let rows_a: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let rows_b: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let ya = logit_seq(&rows_a);
        let yb = logit_seq(&rows_b);
        let total = pooled_kt_loss(&ya, &yb, 3).unwrap();
        let manual: f64 = (0..3)
            .map(|i| {
                numeric::kl_divergence(&pooled_probs(&rows_a[i], 3), &pooled_probs(&rows_b[i], 3))
                    .unwrap()
            })
            .sum();
        assert!((total - manual).abs() < 1e-12);
        assert!(total >= 0.0);
    }

    #[test]
    fn pooled_kt_matches_direct_oracle() {
        // fixed 2-position, vocab-8, bins-4 pair checked against an
        // explicitly written sort/pool/softmax/KL pipeline
        let a = vec![
            vec![0.9, -0.3, 0.2, 1.4, -1.0, 0.0, 0.7, -0.2],
            vec![0.1, 0.1, 0.5, -0.5, 0.3, 2.0, -2.0, 1.0],
        ];
        let b = vec![
            vec![1.1, 0.2, -0.4, 0.8, 0.6, -1.2, 0.05, 0.9],
            vec![-0.7, 1.3, 0.0, 0.2, 0.4, -0.1, 0.9, 0.6],
        ];
        let got = pooled_kt_loss(&logit_seq(&a), &logit_seq(&b), 4).unwrap();
        let mut want = 0.0;
        for i in 0..2 {
            let pool = |row: &Vec<f64>| -> Vec<f64> {
                let mut sorted = row.clone();
                sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
                let pooled: Vec<f64> = sorted.chunks(2).map(|c| (c[0] + c[1]) / 2.0).collect();
                let z: f64 = pooled.iter().map(|v| v.exp()).sum();
                pooled.iter().map(|v| v.exp() / z).collect()
            };
            let pa = pool(&a[i]);
            let pb = pool(&b[i]);
            want += pa
                .iter()
                .zip(&pb)
                .map(|(&p, &q)| p * (p / q).ln())
                .sum::<f64>();
        }
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn pooled_kt_rejects_bins_over_vocab() {
        let y = logit_seq(&[vec![0.0, 1.0, 2.0]]);
        assert!(matches!(
            pooled_kt_loss(&y, &y, 4),
            Err(Error::BinsExceedVocab { .. })
        ));
    }

    #[test]
    fn fused_public_covers_train_set_with_unit_vectors() {
        let server = fixture(40);
        let anchors = server.generate_fused_public().unwrap();
        assert_eq!(anchors.len(), server.public_train.len());
        for v in anchors.values() {
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            assert_eq!(v.len(), server.unified.latent_dim);
        }
        // deterministic given parameters
        let again = server.generate_fused_public().unwrap();
        assert_eq!(anchors, again);
    }

    #[test]
    fn fused_public_matches_composed_oracle() {
        let server = fixture(41);
        let anchors = server.generate_fused_public().unwrap();
        let sample = &server.public_train[3];
        let mut reps = BTreeMap::new();
        for (&m, x) in &sample.features {
            let z = server.unified.encode(m, x).unwrap();
            reps.insert(m, server.unified.project(m, &z).unwrap());
        }
        let fused = server.unified.fuse(&reps).unwrap();
        let want = normalize_or_e1(&fused);
        for (a, b) in anchors[&sample.id].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_draws_are_uniform() {
        let mut rng = stream_rng(42, roles::SERVER_TRAIN, 9);
        let universe = 3;
        let trials = 10_000;
        let mut counts = vec![0u64; universe];
        for _ in 0..trials {
            counts[draw_anchor_modality(&mut rng, universe)] += 1;
        }
        let p = 1.0 / universe as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            let dev = (c as f64 - trials as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "count {c} deviates {dev} > 3σ {sigma}");
        }
    }

    #[test]
    fn se_ccl_zero_epochs_changes_nothing() {
        let mut server = fixture(43);
        let unified_digest = server.unified.param_digest();
        let slm_digest = server.slm.adapter_digest();
        let (llm, slm) = server.se_ccl(0, 0.05, 2, 4).unwrap();
        assert!(llm.is_finite() && slm.is_finite());
        assert_eq!(server.unified.param_digest(), unified_digest);
        assert_eq!(server.slm.adapter_digest(), slm_digest);
    }

    #[test]
    fn se_steps_detach_the_other_side() {
        let server = fixture(44);
        let batch: Vec<&Sample> = server.public_train.iter().take(4).collect();

        // unified step leaves the SLM untouched
        let mut s = fixture(44);
        let slm_digest = s.slm.adapter_digest();
        let (graph, loss) = se_llm_batch_loss(
            &s.unified,
            &s.slm,
            s.slm_soft_tokens,
            &batch,
            0,
            2,
            TrainFlags::CCL,
        )
        .unwrap();
        let grads = graph.gradients(loss);
        apply_sgd(&mut s.unified, &grads, 0.05);
        assert_eq!(s.slm.adapter_digest(), slm_digest);

        // slm step leaves the unified model untouched
        let mut s = fixture(44);
        let unified_digest = s.unified.param_digest();
        let (graph, loss) =
            se_slm_batch_loss(&s.slm, &s.unified, s.slm_soft_tokens, &batch, 2, true).unwrap();
        let grads = graph.gradients(loss);
        apply_sgd_backbone(&mut s.slm, &grads, 0.05);
        assert_eq!(s.unified.param_digest(), unified_digest);
        let _ = server;
    }

    #[test]
    fn se_ccl_losses_match_pure_replay() {
        // replay the exact schedule, valuing each batch with the pure
        // (non-tape) operations before applying the same updates
        let mut live = fixture(45);
        let mut replayed = fixture(45);
        let epochs = 1;
        let (lr, bins, batch_size) = (0.05, 2, 4);
        let (llm_live, slm_live) = live.se_ccl(epochs, lr, bins, batch_size).unwrap();

        use rand::seq::SliceRandom;
        let n = replayed.public_train.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut replayed.rng);
        let mut llm_total = 0.0;
        let mut slm_total = 0.0;
        for chunk in order.clone().chunks(batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &replayed.public_train[i]).collect();
            let anchor_mod = draw_anchor_modality(&mut replayed.rng, 2);

            // pure value of the unified loss at the current parameters
            let mut lb = 0.0;
            let mut kt = 0.0;
            let mut anchors = Vec::new();
            let mut others = Vec::new();
            for s in &batch {
                let reps = replayed.unified.represent(&s.features).unwrap();
                anchors.push(reps[&anchor_mod].clone());
                others.push(
                    reps.iter()
                        .filter(|(&m, _)| m != anchor_mod)
                        .map(|(&m, v)| (m, v.clone()))
                        .collect::<BTreeMap<_, _>>(),
                );
                let llm_logits = replayed.unified.forward_sample(&s.features).unwrap();
                lb += crate::models::supervised_loss(&llm_logits, s.label).unwrap();
                let toks = slm_tokens_for(&replayed.unified, s, replayed.slm_soft_tokens).unwrap();
                let slm_logits = replayed
                    .slm
                    .forward_tokens(&Matrix::from_rows(&toks).unwrap(), true)
                    .unwrap();
                kt += pooled_kt_loss(&slm_logits, &llm_logits, bins).unwrap();
            }
            let cb = ContrastiveBatch::new(anchors, others, batch.len()).unwrap();
            let pure_llm = lb / batch.len() as f64
                + symmetric_contrastive_loss(&cb)
                + kt / batch.len() as f64;
            llm_total += pure_llm * batch.len() as f64;

            let (graph, loss) = se_llm_batch_loss(
                &replayed.unified,
                &replayed.slm,
                replayed.slm_soft_tokens,
                &batch,
                anchor_mod,
                bins,
                TrainFlags::CCL,
            )
            .unwrap();
            assert!((graph.loss_value(loss) - pure_llm).abs() < 1e-10);
            let grads = graph.gradients(loss);
            apply_sgd(&mut replayed.unified, &grads, lr);

            // pure value of the slm loss after the unified update
            let mut lb = 0.0;
            let mut kt = 0.0;
            for s in &batch {
                let toks = slm_tokens_for(&replayed.unified, s, replayed.slm_soft_tokens).unwrap();
                let slm_logits = replayed
                    .slm
                    .forward_tokens(&Matrix::from_rows(&toks).unwrap(), true)
                    .unwrap();
                lb += crate::models::supervised_loss(&slm_logits, s.label).unwrap();
                let llm_logits = replayed.unified.forward_sample(&s.features).unwrap();
                kt += pooled_kt_loss(&llm_logits, &slm_logits, bins).unwrap();
            }
            let pure_slm = (lb + kt) / batch.len() as f64;
            slm_total += pure_slm * batch.len() as f64;

            let (graph, loss) = se_slm_batch_loss(
                &replayed.slm,
                &replayed.unified,
                replayed.slm_soft_tokens,
                &batch,
                bins,
                true,
            )
            .unwrap();
            assert!((graph.tape.scalar(loss) - pure_slm).abs() < 1e-10);
            let grads = graph.gradients(loss);
            apply_sgd_backbone(&mut replayed.slm, &grads, lr);
        }
        assert!((llm_total / n as f64 - llm_live).abs() < 1e-10);
        assert!((slm_total / n as f64 - slm_live).abs() < 1e-10);
    }

    #[test]
    fn distribute_is_a_value_snapshot() {
        let mut server = fixture(46);
        let payload = server.distribute_adapters();
        let digest = crate::models::digest_adapters(&payload);
        server.se_ccl(1, 0.05, 2, 4).unwrap();
        assert_eq!(crate::models::digest_adapters(&payload), digest);
        let again = server.distribute_adapters();
        assert_ne!(crate::models::digest_adapters(&again), digest);
        // twice without training in between: identical
        let a = server.distribute_adapters();
        let b = server.distribute_adapters();
        assert_eq!(
            crate::models::digest_adapters(&a),
            crate::models::digest_adapters(&b)
        );
    }
}
