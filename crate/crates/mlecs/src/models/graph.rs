//! Tape construction for model training.
//!
//! A `ModelGraph` replays a `UnifiedModel` forward pass onto an autodiff
//! tape, entering each parameter as a trainable or constant leaf according
//! to the stage's `TrainFlags` (CCL trains connector + adapters, AMT trains
//! encoders + adapters, the server SLM step trains adapters only). Frozen
//! parameters still live on the tape as constants so gradients flow
//! *through* them to trainable parameters upstream.
//!
//! When encoders are frozen the encoder forward is computed off-tape and
//! enters as a constant, which keeps CCL tapes small.

use std::collections::BTreeMap;

use crate::autodiff::{NodeId, Tape};

use crate::volume::candidate_indices;
use crate::{Error, Result};

use super::{AdaptedBackbone, Activation, DenseLayer, UnifiedModel};

/// Regularization used by the volume gradient inside training tapes. The
/// forward volume stays unregularized.
pub const VOLUME_GRAD_EPS: f64 = 1e-8;

/// Which parameter groups a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainFlags {
    pub encoders: bool,
    pub connector: bool,
    pub adapters: bool,
}

impl TrainFlags {
    /// Contrastive stage: connector + adapters train, encoders freeze.
    pub const CCL: TrainFlags = TrainFlags {
        encoders: false,
        connector: true,
        adapters: true,
    };
    /// Private tuning stage: encoders + adapters train, connector freezes.
    pub const AMT: TrainFlags = TrainFlags {
        encoders: true,
        connector: false,
        adapters: true,
    };
    pub const ADAPTERS_ONLY: TrainFlags = TrainFlags {
        encoders: false,
        connector: false,
        adapters: true,
    };
    /// Evaluation pass: nothing trains.
    pub const NONE: TrainFlags = TrainFlags {
        encoders: false,
        connector: false,
        adapters: false,
    };
}

/// Stable identifier of one trainable tensor inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    EncoderWeight { modality: usize, layer: usize },
    EncoderBias { modality: usize, layer: usize },
    ProjectorWeight { modality: usize },
    ProjectorBias { modality: usize },
    FusionWeight { layer: usize },
    FusionBias { layer: usize },
    SpgWeight { layer: usize },
    SpgBias { layer: usize },
    AdapterA { slot: usize },
    AdapterB { slot: usize },
}

impl ParamKey {
    fn trainable_under(self, flags: TrainFlags) -> bool {
        match self {
            ParamKey::EncoderWeight { .. } | ParamKey::EncoderBias { .. } => flags.encoders,
            ParamKey::ProjectorWeight { .. }
            | ParamKey::ProjectorBias { .. }
            | ParamKey::FusionWeight { .. }
            | ParamKey::FusionBias { .. }
            | ParamKey::SpgWeight { .. }
            | ParamKey::SpgBias { .. } => flags.connector,
            ParamKey::AdapterA { .. } | ParamKey::AdapterB { .. } => flags.adapters,
        }
    }
}

/// Gradients keyed by parameter, produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct GradientSet(pub Vec<(ParamKey, Vec<f64>)>);

impl GradientSet {
    pub fn get(&self, key: ParamKey) -> Option<&[f64]> {
        self.0
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, g)| g.as_slice())
    }
}

fn dense_on_tape(
    tape: &mut Tape,
    leaves: &mut BTreeMap<ParamKey, NodeId>,
    layer: &DenseLayer,
    wkey: ParamKey,
    bkey: ParamKey,
    trainable: bool,
    x: NodeId,
) -> NodeId {
    let w = *leaves
        .entry(wkey)
        .or_insert_with(|| tape.leaf_matrix(&layer.weight, trainable));
    let b = *leaves
        .entry(bkey)
        .or_insert_with(|| tape.leaf_vec(&layer.bias, trainable));
    let pre = tape.matvec(w, x);
    let pre = tape.add(pre, b);
    match layer.activation {
        Activation::Identity => pre,
        Activation::Gelu => tape.gelu(pre),
    }
}

fn backbone_on_tape(
    tape: &mut Tape,
    leaves: &mut BTreeMap<ParamKey, NodeId>,
    bb: &AdaptedBackbone,
    adapters_trainable: bool,
    tokens: &[NodeId],
) -> Vec<NodeId> {
    tokens
        .iter()
        .map(|&token| {
            let mut h = token;
            for slot in 0..bb.n_slots() {
                let layer = bb.slot_layer(slot);
                let w = tape.leaf_matrix(&layer.weight, false);
                let b = tape.leaf_vec(&layer.bias, false);
                let mut pre = tape.matvec(w, h);
                if let Some(adapter) = &bb.adapters[slot] {
                    let a = *leaves
                        .entry(ParamKey::AdapterA { slot })
                        .or_insert_with(|| tape.leaf_matrix(&adapter.a, adapters_trainable));
                    let bmat = *leaves
                        .entry(ParamKey::AdapterB { slot })
                        .or_insert_with(|| tape.leaf_matrix(&adapter.b, adapters_trainable));
                    let ax = tape.matvec(a, h);
                    let bax = tape.matvec(bmat, ax);
                    pre = tape.axpy(pre, bax, adapter.scale);
                }
                pre = tape.add(pre, b);
                h = match layer.activation {
                    Activation::Identity => pre,
                    Activation::Gelu => tape.gelu(pre),
                };
            }
            h
        })
        .collect()
}

/// One model's forward pass replayed on a tape.
pub struct ModelGraph<'m> {
    pub tape: Tape,
    model: &'m UnifiedModel,
    flags: TrainFlags,
    leaves: BTreeMap<ParamKey, NodeId>,
}

impl<'m> ModelGraph<'m> {
    pub fn new(model: &'m UnifiedModel, flags: TrainFlags) -> Self {
        Self {
            tape: Tape::new(),
            model,
            flags,
            leaves: BTreeMap::new(),
        }
    }

    fn dense(
        &mut self,
        layer: &DenseLayer,
        wkey: ParamKey,
        bkey: ParamKey,
        x: NodeId,
    ) -> NodeId {
        let trainable = wkey.trainable_under(self.flags);
        dense_on_tape(&mut self.tape, &mut self.leaves, layer, wkey, bkey, trainable, x)
    }

    /// Encoded + projected + normalized representation per present modality.
    pub fn represent(&mut self, features: &BTreeMap<usize, Vec<f64>>) -> Result<BTreeMap<usize, NodeId>> {
        let mut reps = BTreeMap::new();
        for (&m, x) in features {
            let z = if self.flags.encoders {
                let stack = self.model.encoders.get(&m).ok_or_else(|| Error::UnknownModality {
                    name: self
                        .model
                        .modality_names
                        .get(m)
                        .cloned()
                        .unwrap_or_else(|| format!("index {m}")),
                })?;
                let mut h = self.tape.constant_vec(x);
                for (layer_idx, layer) in stack.iter().enumerate() {
                    h = self.dense(
                        layer,
                        ParamKey::EncoderWeight { modality: m, layer: layer_idx },
                        ParamKey::EncoderBias { modality: m, layer: layer_idx },
                        h,
                    );
                }
                h
            } else {
                let z = self.model.encode(m, x)?;
                self.tape.constant_vec(&z)
            };
            let proj = &self.model.projectors[&m];
            let raw = self.dense(
                proj,
                ParamKey::ProjectorWeight { modality: m },
                ParamKey::ProjectorBias { modality: m },
                z,
            );
            reps.insert(m, self.tape.normalize(raw));
        }
        Ok(reps)
    }

    /// Zero-imputed concatenation in modality order, then the fusion stack.
    pub fn fuse(&mut self, reps: &BTreeMap<usize, NodeId>) -> NodeId {
        let universe = self.model.universe_size();
        let zero = vec![0.0; self.model.latent_dim];
        let slots: Vec<NodeId> = (0..universe)
            .map(|m| reps.get(&m).copied().unwrap_or_else(|| self.tape.constant_vec(&zero)))
            .collect();
        let mut h = self.tape.concat(&slots);
        let fusion = self.model.fusion.clone();
        for (layer_idx, layer) in fusion.iter().enumerate() {
            h = self.dense(
                layer,
                ParamKey::FusionWeight { layer: layer_idx },
                ParamKey::FusionBias { layer: layer_idx },
                h,
            );
        }
        h
    }

    /// Soft-prompt token nodes (each `token_width` wide).
    pub fn soft_tokens(&mut self, fused: NodeId) -> Vec<NodeId> {
        let mut h = fused;
        let spg = self.model.soft_prompt_gen.clone();
        for (layer_idx, layer) in spg.iter().enumerate() {
            h = self.dense(
                layer,
                ParamKey::SpgWeight { layer: layer_idx },
                ParamKey::SpgBias { layer: layer_idx },
                h,
            );
        }
        let width = self.model.token_width;
        (0..self.model.soft_tokens)
            .map(|t| self.tape.slice(h, t * width, width))
            .collect()
    }

    /// Adapted backbone logits, one vector node per token position.
    pub fn backbone_logits(&mut self, tokens: &[NodeId]) -> Vec<NodeId> {
        backbone_on_tape(
            &mut self.tape,
            &mut self.leaves,
            &self.model.backbone,
            self.flags.adapters,
            tokens,
        )
    }

    /// Mean position cross-entropy for one sample.
    pub fn supervised(&mut self, logits: &[NodeId], label: usize) -> NodeId {
        let ces: Vec<NodeId> = logits
            .iter()
            .map(|&l| self.tape.cross_entropy_label(l, label))
            .collect();
        self.tape.mean_scalars(&ces)
    }

    /// Full per-sample supervised loss node (represent → fuse → prompt →
    /// backbone → mean CE).
    pub fn sample_supervised(&mut self, features: &BTreeMap<usize, Vec<f64>>, label: usize) -> Result<NodeId> {
        let reps = self.represent(features)?;
        let fused = self.fuse(&reps);
        let tokens = self.soft_tokens(fused);
        let logits = self.backbone_logits(&tokens);
        Ok(self.supervised(&logits, label))
    }

    /// Backward pass and gradient collection for the stage's trainable set.
    pub fn gradients(mut self, loss: NodeId) -> GradientSet {
        self.tape.backward(loss);
        let mut grads = Vec::new();
        for (key, node) in &self.leaves {
            if key.trainable_under(self.flags) {
                grads.push((*key, self.tape.grad(*node).to_vec()));
            }
        }
        GradientSet(grads)
    }

    /// Loss value without any update (evaluation pass).
    pub fn loss_value(&self, loss: NodeId) -> f64 {
        self.tape.scalar(loss)
    }
}

/// In-batch volume-contrastive loss nodes over representation nodes.
/// `others[v]` holds sample `v`'s non-anchor representations in a fixed
/// modality order; candidates follow the same cyclic layout as the pure
/// losses so tape and oracle values agree exactly.
pub fn contrastive_nodes(
    tape: &mut Tape,
    anchors: &[NodeId],
    others: &[Vec<NodeId>],
    negatives: usize,
) -> (NodeId, NodeId) {
    let n = anchors.len();
    debug_assert_eq!(n, others.len());
    debug_assert!(negatives >= 1 && negatives <= n);
    let mut o2a_terms = Vec::with_capacity(n);
    let mut a2o_terms = Vec::with_capacity(n);
    for v in 0..n {
        let mut o2a_scores = Vec::with_capacity(negatives);
        let mut a2o_scores = Vec::with_capacity(negatives);
        for cand in candidate_indices(n, negatives, v) {
            let mut set = vec![anchors[v]];
            set.extend_from_slice(&others[cand]);
            let vol = tape.volume(&set, VOLUME_GRAD_EPS);
            o2a_scores.push(tape.sum_scalars(&[vol], -1.0));

            let mut set = vec![anchors[cand]];
            set.extend_from_slice(&others[v]);
            let vol = tape.volume(&set, VOLUME_GRAD_EPS);
            a2o_scores.push(tape.sum_scalars(&[vol], -1.0));
        }
        let stacked = tape.stack_scalars(&o2a_scores);
        o2a_terms.push(tape.cross_entropy_label(stacked, 0));
        let stacked = tape.stack_scalars(&a2o_scores);
        a2o_terms.push(tape.cross_entropy_label(stacked, 0));
    }
    (tape.mean_scalars(&o2a_terms), tape.mean_scalars(&a2o_terms))
}

/// Apply one SGD step to the model from collected gradients.
pub fn apply_sgd(model: &mut UnifiedModel, grads: &GradientSet, lr: f64) {
    for (key, grad) in &grads.0 {
        let slice = param_slice_mut(model, *key);
        debug_assert_eq!(slice.len(), grad.len());
        for (p, g) in slice.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
}

pub(crate) fn param_slice_mut(model: &mut UnifiedModel, key: ParamKey) -> &mut [f64] {
    match key {
        ParamKey::EncoderWeight { modality, layer } => model
            .encoders
            .get_mut(&modality)
            .expect("gradient key refers to an existing encoder")[layer]
            .weight
            .data_mut(),
        ParamKey::EncoderBias { modality, layer } => {
            &mut model.encoders.get_mut(&modality).expect("existing encoder")[layer].bias
        }
        ParamKey::ProjectorWeight { modality } => model
            .projectors
            .get_mut(&modality)
            .expect("existing projector")
            .weight
            .data_mut(),
        ParamKey::ProjectorBias { modality } => {
            &mut model.projectors.get_mut(&modality).expect("existing projector").bias
        }
        ParamKey::FusionWeight { layer } => model.fusion[layer].weight.data_mut(),
        ParamKey::FusionBias { layer } => &mut model.fusion[layer].bias,
        ParamKey::SpgWeight { layer } => model.soft_prompt_gen[layer].weight.data_mut(),
        ParamKey::SpgBias { layer } => &mut model.soft_prompt_gen[layer].bias,
        ParamKey::AdapterA { slot } => model.backbone.adapters[slot]
            .as_mut()
            .expect("adapted slot")
            .a
            .data_mut(),
        ParamKey::AdapterB { slot } => model.backbone.adapters[slot]
            .as_mut()
            .expect("adapted slot")
            .b
            .data_mut(),
    }
}

/// Tape forward for a bare adapted backbone (the server-side SLM), with
/// tokens entering as constants.
pub struct BackboneGraph<'b> {
    pub tape: Tape,
    backbone: &'b AdaptedBackbone,
    leaves: BTreeMap<ParamKey, NodeId>,
    train_adapters: bool,
}

impl<'b> BackboneGraph<'b> {
    pub fn new(backbone: &'b AdaptedBackbone, train_adapters: bool) -> Self {
        Self {
            tape: Tape::new(),
            backbone,
            leaves: BTreeMap::new(),
            train_adapters,
        }
    }

    pub fn logits_for_tokens(&mut self, tokens: &[Vec<f64>]) -> Vec<NodeId> {
        let token_nodes: Vec<NodeId> = tokens.iter().map(|t| self.tape.constant_vec(t)).collect();
        backbone_on_tape(
            &mut self.tape,
            &mut self.leaves,
            self.backbone,
            self.train_adapters,
            &token_nodes,
        )
    }

    pub fn supervised(&mut self, logits: &[NodeId], label: usize) -> NodeId {
        let ces: Vec<NodeId> = logits
            .iter()
            .map(|&l| self.tape.cross_entropy_label(l, label))
            .collect();
        self.tape.mean_scalars(&ces)
    }

    pub fn gradients(mut self, loss: NodeId) -> GradientSet {
        self.tape.backward(loss);
        let mut grads = Vec::new();
        for (key, node) in &self.leaves {
            if self.train_adapters {
                grads.push((*key, self.tape.grad(*node).to_vec()));
            }
        }
        GradientSet(grads)
    }
}

pub fn apply_sgd_backbone(backbone: &mut AdaptedBackbone, grads: &GradientSet, lr: f64) {
    for (key, grad) in &grads.0 {
        let slice = match key {
            ParamKey::AdapterA { slot } => backbone.adapters[*slot]
                .as_mut()
                .expect("adapted slot")
                .a
                .data_mut(),
            ParamKey::AdapterB { slot } => backbone.adapters[*slot]
                .as_mut()
                .expect("adapted slot")
                .b
                .data_mut(),
            other => unreachable!("backbone gradient for non-adapter key {other:?}"),
        };
        for (p, g) in slice.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
}
