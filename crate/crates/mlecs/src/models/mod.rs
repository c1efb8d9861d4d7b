//! Toy-scale unified model components.
//!
//! Every party (device or server) runs the same architecture at different
//! sizes: per-modality encoders, a connector (modality projectors, a fusion
//! stack, a soft-prompt generator), and a frozen dense backbone with a LoRA
//! adapter on each dense layer plus the head. The backbone weights never
//! change after construction; all adaptation happens in the low-rank pairs,
//! the encoders, and the connector.
//!
//! The small/large model distinction is purely one of width, depth, and
//! soft-prompt length; both consume `token_width`-wide soft-prompt tokens
//! and emit one logit row per token position.

pub mod checkpoint;
pub mod graph;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::numeric::{self, Matrix};
use crate::{Error, Result};

/// Exact Gaussian-CDF GeLU (not the tanh approximation), so oracle forwards
/// reproduce to machine precision.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Gelu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Gelu => gelu(v),
        }
    }
}

/// One affine layer with an elementwise activation.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` init for weight and bias.
    pub fn random(out_dim: usize, in_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Matrix::new(out_dim, in_dim, data).expect("finite init"),
            bias,
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v = self.activation.apply(*v + b);
        }
        Ok(y)
    }
}

pub fn forward_stack(layers: &[DenseLayer], x: &[f64]) -> Result<Vec<f64>> {
    let mut h = x.to_vec();
    for layer in layers {
        h = layer.forward(&h)?;
    }
    Ok(h)
}

/// Low-rank adapter pair for a frozen `p x q` weight: `ΔW = scale · B·A`
/// with `A: r x q`, `B: p x r`. `B` starts at zero so a fresh adapter is a
/// no-op.
#[derive(Debug, Clone)]
pub struct LoRAAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub rank: usize,
    pub scale: f64,
}

impl LoRAAdapter {
    pub fn zero_start(p: usize, q: usize, rank: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if rank < 1 || rank * 2 > p.min(q) {
            return Err(Error::RankTooLarge { rank, p, q });
        }
        let bound = 1.0 / (q as f64).sqrt();
        let a_data: Vec<f64> = (0..rank * q).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Self {
            a: Matrix::new(rank, q, a_data).expect("finite init"),
            b: Matrix::zeros(p, rank),
            rank,
            scale,
        })
    }

    /// `(p, q)` of the adapted layer.
    pub fn shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn param_count(&self) -> u64 {
        (self.rank * (self.b.rows() + self.a.cols())) as u64
    }

    /// `scale · B(Ax)` without materializing `ΔW`.
    pub fn delta_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let ax = self.a.matvec(x)?;
        let mut y = self.b.matvec(&ax)?;
        for v in y.iter_mut() {
            *v *= self.scale;
        }
        Ok(y)
    }
}

/// Shape of an adapted dense backbone.
#[derive(Debug, Clone)]
pub struct BackboneSpec {
    pub token_width: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub vocab: usize,
    pub rank: usize,
    pub lora_scale: f64,
    /// Which dense slots carry adapters (`hidden_layers` is the head slot);
    /// `None` adapts every slot.
    pub lora_slots: Option<Vec<usize>>,
}

/// Frozen dense stack plus head, with optional LoRA adapters per slot.
/// Slot `i < layers.len()` is hidden layer `i`; the last slot is the head.
#[derive(Debug, Clone)]
pub struct AdaptedBackbone {
    pub layers: Vec<DenseLayer>,
    pub head: DenseLayer,
    pub adapters: Vec<Option<LoRAAdapter>>,
}

impl AdaptedBackbone {
    pub fn build(spec: &BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.hidden_layers);
        let mut in_dim = spec.token_width;
        for _ in 0..spec.hidden_layers {
            layers.push(DenseLayer::random(spec.hidden_width, in_dim, Activation::Gelu, rng));
            in_dim = spec.hidden_width;
        }
        let head = DenseLayer::random(spec.vocab, in_dim, Activation::Identity, rng);
        let n_slots = spec.hidden_layers + 1;
        let adapted: BTreeSet<usize> = match &spec.lora_slots {
            Some(slots) => {
                for &s in slots {
                    if s >= n_slots {
                        return Err(Error::InvalidConfig {
                            detail: format!("lora slot {s} out of range (have {n_slots} dense slots)"),
                        });
                    }
                }
                slots.iter().copied().collect()
            }
            None => (0..n_slots).collect(),
        };
        let mut adapters = Vec::with_capacity(n_slots);
        for slot in 0..n_slots {
            if adapted.contains(&slot) {
                let layer = if slot < layers.len() { &layers[slot] } else { &head };
                adapters.push(Some(LoRAAdapter::zero_start(
                    layer.out_dim(),
                    layer.in_dim(),
                    spec.rank,
                    spec.lora_scale,
                    rng,
                )?));
            } else {
                adapters.push(None);
            }
        }
        Ok(Self { layers, head, adapters })
    }

    pub fn n_slots(&self) -> usize {
        self.layers.len() + 1
    }

    pub(crate) fn slot_layer(&self, slot: usize) -> &DenseLayer {
        if slot < self.layers.len() {
            &self.layers[slot]
        } else {
            &self.head
        }
    }

    /// Forward every token row independently through the adapted stack.
    pub fn forward_tokens(&self, tokens: &Matrix, use_lora: bool) -> Result<LogitSequence> {
        if tokens.cols() != self.slot_layer(0).in_dim() {
            return Err(Error::BadVectorLength {
                expected: self.slot_layer(0).in_dim(),
                got: tokens.cols(),
            });
        }
        let mut rows = Vec::with_capacity(tokens.rows());
        for t in 0..tokens.rows() {
            let mut h = tokens.row(t).to_vec();
            for slot in 0..self.n_slots() {
                let layer = self.slot_layer(slot);
                let mut pre = layer.weight.matvec(&h)?;
                if use_lora {
                    if let Some(adapter) = &self.adapters[slot] {
                        let delta = adapter.delta_matvec(&h)?;
                        for (p, d) in pre.iter_mut().zip(&delta) {
                            *p += d;
                        }
                    }
                }
                for (v, b) in pre.iter_mut().zip(&layer.bias) {
                    *v = layer.activation.apply(*v + b);
                }
                h = pre;
            }
            rows.push(h);
        }
        LogitSequence::new(Matrix::from_rows(&rows)?)
    }

    /// Deep copies of the present adapters in slot order.
    pub fn extract_adapters(&self) -> Vec<LoRAAdapter> {
        self.adapters.iter().flatten().cloned().collect()
    }

    /// Replace the present adapters elementwise; shapes must match.
    pub fn apply_adapters(&mut self, adapters: &[LoRAAdapter]) -> Result<()> {
        let slots: Vec<usize> = (0..self.n_slots())
            .filter(|&s| self.adapters[s].is_some())
            .collect();
        if slots.len() != adapters.len() {
            return Err(Error::TopologyMismatch {
                layer: 0,
                detail: format!("expected {} adapters, got {}", slots.len(), adapters.len()),
            });
        }
        for (slot, incoming) in slots.into_iter().zip(adapters) {
            let current = self.adapters[slot].as_ref().expect("slot filtered to Some");
            if current.shape() != incoming.shape() || current.rank != incoming.rank {
                return Err(Error::TopologyMismatch {
                    layer: slot,
                    detail: format!(
                        "have {:?} rank {}, got {:?} rank {}",
                        current.shape(),
                        current.rank,
                        incoming.shape(),
                        incoming.rank
                    ),
                });
            }
            self.adapters[slot] = Some(incoming.clone());
        }
        Ok(())
    }

    pub fn adapter_param_count(&self) -> u64 {
        self.adapters
            .iter()
            .flatten()
            .map(LoRAAdapter::param_count)
            .sum()
    }

    pub fn frozen_param_count(&self) -> u64 {
        let mut count = 0u64;
        for slot in 0..self.n_slots() {
            let l = self.slot_layer(slot);
            count += (l.weight.rows() * l.weight.cols() + l.bias.len()) as u64;
        }
        count
    }

    /// Digest of the frozen weights; must never move across training calls.
    pub fn frozen_digest(&self) -> u64 {
        let mut h = DigestState::new();
        for slot in 0..self.n_slots() {
            let l = self.slot_layer(slot);
            h.update(l.weight.data());
            h.update(&l.bias);
        }
        h.finish()
    }

    pub fn adapter_digest(&self) -> u64 {
        let mut h = DigestState::new();
        for adapter in self.adapters.iter().flatten() {
            h.update(adapter.a.data());
            h.update(adapter.b.data());
        }
        h.finish()
    }
}

/// A sequence of per-position logits (`positions x vocab`).
#[derive(Debug, Clone)]
pub struct LogitSequence {
    data: Matrix,
}

impl LogitSequence {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::Empty { what: "logit sequence" });
        }
        Ok(Self { data })
    }

    pub fn positions(&self) -> usize {
        self.data.rows()
    }

    pub fn vocab(&self) -> usize {
        self.data.cols()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn mean_logits(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.vocab()];
        for i in 0..self.positions() {
            for (m, v) in mean.iter_mut().zip(self.data.row(i)) {
                *m += v;
            }
        }
        let n = self.positions() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Argmax of the position-mean logits; ties resolve to the lowest class.
    pub fn predicted_class(&self) -> usize {
        let mean = self.mean_logits();
        let mut best = 0;
        for (i, &v) in mean.iter().enumerate() {
            if v > mean[best] {
                best = i;
            }
        }
        best
    }
}

/// Mean cross-entropy over positions against a single class label.
pub fn supervised_loss(logits: &LogitSequence, label: usize) -> Result<f64> {
    if label >= logits.vocab() {
        return Err(Error::LabelOutOfRange {
            label,
            vocab: logits.vocab(),
        });
    }
    let mut total = 0.0;
    for i in 0..logits.positions() {
        total += -numeric::log_softmax(logits.position(i))?[label];
    }
    Ok(total / logits.positions() as f64)
}

/// L2-normalize, or fall back to the first basis vector for a zero-norm
/// input (degenerate-output rule shared by projection and fusion outputs).
pub fn normalize_or_e1(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        log::debug!("degenerate zero-norm representation replaced by first basis vector");
        let mut e1 = vec![0.0; v.len()];
        e1[0] = 1.0;
        return e1;
    }
    v.iter().map(|x| x / norm).collect()
}

/// Connector/encoder dimensions for the whole modality universe.
#[derive(Debug, Clone)]
pub struct ConnectorSpec {
    /// Raw input width per modality index (the universe, not just the
    /// modalities a given party holds).
    pub raw_dims: Vec<usize>,
    pub encoder_hidden: usize,
    pub encoded_dim: usize,
    pub latent_dim: usize,
    pub fusion_hidden: usize,
    pub spg_hidden: usize,
}

/// Per-party bundle of encoders, connector, and adapted backbone.
#[derive(Debug, Clone)]
pub struct UnifiedModel {
    pub encoders: BTreeMap<usize, Vec<DenseLayer>>,
    pub projectors: BTreeMap<usize, DenseLayer>,
    pub fusion: Vec<DenseLayer>,
    pub soft_prompt_gen: Vec<DenseLayer>,
    pub backbone: AdaptedBackbone,
    pub modality_names: Vec<String>,
    pub latent_dim: usize,
    pub token_width: usize,
    pub soft_tokens: usize,
}

impl UnifiedModel {
    /// Build encoders and connector from `rng` for the given modality
    /// subset; the (already built) backbone is taken as-is so that parties
    /// can share identical frozen weights.
    pub fn build(
        modalities: &BTreeSet<usize>,
        modality_names: &[String],
        conn: &ConnectorSpec,
        backbone: AdaptedBackbone,
        soft_tokens: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::Empty { what: "modality set" });
        }
        let universe = conn.raw_dims.len();
        if modality_names.len() != universe {
            return Err(Error::LengthMismatch {
                left: modality_names.len(),
                right: universe,
            });
        }
        if let Some(&m) = modalities.iter().find(|&&m| m >= universe) {
            return Err(Error::UnknownModality {
                name: format!("index {m}"),
            });
        }
        let token_width = backbone.slot_layer(0).in_dim();
        let mut encoders = BTreeMap::new();
        let mut projectors = BTreeMap::new();
        for &m in modalities {
            encoders.insert(
                m,
                vec![
                    DenseLayer::random(conn.encoder_hidden, conn.raw_dims[m], Activation::Gelu, rng),
                    DenseLayer::random(conn.encoded_dim, conn.encoder_hidden, Activation::Identity, rng),
                ],
            );
            projectors.insert(
                m,
                DenseLayer::random(conn.latent_dim, conn.encoded_dim, Activation::Identity, rng),
            );
        }
        let fusion = vec![
            DenseLayer::random(conn.fusion_hidden, universe * conn.latent_dim, Activation::Gelu, rng),
            DenseLayer::random(conn.latent_dim, conn.fusion_hidden, Activation::Identity, rng),
        ];
        let soft_prompt_gen = vec![
            DenseLayer::random(conn.spg_hidden, conn.latent_dim, Activation::Gelu, rng),
            DenseLayer::random(soft_tokens * token_width, conn.spg_hidden, Activation::Identity, rng),
        ];
        Ok(Self {
            encoders,
            projectors,
            fusion,
            soft_prompt_gen,
            backbone,
            modality_names: modality_names.to_vec(),
            latent_dim: conn.latent_dim,
            token_width,
            soft_tokens,
        })
    }

    pub fn universe_size(&self) -> usize {
        self.modality_names.len()
    }

    fn modality_name(&self, m: usize) -> String {
        self.modality_names
            .get(m)
            .cloned()
            .unwrap_or_else(|| format!("index {m}"))
    }

    /// Modality-specific feature vector `z = E_m(x)`.
    pub fn encode(&self, modality: usize, x: &[f64]) -> Result<Vec<f64>> {
        let stack = self.encoders.get(&modality).ok_or_else(|| Error::UnknownModality {
            name: self.modality_name(modality),
        })?;
        forward_stack(stack, x)
    }

    /// Project into the shared latent space and L2-normalize.
    pub fn project(&self, modality: usize, z: &[f64]) -> Result<Vec<f64>> {
        let proj = self.projectors.get(&modality).ok_or_else(|| Error::UnknownModality {
            name: self.modality_name(modality),
        })?;
        Ok(normalize_or_e1(&proj.forward(z)?))
    }

    /// Encode and project every modality present in `features`.
    pub fn represent(&self, features: &BTreeMap<usize, Vec<f64>>) -> Result<BTreeMap<usize, Vec<f64>>> {
        let mut reps = BTreeMap::new();
        for (&m, x) in features {
            let z = self.encode(m, x)?;
            reps.insert(m, self.project(m, &z)?);
        }
        Ok(reps)
    }

    /// Fused multimodal representation: missing modalities are zero-imputed
    /// into a fixed modality-ordered concatenation before the fusion stack.
    pub fn fuse(&self, reps: &BTreeMap<usize, Vec<f64>>) -> Result<Vec<f64>> {
        if reps.is_empty() {
            return Err(Error::Empty { what: "fusion input" });
        }
        let mut concat = vec![0.0; self.universe_size() * self.latent_dim];
        for (&m, rep) in reps {
            if m >= self.universe_size() {
                return Err(Error::UnknownModality {
                    name: self.modality_name(m),
                });
            }
            if rep.len() != self.latent_dim {
                return Err(Error::BadVectorLength {
                    expected: self.latent_dim,
                    got: rep.len(),
                });
            }
            concat[m * self.latent_dim..(m + 1) * self.latent_dim].copy_from_slice(rep);
        }
        forward_stack(&self.fusion, &concat)
    }

    /// Soft-prompt token matrix (`soft_tokens x token_width`) generated
    /// from a fused representation.
    pub fn soft_prompt(&self, fused: &[f64]) -> Result<Matrix> {
        if fused.len() != self.latent_dim {
            return Err(Error::BadVectorLength {
                expected: self.latent_dim,
                got: fused.len(),
            });
        }
        let flat = forward_stack(&self.soft_prompt_gen, fused)?;
        Matrix::new(self.soft_tokens, self.token_width, flat)
    }

    pub fn backbone_forward(&self, tokens: &Matrix, use_lora: bool) -> Result<LogitSequence> {
        self.backbone.forward_tokens(tokens, use_lora)
    }

    /// Full pipeline on one sample's raw features.
    pub fn forward_sample(&self, features: &BTreeMap<usize, Vec<f64>>) -> Result<LogitSequence> {
        let reps = self.represent(features)?;
        let fused = self.fuse(&reps)?;
        let tokens = self.soft_prompt(&fused)?;
        self.backbone_forward(&tokens, true)
    }

    pub fn extract_lora(&self) -> Vec<LoRAAdapter> {
        self.backbone.extract_adapters()
    }

    pub fn apply_lora(&mut self, adapters: &[LoRAAdapter]) -> Result<()> {
        self.backbone.apply_adapters(adapters)
    }

    pub fn total_param_count(&self) -> u64 {
        let mut count = self.backbone.frozen_param_count() + self.backbone.adapter_param_count();
        for stack in self.encoders.values() {
            for l in stack {
                count += (l.weight.rows() * l.weight.cols() + l.bias.len()) as u64;
            }
        }
        for l in self.projectors.values() {
            count += (l.weight.rows() * l.weight.cols() + l.bias.len()) as u64;
        }
        for l in self.fusion.iter().chain(&self.soft_prompt_gen) {
            count += (l.weight.rows() * l.weight.cols() + l.bias.len()) as u64;
        }
        count
    }

    pub fn encoder_digest(&self) -> u64 {
        let mut h = DigestState::new();
        for stack in self.encoders.values() {
            for l in stack {
                h.update(l.weight.data());
                h.update(&l.bias);
            }
        }
        h.finish()
    }

    pub fn connector_digest(&self) -> u64 {
        let mut h = DigestState::new();
        for l in self.projectors.values() {
            h.update(l.weight.data());
            h.update(&l.bias);
        }
        for l in self.fusion.iter().chain(&self.soft_prompt_gen) {
            h.update(l.weight.data());
            h.update(&l.bias);
        }
        h.finish()
    }

    /// Digest of every parameter, frozen or trainable.
    pub fn param_digest(&self) -> u64 {
        let mut h = DigestState::new();
        h.update(&[self.encoder_digest() as f64]);
        h.update(&[self.connector_digest() as f64]);
        h.update(&[self.backbone.frozen_digest() as f64]);
        h.update(&[self.backbone.adapter_digest() as f64]);
        h.finish()
    }
}

/// FNV-1a over the raw bit patterns of `f64` slices; used wherever tests or
/// invariants need to assert "these parameters did not move".
pub struct DigestState(u64);

impl DigestState {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn update(&mut self, values: &[f64]) {
        for v in values {
            for b in v.to_bits().to_le_bytes() {
                self.0 ^= u64::from(b);
                self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for DigestState {
    fn default() -> Self {
        Self::new()
    }
}

pub fn digest_adapters(adapters: &[LoRAAdapter]) -> u64 {
    let mut h = DigestState::new();
    for ad in adapters {
        h.update(ad.a.data());
        h.update(ad.b.data());
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn test_spec() -> (ConnectorSpec, BackboneSpec) {
        (
            ConnectorSpec {
                raw_dims: vec![6, 5, 4],
                encoder_hidden: 8,
                encoded_dim: 5,
                latent_dim: 4,
                fusion_hidden: 8,
                spg_hidden: 8,
            },
            BackboneSpec {
                token_width: 6,
                hidden_width: 6,
                hidden_layers: 2,
                vocab: 3,
                rank: 2,
                lora_scale: 1.0,
                lora_slots: None,
            },
        )
    }

    fn build_model(seed: u64) -> UnifiedModel {
        let (conn, bspec) = test_spec();
        let mut brng = stream_rng(seed, "backbone-test", 0);
        let backbone = AdaptedBackbone::build(&bspec, &mut brng).unwrap();
        let mut mrng = stream_rng(seed, "model-test", 0);
        UnifiedModel::build(
            &[0usize, 1, 2].into_iter().collect(),
            &["video".into(), "audio".into(), "text".into()],
            &conn,
            backbone,
            2,
            &mut mrng,
        )
        .unwrap()
    }

    #[test]
    fn encode_zero_and_identity_layers() {
        let zero = DenseLayer {
            weight: Matrix::zeros(3, 3),
            bias: vec![0.0; 3],
            activation: Activation::Identity,
        };
        assert_eq!(zero.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        let ident = DenseLayer {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
            activation: Activation::Identity,
        };
        assert_eq!(ident.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn encode_matches_layer_by_layer_oracle() {
        let model = build_model(11);
        let mut r = stream_rng(11, "input", 0);
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let z = model.encode(0, &x).unwrap();
        // hand-rolled forward through the same two layers
        let stack = &model.encoders[&0];
        let mut h = Vec::new();
        for i in 0..stack[0].out_dim() {
            let mut acc = stack[0].bias[i];
            for j in 0..x.len() {
                acc += stack[0].weight.get(i, j) * x[j];
            }
            h.push(gelu(acc));
        }
        let mut z2 = Vec::new();
        for i in 0..stack[1].out_dim() {
            let mut acc = stack[1].bias[i];
            for (j, hv) in h.iter().enumerate() {
                acc += stack[1].weight.get(i, j) * hv;
            }
            z2.push(acc);
        }
        for (a, b) in z.iter().zip(&z2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_unknown_modality_is_rejected_by_name() {
        let model = build_model(12);
        let err = model.encode(7, &[0.0; 4]).unwrap_err();
        assert!(matches!(err, Error::UnknownModality { .. }));
        let mut partial = build_model(12);
        partial.encoders.remove(&1);
        let err = partial.encode(1, &[0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("audio"));
    }

    #[test]
    fn project_normalizes_and_collapses_scale() {
        let model = build_model(13);
        let z = vec![0.3, -0.2, 0.9, 0.1, 0.4];
        let h = model.project(0, &z).unwrap();
        let norm: f64 = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        // proportional raw outputs give identical projections
        let doubled: Vec<f64> = z.iter().map(|v| v * 2.0).collect();
        let mut proj = model.projectors[&0].clone();
        proj.bias.iter_mut().for_each(|b| *b = 0.0);
        let mut m2 = build_model(13);
        m2.projectors.insert(0, proj);
        let h1 = m2.project(0, &z).unwrap();
        let h2 = m2.project(0, &doubled).unwrap();
        for (a, b) in h1.iter().zip(&h2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fuse_zero_imputes_missing_modalities() {
        let model = build_model(14);
        let rep = vec![0.5; 4];
        let only_first: BTreeMap<usize, Vec<f64>> = [(0usize, rep.clone())].into_iter().collect();
        let fused = model.fuse(&only_first).unwrap();
        assert_eq!(fused.len(), model.latent_dim);
        // same present values, different absent sets: identical output
        let same: BTreeMap<usize, Vec<f64>> = [(0usize, rep)].into_iter().collect();
        assert_eq!(model.fuse(&only_first).unwrap(), model.fuse(&same).unwrap());
        assert!(matches!(
            model.fuse(&BTreeMap::new()),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn soft_prompt_shape_and_zero_case() {
        let mut model = build_model(15);
        for l in model.soft_prompt_gen.iter_mut() {
            l.weight = Matrix::zeros(l.weight.rows(), l.weight.cols());
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let tokens = model.soft_prompt(&vec![0.0; 4]).unwrap();
        assert_eq!((tokens.rows(), tokens.cols()), (2, 6));
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lora_zero_start_is_identity_on_logits() {
        let model = build_model(16);
        let tokens = Matrix::new(2, 6, vec![0.1; 12]).unwrap();
        let with = model.backbone_forward(&tokens, true).unwrap();
        let without = model.backbone_forward(&tokens, false).unwrap();
        for i in 0..with.positions() {
            for (a, b) in with.position(i).iter().zip(without.position(i)) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn lora_full_rank_cancellation_zeroes_preactivation() {
        // single identity-activation layer, adapter with scale·B·A = -W
        let mut rng = stream_rng(3, "cancel", 0);
        let w = DenseLayer::random(4, 4, Activation::Identity, &mut rng);
        let mut bb = AdaptedBackbone {
            layers: vec![],
            head: DenseLayer {
                weight: w.weight.clone(),
                bias: vec![0.0; 4],
                activation: Activation::Identity,
            },
            adapters: vec![None],
        };
        bb.adapters[0] = Some(LoRAAdapter {
            a: w.weight.clone(),
            b: {
                let mut m = Matrix::identity(4);
                for v in m.data_mut() {
                    *v = -*v;
                }
                m
            },
            rank: 4,
            scale: 1.0,
        });
        let tokens = Matrix::new(1, 4, vec![0.3, -0.7, 0.2, 0.9]).unwrap();
        let out = bb.forward_tokens(&tokens, true).unwrap();
        for v in out.position(0) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn lora_forward_matches_effective_weight_oracle() {
        let model = build_model(17);
        let mut r = stream_rng(17, "probe", 0);
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        // perturb B so the adapters are active
        let mut model = model;
        for ad in model.backbone.adapters.iter_mut().flatten() {
            for v in ad.b.data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
        let tokens = Matrix::new(1, 6, x.clone()).unwrap();
        let fast = model.backbone_forward(&tokens, true).unwrap();
        // oracle: materialize W + scale·B·A per slot
        let mut h = x;
        for slot in 0..model.backbone.n_slots() {
            let layer = model.backbone.slot_layer(slot);
            let ad = model.backbone.adapters[slot].as_ref().unwrap();
            let delta = numeric::matmul(&ad.b, &ad.a).unwrap();
            let mut eff = layer.weight.clone();
            for (w, d) in eff.data_mut().iter_mut().zip(delta.data()) {
                *w += ad.scale * d;
            }
            let mut pre = eff.matvec(&h).unwrap();
            for (v, b) in pre.iter_mut().zip(&layer.bias) {
                *v = layer.activation.apply(*v + b);
            }
            h = pre;
        }
        for (a, b) in fast.position(0).iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn supervised_loss_cases() {
        let mut logits = Matrix::zeros(2, 4);
        logits.set(0, 1, 1000.0);
        logits.set(1, 1, 1000.0);
        let seq = LogitSequence::new(logits).unwrap();
        assert!(supervised_loss(&seq, 1).unwrap() < 1e-9);

        let uniform = LogitSequence::new(Matrix::zeros(3, 5)).unwrap();
        assert!((supervised_loss(&uniform, 2).unwrap() - 5.0_f64.ln()).abs() < 1e-12);
        assert!(matches!(
            supervised_loss(&uniform, 9),
            Err(Error::LabelOutOfRange { .. })
        ));

        // direct oracle on fixed logits
        let m = Matrix::from_rows(&[vec![0.2, -0.4, 1.1], vec![-0.3, 0.8, 0.05]]).unwrap();
        let seq = LogitSequence::new(m.clone()).unwrap();
        let mut want = 0.0;
        for i in 0..2 {
            let z: f64 = m.row(i).iter().map(|v| v.exp()).sum();
            want += -(m.row(i)[1].exp() / z).ln();
        }
        want /= 2.0;
        assert!((supervised_loss(&seq, 1).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn extract_apply_round_trip_is_bitwise() {
        let mut model = build_model(18);
        let extracted = model.extract_lora();
        assert!(extracted.iter().all(|ad| ad.b.data().iter().all(|&v| v == 0.0)));
        let digest_before = digest_adapters(&extracted);
        model.apply_lora(&extracted).unwrap();
        assert_eq!(digest_adapters(&model.extract_lora()), digest_before);

        let tokens = Matrix::new(2, 6, vec![0.05; 12]).unwrap();
        let before = model.backbone_forward(&tokens, true).unwrap();
        let adapters = model.extract_lora();
        model.apply_lora(&adapters).unwrap();
        let after = model.backbone_forward(&tokens, true).unwrap();
        for i in 0..before.positions() {
            assert_eq!(before.position(i), after.position(i));
        }
    }

    #[test]
    fn adapter_param_count_law() {
        let (_, mut bspec) = test_spec();
        let mut rng = stream_rng(9, "count", 0);
        let bb = AdaptedBackbone::build(&bspec, &mut rng).unwrap();
        let per_slot: Vec<u64> = bb
            .adapters
            .iter()
            .flatten()
            .map(|ad| {
                let (p, q) = ad.shape();
                assert_eq!(ad.param_count(), (ad.rank * (p + q)) as u64);
                ad.param_count()
            })
            .collect();
        assert_eq!(bb.adapter_param_count(), per_slot.iter().sum::<u64>());

        bspec.rank = 1;
        let mut rng = stream_rng(9, "count", 1);
        let half = AdaptedBackbone::build(&bspec, &mut rng).unwrap();
        assert_eq!(bb.adapter_param_count(), 2 * half.adapter_param_count());
    }

    #[test]
    fn rank_bound_is_enforced() {
        let mut rng = stream_rng(10, "rank", 0);
        assert!(matches!(
            LoRAAdapter::zero_start(4, 4, 3, 1.0, &mut rng),
            Err(Error::RankTooLarge { .. })
        ));
    }

    #[test]
    fn frozen_digest_is_stable_under_adapter_churn() {
        let mut model = build_model(19);
        let digest = model.backbone.frozen_digest();
        let mut adapters = model.extract_lora();
        for ad in adapters.iter_mut() {
            for v in ad.b.data_mut() {
                *v = 0.77;
            }
        }
        model.apply_lora(&adapters).unwrap();
        assert_eq!(model.backbone.frozen_digest(), digest);
    }
}
