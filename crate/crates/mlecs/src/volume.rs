//! Gram-volume alignment and the contrastive losses built on it.
//!
//! A set of representation vectors, stacked as the columns of `A`, spans a
//! parallelotope whose volume is `sqrt(det(AᵀA))`. Tightly aligned vectors
//! span almost nothing (volume near zero); dispersed vectors span a large
//! volume, so the volume doubles as a k-ary misalignment score that needs
//! no pairwise decomposition.
//!
//! The contrastive losses score each candidate set by `exp(-volume)` and
//! take a softmax over the positive candidate plus in-batch negatives, in
//! two directions: O2A swaps the non-anchor representations across samples,
//! A2O swaps the anchors.

use std::collections::BTreeMap;

use crate::numeric::{self, Matrix};
use crate::{Error, Result};

/// A set of same-dimension representation vectors (one per modality, plus
/// optionally an anchor).
#[derive(Debug, Clone)]
pub struct RepresentationSet {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl RepresentationSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Empty {
                what: "representation set",
            });
        }
        let dim = vectors[0].len();
        if dim == 0 {
            return Err(Error::Empty {
                what: "representation vector",
            });
        }
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::LengthMismatch {
                    left: dim,
                    right: v.len(),
                });
            }
            if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: "representation vector",
                    index,
                });
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    fn as_columns(&self) -> Matrix {
        Matrix::from_columns(&self.vectors).expect("validated at construction")
    }
}

/// Volume spanned by the set: `sqrt(max(det(AᵀA), 0))`.
///
/// Zero for linearly dependent sets; when there are more vectors than
/// dimensions the volume is analytically zero and is returned directly.
pub fn vector_volume(set: &RepresentationSet) -> f64 {
    if set.vectors.len() > set.dim {
        return 0.0;
    }
    let g = numeric::gram(&set.as_columns()).expect("set is nonempty");
    let d = numeric::det(&g).expect("gram is square");
    d.max(0.0).sqrt()
}

/// Closed-form volume gradient: `∂V/∂A = V · A · (G + eps·I)⁻¹`, returned
/// as one gradient vector per input vector (column of `A`).
///
/// The forward volume is reported unregularized; the `eps` shift only
/// stabilizes the inverse in the gradient path.
pub fn volume_gradient(set: &RepresentationSet, eps: f64) -> Result<Vec<Vec<f64>>> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument {
            detail: format!("volume gradient eps must be > 0, got {eps}"),
        });
    }
    let k = set.vectors.len();
    let v = vector_volume(set);
    if v == 0.0 {
        // degenerate span: the (clamped) volume is locally flat
        return Ok(vec![vec![0.0; set.dim]; k]);
    }
    let a = set.as_columns();
    let g = numeric::gram(&a)?;
    let inv = numeric::inverse_regularized(&g, eps)?;
    let scaled = numeric::matmul(&a, &inv)?;
    let mut grads = Vec::with_capacity(k);
    for j in 0..k {
        grads.push((0..set.dim).map(|i| v * scaled.get(i, j)).collect());
    }
    Ok(grads)
}

/// One minibatch of the volume contrastive losses: per-sample anchors,
/// per-sample maps from non-anchor modality to representation, and the
/// candidate count `U` (the positive plus `U-1` in-batch negatives).
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    anchors: Vec<Vec<f64>>,
    others: Vec<BTreeMap<usize, Vec<f64>>>,
    negatives: usize,
}

impl ContrastiveBatch {
    pub fn new(
        anchors: Vec<Vec<f64>>,
        others: Vec<BTreeMap<usize, Vec<f64>>>,
        negatives: usize,
    ) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Empty {
                what: "contrastive batch",
            });
        }
        if anchors.len() != others.len() {
            return Err(Error::LengthMismatch {
                left: anchors.len(),
                right: others.len(),
            });
        }
        if negatives < 1 || negatives > anchors.len() {
            return Err(Error::NegativesExceedBatch {
                count: negatives,
                batch: anchors.len(),
            });
        }
        let dim = anchors[0].len();
        for a in &anchors {
            if a.len() != dim {
                return Err(Error::LengthMismatch {
                    left: dim,
                    right: a.len(),
                });
            }
        }
        for m in &others {
            if m.is_empty() {
                return Err(Error::Empty {
                    what: "non-anchor modality set",
                });
            }
            for v in m.values() {
                if v.len() != dim {
                    return Err(Error::LengthMismatch {
                        left: dim,
                        right: v.len(),
                    });
                }
            }
        }
        Ok(Self {
            anchors,
            others,
            negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn others(&self) -> &[BTreeMap<usize, Vec<f64>>] {
        &self.others
    }
}

/// Candidate sample indices for position `v` in a batch of `n`: the
/// positive itself followed by the next `u-1` samples cyclically. Index 0
/// is always the positive, so candidate order is fixed by batch order.
pub(crate) fn candidate_indices(n: usize, u: usize, v: usize) -> impl Iterator<Item = usize> {
    (0..u).map(move |t| (v + t) % n)
}

fn volume_of(anchor: &[f64], others: &BTreeMap<usize, Vec<f64>>) -> f64 {
    let mut vectors = Vec::with_capacity(1 + others.len());
    vectors.push(anchor.to_vec());
    vectors.extend(others.values().cloned());
    let set = RepresentationSet::new(vectors).expect("batch validated at construction");
    vector_volume(&set)
}

fn nce_mean<F>(batch: &ContrastiveBatch, mut candidate_volume: F) -> f64
where
    F: FnMut(usize, usize) -> f64,
{
    let n = batch.len();
    let u = batch.negatives;
    let mut total = 0.0;
    for v in 0..n {
        let scores: Vec<f64> = candidate_indices(n, u, v)
            .map(|cand| -candidate_volume(v, cand))
            .collect();
        let log_probs = numeric::log_softmax(&scores).expect("scores nonempty and finite");
        total += -log_probs[0];
    }
    total / n as f64
}

/// Others-to-anchor direction: the anchor of sample `v` is held fixed and
/// the non-anchor modality set is swapped in from each candidate sample.
pub fn contrastive_loss_o2a(batch: &ContrastiveBatch) -> f64 {
    nce_mean(batch, |v, cand| {
        volume_of(&batch.anchors[v], &batch.others[cand])
    })
}

/// Anchor-to-others direction: the non-anchor set of sample `v` is held
/// fixed and candidate anchors are swapped in.
pub fn contrastive_loss_a2o(batch: &ContrastiveBatch) -> f64 {
    nce_mean(batch, |v, cand| {
        volume_of(&batch.anchors[cand], &batch.others[v])
    })
}

/// `½ (L_a2o + L_o2a)`.
pub fn symmetric_contrastive_loss(batch: &ContrastiveBatch) -> f64 {
    0.5 * (contrastive_loss_a2o(batch) + contrastive_loss_o2a(batch))
}
