//! Reverse-mode autodiff over a flat tape of small vector/matrix values.
//!
//! The training loops rebuild a tape per minibatch: model parameters enter
//! as trainable leaves, frozen parameters and data as constants, and the
//! loss comes out as a scalar node. `backward` then walks the tape once in
//! reverse. The op set is exactly what the models need — dense affine maps,
//! GeLU, L2 normalization, concatenation, cross-entropy, KL against a fixed
//! target distribution, sorted average-pooling, and the Gram-volume score
//! (whose backward uses the closed form `V · A · (G + eps·I)⁻¹` rather than
//! differentiating through the LU factorization).

use crate::models::{gelu, gelu_prime};
use crate::numeric::{self, Matrix};

pub type NodeId = usize;

const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Matrix-vector product `m · x`.
    MatVec { m: NodeId, x: NodeId },
    Add { a: NodeId, b: NodeId },
    /// `a + c·b`, elementwise.
    Axpy { a: NodeId, b: NodeId, c: f64 },
    Gelu { x: NodeId },
    /// `x / ‖x‖`; zero-norm inputs collapse to the first basis vector and
    /// pass no gradient.
    Normalize { x: NodeId, inv_norm: f64, degenerate: bool },
    Concat { parts: Vec<NodeId> },
    Slice { x: NodeId, start: usize, len: usize },
    /// `-log_softmax(z)[label]`.
    CeLabel { z: NodeId, label: usize },
    /// `KL(target ‖ softmax(z))` with a constant probability target.
    KlToSoftmax { z: NodeId, target: Vec<f64> },
    /// Gram volume of the parent vectors taken as matrix columns.
    Volume { parts: Vec<NodeId>, eps: f64 },
    StackScalars { parts: Vec<NodeId> },
    /// `scale · Σ parts` over scalar parents.
    SumScalars { parts: Vec<NodeId>, scale: f64 },
    Gather { x: NodeId, idx: Vec<usize> },
    /// Equal-width average pooling; the remainder widens the leading bins.
    PoolBins { x: NodeId, bins: usize },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    needs: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs: bool) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad,
            needs,
            op,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    pub fn vec_len(&self, id: NodeId) -> usize {
        self.nodes[id].value.len()
    }

    // ---- leaves -----------------------------------------------------------

    pub fn leaf_vec(&mut self, v: &[f64], trainable: bool) -> NodeId {
        self.push(v.len(), 1, v.to_vec(), Op::Leaf, trainable)
    }

    pub fn constant_vec(&mut self, v: &[f64]) -> NodeId {
        self.leaf_vec(v, false)
    }

    pub fn leaf_matrix(&mut self, m: &Matrix, trainable: bool) -> NodeId {
        self.push(m.rows(), m.cols(), m.data().to_vec(), Op::Leaf, trainable)
    }

    // ---- ops --------------------------------------------------------------

    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> NodeId {
        let (rows, cols) = (self.nodes[m].rows, self.nodes[m].cols);
        debug_assert_eq!(self.nodes[x].value.len(), cols);
        let mut y = vec![0.0; rows];
        {
            let mv = &self.nodes[m].value;
            let xv = &self.nodes[x].value;
            for i in 0..rows {
                let mut acc = 0.0;
                for j in 0..cols {
                    acc += mv[i * cols + j] * xv[j];
                }
                y[i] = acc;
            }
        }
        let needs = self.needs(m) || self.needs(x);
        self.push(rows, 1, y, Op::MatVec { m, x }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.len(), self.nodes[b].value.len());
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(value.len(), 1, value, Op::Add { a, b }, needs)
    }

    pub fn axpy(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.len(), self.nodes[b].value.len());
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + c * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(value.len(), 1, value, Op::Axpy { a, b, c }, needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value: Vec<f64> = self.nodes[x].value.iter().map(|&v| gelu(v)).collect();
        let needs = self.needs(x);
        self.push(value.len(), 1, value, Op::Gelu { x }, needs)
    }

    pub fn normalize(&mut self, x: NodeId) -> NodeId {
        let norm = self.nodes[x].value.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n = self.nodes[x].value.len();
        if norm < DEGENERATE_NORM {
            log::debug!("normalize: zero-norm vector replaced by first basis vector");
            let mut value = vec![0.0; n];
            value[0] = 1.0;
            return self.push(
                n,
                1,
                value,
                Op::Normalize {
                    x,
                    inv_norm: 0.0,
                    degenerate: true,
                },
                self.needs(x),
            );
        }
        let inv = 1.0 / norm;
        let value: Vec<f64> = self.nodes[x].value.iter().map(|v| v * inv).collect();
        let needs = self.needs(x);
        self.push(
            n,
            1,
            value,
            Op::Normalize {
                x,
                inv_norm: inv,
                degenerate: false,
            },
            needs,
        )
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut value = Vec::new();
        let mut needs = false;
        for &p in parts {
            value.extend_from_slice(&self.nodes[p].value);
            needs |= self.needs(p);
        }
        self.push(
            value.len(),
            1,
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.nodes[x].value[start..start + len].to_vec();
        let needs = self.needs(x);
        self.push(len, 1, value, Op::Slice { x, start, len }, needs)
    }

    pub fn cross_entropy_label(&mut self, z: NodeId, label: usize) -> NodeId {
        let log_probs = numeric::log_softmax(&self.nodes[z].value).expect("finite logits");
        let value = -log_probs[label];
        let needs = self.needs(z);
        self.push(1, 1, vec![value], Op::CeLabel { z, label }, needs)
    }

    pub fn kl_to_softmax(&mut self, z: NodeId, target: Vec<f64>) -> NodeId {
        debug_assert_eq!(self.nodes[z].value.len(), target.len());
        let log_probs = numeric::log_softmax(&self.nodes[z].value).expect("finite logits");
        let mut acc = 0.0;
        for (&t, &lp) in target.iter().zip(&log_probs) {
            if t > 0.0 {
                acc += t * (t.ln() - lp);
            }
        }
        let needs = self.needs(z);
        self.push(1, 1, vec![acc], Op::KlToSoftmax { z, target }, needs)
    }

    pub fn volume(&mut self, parts: &[NodeId], eps: f64) -> NodeId {
        let dim = self.nodes[parts[0]].value.len();
        let k = parts.len();
        let mut needs = false;
        for &p in parts {
            debug_assert_eq!(self.nodes[p].value.len(), dim);
            needs |= self.needs(p);
        }
        let value = if k > dim {
            0.0
        } else {
            let cols: Vec<Vec<f64>> = parts.iter().map(|&p| self.nodes[p].value.clone()).collect();
            let a = Matrix::from_columns(&cols).expect("equal column lengths");
            let g = numeric::gram(&a).expect("nonempty");
            numeric::det(&g).expect("square").max(0.0).sqrt()
        };
        self.push(
            1,
            1,
            vec![value],
            Op::Volume {
                parts: parts.to_vec(),
                eps,
            },
            needs,
        )
    }

    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let value: Vec<f64> = parts.iter().map(|&p| self.scalar(p)).collect();
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            value.len(),
            1,
            value,
            Op::StackScalars {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn sum_scalars(&mut self, parts: &[NodeId], scale: f64) -> NodeId {
        let value = scale * parts.iter().map(|&p| self.scalar(p)).sum::<f64>();
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            1,
            1,
            vec![value],
            Op::SumScalars {
                parts: parts.to_vec(),
                scale,
            },
            needs,
        )
    }

    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        self.sum_scalars(parts, 1.0 / parts.len() as f64)
    }

    pub fn gather(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let value: Vec<f64> = idx.iter().map(|&i| self.nodes[x].value[i]).collect();
        let needs = self.needs(x);
        self.push(value.len(), 1, value, Op::Gather { x, idx }, needs)
    }

    pub fn pool_bins(&mut self, x: NodeId, bins: usize) -> NodeId {
        let n = self.nodes[x].value.len();
        debug_assert!(bins >= 1 && bins <= n);
        let mut value = Vec::with_capacity(bins);
        for (start, width) in bin_segments(n, bins) {
            let seg = &self.nodes[x].value[start..start + width];
            value.push(seg.iter().sum::<f64>() / width as f64);
        }
        let needs = self.needs(x);
        self.push(bins, 1, value, Op::PoolBins { x, bins }, needs)
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulate gradients of the scalar `loss` node into every node that
    /// (transitively) depends on a trainable leaf.
    pub fn backward(&mut self, loss: NodeId) {
        debug_assert_eq!(self.nodes[loss].value.len(), 1);
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
        self.nodes[loss].grad[0] = 1.0;
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs {
                continue;
            }
            let g = self.nodes[id].grad.clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatVec { m, x } => {
                    let (rows, cols) = (self.nodes[m].rows, self.nodes[m].cols);
                    if self.needs(m) {
                        let xv = self.nodes[x].value.clone();
                        let gm = &mut self.nodes[m].grad;
                        for i in 0..rows {
                            for j in 0..cols {
                                gm[i * cols + j] += g[i] * xv[j];
                            }
                        }
                    }
                    if self.needs(x) {
                        let mv = self.nodes[m].value.clone();
                        let gx = &mut self.nodes[x].grad;
                        for i in 0..rows {
                            for j in 0..cols {
                                gx[j] += mv[i * cols + j] * g[i];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for p in [a, b] {
                        if self.needs(p) {
                            for (gp, gi) in self.nodes[p].grad.iter_mut().zip(&g) {
                                *gp += gi;
                            }
                        }
                    }
                }
                Op::Axpy { a, b, c } => {
                    if self.needs(a) {
                        for (gp, gi) in self.nodes[a].grad.iter_mut().zip(&g) {
                            *gp += gi;
                        }
                    }
                    if self.needs(b) {
                        for (gp, gi) in self.nodes[b].grad.iter_mut().zip(&g) {
                            *gp += c * gi;
                        }
                    }
                }
                Op::Gelu { x } => {
                    if self.needs(x) {
                        let xv = self.nodes[x].value.clone();
                        for ((gp, gi), v) in
                            self.nodes[x].grad.iter_mut().zip(&g).zip(&xv)
                        {
                            *gp += gi * gelu_prime(*v);
                        }
                    }
                }
                Op::Normalize {
                    x,
                    inv_norm,
                    degenerate,
                } => {
                    if !degenerate && self.needs(x) {
                        let yv = self.nodes[id].value.clone();
                        let dot: f64 = yv.iter().zip(&g).map(|(y, gi)| y * gi).sum();
                        for ((gp, gi), y) in self.nodes[x].grad.iter_mut().zip(&g).zip(&yv) {
                            *gp += inv_norm * (gi - y * dot);
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p].value.len();
                        if self.needs(p) {
                            for (gp, gi) in
                                self.nodes[p].grad.iter_mut().zip(&g[offset..offset + len])
                            {
                                *gp += gi;
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, start, len } => {
                    if self.needs(x) {
                        for (gp, gi) in
                            self.nodes[x].grad[start..start + len].iter_mut().zip(&g)
                        {
                            *gp += gi;
                        }
                    }
                }
                Op::CeLabel { z, label } => {
                    if self.needs(z) {
                        let probs = numeric::softmax(&self.nodes[z].value).expect("finite");
                        let gz = &mut self.nodes[z].grad;
                        for (i, (gp, p)) in gz.iter_mut().zip(&probs).enumerate() {
                            let delta = if i == label { 1.0 } else { 0.0 };
                            *gp += g[0] * (p - delta);
                        }
                    }
                }
                Op::KlToSoftmax { z, target } => {
                    if self.needs(z) {
                        let probs = numeric::softmax(&self.nodes[z].value).expect("finite");
                        for ((gp, p), t) in
                            self.nodes[z].grad.iter_mut().zip(&probs).zip(&target)
                        {
                            *gp += g[0] * (p - t);
                        }
                    }
                }
                Op::Volume { parts, eps } => {
                    let v = self.nodes[id].value[0];
                    if v > 0.0 {
                        let cols: Vec<Vec<f64>> =
                            parts.iter().map(|&p| self.nodes[p].value.clone()).collect();
                        let a = Matrix::from_columns(&cols).expect("validated");
                        let gmat = numeric::gram(&a).expect("nonempty");
                        let inv = numeric::inverse_regularized(&gmat, eps)
                            .expect("gram plus eps shift is positive definite");
                        let scaled = numeric::matmul(&a, &inv).expect("shapes agree");
                        for (j, &p) in parts.iter().enumerate() {
                            if self.needs(p) {
                                let gp = &mut self.nodes[p].grad;
                                for (i, gpi) in gp.iter_mut().enumerate() {
                                    *gpi += g[0] * v * scaled.get(i, j);
                                }
                            }
                        }
                    }
                }
                Op::StackScalars { parts } => {
                    for (i, p) in parts.into_iter().enumerate() {
                        if self.needs(p) {
                            self.nodes[p].grad[0] += g[i];
                        }
                    }
                }
                Op::SumScalars { parts, scale } => {
                    for p in parts {
                        if self.needs(p) {
                            self.nodes[p].grad[0] += scale * g[0];
                        }
                    }
                }
                Op::Gather { x, idx } => {
                    if self.needs(x) {
                        for (i, &src) in idx.iter().enumerate() {
                            self.nodes[x].grad[src] += g[i];
                        }
                    }
                }
                Op::PoolBins { x, bins } => {
                    if self.needs(x) {
                        let n = self.nodes[x].value.len();
                        for (b, (start, width)) in bin_segments(n, bins).enumerate() {
                            let share = g[b] / width as f64;
                            for gp in &mut self.nodes[x].grad[start..start + width] {
                                *gp += share;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(start, width)` of each pooling bin: `n/bins` wide, with the remainder
/// distributed one element at a time to the leading bins.
pub fn bin_segments(n: usize, bins: usize) -> impl Iterator<Item = (usize, usize)> {
    let base = n / bins;
    let rem = n % bins;
    let mut start = 0;
    (0..bins).map(move |b| {
        let width = base + usize::from(b < rem);
        let seg = (start, width);
        start += width;
        seg
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{vector_volume, volume_gradient, RepresentationSet};
    use rand::Rng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        crate::rng::stream_rng(seed, "autodiff-tests", 0)
    }

    #[test]
    fn bin_segments_distribute_remainder_to_leading_bins() {
        let segs: Vec<_> = bin_segments(10, 4).collect();
        assert_eq!(segs, vec![(0, 3), (3, 3), (6, 2), (8, 2)]);
        let segs: Vec<_> = bin_segments(8, 4).collect();
        assert_eq!(segs, vec![(0, 2), (2, 2), (4, 2), (6, 2)]);
    }

    /// Finite-difference check of a scalar graph against tape gradients for
    /// a trainable leaf vector.
    fn fd_check<F>(build: F, x0: &[f64], tol: f64)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut tape = Tape::new();
        let leaf = tape.leaf_vec(x0, true);
        let loss = build(&mut tape, leaf);
        tape.backward(loss);
        let analytic = tape.grad(leaf).to_vec();
        let report = numeric::grad_check(
            |x| {
                let mut t = Tape::new();
                let l = t.leaf_vec(x, true);
                let loss = build(&mut t, l);
                t.scalar(loss)
            },
            x0,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < tol,
            "rel err {} over tolerance {tol}",
            report.max_rel_err
        );
    }

    #[test]
    fn dense_chain_gradients_match_finite_differences() {
        let mut r = rng(1);
        let w = Matrix::new(3, 4, (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let b: Vec<f64> = (0..3).map(|_| r.random_range(-0.5..0.5)).collect();
        let x0: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        fd_check(
            |tape, leaf| {
                let wn = tape.leaf_matrix(&w, false);
                let bn = tape.constant_vec(&b);
                let h = tape.matvec(wn, leaf);
                let h = tape.add(h, bn);
                let h = tape.gelu(h);
                let h = tape.normalize(h);
                tape.cross_entropy_label(h, 1)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn matrix_leaf_gradients_match_finite_differences() {
        let mut r = rng(2);
        let x: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let build = |tape: &mut Tape, wleaf: NodeId| {
            let xn = tape.constant_vec(&x);
            let h = tape.matvec(wleaf, xn);
            let h = tape.gelu(h);
            tape.cross_entropy_label(h, 0)
        };
        // drive matrix leaves through a vector-leaf harness by reshaping
        let mut tape = Tape::new();
        let wmat = Matrix::new(2, 4, w0.clone()).unwrap();
        let wn = tape.leaf_matrix(&wmat, true);
        let loss = build(&mut tape, wn);
        tape.backward(loss);
        let analytic = tape.grad(wn).to_vec();
        let report = numeric::grad_check(
            |w| {
                let mut t = Tape::new();
                let wn = t.leaf_matrix(&Matrix::new(2, 4, w.to_vec()).unwrap(), true);
                let loss = build(&mut t, wn);
                t.scalar(loss)
            },
            &w0,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn volume_node_matches_pure_volume_and_closed_form_gradient() {
        let mut r = rng(3);
        let dim = 5;
        let vectors: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let set = RepresentationSet::new(vectors.clone()).unwrap();

        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = vectors.iter().map(|v| tape.leaf_vec(v, true)).collect();
        let vol = tape.volume(&leaves, 1e-8);
        assert!((tape.scalar(vol) - vector_volume(&set)).abs() < 1e-12);

        tape.backward(vol);
        let closed = volume_gradient(&set, 1e-8).unwrap();
        for (leaf, want) in leaves.iter().zip(&closed) {
            for (g, w) in tape.grad(*leaf).iter().zip(want) {
                assert!((g - w).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pooling_pipeline_gradients_match_finite_differences() {
        let mut r = rng(4);
        let z0: Vec<f64> = (0..8).map(|_| r.random_range(-2.0..2.0)).collect();
        // fixed descending permutation and a fixed pooled target
        let mut idx: Vec<usize> = (0..8).collect();
        idx.sort_by(|&a, &b| z0[b].partial_cmp(&z0[a]).unwrap().then(a.cmp(&b)));
        let target = numeric::softmax(&[0.5, -0.2, 0.1, 0.9]).unwrap();
        fd_check(
            |tape, leaf| {
                let sorted = tape.gather(leaf, idx.clone());
                let pooled = tape.pool_bins(sorted, 4);
                tape.kl_to_softmax(pooled, target.clone())
            },
            &z0,
            1e-6,
        );
    }

    #[test]
    fn stack_and_sum_route_gradients() {
        let x0 = vec![0.4, -0.7, 1.1];
        fd_check(
            |tape, leaf| {
                let a = tape.slice(leaf, 0, 1);
                let b = tape.slice(leaf, 1, 1);
                let c = tape.slice(leaf, 2, 1);
                let stacked = tape.stack_scalars(&[a, b, c]);
                let ce = tape.cross_entropy_label(stacked, 2);
                let extra = tape.sum_scalars(&[a, c], 0.25);
                tape.axpy(ce, extra, 0.5)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn degenerate_normalize_emits_e1_and_no_gradient() {
        let mut tape = Tape::new();
        let leaf = tape.leaf_vec(&[0.0, 0.0, 0.0], true);
        let y = tape.normalize(leaf);
        assert_eq!(tape.value(y), &[1.0, 0.0, 0.0]);
        let loss = tape.cross_entropy_label(y, 0);
        tape.backward(loss);
        assert!(tape.grad(leaf).iter().all(|&g| g == 0.0));
    }
}
