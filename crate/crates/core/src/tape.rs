//! A small reverse-mode tape over vector-valued nodes.
//!
//! The operator set is fixed to what the recurrent grammar needs: affine
//! maps read directly from a [`ParamSet`], elementwise gates, slicing and
//! concatenation, dot-product attention, masked log-softmax and the coverage
//! penalty. Nodes are appended in evaluation order, so a reverse sweep over
//! the node list is a valid topological order for backpropagation.
//!
//! Node values are never mutated after creation. Rolling a stack back to an
//! earlier prefix therefore only needs the earlier node ids.

use crate::objective;
use crate::params::{GradientStore, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    ParamRow(ParamId, usize),
    Affine {
        terms: Vec<(ParamId, NodeId)>,
        bias: Option<ParamId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Slice {
        src: NodeId,
        start: usize,
    },
    Concat(Vec<NodeId>),
    Dot(NodeId, NodeId),
    Softmax(NodeId),
    WeightedSum {
        weights: NodeId,
        items: Vec<NodeId>,
    },
    /// log p[index] under the softmax restricted to the legal entries.
    LogProb {
        logits: NodeId,
        probs: Vec<f64>,
        index: usize,
    },
    Coverage {
        columns: Vec<NodeId>,
    },
    StopGradient,
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Records a forward computation against a borrowed parameter set.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the entries where `mask` is true; masked entries are exactly 0.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Vec<f64> {
    assert_eq!(scores.len(), mask.len());
    assert!(mask.iter().any(|&m| m), "softmax with no legal entry");
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "node is not a scalar");
        v[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant with no gradient path.
    pub fn input(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.input(vec![0.0; len])
    }

    /// A whole parameter array as a vector.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let v = self.params.get(id).data().to_vec();
        self.push(v, Op::Param(id))
    }

    /// One row of a 2-D parameter array (an embedding lookup).
    pub fn param_row(&mut self, id: ParamId, row: usize) -> NodeId {
        let v = self.params.get(id).row(row).to_vec();
        self.push(v, Op::ParamRow(id, row))
    }

    /// `Σ W_t · x_t + b`.
    pub fn affine(&mut self, terms: &[(ParamId, NodeId)], bias: Option<ParamId>) -> NodeId {
        let rows = match (terms.first(), bias) {
            (Some((w, _)), _) => self.params.get(*w).rows(),
            (None, Some(b)) => self.params.get(b).len(),
            (None, None) => panic!("affine with no terms"),
        };
        let mut out = match bias {
            Some(b) => {
                let b = self.params.get(b).data();
                assert_eq!(b.len(), rows, "bias shape mismatch");
                b.to_vec()
            }
            None => vec![0.0; rows],
        };
        for &(w, x) in terms {
            let w = self.params.get(w);
            let x = &self.nodes[x.0].value;
            assert_eq!(w.rows(), rows, "affine row mismatch for {}", w.name());
            assert_eq!(w.cols(), x.len(), "affine input mismatch for {}", w.name());
            for (r, o) in out.iter_mut().enumerate() {
                *o += w.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        self.push(
            out,
            Op::Affine {
                terms: terms.to_vec(),
                bias,
            },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(v, Op::Tanh(a))
    }

    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(src)[start..start + len].to_vec();
        self.push(v, Op::Slice { src, start })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let v = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.len(), y.len(), "dot shape mismatch");
        let v = x.iter().zip(y).map(|(p, q)| p * q).sum();
        self.push(vec![v], Op::Dot(a, b))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = masked_softmax(x, &vec![true; x.len()]);
        self.push(v, Op::Softmax(a))
    }

    /// `Σ_i weights[i] · items[i]`.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> NodeId {
        let w = self.value(weights);
        assert_eq!(w.len(), items.len(), "weight count mismatch");
        assert!(!items.is_empty(), "weighted sum of nothing");
        let dim = self.value(items[0]).len();
        let mut out = vec![0.0; dim];
        for (&wi, &item) in w.iter().zip(items) {
            let v = self.value(item);
            assert_eq!(v.len(), dim);
            for (o, x) in out.iter_mut().zip(v) {
                *o += wi * x;
            }
        }
        self.push(
            out,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        )
    }

    /// Scalar `log p[index]` with `p = masked_softmax(logits, mask)`.
    pub fn log_prob(&mut self, logits: NodeId, mask: &[bool], index: usize) -> NodeId {
        let probs = masked_softmax(self.value(logits), mask);
        assert!(probs[index] > 0.0, "log_prob of an illegal entry");
        let v = probs[index].ln();
        self.push(
            vec![v],
            Op::LogProb {
                logits,
                probs,
                index,
            },
        )
    }

    /// Log-probability of `index` under an unmasked softmax.
    pub fn log_softmax_at(&mut self, logits: NodeId, index: usize) -> NodeId {
        let n = self.value(logits).len();
        self.log_prob(logits, &vec![true; n], index)
    }

    /// Coverage penalty over attention columns (each column is a vector over
    /// encoder nodes).
    pub fn coverage(&mut self, columns: &[NodeId]) -> NodeId {
        let cols: Vec<&[f64]> = columns.iter().map(|&c| self.value(c)).collect();
        let v = objective::coverage_from_columns(&cols);
        self.push(
            vec![v],
            Op::Coverage {
                columns: columns.to_vec(),
            },
        )
    }

    /// Identity in the forward direction, blocks gradient flow.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).to_vec();
        self.push(v, Op::StopGradient)
    }

    /// Backpropagates `Σ seed · node` (scalar nodes only) and adds the
    /// parameter gradients into `grads`.
    pub fn backward(&self, seeds: &[(NodeId, f64)], grads: &mut GradientStore) {
        let Some(top) = seeds.iter().map(|(n, _)| n.0).max() else {
            return;
        };
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; top + 1];
        for &(n, s) in seeds {
            assert_eq!(self.nodes[n.0].value.len(), 1, "seeded node is not scalar");
            accumulate(&mut adj, n, &[s]);
        }
        for i in (0..=top).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::StopGradient => {}
                Op::Param(p) => {
                    add_into(grads.get_mut(*p), &g);
                }
                Op::ParamRow(p, r) => {
                    let c = g.len();
                    add_into(&mut grads.get_mut(*p)[r * c..(r + 1) * c], &g);
                }
                Op::Affine { terms, bias } => {
                    if let Some(b) = bias {
                        add_into(grads.get_mut(*b), &g);
                    }
                    for &(w, x) in terms {
                        let wa = self.params.get(w);
                        let cols = wa.cols();
                        let xv = &self.nodes[x.0].value;
                        {
                            let gw = grads.get_mut(w);
                            for (r, &gr) in g.iter().enumerate() {
                                if gr == 0.0 {
                                    continue;
                                }
                                let row = &mut gw[r * cols..(r + 1) * cols];
                                for (o, &xc) in row.iter_mut().zip(xv) {
                                    *o += gr * xc;
                                }
                            }
                        }
                        if self.needs_grad(x) {
                            let mut gx = vec![0.0; cols];
                            for (r, &gr) in g.iter().enumerate() {
                                if gr == 0.0 {
                                    continue;
                                }
                                for (o, &wrc) in gx.iter_mut().zip(wa.row(r)) {
                                    *o += gr * wrc;
                                }
                            }
                            accumulate(&mut adj, x, &gx);
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, &ga);
                    accumulate(&mut adj, *b, &gb);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, &node.value, |gi, y| gi * y * (1.0 - y));
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &node.value, |gi, y| gi * (1.0 - y * y));
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Slice { src, start } => {
                    let mut gs = vec![0.0; self.value(*src).len()];
                    gs[*start..*start + g.len()].copy_from_slice(&g);
                    accumulate(&mut adj, *src, &gs);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        accumulate(&mut adj, p, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Dot(a, b) => {
                    let ga: Vec<f64> = self.value(*b).iter().map(|y| g[0] * y).collect();
                    let gb: Vec<f64> = self.value(*a).iter().map(|x| g[0] * x).collect();
                    accumulate(&mut adj, *a, &ga);
                    accumulate(&mut adj, *b, &gb);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let inner: f64 = g.iter().zip(p).map(|(x, y)| x * y).sum();
                    let ga = zip_map(&g, p, |gi, pi| pi * (gi - inner));
                    accumulate(&mut adj, *a, &ga);
                }
                Op::WeightedSum { weights, items } => {
                    let w = self.value(*weights);
                    let gw: Vec<f64> = items
                        .iter()
                        .map(|&it| self.value(it).iter().zip(&g).map(|(x, y)| x * y).sum())
                        .collect();
                    for (&wi, &it) in w.iter().zip(items) {
                        let gi: Vec<f64> = g.iter().map(|x| wi * x).collect();
                        accumulate(&mut adj, it, &gi);
                    }
                    accumulate(&mut adj, *weights, &gw);
                }
                Op::LogProb {
                    logits,
                    probs,
                    index,
                } => {
                    let gl: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(k, &p)| g[0] * (if k == *index { 1.0 } else { 0.0 } - p))
                        .collect();
                    accumulate(&mut adj, *logits, &gl);
                }
                Op::Coverage { columns } => {
                    let cols: Vec<&[f64]> = columns.iter().map(|&c| self.value(c)).collect();
                    let gc = objective::coverage_gradient_columns(&cols);
                    for (&c, gcol) in columns.iter().zip(gc) {
                        let scaled: Vec<f64> = gcol.iter().map(|x| g[0] * x).collect();
                        accumulate(&mut adj, c, &scaled);
                    }
                }
            }
        }
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        !matches!(self.nodes[id.0].op, Op::Input | Op::StopGradient)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "elementwise shape mismatch");
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut adj[id.0] {
        Some(v) => add_into(v, g),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Array;

    fn set() -> (ParamSet, ParamId, ParamId) {
        let mut s = ParamSet::new();
        let w = s.add(Array::new("w", vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        let b = s.add(Array::new("b", vec![2], vec![0.05, -0.05]));
        (s, w, b)
    }

    #[test]
    fn affine_forward_and_backward() {
        let (s, w, b) = set();
        let mut t = Tape::new(&s);
        let x = t.input(vec![1.0, 2.0, 3.0]);
        let y = t.affine(&[(w, x)], Some(b));
        let v = t.value(y).to_vec();
        assert!((v[0] - (0.1 - 0.4 + 0.9 + 0.05)).abs() < 1e-15);
        let y0 = t.slice(y, 0, 1);
        let mut g = GradientStore::zeros_like(&s);
        t.backward(&[(y0, 2.0)], &mut g);
        assert_eq!(g.get(w), &[2.0, 4.0, 6.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.get(b), &[2.0, 0.0]);
    }

    #[test]
    fn stop_gradient_blocks() {
        let (s, w, b) = set();
        let mut t = Tape::new(&s);
        let bias = t.param(b);
        let stopped = t.stop_gradient(bias);
        let x = t.input(vec![1.0, 1.0, 1.0]);
        let y = t.affine(&[(w, x)], None);
        let z = t.dot(y, stopped);
        let mut g = GradientStore::zeros_like(&s);
        t.backward(&[(z, 1.0)], &mut g);
        assert!(g.is_all_zero(b));
        assert!(!g.is_all_zero(w));
    }

    #[test]
    fn masked_softmax_zeroes_illegal() {
        let p = masked_softmax(&[1.0, 2.0, 3.0], &[true, false, true]);
        assert_eq!(p[1], 0.0);
        let s = 1f64.exp() / (1f64.exp() + 3f64.exp());
        assert!((p[0] - s).abs() < 1e-15);
        assert!((p[0] + p[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_prob_single_legal_has_zero_gradient() {
        let (s, _, b) = set();
        let mut t = Tape::new(&s);
        let l = t.param(b);
        let lp = t.log_prob(l, &[true, false], 0);
        assert_eq!(t.scalar(lp), 0.0);
        let mut g = GradientStore::zeros_like(&s);
        t.backward(&[(lp, 1.0)], &mut g);
        assert!(g.is_all_zero(b));
    }
}
