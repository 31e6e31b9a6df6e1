//! Dense building blocks: LSTM cells, the bidirectional composition
//! function, the action perceptron, the output softmax and masked
//! categorical sampling.
//!
//! Every block holds only [`ParamId`]s; the arrays live in a [`ParamSet`]
//! and are read through a [`Tape`] so that gradients can be recovered.

use crate::params::{ParamId, ParamSet};
use crate::tape::{masked_softmax, NodeId, Tape};
use rand::Rng;

/// Default half-width of the uniform weight initializer.
pub const INIT_SCALE: f64 = 0.08;

/// `(h, c)` of one LSTM state, as tape nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, dim: usize) -> Self {
        Self {
            h: tape.zeros(dim),
            c: tape.zeros(dim),
        }
    }
}

/// A single LSTM cell. Gate rows are stacked in the order input, forget,
/// candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let wx = params.add_uniform(
            &format!("{prefix}.wx"),
            vec![4 * hidden, input_dim],
            INIT_SCALE,
            rng,
        );
        let wh = params.add_uniform(
            &format!("{prefix}.wh"),
            vec![4 * hidden, hidden],
            INIT_SCALE,
            rng,
        );
        let b = params.add_zeros(&format!("{prefix}.b"), vec![4 * hidden]);
        Self {
            wx,
            wh,
            b,
            input_dim,
            hidden,
        }
    }

    /// One recurrence step. Returns a fresh state; `prev` is untouched.
    pub fn step(&self, tape: &mut Tape, prev: LstmState, input: NodeId) -> LstmState {
        let d = self.hidden;
        assert_eq!(tape.value(input).len(), self.input_dim, "lstm input shape");
        assert_eq!(tape.value(prev.h).len(), d, "lstm state shape");
        let gates = tape.affine(&[(self.wx, input), (self.wh, prev.h)], Some(self.b));
        let i = tape.slice(gates, 0, d);
        let i = tape.sigmoid(i);
        let f = tape.slice(gates, d, d);
        let f = tape.sigmoid(f);
        let g = tape.slice(gates, 2 * d, d);
        let g = tape.tanh(g);
        let o = tape.slice(gates, 3 * d, d);
        let o = tape.sigmoid(o);
        let kept = tape.mul(f, prev.c);
        let written = tape.mul(i, g);
        let c = tape.add(kept, written);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        LstmState { h, c }
    }
}

/// Bidirectional LSTM over a constituent's children, final states
/// concatenated and projected back to `d` through `tanh`.
#[derive(Debug, Clone, Copy)]
pub struct Composer {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub dim: usize,
}

impl Composer {
    pub fn register<R: Rng>(params: &mut ParamSet, prefix: &str, dim: usize, rng: &mut R) -> Self {
        let fwd = LstmCell::register(params, &format!("{prefix}.fwd"), dim, dim, rng);
        let bwd = LstmCell::register(params, &format!("{prefix}.bwd"), dim, dim, rng);
        let proj_w =
            params.add_uniform(&format!("{prefix}.proj.w"), vec![dim, 2 * dim], INIT_SCALE, rng);
        let proj_b = params.add_zeros(&format!("{prefix}.proj.b"), vec![dim]);
        Self {
            fwd,
            bwd,
            proj_w,
            proj_b,
            dim,
        }
    }

    /// Phrase embedding of an ordered, non-empty child list.
    pub fn compose(&self, tape: &mut Tape, children: &[NodeId]) -> NodeId {
        assert!(!children.is_empty(), "composition of an empty constituent");
        let mut f = LstmState::zeros(tape, self.dim);
        for &c in children {
            f = self.fwd.step(tape, f, c);
        }
        let mut b = LstmState::zeros(tape, self.dim);
        for &c in children.iter().rev() {
            b = self.bwd.step(tape, b, c);
        }
        let both = tape.concat(&[f.h, b.h]);
        let z = tape.affine(&[(self.proj_w, both)], Some(self.proj_b));
        tape.tanh(z)
    }
}

/// One-hidden-layer tanh perceptron scoring {NT, GEN, REDUCE} from the
/// stack summary alone.
#[derive(Debug, Clone, Copy)]
pub struct ActionMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ActionMlp {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: params.add_uniform(&format!("{prefix}.w1"), vec![hidden, dim], INIT_SCALE, rng),
            b1: params.add_zeros(&format!("{prefix}.b1"), vec![hidden]),
            w2: params.add_uniform(&format!("{prefix}.w2"), vec![3, hidden], INIT_SCALE, rng),
            b2: params.add_zeros(&format!("{prefix}.b2"), vec![3]),
        }
    }

    pub fn scores(&self, tape: &mut Tape, stack_summary: NodeId) -> NodeId {
        let z = tape.affine(&[(self.w1, stack_summary)], Some(self.b1));
        let a = tape.tanh(z);
        tape.affine(&[(self.w2, a)], Some(self.b2))
    }
}

/// Softmax perceptron from the stack summary to next-token logits.
#[derive(Debug, Clone, Copy)]
pub struct OutputHead {
    pub w: ParamId,
    pub b: ParamId,
    pub classes: usize,
}

impl OutputHead {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: params.add_uniform(&format!("{prefix}.w"), vec![classes, dim], INIT_SCALE, rng),
            b: params.add_zeros(&format!("{prefix}.b"), vec![classes]),
            classes,
        }
    }

    pub fn logits(&self, tape: &mut Tape, stack_summary: NodeId) -> NodeId {
        tape.affine(&[(self.w, stack_summary)], Some(self.b))
    }

    /// Probabilities over the output classes; strictly positive, sums to 1.
    pub fn distribution(&self, tape: &mut Tape, stack_summary: NodeId) -> Vec<f64> {
        let l = self.logits(tape, stack_summary);
        masked_softmax(tape.value(l), &vec![true; self.classes])
    }
}

/// Outcome of choosing one entry of a masked categorical distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalChoice {
    pub index: usize,
    pub prob: f64,
    pub distribution: Vec<f64>,
}

/// Samples from the softmax over the legal entries of `scores`.
pub fn masked_categorical<R: Rng + ?Sized>(
    scores: &[f64],
    legal: &[bool],
    rng: &mut R,
) -> CategoricalChoice {
    assert!(legal.iter().any(|&m| m), "no legal action to sample");
    let distribution = masked_softmax(scores, legal);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut index = None;
    for (k, &p) in distribution.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        acc += p;
        index = Some(k);
        if u < acc {
            break;
        }
    }
    // Rounding can leave `acc` a hair below 1; the last legal entry takes it.
    let index = index.expect("at least one legal entry");
    CategoricalChoice {
        index,
        prob: distribution[index],
        distribution,
    }
}

/// Highest-probability legal entry; ties go to the lowest index.
pub fn masked_argmax(scores: &[f64], legal: &[bool]) -> CategoricalChoice {
    assert!(legal.iter().any(|&m| m), "no legal action to choose");
    let distribution = masked_softmax(scores, legal);
    let mut index = legal.iter().position(|&m| m).unwrap();
    for k in 0..distribution.len() {
        if legal[k] && distribution[k] > distribution[index] {
            index = k;
        }
    }
    CategoricalChoice {
        index,
        prob: distribution[index],
        distribution,
    }
}
