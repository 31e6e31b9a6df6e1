//! Encoder and decoder passes over the stack machine.
//!
//! Both sides run the same loop: read the stack summary, score the three
//! transitions with the action perceptron, pick one (sampled, greedy or
//! forced), and apply it. They differ only in what an NT pushes: the
//! encoder pushes the constant `x_enc`; the decoder pushes an attention
//! mixture of the encoder's phrase embeddings, keyed by the decoder's stack
//! summary just before the push.

use crate::model::{ModelParameters, Side, SideParams};
use crate::nn::{masked_argmax, masked_categorical, CategoricalChoice};
use crate::stack::{
    action_budget, legal_transitions, Action, BufferCursor, ChildStats, Limits, StackState,
};
use crate::tape::{NodeId, Tape};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// How the next transition is chosen.
pub enum Policy<'a> {
    Sample(&'a mut dyn rand::RngCore),
    Argmax,
    /// Replay a fixed action sequence; every action must be legal.
    Forced(&'a [Action]),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassOptions {
    pub limits: Limits,
    /// When false, the next-character loss sees the stack summary through a
    /// stop-gradient, so its gradient reaches only the output softmax.
    pub lm_backprop_into_stack: bool,
}

/// One executed transition.
#[derive(Debug, Clone)]
pub struct ActionRecord {
    pub action: Action,
    /// Character ingested (teacher-forced) or emitted (free-running) by GEN.
    pub token: Option<usize>,
    pub legal: [bool; 3],
    pub distribution: [f64; 3],
    /// Probability of the chosen action.
    pub prob: f64,
    /// Tape node holding `log prob`.
    pub log_prob: NodeId,
    pub stack_summary: Vec<f64>,
    /// Next-character loss; nonzero only on teacher-forced GEN.
    pub lm_loss: f64,
    /// Tape node holding `log p(ground truth)` (the negated loss).
    pub lm_log_prob: Option<NodeId>,
    /// Tree reward, filled in by the objective.
    pub reward: f64,
    /// GEN transitions among actions 1..=k.
    pub gen_count: usize,
    pub child_stats: Option<ChildStats>,
    pub closes_root: bool,
}

impl ActionRecord {
    /// More than one transition was legal, so the choice carries a score
    /// function gradient.
    pub fn is_stochastic(&self) -> bool {
        self.legal.iter().filter(|&&m| m).count() > 1
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub side: Side,
    pub records: Vec<ActionRecord>,
    pub tree: TreeNode,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<Action> {
        self.records.iter().map(|r| r.action).collect()
    }

    pub fn gen_count(&self) -> usize {
        self.records.last().map_or(0, |r| r.gen_count)
    }

    pub fn lm_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.action == Action::Gen)
            .map(|r| r.lm_loss)
            .collect()
    }

    pub fn lm_total(&self) -> f64 {
        self.records.iter().map(|r| r.lm_loss).sum()
    }

    /// Deepest nesting of constituents in the tree.
    pub fn depth(&self) -> usize {
        self.tree.depth()
    }
}

/// A parsed tree over buffer positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        position: usize,
        token: usize,
    },
    Constituent {
        span: (usize, usize),
        children: Vec<TreeNode>,
    },
}

impl TreeNode {
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Constituent { children, .. } => {
                1 + children.iter().map(TreeNode::depth).max().unwrap_or(0)
            }
        }
    }

    /// Leaves left to right.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            TreeNode::Leaf { token, .. } => out.push(*token),
            TreeNode::Constituent { children, .. } => {
                children.iter().for_each(|c| c.collect_leaves(out))
            }
        }
    }

    /// Every constituent's span covers exactly its children, which are
    /// contiguous and non-empty.
    pub fn is_well_formed(&self) -> bool {
        fn check(n: &TreeNode, start: usize) -> Option<usize> {
            match n {
                TreeNode::Leaf { position, .. } => (*position == start).then_some(start + 1),
                TreeNode::Constituent { span, children } => {
                    if children.is_empty() || span.0 != start {
                        return None;
                    }
                    let mut pos = start;
                    for c in children {
                        pos = check(c, pos)?;
                    }
                    (pos == span.1).then_some(pos)
                }
            }
        }
        matches!(self, TreeNode::Constituent { .. }) && check(self, 0).is_some()
    }

    /// Bracketed rendering, e.g. `((ab)c)`.
    pub fn bracketed(&self, render: &dyn Fn(usize) -> String) -> String {
        match self {
            TreeNode::Leaf { token, .. } => render(*token),
            TreeNode::Constituent { children, .. } => {
                let inner: String = children.iter().map(|c| c.bracketed(render)).collect();
                format!("({inner})")
            }
        }
    }
}

/// A closed constituent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Constituent {
    /// Spine top right after the new-nonterminal token was pushed.
    pub stack_repr: NodeId,
    pub phrase: NodeId,
    pub span: (usize, usize),
    pub attention_event: Option<usize>,
}

/// Encoder nonterminal nodes in REDUCE order, root last.
#[derive(Debug, Clone, Default)]
pub struct EncoderNodeTable {
    pub nodes: Vec<Constituent>,
}

impl EncoderNodeTable {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionColumn {
    /// Index of the decoder NT record that produced this column.
    pub action_index: usize,
    pub weights: Vec<f64>,
    pub node: Option<NodeId>,
}

/// Rows are encoder nodes, columns are decoder NT events.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionMatrix {
    rows: usize,
    columns: Vec<AttentionColumn>,
}

impl AttentionMatrix {
    pub fn new(rows: usize) -> Self {
        Self {
            rows,
            columns: Vec::new(),
        }
    }

    /// Builds a matrix from row-major values (no tape nodes attached).
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let columns = (0..cols)
            .map(|j| AttentionColumn {
                action_index: j,
                weights: rows.iter().map(|r| r[j]).collect(),
                node: None,
            })
            .collect();
        Self {
            rows: rows.len(),
            columns,
        }
    }

    pub fn push(&mut self, column: AttentionColumn) {
        assert_eq!(column.weights.len(), self.rows, "attention column length");
        self.columns.push(column);
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[AttentionColumn] {
        &self.columns
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.columns[j].weights[i]
    }

    pub fn column_nodes(&self) -> Option<Vec<NodeId>> {
        self.columns.iter().map(|c| c.node).collect()
    }
}

/// `α = softmax_i(s_i^enc · s_dec)`, `x = Σ_i α_i h_i^enc`. Returns the
/// tape nodes of `α` and `x`.
pub fn structural_attention(
    tape: &mut Tape,
    decoder_summary: NodeId,
    nodes: &EncoderNodeTable,
) -> (NodeId, NodeId) {
    assert!(!nodes.is_empty(), "attention over an empty encoder table");
    let dots: Vec<NodeId> = nodes
        .nodes
        .iter()
        .map(|n| tape.dot(n.stack_repr, decoder_summary))
        .collect();
    let logits = tape.concat(&dots);
    let alpha = tape.softmax(logits);
    let phrases: Vec<NodeId> = nodes.nodes.iter().map(|n| n.phrase).collect();
    let x = tape.weighted_sum(alpha, &phrases);
    (alpha, x)
}

/// Result of one pass.
#[derive(Debug, Clone)]
pub struct PassOutput {
    pub trajectory: Trajectory,
    /// Closed constituents in REDUCE order.
    pub constituents: Vec<Constituent>,
    /// Attention columns (decoder only).
    pub attention: AttentionMatrix,
    /// Tokens consumed or emitted by GEN, in order.
    pub tokens: Vec<usize>,
    /// Free-running output hit its cap before the end token.
    pub truncated: bool,
}

impl PassOutput {
    pub fn node_table(&self) -> EncoderNodeTable {
        EncoderNodeTable {
            nodes: self.constituents.clone(),
        }
    }
}

enum NtSource<'n> {
    Constant(NodeId),
    Attention(&'n EncoderNodeTable),
}

/// Runs the encoder over `source` (teacher-forced; the source is known).
pub fn encode_pass(
    tape: &mut Tape,
    model: &ModelParameters,
    source: &[usize],
    policy: Policy,
    options: &PassOptions,
) -> Result<(PassOutput, EncoderNodeTable)> {
    assert!(!source.is_empty(), "empty source sentence");
    let x_enc = tape.param(model.x_enc);
    let buffer = BufferCursor::teacher_forced(source.to_vec());
    let out = run_pass(
        tape,
        &model.encoder,
        Side::Encoder,
        buffer,
        policy,
        options,
        NtSource::Constant(x_enc),
    )?;
    let table = out.node_table();
    Ok((out, table))
}

/// Runs the decoder. With `target = Some(ids)` the pass is teacher-forced
/// over `ids` followed by the end token; with `None` it free-runs, emitting
/// the most likely character at each GEN until the end token or `cap`.
pub fn decode_pass(
    tape: &mut Tape,
    model: &ModelParameters,
    nodes: &EncoderNodeTable,
    target: Option<&[usize]>,
    cap: usize,
    policy: Policy,
    options: &PassOptions,
) -> Result<PassOutput> {
    let end = model.config().end_token();
    let buffer = match target {
        Some(t) => {
            let mut toks = t.to_vec();
            toks.push(end);
            BufferCursor::teacher_forced(toks)
        }
        None => BufferCursor::free_running(cap, end),
    };
    run_pass(
        tape,
        &model.decoder,
        Side::Decoder,
        buffer,
        policy,
        options,
        NtSource::Attention(nodes),
    )
}

fn choose(policy: &mut Policy, k: usize, scores: &[f64], legal: &[bool; 3]) -> Result<CategoricalChoice> {
    match policy {
        Policy::Sample(rng) => Ok(masked_categorical(scores, legal, &mut **rng)),
        Policy::Argmax => Ok(masked_argmax(scores, legal)),
        Policy::Forced(seq) => {
            let a = *seq.get(k).ok_or(Error::ForcedSequenceTooShort)?;
            if !legal[a.index()] {
                return Err(Error::IllegalForcedAction {
                    index: k,
                    action: a.to_string(),
                });
            }
            let mut c = masked_argmax(scores, legal);
            c.index = a.index();
            c.prob = c.distribution[c.index];
            Ok(c)
        }
    }
}

fn run_pass(
    tape: &mut Tape,
    side_params: &SideParams,
    side: Side,
    mut buffer: BufferCursor,
    mut policy: Policy,
    options: &PassOptions,
    nt_source: NtSource,
) -> Result<PassOutput> {
    let dim = side_params.stack.hidden;
    let budget = action_budget(buffer.capacity());
    let mut stack = StackState::new(tape, dim);
    let mut records: Vec<ActionRecord> = Vec::new();
    let mut open_reprs: Vec<NodeId> = Vec::new();
    let mut open_trees: Vec<Vec<TreeNode>> = Vec::new();
    let mut constituents = Vec::new();
    let mut attention = match nt_source {
        NtSource::Constant(_) => AttentionMatrix::new(0),
        NtSource::Attention(nodes) => AttentionMatrix::new(nodes.len()),
    };
    let mut gens = 0usize;
    let tree = loop {
        if records.len() >= budget {
            return Err(Error::ActionBudgetExhausted { side, budget });
        }
        let k = records.len();
        let s = stack.summary();
        let mut legal = legal_transitions(&stack, &buffer, &options.limits);
        if matches!(policy, Policy::Argmax) {
            // A deterministic policy cannot be resampled, so keep enough
            // actions in reserve to consume the rest of the buffer and close
            // every open constituent, including the one an NT would open.
            let reserve = buffer.capacity() - buffer.cursor() + stack.depth() + 1;
            if k + 1 + reserve > budget {
                legal[Action::Nt.index()] = false;
            }
        }
        let scores = side_params.policy.scores(tape, s);
        let choice = choose(&mut policy, k, tape.value(scores), &legal)?;
        let log_prob = tape.log_prob(scores, &legal, choice.index);
        let action = Action::from_index(choice.index);
        let mut record = ActionRecord {
            action,
            token: None,
            legal,
            distribution: [choice.distribution[0], choice.distribution[1], choice.distribution[2]],
            prob: choice.prob,
            log_prob,
            stack_summary: tape.value(s).to_vec(),
            lm_loss: 0.0,
            lm_log_prob: None,
            reward: 0.0,
            gen_count: gens,
            child_stats: None,
            closes_root: false,
        };
        let mut finished = None;
        match action {
            Action::Nt => {
                let (x, event) = match &nt_source {
                    NtSource::Constant(x) => (*x, None),
                    NtSource::Attention(nodes) => {
                        let (alpha, x) = structural_attention(tape, s, nodes);
                        attention.push(AttentionColumn {
                            action_index: k,
                            weights: tape.value(alpha).to_vec(),
                            node: Some(alpha),
                        });
                        (x, Some(attention.cols() - 1))
                    }
                };
                stack.apply_nt(tape, &side_params.stack, x, &buffer, event);
                open_reprs.push(stack.summary());
                open_trees.push(Vec::new());
            }
            Action::Gen => {
                let lm_input = if options.lm_backprop_into_stack {
                    s
                } else {
                    tape.stop_gradient(s)
                };
                let logits = side_params.output.logits(tape, lm_input);
                let token = match buffer.peek() {
                    Some(gt) => {
                        let lp = tape.log_softmax_at(logits, gt);
                        record.lm_loss = -tape.scalar(lp);
                        record.lm_log_prob = Some(lp);
                        gt
                    }
                    None => argmax(tape.value(logits)),
                };
                let position = buffer.cursor();
                let emb = tape.param_row(side_params.char_embeddings, token);
                stack.apply_gen(tape, &side_params.stack, emb, &mut buffer, token);
                gens += 1;
                record.gen_count = gens;
                record.token = Some(token);
                open_trees
                    .last_mut()
                    .expect("GEN inside a constituent")
                    .push(TreeNode::Leaf { position, token });
            }
            Action::Reduce => {
                let red = stack.apply_reduce(tape, &side_params.stack, &side_params.composer, &buffer);
                let repr = open_reprs.pop().expect("open constituent");
                let children = open_trees.pop().expect("open constituent");
                let node = TreeNode::Constituent {
                    span: red.span,
                    children,
                };
                constituents.push(Constituent {
                    stack_repr: repr,
                    phrase: red.phrase,
                    span: red.span,
                    attention_event: red.frame.attention_event,
                });
                record.child_stats = Some(red.stats);
                record.closes_root = red.is_root;
                match open_trees.last_mut() {
                    Some(parent) => parent.push(node),
                    None => finished = Some(node),
                }
            }
        }
        records.push(record);
        if let Some(t) = finished {
            break t;
        }
    };
    let truncated = !buffer.is_teacher_forced() && !buffer.is_closed();
    Ok(PassOutput {
        trajectory: Trajectory {
            side,
            records,
            tree,
        },
        constituents,
        attention,
        tokens: buffer.consumed().to_vec(),
        truncated,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Convenience: draws an RNG-driven policy from a seed.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::LstmState;
    use crate::stack::Action::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(d: usize, seed: u64) -> ModelParameters {
        let mut m = ModelParameters::new(
            ModelConfig {
                hidden: d,
                source_vocab: 6,
                target_vocab: 5,
            },
            seed,
        );
        // Larger weights than the default init so outputs are not near-uniform.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let set = m.params_mut();
        for id in set.ids().collect::<Vec<_>>() {
            for x in set.get_mut(id).data_mut() {
                *x = rng.gen_range(-0.6..0.6);
            }
        }
        m
    }

    fn opts() -> PassOptions {
        PassOptions::default()
    }

    #[test]
    fn forced_flat_encoder_has_one_node() {
        let m = model(4, 1);
        let mut t = Tape::new(m.params());
        let (out, table) =
            encode_pass(&mut t, &m, &[1, 2], Policy::Forced(&[Nt, Gen, Gen, Reduce]), &opts()).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table.nodes[0].span, (0, 2));
        assert_eq!(out.trajectory.gen_count(), 2);
        assert!(out.trajectory.tree.is_well_formed());
        assert_eq!(out.trajectory.tree.leaves(), vec![1, 2]);
    }

    #[test]
    fn illegal_forced_action_is_rejected() {
        let m = model(4, 1);
        let mut t = Tape::new(m.params());
        let err = encode_pass(&mut t, &m, &[1], Policy::Forced(&[Gen]), &opts()).unwrap_err();
        assert!(matches!(err, Error::IllegalForcedAction { index: 0, .. }));
    }

    #[test]
    fn sampled_encoder_consumes_whole_source_deterministically() {
        let m = model(5, 2);
        let src = [1, 2, 3, 4, 5, 1, 2];
        let run = |seed| {
            let mut t = Tape::new(m.params());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            encode_pass(&mut t, &m, &src, Policy::Sample(&mut rng), &opts()).map(|(out, table)| {
                (out.trajectory.actions(), out.trajectory.gen_count(), table.len(), out.trajectory.tree)
            })
        };
        let mut completed = 0;
        for seed in 0..40 {
            match run(seed) {
                Ok((actions, gens, nodes, tree)) => {
                    completed += 1;
                    assert_eq!(gens, src.len());
                    assert_eq!(nodes, actions.iter().filter(|&&a| a == Nt).count());
                    assert!(tree.is_well_formed());
                    assert_eq!(run(seed).unwrap().0, actions);
                }
                Err(Error::ActionBudgetExhausted { .. }) => assert!(run(seed).is_err()),
                Err(e) => panic!("{e}"),
            }
        }
        assert!(completed >= 10, "only {completed} completed");
    }

    #[test]
    fn attention_single_node_and_symmetric_pair() {
        let m = model(3, 3);
        let mut t = Tape::new(m.params());
        let s = t.input(vec![0.3, -0.1, 0.2]);
        let h0 = t.input(vec![1.0, 2.0, 3.0]);
        let h1 = t.input(vec![-1.0, 0.0, 5.0]);
        let single = EncoderNodeTable {
            nodes: vec![Constituent {
                stack_repr: s,
                phrase: h0,
                span: (0, 1),
                attention_event: None,
            }],
        };
        let q = t.input(vec![0.5, 0.5, 0.5]);
        let (a, x) = structural_attention(&mut t, q, &single);
        assert_eq!(t.value(a), &[1.0]);
        assert_eq!(t.value(x), t.value(h0));

        let mut pair = single.clone();
        pair.nodes.push(Constituent {
            stack_repr: s,
            phrase: h1,
            span: (1, 2),
            attention_event: None,
        });
        let (a, x) = structural_attention(&mut t, q, &pair);
        assert_eq!(t.value(a), &[0.5, 0.5]);
        assert_eq!(t.value(x), &[0.0, 1.0, 4.0]);
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        let m = model(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut rv = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let reprs: Vec<Vec<f64>> = (0..3).map(|_| rv(4)).collect();
        let phrases: Vec<Vec<f64>> = (0..3).map(|_| rv(4)).collect();
        let q = rv(4);
        let mut t = Tape::new(m.params());
        let table = EncoderNodeTable {
            nodes: (0..3)
                .map(|i| Constituent {
                    stack_repr: t.input(reprs[i].clone()),
                    phrase: t.input(phrases[i].clone()),
                    span: (i, i + 1),
                    attention_event: None,
                })
                .collect(),
        };
        let qn = t.input(q.clone());
        let (a, x) = structural_attention(&mut t, qn, &table);
        let dots: Vec<f64> = reprs
            .iter()
            .map(|r| r.iter().zip(&q).map(|(a, b)| a * b).sum())
            .collect();
        let z: f64 = dots.iter().map(|d| d.exp()).sum();
        let alpha: Vec<f64> = dots.iter().map(|d| d.exp() / z).collect();
        for i in 0..3 {
            assert!((t.value(a)[i] - alpha[i]).abs() < 1e-12);
        }
        for k in 0..4 {
            let e: f64 = (0..3).map(|i| alpha[i] * phrases[i][k]).sum();
            assert!((t.value(x)[k] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_on_single_node_encoder() {
        let m = model(4, 5);
        let mut t = Tape::new(m.params());
        let (_, table) =
            encode_pass(&mut t, &m, &[3], Policy::Forced(&[Nt, Gen, Reduce]), &opts()).unwrap();
        let dec = decode_pass(
            &mut t,
            &m,
            &table,
            Some(&[2]),
            0,
            Policy::Forced(&[Nt, Gen, Gen, Reduce]),
            &opts(),
        )
        .unwrap();
        assert_eq!(dec.attention.rows(), 1);
        assert_eq!(dec.attention.cols(), 1);
        assert_eq!(dec.attention.get(0, 0), 1.0);
        assert_eq!(dec.tokens, vec![2, m.config().end_token()]);
    }

    #[test]
    fn decoder_invariants_under_sampling() {
        let m = model(5, 6);
        let src = [1, 2, 3, 4];
        let tgt = [4, 3, 2, 1, 0];
        for seed in 0..15 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new(m.params());
            let (_, table) = encode_pass(&mut t, &m, &src, Policy::Sample(&mut rng), &opts()).unwrap();
            let dec =
                decode_pass(&mut t, &m, &table, Some(&tgt), 0, Policy::Sample(&mut rng), &opts())
                    .unwrap();
            let traj = &dec.trajectory;
            let nts = traj.records.iter().filter(|r| r.action == Nt).count();
            assert_eq!(dec.attention.cols(), nts);
            assert_eq!(traj.gen_count(), tgt.len() + 1);
            for (j, col) in dec.attention.columns().iter().enumerate() {
                assert_eq!(traj.records[col.action_index].action, Nt);
                assert!((col.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                if j > 0 {
                    assert!(col.action_index > dec.attention.columns()[j - 1].action_index);
                }
            }
            for r in &traj.records {
                if r.action == Gen {
                    // Recompute the loss from the stored summary.
                    let mut c = Tape::new(m.params());
                    let s = c.input(r.stack_summary.clone());
                    let p = m.decoder.output.distribution(&mut c, s);
                    assert!((r.lm_loss + p[r.token.unwrap()].ln()).abs() < 1e-12);
                    assert!(r.lm_loss > 0.0);
                } else {
                    assert_eq!(r.lm_loss, 0.0);
                }
            }
        }
    }

    #[test]
    fn encoder_node_repr_is_spine_top_after_push() {
        let m = model(4, 7);
        let mut t = Tape::new(m.params());
        let (out, table) = encode_pass(
            &mut t,
            &m,
            &[1, 2],
            Policy::Forced(&[Nt, Gen, Nt, Gen, Reduce, Reduce]),
            &opts(),
        )
        .unwrap();
        // Node 0 is the inner constituent; it was opened after one GEN.
        let inner = table.nodes[0];
        assert_eq!(inner.span, (1, 2));
        let before = &out.trajectory.records[2].stack_summary;
        let mut c = Tape::new(m.params());
        let h = c.input(before.clone());
        // The cell state is not stored on the record; recompute the prefix.
        let x = c.param(m.x_enc);
        let z = LstmState::zeros(&mut c, 4);
        let s1 = m.encoder.stack.step(&mut c, z, x);
        let e = c.param_row(m.encoder.char_embeddings, 1);
        let s2 = m.encoder.stack.step(&mut c, s1, e);
        assert_eq!(c.value(s2.h), c.value(h));
        let s3 = m.encoder.stack.step(&mut c, s2, x);
        assert_eq!(t.value(inner.stack_repr), c.value(s3.h));
        assert_eq!(table.nodes[1].span, (0, 2));
    }

    #[test]
    fn encoder_policy_ignores_unconsumed_buffer() {
        let m = model(5, 8);
        let a = [1, 2, 3, 4, 5, 1];
        let mut b = a;
        b[4] = 2;
        b[5] = 3;
        for seed in 0..10 {
            let run = |src: &[usize]| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut t = Tape::new(m.params());
                let (out, _) = encode_pass(&mut t, &m, src, Policy::Sample(&mut rng), &opts()).unwrap();
                out.trajectory
            };
            let (ta, tb) = (run(&a), run(&b));
            let mut consumed = 0;
            for (ra, rb) in ta.records.iter().zip(&tb.records) {
                if consumed > 4 {
                    break;
                }
                assert_eq!(ra.distribution, rb.distribution);
                assert_eq!(ra.action, rb.action);
                consumed = ra.gen_count;
            }
        }
    }

    #[test]
    fn free_running_decoder_stops_and_reports() {
        let m = ModelParameters::new(
            ModelConfig {
                hidden: 4,
                source_vocab: 6,
                target_vocab: 5,
            },
            9,
        );
        let mut t = Tape::new(m.params());
        let (_, table) = encode_pass(&mut t, &m, &[1, 2], Policy::Argmax, &opts()).unwrap();
        let dec = decode_pass(&mut t, &m, &table, None, 8, Policy::Argmax, &opts()).unwrap();
        assert!(dec.trajectory.tree.is_well_formed());
        let end = m.config().end_token();
        assert!(dec.tokens.len() <= 8);
        assert_eq!(dec.truncated, dec.tokens.last() != Some(&end));
        assert!(dec.trajectory.records.iter().all(|r| r.lm_log_prob.is_none()));
    }

    #[test]
    fn argmax_passes_always_terminate() {
        for seed in 0..30 {
            let m = model(4, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = rng.gen_range(1..12);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..6)).collect();
            let mut t = Tape::new(m.params());
            let (enc, table) = encode_pass(&mut t, &m, &src, Policy::Argmax, &opts()).unwrap();
            assert_eq!(enc.trajectory.gen_count(), len);
            let dec = decode_pass(&mut t, &m, &table, None, 4 * len, Policy::Argmax, &opts()).unwrap();
            assert!(dec.trajectory.tree.is_well_formed());
            let tgt: Vec<usize> = src.iter().map(|&x| x % 5).collect();
            decode_pass(&mut t, &m, &table, Some(&tgt), 0, Policy::Argmax, &opts()).unwrap();
        }
    }
}
