//! The NT / GEN / REDUCE transition system over a StackLSTM spine.
//!
//! The spine is a list of LSTM states; entry 0 is the all-zero initial
//! state and the stack summary is the `h` of the last entry. Each open
//! constituent is a [`Frame`] remembering where its new-nonterminal entry
//! sits on the spine. REDUCE composes the frame's children, truncates the
//! spine back to that entry (the rollback), and advances one step with the
//! phrase embedding. Spine entries are immutable tape nodes, so the restored
//! prefix is bitwise the one that existed when the constituent was opened.

use crate::nn::{Composer, LstmCell, LstmState};
use crate::tape::{NodeId, Tape};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Nt,
    Gen,
    Reduce,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Nt, Action::Gen, Action::Reduce];

    pub fn index(self) -> usize {
        match self {
            Action::Nt => 0,
            Action::Gen => 1,
            Action::Reduce => 2,
        }
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Nt => "NT",
            Action::Gen => "GEN",
            Action::Reduce => "REDUCE",
        })
    }
}

/// A transition with its payload: GEN carries the character id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transition {
    Nt,
    Gen(usize),
    Reduce,
}

impl Transition {
    pub fn action(self) -> Action {
        match self {
            Transition::Nt => Action::Nt,
            Transition::Gen(_) => Action::Gen,
            Transition::Reduce => Action::Reduce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_depth: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_depth: 40 }
    }
}

/// Upper bound on the number of actions in one pass over `len` tokens.
pub fn action_budget(len: usize) -> usize {
    8 * len + 16
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum BufferMode {
    TeacherForced,
    FreeRunning { cap: usize, end_token: usize, closed: bool },
}

/// Token source for GEN. Teacher-forced buffers hold the ground truth;
/// free-running buffers collect what the model emits until the end token
/// or the cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferCursor {
    tokens: Vec<usize>,
    cursor: usize,
    mode: BufferMode,
}

impl BufferCursor {
    pub fn teacher_forced(tokens: Vec<usize>) -> Self {
        Self {
            tokens,
            cursor: 0,
            mode: BufferMode::TeacherForced,
        }
    }

    pub fn free_running(cap: usize, end_token: usize) -> Self {
        Self {
            tokens: Vec::new(),
            cursor: 0,
            mode: BufferMode::FreeRunning {
                cap,
                end_token,
                closed: false,
            },
        }
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Ground-truth length, or the cap when free-running.
    pub fn capacity(&self) -> usize {
        match self.mode {
            BufferMode::TeacherForced => self.tokens.len(),
            BufferMode::FreeRunning { cap, .. } => cap,
        }
    }

    pub fn is_teacher_forced(&self) -> bool {
        self.mode == BufferMode::TeacherForced
    }

    pub fn is_exhausted(&self) -> bool {
        match self.mode {
            BufferMode::TeacherForced => self.cursor >= self.tokens.len(),
            BufferMode::FreeRunning { cap, closed, .. } => closed || self.cursor >= cap,
        }
    }

    /// Free-running output that ended with the end token.
    pub fn is_closed(&self) -> bool {
        matches!(self.mode, BufferMode::FreeRunning { closed: true, .. })
    }

    /// Ground-truth token at the cursor (teacher-forced only).
    pub fn peek(&self) -> Option<usize> {
        match self.mode {
            BufferMode::TeacherForced => self.tokens.get(self.cursor).copied(),
            BufferMode::FreeRunning { .. } => None,
        }
    }

    /// Tokens consumed so far.
    pub fn consumed(&self) -> &[usize] {
        &self.tokens[..self.cursor]
    }

    fn advance(&mut self, token: usize) {
        assert!(!self.is_exhausted(), "GEN on an exhausted buffer");
        match &mut self.mode {
            BufferMode::TeacherForced => {
                assert_eq!(self.tokens[self.cursor], token, "GEN must ingest the ground truth");
            }
            BufferMode::FreeRunning {
                end_token, closed, ..
            } => {
                self.tokens.push(token);
                if token == *end_token {
                    *closed = true;
                }
            }
        }
        self.cursor += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChildKind {
    Terminal,
    Nonterminal,
    /// The new-nonterminal token of a still-open child constituent.
    Placeholder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Child {
    pub embedding: NodeId,
    pub kind: ChildKind,
}

/// An open constituent.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Spine index of this constituent's new-nonterminal entry; REDUCE
    /// truncates the spine to this length.
    pub spine_index: usize,
    /// Position of this constituent's placeholder in the parent's children.
    pub parent_slot: Option<usize>,
    pub children: Vec<Child>,
    pub attention_event: Option<usize>,
    /// Buffer cursor when the constituent was opened.
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChildStats {
    pub nonterminal: usize,
    pub terminal: usize,
}

/// What REDUCE produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub phrase: NodeId,
    pub stats: ChildStats,
    pub span: (usize, usize),
    pub is_root: bool,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackState {
    spine: Vec<LstmState>,
    frames: Vec<Frame>,
}

impl StackState {
    /// A stack holding only the all-zero initial state.
    pub fn new(tape: &mut Tape, dim: usize) -> Self {
        Self {
            spine: vec![LstmState::zeros(tape, dim)],
            frames: Vec::new(),
        }
    }

    pub fn spine(&self) -> &[LstmState] {
        &self.spine
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    /// Number of open constituents.
    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// `h` of the spine top.
    pub fn summary(&self) -> NodeId {
        self.spine.last().expect("spine is never empty").h
    }

    fn advance(&mut self, tape: &mut Tape, cell: &LstmCell, input: NodeId) {
        let top = *self.spine.last().expect("spine is never empty");
        let next = cell.step(tape, top, input);
        self.spine.push(next);
    }

    /// Opens a constituent whose new-nonterminal token is `x`.
    pub fn apply_nt(
        &mut self,
        tape: &mut Tape,
        cell: &LstmCell,
        x: NodeId,
        buffer: &BufferCursor,
        attention_event: Option<usize>,
    ) {
        assert!(!buffer.is_exhausted(), "NT on an exhausted buffer");
        let parent_slot = self.frames.last_mut().map(|p| {
            p.children.push(Child {
                embedding: x,
                kind: ChildKind::Placeholder,
            });
            p.children.len() - 1
        });
        self.frames.push(Frame {
            spine_index: self.spine.len(),
            parent_slot,
            children: Vec::new(),
            attention_event,
            start: buffer.cursor(),
        });
        self.advance(tape, cell, x);
    }

    /// Adds terminal `token` (embedded as `embedding`) to the active constituent.
    pub fn apply_gen(
        &mut self,
        tape: &mut Tape,
        cell: &LstmCell,
        embedding: NodeId,
        buffer: &mut BufferCursor,
        token: usize,
    ) {
        let active = self.frames.last_mut().expect("GEN outside any constituent");
        active.children.push(Child {
            embedding,
            kind: ChildKind::Terminal,
        });
        buffer.advance(token);
        self.advance(tape, cell, embedding);
    }

    /// Closes the active constituent.
    pub fn apply_reduce(
        &mut self,
        tape: &mut Tape,
        cell: &LstmCell,
        composer: &Composer,
        buffer: &BufferCursor,
    ) -> Reduction {
        let frame = self.frames.pop().expect("REDUCE with no open constituent");
        assert!(!frame.children.is_empty(), "REDUCE of a childless constituent");
        let mut stats = ChildStats {
            nonterminal: 0,
            terminal: 0,
        };
        let kids: Vec<NodeId> = frame
            .children
            .iter()
            .map(|c| {
                match c.kind {
                    ChildKind::Terminal => stats.terminal += 1,
                    ChildKind::Nonterminal => stats.nonterminal += 1,
                    ChildKind::Placeholder => panic!("unreduced child at REDUCE"),
                }
                c.embedding
            })
            .collect();
        let phrase = composer.compose(tape, &kids);
        self.spine.truncate(frame.spine_index);
        self.advance(tape, cell, phrase);
        if let Some(slot) = frame.parent_slot {
            let parent = self.frames.last_mut().expect("parent frame");
            parent.children[slot] = Child {
                embedding: phrase,
                kind: ChildKind::Nonterminal,
            };
        }
        Reduction {
            phrase,
            stats,
            span: (frame.start, buffer.cursor()),
            is_root: self.frames.is_empty(),
            frame,
        }
    }
}

/// Legality of (NT, GEN, REDUCE) in the current state.
pub fn legal_transitions(stack: &StackState, buffer: &BufferCursor, limits: &Limits) -> [bool; 3] {
    let exhausted = buffer.is_exhausted();
    let depth = stack.depth();
    let nt = depth < limits.max_depth && !exhausted;
    let gen = depth >= 1 && !exhausted;
    let reduce = match stack.frames.last() {
        None => false,
        Some(active) => !active.children.is_empty() && (depth > 1 || exhausted),
    };
    let mask = [nt, gen, reduce];
    assert!(mask.iter().any(|&m| m), "no legal transition");
    mask
}
