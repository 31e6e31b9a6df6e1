//! Training signals: next-character losses, the coverage penalty, tree
//! rewards, moving-average baselines, GEN-discounted returns and the score
//! function gradient.

use crate::model::Side;
use crate::params::GradientStore;
use crate::stack::{Action, ChildStats};
use crate::tape::{NodeId, Tape};
use crate::transducer::{AttentionMatrix, Trajectory};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Added to a REDUCE with exactly one child.
    pub unary_penalty: f64,
    /// Added to the second of two consecutive NT or two consecutive REDUCE.
    pub consecutive_penalty: f64,
    pub terminal_coefficient: f64,
    pub nonterminal_coefficient: f64,
    pub coverage_weight: f64,
    pub lm_weight: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            unary_penalty: -1.0,
            consecutive_penalty: -1.0,
            terminal_coefficient: 4.0,
            nonterminal_coefficient: 9.0,
            coverage_weight: 100.0,
            lm_weight: 10.0,
            gamma: 0.95,
        }
    }
}

/// Reward for closing a non-root constituent with `n` nonterminal and `t`
/// terminal children: `4t` if all children are terminal, else `9√n`.
pub fn constituent_reward(n: usize, t: usize, cfg: &RewardConfig) -> f64 {
    assert!(n + t >= 1, "constituent without children");
    if n == 0 {
        cfg.terminal_coefficient * t as f64
    } else {
        cfg.nonterminal_coefficient * (n as f64).sqrt()
    }
}

/// The parts of an action that tree rewards look at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeEvent {
    pub action: Action,
    pub stats: Option<ChildStats>,
    pub closes_root: bool,
}

impl TreeEvent {
    pub fn new(action: Action) -> Self {
        Self {
            action,
            stats: None,
            closes_root: false,
        }
    }

    pub fn reduce(n: usize, t: usize, closes_root: bool) -> Self {
        Self {
            action: Action::Reduce,
            stats: Some(ChildStats {
                nonterminal: n,
                terminal: t,
            }),
            closes_root,
        }
    }
}

pub fn tree_events(trajectory: &Trajectory) -> Vec<TreeEvent> {
    trajectory
        .records
        .iter()
        .map(|r| TreeEvent {
            action: r.action,
            stats: r.child_stats,
            closes_root: r.closes_root,
        })
        .collect()
}

/// Per-action penalty: unary REDUCE, and a repeat of NT or REDUCE.
pub fn transition_penalties(events: &[TreeEvent], cfg: &RewardConfig) -> Vec<f64> {
    events
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let mut p = 0.0;
            if let Some(s) = e.stats {
                if s.nonterminal + s.terminal == 1 {
                    p += cfg.unary_penalty;
                }
            }
            if k > 0 && e.action != Action::Gen && events[k - 1].action == e.action {
                p += cfg.consecutive_penalty;
            }
            p
        })
        .collect()
}

/// Constituent rewards (non-root REDUCE) plus penalties.
pub fn tree_rewards(events: &[TreeEvent], cfg: &RewardConfig) -> Vec<f64> {
    let mut r = transition_penalties(events, cfg);
    for (rk, e) in r.iter_mut().zip(events) {
        if let (Action::Reduce, Some(s), false) = (e.action, e.stats, e.closes_root) {
            *rk += constituent_reward(s.nonterminal, s.terminal, cfg);
        }
    }
    r
}

/// Writes tree rewards into the trajectory's records.
pub fn assign_tree_rewards(trajectory: &mut Trajectory, cfg: &RewardConfig) {
    let r = tree_rewards(&tree_events(trajectory), cfg);
    for (rec, rk) in trajectory.records.iter_mut().zip(r) {
        rec.reward = rk;
    }
}

/// `mean_i (1 − Σ_j α_ij)² + mean_i (1 − max_j α_ij)² + mean_j (1 − max_i α_ij)²`,
/// with `columns[j][i] = α_ij`. Zero for an empty matrix.
pub fn coverage_from_columns(columns: &[&[f64]]) -> f64 {
    let cols = columns.len();
    if cols == 0 || columns[0].is_empty() {
        return 0.0;
    }
    let rows = columns[0].len();
    let mut row_terms = 0.0;
    let mut row_max_terms = 0.0;
    for i in 0..rows {
        let sum: f64 = columns.iter().map(|c| c[i]).sum();
        let max = columns.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max);
        row_terms += (1.0 - sum).powi(2);
        row_max_terms += (1.0 - max).powi(2);
    }
    let col_max_terms: f64 = columns
        .iter()
        .map(|c| (1.0 - c.iter().copied().fold(f64::NEG_INFINITY, f64::max)).powi(2))
        .sum();
    row_terms / rows as f64 + row_max_terms / rows as f64 + col_max_terms / cols as f64
}

fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Gradient of [`coverage_from_columns`]; each max routes to its first
/// argmax entry.
pub fn coverage_gradient_columns(columns: &[&[f64]]) -> Vec<Vec<f64>> {
    let cols = columns.len();
    let mut g: Vec<Vec<f64>> = columns.iter().map(|c| vec![0.0; c.len()]).collect();
    if cols == 0 || columns[0].is_empty() {
        return g;
    }
    let rows = columns[0].len();
    let (ri, ci) = (rows as f64, cols as f64);
    for i in 0..rows {
        let sum: f64 = columns.iter().map(|c| c[i]).sum();
        for col in g.iter_mut() {
            col[i] += -2.0 * (1.0 - sum) / ri;
        }
        let j = first_argmax(columns.iter().map(|c| c[i]));
        g[j][i] += -2.0 * (1.0 - columns[j][i]) / ri;
    }
    for (j, c) in columns.iter().enumerate() {
        let i = first_argmax(c.iter().copied());
        g[j][i] += -2.0 * (1.0 - c[i]) / ci;
    }
    g
}

pub fn coverage_loss(matrix: &AttentionMatrix) -> f64 {
    let cols: Vec<&[f64]> = matrix.columns().iter().map(|c| c.weights.as_slice()).collect();
    coverage_from_columns(&cols)
}

/// `coverage_weight · L_c + lm_weight · Σ L_k`.
pub fn combined_differentiable_loss(lm_losses: &[f64], coverage: f64, cfg: &RewardConfig) -> f64 {
    cfg.coverage_weight * coverage + cfg.lm_weight * lm_losses.iter().sum::<f64>()
}

/// Exponential moving average that starts at its first observation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Ema {
    pub value: f64,
    pub initialized: bool,
}

impl Ema {
    pub fn observe(&mut self, x: f64, decay: f64) {
        if self.initialized {
            self.value = decay * self.value + (1.0 - decay) * x;
        } else {
            self.value = x;
            self.initialized = true;
        }
    }

    /// `x − baseline`, where an unseen baseline equals `x`.
    pub fn center(&self, x: f64) -> f64 {
        if self.initialized {
            x - self.value
        } else {
            0.0
        }
    }
}

/// Baselines for one side: a scalar EMA over tree rewards and one EMA per
/// output character over next-character losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub decay: f64,
    pub reward: Ema,
    pub lm: Vec<Ema>,
}

/// One baseline update, recorded so that updates can be replayed in order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    Reward(f64),
    Loss { token: usize, value: f64 },
}

impl BaselineState {
    pub fn new(classes: usize, decay: f64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "EMA decay must lie in (0, 1)");
        Self {
            decay,
            reward: Ema::default(),
            lm: vec![Ema::default(); classes],
        }
    }

    pub fn apply(&mut self, obs: Observation) {
        match obs {
            Observation::Reward(x) => self.reward.observe(x, self.decay),
            Observation::Loss { token, value } => self.lm[token].observe(value, self.decay),
        }
    }
}

/// Centered rewards and losses of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Centered {
    pub rewards: Vec<f64>,
    pub losses: Vec<f64>,
    pub observations: Vec<Observation>,
}

/// Reward-bearing actions: every REDUCE and any action carrying a penalty.
fn bears_reward(action: Action, reward: f64) -> bool {
    action == Action::Reduce || reward != 0.0
}

/// Centers each tree reward and GEN loss against its baseline, then folds
/// the observation into that baseline, in action order.
pub fn baseline_update_and_center(trajectory: &Trajectory, baselines: &mut BaselineState) -> Centered {
    let n = trajectory.records.len();
    let mut out = Centered {
        rewards: vec![0.0; n],
        losses: vec![0.0; n],
        observations: Vec::new(),
    };
    for (k, r) in trajectory.records.iter().enumerate() {
        if bears_reward(r.action, r.reward) {
            out.rewards[k] = baselines.reward.center(r.reward);
            let obs = Observation::Reward(r.reward);
            baselines.apply(obs);
            out.observations.push(obs);
        }
        if let (Action::Gen, Some(z), Some(_)) = (r.action, r.token, r.lm_log_prob) {
            out.losses[k] = baselines.lm[z].center(r.lm_loss);
            let obs = Observation::Loss {
                token: z,
                value: r.lm_loss,
            };
            baselines.apply(obs);
            out.observations.push(obs);
        }
    }
    out
}

/// Inputs to the return computation for one action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnStep {
    pub is_gen: bool,
    pub reward: f64,
    pub loss: f64,
}

pub fn return_steps(trajectory: &Trajectory, centered: &Centered) -> Vec<ReturnStep> {
    trajectory
        .records
        .iter()
        .enumerate()
        .map(|(k, r)| ReturnStep {
            is_gen: r.action == Action::Gen,
            reward: centered.rewards[k],
            loss: centered.losses[k],
        })
        .collect()
}

/// `R_k = Σ_{κ≥k} γ^{GEN(κ)−GEN(k)} (r̂_κ − L̂_κ) − L_c`, minus the decoder's
/// total next-character loss on the encoder side.
pub fn returns(
    steps: &[ReturnStep],
    coverage: f64,
    decoder_lm_total: f64,
    side: Side,
    gamma: f64,
) -> Vec<f64> {
    let offset = coverage
        + match side {
            Side::Encoder => decoder_lm_total,
            Side::Decoder => 0.0,
        };
    let mut out = vec![0.0; steps.len()];
    let mut acc = 0.0;
    for k in (0..steps.len()).rev() {
        if k + 1 < steps.len() && steps[k + 1].is_gen {
            acc *= gamma;
        }
        acc += steps[k].reward - steps[k].loss;
        out[k] = acc;
    }
    out.iter_mut().for_each(|r| *r -= offset);
    out
}

/// Backward seeds for `−Σ_k R_k log p_k^{a_k}` over stochastic actions.
pub fn score_function_seeds(steps: &[(NodeId, f64, f64)]) -> Vec<(NodeId, f64)> {
    steps
        .iter()
        .map(|&(node, prob, ret)| {
            assert!(prob > 0.0, "chosen action with zero probability");
            (node, -ret)
        })
        .collect()
}

pub fn reinforce_seeds(trajectory: &Trajectory, returns: &[f64]) -> Vec<(NodeId, f64)> {
    assert_eq!(trajectory.records.len(), returns.len());
    let steps: Vec<(NodeId, f64, f64)> = trajectory
        .records
        .iter()
        .zip(returns)
        .filter(|(r, _)| r.is_stochastic())
        .map(|(r, &ret)| (r.log_prob, r.prob, ret))
        .collect();
    score_function_seeds(&steps)
}

/// Adds `−R_k ∇θ log p_k^{a_k}` for every stochastic action to `grads`.
pub fn reinforce_accumulate(tape: &Tape, trajectory: &Trajectory, returns: &[f64], grads: &mut GradientStore) {
    tape.backward(&reinforce_seeds(trajectory, returns), grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::Action::*;

    fn cfg() -> RewardConfig {
        RewardConfig::default()
    }

    #[test]
    fn constituent_reward_examples() {
        assert_eq!(constituent_reward(0, 4, &cfg()), 16.0);
        assert_eq!(constituent_reward(4, 7, &cfg()), 18.0);
        assert_eq!(constituent_reward(1, 0, &cfg()), 9.0);
    }

    #[test]
    #[should_panic(expected = "without children")]
    fn constituent_reward_needs_children() {
        constituent_reward(0, 0, &cfg());
    }

    #[test]
    fn penalty_examples() {
        // NT GEN REDUCE with one terminal child (non-root).
        let ev = [
            TreeEvent::new(Nt),
            TreeEvent::new(Gen),
            TreeEvent::reduce(0, 1, false),
        ];
        assert_eq!(tree_rewards(&ev, &cfg()), vec![0.0, 0.0, 3.0]);

        let ev = [TreeEvent::new(Nt), TreeEvent::new(Nt), TreeEvent::new(Gen)];
        assert_eq!(transition_penalties(&ev, &cfg()), vec![0.0, -1.0, 0.0]);

        let ev = [
            TreeEvent::new(Nt),
            TreeEvent::new(Gen),
            TreeEvent::new(Gen),
            TreeEvent::reduce(0, 2, false),
        ];
        assert_eq!(transition_penalties(&ev, &cfg()), vec![0.0; 4]);
        assert_eq!(tree_rewards(&ev, &cfg())[3], 8.0);
    }

    #[test]
    fn mixed_pairs_are_not_penalized_and_root_earns_no_constituent_reward() {
        let ev = [
            TreeEvent::new(Nt),
            TreeEvent::new(Nt),
            TreeEvent::new(Gen),
            TreeEvent::new(Gen),
            TreeEvent::reduce(0, 2, false),
            TreeEvent::new(Nt),
            TreeEvent::new(Gen),
            TreeEvent::new(Gen),
            TreeEvent::reduce(0, 2, false),
            TreeEvent::reduce(2, 0, true),
        ];
        let r = tree_rewards(&ev, &cfg());
        assert_eq!(r, vec![0.0, -1.0, 0.0, 0.0, 8.0, 0.0, 0.0, 0.0, 8.0, -1.0]);
    }

    #[test]
    fn coverage_examples() {
        let id = AttentionMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(coverage_loss(&id), 0.0);
        let half = AttentionMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!((coverage_loss(&half) - 0.5).abs() < 1e-12);
        let wide = AttentionMatrix::from_rows(&[vec![1.0, 1.0]]);
        assert!((coverage_loss(&wide) - 1.0).abs() < 1e-12);
        assert_eq!(coverage_loss(&AttentionMatrix::new(3)), 0.0);
    }

    #[test]
    fn coverage_gradient_matches_finite_differences() {
        let cols = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.15, 0.25]];
        let view: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let g = coverage_gradient_columns(&view);
        let eps = 1e-6;
        for j in 0..2 {
            for i in 0..3 {
                let mut up = cols.clone();
                up[j][i] += eps;
                let mut dn = cols.clone();
                dn[j][i] -= eps;
                let f = |c: &Vec<Vec<f64>>| {
                    coverage_from_columns(&c.iter().map(Vec::as_slice).collect::<Vec<_>>())
                };
                let fd = (f(&up) - f(&dn)) / (2.0 * eps);
                assert!((fd - g[j][i]).abs() < 1e-6, "({i},{j}) {fd} vs {}", g[j][i]);
            }
        }
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_differentiable_loss(&[], 0.0, &cfg()), 0.0);
        assert!((combined_differentiable_loss(&[1.5, 0.5], 0.5, &cfg()) - 70.0).abs() < 1e-12);
        let ones = RewardConfig {
            coverage_weight: 1.0,
            lm_weight: 1.0,
            ..cfg()
        };
        assert!((combined_differentiable_loss(&[2.0], 0.5, &ones) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ema_examples() {
        let mut e = Ema::default();
        assert_eq!(e.center(8.0), 0.0);
        e.observe(8.0, 0.95);
        assert_eq!(e.value, 8.0);
        assert_eq!(e.center(3.0), -5.0);
        e.observe(3.0, 0.95);
        assert!((e.value - 7.75).abs() < 1e-12);
    }

    #[test]
    fn per_character_baselines_are_independent() {
        let mut b = BaselineState::new(4, 0.95);
        b.apply(Observation::Loss { token: 1, value: 2.0 });
        b.apply(Observation::Loss { token: 1, value: 4.0 });
        assert!(b.lm[1].initialized);
        assert!(!b.lm[0].initialized && !b.lm[2].initialized);
        assert!(!b.reward.initialized);
    }

    fn steps(rows: &[(bool, f64, f64)]) -> Vec<ReturnStep> {
        rows.iter()
            .map(|&(is_gen, reward, loss)| ReturnStep {
                is_gen,
                reward,
                loss,
            })
            .collect()
    }

    #[test]
    fn returns_examples() {
        let r = returns(&steps(&[(false, 2.0, 0.0)]), 0.0, 0.0, Side::Decoder, 1.0);
        assert_eq!(r, vec![2.0]);

        let s = steps(&[(false, 3.0, 0.0), (true, 0.0, 1.0), (false, 2.0, 0.0)]);
        let r = returns(&s, 0.0, 0.0, Side::Decoder, 0.95);
        assert!((r[0] - 3.95).abs() < 1e-12);
        assert!((r[1] - 1.0).abs() < 1e-12);
        assert!((r[2] - 2.0).abs() < 1e-12);

        let enc = returns(&s, 0.25, 5.0, Side::Encoder, 0.95);
        let dec = returns(&s, 0.25, 5.0, Side::Decoder, 0.95);
        for (e, d) in enc.iter().zip(&dec) {
            assert!((d - e - 5.0).abs() < 1e-12);
        }
        assert!((dec[2] - 1.75).abs() < 1e-12);
    }

    #[test]
    fn undiscounted_returns_without_gens_are_suffix_sums() {
        let s = steps(&[(false, 1.0, 0.0), (false, -2.0, 0.0), (false, 4.0, 0.0)]);
        assert_eq!(returns(&s, 0.0, 0.0, Side::Decoder, 1.0), vec![3.0, 2.0, 4.0]);
    }
}
