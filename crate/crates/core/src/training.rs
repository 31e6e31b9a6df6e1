//! Batch training: per-pair passes, loss and reward assembly, Adam steps,
//! epochs and early stopping.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::data::{EncodedPair, ParallelCorpus, Vocabularies};
use crate::model::{ModelConfig, ModelParameters, Side};
use crate::objective::{
    assign_tree_rewards, baseline_update_and_center, coverage_loss, return_steps, returns,
    reinforce_seeds, BaselineState, Observation, RewardConfig,
};
use crate::params::GradientStore;
use crate::stack::Limits;
use crate::tape::{NodeId, Tape};
use crate::transducer::{decode_pass, encode_pass, PassOptions, PassOutput, Policy};
use crate::{Error, Result};

/// Which parameters the differentiable losses reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientMode {
    /// Next-character and coverage losses train only the output softmax;
    /// everything else learns through REINFORCE.
    OutputOnly,
    /// Next-character losses also backpropagate into the stack and
    /// embeddings, and the coverage loss into the attention path.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub gamma: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Epochs without dev improvement before stopping; `None` disables it.
    pub patience: Option<usize>,
    /// Extra attempts for a pair whose sampled pass ran out of actions.
    pub resample_limit: usize,
    pub gradient_mode: GradientMode,
    /// Update baselines after every pair instead of at batch boundaries.
    pub strict_sequential: bool,
    pub adam: AdamConfig,
    pub rewards: RewardConfig,
    pub limits: Limits,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            max_epochs: 12,
            gamma: 0.95,
            ema_decay: 0.95,
            seed: 0,
            patience: Some(3),
            resample_limit: 5,
            gradient_mode: GradientMode::OutputOnly,
            strict_sequential: false,
            adam: AdamConfig::default(),
            rewards: RewardConfig::default(),
            limits: Limits::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) {
        assert!(self.batch_size >= 1, "batch size must be at least 1");
        assert!(self.patience != Some(0), "patience must be at least 1");
    }

    pub fn pass_options(&self) -> PassOptions {
        PassOptions {
            limits: self.limits,
            lm_backprop_into_stack: self.gradient_mode == GradientMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideBaselines {
    pub encoder: BaselineState,
    pub decoder: BaselineState,
}

impl SideBaselines {
    pub fn new(config: &ModelConfig, decay: f64) -> Self {
        Self {
            encoder: BaselineState::new(config.source_vocab, decay),
            decoder: BaselineState::new(config.decoder_classes(), decay),
        }
    }

    fn replay(&mut self, obs: &PairObservations) {
        obs.encoder.iter().for_each(|&o| self.encoder.apply(o));
        obs.decoder.iter().for_each(|&o| self.decoder.apply(o));
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairObservations {
    pub encoder: Vec<Observation>,
    pub decoder: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PairMetrics {
    pub gen_count_enc: usize,
    /// Target characters generated; the end token is not counted.
    pub gen_count_dec: usize,
    pub enc_lm_loss: f64,
    /// Summed over the target characters and the end token.
    pub dec_lm_loss: f64,
    pub dec_tokens: usize,
    pub coverage: f64,
    pub mean_reward: f64,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub attempts: usize,
}

impl PairMetrics {
    pub fn dec_lm_per_token(&self) -> f64 {
        self.dec_lm_loss / self.dec_tokens as f64
    }
}

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub grads: GradientStore,
    pub metrics: PairMetrics,
    pub observations: PairObservations,
}

/// Which gradient contributions `pair_gradients` accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientParts {
    pub exact: bool,
    pub reinforce: bool,
}

impl GradientParts {
    pub const ALL: GradientParts = GradientParts {
        exact: true,
        reinforce: true,
    };
}

/// Samples both passes, resampling abandoned trajectories.
fn sample_passes<'p>(
    model: &'p ModelParameters,
    pair: &EncodedPair,
    rng: &mut ChaCha8Rng,
    config: &TrainConfig,
) -> Result<(Tape<'p>, PassOutput, PassOutput, usize)> {
    let opts = config.pass_options();
    let attempts = config.resample_limit + 1;
    for attempt in 1..=attempts {
        let mut tape = Tape::new(model.params());
        let run = encode_pass(&mut tape, model, &pair.source, Policy::Sample(rng), &opts).and_then(
            |(enc, table)| {
                decode_pass(&mut tape, model, &table, Some(&pair.target), 0, Policy::Sample(rng), &opts)
                    .map(|dec| (enc, dec))
            },
        );
        match run {
            Ok((enc, dec)) => return Ok((tape, enc, dec, attempt)),
            Err(Error::ActionBudgetExhausted { side, budget }) => {
                log::debug!("{side:?} trajectory abandoned at {budget} actions (attempt {attempt})");
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::PairSkipped { attempts })
}

/// One sampled encode/decode of a pair, returning its gradient
/// contributions and the baseline observations it made.
pub fn pair_gradients(
    model: &ModelParameters,
    pair: &EncodedPair,
    baselines: &mut SideBaselines,
    rng: &mut ChaCha8Rng,
    config: &TrainConfig,
    parts: GradientParts,
) -> Result<PairOutcome> {
    let (mut tape, mut enc, mut dec, attempts) = sample_passes(model, pair, rng, config)?;
    let cfg = &config.rewards;
    assign_tree_rewards(&mut enc.trajectory, cfg);
    assign_tree_rewards(&mut dec.trajectory, cfg);
    let coverage = coverage_loss(&dec.attention);

    let mut seeds: Vec<(NodeId, f64)> = Vec::new();
    if parts.exact {
        for r in enc.trajectory.records.iter().chain(&dec.trajectory.records) {
            if let Some(lp) = r.lm_log_prob {
                seeds.push((lp, -cfg.lm_weight));
            }
        }
        if config.gradient_mode == GradientMode::Full {
            let cols = dec
                .attention
                .column_nodes()
                .expect("attention columns are recorded on the tape");
            let node = tape.coverage(&cols);
            seeds.push((node, cfg.coverage_weight));
        }
    }

    let centered_enc = baseline_update_and_center(&enc.trajectory, &mut baselines.encoder);
    let centered_dec = baseline_update_and_center(&dec.trajectory, &mut baselines.decoder);
    if parts.reinforce {
        let dec_lm_total = dec.trajectory.lm_total();
        let r_enc = returns(
            &return_steps(&enc.trajectory, &centered_enc),
            coverage,
            dec_lm_total,
            Side::Encoder,
            config.gamma,
        );
        let r_dec = returns(
            &return_steps(&dec.trajectory, &centered_dec),
            coverage,
            dec_lm_total,
            Side::Decoder,
            config.gamma,
        );
        seeds.extend(reinforce_seeds(&enc.trajectory, &r_enc));
        seeds.extend(reinforce_seeds(&dec.trajectory, &r_dec));
    }

    let mut grads = GradientStore::zeros_like(model.params());
    tape.backward(&seeds, &mut grads);

    let rewards: Vec<f64> = enc
        .trajectory
        .records
        .iter()
        .chain(&dec.trajectory.records)
        .map(|r| r.reward)
        .collect();
    let metrics = PairMetrics {
        gen_count_enc: enc.trajectory.gen_count(),
        gen_count_dec: dec.trajectory.gen_count() - 1,
        enc_lm_loss: enc.trajectory.lm_total(),
        dec_lm_loss: dec.trajectory.lm_total(),
        dec_tokens: dec.trajectory.gen_count(),
        coverage,
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        enc_depth: enc.trajectory.depth(),
        dec_depth: dec.trajectory.depth(),
        attempts,
    };
    Ok(PairOutcome {
        grads,
        metrics,
        observations: PairObservations {
            encoder: centered_enc.observations,
            decoder: centered_dec.observations,
        },
    })
}

pub fn train_pair(
    model: &ModelParameters,
    pair: &EncodedPair,
    baselines: &mut SideBaselines,
    rng: &mut ChaCha8Rng,
    config: &TrainConfig,
) -> Result<PairOutcome> {
    pair_gradients(model, pair, baselines, rng, config, GradientParts::ALL)
}

/// RNG for the pair at `position` of `epoch`'s shuffled order.
pub fn pair_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | epoch as u64);
    rng
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BatchMetrics {
    pub epoch: usize,
    pub batch: usize,
    pub pairs: usize,
    pub skipped: usize,
    /// Decoder next-character loss per token, averaged over pairs.
    pub lm_loss: f64,
    pub coverage: f64,
    pub mean_reward: f64,
}

impl BatchMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} batch={} pairs={} lm_loss={:.6} coverage={:.6} mean_reward={:.6}",
            self.epoch, self.batch, self.pairs, self.lm_loss, self.coverage, self.mean_reward
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub pairs: usize,
    pub skipped: usize,
    /// Decoder next-character loss per token over the epoch.
    pub lm_loss: f64,
    pub coverage: f64,
    pub mean_reward: f64,
    pub mean_enc_depth: f64,
    pub mean_dec_depth: f64,
}

/// Teacher-forced loss with argmax structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub per_token: f64,
    pub tokens: usize,
    pub skipped: usize,
}

/// Decoder next-character loss per token (end token included) with both
/// trees chosen by argmax.
pub fn teacher_forced_loss(model: &ModelParameters, pairs: &[EncodedPair], limits: Limits) -> LossReport {
    let opts = PassOptions {
        limits,
        lm_backprop_into_stack: false,
    };
    let results: Vec<Option<(f64, usize)>> = pairs
        .par_iter()
        .map(|p| {
            let mut tape = Tape::new(model.params());
            let (_, table) = encode_pass(&mut tape, model, &p.source, Policy::Argmax, &opts).ok()?;
            let dec = decode_pass(&mut tape, model, &table, Some(&p.target), 0, Policy::Argmax, &opts).ok()?;
            Some((dec.trajectory.lm_total(), dec.trajectory.gen_count()))
        })
        .collect();
    let (mut loss, mut tokens, mut skipped) = (0.0, 0, 0);
    for r in results {
        match r {
            Some((l, n)) => {
                loss += l;
                tokens += n;
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} pair(s) exceeded the action budget under argmax structure");
    }
    LossReport {
        per_token: if tokens == 0 { f64::INFINITY } else { loss / tokens as f64 },
        tokens,
        skipped,
    }
}

/// Model, optimizer and baselines for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelParameters,
    pub adam: AdamState,
    pub baselines: SideBaselines,
    pub vocabs: Vocabularies,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(vocabs: Vocabularies, hidden: usize, config: TrainConfig) -> Self {
        config.validate();
        let model_config = ModelConfig {
            hidden,
            source_vocab: vocabs.source.len(),
            target_vocab: vocabs.target.len(),
        };
        let model = ModelParameters::new(model_config, config.seed);
        let adam = AdamState::new(model.params(), config.adam);
        let baselines = SideBaselines::new(&model_config, config.ema_decay);
        Self {
            model,
            adam,
            baselines,
            vocabs,
            config,
            epoch: 0,
        }
    }

    /// Runs one batch; `start` is the batch's offset in the epoch order.
    fn train_batch(&mut self, batch: &[EncodedPair], start: usize, epoch: usize) -> Result<(Vec<PairMetrics>, usize)> {
        let model = &self.model;
        let config = &self.config;
        let outcomes: Vec<Result<PairOutcome>> = if config.strict_sequential {
            batch
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut rng = pair_rng(config.seed, epoch, start + i);
                    train_pair(model, p, &mut self.baselines, &mut rng, config)
                })
                .collect()
        } else {
            let frozen = &self.baselines;
            let v: Vec<_> = batch
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut rng = pair_rng(config.seed, epoch, start + i);
                    let mut local = frozen.clone();
                    train_pair(model, p, &mut local, &mut rng, config)
                })
                .collect();
            for o in v.iter().flatten() {
                self.baselines.replay(&o.observations);
            }
            v
        };
        let mut grads = GradientStore::zeros_like(self.model.params());
        let mut metrics = Vec::new();
        let mut skipped = 0;
        for o in outcomes {
            match o {
                Ok(o) => {
                    grads.add_assign(&o.grads);
                    metrics.push(o.metrics);
                }
                Err(Error::PairSkipped { attempts }) => {
                    log::warn!("pair skipped after {attempts} abandoned trajectories");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if !metrics.is_empty() {
            grads.scale(1.0 / metrics.len() as f64);
            self.adam.step(self.model.params_mut(), &mut grads)?;
        }
        Ok((metrics, skipped))
    }

    /// One shuffled pass over `pairs`; `on_batch` sees each batch's metrics.
    pub fn train_epoch(
        &mut self,
        pairs: &[EncodedPair],
        mut on_batch: impl FnMut(&BatchMetrics),
    ) -> Result<EpochMetrics> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut shuffle_rng(self.config.seed, epoch));
        let mut out = EpochMetrics {
            epoch,
            ..Default::default()
        };
        let (mut lm, mut tokens) = (0.0, 0usize);
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<EncodedPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (metrics, skipped) = self.train_batch(&batch, b * self.config.batch_size, epoch)?;
            let n = metrics.len();
            let mean = |f: &dyn Fn(&PairMetrics) -> f64| {
                if n == 0 {
                    0.0
                } else {
                    metrics.iter().map(f).sum::<f64>() / n as f64
                }
            };
            let bm = BatchMetrics {
                epoch,
                batch: b + 1,
                pairs: n,
                skipped,
                lm_loss: mean(&|m| m.dec_lm_per_token()),
                coverage: mean(&|m| m.coverage),
                mean_reward: mean(&|m| m.mean_reward),
            };
            on_batch(&bm);
            if n > 0 {
                out.steps += 1;
            }
            out.pairs += n;
            out.skipped += skipped;
            for m in &metrics {
                lm += m.dec_lm_loss;
                tokens += m.dec_tokens;
                out.coverage += m.coverage;
                out.mean_reward += m.mean_reward;
                out.mean_enc_depth += m.enc_depth as f64;
                out.mean_dec_depth += m.dec_depth as f64;
            }
        }
        if out.pairs > 0 {
            let n = out.pairs as f64;
            out.lm_loss = lm / tokens as f64;
            out.coverage /= n;
            out.mean_reward /= n;
            out.mean_enc_depth /= n;
            out.mean_dec_depth /= n;
        }
        self.epoch = epoch;
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: *self.model.config(),
                train: self.config.clone(),
                vocabs: self.vocabs.clone(),
                epoch: self.epoch,
                adam_step: self.adam.step,
            },
            params: self.model.params().clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            baselines: self.baselines.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let adam = AdamState {
            config: ck.meta.train.adam,
            step: ck.meta.adam_step,
            m: ck.adam_m,
            v: ck.adam_v,
        };
        Ok(Self {
            model,
            adam,
            baselines: ck.baselines,
            vocabs: ck.meta.vocabs,
            config: ck.meta.train,
            epoch: ck.meta.epoch,
        })
    }
}

/// Tracks the best dev loss and decides when to stop.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: Option<usize>,
    best: f64,
    best_epoch: usize,
    seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: Option<usize>) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            seen: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.seen += 1;
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = self.seen;
        }
        let stale = self.seen - self.best_epoch;
        StopDecision {
            improved,
            stop: self.patience.is_some_and(|p| stale >= p),
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub dev_losses: Vec<f64>,
}

pub const BEST_CHECKPOINT: &str = "best.ltt";
pub const METRICS_LOG: &str = "metrics.log";

/// Trains on `train`, early-stopping on the dev loss, and keeps the best
/// checkpoint in `out_dir`. Without a dev corpus the training loss is used.
pub fn fit(
    train: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    config: &TrainConfig,
    hidden: usize,
    out_dir: &Path,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vocabs = Vocabularies::build(train);
    let train_pairs = vocabs.encode_corpus(train);
    let dev_pairs = match dev {
        Some(d) if !d.is_empty() => vocabs.encode_corpus(d),
        _ => train_pairs.clone(),
    };
    let log_path = out_dir.join(METRICS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let best_path = out_dir.join(BEST_CHECKPOINT);

    let mut trainer = Trainer::new(vocabs, hidden, config.clone());
    let mut stopper = EarlyStopper::new(config.patience);
    let mut dev_losses = Vec::new();
    let mut io_err = None;
    for _ in 0..config.max_epochs {
        let em = trainer.train_epoch(&train_pairs, |b| {
            if let Err(e) = writeln!(log, "{}", b.log_line()) {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err.take() {
            return Err(Error::io(&log_path, e));
        }
        let dev_loss = teacher_forced_loss(&trainer.model, &dev_pairs, config.limits).per_token;
        dev_losses.push(dev_loss);
        writeln!(
            log,
            "epoch={} dev_lm_loss={:.6} train_lm_loss={:.6} coverage={:.6} mean_reward={:.6}",
            em.epoch, dev_loss, em.lm_loss, em.coverage, em.mean_reward
        )
        .map_err(|e| Error::io(&log_path, e))?;
        log::info!("epoch {} dev loss {:.4} (train {:.4})", em.epoch, dev_loss, em.lm_loss);
        let decision = stopper.observe(dev_loss);
        if decision.improved {
            checkpoint::save_checkpoint(&trainer.checkpoint(), &best_path)?;
        }
        if decision.stop {
            break;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if stopper.best_epoch() == 0 {
        // Every dev loss was non-finite; keep the last model.
        checkpoint::save_checkpoint(&trainer.checkpoint(), &best_path)?;
    }
    Ok(FitReport {
        best_checkpoint: best_path,
        best_epoch: stopper.best_epoch(),
        epochs_run: trainer.epoch,
        dev_losses,
    })
}
