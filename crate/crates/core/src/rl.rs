//! DQN teacher training: replay memory, TD targets, ε-greedy actors and a
//! single learner that publishes parameter snapshots to the actors.
//!
//! Two schedules share the same actor and learner code. The deterministic one
//! interleaves a single actor with the learner (4 env steps : 1 learn step)
//! and is reproducible bit for bit. The concurrent one runs `n_actors`
//! threads that feed transitions through a bounded queue to the learner.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;

use crossbeam_channel::{bounded, RecvTimeoutError};
use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use crate::env::Transition;
use crate::env::{episode_return, LinkEnv, Policy, StateVector, STATE_DIM};
use crate::error::{Error, Result};
use crate::linksim::{sample_scenario, RandomizationRanges};
use crate::mcs::{self, NUM_MCS};
use crate::net::{self, argmax, AdamConfig, ByteReader, DenseNet, OptimState};
use crate::rng::{derive_seed, rng_from_seed, stream, Rng};

/// Bounded FIFO replay memory; the oldest transition is evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be > 0"));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 20)),
            next: 0,
            inserted: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total pushes over the buffer's lifetime.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `n` indices drawn uniformly with replacement from the current contents.
    pub fn sample_indices(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<&Transition> {
        self.sample_indices(n, rng)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }

    /// Replay dump: `b"LDRP"`, u32 version, u64 capacity, u64 count, then per
    /// transition (oldest first) 16 f64 state, u32 action, f64 reward,
    /// u8 done, 16 f64 next state (zeros when done). Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let row = 8 * STATE_DIM * 2 + 4 + 8 + 1;
        let mut out = Vec::with_capacity(24 + row * self.len());
        out.extend_from_slice(REPLAY_MAGIC);
        out.extend_from_slice(&REPLAY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.capacity as u64).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for t in self.iter() {
            t.state.0.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            out.extend_from_slice(&(t.action as u32).to_le_bytes());
            out.extend_from_slice(&t.reward.to_le_bytes());
            out.push(t.done as u8);
            let next = t.next_state.map(|s| s.0).unwrap_or([0.0; STATE_DIM]);
            next.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != REPLAY_MAGIC {
            return Err(r.error_at(0, "bad magic, not a replay dump"));
        }
        let version = r.u32()?;
        if version != REPLAY_VERSION {
            return Err(r.error_at(4, format!("unsupported replay version {version}")));
        }
        let capacity = r.u64()? as usize;
        let count = r.u64()? as usize;
        if count > capacity {
            return Err(r.error_at(16, format!("count {count} exceeds capacity {capacity}")));
        }
        let mut buf = ReplayBuffer::new(capacity)?;
        let read_state = |r: &mut ByteReader| -> Result<[f64; STATE_DIM]> {
            let mut s = [0.0; STATE_DIM];
            for v in &mut s {
                *v = r.f64()?;
            }
            Ok(s)
        };
        for _ in 0..count {
            let state = StateVector(read_state(&mut r)?);
            let at = r.pos() as u64;
            let action = r.u32()?;
            if action as usize >= NUM_MCS {
                return Err(r.error_at(at, format!("action {action} out of range")));
            }
            let reward = r.f64()?;
            let done = r.take(1)?[0] != 0;
            let next = StateVector(read_state(&mut r)?);
            buf.push(Transition {
                state,
                action: action as u8,
                reward,
                next_state: (!done).then_some(next),
                done,
            });
        }
        if r.remaining() != 0 {
            return Err(r.error_at(r.pos() as u64, "trailing bytes after last transition"));
        }
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

const REPLAY_MAGIC: &[u8; 4] = b"LDRP";
const REPLAY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Full layer widths, input 16 to output 28.
    pub dims: Vec<usize>,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the env-step budget over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Learner steps between target-network refreshes.
    pub target_update_period: usize,
    pub replay_capacity: usize,
    pub total_env_steps: usize,
    pub n_actors: usize,
    pub seed: u64,
    /// Retransmission penalty coefficient of the reward.
    pub alpha: f64,
    /// Env steps per learner step.
    pub learn_every: usize,
    /// Replay size before the first learner step.
    pub learn_start: usize,
    /// Learner steps between snapshot publications to the actors.
    pub publish_every: usize,
    /// Episodes an actor plays before drawing a new scenario.
    pub scenario_refresh_episodes: usize,
    pub queue_capacity: usize,
    /// Single actor interleaved with the learner on a fixed schedule.
    pub deterministic: bool,
    /// Env steps between model checkpoints (0 disables).
    pub checkpoint_every: usize,
    /// Env steps between training-log rows (0 disables).
    pub log_every: usize,
    /// Greedy episodes per log row used for `eval_reward`.
    pub eval_episodes: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            dims: net::mlp_dims(7, 128),
            gamma: 0.95,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.6,
            learning_rate: 1e-4,
            batch_size: 256,
            target_update_period: 2_000,
            replay_capacity: 200_000,
            total_env_steps: 300_000,
            n_actors: 4,
            seed: 0,
            alpha: crate::env::DEFAULT_ALPHA,
            learn_every: 4,
            learn_start: 1_000,
            publish_every: 500,
            scenario_refresh_episodes: 50,
            queue_capacity: 10_000,
            deterministic: false,
            checkpoint_every: 50_000,
            log_every: 10_000,
            eval_episodes: 200,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("target_update_period", self.target_update_period),
            ("replay_capacity", self.replay_capacity),
            ("n_actors", self.n_actors),
            ("learn_every", self.learn_every),
            ("publish_every", self.publish_every),
            ("scenario_refresh_episodes", self.scenario_refresh_episodes),
            ("queue_capacity", self.queue_capacity),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be > 0")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::config(format!("{name} {e} outside [0, 1]")));
            }
        }
        if !(self.epsilon_decay_fraction > 0.0) {
            return Err(Error::config("epsilon_decay_fraction must be > 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("alpha must be >= 0"));
        }
        DenseNet::zeros(&self.dims).map(|_| ())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over the first
    /// `epsilon_decay_fraction` of the budget, then flat.
    pub fn epsilon_at(&self, env_step: usize) -> f64 {
        let horizon = self.epsilon_decay_fraction * self.total_env_steps as f64;
        let frac = if horizon > 0.0 {
            (env_step as f64 / horizon).min(1.0)
        } else {
            1.0
        };
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// With probability ε a uniform action, otherwise the greedy one (lowest
/// index on ties). Always consumes one uniform draw so the stream stays
/// aligned across ε values.
pub fn act_epsilon_greedy(net: &DenseNet, state: &StateVector, epsilon: f64, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    if u < epsilon {
        rng.random_range(0..NUM_MCS)
    } else {
        argmax(&net.forward(state.as_slice()))
    }
}

/// Greedy policy over a network's Q-values.
#[derive(Debug, Clone, Copy)]
pub struct GreedyPolicy<'a> {
    pub net: &'a DenseNet,
}

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, state: &StateVector) -> usize {
        argmax(&self.net.forward(state.as_slice()))
    }
}

/// `y = r` for terminal transitions, `r + γ·max_a' Q_target(s', a')` otherwise.
pub fn td_target(batch: &[&Transition], target_net: &DenseNet, gamma: f64) -> Vec<f64> {
    let live: Vec<&[f64]> = batch
        .iter()
        .filter_map(|t| t.next_state.as_ref().map(|s| s.as_slice()))
        .collect();
    let next_q = if live.is_empty() {
        Array2::zeros((0, NUM_MCS))
    } else {
        target_net.forward_batch(net::stack_rows(live, STATE_DIM).view())
    };
    let mut row = 0;
    batch
        .iter()
        .map(|t| match t.next_state {
            Some(_) if !t.done => {
                let best = next_q.row(row).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row += 1;
                t.reward + gamma * best
            }
            Some(_) => {
                row += 1;
                t.reward
            }
            None => t.reward,
        })
        .collect()
}

/// Summed `½(Q(s,a) − y)²` over the batch and its gradient, which is nonzero
/// only in the taken action's column.
pub fn td_loss(q: &Array2<f64>, actions: &[u8], targets: &[f64]) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(q.dim());
    let mut loss = 0.0;
    for (i, (&a, &y)) in actions.iter().zip(targets).enumerate() {
        let d = q[[i, a as usize]] - y;
        loss += 0.5 * d * d;
        grad[[i, a as usize]] = d;
    }
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnStats {
    pub loss: f64,
    pub mean_q: f64,
}

/// Online/target network pair with its optimizer.
#[derive(Debug, Clone)]
pub struct DqnLearner {
    pub online: DenseNet,
    pub target: DenseNet,
    optim: OptimState,
    gamma: f64,
    batch_size: usize,
    target_update_period: usize,
    rng: Rng,
    steps: usize,
    divergence_limit: f64,
}

impl DqnLearner {
    pub fn new(net: DenseNet, cfg: &TrainerConfig) -> Self {
        Self {
            optim: OptimState::new(&net, AdamConfig::with_lr(cfg.learning_rate)),
            target: net.clone(),
            online: net,
            gamma: cfg.gamma,
            batch_size: cfg.batch_size,
            target_update_period: cfg.target_update_period,
            rng: rng_from_seed(derive_seed(cfg.seed, stream::LEARNER)),
            steps: 0,
            divergence_limit: 10.0 * mcs::spectral_efficiency(NUM_MCS - 1),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One gradient step on a uniform batch; refreshes the target network
    /// every `target_update_period` steps.
    pub fn learn(&mut self, replay: &ReplayBuffer) -> Result<LearnStats> {
        let batch = replay.sample(self.batch_size, &mut self.rng);
        let targets = td_target(&batch, &self.target, self.gamma);
        let actions: Vec<u8> = batch.iter().map(|t| t.action).collect();
        let inputs = net::stack_rows(batch.iter().map(|t| t.state.as_slice()), STATE_DIM);

        let mut mean_abs_q = 0.0;
        let mut mean_q = 0.0;
        let step = self.steps;
        let loss = net::train_step(
            &mut self.online,
            inputs.view(),
            |q| {
                mean_abs_q = q.iter().map(|v| v.abs()).sum::<f64>() / q.len() as f64;
                mean_q = q
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .sum::<f64>()
                    / q.nrows() as f64;
                td_loss(q, &actions, &targets)
            },
            &mut self.optim,
        )
        .map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
        if mean_abs_q > self.divergence_limit {
            return Err(Error::Training {
                step,
                reason: format!(
                    "mean |Q| {mean_abs_q:.3} exceeds {:.3}; loss {loss:.4}, lr {}",
                    self.divergence_limit, self.optim.learning_rate
                ),
            });
        }
        self.steps += 1;
        if self.steps.is_multiple_of(self.target_update_period) {
            self.target = self.online.clone();
        }
        Ok(LearnStats { loss, mean_q })
    }
}

/// One ε-greedy actor: owns its env, refreshes the scenario every
/// `scenario_refresh_episodes` episodes.
struct Actor {
    seed: u64,
    ranges: RandomizationRanges,
    alpha: f64,
    refresh: usize,
    rng: Rng,
    env: LinkEnv,
    state: Option<StateVector>,
    episodes_in_scenario: usize,
    scenarios: u64,
    episode_reward: f64,
}

impl Actor {
    fn new(id: u64, cfg: &TrainerConfig, ranges: &RandomizationRanges) -> Result<Self> {
        let seed = derive_seed(cfg.seed, stream::ACTOR.wrapping_mul(1_000_003).wrapping_add(id));
        let env = Self::make_env(seed, 0, ranges, cfg.alpha)?;
        Ok(Self {
            seed,
            ranges: ranges.clone(),
            alpha: cfg.alpha,
            refresh: cfg.scenario_refresh_episodes,
            rng: rng_from_seed(derive_seed(seed, stream::ACTOR)),
            env,
            state: None,
            episodes_in_scenario: 0,
            scenarios: 1,
            episode_reward: 0.0,
        })
    }

    fn make_env(seed: u64, k: u64, ranges: &RandomizationRanges, alpha: f64) -> Result<LinkEnv> {
        let scenario_seed = derive_seed(seed, stream::SCENARIO.wrapping_mul(1 << 32).wrapping_add(k));
        let cfg = sample_scenario(ranges, scenario_seed)?;
        LinkEnv::new(cfg, derive_seed(scenario_seed, stream::EPISODE_ENV), alpha)
    }

    /// One env step; returns the transition and, when an episode ended, its
    /// undiscounted return.
    fn step(&mut self, net: &DenseNet, epsilon: f64) -> Result<(Transition, Option<f64>)> {
        let state = match self.state {
            Some(s) => s,
            None => {
                if self.episodes_in_scenario >= self.refresh {
                    self.env = Self::make_env(self.seed, self.scenarios, &self.ranges, self.alpha)?;
                    self.scenarios += 1;
                    self.episodes_in_scenario = 0;
                }
                self.episode_reward = 0.0;
                self.env.reset()
            }
        };
        let action = act_epsilon_greedy(net, &state, epsilon, &mut self.rng);
        let r = self.env.step(action)?;
        self.episode_reward += r.reward;
        self.state = r.next_state;
        let finished = if r.done {
            self.episodes_in_scenario += 1;
            Some(self.episode_reward)
        } else {
            None
        };
        Ok((
            Transition {
                state,
                action: action as u8,
                reward: r.reward,
                next_state: r.next_state,
                done: r.done,
            },
            finished,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub mean_loss: f64,
    pub mean_q: f64,
    pub epsilon: f64,
    pub eval_reward: f64,
}

pub fn write_train_log(path: impl AsRef<Path>, rows: &[TrainLogRow]) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: DenseNet,
    pub replay: ReplayBuffer,
    pub log: Vec<TrainLogRow>,
    pub env_steps: usize,
    pub learn_steps: usize,
    /// Mean undiscounted return of the training episodes completed.
    pub mean_episode_return: f64,
}

/// Where periodic checkpoints go, if anywhere.
#[derive(Debug, Clone, Default)]
pub struct TrainHooks {
    pub checkpoint_dir: Option<PathBuf>,
}

/// Fixed greedy evaluation used for the `eval_reward` log column.
struct LogEvaluator {
    envs: Vec<LinkEnv>,
    episodes: usize,
}

impl LogEvaluator {
    fn new(cfg: &TrainerConfig, ranges: &RandomizationRanges) -> Result<Self> {
        let base = derive_seed(cfg.seed, stream::EVAL);
        let envs = (0..4)
            .map(|k| {
                let sc = sample_scenario(ranges, derive_seed(base, k))?;
                LinkEnv::new(sc, derive_seed(base, 100 + k), cfg.alpha)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            envs,
            episodes: cfg.eval_episodes,
        })
    }

    fn run(&self, net: &DenseNet) -> Result<f64> {
        if self.episodes == 0 {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        let mut n = 0;
        for env in &self.envs {
            // fresh copy each time so every log row sees the same channel draws
            let mut env = env.clone();
            let mut p = GreedyPolicy { net };
            for _ in 0..self.episodes.div_ceil(self.envs.len()) {
                total += episode_return(&env.run_episode(&mut p)?, 1.0);
                n += 1;
            }
        }
        Ok(total / n as f64)
    }
}

#[derive(Default)]
struct WindowStats {
    loss: f64,
    q: f64,
    n: usize,
}

impl WindowStats {
    fn add(&mut self, s: LearnStats) {
        self.loss += s.loss;
        self.q += s.mean_q;
        self.n += 1;
    }

    fn take(&mut self) -> (f64, f64) {
        let out = if self.n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (self.loss / self.n as f64, self.q / self.n as f64)
        };
        *self = Self::default();
        out
    }
}

struct Bookkeeping<'a> {
    cfg: &'a TrainerConfig,
    hooks: &'a TrainHooks,
    evaluator: LogEvaluator,
    window: WindowStats,
    log: Vec<TrainLogRow>,
    returns_sum: f64,
    returns_n: usize,
}

impl Bookkeeping<'_> {
    /// Called after env step `done_steps` (1-based) has been absorbed.
    fn after_env_step(&mut self, done_steps: usize, online: &DenseNet) -> Result<()> {
        let cfg = self.cfg;
        if cfg.log_every > 0 && done_steps.is_multiple_of(cfg.log_every) {
            let (mean_loss, mean_q) = self.window.take();
            let row = TrainLogRow {
                step: done_steps,
                mean_loss,
                mean_q,
                epsilon: cfg.epsilon_at(done_steps),
                eval_reward: self.evaluator.run(online)?,
            };
            log::info!(
                "step {} loss {:.4} q {:.3} eps {:.3} eval {:.4}",
                row.step,
                row.mean_loss,
                row.mean_q,
                row.epsilon,
                row.eval_reward
            );
            self.log.push(row);
        }
        if cfg.checkpoint_every > 0 && done_steps.is_multiple_of(cfg.checkpoint_every) {
            if let Some(dir) = &self.hooks.checkpoint_dir {
                fs::create_dir_all(dir)?;
                online.save(dir.join(format!("checkpoint_{done_steps:08}.ldnn")))?;
            }
        }
        Ok(())
    }
}

/// Trains a DQN on scenarios drawn from `ranges`. A zero budget returns the
/// freshly initialized network.
pub fn train_teacher(cfg: &TrainerConfig, ranges: &RandomizationRanges, hooks: &TrainHooks) -> Result<TrainOutcome> {
    cfg.validate()?;
    ranges.validate()?;
    let net = DenseNet::init(&cfg.dims, cfg.seed)?;
    let replay = ReplayBuffer::new(cfg.replay_capacity)?;
    if cfg.total_env_steps == 0 {
        return Ok(TrainOutcome {
            net,
            replay,
            log: Vec::new(),
            env_steps: 0,
            learn_steps: 0,
            mean_episode_return: f64::NAN,
        });
    }
    let book = Bookkeeping {
        cfg,
        hooks,
        evaluator: LogEvaluator::new(cfg, ranges)?,
        window: WindowStats::default(),
        log: Vec::new(),
        returns_sum: 0.0,
        returns_n: 0,
    };
    if cfg.deterministic || cfg.n_actors == 1 {
        train_interleaved(cfg, ranges, net, replay, book)
    } else {
        train_concurrent(cfg, ranges, net, replay, book)
    }
}

fn finish(learner: DqnLearner, replay: ReplayBuffer, book: Bookkeeping, env_steps: usize) -> TrainOutcome {
    TrainOutcome {
        learn_steps: learner.steps(),
        net: learner.online,
        replay,
        log: book.log,
        env_steps,
        mean_episode_return: if book.returns_n > 0 {
            book.returns_sum / book.returns_n as f64
        } else {
            f64::NAN
        },
    }
}

fn train_interleaved(
    cfg: &TrainerConfig,
    ranges: &RandomizationRanges,
    net: DenseNet,
    mut replay: ReplayBuffer,
    mut book: Bookkeeping,
) -> Result<TrainOutcome> {
    let mut actor = Actor::new(0, cfg, ranges)?;
    let mut learner = DqnLearner::new(net, cfg);
    let mut snapshot = learner.online.clone();
    for step in 0..cfg.total_env_steps {
        let (t, ret) = actor.step(&snapshot, cfg.epsilon_at(step))?;
        replay.push(t);
        if let Some(r) = ret {
            book.returns_sum += r;
            book.returns_n += 1;
        }
        if (step + 1) % cfg.learn_every == 0 && replay.len() >= cfg.learn_start.max(1) {
            book.window.add(learner.learn(&replay)?);
            if learner.steps().is_multiple_of(cfg.publish_every) {
                snapshot = learner.online.clone();
            }
        }
        book.after_env_step(step + 1, &learner.online)?;
    }
    Ok(finish(learner, replay, book, cfg.total_env_steps))
}

/// Parameters broadcast to actors, tagged with a monotone version.
struct Snapshot {
    version: u64,
    net: DenseNet,
}

fn train_concurrent(
    cfg: &TrainerConfig,
    ranges: &RandomizationRanges,
    net: DenseNet,
    mut replay: ReplayBuffer,
    mut book: Bookkeeping,
) -> Result<TrainOutcome> {
    let published = RwLock::new(Arc::new(Snapshot {
        version: 0,
        net: net.clone(),
    }));
    let claimed = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let actor_error: Mutex<Option<Error>> = Mutex::new(None);
    let (tx, rx) = bounded::<(Transition, Option<f64>)>(cfg.queue_capacity);
    let mut learner = DqnLearner::new(net, cfg);
    let mut received = 0usize;

    let learner_result: Result<()> = thread::scope(|scope| {
        for id in 0..cfg.n_actors as u64 {
            let tx = tx.clone();
            let (published, claimed, stop, actor_error) = (&published, &claimed, &stop, &actor_error);
            scope.spawn(move || {
                let mut actor = match Actor::new(id, cfg, ranges) {
                    Ok(a) => a,
                    Err(e) => {
                        *actor_error.lock().unwrap() = Some(e);
                        stop.store(true, Ordering::SeqCst);
                        return;
                    }
                };
                let mut snap = published.read().unwrap().clone();
                loop {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let step = claimed.fetch_add(1, Ordering::SeqCst);
                    if step >= cfg.total_env_steps {
                        break;
                    }
                    {
                        let latest = published.read().unwrap();
                        if latest.version != snap.version {
                            snap = latest.clone();
                        }
                    }
                    match actor.step(&snap.net, cfg.epsilon_at(step)) {
                        Ok(item) => {
                            if tx.send(item).is_err() {
                                break;
                            }
                        }
                        Err(e) => {
                            *actor_error.lock().unwrap() = Some(e);
                            stop.store(true, Ordering::SeqCst);
                            break;
                        }
                    }
                }
            });
        }
        drop(tx);

        let timeout = std::time::Duration::from_millis(200);
        while received < cfg.total_env_steps {
            let (t, ret) = match rx.recv_timeout(timeout) {
                Ok(item) => item,
                Err(RecvTimeoutError::Timeout) if !stop.load(Ordering::SeqCst) => continue,
                Err(_) => break,
            };
            replay.push(t);
            received += 1;
            if let Some(r) = ret {
                book.returns_sum += r;
                book.returns_n += 1;
            }
            if received.is_multiple_of(cfg.learn_every) && replay.len() >= cfg.learn_start.max(1) {
                match learner.learn(&replay) {
                    Ok(s) => book.window.add(s),
                    Err(e) => {
                        stop.store(true, Ordering::SeqCst);
                        return Err(e);
                    }
                }
                if learner.steps().is_multiple_of(cfg.publish_every) {
                    let mut w = published.write().unwrap();
                    let version = w.version + 1;
                    *w = Arc::new(Snapshot {
                        version,
                        net: learner.online.clone(),
                    });
                }
            }
            if let Err(e) = book.after_env_step(received, &learner.online) {
                stop.store(true, Ordering::SeqCst);
                return Err(e);
            }
        }
        stop.store(true, Ordering::SeqCst);
        // unblock actors stuck on a full queue
        while rx.try_recv().is_ok() {}
        Ok(())
    });
    learner_result?;
    if let Some(e) = actor_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(finish(learner, replay, book, received))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transition(reward: f64, done: bool, next: Option<[f64; STATE_DIM]>) -> Transition {
        Transition {
            state: StateVector([0.1; STATE_DIM]),
            action: 3,
            reward,
            next_state: next.map(StateVector),
            done,
        }
    }

    #[test]
    fn replay_evicts_oldest_and_respects_capacity() {
        let mut rb = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            rb.push(transition(i as f64, true, None));
        }
        assert_eq!(rb.len(), 3);
        assert_eq!(rb.inserted(), 5);
        let rewards: Vec<f64> = rb.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut rb = ReplayBuffer::new(10).unwrap();
        for i in 0..10 {
            rb.push(transition(i as f64, true, None));
        }
        let mut rng = rng_from_seed(3);
        let mut counts = [0usize; 10];
        for i in rb.sample_indices(100_000, &mut rng) {
            counts[i] += 1;
        }
        // chi-square with 9 dof; 99.9% quantile is 27.88
        let expected = 10_000.0;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 27.88, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn replay_dump_round_trip() {
        let mut rb = ReplayBuffer::new(4).unwrap();
        for i in 0..6 {
            let done = i % 2 == 0;
            rb.push(transition(
                i as f64 * 0.5,
                done,
                (!done).then_some([i as f64; STATE_DIM]),
            ));
        }
        let bytes = rb.to_bytes();
        let back = ReplayBuffer::from_bytes(&bytes).unwrap();
        assert_eq!(back.iter().collect::<Vec<_>>(), rb.iter().collect::<Vec<_>>());
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            ReplayBuffer::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn epsilon_greedy_extremes() {
        let net = DenseNet::init(&net::mlp_dims(1, 8), 0).unwrap();
        let s = StateVector([0.3; STATE_DIM]);
        let greedy = argmax(&net.forward(s.as_slice()));
        let mut rng = rng_from_seed(0);
        for _ in 0..100 {
            assert_eq!(act_epsilon_greedy(&net, &s, 0.0, &mut rng), greedy);
        }
        let mut counts = [0usize; NUM_MCS];
        let n = 100_000;
        for _ in 0..n {
            counts[act_epsilon_greedy(&net, &s, 1.0, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 28.0).abs() < 0.01);
        }
        let flat = DenseNet::zeros(&net::mlp_dims(1, 8)).unwrap();
        assert_eq!(act_epsilon_greedy(&flat, &s, 0.0, &mut rng), 0);
    }

    #[test]
    fn td_target_examples() {
        let mut target = DenseNet::zeros(&net::mlp_dims(1, 4)).unwrap();
        // output bias sets every Q to 2 regardless of input
        target.layers_mut().last_mut().unwrap().bias.fill(2.0);
        let done = transition(2.5703, true, None);
        let live = transition(1.0, false, Some([0.0; STATE_DIM]));
        let y = td_target(&[&done, &live], &target, 0.95);
        assert_eq!(y[0], 2.5703);
        assert!((y[1] - 2.9).abs() < 1e-12);
        let y0 = td_target(&[&done, &live], &target, 0.0);
        assert_eq!(y0, vec![2.5703, 1.0]);
    }

    #[test]
    fn td_loss_gradient_only_on_taken_action() {
        let q = Array2::from_elem((2, NUM_MCS), 1.0);
        let (loss, g) = td_loss(&q, &[4, 9], &[3.0, 0.0]);
        assert!((loss - (0.5 * 4.0 + 0.5 * 1.0)).abs() < 1e-12);
        assert_eq!(g[[0, 4]], -2.0);
        assert_eq!(g[[1, 9]], 1.0);
        assert_eq!(g.iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn target_net_is_a_past_online_snapshot() {
        let cfg = TrainerConfig {
            dims: net::mlp_dims(1, 16),
            batch_size: 8,
            target_update_period: 5,
            ..TrainerConfig::default()
        };
        let mut rb = ReplayBuffer::new(64).unwrap();
        for i in 0..64 {
            rb.push(transition(
                (i % 7) as f64,
                i % 3 == 0,
                Some([0.05 * (i % 5) as f64; STATE_DIM]),
            ));
        }
        let mut learner = DqnLearner::new(DenseNet::init(&cfg.dims, 1).unwrap(), &cfg);
        let mut history = vec![learner.online.fingerprint()];
        for _ in 0..23 {
            learner.learn(&rb).unwrap();
            history.push(learner.online.fingerprint());
            let t = learner.target.fingerprint();
            assert!(history.contains(&t));
            if learner.steps().is_multiple_of(5) {
                assert_eq!(t, learner.online.fingerprint());
            }
        }
        // 23 steps: last refresh at 20
        assert_eq!(learner.target.fingerprint(), history[20]);
    }

    #[test]
    fn zero_budget_returns_initial_net() {
        let cfg = TrainerConfig {
            dims: net::mlp_dims(2, 16),
            total_env_steps: 0,
            seed: 4,
            ..TrainerConfig::default()
        };
        let out = train_teacher(&cfg, &RandomizationRanges::standard(), &TrainHooks::default()).unwrap();
        assert_eq!(out.net, DenseNet::init(&cfg.dims, 4).unwrap());
        assert!(out.replay.is_empty());
    }

    fn small_cfg(deterministic: bool) -> TrainerConfig {
        TrainerConfig {
            dims: net::mlp_dims(2, 16),
            total_env_steps: 3_000,
            batch_size: 32,
            learn_start: 200,
            target_update_period: 100,
            publish_every: 50,
            log_every: 1_000,
            eval_episodes: 20,
            replay_capacity: 2_000,
            deterministic,
            n_actors: 3,
            seed: 7,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn deterministic_training_is_bit_reproducible() {
        let ranges = RandomizationRanges::standard();
        let a = train_teacher(&small_cfg(true), &ranges, &TrainHooks::default()).unwrap();
        let b = train_teacher(&small_cfg(true), &ranges, &TrainHooks::default()).unwrap();
        assert_eq!(a.net.fingerprint(), b.net.fingerprint());
        assert_eq!(a.replay.to_bytes(), b.replay.to_bytes());
        assert_eq!(a.log.len(), 3);
        assert_eq!(a.replay.len(), 2_000);
        // learner runs when (step+1) % 4 == 0 and the buffer holds >= 200: 200, 204, …, 3000
        assert_eq!(a.learn_steps, 701);
    }

    #[test]
    fn concurrent_training_consumes_the_whole_budget() {
        let ranges = RandomizationRanges::standard();
        let out = train_teacher(&small_cfg(false), &ranges, &TrainHooks::default()).unwrap();
        assert_eq!(out.env_steps, 3_000);
        assert_eq!(out.replay.inserted(), 3_000);
        assert!(out.learn_steps > 600);
        assert!(out.net.params_flat().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainerConfig {
            checkpoint_every: 1_000,
            ..small_cfg(true)
        };
        let hooks = TrainHooks {
            checkpoint_dir: Some(dir.path().to_path_buf()),
        };
        train_teacher(&cfg, &RandomizationRanges::standard(), &hooks).unwrap();
        let n = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(n, 3);
        DenseNet::load(dir.path().join("checkpoint_00003000.ldnn")).unwrap();
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = TrainerConfig {
            gamma: 1.5,
            ..TrainerConfig::default()
        };
        assert!(matches!(
            train_teacher(&bad, &RandomizationRanges::standard(), &TrainHooks::default()),
            Err(Error::Config(_))
        ));
    }
}
