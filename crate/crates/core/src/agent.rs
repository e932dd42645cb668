//! DQN with a target network, FIFO replay and ε-expert exploration.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{
    adam_step, attention_trunk, huber, huber_grad, AdamState, DenseLayer, Gradients, Layer, NetError, Network, Tensor,
};
use crate::sim::{Action, FEATURES_PER_VEHICLE, OBSERVED_VEHICLES, OBS_DIM};

pub const REPLAY_CAPACITY: usize = 15_000;
pub const BATCH_SIZE: usize = 32;
pub const GAMMA: f64 = 0.9;
pub const LEARNING_RATE: f64 = 1e-4;
pub const EPSILON_END: f64 = 0.05;
pub const TARGET_SYNC_EVERY: u64 = 200;
pub const WARMUP_TRANSITIONS: usize = 1_000;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("buffer holds {len} items, {requested} requested")]
    Undersized { len: usize, requested: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub r_origin: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    /// The action came from the advisor rather than the Q-network.
    pub expert_flag: bool,
}

/// Fixed-capacity FIFO ring.
#[derive(Debug, Clone)]
pub struct RingBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    next: usize,
}

impl<T> RingBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring buffer capacity must be positive");
        RingBuffer { items: Vec::with_capacity(capacity.min(1 << 16)), capacity, next: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest item when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Items from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// `n` distinct items drawn uniformly.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<&T>, AgentError> {
        if self.items.len() < n || n == 0 {
            return Err(AgentError::Undersized { len: self.items.len(), requested: n });
        }
        Ok(index::sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect())
    }
}

pub type ReplayBuffer = RingBuffer<Transition>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationMode {
    /// Explore with advisor decisions.
    Expert,
    /// Classic uniform-random exploration.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
    pub mode: ExplorationMode,
}

impl ExplorationSchedule {
    /// Linear decay from 1.0 over the first 30% of `total_steps`.
    pub fn for_run(total_steps: u64, mode: ExplorationMode) -> Self {
        ExplorationSchedule { start: 1.0, end: EPSILON_END, decay_steps: (total_steps * 3 / 10).max(1), mode }
    }

    pub fn constant(epsilon: f64, mode: ExplorationMode) -> Self {
        ExplorationSchedule { start: epsilon, end: epsilon, decay_steps: 1, mode }
    }

    pub fn epsilon(&self, step: u64) -> f64 {
        if step >= self.decay_steps {
            self.end
        } else {
            let frac = step as f64 / self.decay_steps as f64;
            self.start + (self.end - self.start) * frac
        }
    }
}

/// Q-network: per-vehicle shared dense 4→16, SE over the 11 vehicle
/// channels, then 176→128→5.
pub fn q_network<R: Rng>(rng: &mut R) -> Network {
    let mut layers = attention_trunk(OBSERVED_VEHICLES, FEATURES_PER_VEHICLE, 16, 4, rng);
    layers.extend([
        Layer::Dense(DenseLayer::new(OBSERVED_VEHICLES * 16, 128, rng)),
        Layer::Relu,
        Layer::Dense(DenseLayer::new(128, Action::COUNT, rng)),
    ]);
    Network::new(vec![OBS_DIM], layers)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn q_values(qnet: &Network, obs: &[f64]) -> Result<Vec<f64>, NetError> {
    let x = Tensor::new(vec![1, obs.len()], obs.to_vec())?;
    Ok(qnet.predict(&x)?.into_data())
}

pub fn greedy_action(qnet: &Network, obs: &[f64]) -> Result<Action, NetError> {
    let q = q_values(qnet, obs)?;
    Ok(Action::from_id(argmax(&q)).expect("network head has one output per action"))
}

/// ε-expert (or ε-greedy) selection. `expert` is only invoked on the
/// exploration branch in [`ExplorationMode::Expert`].
pub fn select_action<R: Rng, F: FnOnce() -> Action>(
    obs: &[f64],
    qnet: &Network,
    schedule: &ExplorationSchedule,
    step: u64,
    rng: &mut R,
    expert: F,
) -> Result<(Action, bool), NetError> {
    let eps = schedule.epsilon(step);
    if rng.gen::<f64>() < eps {
        return Ok(match schedule.mode {
            ExplorationMode::Expert => (expert(), true),
            ExplorationMode::Random => (Action::ALL[rng.gen_range(0..Action::COUNT)], false),
        });
    }
    Ok((greedy_action(qnet, obs)?, false))
}

struct BatchTargets {
    states: Tensor,
    targets: Vec<f64>,
}

fn batch_targets(
    target_net: &Network,
    batch: &[&Transition],
    rewards_total: &[f64],
    gamma: f64,
) -> Result<BatchTargets, NetError> {
    let states = Tensor::from_rows(&batch.iter().map(|t| t.state.as_slice()).collect::<Vec<_>>())?;
    let next = Tensor::from_rows(&batch.iter().map(|t| t.next_state.as_slice()).collect::<Vec<_>>())?;
    let q_next = target_net.predict(&next)?;
    let targets = batch
        .iter()
        .zip(rewards_total)
        .enumerate()
        .map(|(i, (t, r))| {
            if t.done {
                *r
            } else {
                let best = q_next.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                r + gamma * best
            }
        })
        .collect();
    Ok(BatchTargets { states, targets })
}

/// Mean Huber TD loss and its gradient with respect to `qnet`.
pub fn dqn_loss_and_grads(
    qnet: &Network,
    target_net: &Network,
    batch: &[&Transition],
    rewards_total: &[f64],
    gamma: f64,
) -> Result<(f64, Gradients), NetError> {
    if batch.len() != rewards_total.len() {
        return Err(NetError::Shape(format!("{} transitions but {} rewards", batch.len(), rewards_total.len())));
    }
    let bt = batch_targets(target_net, batch, rewards_total, gamma)?;
    let pass = qnet.forward(&bt.states)?;
    let n = batch.len() as f64;
    let width = Action::COUNT;
    let mut upstream = Tensor::zeros(vec![batch.len(), width]);
    let mut loss = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let q = pass.output.row(i)[t.action.id()];
        loss += huber(q, bt.targets[i]);
        upstream.data_mut()[i * width + t.action.id()] = huber_grad(q, bt.targets[i]) / n;
    }
    let (grads, _) = qnet.backward(&pass, &upstream)?;
    Ok((loss / n, grads))
}

/// One Adam step on `qnet` against a frozen target. Returns `None` for an
/// empty batch.
pub fn dqn_train_step(
    qnet: &mut Network,
    adam: &mut AdamState,
    target_net: &Network,
    batch: &[&Transition],
    rewards_total: &[f64],
    gamma: f64,
) -> Result<Option<f64>, NetError> {
    if batch.is_empty() {
        return Ok(None);
    }
    let (loss, grads) = dqn_loss_and_grads(qnet, target_net, batch, rewards_total, gamma)?;
    adam_step(qnet, &grads, adam)?;
    Ok(Some(loss))
}

pub fn sync_target(qnet: &Network, target_net: &mut Network) -> Result<(), NetError> {
    target_net.copy_params_from(qnet)
}

/// Online network, target network, optimizer and sync cadence.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub qnet: Network,
    pub target: Network,
    pub adam: AdamState,
    pub gamma: f64,
    pub sync_every: u64,
    pub gradient_steps: u64,
}

impl DqnAgent {
    pub fn new(qnet: Network, lr: f64, gamma: f64, sync_every: u64) -> Self {
        let target = qnet.clone();
        let adam = AdamState::new(&qnet, lr);
        DqnAgent { qnet, target, adam, gamma, sync_every, gradient_steps: 0 }
    }

    pub fn train_step(&mut self, batch: &[&Transition], rewards_total: &[f64]) -> Result<Option<f64>, NetError> {
        let loss = dqn_train_step(&mut self.qnet, &mut self.adam, &self.target, batch, rewards_total, self.gamma)?;
        if loss.is_some() {
            self.gradient_steps += 1;
            if self.gradient_steps.is_multiple_of(self.sync_every) {
                sync_target(&self.qnet, &mut self.target)?;
            }
        }
        Ok(loss)
    }

    pub fn greedy(&self, obs: &[f64]) -> Result<Action, NetError> {
        greedy_action(&self.qnet, obs)
    }
}
