//! Attention discriminator and imitation-reward shaping.
//!
//! `D(s, a)` is trained to tell advisor-chosen pairs from the agent's own
//! greedy choices. Its output becomes a shaping bonus
//! `-ln(1 - D + eta)` added (scaled by `beta`) to the environment reward.
//! Nothing flows back into the Q-network except through that reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::RingBuffer;
use crate::net::{adam_step, attention_trunk, AdamState, DenseLayer, Gradients, Layer, NetError, Network, Tensor};
use crate::sim::{Action, FEATURES_PER_VEHICLE, OBSERVED_VEHICLES, OBS_DIM};

pub const EXPERT_PAIR_CAPACITY: usize = 15_000;
const TRUNK_WIDTH: usize = OBSERVED_VEHICLES * 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Imitation reward weight.
    pub beta: f64,
    /// Log offset; also the probability clamp inside the discriminator loss.
    pub eta: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { beta: 0.2, eta: 1e-8 }
    }
}

/// A state-action pair fed to the discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateAction {
    pub state: Vec<f64>,
    pub action: Action,
}

pub type ExpertPairBuffer = RingBuffer<StateAction>;

pub fn imitation_reward(d: f64, cfg: &RewardConfig) -> f64 {
    -(1.0 - d + cfg.eta).ln()
}

pub fn total_reward(r_origin: f64, r_imit: f64, cfg: &RewardConfig) -> f64 {
    r_origin + cfg.beta * r_imit
}

/// SE trunk over the state, then `[features ‖ one-hot(a)] → 64 → 1 → σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorNet {
    pub trunk: Network,
    pub head: Network,
}

/// Forward state kept for backward.
pub struct DiscPass {
    trunk: crate::net::ForwardPass,
    head: crate::net::ForwardPass,
    pub probs: Vec<f64>,
}

impl DiscriminatorNet {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let trunk = Network::new(vec![OBS_DIM], attention_trunk(OBSERVED_VEHICLES, FEATURES_PER_VEHICLE, 16, 4, rng));
        let head = Network::new(
            vec![TRUNK_WIDTH + Action::COUNT],
            vec![
                Layer::Dense(DenseLayer::new(TRUNK_WIDTH + Action::COUNT, 64, rng)),
                Layer::Relu,
                Layer::Dense(DenseLayer::new(64, 1, rng)),
                Layer::Sigmoid,
            ],
        );
        DiscriminatorNet { trunk, head }
    }

    /// All-zero parameters; every output is σ(0) = 0.5.
    pub fn zeroed() -> Self {
        let mut net = DiscriminatorNet::new(&mut rand::rngs::mock::StepRng::new(0, 0));
        for p in net.trunk.params_mut().into_iter().chain(net.head.params_mut()) {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        net
    }

    pub fn forward(&self, pairs: &[(&[f64], Action)]) -> Result<DiscPass, NetError> {
        let states = Tensor::from_rows(&pairs.iter().map(|(s, _)| *s).collect::<Vec<_>>())?;
        let trunk = self.trunk.forward(&states)?;
        let feats = trunk.output.data();
        let width = TRUNK_WIDTH + Action::COUNT;
        let mut head_in = Vec::with_capacity(pairs.len() * width);
        for (i, (_, a)) in pairs.iter().enumerate() {
            head_in.extend_from_slice(&feats[i * TRUNK_WIDTH..(i + 1) * TRUNK_WIDTH]);
            head_in.extend_from_slice(&a.one_hot());
        }
        let head = self.head.forward(&Tensor::new(vec![pairs.len(), width], head_in)?)?;
        let probs = head.output.data().to_vec();
        Ok(DiscPass { trunk, head, probs })
    }

    /// Gradients of `sum_i upstream_i * D_i`, trunk blocks first.
    pub fn backward(&self, pass: &DiscPass, upstream: &[f64]) -> Result<Gradients, NetError> {
        let up = Tensor::new(vec![upstream.len(), 1], upstream.to_vec())?;
        let (head_grads, head_in_grad) = self.head.backward(&pass.head, &up)?;
        let width = TRUNK_WIDTH + Action::COUNT;
        let trunk_up: Vec<f64> =
            head_in_grad.data().chunks_exact(width).flat_map(|row| row[..TRUNK_WIDTH].iter().copied()).collect();
        let (trunk_grads, _) = self.trunk.backward(&pass.trunk, &Tensor::new(vec![upstream.len(), TRUNK_WIDTH], trunk_up)?)?;
        let mut all = trunk_grads.0;
        all.extend(head_grads.0);
        Ok(Gradients(all))
    }

    pub fn prob(&self, state: &[f64], action: Action) -> Result<f64, NetError> {
        Ok(self.forward(&[(state, action)])?.probs[0])
    }

    pub fn probs(&self, pairs: &[(&[f64], Action)]) -> Result<Vec<f64>, NetError> {
        Ok(self.forward(pairs)?.probs)
    }

    pub fn checksum(&self) -> u64 {
        self.trunk.checksum() ^ self.head.checksum().rotate_left(1)
    }
}

pub fn disc_prob(net: &DiscriminatorNet, state: &[f64], action: Action) -> Result<f64, NetError> {
    net.prob(state, action)
}

/// Discriminator with its optimizer.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub net: DiscriminatorNet,
    trunk_adam: AdamState,
    head_adam: AdamState,
    pub eta: f64,
}

/// Loss value and the mean D over each half of the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscStep {
    pub loss: f64,
    pub mean_expert: f64,
    pub mean_agent: f64,
}

/// `-(1/B) Σ [ln D(ex) + ln(1 - D(ag))]` with D clamped to `[eta, 1-eta]`,
/// and its gradient.
pub fn disc_loss_and_grads(
    net: &DiscriminatorNet,
    expert: &[(&[f64], Action)],
    agent: &[(&[f64], Action)],
    eta: f64,
) -> Result<(DiscStep, Gradients), NetError> {
    if expert.len() != agent.len() || expert.is_empty() {
        return Err(NetError::Shape(format!("batches of {} expert and {} agent pairs", expert.len(), agent.len())));
    }
    let b = expert.len();
    let pairs: Vec<(&[f64], Action)> = expert.iter().chain(agent).copied().collect();
    let pass = net.forward(&pairs)?;
    let n = b as f64;
    let (lo, hi) = (eta, 1.0 - eta);
    let mut loss = 0.0;
    let mut upstream = vec![0.0; 2 * b];
    for (i, &d) in pass.probs.iter().enumerate() {
        let c = d.clamp(lo, hi);
        let inside = d > lo && d < hi;
        if i < b {
            loss -= c.ln();
            if inside {
                upstream[i] = -1.0 / (n * c);
            }
        } else {
            loss -= (1.0 - c).ln();
            if inside {
                upstream[i] = 1.0 / (n * (1.0 - c));
            }
        }
    }
    let grads = net.backward(&pass, &upstream)?;
    let mean_expert = pass.probs[..b].iter().sum::<f64>() / n;
    let mean_agent = pass.probs[b..].iter().sum::<f64>() / n;
    Ok((DiscStep { loss: loss / n, mean_expert, mean_agent }, grads))
}

impl Discriminator {
    pub fn new(net: DiscriminatorNet, lr: f64, eta: f64) -> Self {
        let trunk_adam = AdamState::new(&net.trunk, lr);
        let head_adam = AdamState::new(&net.head, lr);
        Discriminator { net, trunk_adam, head_adam, eta }
    }

    /// One Adam step on the discriminator parameters.
    pub fn train_step(&mut self, expert: &[(&[f64], Action)], agent: &[(&[f64], Action)]) -> Result<DiscStep, NetError> {
        let (step, grads) = disc_loss_and_grads(&self.net, expert, agent, self.eta)?;
        let n_trunk = self.net.trunk.params().len();
        let mut blocks = grads.0;
        let head = Gradients(blocks.split_off(n_trunk));
        let trunk = Gradients(blocks);
        if trunk.is_finite() && head.is_finite() {
            adam_step(&mut self.net.trunk, &trunk, &mut self.trunk_adam)?;
            adam_step(&mut self.net.head, &head, &mut self.head_adam)?;
        } else {
            log::warn!("non-finite discriminator gradient, update skipped");
        }
        Ok(step)
    }

    /// `r_origin + beta * R_imit(D(s, a))` for each pair.
    pub fn shaped_rewards(&self, pairs: &[(&[f64], Action)], r_origin: &[f64], cfg: &RewardConfig) -> Result<Vec<f64>, NetError> {
        let d = self.net.probs(pairs)?;
        Ok(d.iter().zip(r_origin).map(|(d, r)| total_reward(*r, imitation_reward(*d, cfg), cfg)).collect())
    }
}

/// Samples `b` pairs from each buffer and trains once. Returns `None` when
/// either buffer is too small.
pub fn disc_train_step<R: Rng>(
    disc: &mut Discriminator,
    expert: &ExpertPairBuffer,
    agent: &ExpertPairBuffer,
    b: usize,
    rng: &mut R,
) -> Result<Option<DiscStep>, NetError> {
    if expert.len() < b || agent.len() < b {
        return Ok(None);
    }
    let ex = expert.sample(b, rng).expect("size checked");
    let ag = agent.sample(b, rng).expect("size checked");
    let ex: Vec<(&[f64], Action)> = ex.iter().map(|p| (p.state.as_slice(), p.action)).collect();
    let ag: Vec<(&[f64], Action)> = ag.iter().map(|p| (p.state.as_slice(), p.action)).collect();
    disc.train_step(&ex, &ag).map(Some)
}
