//! Training runs for the five configurations, per-episode metrics logs,
//! plots and cross-variant comparison.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{describe_scene, reflect, Advisor, AdvisorKind, REFLECTION_TAIL};
use crate::agent::{
    q_network, select_action, DqnAgent, ExplorationMode, ExplorationSchedule, ReplayBuffer, Transition, BATCH_SIZE, EPSILON_END,
    GAMMA, LEARNING_RATE, REPLAY_CAPACITY, TARGET_SYNC_EVERY, WARMUP_TRANSITIONS,
};
use crate::disc::{
    disc_train_step, Discriminator, DiscriminatorNet, ExpertPairBuffer, RewardConfig, StateAction, EXPERT_PAIR_CAPACITY,
};
use crate::memory::{
    embed_state, ExperienceRecord, HnswParams, MemoryError, MemoryStore, DEFAULT_K, DEFAULT_LAMBDA, WRITE_PROBABILITY,
};
use crate::net::NetError;
use crate::safety::{
    build_dataset, gate_action, train_risk_model, FallbackTier, GateThresholds, PredictorKind, RiskDataset, RiskGate, RiskModel,
    RiskVariant, SafetyError, TrainReport,
};
use crate::sim::{reset, step, Action, SimConfig, SimError, StepRecord, WorldState, OBS_DIM};

pub const PLOT_WINDOW: usize = 500;
pub const CONVERGENCE_WINDOW: usize = 200;
pub const CONVERGENCE_FRACTION: f64 = 0.9;
pub const DEFAULT_STEPS: u64 = 200_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("empty episode")]
    EmptyEpisode,
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("network: {0}")]
    Net(#[from] NetError),
    #[error("memory: {0}")]
    Memory(#[from] MemoryError),
    #[error("safety: {0}")]
    Safety(#[from] SafetyError),
    #[error("metrics log: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("run cancelled at step {0}")]
    Cancelled(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    VanillaDqn,
    SaradG,
    SaradDg,
    SaradDgh,
    SaradDlh,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::VanillaDqn, Variant::SaradG, Variant::SaradDg, Variant::SaradDgh, Variant::SaradDlh];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VanillaDqn => "vanilla_dqn",
            Variant::SaradG => "sarad_g",
            Variant::SaradDg => "sarad_dg",
            Variant::SaradDgh => "sarad_dgh",
            Variant::SaradDlh => "sarad_dlh",
        }
    }

    /// Advisor-guided exploration; vanilla explores uniformly at random.
    pub fn uses_expert(self) -> bool {
        self != Variant::VanillaDqn
    }

    pub fn uses_discriminator(self) -> bool {
        matches!(self, Variant::SaradDg | Variant::SaradDgh | Variant::SaradDlh)
    }

    pub fn uses_predictor(self) -> bool {
        self != Variant::VanillaDqn
    }

    pub fn uses_rag(self) -> bool {
        matches!(self, Variant::SaradDgh | Variant::SaradDlh)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            format!("unknown variant {s:?} (expected one of vanilla_dqn, sarad_g, sarad_dg, sarad_dgh, sarad_dlh)")
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentParams {
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub warmup: usize,
    pub target_sync: u64,
    pub epsilon_end: f64,
    /// Fraction of the run over which epsilon decays linearly from 1.
    pub decay_fraction: f64,
}

impl Default for AgentParams {
    fn default() -> Self {
        AgentParams {
            lr: LEARNING_RATE,
            gamma: GAMMA,
            batch_size: BATCH_SIZE,
            replay_capacity: REPLAY_CAPACITY,
            warmup: WARMUP_TRANSITIONS,
            target_sync: TARGET_SYNC_EVERY,
            epsilon_end: EPSILON_END,
            decay_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscParams {
    pub lr: f64,
    pub beta: f64,
    pub eta: f64,
    pub capacity: usize,
}

impl Default for DiscParams {
    fn default() -> Self {
        let r = RewardConfig::default();
        DiscParams { lr: LEARNING_RATE, beta: r.beta, eta: r.eta, capacity: EXPERT_PAIR_CAPACITY }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryParams {
    pub k: usize,
    pub lambda: f64,
    pub write_probability: f64,
    pub hnsw: HnswParams,
}

impl Default for MemoryParams {
    fn default() -> Self {
        MemoryParams { k: DEFAULT_K, lambda: DEFAULT_LAMBDA, write_probability: WRITE_PROBABILITY, hnsw: HnswParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyParams {
    pub thresholds: GateThresholds,
    /// Pre-trained model; when absent one is trained from risky-policy data.
    pub model_path: Option<PathBuf>,
    pub model_variant: RiskVariant,
    /// Remote scorer consulted before the local model.
    pub predictor: PredictorKind,
    pub data_episodes: usize,
    pub per_class: usize,
}

impl Default for SafetyParams {
    fn default() -> Self {
        SafetyParams {
            thresholds: GateThresholds::default(),
            model_path: None,
            model_variant: RiskVariant::GbdtLr,
            predictor: PredictorKind::Local,
            data_episodes: 1000,
            per_class: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub variant: Variant,
    pub total_env_steps: u64,
    pub seed: u64,
    pub sim: SimConfig,
    pub agent: AgentParams,
    pub disc: DiscParams,
    pub memory: MemoryParams,
    pub safety: SafetyParams,
    pub advisor: AdvisorKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::VanillaDqn,
            total_env_steps: DEFAULT_STEPS,
            seed: 0,
            sim: SimConfig::default(),
            agent: AgentParams::default(),
            disc: DiscParams::default(),
            memory: MemoryParams::default(),
            safety: SafetyParams::default(),
            advisor: AdvisorKind::Scripted,
        }
    }
}

impl RunConfig {
    pub fn new(variant: Variant, total_env_steps: u64, seed: u64) -> Self {
        RunConfig { variant, total_env_steps, seed, ..RunConfig::default() }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        self.sim.validate()?;
        self.advisor.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let a = &self.agent;
        if a.batch_size == 0 || a.replay_capacity < a.batch_size || a.target_sync == 0 {
            return fail("batch size, replay capacity and target sync must be positive with capacity >= batch".into());
        }
        if !(a.lr > 0.0) || !(0.0..=1.0).contains(&a.gamma) || !(0.0..=1.0).contains(&a.epsilon_end) {
            return fail("lr must be positive; gamma and epsilon_end in [0, 1]".into());
        }
        if !(a.decay_fraction > 0.0 && a.decay_fraction <= 1.0) {
            return fail("decay_fraction must be in (0, 1]".into());
        }
        if !(self.disc.lr > 0.0 && self.disc.beta >= 0.0 && self.disc.eta > 0.0) || self.disc.capacity < a.batch_size {
            return fail("discriminator lr, beta, eta and capacity out of range".into());
        }
        if !(0.0..=1.0).contains(&self.memory.lambda) || !(0.0..=1.0).contains(&self.memory.write_probability) {
            return fail("memory lambda and write_probability must be in [0, 1]".into());
        }
        let t = &self.safety.thresholds;
        if !(0.0 < t.caution && t.caution <= t.emergency && t.emergency < 1.0) {
            return fail("gate thresholds must satisfy 0 < caution <= emergency < 1".into());
        }
        if let PredictorKind::Remote { endpoint, timeout_ms } = &self.safety.predictor {
            if endpoint.trim().is_empty() || *timeout_ms == 0 {
                return fail("remote predictor needs an endpoint and a positive timeout".into());
            }
        }
        Ok(())
    }

    pub fn stem(&self) -> String {
        format!("{}_seed{}", self.variant, self.seed)
    }
}

/// `(avg_runtime, avg_reward, total_reward)` from per-step rewards and the
/// timestamps `t_0 ..= t_n`.
pub fn episode_metrics(rewards: &[f64], timestamps: &[f64]) -> Result<(f64, f64, f64), HarnessError> {
    if rewards.is_empty() || timestamps.len() != rewards.len() + 1 {
        return Err(HarnessError::EmptyEpisode);
    }
    let total: f64 = rewards.iter().sum();
    let runtime = timestamps[timestamps.len() - 1] - timestamps[0];
    Ok((runtime, total / rewards.len() as f64, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub avg_runtime: f64,
    pub avg_reward: f64,
    pub total_reward: f64,
    pub collided: bool,
    pub steps: u64,
}

/// One metrics-log row per finished episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: Variant,
    pub seed: u64,
    pub episode: u64,
    pub global_step: u64,
    pub steps: u64,
    pub avg_runtime: f64,
    pub avg_reward: f64,
    pub total_reward: f64,
    pub collided: bool,
    pub epsilon: f64,
    pub d_expert: Option<f64>,
    pub d_agent: Option<f64>,
    pub override_emergency: u64,
    pub override_caution: u64,
    pub memory_size: u64,
}

pub const METRICS_HEADER: &str = "variant,seed,episode,global_step,steps,avg_runtime,avg_reward,total_reward,collided,epsilon,d_expert,d_agent,override_emergency,override_caution,memory_size";

impl MetricsRow {
    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            episode: self.episode,
            avg_runtime: self.avg_runtime,
            avg_reward: self.avg_reward,
            total_reward: self.total_reward,
            collided: self.collided,
            steps: self.steps,
        }
    }
}

/// Reads one or more metrics logs; comment lines (`#`) are skipped.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let headers = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if headers != METRICS_HEADER {
        return Err(HarnessError::Config(format!("{} is not a metrics log (header {headers:?})", path.display())));
    }
    reader.deserialize().map(|r| r.map_err(HarnessError::from)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounters {
    pub advisor: u64,
    pub discriminator: u64,
    pub memory: u64,
    pub safety: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub collisions: u64,
    pub calls: CallCounters,
    pub memory_size: u64,
    pub predictor_failures: u64,
    pub qnet_checksum: u64,
    pub risk_report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub global_step: u64,
    pub total_steps: u64,
    pub episodes: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d4_9bb1_1331_11eb);
    z ^ (z >> 31)
}

/// Reset seed of episode `episode` in a run seeded with `seed`.
pub fn episode_seed(seed: u64, episode: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ episode)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Action mix of the deliberately risky data-collection policy, in
/// `Action::ALL` order.
pub const RISKY_WEIGHTS: [f64; Action::COUNT] = [0.25, 0.1, 0.25, 0.3, 0.1];

pub fn risky_action<R: Rng>(rng: &mut R) -> Action {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, w) in Action::ALL.into_iter().zip(RISKY_WEIGHTS) {
        acc += w;
        if u < acc {
            return a;
        }
    }
    Action::Slower
}

/// Episodes of the risky policy in trajectory-dump form.
pub fn collect_risk_trajectories(sim: &SimConfig, episodes: usize, seed: u64) -> Result<Vec<Vec<StepRecord>>, HarnessError> {
    let mut rng = stream(seed, 11);
    (0..episodes as u64)
        .map(|e| {
            let (mut world, _) = reset(sim, episode_seed(seed ^ 0x7a5c, e))?;
            let mut traj = Vec::new();
            while !world.done {
                let a = risky_action(&mut rng);
                let before = world.clone();
                let o = step(&mut world, a, sim)?;
                traj.push(StepRecord::new(&before, a, &o));
            }
            Ok(traj)
        })
        .collect()
}

/// Collision-episode fraction of the risky policy, optionally gated.
pub fn risky_collision_rate(
    sim: &SimConfig,
    model: Option<&RiskModel>,
    thresholds: &GateThresholds,
    episodes: usize,
    seed: u64,
) -> Result<f64, HarnessError> {
    let mut rng = stream(seed, 12);
    let mut collisions = 0;
    for e in 0..episodes as u64 {
        let (mut world, mut obs) = reset(sim, episode_seed(seed ^ 0x9a7e, e))?;
        while !world.done {
            let proposed = risky_action(&mut rng);
            let action = model.map_or(proposed, |m| gate_action(m, &obs, proposed, thresholds, sim).0);
            let o = step(&mut world, action, sim)?;
            obs = o.observation;
            if o.collided {
                collisions += 1;
            }
        }
    }
    Ok(collisions as f64 / episodes.max(1) as f64)
}

/// Risk model for a run: loaded from `model_path`, or trained on freshly
/// collected risky-policy data.
pub fn provision_risk_model(cfg: &RunConfig) -> Result<(RiskModel, Option<TrainReport>), HarnessError> {
    if let Some(path) = &cfg.safety.model_path {
        return Ok((RiskModel::load(path)?, None));
    }
    let data_seed = splitmix64(cfg.seed ^ 0xda7a);
    let trajs = collect_risk_trajectories(&cfg.sim, cfg.safety.data_episodes, data_seed)?;
    let dataset = build_dataset(&trajs, cfg.safety.per_class, &cfg.sim, data_seed);
    let (model, report) = train_risk_model(&dataset, cfg.safety.model_variant, data_seed)?;
    log::info!("risk model trained on {} samples, held-out AUC {:.3}", dataset.samples.len(), report.held_out_auc);
    Ok((model, Some(report)))
}

/// Dataset of the risky policy as written by `collect-risk-data`.
pub fn collect_risk_dataset(
    sim: &SimConfig,
    episodes: usize,
    per_class: usize,
    seed: u64,
) -> Result<(Vec<Vec<StepRecord>>, RiskDataset), HarnessError> {
    let trajs = collect_risk_trajectories(sim, episodes, seed)?;
    let dataset = build_dataset(&trajs, per_class, sim, seed);
    Ok((trajs, dataset))
}

#[derive(Default)]
struct EpisodeAcc {
    rewards: Vec<f64>,
    timestamps: Vec<f64>,
    d_expert: Vec<f64>,
    d_agent: Vec<f64>,
    emergency: u64,
    caution: u64,
    collided: bool,
}

impl EpisodeAcc {
    fn start(t0: f64) -> Self {
        EpisodeAcc { timestamps: vec![t0], ..Default::default() }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn run_training(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutput, HarnessError> {
    run_training_with(cfg, out_dir, &mut |_| true)
}

/// Full training loop. `hook` sees progress every 1000 steps and at the
/// end; returning `false` cancels the run.
pub fn run_training_with(
    cfg: &RunConfig,
    out_dir: &Path,
    hook: &mut dyn FnMut(&Progress) -> bool,
) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(format!("{}.csv", cfg.stem()));
    let checkpoint_path = out_dir.join(format!("{}.qnet", cfg.stem()));
    let file = BufWriter::new(File::create(&log_path)?);
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    writer.write_record(METRICS_HEADER.split(','))?;
    let result = train_loop(cfg, &mut writer, hook, out_dir, &checkpoint_path);
    let mut file = writer.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
    if let Err(e) = &result {
        writeln!(file, "# aborted: {e}")?;
    }
    file.flush()?;
    result.map(|summary| RunOutput { log_path, checkpoint_path, summary })
}

fn train_loop<W: Write>(
    cfg: &RunConfig,
    log: &mut csv::Writer<W>,
    hook: &mut dyn FnMut(&Progress) -> bool,
    out_dir: &Path,
    checkpoint_path: &Path,
) -> Result<RunSummary, HarnessError> {
    let variant = cfg.variant;
    let seed = cfg.seed;
    let p = &cfg.agent;
    let mut init_rng = stream(seed, 1);
    let mut act_rng = stream(seed, 2);
    let mut replay_rng = stream(seed, 3);
    let mut disc_rng = stream(seed, 4);
    let mut mem_rng = stream(seed, 5);

    let mut agent = DqnAgent::new(q_network(&mut init_rng), p.lr, p.gamma, p.target_sync);
    let mode = if variant.uses_expert() { ExplorationMode::Expert } else { ExplorationMode::Random };
    let decay_steps = ((cfg.total_env_steps as f64 * p.decay_fraction) as u64).max(1);
    let schedule = ExplorationSchedule { start: 1.0, end: p.epsilon_end, decay_steps, mode };

    let mut disc =
        variant.uses_discriminator().then(|| Discriminator::new(DiscriminatorNet::new(&mut init_rng), cfg.disc.lr, cfg.disc.eta));
    let reward_cfg = RewardConfig { beta: if disc.is_some() { cfg.disc.beta } else { 0.0 }, eta: cfg.disc.eta };
    let mut memory = variant.uses_rag().then(|| MemoryStore::new(OBS_DIM, cfg.memory.hnsw));
    let (mut gate, risk_report) = if variant.uses_predictor() {
        let (m, r) = provision_risk_model(cfg)?;
        (Some(RiskGate::new(m, cfg.safety.predictor.clone(), cfg.safety.thresholds)), r)
    } else {
        (None, None)
    };
    let mut advisor = Advisor::new(cfg.advisor.clone(), cfg.sim.clone());
    let mut replay = ReplayBuffer::new(p.replay_capacity);
    let mut expert_pairs = ExpertPairBuffer::new(cfg.disc.capacity);
    let mut agent_pairs = ExpertPairBuffer::new(cfg.disc.capacity);
    let mut calls = CallCounters::default();
    let mut tail: VecDeque<(WorldState, Action)> = VecDeque::with_capacity(REFLECTION_TAIL + 1);

    let mut episode: u64 = 0;
    let mut collisions: u64 = 0;
    let mut global: u64 = 0;
    let (mut world, mut obs) = reset(&cfg.sim, episode_seed(seed, episode))?;
    let mut acc = EpisodeAcc::start(world.time);

    while global < cfg.total_env_steps {
        let state = obs.values().to_vec();
        let (proposal, expert_flag) = {
            let advisor = &mut advisor;
            let memory = memory.as_ref();
            let calls = &mut calls;
            let obs = &obs;
            select_action(&state, &agent.qnet, &schedule, global, &mut act_rng, move || {
                let retrieved = match memory {
                    Some(m) => {
                        calls.memory += 1;
                        m.retrieve_obs(obs, cfg.memory.k, cfg.memory.lambda)
                    }
                    None => Vec::new(),
                };
                advisor.decide(obs, &retrieved)
            })?
        };
        let action = match gate.as_mut() {
            Some(gate) => {
                calls.safety += 1;
                let (a, tier, _) = gate.gate(&obs, proposal, &cfg.sim);
                match tier {
                    FallbackTier::Emergency => acc.emergency += 1,
                    FallbackTier::Caution => acc.caution += 1,
                    FallbackTier::None => {}
                }
                a
            }
            None => proposal,
        };
        let before = memory.is_some().then(|| world.clone());
        let outcome = step(&mut world, action, &cfg.sim)?;
        global += 1;

        replay.push(Transition {
            state: state.clone(),
            action,
            r_origin: outcome.r_origin,
            next_state: outcome.observation.values().to_vec(),
            done: outcome.collided,
            expert_flag,
        });
        if disc.is_some() {
            let greedy = if expert_flag { agent.greedy(&state)? } else { proposal };
            if expert_flag {
                expert_pairs.push(StateAction { state: state.clone(), action });
            }
            agent_pairs.push(StateAction { state, action: greedy });
        }
        if let (Some(mem), Some(before)) = (memory.as_mut(), before) {
            tail.push_back((before, action));
            if tail.len() > REFLECTION_TAIL {
                tail.pop_front();
            }
            calls.memory += 1;
            if outcome.collided {
                let tail: Vec<(WorldState, Action)> = tail.iter().cloned().collect();
                reflect(&tail, &mut advisor, mem)?;
            } else {
                let prior = &tail.back().expect("just pushed").0;
                let prior_obs = crate::sim::observe(prior, &cfg.sim);
                let record = ExperienceRecord {
                    id: 0,
                    embedding: embed_state(&prior_obs),
                    situation_text: describe_scene(&prior_obs, &cfg.sim).text,
                    action,
                    outcome_text: format!("no collision, reward {:.2}", outcome.r_origin),
                    reward: outcome.r_origin,
                    is_reflection: false,
                };
                mem.maybe_store(record, &mut mem_rng, cfg.memory.write_probability)?;
            }
        }

        if replay.len() >= p.warmup.max(p.batch_size) {
            if let Some(d) = disc.as_mut() {
                if let Some(s) = disc_train_step(d, &expert_pairs, &agent_pairs, p.batch_size, &mut disc_rng)? {
                    calls.discriminator += 1;
                    acc.d_expert.push(s.mean_expert);
                    acc.d_agent.push(s.mean_agent);
                }
            }
            let batch = replay.sample(p.batch_size, &mut replay_rng).map_err(|e| HarnessError::Config(e.to_string()))?;
            let r_origin: Vec<f64> = batch.iter().map(|t| t.r_origin).collect();
            let rewards = match disc.as_ref() {
                Some(d) => {
                    calls.discriminator += 1;
                    let pairs: Vec<(&[f64], Action)> = batch.iter().map(|t| (t.state.as_slice(), t.action)).collect();
                    d.shaped_rewards(&pairs, &r_origin, &reward_cfg)?
                }
                None => r_origin,
            };
            agent.train_step(&batch, &rewards)?;
        }

        acc.rewards.push(outcome.r_origin);
        acc.timestamps.push(world.time);
        acc.collided |= outcome.collided;
        obs = outcome.observation;

        if outcome.done {
            let (avg_runtime, avg_reward, total_reward) = episode_metrics(&acc.rewards, &acc.timestamps)?;
            collisions += u64::from(acc.collided);
            log.serialize(MetricsRow {
                variant,
                seed,
                episode,
                global_step: global,
                steps: acc.rewards.len() as u64,
                avg_runtime,
                avg_reward,
                total_reward,
                collided: acc.collided,
                epsilon: schedule.epsilon(global),
                d_expert: mean(&acc.d_expert),
                d_agent: mean(&acc.d_agent),
                override_emergency: acc.emergency,
                override_caution: acc.caution,
                memory_size: memory.as_ref().map_or(0, |m| m.len() as u64),
            })?;
            episode += 1;
            tail.clear();
            let (w, o) = reset(&cfg.sim, episode_seed(seed, episode))?;
            world = w;
            obs = o;
            acc = EpisodeAcc::start(world.time);
        }
        if global.is_multiple_of(1000)
            && !hook(&Progress { global_step: global, total_steps: cfg.total_env_steps, episodes: episode })
        {
            return Err(HarnessError::Cancelled(global));
        }
    }
    hook(&Progress { global_step: global, total_steps: cfg.total_env_steps, episodes: episode });
    log.flush()?;

    agent.qnet.save(BufWriter::new(File::create(checkpoint_path)?))?;
    if let Some(mem) = &memory {
        mem.save(&out_dir.join(format!("{}.memory.jsonl", cfg.stem())))?;
    }
    calls.advisor = advisor.calls;
    Ok(RunSummary {
        variant,
        seed,
        env_steps: global,
        episodes: episode,
        collisions,
        calls,
        memory_size: memory.as_ref().map_or(0, |m| m.len() as u64),
        predictor_failures: gate.as_ref().map_or(0, |g| g.remote_failures),
        qnet_checksum: agent.qnet.checksum(),
        risk_report,
    })
}

/// Trailing moving average; the first points average what is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Rows grouped by run, keyed `(variant, seed)`, each in log order.
pub fn group_runs(rows: &[MetricsRow]) -> BTreeMap<(Variant, u64), Vec<&MetricsRow>> {
    let mut runs: BTreeMap<(Variant, u64), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        runs.entry((r.variant, r.seed)).or_default().push(r);
    }
    runs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub avg_runtime: f64,
    pub avg_reward: f64,
    pub total_reward: f64,
    pub episodes: usize,
}

fn metric_means(rows: &[&MetricsRow]) -> MetricMeans {
    let n = rows.len().max(1) as f64;
    MetricMeans {
        avg_runtime: rows.iter().map(|r| r.avg_runtime).sum::<f64>() / n,
        avg_reward: rows.iter().map(|r| r.avg_reward).sum::<f64>() / n,
        total_reward: rows.iter().map(|r| r.total_reward).sum::<f64>() / n,
        episodes: rows.len(),
    }
}

/// First global step at which the average episode length over a full
/// trailing `window` of episodes reaches `CONVERGENCE_FRACTION` of `target`.
/// Runs shorter than `window` use all their episodes as the window.
pub fn convergence_step(rows: &[&MetricsRow], target: f64, window: usize) -> Option<u64> {
    let window = window.clamp(1, rows.len().max(1));
    let lengths: Vec<f64> = rows.iter().map(|r| r.avg_runtime).collect();
    moving_average(&lengths, window)
        .iter()
        .zip(rows)
        .skip(window - 1)
        .find(|(m, _)| **m >= CONVERGENCE_FRACTION * target)
        .map(|(_, r)| r.global_step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: Variant,
    pub seeds: usize,
    pub full: MetricMeans,
    pub window: MetricMeans,
    /// Mean over seeds that converged.
    pub convergence_step: Option<f64>,
}

fn average_means(ms: &[MetricMeans]) -> MetricMeans {
    let n = ms.len().max(1) as f64;
    MetricMeans {
        avg_runtime: ms.iter().map(|m| m.avg_runtime).sum::<f64>() / n,
        avg_reward: ms.iter().map(|m| m.avg_reward).sum::<f64>() / n,
        total_reward: ms.iter().map(|m| m.total_reward).sum::<f64>() / n,
        episodes: ms.iter().map(|m| m.episodes).sum(),
    }
}

/// Per-variant means over whole runs and over episodes ending in the last
/// `window` environment steps, averaged across seeds.
pub fn compare_rows(rows: &[MetricsRow], window: u64) -> Vec<CompareRow> {
    let mut per_variant: BTreeMap<Variant, Vec<(MetricMeans, MetricMeans, Option<u64>)>> = BTreeMap::new();
    for ((variant, _), run) in group_runs(rows) {
        let last = run.iter().map(|r| r.global_step).max().unwrap_or(0);
        let effective = if window > last {
            log::warn!("window of {window} steps exceeds the {last}-step {variant} run; using the whole run");
            last
        } else {
            window
        };
        let start = last - effective;
        let tail: Vec<&MetricsRow> = run.iter().copied().filter(|r| r.global_step > start).collect();
        let tail_means = metric_means(&tail);
        let conv = convergence_step(&run, tail_means.avg_runtime, CONVERGENCE_WINDOW);
        per_variant.entry(variant).or_default().push((metric_means(&run), tail_means, conv));
    }
    per_variant
        .into_iter()
        .map(|(variant, runs)| {
            let full: Vec<MetricMeans> = runs.iter().map(|r| r.0).collect();
            let win: Vec<MetricMeans> = runs.iter().map(|r| r.1).collect();
            let conv: Vec<f64> = runs.iter().filter_map(|r| r.2).map(|s| s as f64).collect();
            CompareRow {
                variant,
                seeds: runs.len(),
                full: average_means(&full),
                window: average_means(&win),
                convergence_step: mean(&conv),
            }
        })
        .collect()
}

pub fn render_table(rows: &[CompareRow], window: u64) -> String {
    let mut out = format!(
        "{:<12} {:>5} | {:>10} {:>10} {:>12} | {:>10} {:>10} {:>12} | {:>12}\n",
        "variant", "seeds", "avg_len", "avg_reward", "total_reward", "avg_len", "avg_reward", "total_reward", "conv_step"
    );
    out.push_str(&format!("{:<18} | {:^34} | {:^34} |\n", "", "full run", format!("last {window} steps")));
    for r in rows {
        let conv = r.convergence_step.map_or("-".to_string(), |c| format!("{c:.0}"));
        out.push_str(&format!(
            "{:<12} {:>5} | {:>10.4} {:>10.4} {:>12.4} | {:>10.4} {:>10.4} {:>12.4} | {:>12}\n",
            r.variant.name(),
            r.seeds,
            r.full.avg_runtime,
            r.full.avg_reward,
            r.full.total_reward,
            r.window.avg_runtime,
            r.window.avg_reward,
            r.window.total_reward,
            conv
        ));
    }
    out
}

pub fn compare_variants(paths: &[PathBuf], window: u64) -> Result<(Vec<CompareRow>, String), HarnessError> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_metrics(p)?);
    }
    let table = compare_rows(&rows, window);
    let text = render_table(&table, window);
    Ok((table, text))
}

pub const PLOT_FILES: [(&str, &str); 3] = [
    ("avg_runtime", "Average running time per episode (s)"),
    ("avg_reward", "Average reward per step"),
    ("total_reward", "Total reward per episode"),
];

fn series_label(variant: Variant, seed: u64, multi_seed: bool) -> String {
    if multi_seed {
        format!("{variant} (seed {seed})")
    } else {
        variant.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartSpec {
    pub key: &'static str,
    pub title: &'static str,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// `(legend label, (global step, smoothed value) points)`.
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

/// Chart data for every metric: one smoothed series per run, x spanning
/// the logged step range.
pub fn chart_specs(rows: &[MetricsRow], window: usize) -> Vec<ChartSpec> {
    if rows.is_empty() {
        return Vec::new();
    }
    let runs = group_runs(rows);
    let mut seeds_per_variant: BTreeMap<Variant, usize> = BTreeMap::new();
    for (v, _) in runs.keys() {
        *seeds_per_variant.entry(*v).or_default() += 1;
    }
    let x_min = rows.iter().map(|r| r.global_step).min().unwrap_or(0) as f64;
    let x_max = rows.iter().map(|r| r.global_step).max().unwrap_or(0) as f64;
    PLOT_FILES
        .iter()
        .map(|&(key, title)| {
            let pick = |r: &MetricsRow| match key {
                "avg_runtime" => r.avg_runtime,
                "avg_reward" => r.avg_reward,
                _ => r.total_reward,
            };
            let series: Vec<(String, Vec<(f64, f64)>)> = runs
                .iter()
                .map(|((v, s), run)| {
                    let ys = moving_average(&run.iter().map(|r| pick(r)).collect::<Vec<_>>(), window);
                    let pts = run.iter().zip(ys).map(|(r, y)| (r.global_step as f64, y)).collect();
                    (series_label(*v, *s, seeds_per_variant[v] > 1), pts)
                })
                .collect();
            let (mut lo, mut hi) = series
                .iter()
                .flat_map(|(_, p)| p.iter().map(|q| q.1))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
            if hi - lo < 1e-9 {
                lo -= 0.5;
                hi += 0.5;
            }
            let pad = 0.05 * (hi - lo);
            ChartSpec { key, title, x_range: (x_min, x_max), y_range: (lo - pad, hi + pad), series }
        })
        .collect()
}

fn render_chart(spec: &ChartSpec, path: &Path) -> Result<(), HarnessError> {
    use plotters::prelude::*;

    let draw_err = |e: &dyn std::fmt::Display| HarnessError::Io(std::io::Error::other(e.to_string()));
    let (x_min, mut x_max) = spec.x_range;
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    let root = SVGBackend::new(path, (960, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(spec.title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(64)
        .build_cartesian_2d(x_min..x_max, spec.y_range.0..spec.y_range.1)
        .map_err(|e| draw_err(&e))?;
    chart.configure_mesh().x_desc("environment steps").y_desc(spec.key).draw().map_err(|e| draw_err(&e))?;
    for (i, (label, pts)) in spec.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| draw_err(&e))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| draw_err(&e))?;
    root.present().map_err(|e| draw_err(&e))
}

/// Three SVG line charts (moving average over `window` episodes)
/// overlaying every run found in the logs. Empty input is a no-op.
pub fn emit_plots(paths: &[PathBuf], out_dir: &Path, window: usize) -> Result<Vec<PathBuf>, HarnessError> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_metrics(p)?);
    }
    if rows.is_empty() {
        log::warn!("no episodes in the given logs; nothing to plot");
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir)?;
    chart_specs(&rows, window)
        .iter()
        .map(|spec| {
            let path = out_dir.join(format!("{}.svg", spec.key));
            render_chart(spec, &path).map(|_| path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_metrics_examples() {
        let (rt, avg, tot) = episode_metrics(&[0.5, 0.5, 1.0], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(rt, 3.0);
        assert!((avg - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(tot, 2.0);
        assert_eq!(episode_metrics(&[0.4], &[0.0, 1.0]).unwrap(), (1.0, 0.4, 0.4));
        let full = episode_metrics(&[0.3; 40], &(0..=40).map(|t| t as f64).collect::<Vec<_>>()).unwrap();
        assert_eq!(full.0, 40.0);
        assert!(matches!(episode_metrics(&[], &[0.0]), Err(HarnessError::EmptyEpisode)));
        assert!(episode_metrics(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn variant_matrix() {
        use Variant::*;
        let table = [
            (VanillaDqn, false, false, false, false),
            (SaradG, true, false, true, false),
            (SaradDg, true, true, true, false),
            (SaradDgh, true, true, true, true),
            (SaradDlh, true, true, true, true),
        ];
        for (v, expert, d, g, h) in table {
            assert_eq!((v.uses_expert(), v.uses_discriminator(), v.uses_predictor(), v.uses_rag()), (expert, d, g, h));
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("sarad".parse::<Variant>().is_err());
    }

    #[test]
    fn moving_average_oracle() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(moving_average(&v, 2), vec![1.0, 1.5, 2.5, 3.5, 4.5]);
        assert_eq!(moving_average(&v, 10), vec![1.0, 1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn episode_seeds_are_distinct() {
        let mut seen: Vec<u64> = (0..1000).map(|e| episode_seed(3, e)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 1000);
        assert_ne!(episode_seed(3, 0), episode_seed(4, 0));
    }

    #[test]
    fn risky_policy_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 5];
        for _ in 0..20_000 {
            counts[risky_action(&mut rng).id()] += 1;
        }
        for (c, w) in counts.iter().zip(RISKY_WEIGHTS) {
            assert!((*c as f64 / 20_000.0 - w).abs() < 0.015);
        }
        assert!((RISKY_WEIGHTS.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation_and_json() {
        let cfg = RunConfig::new(Variant::SaradDg, 1000, 1);
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"variant":"sarad_dgh","seed":7,"agent":{"lr":0.001}}"#).unwrap();
        assert_eq!(partial.variant, Variant::SaradDgh);
        assert_eq!(partial.agent.lr, 0.001);
        assert_eq!(partial.agent.batch_size, BATCH_SIZE);
        let mut bad = cfg.clone();
        bad.safety.thresholds.caution = 0.95;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.agent.batch_size = 0;
        assert!(bad.validate().is_err());
    }

    fn row(variant: Variant, seed: u64, episode: u64, step: u64, len: f64, total: f64) -> MetricsRow {
        MetricsRow {
            variant,
            seed,
            episode,
            global_step: step,
            steps: len as u64,
            avg_runtime: len,
            avg_reward: total / len,
            total_reward: total,
            collided: false,
            epsilon: 0.1,
            d_expert: None,
            d_agent: None,
            override_emergency: 0,
            override_caution: 0,
            memory_size: 0,
        }
    }

    #[test]
    fn compare_hand_arithmetic() {
        let rows = vec![row(Variant::VanillaDqn, 0, 0, 10, 10.0, 3.0), row(Variant::VanillaDqn, 0, 1, 30, 20.0, 8.0)];
        let table = compare_rows(&rows, 100);
        assert_eq!(table.len(), 1);
        let t = &table[0];
        assert_eq!(t.full.avg_runtime, 15.0);
        assert_eq!(t.full.total_reward, 5.5);
        assert!((t.full.avg_reward - (0.3 + 0.4) / 2.0).abs() < 1e-12);
        assert_eq!(t.window, t.full);
        let last = compare_rows(&rows, 15);
        assert_eq!(last[0].window.avg_runtime, 20.0);
        assert_eq!(last[0].window.episodes, 1);
        let twice: Vec<MetricsRow> = rows
            .iter()
            .cloned()
            .chain(rows.iter().cloned().map(|mut r| {
                r.variant = Variant::SaradG;
                r
            }))
            .collect();
        let both = compare_rows(&twice, 15);
        assert_eq!(both[0].full, both[1].full);
        assert_eq!(both[0].window, both[1].window);
    }

    #[test]
    fn convergence_step_oracle() {
        let rows: Vec<MetricsRow> = (0..10).map(|i| row(Variant::SaradDg, 0, i, (i + 1) * 10, (i + 1) as f64, 1.0)).collect();
        let refs: Vec<&MetricsRow> = rows.iter().collect();
        // 0.9 * 4 = 3.6. A window as long as the run leaves only the last episode.
        assert_eq!(convergence_step(&refs, 4.0, 10), Some(100));
        assert_eq!(convergence_step(&refs, 4.0, 50), Some(100));
        // Over 3 episodes the mean ending at k is k - 1, first >= 3.6 at k = 5.
        assert_eq!(convergence_step(&refs, 4.0, 3), Some(50));
        assert_eq!(convergence_step(&refs, 12.0, 3), None);

        // A long first episode does not count before the window fills: over
        // 5 episodes the first full mean is (40 + 2 + 3 + 4 + 5) / 5.
        let mut early = rows.clone();
        early[0].avg_runtime = 40.0;
        let refs: Vec<&MetricsRow> = early.iter().collect();
        assert_eq!(convergence_step(&refs, 4.0, 5), Some(50));
        assert_eq!(convergence_step(&refs, 4.0, 1), Some(10));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path).unwrap();
        w.write_record(METRICS_HEADER.split(',')).unwrap();
        let mut r = row(Variant::SaradDgh, 2, 0, 17, 17.0, 5.1);
        r.d_expert = Some(0.75);
        w.serialize(&r).unwrap();
        w.flush().unwrap();
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(read_metrics(&path).unwrap(), vec![r]);
    }
}
