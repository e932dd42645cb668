//! Deterministic multi-lane highway simulator.
//!
//! One ego vehicle driven by discrete meta-actions shares a straight,
//! infinitely long road with IDM/MOBIL controlled traffic. All randomness is
//! consumed at [`reset`]; [`step`] is a pure function of the world and the
//! chosen action.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vehicle slots (ego included) encoded in an observation.
pub const OBSERVED_VEHICLES: usize = 11;
/// Features per vehicle: x, y, vx, vy.
pub const FEATURES_PER_VEHICLE: usize = 4;
/// Flat observation width.
pub const OBS_DIM: usize = OBSERVED_VEHICLES * FEATURES_PER_VEHICLE;

/// Speed change applied by FASTER / SLOWER.
pub const SPEED_STEP: f64 = 2.5;
/// Position normalization scale (meters).
pub const POSITION_SCALE: f64 = 100.0;
/// Minimum bumper-to-bumper spacing at spawn.
pub const SPAWN_GAP: f64 = 15.0;

const SPAWN_BEHIND: f64 = 60.0;
const SPAWN_AHEAD: f64 = 240.0;
const SPAWN_ATTEMPTS: usize = 2_000;

const EGO_SPEED_GAIN: f64 = 1.0 / 0.6;
const EGO_MAX_ACCEL: f64 = 5.0;
const EGO_MAX_DECEL: f64 = 6.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
    #[error("could not place {requested} vehicles without overlap (placed {placed})")]
    SpawnFailure { requested: usize, placed: usize },
    #[error("step called on a terminated episode")]
    Terminated,
    #[error("config parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub lane_count: usize,
    pub lane_width: f64,
    /// Total vehicles including the ego.
    pub vehicle_count: usize,
    pub v_min: f64,
    pub v_max: f64,
    /// Seconds between two agent decisions.
    pub policy_dt: f64,
    pub physics_substeps: usize,
    pub episode_time_limit: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub reward_a: f64,
    pub reward_b: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            lane_count: 4,
            lane_width: 4.0,
            vehicle_count: 10,
            v_min: 20.0,
            v_max: 30.0,
            policy_dt: 1.0,
            physics_substeps: 15,
            episode_time_limit: 40.0,
            vehicle_length: 5.0,
            vehicle_width: 2.0,
            reward_a: 0.4,
            reward_b: 1.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.lane_count < 2 {
            return fail("lane_count must be at least 2");
        }
        if !(self.lane_width > 0.0) {
            return fail("lane_width must be positive");
        }
        if self.vehicle_count == 0 {
            return fail("vehicle_count must include the ego vehicle");
        }
        if !(self.v_min > 0.0 && self.v_min < self.v_max) {
            return fail("require 0 < v_min < v_max");
        }
        if !(self.policy_dt > 0.0) {
            return fail("policy_dt must be positive");
        }
        if self.physics_substeps == 0 {
            return fail("physics_substeps must be positive");
        }
        if !(self.episode_time_limit > 0.0) {
            return fail("episode_time_limit must be positive");
        }
        if !(self.vehicle_length > 0.0 && self.vehicle_width > 0.0) {
            return fail("vehicle footprint must be positive");
        }
        if !(self.reward_a >= 0.0 && self.reward_b >= 0.0) {
            return fail("reward weights must be non-negative");
        }
        Ok(())
    }

    /// Largest number of decisions an episode can take.
    pub fn max_decisions(&self) -> usize {
        (self.episode_time_limit / self.policy_dt).ceil() as usize
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        lane as f64 * self.lane_width
    }

    pub fn lane_of(&self, y: f64) -> usize {
        let idx = (y / self.lane_width).round();
        idx.clamp(0.0, (self.lane_count - 1) as f64) as usize
    }

    /// Parses the `key = value` config format. Unknown keys are rejected;
    /// absent keys keep their defaults. `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self, SimError> {
        let mut cfg = SimConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| SimError::Parse { line: idx + 1, message };
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            fn num<T: FromStr>(v: &str) -> Result<T, String> {
                v.parse::<T>().map_err(|_| format!("bad number {v:?}"))
            }
            let res: Result<(), String> = (|| {
                match key {
                    "lanes" => cfg.lane_count = num(value)?,
                    "lane_width" => cfg.lane_width = num(value)?,
                    "vehicles" => cfg.vehicle_count = num(value)?,
                    "v_min" => cfg.v_min = num(value)?,
                    "v_max" => cfg.v_max = num(value)?,
                    "policy_dt" => cfg.policy_dt = num(value)?,
                    "substeps" => cfg.physics_substeps = num(value)?,
                    "time_limit" => cfg.episode_time_limit = num(value)?,
                    "reward_a" => cfg.reward_a = num(value)?,
                    "reward_b" => cfg.reward_b = num(value)?,
                    "seed" => cfg.seed = num(value)?,
                    other => return Err(format!("unknown key {other:?}")),
                }
                Ok(())
            })();
            res.map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "lanes = {}\nlane_width = {}\nvehicles = {}\nv_min = {}\nv_max = {}\npolicy_dt = {}\n\
             substeps = {}\ntime_limit = {}\nreward_a = {}\nreward_b = {}\nseed = {}\n",
            self.lane_count,
            self.lane_width,
            self.vehicle_count,
            self.v_min,
            self.v_max,
            self.policy_dt,
            self.physics_substeps,
            self.episode_time_limit,
            self.reward_a,
            self.reward_b,
            self.seed
        )
    }
}

/// Discrete ego meta-action. The numeric ids are part of the log format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Action {
    LaneLeft = 0,
    Idle = 1,
    LaneRight = 2,
    Faster = 3,
    Slower = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [Action::LaneLeft, Action::Idle, Action::LaneRight, Action::Faster, Action::Slower];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Action> {
        Action::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::LaneLeft => "LANE_LEFT",
            Action::Idle => "IDLE",
            Action::LaneRight => "LANE_RIGHT",
            Action::Faster => "FASTER",
            Action::Slower => "SLOWER",
        }
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, Action::LaneLeft | Action::LaneRight)
    }

    pub fn one_hot(self) -> [f64; Action::COUNT] {
        let mut v = [0.0; Action::COUNT];
        v[self.id()] = 1.0;
        v
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Action> for u8 {
    fn from(a: Action) -> u8 {
        a as u8
    }
}

impl TryFrom<u8> for Action {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Action::from_id(v as usize).ok_or_else(|| format!("action id {v} out of range 0..5"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub lane: usize,
    pub is_ego: bool,
    /// Lane the vehicle is steering towards (equals `lane` when keeping).
    pub target_lane: usize,
    /// Ego: commanded cruise speed. NPC: IDM desired speed.
    pub target_speed: f64,
}

impl VehicleState {
    pub fn changing_lane(&self) -> bool {
        self.target_lane != self.lane || self.vy != 0.0
    }

    fn occupies(&self, lane: usize) -> bool {
        self.lane == lane || self.target_lane == lane
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub time: f64,
    /// Ego first.
    pub vehicles: Vec<VehicleState>,
    pub done: bool,
    pub collided: bool,
}

impl WorldState {
    pub fn ego(&self) -> &VehicleState {
        &self.vehicles[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoObservation(pub Vec<f64>);

impl EgoObservation {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn zeros() -> Self {
        EgoObservation(vec![0.0; OBS_DIM])
    }

    /// Feature block of vehicle `slot` (0 = ego).
    pub fn block(&self, slot: usize) -> &[f64] {
        &self.0[slot * FEATURES_PER_VEHICLE..(slot + 1) * FEATURES_PER_VEHICLE]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub observation: EgoObservation,
    pub r_origin: f64,
    pub done: bool,
    pub collided: bool,
    pub elapsed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    /// Hard braking limit; outputs are clamped to `[-max_decel, max_accel]`.
    pub max_decel: f64,
    pub exponent: i32,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 30.0,
            time_headway: 1.5,
            min_gap: 10.0,
            max_accel: 3.0,
            comfort_decel: 5.0,
            max_decel: 9.0,
            exponent: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilParams {
    /// Largest deceleration a lane change may impose on the new follower.
    pub safe_decel: f64,
    /// Minimum own acceleration gain required to change.
    pub accel_threshold: f64,
}

impl Default for MobilParams {
    fn default() -> Self {
        Self { safe_decel: 4.0, accel_threshold: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaneChoice {
    Left,
    Right,
    Stay,
}

/// Intelligent Driver Model acceleration towards a leader `gap` meters ahead
/// (bumper to bumper). Pass `f64::INFINITY` for a free road.
pub fn idm_acceleration(gap: f64, v: f64, v_lead: f64, params: &IdmParams) -> f64 {
    if !(gap > 0.0) {
        return -params.max_decel;
    }
    let free = 1.0 - (v / params.desired_speed).powi(params.exponent);
    let interaction = if gap.is_finite() {
        let dv = v - v_lead;
        let s_star = params.min_gap + v * params.time_headway + v * dv / (2.0 * (params.max_accel * params.comfort_decel).sqrt());
        (s_star.max(0.0) / gap).powi(2)
    } else {
        0.0
    };
    (params.max_accel * (free - interaction)).clamp(-params.max_decel, params.max_accel)
}

/// Eq. 5 style origin reward. Speeds outside `[v_min, v_max]` are clamped.
pub fn reward_origin(v: f64, collided: bool, config: &SimConfig) -> f64 {
    let clamped = v.clamp(config.v_min, config.v_max);
    if clamped != v {
        log::warn!("reward speed {v} outside [{}, {}], clamped", config.v_min, config.v_max);
    }
    let speed_term = config.reward_a * (clamped - config.v_min) / (config.v_max - config.v_min);
    speed_term - if collided { config.reward_b } else { 0.0 }
}

/// Axis-aligned footprint overlap with positive area.
pub fn rectangles_overlap(a: &VehicleState, b: &VehicleState, config: &SimConfig) -> bool {
    (a.x - b.x).abs() < config.vehicle_length && (a.y - b.y).abs() < config.vehicle_width
}

pub fn collision_check(world: &WorldState, config: &SimConfig) -> bool {
    let ego = world.ego();
    world.vehicles[1..].iter().any(|v| rectangles_overlap(ego, v, config))
}

fn npc_idm(v: &VehicleState) -> IdmParams {
    IdmParams { desired_speed: v.target_speed, ..IdmParams::default() }
}

/// Nearest vehicle ahead of `idx` that occupies `lane`, as (index, gap).
fn leader_in_lane(vehicles: &[VehicleState], idx: usize, lane: usize, length: f64) -> Option<(usize, f64)> {
    let me = &vehicles[idx];
    vehicles
        .iter()
        .enumerate()
        .filter(|(j, v)| *j != idx && v.occupies(lane) && v.x >= me.x)
        .map(|(j, v)| (j, v.x - me.x - length))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

fn follower_in_lane(vehicles: &[VehicleState], idx: usize, lane: usize, length: f64) -> Option<(usize, f64)> {
    let me = &vehicles[idx];
    vehicles
        .iter()
        .enumerate()
        .filter(|(j, v)| *j != idx && v.occupies(lane) && v.x < me.x)
        .map(|(j, v)| (j, me.x - v.x - length))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

fn idm_towards(vehicles: &[VehicleState], idx: usize, lane: usize, config: &SimConfig) -> f64 {
    let me = &vehicles[idx];
    let params = npc_idm(me);
    match leader_in_lane(vehicles, idx, lane, config.vehicle_length) {
        Some((j, gap)) => idm_acceleration(gap, me.vx, vehicles[j].vx, &params),
        None => idm_acceleration(f64::INFINITY, me.vx, 0.0, &params),
    }
}

/// Simplified MOBIL (politeness 0) for the vehicle at `idx`.
pub fn mobil_decision(world: &WorldState, idx: usize, config: &SimConfig, params: &MobilParams) -> LaneChoice {
    let vehicles = &world.vehicles;
    let me = &vehicles[idx];
    if me.changing_lane() {
        return LaneChoice::Stay;
    }
    let current = idm_towards(vehicles, idx, me.lane, config);
    let mut best: Option<(LaneChoice, f64)> = None;
    let candidates =
        [(LaneChoice::Left, me.lane.checked_sub(1)), (LaneChoice::Right, Some(me.lane + 1).filter(|&l| l < config.lane_count))];
    for (choice, lane) in candidates {
        let Some(lane) = lane else { continue };
        let alongside =
            vehicles.iter().enumerate().any(|(j, v)| j != idx && v.occupies(lane) && (v.x - me.x).abs() < config.vehicle_length);
        if alongside {
            continue;
        }
        if let Some((j, gap)) = follower_in_lane(vehicles, idx, lane, config.vehicle_length) {
            let f = &vehicles[j];
            let f_params = if f.is_ego { IdmParams::default() } else { npc_idm(f) };
            if idm_acceleration(gap, f.vx, me.vx, &f_params) < -params.safe_decel {
                continue;
            }
        }
        let gain = idm_towards(vehicles, idx, lane, config) - current;
        if gain >= params.accel_threshold && best.is_none_or(|(_, g)| gain > g) {
            best = Some((choice, gain));
        }
    }
    best.map_or(LaneChoice::Stay, |(c, _)| c)
}

/// Spawns a fresh episode. Identical `(config, seed)` give identical worlds.
pub fn reset(config: &SimConfig, seed: u64) -> Result<(WorldState, EgoObservation), SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vehicles: Vec<VehicleState> = Vec::with_capacity(config.vehicle_count);
    let spacing = config.vehicle_length + SPAWN_GAP;
    for i in 0..config.vehicle_count {
        let is_ego = i == 0;
        let mut placed = None;
        for _ in 0..SPAWN_ATTEMPTS {
            let lane = rng.gen_range(0..config.lane_count);
            let x = if is_ego { 0.0 } else { rng.gen_range(-SPAWN_BEHIND..SPAWN_AHEAD) };
            let clear = vehicles.iter().all(|v| v.lane != lane || (v.x - x).abs() >= spacing);
            if clear {
                placed = Some((lane, x));
                break;
            }
        }
        let Some((lane, x)) = placed else {
            return Err(SimError::SpawnFailure { requested: config.vehicle_count, placed: i });
        };
        let vx = rng.gen_range(config.v_min..=config.v_max);
        let target_speed = if is_ego { vx } else { rng.gen_range(config.v_min..=config.v_max) };
        vehicles.push(VehicleState {
            x,
            y: config.lane_center(lane),
            vx,
            vy: 0.0,
            lane,
            is_ego,
            target_lane: lane,
            target_speed,
        });
    }
    let world = WorldState { time: 0.0, vehicles, done: false, collided: false };
    let obs = observe(&world, config);
    Ok((world, obs))
}

fn apply_ego_action(ego: &mut VehicleState, action: Action, config: &SimConfig) {
    match action {
        Action::Faster => ego.target_speed = (ego.target_speed + SPEED_STEP).clamp(config.v_min, config.v_max),
        Action::Slower => ego.target_speed = (ego.target_speed - SPEED_STEP).clamp(config.v_min, config.v_max),
        Action::LaneLeft if ego.lane > 0 => ego.target_lane = ego.lane - 1,
        Action::LaneRight if ego.lane + 1 < config.lane_count => ego.target_lane = ego.lane + 1,
        // Lane change off the road edge degrades to IDLE.
        _ => {}
    }
}

/// Advances the world by one decision period.
pub fn step(world: &mut WorldState, action: Action, config: &SimConfig) -> Result<StepOutcome, SimError> {
    if world.done {
        return Err(SimError::Terminated);
    }
    apply_ego_action(&mut world.vehicles[0], action, config);

    let mobil = MobilParams::default();
    for idx in 1..world.vehicles.len() {
        let choice = mobil_decision(world, idx, config, &mobil);
        let v = &mut world.vehicles[idx];
        match choice {
            LaneChoice::Left => v.target_lane = v.lane - 1,
            LaneChoice::Right => v.target_lane = v.lane + 1,
            LaneChoice::Stay => {}
        }
    }

    let dt = config.policy_dt / config.physics_substeps as f64;
    let lateral_rate = config.lane_width / config.policy_dt;
    let mut collided = false;
    for _ in 0..config.physics_substeps {
        let accels: Vec<f64> = (0..world.vehicles.len())
            .map(|idx| {
                let v = &world.vehicles[idx];
                if v.is_ego {
                    (EGO_SPEED_GAIN * (v.target_speed - v.vx)).clamp(-EGO_MAX_DECEL, EGO_MAX_ACCEL)
                } else {
                    let own = idm_towards(&world.vehicles, idx, v.lane, config);
                    if v.target_lane != v.lane {
                        own.min(idm_towards(&world.vehicles, idx, v.target_lane, config))
                    } else {
                        own
                    }
                }
            })
            .collect();
        for (v, a) in world.vehicles.iter_mut().zip(accels) {
            let a = if v.vx + a * dt < 0.0 { -v.vx / dt } else { a };
            v.x += v.vx * dt + 0.5 * a * dt * dt;
            v.vx = (v.vx + a * dt).max(0.0);
            let target_y = config.lane_center(v.target_lane);
            let dy = target_y - v.y;
            if dy.abs() <= lateral_rate * dt + 1e-9 {
                v.y = target_y;
                v.vy = 0.0;
                v.lane = v.target_lane;
            } else {
                v.vy = lateral_rate * dy.signum();
                v.y += v.vy * dt;
                v.lane = config.lane_of(v.y);
            }
        }
        if collision_check(world, config) {
            collided = true;
            break;
        }
    }
    // Manoeuvres finish within the decision period; snap any rounding residue.
    if !collided {
        for v in world.vehicles.iter_mut() {
            v.y = config.lane_center(v.target_lane);
            v.vy = 0.0;
            v.lane = v.target_lane;
        }
    }

    world.time += config.policy_dt;
    world.collided = collided;
    world.done = collided || world.time >= config.episode_time_limit - 1e-9;
    let r_origin = reward_origin(world.ego().vx, collided, config);
    Ok(StepOutcome { observation: observe(world, config), r_origin, done: world.done, collided, elapsed: world.time })
}

/// Flat normalized observation: the ego's absolute block, then the other
/// vehicles relative to the ego ordered by longitudinal distance.
pub fn observe(world: &WorldState, config: &SimConfig) -> EgoObservation {
    let clip = |v: f64| v.clamp(-1.0, 1.0);
    let ego = world.ego();
    let mut values = Vec::with_capacity(OBS_DIM);
    values.extend([
        clip(ego.x / POSITION_SCALE),
        clip(ego.y / POSITION_SCALE),
        clip(ego.vx / config.v_max),
        clip(ego.vy / config.v_max),
    ]);
    let mut others: Vec<&VehicleState> = world.vehicles[1..].iter().collect();
    others.sort_by(|a, b| (a.x - ego.x).abs().total_cmp(&(b.x - ego.x).abs()).then(a.lane.cmp(&b.lane)));
    for v in others.into_iter().take(OBSERVED_VEHICLES - 1) {
        values.extend([
            clip((v.x - ego.x) / POSITION_SCALE),
            clip((v.y - ego.y) / POSITION_SCALE),
            clip((v.vx - ego.vx) / config.v_max),
            clip((v.vy - ego.vy) / config.v_max),
        ]);
    }
    values.resize(OBS_DIM, 0.0);
    EgoObservation(values)
}

/// One decision of a trajectory dump: the state the action was taken in,
/// the action, and what followed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: f64,
    pub vehicles: Vec<DumpVehicle>,
    pub action: Action,
    pub reward: f64,
    pub collided: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DumpVehicle {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub lane: usize,
}

impl StepRecord {
    pub fn new(world: &WorldState, action: Action, outcome: &StepOutcome) -> Self {
        StepRecord {
            time: world.time,
            vehicles: world.vehicles.iter().map(|v| DumpVehicle { x: v.x, y: v.y, vx: v.vx, vy: v.vy, lane: v.lane }).collect(),
            action,
            reward: outcome.r_origin,
            collided: outcome.collided,
        }
    }

    /// Rebuilds a world snapshot (enough for observation and scene queries).
    pub fn world(&self) -> WorldState {
        WorldState {
            time: self.time,
            vehicles: self
                .vehicles
                .iter()
                .enumerate()
                .map(|(i, v)| VehicleState {
                    x: v.x,
                    y: v.y,
                    vx: v.vx,
                    vy: v.vy,
                    lane: v.lane,
                    is_ego: i == 0,
                    target_lane: v.lane,
                    target_speed: v.vx,
                })
                .collect(),
            done: false,
            collided: false,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("step record serializes")
    }
}

/// Parses a line-delimited trajectory dump. Blank lines are skipped.
pub fn parse_trajectory(text: &str) -> Result<Vec<StepRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
