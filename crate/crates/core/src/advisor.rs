//! Expert decision sources: scene text and prompts, the scripted rule
//! expert, a remote completion client with scripted fallback, and the
//! collision reflection flow.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{embed_state, ExperienceRecord, MemoryError, MemoryStore};
use crate::scene::Scene;
use crate::sim::{self, observe, Action, EgoObservation, MobilParams, SimConfig, WorldState};

pub const MAX_PROMPT_CHARS: usize = 4000;
pub const NEARBY_RANGE: f64 = 60.0;
pub const DEFAULT_TIMEOUT_MS: u64 = 2000;
pub const EMERGENCY_TTC: f64 = 1.5;
pub const LANE_GAIN: f64 = 10.0;
pub const FREE_GAP: f64 = 30.0;
/// Cosine similarity above which the scripted expert replays a stored correction.
pub const REFLECTION_MATCH: f64 = 0.97;
pub const REFLECTION_TAIL: usize = 5;

const SYSTEM_PREAMBLE: &str = "You are an experienced driver controlling the ego vehicle on a multi-lane highway. \
Available actions: LANE_LEFT, IDLE, LANE_RIGHT, FASTER, SLOWER. Drive fast but never collide.";
const INSTRUCTION_SUFFIX: &str =
    "Reason about the scene step by step, then give your decision as exactly one action name on the final line.";

#[derive(Debug, Error, PartialEq)]
pub enum AdvisorError {
    #[error("no action token in response")]
    Parse,
    #[error("invalid advisor configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSummary {
    pub dx: f64,
    pub dv: f64,
    pub lane: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub text: String,
    pub lane_of_ego: usize,
    pub ego_speed: f64,
    pub neighbors: Vec<NeighborSummary>,
}

fn round1(v: f64) -> f64 {
    let r = (v * 10.0).round() / 10.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

pub fn describe_scene(obs: &EgoObservation, cfg: &SimConfig) -> SceneDescription {
    let scene = Scene::from_obs(obs, cfg);
    let ego_speed = round1(scene.ego_speed);
    let mut text = format!(
        "You are driving in lane {} of {} (lane 0 is the leftmost) at {:.1} m/s.\n",
        scene.ego_lane, cfg.lane_count, ego_speed
    );
    let mut neighbors = Vec::new();
    for n in scene.neighbors.iter().filter(|n| n.dx.abs() <= NEARBY_RANGE) {
        let (dx, dv) = (round1(n.dx), round1(n.dvx));
        let side = if n.dx >= 0.0 { "ahead" } else { "behind" };
        let place = match n.lane.cmp(&scene.ego_lane) {
            std::cmp::Ordering::Equal => format!("{side} in your lane"),
            std::cmp::Ordering::Less => format!("{side} in lane {} to your left", n.lane),
            std::cmp::Ordering::Greater => format!("{side} in lane {} to your right", n.lane),
        };
        let _ = writeln!(text, "A vehicle {:.1} m {place}, relative speed {:+.1} m/s.", dx.abs(), dv);
        neighbors.push(NeighborSummary { dx, dv, lane: n.lane });
    }
    if neighbors.is_empty() {
        text.push_str("There are no nearby vehicles.\n");
    }
    SceneDescription { text, lane_of_ego: scene.ego_lane, ego_speed, neighbors }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub scene: String,
    /// Rendered experience blocks, most relevant first.
    pub experiences: Vec<String>,
    pub suffix: String,
}

impl Prompt {
    pub fn text(&self) -> String {
        let mut out = format!("{}\n\n{}", self.system, self.scene);
        if !self.experiences.is_empty() {
            out.push_str("\nRelevant past experiences:\n");
            for (i, e) in self.experiences.iter().enumerate() {
                let _ = writeln!(out, "Past experience {}: {e}", i + 1);
            }
        }
        out.push('\n');
        out.push_str(&self.suffix);
        out
    }

    pub fn len(&self) -> usize {
        self.text().chars().count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn render_experience(r: &ExperienceRecord) -> String {
    let situation = r.situation_text.trim().replace('\n', " ");
    format!("situation: {situation} action: {}. outcome: {}.", r.action.name(), r.outcome_text.trim())
}

/// Experience blocks keep relevance order; when the prompt is too long the
/// oldest record (lowest id) is dropped first.
pub fn build_prompt(desc: &SceneDescription, retrieved: &[&ExperienceRecord]) -> Prompt {
    let mut kept: Vec<&ExperienceRecord> = retrieved.to_vec();
    loop {
        let prompt = Prompt {
            system: SYSTEM_PREAMBLE.to_string(),
            scene: desc.text.clone(),
            experiences: kept.iter().map(|r| render_experience(r)).collect(),
            suffix: INSTRUCTION_SUFFIX.to_string(),
        };
        let len = prompt.len();
        if len <= MAX_PROMPT_CHARS {
            return prompt;
        }
        if let Some(oldest) = kept.iter().enumerate().min_by_key(|(_, r)| r.id).map(|(i, _)| i) {
            kept.remove(oldest);
            continue;
        }
        let mut prompt = prompt;
        let excess = len - MAX_PROMPT_CHARS;
        let keep = prompt.scene.chars().count().saturating_sub(excess);
        prompt.scene = prompt.scene.chars().take(keep).collect();
        return prompt;
    }
}

/// Rule expert: brake on short TTC, move to a clearly better safe lane,
/// speed up on a free road, otherwise keep going.
pub fn scripted_decide(obs: &EgoObservation, cfg: &SimConfig) -> Action {
    let scene = Scene::from_obs(obs, cfg);
    if scene.ttc_ahead(scene.ego_lane) < EMERGENCY_TTC {
        return Action::Slower;
    }
    let current = scene.front_gap(scene.ego_lane);
    if current.is_finite() {
        let safe_decel = MobilParams::default().safe_decel;
        let mut best: Option<(Action, f64)> = None;
        for (action, lane) in [(Action::LaneLeft, scene.left_lane()), (Action::LaneRight, scene.right_lane())] {
            let Some(lane) = lane else { continue };
            let gap = scene.front_gap(lane);
            if gap >= current + LANE_GAIN && scene.lane_change_safe(lane, safe_decel) && best.is_none_or(|(_, g)| gap > g) {
                best = Some((action, gap));
            }
        }
        if let Some((action, _)) = best {
            return action;
        }
    }
    if scene.ego_speed < cfg.v_max - 1e-9 && current > FREE_GAP {
        return Action::Faster;
    }
    Action::Idle
}

/// Last standalone action token, case-insensitive: a name or a digit 0-4.
pub fn parse_action(text: &str) -> Result<Action, AdvisorError> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .filter_map(|t| {
            let upper = t.to_ascii_uppercase();
            Action::ALL.into_iter().find(|a| a.name() == upper).or_else(|| match upper.as_str() {
                "0" | "1" | "2" | "3" | "4" => Action::from_id(upper.parse().ok()?),
                _ => None,
            })
        })
        .next_back()
        .ok_or(AdvisorError::Parse)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum AdvisorKind {
    #[default]
    Scripted,
    Remote {
        endpoint: String,
        timeout_ms: u64,
    },
}

impl AdvisorKind {
    pub fn remote(endpoint: impl Into<String>) -> Self {
        AdvisorKind::Remote { endpoint: endpoint.into(), timeout_ms: DEFAULT_TIMEOUT_MS }
    }

    pub fn validate(&self) -> Result<(), AdvisorError> {
        match self {
            AdvisorKind::Scripted => Ok(()),
            AdvisorKind::Remote { endpoint, .. } if endpoint.trim().is_empty() => {
                Err(AdvisorError::Config("remote advisor needs an endpoint".into()))
            }
            AdvisorKind::Remote { timeout_ms: 0, .. } => Err(AdvisorError::Config("timeout must be positive".into())),
            AdvisorKind::Remote { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub cause: String,
    pub fallback_action: Action,
}

/// Remote-path failures, kept in memory and optionally appended to a JSONL file.
#[derive(Debug, Clone, Default)]
pub struct IncidentLog {
    pub path: Option<PathBuf>,
    pub entries: Vec<Incident>,
}

impl IncidentLog {
    pub fn to_file(path: impl Into<PathBuf>) -> Self {
        IncidentLog { path: Some(path.into()), entries: Vec::new() }
    }

    pub fn record(&mut self, cause: String, fallback_action: Action) {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        log::warn!("advisor fallback to {fallback_action}: {cause}");
        let incident = Incident { timestamp, cause, fallback_action };
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&incident).expect("serializable");
            let written =
                std::fs::OpenOptions::new().create(true).append(true).open(path).and_then(|mut f| writeln!(f, "{line}"));
            if let Err(e) = written {
                log::error!("cannot append incident to {}: {e}", path.display());
            }
        }
        self.entries.push(incident);
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

fn complete(endpoint: &str, timeout_ms: u64, prompt: &str) -> Result<String, String> {
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(timeout_ms))
        .build()
        .map_err(|e| format!("client: {e}"))?;
    let resp = client.post(endpoint).json(&CompletionRequest { prompt }).send().map_err(|e| {
        if e.is_timeout() {
            format!("timeout after {timeout_ms} ms")
        } else {
            format!("request: {e}")
        }
    })?;
    if !resp.status().is_success() {
        return Err(format!("status {}", resp.status()));
    }
    let body: CompletionResponse = resp.json().map_err(|e| format!("response body: {e}"))?;
    Ok(body.text)
}

/// Asks the remote endpoint; every failure yields the scripted action and an incident.
pub fn remote_decide(
    prompt: &Prompt,
    kind: &AdvisorKind,
    obs: &EgoObservation,
    cfg: &SimConfig,
    incidents: &mut IncidentLog,
) -> Action {
    let outcome = match kind {
        AdvisorKind::Remote { endpoint, timeout_ms } if kind.validate().is_ok() => {
            complete(endpoint, *timeout_ms, &prompt.text()).and_then(|text| {
                parse_action(&text).map_err(|_| format!("unparseable response: {:?}", text.chars().take(80).collect::<String>()))
            })
        }
        _ => Err("remote advisor not configured".to_string()),
    };
    outcome.unwrap_or_else(|cause| {
        let fallback = scripted_decide(obs, cfg);
        incidents.record(cause, fallback);
        fallback
    })
}

/// Stateful advisor used during training.
#[derive(Debug, Clone)]
pub struct Advisor {
    pub kind: AdvisorKind,
    pub sim: SimConfig,
    pub incidents: IncidentLog,
    pub calls: u64,
}

impl Advisor {
    pub fn new(kind: AdvisorKind, sim: SimConfig) -> Self {
        Advisor { kind, sim, incidents: IncidentLog::default(), calls: 0 }
    }

    pub fn scripted(sim: SimConfig) -> Self {
        Advisor::new(AdvisorKind::Scripted, sim)
    }

    /// One decision. The scripted expert replays the correction of a closely
    /// matching reflection record when one was retrieved.
    pub fn decide(&mut self, obs: &EgoObservation, retrieved: &[&ExperienceRecord]) -> Action {
        self.calls += 1;
        match &self.kind {
            AdvisorKind::Scripted => {
                let e = embed_state(obs);
                retrieved
                    .iter()
                    .filter(|r| r.is_reflection && !r.outcome_text.contains(UNAVOIDABLE))
                    .find(|r| r.embedding.cosine(&e) >= REFLECTION_MATCH)
                    .map_or_else(|| scripted_decide(obs, &self.sim), |r| r.action)
            }
            kind => {
                let prompt = build_prompt(&describe_scene(obs, &self.sim), retrieved);
                remote_decide(&prompt, kind, obs, &self.sim, &mut self.incidents)
            }
        }
    }
}

pub const UNAVOIDABLE: &str = "unavoidable";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRecord {
    /// Last observations and actions before the collision, oldest first.
    pub tail: Vec<(EgoObservation, Action)>,
    pub failed_action: Action,
    pub cause: String,
    pub corrected_action: Action,
    pub unavoidable: bool,
}

/// Actions that do not collide within one decision from `world`.
pub fn safe_actions(world: &WorldState, cfg: &SimConfig) -> Vec<Action> {
    Action::ALL
        .into_iter()
        .filter(|&a| {
            let mut w = world.clone();
            w.done = false;
            sim::step(&mut w, a, cfg).is_ok_and(|o| !o.collided)
        })
        .collect()
}

fn diagnose(world: &WorldState, failed: Action, cfg: &SimConfig) -> String {
    let mut w = world.clone();
    w.done = false;
    let _ = sim::step(&mut w, failed, cfg);
    let ego = w.ego();
    let hit = w.vehicles[1..].iter().find(|v| sim::rectangles_overlap(ego, v, cfg));
    match hit {
        Some(v) if failed.is_lane_change() && v.lane != world.ego().lane => {
            format!("{} into a lane occupied by a vehicle {:.1} m away", failed.name(), v.x - ego.x)
        }
        Some(v) if v.x < ego.x => format!("struck from behind by a vehicle closing at {:.1} m/s", v.vx - ego.vx),
        Some(v) => format!("ran into the vehicle ahead while closing at {:.1} m/s", ego.vx - v.vx),
        None => format!("collision after {}", failed.name()),
    }
}

/// Reflection on a collision tail of `(world before the decision, action)`
/// pairs; the last pair is the fatal decision. The resulting record is
/// always stored in `memory`.
pub fn reflect(
    tail: &[(WorldState, Action)],
    advisor: &mut Advisor,
    memory: &mut MemoryStore,
) -> Result<ReflectionRecord, MemoryError> {
    let cfg = advisor.sim.clone();
    let (world, failed) = tail.last().expect("reflection needs a non-empty tail");
    let obs = observe(world, &cfg);
    let safe = safe_actions(world, &cfg);
    let cause = diagnose(world, *failed, &cfg);
    let unavoidable = safe.is_empty();

    let scripted_choice = || {
        let rule = scripted_decide(&obs, &cfg);
        if safe.contains(&rule) && rule != *failed {
            return rule;
        }
        [Action::Slower, Action::Idle, Action::LaneLeft, Action::LaneRight, Action::Faster]
            .into_iter()
            .find(|a| safe.contains(a) && a != failed)
            .unwrap_or(if *failed == Action::Slower { Action::Idle } else { Action::Slower })
    };
    advisor.calls += 1;
    let corrected = match &advisor.kind {
        AdvisorKind::Scripted => scripted_choice(),
        kind => {
            let desc = describe_scene(&obs, &cfg);
            let mut prompt = build_prompt(&desc, &[]);
            let actions: Vec<&str> = tail.iter().map(|(_, a)| a.name()).collect();
            prompt.scene.push_str(&format!(
                "The previous decisions were {} and the last one ended in a collision ({cause}). \
                 Explain what went wrong and propose a different, safer action.\n",
                actions.join(", ")
            ));
            let proposal = remote_decide(&prompt, kind, &obs, &cfg, &mut advisor.incidents);
            if proposal == *failed {
                scripted_choice()
            } else {
                proposal
            }
        }
    };
    let record = ReflectionRecord {
        tail: tail.iter().rev().take(REFLECTION_TAIL).rev().map(|(w, a)| (observe(w, &cfg), *a)).collect(),
        failed_action: *failed,
        cause: cause.clone(),
        corrected_action: corrected,
        unavoidable,
    };
    let outcome_text = if unavoidable {
        format!("collision after {} ({cause}); {UNAVOIDABLE}", failed.name())
    } else {
        format!("collision after {} ({cause}); {} avoids it", failed.name(), corrected.name())
    };
    memory.insert_new(ExperienceRecord {
        id: 0,
        embedding: embed_state(&obs),
        situation_text: describe_scene(&obs, &cfg).text,
        action: corrected,
        outcome_text,
        reward: -cfg.reward_b,
        is_reflection: true,
    })?;
    Ok(record)
}
