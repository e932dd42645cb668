//! Collision-risk prediction over state-action pairs and the tiered action
//! gate built on it. Two model variants: logistic regression on the raw
//! features, and boosted depth-limited trees whose leaf indices feed a
//! logistic regression.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::sigmoid;
use crate::scene::Scene;
use crate::sim::{observe, Action, EgoObservation, SimConfig, StepRecord, OBS_DIM};

pub const ENGINEERED_FEATURES: usize = 8;
pub const FEATURE_DIM: usize = OBS_DIM + Action::COUNT + ENGINEERED_FEATURES;
pub const PRE_COLLISION_FRAMES: usize = 3;
pub const SAFE_TTC: f64 = 3.0;
pub const NEGATIVES_PER_TRAJECTORY: usize = 3;
pub const MODEL_VERSION: u32 = 1;
pub const MIN_HEADWAY: f64 = 1.5;

const GAP_CAP: f64 = 100.0;
const TTC_CAP: f64 = 10.0;
const LOGIT_CAP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error("dataset needs both classes (got {positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("feature vector has length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSample {
    pub features: Vec<f64>,
    /// 1 = collision imminent, 0 = safe.
    pub label: u8,
}

fn lane_min_gap(scene: &Scene, lane: Option<usize>) -> f64 {
    let Some(lane) = lane else { return 0.0 };
    scene
        .neighbors
        .iter()
        .filter(|n| n.lane == lane)
        .map(|n| (n.dx.abs() - scene.vehicle_length).max(0.0))
        .fold(GAP_CAP, f64::min)
}

/// Lane the ego ends up in after `action`.
pub fn target_lane(scene: &Scene, action: Action) -> usize {
    match action {
        Action::LaneLeft => scene.left_lane().unwrap_or(scene.ego_lane),
        Action::LaneRight => scene.right_lane().unwrap_or(scene.ego_lane),
        _ => scene.ego_lane,
    }
}

/// Observation, one-hot action, then scaled gaps, closing speeds and TTC.
pub fn risk_features(obs: &EgoObservation, action: Action, cfg: &SimConfig) -> Vec<f64> {
    let scene = Scene::from_obs(obs, cfg);
    let lane = scene.ego_lane;
    let target = target_lane(&scene, action);
    let mut f = Vec::with_capacity(FEATURE_DIM);
    f.extend_from_slice(obs.values());
    f.extend(action.one_hot());
    f.extend([
        scene.front_gap(lane).min(GAP_CAP) / GAP_CAP,
        scene.front_closing(lane) / cfg.v_max,
        lane_min_gap(&scene, scene.left_lane()) / GAP_CAP,
        lane_min_gap(&scene, scene.right_lane()) / GAP_CAP,
        scene.ttc_ahead(lane).min(TTC_CAP) / TTC_CAP,
        scene.front_gap(target).min(GAP_CAP).max(-GAP_CAP) / GAP_CAP,
        scene.rear_gap(target).min(GAP_CAP).max(-GAP_CAP) / GAP_CAP,
        scene.rear_closing(target) / cfg.v_max,
    ]);
    f
}

/// Pre-collision frames become positives; up to three safe frames per
/// trajectory (no collision within the next three frames, TTC above 3 s)
/// become negatives.
pub fn label_frames<R: Rng>(trajectory: &[StepRecord], cfg: &SimConfig, rng: &mut R) -> Vec<RiskSample> {
    let collision_end = trajectory.iter().position(|r| r.collided).map(|k| k + 1);
    let usable = collision_end.unwrap_or(trajectory.len());
    let first_positive = collision_end.map_or(usable, |t| t.saturating_sub(PRE_COLLISION_FRAMES));
    let sample =
        |r: &StepRecord, label: u8| RiskSample { features: risk_features(&observe(&r.world(), cfg), r.action, cfg), label };
    let mut out: Vec<RiskSample> = trajectory[first_positive..usable].iter().map(|r| sample(r, 1)).collect();
    let eligible: Vec<usize> = (0..first_positive)
        .filter(|&i| {
            let scene = Scene::from_obs(&observe(&trajectory[i].world(), cfg), cfg);
            scene.ttc_ahead(scene.ego_lane) > SAFE_TTC
        })
        .collect();
    let mut picks: Vec<usize> = eligible.choose_multiple(rng, NEGATIVES_PER_TRAJECTORY).copied().collect();
    picks.sort_unstable();
    out.extend(picks.into_iter().map(|i| sample(&trajectory[i], 0)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskDataset {
    pub samples: Vec<RiskSample>,
}

impl RiskDataset {
    pub fn counts(&self) -> (usize, usize) {
        let pos = self.samples.iter().filter(|s| s.label == 1).count();
        (self.samples.len() - pos, pos)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SafetyError> {
        for s in &self.samples {
            writeln!(w, "{}", serde_json::to_string(s).expect("serializable"))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, SafetyError> {
        let mut samples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: RiskSample =
                serde_json::from_str(&line).map_err(|e| SafetyError::Parse { line: i + 1, message: e.to_string() })?;
            if s.label > 1 || s.features.iter().any(|v| !v.is_finite()) {
                return Err(SafetyError::Parse { line: i + 1, message: "label must be 0|1 with finite features".into() });
            }
            samples.push(s);
        }
        Ok(RiskDataset { samples })
    }

    pub fn save(&self, path: &Path) -> Result<(), SafetyError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SafetyError> {
        RiskDataset::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Labels every trajectory, subsamples each class to the same size (at most
/// `target_per_class`) and shuffles, all under `seed`.
pub fn build_dataset(trajectories: &[Vec<StepRecord>], target_per_class: usize, cfg: &SimConfig, seed: u64) -> RiskDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg): (Vec<RiskSample>, Vec<RiskSample>) =
        trajectories.iter().flat_map(|t| label_frames(t, cfg, &mut rng)).partition(|s| s.label == 1);
    let size = target_per_class.min(pos.len()).min(neg.len());
    if size < target_per_class {
        log::warn!("only {} positive and {} negative frames available; building {size} per class", pos.len(), neg.len());
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate(size);
    neg.truncate(size);
    let mut samples = pos;
    samples.extend(neg);
    samples.shuffle(&mut rng);
    RiskDataset { samples }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskVariant {
    Lr,
    GbdtLr,
}

impl std::str::FromStr for RiskVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lr" => Ok(RiskVariant::Lr),
            "gbdt_lr" => Ok(RiskVariant::GbdtLr),
            other => Err(format!("unknown risk model variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64, index: usize },
}

/// Regression tree; node 0 is the root, `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
    pub leaves: usize,
}

impl Tree {
    pub fn leaf(&self, x: &[f64]) -> (usize, f64) {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
                TreeNode::Leaf { value, index } => return (*index, *value),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub trees: usize,
    pub depth: usize,
    pub shrinkage: f64,
    pub l2: f64,
    pub min_leaf: usize,
    pub bins: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams { trees: 100, depth: 3, shrinkage: 0.1, l2: 1.0, min_leaf: 5, bins: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrParams {
    pub l2: f64,
    pub tolerance: f64,
    pub max_epochs: usize,
}

impl Default for LrParams {
    fn default() -> Self {
        LrParams { l2: 1e-4, tolerance: 1e-6, max_epochs: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    pub variant: RiskVariant,
    pub feature_dim: usize,
    /// Standardization applied before the LR variant.
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub trees: Vec<Tree>,
    /// LR weights: one per feature, or one per leaf across all trees.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub held_out_auc: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    model: RiskModel,
}

impl RiskModel {
    /// Logistic regression with all parameters zero.
    pub fn zero_lr(feature_dim: usize) -> Self {
        RiskModel {
            variant: RiskVariant::Lr,
            feature_dim,
            means: vec![0.0; feature_dim],
            scales: vec![1.0; feature_dim],
            trees: Vec::new(),
            weights: vec![0.0; feature_dim],
            bias: 0.0,
            held_out_auc: None,
        }
    }

    fn leaf_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.trees.len());
        let mut acc = 0;
        for t in &self.trees {
            offsets.push(acc);
            acc += t.leaves;
        }
        offsets
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let z = match self.variant {
            RiskVariant::Lr => {
                self.bias
                    + x.iter()
                        .zip(&self.means)
                        .zip(&self.scales)
                        .zip(&self.weights)
                        .map(|(((v, m), s), w)| w * (v - m) / s)
                        .sum::<f64>()
            }
            RiskVariant::GbdtLr => {
                self.bias
                    + self.trees.iter().zip(self.leaf_offsets()).map(|(t, off)| self.weights[off + t.leaf(x).0]).sum::<f64>()
            }
        };
        z.clamp(-LOGIT_CAP, LOGIT_CAP)
    }

    /// Probability strictly inside (0, 1).
    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile { version: MODEL_VERSION, model: self.clone() }).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, SafetyError> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SafetyError::Parse { line: e.line(), message: e.to_string() })?;
        let version = v.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != MODEL_VERSION {
            return Err(SafetyError::Version { expected: MODEL_VERSION, found: version });
        }
        let file: ModelFile = serde_json::from_value(v).map_err(|e| SafetyError::Parse { line: 0, message: e.to_string() })?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<(), SafetyError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SafetyError> {
        RiskModel::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn predict_risk(model: &RiskModel, obs: &EgoObservation, action: Action, cfg: &SimConfig) -> f64 {
    model.predict(&risk_features(obs, action, cfg))
}

/// Area under the ROC curve via the Mann-Whitney statistic, ties averaged.
pub fn auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 0.5;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

pub fn accuracy(model: &RiskModel, samples: &[RiskSample]) -> f64 {
    let hits = samples.iter().filter(|s| (model.predict(&s.features) >= 0.5) == (s.label == 1)).count();
    hits as f64 / samples.len().max(1) as f64
}

/// Sparse design row: `(column, value)` pairs plus an implicit bias.
type SparseRow = Vec<(usize, f64)>;

/// Full-batch gradient descent on mean log-loss plus `l2/2 |w|^2`, starting
/// from `(w, b)`. Stops when the loss improves by less than `tolerance`.
fn fit_logistic(rows: &[SparseRow], labels: &[f64], w: &mut [f64], b: &mut f64, params: &LrParams) {
    let n = rows.len() as f64;
    let mean_sq = rows.iter().map(|r| r.iter().map(|(_, v)| v * v).sum::<f64>() + 1.0).sum::<f64>() / n;
    let step = 1.0 / (0.25 * mean_sq + params.l2);
    let loss_of = |w: &[f64], b: f64| {
        let data: f64 = rows
            .iter()
            .zip(labels)
            .map(|(r, y)| {
                let z = b + r.iter().map(|(j, v)| w[*j] * v).sum::<f64>();
                // log(1 + e^z) - y z, stable
                z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
            })
            .sum::<f64>()
            / n;
        data + 0.5 * params.l2 * w.iter().map(|v| v * v).sum::<f64>()
    };
    let mut loss = loss_of(w, *b);
    let mut grad = vec![0.0; w.len()];
    for _ in 0..params.max_epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (r, y) in rows.iter().zip(labels) {
            let z = *b + r.iter().map(|(j, v)| w[*j] * v).sum::<f64>();
            let e = sigmoid(z) - y;
            gb += e;
            for (j, v) in r {
                grad[*j] += e * v;
            }
        }
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= step * (gj / n + params.l2 * *wj);
        }
        *b -= step * gb / n;
        let next = loss_of(w, *b);
        let improvement = loss - next;
        loss = next;
        if improvement.abs() < params.tolerance {
            break;
        }
    }
}

/// Quantile thresholds per feature; `x <= thresholds[j]` means bin `<= j`.
fn bin_edges(samples: &[&RiskSample], feature: usize, bins: usize) -> Vec<f64> {
    let mut values: Vec<f64> = samples.iter().map(|s| s.features[feature]).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    if values.len() <= 1 {
        return Vec::new();
    }
    if values.len() <= bins {
        return values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let mut edges: Vec<f64> = (1..bins)
        .map(|q| {
            let i = q * values.len() / bins;
            0.5 * (values[i - 1] + values[i])
        })
        .collect();
    edges.dedup();
    edges
}

struct TreeBuilder<'a> {
    binned: &'a [Vec<u16>],
    edges: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbdtParams,
    nodes: Vec<TreeNode>,
    leaves: usize,
}

impl TreeBuilder<'_> {
    fn leaf_value(&self, rows: &[usize]) -> f64 {
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        -g / (h + self.params.l2)
    }

    fn push_leaf(&mut self, rows: &[usize]) -> usize {
        let value = self.leaf_value(rows);
        self.nodes.push(TreeNode::Leaf { value, index: self.leaves });
        self.leaves += 1;
        self.nodes.len() - 1
    }

    fn best_split(&self, rows: &[usize]) -> Option<(usize, usize)> {
        let l2 = self.params.l2;
        let g_tot: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h_tot: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let parent = g_tot * g_tot / (h_tot + l2);
        let mut best: Option<(f64, usize, usize)> = None;
        for (f, edges) in self.edges.iter().enumerate() {
            if edges.is_empty() {
                continue;
            }
            let nb = edges.len() + 1;
            let mut g = vec![0.0; nb];
            let mut h = vec![0.0; nb];
            let mut c = vec![0usize; nb];
            for &i in rows {
                let b = self.binned[f][i] as usize;
                g[b] += self.grad[i];
                h[b] += self.hess[i];
                c[b] += 1;
            }
            let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0);
            for j in 0..edges.len() {
                gl += g[j];
                hl += h[j];
                cl += c[j];
                let cr = rows.len() - cl;
                if cl < self.params.min_leaf || cr < self.params.min_leaf {
                    continue;
                }
                let (gr, hr) = (g_tot - gl, h_tot - hl);
                let gain = gl * gl / (hl + l2) + gr * gr / (hr + l2) - parent;
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, j));
                }
            }
        }
        best.map(|(_, f, j)| (f, j))
    }

    fn build(&mut self, rows: &[usize], depth: usize) -> usize {
        if depth == self.params.depth || rows.len() < 2 * self.params.min_leaf {
            return self.push_leaf(rows);
        }
        let Some((feature, j)) = self.best_split(rows) else {
            return self.push_leaf(rows);
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| (self.binned[feature][i] as usize) <= j);
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: 0.0, index: 0 });
        let left = self.build(&left_rows, depth + 1);
        let right = self.build(&right_rows, depth + 1);
        self.nodes[id] = TreeNode::Split { feature, threshold: self.edges[feature][j], left, right };
        id
    }
}

fn standardization(samples: &[&RiskSample], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let means: Vec<f64> = (0..dim).map(|j| samples.iter().map(|s| s.features[j]).sum::<f64>() / n).collect();
    let scales: Vec<f64> = (0..dim)
        .map(|j| {
            let var = samples.iter().map(|s| (s.features[j] - means[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-18 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (means, scales)
}

/// Fits a model on `train`; both labels must be present.
pub fn fit_risk_model(
    train: &[&RiskSample],
    variant: RiskVariant,
    gbdt: &GbdtParams,
    lr: &LrParams,
) -> Result<RiskModel, SafetyError> {
    let positives = train.iter().filter(|s| s.label == 1).count();
    let negatives = train.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(SafetyError::SingleClass { positives, negatives });
    }
    let dim = train[0].features.len();
    if let Some(bad) = train.iter().find(|s| s.features.len() != dim) {
        return Err(SafetyError::Dimension { expected: dim, found: bad.features.len() });
    }
    let labels: Vec<f64> = train.iter().map(|s| s.label as f64).collect();
    match variant {
        RiskVariant::Lr => {
            let (means, scales) = standardization(train, dim);
            let rows: Vec<SparseRow> =
                train.iter().map(|s| (0..dim).map(|j| (j, (s.features[j] - means[j]) / scales[j])).collect()).collect();
            let mut weights = vec![0.0; dim];
            let mut bias = 0.0;
            fit_logistic(&rows, &labels, &mut weights, &mut bias, lr);
            Ok(RiskModel { variant, feature_dim: dim, means, scales, trees: Vec::new(), weights, bias, held_out_auc: None })
        }
        RiskVariant::GbdtLr => {
            let edges: Vec<Vec<f64>> = (0..dim).map(|f| bin_edges(train, f, gbdt.bins)).collect();
            let binned: Vec<Vec<u16>> = (0..dim)
                .map(|f| train.iter().map(|s| edges[f].partition_point(|t| *t < s.features[f]) as u16).collect())
                .collect();
            let p0 = positives as f64 / train.len() as f64;
            let base = (p0 / (1.0 - p0)).ln();
            let mut margin = vec![base; train.len()];
            let all: Vec<usize> = (0..train.len()).collect();
            let mut trees = Vec::with_capacity(gbdt.trees);
            for _ in 0..gbdt.trees {
                let p: Vec<f64> = margin.iter().map(|&m| sigmoid(m)).collect();
                let grad: Vec<f64> = p.iter().zip(&labels).map(|(p, y)| p - y).collect();
                let hess: Vec<f64> = p.iter().map(|p| (p * (1.0 - p)).max(1e-12)).collect();
                let mut builder = TreeBuilder {
                    binned: &binned,
                    edges: &edges,
                    grad: &grad,
                    hess: &hess,
                    params: gbdt,
                    nodes: Vec::new(),
                    leaves: 0,
                };
                builder.build(&all, 0);
                let tree = Tree { nodes: builder.nodes, leaves: builder.leaves };
                for (m, s) in margin.iter_mut().zip(train) {
                    *m += gbdt.shrinkage * tree.leaf(&s.features).1;
                }
                trees.push(tree);
            }
            // The LR stage starts from the boosted margin and re-weights leaves.
            let mut weights = Vec::new();
            let mut offsets = Vec::new();
            for t in &trees {
                offsets.push(weights.len());
                let mut w = vec![0.0; t.leaves];
                for node in &t.nodes {
                    if let TreeNode::Leaf { value, index } = node {
                        w[*index] = gbdt.shrinkage * value;
                    }
                }
                weights.extend(w);
            }
            let rows: Vec<SparseRow> = train
                .iter()
                .map(|s| trees.iter().zip(&offsets).map(|(t, off)| (off + t.leaf(&s.features).0, 1.0)).collect())
                .collect();
            let mut bias = base;
            fit_logistic(&rows, &labels, &mut weights, &mut bias, lr);
            Ok(RiskModel {
                variant,
                feature_dim: dim,
                means: Vec::new(),
                scales: Vec::new(),
                trees,
                weights,
                bias,
                held_out_auc: None,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_size: usize,
    pub test_size: usize,
    pub held_out_auc: f64,
    pub held_out_accuracy: f64,
}

/// Seeded 80/20 split, fit on the larger part, score on the rest.
pub fn train_risk_model(dataset: &RiskDataset, variant: RiskVariant, seed: u64) -> Result<(RiskModel, TrainReport), SafetyError> {
    train_risk_model_with(dataset, variant, seed, &GbdtParams::default(), &LrParams::default())
}

pub fn train_risk_model_with(
    dataset: &RiskDataset,
    variant: RiskVariant,
    seed: u64,
    gbdt: &GbdtParams,
    lr: &LrParams,
) -> Result<(RiskModel, TrainReport), SafetyError> {
    let (neg, pos) = dataset.counts();
    if pos == 0 || neg == 0 {
        return Err(SafetyError::SingleClass { positives: pos, negatives: neg });
    }
    let mut idx: Vec<usize> = (0..dataset.samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (idx.len() * 4).div_ceil(5).min(idx.len() - 1).max(1);
    let train: Vec<&RiskSample> = idx[..cut].iter().map(|&i| &dataset.samples[i]).collect();
    let test: Vec<RiskSample> = idx[cut..].iter().map(|&i| dataset.samples[i].clone()).collect();
    let mut model = fit_risk_model(&train, variant, gbdt, lr)?;
    let scores: Vec<f64> = test.iter().map(|s| model.predict(&s.features)).collect();
    let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
    let report = TrainReport {
        train_size: train.len(),
        test_size: test.len(),
        held_out_auc: auc(&scores, &labels),
        held_out_accuracy: accuracy(&model, &test),
    };
    model.held_out_auc = Some(report.held_out_auc);
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackTier {
    Emergency,
    Caution,
    None,
}

impl FallbackTier {
    pub fn rule(self) -> &'static str {
        match self {
            FallbackTier::Emergency => "emergency braking: any proposal becomes SLOWER",
            FallbackTier::Caution => "lane keeping: lane changes become IDLE; IDLE/FASTER become SLOWER below the minimum gap",
            FallbackTier::None => "proposal passes unchanged",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub emergency: f64,
    pub caution: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds { emergency: 0.9, caution: 0.6 }
    }
}

/// Front gap below `v * MIN_HEADWAY`.
pub fn below_min_gap(obs: &EgoObservation, cfg: &SimConfig) -> bool {
    let scene = Scene::from_obs(obs, cfg);
    scene.front_gap(scene.ego_lane) < scene.ego_speed * MIN_HEADWAY
}

/// Tier rules at a given risk level.
pub fn apply_tier(proposed: Action, risk: f64, short_gap: bool, thresholds: &GateThresholds) -> (Action, FallbackTier) {
    if risk >= thresholds.emergency {
        return (Action::Slower, FallbackTier::Emergency);
    }
    if risk >= thresholds.caution {
        let kept = if proposed.is_lane_change() { Action::Idle } else { proposed };
        let kept = if short_gap && matches!(kept, Action::Idle | Action::Faster) { Action::Slower } else { kept };
        return (kept, FallbackTier::Caution);
    }
    (proposed, FallbackTier::None)
}

pub fn gate_action(
    model: &RiskModel,
    obs: &EgoObservation,
    proposed: Action,
    thresholds: &GateThresholds,
    cfg: &SimConfig,
) -> (Action, FallbackTier, f64) {
    let risk = predict_risk(model, obs, proposed, cfg);
    let (action, tier) = apply_tier(proposed, risk, below_min_gap(obs, cfg), thresholds);
    (action, tier, risk)
}

/// Source of the risk score used by the gate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PredictorKind {
    #[default]
    Local,
    /// HTTP POST `{"features": [...]}` answered by `{"risk": p}`.
    Remote { endpoint: String, timeout_ms: u64 },
}

#[derive(Serialize)]
struct RiskRequest<'a> {
    features: &'a [f64],
}

#[derive(Deserialize)]
struct RiskResponse {
    risk: f64,
}

pub fn remote_risk(endpoint: &str, timeout_ms: u64, features: &[f64]) -> Result<f64, String> {
    let client = reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_millis(timeout_ms))
        .build()
        .map_err(|e| format!("client: {e}"))?;
    let resp = client.post(endpoint).json(&RiskRequest { features }).send().map_err(|e| {
        if e.is_timeout() {
            format!("timeout after {timeout_ms} ms")
        } else {
            format!("request: {e}")
        }
    })?;
    if !resp.status().is_success() {
        return Err(format!("status {}", resp.status()));
    }
    let body: RiskResponse = resp.json().map_err(|e| format!("response body: {e}"))?;
    if !(0.0..=1.0).contains(&body.risk) {
        return Err(format!("risk {} outside [0, 1]", body.risk));
    }
    Ok(body.risk)
}

/// Gate with a local model and an optional remote scorer; remote failures
/// fall back to the local model and are counted.
#[derive(Debug, Clone)]
pub struct RiskGate {
    pub model: RiskModel,
    pub predictor: PredictorKind,
    pub thresholds: GateThresholds,
    pub remote_failures: u64,
}

impl RiskGate {
    pub fn new(model: RiskModel, predictor: PredictorKind, thresholds: GateThresholds) -> Self {
        RiskGate { model, predictor, thresholds, remote_failures: 0 }
    }

    pub fn score(&mut self, obs: &EgoObservation, proposed: Action, cfg: &SimConfig) -> f64 {
        let features = risk_features(obs, proposed, cfg);
        if let PredictorKind::Remote { endpoint, timeout_ms } = &self.predictor {
            match remote_risk(endpoint, *timeout_ms, &features) {
                Ok(r) => return r,
                Err(cause) => {
                    self.remote_failures += 1;
                    log::warn!("remote risk predictor failed ({cause}); using the local model");
                }
            }
        }
        self.model.predict(&features)
    }

    pub fn gate(&mut self, obs: &EgoObservation, proposed: Action, cfg: &SimConfig) -> (Action, FallbackTier, f64) {
        let risk = self.score(obs, proposed, cfg);
        let (action, tier) = apply_tier(proposed, risk, below_min_gap(obs, cfg), &self.thresholds);
        (action, tier, risk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::fixtures::world;
    use crate::sim::{reset, step};

    fn record(cfg: &SimConfig, world: &crate::sim::WorldState, action: Action, collided: bool) -> StepRecord {
        let mut w = world.clone();
        let outcome = step(&mut w, action, cfg).unwrap();
        StepRecord { collided, ..StepRecord::new(world, action, &outcome) }
    }

    /// Trajectory of `len` records with the last one colliding, each frame
    /// distinguishable by its time stamp.
    fn synthetic(cfg: &SimConfig, len: usize, collide: bool) -> Vec<StepRecord> {
        (0..len)
            .map(|i| {
                let mut w = world(cfg, 1, 25.0, &[(80.0, 1, 25.0)]);
                w.time = i as f64;
                record(cfg, &w, Action::Idle, collide && i + 1 == len)
            })
            .collect()
    }

    /// Frame index recovered from the ego speed `20 + i` set below.
    fn frame_times(samples: &[RiskSample], label: u8, cfg: &SimConfig) -> Vec<usize> {
        samples.iter().filter(|s| s.label == label).map(|s| (s.features[2] * cfg.v_max - 20.0).round() as usize).collect()
    }

    #[test]
    fn label_frames_examples() {
        let cfg = SimConfig::default();
        let mut traj = synthetic(&cfg, 10, true);
        for (i, r) in traj.iter_mut().enumerate() {
            r.vehicles[0].vx = 20.0 + i as f64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = label_frames(&traj, &cfg, &mut rng);
        assert_eq!(frame_times(&samples, 1, &cfg), vec![7, 8, 9]);
        let neg = frame_times(&samples, 0, &cfg);
        assert_eq!(neg.len(), 3);
        assert!(neg.iter().all(|&i| i < 7));

        let clean = synthetic(&cfg, 10, false);
        let samples = label_frames(&clean, &cfg, &mut rng);
        assert!(samples.iter().all(|s| s.label == 0));

        let short = synthetic(&cfg, 2, true);
        let samples = label_frames(&short, &cfg, &mut rng);
        assert_eq!(samples.len(), 2);
        assert!(samples.iter().all(|s| s.label == 1));
    }

    #[test]
    fn negatives_require_safe_ttc() {
        let cfg = SimConfig::default();
        // Leader 10 m ahead closing at 5 m/s: TTC 1 s, never a negative.
        let tight = world(&cfg, 1, 25.0, &[(15.0, 1, 20.0)]);
        let traj: Vec<StepRecord> = (0..8).map(|_| record(&cfg, &tight, Action::Idle, false)).collect();
        let samples = label_frames(&traj, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(samples.is_empty());
    }

    fn episodes(n: usize, seed: u64, cfg: &SimConfig) -> Vec<Vec<StepRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|e| {
                let (mut w, _) = reset(cfg, seed * 1000 + e as u64).unwrap();
                let mut traj = Vec::new();
                while !w.done {
                    let a =
                        [Action::Faster, Action::Faster, Action::LaneLeft, Action::LaneRight, Action::Idle][rng.gen_range(0..5)];
                    let before = w.clone();
                    let o = step(&mut w, a, cfg).unwrap();
                    traj.push(StepRecord::new(&before, a, &o));
                }
                traj
            })
            .collect()
    }

    #[test]
    fn build_dataset_balance_and_determinism() {
        let cfg = SimConfig::default();
        let trajs = episodes(150, 3, &cfg);
        let d = build_dataset(&trajs, 100, &cfg, 7);
        assert_eq!(d.counts(), (100, 100));
        assert_eq!(d, build_dataset(&trajs, 100, &cfg, 7));
        assert_ne!(d, build_dataset(&trajs, 100, &cfg, 8));
        assert!(d.samples.iter().all(|s| s.features.len() == FEATURE_DIM && s.features.iter().all(|v| v.is_finite())));
        let big = build_dataset(&trajs, 1_000_000, &cfg, 7);
        let (n, p) = big.counts();
        assert_eq!(n, p);
        assert!(n > 0);
    }

    #[test]
    fn dataset_jsonl_round_trip() {
        let d = RiskDataset {
            samples: vec![RiskSample { features: vec![0.5, -1.25], label: 1 }, RiskSample { features: vec![0.0, 3.0], label: 0 }],
        };
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        assert_eq!(RiskDataset::read_jsonl(&buf[..]).unwrap(), d);
        assert!(RiskDataset::read_jsonl(&b"{\"features\":[1],\"label\":2}\n"[..]).is_err());
    }

    #[test]
    fn auc_oracle() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]), 0.5);
        // pairwise count oracle
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..300).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
        let labels: Vec<u8> = (0..300).map(|_| rng.gen_range(0..2)).collect();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..300 {
            for j in 0..300 {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((auc(&scores, &labels) - wins / pairs).abs() < 1e-12);
    }

    fn toy(n: usize, seed: u64, label: impl Fn(f64, f64) -> u8) -> RiskDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                let (x, y) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                RiskSample { features: vec![x, y], label: label(x, y) }
            })
            .collect();
        RiskDataset { samples }
    }

    #[test]
    fn lr_separates_linear_toy() {
        // Margin band removed so the split is cleanly separable.
        let mut d = toy(1200, 5, |x, y| u8::from(x + 2.0 * y > 0.0));
        d.samples.retain(|s| (s.features[0] + 2.0 * s.features[1]).abs() > 0.1);
        let (model, report) = train_risk_model(&d, RiskVariant::Lr, 1).unwrap();
        assert_eq!(report.held_out_accuracy, 1.0);
        assert!(model.weights[1] > model.weights[0] && model.weights[0] > 0.0);
    }

    #[test]
    fn gbdt_lr_learns_xor_where_lr_cannot() {
        let d = toy(2000, 6, |x, y| u8::from((x > 0.0) != (y > 0.0)));
        let (_, gb) = train_risk_model(&d, RiskVariant::GbdtLr, 2).unwrap();
        let (_, lr) = train_risk_model(&d, RiskVariant::Lr, 2).unwrap();
        assert!(gb.held_out_accuracy > 0.9, "{gb:?}");
        assert!((lr.held_out_accuracy - 0.5).abs() < 0.1, "{lr:?}");
    }

    #[test]
    fn shuffled_labels_give_chance_auc() {
        let mut d = toy(2000, 7, |x, _| u8::from(x > 0.0));
        let mut labels: Vec<u8> = d.samples.iter().map(|s| s.label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
        for (s, l) in d.samples.iter_mut().zip(labels) {
            s.label = l;
        }
        for v in [RiskVariant::Lr, RiskVariant::GbdtLr] {
            let (_, r) = train_risk_model(&d, v, 3).unwrap();
            assert!((0.4..=0.6).contains(&r.held_out_auc), "{v:?} {r:?}");
        }
    }

    #[test]
    fn single_class_is_an_error() {
        let d = toy(50, 9, |_, _| 1);
        assert!(matches!(train_risk_model(&d, RiskVariant::Lr, 0), Err(SafetyError::SingleClass { .. })));
    }

    #[test]
    fn zero_model_and_output_range() {
        let cfg = SimConfig::default();
        let zero = RiskModel::zero_lr(FEATURE_DIM);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = toy(400, 11, |x, y| u8::from(x * y > 0.0));
        let (gb, _) = train_risk_model(&d, RiskVariant::GbdtLr, 0).unwrap();
        for _ in 0..1000 {
            let obs = EgoObservation((0..OBS_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let a = Action::ALL[rng.gen_range(0..5)];
            assert_eq!(predict_risk(&zero, &obs, a, &cfg), 0.5);
            let p = gb.predict(&[rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3)]);
            assert!(p > 0.0 && p < 1.0);
        }
        let mut huge = RiskModel::zero_lr(2);
        huge.weights = vec![1e9, 1e9];
        let p = huge.predict(&[1.0, 1.0]);
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn model_json_round_trip() {
        let d = toy(300, 12, |x, y| u8::from(x > y));
        for v in [RiskVariant::Lr, RiskVariant::GbdtLr] {
            let (m, _) = train_risk_model(&d, v, 0).unwrap();
            let back = RiskModel::from_json(&m.to_json()).unwrap();
            assert_eq!(back, m);
        }
        let bad = RiskModel::zero_lr(2).to_json().replace("\"version\": 1", "\"version\": 4");
        assert!(matches!(RiskModel::from_json(&bad), Err(SafetyError::Version { found: 4, .. })));
    }

    #[test]
    fn gate_rule_table() {
        let cfg = SimConfig::default();
        let th = GateThresholds::default();
        assert_eq!(apply_tier(Action::LaneLeft, 0.95, false, &th), (Action::Slower, FallbackTier::Emergency));
        assert_eq!(apply_tier(Action::LaneRight, 0.7, false, &th), (Action::Idle, FallbackTier::Caution));
        assert_eq!(apply_tier(Action::Faster, 0.7, true, &th), (Action::Slower, FallbackTier::Caution));
        assert_eq!(apply_tier(Action::Faster, 0.7, false, &th), (Action::Faster, FallbackTier::Caution));
        assert_eq!(apply_tier(Action::LaneRight, 0.1, true, &th), (Action::LaneRight, FallbackTier::None));
        for a in Action::ALL {
            for risk in [0.0, 0.3, 0.6, 0.75, 0.9, 0.99] {
                for gap in [false, true] {
                    let (once, tier) = apply_tier(a, risk, gap, &th);
                    assert_eq!(apply_tier(once, risk, gap, &th), (once, tier));
                    if risk >= 0.9 {
                        assert_eq!(once, Action::Slower);
                    }
                }
            }
        }
        // Through a model: a constant-risk LR via its bias.
        let mut m = RiskModel::zero_lr(FEATURE_DIM);
        m.bias = (0.7f64 / 0.3).ln();
        let open = observe(&world(&cfg, 1, 25.0, &[(90.0, 1, 25.0)]), &cfg);
        let (a, tier, risk) = gate_action(&m, &open, Action::LaneRight, &th, &cfg);
        assert!((risk - 0.7).abs() < 1e-12);
        assert_eq!((a, tier), (Action::Idle, FallbackTier::Caution));
        let close = observe(&world(&cfg, 1, 25.0, &[(20.0, 1, 25.0)]), &cfg);
        assert!(below_min_gap(&close, &cfg));
        assert_eq!(gate_action(&m, &close, Action::Idle, &th, &cfg).0, Action::Slower);
        m.bias = -5.0;
        assert_eq!(gate_action(&m, &close, Action::Faster, &th, &cfg).1, FallbackTier::None);
    }

    #[test]
    fn features_have_fixed_length_and_expected_values() {
        let cfg = SimConfig::default();
        let obs = observe(&world(&cfg, 1, 25.0, &[(15.0, 1, 20.0), (-20.0, 2, 30.0)]), &cfg);
        let f = risk_features(&obs, Action::LaneRight, &cfg);
        assert_eq!(f.len(), FEATURE_DIM);
        let e = &f[OBS_DIM + Action::COUNT..];
        assert!((e[0] - 0.1).abs() < 1e-12);
        assert!((e[1] - 5.0 / 30.0).abs() < 1e-12);
        assert_eq!(e[2], 1.0);
        assert!((e[3] - 0.15).abs() < 1e-12);
        assert!((e[4] - 0.2).abs() < 1e-12);
        assert_eq!(e[5], 1.0);
        assert!((e[6] - 0.15).abs() < 1e-12);
        assert!((e[7] - 5.0 / 30.0).abs() < 1e-12);
        assert_eq!(f[OBS_DIM + Action::LaneRight.id()], 1.0);
    }

    #[test]
    fn risk_gate_predictor_slot() {
        use crate::testutil::stub;
        use std::time::Duration;

        let cfg = SimConfig::default();
        let obs = observe(&world(&cfg, 1, 25.0, &[(60.0, 1, 25.0)]), &cfg);
        let model = RiskModel::zero_lr(FEATURE_DIM);
        let th = GateThresholds::default();

        let mut local = RiskGate::new(model.clone(), PredictorKind::Local, th);
        assert_eq!(local.gate(&obs, Action::LaneLeft, &cfg), gate_action(&model, &obs, Action::LaneLeft, &th, &cfg));

        let endpoint = stub(r#"{"risk":0.95}"#, Duration::ZERO, 1, "features");
        let mut remote = RiskGate::new(model.clone(), PredictorKind::Remote { endpoint, timeout_ms: 2000 }, th);
        assert_eq!(remote.gate(&obs, Action::LaneLeft, &cfg), (Action::Slower, FallbackTier::Emergency, 0.95));
        assert_eq!(remote.remote_failures, 0);

        let endpoint = stub(r#"{"risk":1.7}"#, Duration::ZERO, 1, "features");
        let mut bad = RiskGate::new(model.clone(), PredictorKind::Remote { endpoint, timeout_ms: 2000 }, th);
        assert_eq!(bad.gate(&obs, Action::LaneLeft, &cfg), gate_action(&model, &obs, Action::LaneLeft, &th, &cfg));
        assert_eq!(bad.remote_failures, 1);

        let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        let mut down =
            RiskGate::new(model.clone(), PredictorKind::Remote { endpoint: format!("http://{closed}/"), timeout_ms: 300 }, th);
        assert_eq!(down.gate(&obs, Action::Idle, &cfg).1, FallbackTier::None);
        assert_eq!(down.remote_failures, 1);
    }
}
