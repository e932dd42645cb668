//! Episodic experience store: observation embeddings, a gated write path,
//! an HNSW index over cosine distance and MMR re-ranking.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Action, EgoObservation, OBS_DIM};

pub const STORE_VERSION: u32 = 1;
pub const WRITE_PROBABILITY: f64 = 0.2;
pub const DEFAULT_K: usize = 3;
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// MMR scores closer than this count as tied.
const MMR_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("embedding has dimension {found}, store expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("record id {0} already present")]
    DuplicateId(u64),
    #[error("store file version {found} is not supported (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("store file line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    /// Returns `None` if any value is non-finite.
    pub fn new(values: Vec<f64>) -> Option<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Some(EmbeddingVector { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity; 0 when either vector is zero.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        (dot / (self.norm * other.norm)).clamp(-1.0, 1.0)
    }
}

impl Serialize for EmbeddingVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.values.serialize(s)
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        EmbeddingVector::new(values).ok_or_else(|| serde::de::Error::custom("non-finite embedding value"))
    }
}

/// Maps observations to embedding vectors.
pub trait Embedder {
    fn embed(&self, obs: &EgoObservation) -> EmbeddingVector;
}

/// The normalized observation itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct ObservationEmbedder;

impl Embedder for ObservationEmbedder {
    fn embed(&self, obs: &EgoObservation) -> EmbeddingVector {
        embed_state(obs)
    }
}

pub fn embed_state(obs: &EgoObservation) -> EmbeddingVector {
    let values = obs.values().iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
    EmbeddingVector::new(values).expect("finite by construction")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub id: u64,
    pub embedding: EmbeddingVector,
    pub situation_text: String,
    pub action: Action,
    pub outcome_text: String,
    pub reward: f64,
    pub is_reflection: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub level_multiplier: f64,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams { m: 16, ef_construction: 200, ef_search: 64, level_multiplier: 1.0 / (16f64).ln(), seed: 0x5eed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    dist: f64,
    id: u64,
    slot: usize,
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone)]
struct Node {
    id: u64,
    vector: EmbeddingVector,
    /// Neighbor slots per layer, `0..=level`.
    links: Vec<Vec<usize>>,
}

/// Layered proximity graph over cosine distance.
#[derive(Debug, Clone)]
pub struct HnswIndex {
    params: HnswParams,
    dim: usize,
    nodes: Vec<Node>,
    slots: BTreeMap<u64, usize>,
    entry: Option<usize>,
    rng: ChaCha8Rng,
}

impl HnswIndex {
    pub fn new(dim: usize, params: HnswParams) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(params.seed);
        HnswIndex { params, dim, nodes: Vec::new(), slots: BTreeMap::new(), entry: None, rng }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn entry_id(&self) -> Option<u64> {
        self.entry.map(|s| self.nodes[s].id)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.slots.contains_key(&id)
    }

    fn capacity(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn top_level(&self) -> usize {
        self.entry.map_or(0, |s| self.nodes[s].links.len() - 1)
    }

    fn distance(&self, q: &EmbeddingVector, slot: usize) -> f64 {
        1.0 - q.cosine(&self.nodes[slot].vector)
    }

    fn scored(&self, q: &EmbeddingVector, slot: usize) -> Scored {
        Scored { dist: self.distance(q, slot), id: self.nodes[slot].id, slot }
    }

    /// Beam search on one layer; result sorted by ascending distance.
    fn search_layer(&self, q: &EmbeddingVector, entries: &[Scored], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited = vec![false; self.nodes.len()];
        let mut frontier: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut best: BinaryHeap<Scored> = BinaryHeap::new();
        for e in entries {
            if !visited[e.slot] {
                visited[e.slot] = true;
                frontier.push(Reverse(*e));
                best.push(*e);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(Reverse(c)) = frontier.pop() {
            if best.len() >= ef && c > *best.peek().expect("non-empty") {
                break;
            }
            for &n in &self.nodes[c.slot].links[layer] {
                if visited[n] {
                    continue;
                }
                visited[n] = true;
                let s = self.scored(q, n);
                if best.len() < ef || s < *best.peek().expect("non-empty") {
                    frontier.push(Reverse(s));
                    best.push(s);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    fn random_level(&mut self) -> usize {
        let u: f64 = 1.0 - self.rng.gen::<f64>();
        (-u.ln() * self.params.level_multiplier).floor() as usize
    }

    pub fn insert(&mut self, id: u64, vector: EmbeddingVector) -> Result<(), MemoryError> {
        if vector.dim() != self.dim {
            return Err(MemoryError::Dimension { expected: self.dim, found: vector.dim() });
        }
        if self.slots.contains_key(&id) {
            return Err(MemoryError::DuplicateId(id));
        }
        let level = self.random_level();
        let slot = self.nodes.len();
        self.nodes.push(Node { id, vector, links: vec![Vec::new(); level + 1] });
        self.slots.insert(id, slot);
        let Some(entry) = self.entry else {
            self.entry = Some(slot);
            return Ok(());
        };
        let q = self.nodes[slot].vector.clone();
        let top = self.top_level();
        let mut eps = vec![self.scored(&q, entry)];
        for layer in (level + 1..=top).rev() {
            eps = self.search_layer(&q, &eps, 1, layer);
        }
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, layer);
            let chosen: Vec<usize> = found.iter().filter(|s| s.slot != slot).take(self.params.m).map(|s| s.slot).collect();
            self.nodes[slot].links[layer] = chosen.clone();
            for n in chosen {
                self.nodes[n].links[layer].push(slot);
                if self.nodes[n].links[layer].len() > self.capacity(layer) {
                    self.shrink(n, layer);
                }
            }
            eps = found;
        }
        if level > top {
            self.entry = Some(slot);
        }
        Ok(())
    }

    fn shrink(&mut self, slot: usize, layer: usize) {
        let origin = self.nodes[slot].vector.clone();
        let mut scored: Vec<Scored> = self.nodes[slot].links[layer].iter().map(|&n| self.scored(&origin, n)).collect();
        scored.sort();
        scored.truncate(self.capacity(layer));
        self.nodes[slot].links[layer] = scored.into_iter().map(|s| s.slot).collect();
    }

    /// Approximate `n` nearest ids with their cosine distances, ascending.
    pub fn search(&self, query: &EmbeddingVector, n: usize) -> Vec<(u64, f64)> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        if n == 0 {
            return Vec::new();
        }
        let mut eps = vec![self.scored(query, entry)];
        for layer in (1..=self.top_level()).rev() {
            eps = self.search_layer(query, &eps, 1, layer);
        }
        let found = self.search_layer(query, &eps, self.params.ef_search.max(n), 0);
        found.into_iter().take(n).map(|s| (s.id, s.dist)).collect()
    }

    /// Exact kNN by linear scan, same ordering rules as `search`.
    pub fn brute_force(&self, query: &EmbeddingVector, n: usize) -> Vec<(u64, f64)> {
        let mut all: Vec<Scored> = (0..self.nodes.len()).map(|s| self.scored(query, s)).collect();
        all.sort();
        all.into_iter().take(n).map(|s| (s.id, s.dist)).collect()
    }

    /// Checks list bounds, edge liveness, self-loops and entry-point state.
    pub fn check_invariants(&self) -> Result<(), String> {
        match self.entry {
            None if !self.nodes.is_empty() => return Err("non-empty index without entry point".into()),
            Some(_) if self.nodes.is_empty() => return Err("entry point on empty index".into()),
            Some(e) if e >= self.nodes.len() => return Err("entry point out of range".into()),
            _ => {}
        }
        let top = self.top_level();
        for (slot, node) in self.nodes.iter().enumerate() {
            if node.links.len() - 1 > top {
                return Err(format!("node {} above entry level", node.id));
            }
            for (layer, links) in node.links.iter().enumerate() {
                if links.len() > self.capacity(layer) {
                    return Err(format!("node {} layer {layer} has {} links", node.id, links.len()));
                }
                for &n in links {
                    if n >= self.nodes.len() || n == slot {
                        return Err(format!("node {} layer {layer} has invalid link {n}", node.id));
                    }
                    if self.nodes[n].links.len() <= layer {
                        return Err(format!("node {} links to {} on layer {layer} it does not reach", node.id, self.nodes[n].id));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Greedy maximal-marginal-relevance selection. Returns ids in pick order.
pub fn mmr_rerank(candidates: &[(u64, &EmbeddingVector)], query: &EmbeddingVector, k: usize, lambda: f64) -> Vec<u64> {
    let relevance: Vec<f64> = candidates.iter().map(|(_, e)| query.cosine(e)).collect();
    let mut picked: Vec<usize> = Vec::new();
    let mut redundancy = vec![f64::NEG_INFINITY; candidates.len()];
    while picked.len() < k.min(candidates.len()) {
        let mut best: Option<(f64, u64, usize)> = None;
        for (i, (id, _)) in candidates.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            let score = if picked.is_empty() { relevance[i] } else { lambda * relevance[i] - (1.0 - lambda) * redundancy[i] };
            let better = match best {
                None => true,
                Some((s, bid, _)) => score > s + MMR_TIE_EPS || ((score - s).abs() <= MMR_TIE_EPS && *id < bid),
            };
            if better {
                best = Some((score, *id, i));
            }
        }
        let (_, _, i) = best.expect("candidate available");
        picked.push(i);
        for (j, (_, e)) in candidates.iter().enumerate() {
            redundancy[j] = redundancy[j].max(candidates[i].1.cosine(e));
        }
    }
    picked.into_iter().map(|i| candidates[i].0).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    version: u32,
    dimension: usize,
}

/// Records plus their index. Slot order in `records` follows insertion.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    records: Vec<ExperienceRecord>,
    by_id: BTreeMap<u64, usize>,
    index: HnswIndex,
    next_id: u64,
}

impl Default for MemoryStore {
    fn default() -> Self {
        MemoryStore::new(OBS_DIM, HnswParams::default())
    }
}

impl MemoryStore {
    pub fn new(dim: usize, params: HnswParams) -> Self {
        MemoryStore { records: Vec::new(), by_id: BTreeMap::new(), index: HnswIndex::new(dim, params), next_id: 0 }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.index.dim()
    }

    pub fn records(&self) -> &[ExperienceRecord] {
        &self.records
    }

    pub fn index(&self) -> &HnswIndex {
        &self.index
    }

    pub fn get(&self, id: u64) -> Option<&ExperienceRecord> {
        self.by_id.get(&id).map(|&i| &self.records[i])
    }

    /// Id that the next `insert_new` will assign.
    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn insert(&mut self, record: ExperienceRecord) -> Result<(), MemoryError> {
        self.index.insert(record.id, record.embedding.clone())?;
        self.next_id = self.next_id.max(record.id + 1);
        self.by_id.insert(record.id, self.records.len());
        self.records.push(record);
        Ok(())
    }

    /// Stores with a fresh id and returns it.
    pub fn insert_new(&mut self, mut record: ExperienceRecord) -> Result<u64, MemoryError> {
        record.id = self.next_id;
        let id = record.id;
        self.insert(record)?;
        Ok(id)
    }

    /// Write gate: reflections always go in, other records with probability `p`.
    /// The gate draw happens only for non-reflection records.
    pub fn maybe_store<R: Rng>(&mut self, record: ExperienceRecord, rng: &mut R, p: f64) -> Result<bool, MemoryError> {
        if !record.is_reflection && rng.gen::<f64>() >= p {
            return Ok(false);
        }
        self.insert_new(record)?;
        Ok(true)
    }

    /// `4k` HNSW candidates re-ranked by MMR down to `k`.
    pub fn retrieve(&self, query: &EmbeddingVector, k: usize, lambda: f64) -> Vec<&ExperienceRecord> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let hits = self.index.search(query, 4 * k);
        let candidates: Vec<(u64, &EmbeddingVector)> =
            hits.iter().map(|(id, _)| (*id, &self.get(*id).expect("indexed").embedding)).collect();
        mmr_rerank(&candidates, query, k, lambda).into_iter().map(|id| self.get(id).expect("indexed")).collect()
    }

    pub fn retrieve_obs(&self, obs: &EgoObservation, k: usize, lambda: f64) -> Vec<&ExperienceRecord> {
        self.retrieve(&embed_state(obs), k, lambda)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), MemoryError> {
        let header = StoreHeader { version: STORE_VERSION, dimension: self.dim() };
        writeln!(w, "{}", serde_json::to_string(&header).expect("serializable"))?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r).expect("serializable"))?;
        }
        Ok(())
    }

    /// Reads a store file and rebuilds the index. A zero-byte input yields an
    /// empty store with the default dimension.
    pub fn read_from<R: BufRead>(r: R, params: HnswParams) -> Result<Self, MemoryError> {
        let mut lines = r.lines().enumerate();
        let Some((_, first)) = lines.next() else {
            return Ok(MemoryStore::new(OBS_DIM, params));
        };
        let header: StoreHeader =
            serde_json::from_str(&first?).map_err(|e| MemoryError::Corrupt { line: 1, message: format!("bad header: {e}") })?;
        if header.version != STORE_VERSION {
            return Err(MemoryError::Version { expected: STORE_VERSION, found: header.version });
        }
        let mut store = MemoryStore::new(header.dimension, params);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExperienceRecord = serde_json::from_str(&line)
                .map_err(|e| MemoryError::Corrupt { line: i + 1, message: format!("{e} (store version {})", header.version) })?;
            store.insert(rec).map_err(|e| MemoryError::Corrupt { line: i + 1, message: e.to_string() })?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, params: HnswParams) -> Result<Self, MemoryError> {
        MemoryStore::read_from(std::io::BufReader::new(std::fs::File::open(path)?), params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_of(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        vec_of(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    fn record(id: u64, e: EmbeddingVector) -> ExperienceRecord {
        ExperienceRecord {
            id,
            embedding: e,
            situation_text: format!("scene {id}"),
            action: Action::Idle,
            outcome_text: "no collision".into(),
            reward: 0.3,
            is_reflection: false,
        }
    }

    fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn embedding_examples() {
        let mut obs = EgoObservation::zeros();
        obs.0[2] = 0.8;
        obs.0[4] = 0.3;
        obs.0[5] = 0.04;
        obs.0[6] = 0.1;
        let a = embed_state(&obs);
        assert_eq!(a, embed_state(&obs));
        assert_eq!(a.dim(), OBS_DIM);
        assert!((a.cosine(&a) - 1.0).abs() < 1e-12);
        assert!((a.norm() - (0.64f64 + 0.09 + 0.0016 + 0.01).sqrt()).abs() < 1e-12);
        let mut other = obs.clone();
        other.0[6] = -0.2;
        let b = embed_state(&other);
        let c = a.cosine(&b);
        assert!(c < 1.0);
        assert!((c - oracle_cosine(obs.values(), other.values())).abs() < 1e-12);
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_none());
    }

    #[test]
    fn write_gate_extremes_and_reflections() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = MemoryStore::default();
        let e = random_vec(&mut rng, OBS_DIM);
        for _ in 0..100 {
            assert!(!store.maybe_store(record(0, e.clone()), &mut rng, 0.0).unwrap());
        }
        assert!(store.is_empty());
        for _ in 0..100 {
            assert!(store.maybe_store(record(0, e.clone()), &mut rng, 1.0).unwrap());
        }
        assert_eq!(store.len(), 100);
        let mut refl = record(0, e);
        refl.is_reflection = true;
        assert!(store.maybe_store(refl, &mut rng, 0.0).unwrap());
        assert_eq!(store.len(), 101);
        assert!(store.get(100).unwrap().is_reflection);
    }

    #[test]
    fn write_gate_rate_is_binomial() {
        // Count gate decisions directly; inserting 10k vectors is not the point here.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = MemoryStore::new(2, HnswParams { ef_construction: 8, ..Default::default() });
        let e = vec_of(&[1.0, 0.0]);
        let mut stored = 0;
        for _ in 0..10_000 {
            if store.maybe_store(record(0, e.clone()), &mut rng, WRITE_PROBABILITY).unwrap() {
                stored += 1;
            }
        }
        let sigma = (10_000.0f64 * 0.2 * 0.8).sqrt();
        assert!((stored as f64 - 2000.0).abs() <= 3.0 * sigma, "{stored}");
        assert_eq!(store.len(), stored);
    }

    #[test]
    fn first_insert_becomes_entry_and_duplicates_rejected() {
        let mut idx = HnswIndex::new(3, HnswParams::default());
        assert!(idx.search(&vec_of(&[1.0, 0.0, 0.0]), 3).is_empty());
        idx.check_invariants().unwrap();
        idx.insert(7, vec_of(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(idx.entry_id(), Some(7));
        assert!(matches!(idx.insert(7, vec_of(&[0.0, 1.0, 0.0])), Err(MemoryError::DuplicateId(7))));
        assert!(matches!(idx.insert(8, vec_of(&[0.0, 1.0])), Err(MemoryError::Dimension { .. })));
        idx.check_invariants().unwrap();
    }

    #[test]
    fn three_vector_examples() {
        let mut idx = HnswIndex::new(2, HnswParams::default());
        idx.insert(1, vec_of(&[1.0, 0.0])).unwrap();
        idx.insert(2, vec_of(&[0.0, 1.0])).unwrap();
        idx.insert(3, vec_of(&[1.0, 1.0])).unwrap();
        let hits = idx.search(&vec_of(&[0.0, 2.0]), 1);
        assert_eq!(hits[0].0, 2);
        assert!(hits[0].1.abs() < 1e-12);
        let all = idx.search(&vec_of(&[1.0, 0.0]), 10);
        assert_eq!(all.iter().map(|h| h.0).collect::<Vec<_>>(), vec![1, 3, 2]);
    }

    #[test]
    fn structure_and_self_query_over_1000_inserts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut idx = HnswIndex::new(OBS_DIM, HnswParams::default());
        for id in 0..1000u64 {
            let v = random_vec(&mut rng, OBS_DIM);
            idx.insert(id, v.clone()).unwrap();
            let hit = idx.search(&v, 1);
            assert_eq!(hit[0].0, id, "self query after insert {id}");
            if id % 97 == 0 {
                idx.check_invariants().unwrap();
            }
        }
        idx.check_invariants().unwrap();
    }

    #[test]
    fn small_stores_match_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..40u64 {
            let size = 1 + (trial as usize * 7) % 50;
            let mut idx = HnswIndex::new(OBS_DIM, HnswParams { seed: trial, ..Default::default() });
            for id in 0..size as u64 {
                idx.insert(id * 3 + 1, random_vec(&mut rng, OBS_DIM)).unwrap();
            }
            for _ in 0..10 {
                let q = random_vec(&mut rng, OBS_DIM);
                for n in [1, 5, 10, size] {
                    assert_eq!(idx.search(&q, n), idx.brute_force(&q, n));
                }
            }
        }
    }

    #[test]
    fn n_beyond_size_returns_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut idx = HnswIndex::new(4, HnswParams::default());
        for id in 0..6 {
            idx.insert(id, random_vec(&mut rng, 4)).unwrap();
        }
        assert_eq!(idx.search(&random_vec(&mut rng, 4), 100).len(), 6);
    }

    /// Exhaustive greedy MMR written directly from the definition.
    fn mmr_reference(points: &[(u64, Vec<f64>)], q: &[f64], k: usize, lambda: f64) -> Vec<u64> {
        let mut remaining: Vec<usize> = (0..points.len()).collect();
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < k && !remaining.is_empty() {
            let score = |i: usize| {
                let rel = oracle_cosine(&points[i].1, q);
                if chosen.is_empty() {
                    return rel;
                }
                let red = chosen.iter().map(|&j| oracle_cosine(&points[i].1, &points[j].1)).fold(f64::NEG_INFINITY, f64::max);
                lambda * rel - (1.0 - lambda) * red
            };
            let mut best = remaining[0];
            for &i in &remaining[1..] {
                let (si, sb) = (score(i), score(best));
                if si > sb + 1e-12 || ((si - sb).abs() <= 1e-12 && points[i].0 < points[best].0) {
                    best = i;
                }
            }
            chosen.push(best);
            remaining.retain(|&i| i != best);
        }
        chosen.into_iter().map(|i| points[i].0).collect()
    }

    fn hand_points() -> Vec<(u64, Vec<f64>)> {
        vec![
            (1, vec![1.0, 0.0]),
            (2, vec![0.99, 0.14]),
            (3, vec![0.98, -0.2]),
            (4, vec![0.0, 1.0]),
            (5, vec![0.7, 0.7]),
            (6, vec![-0.6, 0.8]),
        ]
    }

    #[test]
    fn mmr_hand_cases_match_reference() {
        let pts = hand_points();
        let embs: Vec<EmbeddingVector> = pts.iter().map(|(_, v)| vec_of(v)).collect();
        let cands: Vec<(u64, &EmbeddingVector)> = pts.iter().zip(&embs).map(|((id, _), e)| (*id, e)).collect();
        let queries = [vec![1.0, 0.1], vec![0.5, 0.5], vec![-1.0, 0.2], vec![0.0, -1.0]];
        for q in &queries {
            let qe = vec_of(q);
            for lambda in [0.0, 0.3, 0.5, 0.8, 1.0] {
                for k in 1..=6 {
                    assert_eq!(mmr_rerank(&cands, &qe, k, lambda), mmr_reference(&pts, q, k, lambda), "q {q:?} λ {lambda} k {k}");
                }
            }
        }
    }

    #[test]
    fn mmr_lambda_one_is_top_k_and_k_one_is_best() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let embs: Vec<EmbeddingVector> = (0..30).map(|_| random_vec(&mut rng, 8)).collect();
        let cands: Vec<(u64, &EmbeddingVector)> = embs.iter().enumerate().map(|(i, e)| (i as u64, e)).collect();
        let q = random_vec(&mut rng, 8);
        let mut by_rel: Vec<(f64, u64)> = cands.iter().map(|(id, e)| (q.cosine(e), *id)).collect();
        by_rel.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top: Vec<u64> = by_rel.iter().take(7).map(|x| x.1).collect();
        assert_eq!(mmr_rerank(&cands, &q, 7, 1.0), top);
        for lambda in [0.0, 0.5, 1.0] {
            assert_eq!(mmr_rerank(&cands, &q, 1, lambda), vec![top[0]]);
        }
        let picks = mmr_rerank(&cands, &q, 30, 0.5);
        let mut dedup = picks.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 30);
    }

    #[test]
    fn retrieve_examples() {
        let store = MemoryStore::default();
        let q = embed_state(&EgoObservation::zeros());
        assert!(store.retrieve(&q, 3, 0.5).is_empty());

        let mut store = MemoryStore::new(3, HnswParams::default());
        store.insert_new(record(0, vec_of(&[1.0, 0.0, 0.0]))).unwrap();
        let got = store.retrieve(&vec_of(&[0.0, 1.0, 0.0]), 3, 0.5);
        assert_eq!(got.len(), 1);
    }

    #[test]
    fn mmr_surfaces_distinct_record_over_duplicates() {
        // Five near-duplicates close to the query, one distinct but relevant record.
        let mut store = MemoryStore::new(3, HnswParams::default());
        let q = vec_of(&[1.0, 0.0, 0.0]);
        for i in 0..5 {
            let eps = i as f64 * 1e-3;
            store.insert_new(record(0, vec_of(&[1.0, 0.4 + eps, eps]))).unwrap();
        }
        let distinct = store.insert_new(record(0, vec_of(&[1.0, -0.45, 0.1]))).unwrap();
        for i in 0..6 {
            store.insert_new(record(0, vec_of(&[-1.0, i as f64, 1.0]))).unwrap();
        }
        let top3: Vec<u64> = store.index().brute_force(&q, 3).into_iter().map(|h| h.0).collect();
        assert!(!top3.contains(&distinct));
        let got: Vec<u64> = store.retrieve(&q, 3, 0.5).iter().map(|r| r.id).collect();
        assert!(got.contains(&distinct), "{got:?}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = MemoryStore::default();
        for i in 0..300 {
            let mut r = record(0, random_vec(&mut rng, OBS_DIM));
            r.is_reflection = i % 50 == 0;
            r.action = Action::ALL[i % 5];
            store.insert_new(r).unwrap();
        }
        store.save(&path).unwrap();
        let loaded = MemoryStore::load(&path, HnswParams { seed: 99, ..Default::default() }).unwrap();
        assert_eq!(loaded.records(), store.records());
        assert_eq!(loaded.next_id(), store.next_id());
        let mut hits = 0;
        let queries = 50;
        for _ in 0..queries {
            let q = random_vec(&mut rng, OBS_DIM);
            let exact: Vec<u64> = store.index().brute_force(&q, 10).into_iter().map(|h| h.0).collect();
            let approx: Vec<u64> = loaded.index().search(&q, 10).into_iter().map(|h| h.0).collect();
            hits += approx.iter().filter(|id| exact.contains(id)).count();
        }
        assert!(hits as f64 / (10 * queries) as f64 >= 0.9);
    }

    #[test]
    fn empty_and_corrupt_files() {
        let empty = MemoryStore::read_from(&b""[..], HnswParams::default()).unwrap();
        assert!(empty.is_empty());
        let header_only = MemoryStore::read_from(&b"{\"version\":1,\"dimension\":44}\n"[..], HnswParams::default()).unwrap();
        assert!(header_only.is_empty());
        assert_eq!(header_only.dim(), 44);
        let err = MemoryStore::read_from(&b"{\"version\":9,\"dimension\":44}\n"[..], HnswParams::default()).unwrap_err();
        assert!(matches!(err, MemoryError::Version { found: 9, .. }));
        let err =
            MemoryStore::read_from(&b"{\"version\":1,\"dimension\":2}\n{\"id\":1}\n"[..], HnswParams::default()).unwrap_err();
        assert!(matches!(err, MemoryError::Corrupt { line: 2, .. }), "{err}");
        let err = MemoryStore::read_from(&b"garbage\n"[..], HnswParams::default()).unwrap_err();
        assert!(matches!(err, MemoryError::Corrupt { line: 1, .. }));
    }
}
