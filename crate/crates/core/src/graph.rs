//! Weighted directed preference graph over feature nodes.
//!
//! An edge `neg -> pos` with weight `w` records that, `w` times, the user
//! preferred an item described by `pos` over one described by `neg`. Feature
//! importance is the weighted PageRank of the graph, and the five profile
//! bands are contiguous slices of the rank order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::clock::Timestamp;
use crate::llm::EmbeddingVector;
use crate::scalar::Scalar;

pub use crate::llm::normalize_text as normalize_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureId(pub u64);

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("feature label is empty")]
    EmptyLabel,
    #[error("edge endpoints are the same feature {0}")]
    SelfEdge(FeatureId),
    #[error("unknown feature {0}")]
    UnknownFeature(FeatureId),
    #[error("survivor {0} is also listed for absorption")]
    SurvivorAbsorbed(FeatureId),
    #[error("label {label:?} already belongs to feature {owner}")]
    LabelConflict { label: String, owner: FeatureId },
    #[error("feature id {0} is already in use")]
    DuplicateId(FeatureId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FeatureNode<T> {
    pub id: FeatureId,
    pub label: String,
    pub embedding: EmbeddingVector<T>,
    pub created_at: Timestamp,
    #[serde(default)]
    pub absorbed_labels: Vec<String>,
}

/// A replayable graph mutation. Every change the profile pipeline makes is
/// expressed as a sequence of these so the event log can reproduce the graph
/// exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GraphOp<T> {
    Insert {
        id: FeatureId,
        label: String,
        embedding: EmbeddingVector<T>,
        created_at: Timestamp,
    },
    /// Records `label` as another name of an existing node.
    Alias {
        id: FeatureId,
        label: String,
    },
    Relabel {
        id: FeatureId,
        label: String,
    },
    Merge {
        survivor: FeatureId,
        absorbed: Vec<FeatureId>,
    },
    /// One unit of `neg -> pos` evidence. If both resolve to the same node
    /// the unit is counted as discarded self-loop weight.
    Prefer {
        neg: FeatureId,
        pos: FeatureId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceGraph<T> {
    nodes: BTreeMap<FeatureId, FeatureNode<T>>,
    edges: BTreeMap<(FeatureId, FeatureId), u64>,
    discarded_self_loop_weight: u64,
    next_id: u64,
    /// Normalized label (own or absorbed) -> node.
    labels: HashMap<String, FeatureId>,
}

impl<T> Default for PreferenceGraph<T> {
    fn default() -> Self {
        Self {
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
            discarded_self_loop_weight: 0,
            next_id: 1,
            labels: HashMap::new(),
        }
    }
}

impl<T: Scalar> PreferenceGraph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &FeatureNode<T>> {
        self.nodes.values()
    }

    pub fn node(&self, id: FeatureId) -> Option<&FeatureNode<T>> {
        self.nodes.get(&id)
    }

    /// `(neg, pos, weight)` triples in id order.
    pub fn edges(&self) -> impl Iterator<Item = (FeatureId, FeatureId, u64)> + '_ {
        self.edges.iter().map(|(&(from, to), &w)| (from, to, w))
    }

    pub fn weight(&self, neg: FeatureId, pos: FeatureId) -> u64 {
        self.edges.get(&(neg, pos)).copied().unwrap_or(0)
    }

    pub fn total_edge_weight(&self) -> u64 {
        self.edges.values().sum()
    }

    pub fn discarded_self_loop_weight(&self) -> u64 {
        self.discarded_self_loop_weight
    }

    pub fn next_id(&self) -> FeatureId {
        FeatureId(self.next_id)
    }

    /// Looks a label up among node labels and absorbed labels.
    pub fn find_label(&self, label: &str) -> Option<FeatureId> {
        self.labels.get(&normalize_label(label)).copied()
    }

    /// Returns the existing node for `label` or inserts a new one.
    pub fn upsert_feature(
        &mut self,
        label: &str,
        embedding: EmbeddingVector<T>,
        created_at: Timestamp,
    ) -> Result<FeatureId, GraphError> {
        if normalize_label(label).is_empty() {
            return Err(GraphError::EmptyLabel);
        }
        if let Some(id) = self.find_label(label) {
            return Ok(id);
        }
        let id = FeatureId(self.next_id);
        self.insert_with_id(id, label, embedding, created_at)?;
        Ok(id)
    }

    fn insert_with_id(
        &mut self,
        id: FeatureId,
        label: &str,
        embedding: EmbeddingVector<T>,
        created_at: Timestamp,
    ) -> Result<(), GraphError> {
        let key = normalize_label(label);
        if key.is_empty() {
            return Err(GraphError::EmptyLabel);
        }
        if let Some(&owner) = self.labels.get(&key) {
            return Err(GraphError::LabelConflict { label: label.to_string(), owner });
        }
        if self.nodes.contains_key(&id) {
            return Err(GraphError::DuplicateId(id));
        }
        self.labels.insert(key, id);
        self.nodes.insert(
            id,
            FeatureNode { id, label: label.trim().to_string(), embedding, created_at, absorbed_labels: Vec::new() },
        );
        self.next_id = self.next_id.max(id.0 + 1);
        Ok(())
    }

    fn require(&self, id: FeatureId) -> Result<(), GraphError> {
        if self.nodes.contains_key(&id) {
            Ok(())
        } else {
            Err(GraphError::UnknownFeature(id))
        }
    }

    /// Increments `neg -> pos` by one, creating the edge at weight 1.
    pub fn add_preference_edge(&mut self, neg: FeatureId, pos: FeatureId) -> Result<(), GraphError> {
        self.require(neg)?;
        self.require(pos)?;
        if neg == pos {
            return Err(GraphError::SelfEdge(neg));
        }
        *self.edges.entry((neg, pos)).or_insert(0) += 1;
        Ok(())
    }

    /// Folds `absorbed` into `survivor`: edges are re-pointed and summed,
    /// would-be self-loops are dropped into the discarded counter, labels are
    /// kept as aliases of the survivor.
    pub fn merge_features(&mut self, survivor: FeatureId, absorbed: &[FeatureId]) -> Result<(), GraphError> {
        self.require(survivor)?;
        let absorbed: BTreeSet<FeatureId> = absorbed.iter().copied().collect();
        for &id in &absorbed {
            if id == survivor {
                return Err(GraphError::SurvivorAbsorbed(survivor));
            }
            self.require(id)?;
        }
        if absorbed.is_empty() {
            return Ok(());
        }

        let remap = |id: FeatureId| if absorbed.contains(&id) { survivor } else { id };
        let mut edges = BTreeMap::new();
        for (&(from, to), &w) in &self.edges {
            let (from, to) = (remap(from), remap(to));
            if from == to {
                self.discarded_self_loop_weight += w;
            } else {
                *edges.entry((from, to)).or_insert(0) += w;
            }
        }
        self.edges = edges;

        let mut moved = Vec::new();
        for id in &absorbed {
            let node = self.nodes.remove(id).expect("checked above");
            moved.push(node.label);
            moved.extend(node.absorbed_labels);
        }
        for label in &moved {
            self.labels.insert(normalize_label(label), survivor);
        }
        self.nodes.get_mut(&survivor).expect("checked above").absorbed_labels.extend(moved);
        Ok(())
    }

    /// Records `label` as an alias of `id`.
    pub fn alias_label(&mut self, id: FeatureId, label: &str) -> Result<(), GraphError> {
        self.require(id)?;
        let key = normalize_label(label);
        if key.is_empty() {
            return Err(GraphError::EmptyLabel);
        }
        match self.labels.get(&key) {
            Some(&owner) if owner == id => Ok(()),
            Some(&owner) => Err(GraphError::LabelConflict { label: label.to_string(), owner }),
            None => {
                self.labels.insert(key, id);
                self.nodes.get_mut(&id).expect("checked").absorbed_labels.push(label.trim().to_string());
                Ok(())
            }
        }
    }

    /// Renames a node; the old label stays resolvable as an alias.
    pub fn relabel(&mut self, id: FeatureId, label: &str) -> Result<(), GraphError> {
        self.require(id)?;
        let key = normalize_label(label);
        if key.is_empty() {
            return Err(GraphError::EmptyLabel);
        }
        if let Some(&owner) = self.labels.get(&key) {
            if owner != id {
                return Err(GraphError::LabelConflict { label: label.to_string(), owner });
            }
        }
        let node = self.nodes.get_mut(&id).expect("checked");
        if normalize_label(&node.label) == key {
            return Ok(());
        }
        let old = std::mem::replace(&mut node.label, label.trim().to_string());
        node.absorbed_labels.retain(|l| normalize_label(l) != key);
        node.absorbed_labels.push(old);
        self.labels.insert(key, id);
        Ok(())
    }

    /// Records one unit of preference evidence, routing same-node pairs into
    /// the discarded counter.
    pub fn record_preference(&mut self, neg: FeatureId, pos: FeatureId) -> Result<(), GraphError> {
        if neg == pos {
            self.require(neg)?;
            self.discarded_self_loop_weight += 1;
            Ok(())
        } else {
            self.add_preference_edge(neg, pos)
        }
    }

    pub fn apply(&mut self, op: &GraphOp<T>) -> Result<(), GraphError> {
        match op {
            GraphOp::Insert { id, label, embedding, created_at } => {
                self.insert_with_id(*id, label, embedding.clone(), *created_at)
            }
            GraphOp::Alias { id, label } => self.alias_label(*id, label),
            GraphOp::Relabel { id, label } => self.relabel(*id, label),
            GraphOp::Merge { survivor, absorbed } => self.merge_features(*survivor, absorbed),
            GraphOp::Prefer { neg, pos } => self.record_preference(*neg, *pos),
        }
    }

    /// Weighted PageRank with uniform teleport; dangling mass is spread
    /// uniformly.
    pub fn rank(&self, params: RankParams<T>) -> Result<RankedFeatures<T>, NotConverged<T>> {
        let n = self.nodes.len();
        if n == 0 {
            return Ok(RankedFeatures::default());
        }
        let index: HashMap<FeatureId, usize> = self.nodes.keys().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut out_weight = vec![T::zero(); n];
        let links: Vec<(usize, usize, T)> = self
            .edges
            .iter()
            .map(|(&(from, to), &w)| {
                let w = T::of(w as f64);
                out_weight[index[&from]] = out_weight[index[&from]] + w;
                (index[&from], index[&to], w)
            })
            .collect();

        let nf = T::of_usize(n);
        let d = params.damping;
        let teleport = (T::one() - d) / nf;
        let mut scores = vec![T::one() / nf; n];
        let mut next = vec![T::zero(); n];
        let mut delta = T::infinity();
        let mut iterations = 0;
        while iterations < params.max_iter {
            iterations += 1;
            let dangling: T = scores.iter().zip(&out_weight).filter(|(_, &o)| o == T::zero()).map(|(&s, _)| s).sum();
            let base = teleport + d * dangling / nf;
            next.iter_mut().for_each(|x| *x = base);
            for &(from, to, w) in &links {
                next[to] = next[to] + d * scores[from] * w / out_weight[from];
            }
            delta = scores.iter().zip(&next).map(|(a, b)| (*a - *b).abs()).sum();
            std::mem::swap(&mut scores, &mut next);
            if delta < params.tol {
                break;
            }
        }
        let total: T = scores.iter().copied().sum();
        let ranked = self.order(scores.into_iter().map(|s| s / total).collect());
        if delta < params.tol {
            Ok(ranked)
        } else {
            Err(NotConverged { partial: ranked, iterations, delta })
        }
    }

    fn order(&self, scores: Vec<T>) -> RankedFeatures<T> {
        let mut entries: Vec<RankedEntry<T>> = self
            .nodes
            .values()
            .zip(scores)
            .map(|(node, score)| RankedEntry { id: node.id, label: node.label.clone(), score })
            .collect();
        entries.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.nodes[&a.id].created_at.cmp(&self.nodes[&b.id].created_at))
                .then_with(|| a.id.cmp(&b.id))
        });
        RankedFeatures { entries }
    }

    /// Shortlist of nodes whose embedding is at least `threshold` cosine-similar
    /// to `query`, most similar first, at most `cap`.
    pub fn similar(&self, query: &EmbeddingVector<T>, threshold: T, cap: usize) -> Vec<(FeatureId, T)> {
        let mut hits: Vec<(FeatureId, T)> =
            self.nodes.values().map(|n| (n.id, n.embedding.cosine(query))).filter(|(_, c)| *c >= threshold).collect();
        hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
        hits.truncate(cap);
        hits
    }

    pub fn to_snapshot(&self) -> GraphSnapshot<T> {
        GraphSnapshot {
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges().collect(),
            discarded_self_loop_weight: self.discarded_self_loop_weight,
            next_id: self.next_id,
        }
    }

    pub fn from_snapshot(snapshot: GraphSnapshot<T>) -> Result<Self, GraphError> {
        let mut graph = Self::new();
        for node in snapshot.nodes {
            let aliases = node.absorbed_labels.clone();
            graph.insert_with_id(node.id, &node.label, node.embedding, node.created_at)?;
            for alias in aliases {
                graph.alias_label(node.id, &alias)?;
            }
        }
        for (from, to, w) in snapshot.edges {
            graph.require(from)?;
            graph.require(to)?;
            if from == to {
                return Err(GraphError::SelfEdge(from));
            }
            if w > 0 {
                graph.edges.insert((from, to), w);
            }
        }
        graph.discarded_self_loop_weight = snapshot.discarded_self_loop_weight;
        graph.next_id = graph.next_id.max(snapshot.next_id);
        Ok(graph)
    }
}

/// Serialized shape of a graph: nodes, `[from, to, weight]` triples and the
/// discarded self-loop counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GraphSnapshot<T> {
    pub nodes: Vec<FeatureNode<T>>,
    pub edges: Vec<(FeatureId, FeatureId, u64)>,
    pub discarded_self_loop_weight: u64,
    pub next_id: u64,
}

impl<T: Scalar> Serialize for PreferenceGraph<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_snapshot().serialize(serializer)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for PreferenceGraph<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let snapshot = GraphSnapshot::<T>::deserialize(deserializer)?;
        Self::from_snapshot(snapshot).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankParams<T> {
    pub damping: T,
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for RankParams<T> {
    fn default() -> Self {
        Self { damping: T::of(0.85), tol: T::of(1e-10), max_iter: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry<T> {
    pub id: FeatureId,
    pub label: String,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeatures<T> {
    pub entries: Vec<RankedEntry<T>>,
}

impl<T> Default for RankedFeatures<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> RankedFeatures<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score_sum(&self) -> T {
        self.entries.iter().map(|e| e.score).sum()
    }

    pub fn score_of(&self, id: FeatureId) -> Option<T> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.score)
    }
}

/// Power iteration hit `max_iter` first. The partial ranking is still usable.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("PageRank did not converge after {iterations} iterations (L1 delta {delta})")]
pub struct NotConverged<T: fmt::Debug + fmt::Display> {
    pub partial: RankedFeatures<T>,
    pub iterations: usize,
    pub delta: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Band {
    VeryLiked,
    FairlyLiked,
    Neutral,
    FairlyDisliked,
    VeryDisliked,
}

impl Band {
    pub const ALL: [Band; 5] =
        [Band::VeryLiked, Band::FairlyLiked, Band::Neutral, Band::FairlyDisliked, Band::VeryDisliked];

    pub fn title(self) -> &'static str {
        match self {
            Band::VeryLiked => "Very liked",
            Band::FairlyLiked => "Fairly liked",
            Band::Neutral => "Neutral",
            Band::FairlyDisliked => "Fairly disliked",
            Band::VeryDisliked => "Very disliked",
        }
    }

    /// Placeholder name in the perceive template.
    pub fn placeholder(self) -> &'static str {
        match self {
            Band::VeryLiked => "very_liked",
            Band::FairlyLiked => "fairly_liked",
            Band::Neutral => "neutral",
            Band::FairlyDisliked => "fairly_disliked",
            Band::VeryDisliked => "very_disliked",
        }
    }
}

/// Five ordered bands of feature labels, most liked first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PreferenceProfile {
    pub very_liked: Vec<String>,
    pub fairly_liked: Vec<String>,
    pub neutral: Vec<String>,
    pub fairly_disliked: Vec<String>,
    pub very_disliked: Vec<String>,
}

impl PreferenceProfile {
    pub fn band(&self, band: Band) -> &[String] {
        match band {
            Band::VeryLiked => &self.very_liked,
            Band::FairlyLiked => &self.fairly_liked,
            Band::Neutral => &self.neutral,
            Band::FairlyDisliked => &self.fairly_disliked,
            Band::VeryDisliked => &self.very_disliked,
        }
    }

    fn band_mut(&mut self, band: Band) -> &mut Vec<String> {
        match band {
            Band::VeryLiked => &mut self.very_liked,
            Band::FairlyLiked => &mut self.fairly_liked,
            Band::Neutral => &mut self.neutral,
            Band::FairlyDisliked => &mut self.fairly_disliked,
            Band::VeryDisliked => &mut self.very_disliked,
        }
    }

    pub fn bands(&self) -> impl Iterator<Item = (Band, &[String])> {
        Band::ALL.into_iter().map(move |b| (b, self.band(b)))
    }

    /// All labels in rank order.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.bands().flat_map(|(_, labels)| labels.iter().map(String::as_str))
    }

    pub fn is_empty(&self) -> bool {
        self.labels().next().is_none()
    }

    pub fn len(&self) -> usize {
        self.labels().count()
    }

    /// `Very liked: a, b` lines, one per band.
    pub fn render_lines(&self) -> String {
        self.bands()
            .map(|(band, labels)| format!("{}: {}", band.title(), labels.join(", ")))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Band sizes for `n` ranked features: each band takes
/// `ceil(remaining / remaining_bands)`.
pub fn band_sizes(n: usize) -> [usize; 5] {
    let mut sizes = [0; 5];
    let mut remaining = n;
    for (i, size) in sizes.iter_mut().enumerate() {
        let bands_left = 5 - i;
        *size = remaining.div_ceil(bands_left);
        remaining -= *size;
    }
    sizes
}

pub fn band<T>(ranked: &RankedFeatures<T>) -> PreferenceProfile {
    let mut profile = PreferenceProfile::default();
    let mut entries = ranked.entries.iter();
    for (band, size) in Band::ALL.into_iter().zip(band_sizes(ranked.entries.len())) {
        profile.band_mut(band).extend(entries.by_ref().take(size).map(|e| e.label.clone()));
    }
    profile
}
