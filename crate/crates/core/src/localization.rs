//! Coarse-to-fine self-localization and language-based goal localization
//! over a [`TopoMap`].
//!
//! The pipeline is: semantic landmark matching → candidate nodes (union of
//! occurrences) → visual consistency filtering through a [`CovisOracle`] →
//! reference sampling around the survivors → fine pose estimate from the
//! references. Scene understanding is supplied by adapters: observations are
//! input data and co-visibility comes from a pluggable oracle.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_diff_abs, Pose2};
use crate::topomap::{MapNode, TopoMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizationError {
    #[error("fine localization needs at least one reference node")]
    EmptyReferences,
    #[error("reference node `{0}` is not in the map")]
    UnknownNode(String),
    #[error("no oracle score could be computed for any reference")]
    NoScores,
    #[error("no landmark matching {terms:?} within {r_max} m")]
    GoalNotFound { terms: Vec<String>, r_max: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
}

/// A landmark detected in the query image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkObservation {
    pub category: String,
    #[serde(default)]
    pub visual_attributes: BTreeMap<String, String>,
}

impl LandmarkObservation {
    pub fn new(category: impl Into<String>) -> Self {
        Self {
            category: category.into(),
            visual_attributes: BTreeMap::new(),
        }
    }

    pub fn with_attribute(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.visual_attributes.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkMatch {
    pub observation: usize,
    pub landmark_id: String,
    pub score: f64,
}

/// What the oracle knows about the query beyond its landmark list.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryContext {
    #[serde(default)]
    pub image_ref: Option<String>,
    /// Pose of the query camera when known (ground truth in simulation, or
    /// a prior estimate).
    #[serde(default)]
    pub pose: Option<Pose2>,
    /// Registry ids of landmarks visible in the query, when known.
    #[serde(default)]
    pub visible_landmark_ids: BTreeSet<String>,
}

/// Query file: `{ "query_ctx": {...}, "observations": [...] }`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalizationQuery {
    #[serde(default)]
    pub query_ctx: QueryContext,
    pub observations: Vec<LandmarkObservation>,
}

/// Request body for a remote landmark extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorRequest {
    pub image_ref: String,
}

/// Response body from a remote landmark extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorResponse {
    pub observations: Vec<LandmarkObservation>,
}

/// Source of landmark observations for an image.
pub trait LandmarkExtractor {
    fn extract(&self, request: &ExtractorRequest) -> Result<ExtractorResponse, LocalizationError>;
}

/// Co-visibility score between the query and a map node, in `[0, 1]`.
/// Implementations must be deterministic.
pub trait CovisOracle {
    fn score(&self, ctx: &QueryContext, node: &MapNode) -> Result<f64, LocalizationError>;
}

/// Scores 1 for nodes within `radius` of the query's true pose, else 0.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruthOracle {
    pub radius: f64,
}

impl Default for GroundTruthOracle {
    fn default() -> Self {
        Self { radius: 0.5 }
    }
}

impl CovisOracle for GroundTruthOracle {
    fn score(&self, ctx: &QueryContext, node: &MapNode) -> Result<f64, LocalizationError> {
        let pose = ctx
            .pose
            .ok_or_else(|| LocalizationError::Oracle("ground-truth oracle needs query_ctx.pose".into()))?;
        Ok(if node.planar_pose().distance(&pose) <= self.radius {
            1.0
        } else {
            0.0
        })
    }
}

/// 1 when the node shares a landmark id with the query, otherwise a linear
/// falloff with planar distance to the query pose (0 when the pose is
/// unknown).
#[derive(Debug, Clone, Copy)]
pub struct HeuristicOracle {
    pub falloff: f64,
}

impl Default for HeuristicOracle {
    fn default() -> Self {
        Self { falloff: 5.0 }
    }
}

impl CovisOracle for HeuristicOracle {
    fn score(&self, ctx: &QueryContext, node: &MapNode) -> Result<f64, LocalizationError> {
        if node.landmark_ids.iter().any(|l| ctx.visible_landmark_ids.contains(l)) {
            return Ok(1.0);
        }
        Ok(match ctx.pose {
            Some(p) => (1.0 - node.planar_pose().distance(&p) / self.falloff).max(0.0),
            None => 0.0,
        })
    }
}

/// Fixed per-node scores; nodes without an entry are oracle failures.
#[derive(Debug, Clone, Default)]
pub struct TableOracle {
    pub scores: BTreeMap<String, f64>,
}

impl CovisOracle for TableOracle {
    fn score(&self, _ctx: &QueryContext, node: &MapNode) -> Result<f64, LocalizationError> {
        self.scores
            .get(&node.id)
            .copied()
            .ok_or_else(|| LocalizationError::Oracle(format!("no score for `{}`", node.id)))
    }
}

/// Maps category strings to a canonical form. Lookups are case-insensitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SynonymTable {
    pub canonical: BTreeMap<String, String>,
}

impl Default for SynonymTable {
    fn default() -> Self {
        let pairs = [
            ("couch", "sofa"),
            ("settee", "sofa"),
            ("doorway", "door"),
            ("entrance", "door"),
            ("bookcase", "shelf"),
            ("bookshelf", "shelf"),
            ("shelving", "shelf"),
            ("rack", "shelf"),
            ("refrigerator", "fridge"),
            ("television", "tv"),
            ("monitor", "screen"),
            ("display", "screen"),
            ("armchair", "chair"),
            ("stool", "chair"),
            ("houseplant", "plant"),
            ("potted plant", "plant"),
            ("bin", "trash can"),
            ("wastebasket", "trash can"),
            ("cupboard", "cabinet"),
            ("wardrobe", "cabinet"),
            ("countertop", "counter"),
            ("writing desk", "desk"),
            ("signboard", "sign"),
            ("lift", "elevator"),
        ];
        Self {
            canonical: pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }
}

impl SynonymTable {
    pub fn empty() -> Self {
        Self {
            canonical: BTreeMap::new(),
        }
    }

    pub fn canonicalize(&self, category: &str) -> String {
        let key = category.trim().to_lowercase();
        match self.canonical.get(&key) {
            Some(c) => c.trim().to_lowercase(),
            None => self
                .canonical
                .iter()
                .find(|(k, _)| k.to_lowercase() == key)
                .map(|(_, v)| v.trim().to_lowercase())
                .unwrap_or(key),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineMode {
    /// Score-softmax weighted mean of the reference poses.
    Weighted,
    /// The best-scoring reference pose.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationConfig {
    pub match_threshold: f64,
    pub w_cat: f64,
    pub w_attr: f64,
    pub filter_threshold: f64,
    pub k: usize,
    /// Metres per radian of heading difference in the reference metric.
    pub beta: f64,
    pub temperature: f64,
    pub fine_mode: FineMode,
    pub r0: f64,
    pub r_step: f64,
    pub r_max: f64,
    pub synonyms: SynonymTable,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            match_threshold: 0.6,
            w_cat: 0.6,
            w_attr: 0.4,
            filter_threshold: 0.5,
            k: 3,
            beta: 0.5,
            temperature: 1.0,
            fine_mode: FineMode::Weighted,
            r0: 10.0,
            r_step: 10.0,
            r_max: 100.0,
            synonyms: SynonymTable::default(),
        }
    }
}

/// Attribute agreement: exact (case-insensitive) match per attribute name
/// over the union of names, averaged. Two empty sets agree fully.
pub fn attribute_similarity(a: &BTreeMap<String, String>, b: &BTreeMap<String, String>) -> f64 {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    if keys.is_empty() {
        return 1.0;
    }
    let hits = keys
        .iter()
        .filter(|k| match (a.get(**k), b.get(**k)) {
            (Some(x), Some(y)) => x.trim().eq_ignore_ascii_case(y.trim()),
            _ => false,
        })
        .count();
    hits as f64 / keys.len() as f64
}

/// `w_cat * cat_sim + w_attr * attr_sim`, with weights normalized to sum 1.
pub fn match_score(
    obs: &LandmarkObservation,
    category: &str,
    attrs: &BTreeMap<String, String>,
    config: &LocalizationConfig,
) -> f64 {
    let cat = if config.synonyms.canonicalize(&obs.category) == config.synonyms.canonicalize(category) {
        1.0
    } else {
        0.0
    };
    let attr = attribute_similarity(&obs.visual_attributes, attrs);
    let total = config.w_cat + config.w_attr;
    if total <= 0.0 {
        return 0.0;
    }
    (config.w_cat * cat + config.w_attr * attr) / total
}

/// Every registry landmark scoring at least `match_threshold` against each
/// observation.
pub fn match_landmarks(
    query: &[LandmarkObservation],
    map: &TopoMap,
    config: &LocalizationConfig,
) -> Vec<LandmarkMatch> {
    let mut out = Vec::new();
    for (i, obs) in query.iter().enumerate() {
        for l in map.landmarks() {
            let score = match_score(obs, &l.category, &l.visual_attributes, config);
            if score >= config.match_threshold {
                out.push(LandmarkMatch {
                    observation: i,
                    landmark_id: l.id.clone(),
                    score,
                });
            }
        }
    }
    out
}

/// Union of the occurrence sets of all matched landmarks.
pub fn candidate_nodes(map: &TopoMap, matches: &[LandmarkMatch]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for m in matches {
        if let Ok(ids) = map.nodes_for_landmark(&m.landmark_id) {
            out.extend(ids.iter().cloned());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: BTreeSet<String>,
    pub scores: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// Keep candidates whose co-visibility score reaches `threshold`. A node the
/// oracle cannot score is dropped with a warning.
pub fn visual_filter(
    ctx: &QueryContext,
    candidates: &BTreeSet<String>,
    oracle: &dyn CovisOracle,
    threshold: f64,
    map: &TopoMap,
) -> Result<FilterOutcome, LocalizationError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(LocalizationError::InvalidParameter(format!(
            "filter threshold {threshold} outside [0, 1]"
        )));
    }
    let mut out = FilterOutcome::default();
    for id in candidates {
        let Some(node) = map.node(id) else {
            out.warnings.push(format!("candidate `{id}` not in map"));
            continue;
        };
        match oracle.score(ctx, node) {
            Ok(s) => {
                out.scores.insert(id.clone(), s);
                if s >= threshold {
                    out.kept.insert(id.clone());
                }
            }
            Err(e) => out.warnings.push(format!("node `{id}` excluded: {e}")),
        }
    }
    Ok(out)
}

/// Proximity metric used to pick reference nodes: planar distance plus
/// `beta` times the absolute heading difference.
pub fn reference_metric(a: &Pose2, b: &Pose2, beta: f64) -> f64 {
    a.distance(b) + beta * angle_diff_abs(a.theta, b.theta)
}

/// For each candidate, its `k` nearest map nodes under
/// [`reference_metric`]; ties go to the smaller id. Returns the union.
pub fn sample_reference_nodes(
    map: &TopoMap,
    candidates: &BTreeSet<String>,
    k: usize,
    beta: f64,
) -> Result<BTreeSet<String>, LocalizationError> {
    if k == 0 {
        return Err(LocalizationError::InvalidParameter("k must be at least 1".into()));
    }
    let all: Vec<(&str, Pose2)> = map.nodes().map(|n| (n.id.as_str(), n.planar_pose())).collect();
    let mut out = BTreeSet::new();
    for c in candidates {
        let Some(cn) = map.node(c) else {
            return Err(LocalizationError::UnknownNode(c.clone()));
        };
        let cp = cn.planar_pose();
        let mut ranked: Vec<(f64, &str)> = all
            .iter()
            .map(|(id, p)| (reference_metric(&cp, p, beta), *id))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        out.extend(ranked.iter().take(k).map(|(_, id)| id.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineEstimate {
    pub pose: Pose2,
    pub confidence: f64,
}

/// Pose from scored reference nodes.
///
/// `Weighted`: softmax(score / temperature) weights, weighted mean of
/// positions and circular mean of headings. `Nearest`: the best-scoring
/// reference (ties to the smaller id). Confidence is the maximum score.
/// References the oracle cannot score are skipped.
pub fn fine_localize(
    ctx: &QueryContext,
    references: &BTreeSet<String>,
    oracle: &dyn CovisOracle,
    map: &TopoMap,
    temperature: f64,
    mode: FineMode,
) -> Result<FineEstimate, LocalizationError> {
    if references.is_empty() {
        return Err(LocalizationError::EmptyReferences);
    }
    if !(temperature > 0.0) {
        return Err(LocalizationError::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut scored = Vec::with_capacity(references.len());
    for id in references {
        let node = map.node(id).ok_or_else(|| LocalizationError::UnknownNode(id.clone()))?;
        if let Ok(s) = oracle.score(ctx, node) {
            scored.push((id.as_str(), node.planar_pose(), s));
        }
    }
    if scored.is_empty() {
        return Err(LocalizationError::NoScores);
    }
    let confidence = scored.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
    let pose = match mode {
        FineMode::Nearest => {
            // BTreeSet order means the first maximum has the smallest id.
            scored
                .iter()
                .find(|s| s.2 == confidence)
                .map(|s| s.1)
                .expect("non-empty")
        }
        FineMode::Weighted => {
            let logits: Vec<f64> = scored.iter().map(|s| s.2 / temperature).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
            for (wi, (_, p, _)) in w.iter().zip(&scored) {
                let wi = wi / z;
                x += wi * p.x;
                y += wi * p.y;
                s += wi * p.theta.sin();
                c += wi * p.theta.cos();
            }
            Pose2::new(x, y, s.atan2(c))
        }
    };
    Ok(FineEstimate { pose, confidence })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub matches: Vec<LandmarkMatch>,
    pub candidate_node_ids: BTreeSet<String>,
    pub filtered_node_ids: BTreeSet<String>,
    pub reference_node_ids: BTreeSet<String>,
    pub estimated_pose: Option<Pose2>,
    pub confidence: f64,
    pub warnings: Vec<String>,
}

/// Full coarse-to-fine pipeline. Never fails: an empty stage yields a result
/// with no pose and confidence 0.
pub fn localize(
    observations: &[LandmarkObservation],
    ctx: &QueryContext,
    map: &TopoMap,
    oracle: &dyn CovisOracle,
    config: &LocalizationConfig,
) -> LocalizationResult {
    let mut res = LocalizationResult {
        matches: match_landmarks(observations, map, config),
        ..Default::default()
    };
    res.candidate_node_ids = candidate_nodes(map, &res.matches);
    if res.candidate_node_ids.is_empty() {
        return res;
    }
    let filtered = match visual_filter(ctx, &res.candidate_node_ids, oracle, config.filter_threshold, map) {
        Ok(f) => f,
        Err(e) => {
            res.warnings.push(e.to_string());
            return res;
        }
    };
    res.warnings.extend(filtered.warnings);
    res.filtered_node_ids = filtered.kept;
    if res.filtered_node_ids.is_empty() {
        return res;
    }
    match sample_reference_nodes(map, &res.filtered_node_ids, config.k, config.beta) {
        Ok(r) => res.reference_node_ids = r,
        Err(e) => {
            res.warnings.push(e.to_string());
            return res;
        }
    }
    match fine_localize(
        ctx,
        &res.reference_node_ids,
        oracle,
        map,
        config.temperature,
        config.fine_mode,
    ) {
        Ok(est) => {
            res.estimated_pose = Some(est.pose);
            res.confidence = est.confidence;
        }
        Err(e) => res.warnings.push(e.to_string()),
    }
    res
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalResult {
    pub node_id: String,
    pub landmark_id: String,
    pub goal_pose: Pose2,
    /// Radius of the ring in which the goal was found.
    pub radius: f64,
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whether all instruction terms appear as tokens of the landmark's category
/// or functional description.
pub fn landmark_matches_terms(category: &str, description: Option<&str>, terms: &[String]) -> bool {
    let mut toks = tokens(category);
    if let Some(d) = description {
        toks.extend(tokens(d));
    }
    terms.iter().flat_map(|t| tokens(t)).all(|t| toks.contains(&t))
}

/// Expanding-radius goal search around `current`. The nearest node carrying
/// a matching landmark inside the first non-empty ring wins (ties to the
/// smaller node id).
pub fn goal_localize(
    terms: &[String],
    map: &TopoMap,
    current: &[f64; 3],
    r0: f64,
    r_step: f64,
    r_max: f64,
) -> Result<GoalResult, LocalizationError> {
    if !(r0 > 0.0) {
        return Err(LocalizationError::InvalidParameter(format!(
            "r0 must be positive, got {r0}"
        )));
    }
    if !(r_step > 0.0) {
        return Err(LocalizationError::InvalidParameter(format!(
            "r_step must be positive, got {r_step}"
        )));
    }
    let not_found = || LocalizationError::GoalNotFound {
        terms: terms.to_vec(),
        r_max,
    };
    if terms.iter().all(|t| tokens(t).is_empty()) {
        return Err(not_found());
    }
    // node id -> smallest matching landmark id seen on it
    let mut matching: HashMap<&str, &str> = HashMap::new();
    for l in map.landmarks() {
        if landmark_matches_terms(&l.category, l.functional_description.as_deref(), terms) {
            for nid in &l.node_ids {
                let e = matching.entry(nid.as_str()).or_insert(l.id.as_str());
                if l.id.as_str() < *e {
                    *e = l.id.as_str();
                }
            }
        }
    }
    let mut r = r0.min(r_max);
    loop {
        let ring = map
            .spatial_query(current, r)
            .map_err(|e| LocalizationError::InvalidParameter(e.to_string()))?;
        let best = ring
            .iter()
            .filter(|id| matching.contains_key(id.as_str()))
            .filter_map(|id| map.node(id))
            .min_by(|a, b| {
                a.pose
                    .distance_to_point(current)
                    .total_cmp(&b.pose.distance_to_point(current))
                    .then_with(|| a.id.cmp(&b.id))
            });
        if let Some(n) = best {
            return Ok(GoalResult {
                node_id: n.id.clone(),
                landmark_id: matching[n.id.as_str()].to_string(),
                goal_pose: n.planar_pose(),
                radius: r,
            });
        }
        if r >= r_max {
            return Err(not_found());
        }
        r = (r + r_step).min(r_max);
    }
}
