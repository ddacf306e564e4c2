//! Hybrid topological-semantic map: keyframe nodes, undirected traversability
//! edges and a landmark registry cross-referenced with the nodes.
//!
//! The on-disk format is a single JSON document:
//!
//! ```json
//! {
//!   "nodes": [{"id": "n1", "pose": {"position": [x, y, z], "orientation": [w, x, y, z]},
//!              "image_ref": "...", "landmark_ids": ["l1"]}],
//!   "edges": [{"a": "n1", "b": "n2", "relative_pose": {...}, "length": 1.0}],
//!   "landmarks": [{"id": "l1", "category": "sofa", "visual_attributes": {"color": "gray"},
//!                  "functional_description": "for resting", "node_ids": ["n1"]}]
//! }
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Pose2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("duplicate landmark id `{0}`")]
    DuplicateLandmark(String),
    #[error("edge {0} -- {1} already exists")]
    DuplicateEdge(String, String),
    #[error("edge endpoint `{0}` does not exist")]
    MissingEndpoint(String),
    #[error("self-loop on node `{0}`")]
    SelfLoop(String),
    #[error("node `{0}` does not exist")]
    MissingNode(String),
    #[error("landmark `{0}` does not exist")]
    MissingLandmark(String),
    #[error("cannot merge landmarks `{a}` ({cat_a}) and `{b}` ({cat_b}): categories differ")]
    CategoryConflict {
        a: String,
        b: String,
        cat_a: String,
        cat_b: String,
    },
    #[error("search radius must be non-negative, got {0}")]
    NegativeRadius(f64),
    #[error("map parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// 6-DoF pose as stored in the map. Orientation is a unit quaternion
/// `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

impl Default for Pose3 {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            orientation: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

impl Pose3 {
    pub fn new(position: [f64; 3], orientation: [f64; 4]) -> Self {
        Self { position, orientation }
    }

    /// A pose on the ground plane with the given heading.
    pub fn from_planar(p: &Pose2, z: f64) -> Self {
        let h = 0.5 * p.theta;
        Self {
            position: [p.x, p.y, z],
            orientation: [h.cos(), 0.0, 0.0, h.sin()],
        }
    }

    /// Heading about +z extracted from the quaternion.
    pub fn yaw(&self) -> f64 {
        let [w, x, y, z] = self.orientation;
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }

    pub fn planar(&self) -> Pose2 {
        Pose2::new(self.position[0], self.position[1], self.yaw())
    }

    pub fn translation_norm(&self) -> f64 {
        let [x, y, z] = self.position;
        (x * x + y * y + z * z).sqrt()
    }

    pub fn distance_to_point(&self, p: &[f64; 3]) -> f64 {
        let d: f64 = (0..3).map(|i| (self.position[i] - p[i]).powi(2)).sum();
        d.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapNode {
    pub id: String,
    pub pose: Pose3,
    #[serde(default)]
    pub image_ref: String,
    #[serde(default)]
    pub landmark_ids: BTreeSet<String>,
}

impl MapNode {
    pub fn new(id: impl Into<String>, pose: Pose3) -> Self {
        Self {
            id: id.into(),
            pose,
            image_ref: String::new(),
            landmark_ids: BTreeSet::new(),
        }
    }

    pub fn planar_pose(&self) -> Pose2 {
        self.pose.planar()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEdge {
    pub a: String,
    pub b: String,
    pub relative_pose: Pose3,
    pub length: f64,
}

impl MapEdge {
    pub fn other(&self, id: &str) -> Option<&str> {
        if self.a == id {
            Some(&self.b)
        } else if self.b == id {
            Some(&self.a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: String,
    pub category: String,
    #[serde(default)]
    pub visual_attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional_description: Option<String>,
    #[serde(default)]
    pub node_ids: BTreeSet<String>,
}

impl Landmark {
    pub fn new(id: impl Into<String>, category: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            category: category.into(),
            visual_attributes: BTreeMap::new(),
            functional_description: None,
            node_ids: BTreeSet::new(),
        }
    }

    pub fn with_attribute(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.visual_attributes.insert(key.into(), value.into());
        self
    }

    pub fn with_description(mut self, text: impl Into<String>) -> Self {
        self.functional_description = Some(text.into());
        self
    }
}

fn edge_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// The map graph `G = (V, E, L)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopoMap {
    nodes: BTreeMap<String, MapNode>,
    edges: BTreeMap<(String, String), MapEdge>,
    landmarks: BTreeMap<String, Landmark>,
}

/// One broken invariant found by [`TopoMap::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    /// A node lists a landmark id absent from the registry.
    UnknownLandmark,
    /// A landmark lists a node id that does not exist.
    UnknownNode,
    /// Node lists landmark, landmark does not list node.
    MissingBackReference,
    /// Landmark lists node, node does not list landmark.
    DanglingBackReference,
    /// A registered landmark with no occurrences.
    EmptyLandmark,
    MissingEndpoint,
    SelfLoop,
    NegativeLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub node_count: usize,
    pub edge_count: usize,
    pub landmark_count: usize,
    pub violations: Vec<Violation>,
}

/// Result of a global path query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub nodes: Vec<String>,
    pub cost: f64,
    pub connected: bool,
}

/// Outcome of a co-visibility merge. Conflicting attribute values keep the
/// survivor's value and are reported here.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MergeReport {
    pub survivor: String,
    pub removed: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    nodes: Vec<MapNode>,
    edges: Vec<MapEdge>,
    landmarks: Vec<Landmark>,
}

impl TopoMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &MapNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &MapEdge> {
        self.edges.values()
    }

    pub fn landmarks(&self) -> impl Iterator<Item = &Landmark> {
        self.landmarks.values()
    }

    pub fn node(&self, id: &str) -> Option<&MapNode> {
        self.nodes.get(id)
    }

    pub fn landmark(&self, id: &str) -> Option<&Landmark> {
        self.landmarks.get(id)
    }

    pub fn edge(&self, a: &str, b: &str) -> Option<&MapEdge> {
        self.edges.get(&edge_key(a, b))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.len()
    }

    pub fn add_node(&mut self, node: MapNode) -> Result<(), MapError> {
        if self.nodes.contains_key(&node.id) {
            return Err(MapError::DuplicateNode(node.id));
        }
        for lid in &node.landmark_ids {
            if !self.landmarks.contains_key(lid) {
                return Err(MapError::MissingLandmark(lid.clone()));
            }
        }
        for lid in &node.landmark_ids {
            if let Some(l) = self.landmarks.get_mut(lid) {
                l.node_ids.insert(node.id.clone());
            }
        }
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    /// Insert an undirected edge. Its length is the Euclidean norm of the
    /// relative translation.
    pub fn add_edge(&mut self, a: &str, b: &str, relative_pose: Pose3) -> Result<(), MapError> {
        if a == b {
            return Err(MapError::SelfLoop(a.to_string()));
        }
        for id in [a, b] {
            if !self.nodes.contains_key(id) {
                return Err(MapError::MissingEndpoint(id.to_string()));
            }
        }
        let key = edge_key(a, b);
        if self.edges.contains_key(&key) {
            return Err(MapError::DuplicateEdge(key.0, key.1));
        }
        let length = relative_pose.translation_norm();
        self.edges.insert(
            key,
            MapEdge {
                a: a.to_string(),
                b: b.to_string(),
                relative_pose,
                length,
            },
        );
        Ok(())
    }

    /// Register a landmark occurrence on `node_id`. An id already in the
    /// registry gains the node as a further occurrence; missing attributes
    /// are filled in from the new description.
    pub fn register_landmark(&mut self, node_id: &str, landmark: Landmark) -> Result<(), MapError> {
        let node = self
            .nodes
            .get_mut(node_id)
            .ok_or_else(|| MapError::MissingNode(node_id.to_string()))?;
        node.landmark_ids.insert(landmark.id.clone());
        match self.landmarks.get_mut(&landmark.id) {
            Some(existing) => {
                existing.node_ids.insert(node_id.to_string());
                for (k, v) in landmark.visual_attributes {
                    existing.visual_attributes.entry(k).or_insert(v);
                }
                if existing.functional_description.is_none() {
                    existing.functional_description = landmark.functional_description;
                }
            }
            None => {
                let mut l = landmark;
                l.node_ids.insert(node_id.to_string());
                self.landmarks.insert(l.id.clone(), l);
            }
        }
        Ok(())
    }

    /// Merge two registry entries describing the same physical landmark.
    /// The lexicographically smaller id survives with the union of
    /// occurrences and attributes.
    pub fn merge_covisible(&mut self, lid_a: &str, lid_b: &str) -> Result<MergeReport, MapError> {
        for id in [lid_a, lid_b] {
            if !self.landmarks.contains_key(id) {
                return Err(MapError::MissingLandmark(id.to_string()));
            }
        }
        if lid_a == lid_b {
            return Ok(MergeReport {
                survivor: lid_a.to_string(),
                ..Default::default()
            });
        }
        let (keep, drop) = if lid_a < lid_b { (lid_a, lid_b) } else { (lid_b, lid_a) };
        let (cat_keep, cat_drop) = (
            self.landmarks[keep].category.clone(),
            self.landmarks[drop].category.clone(),
        );
        if !cat_keep.trim().eq_ignore_ascii_case(cat_drop.trim()) {
            return Err(MapError::CategoryConflict {
                a: keep.to_string(),
                b: drop.to_string(),
                cat_a: cat_keep,
                cat_b: cat_drop,
            });
        }
        let removed = self.landmarks.remove(drop).expect("checked above");
        let mut warnings = Vec::new();
        let survivor = self.landmarks.get_mut(keep).expect("checked above");
        for (k, v) in removed.visual_attributes {
            match survivor.visual_attributes.get(&k) {
                Some(cur) if cur != &v => warnings.push(format!(
                    "attribute `{k}`: keeping `{cur}` from {keep}, dropping `{v}` from {drop}"
                )),
                Some(_) => {}
                None => {
                    survivor.visual_attributes.insert(k, v);
                }
            }
        }
        match (&survivor.functional_description, removed.functional_description) {
            (None, other) => survivor.functional_description = other,
            (Some(cur), Some(other)) if *cur != other => warnings.push(format!(
                "functional_description: keeping text from {keep}, dropping text from {drop}"
            )),
            _ => {}
        }
        for nid in &removed.node_ids {
            survivor.node_ids.insert(nid.clone());
        }
        for nid in &removed.node_ids {
            if let Some(n) = self.nodes.get_mut(nid) {
                n.landmark_ids.remove(drop);
                n.landmark_ids.insert(keep.to_string());
            }
        }
        Ok(MergeReport {
            survivor: keep.to_string(),
            removed: Some(drop.to_string()),
            warnings,
        })
    }

    pub fn nodes_for_landmark(&self, lid: &str) -> Result<&BTreeSet<String>, MapError> {
        self.landmarks
            .get(lid)
            .map(|l| &l.node_ids)
            .ok_or_else(|| MapError::MissingLandmark(lid.to_string()))
    }

    /// All nodes within `r` (inclusive) of `center`.
    pub fn spatial_query(&self, center: &[f64; 3], r: f64) -> Result<BTreeSet<String>, MapError> {
        if r.is_nan() || r < 0.0 {
            return Err(MapError::NegativeRadius(r));
        }
        Ok(self
            .nodes
            .values()
            .filter(|n| n.pose.distance_to_point(center) <= r)
            .map(|n| n.id.clone())
            .collect())
    }

    pub fn neighbors(&self, id: &str) -> Vec<(&str, f64)> {
        let mut out: Vec<(&str, f64)> = self
            .edges
            .values()
            .filter_map(|e| e.other(id).map(|o| (o, e.length)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    fn adjacency(&self) -> BTreeMap<&str, Vec<(&str, f64)>> {
        let mut adj: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
        for e in self.edges.values() {
            adj.entry(e.a.as_str()).or_default().push((e.b.as_str(), e.length));
            adj.entry(e.b.as_str()).or_default().push((e.a.as_str(), e.length));
        }
        adj
    }

    /// Minimum-length path over the edge graph. Among equal-cost paths the
    /// lexicographically smallest id sequence wins. A disconnected pair gives
    /// an empty node list with `connected == false`.
    pub fn shortest_path(&self, from: &str, to: &str) -> Result<PathResult, MapError> {
        for id in [from, to] {
            if !self.nodes.contains_key(id) {
                return Err(MapError::MissingNode(id.to_string()));
            }
        }
        let adj = self.adjacency();
        let mut settled: BTreeSet<&str> = BTreeSet::new();
        let mut heap = BinaryHeap::new();
        heap.push(Label {
            cost: 0.0,
            path: vec![from],
        });
        while let Some(Label { cost, path }) = heap.pop() {
            let here = *path.last().expect("labels are never empty");
            if !settled.insert(here) {
                continue;
            }
            if here == to {
                return Ok(PathResult {
                    nodes: path.iter().map(|s| s.to_string()).collect(),
                    cost,
                    connected: true,
                });
            }
            for &(next, w) in adj.get(here).map(Vec::as_slice).unwrap_or(&[]) {
                if settled.contains(next) || path.contains(&next) {
                    continue;
                }
                let mut p = path.clone();
                p.push(next);
                heap.push(Label {
                    cost: cost + w,
                    path: p,
                });
            }
        }
        Ok(PathResult {
            nodes: Vec::new(),
            cost: f64::INFINITY,
            connected: false,
        })
    }

    /// Check every structural invariant and list each violation with the
    /// ids involved.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let mut push = |kind, ids: &[&str]| {
            violations.push(Violation {
                kind,
                ids: ids.iter().map(|s| s.to_string()).collect(),
            })
        };
        for n in self.nodes.values() {
            for lid in &n.landmark_ids {
                match self.landmarks.get(lid) {
                    None => push(ViolationKind::UnknownLandmark, &[&n.id, lid]),
                    Some(l) if !l.node_ids.contains(&n.id) => push(ViolationKind::MissingBackReference, &[&n.id, lid]),
                    Some(_) => {}
                }
            }
        }
        for l in self.landmarks.values() {
            if l.node_ids.is_empty() {
                push(ViolationKind::EmptyLandmark, &[&l.id]);
            }
            for nid in &l.node_ids {
                match self.nodes.get(nid) {
                    None => push(ViolationKind::UnknownNode, &[&l.id, nid]),
                    Some(n) if !n.landmark_ids.contains(&l.id) => {
                        push(ViolationKind::DanglingBackReference, &[&l.id, nid])
                    }
                    Some(_) => {}
                }
            }
        }
        for e in self.edges.values() {
            if e.a == e.b {
                push(ViolationKind::SelfLoop, &[&e.a]);
            }
            for id in [&e.a, &e.b] {
                if !self.nodes.contains_key(id.as_str()) {
                    push(ViolationKind::MissingEndpoint, &[&e.a, &e.b, id]);
                }
            }
            if !(e.length >= 0.0) {
                push(ViolationKind::NegativeLength, &[&e.a, &e.b]);
            }
        }
        ValidationReport {
            valid: violations.is_empty(),
            node_count: self.nodes.len(),
            edge_count: self.edges.len(),
            landmark_count: self.landmarks.len(),
            violations,
        }
    }

    pub fn to_json(&self) -> String {
        let file = MapFile {
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges.values().cloned().collect(),
            landmarks: self.landmarks.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("map serialization is infallible")
    }

    /// Parse a map document. Structural problems (dangling references,
    /// missing endpoints) are accepted here and surfaced by
    /// [`validate`](Self::validate); duplicate ids are parse errors because
    /// they cannot be represented.
    pub fn from_json(text: &str) -> Result<Self, MapError> {
        let file: MapFile = serde_json::from_str(text).map_err(|e| MapError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let mut map = TopoMap::new();
        for n in file.nodes {
            if map.nodes.contains_key(&n.id) {
                return Err(MapError::DuplicateNode(n.id));
            }
            map.nodes.insert(n.id.clone(), n);
        }
        for l in file.landmarks {
            if map.landmarks.contains_key(&l.id) {
                return Err(MapError::DuplicateLandmark(l.id));
            }
            map.landmarks.insert(l.id.clone(), l);
        }
        for e in file.edges {
            let key = edge_key(&e.a, &e.b);
            if map.edges.contains_key(&key) {
                return Err(MapError::DuplicateEdge(key.0, key.1));
            }
            map.edges.insert(key, e);
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        std::fs::write(path, self.to_json()).map_err(|e| MapError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let text = std::fs::read_to_string(path).map_err(|e| MapError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// Node whose planar position is closest to `(x, y)`; ties go to the
    /// smaller id.
    pub fn nearest_node(&self, x: f64, y: f64) -> Option<&MapNode> {
        self.nodes.values().min_by(|a, b| {
            let da = (a.pose.position[0] - x).hypot(a.pose.position[1] - y);
            let db = (b.pose.position[0] - x).hypot(b.pose.position[1] - y);
            da.total_cmp(&db).then_with(|| a.id.cmp(&b.id))
        })
    }
}

struct Label<'a> {
    cost: f64,
    path: Vec<&'a str>,
}

impl PartialEq for Label<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Label<'_> {}

impl PartialOrd for Label<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Reversed so the max-heap pops the cheapest, then lexicographically
// smallest, label first.
impl Ord for Label<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.path.cmp(&self.path))
    }
}
