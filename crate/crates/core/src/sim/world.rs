//! Seeded grid worlds with a lattice topological map and landmarks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::esdf::{
    compress_grid, format_occupancy, parse_occupancy, signed_esdf, BinaryMap2D, EsdfMap, GridGeometry, OccupancyGrid,
};
use crate::geom::Pose2;
use crate::localization::{LandmarkObservation, QueryContext};
use crate::planner::CollisionChecker;
use crate::topomap::{Landmark, MapNode, Pose3, TopoMap};

/// Landmark vocabulary: category and functional description.
pub const VOCABULARY: &[(&str, &str)] = &[
    ("fridge", "keeps food and drinks cold"),
    ("sofa", "soft seating for relaxing"),
    ("tv", "shows video and news"),
    ("printer", "prints paper documents"),
    ("sink", "wash hands and dishes"),
    ("bookshelf", "stores books and folders"),
    ("plant", "green potted decoration"),
    ("door", "entrance to another room"),
    ("desk", "work surface with drawers"),
    ("microwave", "heats food quickly"),
    ("bed", "place for sleeping"),
    ("clock", "shows the current time"),
    ("lamp", "provides reading light"),
    ("whiteboard", "board for writing notes"),
    ("vending machine", "sells snacks and drinks"),
    ("coffee machine", "brews hot coffee"),
];

pub const COLORS: &[&str] = &["red", "blue", "green", "white", "black", "yellow"];
pub const MATERIALS: &[&str] = &["wood", "metal", "plastic", "fabric"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldKind {
    Rooms,
    Corridor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub kind: WorldKind,
    /// Cells per side.
    pub size: usize,
    pub resolution: f64,
    pub obstacle_density: f64,
    pub landmark_count: usize,
    pub node_spacing: f64,
    /// Minimum free-space distance at a map node.
    pub node_clearance: f64,
    /// Footprint radius used for edge line-of-sight checks.
    pub footprint_radius: f64,
    /// Edges join nodes closer than this.
    pub edge_radius: f64,
    pub view_range: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            kind: WorldKind::Rooms,
            size: 64,
            resolution: 0.2,
            obstacle_density: 0.15,
            landmark_count: 24,
            node_spacing: 1.0,
            node_clearance: 0.3,
            footprint_radius: 0.2,
            edge_radius: 2.0,
            view_range: 3.0,
        }
    }
}

impl WorldConfig {
    pub fn corridor() -> Self {
        Self {
            kind: WorldKind::Corridor,
            size: 48,
            obstacle_density: 0.0,
            landmark_count: 4,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldMeta {
    pub seed: u64,
    pub config: WorldConfig,
    pub landmark_positions: BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub grid: OccupancyGrid,
    pub map: TopoMap,
    pub landmark_positions: BTreeMap<String, [f64; 2]>,
    pub occ: BinaryMap2D,
    pub esdf: EsdfMap,
    pub checker: CollisionChecker,
}

impl World {
    pub fn assemble(
        seed: u64,
        config: WorldConfig,
        grid: OccupancyGrid,
        map: TopoMap,
        landmark_positions: BTreeMap<String, [f64; 2]>,
    ) -> Self {
        let occ = compress_grid(&grid);
        let esdf = signed_esdf(&occ);
        let checker = CollisionChecker::new(&occ);
        Self {
            seed,
            config,
            grid,
            map,
            landmark_positions,
            occ,
            esdf,
            checker,
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        self.occ.geometry
    }

    pub fn is_occupied_at(&self, x: f64, y: f64) -> bool {
        match self.occ.geometry.cell_of(x, y) {
            Some((i, j)) => self.occ.get(i, j),
            None => true,
        }
    }

    /// Whether the straight segment keeps the footprint clear.
    pub fn segment_clear(&self, a: [f64; 2], b: [f64; 2], radius: f64) -> bool {
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let n = ((len / (0.25 * self.occ.geometry.resolution)).ceil() as usize).max(1);
        (0..=n).all(|k| {
            let t = k as f64 / n as f64;
            !self
                .checker
                .point_collides(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), radius)
        })
    }

    /// Unobstructed sight line: every sampled point lies in a free cell.
    pub fn line_of_sight(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let n = ((len / (0.25 * self.occ.geometry.resolution)).ceil() as usize).max(1);
        (0..=n).all(|k| {
            let t = k as f64 / n as f64;
            !self.is_occupied_at(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
        })
    }

    /// Landmark ids visible from a position, sorted.
    pub fn visible_landmarks(&self, x: f64, y: f64) -> BTreeSet<String> {
        self.landmark_positions
            .iter()
            .filter(|(_, p)| (p[0] - x).hypot(p[1] - y) <= self.config.view_range && self.line_of_sight([x, y], **p))
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Noiseless observations from a pose plus the matching oracle context.
    pub fn observe(&self, pose: &Pose2) -> (Vec<LandmarkObservation>, QueryContext) {
        let ids = self.visible_landmarks(pose.x, pose.y);
        let obs = ids
            .iter()
            .filter_map(|id| self.map.landmark(id))
            .map(|l| LandmarkObservation {
                category: l.category.clone(),
                visual_attributes: l.visual_attributes.clone(),
            })
            .collect();
        let ctx = QueryContext {
            image_ref: None,
            pose: Some(*pose),
            visible_landmark_ids: ids,
        };
        (obs, ctx)
    }

    pub fn meta(&self) -> WorldMeta {
        WorldMeta {
            seed: self.seed,
            config: self.config.clone(),
            landmark_positions: self.landmark_positions.clone(),
        }
    }

    /// Write `grid.occ`, `map.json` and `world.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SimError> {
        let io = |e: std::io::Error| SimError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("grid.occ"), format_occupancy(&self.grid)).map_err(io)?;
        fs::write(dir.join("map.json"), self.map.to_json()).map_err(io)?;
        let meta = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        fs::write(dir.join("world.json"), meta).map_err(io)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SimError> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name)).map_err(|e| SimError::Io(format!("{}: {e}", dir.join(name).display())))
        };
        let grid = parse_occupancy(&read("grid.occ")?).map_err(|e| SimError::Format(e.to_string()))?;
        let map = TopoMap::from_json(&read("map.json")?).map_err(|e| SimError::Format(e.to_string()))?;
        let meta: WorldMeta =
            serde_json::from_str(&read("world.json")?).map_err(|e| SimError::Format(format!("world.json: {e}")))?;
        Ok(Self::assemble(
            meta.seed,
            meta.config,
            grid,
            map,
            meta.landmark_positions,
        ))
    }
}

fn node_id(k: usize) -> String {
    format!("n{k:03}")
}

fn place_rect(occ: &mut BinaryMap2D, rng: &mut ChaCha8Rng) {
    let n = occ.width();
    let w = rng.random_range(2..=8usize).min(n);
    let h = rng.random_range(2..=8usize).min(n);
    let x0 = rng.random_range(0..=n - w);
    let y0 = rng.random_range(0..=n - h);
    for j in y0..y0 + h {
        for i in x0..x0 + w {
            occ.set(i, j, true);
        }
    }
}

fn rooms_grid(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<BinaryMap2D, SimError> {
    let g = GridGeometry::new(cfg.size, cfg.size, cfg.resolution, [0.0, 0.0])
        .map_err(|e| SimError::Config(e.to_string()))?;
    let mut occ = BinaryMap2D::filled(g, false);
    let target = (cfg.obstacle_density * g.len() as f64).round() as usize;
    let mut guard = 0;
    while occ.occupied_count() < target {
        place_rect(&mut occ, rng);
        guard += 1;
        if guard > 10_000 {
            break;
        }
    }
    Ok(occ)
}

/// A band of free space crossing the grid with one or two doorway walls.
fn corridor_grid(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<(BinaryMap2D, Vec<[f64; 2]>), SimError> {
    let g = GridGeometry::new(cfg.size, cfg.size, cfg.resolution, [0.0, 0.0])
        .map_err(|e| SimError::Config(e.to_string()))?;
    let n = cfg.size;
    let mut occ = BinaryMap2D::filled(g, true);
    let width = rng.random_range(6..=9usize);
    let y0 = rng.random_range(n / 2 - 8..=n / 2 + 8 - width);
    for j in y0..y0 + width {
        for i in 0..n {
            occ.set(i, j, false);
        }
    }
    let doors = rng.random_range(1..=2usize);
    let mut door_xs = Vec::new();
    for d in 0..doors {
        let lo = 8 + d * (n - 16) / doors;
        let hi = lo + (n - 16) / doors - 4;
        let x = rng.random_range(lo..=hi.max(lo));
        let gap = rng.random_range(4..=5usize);
        let off = rng.random_range(0..=width - gap);
        for j in y0..y0 + width {
            if j < y0 + off || j >= y0 + off + gap {
                occ.set(x, j, true);
            }
        }
        door_xs.push(x);
    }
    // Small clutter boxes against the corridor walls.
    for _ in 0..rng.random_range(0..=3usize) {
        let x = rng.random_range(2..n - 4);
        if door_xs.iter().any(|d| (*d as i64 - x as i64).abs() < 5) {
            continue;
        }
        let top = rng.random_bool(0.5);
        for i in x..x + 2 {
            let j = if top { y0 + width - 1 } else { y0 };
            occ.set(i, j, true);
        }
    }
    // Candidate node positions along the corridor centre line.
    let cy = (y0 as f64 + (width as f64 - 1.0) / 2.0) * cfg.resolution;
    let step = cfg.node_spacing / cfg.resolution;
    let mut centres = Vec::new();
    let mut x = 1.5;
    while x < (n - 2) as f64 {
        centres.push([x * cfg.resolution, cy]);
        x += step;
    }
    for d in &door_xs {
        let gap_rows: Vec<usize> = (y0..y0 + width).filter(|j| !occ.get(*d, *j)).collect();
        let mid = (gap_rows[0] + gap_rows[gap_rows.len() - 1]) as f64 / 2.0;
        centres.push([*d as f64 * cfg.resolution, mid * cfg.resolution]);
    }
    Ok((occ, centres))
}

fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n];
    for (a, b) in edges {
        adj[*a].push(*b);
        adj[*b].push(*a);
    }
    let mut seen = vec![false; n];
    let mut q = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = q.pop_front() {
        for v in &adj[u] {
            if !seen[*v] {
                seen[*v] = true;
                q.push_back(*v);
            }
        }
    }
    seen.iter().all(|s| *s)
}

/// Deterministic world for a seed. Rejection-resamples up to 100 times until
/// the node graph is connected.
pub fn generate_world(seed: u64, cfg: &WorldConfig) -> Result<World, SimError> {
    if !(0.0..=0.4).contains(&cfg.obstacle_density) {
        return Err(SimError::Config(format!(
            "obstacle density {} outside [0, 0.4]",
            cfg.obstacle_density
        )));
    }
    if cfg.size < 8 || !(cfg.resolution > 0.0) || !(cfg.node_spacing > 0.0) {
        return Err(SimError::Config(
            "world size, resolution and node spacing must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let (occ, candidates) = match cfg.kind {
            WorldKind::Rooms => {
                let occ = rooms_grid(cfg, &mut rng)?;
                let step = (cfg.node_spacing / cfg.resolution).round().max(1.0) as usize;
                let first = (step / 2 + 1).min(cfg.size - 1);
                let mut c = Vec::new();
                let mut j = first;
                while j + 2 < cfg.size {
                    let mut i = first;
                    while i + 2 < cfg.size {
                        c.push(occ.geometry.cell_center(i, j));
                        i += step;
                    }
                    j += step;
                }
                (occ, c)
            }
            WorldKind::Corridor => corridor_grid(cfg, &mut rng)?,
        };
        let grid = OccupancyGrid::from(occ);
        let mut world = World::assemble(seed, cfg.clone(), grid, TopoMap::new(), BTreeMap::new());
        let nodes: Vec<[f64; 2]> = candidates
            .into_iter()
            .filter(|p| !world.is_occupied_at(p[0], p[1]) && world.checker.clearance(p[0], p[1]) >= cfg.node_clearance)
            .collect();
        if nodes.len() < 2 {
            continue;
        }
        let mut edges = Vec::new();
        for a in 0..nodes.len() {
            for b in a + 1..nodes.len() {
                let d = (nodes[a][0] - nodes[b][0]).hypot(nodes[a][1] - nodes[b][1]);
                if d < cfg.edge_radius - 1e-9 && world.segment_clear(nodes[a], nodes[b], cfg.footprint_radius) {
                    edges.push((a, b));
                }
            }
        }
        if !connected(nodes.len(), &edges) {
            continue;
        }
        let mut map = TopoMap::new();
        for (k, p) in nodes.iter().enumerate() {
            map.add_node(MapNode::new(
                node_id(k),
                Pose3::from_planar(&Pose2::new(p[0], p[1], 0.0), 0.0),
            ))
            .expect("fresh ids");
        }
        for (a, b) in &edges {
            let pa = Pose2::new(nodes[*a][0], nodes[*a][1], 0.0);
            let pb = Pose2::new(nodes[*b][0], nodes[*b][1], 0.0);
            map.add_edge(&node_id(*a), &node_id(*b), Pose3::from_planar(&pa.between(&pb), 0.0))
                .expect("valid edge");
        }
        world.map = map;
        place_landmarks(&mut world, &nodes, &mut rng);
        debug_assert!(world.map.validate().valid);
        return Ok(world);
    }
    Err(SimError::Unsatisfiable(format!(
        "no connected world for seed {seed} at density {} after 100 attempts",
        cfg.obstacle_density
    )))
}

fn place_landmarks(world: &mut World, nodes: &[[f64; 2]], rng: &mut ChaCha8Rng) {
    let occ = &world.occ;
    let (w, h) = (occ.width(), occ.height());
    let mut near_wall = Vec::new();
    let mut free = Vec::new();
    for j in 0..h {
        for i in 0..w {
            if occ.get(i, j) {
                continue;
            }
            free.push((i, j));
            let touches = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|(dx, dy)| {
                let (x, y) = (i as i64 + dx, j as i64 + dy);
                x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && occ.get(x as usize, y as usize)
            });
            if touches {
                near_wall.push((i, j));
            }
        }
    }
    let pool = if near_wall.is_empty() { &free } else { &near_wall };
    if pool.is_empty() {
        return;
    }
    let range = world.config.view_range;
    for k in 0..world.config.landmark_count {
        for _ in 0..50 {
            let (i, j) = pool[rng.random_range(0..pool.len())];
            let p = world.occ.geometry.cell_center(i, j);
            let seen: Vec<usize> = (0..nodes.len())
                .filter(|n| {
                    (nodes[*n][0] - p[0]).hypot(nodes[*n][1] - p[1]) <= range && world.line_of_sight(nodes[*n], p)
                })
                .collect();
            if seen.is_empty() {
                continue;
            }
            let (cat, desc) = VOCABULARY[rng.random_range(0..VOCABULARY.len())];
            let lm = Landmark::new(format!("lm{k:02}"), cat)
                .with_attribute("color", COLORS[rng.random_range(0..COLORS.len())])
                .with_attribute("material", MATERIALS[rng.random_range(0..MATERIALS.len())])
                .with_description(desc);
            for n in seen {
                world
                    .map
                    .register_landmark(&node_id(n), lm.clone())
                    .expect("node exists");
            }
            world.landmark_positions.insert(lm.id.clone(), p);
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_world_has_full_lattice() {
        let cfg = WorldConfig {
            obstacle_density: 0.0,
            ..Default::default()
        };
        let w = generate_world(1, &cfg).unwrap();
        assert_eq!(w.occ.occupied_count(), 0);
        assert_eq!(w.map.node_count(), 144);
        // 8-neighbour lattice: 2·12·11 straight plus 2·11·11 diagonal.
        assert_eq!(w.map.edge_count(), 2 * 12 * 11 + 2 * 11 * 11);
        assert!(w.map.validate().valid);
    }

    #[test]
    fn determinism_and_variation() {
        let cfg = WorldConfig::default();
        let a = generate_world(7, &cfg).unwrap();
        let b = generate_world(7, &cfg).unwrap();
        let c = generate_world(8, &cfg).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.map, b.map);
        assert_ne!(a.grid, c.grid);
    }

    #[test]
    fn nodes_free_and_map_valid() {
        for seed in 0..10 {
            let w = generate_world(seed, &WorldConfig::default()).unwrap();
            assert!(w.map.validate().valid);
            for n in w.map.nodes() {
                let p = n.planar_pose();
                assert!(!w.is_occupied_at(p.x, p.y));
                assert!(w.checker.clearance(p.x, p.y) >= 0.3);
            }
            assert!(w.map.landmark_count() > 0);
        }
    }

    #[test]
    fn corridor_worlds() {
        for seed in 0..10 {
            let w = generate_world(seed, &WorldConfig::corridor()).unwrap();
            assert!(w.map.node_count() >= 5, "{}", w.map.node_count());
            assert!(w.map.validate().valid);
        }
    }

    #[test]
    fn bad_density() {
        let cfg = WorldConfig {
            obstacle_density: 0.5,
            ..Default::default()
        };
        assert!(matches!(generate_world(0, &cfg), Err(SimError::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let w = generate_world(3, &WorldConfig::default()).unwrap();
        let dir = std::env::temp_dir().join(format!("astra-world-{}", std::process::id()));
        w.save(&dir).unwrap();
        let back = World::load(&dir).unwrap();
        assert_eq!(back.grid, w.grid);
        assert_eq!(back.map, w.map);
        assert_eq!(back.landmark_positions, w.landmark_positions);
        let _ = fs::remove_dir_all(&dir);
    }
}
