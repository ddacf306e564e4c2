//! Expert demonstrations drawn from oracle paths in generated worlds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    condition_at, ego_field, generate_world, oracle_plan, resample_path, PerceptionConfig, SimError, World, WorldConfig,
};
use crate::esdf::{make_mask, mask_esdf, EsdfMap, Grid2, GridGeometry};
use crate::geom::{poses_to_actions, wrap_angle, ActionTrajectory, Pose2, PoseTrajectory};
use crate::planner::{PlanningCondition, TrainSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_actions: usize,
    pub lookahead: f64,
    /// Standard deviation of the start heading around the path tangent.
    pub heading_noise: f64,
    pub min_start_clearance: f64,
    pub mask_radius: f64,
    pub mask_alpha: f64,
    pub perception: PerceptionConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_actions: 16,
            lookahead: 2.0,
            heading_noise: 0.3,
            min_start_clearance: 0.3,
            mask_radius: 0.3,
            mask_alpha: 0.5,
            perception: PerceptionConfig::default(),
        }
    }
}

/// Leading part of a path up to arc length `arc`, ending on an interpolated
/// pose when the cut falls inside a segment.
pub fn truncate_path(path: &PoseTrajectory, arc: f64) -> PoseTrajectory {
    let p = &path.poses;
    let mut out = Vec::new();
    let mut acc = 0.0;
    for k in 0..p.len() {
        if k == 0 {
            out.push(p[0]);
            continue;
        }
        let d = p[k - 1].distance(&p[k]);
        if acc + d >= arc {
            let t = if d > 0.0 { (arc - acc) / d } else { 0.0 };
            let (a, b) = (p[k - 1], p[k]);
            let heading = (b.y - a.y).atan2(b.x - a.x);
            out.push(Pose2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), heading));
            return PoseTrajectory::new(out);
        }
        acc += d;
        out.push(p[k]);
    }
    PoseTrajectory::new(out)
}

/// A free position with at least `clearance` to the nearest obstacle.
pub fn random_free_pose(world: &World, clearance: f64, rng: &mut impl Rng) -> Option<Pose2> {
    let g = world.geometry();
    let (w, h) = (g.width as f64 * g.resolution, g.height as f64 * g.resolution);
    for _ in 0..500 {
        let x = g.origin[0] + rng.random_range(0.0..w);
        let y = g.origin[1] + rng.random_range(0.0..h);
        if !world
            .checker
            .point_collides(x, y, clearance.max(world.config.footprint_radius))
        {
            let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            return Some(Pose2::new(x, y, theta));
        }
    }
    None
}

/// Build a training sample for a robot at `start` following `path`.
pub fn sample_from_path(
    world: &World,
    path: &PoseTrajectory,
    start_theta: f64,
    cfg: &DatasetConfig,
) -> Option<TrainSample> {
    if path.len() < 2 || path.path_length() < 1e-6 {
        return None;
    }
    let prefix = truncate_path(path, cfg.lookahead);
    let mut world_poses = resample_path(&prefix, cfg.n_actions);
    let start = Pose2::new(world_poses.poses[0].x, world_poses.poses[0].y, wrap_angle(start_theta));
    world_poses.poses[0] = start;
    let ego = PoseTrajectory::new(world_poses.poses.iter().map(|p| start.between(p)).collect());
    let actions = poses_to_actions(&ego);
    let goal = *ego.last().unwrap();
    let cond = condition_at(world, &start, goal, &cfg.perception);
    let phi = ego_field(world, &start, &cfg.perception);
    let mask = make_mask(&ego, phi.geometry, cfg.mask_radius).ok()?.mask;
    let field = mask_esdf(&phi, &mask, cfg.mask_alpha).ok()?;
    Some(TrainSample {
        actions,
        cond,
        start: Pose2::identity(),
        field: Some(field),
    })
}

/// One expert demonstration: random start, random goal node, oracle path.
pub fn expert_sample(world: &World, cfg: &DatasetConfig, rng: &mut impl Rng) -> Option<TrainSample> {
    let start = random_free_pose(world, cfg.min_start_clearance, rng)?;
    let nodes: Vec<Pose2> = world.map.nodes().map(|n| n.planar_pose()).collect();
    if nodes.is_empty() {
        return None;
    }
    let goal = nodes[rng.random_range(0..nodes.len())];
    if goal.distance(&start) < 0.5 {
        return None;
    }
    let path = oracle_plan(world, &start, &goal).ok()?;
    if path.len() < 2 {
        return None;
    }
    let tangent = (path.poses[1].y - start.y).atan2(path.poses[1].x - start.x);
    let noise = Normal::new(0.0, cfg.heading_noise.max(0.0)).expect("finite sigma");
    sample_from_path(world, &path, tangent + noise.sample(rng), cfg)
}

/// `per_world` demonstrations from each world, deterministic in `seed`.
pub fn build_dataset(worlds: &[World], per_world: usize, seed: u64, cfg: &DatasetConfig) -> Vec<TrainSample> {
    let mut out = Vec::with_capacity(worlds.len() * per_world);
    for (k, world) in worlds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(k as u64));
        let mut got = 0;
        let mut tries = 0;
        while got < per_world && tries < per_world * 20 {
            tries += 1;
            if let Some(s) = expert_sample(world, cfg, &mut rng) {
                out.push(s);
                got += 1;
            }
        }
    }
    out
}

/// Generate `n_worlds` worlds from consecutive seeds and sample from each.
pub fn generate_dataset(
    seed: u64,
    n_worlds: usize,
    world_cfg: &WorldConfig,
    per_world: usize,
    cfg: &DatasetConfig,
) -> Result<Vec<TrainSample>, SimError> {
    let worlds = (0..n_worlds as u64)
        .map(|k| generate_world(seed.wrapping_add(k), world_cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(build_dataset(&worlds, per_world, seed, cfg))
}

/// Serialized field of a training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: [f64; 2],
    pub values: Vec<f64>,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub actions: ActionTrajectory,
    pub cond: PlanningCondition,
    pub start: Pose2,
    #[serde(default)]
    pub field: Option<FieldRecord>,
}

impl From<&TrainSample> for SampleRecord {
    fn from(s: &TrainSample) -> Self {
        Self {
            actions: s.actions.clone(),
            cond: s.cond.clone(),
            start: s.start,
            field: s.field.as_ref().map(|f| FieldRecord {
                width: f.geometry.width,
                height: f.geometry.height,
                resolution: f.geometry.resolution,
                origin: f.geometry.origin,
                values: f.values.clone(),
            }),
        }
    }
}

impl SampleRecord {
    pub fn into_sample(self) -> Result<TrainSample, SimError> {
        let field = match self.field {
            None => None,
            Some(f) => {
                let g = GridGeometry::new(f.width, f.height, f.resolution, f.origin)
                    .map_err(|e| SimError::Format(e.to_string()))?;
                let m: EsdfMap = Grid2::from_values(g, f.values).map_err(|e| SimError::Format(e.to_string()))?;
                Some(m)
            }
        };
        Ok(TrainSample {
            actions: self.actions,
            cond: self.cond,
            start: self.start,
            field,
        })
    }
}

/// JSON Lines, one sample per line.
pub fn format_dataset(samples: &[TrainSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(&SampleRecord::from(s)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<Vec<TrainSample>, SimError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: SampleRecord =
                serde_json::from_str(l).map_err(|e| SimError::Format(format!("dataset line {}: {e}", i + 1)))?;
            r.into_sample()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::actions_to_poses;

    #[test]
    fn samples_are_consistent() {
        let w = generate_world(2, &WorldConfig::default()).unwrap();
        let cfg = DatasetConfig::default();
        let data = build_dataset(std::slice::from_ref(&w), 20, 5, &cfg);
        assert_eq!(data.len(), 20);
        for s in &data {
            assert_eq!(s.actions.len(), 16);
            assert_eq!(s.cond.occ_features.len(), cfg.perception.feature_len());
            let poses = actions_to_poses(&s.actions, s.start);
            let end = poses.last().unwrap();
            assert!(end.distance(&s.cond.goal) < 1e-9);
            assert!(poses.path_length() <= cfg.lookahead + 1e-9);
            assert!(s.field.is_some());
        }
    }

    #[test]
    fn deterministic_and_round_trips() {
        let w = generate_world(9, &WorldConfig::default()).unwrap();
        let cfg = DatasetConfig::default();
        let a = build_dataset(std::slice::from_ref(&w), 5, 1, &cfg);
        let b = build_dataset(std::slice::from_ref(&w), 5, 1, &cfg);
        assert_eq!(a, b);
        let text = format_dataset(&a);
        assert_eq!(parse_dataset(&text).unwrap(), a);
    }

    #[test]
    fn truncation() {
        let p = PoseTrajectory::new(vec![
            Pose2::new(0.0, 0.0, 0.0),
            Pose2::new(3.0, 0.0, 0.0),
            Pose2::new(3.0, 3.0, 0.0),
        ]);
        let t = truncate_path(&p, 4.0);
        assert_eq!(t.len(), 3);
        assert!((t.path_length() - 4.0).abs() < 1e-12);
        assert_eq!(truncate_path(&p, 10.0), p);
    }
}
