//! Robot-centred views of the world: a pooled occupancy patch for the
//! planner condition and an ego-frame distance field for training.

use serde::{Deserialize, Serialize};

use super::World;
use crate::esdf::{BinaryMap2D, EsdfMap, Grid2, GridGeometry};
use crate::geom::Pose2;
use crate::planner::PlanningCondition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    /// Cells per side of the ego patch.
    pub patch: usize,
    pub resolution: f64,
    /// Side of the max-pooling block.
    pub pool: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            patch: 32,
            resolution: 0.2,
            pool: 2,
        }
    }
}

impl PerceptionConfig {
    /// Ego grid centred on the robot, x forward.
    pub fn geometry(&self) -> GridGeometry {
        let half = 0.5 * (self.patch as f64 - 1.0) * self.resolution;
        GridGeometry::new(self.patch, self.patch, self.resolution, [-half, -half]).expect("valid ego geometry")
    }

    /// Pooled cells plus one clearance summary.
    pub fn feature_len(&self) -> usize {
        let side = self.patch.div_ceil(self.pool.max(1));
        side * side + 1
    }
}

/// Occupancy around `pose` in its own frame. Cells off the map read as
/// occupied.
pub fn ego_patch(world: &World, pose: &Pose2, cfg: &PerceptionConfig) -> BinaryMap2D {
    let g = cfg.geometry();
    let mut out = Grid2::filled(g, false);
    for j in 0..g.height {
        for i in 0..g.width {
            let p = pose.transform_point(g.cell_center(i, j));
            out.set(i, j, world.is_occupied_at(p[0], p[1]));
        }
    }
    out
}

/// World signed distance field resampled into the ego frame of `pose`.
pub fn ego_field(world: &World, pose: &Pose2, cfg: &PerceptionConfig) -> EsdfMap {
    let g = cfg.geometry();
    let mut out = Grid2::filled(g, 0.0);
    for j in 0..g.height {
        for i in 0..g.width {
            let p = pose.transform_point(g.cell_center(i, j));
            out.set(i, j, world.esdf.sample(p[0], p[1]).value);
        }
    }
    out
}

pub fn occ_features(world: &World, pose: &Pose2, cfg: &PerceptionConfig) -> Vec<f64> {
    let patch = ego_patch(world, pose, cfg);
    let pool = cfg.pool.max(1);
    let side = cfg.patch.div_ceil(pool);
    let mut out = Vec::with_capacity(cfg.feature_len());
    for bj in 0..side {
        for bi in 0..side {
            let mut hit = false;
            for j in bj * pool..((bj + 1) * pool).min(cfg.patch) {
                for i in bi * pool..((bi + 1) * pool).min(cfg.patch) {
                    hit |= patch.get(i, j);
                }
            }
            out.push(if hit { 1.0 } else { 0.0 });
        }
    }
    let r = world.config.resolution;
    let ring: f64 = (0..8)
        .map(|k| {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            world.esdf.sample(pose.x + r * a.cos(), pose.y + r * a.sin()).value
        })
        .sum::<f64>()
        / 8.0;
    out.push(ring.clamp(-1.0, 2.0));
    out
}

/// Planner condition for a robot at `pose` heading for `goal_ego`.
pub fn condition_at(world: &World, pose: &Pose2, goal_ego: Pose2, cfg: &PerceptionConfig) -> PlanningCondition {
    PlanningCondition {
        goal: goal_ego,
        velocity: [0.0, 0.0],
        occ_features: occ_features(world, pose, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_world, WorldConfig};

    #[test]
    fn shapes_and_empty_world() {
        let w = generate_world(
            0,
            &WorldConfig {
                obstacle_density: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = PerceptionConfig::default();
        let f = occ_features(&w, &Pose2::new(6.4, 6.4, 0.7), &cfg);
        assert_eq!(f.len(), cfg.feature_len());
        assert_eq!(f.len(), 257);
        assert!(f[..256].iter().all(|v| *v == 0.0));
        // Near the map edge the outside reads as occupied.
        let f = occ_features(&w, &Pose2::new(0.5, 6.4, 0.0), &cfg);
        assert!(f[..256].contains(&1.0));
    }

    #[test]
    fn ego_frame_rotation() {
        let w = generate_world(4, &WorldConfig::default()).unwrap();
        let cfg = PerceptionConfig::default();
        let pose = Pose2::new(5.0, 7.0, 1.1);
        let field = ego_field(&w, &pose, &cfg);
        let g = cfg.geometry();
        for (i, j) in [(0, 0), (5, 20), (31, 31), (16, 9)] {
            let p = pose.transform_point(g.cell_center(i, j));
            assert_eq!(field.get(i, j), w.esdf.sample(p[0], p[1]).value);
        }
    }
}
