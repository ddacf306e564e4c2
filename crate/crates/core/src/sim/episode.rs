//! Closed-loop navigation episodes and aggregate evaluation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    condition_at, densify, generate_world, oracle_plan, random_free_pose, select_subgoal, DatasetConfig,
    PerceptionConfig, SimError, World, WorldConfig,
};
use crate::geom::{poses_to_actions, Action, ActionTrajectory, Pose2, PoseTrajectory};
use crate::localization::{goal_localize, localize, FineMode, GroundTruthOracle, LocalizationConfig};
use crate::odometry::{fuse_increment, FusionWeights, SensorIncrement};
use crate::planner::{sample, VectorField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub lookahead: f64,
    pub goal_tolerance: f64,
    /// Steps between global localization fixes.
    pub fix_every: usize,
    /// Actions executed from each local plan.
    pub execute: usize,
    pub euler_steps: usize,
    pub fallback: bool,
    /// Step budget as a multiple of the oracle path length in nominal steps.
    pub budget_factor: f64,
    pub nominal_step: f64,
    pub stuck_window: usize,
    pub stuck_progress: f64,
    pub slip_trans: f64,
    pub slip_rot: f64,
    pub imu_noise: f64,
    pub oracle_radius: f64,
    pub max_verifications: usize,
    pub dt: f64,
    pub localization: LocalizationConfig,
    pub perception: PerceptionConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            lookahead: 2.0,
            goal_tolerance: 0.5,
            fix_every: 20,
            execute: 8,
            euler_steps: 20,
            fallback: true,
            budget_factor: 10.0,
            nominal_step: 0.125,
            stuck_window: 60,
            stuck_progress: 0.1,
            slip_trans: 0.02,
            slip_rot: 0.01,
            imu_noise: 0.005,
            oracle_radius: 0.5,
            max_verifications: 5,
            dt: 0.1,
            localization: LocalizationConfig {
                fine_mode: FineMode::Nearest,
                ..LocalizationConfig::default()
            },
            perception: PerceptionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeGoal {
    Pose(Pose2),
    /// Search terms for the goal landmark.
    Instruction(Vec<String>),
}

#[derive(Clone, Copy)]
pub enum LocalPlanner<'a> {
    Learned(&'a dyn VectorField),
    Oracle,
}

impl LocalPlanner<'_> {
    fn is_learned(&self) -> bool {
        matches!(self, LocalPlanner::Learned(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndReason {
    Reached,
    LocalizationFail,
    Timeout,
    Stuck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub success: bool,
    pub reason: EndReason,
    pub learned: bool,
    pub fallback_count: usize,
    pub planner_calls: usize,
    pub collision_count: usize,
    pub steps: usize,
    pub path_length: f64,
    /// Mean step length over the longest step, in `[0, 1]`.
    pub mean_velocity: f64,
    pub final_error: f64,
}

struct Robot<'w> {
    world: &'w World,
    cfg: &'w EpisodeConfig,
    truth: Pose2,
    est: Pose2,
    steps: usize,
    collisions: usize,
    travelled: f64,
    max_step: f64,
    rng: ChaCha8Rng,
    weights: FusionWeights,
}

impl Robot<'_> {
    /// Execute one commanded ego increment with slip and update the estimate
    /// from wheel and IMU readings.
    fn step(&mut self, cmd: &Action) {
        let len = cmd.step_length();
        let trans = Normal::new(0.0, self.cfg.slip_trans * len + 1e-12).expect("finite sigma");
        let rot = Normal::new(0.0, self.cfg.slip_rot + 1e-12).expect("finite sigma");
        let actual = Action::new(
            cmd.dx + trans.sample(&mut self.rng),
            cmd.dy + trans.sample(&mut self.rng),
            cmd.dtheta + rot.sample(&mut self.rng),
        );
        let next = self.truth.apply(&actual);
        let r = self.world.config.footprint_radius;
        let blocked = self.world.is_occupied_at(next.x, next.y);
        if blocked || self.world.checker.point_collides(next.x, next.y, r) {
            self.collisions += 1;
        }
        let moved = if blocked {
            // Bumped: the heading still turns but the base stays put.
            Action::new(0.0, 0.0, actual.dtheta)
        } else {
            actual
        };
        let imu = Normal::new(0.0, self.cfg.imu_noise + 1e-12).expect("finite sigma");
        let inc = SensorIncrement {
            dt: self.cfg.dt,
            wheel: Some(*cmd),
            imu_dtheta: Some(moved.dtheta + imu.sample(&mut self.rng)),
            vision: None,
        };
        let fused = fuse_increment(&inc, &self.weights).expect("valid increment");
        self.travelled += moved.step_length();
        self.max_step = self.max_step.max(moved.step_length());
        self.truth = self.truth.apply(&moved);
        self.est = self.est.apply(&fused);
        self.steps += 1;
    }

    /// Global localization at the true pose. The estimate is moved inside
    /// the oracle discs of the filtered nodes and outside those of rejected
    /// candidates. Returns the candidate and filtered node sets.
    fn fix(&mut self) -> (BTreeSet<String>, BTreeSet<String>) {
        let (obs, ctx) = self.world.observe(&self.truth);
        let oracle = GroundTruthOracle {
            radius: self.cfg.oracle_radius,
        };
        let res = localize(&obs, &ctx, &self.world.map, &oracle, &self.cfg.localization);
        let pose_of = |id: &String| self.world.map.node(id).map(|n| n.planar_pose());
        let inside: Vec<Pose2> = res.filtered_node_ids.iter().filter_map(pose_of).collect();
        let outside: Vec<Pose2> = res
            .candidate_node_ids
            .difference(&res.filtered_node_ids)
            .filter_map(pose_of)
            .collect();
        self.est = project_constraints(self.est, &inside, &outside, self.cfg.oracle_radius);
        (res.candidate_node_ids, res.filtered_node_ids)
    }
}

/// Alternating projection into every disc of `inside` and out of every
/// disc of `outside`, all of radius `r`; the heading is kept. The result is
/// a best effort when the constraints conflict.
pub fn project_constraints(p: Pose2, inside: &[Pose2], outside: &[Pose2], r: f64) -> Pose2 {
    let (mut x, mut y) = (p.x, p.y);
    for _ in 0..50 {
        let mut moved = false;
        for c in inside {
            let d = (x - c.x).hypot(y - c.y);
            if d > r {
                let s = r / d;
                x = c.x + (x - c.x) * s;
                y = c.y + (y - c.y) * s;
                moved = true;
            }
        }
        for c in outside {
            let d = (x - c.x).hypot(y - c.y);
            if d < r && d > 1e-12 {
                let s = r / d;
                x = c.x + (x - c.x) * s;
                y = c.y + (y - c.y) * s;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    Pose2::new(x, y, p.theta)
}

/// Nearest point around `target` whose cell clears the footprint, searched
/// outwards up to one metre.
fn snap_free(world: &World, target: [f64; 2]) -> Option<[f64; 2]> {
    let r = world.config.footprint_radius;
    if !world.checker.point_collides(target[0], target[1], r) {
        return Some(target);
    }
    let g = world.geometry();
    let reach = (1.0 / g.resolution).ceil() as i64;
    let (ci, cj) = g.cell_of(target[0], target[1]).unwrap_or((0, 0));
    let mut best: Option<(f64, [f64; 2])> = None;
    for dj in -reach..=reach {
        for di in -reach..=reach {
            let (i, j) = (ci as i64 + di, cj as i64 + dj);
            if i < 0 || j < 0 || i >= g.width as i64 || j >= g.height as i64 {
                continue;
            }
            let c = g.cell_center(i as usize, j as usize);
            let d = (c[0] - target[0]).hypot(c[1] - target[1]);
            if d <= 1.0 && !world.checker.point_collides(c[0], c[1], r) && best.is_none_or(|b| d < b.0) {
                best = Some((d, c));
            }
        }
    }
    best.map(|b| b.1)
}

/// Ego-frame actions that follow an oracle path from the robot, at roughly
/// nominal step length.
fn oracle_actions(world: &World, from: &Pose2, to: Pose2, step: f64) -> Option<ActionTrajectory> {
    let target = snap_free(world, [to.x, to.y])?;
    let path = oracle_plan(world, from, &Pose2::new(target[0], target[1], to.theta)).ok()?;
    if path.len() < 2 {
        return None;
    }
    let dense = densify(&path, step);
    let ego = PoseTrajectory::new(dense.poses.iter().map(|p| from.between(p)).collect());
    Some(poses_to_actions(&ego))
}

/// Straight-line steps towards an ego-frame goal.
fn straight_actions(goal: &Pose2, step: f64) -> ActionTrajectory {
    let d = goal.translation_norm();
    let n = ((d / step).ceil() as usize).max(1);
    let heading = goal.y.atan2(goal.x);
    let mut poses = vec![Pose2::identity()];
    for k in 1..=n {
        let t = k as f64 / n as f64;
        poses.push(Pose2::new(t * goal.x, t * goal.y, heading));
    }
    poses_to_actions(&PoseTrajectory::new(poses))
}

struct Outcome {
    reason: EndReason,
    verified: bool,
}

pub fn run_episode(
    world: &World,
    start: Pose2,
    goal: &EpisodeGoal,
    planner: LocalPlanner<'_>,
    cfg: &EpisodeConfig,
    seed: u64,
) -> EpisodeReport {
    let mut robot = Robot {
        world,
        cfg,
        truth: start,
        est: start,
        steps: 0,
        collisions: 0,
        travelled: 0.0,
        max_step: 0.0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        weights: FusionWeights {
            trans_vision: 0.0,
            rot_vision: 0.0,
            ..FusionWeights::default()
        },
    };
    let mut fallback_count = 0;
    let mut planner_calls = 0;
    let mut goal_pose = None;
    let outcome = navigate(
        &mut robot,
        goal,
        planner,
        &mut fallback_count,
        &mut planner_calls,
        &mut goal_pose,
    );
    let final_error = goal_pose.map_or(f64::INFINITY, |g: Pose2| g.distance(&robot.truth));
    let success = outcome.reason == EndReason::Reached && outcome.verified && final_error <= cfg.goal_tolerance;
    EpisodeReport {
        success,
        reason: if outcome.reason == EndReason::Reached && !success {
            EndReason::Stuck
        } else {
            outcome.reason
        },
        learned: planner.is_learned(),
        fallback_count,
        planner_calls,
        collision_count: robot.collisions,
        steps: robot.steps,
        path_length: robot.travelled,
        mean_velocity: if robot.steps == 0 || robot.max_step == 0.0 {
            0.0
        } else {
            robot.travelled / robot.steps as f64 / robot.max_step
        },
        final_error: if final_error.is_finite() { final_error } else { -1.0 },
    }
}

fn navigate(
    robot: &mut Robot<'_>,
    goal: &EpisodeGoal,
    planner: LocalPlanner<'_>,
    fallback_count: &mut usize,
    planner_calls: &mut usize,
    goal_out: &mut Option<Pose2>,
) -> Outcome {
    let world = robot.world;
    let cfg = robot.cfg;
    let fail = |reason| Outcome {
        reason,
        verified: false,
    };

    // Start: global localization; the heading comes from the IMU reference.
    let (obs, ctx) = world.observe(&robot.truth);
    let oracle = GroundTruthOracle {
        radius: cfg.oracle_radius,
    };
    let loc = localize(&obs, &ctx, &world.map, &oracle, &cfg.localization);
    let Some(p0) = loc.estimated_pose else {
        return fail(EndReason::LocalizationFail);
    };
    robot.est = Pose2::new(p0.x, p0.y, robot.truth.theta);

    let goal_pose = match goal {
        EpisodeGoal::Pose(p) => *p,
        EpisodeGoal::Instruction(terms) => {
            let l = &cfg.localization;
            match goal_localize(
                terms,
                &world.map,
                &[robot.est.x, robot.est.y, 0.0],
                l.r0,
                l.r_step,
                l.r_max,
            ) {
                Ok(g) => g.goal_pose,
                Err(_) => return fail(EndReason::LocalizationFail),
            }
        }
    };
    *goal_out = Some(goal_pose);
    let goal_node = world
        .map
        .nearest_node(goal_pose.x, goal_pose.y)
        .filter(|n| n.planar_pose().distance(&goal_pose) < 0.05)
        .map(|n| n.id.clone());

    let Some(start_node) = world.map.nearest_node(robot.est.x, robot.est.y).map(|n| n.id.clone()) else {
        return fail(EndReason::LocalizationFail);
    };
    let Some(end_node) = world.map.nearest_node(goal_pose.x, goal_pose.y).map(|n| n.id.clone()) else {
        return fail(EndReason::LocalizationFail);
    };
    let route = match world.map.shortest_path(&start_node, &end_node) {
        Ok(r) if r.connected => r,
        _ => return fail(EndReason::LocalizationFail),
    };
    let mut waypoints = vec![robot.est];
    waypoints.extend(
        route
            .nodes
            .iter()
            .filter_map(|id| world.map.node(id))
            .map(|n| n.planar_pose()),
    );
    waypoints.push(goal_pose);
    let global = densify(&PoseTrajectory::new(waypoints), 0.25);

    let reference = oracle_plan(world, &robot.truth, &goal_pose)
        .map(|p| p.path_length())
        .unwrap_or_else(|_| global.path_length());
    let budget = ((cfg.budget_factor * reference / cfg.nominal_step).ceil() as usize).max(50);

    let mut since_fix = 0;
    let mut verifications = 0;
    let mut progress_mark = (0usize, robot.truth);
    let arrive = 0.5 * cfg.goal_tolerance;
    loop {
        if robot.est.distance(&goal_pose) <= arrive {
            let (candidates, filtered) = robot.fix();
            since_fix = 0;
            verifications += 1;
            // A goal node that is not among the candidates cannot be checked
            // from here; the corrected estimate decides.
            let confirmed = match &goal_node {
                Some(id) if candidates.contains(id) => filtered.contains(id),
                _ => robot.est.distance(&goal_pose) <= arrive,
            };
            if confirmed {
                return Outcome {
                    reason: EndReason::Reached,
                    verified: true,
                };
            }
            if verifications >= cfg.max_verifications {
                return fail(EndReason::Stuck);
            }
        }
        if robot.steps >= budget {
            return fail(EndReason::Timeout);
        }

        let subgoal = select_subgoal(&global, &robot.est, cfg.lookahead);
        let ego_goal = robot.est.between(&subgoal);
        *planner_calls += 1;
        let actions = match planner {
            LocalPlanner::Learned(field) => {
                let c = condition_at(world, &robot.truth, ego_goal, &cfg.perception);
                let plan = sample(field, &c, cfg.euler_steps, &mut robot.rng);
                let world_poses: Vec<Pose2> = plan.poses.poses.iter().map(|p| robot.truth.compose(p)).collect();
                let collided = !plan.actions.is_finite()
                    || robot
                        .world
                        .checker
                        .collides(&PoseTrajectory::new(world_poses), world.config.footprint_radius);
                if collided && cfg.fallback {
                    *fallback_count += 1;
                    oracle_actions(world, &robot.truth, robot.truth.compose(&ego_goal), cfg.nominal_step)
                        .unwrap_or_else(|| straight_actions(&ego_goal, cfg.nominal_step))
                } else {
                    plan.actions
                }
            }
            LocalPlanner::Oracle => {
                oracle_actions(world, &robot.truth, robot.truth.compose(&ego_goal), cfg.nominal_step)
                    .unwrap_or_else(|| straight_actions(&ego_goal, cfg.nominal_step))
            }
        };

        for a in actions.steps.iter().take(cfg.execute.max(1)) {
            robot.step(a);
            since_fix += 1;
            if since_fix >= cfg.fix_every {
                robot.fix();
                since_fix = 0;
            }
            if robot.est.distance(&goal_pose) <= arrive || robot.steps >= budget {
                break;
            }
        }

        if robot.steps - progress_mark.0 >= cfg.stuck_window {
            if progress_mark.1.distance(&robot.truth) < cfg.stuck_progress {
                return fail(EndReason::Stuck);
            }
            progress_mark = (robot.steps, robot.truth);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub world_seed: u64,
    pub episode_seed: u64,
    pub start: Pose2,
    pub goal: Pose2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Episodes with at least one fallback over episodes run with the
    /// learned planner; zero when none were.
    pub fallback_rate: f64,
    pub fallback_episodes: usize,
    pub learned_episodes: usize,
    pub total_fallbacks: usize,
    pub total_collisions: usize,
    pub total_steps: usize,
    pub collision_rate: f64,
    pub mean_velocity: f64,
    pub reports: Vec<EpisodeReport>,
}

impl SuiteReport {
    pub fn from_reports(reports: Vec<EpisodeReport>) -> Self {
        let n = reports.len();
        let successes = reports.iter().filter(|r| r.success).count();
        let learned_episodes = reports.iter().filter(|r| r.learned).count();
        let fallback_episodes = reports.iter().filter(|r| r.learned && r.fallback_count > 0).count();
        let total_steps: usize = reports.iter().map(|r| r.steps).sum();
        let total_collisions: usize = reports.iter().map(|r| r.collision_count).sum();
        Self {
            episodes: n,
            successes,
            success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            fallback_rate: if learned_episodes == 0 {
                0.0
            } else {
                fallback_episodes as f64 / learned_episodes as f64
            },
            fallback_episodes,
            learned_episodes,
            total_fallbacks: reports.iter().map(|r| r.fallback_count).sum(),
            total_collisions,
            total_steps,
            collision_rate: if total_steps == 0 {
                0.0
            } else {
                total_collisions as f64 / total_steps as f64
            },
            mean_velocity: if n == 0 {
                0.0
            } else {
                reports.iter().map(|r| r.mean_velocity).sum::<f64>() / n as f64
            },
            reports,
        }
    }
}

/// Per-episode seed derived from the master seed.
pub fn episode_seed(master: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(k as u64 + 1);
    rng.random()
}

/// Start and goal nodes for an episode in `world`: both carry landmarks, the
/// start localizes, and the goal is at least `min_distance` away.
pub fn pick_episode(
    world: &World,
    cfg: &EpisodeConfig,
    min_distance: f64,
    rng: &mut impl Rng,
) -> Option<(Pose2, Pose2)> {
    let oracle = GroundTruthOracle {
        radius: cfg.oracle_radius,
    };
    let nodes: Vec<Pose2> = world
        .map
        .nodes()
        .filter(|n| !n.landmark_ids.is_empty())
        .map(|n| n.planar_pose())
        .collect();
    if nodes.len() < 2 {
        return None;
    }
    for _ in 0..200 {
        let s = nodes[rng.random_range(0..nodes.len())];
        let g = nodes[rng.random_range(0..nodes.len())];
        if s.distance(&g) < min_distance {
            continue;
        }
        let (obs, ctx) = world.observe(&s);
        if localize(&obs, &ctx, &world.map, &oracle, &cfg.localization)
            .estimated_pose
            .is_none()
        {
            continue;
        }
        let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        return Some((Pose2::new(s.x, s.y, theta), g));
    }
    None
}

/// Run `n` seeded episodes, each in its own generated world.
pub fn eval_suite(
    master_seed: u64,
    n: usize,
    world_cfg: &WorldConfig,
    cfg: &EpisodeConfig,
    planner: LocalPlanner<'_>,
) -> Result<SuiteReport, SimError> {
    if n == 0 {
        return Err(SimError::Config("episode count must be at least 1".into()));
    }
    let mut reports = Vec::with_capacity(n);
    for k in 0..n {
        let (world, spec) = episode_setup(master_seed, k, world_cfg, cfg)?;
        reports.push(run_episode(
            &world,
            spec.start,
            &EpisodeGoal::Pose(spec.goal),
            planner,
            cfg,
            spec.episode_seed,
        ));
    }
    Ok(SuiteReport::from_reports(reports))
}

/// Run `n` seeded episodes over the given worlds in turn.
pub fn eval_worlds(
    master_seed: u64,
    n: usize,
    worlds: &[World],
    cfg: &EpisodeConfig,
    planner: LocalPlanner<'_>,
) -> Result<SuiteReport, SimError> {
    if n == 0 || worlds.is_empty() {
        return Err(SimError::Config("need at least one episode and one world".into()));
    }
    let mut reports = Vec::with_capacity(n);
    for k in 0..n {
        let world = &worlds[k % worlds.len()];
        let seed = episode_seed(master_seed, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let (start, goal) = pick_episode(world, cfg, 3.0, &mut rng)
            .ok_or_else(|| SimError::Unsatisfiable(format!("no usable episode in world {}", world.seed)))?;
        reports.push(run_episode(world, start, &EpisodeGoal::Pose(goal), planner, cfg, seed));
    }
    Ok(SuiteReport::from_reports(reports))
}

/// World and endpoints of the `k`-th suite episode.
pub fn episode_setup(
    master_seed: u64,
    k: usize,
    world_cfg: &WorldConfig,
    cfg: &EpisodeConfig,
) -> Result<(World, EpisodeSpec), SimError> {
    let seed = episode_seed(master_seed, k);
    for attempt in 0..20u64 {
        let world_seed = seed.wrapping_add(attempt);
        let world = generate_world(world_seed, world_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(world_seed ^ 0x5EED);
        if let Some((start, goal)) = pick_episode(&world, cfg, 3.0, &mut rng) {
            return Ok((
                world,
                EpisodeSpec {
                    world_seed,
                    episode_seed: seed,
                    start,
                    goal,
                },
            ));
        }
    }
    Err(SimError::Unsatisfiable(format!("no usable episode for seed {seed}")))
}

/// A start pose, planning condition context and ego field for open-loop
/// plan evaluation.
#[derive(Debug, Clone)]
pub struct PlanCase {
    pub world: World,
    pub start: Pose2,
    pub subgoal: Pose2,
}

/// `per_world` cases in `world`: a clear start facing along the oracle path
/// to a random node, with the subgoal `lookahead` metres down that path.
pub fn plan_cases(world: &World, per_world: usize, seed: u64, cfg: &DatasetConfig) -> Vec<PlanCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<Pose2> = world.map.nodes().map(|n| n.planar_pose()).collect();
    let mut out = Vec::with_capacity(per_world);
    if nodes.is_empty() {
        return out;
    }
    let mut tries = 0;
    while out.len() < per_world && tries < per_world * 50 {
        tries += 1;
        let Some(start) = random_free_pose(world, cfg.min_start_clearance, &mut rng) else {
            break;
        };
        let goal = nodes[rng.random_range(0..nodes.len())];
        if goal.distance(&start) < 1.0 {
            continue;
        }
        let Ok(path) = oracle_plan(world, &start, &goal) else {
            continue;
        };
        let subgoal = select_subgoal(&densify(&path, 0.1), &start, cfg.lookahead);
        let tangent = (path.poses[1].y - start.y).atan2(path.poses[1].x - start.x);
        out.push(PlanCase {
            world: world.clone(),
            start: Pose2::new(start.x, start.y, tangent),
            subgoal,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEvalReport {
    pub cases: usize,
    pub samples: usize,
    pub collided: usize,
    pub collision_rate: f64,
    pub mean_goal_error: f64,
}

/// Sample local plans for each case and count those whose poses collide in
/// the world.
pub fn plan_eval(
    field: &dyn VectorField,
    cases: &[PlanCase],
    samples_per_case: usize,
    euler_steps: usize,
    perception: &PerceptionConfig,
    seed: u64,
) -> PlanEvalReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut collided = 0;
    let mut samples = 0;
    let mut goal_err = 0.0;
    for case in cases {
        let ego_goal = case.start.between(&case.subgoal);
        let c = condition_at(&case.world, &case.start, ego_goal, perception);
        for _ in 0..samples_per_case {
            let plan = sample(field, &c, euler_steps, &mut rng);
            let poses = PoseTrajectory::new(plan.poses.poses.iter().map(|p| case.start.compose(p)).collect());
            samples += 1;
            if !plan.actions.is_finite() || case.world.checker.collides(&poses, case.world.config.footprint_radius) {
                collided += 1;
            }
            goal_err += plan.poses.last().map_or(0.0, |p| p.distance(&ego_goal));
        }
    }
    PlanEvalReport {
        cases: cases.len(),
        samples,
        collided,
        collision_rate: if samples == 0 {
            0.0
        } else {
            collided as f64 / samples as f64
        },
        mean_goal_error: if samples == 0 { 0.0 } else { goal_err / samples as f64 },
    }
}
