//! Expert planner: clearance-weighted grid A* with shortcut smoothing, plus
//! path utilities used by the navigation loop.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{SimError, World};
use crate::geom::{wrap_angle, Pose2, PoseTrajectory};

/// Clearance below which A* moves are penalised.
pub const COMFORT_CLEARANCE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Open {
    f: f64,
    node: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

fn comfort_weight(clearance: f64) -> f64 {
    1.0 + 2.0 * (COMFORT_CLEARANCE - clearance).max(0.0) / COMFORT_CLEARANCE
}

/// Smallest clearance sampled along a segment.
fn segment_clearance(world: &World, a: [f64; 2], b: [f64; 2]) -> f64 {
    let n = ((dist(a, b) / (0.25 * world.config.resolution)).ceil() as usize).max(1);
    (0..=n)
        .map(|k| {
            let t = k as f64 / n as f64;
            world
                .checker
                .clearance(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Collision-free path from `start` to `goal` for a disc of the world's
/// footprint radius. Vertices are headed along their outgoing segment; the
/// first keeps the start heading and the last the goal heading.
pub fn oracle_plan(world: &World, start: &Pose2, goal: &Pose2) -> Result<PoseTrajectory, SimError> {
    let r = world.config.footprint_radius;
    let s = [start.x, start.y];
    let g = [goal.x, goal.y];
    if world.checker.point_collides(s[0], s[1], r) {
        return Err(SimError::Blocked(format!(
            "start ({:.3}, {:.3}) is not free",
            s[0], s[1]
        )));
    }
    if world.checker.point_collides(g[0], g[1], r) {
        return Err(SimError::Blocked(format!(
            "goal ({:.3}, {:.3}) is not free",
            g[0], g[1]
        )));
    }
    if dist(s, g) < 1e-9 {
        return Ok(PoseTrajectory::new(vec![*start]));
    }
    let points = if world.segment_clear(s, g, r) {
        vec![s, g]
    } else {
        let raw = astar(world, s, g)?;
        smooth(world, &raw)
    };
    Ok(headed(&points, start.theta, goal.theta))
}

fn headed(points: &[[f64; 2]], first: f64, last: f64) -> PoseTrajectory {
    let n = points.len();
    let poses = (0..n)
        .map(|k| {
            let theta = if k == 0 {
                first
            } else if k == n - 1 {
                last
            } else {
                let (a, b) = (points[k], points[k + 1]);
                (b[1] - a[1]).atan2(b[0] - a[0])
            };
            Pose2::new(points[k][0], points[k][1], theta)
        })
        .collect();
    PoseTrajectory::new(poses)
}

fn astar(world: &World, s: [f64; 2], g: [f64; 2]) -> Result<Vec<[f64; 2]>, SimError> {
    let geo = world.geometry();
    let (w, h) = (geo.width, geo.height);
    let r = world.config.footprint_radius;
    let cells = w * h;
    let (start_id, goal_id) = (cells, cells + 1);
    let pos = |id: usize| -> [f64; 2] {
        if id == start_id {
            s
        } else if id == goal_id {
            g
        } else {
            geo.cell_center(id % w, id / w)
        }
    };
    let free: Vec<bool> = (0..cells)
        .map(|id| {
            let c = pos(id);
            !world.checker.point_collides(c[0], c[1], r)
        })
        .collect();
    // Cells within two cells of a free endpoint, reachable by a clear segment.
    let attach = |p: [f64; 2]| -> Vec<usize> {
        let Some((ci, cj)) = geo.cell_of(p[0], p[1]) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for dj in -2i64..=2 {
            for di in -2i64..=2 {
                let (i, j) = (ci as i64 + di, cj as i64 + dj);
                if i < 0 || j < 0 || i >= w as i64 || j >= h as i64 {
                    continue;
                }
                let id = j as usize * w + i as usize;
                if free[id] && world.segment_clear(p, pos(id), r) {
                    out.push(id);
                }
            }
        }
        out
    };
    let from_start = attach(s);
    let into_goal = attach(g);
    if from_start.is_empty() || into_goal.is_empty() {
        return Err(SimError::Unreachable("endpoint cannot reach the lattice".into()));
    }
    let mut goal_link = vec![false; cells];
    for id in &into_goal {
        goal_link[*id] = true;
    }
    let n = cells + 2;
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    best[start_id] = 0.0;
    heap.push(Open {
        f: dist(s, g),
        node: start_id,
    });
    while let Some(Open { node, .. }) = heap.pop() {
        if closed[node] {
            continue;
        }
        closed[node] = true;
        if node == goal_id {
            let mut out = vec![g];
            let mut cur = parent[goal_id];
            while cur != start_id {
                out.push(pos(cur));
                cur = parent[cur];
            }
            out.push(s);
            out.reverse();
            return Ok(out);
        }
        let here = pos(node);
        let mut relax = |next: usize, heap: &mut BinaryHeap<Open>| {
            if closed[next] {
                return;
            }
            let there = pos(next);
            let cost = dist(here, there) * comfort_weight(world.checker.clearance(there[0], there[1]));
            let cand = best[node] + cost;
            if cand < best[next] {
                best[next] = cand;
                parent[next] = node;
                heap.push(Open {
                    f: cand + dist(there, g),
                    node: next,
                });
            }
        };
        if node == start_id {
            for id in &from_start {
                relax(*id, &mut heap);
            }
            continue;
        }
        let (i, j) = ((node % w) as i64, (node / w) as i64);
        for dj in -1i64..=1 {
            for di in -1i64..=1 {
                if di == 0 && dj == 0 {
                    continue;
                }
                let (ni, nj) = (i + di, j + dj);
                if ni < 0 || nj < 0 || ni >= w as i64 || nj >= h as i64 {
                    continue;
                }
                let id = nj as usize * w + ni as usize;
                if free[id] && !closed[id] && world.segment_clear(here, pos(id), r) {
                    relax(id, &mut heap);
                }
            }
        }
        if goal_link[node] {
            relax(goal_id, &mut heap);
        }
    }
    Err(SimError::Unreachable(format!(
        "no path from ({:.2}, {:.2}) to ({:.2}, {:.2})",
        s[0], s[1], g[0], g[1]
    )))
}

/// Greedy shortcutting: from each kept vertex jump to the farthest later
/// vertex whose straight segment is clear and keeps at least the clearance
/// the original sub-path had (capped at the comfort clearance).
fn smooth(world: &World, pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let r = world.config.footprint_radius;
    let vertex_clear: Vec<f64> = pts.iter().map(|p| world.checker.clearance(p[0], p[1])).collect();
    let mut out = vec![pts[0]];
    let mut i = 0;
    while i < pts.len() - 1 {
        let mut next = i + 1;
        for j in (i + 2..pts.len()).rev() {
            let floor = vertex_clear[i..=j].iter().copied().fold(COMFORT_CLEARANCE, f64::min);
            if world.segment_clear(pts[i], pts[j], r) && segment_clearance(world, pts[i], pts[j]) >= floor - 1e-9 {
                next = j;
                break;
            }
        }
        out.push(pts[next]);
        i = next;
    }
    out
}

/// Insert interpolated poses so no segment exceeds `spacing`. Inserted poses
/// face along their segment.
pub fn densify(path: &PoseTrajectory, spacing: f64) -> PoseTrajectory {
    let spacing = spacing.max(1e-6);
    let mut out = Vec::new();
    for w in path.poses.windows(2) {
        let (a, b) = (w[0], w[1]);
        out.push(a);
        let d = a.distance(&b);
        let n = (d / spacing).ceil() as usize;
        let heading = (b.y - a.y).atan2(b.x - a.x);
        for k in 1..n {
            let t = k as f64 / n as f64;
            out.push(Pose2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), heading));
        }
    }
    if let Some(last) = path.poses.last() {
        out.push(*last);
    }
    PoseTrajectory::new(out)
}

/// `n + 1` poses equally spaced in arc length, facing along the path. The
/// first pose keeps the path's first heading.
pub fn resample_path(path: &PoseTrajectory, n: usize) -> PoseTrajectory {
    let p = &path.poses;
    if p.is_empty() {
        return PoseTrajectory::new(Vec::new());
    }
    let mut cum = vec![0.0];
    for w in p.windows(2) {
        cum.push(cum.last().unwrap() + w[0].distance(&w[1]));
    }
    let total = *cum.last().unwrap();
    let n = n.max(1);
    let mut pts = Vec::with_capacity(n + 1);
    let mut seg = 0;
    for k in 0..=n {
        let s = total * k as f64 / n as f64;
        while seg + 1 < p.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        if p.len() == 1 {
            pts.push([p[0].x, p[0].y]);
            continue;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 {
            ((s - cum[seg]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (a, b) = (p[seg], p[seg + 1]);
        pts.push([a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)]);
    }
    let mut poses = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let theta = if k == 0 {
            p[0].theta
        } else {
            let (a, b) = (pts[k - 1], pts[k]);
            if dist(a, b) > 1e-12 {
                (b[1] - a[1]).atan2(b[0] - a[0])
            } else {
                poses.last().map(|q: &Pose2| q.theta).unwrap_or(p[0].theta)
            }
        };
        poses.push(Pose2::new(pts[k][0], pts[k][1], wrap_angle(theta)));
    }
    PoseTrajectory::new(poses)
}

/// Arc length of the point on the polyline nearest to `(x, y)`; the first
/// minimum wins.
pub fn project_on_path(path: &PoseTrajectory, x: f64, y: f64) -> f64 {
    let p = &path.poses;
    let mut best = (f64::INFINITY, 0.0);
    let mut arc = 0.0;
    if p.len() == 1 {
        return 0.0;
    }
    for w in p.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((x - a.x) * dx + (y - a.y) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d = (a.x + t * dx - x).hypot(a.y + t * dy - y);
        if d < best.0 - 1e-12 {
            best = (d, arc + t * len2.sqrt());
        }
        arc += len2.sqrt();
    }
    best.1
}

/// First path pose at least `lookahead` metres of arc beyond the projection
/// of `current`; the final pose when the path ends sooner.
pub fn select_subgoal(path: &PoseTrajectory, current: &Pose2, lookahead: f64) -> Pose2 {
    let p = &path.poses;
    assert!(!p.is_empty(), "select_subgoal needs a nonempty path");
    let target = project_on_path(path, current.x, current.y) + lookahead;
    let mut arc = 0.0;
    for k in 0..p.len() {
        if k > 0 {
            arc += p[k - 1].distance(&p[k]);
        }
        if arc >= target - 1e-9 {
            return p[k];
        }
    }
    *p.last().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_world, WorldConfig};
    use std::f64::consts::PI;

    fn empty_world() -> World {
        generate_world(
            0,
            &WorldConfig {
                obstacle_density: 0.0,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn line(len: f64, step: f64) -> PoseTrajectory {
        let n = (len / step).round() as usize;
        PoseTrajectory::new((0..=n).map(|k| Pose2::new(k as f64 * step, 0.0, 0.0)).collect())
    }

    #[test]
    fn straight_on_empty_grid() {
        let w = empty_world();
        let a = Pose2::new(1.0, 1.0, 0.3);
        let b = Pose2::new(11.0, 9.0, 0.0);
        let p = oracle_plan(&w, &a, &b).unwrap();
        let euclid = a.distance(&b);
        assert!(p.path_length() <= 1.05 * euclid);
        assert!((p.poses[0].theta - 0.3).abs() < 1e-12);
    }

    #[test]
    fn start_equals_goal() {
        let w = empty_world();
        let a = Pose2::new(3.0, 3.0, 0.0);
        assert_eq!(oracle_plan(&w, &a, &a).unwrap().len(), 1);
    }

    #[test]
    fn walled_off_goal() {
        let mut w = empty_world();
        let mut occ = w.occ.clone();
        // Box of walls around cells 30..=40.
        for k in 28..=42 {
            occ.set(k, 28, true);
            occ.set(k, 42, true);
            occ.set(28, k, true);
            occ.set(42, k, true);
        }
        let grid = crate::esdf::OccupancyGrid::from(occ);
        w = World::assemble(0, w.config.clone(), grid, w.map.clone(), w.landmark_positions.clone());
        let inside = Pose2::new(7.0, 7.0, 0.0);
        let err = oracle_plan(&w, &Pose2::new(1.0, 1.0, 0.0), &inside).unwrap_err();
        assert!(matches!(err, SimError::Unreachable(_)));
        let blocked = oracle_plan(&w, &Pose2::new(1.0, 1.0, 0.0), &Pose2::new(5.7, 7.0, 0.0)).unwrap_err();
        assert!(matches!(blocked, SimError::Blocked(_)));
    }

    #[test]
    fn plans_are_collision_free() {
        for seed in 0..6 {
            let w = generate_world(seed, &WorldConfig::default()).unwrap();
            let nodes: Vec<Pose2> = w.map.nodes().map(|n| n.planar_pose()).collect();
            for k in 0..10 {
                let a = nodes[(k * 37) % nodes.len()];
                let b = nodes[(k * 53 + 11) % nodes.len()];
                let p = oracle_plan(&w, &a, &b).unwrap();
                let dense = densify(&p, 0.05);
                assert!(
                    !w.checker.collides(&dense, w.config.footprint_radius),
                    "seed {seed} k {k}"
                );
                assert!(p.path_length() >= a.distance(&b) - 1e-9);
            }
        }
    }

    #[test]
    fn subgoal_walks_arc_length() {
        let path = line(10.0, 0.25);
        let g = select_subgoal(&path, &Pose2::new(0.0, 0.0, 0.0), 2.0);
        assert!((g.x - 2.0).abs() < 1e-12);
        let g = select_subgoal(&path, &Pose2::new(9.0, 0.3, 0.0), 2.0);
        assert_eq!(g, *path.last().unwrap());
        let g = select_subgoal(&path, &Pose2::new(10.0, 0.0, PI), 2.0);
        assert_eq!(g, *path.last().unwrap());
    }

    #[test]
    fn resample_is_uniform() {
        let path = PoseTrajectory::new(vec![
            Pose2::new(0.0, 0.0, 0.4),
            Pose2::new(1.0, 0.0, 0.0),
            Pose2::new(1.0, 1.0, 0.0),
        ]);
        let r = resample_path(&path, 8);
        assert_eq!(r.len(), 9);
        for w in r.poses.windows(2) {
            assert!((w[0].distance(&w[1]) - 0.25).abs() < 1e-12);
        }
        assert_eq!(r.poses[0].theta, 0.4);
        assert!((r.poses[8].theta - PI / 2.0).abs() < 1e-12);
        let d = densify(&path, 0.3);
        assert_eq!(d.len(), 9);
        assert!((d.path_length() - 2.0).abs() < 1e-12);
    }
}
