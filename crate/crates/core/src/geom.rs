//! Planar SE(2) pose algebra.
//!
//! Frame convention: x forward, y left, theta counter-clockwise. Every
//! operation returns headings wrapped to `(-pi, pi]`.

use std::f64::consts::PI;
use std::ops::Index;

use serde::{Deserialize, Serialize};

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if !a.is_finite() {
        return a;
    }
    let two_pi = 2.0 * PI;
    let mut w = a - two_pi * ((a + PI) / two_pi).floor();
    // floor() puts us in [-pi, pi); fold the lower end over and absorb
    // rounding that lands just outside the interval.
    if w <= -PI {
        w += two_pi;
    }
    if w > PI {
        w -= two_pi;
    }
    w
}

/// Smallest absolute difference between two headings, in `[0, pi]`.
pub fn angle_diff_abs(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// A planar pose. Serialized as `[x, y, theta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl From<[f64; 3]> for Pose2 {
    fn from(v: [f64; 3]) -> Self {
        Pose2::new(v[0], v[1], v[2])
    }
}

impl From<Pose2> for [f64; 3] {
    fn from(p: Pose2) -> Self {
        [p.x, p.y, p.theta]
    }
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    /// `self ⊕ other`: `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)
    }

    /// The pose of `other` relative to `self`, i.e. `self⁻¹ ⊕ other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2::new(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)
    }

    /// Apply a relative action in this pose's frame.
    pub fn apply(&self, a: &Action) -> Pose2 {
        self.compose(&Pose2 {
            x: a.dx,
            y: a.dy,
            theta: a.dtheta,
        })
    }

    /// Map a point given in this pose's frame to the parent frame.
    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn distance(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn translation_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// `a ⊕ b`.
pub fn compose_se2(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

/// One relative increment between adjacent poses. Serialized as
/// `[dx, dy, dtheta]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl Action {
    pub const fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        Self { dx, dy, dtheta }
    }

    pub fn step_length(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

impl From<[f64; 3]> for Action {
    fn from(v: [f64; 3]) -> Self {
        Action::new(v[0], v[1], v[2])
    }
}

impl From<Action> for [f64; 3] {
    fn from(a: Action) -> Self {
        [a.dx, a.dy, a.dtheta]
    }
}

/// Ordered relative increments `<(dx, dy, dtheta), ...>`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionTrajectory {
    pub steps: Vec<Action>,
}

impl ActionTrajectory {
    pub fn new(steps: Vec<Action>) -> Self {
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Row-major `[dx0, dy0, dth0, dx1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|a| [a.dx, a.dy, a.dtheta]).collect()
    }

    /// Inverse of [`flatten`](Self::flatten). Trailing values that do not
    /// fill a whole step are ignored.
    pub fn from_flat(v: &[f64]) -> Self {
        Self {
            steps: v.chunks_exact(3).map(|c| Action::new(c[0], c[1], c[2])).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.steps
            .iter()
            .all(|a| a.dx.is_finite() && a.dy.is_finite() && a.dtheta.is_finite())
    }
}

/// World-frame poses; `poses[0]` is the start pose.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseTrajectory {
    pub poses: Vec<Pose2>,
}

impl PoseTrajectory {
    pub fn new(poses: Vec<Pose2>) -> Self {
        Self { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn first(&self) -> Option<&Pose2> {
        self.poses.first()
    }

    pub fn last(&self) -> Option<&Pose2> {
        self.poses.last()
    }

    /// Sum of planar distances between consecutive poses.
    pub fn path_length(&self) -> f64 {
        self.poses.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }
}

impl Index<usize> for PoseTrajectory {
    type Output = Pose2;

    fn index(&self, i: usize) -> &Pose2 {
        &self.poses[i]
    }
}

/// Roll the pose recurrence forward: `poses[k] = poses[k-1] ⊕ steps[k]`.
pub fn actions_to_poses(traj: &ActionTrajectory, start: Pose2) -> PoseTrajectory {
    let mut poses = Vec::with_capacity(traj.len() + 1);
    poses.push(start);
    let mut cur = start;
    for a in &traj.steps {
        cur = cur.apply(a);
        poses.push(cur);
    }
    PoseTrajectory { poses }
}

/// Relative increments between consecutive poses. A trajectory with zero or
/// one pose yields no actions.
pub fn poses_to_actions(poses: &PoseTrajectory) -> ActionTrajectory {
    let steps = poses
        .poses
        .windows(2)
        .map(|w| {
            let d = w[0].between(&w[1]);
            Action::new(d.x, d.y, d.theta)
        })
        .collect();
    ActionTrajectory { steps }
}
