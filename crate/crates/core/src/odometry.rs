//! Grid correlation matching, multi-sensor increment fusion, dead reckoning
//! and trajectory error metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::esdf::{BinaryMap2D, Grid2};
use crate::geom::{wrap_angle, Action, ActionTrajectory, Pose2, PoseTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdometryError {
    #[error("grid geometry mismatch")]
    GeometryMismatch,
    #[error("window must be odd and fit the grid, got {0}")]
    BadWindow(usize),
    #[error("angle set must be non-empty")]
    EmptyAngleSet,
    #[error("no {0} source available")]
    NoSource(&'static str),
    #[error("invalid increment: {0}")]
    InvalidIncrement(String),
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("trajectories need at least two poses")]
    TooShort,
    #[error("ground-truth path has zero length")]
    ZeroLengthPath,
}

/// Real-valued raster for matching.
pub type RealGrid = Grid2<f64>;

pub fn to_real(map: &BinaryMap2D) -> RealGrid {
    RealGrid {
        geometry: map.geometry,
        values: map.values.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationVolume {
    pub window: usize,
    /// Row-major `window × window`; entry `(r, c)` is the shift
    /// `(c - half, r - half)` in cells.
    pub scores: Vec<f64>,
    pub resolution: f64,
}

impl CorrelationVolume {
    pub fn half(&self) -> i64 {
        (self.window / 2) as i64
    }

    pub fn score(&self, sx: i64, sy: i64) -> f64 {
        let h = self.half();
        self.scores[((sy + h) as usize) * self.window + (sx + h) as usize]
    }

    /// Best shift in cells. Scores within `1e-12` of the maximum count as
    /// ties and go to the shift nearest the centre, then the smallest
    /// `(sy, sx)`.
    pub fn argmax(&self) -> (i64, i64, f64) {
        let best = self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let h = self.half();
        let mut pick = (0i64, 0i64);
        let mut pick_norm = i64::MAX;
        for sy in -h..=h {
            for sx in -h..=h {
                if best - self.score(sx, sy) <= 1e-12 {
                    let n = sx * sx + sy * sy;
                    if n < pick_norm {
                        pick = (sx, sy);
                        pick_norm = n;
                    }
                }
            }
        }
        (pick.0, pick.1, best)
    }
}

/// Normalized cross-correlation of `curr(x, y)` against `prev(x - sx, y - sy)`
/// over the cells where both exist (and `valid` is set, if given). Zero when
/// either side has no variance.
fn ncc(prev: &RealGrid, curr: &RealGrid, valid: Option<&[bool]>, sx: i64, sy: i64) -> f64 {
    let (w, h) = (prev.width() as i64, prev.height() as i64);
    let (mut n, mut sa, mut sb) = (0.0, 0.0, 0.0);
    let x0 = sx.max(0);
    let x1 = (w + sx).min(w);
    let y0 = sy.max(0);
    let y1 = (h + sy).min(h);
    let visit = |f: &mut dyn FnMut(f64, f64)| {
        for y in y0..y1 {
            for x in x0..x1 {
                let ci = (y * w + x) as usize;
                if valid.is_some_and(|v| !v[ci]) {
                    continue;
                }
                let pi = ((y - sy) * w + (x - sx)) as usize;
                f(curr.values[ci], prev.values[pi]);
            }
        }
    };
    visit(&mut |a, b| {
        n += 1.0;
        sa += a;
        sb += b;
    });
    if n == 0.0 {
        return 0.0;
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    visit(&mut |a, b| {
        ab += (a - ma) * (b - mb);
        aa += (a - ma) * (a - ma);
        bb += (b - mb) * (b - mb);
    });
    if aa <= 1e-12 || bb <= 1e-12 {
        return 0.0;
    }
    ab / (aa * bb).sqrt()
}

fn check_pair(prev: &RealGrid, curr: &RealGrid, window: usize) -> Result<(), OdometryError> {
    if prev.geometry != curr.geometry {
        return Err(OdometryError::GeometryMismatch);
    }
    if window.is_multiple_of(2) || window > prev.width().min(prev.height()) {
        return Err(OdometryError::BadWindow(window));
    }
    Ok(())
}

fn volume_masked(prev: &RealGrid, curr: &RealGrid, valid: Option<&[bool]>, window: usize) -> CorrelationVolume {
    let h = (window / 2) as i64;
    let mut scores = Vec::with_capacity(window * window);
    for sy in -h..=h {
        for sx in -h..=h {
            scores.push(ncc(prev, curr, valid, sx, sy));
        }
    }
    CorrelationVolume {
        window,
        scores,
        resolution: prev.geometry.resolution,
    }
}

pub fn correlation_volume(prev: &RealGrid, curr: &RealGrid, window: usize) -> Result<CorrelationVolume, OdometryError> {
    check_pair(prev, curr, window)?;
    Ok(volume_masked(prev, curr, None, window))
}

/// Resample `grid` rotated by `angle` about its centre: the output at `p`
/// reads the input at `R(angle)(p - c) + c`. Cells that fall outside are
/// flagged invalid.
pub fn rotate_grid(grid: &RealGrid, angle: f64) -> (RealGrid, Vec<bool>) {
    let (w, h) = (grid.width(), grid.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let mut out = RealGrid::filled(grid.geometry, 0.0);
    let mut valid = vec![false; w * h];
    for j in 0..h {
        for i in 0..w {
            let (px, py) = (i as f64 - cx, j as f64 - cy);
            let qx = c * px - s * py + cx;
            let qy = s * px + c * py + cy;
            let eps = 1e-9;
            if qx < -eps || qy < -eps || qx > (w - 1) as f64 + eps || qy > (h - 1) as f64 + eps {
                continue;
            }
            let qx = qx.clamp(0.0, (w - 1) as f64);
            let qy = qy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (
                (qx.floor() as usize).min(w.saturating_sub(2)),
                (qy.floor() as usize).min(h.saturating_sub(2)),
            );
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (qx - x0 as f64, qy - y0 as f64);
            let v = grid.get(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + grid.get(x1, y0) * fx * (1.0 - fy)
                + grid.get(x0, y1) * (1.0 - fx) * fy
                + grid.get(x1, y1) * fx * fy;
            out.set(i, j, v);
            valid[j * w + i] = true;
        }
    }
    (out, valid)
}

/// Default rotation sweep: `-0.2..=0.2` in steps of `0.05` rad.
pub fn default_angle_set() -> Vec<f64> {
    (-4..=4).map(|k| k as f64 * 0.05).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMatch {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    pub score: f64,
}

/// Estimate the motion taking `prev` to `curr`: for each trial angle undo the
/// rotation on `curr`, correlate, and keep the global best. Ties go to the
/// smallest `|angle|`, then the shift nearest the centre.
pub fn grid_match(prev: &RealGrid, curr: &RealGrid, window: usize, angles: &[f64]) -> Result<GridMatch, OdometryError> {
    check_pair(prev, curr, window)?;
    if angles.is_empty() {
        return Err(OdometryError::EmptyAngleSet);
    }
    let mut order: Vec<f64> = angles.to_vec();
    order.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    let mut best: Option<GridMatch> = None;
    for a in order {
        let vol = if a == 0.0 {
            volume_masked(prev, curr, None, window)
        } else {
            let (rot, valid) = rotate_grid(curr, a);
            volume_masked(prev, &rot, Some(&valid), window)
        };
        let (sx, sy, score) = vol.argmax();
        if best.is_none_or(|b| score > b.score + 1e-12) {
            best = Some(GridMatch {
                dx: sx as f64 * vol.resolution,
                dy: sy as f64 * vol.resolution,
                dtheta: a,
                score,
            });
        }
    }
    Ok(best.expect("non-empty angle set"))
}

/// One inter-frame measurement bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorIncrement {
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wheel: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imu_dtheta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision: Option<Action>,
}

impl SensorIncrement {
    pub fn wheel_only(dt: f64, wheel: Action) -> Self {
        Self {
            dt,
            wheel: Some(wheel),
            imu_dtheta: None,
            vision: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionWeights {
    pub trans_wheel: f64,
    pub trans_vision: f64,
    pub rot_imu: f64,
    pub rot_wheel: f64,
    pub rot_vision: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            trans_wheel: 0.5,
            trans_vision: 0.5,
            rot_imu: 0.6,
            rot_wheel: 0.2,
            rot_vision: 0.2,
        }
    }
}

impl FusionWeights {
    pub fn wheel_only() -> Self {
        Self {
            trans_wheel: 1.0,
            trans_vision: 0.0,
            rot_imu: 0.0,
            rot_wheel: 1.0,
            rot_vision: 0.0,
        }
    }

    pub fn vision_only() -> Self {
        Self {
            trans_wheel: 0.0,
            trans_vision: 1.0,
            rot_imu: 0.0,
            rot_wheel: 0.0,
            rot_vision: 1.0,
        }
    }
}

pub fn fuse_increment(inc: &SensorIncrement, w: &FusionWeights) -> Result<Action, OdometryError> {
    if !(inc.dt > 0.0) {
        return Err(OdometryError::InvalidIncrement(format!(
            "dt must be positive, got {}",
            inc.dt
        )));
    }
    let ws = [w.trans_wheel, w.trans_vision, w.rot_imu, w.rot_wheel, w.rot_vision];
    if ws.iter().any(|v| !(*v >= 0.0)) {
        return Err(OdometryError::InvalidIncrement("weights must be non-negative".into()));
    }
    let mut tw = 0.0;
    let (mut tx, mut ty) = (0.0, 0.0);
    for (src, wt) in [(inc.wheel, w.trans_wheel), (inc.vision, w.trans_vision)] {
        if src.is_some() && wt > 0.0 {
            tw += wt;
        }
    }
    if tw == 0.0 {
        return Err(OdometryError::NoSource("translation"));
    }
    for (src, wt) in [(inc.wheel, w.trans_wheel), (inc.vision, w.trans_vision)] {
        if let Some(a) = src {
            if wt > 0.0 {
                tx += wt / tw * a.dx;
                ty += wt / tw * a.dy;
            }
        }
    }
    let mut rw = 0.0;
    let mut rt = Vec::with_capacity(3);
    for (src, wt) in [
        (inc.imu_dtheta, w.rot_imu),
        (inc.wheel.map(|a| a.dtheta), w.rot_wheel),
        (inc.vision.map(|a| a.dtheta), w.rot_vision),
    ] {
        if let Some(v) = src {
            if wt > 0.0 {
                rw += wt;
                rt.push((wt, v));
            }
        }
    }
    if rw == 0.0 {
        return Err(OdometryError::NoSource("rotation"));
    }
    let dtheta = rt.iter().map(|(wt, v)| wt / rw * v).sum();
    Ok(Action::new(tx, ty, dtheta))
}

pub fn dead_reckon(incs: &[SensorIncrement], start: Pose2, w: &FusionWeights) -> Result<PoseTrajectory, OdometryError> {
    let steps = incs
        .iter()
        .map(|i| fuse_increment(i, w))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(crate::geom::actions_to_poses(&ActionTrajectory::new(steps), start))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdomMetrics {
    pub rte_percent: f64,
    pub rre_deg_per_10m: f64,
    pub ate_m: f64,
}

pub const SEGMENT_LENGTH: f64 = 10.0;

/// Segment index pairs `(i, j)`: for each start `i`, the first `j` whose
/// ground-truth arc length from `i` reaches the segment length. Falls back
/// to the whole path when it is shorter than one segment.
fn segments(gt: &PoseTrajectory) -> Vec<(usize, usize, f64)> {
    let n = gt.len();
    let mut cum = vec![0.0; n];
    for k in 1..n {
        cum[k] = cum[k - 1] + gt[k - 1].distance(&gt[k]);
    }
    let mut out = Vec::new();
    let mut j = 0;
    for i in 0..n {
        j = j.max(i + 1);
        while j < n && cum[j] - cum[i] < SEGMENT_LENGTH {
            j += 1;
        }
        if j >= n {
            break;
        }
        out.push((i, j, cum[j] - cum[i]));
    }
    if out.is_empty() {
        out.push((0, n - 1, cum[n - 1]));
    }
    out
}

pub fn metrics(est: &PoseTrajectory, gt: &PoseTrajectory) -> Result<OdomMetrics, OdometryError> {
    if est.len() != gt.len() {
        return Err(OdometryError::LengthMismatch(est.len(), gt.len()));
    }
    if gt.len() < 2 {
        return Err(OdometryError::TooShort);
    }
    if !(gt.path_length() > 0.0) {
        return Err(OdometryError::ZeroLengthPath);
    }
    let n = gt.len() as f64;
    let ate = (est
        .poses
        .iter()
        .zip(&gt.poses)
        .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let segs = segments(gt);
    let (mut rte, mut rre) = (0.0, 0.0);
    let mut used = 0.0;
    for (i, j, len) in segs {
        if len <= 0.0 {
            continue;
        }
        let rg = gt[i].between(&gt[j]);
        let re = est[i].between(&est[j]);
        let err = rg.between(&re);
        rte += err.translation_norm() / len * 100.0;
        rre += wrap_angle(re.theta - rg.theta).abs().to_degrees() / len * SEGMENT_LENGTH;
        used += 1.0;
    }
    Ok(OdomMetrics {
        rte_percent: rte / used,
        rre_deg_per_10m: rre / used,
        ate_m: ate,
    })
}

/// Per-source noise levels for synthetic runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Translation noise as a fraction of step length.
    pub wheel_trans_frac: f64,
    pub wheel_rot_sigma: f64,
    pub imu_sigma: f64,
    pub vision_trans_sigma: f64,
    pub vision_rot_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            wheel_trans_frac: 0.02,
            wheel_rot_sigma: 0.01,
            imu_sigma: 0.005,
            vision_trans_sigma: 0.002,
            vision_rot_sigma: 0.01,
        }
    }
}

impl NoiseModel {
    /// Corrupt one true increment.
    pub fn corrupt(&self, truth: Action, dt: f64, rng: &mut impl rand::Rng) -> SensorIncrement {
        let g = |s: f64, rng: &mut dyn rand::RngCore| {
            if s > 0.0 {
                Normal::new(0.0, s).expect("finite sigma").sample(rng)
            } else {
                0.0
            }
        };
        let len = truth.step_length();
        let ts = self.wheel_trans_frac * len;
        let wheel = Action::new(
            truth.dx + g(ts, rng),
            truth.dy + g(ts, rng),
            truth.dtheta + g(self.wheel_rot_sigma, rng),
        );
        let imu = truth.dtheta + g(self.imu_sigma, rng);
        let vision = Action::new(
            truth.dx + g(self.vision_trans_sigma, rng),
            truth.dy + g(self.vision_trans_sigma, rng),
            truth.dtheta + g(self.vision_rot_sigma, rng),
        );
        SensorIncrement {
            dt,
            wheel: Some(wheel),
            imu_dtheta: Some(imu),
            vision: Some(vision),
        }
    }
}

/// A seeded synthetic drive: smoothly varying curvature at constant speed
/// with every source corrupted by independent zero-mean noise.
pub fn synthetic_run(
    seed: u64,
    n_steps: usize,
    step: f64,
    noise: &NoiseModel,
) -> (PoseTrajectory, Vec<SensorIncrement>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turn = Normal::new(0.0, 0.02).expect("finite sigma");
    let mut kappa: f64 = 0.0;
    let mut truth = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        kappa = (0.95 * kappa + turn.sample(&mut rng)).clamp(-0.3, 0.3);
        truth.push(Action::new(step, 0.0, kappa * step));
    }
    let gt = crate::geom::actions_to_poses(&ActionTrajectory::new(truth.clone()), Pose2::identity());
    let incs = truth.iter().map(|a| noise.corrupt(*a, 0.1, &mut rng)).collect();
    (gt, incs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceComparison {
    pub fused_ate: f64,
    pub wheel_ate: f64,
    pub vision_ate: f64,
}

impl SourceComparison {
    pub fn fused_wins(&self) -> bool {
        self.fused_ate <= self.wheel_ate && self.fused_ate <= self.vision_ate
    }
}

/// Mean ATE over `drives` synthetic runs for fused, wheel-only and
/// vision-only dead reckoning.
pub fn compare_sources(
    seed: u64,
    drives: usize,
    n_steps: usize,
    noise: &NoiseModel,
) -> Result<SourceComparison, OdometryError> {
    let mut acc = [0.0; 3];
    let weights = [
        FusionWeights::default(),
        FusionWeights::wheel_only(),
        FusionWeights::vision_only(),
    ];
    for d in 0..drives {
        let (gt, incs) = synthetic_run(seed.wrapping_mul(1000).wrapping_add(d as u64), n_steps, 0.1, noise);
        for (a, w) in acc.iter_mut().zip(&weights) {
            *a += metrics(&dead_reckon(&incs, Pose2::identity(), w)?, &gt)?.ate_m;
        }
    }
    let n = drives.max(1) as f64;
    Ok(SourceComparison {
        fused_ate: acc[0] / n,
        wheel_ate: acc[1] / n,
        vision_ate: acc[2] / n,
    })
}

/// Parse increments from JSON lines; blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<SensorIncrement>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esdf::GridGeometry;

    fn random_grid(seed: u64, w: usize, h: usize) -> RealGrid {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GridGeometry::new(w, h, 0.2, [0.0, 0.0]).unwrap();
        RealGrid::from_values(g, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn shifted(grid: &RealGrid, sx: i64, sy: i64, fill_seed: u64) -> RealGrid {
        let fill = random_grid(fill_seed, grid.width(), grid.height());
        let mut out = fill.clone();
        let (w, h) = (grid.width() as i64, grid.height() as i64);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x - sx, y - sy);
                if px >= 0 && py >= 0 && px < w && py < h {
                    out.set(x as usize, y as usize, grid.get(px as usize, py as usize));
                }
            }
        }
        out
    }

    #[test]
    fn volume_cases() {
        let g = random_grid(1, 20, 16);
        let v = correlation_volume(&g, &g, 7).unwrap();
        assert_eq!(v.argmax().0, 0);
        assert_eq!(v.argmax().1, 0);
        let s = shifted(&g, 1, 0, 2);
        let v = correlation_volume(&g, &s, 7).unwrap();
        assert_eq!((v.argmax().0, v.argmax().1), (1, 0));
        let flat = RealGrid::filled(g.geometry, 0.3);
        let v = correlation_volume(&flat, &flat, 7).unwrap();
        assert!(v.scores.iter().all(|s| *s == v.scores[0]));
        assert_eq!((v.argmax().0, v.argmax().1), (0, 0));
        assert_eq!(correlation_volume(&g, &g, 6), Err(OdometryError::BadWindow(6)));
        let other = random_grid(1, 21, 16);
        assert_eq!(correlation_volume(&g, &other, 7), Err(OdometryError::GeometryMismatch));
    }

    #[test]
    fn all_window_shifts_recovered() {
        let g = random_grid(7, 24, 24);
        for sy in -3..=3 {
            for sx in -3..=3 {
                let s = shifted(&g, sx, sy, 99);
                let m = grid_match(&g, &s, 7, &[0.0]).unwrap();
                assert_eq!((m.dx, m.dy), (sx as f64 * 0.2, sy as f64 * 0.2));
            }
        }
    }

    fn blobs(w: usize) -> RealGrid {
        let g = GridGeometry::new(w, w, 0.2, [0.0, 0.0]).unwrap();
        let centres = [
            (10.0, 12.0, 3.0),
            (25.0, 8.0, 2.0),
            (18.0, 28.0, 4.0),
            (30.0, 26.0, 2.5),
        ];
        let mut out = RealGrid::filled(g, 0.0);
        for j in 0..w {
            for i in 0..w {
                let v: f64 = centres
                    .iter()
                    .map(|(cx, cy, s)| (-((i as f64 - cx).powi(2) + (j as f64 - cy).powi(2)) / (2.0 * s * s)).exp())
                    .sum();
                out.set(i, j, v);
            }
        }
        out
    }

    #[test]
    fn grid_match_fixtures() {
        let g = random_grid(3, 24, 24);
        let s = shifted(&g, 2, 0, 4);
        let m = grid_match(&g, &s, 7, &default_angle_set()).unwrap();
        assert_eq!((m.dx, m.dy, m.dtheta), (0.4, 0.0, 0.0));
        let m = grid_match(&g, &g, 7, &default_angle_set()).unwrap();
        assert_eq!((m.dx, m.dy, m.dtheta), (0.0, 0.0, 0.0));

        let b = blobs(41);
        let (rot, _) = rotate_grid(&b, -0.1);
        let m = grid_match(&b, &rot, 7, &default_angle_set()).unwrap();
        assert!((m.dtheta - 0.1).abs() < 1e-12, "{m:?}");
        assert_eq!((m.dx, m.dy), (0.0, 0.0));
        assert_eq!(grid_match(&b, &b, 7, &[]), Err(OdometryError::EmptyAngleSet));
    }

    #[test]
    fn fusion_cases() {
        let w = FusionWeights::default();
        let only = SensorIncrement::wheel_only(0.1, Action::new(0.3, 0.01, 0.05));
        assert_eq!(fuse_increment(&only, &w).unwrap(), Action::new(0.3, 0.01, 0.05));
        let eq = FusionWeights {
            rot_imu: 1.0,
            rot_wheel: 1.0,
            ..w
        };
        let inc = SensorIncrement {
            imu_dtheta: Some(0.12),
            ..SensorIncrement::wheel_only(0.1, Action::new(1.0, 0.0, 0.10))
        };
        assert!((fuse_increment(&inc, &eq).unwrap().dtheta - 0.11).abs() < 1e-15);
        let agree = SensorIncrement {
            dt: 0.1,
            wheel: Some(Action::new(0.2, 0.1, 0.3)),
            imu_dtheta: Some(0.3),
            vision: Some(Action::new(0.2, 0.1, 0.3)),
        };
        let f = fuse_increment(&agree, &w).unwrap();
        assert!((f.dx - 0.2).abs() < 1e-15 && (f.dy - 0.1).abs() < 1e-15 && (f.dtheta - 0.3).abs() < 1e-15);
        let none = SensorIncrement {
            dt: 0.1,
            wheel: None,
            imu_dtheta: Some(0.1),
            vision: None,
        };
        assert_eq!(fuse_increment(&none, &w), Err(OdometryError::NoSource("translation")));
        let bad = SensorIncrement { dt: 0.0, ..only };
        assert!(fuse_increment(&bad, &w).is_err());
    }

    #[test]
    fn dead_reckon_cases() {
        let w = FusionWeights::default();
        let s = Pose2::new(1.0, 2.0, 0.3);
        assert_eq!(dead_reckon(&[], s, &w).unwrap().poses, vec![s]);
        let incs = vec![SensorIncrement::wheel_only(0.1, Action::new(1.0, 0.0, 0.0)); 3];
        let p = dead_reckon(&incs, Pose2::identity(), &w).unwrap();
        assert_eq!(p.last().unwrap().x, 3.0);
    }

    fn straight(n: usize, step: f64) -> PoseTrajectory {
        PoseTrajectory::new((0..=n).map(|k| Pose2::new(k as f64 * step, 0.0, 0.0)).collect())
    }

    #[test]
    fn metric_cases() {
        let gt = straight(100, 1.0);
        let m = metrics(&gt, &gt).unwrap();
        assert_eq!((m.rte_percent, m.rre_deg_per_10m, m.ate_m), (0.0, 0.0, 0.0));
        let off = PoseTrajectory::new(gt.poses.iter().map(|p| Pose2::new(p.x + 1.0, p.y, p.theta)).collect());
        let m = metrics(&off, &gt).unwrap();
        assert!((m.ate_m - 1.0).abs() < 1e-12 && m.rte_percent.abs() < 1e-12 && m.rre_deg_per_10m == 0.0);
        let scaled = straight(100, 1.05);
        let m = metrics(&scaled, &gt).unwrap();
        assert!((m.rte_percent - 5.0).abs() < 1e-6, "{m:?}");
        assert_eq!(
            metrics(&straight(3, 1.0), &gt),
            Err(OdometryError::LengthMismatch(4, 101))
        );
        let still = PoseTrajectory::new(vec![Pose2::identity(); 3]);
        assert_eq!(metrics(&still, &still), Err(OdometryError::ZeroLengthPath));
        // Shorter than one segment: the whole path is the only segment.
        let m = metrics(&straight(4, 1.05), &straight(4, 1.0)).unwrap();
        assert!((m.rte_percent - 5.0).abs() < 1e-9);
    }

    #[test]
    fn fused_beats_single_sources_mostly() {
        let noise = NoiseModel::default();
        let wins = (0..100)
            .filter(|seed| compare_sources(*seed, 8, 300, &noise).unwrap().fused_wins())
            .count();
        assert!(wins >= 90, "{wins}");
    }

    #[test]
    fn jsonl_round_trip() {
        let inc = SensorIncrement {
            dt: 0.1,
            wheel: Some(Action::new(0.1, 0.0, 0.01)),
            imu_dtheta: Some(0.012),
            vision: None,
        };
        let line = serde_json::to_string(&inc).unwrap();
        let back = parse_jsonl(&format!("{line}\n\n{line}\n")).unwrap();
        assert_eq!(back, vec![inc, inc]);
        assert_eq!(parse_jsonl("{}\n").unwrap_err().0, 1);
    }
}
