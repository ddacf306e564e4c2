//! Occupancy grids, exact Euclidean distance transforms and signed distance
//! fields.
//!
//! Geometry: cell `(i, j)` (column `i`, row `j`) has its centre at
//! `origin + (i, j) * resolution`. Values are stored row-major, row 0 first.
//!
//! Bilinear sampling uses the four cells around the query point with the
//! corner layout
//!
//! ```text
//!   c01 ---- c11      row j+1
//!    |        |
//!   c00 ---- c10      row j
//!  col i    col i+1
//! ```
//!
//! and weights `(1-fx)(1-fy)`, `fx(1-fy)`, `(1-fx)fy`, `fx·fy`.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::PoseTrajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EsdfError {
    #[error("grid geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("dilation radius must be non-negative, got {0}")]
    InvalidRadius(f64),
    #[error("grid parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: [f64; 2],
}

impl GridGeometry {
    pub fn new(width: usize, height: usize, resolution: f64, origin: [f64; 2]) -> Result<Self, EsdfError> {
        let g = Self {
            width,
            height,
            resolution,
            origin,
        };
        g.check()?;
        Ok(g)
    }

    fn check(&self) -> Result<(), EsdfError> {
        if self.width == 0 || self.height == 0 {
            return Err(EsdfError::InvalidGrid("dimensions must be at least 1".into()));
        }
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(EsdfError::InvalidGrid(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + i as f64 * self.resolution,
            self.origin[1] + j as f64 * self.resolution,
        ]
    }

    /// Continuous grid coordinates of a world point.
    pub fn to_grid(&self, x: f64, y: f64) -> [f64; 2] {
        [
            (x - self.origin[0]) / self.resolution,
            (y - self.origin[1]) / self.resolution,
        ]
    }

    /// The cell whose centre is nearest to a world point, if inside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let [gx, gy] = self.to_grid(x, y);
        let (i, j) = (gx.round(), gy.round());
        if i < 0.0 || j < 0.0 || i >= self.width as f64 || j >= self.height as f64 {
            None
        } else {
            Some((i as usize, j as usize))
        }
    }

    /// Length of the grid diagonal in metres; the distance cap.
    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64) * self.resolution
    }
}

/// 3D occupancy, stored z-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub resolution: f64,
    pub origin: [f64; 2],
    pub values: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(
        width: usize,
        height: usize,
        depth: usize,
        resolution: f64,
        origin: [f64; 2],
    ) -> Result<Self, EsdfError> {
        GridGeometry::new(width, height, resolution, origin)?;
        if depth == 0 {
            return Err(EsdfError::InvalidGrid("depth must be at least 1".into()));
        }
        Ok(Self {
            width,
            height,
            depth,
            resolution,
            origin,
            values: vec![false; width * height * depth],
        })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.height + j) * self.width + i
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.values[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.index(i, j, k);
        self.values[idx] = v;
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            width: self.width,
            height: self.height,
            resolution: self.resolution,
            origin: self.origin,
        }
    }
}

impl From<BinaryMap2D> for OccupancyGrid {
    fn from(m: BinaryMap2D) -> Self {
        Self {
            width: m.geometry.width,
            height: m.geometry.height,
            depth: 1,
            resolution: m.geometry.resolution,
            origin: m.geometry.origin,
            values: m.values,
        }
    }
}

/// Generic 2D raster over a [`GridGeometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    pub geometry: GridGeometry,
    pub values: Vec<T>,
}

/// 2D occupancy; `true` means obstacle.
pub type BinaryMap2D = Grid2<bool>;
/// Signed distance field in metres.
pub type EsdfMap = Grid2<f64>;
/// Expanded ground-truth corridor.
pub type TrajMask = Grid2<bool>;

impl<T: Clone> Grid2<T> {
    pub fn filled(geometry: GridGeometry, value: T) -> Self {
        Self {
            geometry,
            values: vec![value; geometry.len()],
        }
    }

    pub fn from_values(geometry: GridGeometry, values: Vec<T>) -> Result<Self, EsdfError> {
        geometry.check()?;
        if values.len() != geometry.len() {
            return Err(EsdfError::InvalidGrid(format!(
                "expected {} values, got {}",
                geometry.len(),
                values.len()
            )));
        }
        Ok(Self { geometry, values })
    }
}

impl<T: Copy> Grid2<T> {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[self.geometry.index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let idx = self.geometry.index(i, j);
        self.values[idx] = v;
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }
}

impl BinaryMap2D {
    pub fn occupied_count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    /// Parse rows of `0`/`1`/`#`/`.` characters; the first string is row 0.
    pub fn from_rows(rows: &[&str], resolution: f64, origin: [f64; 2]) -> Result<Self, EsdfError> {
        let height = rows.len();
        let width = rows.first().map(|r| r.chars().count()).unwrap_or(0);
        let geometry = GridGeometry::new(width, height, resolution, origin)?;
        let mut values = Vec::with_capacity(width * height);
        for (j, r) in rows.iter().enumerate() {
            if r.chars().count() != width {
                return Err(EsdfError::Parse {
                    line: j + 1,
                    message: "ragged row".into(),
                });
            }
            for c in r.chars() {
                values.push(matches!(c, '1' | '#'));
            }
        }
        Self::from_values(geometry, values)
    }
}

/// Collapse the z axis: a column is occupied if any voxel in it is.
pub fn compress_grid(grid: &OccupancyGrid) -> BinaryMap2D {
    let geometry = grid.geometry();
    let mut out = BinaryMap2D::filled(geometry, false);
    for k in 0..grid.depth {
        for j in 0..grid.height {
            for i in 0..grid.width {
                if grid.get(i, j, k) {
                    out.set(i, j, true);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Occupied,
    Free,
}

/// Exact squared distances in cell units from every cell to the nearest cell
/// of the target class. `None` when the class is absent.
///
/// Two-pass lower-envelope transform over integer squared distances: a
/// column scan gives vertical distances, then each row takes the lower
/// envelope of the parabolas `(x - i)² + g(i)²`.
pub fn squared_edt_cells(map: &BinaryMap2D, target: Target) -> Option<Vec<i64>> {
    let (w, h) = (map.width(), map.height());
    let want = target == Target::Occupied;
    if !map.values.contains(&want) {
        return None;
    }
    let inf = (w + h) as i64;
    // Phase 1: per column, distance to nearest target in that column.
    let mut g = vec![0i64; w * h];
    for i in 0..w {
        let idx = |j: usize| j * w + i;
        g[idx(0)] = if map.values[idx(0)] == want { 0 } else { inf };
        for j in 1..h {
            g[idx(j)] = if map.values[idx(j)] == want {
                0
            } else {
                g[idx(j - 1)].saturating_add(1).min(inf)
            };
        }
        for j in (0..h.saturating_sub(1)).rev() {
            if g[idx(j + 1)] < g[idx(j)] {
                g[idx(j)] = g[idx(j + 1)] + 1;
            }
        }
    }
    // Phase 2: per row, lower envelope of parabolas.
    let mut out = vec![0i64; w * h];
    let mut s = vec![0usize; w];
    let mut t = vec![0i64; w];
    for j in 0..h {
        let row = &g[j * w..(j + 1) * w];
        let f = |x: i64, i: usize| (x - i as i64).pow(2) + row[i].pow(2);
        let sep = |i: usize, u: usize| {
            let (ii, uu) = (i as i64, u as i64);
            (uu * uu - ii * ii + row[u].pow(2) - row[i].pow(2)).div_euclid(2 * (uu - ii))
        };
        let mut q: isize = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..w {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let wv = 1 + sep(s[q as usize], u);
                if wv < w as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = wv;
                }
            }
        }
        for u in (0..w).rev() {
            out[j * w + u] = f(u as i64, s[q as usize]);
            if q > 0 && u as i64 == t[q as usize] {
                q -= 1;
            }
        }
    }
    Some(out)
}

/// Euclidean distance in metres to the nearest cell of `target`; cells of
/// the target class are 0. When the class is absent every cell holds the
/// cap (grid diagonal).
pub fn edt(map: &BinaryMap2D, target: Target) -> Grid2<f64> {
    let res = map.geometry.resolution;
    let values = match squared_edt_cells(map, target) {
        Some(sq) => sq.iter().map(|d| (*d as f64).sqrt() * res).collect(),
        None => vec![map.geometry.diagonal(); map.geometry.len()],
    };
    Grid2 {
        geometry: map.geometry,
        values,
    }
}

/// Signed field: `+D` on free cells (distance to the nearest obstacle),
/// `-D'` on obstacle cells (distance to the nearest free cell).
pub fn signed_esdf(map: &BinaryMap2D) -> EsdfMap {
    let outside = edt(map, Target::Occupied);
    let inside = edt(map, Target::Free);
    let values = map
        .values
        .iter()
        .zip(outside.values.iter().zip(&inside.values))
        .map(|(occ, (d, di))| if *occ { -di } else { *d })
        .collect();
    EsdfMap {
        geometry: map.geometry,
        values,
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - (a[0] + t * dx)).hypot(p[1] - (a[1] + t * dy))
}

/// Liang–Barsky clip test of segment `ab` against an axis-aligned box.
fn segment_hits_box(a: [f64; 2], b: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> bool {
    let d = [b[0] - a[0], b[1] - a[1]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for axis in 0..2 {
        if d[axis] == 0.0 {
            if a[axis] < lo[axis] || a[axis] > hi[axis] {
                return false;
            }
        } else {
            let mut ta = (lo[axis] - a[axis]) / d[axis];
            let mut tb = (hi[axis] - a[axis]) / d[axis];
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskOutcome {
    pub mask: TrajMask,
    pub warnings: Vec<String>,
}

/// Mark the corridor around a ground-truth polyline: every cell whose centre
/// lies within `radius` of a segment, plus every cell the polyline passes
/// through.
pub fn make_mask(gt: &PoseTrajectory, geometry: GridGeometry, radius: f64) -> Result<MaskOutcome, EsdfError> {
    if !(radius >= 0.0) {
        return Err(EsdfError::InvalidRadius(radius));
    }
    geometry.check()?;
    let mut mask = TrajMask::filled(geometry, false);
    let mut warnings = Vec::new();
    if gt.is_empty() {
        return Ok(MaskOutcome { mask, warnings });
    }
    let pts: Vec<[f64; 2]> = gt.poses.iter().map(|p| [p.x, p.y]).collect();
    let segs: Vec<([f64; 2], [f64; 2])> = if pts.len() == 1 {
        vec![(pts[0], pts[0])]
    } else {
        pts.windows(2).map(|w| (w[0], w[1])).collect()
    };
    let res = geometry.resolution;
    let half = 0.5 * res;
    for (a, b) in segs {
        let reach = radius + res;
        let [gx0, gy0] = geometry.to_grid(a[0].min(b[0]) - reach, a[1].min(b[1]) - reach);
        let [gx1, gy1] = geometry.to_grid(a[0].max(b[0]) + reach, a[1].max(b[1]) + reach);
        let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
        if gx1 < 0.0 || gy1 < 0.0 || gx0 > (geometry.width - 1) as f64 || gy0 > (geometry.height - 1) as f64 {
            continue;
        }
        let (i0, i1) = (clamp(gx0.floor(), geometry.width), clamp(gx1.ceil(), geometry.width));
        let (j0, j1) = (clamp(gy0.floor(), geometry.height), clamp(gy1.ceil(), geometry.height));
        for j in j0..=j1 {
            for i in i0..=i1 {
                let c = geometry.cell_center(i, j);
                let hit = point_segment_distance(c, a, b) <= radius
                    || segment_hits_box(a, b, [c[0] - half, c[1] - half], [c[0] + half, c[1] + half]);
                if hit {
                    mask.set(i, j, true);
                }
            }
        }
    }
    if !mask.values.iter().any(|v| *v) {
        warnings.push("trajectory lies outside the grid; mask is empty".to_string());
    }
    Ok(MaskOutcome { mask, warnings })
}

/// `Φ̃ = Φ · (1 - α·[cell ∈ mask])`.
pub fn mask_esdf(phi: &EsdfMap, mask: &TrajMask, alpha: f64) -> Result<EsdfMap, EsdfError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EsdfError::InvalidAlpha(alpha));
    }
    if phi.geometry != mask.geometry {
        return Err(EsdfError::GeometryMismatch(format!(
            "field {:?} vs mask {:?}",
            phi.geometry, mask.geometry
        )));
    }
    let values = phi
        .values
        .iter()
        .zip(&mask.values)
        .map(|(v, m)| if *m { v * (1.0 - alpha) } else { *v })
        .collect();
    Ok(EsdfMap {
        geometry: phi.geometry,
        values,
    })
}

/// A bilinear sample with its spatial gradient (per metre). Components of
/// the gradient along a clamped axis are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub grad: [f64; 2],
    pub out_of_bounds: bool,
}

impl Grid2<f64> {
    /// Bilinear interpolation at a world point, clamped to the border.
    pub fn sample(&self, x: f64, y: f64) -> Sample {
        let g = &self.geometry;
        let [gx, gy] = g.to_grid(x, y);
        let (ax, ox) = axis(gx, g.width);
        let (ay, oy) = axis(gy, g.height);
        let v00 = self.get(ax.0, ay.0);
        let v10 = self.get(ax.1, ay.0);
        let v01 = self.get(ax.0, ay.1);
        let v11 = self.get(ax.1, ay.1);
        let (fx, fy) = (ax.2, ay.2);
        let value = v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy;
        let dx = if ox || ax.0 == ax.1 {
            0.0
        } else {
            ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy) / g.resolution
        };
        let dy = if oy || ay.0 == ay.1 {
            0.0
        } else {
            ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx) / g.resolution
        };
        Sample {
            value,
            grad: [dx, dy],
            out_of_bounds: ox || oy,
        }
    }
}

/// Lower index, upper index, fraction and whether the coordinate was
/// clamped.
fn axis(c: f64, n: usize) -> ((usize, usize, f64), bool) {
    let max = (n - 1) as f64;
    let oob = !(c >= 0.0 && c <= max);
    let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, max) };
    if n == 1 {
        return ((0, 0, 0.0), oob);
    }
    let i0 = (c.floor() as usize).min(n - 2);
    let f = c - i0 as f64;
    ((i0, i0 + 1, f), oob)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearSamples {
    pub values: Vec<f64>,
    pub out_of_bounds: Vec<bool>,
}

pub fn sample_bilinear(phi: &EsdfMap, points: &[[f64; 2]]) -> BilinearSamples {
    let mut values = Vec::with_capacity(points.len());
    let mut oob = Vec::with_capacity(points.len());
    for p in points {
        let s = phi.sample(p[0], p[1]);
        values.push(s.value);
        oob.push(s.out_of_bounds);
    }
    BilinearSamples {
        values,
        out_of_bounds: oob,
    }
}

/// Sum of the field over every pose position after the start pose.
pub fn traj_esdf_sum(phi_masked: &EsdfMap, poses: &PoseTrajectory) -> f64 {
    poses
        .poses
        .iter()
        .skip(1)
        .map(|p| phi_masked.sample(p.x, p.y).value)
        .sum()
}

// ---------------------------------------------------------------------------
// Text formats

struct Header {
    width: usize,
    height: usize,
    depth: usize,
    resolution: f64,
    origin: [f64; 2],
}

fn parse_header(line: &str, magic: &str) -> Result<Header, EsdfError> {
    let err = |m: String| EsdfError::Parse { line: 1, message: m };
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.first() != Some(&magic) {
        return Err(err(format!("expected `{magic}` header")));
    }
    fn num<T: FromStr>(t: &str, what: &str) -> Result<T, EsdfError> {
        t.parse().map_err(|_| EsdfError::Parse {
            line: 1,
            message: format!("bad {what} `{t}`"),
        })
    }
    let (depth, rest) = match toks.len() {
        6 => (1, &toks[3..]),
        7 => (num::<usize>(toks[3], "depth")?, &toks[4..]),
        n => return Err(err(format!("header has {n} fields, expected 6 or 7"))),
    };
    Ok(Header {
        width: num(toks[1], "width")?,
        height: num(toks[2], "height")?,
        depth,
        resolution: num(rest[0], "resolution")?,
        origin: [num(rest[1], "origin_x")?, num(rest[2], "origin_y")?],
    })
}

fn body_tokens(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(1)
        .flat_map(|(ln, l)| l.split_whitespace().map(move |t| (ln + 1, t)))
}

/// Parse `OCC2 <w> <h> [<d>] <res> <ox> <oy>` followed by 0/1 tokens.
pub fn parse_occupancy(text: &str) -> Result<OccupancyGrid, EsdfError> {
    let first = text.lines().next().ok_or(EsdfError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let h = parse_header(first, "OCC2")?;
    let mut grid = OccupancyGrid::new(h.width, h.height, h.depth, h.resolution, h.origin)?;
    let mut n = 0;
    for (ln, t) in body_tokens(text) {
        let v = match t {
            "0" => false,
            "1" => true,
            _ => {
                return Err(EsdfError::Parse {
                    line: ln,
                    message: format!("expected 0 or 1, got `{t}`"),
                })
            }
        };
        if n >= grid.values.len() {
            return Err(EsdfError::Parse {
                line: ln,
                message: "too many cells".into(),
            });
        }
        grid.values[n] = v;
        n += 1;
    }
    if n != grid.values.len() {
        return Err(EsdfError::Parse {
            line: text.lines().count(),
            message: format!("expected {} cells, found {n}", grid.values.len()),
        });
    }
    Ok(grid)
}

pub fn format_occupancy(grid: &OccupancyGrid) -> String {
    let mut s = String::new();
    if grid.depth == 1 {
        let _ = writeln!(
            s,
            "OCC2 {} {} {} {} {}",
            grid.width, grid.height, grid.resolution, grid.origin[0], grid.origin[1]
        );
    } else {
        let _ = writeln!(
            s,
            "OCC2 {} {} {} {} {} {}",
            grid.width, grid.height, grid.depth, grid.resolution, grid.origin[0], grid.origin[1]
        );
    }
    for row in grid.values.chunks(grid.width) {
        let line: Vec<&str> = row.iter().map(|v| if *v { "1" } else { "0" }).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn format_esdf(phi: &EsdfMap) -> String {
    let g = &phi.geometry;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "ESDF {} {} {} {} {}",
        g.width, g.height, g.resolution, g.origin[0], g.origin[1]
    );
    for row in phi.values.chunks(g.width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_esdf(text: &str) -> Result<EsdfMap, EsdfError> {
    let first = text.lines().next().ok_or(EsdfError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let h = parse_header(first, "ESDF")?;
    let geometry = GridGeometry::new(h.width, h.height, h.resolution, h.origin)?;
    let mut values = Vec::with_capacity(geometry.len());
    for (ln, t) in body_tokens(text) {
        values.push(t.parse::<f64>().map_err(|_| EsdfError::Parse {
            line: ln,
            message: format!("bad value `{t}`"),
        })?);
    }
    EsdfMap::from_values(geometry, values)
}
