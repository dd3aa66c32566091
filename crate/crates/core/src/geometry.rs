//! Oriented boxes and the convex-polygon machinery behind rotated IoU and
//! minimum-area rectangles.
//!
//! Angles are radians, measured counter-clockwise from the +x axis to the
//! `w` edge. Every [`Obb`] built through [`Obb::new`] carries an angle in
//! `[-π/2, π/2)`; since a rectangle maps onto itself under a half turn,
//! wrapping the angle modulo π never changes the point set.

use std::f64::consts::{FRAC_PI_2, PI};

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intersections with less area than this (px²) are treated as empty.
pub const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    #[inline]
    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    #[inline]
    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Point::new(x, y)
    }
}

/// Oriented bounding box `(cx, cy, w, h, theta)` in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Wraps an angle into `[-π/2, π/2)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    // floor() can land one period off when theta sits on a boundary.
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    if t < -FRAC_PI_2 {
        t += PI;
    }
    t
}

/// Validates a raw box and returns it with its angle in `[-π/2, π/2)`.
pub fn canonicalize(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Obb> {
    if ![cx, cy, w, h, theta].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidBox(format!(
            "non-finite field in ({cx}, {cy}, {w}, {h}, {theta})"
        )));
    }
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::InvalidBox(format!(
            "extents must be positive, got w={w} h={h}"
        )));
    }
    Ok(Obb {
        cx,
        cy,
        w,
        h,
        theta: wrap_angle(theta),
    })
}

impl Obb {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        canonicalize(cx, cy, w, h, theta)
    }

    /// Axis-aligned box from its min/max corners.
    pub fn from_aabb(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Obb::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0, 0.0)
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    #[inline]
    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    /// Corners in counter-clockwise order, starting from local (-w/2, -h/2).
    pub fn corner_points(&self) -> [Point; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let local = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)];
        local.map(|(lx, ly)| Point::new(self.cx + lx * c - ly * s, self.cy + lx * s + ly * c))
    }

    pub fn corners(&self) -> ConvexPolygon {
        ConvexPolygon {
            vertices: self.corner_points().to_vec(),
        }
    }

    /// Boundary-inclusive point containment, with `tol` pixels of slack.
    pub fn contains(&self, p: Point, tol: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.w / 2.0 + tol && v.abs() <= self.h / 2.0 + tol
    }

    /// Radius of the circumscribed circle.
    #[inline]
    pub fn circumradius(&self) -> f64 {
        0.5 * self.w.hypot(self.h)
    }

    pub fn translated(&self, tx: f64, ty: f64) -> Obb {
        Obb {
            cx: self.cx + tx,
            cy: self.cy + ty,
            ..*self
        }
    }

    /// Rigid rotation of the box about `pivot` by `angle` radians.
    pub fn rotated_about(&self, pivot: Point, angle: f64) -> Obb {
        let (s, c) = angle.sin_cos();
        let dx = self.cx - pivot.x;
        let dy = self.cy - pivot.y;
        Obb {
            cx: pivot.x + dx * c - dy * s,
            cy: pivot.y + dx * s + dy * c,
            w: self.w,
            h: self.h,
            theta: wrap_angle(self.theta + angle),
        }
    }

    /// True when `other` describes the same rectangle up to the w/h–θ symmetry.
    pub fn same_rect(&self, other: &Obb, tol: f64) -> bool {
        let a = self.corner_points();
        let b = other.corner_points();
        a.iter()
            .all(|p| b.iter().any(|q| (p.x - q.x).abs() <= tol && (p.y - q.y).abs() <= tol))
    }
}

/// Signed shoelace area; positive for counter-clockwise vertex order.
pub fn signed_area(pts: &[Point]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        acc += a.cross(b);
    }
    acc / 2.0
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    /// Builds a polygon, dropping repeated and collinear vertices and
    /// flipping clockwise input. Fails unless the result is strictly convex
    /// with positive area.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        let mut pts = remove_degenerate(vertices);
        if pts.len() < 3 {
            return Err(Error::DegeneratePolygon(format!(
                "{} distinct non-collinear vertices",
                pts.len()
            )));
        }
        if signed_area(&pts) < 0.0 {
            pts.reverse();
        }
        let n = pts.len();
        for i in 0..n {
            let a = pts[i];
            let b = pts[(i + 1) % n];
            let c = pts[(i + 2) % n];
            if b.sub(a).cross(c.sub(b)) <= 0.0 {
                return Err(Error::DegeneratePolygon("vertices are not strictly convex".into()));
            }
        }
        if signed_area(&pts) <= 0.0 {
            return Err(Error::DegeneratePolygon("zero area".into()));
        }
        Ok(Self { vertices: pts })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn centroid(&self) -> Point {
        let pts = &self.vertices;
        let (mut cx, mut cy, mut a2) = (0.0, 0.0, 0.0);
        for i in 0..pts.len() {
            let p = pts[i];
            let q = pts[(i + 1) % pts.len()];
            let cr = p.cross(q);
            a2 += cr;
            cx += (p.x + q.x) * cr;
            cy += (p.y + q.y) * cr;
        }
        Point::new(cx / (3.0 * a2), cy / (3.0 * a2))
    }
}

fn remove_degenerate(mut pts: Vec<Point>) -> Vec<Point> {
    let scale = pts
        .iter()
        .fold(0.0f64, |m, p| m.max(p.x.abs()).max(p.y.abs()))
        .max(1.0);
    let eps = 1e-12 * scale;
    pts.dedup_by(|a, b| (a.x - b.x).abs() <= eps && (a.y - b.y).abs() <= eps);
    while pts.len() > 1 {
        let (f, l) = (pts[0], pts[pts.len() - 1]);
        if (f.x - l.x).abs() <= eps && (f.y - l.y).abs() <= eps {
            pts.pop();
        } else {
            break;
        }
    }
    // Drop vertices lying on the segment joining their neighbours.
    let mut changed = true;
    while changed && pts.len() >= 3 {
        changed = false;
        let n = pts.len();
        for i in 0..n {
            let a = pts[(i + n - 1) % n];
            let b = pts[i];
            let c = pts[(i + 1) % n];
            let cr = b.sub(a).cross(c.sub(b));
            if cr.abs() <= eps * scale {
                pts.remove(i);
                changed = true;
                break;
            }
        }
    }
    pts
}

/// One Sutherland–Hodgman pass: keeps the part of `input` on the left of
/// the directed line `e0 → e1`.
#[inline]
fn clip_by_edge(input: &[Point], e0: Point, e1: Point, mut push: impl FnMut(Point)) {
    let n = input.len();
    if n == 0 {
        return;
    }
    let dir = e1.sub(e0);
    let side = |p: Point| dir.cross(p.sub(e0));
    let mut prev = input[n - 1];
    let mut prev_side = side(prev);
    for &cur in input {
        let cur_side = side(cur);
        if cur_side >= 0.0 {
            if prev_side < 0.0 {
                push(lerp_at_zero(prev, cur, prev_side, cur_side));
            }
            push(cur);
        } else if prev_side >= 0.0 {
            push(lerp_at_zero(prev, cur, prev_side, cur_side));
        }
        prev = cur;
        prev_side = cur_side;
    }
}

#[inline]
fn lerp_at_zero(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Clips `a` against `b`. Returns `None` when the overlap is empty or has
/// area below [`AREA_EPS`].
pub fn intersect_convex(a: &ConvexPolygon, b: &ConvexPolygon) -> Option<ConvexPolygon> {
    let mut cur = a.vertices.clone();
    let mut next = Vec::with_capacity(cur.len() + b.vertices.len());
    let m = b.vertices.len();
    for i in 0..m {
        next.clear();
        clip_by_edge(&cur, b.vertices[i], b.vertices[(i + 1) % m], |p| next.push(p));
        std::mem::swap(&mut cur, &mut next);
        if cur.is_empty() {
            return None;
        }
    }
    if signed_area(&cur) < AREA_EPS {
        return None;
    }
    ConvexPolygon::new(cur).ok()
}

/// Overlap area of two oriented boxes, on stack buffers.
pub fn intersection_area(a: &Obb, b: &Obb) -> f64 {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let reach = a.circumradius() + b.circumradius();
    if dx * dx + dy * dy >= reach * reach {
        return 0.0;
    }
    let clipper = b.corner_points();
    let mut cur: ArrayVec<Point, 16> = a.corner_points().into_iter().collect();
    let mut next: ArrayVec<Point, 16> = ArrayVec::new();
    for i in 0..4 {
        next.clear();
        clip_by_edge(&cur, clipper[i], clipper[(i + 1) % 4], |p| next.push(p));
        std::mem::swap(&mut cur, &mut next);
        if cur.is_empty() {
            return 0.0;
        }
    }
    let area = signed_area(&cur);
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

/// Rotated intersection-over-union in `[0, 1]`.
pub fn rotated_iou(a: &Obb, b: &Obb) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Convex hull (Andrew's monotone chain), counter-clockwise, collinear
/// points removed.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let turns_left = |hull: &[Point], p: Point| {
        let a = hull[hull.len() - 2];
        let b = hull[hull.len() - 1];
        b.sub(a).cross(p.sub(b)) > 0.0
    };
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && !turns_left(&hull, p) {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && !turns_left(&hull, p) {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Smallest-area rectangle enclosing `points`, via convex hull and rotating
/// calipers. One side of the result is collinear with a hull edge. Ties in
/// area go to the candidate with the smaller `|theta|`.
pub fn min_area_rect(points: &[Point]) -> Result<Obb> {
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::DegeneratePolygon("non-finite coordinate".into()));
    }
    let hull = convex_hull(points);
    let n = hull.len();
    let span = bbox_diagonal(points);
    if n < 3 || signed_area(&hull) <= 1e-12 * span * span {
        return Err(Error::DegeneratePolygon(format!(
            "{} input points are collinear or coincident",
            points.len()
        )));
    }

    let proj = |i: usize, d: Point| hull[i % n].dot(d);
    let edge_dir = |i: usize| {
        let e = hull[(i + 1) % n].sub(hull[i]);
        let len = e.norm();
        Point::new(e.x / len, e.y / len)
    };

    // Caliper indices: max along u, max along v, min along u.
    let u0 = edge_dir(0);
    let v0 = Point::new(-u0.y, u0.x);
    let argmax = |d: Point, sign: f64| {
        (0..n)
            .max_by(|&a, &b| (sign * proj(a, d)).total_cmp(&(sign * proj(b, d))))
            .unwrap()
    };
    let mut right = argmax(u0, 1.0);
    let mut top = argmax(v0, 1.0);
    let mut left = argmax(u0, -1.0);

    let mut best: Option<(f64, Obb)> = None;
    for i in 0..n {
        let u = edge_dir(i);
        let v = Point::new(-u.y, u.x);
        for _ in 0..n {
            if proj(right + 1, u) > proj(right, u) {
                right += 1;
            } else {
                break;
            }
        }
        for _ in 0..n {
            if proj(top + 1, v) > proj(top, v) {
                top += 1;
            } else {
                break;
            }
        }
        for _ in 0..n {
            if proj(left + 1, u) < proj(left, u) {
                left += 1;
            } else {
                break;
            }
        }
        let base = hull[i];
        let min_u = proj(left, u);
        let max_u = proj(right, u);
        let min_v = base.dot(v);
        let max_v = proj(top, v);
        let w = max_u - min_u;
        let h = max_v - min_v;
        let area = w * h;
        let mu = 0.5 * (min_u + max_u);
        let mv = 0.5 * (min_v + max_v);
        let center = Point::new(mu * u.x + mv * v.x, mu * u.y + mv * v.y);
        let cand = Obb::new(center.x, center.y, w, h, u.y.atan2(u.x))?;
        best = match best {
            None => Some((area, cand)),
            Some((ba, bo)) => {
                let tol = 1e-9 * ba.max(area);
                if area < ba - tol || ((area - ba).abs() <= tol && cand.theta.abs() < bo.theta.abs())
                {
                    Some((area, cand))
                } else {
                    Some((ba, bo))
                }
            }
        };
    }
    Ok(best.expect("hull has at least three edges").1)
}

fn bbox_diagonal(points: &[Point]) -> f64 {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in points {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    (x1 - x0).hypot(y1 - y0)
}
