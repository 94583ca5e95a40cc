//! Oriented grasp rectangles and the geometry built on them.
//!
//! Angles are radians throughout. A parallel-plate grasp is symmetric under a
//! half turn, so every orientation is kept reduced into `[0, π)`.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("grasp size must be positive and finite (w = {w}, h = {h})")]
    InvalidSize { w: f64, h: f64 },
    #[error("grasp center and angle must be finite")]
    NonFinite,
    #[error("degenerate rectangle pair: union area is {0}")]
    Degenerate(f64),
    #[error("{0} is not an orientation class")]
    NotAnOrientation(OrientationClass),
}

/// Reduce an angle into `[0, π)`.
pub fn reduce_mod_pi(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    if t >= PI {
        0.0
    } else {
        t
    }
}

/// A 5D grasp rectangle `(x, y, θ, w, h)` in image pixels.
///
/// `w` is the gripper opening measured along the direction `θ`, `h` the plate
/// extent across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grasp5D {
    x: f64,
    y: f64,
    theta: f64,
    w: f64,
    h: f64,
}

impl Grasp5D {
    pub fn new(x: f64, y: f64, theta: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(x.is_finite() && y.is_finite() && theta.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(GeometryError::InvalidSize { w, h });
        }
        Ok(Self {
            x,
            y,
            theta: reduce_mod_pi(theta),
            w,
            h,
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in counter-clockwise order (for a y-up frame; the winding is
    /// consistent, which is all the clipper needs).
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let (ux, uy) = (c * self.w / 2.0, s * self.w / 2.0);
        let (vx, vy) = (-s * self.h / 2.0, c * self.h / 2.0);
        [
            (self.x - ux - vx, self.y - uy - vy),
            (self.x + ux - vx, self.y + uy - vy),
            (self.x + ux + vx, self.y + uy + vy),
            (self.x - ux + vx, self.y - uy + vy),
        ]
    }

    /// Smallest axis-aligned box containing the rectangle.
    pub fn hull(&self) -> AxisBox {
        let (s, c) = self.theta.sin_cos();
        let hw = (c.abs() * self.w + s.abs() * self.h) / 2.0;
        let hh = (s.abs() * self.w + c.abs() * self.h) / 2.0;
        AxisBox {
            x: self.x,
            y: self.y,
            w: 2.0 * hw,
            h: 2.0 * hh,
        }
    }
}

/// Axis-aligned box stored as center and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl AxisBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x: (x1 + x2) / 2.0,
            y: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn x1(&self) -> f64 {
        self.x - self.w / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.y - self.h / 2.0
    }
    pub fn x2(&self) -> f64 {
        self.x + self.w / 2.0
    }
    pub fn y2(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x1() && px <= self.x2() && py >= self.y1() && py <= self.y2()
    }

    pub fn iou(&self, other: &AxisBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x1().max(other.x1())).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y1().max(other.y1())).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clip to `[0, width] × [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> AxisBox {
        let x1 = self.x1().clamp(0.0, width);
        let x2 = self.x2().clamp(0.0, width);
        let y1 = self.y1().clamp(0.0, height);
        let y2 = self.y2().clamp(0.0, height);
        AxisBox::from_corners(x1, y1, x2, y2)
    }
}

/// An orientation bin, or one of the two rejection classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrientationClass {
    Orientation(usize),
    /// No grasp possible in the region.
    Background,
    /// A feasible grasp on an object other than the requested one.
    NotTarget,
}

impl OrientationClass {
    /// Position in a class-probability vector of length `n_orient + 2`.
    pub fn index(&self, n_orient: usize) -> usize {
        match *self {
            OrientationClass::Orientation(i) => i,
            OrientationClass::Background => n_orient,
            OrientationClass::NotTarget => n_orient + 1,
        }
    }

    pub fn from_index(index: usize, n_orient: usize) -> Option<Self> {
        match index {
            i if i < n_orient => Some(OrientationClass::Orientation(i)),
            i if i == n_orient => Some(OrientationClass::Background),
            i if i == n_orient + 1 => Some(OrientationClass::NotTarget),
            _ => None,
        }
    }

    pub fn orientation(&self) -> Option<usize> {
        match *self {
            OrientationClass::Orientation(i) => Some(i),
            _ => None,
        }
    }

    pub fn is_orientation(&self) -> bool {
        matches!(self, OrientationClass::Orientation(_))
    }
}

impl fmt::Display for OrientationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrientationClass::Orientation(i) => write!(f, "orientation {i}"),
            OrientationClass::Background => write!(f, "BG"),
            OrientationClass::NotTarget => write!(f, "NT"),
        }
    }
}

/// Total number of classes in the grasp classification space.
pub fn class_count(n_orient: usize) -> usize {
    n_orient + 2
}

/// Uniform left-closed bins of width `π / n_orient` starting at 0.
pub fn theta_to_class(theta: f64, n_orient: usize) -> usize {
    assert!(n_orient >= 1, "n_orient must be at least 1");
    let t = reduce_mod_pi(theta);
    let bin = (t / (PI / n_orient as f64)).floor() as usize;
    bin.min(n_orient - 1)
}

/// Bin center of an orientation class.
pub fn class_to_theta(class: OrientationClass, n_orient: usize) -> Result<f64, GeometryError> {
    match class {
        OrientationClass::Orientation(i) if i < n_orient => {
            Ok((i as f64 + 0.5) * PI / n_orient as f64)
        }
        other => Err(GeometryError::NotAnOrientation(other)),
    }
}

/// Smallest absolute difference between two angles under half-turn symmetry.
pub fn angle_error(a: f64, b: f64) -> f64 {
    let d = (reduce_mod_pi(a) - reduce_mod_pi(b)).abs();
    d.min(PI - d)
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// Sutherland–Hodgman: clip `subject` against the convex, counter-clockwise `clip`.
fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (ax, ay) = clip[i];
        let (bx, by) = clip[(i + 1) % n];
        let side = |p: (f64, f64)| (bx - ax) * (p.1 - ay) - (by - ay) * (p.0 - ax);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

fn ccw(mut poly: [(f64, f64); 4]) -> [(f64, f64); 4] {
    if polygon_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

/// Jaccard index of two oriented rectangles by exact polygon clipping.
pub fn rect_iou(a: &Grasp5D, b: &Grasp5D) -> Result<f64, GeometryError> {
    let pa = ccw(a.corners());
    let pb = ccw(b.corners());
    let area_a = polygon_area(&pa);
    let area_b = polygon_area(&pb);
    let inter = polygon_area(&clip_polygon(&pa, &pb)).abs();
    let union = area_a + area_b - inter;
    if !(union.is_finite() && union > 0.0 && area_a > 0.0 && area_b > 0.0) {
        return Err(GeometryError::Degenerate(union));
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Greedy rotated non-maximum suppression. Keeps a grasp unless a higher
/// scored, already kept grasp overlaps it by more than `iou_threshold`.
pub fn rotated_nms(grasps: &[(Grasp5D, f64)], iou_threshold: f64) -> Vec<(Grasp5D, f64)> {
    let mut order: Vec<usize> = (0..grasps.len()).collect();
    order.sort_by(|&i, &j| {
        grasps[j]
            .1
            .partial_cmp(&grasps[i].1)
            .unwrap_or(Ordering::Equal)
    });
    let mut kept: Vec<(Grasp5D, f64)> = Vec::new();
    for i in order {
        let candidate = grasps[i];
        let suppressed = kept
            .iter()
            .any(|(g, _)| rect_iou(g, &candidate.0).unwrap_or(0.0) > iou_threshold);
        if !suppressed {
            kept.push(candidate);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn g(x: f64, y: f64, t: f64, w: f64, h: f64) -> Grasp5D {
        Grasp5D::new(x, y, t, w, h).unwrap()
    }

    #[test]
    fn theta_is_reduced() {
        let a = g(0.0, 0.0, PI + 0.3, 2.0, 1.0);
        assert_abs_diff_eq!(a.theta(), 0.3, epsilon = 1e-12);
        let b = g(0.0, 0.0, -0.25, 2.0, 1.0);
        assert_abs_diff_eq!(b.theta(), PI - 0.25, epsilon = 1e-12);
        assert!(g(0.0, 0.0, PI, 1.0, 1.0).theta() < 1e-12);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(Grasp5D::new(0.0, 0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Grasp5D::new(0.0, 0.0, 0.0, 1.0, -1.0).is_err());
        assert!(Grasp5D::new(f64::NAN, 0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = g(10.0, 10.0, 0.4, 10.0, 5.0);
        assert_abs_diff_eq!(rect_iou(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let b = g(0.0, 0.0, 0.0, 10.0, 10.0);
        let c = g(1000.0, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(rect_iou(&b, &c).unwrap(), 0.0);
    }

    #[test]
    fn iou_square_vs_rotated_square() {
        // The overlap is the unit square minus four corner triangles of the
        // rotated copy, each of area (1/√2 - 1/2)², giving 2(√2 - 1).
        let a = g(0.0, 0.0, 0.0, 1.0, 1.0);
        let b = g(0.0, 0.0, PI / 4.0, 1.0, 1.0);
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let expected = inter / (2.0 - inter);
        assert_abs_diff_eq!(rect_iou(&a, &b).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_pair_is_an_error() {
        let a = g(0.0, 0.0, 0.0, 1e-200, 1e-200);
        assert!(matches!(
            rect_iou(&a, &a),
            Err(GeometryError::Degenerate(_))
        ));
    }

    #[test]
    fn angle_error_examples() {
        assert_eq!(angle_error(0.0, 0.0), 0.0);
        assert!(angle_error(0.0, PI) < 1e-12);
        assert_abs_diff_eq!(angle_error(0.1, PI - 0.1), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(angle_error(0.0, PI / 2.0), PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn binning_examples() {
        assert_eq!(theta_to_class(0.0, 19), 0);
        assert_eq!(theta_to_class(PI / 2.0, 19), 9);
        assert_eq!(theta_to_class(PI - 1e-9, 19), 18);
        assert_abs_diff_eq!(
            class_to_theta(OrientationClass::Orientation(0), 19).unwrap(),
            PI / 38.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            class_to_theta(OrientationClass::Orientation(9), 19).unwrap(),
            PI / 2.0,
            epsilon = 1e-15
        );
        for c in 0..19 {
            let t = class_to_theta(OrientationClass::Orientation(c), 19).unwrap();
            assert_eq!(theta_to_class(t, 19), c);
        }
        assert!(class_to_theta(OrientationClass::Background, 19).is_err());
        assert!(class_to_theta(OrientationClass::NotTarget, 19).is_err());
        assert!(class_to_theta(OrientationClass::Orientation(19), 19).is_err());
    }

    #[test]
    fn class_index_layout() {
        assert_eq!(class_count(19), 21);
        assert_eq!(OrientationClass::Background.index(19), 19);
        assert_eq!(OrientationClass::NotTarget.index(19), 20);
        for i in 0..21 {
            assert_eq!(OrientationClass::from_index(i, 19).unwrap().index(19), i);
        }
        assert!(OrientationClass::from_index(21, 19).is_none());
    }

    #[test]
    fn hull_of_rotated_rect() {
        let a = g(5.0, 5.0, PI / 2.0, 10.0, 4.0);
        let h = a.hull();
        assert_abs_diff_eq!(h.w, 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(h.h, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn nms_examples() {
        let a = g(0.0, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(rotated_nms(&[(a, 0.3)], 0.5), vec![(a, 0.3)]);
        assert_eq!(rotated_nms(&[(a, 0.8), (a, 0.9)], 0.5), vec![(a, 0.9)]);
        assert!(rotated_nms(&[], 0.5).is_empty());

        // A chain with IoU above 0.5 on both links and disjoint ends cannot
        // exist, so the chain uses IoU ≈ 0.445 per link against threshold 0.3.
        let a = g(1.95, 0.0, 0.0, 5.9, 10.0);
        let b = g(5.0, 0.0, 0.0, 10.0, 10.0);
        let c = g(8.05, 0.0, 0.0, 5.9, 10.0);
        assert_abs_diff_eq!(rect_iou(&a, &b).unwrap(), 4.9 / 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rect_iou(&b, &c).unwrap(), 4.9 / 11.0, epsilon = 1e-12);
        assert_eq!(rect_iou(&a, &c).unwrap(), 0.0);
        let out = rotated_nms(&[(c, 0.7), (a, 0.9), (b, 0.8)], 0.3);
        assert_eq!(out, vec![(a, 0.9), (c, 0.7)]);
    }
}
