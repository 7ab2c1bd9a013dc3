use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A 2-D location in continuous pixel coordinates.
///
/// Pixel `(col, row)` covers `[col, col+1) × [row, row+1)`, so its centre is
/// at `(col + 0.5, row + 0.5)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Closed polygon with canonical orientation and starting vertex.
///
/// Invariants: at least three vertices, no two consecutive vertices equal
/// (including last→first), positive signed area in `(x, y)` coordinates
/// (counter-clockwise with the y axis pointing up, clockwise on screen), and
/// the first vertex is the topmost (minimum `y`) then leftmost one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Polygon {
    points: Vec<Point>,
}

impl Polygon {
    /// Validates and canonicalizes `points`.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 3 {
            return invalid(format!("polygon needs at least 3 points, got {}", points.len()));
        }
        if let Some(p) = points.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return invalid(format!("polygon point {p:?} is not finite"));
        }
        let n = points.len();
        for i in 0..n {
            if points[i] == points[(i + 1) % n] {
                return invalid(format!("polygon has consecutive duplicate point at index {i}"));
            }
        }
        Ok(Self {
            points: canonicalize(points),
        })
    }

    /// Drops consecutive duplicates before validating.
    pub fn new_dedup(mut points: Vec<Point>) -> Result<Self> {
        points.dedup();
        while points.len() > 1 && points.first() == points.last() {
            points.pop();
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Shoelace area (positive for canonical polygons).
    pub fn area(&self) -> f64 {
        signed_area(&self.points)
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| self.points[i].dist(self.points[(i + 1) % n]))
            .sum()
    }

    /// Axis-aligned rectangle boundary with corners at `(x0,y0)` and `(x1,y1)`.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: Point) -> bool {
        let pts = &self.points;
        let n = pts.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (pts[i], pts[j]);
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Euclidean distance from `p` to the nearest point of the boundary.
    pub fn distance_to_boundary(&self, p: Point) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| segment_distance(p, self.points[i], self.points[(i + 1) % n]))
            .fold(f64::INFINITY, f64::min)
    }

    /// True when no two non-adjacent edges intersect.
    pub fn is_simple(&self) -> bool {
        let pts = &self.points;
        let n = pts.len();
        for i in 0..n {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (c, d) = (pts[j], pts[(j + 1) % n]);
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    /// Axis-aligned bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        )
    }
}

pub(crate) fn signed_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
}

fn canonicalize(mut pts: Vec<Point>) -> Vec<Point> {
    if signed_area(&pts) < 0.0 {
        pts.reverse();
    }
    let start = pts
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    pts.rotate_left(start);
    pts
}

pub(crate) fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.dist(Point::new(a.x + t * dx, a.y + t * dy))
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

pub(crate) fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0))
        && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0))
    {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_orientation_and_start() {
        // Listed clockwise in (x, y) starting at the bottom-right corner.
        let p = Polygon::new(vec![
            Point::new(4.0, 3.0),
            Point::new(4.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 3.0),
        ])
        .unwrap();
        assert!(p.area() > 0.0);
        assert_eq!(p.points()[0], Point::new(1.0, 1.0));
        assert_eq!(p.area(), 6.0);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(Polygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]).is_err());
        let dup = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        ];
        assert!(Polygon::new(dup.clone()).is_err());
        assert_eq!(Polygon::new_dedup(dup).unwrap().len(), 3);
    }

    #[test]
    fn containment_and_distance() {
        let r = Polygon::rectangle(0.0, 0.0, 10.0, 4.0).unwrap();
        assert!(r.contains(Point::new(5.0, 2.0)));
        assert!(!r.contains(Point::new(11.0, 2.0)));
        assert_eq!(r.distance_to_boundary(Point::new(5.0, 1.0)), 1.0);
        assert_eq!(r.perimeter(), 28.0);
    }

    #[test]
    fn simplicity_detects_bow_tie() {
        let r = Polygon::rectangle(0.0, 0.0, 2.0, 2.0).unwrap();
        assert!(r.is_simple());
        let bow = Polygon {
            points: vec![
                Point::new(0.0, 0.0),
                Point::new(2.0, 2.0),
                Point::new(2.0, 0.0),
                Point::new(0.0, 2.0),
            ],
        };
        assert!(!bow.is_simple());
    }
}
