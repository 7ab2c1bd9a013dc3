//! Closed cubic B-spline fitting and arc-length resampling.

use nalgebra::{DMatrix, DVector};

use super::polygon::{Point, Polygon};
use crate::error::{invalid, Result};

/// Upper bound on control points; keeps the dense solve small for long
/// contours.
const MAX_CONTROL_POINTS: usize = 300;
/// Evaluation density used to measure arc length on the fitted curve.
const SAMPLES_PER_SPAN: usize = 24;

/// Uniform cubic B-spline basis weights at local parameter `u ∈ [0, 1)`.
fn basis(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        (1.0 - u).powi(3) / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Periodic uniform cubic B-spline in the plane.
#[derive(Clone, Debug)]
pub struct ClosedBSpline {
    control: Vec<Point>,
}

impl ClosedBSpline {
    pub fn control_points(&self) -> &[Point] {
        &self.control
    }

    /// Point at parameter `t ∈ [0, n)`, where `n` is the control count.
    pub fn eval(&self, t: f64) -> Point {
        let n = self.control.len();
        let t = t.rem_euclid(n as f64);
        let span = (t.floor() as usize).min(n - 1);
        let w = basis(t - span as f64);
        let (mut x, mut y) = (0.0, 0.0);
        for (k, wk) in w.iter().enumerate() {
            let c = self.control[(span + n + k - 1) % n];
            x += wk * c.x;
            y += wk * c.y;
        }
        Point::new(x, y)
    }

    /// Penalized least-squares fit to a closed point sequence.
    ///
    /// Points are parametrized by arc length; the control count scales with
    /// the perimeter (one per two pixels, at least 4). `smoothing` weights a
    /// penalty on second differences of the control polygon.
    pub fn fit(points: &[Point], smoothing: f64) -> Result<Self> {
        if points.len() < 4 {
            return invalid("spline fit needs at least 4 points");
        }
        let data = densify_closed(points, 1.0);
        let (cum, total) = cumulative_length(&data);
        if total <= 0.0 {
            return invalid("spline fit on a zero-length contour");
        }
        let n = ((total / 2.0).round() as usize).clamp(4, MAX_CONTROL_POINTS);
        let mut ata = DMatrix::<f64>::zeros(n, n);
        let mut atb = DMatrix::<f64>::zeros(n, 2);
        for (p, s) in data.iter().zip(&cum) {
            let t = n as f64 * s / total;
            let span = (t.floor() as usize).min(n - 1);
            let w = basis(t - span as f64);
            let idx: [usize; 4] = std::array::from_fn(|k| (span + n + k - 1) % n);
            for a in 0..4 {
                atb[(idx[a], 0)] += w[a] * p.x;
                atb[(idx[a], 1)] += w[a] * p.y;
                for b in 0..4 {
                    ata[(idx[a], idx[b])] += w[a] * w[b];
                }
            }
        }
        if smoothing > 0.0 {
            let d = [1.0, -2.0, 1.0];
            for j in 0..n {
                let idx = [(j + n - 1) % n, j, (j + 1) % n];
                for a in 0..3 {
                    for b in 0..3 {
                        ata[(idx[a], idx[b])] += smoothing * d[a] * d[b];
                    }
                }
            }
        }
        let lu = ata.lu();
        let cx = lu
            .solve(&DVector::from_column_slice(atb.column(0).as_slice()))
            .ok_or_else(|| crate::Error::InvalidInput("singular spline system".into()))?;
        let cy = lu
            .solve(&DVector::from_column_slice(atb.column(1).as_slice()))
            .ok_or_else(|| crate::Error::InvalidInput("singular spline system".into()))?;
        Ok(Self {
            control: cx.iter().zip(cy.iter()).map(|(&x, &y)| Point::new(x, y)).collect(),
        })
    }

    /// Dense closed polyline approximation of the curve.
    pub fn polyline(&self) -> Vec<Point> {
        let n = self.control.len();
        let total = n * SAMPLES_PER_SPAN;
        (0..total)
            .map(|i| self.eval(i as f64 / SAMPLES_PER_SPAN as f64))
            .collect()
    }
}

/// Cumulative arc length at each vertex of a closed polyline, plus the total.
fn cumulative_length(points: &[Point]) -> (Vec<f64>, f64) {
    let mut cum = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    for i in 0..points.len() {
        cum.push(acc);
        acc += points[i].dist(points[(i + 1) % points.len()]);
    }
    (cum, acc)
}

/// Inserts points so that no closed-polyline edge exceeds `max_step`.
fn densify_closed(points: &[Point], max_step: f64) -> Vec<Point> {
    let n = points.len();
    let mut out = Vec::new();
    for i in 0..n {
        let (a, b) = (points[i], points[(i + 1) % n]);
        let pieces = (a.dist(b) / max_step).ceil().max(1.0) as usize;
        for k in 0..pieces {
            let t = k as f64 / pieces as f64;
            out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
        }
    }
    out
}

/// `m` points at equal arc-length steps along a closed polyline, starting
/// at its first vertex.
pub fn resample_closed(points: &[Point], m: usize) -> Vec<Point> {
    let (cum, total) = cumulative_length(points);
    let n = points.len();
    let mut out = Vec::with_capacity(m);
    let mut seg = 0;
    for i in 0..m {
        let target = total * i as f64 / m as f64;
        while seg + 1 < n && cum[seg + 1] <= target {
            seg += 1;
        }
        let (a, b) = (points[seg], points[(seg + 1) % n]);
        let len = a.dist(b);
        let t = if len > 0.0 { (target - cum[seg]) / len } else { 0.0 };
        out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
    }
    out
}

/// Fits a closed cubic B-spline to `contour` and returns `m` points at equal
/// arc-length spacing along it, canonicalized.
///
/// Contours with fewer than four distinct vertices are resampled linearly
/// instead.
pub fn sample_uniform(contour: &Polygon, m: usize, smoothing: f64) -> Result<Polygon> {
    if m < 3 {
        return invalid(format!("need at least 3 samples, got {m}"));
    }
    let mut distinct: Vec<Point> = Vec::new();
    for p in contour.points() {
        if !distinct.contains(p) {
            distinct.push(*p);
        }
    }
    let curve = if distinct.len() < 4 {
        contour.points().to_vec()
    } else {
        let spline = ClosedBSpline::fit(contour.points(), smoothing)?;
        let mut dense = spline.polyline();
        // Begin the sweep at the curve point nearest the contour's start.
        let start = contour.points()[0];
        let first = dense
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.dist(start).total_cmp(&b.1.dist(start)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        dense.rotate_left(first);
        dense
    };
    Polygon::new_dedup(resample_closed(&curve, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(r: f64, n: usize) -> Polygon {
        Polygon::new(
            (0..n)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / n as f64;
                    Point::new(100.0 + r * a.cos(), 80.0 + r * a.sin())
                })
                .collect(),
        )
        .unwrap()
    }

    fn spacings(p: &Polygon) -> Vec<f64> {
        let pts = p.points();
        (0..pts.len()).map(|i| pts[i].dist(pts[(i + 1) % pts.len()])).collect()
    }

    #[test]
    fn basis_is_partition_of_unity() {
        for u in [0.0, 0.25, 0.5, 0.9] {
            assert!((basis(u).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn circle_samples_are_evenly_spaced() {
        let out = sample_uniform(&circle(50.0, 360), 200, 1.0).unwrap();
        assert_eq!(out.len(), 200);
        let d = spacings(&out);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!((mean - 2.0 * 50.0 * (std::f64::consts::PI / 200.0).sin()).abs() < 0.02);
        for s in &d {
            assert!((s - mean).abs() / mean < 0.02, "spacing {s} vs {mean}");
        }
        for p in out.points() {
            let r = (p.x - 100.0).hypot(p.y - 80.0);
            assert!((r - 50.0).abs() < 0.5);
        }
    }

    #[test]
    fn four_samples_on_square_stay_near_boundary() {
        let sq = Polygon::rectangle(10.0, 10.0, 30.0, 30.0).unwrap();
        let out = sample_uniform(&sq, 4, 1.0).unwrap();
        assert_eq!(out.len(), 4);
        for p in out.points() {
            assert!(sq.distance_to_boundary(*p) <= 1.5, "{p:?}");
        }
    }

    #[test]
    fn triangle_falls_back_to_linear_resampling() {
        let tri = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.0),
            Point::new(0.0, 3.0),
        ])
        .unwrap();
        let out = sample_uniform(&tri, 12, 1.0).unwrap();
        assert_eq!(out.len(), 12);
        for p in out.points() {
            assert!(tri.distance_to_boundary(*p) < 1e-12);
        }
        let d = spacings(&out);
        for s in &d {
            assert!((s - 1.0).abs() < 1e-9 || *s < 1.0);
        }
    }
}
