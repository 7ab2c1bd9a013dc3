//! Outer-boundary tracing along pixel edges.

use super::mask::BinaryMask;
use super::polygon::{Point, Polygon};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dir {
    Right,
    Down,
    Left,
    Up,
}

impl Dir {
    fn step(self) -> (isize, isize) {
        match self {
            Dir::Right => (1, 0),
            Dir::Down => (0, 1),
            Dir::Left => (-1, 0),
            Dir::Up => (0, -1),
        }
    }

    /// Clockwise on screen (y down).
    fn turn_right(self) -> Dir {
        match self {
            Dir::Right => Dir::Down,
            Dir::Down => Dir::Left,
            Dir::Left => Dir::Up,
            Dir::Up => Dir::Right,
        }
    }

    fn turn_left(self) -> Dir {
        match self {
            Dir::Right => Dir::Up,
            Dir::Up => Dir::Left,
            Dir::Left => Dir::Down,
            Dir::Down => Dir::Right,
        }
    }

    /// Pixels to the (left, right) of the edge leaving corner `(x, y)`.
    fn edge_pixels(self, x: isize, y: isize) -> ((isize, isize), (isize, isize)) {
        match self {
            Dir::Right => ((x, y - 1), (x, y)),
            Dir::Down => ((x, y), (x - 1, y)),
            Dir::Left => ((x - 1, y), (x - 1, y - 1)),
            Dir::Up => ((x - 1, y - 1), (x, y - 1)),
        }
    }
}

/// Traces the outer boundary of the region containing the topmost-leftmost
/// foreground pixel, following pixel edges with the region on the right.
/// Diagonally touching pixels count as connected. Vertices are pixel
/// corners, one per unit edge, so a `w×h` rectangle encloses exactly `w·h`.
pub fn trace_contour(mask: &BinaryMask) -> Result<Polygon> {
    let Some(first) = mask.bits().iter().position(|b| *b) else {
        return invalid("cannot trace an empty mask");
    };
    let fg = |(x, y): (isize, isize)| mask.get_signed(x, y) == Some(true);
    let start = ((first % mask.width()) as isize, (first / mask.width()) as isize);
    let mut pos = start;
    let mut dir = Dir::Right;
    let mut points = vec![Point::new(start.0 as f64, start.1 as f64)];
    let limit = 4 * (mask.width() + 1) * (mask.height() + 1);
    for _ in 0..limit {
        let (dx, dy) = dir.step();
        pos = (pos.0 + dx, pos.1 + dy);
        let (left, right) = dir.edge_pixels(pos.0, pos.1);
        dir = if fg(left) {
            dir.turn_left()
        } else if fg(right) {
            dir
        } else {
            dir.turn_right()
        };
        if pos == start && dir == Dir::Right {
            return Polygon::new(points);
        }
        points.push(Point::new(pos.0 as f64, pos.1 as f64));
    }
    invalid("contour trace did not close")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_pixel_traces_unit_square() {
        let mut m = BinaryMask::new(3, 3);
        m.set(1, 1, true);
        let p = trace_contour(&m).unwrap();
        let want: Vec<Point> = [(1.0, 1.0), (2.0, 1.0), (2.0, 2.0), (1.0, 2.0)]
            .iter()
            .map(|&(x, y)| Point::new(x, y))
            .collect();
        assert_eq!(p.points(), &want[..]);
    }

    #[test]
    fn rectangle_area_is_exact() {
        for (w, h) in [(1, 7), (5, 3), (30, 11)] {
            let m = BinaryMask::from_fn(40, 20, |x, y| (3..3 + w).contains(&x) && (2..2 + h).contains(&y));
            let p = trace_contour(&m).unwrap();
            assert_eq!(p.area(), (w * h) as f64);
            assert_eq!(p.len(), 2 * (w + h));
            assert!(p.is_simple());
        }
    }

    #[test]
    fn border_touching_region_uses_grid_edge() {
        let m = BinaryMask::from_fn(6, 4, |x, _| x < 3);
        let p = trace_contour(&m).unwrap();
        assert_eq!(p.area(), 12.0);
        assert_eq!(p.bounds(), (0.0, 0.0, 3.0, 4.0));
    }

    #[test]
    fn diagonal_neighbours_are_enclosed_together() {
        let mut m = BinaryMask::new(4, 4);
        m.set(1, 1, true);
        m.set(2, 2, true);
        let p = trace_contour(&m).unwrap();
        assert_eq!(p.area(), 2.0);
        assert_eq!(p.len(), 8);
    }

    #[test]
    fn solid_random_blobs_trace_simple_curves() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            // Boxes sharing pixel (10, 10): star-shaped, hence solid and
            // 4-connected.
            let boxes: Vec<(usize, usize, usize, usize)> = (0..4)
                .map(|_| {
                    let (w, h) = (rng.gen_range(2..10), rng.gen_range(2..10));
                    (10 - rng.gen_range(0..w), 10 - rng.gen_range(0..h), w, h)
                })
                .collect();
            let m = BinaryMask::from_fn(24, 24, |x, y| {
                boxes.iter().any(|&(bx, by, w, h)| {
                        (bx..bx + w).contains(&x) && (by..by + h).contains(&y)
                    })
            });
            let p = trace_contour(&m).unwrap();
            assert!(p.is_simple());
            assert_eq!(p.area(), m.count() as f64);
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        assert!(trace_contour(&BinaryMask::new(3, 3)).is_err());
    }
}
