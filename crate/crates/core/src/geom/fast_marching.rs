//! Boundary-proximity weight maps for the mask loss.
//!
//! Boundary pixels (foreground with a background 4-neighbour) sit at level 0.
//! Peeling the foreground by successive erosions assigns interior pixels
//! levels 1, 2, ...; growing it by successive dilations assigns exterior
//! pixels levels 1, 2, .... Both use the radius-1 disk, so a pixel's level is
//! its city-block distance to the other side of the boundary (minus one
//! inside). The levels are inverted against their maximum and normalized
//! into `Ψ ∈ [0, 1]`, which is exactly 1 on the boundary.
//!
//! The levels are computed with a multi-source breadth-first front rather
//! than by repeated morphology; both give identical integers.

use std::collections::VecDeque;

use super::mask::{BinaryMask, NEIGHBOURS_4};
use crate::error::{invalid, Result};

/// Normalized, inverted level map `Ψ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    width: usize,
    height: usize,
    psi: Vec<f64>,
}

impl DistanceMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    /// All-zero map; weighting by it leaves a loss unchanged.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            psi: vec![0.0; width * height],
        }
    }
}

/// Integer level of every pixel (row-major).
pub fn fast_marching_levels(mask: &BinaryMask) -> Result<Vec<u32>> {
    let fg = mask.count();
    let total = mask.width() * mask.height();
    if fg == 0 || fg == total {
        return invalid("fast marching map needs both foreground and background pixels");
    }
    let to_bg = front_distance(mask, false);
    let to_fg = front_distance(mask, true);
    Ok(mask
        .bits()
        .iter()
        .enumerate()
        .map(|(i, &on)| if on { to_bg[i] - 1 } else { to_fg[i] })
        .collect())
}

/// City-block distance from every pixel to the nearest pixel whose value is
/// `seed_value`, propagating through the grid only.
fn front_distance(mask: &BinaryMask, seed_value: bool) -> Vec<u32> {
    let (w, h) = (mask.width(), mask.height());
    let mut dist = vec![u32::MAX; w * h];
    let mut queue = VecDeque::new();
    for (i, &b) in mask.bits().iter().enumerate() {
        if b == seed_value {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for (dx, dy) in NEIGHBOURS_4 {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if dist[j] == u32::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    dist
}

/// Builds `Ψ` for a ground-truth mask.
pub fn fast_marching_map(mask: &BinaryMask) -> Result<DistanceMap> {
    let levels = fast_marching_levels(mask)?;
    let max = *levels.iter().max().expect("non-empty") as f64;
    let psi = levels.iter().map(|&l| (max - l as f64) / max).collect();
    Ok(DistanceMap {
        width: mask.width(),
        height: mask.height(),
        psi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::mask::Structuring;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Level oracle by literal repeated erosion and dilation.
    pub(crate) fn morphology_levels(mask: &BinaryMask) -> Vec<u32> {
        let mut levels = vec![0u32; mask.bits().len()];
        let mut current = mask.clone();
        let mut n = 0;
        while !current.is_empty() {
            let next = current.erode(Structuring::Disk3);
            for (i, (&a, &b)) in current.bits().iter().zip(next.bits()).enumerate() {
                if a && !b {
                    levels[i] = n;
                }
            }
            current = next;
            n += 1;
        }
        let mut grown = mask.clone();
        let mut n = 1;
        while grown.count() < grown.bits().len() {
            let next = grown.dilate(Structuring::Disk3);
            for (i, (&a, &b)) in grown.bits().iter().zip(next.bits()).enumerate() {
                if b && !a {
                    levels[i] = n;
                }
            }
            grown = next;
            n += 1;
        }
        levels
    }

    #[test]
    fn five_by_five_square_example() {
        let m = BinaryMask::from_fn(5, 5, |x, y| (1..4).contains(&x) && (1..4).contains(&y));
        let levels = fast_marching_levels(&m).unwrap();
        #[rustfmt::skip]
        let want = [
            2, 1, 1, 1, 2,
            1, 0, 0, 0, 1,
            1, 0, 1, 0, 1,
            1, 0, 0, 0, 1,
            2, 1, 1, 1, 2,
        ];
        assert_eq!(levels, want);
        assert_eq!(morphology_levels(&m), want);
        let psi = fast_marching_map(&m).unwrap();
        for (p, l) in psi.psi().iter().zip(want) {
            assert_eq!(*p, [1.0, 0.5, 0.0][l as usize]);
        }
    }

    #[test]
    fn matches_morphology_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let density = rng.gen_range(0.05..0.95);
            let bits = (0..24 * 19).map(|_| rng.gen_bool(density)).collect();
            let m = BinaryMask::from_bits(24, 19, bits).unwrap();
            if m.count() == 0 || m.count() == m.bits().len() {
                continue;
            }
            assert_eq!(fast_marching_levels(&m).unwrap(), morphology_levels(&m));
        }
    }

    #[test]
    fn boundary_pixels_have_unit_weight() {
        let m = BinaryMask::from_fn(30, 20, |x, y| {
            let (dx, dy) = (x as f64 - 14.0, y as f64 - 9.0);
            dx * dx / 100.0 + dy * dy / 36.0 <= 1.0
        });
        let psi = fast_marching_map(&m).unwrap();
        for y in 0..20 {
            for x in 0..30 {
                let p = psi.psi()[y * 30 + x];
                assert!((0.0..=1.0).contains(&p));
                assert_eq!(p == 1.0, m.is_boundary(x, y), "pixel {x},{y}");
            }
        }
        assert!(psi.psi().contains(&0.0));
    }

    #[test]
    fn rejects_uniform_masks() {
        assert!(fast_marching_map(&BinaryMask::new(4, 4)).is_err());
        assert!(fast_marching_map(&BinaryMask::from_fn(4, 4, |_, _| true)).is_err());
    }
}
