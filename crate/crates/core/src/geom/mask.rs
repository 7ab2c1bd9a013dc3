use std::collections::VecDeque;

use super::polygon::{Point, Polygon};
use crate::error::{invalid, Result};

/// Row-major boolean grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

/// 3×3 structuring elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structuring {
    /// Radius-1 disk: the centre and its four edge neighbours.
    Disk3,
    /// Full 3×3 square.
    Square3,
}

impl Structuring {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Structuring::Disk3 => &[(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)],
            Structuring::Square3 => &[
                (-1, -1),
                (0, -1),
                (1, -1),
                (-1, 0),
                (0, 0),
                (1, 0),
                (-1, 1),
                (0, 1),
                (1, 1),
            ],
        }
    }
}

pub(crate) const NEIGHBOURS_4: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
pub(crate) const NEIGHBOURS_8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return invalid(format!(
                "mask of {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            ));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Pixels whose centres fall inside `polygon`.
    pub fn rasterize(polygon: &Polygon, width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |x, y| {
            polygon.contains(Point::new(x as f64 + 0.5, y as f64 + 0.5))
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Value at a signed position; `None` outside the grid.
    pub fn get_signed(&self, x: isize, y: isize) -> Option<bool> {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            None
        } else {
            Some(self.bits[y as usize * self.width + x as usize])
        }
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        debug_assert_eq!((self.width, self.height), (other.width, other.height));
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    /// Foreground pixels with at least one background 4-neighbour inside
    /// the grid.
    pub fn is_boundary(&self, x: usize, y: usize) -> bool {
        self.get(x, y)
            && NEIGHBOURS_4.iter().any(|(dx, dy)| {
                self.get_signed(x as isize + dx, y as isize + dy) == Some(false)
            })
    }

    /// Dilation; pixels outside the grid count as background.
    pub fn dilate(&self, se: Structuring) -> BinaryMask {
        self.morph(se, false)
    }

    /// Erosion; pixels outside the grid count as foreground.
    pub fn erode(&self, se: Structuring) -> BinaryMask {
        self.morph(se, true)
    }

    // Erosion is "all covered pixels set", dilation "any covered pixel set".
    // The out-of-grid value equals the operator's identity, which keeps the
    // pair adjoint and the closing idempotent.
    fn morph(&self, se: Structuring, erosion: bool) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| {
            let mut covered = se.offsets().iter().map(|(dx, dy)| {
                self.get_signed(x as isize + dx, y as isize + dy)
                    .unwrap_or(erosion)
            });
            if erosion {
                covered.all(|v| v)
            } else {
                covered.any(|v| v)
            }
        })
    }

    /// Morphological closing (dilation followed by erosion).
    pub fn close(&self, se: Structuring) -> BinaryMask {
        self.dilate(se).erode(se)
    }

    /// 8-connected foreground components in raster order of their first pixel.
    pub fn components(&self) -> Vec<Component> {
        let mut label = vec![usize::MAX; self.bits.len()];
        let mut out = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || label[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut pixels = Vec::new();
            let mut queue = VecDeque::from([start]);
            label[start] = id;
            while let Some(i) = queue.pop_front() {
                let (x, y) = (i % self.width, i / self.width);
                pixels.push((x, y));
                for (dx, dy) in NEIGHBOURS_8 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if self.get_signed(nx, ny) == Some(true) {
                        let j = ny as usize * self.width + nx as usize;
                        if label[j] == usize::MAX {
                            label[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
            out.push(Component::from_pixels(pixels));
        }
        out
    }

    /// Mask holding only the pixels of `component`.
    pub fn from_component(width: usize, height: usize, component: &Component) -> Self {
        let mut m = Self::new(width, height);
        for &(x, y) in &component.pixels {
            m.set(x, y, true);
        }
        m
    }
}

/// One 8-connected foreground region.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
    /// Mean `(col, row)` pixel index.
    pub centroid: (f64, f64),
}

impl Component {
    fn from_pixels(mut pixels: Vec<(usize, usize)>) -> Self {
        pixels.sort_by_key(|&(x, y)| (y, x));
        let n = pixels.len() as f64;
        let (sx, sy) = pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
        Self {
            pixels,
            centroid: (sx / n, sy / n),
        }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Binarizes a row-major probability map with `prob >= t`.
pub fn threshold(prob: &[f64], width: usize, height: usize, t: f64) -> Result<BinaryMask> {
    BinaryMask::from_bits(width, height, prob.iter().map(|p| *p >= t).collect())
}

/// Components whose area is at least `area_fraction` of the largest one.
pub fn major_components(mask: &BinaryMask, area_fraction: f64) -> Vec<Component> {
    let comps = mask.components();
    let Some(max_area) = comps.iter().map(Component::area).max() else {
        return Vec::new();
    };
    let min_area = area_fraction * max_area as f64;
    comps
        .into_iter()
        .filter(|c| c.area() as f64 >= min_area)
        .collect()
}

/// Thickness of the joining band for a crop of height `image_height`.
pub fn band_thickness(image_height: usize) -> usize {
    ((image_height as f64 / 7.0).round() as usize).max(1)
}

/// Sets the pixels covered by a band of `thickness` pixels centred on the
/// segment from `a` to `b` (pixel-index coordinates). Across the band, offsets in
/// `[-t/2, t/2)` are covered, so a horizontal band is exactly `t` rows tall.
pub fn draw_band(mask: &mut BinaryMask, a: (f64, f64), b: (f64, f64), thickness: usize) {
    let t = thickness as f64;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = dx.hypot(dy);
    let half = t / 2.0;
    let (x0, x1) = (a.0.min(b.0) - t, a.0.max(b.0) + t);
    let (y0, y1) = (a.1.min(b.1) - t, a.1.max(b.1) + t);
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    for y in (y0.floor() as isize).max(0)..=(y1.ceil() as isize).min(h - 1) {
        for x in (x0.floor() as isize).max(0)..=(x1.ceil() as isize).min(w - 1) {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let inside = if len == 0.0 {
                px >= -half && px < half && py >= -half && py < half
            } else {
                let along = (px * dx + py * dy) / len;
                // Normal pointing to the left of the direction of travel.
                let across = (px * -dy + py * dx) / len;
                along >= 0.0 && along <= len && across >= -half && across < half
            };
            if inside {
                mask.set(x as usize, y as usize, true);
            }
        }
    }
}

/// Unites `components` into one region: their union plus bands joining
/// consecutive centroids (ordered by centroid x, then y). Any region still
/// detached afterwards is joined to the largest region through the closest
/// pixel pair.
pub fn connect_components(
    components: &[Component],
    width: usize,
    height: usize,
    image_height: usize,
) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    for c in components {
        for &(x, y) in &c.pixels {
            mask.set(x, y, true);
        }
    }
    if components.len() < 2 {
        return mask;
    }
    let thickness = band_thickness(image_height);
    let mut order: Vec<&Component> = components.iter().collect();
    order.sort_by(|a, b| {
        a.centroid
            .0
            .total_cmp(&b.centroid.0)
            .then(a.centroid.1.total_cmp(&b.centroid.1))
    });
    for pair in order.windows(2) {
        draw_band(&mut mask, pair[0].centroid, pair[1].centroid, thickness);
    }
    loop {
        let mut comps = mask.components();
        if comps.len() <= 1 {
            return mask;
        }
        comps.sort_by_key(|c| std::cmp::Reverse(c.area()));
        let (main, rest) = comps.split_first().expect("non-empty");
        let other = &rest[0];
        let (mut best, mut pair) = (f64::INFINITY, ((0.0, 0.0), (0.0, 0.0)));
        for &(ax, ay) in &main.pixels {
            for &(bx, by) in &other.pixels {
                let d = (ax as f64 - bx as f64).hypot(ay as f64 - by as f64);
                if d < best {
                    best = d;
                    pair = ((ax as f64, ay as f64), (bx as f64, by as f64));
                }
            }
        }
        draw_band(&mut mask, pair.0, pair.1, thickness.max(2));
    }
}
