//! Synthetic region corpus: one filled shape per tight crop, coloured by
//! region class, over a textured grey background.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom::{resample_closed, BinaryMask, Point, Polygon};
use crate::mcnn::RegionClass;
use crate::tensor::Tensor;

/// Fill colour of each class, in class order.
pub const CLASS_COLOURS: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.55, 0.90],
    [0.20, 0.70, 0.25],
    [0.95, 0.75, 0.10],
    [0.60, 0.20, 0.75],
    [0.95, 0.45, 0.75],
    [0.10, 0.15, 0.35],
    [0.45, 0.30, 0.10],
];

/// Vertex count of generated ground-truth polygons.
pub const GT_VERTICES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Superellipse,
    WavyRibbon,
    NotchedRectangle,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [
        ShapeFamily::Ellipse,
        ShapeFamily::Superellipse,
        ShapeFamily::WavyRibbon,
        ShapeFamily::NotchedRectangle,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub count: usize,
    pub min_height: usize,
    pub max_height: usize,
    pub max_width: usize,
    /// Widest width:height ratio; ratios are spread log-uniformly from 1.
    pub max_aspect: f64,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 400,
            min_height: 20,
            max_height: 40,
            max_width: 1024,
            max_aspect: 6.0,
            noise: 0.04,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_height < 8 || self.min_height > self.max_height || self.max_height > 128 {
            return invalid("heights must satisfy 8 <= min_height <= max_height <= 128");
        }
        if !(self.max_aspect >= 1.0 && self.max_aspect <= 16.0) {
            return invalid("max_aspect must lie in [1, 16]");
        }
        if self.max_width < 8 || self.max_width > 1024 {
            return invalid("max_width must lie in [8, 1024]");
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return invalid("noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3,H,W]`, values multiples of 1/255 in `[0, 1]`.
    pub image: Tensor,
    pub mask: BinaryMask,
    pub polygon: Polygon,
    pub class: RegionClass,
    /// Known for generated samples only.
    pub family: Option<ShapeFamily>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Generates `spec.count` samples; bit-identical for a fixed seed.
///
/// Aspect ratios are stratified over the samples so both `1:1` and
/// `1:max_aspect` (subject to `max_width`) occur.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let n = spec.count;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let samples = crate::parallel::map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let u = if n > 1 { order[i] as f64 / (n - 1) as f64 } else { 0.0 };
        let aspect = spec.max_aspect.powf(u);
        let h = rng.gen_range(spec.min_height..=spec.max_height);
        let w = ((h as f64 * aspect).round() as usize).clamp(8, spec.max_width);
        let class = RegionClass::ALL[rng.gen_range(0..8)];
        let family = ShapeFamily::ALL[rng.gen_range(0..4)];
        render_sample(format!("s{i:05}"), family, class, h, w, spec.noise, &mut rng)
    });
    samples.into_iter().collect()
}

/// Draws one shape filling a `h×w` crop up to a small margin.
pub fn render_sample(
    id: String,
    family: ShapeFamily,
    class: RegionClass,
    h: usize,
    w: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let margin = |n: usize, rng: &mut ChaCha8Rng| (n as f64 * rng.gen_range(0.04..0.1)).max(1.5);
    let (mx, my) = (margin(w, rng), margin(h, rng));
    let (x0, y0, x1, y1) = (mx, my, w as f64 - mx, h as f64 - my);
    let outline = match family {
        ShapeFamily::Ellipse => superellipse(x0, y0, x1, y1, 2.0),
        ShapeFamily::Superellipse => superellipse(x0, y0, x1, y1, rng.gen_range(3.0..6.0)),
        ShapeFamily::WavyRibbon => wavy_ribbon(x0, y0, x1, y1, rng),
        ShapeFamily::NotchedRectangle => notched_rectangle(x0, y0, x1, y1, rng),
    };
    // Even vertex spacing, so vertex-based distances measure the shape and
    // not gaps in its sampling.
    let outline = if family == ShapeFamily::NotchedRectangle {
        outline
    } else {
        resample_closed(&outline, GT_VERTICES)
    };
    let polygon = Polygon::new_dedup(outline)?;
    let mask = BinaryMask::rasterize(&polygon, w, h);
    if mask.is_empty() {
        return invalid(format!("shape {id} rasterized to an empty mask"));
    }
    let image = paint(&mask, class, noise, rng);
    Ok(Sample {
        id,
        image,
        mask,
        polygon,
        class,
        family: Some(family),
    })
}

fn superellipse(x0: f64, y0: f64, x1: f64, y1: f64, exponent: f64) -> Vec<Point> {
    let (cx, cy, a, b) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0, (x1 - x0) / 2.0, (y1 - y0) / 2.0);
    let n = 8 * GT_VERTICES;
    (0..n)
        .map(|i| {
            let t = TAU * i as f64 / n as f64;
            let (c, s) = (t.cos(), t.sin());
            let e = 2.0 / exponent;
            Point::new(cx + a * c.signum() * c.abs().powf(e), cy + b * s.signum() * s.abs().powf(e))
        })
        .collect()
}

fn wavy_ribbon(x0: f64, y0: f64, x1: f64, y1: f64, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let amp = (y1 - y0) * rng.gen_range(0.08..0.18);
    let waves = rng.gen_range(0.5..2.5) * ((x1 - x0) / (y1 - y0)).max(1.0).sqrt();
    let phase = rng.gen_range(0.0..TAU);
    let per_edge = 4 * GT_VERTICES;
    let edge = |y_base: f64, sign: f64, i: usize| {
        let t = i as f64 / (per_edge - 1) as f64;
        let x = x0 + t * (x1 - x0);
        Point::new(x, y_base + sign * amp * (1.0 - (TAU * waves * t + phase).sin()))
    };
    let mut pts: Vec<Point> = (0..per_edge).map(|i| edge(y0, 1.0, i)).collect();
    pts.extend((0..per_edge).rev().map(|i| edge(y1, -1.0, i)));
    pts
}

fn notched_rectangle(x0: f64, y0: f64, x1: f64, y1: f64, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let (w, h) = (x1 - x0, y1 - y0);
    let depth = h * rng.gen_range(0.2..0.35);
    let notch_w = (w * rng.gen_range(0.08..0.2)).max(2.0);
    let top = x0 + rng.gen_range(0.15..0.85 - notch_w / w) * w;
    let bottom = x0 + rng.gen_range(0.15..0.85 - notch_w / w) * w;
    // Clockwise on screen: along the top with a notch, down, back along the
    // bottom with a notch, up.
    let corners = [
        Point::new(x0, y0),
        Point::new(top, y0),
        Point::new(top, y0 + depth),
        Point::new(top + notch_w, y0 + depth),
        Point::new(top + notch_w, y0),
        Point::new(x1, y0),
        Point::new(x1, y1),
        Point::new(bottom + notch_w, y1),
        Point::new(bottom + notch_w, y1 - depth),
        Point::new(bottom, y1 - depth),
        Point::new(bottom, y1),
        Point::new(x0, y1),
    ];
    densify_by_length(&corners, GT_VERTICES)
}

/// Subdivides each edge in proportion to its length, keeping every corner.
fn densify_by_length(corners: &[Point], target: usize) -> Vec<Point> {
    let n = corners.len();
    let perimeter: f64 = (0..n).map(|i| corners[i].dist(corners[(i + 1) % n])).sum();
    let mut out = Vec::with_capacity(target + n);
    for i in 0..n {
        let (a, b) = (corners[i], corners[(i + 1) % n]);
        let pieces = ((target as f64 * a.dist(b) / perimeter).round() as usize).max(1);
        for k in 0..pieces {
            let t = k as f64 / pieces as f64;
            out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
        }
    }
    out
}

/// Renders the mask with the class colour over a grey background with
/// low-frequency shading, then adds pixel noise and quantizes to 8 bits.
fn paint(mask: &BinaryMask, class: RegionClass, noise: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let (w, h) = (mask.width(), mask.height());
    let grey = rng.gen_range(0.6..0.8);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.01..0.06),
                rng.gen_range(-PI..PI),
                rng.gen_range(0.02..0.3),
                rng.gen_range(0.0..TAU),
            )
        })
        .collect();
    let colour = CLASS_COLOURS[class.index()];
    let shade = rng.gen_range(-0.06..0.06);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let texture: f64 = waves
                .iter()
                .map(|&(amp, dir, freq, phase)| {
                    amp * ((x as f64 * dir.cos() + y as f64 * dir.sin()) * freq + phase).sin()
                })
                .sum();
            let on = mask.get(x, y);
            for c in 0..3 {
                let base = if on { colour[c] + shade } else { grey };
                let v = base + texture + noise * gaussian(rng);
                data[(c * h + y) * w + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("numel matches dims")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Train / validation / test partition by position.
pub fn split(samples: Vec<Sample>, train: usize, val: usize) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let mut it = samples.into_iter();
    let a: Vec<Sample> = it.by_ref().take(train).collect();
    let b: Vec<Sample> = it.by_ref().take(val).collect();
    (a, b, it.collect())
}
