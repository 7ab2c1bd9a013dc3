//! Contour graph refiner: boundary points sample the skip feature map, a
//! residual graph-convolution stack over a k-hop ring predicts per-point
//! displacements, and the pass repeats on the moved points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::geom::{Point, Polygon};
use crate::mcnn::SKIP_CHANNELS;
use crate::params::{Bound, ParamSet};
use crate::tensor::{Backward, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgcnConfig {
    /// Ring neighbours on each side of a node.
    pub hop_k: usize,
    pub num_res_blocks: usize,
    pub hidden_dim: usize,
    pub iterations: usize,
    /// Points per contour edge when densifying for the contour loss.
    pub interp_factor: usize,
    /// Append normalized point coordinates to the sampled features.
    pub coord_features: bool,
    /// Stop early once the mean absolute displacement (normalized units)
    /// drops below this.
    pub stop_epsilon: Option<f64>,
}

impl Default for AgcnConfig {
    fn default() -> Self {
        Self {
            hop_k: 10,
            num_res_blocks: 6,
            hidden_dim: 64,
            iterations: 2,
            interp_factor: 10,
            coord_features: true,
            stop_epsilon: None,
        }
    }
}

impl AgcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_k == 0 || self.hidden_dim == 0 || self.iterations == 0 || self.interp_factor == 0 {
            return invalid("hop_k, hidden_dim, iterations and interp_factor must be positive");
        }
        Ok(())
    }

    /// Node feature width.
    pub fn feature_dim(&self) -> usize {
        SKIP_CHANNELS + if self.coord_features { 2 } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgcnWeights {
    pub config: AgcnConfig,
    pub params: ParamSet,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    use rand::Rng;
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("numel matches dims")
}

/// Random graph layers and a zero displacement head.
pub fn init_weights(config: &AgcnConfig, seed: u64) -> Result<AgcnWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden_dim;
    let mut p = ParamSet::new();
    p.insert("gcn_in.w", glorot(&mut rng, config.feature_dim(), h));
    for i in 0..config.num_res_blocks {
        p.insert(format!("res{i}.w"), glorot(&mut rng, h, h));
    }
    p.insert("gcn_out.w", glorot(&mut rng, h, h));
    p.insert("fc.w", Tensor::zeros(&[h, 2]));
    p.insert("fc.b", Tensor::zeros(&[2]));
    Ok(AgcnWeights {
        config: config.clone(),
        params: p,
    })
}

/// Dense `m×m` ring adjacency: `A[i][j] = 1` iff the cyclic distance of
/// `i` and `j` lies in `1..=k`.
pub fn ring_adjacency(m: usize, k: usize) -> Result<Vec<f64>> {
    if m <= 2 * k {
        return invalid(format!("{m} nodes cannot carry {k} ring neighbours per side"));
    }
    let mut a = vec![0.0; m * m];
    for i in 0..m {
        for d in 1..=k {
            a[i * m + (i + d) % m] = 1.0;
            a[i * m + (i + m - d) % m] = 1.0;
        }
    }
    Ok(a)
}

/// `D^-1/2 (A + I) D^-1/2` for a dense square `a`.
pub fn normalize_adjacency(a: &[f64], m: usize) -> Result<Vec<f64>> {
    if a.len() != m * m {
        return shape_err(format!("adjacency has {} entries, expected {m}x{m}", a.len()));
    }
    let mut hat = a.to_vec();
    for i in 0..m {
        hat[i * m + i] += 1.0;
    }
    let inv: Vec<f64> = (0..m)
        .map(|i| 1.0 / hat[i * m..(i + 1) * m].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..m {
        for j in 0..m {
            hat[i * m + j] *= inv[i] * inv[j];
        }
    }
    Ok(hat)
}

/// Bilinear lookup of a `[C,h,w]` half-resolution map at full-resolution
/// pixel positions. Position `(x, y)` maps to cell coordinate
/// `(x/2 - 0.5, y/2 - 0.5)`, clamped to the map.
struct BilinearSample {
    taps: Vec<Taps>,
}

#[derive(Clone, Copy)]
struct Taps {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// `d cell / d pixel` per axis; zero where clamped.
    dx: f64,
    dy: f64,
}

fn taps(x: f64, y: f64, h: usize, w: usize) -> Taps {
    let axis = |p: f64, n: usize| -> (usize, usize, f64, f64) {
        let u = p / 2.0 - 0.5;
        let max = (n - 1) as f64;
        let (u, d) = if u <= 0.0 {
            (0.0, 0.0)
        } else if u >= max {
            (max, 0.0)
        } else {
            (u, 0.5)
        };
        let i0 = (u.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64, d)
    };
    let (x0, x1, fx, dx) = axis(x, w);
    let (y0, y1, fy, dy) = axis(y, h);
    Taps { x0, y0, x1, y1, fx, fy, dx, dy }
}

impl Backward for BilinearSample {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let fmap = inputs[0];
        let (c, h, w) = (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]);
        let f = fmap.data();
        let mut gmap = vec![0.0; f.len()];
        let mut gpts = vec![0.0; 2 * self.taps.len()];
        for (m, t) in self.taps.iter().enumerate() {
            let (mut gu, mut gv) = (0.0, 0.0);
            for ch in 0..c {
                let base = ch * h * w;
                let at = |x: usize, y: usize| base + y * w + x;
                let go = g[m * c + ch];
                let (f00, f10, f01, f11) = (
                    f[at(t.x0, t.y0)],
                    f[at(t.x1, t.y0)],
                    f[at(t.x0, t.y1)],
                    f[at(t.x1, t.y1)],
                );
                gmap[at(t.x0, t.y0)] += go * (1.0 - t.fx) * (1.0 - t.fy);
                gmap[at(t.x1, t.y0)] += go * t.fx * (1.0 - t.fy);
                gmap[at(t.x0, t.y1)] += go * (1.0 - t.fx) * t.fy;
                gmap[at(t.x1, t.y1)] += go * t.fx * t.fy;
                gu += go * ((1.0 - t.fy) * (f10 - f00) + t.fy * (f11 - f01));
                gv += go * ((1.0 - t.fx) * (f01 - f00) + t.fx * (f11 - f10));
            }
            gpts[2 * m] = gu * t.dx;
            gpts[2 * m + 1] = gv * t.dy;
        }
        vec![Some(gmap), Some(gpts)]
    }
}

/// Samples `fmap: [C,h,w]` at `points: [M,2]` (full-resolution pixels),
/// giving `[M,C]`; differentiable in both inputs.
pub fn sample_features(tape: &mut Tape, fmap: Var, points: Var) -> Result<Var> {
    let [c, h, w] = *tape.shape(fmap) else {
        return shape_err(format!("feature map must be [C,h,w], got {:?}", tape.shape(fmap)));
    };
    let [m, 2] = *tape.shape(points) else {
        return shape_err(format!("points must be [M,2], got {:?}", tape.shape(points)));
    };
    let f = tape.data(fmap);
    let taps: Vec<Taps> = tape
        .data(points)
        .chunks(2)
        .map(|p| taps(p[0], p[1], h, w))
        .collect();
    let mut out = Vec::with_capacity(m * c);
    for t in &taps {
        for ch in 0..c {
            let base = ch * h * w;
            let v = |x: usize, y: usize| f[base + y * w + x];
            out.push(
                (1.0 - t.fy) * ((1.0 - t.fx) * v(t.x0, t.y0) + t.fx * v(t.x1, t.y0))
                    + t.fy * ((1.0 - t.fx) * v(t.x0, t.y1) + t.fx * v(t.x1, t.y1)),
            );
        }
    }
    let out = Tensor::new(&[m, c], out)?;
    Ok(tape.custom(&[fmap, points], out, BilinearSample { taps }))
}

/// Graph inputs assembled on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    /// `[M,s]` node features.
    pub features: Var,
    /// `[M,M]` normalized adjacency (constant).
    pub adjacency: Var,
}

/// Records node features (sampled skip features, optionally followed by
/// `(x/W, y/H)`) and the normalized ring adjacency for `points: [M,2]`.
pub fn graph_on_tape(
    tape: &mut Tape,
    config: &AgcnConfig,
    fmap: Var,
    points: Var,
    crop: (usize, usize),
) -> Result<GraphVars> {
    let m = tape.shape(points)[0];
    let a = ring_adjacency(m, config.hop_k)?;
    let hat = normalize_adjacency(&a, m)?;
    let adjacency = tape.constant(Tensor::new(&[m, m], hat)?);
    let sampled = sample_features(tape, fmap, points)?;
    let features = if config.coord_features {
        let (h, w) = crop;
        let scale = (0..m).flat_map(|_| [1.0 / w as f64, 1.0 / h as f64]).collect();
        let norm = tape.mul_const(points, scale)?;
        tape.concat_cols(&[sampled, norm])?
    } else {
        sampled
    };
    Ok(GraphVars {
        features,
        adjacency,
    })
}

/// Contour graph in plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourGraph {
    /// `[M,s]`.
    pub features: Tensor,
    /// Binary `M×M` ring adjacency, row-major.
    pub adjacency: Vec<f64>,
    pub points: Vec<Point>,
}

pub fn build_graph(
    points: &[Point],
    skip_features: &Tensor,
    crop: (usize, usize),
    config: &AgcnConfig,
) -> Result<ContourGraph> {
    let mut tape = Tape::new();
    let fmap = tape.constant(skip_features.clone());
    let pts = tape.constant(points_tensor(points)?);
    let g = graph_on_tape(&mut tape, config, fmap, pts, crop)?;
    Ok(ContourGraph {
        features: tape.value(g.features).clone(),
        adjacency: ring_adjacency(points.len(), config.hop_k)?,
        points: points.to_vec(),
    })
}

/// `relu(Â·H·W)`.
pub fn gcn_layer(tape: &mut Tape, a_hat: Var, h: Var, w: Var) -> Result<Var> {
    let agg = tape.matmul(a_hat, h)?;
    let z = tape.matmul(agg, w)?;
    Ok(tape.relu(z))
}

/// `relu(Â·H·W) + H` for square `W`.
pub fn res_gcn_layer(tape: &mut Tape, a_hat: Var, h: Var, w: Var) -> Result<Var> {
    let s = tape.shape(w);
    if s.len() != 2 || s[0] != s[1] {
        return shape_err(format!("residual graph layer needs a square weight, got {s:?}"));
    }
    let f = gcn_layer(tape, a_hat, h, w)?;
    tape.add(f, h)
}

/// Per-node displacements `[M,2]` in normalized units.
pub fn agcn_forward(tape: &mut Tape, b: &Bound, config: &AgcnConfig, graph: GraphVars) -> Result<Var> {
    let a = graph.adjacency;
    let mut h = gcn_layer(tape, a, graph.features, b.var("gcn_in.w")?)?;
    for i in 0..config.num_res_blocks {
        h = res_gcn_layer(tape, a, h, b.var(&format!("res{i}.w"))?)?;
    }
    h = gcn_layer(tape, a, h, b.var("gcn_out.w")?)?;
    let d = tape.matmul(h, b.var("fc.w")?)?;
    tape.add_row_bias(d, b.var("fc.b")?)
}

/// Runs the refinement passes; returns the point variable after each pass.
pub fn refine_on_tape(
    tape: &mut Tape,
    b: &Bound,
    config: &AgcnConfig,
    fmap: Var,
    points: Var,
    crop: (usize, usize),
) -> Result<Vec<Var>> {
    let (h, w) = crop;
    let m = tape.shape(points)[0];
    let denorm: Vec<f64> = (0..m).flat_map(|_| [w as f64, h as f64]).collect();
    let mut cur = points;
    let mut passes = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let graph = graph_on_tape(tape, config, fmap, cur, crop)?;
        let disp = agcn_forward(tape, b, config, graph)?;
        let step = tape.mul_const(disp, denorm.clone())?;
        cur = tape.add(cur, step)?;
        passes.push(cur);
        if let Some(eps) = config.stop_epsilon {
            let d = tape.data(disp);
            if d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64 <= eps {
                break;
            }
        }
    }
    Ok(passes)
}

pub fn points_tensor(points: &[Point]) -> Result<Tensor> {
    Tensor::new(&[points.len(), 2], points.iter().flat_map(|p| [p.x, p.y]).collect())
}

pub fn tensor_points(t: &[f64]) -> Vec<Point> {
    t.chunks(2).map(|c| Point::new(c[0], c[1])).collect()
}

/// Refined copy of `points`, clamped to the crop and canonicalized.
pub fn refine(
    points: &Polygon,
    skip_features: &Tensor,
    weights: &AgcnWeights,
    crop: (usize, usize),
) -> Result<Polygon> {
    let mut tape = Tape::new();
    let b = weights.params.bind(&mut tape, |_| false);
    let fmap = tape.constant(skip_features.clone());
    let pts = tape.constant(points_tensor(points.points())?);
    let passes = refine_on_tape(&mut tape, &b, &weights.config, fmap, pts, crop)?;
    let last = *passes.last().expect("at least one pass");
    Polygon::new_dedup(clamp_to_crop(tensor_points(tape.data(last)), crop))
}

pub fn clamp_to_crop(points: Vec<Point>, (h, w): (usize, usize)) -> Vec<Point> {
    points
        .into_iter()
        .map(|p| Point::new(p.x.clamp(0.0, w as f64), p.y.clamp(0.0, h as f64)))
        .collect()
}

/// Densifies a closed polyline: each edge contributes its start point and
/// `factor - 1` evenly spaced interior points.
pub fn interpolate_contour(points: &[Point], factor: usize) -> Result<Vec<Point>> {
    if factor == 0 {
        return invalid("interpolation factor must be positive");
    }
    let n = points.len();
    let mut out = Vec::with_capacity(n * factor);
    for i in 0..n {
        let (a, b) = (points[i], points[(i + 1) % n]);
        for s in 0..factor {
            let t = s as f64 / factor as f64;
            out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
        }
    }
    Ok(out)
}

struct Interpolate {
    factor: usize,
}

impl Backward for Interpolate {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = inputs[0].shape()[0];
        let mut d = vec![0.0; 2 * n];
        for i in 0..n {
            let j = (i + 1) % n;
            for s in 0..self.factor {
                let t = s as f64 / self.factor as f64;
                let o = 2 * (i * self.factor + s);
                for k in 0..2 {
                    d[2 * i + k] += (1.0 - t) * g[o + k];
                    d[2 * j + k] += t * g[o + k];
                }
            }
        }
        vec![Some(d)]
    }
}

/// Tape version of [`interpolate_contour`] on `[M,2]`.
pub fn interpolate_on_tape(tape: &mut Tape, points: Var, factor: usize) -> Result<Var> {
    let [m, 2] = *tape.shape(points) else {
        return shape_err(format!("points must be [M,2], got {:?}", tape.shape(points)));
    };
    let dense = interpolate_contour(&tensor_points(tape.data(points)), factor)?;
    let out = points_tensor(&dense)?;
    debug_assert_eq!(out.shape()[0], m * factor);
    Ok(tape.custom(&[points], out, Interpolate { factor }))
}
