//! Training objectives.
//!
//! Each loss has a plain function on slices and a tape-recorded variant with
//! an analytic vector-Jacobian product.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::geom::{BinaryMask, DistanceMap, Point};
use crate::tensor::{Backward, Tape, Tensor, Var};

/// Predictions are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focusing exponent of the focal loss.
    pub gamma: f64,
    /// Weight of the mask loss in the joint objective.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            lambda: 200.0,
        }
    }
}

/// Background-to-foreground pixel ratio `N_b / N_f`.
pub fn alpha_c(gt: &BinaryMask) -> Result<f64> {
    let fg = gt.count();
    if fg == 0 {
        return invalid("class weight needs at least one foreground pixel");
    }
    Ok((gt.bits().len() - fg) as f64 / fg as f64)
}

/// Per-pixel class-weighted binary focal loss
/// `-(α·y·(1-p)^γ·log p + (1-y)·p^γ·log(1-p))`.
pub fn focal_loss(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -p.powf(gamma) * (1.0 - p).ln()
    }
}

/// `d focal_loss / d p`; zero where the clamp is active.
pub fn focal_loss_derivative(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    if y {
        let q = 1.0 - p;
        let focus = if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p.ln()
        };
        alpha * (focus - q.powf(gamma) / p)
    } else {
        let q = 1.0 - p;
        let focus = if gamma == 0.0 {
            0.0
        } else {
            gamma * p.powf(gamma - 1.0) * q.ln()
        };
        -(focus - p.powf(gamma) / q)
    }
}

/// Focal loss map over a whole prediction.
pub fn focal_loss_map(pred: &[f64], gt: &[bool], alpha: f64, gamma: f64) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return shape_err(format!(
            "focal loss: {} predictions for {} labels",
            pred.len(),
            gt.len()
        ));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &y)| focal_loss(p, y, alpha, gamma))
        .collect())
}

/// Mean of `(1 + Ψ) ⊙ loss_map`.
pub fn fm_weighted_loss(loss_map: &[f64], psi: &DistanceMap) -> Result<f64> {
    if loss_map.len() != psi.psi().len() {
        return shape_err(format!(
            "fm weighting: loss map has {} values, distance map {}",
            loss_map.len(),
            psi.psi().len()
        ));
    }
    let total: f64 = loss_map
        .iter()
        .zip(psi.psi())
        .map(|(l, s)| (1.0 + s) * l)
        .sum();
    Ok(total / loss_map.len() as f64)
}

/// Hausdorff-style contour loss `0.5·(Σ_g min_b |g-b| + Σ_b min_g |g-b|)`.
pub fn hausdorff_loss(gt: &[Point], pred: &[Point]) -> Result<f64> {
    if gt.is_empty() || pred.is_empty() {
        return invalid("hausdorff loss needs two non-empty point sets");
    }
    let (e1, _) = nearest(gt, pred);
    let (e2, _) = nearest(pred, gt);
    Ok(0.5 * (e1.iter().sum::<f64>() + e2.iter().sum::<f64>()))
}

/// For each point of `from`, the distance to and index of its nearest point
/// in `to` (lowest index on ties).
fn nearest(from: &[Point], to: &[Point]) -> (Vec<f64>, Vec<usize>) {
    let pairs = crate::parallel::map_slice(from, |p| {
        let mut best = (f64::INFINITY, 0);
        for (j, q) in to.iter().enumerate() {
            let d = p.dist(*q);
            if d < best.0 {
                best = (d, j);
            }
        }
        best
    });
    pairs.into_iter().unzip()
}

/// `L_C + λ·L_FM`.
pub fn joint_loss(l_c: f64, l_fm: f64, lambda: f64) -> f64 {
    l_c + lambda * l_fm
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        ));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

struct FocalMapOp {
    gt: Vec<bool>,
    alpha: f64,
    gamma: f64,
}

impl Backward for FocalMapOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let d = inputs[0]
            .data()
            .iter()
            .zip(&self.gt)
            .zip(g)
            .map(|((&p, &y), gg)| gg * focal_loss_derivative(p, y, self.alpha, self.gamma))
            .collect();
        vec![Some(d)]
    }
}

/// Records the focal loss map of `pred` (any shape with one value per label).
pub fn focal_loss_map_var(
    tape: &mut Tape,
    pred: Var,
    gt: &BinaryMask,
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let map = focal_loss_map(tape.data(pred), gt.bits(), alpha, gamma)?;
    let out = Tensor::new(tape.shape(pred), map)?;
    Ok(tape.custom(
        &[pred],
        out,
        FocalMapOp {
            gt: gt.bits().to_vec(),
            alpha,
            gamma,
        },
    ))
}

/// Records `mean((1 + Ψ) ⊙ loss_map)`.
pub fn fm_weighted_loss_var(tape: &mut Tape, loss_map: Var, psi: &DistanceMap) -> Result<Var> {
    if tape.value(loss_map).numel() != psi.psi().len() {
        return shape_err(format!(
            "fm weighting: loss map has {} values, distance map {}",
            tape.value(loss_map).numel(),
            psi.psi().len()
        ));
    }
    let weights = psi.psi().iter().map(|s| 1.0 + s).collect();
    let weighted = tape.mul_const(loss_map, weights)?;
    Ok(tape.mean(weighted))
}

/// Full mask objective: class weight from `gt`, focal map, `Ψ` weighting.
pub fn mask_loss_var(
    tape: &mut Tape,
    pred: Var,
    gt: &BinaryMask,
    psi: &DistanceMap,
    gamma: f64,
) -> Result<Var> {
    let alpha = alpha_c(gt)?;
    let map = focal_loss_map_var(tape, pred, gt, alpha, gamma)?;
    fm_weighted_loss_var(tape, map, psi)
}

struct HausdorffOp {
    gt: Vec<Point>,
    /// Nearest prediction index for each ground-truth point.
    gt_to_pred: Vec<usize>,
    /// Nearest ground-truth index for each prediction.
    pred_to_gt: Vec<usize>,
}

impl Backward for HausdorffOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let pred = inputs[0].data();
        let mut d = vec![0.0; pred.len()];
        let mut pull = |j: usize, q: Point| {
            let (dx, dy) = (pred[2 * j] - q.x, pred[2 * j + 1] - q.y);
            let r = dx.hypot(dy);
            if r > 0.0 {
                d[2 * j] += 0.5 * g[0] * dx / r;
                d[2 * j + 1] += 0.5 * g[0] * dy / r;
            }
        };
        for (j, &i) in self.pred_to_gt.iter().enumerate() {
            pull(j, self.gt[i]);
        }
        for (i, &j) in self.gt_to_pred.iter().enumerate() {
            pull(j, self.gt[i]);
        }
        vec![Some(d)]
    }
}

/// Records the contour loss of predictions `pred: [N,2]` against `gt`.
pub fn hausdorff_loss_var(tape: &mut Tape, pred: Var, gt: &[Point]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] == 0 {
        return shape_err(format!("hausdorff loss: predictions must be [N,2], got {shape:?}"));
    }
    if gt.is_empty() {
        return invalid("hausdorff loss needs a non-empty ground-truth set");
    }
    let pts: Vec<Point> = tape
        .data(pred)
        .chunks(2)
        .map(|c| Point::new(c[0], c[1]))
        .collect();
    let (e1, gt_to_pred) = nearest(gt, &pts);
    let (e2, pred_to_gt) = nearest(&pts, gt);
    let value = 0.5 * (e1.iter().sum::<f64>() + e2.iter().sum::<f64>());
    Ok(tape.custom(
        &[pred],
        Tensor::scalar(value),
        HausdorffOp {
            gt: gt.to_vec(),
            gt_to_pred,
            pred_to_gt,
        },
    ))
}

/// Records `l_c + λ·l_fm`.
pub fn joint_loss_var(tape: &mut Tape, l_c: Var, l_fm: Var, lambda: f64) -> Result<Var> {
    let scaled = tape.scale(l_fm, lambda);
    tape.add(l_c, scaled)
}

struct CrossEntropyOp {
    label: usize,
}

impl Backward for CrossEntropyOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut p = crate::tensor::softmax(inputs[0].data());
        p[self.label] -= 1.0;
        p.iter_mut().for_each(|v| *v *= g[0]);
        vec![Some(p)]
    }
}

/// Records the categorical cross-entropy of `logits` for class `label`.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let value = cross_entropy(tape.data(logits), label)?;
    Ok(tape.custom(&[logits], Tensor::scalar(value), CrossEntropyOp { label }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_tape_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn class_weight_counts_pixels() {
        let half = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        assert_eq!(alpha_c(&half).unwrap(), 1.0);
        let twenty = BinaryMask::from_fn(10, 10, |_, y| y < 2);
        assert_eq!(alpha_c(&twenty).unwrap(), 4.0);
        assert_eq!(alpha_c(&BinaryMask::from_fn(3, 3, |_, _| true)).unwrap(), 0.0);
        assert!(alpha_c(&BinaryMask::new(3, 3)).is_err());
    }

    #[test]
    fn focal_loss_scalar_values() {
        assert!((focal_loss(0.5, true, 1.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(focal_loss(1.0 - 1e-9, true, 1.0, 2.0) < 1e-12);
        // -0.81 * ln 0.1 = 1.8650939...
        assert!((focal_loss(0.9, false, 1.0, 2.0) - 1.865089).abs() < 1e-5);
        assert!((focal_loss(0.9, false, 1.0, 2.0) + 0.81 * 0.1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_is_binary_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p: f64 = rng.gen_range(0.001..0.999);
            let y = rng.gen_bool(0.5);
            let bce = if y { -p.ln() } else { -(1.0 - p).ln() };
            assert!((focal_loss(p, y, 1.0, 0.0) - bce).abs() < 1e-9);
        }
    }

    #[test]
    fn fm_weighting_bounds() {
        let map = vec![0.3, 1.2, 0.0, 2.0];
        let zero = DistanceMap::zeros(2, 2);
        assert_eq!(fm_weighted_loss(&map, &zero).unwrap(), 0.875);
        // Checkerboard: foreground pixels are boundary (weight 2), background
        // pixels sit one level out (weight 1).
        let m = BinaryMask::from_fn(2, 2, |x, y| (x + y) % 2 == 0);
        let psi = crate::geom::fast_marching_map(&m).unwrap();
        assert!((fm_weighted_loss(&map, &psi).unwrap() - 1.45).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_examples() {
        let o = Point::new(0.0, 0.0);
        assert_eq!(hausdorff_loss(&[o], &[o]).unwrap(), 0.0);
        let b = Point::new(0.3, 0.4);
        assert!((hausdorff_loss(&[o], &[b]).unwrap() - 0.5).abs() < 1e-15);
        let g = [o, Point::new(1.0, 0.0)];
        assert_eq!(hausdorff_loss(&g, &[o]).unwrap(), 0.5);
        assert!(hausdorff_loss(&[], &[o]).is_err());
    }

    #[test]
    fn joint_and_cross_entropy_values() {
        assert_eq!(joint_loss(3.0, 0.0, 200.0), 3.0);
        assert!((joint_loss(0.0, 0.01, 200.0) - 2.0).abs() < 1e-12);
        assert!((cross_entropy(&[0.7; 8], 3).unwrap() - 8f64.ln()).abs() < 1e-12);
        let mut one_hot = [0.0; 8];
        one_hot[5] = 100.0;
        assert!(cross_entropy(&one_hot, 5).unwrap() < 1e-40);
        assert!(cross_entropy(&one_hot, 8).is_err());
    }

    #[test]
    fn tape_losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (w, h) = (7, 5);
        let gt = BinaryMask::from_fn(w, h, |x, y| x > 1 && x < 5 && y > 0 && y < 4);
        let psi = crate::geom::fast_marching_map(&gt).unwrap();
        let pred = Tensor::new(&[h, w], (0..w * h).map(|_| rng.gen_range(0.05..0.95)).collect())
            .unwrap();
        for gamma in [0.0, 2.0] {
            let err = check_tape_gradients(std::slice::from_ref(&pred), |t, v| mask_loss_var(t, v[0], &gt, &psi, gamma))
                .unwrap();
            assert!(err < 1e-4, "mask loss gamma={gamma}: {err}");
        }
        let pts = Tensor::new(&[6, 2], (0..12).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let gt_pts: Vec<Point> = (0..9)
            .map(|_| Point::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let err = check_tape_gradients(&[pts], |t, v| hausdorff_loss_var(t, v[0], &gt_pts)).unwrap();
        assert!(err < 1e-4, "hausdorff: {err}");
        let logits = Tensor::new(&[8], (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let err = check_tape_gradients(&[logits], |t, v| cross_entropy_var(t, v[0], 2)).unwrap();
        assert!(err < 1e-6, "cross entropy: {err}");
    }

    #[test]
    fn zero_lambda_cuts_mask_gradient() {
        let mut t = Tape::new();
        let lc = t.leaf(Tensor::scalar(1.5).with_grad(true));
        let lfm = t.leaf(Tensor::scalar(0.2).with_grad(true));
        let total = joint_loss_var(&mut t, lc, lfm, 0.0).unwrap();
        t.backward(total).unwrap();
        assert_eq!(t.grad(lfm).unwrap(), &[0.0]);
        assert_eq!(t.grad(lc).unwrap(), &[1.0]);
    }
}
