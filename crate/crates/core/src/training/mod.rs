//! Optimization of the mask network, the refiner, both jointly, and the
//! region classifier.

mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{schedule_lr, sgd_step, GammaSwitch, Optimizer, OptimizerKind, Restart, TrainConfig};

use crate::agcn::{interpolate_contour, interpolate_on_tape, points_tensor, refine_on_tape, AgcnWeights};
use crate::error::{invalid, Result};
use crate::geom::{contourize, fast_marching_map, ContourConfig, DistanceMap, Point};
use crate::losses::{cross_entropy_var, hausdorff_loss_var, joint_loss_var, mask_loss_var};
use crate::mcnn::{self, McnnWeights, RegionClass};
use crate::synth::Sample;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Mask,
    Refiner,
    Joint,
    Classifier,
}

/// One row of a phase log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseOutcome<W> {
    /// Weights of the best validation epoch.
    pub weights: W,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    /// Epoch from which the raised focal exponent applied.
    pub gamma_switched_at: Option<usize>,
}

pub fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// An epoch's visiting order: every slot picks a class uniformly among
/// those present, then takes that class's next sample from a reshuffled
/// queue. Each class gets an equal expected share; with one class this is
/// a plain shuffle.
pub fn resample_by_class(labels: &[RegionClass], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<RegionClass, Vec<usize>> = BTreeMap::new();
    for (i, c) in labels.iter().enumerate() {
        by_class.entry(*c).or_default().push(i);
    }
    let classes: Vec<RegionClass> = by_class.keys().copied().collect();
    let mut queues: BTreeMap<RegionClass, Vec<usize>> = BTreeMap::new();
    let mut order = Vec::with_capacity(labels.len());
    for _ in 0..labels.len() {
        let c = classes[rng.gen_range(0..classes.len())];
        let q = queues.entry(c).or_default();
        if q.is_empty() {
            q.extend_from_slice(&by_class[&c]);
            q.shuffle(&mut rng);
        }
        order.push(q.pop().expect("refilled"));
    }
    order
}

/// A phase's model state and losses, driven by [`run_phase`].
trait PhaseTask {
    type Weights: Clone;
    fn train_step(&mut self, index: usize, lr: f64, gamma: f64) -> Result<f64>;
    /// Mean training loss without updating.
    fn train_loss(&self, gamma: f64) -> Result<f64>;
    fn val_loss(&self, gamma: f64) -> Result<f64>;
    fn weights(&self) -> Self::Weights;
}

fn mean(values: impl IntoIterator<Item = Result<f64>>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v?;
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

fn run_phase<T: PhaseTask>(
    task: &mut T,
    cfg: &TrainConfig,
    labels: &[RegionClass],
    uses_gamma: bool,
) -> Result<PhaseOutcome<T::Weights>> {
    cfg.validate()?;
    if labels.is_empty() {
        return invalid("training set is empty");
    }
    let mut gamma = if uses_gamma { cfg.gamma_initial } else { 0.0 };
    let mut switched_at = None;
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let mut best: Option<(f64, usize, T::Weights)> = None;
    if cfg.evaluate_initial {
        let val = task.val_loss(gamma)?;
        log.push(EpochRecord {
            epoch: 0,
            train_loss: task.train_loss(gamma)?,
            val_loss: val,
            lr: 0.0,
        });
        best = Some((val, 0, task.weights()));
    }
    for epoch in 1..=cfg.epochs {
        if uses_gamma && switched_at.is_none() {
            let due = match cfg.gamma_switch {
                GammaSwitch::Epoch { epoch: e } => epoch >= e,
                GammaSwitch::Plateau { threshold, window } => plateaued(&log, threshold, window),
                GammaSwitch::Never => false,
            };
            if due {
                gamma = cfg.gamma_final;
                switched_at = Some(epoch);
                // The loss changes definition; earlier values are not comparable.
                best = None;
            }
        }
        let lr = schedule_lr(cfg, epoch, switched_at);
        let order = resample_by_class(labels, cfg.seed.wrapping_add(epoch as u64));
        let train = mean(order.iter().map(|&i| task.train_step(i, lr, gamma)))?;
        let val = task.val_loss(gamma)?;
        log.push(EpochRecord {
            epoch,
            train_loss: train,
            val_loss: val,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
            best = Some((val, epoch, task.weights()));
        }
    }
    let (_, best_epoch, weights) = match best {
        Some(b) => b,
        None => (f64::NAN, cfg.epochs, task.weights()),
    };
    Ok(PhaseOutcome {
        weights,
        best_epoch,
        log,
        gamma_switched_at: switched_at,
    })
}

/// True when each of the last `window` epochs improved the training loss by
/// less than `threshold` (relative).
fn plateaued(log: &[EpochRecord], threshold: f64, window: usize) -> bool {
    let trained: Vec<f64> = log.iter().filter(|r| r.epoch > 0).map(|r| r.train_loss).collect();
    if window == 0 || trained.len() < window + 1 {
        return false;
    }
    trained
        .windows(2)
        .rev()
        .take(window)
        .all(|w| (w[0] - w[1]) / w[0].abs().max(1e-12) < threshold)
}

/// Extra switches for mask-loss training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskLossOptions {
    /// Weight pixels by `1 + Ψ`; otherwise plain mean.
    pub fm_weighting: bool,
}

impl Default for MaskLossOptions {
    fn default() -> Self {
        Self { fm_weighting: true }
    }
}

fn weight_map(sample: &Sample, opts: MaskLossOptions) -> Result<DistanceMap> {
    if opts.fm_weighting {
        fast_marching_map(&sample.mask)
    } else {
        Ok(DistanceMap::zeros(sample.width(), sample.height()))
    }
}

fn mask_loss_and_grads(
    weights: &McnnWeights,
    sample: &Sample,
    psi: &DistanceMap,
    gamma: f64,
    with_grad: bool,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let b = weights
        .params
        .bind(&mut tape, |n| with_grad && mcnn::is_backbone(n));
    let v = mcnn::forward_on_tape(&mut tape, &b, &weights.config, &sample.image)?;
    let loss = mask_loss_var(&mut tape, v.mask_prob, &sample.mask, psi, gamma)?;
    let value = tape.data(loss)[0];
    if !with_grad {
        return Ok((value, BTreeMap::new()));
    }
    tape.backward(loss)?;
    Ok((value, b.gradients(&tape)))
}

struct MaskTask<'a> {
    weights: McnnWeights,
    opt: Optimizer,
    train: &'a [Sample],
    val: &'a [Sample],
    train_psi: Vec<DistanceMap>,
    val_psi: Vec<DistanceMap>,
}

impl PhaseTask for MaskTask<'_> {
    type Weights = McnnWeights;

    fn train_step(&mut self, i: usize, lr: f64, gamma: f64) -> Result<f64> {
        let (loss, grads) = mask_loss_and_grads(&self.weights, &self.train[i], &self.train_psi[i], gamma, true)?;
        self.opt.step(&mut self.weights.params, &grads, lr)?;
        Ok(loss)
    }

    fn train_loss(&self, gamma: f64) -> Result<f64> {
        let losses = crate::parallel::map_range(self.train.len(), |i| {
            mask_loss_and_grads(&self.weights, &self.train[i], &self.train_psi[i], gamma, false).map(|r| r.0)
        });
        mean(losses)
    }

    fn val_loss(&self, gamma: f64) -> Result<f64> {
        let losses = crate::parallel::map_range(self.val.len(), |i| {
            mask_loss_and_grads(&self.weights, &self.val[i], &self.val_psi[i], gamma, false).map(|r| r.0)
        });
        mean(losses)
    }

    fn weights(&self) -> McnnWeights {
        self.weights.clone()
    }
}

/// First phase: the mask network alone under the weighted focal loss.
pub fn train_mask(
    train: &[Sample],
    val: &[Sample],
    init: McnnWeights,
    cfg: &TrainConfig,
    opts: MaskLossOptions,
) -> Result<PhaseOutcome<McnnWeights>> {
    let psi = |set: &[Sample]| set.iter().map(|s| weight_map(s, opts)).collect::<Result<Vec<_>>>();
    let mut task = MaskTask {
        weights: init,
        opt: Optimizer::new(cfg.optimizer),
        train,
        val,
        train_psi: psi(train)?,
        val_psi: psi(val)?,
    };
    run_phase(&mut task, cfg, &labels(train), true)
}

fn labels(set: &[Sample]) -> Vec<RegionClass> {
    set.iter().map(|s| s.class).collect()
}

/// Ground-truth contour on the unit canvas, densified like the predictions.
pub fn contour_target(sample: &Sample, factor: usize) -> Result<Vec<Point>> {
    let (w, h) = (sample.width() as f64, sample.height() as f64);
    let unit: Vec<Point> = sample
        .polygon
        .points()
        .iter()
        .map(|p| Point::new(p.x / w, p.y / h))
        .collect();
    interpolate_contour(&unit, factor)
}

/// Records the contour loss of pixel-space `points: [M,2]` in a `crop`.
pub fn contour_loss_var(
    tape: &mut Tape,
    points: Var,
    crop: (usize, usize),
    target: &[Point],
    factor: usize,
) -> Result<Var> {
    let m = tape.shape(points)[0];
    let (h, w) = crop;
    let scale = (0..m).flat_map(|_| [1.0 / w as f64, 1.0 / h as f64]).collect();
    let unit = tape.mul_const(points, scale)?;
    let dense = interpolate_on_tape(tape, unit, factor)?;
    hausdorff_loss_var(tape, dense, target)
}

/// Frozen mask-network outputs for one sample.
struct RefinerInput {
    features: Tensor,
    initial: Tensor,
    target: Vec<Point>,
    crop: (usize, usize),
}

fn refiner_input(sample: &Sample, mcnn_w: &McnnWeights, contour: &ContourConfig, factor: usize) -> Result<RefinerInput> {
    let out = mcnn::forward(&sample.image, mcnn_w)?;
    let (h, w) = (sample.height(), sample.width());
    let init = contourize(out.mask_prob.data(), h, w, contour)?;
    Ok(RefinerInput {
        features: out.skip_features,
        initial: points_tensor(init.points())?,
        target: contour_target(sample, factor)?,
        crop: (h, w),
    })
}

fn refiner_loss_and_grads(
    weights: &AgcnWeights,
    input: &RefinerInput,
    with_grad: bool,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let b = weights.params.bind(&mut tape, |_| with_grad);
    let fmap = tape.constant(input.features.clone());
    let pts = tape.constant(input.initial.clone());
    let passes = refine_on_tape(&mut tape, &b, &weights.config, fmap, pts, input.crop)?;
    let last = *passes.last().expect("at least one pass");
    let loss = contour_loss_var(&mut tape, last, input.crop, &input.target, weights.config.interp_factor)?;
    let value = tape.data(loss)[0];
    if !with_grad {
        return Ok((value, BTreeMap::new()));
    }
    tape.backward(loss)?;
    Ok((value, b.gradients(&tape)))
}

struct RefinerTask {
    weights: AgcnWeights,
    opt: Optimizer,
    train: Vec<RefinerInput>,
    val: Vec<RefinerInput>,
}

impl PhaseTask for RefinerTask {
    type Weights = AgcnWeights;

    fn train_step(&mut self, i: usize, lr: f64, _: f64) -> Result<f64> {
        let (loss, grads) = refiner_loss_and_grads(&self.weights, &self.train[i], true)?;
        self.opt.step(&mut self.weights.params, &grads, lr)?;
        Ok(loss)
    }

    fn train_loss(&self, _: f64) -> Result<f64> {
        mean(crate::parallel::map_slice(&self.train, |x| {
            refiner_loss_and_grads(&self.weights, x, false).map(|r| r.0)
        }))
    }

    fn val_loss(&self, _: f64) -> Result<f64> {
        mean(crate::parallel::map_slice(&self.val, |x| {
            refiner_loss_and_grads(&self.weights, x, false).map(|r| r.0)
        }))
    }

    fn weights(&self) -> AgcnWeights {
        self.weights.clone()
    }
}

/// Second phase: the refiner on frozen mask-network features and contours.
pub fn train_refiner(
    train: &[Sample],
    val: &[Sample],
    mcnn_w: &McnnWeights,
    init: AgcnWeights,
    contour: &ContourConfig,
    cfg: &TrainConfig,
) -> Result<PhaseOutcome<AgcnWeights>> {
    let factor = init.config.interp_factor;
    let prep = |set: &[Sample]| -> Result<Vec<RefinerInput>> {
        crate::parallel::map_slice(set, |s| refiner_input(s, mcnn_w, contour, factor))
            .into_iter()
            .collect()
    };
    let mut task = RefinerTask {
        weights: init,
        opt: Optimizer::new(cfg.optimizer),
        train: prep(train)?,
        val: prep(val)?,
    };
    run_phase(&mut task, cfg, &labels(train), false)
}

/// Joint objective for one sample. Returns `(L_FT, L_C)` and the gradients
/// of `L_FT` for each network.
#[allow(clippy::type_complexity)]
fn joint_loss_and_grads(
    weights: &(McnnWeights, AgcnWeights),
    sample: &Sample,
    psi: &DistanceMap,
    contour: &ContourConfig,
    gamma: f64,
    lambda: f64,
    with_grad: bool,
) -> Result<(f64, f64, BTreeMap<String, Vec<f64>>, BTreeMap<String, Vec<f64>>)> {
    let (mw, aw) = weights;
    let mut tape = Tape::new();
    let mb = mw.params.bind(&mut tape, |n| with_grad && mcnn::is_backbone(n));
    let ab = aw.params.bind(&mut tape, |_| with_grad);
    let v = mcnn::forward_on_tape(&mut tape, &mb, &mw.config, &sample.image)?;
    let (h, w) = (sample.height(), sample.width());
    let l_fm = mask_loss_var(&mut tape, v.mask_prob, &sample.mask, psi, gamma)?;
    let init = contourize(tape.data(v.mask_prob), h, w, contour)?;
    let pts = tape.constant(points_tensor(init.points())?);
    let passes = refine_on_tape(&mut tape, &ab, &aw.config, v.skip_features, pts, (h, w))?;
    let last = *passes.last().expect("at least one pass");
    let target = contour_target(sample, aw.config.interp_factor)?;
    let l_c = contour_loss_var(&mut tape, last, (h, w), &target, aw.config.interp_factor)?;
    let total = joint_loss_var(&mut tape, l_c, l_fm, lambda)?;
    let (lt, lc) = (tape.data(total)[0], tape.data(l_c)[0]);
    if !with_grad {
        return Ok((lt, lc, BTreeMap::new(), BTreeMap::new()));
    }
    tape.backward(total)?;
    Ok((lt, lc, mb.gradients(&tape), ab.gradients(&tape)))
}

struct JointTask<'a> {
    weights: (McnnWeights, AgcnWeights),
    opts: (Optimizer, Optimizer),
    train: &'a [Sample],
    val: &'a [Sample],
    train_psi: Vec<DistanceMap>,
    val_psi: Vec<DistanceMap>,
    contour: ContourConfig,
    lambda: f64,
}

impl JointTask<'_> {
    /// Mean contour loss over `set`, the validation metric of this phase.
    fn contour_loss(&self, set: &[Sample], psi: &[DistanceMap], gamma: f64) -> Result<f64> {
        mean(crate::parallel::map_range(set.len(), |i| {
            joint_loss_and_grads(&self.weights, &set[i], &psi[i], &self.contour, gamma, self.lambda, false).map(|r| r.1)
        }))
    }
}

impl PhaseTask for JointTask<'_> {
    type Weights = (McnnWeights, AgcnWeights);

    fn train_step(&mut self, i: usize, lr: f64, gamma: f64) -> Result<f64> {
        let (loss, _, gm, ga) = joint_loss_and_grads(
            &self.weights,
            &self.train[i],
            &self.train_psi[i],
            &self.contour,
            gamma,
            self.lambda,
            true,
        )?;
        self.opts.0.step(&mut self.weights.0.params, &gm, lr)?;
        self.opts.1.step(&mut self.weights.1.params, &ga, lr)?;
        Ok(loss)
    }

    fn train_loss(&self, gamma: f64) -> Result<f64> {
        mean(crate::parallel::map_range(self.train.len(), |i| {
            joint_loss_and_grads(&self.weights, &self.train[i], &self.train_psi[i], &self.contour, gamma, self.lambda, false)
                .map(|r| r.0)
        }))
    }

    fn val_loss(&self, gamma: f64) -> Result<f64> {
        self.contour_loss(self.val, &self.val_psi, gamma)
    }

    fn weights(&self) -> (McnnWeights, AgcnWeights) {
        self.weights.clone()
    }
}

/// Third phase: both networks end to end under `L_C + λ·L_FM`, with the
/// focal exponent fixed at `cfg.gamma_final`.
pub fn train_joint(
    train: &[Sample],
    val: &[Sample],
    init: (McnnWeights, AgcnWeights),
    contour: &ContourConfig,
    cfg: &TrainConfig,
    opts: MaskLossOptions,
) -> Result<PhaseOutcome<(McnnWeights, AgcnWeights)>> {
    let psi = |set: &[Sample]| set.iter().map(|s| weight_map(s, opts)).collect::<Result<Vec<_>>>();
    let cfg = TrainConfig {
        gamma_initial: cfg.gamma_final,
        gamma_switch: GammaSwitch::Never,
        ..cfg.clone()
    };
    let mut task = JointTask {
        weights: init,
        opts: (Optimizer::new(cfg.optimizer), Optimizer::new(cfg.optimizer)),
        train,
        val,
        train_psi: psi(train)?,
        val_psi: psi(val)?,
        contour: contour.clone(),
        lambda: cfg.lambda,
    };
    run_phase(&mut task, &cfg, &labels(train), true)
}

fn classifier_loss_and_grads(
    weights: &McnnWeights,
    pooled: &[f64],
    label: RegionClass,
    with_grad: bool,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let b = weights
        .params
        .bind(&mut tape, |n| with_grad && !mcnn::is_backbone(n));
    let p = tape.constant(Tensor::new(&[pooled.len()], pooled.to_vec())?);
    let logits = mcnn::classifier_on_tape(&mut tape, &b, p)?;
    let loss = cross_entropy_var(&mut tape, logits, label.index())?;
    let value = tape.data(loss)[0];
    if !with_grad {
        return Ok((value, BTreeMap::new()));
    }
    tape.backward(loss)?;
    Ok((value, b.gradients(&tape)))
}

struct ClassifierTask {
    weights: McnnWeights,
    opt: Optimizer,
    train: Vec<(Vec<f64>, RegionClass)>,
    val: Vec<(Vec<f64>, RegionClass)>,
}

impl ClassifierTask {
    fn loss(&self, set: &[(Vec<f64>, RegionClass)]) -> Result<f64> {
        mean(set.iter().map(|(p, c)| classifier_loss_and_grads(&self.weights, p, *c, false).map(|r| r.0)))
    }
}

impl PhaseTask for ClassifierTask {
    type Weights = McnnWeights;

    fn train_step(&mut self, i: usize, lr: f64, _: f64) -> Result<f64> {
        let (p, c) = &self.train[i];
        let (loss, grads) = classifier_loss_and_grads(&self.weights, p, *c, true)?;
        self.opt.step(&mut self.weights.params, &grads, lr)?;
        Ok(loss)
    }

    fn train_loss(&self, _: f64) -> Result<f64> {
        self.loss(&self.train)
    }

    fn val_loss(&self, _: f64) -> Result<f64> {
        self.loss(&self.val)
    }

    fn weights(&self) -> McnnWeights {
        self.weights.clone()
    }
}

/// Pooled backbone features of every sample, paired with its label.
pub fn pooled_set(set: &[Sample], weights: &McnnWeights) -> Result<Vec<(Vec<f64>, RegionClass)>> {
    crate::parallel::map_slice(set, |s| mcnn::pooled_features(&s.image, weights).map(|p| (p, s.class)))
        .into_iter()
        .collect()
}

/// Trains only the classifier head on frozen backbone features; the
/// returned weights share every backbone tensor with `init` bit for bit.
pub fn train_classifier(
    train: &[Sample],
    val: &[Sample],
    init: McnnWeights,
    cfg: &TrainConfig,
) -> Result<PhaseOutcome<McnnWeights>> {
    let backbone = init.params.filtered(mcnn::is_backbone);
    let mut task = ClassifierTask {
        train: pooled_set(train, &init)?,
        val: pooled_set(val, &init)?,
        weights: init,
        opt: Optimizer::new(cfg.optimizer),
    };
    let out = run_phase(&mut task, cfg, &labels(train), false)?;
    if out.weights.params.filtered(mcnn::is_backbone) != backbone {
        return invalid("classifier training modified backbone weights");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resampling_balances_classes() {
        let labels: Vec<RegionClass> = (0..100)
            .map(|i| if i < 90 { RegionClass::Hole } else { RegionClass::Picture })
            .collect();
        let mut counts = [0usize; 2];
        for epoch in 0..100 {
            let order = resample_by_class(&labels, epoch);
            assert_eq!(order.len(), 100);
            for i in order {
                counts[(i >= 90) as usize] += 1;
            }
        }
        // Chi-square against equal shares, one degree of freedom, p = 0.001.
        let expected = 5000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 10.83, "chi2 {chi2} counts {counts:?}");
        assert_eq!(resample_by_class(&labels, 4), resample_by_class(&labels, 4));
    }

    #[test]
    fn single_class_is_a_permutation() {
        let labels = vec![RegionClass::Character; 37];
        let mut order = resample_by_class(&labels, 9);
        assert_ne!(order, (0..37).collect::<Vec<_>>());
        order.sort();
        assert_eq!(order, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn plateau_detection() {
        let rec = |epoch, train_loss| EpochRecord {
            epoch,
            train_loss,
            val_loss: 0.0,
            lr: 0.0,
        };
        let flat = vec![rec(0, 9.0), rec(1, 1.0), rec(2, 0.995), rec(3, 0.994), rec(4, 0.993)];
        assert!(plateaued(&flat, 0.01, 3));
        let falling = vec![rec(1, 1.0), rec(2, 0.9), rec(3, 0.89), rec(4, 0.889)];
        assert!(!plateaued(&falling, 0.01, 3));
        assert!(!plateaued(&flat[..3], 0.01, 3));
    }
}
