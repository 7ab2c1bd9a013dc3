//! Mask network: a stride-2 stem, a residual ladder at half resolution, a
//! chain of attention-guided skip fusion blocks whose outputs form the skip
//! feature map, a transposed-convolution mask decoder, and a region classifier
//! branching off the deepest residual block.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::params::{he_uniform, Bound, ParamSet};
use crate::tensor::{softmax, Tape, Tensor, Var};

/// Channel count of the concatenated skip feature map.
pub const SKIP_CHANNELS: usize = 120;
pub const NUM_CLASSES: usize = 8;
/// Smallest accepted input side.
pub const MIN_SIDE: usize = 8;

/// The eight region labels, in their canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionClass {
    Hole,
    LineSegment,
    Degradation,
    Character,
    Picture,
    Decorator,
    LibraryMarker,
    BoundaryLine,
}

impl RegionClass {
    pub const ALL: [RegionClass; NUM_CLASSES] = [
        RegionClass::Hole,
        RegionClass::LineSegment,
        RegionClass::Degradation,
        RegionClass::Character,
        RegionClass::Picture,
        RegionClass::Decorator,
        RegionClass::LibraryMarker,
        RegionClass::BoundaryLine,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Identifier used in files and over HTTP.
    pub fn key(self) -> &'static str {
        match self {
            RegionClass::Hole => "hole",
            RegionClass::LineSegment => "line_segment",
            RegionClass::Degradation => "degradation",
            RegionClass::Character => "character",
            RegionClass::Picture => "picture",
            RegionClass::Decorator => "decorator",
            RegionClass::LibraryMarker => "library_marker",
            RegionClass::BoundaryLine => "boundary_line",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            RegionClass::Hole => "Hole",
            RegionClass::LineSegment => "Line Segment",
            RegionClass::Degradation => "Degradation",
            RegionClass::Character => "Character",
            RegionClass::Picture => "Picture",
            RegionClass::Decorator => "Decorator",
            RegionClass::LibraryMarker => "Library Marker",
            RegionClass::BoundaryLine => "Boundary Line",
        }
    }
}

impl fmt::Display for RegionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for RegionClass {
    type Err = Error;

    /// Accepts the key or the display name.
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.key() == s || c.display_name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown region class `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct McnnConfig {
    /// Residual block widths, one block per entry.
    pub residual_channels: Vec<usize>,
    /// Output widths of the skip fusion blocks, deepest first.
    pub sag_channels: Vec<usize>,
    /// Width of the upsampled map inside the mask decoder.
    pub decoder_channels: usize,
    pub num_classes: usize,
    /// When false, skip connections bypass the attention gates.
    pub attention: bool,
}

impl Default for McnnConfig {
    fn default() -> Self {
        Self {
            residual_channels: vec![32, 64, 128],
            sag_channels: vec![64, 40, 16],
            decoder_channels: 16,
            num_classes: NUM_CLASSES,
            attention: true,
        }
    }
}

impl McnnConfig {
    /// Narrow variant sized for single-core training.
    pub fn desk() -> Self {
        Self {
            residual_channels: vec![16, 32, 64],
            sag_channels: vec![56, 40, 24],
            decoder_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ladder = &self.residual_channels;
        if ladder.is_empty() || ladder.contains(&0) {
            return invalid("residual ladder must be non-empty with positive widths");
        }
        if ladder.windows(2).any(|w| w[0] >= w[1]) {
            return invalid(format!("residual ladder {ladder:?} must be strictly ascending"));
        }
        if self.sag_channels.len() != ladder.len() {
            return invalid(format!(
                "{} fusion blocks configured for a ladder of {}",
                self.sag_channels.len(),
                ladder.len()
            ));
        }
        if self.sag_channels.iter().sum::<usize>() != SKIP_CHANNELS {
            return invalid(format!(
                "fusion widths {:?} must sum to {SKIP_CHANNELS}",
                self.sag_channels
            ));
        }
        let mut prev = *ladder.last().expect("non-empty");
        for &c in &self.sag_channels {
            if c == 0 || c >= prev {
                return invalid(format!(
                    "fusion widths {:?} must shrink below the deepest ladder width {}",
                    self.sag_channels,
                    ladder.last().expect("non-empty")
                ));
            }
            prev = c;
        }
        if self.decoder_channels == 0 || self.num_classes == 0 {
            return invalid("decoder width and class count must be positive");
        }
        Ok(())
    }

    pub fn deepest(&self) -> usize {
        *self.residual_channels.last().expect("validated")
    }

    /// Widths fused by block `j`: (gating, skip).
    fn sag_inputs(&self, j: usize) -> (usize, usize) {
        let l = self.residual_channels.len();
        let gating = if j == 0 {
            self.deepest()
        } else {
            self.sag_channels[j - 1]
        };
        let skip = if j + 1 < l {
            self.residual_channels[l - 2 - j]
        } else {
            self.residual_channels[0]
        };
        (gating, skip)
    }
}

/// Is `name` part of the backbone (everything but the classifier head)?
pub fn is_backbone(name: &str) -> bool {
    !name.starts_with("cls.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct McnnWeights {
    pub config: McnnConfig,
    pub params: ParamSet,
}

pub fn init_weights(config: &McnnConfig, seed: u64) -> Result<McnnWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let conv = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, co: usize, ci: usize, k: usize| {
        p.insert(format!("{name}.w"), he_uniform(rng, &[co, ci, k, k], ci * k * k));
        p.insert(format!("{name}.b"), Tensor::zeros(&[co]));
    };
    let ladder = &config.residual_channels;
    conv(&mut p, &mut rng, "init", ladder[0], 3, 3);
    let mut c_in = ladder[0];
    for (i, &c) in ladder.iter().enumerate() {
        conv(&mut p, &mut rng, &format!("res{i}.conv1"), c, c_in, 3);
        conv(&mut p, &mut rng, &format!("res{i}.conv2"), c, c, 3);
        if c != c_in {
            conv(&mut p, &mut rng, &format!("res{i}.proj"), c, c_in, 1);
        }
        c_in = c;
    }
    for (j, &c) in config.sag_channels.iter().enumerate() {
        let (cg, cs) = config.sag_inputs(j);
        if config.attention {
            let inter = gate_width(cs);
            conv(&mut p, &mut rng, &format!("sag{j}.gate.ws"), inter, cs, 1);
            conv(&mut p, &mut rng, &format!("sag{j}.gate.wg"), inter, cg, 1);
            conv(&mut p, &mut rng, &format!("sag{j}.gate.psi"), 1, inter, 1);
        }
        conv(&mut p, &mut rng, &format!("sag{j}.conv"), c, cs + cg, 3);
    }
    let dc = config.decoder_channels;
    p.insert("dec.up.w", he_uniform(&mut rng, &[SKIP_CHANNELS, dc, 2, 2], SKIP_CHANNELS));
    p.insert("dec.up.b", Tensor::zeros(&[dc]));
    conv(&mut p, &mut rng, "dec.out", 1, dc, 1);
    let d = config.deepest();
    p.insert("cls.fc1.w", he_uniform(&mut rng, &[d, d], d));
    p.insert("cls.fc1.b", Tensor::zeros(&[d]));
    p.insert("cls.fc2.w", he_uniform(&mut rng, &[d, config.num_classes], d));
    p.insert("cls.fc2.b", Tensor::zeros(&[config.num_classes]));
    Ok(McnnWeights {
        config: config.clone(),
        params: p,
    })
}

fn gate_width(skip: usize) -> usize {
    (skip / 2).max(1)
}

fn conv(tape: &mut Tape, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    tape.conv2d(x, w, bias, stride, pad)
}

fn same_spatial(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
        return shape_err(format!("{what}: spatial mismatch {sa:?} vs {sb:?}"));
    }
    Ok(())
}

/// Additive attention: `skip ⊙ sigmoid(ψ(relu(W_s·skip + W_g·gating)))`.
/// `prefix` names the gate's 1×1 convolutions (`{prefix}.ws`, `.wg`, `.psi`).
pub fn attention_gate(tape: &mut Tape, b: &Bound, prefix: &str, skip: Var, gating: Var) -> Result<Var> {
    same_spatial(tape, skip, gating, "attention gate")?;
    let s = conv(tape, b, &format!("{prefix}.ws"), skip, 1, 0)?;
    let g = conv(tape, b, &format!("{prefix}.wg"), gating, 1, 0)?;
    let sum = tape.add(s, g)?;
    let act = tape.relu(sum);
    let logit = conv(tape, b, &format!("{prefix}.psi"), act, 1, 0)?;
    let alpha = tape.sigmoid(logit);
    tape.channel_gate(skip, alpha)
}

/// Fusion block `j`: `relu(conv3(concat(gate(skip, prev), prev)))`.
pub fn sag_block(
    tape: &mut Tape,
    b: &Bound,
    config: &McnnConfig,
    j: usize,
    prev: Var,
    skip: Var,
) -> Result<Var> {
    let gated = if config.attention {
        attention_gate(tape, b, &format!("sag{j}.gate"), skip, prev)?
    } else {
        same_spatial(tape, skip, prev, "fusion block")?;
        skip
    };
    let cat = tape.concat_channels(&[gated, prev])?;
    let out = conv(tape, b, &format!("sag{j}.conv"), cat, 1, 1)?;
    Ok(tape.relu(out))
}

fn residual_block(tape: &mut Tape, b: &Bound, i: usize, x: Var, project: bool) -> Result<Var> {
    let h = conv(tape, b, &format!("res{i}.conv1"), x, 1, 1)?;
    let h = tape.relu(h);
    let h = conv(tape, b, &format!("res{i}.conv2"), h, 1, 1)?;
    let shortcut = if project {
        conv(tape, b, &format!("res{i}.proj"), x, 1, 0)?
    } else {
        x
    };
    let sum = tape.add(h, shortcut)?;
    Ok(tape.relu(sum))
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct McnnVars {
    /// `[1,H,W]` mask probabilities.
    pub mask_prob: Var,
    /// `[120,H'/2,W'/2]` concatenated fusion outputs, `H'`/`W'` padded to even.
    pub skip_features: Var,
    /// `[C]` globally pooled deepest residual features.
    pub pooled: Var,
}

/// Zero-pads `[3,H,W]` on the right/bottom to even sides.
pub fn pad_to_even(image: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *image.shape() else {
        return shape_err(format!("image must be [3,H,W], got {:?}", image.shape()));
    };
    if c != 3 {
        return shape_err(format!("image must have 3 channels, got {c}"));
    }
    if h < MIN_SIDE || w < MIN_SIDE {
        return invalid(format!("image {h}x{w} is below the {MIN_SIDE}x{MIN_SIDE} minimum"));
    }
    let (hp, wp) = (h + h % 2, w + w % 2);
    if (hp, wp) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * h + y) * w;
            let dst = (ch * hp + y) * wp;
            out[dst..dst + w].copy_from_slice(&image.data()[src..src + w]);
        }
    }
    Tensor::new(&[c, hp, wp], out)
}

/// Stem output and residual ladder outputs at half resolution.
fn backbone_on_tape(tape: &mut Tape, b: &Bound, config: &McnnConfig, image: &Tensor) -> Result<(Var, Vec<Var>)> {
    let x = tape.constant(pad_to_even(image)?);
    let stem = conv(tape, b, "init", x, 2, 1)?;
    let stem = tape.relu(stem);
    let mut levels = Vec::with_capacity(config.residual_channels.len());
    let mut cur = stem;
    let mut c_in = config.residual_channels[0];
    for (i, &c) in config.residual_channels.iter().enumerate() {
        cur = residual_block(tape, b, i, cur, c != c_in)?;
        levels.push(cur);
        c_in = c;
    }
    Ok((stem, levels))
}

fn pool_deepest(tape: &mut Tape, config: &McnnConfig, levels: &[Var]) -> Result<Var> {
    let pooled = tape.adaptive_avg_pool(*levels.last().expect("non-empty ladder"))?;
    tape.reshape(pooled, &[config.deepest()])
}

/// Records the backbone and mask decoder for `image` (`[3,H,W]`, any sides ≥ 8).
pub fn forward_on_tape(tape: &mut Tape, b: &Bound, config: &McnnConfig, image: &Tensor) -> Result<McnnVars> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (stem, levels) = backbone_on_tape(tape, b, config, image)?;
    let l = levels.len();
    let mut prev = levels[l - 1];
    let mut fused = Vec::with_capacity(l);
    for j in 0..l {
        let skip = if j + 1 < l { levels[l - 2 - j] } else { stem };
        prev = sag_block(tape, b, config, j, prev, skip)?;
        fused.push(prev);
    }
    let skip_features = tape.concat_channels(&fused)?;
    let up = tape.conv_transpose2d(skip_features, b.var("dec.up.w")?, b.var("dec.up.b")?, 2)?;
    let up = tape.relu(up);
    let logit = conv(tape, b, "dec.out", up, 1, 0)?;
    let logit = tape.crop(logit, h, w)?;
    let mask_prob = tape.sigmoid(logit);
    let pooled = pool_deepest(tape, config, &levels)?;
    Ok(McnnVars {
        mask_prob,
        skip_features,
        pooled,
    })
}

/// Pooled deepest residual features only; skips the fusion chain and decoder.
pub fn pooled_features(image: &Tensor, weights: &McnnWeights) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = weights.params.bind(&mut tape, |_| false);
    let (_, levels) = backbone_on_tape(&mut tape, &b, &weights.config, image)?;
    let pooled = pool_deepest(&mut tape, &weights.config, &levels)?;
    Ok(tape.data(pooled).to_vec())
}

/// Records the classifier head on pooled features `[C]`, giving `[num_classes]` logits.
pub fn classifier_on_tape(tape: &mut Tape, b: &Bound, pooled: Var) -> Result<Var> {
    let n = tape.value(pooled).numel();
    let row = tape.reshape(pooled, &[1, n])?;
    let h = tape.matmul(row, b.var("cls.fc1.w")?)?;
    let h = tape.add_row_bias(h, b.var("cls.fc1.b")?)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, b.var("cls.fc2.w")?)?;
    let o = tape.add_row_bias(o, b.var("cls.fc2.b")?)?;
    let k = tape.value(o).numel();
    tape.reshape(o, &[k])
}

#[derive(Clone, Debug, PartialEq)]
pub struct McnnOutput {
    /// `[H,W]` probabilities.
    pub mask_prob: Tensor,
    pub skip_features: Tensor,
    pub class_logits: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// Inference pass; never mutates `weights`.
pub fn forward(image: &Tensor, weights: &McnnWeights) -> Result<McnnOutput> {
    let mut tape = Tape::new();
    let b = weights.params.bind(&mut tape, |_| false);
    let v = forward_on_tape(&mut tape, &b, &weights.config, image)?;
    let logits = classifier_on_tape(&mut tape, &b, v.pooled)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    Ok(McnnOutput {
        mask_prob: tape.value(v.mask_prob).clone().reshaped(&[h, w])?,
        skip_features: tape.value(v.skip_features).clone(),
        class_logits: tape.data(logits).to_vec(),
        pooled: tape.data(v.pooled).to_vec(),
    })
}

/// Classifier head alone, on cached pooled features.
pub fn classify_pooled(pooled: &[f64], weights: &McnnWeights) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = weights.params.bind(&mut tape, |_| false);
    let p = tape.constant(Tensor::new(&[pooled.len()], pooled.to_vec())?);
    let logits = classifier_on_tape(&mut tape, &b, p)?;
    Ok(tape.data(logits).to_vec())
}

/// Softmax probabilities and the arg-max label (first on ties).
pub fn region_classify(class_logits: &[f64]) -> Result<(RegionClass, Vec<f64>)> {
    if class_logits.len() != NUM_CLASSES || class_logits.iter().any(|v| !v.is_finite()) {
        return invalid(format!("expected {NUM_CLASSES} finite logits"));
    }
    let probs = softmax(class_logits);
    let best = probs
        .iter()
        .enumerate()
        .fold(0, |best, (i, p)| if *p > probs[best] { i } else { best });
    Ok((RegionClass::from_index(best).expect("in range"), probs))
}
