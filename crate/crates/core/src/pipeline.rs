//! End-to-end training: mask network, refiner, joint fine-tuning, then the
//! classifier head, with switches for each ablation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agcn::{self, AgcnConfig};
use crate::error::{invalid, Error, Result};
use crate::geom::ContourConfig;
use crate::mcnn::{self, McnnConfig};
use crate::model::Model;
use crate::synth::Sample;
use crate::training::{
    train_classifier, train_joint, train_mask, train_refiner, write_log, EpochRecord, GammaSwitch, MaskLossOptions,
    OptimizerKind, Restart, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mcnn: McnnConfig,
    pub agcn: AgcnConfig,
    pub contour: ContourConfig,
    pub mask_loss: MaskLossOptions,
    pub mask: TrainConfig,
    pub refiner: TrainConfig,
    /// `None` skips joint fine-tuning.
    pub joint: Option<TrainConfig>,
    pub classifier: TrainConfig,
    /// When false the refiner is neither trained nor used.
    pub refine: bool,
}

impl Default for PipelineConfig {
    /// Full-size networks with the reference schedule.
    fn default() -> Self {
        Self {
            seed: 0,
            mcnn: McnnConfig::default(),
            agcn: AgcnConfig::default(),
            contour: ContourConfig::default(),
            mask_loss: MaskLossOptions::default(),
            mask: TrainConfig::default(),
            refiner: TrainConfig::default(),
            joint: Some(TrainConfig {
                lr: 1e-5,
                ..TrainConfig::default()
            }),
            classifier: TrainConfig::default(),
            refine: true,
        }
    }
}

fn adam(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr,
        epochs,
        restarts: vec![],
        optimizer: OptimizerKind::adam(),
        ..TrainConfig::default()
    }
}

impl PipelineConfig {
    /// Narrow networks and Adam, sized for a single CPU core.
    pub fn desk() -> Self {
        let mut mask = adam(2e-3, 14);
        mask.restarts = vec![Restart {
            start_epoch: 8,
            multiplier: 2.0,
            duration: 2,
        }];
        mask.decay_every = 3;
        Self {
            mcnn: McnnConfig::desk(),
            mask,
            refiner: adam(1e-3, 8),
            joint: Some(adam(1e-4, 3)),
            classifier: adam(1e-3, 25),
            ..Self::default()
        }
    }

    /// A few epochs of everything; exercises the code paths, not quality.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.mask.epochs = 2;
        c.mask.restarts.clear();
        c.mask.gamma_switch = GammaSwitch::Epoch { epoch: 2 };
        c.refiner.epochs = 1;
        c.joint = Some(adam(1e-4, 1));
        c.classifier.epochs = 2;
        c
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        for t in [&mut self.mask, &mut self.refiner, &mut self.classifier] {
            t.seed = seed;
        }
        if let Some(j) = &mut self.joint {
            j.seed = seed;
        }
        self
    }

    pub fn apply(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoFocal => self.mask.gamma_switch = GammaSwitch::Never,
            Ablation::NoFmWeighting => self.mask_loss.fm_weighting = false,
            Ablation::NoAttention => self.mcnn.attention = false,
            Ablation::NoAgcn => {
                self.refine = false;
                self.joint = None;
            }
            Ablation::Hops(k) => self.agcn.hop_k = k,
            Ablation::SingleInterpolation => self.agcn.interp_factor = 1,
            Ablation::SingleIteration => self.agcn.iterations = 1,
            Ablation::Nodes(m) => self.contour.num_points = m,
            Ablation::BackboneOnlyFeatures => self.agcn.coord_features = false,
            Ablation::NoFinetune => self.joint = None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mcnn.validate()?;
        self.agcn.validate()?;
        if self.refine && self.contour.num_points <= 2 * self.agcn.hop_k {
            return invalid(format!(
                "{} contour points cannot carry a {}-hop ring",
                self.contour.num_points, self.agcn.hop_k
            ));
        }
        for t in [&self.mask, &self.refiner, &self.classifier].into_iter().chain(&self.joint) {
            t.validate()?;
        }
        Ok(())
    }
}

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    NoFocal,
    NoFmWeighting,
    NoAttention,
    NoAgcn,
    Hops(usize),
    SingleInterpolation,
    SingleIteration,
    Nodes(usize),
    BackboneOnlyFeatures,
    NoFinetune,
}

impl Ablation {
    /// Every row of the table.
    pub const TABLE: [Ablation; 12] = [
        Ablation::NoFocal,
        Ablation::NoFmWeighting,
        Ablation::NoAttention,
        Ablation::NoAgcn,
        Ablation::Hops(5),
        Ablation::Hops(15),
        Ablation::SingleInterpolation,
        Ablation::SingleIteration,
        Ablation::Nodes(100),
        Ablation::Nodes(300),
        Ablation::BackboneOnlyFeatures,
        Ablation::NoFinetune,
    ];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::NoFocal => f.write_str("no-focal"),
            Ablation::NoFmWeighting => f.write_str("no-fm-weighting"),
            Ablation::NoAttention => f.write_str("no-attention"),
            Ablation::NoAgcn => f.write_str("no-agcn"),
            Ablation::Hops(k) => write!(f, "hops-{k}"),
            Ablation::SingleInterpolation => f.write_str("interp-1"),
            Ablation::SingleIteration => f.write_str("iterations-1"),
            Ablation::Nodes(m) => write!(f, "nodes-{m}"),
            Ablation::BackboneOnlyFeatures => f.write_str("backbone-features"),
            Ablation::NoFinetune => f.write_str("no-finetune"),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::InvalidInput(format!("bad number in ablation `{s}`")))
        };
        Ok(match s {
            "no-focal" => Ablation::NoFocal,
            "no-fm-weighting" => Ablation::NoFmWeighting,
            "no-attention" => Ablation::NoAttention,
            "no-agcn" => Ablation::NoAgcn,
            "interp-1" => Ablation::SingleInterpolation,
            "iterations-1" => Ablation::SingleIteration,
            "backbone-features" => Ablation::BackboneOnlyFeatures,
            "no-finetune" => Ablation::NoFinetune,
            _ => {
                if let Some(k) = s.strip_prefix("hops-") {
                    Ablation::Hops(num(k)?)
                } else if let Some(m) = s.strip_prefix("nodes-") {
                    Ablation::Nodes(num(m)?)
                } else {
                    return invalid(format!("unknown ablation `{s}`"));
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseLogs {
    pub mask: Vec<EpochRecord>,
    pub refiner: Vec<EpochRecord>,
    pub joint: Vec<EpochRecord>,
    pub classifier: Vec<EpochRecord>,
}

impl PhaseLogs {
    /// One CSV per phase that ran.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, log) in [
            ("phase1", &self.mask),
            ("phase2", &self.refiner),
            ("phase3", &self.joint),
            ("classifier", &self.classifier),
        ] {
            if !log.is_empty() {
                write_log(&dir.join(format!("{name}.csv")), log)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    /// The deployable model.
    pub model: Model,
    /// The model as it stood before joint fine-tuning, with the same
    /// classifier head.
    pub before_joint: Model,
    pub logs: PhaseLogs,
}

pub fn train_pipeline(train: &[Sample], val: &[Sample], cfg: &PipelineConfig) -> Result<Trained> {
    cfg.validate()?;
    let mcnn0 = mcnn::init_weights(&cfg.mcnn, cfg.seed)?;
    let p1 = train_mask(train, val, mcnn0, &cfg.mask, cfg.mask_loss)?;
    let mut agcn_w = agcn::init_weights(&cfg.agcn, cfg.seed.wrapping_add(1))?;
    let mut mcnn_w = p1.weights;
    let (mut refiner_log, mut joint_log) = (Vec::new(), Vec::new());
    let mut before = mcnn_w.clone();
    if cfg.refine {
        let p2 = train_refiner(train, val, &mcnn_w, agcn_w, &cfg.contour, &cfg.refiner)?;
        agcn_w = p2.weights;
        refiner_log = p2.log;
    }
    let before_agcn = agcn_w.clone();
    if let (true, Some(jc)) = (cfg.refine, &cfg.joint) {
        let p3 = train_joint(
            train,
            val,
            (mcnn_w.clone(), agcn_w.clone()),
            &cfg.contour,
            jc,
            cfg.mask_loss,
        )?;
        (mcnn_w, agcn_w) = p3.weights;
        joint_log = p3.log;
    }
    let cls = train_classifier(train, val, mcnn_w, &cfg.classifier)?;
    // Same head on the pre-joint backbone keeps the two models comparable
    // on boundaries; only the backbone differs.
    let head = cls.weights.params.filtered(|n| !mcnn::is_backbone(n));
    before.params.extend(head);
    let wrap = |m, a| Model {
        mcnn: m,
        agcn: a,
        contour: cfg.contour.clone(),
        refine: cfg.refine,
    };
    Ok(Trained {
        model: wrap(cls.weights, agcn_w),
        before_joint: wrap(before, before_agcn),
        logs: PhaseLogs {
            mask: p1.log,
            refiner: refiner_log,
            joint: joint_log,
            classifier: cls.log,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_roundtrip() {
        for a in Ablation::TABLE {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
            let mut c = PipelineConfig::desk();
            c.apply(a);
            assert_ne!(c, PipelineConfig::desk(), "{a}");
            c.validate().unwrap();
        }
        assert!("no-such".parse::<Ablation>().is_err());
        assert!("hops-x".parse::<Ablation>().is_err());
    }
}
