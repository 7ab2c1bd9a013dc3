//! A trained pipeline: mask network, contourization and refiner, stored as
//! a directory bundle.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agcn::{self, AgcnConfig, AgcnWeights};
use crate::error::{invalid, Result};
use crate::geom::{contourize, resample_closed, ContourConfig, Polygon};
use crate::io::{encode_weights, load_weights, save_weights};
use crate::mcnn::{self, McnnConfig, McnnWeights, RegionClass};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MCNN_FILE: &str = "mcnn.bnw";
pub const AGCN_FILE: &str = "agcn.bnw";
pub const CONFIG_FILE: &str = "model.json";

/// Everything about a bundle except the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mcnn: McnnConfig,
    pub agcn: AgcnConfig,
    pub contour: ContourConfig,
    /// Run the refiner; when false the contourized mask is the answer.
    pub refine: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub mcnn: McnnWeights,
    pub agcn: AgcnWeights,
    pub contour: ContourConfig,
    pub refine: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Final boundary in crop pixels.
    pub polygon: Polygon,
    /// Contourized mask before refinement.
    pub initial_polygon: Polygon,
    pub region_class: RegionClass,
    pub class_probs: Vec<f64>,
    /// `[H,W]` mask probabilities.
    pub mask_prob: Tensor,
}

/// Every name in `reference` must be present in `params` with the same shape,
/// and nothing else.
fn check_layout(params: &ParamSet, reference: &ParamSet, what: &str) -> Result<()> {
    for (name, t) in reference.iter() {
        match params.get(name) {
            Ok(p) if p.shape() == t.shape() => {}
            Ok(p) => {
                return invalid(format!(
                    "{what} parameter `{name}` has shape {:?}, config expects {:?}",
                    p.shape(),
                    t.shape()
                ))
            }
            Err(_) => return invalid(format!("{what} weights lack `{name}`")),
        }
    }
    if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
        return invalid(format!("{what} weights have unexpected `{extra}`"));
    }
    Ok(())
}

impl Model {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            mcnn: self.mcnn.config.clone(),
            agcn: self.agcn.config.clone(),
            contour: self.contour.clone(),
            refine: self.refine,
        }
    }

    /// Pairs weights with a config, checking that they fit.
    pub fn assemble(config: ModelConfig, mcnn_params: ParamSet, agcn_params: ParamSet) -> Result<Self> {
        check_layout(&mcnn_params, &mcnn::init_weights(&config.mcnn, 0)?.params, "mask network")?;
        check_layout(&agcn_params, &agcn::init_weights(&config.agcn, 0)?.params, "refiner")?;
        if config.contour.num_points <= 2 * config.agcn.hop_k {
            return invalid(format!(
                "{} contour points cannot carry a {}-hop ring",
                config.contour.num_points, config.agcn.hop_k
            ));
        }
        Ok(Self {
            mcnn: McnnWeights {
                config: config.mcnn,
                params: mcnn_params,
            },
            agcn: AgcnWeights {
                config: config.agcn,
                params: agcn_params,
            },
            contour: config.contour,
            refine: config.refine,
        })
    }

    fn config_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.config())?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_weights(&dir.join(MCNN_FILE), &self.mcnn.params)?;
        save_weights(&dir.join(AGCN_FILE), &self.agcn.params)?;
        fs::write(dir.join(CONFIG_FILE), self.config_json()?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let m = load_weights(&dir.join(MCNN_FILE))?;
        let a = load_weights(&dir.join(AGCN_FILE))?;
        Self::assemble(config, m, a)
    }

    /// Hex SHA-256 of the config and both weight files.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.config_json()?.as_bytes());
        h.update(encode_weights(&self.mcnn.params));
        h.update(encode_weights(&self.agcn.params));
        Ok(hex::encode(h.finalize()))
    }

    /// Mask, contour, refinement and class for one `[3,H,W]` crop.
    pub fn predict(&self, crop: &Tensor) -> Result<Prediction> {
        let (h, w) = (crop.shape().get(1).copied().unwrap_or(0), crop.shape().get(2).copied().unwrap_or(0));
        let out = mcnn::forward(crop, &self.mcnn)?;
        let initial = contourize(out.mask_prob.data(), h, w, &self.contour)?;
        let polygon = if self.refine {
            agcn::refine(&initial, &out.skip_features, &self.agcn, (h, w))?
        } else {
            initial.clone()
        };
        let (region_class, class_probs) = mcnn::region_classify(&out.class_logits)?;
        Ok(Prediction {
            polygon,
            initial_polygon: initial,
            region_class,
            class_probs,
            mask_prob: out.mask_prob,
        })
    }

    /// One refiner pass from a caller-supplied contour, resampled to the
    /// model's point count first.
    pub fn refine_once(&self, crop: &Tensor, contour: &[crate::geom::Point]) -> Result<Polygon> {
        if contour.len() < 3 {
            return invalid("contour needs at least 3 points");
        }
        let (h, w) = (crop.shape().get(1).copied().unwrap_or(0), crop.shape().get(2).copied().unwrap_or(0));
        let out = mcnn::forward(crop, &self.mcnn)?;
        let start = Polygon::new_dedup(resample_closed(contour, self.contour.num_points))?;
        let single = AgcnWeights {
            config: AgcnConfig {
                iterations: 1,
                ..self.agcn.config.clone()
            },
            params: self.agcn.params.clone(),
        };
        agcn::refine(&start, &out.skip_features, &single, (h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_model() -> Model {
        let mcnn = mcnn::init_weights(&McnnConfig::desk(), 1).unwrap();
        let agcn_cfg = AgcnConfig {
            hidden_dim: 8,
            num_res_blocks: 1,
            ..AgcnConfig::default()
        };
        let agcn = agcn::init_weights(&agcn_cfg, 1).unwrap();
        Model {
            mcnn,
            agcn,
            contour: ContourConfig::default(),
            refine: true,
        }
    }

    #[test]
    fn bundle_roundtrip_and_fingerprint() {
        let m = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.fingerprint().unwrap(), m.fingerprint().unwrap());
        let other = Model { refine: false, ..m.clone() };
        assert_ne!(other.fingerprint().unwrap(), m.fingerprint().unwrap());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let m = tiny_model();
        let mut cfg = m.config();
        cfg.agcn.hidden_dim = 16;
        assert!(Model::assemble(cfg, m.mcnn.params.clone(), m.agcn.params.clone()).is_err());
    }

    #[test]
    fn prediction_shapes() {
        let m = tiny_model();
        let crop = Tensor::full(&[3, 20, 45], 0.3);
        let p = m.predict(&crop).unwrap();
        assert_eq!(p.polygon.len(), 200);
        assert_eq!(p.class_probs.len(), 8);
        assert_eq!(p.mask_prob.shape(), &[20, 45]);
        for q in p.polygon.points() {
            assert!((0.0..=45.0).contains(&q.x) && (0.0..=20.0).contains(&q.y));
        }
        assert_eq!(m.predict(&crop).unwrap(), p);
        let r = m.refine_once(&crop, p.polygon.points()).unwrap();
        assert_eq!(r.len(), 200);
    }
}
