//! Boundary and mask metrics, and per-class evaluation reports.
//!
//! The CSV report has one row per class that occurs in the dataset, then an
//! `overall` row, with columns
//! `class,count,mean_hd,mean_initial_hd,mean_mask_iou,mean_polygon_iou`.
//! `mean_initial_hd` is the distance of the contourized mask before
//! refinement. The confusion CSV is 8×8 with a header row, true class per
//! row and predicted class per column.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agcn::interpolate_contour;
use crate::error::{invalid, shape_err, Result};
use crate::geom::{threshold, BinaryMask, Point};
use crate::mcnn::{RegionClass, NUM_CLASSES};
use crate::model::{Model, Prediction};
use crate::synth::Sample;

fn directed(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| p.dist(*q)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between two vertex sets.
pub fn hausdorff_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return invalid("Hausdorff distance of an empty point set");
    }
    Ok(directed(a, b).max(directed(b, a)))
}

/// `|a ∧ b| / |a ∨ b|`, 1 when both are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return shape_err(format!(
            "masks differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits().iter().zip(b.bits()) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Points per ground-truth edge before measuring distances; 1 measures
    /// on the vertices as stored.
    pub gt_densify: usize,
    /// Probability at which the mask is binarized for IoU.
    pub mask_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gt_densify: 1,
            mask_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: String,
    pub class: RegionClass,
    pub predicted_class: RegionClass,
    pub hd: f64,
    pub initial_hd: f64,
    pub mask_iou: f64,
    pub polygon_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    /// Class key, or `overall`.
    pub class: String,
    pub count: usize,
    pub mean_hd: f64,
    pub mean_initial_hd: f64,
    pub mean_mask_iou: f64,
    pub mean_polygon_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Sorted by id.
    pub instances: Vec<InstanceResult>,
    pub per_class: Vec<ClassSummary>,
    pub overall: ClassSummary,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
}

fn summarize(label: &str, rows: &[&InstanceResult]) -> ClassSummary {
    let n = rows.len() as f64;
    let avg = |f: fn(&InstanceResult) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    ClassSummary {
        class: label.to_string(),
        count: rows.len(),
        mean_hd: avg(|r| r.hd),
        mean_initial_hd: avg(|r| r.initial_hd),
        mean_mask_iou: avg(|r| r.mask_iou),
        mean_polygon_iou: avg(|r| r.polygon_iou),
    }
}

/// Scores one prediction against its ground truth.
pub fn score(sample: &Sample, pred: &Prediction, cfg: &EvalConfig) -> Result<InstanceResult> {
    let (w, h) = (sample.width(), sample.height());
    let gt = interpolate_contour(sample.polygon.points(), cfg.gt_densify)?;
    let mask = threshold(pred.mask_prob.data(), w, h, cfg.mask_threshold)?;
    Ok(InstanceResult {
        id: sample.id.clone(),
        class: sample.class,
        predicted_class: pred.region_class,
        hd: hausdorff_distance(pred.polygon.points(), &gt)?,
        initial_hd: hausdorff_distance(pred.initial_polygon.points(), &gt)?,
        mask_iou: iou(&mask, &sample.mask)?,
        polygon_iou: iou(&BinaryMask::rasterize(&pred.polygon, w, h), &sample.mask)?,
    })
}

/// Aggregates instance results; the input order does not matter.
pub fn report(mut instances: Vec<InstanceResult>) -> Result<Report> {
    if instances.is_empty() {
        return invalid("cannot report on an empty dataset");
    }
    instances.sort_by(|a, b| a.id.cmp(&b.id));
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    for r in &instances {
        confusion[r.class.index()][r.predicted_class.index()] += 1;
    }
    let per_class = RegionClass::ALL
        .iter()
        .filter_map(|c| {
            let rows: Vec<&InstanceResult> = instances.iter().filter(|r| r.class == *c).collect();
            (!rows.is_empty()).then(|| summarize(c.key(), &rows))
        })
        .collect();
    let all: Vec<&InstanceResult> = instances.iter().collect();
    let overall = summarize("overall", &all);
    let correct = instances.iter().filter(|r| r.class == r.predicted_class).count();
    Ok(Report {
        accuracy: correct as f64 / instances.len() as f64,
        per_class,
        overall,
        confusion,
        instances,
    })
}

pub fn evaluate(model: &Model, samples: &[Sample], cfg: &EvalConfig) -> Result<Report> {
    let rows = crate::parallel::map_slice(samples, |s| score(s, &model.predict(&s.image)?, cfg));
    report(rows.into_iter().collect::<Result<Vec<_>>>()?)
}

/// A prediction that reproduces the ground truth; handy as a reference.
pub fn perfect_prediction(sample: &Sample) -> Prediction {
    let mask = sample.mask.bits().iter().map(|&b| b as u8 as f64).collect();
    let mut probs = vec![0.0; NUM_CLASSES];
    probs[sample.class.index()] = 1.0;
    Prediction {
        polygon: sample.polygon.clone(),
        initial_polygon: sample.polygon.clone(),
        region_class: sample.class,
        class_probs: probs,
        mask_prob: crate::tensor::Tensor::new(&[sample.height(), sample.width()], mask).expect("mask size"),
    }
}

impl Report {
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.per_class.iter().chain([&self.overall]) {
            w.serialize(row)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is UTF-8"))
    }

    pub fn confusion_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(RegionClass::ALL.iter().map(|c| c.key().to_string()));
        w.write_record(&header)?;
        for (c, row) in RegionClass::ALL.iter().zip(&self.confusion) {
            let mut rec = vec![c.key().to_string()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is UTF-8"))
    }

    /// Writes `<stem>.csv`, `<stem>_confusion.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.summary_csv()?)?;
        fs::write(dir.join(format!("{stem}_confusion.csv")), self.confusion_csv()?)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
