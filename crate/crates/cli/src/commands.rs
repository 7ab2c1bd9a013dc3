//! Implementations behind the `boundary` subcommands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use boundary_engine::agcn;
use boundary_engine::eval::{evaluate, EvalConfig, Report};
use boundary_engine::io::{
    annotations_to_json, bbox_window, crop_image, load_corpus, load_image, save_corpus, BBox, RegionAnnotation,
    Source,
};
use boundary_engine::mcnn;
use boundary_engine::model::Model;
use boundary_engine::pipeline::{train_pipeline, Ablation, PipelineConfig};
use boundary_engine::synth::{gen_synthetic, split, Sample, SyntheticSpec};
use boundary_engine::training::{
    train_classifier, train_joint, train_mask, train_refiner, write_log, EpochRecord,
};

use crate::service::{router, AppState};

pub type CmdResult<T = ()> = Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn synth(spec: &SyntheticSpec, seed: u64, out: &Path) -> CmdResult {
    let samples = gen_synthetic(spec, seed).map_err(err)?;
    save_corpus(out, &samples).map_err(err)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_splits(corpus: &Path, train: usize, val: usize) -> CmdResult<Splits> {
    let samples = load_corpus(corpus).map_err(err)?;
    if samples.len() < train + val {
        return Err(format!(
            "corpus has {} samples, need at least {} for train + val",
            samples.len(),
            train + val
        ));
    }
    let (train, val, test) = split(samples, train, val);
    Ok(Splits { train, val, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PhaseArg {
    #[value(name = "1")]
    Mask,
    #[value(name = "2")]
    Refiner,
    #[value(name = "3")]
    Joint,
    Classifier,
    All,
}

fn log_to(dir: &Path, name: &str, log: &[EpochRecord]) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(err)?;
    write_log(&dir.join(format!("{name}.csv")), log).map_err(err)
}

/// Trains one phase (or all of them) and saves the bundle to `model_dir`.
/// Phases after the first continue from the bundle already there.
pub fn train(phase: PhaseArg, data: &Splits, cfg: &PipelineConfig, model_dir: &Path, logs: &Path) -> CmdResult {
    cfg.validate().map_err(err)?;
    let model = match phase {
        PhaseArg::All => {
            let t = train_pipeline(&data.train, &data.val, cfg).map_err(err)?;
            t.logs.write(logs).map_err(err)?;
            t.model
        }
        PhaseArg::Mask => {
            let init = mcnn::init_weights(&cfg.mcnn, cfg.seed).map_err(err)?;
            let out = train_mask(&data.train, &data.val, init, &cfg.mask, cfg.mask_loss).map_err(err)?;
            log_to(logs, "phase1", &out.log)?;
            Model {
                mcnn: out.weights,
                agcn: agcn::init_weights(&cfg.agcn, cfg.seed.wrapping_add(1)).map_err(err)?,
                contour: cfg.contour.clone(),
                refine: cfg.refine,
            }
        }
        PhaseArg::Refiner => {
            let mut m = Model::load(model_dir).map_err(err)?;
            let out = train_refiner(&data.train, &data.val, &m.mcnn, m.agcn.clone(), &m.contour, &cfg.refiner)
                .map_err(err)?;
            log_to(logs, "phase2", &out.log)?;
            m.agcn = out.weights;
            m
        }
        PhaseArg::Joint => {
            let mut m = Model::load(model_dir).map_err(err)?;
            let jc = cfg.joint.clone().ok_or("this configuration disables joint fine-tuning")?;
            let out = train_joint(
                &data.train,
                &data.val,
                (m.mcnn.clone(), m.agcn.clone()),
                &m.contour,
                &jc,
                cfg.mask_loss,
            )
            .map_err(err)?;
            log_to(logs, "phase3", &out.log)?;
            (m.mcnn, m.agcn) = out.weights;
            m
        }
        PhaseArg::Classifier => {
            let mut m = Model::load(model_dir).map_err(err)?;
            let out = train_classifier(&data.train, &data.val, m.mcnn.clone(), &cfg.classifier).map_err(err)?;
            log_to(logs, "classifier", &out.log)?;
            m.mcnn = out.weights;
            m
        }
    };
    model.save(model_dir).map_err(err)?;
    println!("saved model to {}", model_dir.display());
    Ok(())
}

pub fn print_report(label: &str, r: &Report) {
    println!(
        "{label}: n={} mean_hd={:.3} initial_hd={:.3} mask_iou={:.4} polygon_iou={:.4} accuracy={:.3}",
        r.overall.count,
        r.overall.mean_hd,
        r.overall.mean_initial_hd,
        r.overall.mean_mask_iou,
        r.overall.mean_polygon_iou,
        r.accuracy
    );
    for c in &r.per_class {
        println!("  {:<16} n={:<4} mean_hd={:.3} mask_iou={:.4}", c.class, c.count, c.mean_hd, c.mean_mask_iou);
    }
}

pub fn eval(model_dir: &Path, samples: &[Sample], out: &Path, cfg: &EvalConfig) -> CmdResult<Report> {
    let model = Model::load(model_dir).map_err(err)?;
    let report = evaluate(&model, samples, cfg).map_err(err)?;
    report.write(out, "report").map_err(err)?;
    print_report("eval", &report);
    Ok(report)
}

pub fn parse_bbox(s: &str) -> CmdResult<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("bbox `{s}` must be x,y,w,h"))?;
    match v[..] {
        [x, y, w, h] if w > 0.0 && h > 0.0 && v.iter().all(|t| t.is_finite()) => Ok(BBox { x, y, w, h }),
        _ => Err(format!("bbox `{s}` must be x,y,w,h with positive w and h")),
    }
}

/// Predicts one box of a page image; returns the annotation document.
pub fn infer(model: &Model, image: &Path, bbox: BBox) -> CmdResult<String> {
    let page = load_image(image).map_err(err)?;
    let (x0, y0, w, h) = bbox_window(&bbox, page.shape()[2], page.shape()[1]).map_err(err)?;
    let crop = crop_image(&page, x0, y0, w, h).map_err(err)?;
    let p = model.predict(&crop).map_err(err)?;
    let ann = RegionAnnotation {
        image_id: image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        bbox,
        polygon: p
            .polygon
            .points()
            .iter()
            .map(|q| boundary_engine::geom::Point::new(q.x + x0 as f64, q.y + y0 as f64))
            .collect(),
        region_class: p.region_class,
        source: Source::Predicted,
    };
    annotations_to_json(&[ann]).map_err(err)
}

pub async fn serve(model_dir: &Path, host: &str, port: u16) -> CmdResult {
    let model = Model::load(model_dir).map_err(|e| format!("cannot load model from {}: {e}", model_dir.display()))?;
    let state = Arc::new(AppState::new(model).map_err(err)?);
    let listener = tokio::net::TcpListener::bind((host, port)).await.map_err(err)?;
    println!("listening on {}", listener.local_addr().map_err(err)?);
    axum::serve(listener, router(state)).await.map_err(err)
}

fn ablation_name(flag: Option<Ablation>) -> String {
    flag.map_or("baseline".to_string(), |a| a.to_string())
}

/// Trains with `flag` applied (baseline when `None`) and evaluates on the
/// test split. Reports go to `out/<flag>.*`.
pub fn run_ablation(flag: Option<Ablation>, data: &Splits, mut cfg: PipelineConfig, out: &Path) -> CmdResult<Report> {
    if let Some(a) = flag {
        cfg.apply(a);
    }
    let name = ablation_name(flag);
    let trained = train_pipeline(&data.train, &data.val, &cfg).map_err(err)?;
    trained.logs.write(&out.join(format!("{name}_logs"))).map_err(err)?;
    let report = evaluate(&trained.model, &data.test, &EvalConfig::default()).map_err(err)?;
    report.write(out, &name).map_err(err)?;
    Ok(report)
}

/// [`run_ablation`] followed by a printed summary.
pub fn ablate(flag: Option<Ablation>, data: &Splits, cfg: PipelineConfig, out: &Path) -> CmdResult<Report> {
    let report = run_ablation(flag, data, cfg, out)?;
    print_report(&ablation_name(flag), &report);
    Ok(report)
}

pub fn default_logs(model_dir: &Path) -> PathBuf {
    model_dir.join("logs")
}
