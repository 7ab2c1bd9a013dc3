//! Datasets on disk: `images/<image_id>.png` plus one `annotations.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::annotations::{load_annotations, save_annotations, BBox, RegionAnnotation, Source};
use super::image::{crop_image, load_image, save_png};
use crate::error::{invalid, Result};
use crate::geom::{BinaryMask, Point, Polygon};
use crate::synth::Sample;
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

/// Writes each sample as its own image with a full-frame box.
pub fn save_corpus(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    let mut anns = Vec::with_capacity(samples.len());
    for s in samples {
        save_png(&dir.join(IMAGES_DIR).join(format!("{}.png", s.id)), &s.image)?;
        anns.push(RegionAnnotation {
            image_id: s.id.clone(),
            bbox: BBox {
                x: 0.0,
                y: 0.0,
                w: s.width() as f64,
                h: s.height() as f64,
            },
            polygon: s.polygon.points().to_vec(),
            region_class: s.class,
            source: Source::GroundTruth,
        });
    }
    save_annotations(&dir.join(ANNOTATIONS_FILE), &anns)
}

/// Pixel window `(x0, y0, w, h)` covering a box, clipped to the image.
pub fn bbox_window(b: &BBox, width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = ((b.x + b.w).ceil().max(0.0) as usize).min(width);
    let y1 = ((b.y + b.h).ceil().max(0.0) as usize).min(height);
    if x1 <= x0 || y1 <= y0 {
        return invalid(format!("box {b:?} lies outside the {width}x{height} image"));
    }
    Ok((x0, y0, x1 - x0, y1 - y0))
}

/// Loads every annotation as a crop sample. Masks are rasterized from the
/// polygons; ids are `<image_id>` or `<image_id>#<n>` for repeated images.
pub fn load_corpus(dir: &Path) -> Result<Vec<Sample>> {
    let anns = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
    let mut images: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(anns.len());
    for a in anns {
        if !images.contains_key(&a.image_id) {
            let img = load_image(&dir.join(IMAGES_DIR).join(format!("{}.png", a.image_id)))?;
            images.insert(a.image_id.clone(), img);
        }
        let page = &images[&a.image_id];
        let (x0, y0, w, h) = bbox_window(&a.bbox, page.shape()[2], page.shape()[1])?;
        let image = crop_image(page, x0, y0, w, h)?;
        let pts = a
            .polygon
            .iter()
            .map(|p| Point::new(p.x - x0 as f64, p.y - y0 as f64))
            .collect();
        let polygon = Polygon::new_dedup(pts)?;
        let n = seen.entry(a.image_id.clone()).or_insert(0);
        let id = if *n == 0 { a.image_id.clone() } else { format!("{}#{n}", a.image_id) };
        *n += 1;
        out.push(Sample {
            id,
            mask: BinaryMask::rasterize(&polygon, w, h),
            image,
            polygon,
            class: a.region_class,
            family: None,
        });
    }
    Ok(out)
}
