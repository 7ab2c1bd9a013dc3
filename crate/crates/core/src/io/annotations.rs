//! Region annotation documents.
//!
//! ```json
//! {
//!   "version": 1,
//!   "annotations": [
//!     {
//!       "image_id": "page-017",
//!       "bbox": {"x": 40, "y": 12, "w": 300, "h": 36},
//!       "polygon": [[41.5, 13.0], [338.0, 14.5], [337.0, 46.0]],
//!       "class": "line_segment",
//!       "source": "ground_truth"
//!     }
//!   ]
//! }
//! ```
//!
//! `class` takes a snake_case key or the display name ("Line Segment");
//! it is always written as the key. `source` is one of
//! `ground_truth`, `predicted`, `human_corrected`. Polygon vertices are in
//! page pixels and must lie within the box grown by [`BBOX_TOLERANCE`] on
//! every side. Numbers are written in shortest round-trip form, so a
//! load/save cycle preserves every coordinate exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geom::Point;
use crate::mcnn::RegionClass;

pub const SCHEMA_VERSION: u64 = 1;

/// Slack, in pixels, allowed between a polygon and its box.
pub const BBOX_TOLERANCE: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn contains(&self, p: Point, tolerance: f64) -> bool {
        p.x >= self.x - tolerance
            && p.x <= self.x + self.w + tolerance
            && p.y >= self.y - tolerance
            && p.y <= self.y + self.h + tolerance
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    GroundTruth,
    Predicted,
    HumanCorrected,
}

impl Source {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "ground_truth" => Some(Source::GroundTruth),
            "predicted" => Some(Source::Predicted),
            "human_corrected" => Some(Source::HumanCorrected),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionAnnotation {
    pub image_id: String,
    pub bbox: BBox,
    pub polygon: Vec<Point>,
    #[serde(rename = "class", serialize_with = "class_key")]
    pub region_class: RegionClass,
    pub source: Source,
}

fn class_key<S: serde::Serializer>(c: &RegionClass, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(c.key())
}

#[derive(Serialize)]
struct Document<'a> {
    version: u64,
    annotations: &'a [RegionAnnotation],
}

fn schema<T>(field: impl Into<String>, message: impl Into<String>) -> Result<T> {
    Err(Error::Schema {
        field: field.into(),
        message: message.into(),
    })
}

fn field<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value> {
    match obj.get(key) {
        Some(v) => Ok(v),
        None => schema(format!("{path}.{key}"), "missing"),
    }
}

fn number(v: &Value, path: &str) -> Result<f64> {
    match v.as_f64() {
        Some(x) if x.is_finite() => Ok(x),
        _ => schema(path, format!("expected a finite number, got {v}")),
    }
}

fn string<'a>(v: &'a Value, path: &str) -> Result<&'a str> {
    match v.as_str() {
        Some(s) => Ok(s),
        None => schema(path, format!("expected a string, got {v}")),
    }
}

fn parse_bbox(v: &Value, path: &str) -> Result<BBox> {
    let Some(obj) = v.as_object() else {
        return schema(path, "expected an object with x, y, w, h");
    };
    let get = |k: &str| number(field(obj, path, k)?, &format!("{path}.{k}"));
    let b = BBox {
        x: get("x")?,
        y: get("y")?,
        w: get("w")?,
        h: get("h")?,
    };
    if b.w <= 0.0 || b.h <= 0.0 {
        return schema(path, "width and height must be positive");
    }
    Ok(b)
}

fn parse_polygon(v: &Value, path: &str, bbox: &BBox) -> Result<Vec<Point>> {
    let Some(items) = v.as_array() else {
        return schema(path, "expected a list of [x, y] pairs");
    };
    if items.len() < 3 {
        return schema(path, format!("needs at least 3 points, got {}", items.len()));
    }
    let mut pts = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let p = format!("{path}[{i}]");
        let pair = match item.as_array() {
            Some(a) if a.len() == 2 => a,
            _ => return schema(p, "expected [x, y]"),
        };
        let pt = Point::new(number(&pair[0], &p)?, number(&pair[1], &p)?);
        if !bbox.contains(pt, BBOX_TOLERANCE) {
            return schema(p, format!("point ({}, {}) lies outside the bbox", pt.x, pt.y));
        }
        pts.push(pt);
    }
    Ok(pts)
}

fn parse_annotation(v: &Value, path: &str) -> Result<RegionAnnotation> {
    let Some(obj) = v.as_object() else {
        return schema(path, "expected an object");
    };
    let image_id = string(field(obj, path, "image_id")?, &format!("{path}.image_id"))?.to_string();
    let bbox = parse_bbox(field(obj, path, "bbox")?, &format!("{path}.bbox"))?;
    let polygon = parse_polygon(field(obj, path, "polygon")?, &format!("{path}.polygon"), &bbox)?;
    let class_path = format!("{path}.class");
    let class_str = string(field(obj, path, "class")?, &class_path)?;
    let Ok(region_class) = class_str.parse::<RegionClass>() else {
        return schema(class_path, format!("unknown region class `{class_str}`"));
    };
    let source = match obj.get("source") {
        None => Source::GroundTruth,
        Some(s) => {
            let sp = format!("{path}.source");
            match Source::parse(string(s, &sp)?) {
                Some(src) => src,
                None => return schema(sp, format!("unknown source {s}")),
            }
        }
    };
    Ok(RegionAnnotation {
        image_id,
        bbox,
        polygon,
        region_class,
        source,
    })
}

pub fn parse_annotations(json: &str) -> Result<Vec<RegionAnnotation>> {
    let doc: Value = serde_json::from_str(json)?;
    let Some(obj) = doc.as_object() else {
        return schema("$", "expected an object");
    };
    match obj.get("version").and_then(Value::as_u64) {
        Some(SCHEMA_VERSION) => {}
        Some(v) => return schema("version", format!("unsupported version {v}")),
        None => return schema("version", "missing or not an integer"),
    }
    let Some(items) = obj.get("annotations").and_then(Value::as_array) else {
        return schema("annotations", "missing or not a list");
    };
    items
        .iter()
        .enumerate()
        .map(|(i, a)| parse_annotation(a, &format!("annotations[{i}]")))
        .collect()
}

/// Renders a document. Fails when an annotation would not load back.
pub fn annotations_to_json(annotations: &[RegionAnnotation]) -> Result<String> {
    let doc = Document {
        version: SCHEMA_VERSION,
        annotations,
    };
    let json = serde_json::to_string_pretty(&doc)?;
    parse_annotations(&json)?;
    Ok(json)
}

pub fn load_annotations(path: &Path) -> Result<Vec<RegionAnnotation>> {
    parse_annotations(&fs::read_to_string(path)?)
}

pub fn save_annotations(path: &Path, annotations: &[RegionAnnotation]) -> Result<()> {
    fs::write(path, annotations_to_json(annotations)?)?;
    Ok(())
}
