use serde::{Deserialize, Serialize};

use super::mask::{connect_components, major_components, threshold, BinaryMask, Structuring};
use super::polygon::Polygon;
use super::spline::{resample_closed, sample_uniform};
use super::trace::trace_contour;
use crate::error::{shape_err, Result};

/// Knobs of the mask-to-polygon stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContourConfig {
    /// Probability at or above which a pixel is foreground.
    pub threshold: f64,
    /// Components smaller than this fraction of the largest are dropped.
    pub area_fraction: f64,
    /// Second-difference penalty of the spline fit.
    pub smoothing: f64,
    /// Number of boundary points produced.
    pub num_points: usize,
}

impl Default for ContourConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            area_fraction: 0.05,
            smoothing: 1.0,
            num_points: 200,
        }
    }
}

/// The region mask that contourization traces: thresholded, closed, reduced
/// to its major components and joined into one piece. `None` when nothing
/// survives thresholding.
pub fn region_mask(
    prob: &[f64],
    height: usize,
    width: usize,
    cfg: &ContourConfig,
) -> Result<Option<BinaryMask>> {
    if prob.len() != height * width {
        return shape_err(format!(
            "probability map has {} values for a {height}x{width} crop",
            prob.len()
        ));
    }
    let closed = threshold(prob, width, height, cfg.threshold)?.close(Structuring::Disk3);
    let comps = major_components(&closed, cfg.area_fraction);
    if comps.is_empty() {
        return Ok(None);
    }
    Ok(Some(connect_components(&comps, width, height, height)))
}

/// Converts a mask probability map into `num_points` boundary points.
///
/// When no pixel passes the threshold, the crop rectangle itself is sampled.
pub fn contourize(prob: &[f64], height: usize, width: usize, cfg: &ContourConfig) -> Result<Polygon> {
    match region_mask(prob, height, width, cfg)? {
        Some(mask) => sample_uniform(&trace_contour(&mask)?, cfg.num_points, cfg.smoothing),
        None => crop_rectangle(height, width, cfg.num_points),
    }
}

/// The crop border sampled at `m` equally spaced points.
pub fn crop_rectangle(height: usize, width: usize, m: usize) -> Result<Polygon> {
    let rect = Polygon::rectangle(0.0, 0.0, width as f64, height as f64)?;
    Polygon::new_dedup(resample_closed(rect.points(), m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ribbon_map(h: usize, w: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> Vec<f64> {
        let mut p = vec![0.1; h * w];
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                p[y * w + x] = 0.9;
            }
        }
        p
    }

    #[test]
    fn ribbon_contour_hugs_true_boundary() {
        let (h, w) = (40, 340);
        let prob = ribbon_map(h, w, 20, 10, 300, 20);
        let poly = contourize(&prob, h, w, &ContourConfig::default()).unwrap();
        assert_eq!(poly.len(), 200);
        let truth = Polygon::rectangle(20.0, 10.0, 320.0, 30.0).unwrap();
        for p in poly.points() {
            assert!(truth.distance_to_boundary(*p) <= 1.5, "{p:?}");
        }
        assert!(poly.is_simple());
    }

    #[test]
    fn empty_map_falls_back_to_crop_rectangle() {
        let poly = contourize(&vec![0.0; 30 * 50], 30, 50, &ContourConfig::default()).unwrap();
        assert_eq!(poly.len(), 200);
        assert_eq!(poly.bounds(), (0.0, 0.0, 50.0, 30.0));
        let rect = Polygon::rectangle(0.0, 0.0, 50.0, 30.0).unwrap();
        for p in poly.points() {
            assert!(rect.distance_to_boundary(*p) < 1e-12);
        }
    }

    #[test]
    fn disjoint_blobs_yield_one_enclosing_contour() {
        let (h, w) = (28, 80);
        let mut prob = ribbon_map(h, w, 5, 8, 15, 12);
        for y in 8..20 {
            for x in 55..70 {
                prob[y * w + x] = 0.9;
            }
        }
        let poly = contourize(&prob, h, w, &ContourConfig::default()).unwrap();
        assert_eq!(poly.len(), 200);
        // Both blobs lie inside the single traced outline.
        assert!(poly.contains(super::super::Point::new(12.0, 14.0)));
        assert!(poly.contains(super::super::Point::new(62.0, 14.0)));
        assert!(poly.contains(super::super::Point::new(40.0, 14.5)));
    }

    #[test]
    fn output_is_deterministic() {
        let prob: Vec<f64> = (0..30 * 60)
            .map(|i| (((i % 60) as f64 - 30.0).powi(2) / 400.0 + ((i / 60) as f64 - 15.0).powi(2) / 100.0 < 1.0) as u8 as f64)
            .collect();
        let a = contourize(&prob, 30, 60, &ContourConfig::default()).unwrap();
        let b = contourize(&prob, 30, 60, &ContourConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
