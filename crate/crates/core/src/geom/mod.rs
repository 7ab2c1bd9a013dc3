//! Non-learned geometry: weight maps, masks, tracing and contour sampling.

mod contourize;
mod fast_marching;
mod mask;
mod polygon;
mod spline;
mod trace;

pub use contourize::{contourize, crop_rectangle, region_mask, ContourConfig};
pub use fast_marching::{fast_marching_levels, fast_marching_map, DistanceMap};
pub use mask::{
    band_thickness, connect_components, draw_band, major_components, threshold, BinaryMask,
    Component, Structuring,
};
pub use polygon::{Point, Polygon};
pub use spline::{resample_closed, sample_uniform, ClosedBSpline};
pub use trace::trace_contour;
