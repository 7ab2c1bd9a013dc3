#![allow(dead_code)]

use std::f64::consts::TAU;

use boundary_engine::agcn::{self, AgcnConfig};
use boundary_engine::geom::ContourConfig;
use boundary_engine::mcnn::{self, McnnConfig};
use boundary_engine::model::Model;
use boundary_engine::Tensor;

/// Untrained but complete model, small enough for quick tests.
pub fn small_model(seed: u64) -> Model {
    Model {
        mcnn: mcnn::init_weights(&McnnConfig::desk(), seed).unwrap(),
        agcn: agcn::init_weights(
            &AgcnConfig {
                hidden_dim: 8,
                num_res_blocks: 1,
                ..AgcnConfig::default()
            },
            seed,
        )
        .unwrap(),
        contour: ContourConfig::default(),
        refine: true,
    }
}

/// Dark ellipse on a light background, with its analytic boundary.
pub fn ellipse_crop(h: usize, w: usize) -> Tensor {
    let (cx, cy, rx, ry) = (w as f64 / 2.0, h as f64 / 2.0, w as f64 * 0.4, h as f64 * 0.4);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            let inside = dx * dx + dy * dy <= 1.0;
            for c in 0..3 {
                data[c * h * w + y * w + x] = if inside { [0.85, 0.15, 0.15][c] } else { 0.6 };
            }
        }
    }
    Tensor::new(&[3, h, w], data).unwrap()
}

pub fn ellipse_boundary(h: usize, w: usize, n: usize) -> Vec<boundary_engine::geom::Point> {
    let (cx, cy, rx, ry) = (w as f64 / 2.0, h as f64 / 2.0, w as f64 * 0.4, h as f64 * 0.4);
    (0..n)
        .map(|i| {
            let t = TAU * i as f64 / n as f64;
            boundary_engine::geom::Point::new(cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}
