//! Colour-mapped disparity panels and sweep line plots.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::image::{DisparityMap, Image};

/// Turbo colour map over `[0, max]`; near disparities are warm.
pub fn colorize_disparity(d: &DisparityMap, max: f64) -> Image {
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut out = Image::new(d.height(), d.width(), 3);
    for r in 0..d.height() {
        for c in 0..d.width() {
            let t = (d.get(r, c) * scale).clamp(0.0, 1.0);
            let col = colorous::TURBO.eval_continuous(t);
            out.set(r, c, 0, col.r as f64 / 255.0);
            out.set(r, c, 1, col.g as f64 / 255.0);
            out.set(r, c, 2, col.b as f64 / 255.0);
        }
    }
    out
}

pub fn save_disparity_panel(path: &Path, d: &DisparityMap, max: f64) -> Result<()> {
    colorize_disparity(d, max).save_png(path)
}

/// One plotted curve: its points in data coordinates.
pub struct Series {
    pub points: Vec<(f64, f64)>,
}

fn plot_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), msg: e.to_string() }
}

/// Unlabelled line plot (axes only) of every series; colours follow the Category10 palette.
pub fn save_line_plot(path: &Path, series: &[Series]) -> Result<()> {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = BitMapBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_error(path, e))?;
    let area = root.margin(20, 20, 20, 20);
    let mut chart = ChartBuilder::on(&area)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_error(path, e))?;
    let axis = ShapeStyle::from(&BLACK).stroke_width(1);
    chart
        .draw_series(LineSeries::new([(x0, y0 - pad), (x1, y0 - pad)], axis))
        .map_err(|e| plot_error(path, e))?;
    chart
        .draw_series(LineSeries::new([(x0, y0 - pad), (x0, y1 + pad)], axis))
        .map_err(|e| plot_error(path, e))?;
    for (i, s) in series.iter().enumerate() {
        let c = colorous::CATEGORY10[i % colorous::CATEGORY10.len()];
        let style = ShapeStyle::from(&RGBColor(c.r, c.g, c.b)).stroke_width(2);
        let pts: Vec<(f64, f64)> = s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        chart.draw_series(LineSeries::new(pts, style)).map_err(|e| plot_error(path, e))?;
    }
    root.present().map_err(|e| plot_error(path, e))
}
