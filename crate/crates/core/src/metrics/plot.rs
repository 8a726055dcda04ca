use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: f32 = 24.0;

pub struct Series<'a> {
    pub values: &'a [f64],
    pub color: [u8; 3],
}

/// Line plot of one or more curves sharing frame-index and value axes.
/// Horizontal grid lines are drawn every 5 units of value.
pub fn plot_curves(series: &[Series<'_>], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let finite = || series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let lo = finite().fold(f64::INFINITY, f64::min);
    let hi = finite().fold(f64::NEG_INFINITY, f64::max);
    let len = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
    let (pw, ph) = (WIDTH as f32 - 2.0 * MARGIN, HEIGHT as f32 - 2.0 * MARGIN);
    let x = |i: usize| MARGIN + pw * i as f32 / (len.max(2) - 1) as f32;
    let y = |v: f64| MARGIN + ph * (1.0 - ((v - lo) / (hi - lo)) as f32);

    let mut g = (lo / 5.0).ceil() * 5.0;
    while g <= hi {
        draw_line_segment_mut(&mut img, (MARGIN, y(g)), (MARGIN + pw, y(g)), Rgb([225, 225, 225]));
        g += 5.0;
    }
    let frame = Rect::at(MARGIN as i32, MARGIN as i32).of_size(pw as u32, ph as u32);
    draw_hollow_rect_mut(&mut img, frame, Rgb([80, 80, 80]));
    for s in series {
        for (i, w) in s.values.windows(2).enumerate() {
            if w[0].is_finite() && w[1].is_finite() {
                draw_line_segment_mut(&mut img, (x(i), y(w[0])), (x(i + 1), y(w[1])), Rgb(s.color));
            }
        }
    }
    img.save(path).map_err(|e| Error::Invalid(format!("writing plot {}: {e}", path.display())))
}
