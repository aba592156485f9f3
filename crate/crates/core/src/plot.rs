//! Minimal line charts rendered to PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 300;
const MARGIN: u32 = 30;
const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Renders one or more series sharing an x axis (the index) onto a white
/// canvas with axes and light grid lines. Non-finite values are skipped.
pub fn render_line_chart(series: &[&[f64]]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (left, right, top, bottom) = (MARGIN as i64, (WIDTH - MARGIN / 2) as i64, (MARGIN / 2) as i64, (HEIGHT - MARGIN) as i64);
    for k in 0..=4 {
        let y = top + (bottom - top) * k / 4;
        line(&mut img, (left, y), (right, y), Rgb([225, 225, 225]));
    }
    line(&mut img, (left, top), (left, bottom), Rgb([0, 0, 0]));
    line(&mut img, (left, bottom), (right, bottom), Rgb([0, 0, 0]));
    let values = series.iter().flat_map(|s| s.iter()).copied().filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = series.iter().map(|s| s.len()).max().unwrap_or(0).max(2) - 1;
    for (si, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[si % PALETTE.len()]);
        let point = |i: usize, v: f64| {
            let x = left + ((right - left) as f64 * i as f64 / n as f64).round() as i64;
            let y = bottom - ((bottom - top) as f64 * (v - lo) / span).round() as i64;
            (x, y)
        };
        let mut prev = None;
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = point(i, v);
            if let Some(q) = prev {
                line(&mut img, q, p, c);
            }
            for (ox, oy) in [(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1)] {
                line(&mut img, (p.0 + ox, p.1 + oy), (p.0 + ox, p.1 + oy), c);
            }
            prev = Some(p);
        }
    }
    img
}

pub fn write_line_chart(series: &[&[f64]], path: &Path) -> Result<()> {
    render_line_chart(series).save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
