//! Plot-file emission: layer-weight charts, mIoU bars, and prediction
//! overlays. Rendering is dependency-free (a small embedded 5x7 font on top
//! of raw RGB buffers) so outputs are byte-deterministic.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{MlmpError, Result};
use crate::eval::{LayerWeightStat, RunReport};

const BG: Rgb<u8> = Rgb([250, 250, 250]);
const FG: Rgb<u8> = Rgb([30, 30, 30]);
const BAR: Rgb<u8> = Rgb([66, 114, 196]);
const WHISKER: Rgb<u8> = Rgb([200, 60, 60]);

/// 5x7 glyphs, low five bits per row. Uppercase input is lowercased.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_lowercase() {
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        'a' => [0x00, 0x00, 0x0e, 0x01, 0x0f, 0x11, 0x0f],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1e],
        'c' => [0x00, 0x00, 0x0e, 0x10, 0x10, 0x11, 0x0e],
        'd' => [0x01, 0x01, 0x0d, 0x13, 0x11, 0x11, 0x0f],
        'e' => [0x00, 0x00, 0x0e, 0x11, 0x1f, 0x10, 0x0e],
        'f' => [0x06, 0x09, 0x08, 0x1c, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0f, 0x11, 0x11, 0x0f, 0x01, 0x0e],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0c, 0x04, 0x04, 0x04, 0x0e],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0c],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0c, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'm' => [0x00, 0x00, 0x1a, 0x15, 0x15, 0x15, 0x15],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0e, 0x11, 0x11, 0x11, 0x0e],
        'p' => [0x00, 0x00, 0x1e, 0x11, 0x1e, 0x10, 0x10],
        'q' => [0x00, 0x00, 0x0d, 0x13, 0x0f, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0e, 0x10, 0x0e, 0x01, 0x1e],
        't' => [0x08, 0x08, 0x1c, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0d],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'w' => [0x00, 0x00, 0x11, 0x15, 0x15, 0x15, 0x0a],
        'x' => [0x00, 0x00, 0x11, 0x0a, 0x04, 0x0a, 0x11],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0f, 0x01, 0x0e],
        'z' => [0x00, 0x00, 0x1f, 0x02, 0x04, 0x08, 0x1f],
        '-' => [0x00, 0x00, 0x00, 0x0e, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1f],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x06, 0x04, 0x08],
        ':' => [0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00],
        '/' => [0x01, 0x02, 0x04, 0x04, 0x04, 0x08, 0x10],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '+' => [0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00],
        _ => [0x00; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        let g = glyph(ch);
        for (ry, row) in g.iter().enumerate() {
            for rx in 0..5 {
                if row & (0x10 >> rx) != 0 {
                    let (px, py) = (cx + rx as i64, y + ry as i64);
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height()
                    {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
        cx += 6;
    }
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

/// One chart per dataset: a row of layer-weight bars (with +-std whiskers)
/// per corruption, layer indices along the bottom.
pub fn layer_weight_plot(
    stats: &[LayerWeightStat],
    dataset: &str,
    first_layer_index: usize,
    path: &Path,
) -> Result<()> {
    let rows: Vec<&LayerWeightStat> = stats.iter().filter(|s| s.dataset == dataset).collect();
    if rows.is_empty() {
        return Err(MlmpError::invalid(format!(
            "no layer-weight statistics for dataset {dataset}"
        )));
    }
    let layers = rows[0].mean.len();
    let label_w = 130u32;
    let bar_w = 26u32;
    let row_h = 64u32;
    let width = label_w + layers as u32 * (bar_w + 6) + 20;
    let height = rows.len() as u32 * row_h + 40;
    let mut img = RgbImage::from_pixel(width, height, BG);
    draw_text(&mut img, 4, 2, &format!("{dataset}: layer weights"), FG);

    let max_val = rows
        .iter()
        .flat_map(|r| r.mean.iter().zip(&r.std).map(|(m, s)| m + s))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    for (ri, stat) in rows.iter().enumerate() {
        let top = 20 + ri as u32 * row_h;
        draw_text(&mut img, 4, (top + row_h / 2) as i64, &stat.corruption, FG);
        for l in 0..layers {
            let x = label_w + l as u32 * (bar_w + 6);
            let full = row_h - 18;
            let bar_h = ((stat.mean[l] / max_val) * full as f64).round() as u32;
            let base = top + full;
            fill_rect(&mut img, x, base.saturating_sub(bar_h), bar_w, bar_h.max(1), BAR);
            // std whisker
            let w_h = ((stat.std[l] / max_val) * full as f64).round() as u32;
            let center = base.saturating_sub(bar_h);
            fill_rect(
                &mut img,
                x + bar_w / 2,
                center.saturating_sub(w_h),
                1,
                (2 * w_h).max(1),
                WHISKER,
            );
        }
    }
    // layer index axis
    for l in 0..layers {
        let x = label_w + l as u32 * (bar_w + 6);
        draw_text(
            &mut img,
            x as i64 + 4,
            (height - 14) as i64,
            &format!("{}", first_layer_index + l),
            FG,
        );
    }
    img.save(path).map_err(|e| MlmpError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// The (corruption, mean mIoU) pairs a bar plot renders for one dataset and
/// method; exposed so plots can be cross-checked against the report.
pub fn miou_bar_values(report: &RunReport, dataset: &str, method: &str) -> Vec<(String, f64)> {
    report
        .scenarios
        .iter()
        .chain(&report.c_average)
        .filter(|s| s.dataset == dataset && s.method == method)
        .filter_map(|s| s.miou_mean.map(|m| (s.corruption.clone(), m)))
        .collect()
}

/// Horizontal mIoU bars, one row per corruption, for one dataset and method.
pub fn miou_bar_plot(
    report: &RunReport,
    dataset: &str,
    method: &str,
    path: &Path,
) -> Result<()> {
    let values = miou_bar_values(report, dataset, method);
    if values.is_empty() {
        return Err(MlmpError::invalid(format!(
            "no results for dataset {dataset} method {method}"
        )));
    }
    let label_w = 140u32;
    let bar_area = 240u32;
    let row_h = 16u32;
    let width = label_w + bar_area + 70;
    let height = values.len() as u32 * row_h + 30;
    let mut img = RgbImage::from_pixel(width, height, BG);
    draw_text(&mut img, 4, 2, &format!("{dataset} / {method}: miou"), FG);
    for (i, (name, miou)) in values.iter().enumerate() {
        let y = 18 + i as u32 * row_h;
        draw_text(&mut img, 4, y as i64 + 3, name, FG);
        let len = (miou.clamp(0.0, 1.0) * bar_area as f64).round() as u32;
        fill_rect(&mut img, label_w, y + 2, len.max(1), row_h - 5, BAR);
        draw_text(
            &mut img,
            (label_w + bar_area + 6) as i64,
            y as i64 + 3,
            &format!("{:.4}", miou),
            FG,
        );
    }
    img.save(path).map_err(|e| MlmpError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Deterministic class palette (golden-angle hues).
pub fn class_color(class: usize) -> Rgb<u8> {
    let hue = (class as f32 * 137.508) % 360.0;
    let (r, g, b) = crate::imgproc::hsv_to_rgb(hue, 0.75, 0.95);
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

/// Blends a colorized class map over the input image and writes a PNG.
pub fn write_overlay(
    image: &RgbImage,
    class_map: &[u8],
    path: &Path,
) -> Result<()> {
    let (w, h) = image.dimensions();
    if class_map.len() != (w * h) as usize {
        return Err(MlmpError::shape(
            format!("{} class pixels", w * h),
            format!("{}", class_map.len()),
        ));
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let class = class_map[(y * w + x) as usize] as usize;
            let c = class_color(class);
            let p = out.get_pixel_mut(x, y);
            for i in 0..3 {
                p.0[i] = ((p.0[i] as u16 + c.0[i] as u16) / 2) as u8;
            }
        }
    }
    out.save(path).map_err(|e| MlmpError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
