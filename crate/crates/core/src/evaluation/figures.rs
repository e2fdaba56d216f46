use std::fmt::Write as _;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};

use super::{ExampleGrid, MetricReport};
use crate::error::Result;
use crate::scene::dataset::write_atomic;

/// Line colors assigned to report rows in order.
pub const FIGURE_COLORS: [[u8; 3]; 8] = [
    [228, 26, 28],
    [55, 126, 184],
    [77, 175, 74],
    [152, 78, 163],
    [255, 127, 0],
    [166, 86, 40],
    [247, 129, 191],
    [80, 80, 80],
];

const LABEL_COLORS: [[u8; 3]; 8] = [
    [20, 20, 20],
    [230, 80, 60],
    [60, 160, 230],
    [90, 200, 90],
    [240, 200, 40],
    [170, 90, 210],
    [60, 210, 200],
    [240, 140, 200],
];

/// Long-format per-frame mIoU table: one row per (frame, report row).
pub fn curve_csv(report: &MetricReport) -> String {
    let mut s = String::from("frame,variant,miou\n");
    for f in 0..report.horizon {
        for row in &report.rows {
            if let Some(v) = row.per_frame_miou.get(f) {
                let _ = writeln!(s, "{},{},{:.6}", f + 1, row.name, v);
            }
        }
    }
    s
}

fn legend_csv(report: &MetricReport) -> String {
    let mut s = String::from("variant,r,g,b\n");
    for (i, row) in report.rows.iter().enumerate() {
        let c = FIGURE_COLORS[i % FIGURE_COLORS.len()];
        let _ = writeln!(s, "{},{},{},{}", row.name, c[0], c[1], c[2]);
    }
    s
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            put(img, x + ox, y + oy, c);
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

/// Per-frame mIoU line plot on a 0-100 axis with gridlines every 10 points.
pub fn plot_curves(report: &MetricReport) -> RgbImage {
    let (w, h) = (640u32, 400u32);
    let (left, right, top, bottom) = (40i64, 620i64, 20i64, 370i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for g in 0..=10 {
        let y = bottom - (bottom - top) * g / 10;
        let shade = if g == 0 { [0, 0, 0] } else { [225, 225, 225] };
        line(&mut img, (left, y), (right, y), shade);
    }
    line(&mut img, (left, top), (left, bottom), [0, 0, 0]);
    let frames = report.horizon.max(2) as i64;
    let px = |f: usize| left + (right - left) * f as i64 / (frames - 1);
    for f in 0..report.horizon {
        line(&mut img, (px(f), bottom), (px(f), bottom + 4), [0, 0, 0]);
    }
    for (i, row) in report.rows.iter().enumerate() {
        let c = FIGURE_COLORS[i % FIGURE_COLORS.len()];
        let pts: Vec<(i64, i64)> = row
            .per_frame_miou
            .iter()
            .enumerate()
            .map(|(f, v)| (px(f), bottom - ((bottom - top) as f64 * v.clamp(0.0, 100.0) / 100.0).round() as i64))
            .collect();
        for pair in pts.windows(2) {
            line(&mut img, pair[0], pair[1], c);
        }
        if let [only] = pts[..] {
            line(&mut img, only, only, c);
        }
    }
    img
}

/// Grid of colored segmentations: ground truth on the first row, then one
/// row per prediction; one column per unroll step.
pub fn grid_image(grid: &ExampleGrid) -> RgbImage {
    let gap = 2u32;
    let (cw, ch) = (grid.width as u32, grid.height as u32);
    let cols = grid.steps.len() as u32;
    let rows = 1 + grid.predictions.len() as u32;
    let mut img = RgbImage::from_pixel(
        cols * cw + (cols + 1) * gap,
        rows * ch + (rows + 1) * gap,
        Rgb([255, 255, 255]),
    );
    let all = std::iter::once(&grid.ground_truth).chain(grid.predictions.values());
    for (r, cells) in all.enumerate() {
        for (c, cell) in cells.iter().enumerate() {
            let (ox, oy) = (gap + c as u32 * (cw + gap), gap + r as u32 * (ch + gap));
            for (i, &label) in cell.iter().enumerate() {
                let (x, y) = ((i % grid.width) as u32, (i / grid.width) as u32);
                img.put_pixel(ox + x, oy + y, Rgb(LABEL_COLORS[label as usize % LABEL_COLORS.len()]));
            }
        }
    }
    img
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Writes the curve table, legend, curve plot and (when present) the
/// example grid into `dir`. Output bytes depend only on the report.
pub fn export_figures(report: &MetricReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    emit("per_frame_miou.csv", curve_csv(report).as_bytes())?;
    emit("per_frame_miou_legend.csv", legend_csv(report).as_bytes())?;
    emit("per_frame_miou.png", &png_bytes(&plot_curves(report))?)?;
    if let Some(grid) = &report.example {
        emit("examples.png", &png_bytes(&grid_image(grid))?)?;
        let mut s = String::from("row,name\n0,ground_truth\n");
        for (i, name) in grid.predictions.keys().enumerate() {
            let _ = writeln!(s, "{},{}", i + 1, name);
        }
        emit("examples_rows.csv", s.as_bytes())?;
    }
    Ok(written)
}
