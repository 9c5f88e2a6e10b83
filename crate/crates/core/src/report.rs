//! Visual run artifacts: grayscale sample grids exported as PNG and
//! small hand-rolled SVG line charts.
//!
//! Grids tile `[n, 1, h, w]` image batches row-major with a thin black
//! gap; the comparison variant stacks one batch per grid row so benign,
//! poisoned, and trigger samples line up column by column.  Charts are
//! written as standalone SVG documents with fixed geometry, so identical
//! inputs always produce identical bytes.

use std::fmt;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};

use crate::tensor::Tensor;

/// Pixel gap between grid cells.
const GRID_GAP: u32 = 2;

/// Line colors cycled across chart series.
const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

const CHART_WIDTH: f64 = 640.0;
const CHART_HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 42.0;
const MARGIN_BOTTOM: f64 = 52.0;

#[derive(Debug)]
pub enum ReportError {
    Io {
        path: String,
        source: std::io::Error,
    },
    /// The image encoder rejected the write.
    Image {
        path: String,
        detail: String,
    },
    /// Nothing to draw: no images, or no finite chart points.
    Empty,
    Shape {
        detail: String,
    },
}

impl fmt::Display for ReportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportError::Io { path, source } => write!(f, "io error on {path}: {source}"),
            ReportError::Image { path, detail } => {
                write!(f, "could not encode {path}: {detail}")
            }
            ReportError::Empty => write!(f, "nothing to draw"),
            ReportError::Shape { detail } => write!(f, "bad report input: {detail}"),
        }
    }
}

impl std::error::Error for ReportError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ReportError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Quantize one [0, 1] float pixel to a display byte.
fn display_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Check one image batch and return its `(h, w)` geometry.
fn batch_geometry(images: &Tensor) -> Result<(usize, usize), ReportError> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(ReportError::Shape {
            detail: format!("expected a [n, 1, h, w] batch, got {shape:?}"),
        });
    }
    Ok((shape[2], shape[3]))
}

/// Tile rows of per-image pixel slices into one grid image.
fn tile(rows: &[Vec<&[f32]>], h: usize, w: usize) -> Result<GrayImage, ReportError> {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    if cols == 0 {
        return Err(ReportError::Empty);
    }
    let cell_w = w as u32 + GRID_GAP;
    let cell_h = h as u32 + GRID_GAP;
    let canvas_w = cols as u32 * cell_w - GRID_GAP;
    let canvas_h = rows.len() as u32 * cell_h - GRID_GAP;
    let mut canvas = GrayImage::from_pixel(canvas_w, canvas_h, Luma([0u8]));
    for (gr, row) in rows.iter().enumerate() {
        for (gc, pixels) in row.iter().enumerate() {
            let x0 = gc as u32 * cell_w;
            let y0 = gr as u32 * cell_h;
            for r in 0..h {
                for c in 0..w {
                    let v = display_byte(pixels[r * w + c]);
                    canvas.put_pixel(x0 + c as u32, y0 + r as u32, Luma([v]));
                }
            }
        }
    }
    Ok(canvas)
}

fn image_slices(images: &Tensor, limit: usize) -> (usize, usize, Vec<&[f32]>) {
    let shape = images.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let numel = h * w;
    let slices = (0..n.min(limit))
        .map(|i| &images.values()[i * numel..(i + 1) * numel])
        .collect();
    (h, w, slices)
}

/// Tile a `[n, 1, h, w]` batch into a grid, `cols` images per grid row,
/// filled row-major.
pub fn image_grid(images: &Tensor, cols: usize) -> Result<GrayImage, ReportError> {
    if cols == 0 {
        return Err(ReportError::Shape {
            detail: "grid needs at least one column".to_string(),
        });
    }
    let (h, w) = batch_geometry(images)?;
    let (_, _, slices) = image_slices(images, usize::MAX);
    if slices.is_empty() {
        return Err(ReportError::Empty);
    }
    let rows: Vec<Vec<&[f32]>> = slices.chunks(cols).map(|c| c.to_vec()).collect();
    let _ = (h, w);
    tile(&rows, h, w)
}

/// One grid row per batch — e.g. benign bases over their poisoned
/// counterparts over the trigger samples — with up to `cols` images from
/// each.  Batches may differ in length but must share image geometry;
/// short rows are padded with black cells.
pub fn comparison_grid(batches: &[&Tensor], cols: usize) -> Result<GrayImage, ReportError> {
    if cols == 0 {
        return Err(ReportError::Shape {
            detail: "grid needs at least one column".to_string(),
        });
    }
    let present: Vec<&Tensor> = batches
        .iter()
        .copied()
        .filter(|b| !b.shape().is_empty() && b.shape()[0] > 0)
        .collect();
    if present.is_empty() {
        return Err(ReportError::Empty);
    }
    let (h, w) = batch_geometry(present[0])?;
    let mut rows = Vec::with_capacity(present.len());
    for batch in &present {
        let geometry = batch_geometry(batch)?;
        if geometry != (h, w) {
            return Err(ReportError::Shape {
                detail: format!("mixed image geometry: {:?} vs {:?}", (h, w), geometry),
            });
        }
        let (_, _, slices) = image_slices(batch, cols);
        rows.push(slices);
    }
    tile(&rows, h, w)
}

pub fn save_png(path: &Path, image: &GrayImage) -> Result<(), ReportError> {
    image.save(path).map_err(|e| ReportError::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn save_text(path: &Path, content: &str) -> Result<(), ReportError> {
    fs::write(path, content).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// One named polyline of a chart; non-finite points are skipped.
#[derive(Debug, Clone)]
pub struct ChartSeries {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 10_000.0 || v.abs() < 1e-3) {
        return format!("{v:.1e}");
    }
    let mut s = format!("{v:.3}");
    while s.contains('.') && (s.ends_with('0') || s.ends_with('.')) {
        s.pop();
    }
    s
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a line chart over the finite points of `series` as a
/// standalone SVG document.  Errors with [`ReportError::Empty`] when no
/// series has a finite point.
pub fn svg_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[ChartSeries],
) -> Result<String, ReportError> {
    let finite: Vec<(usize, Vec<(f64, f64)>)> = series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                i,
                s.points
                    .iter()
                    .copied()
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .collect::<Vec<_>>(),
            )
        })
        .filter(|(_, pts)| !pts.is_empty())
        .collect();
    if finite.is_empty() {
        return Err(ReportError::Empty);
    }

    let all: Vec<(f64, f64)> = finite.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x_min, mut x_max) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| {
            (lo.min(x), hi.max(x))
        });
    let (mut y_min, mut y_max) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| {
            (lo.min(y), hi.max(y))
        });
    if x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_min == y_max {
        y_min -= 0.5;
        y_max += 0.5;
    }

    let plot_w = CHART_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = CHART_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let to_px = |x: f64, y: f64| {
        (
            MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w,
            MARGIN_TOP + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h,
        )
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_WIDTH}\" \
         height=\"{CHART_HEIGHT}\" viewBox=\"0 0 {CHART_WIDTH} {CHART_HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{CHART_WIDTH}\" height=\"{CHART_HEIGHT}\" fill=\"#ffffff\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"15\" fill=\"#222\">{}</text>\n",
        CHART_WIDTH / 2.0,
        escape_xml(title)
    ));

    // Axes.
    let (ox, oy) = (MARGIN_LEFT, MARGIN_TOP + plot_h);
    svg.push_str(&format!(
        "<line x1=\"{ox}\" y1=\"{}\" x2=\"{ox}\" y2=\"{oy}\" stroke=\"#333\"/>\n",
        MARGIN_TOP
    ));
    svg.push_str(&format!(
        "<line x1=\"{ox}\" y1=\"{oy}\" x2=\"{}\" y2=\"{oy}\" stroke=\"#333\"/>\n",
        MARGIN_LEFT + plot_w
    ));

    // Ticks and labels.
    const TICKS: usize = 5;
    for i in 0..=TICKS {
        let frac = i as f64 / TICKS as f64;
        let xv = x_min + frac * (x_max - x_min);
        let (px, _) = to_px(xv, y_min);
        svg.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{oy}\" x2=\"{px}\" y2=\"{}\" stroke=\"#333\"/>\n",
            oy + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"11\" fill=\"#333\">{}</text>\n",
            oy + 18.0,
            tick_label(xv)
        ));
        let yv = y_min + frac * (y_max - y_min);
        let (_, py) = to_px(x_min, yv);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{ox}\" y2=\"{py}\" stroke=\"#333\"/>\n",
            ox - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"11\" fill=\"#333\">{}</text>\n",
            ox - 8.0,
            py + 4.0,
            tick_label(yv)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\" fill=\"#222\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        CHART_HEIGHT - 12.0,
        escape_xml(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\" fill=\"#222\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape_xml(y_label)
    ));

    // Series polylines, point markers, and legend.
    for (slot, (index, points)) in finite.iter().enumerate() {
        let color = PALETTE[slot % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = to_px(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            coords.join(" ")
        ));
        for &(x, y) in points {
            let (px, py) = to_px(x, y);
            svg.push_str(&format!(
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
        let ly = MARGIN_TOP + 14.0 * slot as f64 + 4.0;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            MARGIN_LEFT + plot_w - 110.0,
            ly - 9.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"11\" \
             fill=\"#222\">{}</text>\n",
            MARGIN_LEFT + plot_w - 96.0,
            escape_xml(&series[*index].name)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
