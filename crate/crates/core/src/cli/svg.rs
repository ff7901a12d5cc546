//! Minimal hand-written SVG figures: dictionary grids, the R²/sparsity
//! scatter and PSTH curves.

use std::fmt::Write;

use crate::analysis::SweepPoint;
use crate::error::{FondError, Result};
use crate::numerics::Tensor;

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// Dictionary columns drawn as `side × side` gray patches, one per tile, in
/// the given column order. Each tile is scaled by its own max |value|.
pub fn dictionary_grid(phi: &Tensor, side: usize, order: &[usize]) -> Result<String> {
    if side * side != phi.rows() {
        return Err(FondError::Shape(format!(
            "columns of length {} are not {side}×{side} images",
            phi.rows()
        )));
    }
    let px = 3usize;
    let gap = 2usize;
    let tile = side * px + gap;
    let per_row = (order.len() as f64).sqrt().ceil().max(1.0) as usize;
    let rows = order.len().div_ceil(per_row).max(1);
    let (w, h) = (per_row * tile + gap, rows * tile + gap);
    let mut s = header(w, h);
    writeln!(s, r##"<rect width="{w}" height="{h}" fill="#808080"/>"##).unwrap();
    for (slot, &j) in order.iter().enumerate() {
        if j >= phi.cols() {
            return Err(FondError::InvalidArgument(format!("column {j} out of range")));
        }
        let (ox, oy) = (gap + (slot % per_row) * tile, gap + (slot / per_row) * tile);
        let scale = (0..phi.rows()).map(|i| phi.get(i, j).abs()).fold(0.0, f64::max);
        for i in 0..phi.rows() {
            let v = if scale > 0.0 { phi.get(i, j) / scale } else { 0.0 };
            let g = (127.5 + 127.5 * v).round().clamp(0.0, 255.0) as u8;
            writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{px}" height="{px}" fill="rgb({g},{g},{g})"/>"#,
                ox + (i % side) * px,
                oy + (i / side) * px
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// R² against sparsity for each sweep cell, coloured by `T_train`, with the
/// ideal point (1, 1) marked.
pub fn sweep_scatter(points: &[SweepPoint]) -> String {
    let (w, h, pad) = (420.0, 420.0, 50.0);
    let sx = |v: f64| pad + v.clamp(0.0, 1.0) * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - v.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let mut s = header(w as usize, h as usize);
    axes(&mut s, w, h, pad, "sparsity (fraction of zeros)", "R²");
    let mut ts: Vec<usize> = points.iter().map(|p| p.t_train).collect();
    ts.sort_unstable();
    ts.dedup();
    for p in points {
        let c = PALETTE[ts.iter().position(|&t| t == p.t_train).unwrap_or(0) % PALETTE.len()];
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{c}"><title>{} T={} β={}</title></circle>"#,
            sx(p.sparsity),
            sy(p.r2),
            p.model,
            p.t_train,
            p.beta
        )
        .unwrap();
    }
    for (i, t) in ts.iter().enumerate() {
        let y = pad + 14.0 * i as f64;
        writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{y:.1}" r="4" fill="{}"/><text x="{:.1}" y="{:.1}" font-size="11">T_train={t}</text>"#,
            pad + 8.0,
            PALETTE[i % PALETTE.len()],
            pad + 16.0,
            y + 4.0
        )
        .unwrap();
    }
    let (ox, oy) = (sx(1.0), sy(1.0));
    writeln!(
        s,
        r#"<path d="M{} {} l8 8 M{} {} l-8 8" stroke="black" stroke-width="2"/><text x="{}" y="{}" font-size="11" text-anchor="end">optimum</text>"#,
        ox - 4.0,
        oy - 4.0,
        ox + 4.0,
        oy - 4.0,
        ox - 8.0,
        oy + 16.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

/// One PSTH curve: time in cycles, mean and std per bin.
#[derive(Debug, Clone)]
pub struct Curve {
    pub label: String,
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Mean ± std bands for each curve on shared axes.
pub fn psth_plot(curves: &[Curve]) -> String {
    let (w, h, pad) = (520.0, 340.0, 50.0);
    let t_max = curves.iter().flat_map(|c| c.t.iter().copied()).fold(0.0, f64::max).max(1e-9);
    let y_max = curves
        .iter()
        .flat_map(|c| c.mean.iter().zip(&c.std).map(|(m, s)| m + s))
        .fold(0.0, f64::max)
        .max(1e-9);
    let sx = |v: f64| pad + v / t_max * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - v.max(0.0) / y_max * (h - 2.0 * pad);
    let mut s = header(w as usize, h as usize);
    axes(&mut s, w, h, pad, "time (grating cycles)", "spikes per step");
    for (i, c) in curves.iter().enumerate() {
        let col = PALETTE[i % PALETTE.len()];
        let n = c.t.len().min(c.mean.len()).min(c.std.len());
        if n == 0 {
            continue;
        }
        let mut band = String::new();
        for k in 0..n {
            write!(band, "{:.2},{:.2} ", sx(c.t[k]), sy(c.mean[k] + c.std[k])).unwrap();
        }
        for k in (0..n).rev() {
            write!(band, "{:.2},{:.2} ", sx(c.t[k]), sy(c.mean[k] - c.std[k])).unwrap();
        }
        writeln!(s, r#"<polygon points="{}" fill="{col}" fill-opacity="0.15"/>"#, band.trim_end()).unwrap();
        let line: Vec<String> = (0..n).map(|k| format!("{:.2},{:.2}", sx(c.t[k]), sy(c.mean[k]))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{col}" stroke-width="1.5"/>"#, line.join(" ")).unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{col}">{}</text>"#,
            w - pad - 80.0,
            pad + 14.0 * i as f64,
            escape(&c.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn header(w: usize, h: usize) -> String {
    format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#) + "\n"
}

fn axes(s: &mut String, w: f64, h: f64, pad: f64, xlabel: &str, ylabel: &str) {
    writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{xlabel}</text>"#,
        w / 2.0,
        h - pad / 3.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 {} {})">{ylabel}</text>"#,
        pad / 3.0,
        h / 2.0,
        pad / 3.0,
        h / 2.0
    )
    .unwrap();
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
