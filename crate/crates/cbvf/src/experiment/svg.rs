//! Minimal deterministic SVG plots: level-set polylines, trajectories, and
//! point markers over a labeled axis box. Identical inputs produce identical
//! text.

use std::fmt::Write as _;

use thiserror::Error;

use crate::experiment::contour::LevelSetPolyline;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("plot needs at least one data layer")]
    Empty,
    #[error("axis ranges must be finite and non-degenerate")]
    BadAxes,
}

/// Axis window and labels. When absent, the window is fitted to the data
/// with a small margin.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub x_label: String,
    pub y_label: String,
    pub title: String,
}

/// One renderable layer.
#[derive(Debug, Clone)]
pub enum PlotLayer {
    Axes(AxisSpec),
    /// Joined contour pieces drawn with one style and legend entry.
    Polylines {
        name: String,
        pieces: Vec<LevelSetPolyline>,
        color: String,
        dashed: bool,
    },
    /// A single connected path.
    Trajectory {
        name: String,
        points: Vec<[f64; 2]>,
        color: String,
    },
    /// Marker symbols.
    Points {
        name: String,
        points: Vec<[f64; 2]>,
        color: String,
    },
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 540.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 52.0;

fn fmt(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".to_string()
    } else {
        s
    }
}

/// Renders layers into a standalone SVG document.
pub fn render_plot_svg(layers: &[PlotLayer]) -> Result<String, PlotError> {
    let data_layers = layers
        .iter()
        .filter(|l| !matches!(l, PlotLayer::Axes(_)))
        .count();
    if data_layers == 0 {
        return Err(PlotError::Empty);
    }
    let axes = layers.iter().find_map(|l| match l {
        PlotLayer::Axes(a) => Some(a.clone()),
        _ => None,
    });
    let axes = match axes {
        Some(a) => a,
        None => fit_axes(layers),
    };
    let [x0, x1] = axes.x_range;
    let [y0, y1] = axes.y_range;
    if !(x1 > x0 && y1 > y0 && x0.is_finite() && x1.is_finite() && y0.is_finite() && y1.is_finite())
    {
        return Err(PlotError::BadAxes);
    }
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    // Frame.
    let _ = writeln!(
        svg,
        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black" stroke-width="1"/>"#,
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(WIDTH - MARGIN_L - MARGIN_R),
        fmt(HEIGHT - MARGIN_T - MARGIN_B)
    );
    // Ticks: five per axis.
    for k in 0..=4 {
        let xv = x0 + (x1 - x0) * k as f64 / 4.0;
        let yv = y0 + (y1 - y0) * k as f64 / 4.0;
        let xp = px(xv);
        let yp = py(yv);
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1"/>"#,
            fmt(xp),
            fmt(HEIGHT - MARGIN_B),
            fmt(xp),
            fmt(HEIGHT - MARGIN_B + 5.0)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            fmt(xp),
            fmt(HEIGHT - MARGIN_B + 18.0),
            fmt(xv)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="1"/>"#,
            fmt(MARGIN_L - 5.0),
            fmt(yp),
            fmt(MARGIN_L),
            fmt(yp)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
            fmt(MARGIN_L - 8.0),
            fmt(yp + 4.0),
            fmt(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{}</text>"#,
        fmt((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        fmt(HEIGHT - 14.0),
        escape(&axes.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        fmt((MARGIN_T + HEIGHT - MARGIN_B) / 2.0),
        fmt((MARGIN_T + HEIGHT - MARGIN_B) / 2.0),
        escape(&axes.y_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-size="15" text-anchor="middle">{}</text>"#,
        fmt((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        escape(&axes.title)
    );
    // Clip data to the axis box.
    let _ = writeln!(
        svg,
        r#"<clipPath id="axes-clip"><rect x="{}" y="{}" width="{}" height="{}"/></clipPath>"#,
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(WIDTH - MARGIN_L - MARGIN_R),
        fmt(HEIGHT - MARGIN_T - MARGIN_B)
    );
    let _ = writeln!(svg, r#"<g clip-path="url(#axes-clip)">"#);

    let path_for = |pts: &[[f64; 2]]| -> String {
        let mut d = String::new();
        for (i, p) in pts.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{} {} ", fmt(px(p[0])), fmt(py(p[1])));
        }
        d.trim_end().to_string()
    };

    let mut legend: Vec<(String, String, bool)> = Vec::new();
    for layer in layers {
        match layer {
            PlotLayer::Axes(_) => {}
            PlotLayer::Polylines {
                name,
                pieces,
                color,
                dashed,
            } => {
                for piece in pieces {
                    if piece.len() < 2 {
                        continue;
                    }
                    let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
                    let _ = writeln!(
                        svg,
                        r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.8"{dash}/>"#,
                        path_for(piece),
                        color
                    );
                }
                legend.push((name.clone(), color.clone(), *dashed));
            }
            PlotLayer::Trajectory { name, points, color } => {
                if points.len() >= 2 {
                    let _ = writeln!(
                        svg,
                        r#"<path d="{}" fill="none" stroke="{}" stroke-width="2.2"/>"#,
                        path_for(points),
                        color
                    );
                }
                legend.push((name.clone(), color.clone(), false));
            }
            PlotLayer::Points { name, points, color } => {
                for p in points {
                    let _ = writeln!(
                        svg,
                        r#"<circle cx="{}" cy="{}" r="4" fill="{}"/>"#,
                        fmt(px(p[0])),
                        fmt(py(p[1])),
                        color
                    );
                }
                legend.push((name.clone(), color.clone(), false));
            }
        }
    }
    let _ = writeln!(svg, "</g>");
    // Legend, top-right inside the frame.
    for (i, (name, color, dashed)) in legend.iter().enumerate() {
        let y = MARGIN_T + 16.0 + 16.0 * i as f64;
        let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="2"{dash}/>"#,
            fmt(WIDTH - MARGIN_R - 150.0),
            fmt(y - 4.0),
            fmt(WIDTH - MARGIN_R - 122.0),
            fmt(y - 4.0),
            color
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11">{}</text>"#,
            fmt(WIDTH - MARGIN_R - 116.0),
            fmt(y),
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn fit_axes(layers: &[PlotLayer]) -> AxisSpec {
    let mut x0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    let mut visit = |p: &[f64; 2]| {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    };
    for layer in layers {
        match layer {
            PlotLayer::Axes(_) => {}
            PlotLayer::Polylines { pieces, .. } => {
                pieces.iter().flatten().for_each(&mut visit)
            }
            PlotLayer::Trajectory { points, .. } | PlotLayer::Points { points, .. } => {
                points.iter().for_each(&mut visit)
            }
        }
    }
    if !(x1 > x0) {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if !(y1 > y0) {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let mx = 0.05 * (x1 - x0);
    let my = 0.05 * (y1 - y0);
    AxisSpec {
        x_range: [x0 - mx, x1 + mx],
        y_range: [y0 - my, y1 + my],
        x_label: "x".into(),
        y_label: "y".into(),
        title: String::new(),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
