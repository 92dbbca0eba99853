//! Standalone SVG plots for ROC curves and 2D scatter embeddings.
//! Output bytes are a pure function of the input series.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::CliError;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PlotKind {
    Roc,
    Scatter,
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 62.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 20.0;
const MARGIN_BOTTOM: f64 = 48.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Writes a deterministic SVG plot. ROC plots use fixed [0,1]² axes with the
/// diagonal chance line; scatter plots fit the data with 5% padding.
pub fn emit_svg(series: &[Series], kind: PlotKind, path: &Path) -> Result<(), CliError> {
    let svg = render_svg(series, kind)?;
    fs::write(path, svg)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn render_svg(series: &[Series], kind: PlotKind) -> Result<String, CliError> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(CliError::Runtime("plot needs at least one nonempty series".into()));
    }
    for s in series {
        for &(x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                return Err(CliError::Runtime("plot points must be finite".into()));
            }
            if kind == PlotKind::Roc && !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
                return Err(CliError::Runtime(format!(
                    "ROC point ({x}, {y}) outside the unit square"
                )));
            }
        }
    }

    let (x_lo, x_hi, y_lo, y_hi) = match kind {
        PlotKind::Roc => (0.0, 1.0, 0.0, 1.0),
        PlotKind::Scatter => {
            let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
            let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
            let (mut x_lo, mut x_hi) = bounds(xs);
            let (mut y_lo, mut y_hi) = bounds(ys);
            pad(&mut x_lo, &mut x_hi);
            pad(&mut y_lo, &mut y_hi);
            (x_lo, x_hi, y_lo, y_hi)
        }
    };

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let py = |y: f64| MARGIN_TOP + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");

    // Axes.
    let _ = writeln!(
        svg,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        MARGIN_LEFT,
        MARGIN_TOP + plot_h,
        MARGIN_LEFT + plot_w,
        MARGIN_TOP + plot_h
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        MARGIN_LEFT,
        MARGIN_TOP,
        MARGIN_LEFT,
        MARGIN_TOP + plot_h
    );
    // Ticks and labels.
    for i in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let tx = px(fx);
        let ty = py(fy);
        let _ = writeln!(
            svg,
            "<line x1=\"{tx:.2}\" y1=\"{:.2}\" x2=\"{tx:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            MARGIN_TOP + plot_h,
            MARGIN_TOP + plot_h + 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{tx:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
            MARGIN_TOP + plot_h + 20.0,
            tick_label(fx)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{ty:.2}\" x2=\"{:.2}\" y2=\"{ty:.2}\" stroke=\"black\"/>",
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"end\">{}</text>",
            MARGIN_LEFT - 9.0,
            ty + 4.0,
            tick_label(fy)
        );
    }
    // Axis titles.
    let (x_title, y_title) = match kind {
        PlotKind::Roc => ("false positive rate", "true positive rate"),
        PlotKind::Scatter => ("x", "y"),
    };
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">{x_title}</text>",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{y_title}</text>",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );

    if kind == PlotKind::Roc {
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"gray\" stroke-dasharray=\"6,4\" class=\"chance\"/>",
            px(0.0),
            py(0.0),
            px(1.0),
            py(1.0)
        );
    }

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        match kind {
            PlotKind::Roc => {
                let mut coords = String::new();
                for &(x, y) in &s.points {
                    let _ = write!(coords, "{:.2},{:.2} ", px(x), py(y));
                }
                let _ = writeln!(
                    svg,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
                    coords.trim_end()
                );
            }
            PlotKind::Scatter => {
                for &(x, y) in &s.points {
                    let _ = writeln!(
                        svg,
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                        px(x),
                        py(y)
                    );
                }
            }
        }
    }

    // Legend, top-right.
    let legend_x = MARGIN_LEFT + plot_w - 150.0;
    let mut legend_y = MARGIN_TOP + 10.0;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            "<rect x=\"{legend_x:.2}\" y=\"{:.2}\" width=\"14\" height=\"14\" fill=\"{color}\"/>",
            legend_y - 11.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{legend_y:.2}\" font-size=\"12\">{}</text>",
            legend_x + 20.0,
            s.label
        );
        legend_y += 20.0;
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn pad(lo: &mut f64, hi: &mut f64) {
    if *hi - *lo < 1e-12 {
        *lo -= 1.0;
        *hi += 1.0;
    } else {
        let span = *hi - *lo;
        *lo -= span * 0.05;
        *hi += span * 0.05;
    }
}

fn tick_label(v: f64) -> String {
    format!("{v:.2}")
}
