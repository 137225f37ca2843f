//! Self-contained SVG rendering of training curves: total loss and the
//! InfoNCE share of the total, one polyline per run.

use std::fmt::Write as _;

use crate::trainer::TelemetryRow;

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PANEL_GAP: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone)]
pub struct Run {
    pub name: String,
    pub rows: Vec<TelemetryRow>,
}

/// Exponential smoothing `s_t = a * s_{t-1} + (1 - a) * x_t`, seeded with
/// the first point. `a = 0` returns the input unchanged.
pub fn ema_smooth(xs: &[f64], a: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut s = match xs.first() {
        Some(&x) => x,
        None => return out,
    };
    for &x in xs {
        s = a * s + (1.0 - a) * x;
        out.push(s);
    }
    out
}

struct Panel {
    title: &'static str,
    x0: f64,
    width: f64,
    value: fn(&TelemetryRow) -> f64,
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.05 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Render the two panels for every run with the same smoothing factor.
pub fn render_svg(runs: &[Run], smoothing: f64) -> String {
    let smoothing = smoothing.clamp(0.0, 0.999);
    let panel_w = (WIDTH - 2.0 * MARGIN - PANEL_GAP) / 2.0;
    let panels = [
        Panel {
            title: "Total loss",
            x0: MARGIN,
            width: panel_w,
            value: |r| r.total,
        },
        Panel {
            title: "InfoNCE / total",
            x0: MARGIN + panel_w + PANEL_GAP,
            width: panel_w,
            value: |r| r.ratio,
        },
    ];
    let top = MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let (step_lo, step_hi) = extent(runs.iter().flat_map(|r| r.rows.iter().map(|row| row.step as f64)));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    for panel in &panels {
        let series: Vec<Vec<f64>> = runs
            .iter()
            .map(|r| ema_smooth(&r.rows.iter().map(panel.value).collect::<Vec<_>>(), smoothing))
            .collect();
        let (y_lo, y_hi) = extent(series.iter().flatten().copied());
        let sx = |step: f64| panel.x0 + (step - step_lo) / (step_hi - step_lo).max(1e-12) * panel.width;
        let sy = |v: f64| top + plot_h - (v - y_lo) / (y_hi - y_lo) * plot_h;

        let _ = writeln!(
            svg,
            r#"<g class="panel"><text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#,
            panel.x0 + panel.width / 2.0,
            top - 16.0,
            panel.title
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{plot_h:.1}" fill="none" stroke="#444"/>"##,
            panel.x0, panel.width
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let v = y_lo + f * (y_hi - y_lo);
            let y = sy(v);
            let _ = writeln!(
                svg,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
                panel.x0,
                panel.x0 + panel.width,
                panel.x0 - 4.0,
                y + 4.0,
                format_tick(v)
            );
            let s = step_lo + f * (step_hi - step_lo);
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(s),
                top + plot_h + 16.0,
                s.round()
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
            panel.x0 + panel.width / 2.0,
            top + plot_h + 34.0
        );
        for (k, (run, ys)) in runs.iter().zip(&series).enumerate() {
            let points: Vec<String> = run
                .rows
                .iter()
                .zip(ys)
                .filter(|(_, y)| y.is_finite())
                .map(|(row, &y)| format!("{:.2},{:.2}", sx(row.step as f64), sy(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
                PALETTE[k % PALETTE.len()],
                points.join(" "),
                escape(&run.name)
            );
        }
        let _ = writeln!(svg, "</g>");
    }

    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (k, run) in runs.iter().enumerate() {
        let x = MARGIN + k as f64 * 140.0;
        let y = HEIGHT - 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="3"/><text x="{:.1}" y="{y:.1}">{}</text>"#,
            y - 4.0,
            x + 18.0,
            y - 4.0,
            PALETTE[k % PALETTE.len()],
            x + 22.0,
            escape(&run.name)
        );
    }
    let _ = writeln!(svg, "</g>\n</svg>");
    svg
}

fn format_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}
