//! Log export: CSV plus static SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use super::locus::LocusPoint;
use super::runner::SimLog;
use super::HarnessError;
use crate::ltv_mpc::{MpcConfig, PressureMode, SteadyMap};
use crate::qpsolve::QpStatus;

pub const CSV_HEADER: &str = "t_s,y1_mw,y2_mjs,y3_kpa,y1_ref_mw,y2_ref_mjs,u1,u2,v1,v2,\
solve_time_s,qp_status,qp_iterations,outer_iterations,kkt_residual,press_lo_active,\
press_hi_active,input_active,clamped,fallback,initial_violation,det_a_dec,cond_phi,regular";

fn status_str(s: QpStatus) -> &'static str {
    match s {
        QpStatus::Optimal => "optimal",
        QpStatus::Infeasible => "infeasible",
        QpStatus::MaxIterations => "max_iterations",
    }
}

/// Render the log as CSV text (shortest round-trip float formatting, so two
/// identical runs produce identical bytes).
pub fn log_to_csv(log: &SimLog) -> String {
    let mut out = String::with_capacity(log.rows.len() * 200);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &log.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t_s,
            r.y1_mw,
            r.y2_mjs,
            r.y3_kpa,
            r.y1_ref_mw,
            r.y2_ref_mjs,
            r.u[0],
            r.u[1],
            r.v[0],
            r.v[1],
            r.solve_time_s,
            status_str(r.qp_status),
            r.qp_iterations,
            r.outer_iterations,
            r.kkt_residual,
            r.press_lo_active as u8,
            r.press_hi_active as u8,
            r.input_active as u8,
            r.clamped as u8,
            r.fallback as u8,
            r.initial_violation as u8,
            r.det_a_dec,
            r.cond_phi,
            r.regular as u8,
        );
    }
    out
}

/// CSV with the wall-time column blanked, for determinism comparisons.
pub fn csv_without_timing(csv: &str) -> String {
    let mut out = String::with_capacity(csv.len());
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let mut first = true;
        for (j, c) in cols.iter().enumerate() {
            if !first {
                out.push(',');
            }
            first = false;
            // Column 10 is solve_time_s.
            if j == 10 {
                out.push('-');
            } else {
                out.push_str(c);
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Minimal SVG plotting
// ---------------------------------------------------------------------------

struct Series<'a> {
    points: Vec<(f64, f64)>,
    color: &'a str,
    dash: Option<&'a str>,
    label: &'a str,
}

struct Panel<'a> {
    title: String,
    x_label: &'a str,
    y_label: &'a str,
    series: Vec<Series<'a>>,
    hlines: Vec<(f64, &'a str)>,
    markers: Vec<(f64, f64, &'a str)>,
}

const W: f64 = 860.0;
const H: f64 = 300.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 34.0;
const MB: f64 = 44.0;

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(mag * 10.0);
    let start = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = start;
    while t <= hi + 1e-12 * span {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn render_panel(p: &Panel, y_offset: f64, out: &mut String) {
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &p.series {
        for &(x, y) in &s.points {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
    }
    for &(y, _) in &p.hlines {
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    for &(x, y, _) in &p.markers {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if !x_lo.is_finite() {
        x_lo = 0.0;
        x_hi = 1.0;
    }
    if !y_lo.is_finite() {
        y_lo = 0.0;
        y_hi = 1.0;
    }
    if y_hi - y_lo < 1e-12 {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let pad = 0.05 * (y_hi - y_lo);
    y_lo -= pad;
    y_hi += pad;
    let px = |x: f64| ML + (x - x_lo) / (x_hi - x_lo) * (W - ML - MR);
    let py = |y: f64| y_offset + MT + (y_hi - y) / (y_hi - y_lo) * (H - MT - MB);

    let _ = writeln!(
        out,
        "<rect x='{ML}' y='{}' width='{}' height='{}' fill='white' stroke='#444'/>",
        y_offset + MT,
        W - ML - MR,
        H - MT - MB
    );
    let _ = writeln!(
        out,
        "<text x='{}' y='{}' font-size='14' text-anchor='middle' font-family='sans-serif'>{}</text>",
        W / 2.0,
        y_offset + 18.0,
        p.title
    );
    for t in nice_ticks(x_lo, x_hi) {
        let _ = writeln!(
            out,
            "<line x1='{0}' y1='{1}' x2='{0}' y2='{2}' stroke='#ccc' stroke-width='0.5'/>\
             <text x='{0}' y='{3}' font-size='11' text-anchor='middle' font-family='sans-serif'>{4}</text>",
            px(t),
            y_offset + MT,
            y_offset + H - MB,
            y_offset + H - MB + 16.0,
            trim_float(t)
        );
    }
    for t in nice_ticks(y_lo, y_hi) {
        let _ = writeln!(
            out,
            "<line x1='{ML}' y1='{0}' x2='{1}' y2='{0}' stroke='#ccc' stroke-width='0.5'/>\
             <text x='{2}' y='{3}' font-size='11' text-anchor='end' font-family='sans-serif'>{4}</text>",
            py(t),
            W - MR,
            ML - 6.0,
            py(t) + 4.0,
            trim_float(t)
        );
    }
    let _ = writeln!(
        out,
        "<text x='{}' y='{}' font-size='12' text-anchor='middle' font-family='sans-serif'>{}</text>",
        W / 2.0,
        y_offset + H - 8.0,
        p.x_label
    );
    let _ = writeln!(
        out,
        "<text x='16' y='{}' font-size='12' text-anchor='middle' font-family='sans-serif' transform='rotate(-90 16 {0})'>{1}</text>",
        y_offset + H / 2.0,
        p.y_label
    );
    for &(y, color) in &p.hlines {
        let _ = writeln!(
            out,
            "<line x1='{ML}' y1='{0}' x2='{1}' y2='{0}' stroke='{color}' stroke-dasharray='6 3'/>",
            py(y),
            W - MR
        );
    }
    let mut legend_x = ML + 8.0;
    for s in &p.series {
        if s.points.is_empty() {
            continue;
        }
        let mut d = String::new();
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(x), py(y));
        }
        let dash = s.dash.map(|v| format!(" stroke-dasharray='{v}'")).unwrap_or_default();
        let _ = writeln!(
            out,
            "<path d='{d}' fill='none' stroke='{}' stroke-width='1.3'{dash}/>",
            s.color
        );
        if !s.label.is_empty() {
            let _ = writeln!(
                out,
                "<text x='{legend_x}' y='{}' font-size='11' fill='{}' font-family='sans-serif'>{}</text>",
                y_offset + MT + 14.0,
                s.color,
                s.label
            );
            legend_x += 14.0 + 7.0 * s.label.len() as f64;
        }
    }
    for &(x, y, color) in &p.markers {
        let _ = writeln!(out, "<circle cx='{}' cy='{}' r='3.5' fill='{color}'/>", px(x), py(y));
    }
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.into()
    }
}

fn svg_document(panels: &[Panel]) -> String {
    let total_h = H * panels.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns='http://www.w3.org/2000/svg' width='{W}' height='{total_h}' viewBox='0 0 {W} {total_h}'>"
    );
    let _ = writeln!(out, "<rect width='100%' height='100%' fill='white'/>");
    for (i, p) in panels.iter().enumerate() {
        render_panel(p, i as f64 * H, &mut out);
    }
    out.push_str("</svg>\n");
    out
}

fn write_file(path: &Path, content: &str) -> Result<(), HarnessError> {
    std::fs::write(path, content).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Export CSV and plots into `dir`: `log.csv`, `timecourses.svg`,
/// `inputs.svg`, `solve_time.svg`, and `portrait.svg`.
pub fn export(
    log: &SimLog,
    config: &MpcConfig,
    locus: &[LocusPoint],
    steady: Option<&SteadyMap>,
    dir: impl AsRef<Path>,
) -> Result<(), HarnessError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    write_file(&dir.join("log.csv"), &log_to_csv(log))?;

    let t: Vec<f64> = log.rows.iter().map(|r| r.t_s).collect();
    let y1: Vec<(f64, f64)> = t.iter().zip(&log.rows).map(|(&t, r)| (t, r.y1_mw)).collect();
    let y1r: Vec<(f64, f64)> = t.iter().zip(&log.rows).map(|(&t, r)| (t, r.y1_ref_mw)).collect();
    let y2: Vec<(f64, f64)> = t.iter().zip(&log.rows).map(|(&t, r)| (t, r.y2_mjs)).collect();
    let y3: Vec<(f64, f64)> = t.iter().zip(&log.rows).map(|(&t, r)| (t, r.y3_kpa)).collect();
    let mut y3_lines: Vec<(f64, &str)> = Vec::new();
    if config.pressure_mode != PressureMode::Off {
        y3_lines.push((config.pressure_band_kpa[0], "#c22"));
        y3_lines.push((config.pressure_band_kpa[1], "#c22"));
    }
    let timecourses = vec![
        Panel {
            title: "Electric output".into(),
            x_label: "t [s]",
            y_label: "y1 [MW]",
            series: vec![
                Series { points: y1r, color: "#999", dash: Some("4 3"), label: "reference" },
                Series { points: y1, color: "#1661ab", dash: None, label: "y1" },
            ],
            hlines: vec![],
            markers: vec![],
        },
        Panel {
            title: "Heat transfer".into(),
            x_label: "t [s]",
            y_label: "y2 [MJ/s]",
            series: vec![
                Series {
                    points: t.iter().map(|&t| (t, log.y2_nom_mjs)).collect(),
                    color: "#999",
                    dash: Some("4 3"),
                    label: "reference",
                },
                Series { points: y2, color: "#177e36", dash: None, label: "y2" },
            ],
            hlines: vec![],
            markers: vec![],
        },
        Panel {
            title: "Supply pressure".into(),
            x_label: "t [s]",
            y_label: "y3 [kPa]",
            series: vec![Series { points: y3, color: "#8338ec", dash: None, label: "y3" }],
            hlines: y3_lines,
            markers: vec![],
        },
    ];
    write_file(&dir.join("timecourses.svg"), &svg_document(&timecourses))?;

    let u1: Vec<(f64, f64)> = t.iter().zip(&log.rows).map(|(&t, r)| (t, r.u[0])).collect();
    let u2: Vec<(f64, f64)> = t.iter().zip(&log.rows).map(|(&t, r)| (t, r.u[1])).collect();
    let mut u_lines = Vec::new();
    if let Some(b) = config.input_limits {
        u_lines.push((b[0][0], "#c22"));
        u_lines.push((b[0][1], "#c22"));
    }
    let inputs = vec![Panel {
        title: "Fuel inputs".into(),
        x_label: "t [s]",
        y_label: "u [-]",
        series: vec![
            Series { points: u1, color: "#1661ab", dash: None, label: "u1" },
            Series { points: u2, color: "#177e36", dash: None, label: "u2" },
        ],
        hlines: u_lines,
        markers: vec![],
    }];
    write_file(&dir.join("inputs.svg"), &svg_document(&inputs))?;

    let st: Vec<(f64, f64)> =
        t.iter().zip(&log.rows).map(|(&t, r)| (t, r.solve_time_s)).collect();
    let solve = vec![Panel {
        title: "Controller computation time per step".into(),
        x_label: "t [s]",
        y_label: "wall time [s]",
        series: vec![Series { points: st, color: "#d1495b", dash: None, label: "" }],
        hlines: vec![(log.ts_s, "#c22")],
        markers: vec![],
    }];
    write_file(&dir.join("solve_time.svg"), &svg_document(&solve))?;

    // Output-plane portrait.
    let traj: Vec<(f64, f64)> = log.rows.iter().map(|r| (r.y1_mw, r.y2_mjs)).collect();
    let locus_pts: Vec<(f64, f64)> = locus.iter().map(|p| (p.y1, p.y2)).collect();
    let mut series = vec![
        Series { points: locus_pts, color: "#d1495b", dash: Some("2 3"), label: "equilibrium locus" },
        Series { points: traj, color: "#1661ab", dash: None, label: "trajectory" },
    ];
    // Input-limit boundaries: straight lines in the output plane.
    let mut boundary_lines = Vec::new();
    if let (Some(sm), Some(bounds)) = (steady, config.input_limits) {
        let y1_span: Vec<f64> = log.rows.iter().map(|r| r.y1_mw).collect();
        let y1_lo = y1_span.iter().cloned().fold(f64::INFINITY, f64::min) - 0.5;
        let y1_hi = y1_span.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 0.5;
        for input in 0..2 {
            for bound in bounds[input] {
                // Row r of gain_inv: r . (y - y*) = bound - u*.
                let row = sm.gain_inv.row(input);
                if row[1].abs() < 1e-12 {
                    continue;
                }
                let rhs = bound - sm.u_star[input];
                let y2_of = |y1: f64| {
                    sm.y_star[1] + (rhs - row[0] * (y1 - sm.y_star[0])) / row[1]
                };
                boundary_lines.push(vec![(y1_lo, y2_of(y1_lo)), (y1_hi, y2_of(y1_hi))]);
            }
        }
    }
    for pts in &boundary_lines {
        series.push(Series { points: pts.clone(), color: "#333", dash: Some("6 4"), label: "" });
    }
    let markers = log
        .rows
        .first()
        .map(|r| vec![(r.y1_mw, r.y2_mjs, "#000")])
        .unwrap_or_default();
    let portrait = vec![Panel {
        title: "Output-plane portrait".into(),
        x_label: "y1 [MW]",
        y_label: "y2 [MJ/s]",
        series,
        hlines: vec![],
        markers,
    }];
    write_file(&dir.join("portrait.svg"), &svg_document(&portrait))?;
    Ok(())
}
