//! Static SVG figures. Every figure can be rebuilt from the CSVs written
//! alongside it.

use std::fmt::Write;

use nsum_core::estimator::{CellEstimate, HyperRow};
use nsum_core::simulator::{FitModel, StudyResult};

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Lowercase ASCII alphanumerics, everything else becomes `_`.
pub fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn header(out: &mut String, title: &str, y_scale: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" data-y-scale="{y_scale}">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        H - BOTTOM
    );
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="black"/>"#,
        W - RIGHT,
        y = H - BOTTOM
    );
}

/// Maps data values to the plot's vertical pixel range.
struct YAxis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl YAxis {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil().max(lo + 1.0);
        } else {
            lo = lo.min(0.0);
            if hi <= lo {
                hi = lo + 1.0;
            }
            hi *= 1.05;
        }
        Self { lo, hi, log }
    }

    fn px(&self, v: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let t = if self.log { v.log10() } else { v };
        Some(H - BOTTOM - (t - self.lo) / (self.hi - self.lo) * (H - TOP - BOTTOM))
    }

    fn ticks(&self, out: &mut String) {
        let vals: Vec<f64> = if self.log {
            (self.lo as i32..=self.hi as i32).map(|e| 10f64.powi(e)).collect()
        } else {
            (0..=4).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0).collect()
        };
        for v in vals {
            let Some(y) = self.px(v) else { continue };
            let label = if self.log { format!("{v:e}") } else { format!("{v:.2}") };
            let _ = writeln!(
                out,
                r#"<line x1="{}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{label}</text>"#,
                LEFT - 4.0,
                LEFT - 6.0,
                y + 3.0
            );
        }
    }
}

fn x_label(out: &mut String, text: &str) {
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 15.0,
        escape(text)
    );
}

fn interval(out: &mut String, x: f64, lo: Option<f64>, hi: Option<f64>, mid: Option<f64>, colour: &str) {
    if let (Some(lo), Some(hi)) = (lo, hi) {
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{lo:.1}" x2="{x:.1}" y2="{hi:.1}" stroke="{colour}" stroke-opacity="0.6"/>"#
        );
    }
    if let Some(m) = mid {
        let _ = writeln!(out, r#"<circle cx="{x:.1}" cy="{m:.1}" r="2.5" fill="{colour}"/>"#);
    }
}

/// Posterior medians with 95% intervals per municipality, sorted by median,
/// on a log axis.
pub fn caterpillar(group: &str, cells: &[CellEstimate], labels: &[String]) -> String {
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| cells[a].summary.median.total_cmp(&cells[b].summary.median));
    let axis = YAxis::new(
        cells.iter().flat_map(|c| [c.summary.q025, c.summary.q975, c.summary.median]),
        true,
    );
    let mut out = String::new();
    header(&mut out, &format!("Estimated size of {group} by municipality"), "log");
    axis.ticks(&mut out);
    let span = W - LEFT - RIGHT;
    let n = cells.len().max(1) as f64;
    for (rank, &i) in order.iter().enumerate() {
        let s = &cells[i].summary;
        let x = LEFT + span * (rank as f64 + 0.5) / n;
        let label = labels.get(cells[i].municipality).map(String::as_str).unwrap_or("");
        let _ = writeln!(out, "<g><title>{}</title>", escape(label));
        interval(&mut out, x, axis.px(s.q025), axis.px(s.q975), axis.px(s.median), "#1f4e9a");
        out.push_str("</g>\n");
    }
    x_label(&mut out, "municipality (ranked by posterior median)");
    out.push_str("</svg>\n");
    out
}

/// Posterior intervals of the per-group hyperparameters, one panel row per
/// parameter kind, on a log axis.
pub fn hyper_intervals(rows: &[HyperRow], group_names: &[String]) -> String {
    let rows: Vec<&HyperRow> = rows.iter().filter(|r| r.group.is_some()).collect();
    let axis = YAxis::new(
        rows.iter().flat_map(|r| [r.summary.q025, r.summary.q975]),
        true,
    );
    let mut out = String::new();
    header(&mut out, "Group-level posterior summaries", "log");
    axis.ticks(&mut out);
    let colours = ["#1f4e9a", "#b8461b", "#2d7d3a", "#6b3fa0"];
    let mut kinds: Vec<&str> = Vec::new();
    for r in &rows {
        if !kinds.contains(&r.parameter.as_str()) {
            kinds.push(&r.parameter);
        }
    }
    let span = W - LEFT - RIGHT;
    let n = rows.len().max(1) as f64;
    for (slot, r) in rows.iter().enumerate() {
        let x = LEFT + span * (slot as f64 + 0.5) / n;
        let c = colours[kinds.iter().position(|k| *k == r.parameter).unwrap_or(0) % colours.len()];
        let g = r.group.and_then(|g| group_names.get(g)).map(String::as_str).unwrap_or("");
        let _ = writeln!(out, "<g><title>{} {}</title>", escape(&r.parameter), escape(g));
        interval(&mut out, x, axis.px(r.summary.q025), axis.px(r.summary.q975), axis.px(r.summary.median), c);
        out.push_str("</g>\n");
    }
    for (i, k) in kinds.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{}">{}</text>"#,
            LEFT + 10.0 + 110.0 * i as f64,
            TOP + 12.0,
            colours[i % colours.len()],
            escape(k)
        );
    }
    x_label(&mut out, "group");
    out.push_str("</svg>\n");
    out
}

fn quartiles(v: &mut [f64]) -> Option<[f64; 5]> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| nsum_core::estimator::quantile_sorted(v, p);
    Some([q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)])
}

/// MARE by respondents per municipality, pooled and standard side by side.
pub fn study_boxplot(result: &StudyResult, sizes: &[usize]) -> String {
    let axis = YAxis::new(result.rows.iter().map(|r| r.mare), false);
    let mut out = String::new();
    header(&mut out, "Mean absolute relative error by sample size", "linear");
    axis.ticks(&mut out);
    let span = W - LEFT - RIGHT;
    let n = sizes.len().max(1) as f64;
    let bw = span / n * 0.3;
    for (slot, &size) in sizes.iter().enumerate() {
        let centre = LEFT + span * (slot as f64 + 0.5) / n;
        for (model, dx, colour) in [
            (FitModel::Pooled, -0.55, "#1f4e9a"),
            (FitModel::Standard, 0.55, "#b8461b"),
        ] {
            let mut v: Vec<f64> = result.mares(size, model).into_iter().filter(|m| m.is_finite()).collect();
            let Some(q) = quartiles(&mut v) else { continue };
            let x = centre + dx * bw;
            let px: Vec<f64> = q.iter().map(|&v| axis.px(v).unwrap_or(H - BOTTOM)).collect();
            let _ = writeln!(
                out,
                r#"<g data-model="{model}" data-size="{size}"><line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{colour}"/><rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="white" stroke="{colour}"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{colour}" stroke-width="2"/></g>"#,
                px[0],
                px[4],
                x - bw / 2.0,
                px[3],
                bw,
                (px[1] - px[3]).max(0.5),
                x - bw / 2.0,
                px[2],
                x + bw / 2.0,
                px[2]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{centre:.1}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{size}</text>"#,
            H - BOTTOM + 16.0
        );
    }
    for (i, (name, colour)) in [("pooled", "#1f4e9a"), ("standard", "#b8461b")].iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{colour}">{name}</text>"#,
            W - RIGHT - 140.0 + 70.0 * i as f64,
            TOP + 12.0
        );
    }
    x_label(&mut out, "respondents per municipality");
    out.push_str("</svg>\n");
    out
}
