//! CSV, JSON and self-contained SVG renderings of evaluation results.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format_score, Histogram, Method, MetricsError, RocCurve, Scatter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub method: Method,
    pub auc: f64,
    pub same_source_pairs: usize,
    pub different_source_pairs: usize,
    /// Which scores were evaluated (e.g. the checkpoint that produced them).
    pub source: String,
}

fn write_text(path: &Path, text: &str) -> Result<(), MetricsError> {
    std::fs::write(path, text).map_err(|e| MetricsError::io(path, e))
}

pub fn write_roc_csv(curve: &RocCurve, path: &Path) -> Result<(), MetricsError> {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let t = if p.threshold.is_infinite() { "inf".to_string() } else { format_score(p.threshold) };
        writeln!(s, "{t},{},{}", format_score(p.fpr), format_score(p.tpr)).expect("string write");
    }
    write_text(path, &s)
}

pub fn write_summary_json(summaries: &[EvaluationSummary], path: &Path) -> Result<(), MetricsError> {
    let text = serde_json::to_string_pretty(summaries).expect("plain data serializes");
    write_text(path, &text)
}

pub fn write_histogram_csv(hist: &Histogram, path: &Path) -> Result<(), MetricsError> {
    let mut s = String::from("bin_low,bin_high,same_source,different_source\n");
    for i in 0..hist.same_source.len() {
        writeln!(
            s,
            "{},{},{},{}",
            format_score(hist.edges[i]),
            format_score(hist.edges[i + 1]),
            hist.same_source[i],
            hist.different_source[i]
        )
        .expect("string write");
    }
    write_text(path, &s)
}

pub fn write_scatter_csv(scatter: &Scatter, path: &Path) -> Result<(), MetricsError> {
    let mut s = format!("id_a,id_b,same_source,{},{}\n", scatter.x_method, scatter.y_method);
    for p in &scatter.points {
        writeln!(
            s,
            "{},{},{},{},{}",
            p.id_a,
            p.id_b,
            p.same_source,
            format_score(p.x),
            format_score(p.y)
        )
        .expect("string write");
    }
    write_text(path, &s)
}

const W: f64 = 480.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plot frame with axis labels; returns the open document.
fn frame(title: &str, x_label: &str, y_label: &str, x_range: (f64, f64), y_range: (f64, f64)) -> String {
    let mut s = String::new();
    let (pw, ph) = (W - 2.0 * MARGIN, H - 2.0 * MARGIN);
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = MARGIN + f * pw;
        let y = H - MARGIN - f * ph;
        let xv = x_range.0 + f * (x_range.1 - x_range.0);
        let yv = y_range.0 + f * (y_range.1 - y_range.0);
        writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, H - MARGIN + 16.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, MARGIN - 6.0, y + 4.0).unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 14.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    )
    .unwrap();
    s
}

fn to_px(v: f64, range: (f64, f64), lo_px: f64, span_px: f64) -> f64 {
    if range.1 > range.0 {
        lo_px + (v - range.0) / (range.1 - range.0) * span_px
    } else {
        lo_px + span_px / 2.0
    }
}

/// ROC curves of several methods on one set of axes.
pub fn roc_overlay_svg(curves: &[(&str, &RocCurve)]) -> String {
    let mut s = frame("ROC curves", "false positive rate", "true positive rate", (0.0, 1.0), (0.0, 1.0));
    let (pw, ph) = (W - 2.0 * MARGIN, H - 2.0 * MARGIN);
    writeln!(
        s,
        r##"<line x1="{MARGIN}" y1="{}" x2="{}" y2="{MARGIN}" stroke="#999" stroke-dasharray="4 3"/>"##,
        H - MARGIN,
        W - MARGIN
    )
    .unwrap();
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", MARGIN + p.fpr * pw, H - MARGIN - p.tpr * ph))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{} (AUC {:.3})</text>"#,
            MARGIN + pw * 0.45,
            H - MARGIN - 14.0 - 16.0 * i as f64,
            escape(name),
            curve.auc
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Side-by-side bars for same-source and different-source counts, each
/// normalized to its own total.
pub fn histogram_svg(title: &str, hist: &Histogram) -> String {
    let bins = hist.same_source.len();
    let totals = (
        hist.same_source.iter().sum::<usize>().max(1) as f64,
        hist.different_source.iter().sum::<usize>().max(1) as f64,
    );
    let peak = hist
        .same_source
        .iter()
        .map(|&c| c as f64 / totals.0)
        .chain(hist.different_source.iter().map(|&c| c as f64 / totals.1))
        .fold(0.0, f64::max)
        .max(1e-12);
    let x_range = (hist.edges[0], hist.edges[bins]);
    let mut s = frame(title, "similarity score", "fraction of pairs", x_range, (0.0, peak));
    let (pw, ph) = (W - 2.0 * MARGIN, H - 2.0 * MARGIN);
    let bw = pw / bins as f64;
    for i in 0..bins {
        for (k, (count, total, color)) in [
            (hist.same_source[i], totals.0, COLORS[0]),
            (hist.different_source[i], totals.1, COLORS[1]),
        ]
        .into_iter()
        .enumerate()
        {
            let h = count as f64 / total / peak * ph;
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{color}" fill-opacity="0.7"/>"#,
                MARGIN + i as f64 * bw + k as f64 * bw / 2.0,
                H - MARGIN - h,
                bw / 2.0
            )
            .unwrap();
        }
    }
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="{}">same source</text>"#, MARGIN + 8.0, MARGIN + 16.0, COLORS[0]).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="{}">different source</text>"#, MARGIN + 8.0, MARGIN + 32.0, COLORS[1]).unwrap();
    s.push_str("</svg>\n");
    s
}

/// Point cloud of joined scores over a shaded 2D-histogram background.
pub fn scatter_svg(scatter: &Scatter, bins: usize) -> String {
    let range = |f: fn(&super::ScatterPoint) -> f64| {
        scatter
            .points
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (xr, yr) = if scatter.points.is_empty() {
        ((0.0, 1.0), (0.0, 1.0))
    } else {
        (range(|p| p.x), range(|p| p.y))
    };
    let title = match scatter.pearson_nonzero_cmc {
        Some(r) => format!("{} vs {} (r = {r:.3}, n = {})", scatter.x_method, scatter.y_method, scatter.nonzero_cmc_pairs),
        None => format!("{} vs {}", scatter.x_method, scatter.y_method),
    };
    let mut s = frame(&title, &scatter.x_method.to_string(), &scatter.y_method.to_string(), xr, yr);
    let (pw, ph) = (W - 2.0 * MARGIN, H - 2.0 * MARGIN);
    if bins > 0 && !scatter.points.is_empty() {
        let grid = scatter.heatmap(bins);
        let peak = grid.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
        let (cw, ch) = (pw / bins as f64, ph / bins as f64);
        for (row, counts) in grid.iter().enumerate() {
            for (col, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                writeln!(
                    s,
                    r##"<rect x="{:.2}" y="{:.2}" width="{cw:.2}" height="{ch:.2}" fill="#333" fill-opacity="{:.3}"/>"##,
                    MARGIN + col as f64 * cw,
                    H - MARGIN - (row + 1) as f64 * ch,
                    0.08 + 0.5 * c as f64 / peak
                )
                .unwrap();
            }
        }
    }
    for p in &scatter.points {
        let color = if p.same_source { COLORS[0] } else { COLORS[1] };
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{color}" fill-opacity="0.6"/>"#,
            to_px(p.x, xr, MARGIN, pw),
            H - to_px(p.y, yr, MARGIN, ph)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::super::{roc_auc, score_histogram, score_scatter, ScoreSet, ScoredPair};
    use super::*;

    fn fixture() -> ScoreSet {
        let pairs = (0..6)
            .map(|i| ScoredPair {
                id_a: format!("a{i}"),
                id_b: format!("b{i}"),
                same_source: i % 2 == 0,
                score: i as f64 * 0.1,
            })
            .collect();
        ScoreSet::new(Method::Cmc, pairs).unwrap()
    }

    #[test]
    fn svgs_are_well_formed() {
        let s = fixture();
        let roc = roc_auc(&s).unwrap();
        let hist = score_histogram(&s, 4).unwrap();
        let sc = score_scatter(&s, &s).unwrap();
        for doc in [roc_overlay_svg(&[("cmc", &roc)]), histogram_svg("h", &hist), scatter_svg(&sc, 5)] {
            roxmltree::Document::parse(&doc).unwrap();
        }
    }

    #[test]
    fn csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let s = fixture();
        let roc = roc_auc(&s).unwrap();
        write_roc_csv(&roc, &dir.path().join("roc.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("roc.csv")).unwrap();
        assert!(text.starts_with("threshold,fpr,tpr\ninf,0.0,0.0\n"));
        assert!(text.trim_end().ends_with(",1.0,1.0"));
    }
}
