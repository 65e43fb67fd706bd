//! SVG timeline of ground-truth vs predicted segments.

use std::fmt::Write;

use crate::metrics::extract_segments;

const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
];

pub struct TimelineRow<'a> {
    pub name: &'a str,
    pub truth: &'a [usize],
    pub predicted: &'a [usize],
}

fn bar(svg: &mut String, labels: &[usize], x0: f64, y: f64, width: f64, height: f64) {
    let scale = width / labels.len().max(1) as f64;
    for s in extract_segments(labels) {
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{y}" width="{:.2}" height="{height}" fill="{}"/>"#,
            x0 + s.start as f64 * scale,
            s.len() as f64 * scale,
            PALETTE[s.label % PALETTE.len()]
        );
    }
}

pub fn timeline_svg(rows: &[TimelineRow], class_names: &[String]) -> String {
    let (label_w, width, bar_h, gap) = (120.0, 800.0, 14.0, 10.0);
    let row_h = 2.0 * bar_h + gap;
    let legend_h = 24.0;
    let height = rows.len() as f64 * row_h + legend_h + gap;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
        label_w + width + gap
    );
    svg.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let y = i as f64 * row_h + gap;
        let _ = writeln!(svg, r#"<text x="4" y="{}">{} GT</text>"#, y + bar_h - 3.0, r.name);
        let _ = writeln!(svg, r#"<text x="4" y="{}">{} pred</text>"#, y + 2.0 * bar_h - 3.0, r.name);
        bar(&mut svg, r.truth, label_w, y, width, bar_h);
        bar(&mut svg, r.predicted, label_w, y + bar_h, width, bar_h);
    }
    let ly = rows.len() as f64 * row_h + gap + 4.0;
    for (i, name) in class_names.iter().enumerate() {
        let x = label_w + i as f64 * 110.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{ly}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{name}</text>"#,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            ly + 9.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
