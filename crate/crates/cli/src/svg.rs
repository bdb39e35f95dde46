//! Stacked-bar chart of per-stage memory, written as plain SVG text.

use std::fmt::Write;

use step_core::{gigabytes, StageBytes};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

/// Segment labels and fill colours, bottom to top.
const SEGMENTS: [(&str, &str); 4] = [
    ("new-layer state", "#4c72b0"),
    ("frozen params", "#dd8452"),
    ("adapter state", "#55a868"),
    ("embeddings", "#8172b3"),
];

fn parts(b: &StageBytes) -> [u128; 4] {
    [b.new_layer_state, b.frozen_params, b.adapter_state, b.embedding_state]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One bar per stage, plus a dashed line at `vanilla` bytes.
pub fn memory_chart(title: &str, stages: &[StageBytes], vanilla: u128) -> String {
    let top = stages.iter().map(StageBytes::total).chain([vanilla]).max().unwrap_or(0).max(1);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let base = MARGIN_TOP + plot_h;
    let y_of = |bytes: u128| base - plot_h * (bytes as f64 / top as f64);
    let slot = plot_w / stages.len().max(1) as f64;
    let bar_w = slot * 0.6;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));

    // y axis with five ticks
    let _ = writeln!(out, r#"<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{base}" stroke="black"/>"#);
    for i in 0..=4u128 {
        let bytes = top * i / 4;
        let y = y_of(bytes);
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{y:.2}" x2="{MARGIN_LEFT}" y2="{y:.2}" stroke="black"/><text x="{:.1}" y="{:.2}" text-anchor="end">{:.2} GB</text>"#,
            MARGIN_LEFT - 4.0,
            MARGIN_LEFT - 6.0,
            y + 4.0,
            gigabytes(bytes)
        );
    }
    let _ = writeln!(out, r#"<line x1="{MARGIN_LEFT}" y1="{base}" x2="{:.1}" y2="{base}" stroke="black"/>"#, MARGIN_LEFT + plot_w);

    for (i, stage) in stages.iter().enumerate() {
        let x = MARGIN_LEFT + slot * i as f64 + (slot - bar_w) / 2.0;
        let mut acc = 0u128;
        for (value, (label, colour)) in parts(stage).into_iter().zip(SEGMENTS) {
            if value == 0 {
                continue;
            }
            let (y0, y1) = (y_of(acc), y_of(acc + value));
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y1:.2}" width="{bar_w:.2}" height="{:.2}" fill="{colour}"><title>stage {} {label}: {value} bytes</title></rect>"#,
                y0 - y1,
                i + 1
            );
            acc += value;
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.2} GB</text><text x="{:.2}" y="{:.1}" text-anchor="middle">stage {}</text>"#,
            x + bar_w / 2.0,
            y_of(acc) - 4.0,
            gigabytes(acc),
            x + bar_w / 2.0,
            base + 18.0,
            i + 1
        );
    }

    let vy = y_of(vanilla);
    let _ = writeln!(
        out,
        r##"<line x1="{MARGIN_LEFT}" y1="{vy:.2}" x2="{:.1}" y2="{vy:.2}" stroke="#c44e52" stroke-dasharray="6 4"/><text x="{:.1}" y="{:.2}" fill="#c44e52">vanilla {:.2} GB</text>"##,
        MARGIN_LEFT + plot_w,
        MARGIN_LEFT + plot_w + 6.0,
        vy + 4.0,
        gigabytes(vanilla)
    );

    let lx = WIDTH - MARGIN_RIGHT + 10.0;
    for (i, (label, colour)) in SEGMENTS.iter().enumerate() {
        let y = MARGIN_TOP + 30.0 + 20.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{colour}"/><text x="{:.1}" y="{y:.1}">{label}</text>"#,
            y - 10.0,
            lx + 18.0
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(n: u128, f: u128, a: u128) -> StageBytes {
        StageBytes { new_layer_state: n, frozen_params: f, adapter_state: a, embedding_state: 0 }
    }

    #[test]
    fn one_rect_per_nonzero_segment() {
        let svg = memory_chart("t", &[bytes(10, 0, 0), bytes(5, 2, 1)], 20);
        assert_eq!(svg.matches("<rect x=").count(), 4 + SEGMENTS.len());
        assert!(svg.contains("vanilla"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg, memory_chart("t", &[bytes(10, 0, 0), bytes(5, 2, 1)], 20));
    }

    #[test]
    fn title_is_escaped() {
        assert!(memory_chart("a<b", &[bytes(1, 0, 0)], 1).contains("a&lt;b"));
    }
}
