//! SVG rendering of layouts: one rectangle per box on a square canvas,
//! colored per category with a fixed palette hash, labeled at the corner.

use crate::layout::{Layout, Vocabulary};
use crate::Result;

/// Deterministic per-category color: golden-angle hue stepping keeps
/// adjacent ids visually distinct.
pub fn category_color(id: u32) -> String {
    let hue = (f64::from(id) * 137.508) % 360.0;
    format!("hsl({hue:.1}, 70%, 45%)")
}

/// Renders a layout as a standalone SVG document scaled to `width`
/// pixels (the canvas is the unit square, so height equals width).
pub fn layout_to_svg(layout: &Layout, vocab: &Vocabulary, width: u32) -> Result<String> {
    layout.validate(vocab)?;
    let w = f64::from(width);
    let mut out = String::with_capacity(1024);
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{width}\" \
         viewBox=\"0 0 {width} {width}\">\n"
    ));
    out.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{width}\" fill=\"#ffffff\" \
         stroke=\"#cccccc\"/>\n"
    ));
    let font = (w / 40.0).max(8.0);
    for (&label, boxes) in &layout.boxes {
        let color = category_color(label);
        let name = xml_escape(&vocab.category(label)?.name);
        for b in boxes {
            let (x, y, bw, bh) = (b.x * w, b.y * w, b.w * w, b.h * w);
            out.push_str(&format!(
                "  <rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bw:.2}\" height=\"{bh:.2}\" \
                 fill=\"{color}\" fill-opacity=\"0.25\" stroke=\"{color}\" stroke-width=\"2\"/>\n"
            ));
            let ty = y + font;
            out.push_str(&format!(
                "  <text x=\"{x:.2}\" y=\"{ty:.2}\" font-size=\"{font:.1}\" \
                 font-family=\"sans-serif\" fill=\"{color}\">{name}</text>\n"
            ));
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
