//! Minimal bar and line charts, written as SVG (with labels) and PNG
//! (geometry only).

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::ExperimentError;

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: f64 = 50.0;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub err: Option<f64>,
}

impl Bar {
    pub fn new(label: impl Into<String>, value: f64, err: Option<f64>) -> Self {
        Self {
            label: label.into(),
            value,
            err,
        }
    }
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plot area mapping of `[0, y_max]` onto pixel rows.
struct Frame {
    y_max: f64,
}

impl Frame {
    fn new(max: f64) -> Self {
        let y_max = if max.is_finite() && max > 0.0 { max * 1.1 } else { 1.0 };
        Self { y_max }
    }

    fn y(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, self.y_max);
        H as f64 - MARGIN - v / self.y_max * (H as f64 - 2.0 * MARGIN)
    }

    fn width() -> f64 {
        W as f64 - 2.0 * MARGIN
    }
}

fn svg_open(title: &str, frame: &Frame) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2,
        escape(title)
    );
    let (x0, y0) = (MARGIN, H as f64 - MARGIN);
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>", W as f64 - MARGIN);
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{MARGIN}\" stroke=\"black\"/>");
    for i in 0..=4 {
        let v = frame.y_max * i as f64 / 4.0;
        let y = frame.y(v);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>",
            MARGIN - 4.0,
            y + 4.0
        );
    }
    s
}

pub fn bar_chart_svg(title: &str, bars: &[Bar]) -> String {
    let frame = Frame::new(bars.iter().map(|b| b.value + b.err.unwrap_or(0.0)).fold(0.0, f64::max));
    let mut s = svg_open(title, &frame);
    let slot = Frame::width() / bars.len().max(1) as f64;
    for (i, b) in bars.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let y = frame.y(b.value);
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
            slot * 0.7,
            frame.y(0.0) - y,
            hex(PALETTE[i % PALETTE.len()])
        );
        let cx = x + slot * 0.35;
        if let Some(e) = b.err {
            let _ = writeln!(
                s,
                "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
                frame.y(b.value - e),
                frame.y(b.value + e)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            H as f64 - MARGIN + 16.0,
            escape(&b.label)
        );
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>", y - 4.0, b.value);
    }
    s + "</svg>\n"
}

fn series_max(series: &[(String, Vec<f64>)]) -> f64 {
    series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
}

fn x_of(i: usize, n: usize) -> f64 {
    MARGIN + Frame::width() * if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 }
}

pub fn line_chart_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let frame = Frame::new(series_max(series));
    let mut s = svg_open(title, &frame);
    for (i, (name, v)) in series.iter().enumerate() {
        let color = hex(PALETTE[i % PALETTE.len()]);
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .map(|(k, &y)| format!("{:.1},{:.1}", x_of(k, v.len()), frame.y(y)))
            .collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" text-anchor=\"end\">{}</text>",
            W as f64 - MARGIN,
            MARGIN + 14.0 * (i + 1) as f64,
            escape(name)
        );
    }
    s + "</svg>\n"
}

fn blank() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let y0 = (H as f64 - MARGIN) as u32;
    for x in MARGIN as u32..W - MARGIN as u32 {
        img.put_pixel(x, y0, Rgb([0, 0, 0]));
    }
    for y in MARGIN as u32..=y0 {
        img.put_pixel(MARGIN as u32, y, Rgb([0, 0, 0]));
    }
    img
}

fn fill_rect(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, c: [u8; 3]) {
    let clamp = |v: f64, hi: u32| (v.round().max(0.0) as u32).min(hi - 1);
    for y in clamp(y0.min(y1), H)..=clamp(y0.max(y1), H) {
        for x in clamp(x0.min(x1), W)..=clamp(x0.max(x1), W) {
            img.put_pixel(x, y, Rgb(c));
        }
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        fill_rect(img, x - 0.5, y - 0.5, x + 0.5, y + 0.5, c);
    }
}

pub fn bar_chart_png(bars: &[Bar]) -> RgbImage {
    let frame = Frame::new(bars.iter().map(|b| b.value + b.err.unwrap_or(0.0)).fold(0.0, f64::max));
    let mut img = blank();
    let slot = Frame::width() / bars.len().max(1) as f64;
    for (i, b) in bars.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        fill_rect(&mut img, x, frame.y(b.value), x + slot * 0.7, frame.y(0.0) - 1.0, PALETTE[i % PALETTE.len()]);
        if let Some(e) = b.err {
            let cx = x + slot * 0.35;
            draw_line(&mut img, (cx, frame.y(b.value - e)), (cx, frame.y(b.value + e)), [0, 0, 0]);
        }
    }
    img
}

pub fn line_chart_png(series: &[(String, Vec<f64>)]) -> RgbImage {
    let frame = Frame::new(series_max(series));
    let mut img = blank();
    for (i, (_, v)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = v.iter().enumerate().map(|(k, &y)| (x_of(k, v.len()), frame.y(y))).collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], PALETTE[i % PALETTE.len()]);
        }
    }
    img
}

fn save_png(img: &RgbImage, path: &Path) -> Result<(), ExperimentError> {
    img.save(path).map_err(|e| ExperimentError::Plot(format!("{}: {e}", path.display())))
}

/// Writes `<stem>.svg` and `<stem>.png` into `dir`.
pub fn save_bar_chart(dir: &Path, stem: &str, title: &str, bars: &[Bar]) -> Result<(), ExperimentError> {
    std::fs::write(dir.join(format!("{stem}.svg")), bar_chart_svg(title, bars))?;
    save_png(&bar_chart_png(bars), &dir.join(format!("{stem}.png")))
}

pub fn save_line_chart(dir: &Path, stem: &str, title: &str, series: &[(String, Vec<f64>)]) -> Result<(), ExperimentError> {
    std::fs::write(dir.join(format!("{stem}.svg")), line_chart_svg(title, series))?;
    save_png(&line_chart_png(series), &dir.join(format!("{stem}.png")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_rect_per_bar_and_escapes() {
        let bars = vec![Bar::new("a<b", 0.5, Some(0.1)), Bar::new("c", 0.8, None)];
        let s = bar_chart_svg("t & u", &bars);
        assert_eq!(s.matches("<rect").count(), 3);
        assert!(s.contains("a&lt;b") && s.contains("t &amp; u"));
    }

    #[test]
    fn png_bars_are_drawn() {
        let img = bar_chart_png(&[Bar::new("a", 1.0, None)]);
        let x = (MARGIN + Frame::width() * 0.5) as u32;
        assert_eq!(img.get_pixel(x, H - MARGIN as u32 - 5).0, PALETTE[0]);
        assert_eq!(img.get_pixel(x, 5).0, [255, 255, 255]);
    }

    #[test]
    fn degenerate_inputs_do_not_panic() {
        let _ = bar_chart_png(&[]);
        let _ = line_chart_png(&[("x".into(), vec![f64::NAN, 1.0]), ("y".into(), vec![])]);
        let s = line_chart_svg("l", &[("x".into(), vec![1.0])]);
        assert!(s.contains("polyline"));
    }
}
