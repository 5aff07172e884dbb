//! Minimal chart rendering straight into PNG buffers: line charts and bar
//! charts with a built-in 5x7 pixel font. Keeps report plots dependency-free
//! (no system font stack needed).

use image::{ImageBuffer, Rgb};
use std::path::Path;

pub type Color = [u8; 3];

pub const PALETTE: [Color; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [127, 127, 127],
];

/// 5x7 glyphs; each byte is one row, low 5 bits used (MSB-left).
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_lowercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1E, 0x01, 0x01, 0x0E, 0x01, 0x01, 0x1E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E],
        'c' => [0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'f' => [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x15, 0x15],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10],
        'q' => [0x00, 0x00, 0x0F, 0x11, 0x0F, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x18, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0F, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x00, 0x00, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'z' => [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x01, 0x02, 0x04, 0x04, 0x08, 0x10, 0x10],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        _ => [0x00; 7],
    }
}

pub struct Canvas {
    buf: ImageBuffer<Rgb<u8>, Vec<u8>>,
}

impl Canvas {
    pub fn new(w: u32, h: u32) -> Self {
        Canvas { buf: ImageBuffer::from_pixel(w, h, Rgb([255, 255, 255])) }
    }

    fn put(&mut self, x: i64, y: i64, color: Color) {
        if x >= 0 && y >= 0 && (x as u32) < self.buf.width() && (y as u32) < self.buf.height() {
            self.buf.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Color) {
        let (mut x, mut y) = (x0, y0);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn rect_fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Color) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, color);
            }
        }
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, color: Color) {
        let mut cx = x;
        for c in s.chars() {
            let g = glyph(c);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        self.put(cx + col as i64, y + row as i64, color);
                    }
                }
            }
            cx += 6;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), String> {
        self.buf.save(path).map_err(|e| format!("plot save {}: {e}", path.display()))
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: Color,
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    (0..=n).map(|i| lo + span * i as f64 / n as f64).collect()
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// Render a line chart to `path`.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<(), String> {
    let (w, h) = (640u32, 420u32);
    let (ml, mr, mt, mb) = (64i64, 16i64, 28i64, 44i64);
    let mut canvas = Canvas::new(w, h);
    let (pw, ph) = (w as i64 - ml - mr, h as i64 - mt - mb);

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err("no data to plot".into());
    }
    let (mut x_lo, mut x_hi) = all.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
        (lo.min(p.0), hi.max(p.0))
    });
    let (mut y_lo, mut y_hi) = all.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    if x_hi - x_lo < 1e-12 {
        x_hi = x_lo + 1.0;
    }
    if y_hi - y_lo < 1e-12 {
        y_hi = y_lo + 1.0;
    }
    let pad = (y_hi - y_lo) * 0.05;
    y_lo -= pad;
    y_hi += pad;
    if x_lo > 0.0 && x_lo < (x_hi - x_lo) * 0.1 {
        x_lo = 0.0;
    }

    let to_px = |x: f64| ml + ((x - x_lo) / (x_hi - x_lo) * pw as f64) as i64;
    let to_py = |y: f64| mt + ph - ((y - y_lo) / (y_hi - y_lo) * ph as f64) as i64;

    let axis: Color = [40, 40, 40];
    let grid: Color = [225, 225, 225];
    for &t in &nice_ticks(y_lo, y_hi, 5) {
        let py = to_py(t);
        canvas.line(ml, py, ml + pw, py, grid);
        canvas.text(4, py - 3, &fmt_tick(t), axis);
    }
    for &t in &nice_ticks(x_lo, x_hi, 5) {
        let px = to_px(t);
        canvas.line(px, mt + ph, px, mt + ph + 3, axis);
        canvas.text(px - 8, mt + ph + 7, &fmt_tick(t), axis);
    }
    canvas.line(ml, mt, ml, mt + ph, axis);
    canvas.line(ml, mt + ph, ml + pw, mt + ph, axis);
    canvas.text(ml, 8, title, axis);
    canvas.text(ml + pw / 2 - 3 * x_label.len() as i64, h as i64 - 14, x_label, axis);
    canvas.text(4, mt - 12, y_label, axis);

    for (si, s) in series.iter().enumerate() {
        let mut sorted = s.points.clone();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for pair in sorted.windows(2) {
            canvas.line(
                to_px(pair[0].0),
                to_py(pair[0].1),
                to_px(pair[1].0),
                to_py(pair[1].1),
                s.color,
            );
        }
        for &(x, y) in &sorted {
            canvas.rect_fill(to_px(x) - 1, to_py(y) - 1, to_px(x) + 1, to_py(y) + 1, s.color);
        }
        // Legend.
        let ly = mt + 4 + 12 * si as i64;
        canvas.rect_fill(ml + pw - 120, ly, ml + pw - 110, ly + 6, s.color);
        canvas.text(ml + pw - 104, ly, &s.label, axis);
    }

    canvas.save(path)
}

pub struct Bar {
    pub label: String,
    pub value: f64,
    pub color: Color,
}

/// Render a bar chart to `path`.
pub fn bar_chart(path: &Path, title: &str, y_label: &str, bars: &[Bar]) -> Result<(), String> {
    let (w, h) = (640u32, 420u32);
    let (ml, mr, mt, mb) = (64i64, 16i64, 28i64, 70i64);
    let mut canvas = Canvas::new(w, h);
    let (pw, ph) = (w as i64 - ml - mr, h as i64 - mt - mb);
    if bars.is_empty() {
        return Err("no bars to plot".into());
    }
    let y_hi = bars.iter().map(|b| b.value).fold(0.0f64, f64::max).max(1e-9) * 1.1;

    let axis: Color = [40, 40, 40];
    let grid: Color = [225, 225, 225];
    for &t in &nice_ticks(0.0, y_hi, 5) {
        let py = mt + ph - ((t / y_hi) * ph as f64) as i64;
        canvas.line(ml, py, ml + pw, py, grid);
        canvas.text(4, py - 3, &fmt_tick(t), axis);
    }
    canvas.line(ml, mt, ml, mt + ph, axis);
    canvas.line(ml, mt + ph, ml + pw, mt + ph, axis);
    canvas.text(ml, 8, title, axis);
    canvas.text(4, mt - 12, y_label, axis);

    let slot = pw / bars.len() as i64;
    let bw = (slot * 3 / 5).max(3);
    for (i, b) in bars.iter().enumerate() {
        let x0 = ml + slot * i as i64 + (slot - bw) / 2;
        let top = mt + ph - ((b.value / y_hi) * ph as f64) as i64;
        canvas.rect_fill(x0, top, x0 + bw, mt + ph - 1, b.color);
        // Value above the bar, label beneath the axis (staggered rows to
        // reduce overlap).
        canvas.text(x0, top - 10, &fmt_tick(b.value), axis);
        let ly = mt + ph + 8 + 12 * (i as i64 % 3);
        canvas.text(ml + slot * i as i64 + 2, ly, &b.label, axis);
    }

    canvas.save(path)
}
