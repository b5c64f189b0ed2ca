//! Fixed-size PNG panels: cell heatmaps, magnitude images and line/bar plots
//! with labelled axes.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{CliError, CliResult};

pub const WIDTH: usize = 640;
pub const HEIGHT: usize = 480;
const LEFT: usize = 96;
const RIGHT: usize = 120;
const TOP: usize = 24;
const BOTTOM: usize = 64;
const SCALE: usize = 2;
const GLYPH_W: usize = 6 * SCALE;

pub type Rgb = [u8; 3];

const WHITE: Rgb = [255, 255, 255];
const BLACK: Rgb = [0, 0, 0];
const GREY: Rgb = [160, 160, 160];
const BLUE: Rgb = [33, 102, 172];
const RED: Rgb = [178, 24, 43];

/// Diverging map: -1 blue, 0 white, +1 red.
pub fn diverging(t: f64) -> Rgb {
    let t = if t.is_finite() { t.clamp(-1.0, 1.0) } else { 0.0 };
    let end = if t >= 0.0 { RED } else { BLUE };
    lerp(WHITE, end, t.abs())
}

/// Sequential map for magnitudes in [0, 1]: white through yellow and orange
/// to dark red.
pub fn sequential(t: f64) -> Rgb {
    const STOPS: [Rgb; 4] = [[255, 255, 255], [254, 217, 118], [240, 59, 32], [103, 0, 13]];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 } * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    lerp(STOPS[i], STOPS[i + 1], t - i as f64)
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    let mix = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
    [mix(a[0], b[0]), mix(a[1], b[1]), mix(a[2], b[2])]
}

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![255; width * height * 3],
        }
    }

    #[cfg(test)]
    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.min(y1)..y0.max(y1) {
            for x in x0.min(x1)..x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
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

    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb) {
        for (n, ch) in s.chars().enumerate() {
            let rows = glyph(ch);
            let ox = x + (n * GLYPH_W) as i64;
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..5 {
                    if bits & (1 << (4 - col)) != 0 {
                        let px = ox + (col * SCALE) as i64;
                        let py = y + (r * SCALE) as i64;
                        self.fill(px, py, px + SCALE as i64, py + SCALE as i64, c);
                    }
                }
            }
        }
    }

    fn text_width(s: &str) -> i64 {
        (s.chars().count() * GLYPH_W) as i64
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(f), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| CliError::io(path, e))?;
        w.write_image_data(&self.pixels).map_err(|e| CliError::io(path, e))
    }
}

fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '[' => [0x0E, 0x08, 0x08, 0x08, 0x08, 0x08, 0x0E],
        ']' => [0x0E, 0x02, 0x02, 0x02, 0x02, 0x02, 0x0E],
        '|' => [0x04; 7],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'a' => [0, 0, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E],
        'c' => [0, 0, 0x0E, 0x10, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        'e' => [0, 0, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'f' => [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08],
        'g' => [0, 0, 0x0F, 0x11, 0x0F, 0x01, 0x0E],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'i' => [0x04, 0, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0, 0, 0x1A, 0x15, 0x15, 0x11, 0x11],
        'n' => [0, 0, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0, 0, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0, 0, 0x1E, 0x11, 0x1E, 0x10, 0x10],
        'q' => [0, 0, 0x0D, 0x13, 0x0F, 0x01, 0x01],
        'r' => [0, 0, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0, 0, 0x0E, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0, 0, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0, 0, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'y' => [0, 0, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'z' => [0, 0, 0x1F, 0x02, 0x04, 0x08, 0x1F],
        _ => [0; 7],
    }
}

/// Round tick positions covering `[lo, hi]`, about five of them.
pub fn ticks(lo: f64, hi: f64) -> (Vec<f64>, f64) {
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return (vec![lo], 1.0);
    }
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    ((first..=last).map(|k| k as f64 * step).collect(), step)
}

pub fn tick_label(v: f64, step: f64) -> String {
    if step >= 1.0 {
        format!("{v:.0}")
    } else {
        let digits = (-step.log10()).ceil() as usize;
        format!("{v:.digits$}")
    }
}

/// Boundaries between consecutive coordinates, extended half a step at both
/// ends.
pub fn coordinate_edges(coords: &[f64]) -> Vec<f64> {
    let n = coords.len();
    if n == 1 {
        return vec![coords[0] - 0.5, coords[0] + 0.5];
    }
    let mut e = Vec::with_capacity(n + 1);
    e.push(coords[0] - (coords[1] - coords[0]) / 2.0);
    for w in coords.windows(2) {
        e.push((w[0] + w[1]) / 2.0);
    }
    e.push(coords[n - 1] + (coords[n - 1] - coords[n - 2]) / 2.0);
    e
}

/// Physical cell boundaries from coordinate-index cell edges.
pub fn cell_edges(coords: &[f64], index_edges: &[usize]) -> Vec<f64> {
    let e = coordinate_edges(coords);
    index_edges.iter().map(|&i| e[i]).collect()
}

pub struct Axes {
    pub x_label: String,
    pub y_label: String,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> i64 {
        let w = (WIDTH - LEFT - RIGHT) as f64;
        (LEFT as f64 + (x - self.x0) / (self.x1 - self.x0) * w).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let h = (HEIGHT - TOP - BOTTOM) as f64;
        (TOP as f64 + (self.y1 - y) / (self.y1 - self.y0) * h).round() as i64
    }
}

fn draw_axes(c: &mut Canvas, f: &Frame, axes: &Axes) {
    let (l, r) = (LEFT as i64, (WIDTH - RIGHT) as i64);
    let (t, b) = (TOP as i64, (HEIGHT - BOTTOM) as i64);
    c.line(l, t, r, t, BLACK);
    c.line(l, b, r, b, BLACK);
    c.line(l, t, l, b, BLACK);
    c.line(r, t, r, b, BLACK);
    let (xt, xs) = ticks(f.x0, f.x1);
    for v in xt {
        let x = f.px(v);
        c.line(x, b, x, b + 5, BLACK);
        let s = tick_label(v, xs);
        c.text(x - Canvas::text_width(&s) / 2, b + 9, &s, BLACK);
    }
    let (yt, ys) = ticks(f.y0, f.y1);
    for v in yt {
        let y = f.py(v);
        c.line(l - 5, y, l, y, BLACK);
        let s = tick_label(v, ys);
        c.text(l - 9 - Canvas::text_width(&s), y - 7, &s, BLACK);
    }
    let xl = &axes.x_label;
    c.text((l + r) / 2 - Canvas::text_width(xl) / 2, b + 36, xl, BLACK);
    c.text(4, 2, &axes.y_label, BLACK);
}

fn colorbar(c: &mut Canvas, lo: f64, hi: f64, map: impl Fn(f64) -> Rgb, t_of: impl Fn(f64) -> f64) {
    let x0 = (WIDTH - RIGHT + 16) as i64;
    let (t, b) = (TOP as i64, (HEIGHT - BOTTOM) as i64);
    for y in t..b {
        let v = hi - (y - t) as f64 / (b - t) as f64 * (hi - lo);
        c.fill(x0, y, x0 + 16, y + 1, map(t_of(v)));
    }
    c.line(x0, t, x0 + 16, t, BLACK);
    c.line(x0, b, x0 + 16, b, BLACK);
    c.line(x0, t, x0, b, BLACK);
    c.line(x0 + 16, t, x0 + 16, b, BLACK);
    let label = |v: f64| if v == 0.0 { "0".to_string() } else { format!("{v:+.1e}") };
    c.text(x0 - 8, t - 16, &label(hi), BLACK);
    c.text(x0 - 8, b + 4, &label(lo), BLACK);
    if lo < 0.0 {
        let ym = (t + b) / 2;
        c.line(x0 - 3, ym, x0, ym, BLACK);
        c.text(x0 + 20, ym - 7, "0", BLACK);
    }
}

/// Symmetric scale for signed values; never zero.
pub fn symmetric_scale(values: &[f64]) -> f64 {
    let m = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

/// Rectangular cells with `row_edges` on the vertical axis and `col_edges`
/// horizontal; `values` is row-major.
pub fn heatmap(
    row_edges: &[f64],
    col_edges: &[f64],
    values: &[f64],
    axes: &Axes,
    signed: bool,
) -> Canvas {
    let (rows, cols) = (row_edges.len() - 1, col_edges.len() - 1);
    assert_eq!(values.len(), rows * cols);
    let mut c = Canvas::new(WIDTH, HEIGHT);
    let f = Frame {
        x0: col_edges[0],
        x1: col_edges[cols],
        y0: row_edges[0],
        y1: row_edges[rows],
    };
    let scale = symmetric_scale(values);
    let color = |v: f64| if signed { diverging(v / scale) } else { sequential(v / scale) };
    for r in 0..rows {
        for k in 0..cols {
            let v = values[r * cols + k];
            c.fill(f.px(col_edges[k]), f.py(row_edges[r + 1]), f.px(col_edges[k + 1]), f.py(row_edges[r]), color(v));
        }
    }
    draw_axes(&mut c, &f, axes);
    if signed {
        colorbar(&mut c, -scale, scale, diverging, |v| v / scale);
    } else {
        colorbar(&mut c, 0.0, scale, sequential, |v| v / scale);
    }
    c
}

/// Signed bars over contiguous cells, coloured with the diverging map.
pub fn bars(edges: &[f64], values: &[f64], axes: &Axes) -> Canvas {
    assert_eq!(values.len() + 1, edges.len());
    let mut c = Canvas::new(WIDTH, HEIGHT);
    let scale = symmetric_scale(values);
    let f = Frame {
        x0: edges[0],
        x1: edges[values.len()],
        y0: -scale,
        y1: scale,
    };
    for (i, &v) in values.iter().enumerate() {
        c.fill(f.px(edges[i]), f.py(v.max(0.0)), f.px(edges[i + 1]), f.py(v.min(0.0)), diverging(v / scale));
    }
    c.line(LEFT as i64, f.py(0.0), (WIDTH - RIGHT) as i64, f.py(0.0), GREY);
    draw_axes(&mut c, &f, axes);
    colorbar(&mut c, -scale, scale, diverging, |v| v / scale);
    c
}

pub fn line_plot(x: &[f64], y: &[f64], axes: &Axes) -> Canvas {
    let mut c = Canvas::new(WIDTH, HEIGHT);
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let f = Frame {
        x0: x[0],
        x1: if x.len() > 1 { x[x.len() - 1] } else { x[0] + 1.0 },
        y0: lo,
        y1: hi,
    };
    for i in 1..x.len() {
        c.line(f.px(x[i - 1]), f.py(y[i - 1]), f.px(x[i]), f.py(y[i]), BLUE);
    }
    draw_axes(&mut c, &f, axes);
    c
}
