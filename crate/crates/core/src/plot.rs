//! Minimal raster charts: training curves and paired histograms as PNG.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;

const MARGIN: usize = 24;
const AXIS: [f64; 3] = [0.2, 0.2, 0.2];
const GRID: [f64; 3] = [0.88, 0.88, 0.88];
const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

/// Distinct series colors, cycled.
pub const PALETTE: [[f64; 3]; 6] = [
    [0.12, 0.47, 0.71],
    [1.0, 0.5, 0.05],
    [0.17, 0.63, 0.17],
    [0.84, 0.15, 0.16],
    [0.58, 0.4, 0.74],
    [0.55, 0.34, 0.29],
];

/// A named polyline in data coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

struct Canvas {
    img: ImageBuffer,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Canvas {
    fn new(width: usize, height: usize, x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = pad(x);
        let (y0, y1) = pad(y);
        let mut c = Self {
            img: ImageBuffer::filled(width, height, BACKGROUND),
            x0,
            x1,
            y0,
            y1,
        };
        c.frame();
        c
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let (w, h) = self.img.dims();
        let pw = (w - 2 * MARGIN) as f64;
        let ph = (h - 2 * MARGIN) as f64;
        (
            MARGIN as f64 + (x - self.x0) / (self.x1 - self.x0) * pw,
            (h - MARGIN) as f64 - (y - self.y0) / (self.y1 - self.y0) * ph,
        )
    }

    fn put(&mut self, x: i64, y: i64, rgb: [f64; 3]) {
        let (w, h) = self.img.dims();
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            self.img.set(x as usize, y as usize, rgb);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), rgb: [f64; 3]) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = a.0 + t * (b.0 - a.0);
            let y = a.1 + t * (b.1 - a.1);
            self.put(x.round() as i64, y.round() as i64, rgb);
        }
    }

    fn rect(&mut self, a: (f64, f64), b: (f64, f64), rgb: [f64; 3]) {
        let (xa, xb) = (a.0.min(b.0).round() as i64, a.0.max(b.0).round() as i64);
        let (ya, yb) = (a.1.min(b.1).round() as i64, a.1.max(b.1).round() as i64);
        for y in ya..=yb {
            for x in xa..=xb {
                self.put(x, y, rgb);
            }
        }
    }

    fn frame(&mut self) {
        let (w, h) = self.img.dims();
        let (l, r) = (MARGIN as f64, (w - MARGIN) as f64);
        let (t, b) = (MARGIN as f64, (h - MARGIN) as f64);
        for k in 1..4 {
            let y = t + (b - t) * k as f64 / 4.0;
            self.line((l, y), (r, y), GRID);
        }
        self.line((l, b), (r, b), AXIS);
        self.line((l, t), (l, b), AXIS);
    }
}

fn check_size(width: usize, height: usize) -> Result<()> {
    if width < 4 * MARGIN || height < 4 * MARGIN {
        return Err(Error::Argument(format!(
            "plot must be at least {0}x{0} pixels",
            4 * MARGIN
        )));
    }
    Ok(())
}

/// Polylines sharing one pair of axes, with the y axis optionally logarithmic.
pub fn line_chart(series: &[Series], width: usize, height: usize, log_y: bool) -> Result<ImageBuffer> {
    check_size(width, height)?;
    let map_y = |y: f64| if log_y { y.max(1e-12).log10() } else { y };
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        let y = map_y(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Err(Error::Argument("nothing to plot".into()));
    }
    let mut c = Canvas::new(width, height, (x0, x1), (y0, y1));
    for (k, s) in series.iter().enumerate() {
        let rgb = PALETTE[k % PALETTE.len()];
        let mut prev = None;
        for &(x, y) in s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let p = c.px(x, map_y(y));
            if let Some(q) = prev {
                c.line(q, p, rgb);
            }
            prev = Some(p);
        }
        // legend swatch in the top margin
        let lx = (MARGIN + 14 * k) as f64;
        c.rect((lx, 6.0), (lx + 9.0, 14.0), rgb);
    }
    Ok(c.img)
}

/// Two overlaid histograms over a common range with `bins` bins.
pub fn paired_histogram(a: &[f64], b: &[f64], bins: usize, width: usize, height: usize) -> Result<ImageBuffer> {
    check_size(width, height)?;
    if bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    let all = a.iter().chain(b).copied().filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
    if lo > hi {
        return Err(Error::Argument("nothing to plot".into()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let count = |v: &[f64]| {
        let mut h = vec![0usize; bins];
        for x in v.iter().filter(|x| x.is_finite()) {
            h[(((x - lo) / span * bins as f64) as usize).min(bins - 1)] += 1;
        }
        h
    };
    let (ha, hb) = (count(a), count(b));
    let top = ha.iter().chain(&hb).copied().max().unwrap_or(1).max(1) as f64;
    let mut c = Canvas::new(width, height, (0.0, bins as f64), (0.0, top));
    for (k, h) in [(0, &ha), (1, &hb)] {
        let rgb = PALETTE[k];
        for (i, &n) in h.iter().enumerate() {
            if n == 0 {
                continue;
            }
            // each histogram takes one half of the bin so both stay visible
            let x = i as f64 + 0.5 * k as f64;
            c.rect(c.px(x + 0.05, 0.0), c.px(x + 0.45, n as f64), rgb);
        }
        let lx = (MARGIN + 14 * k) as f64;
        c.rect((lx, 6.0), (lx + 9.0, 14.0), rgb);
    }
    Ok(c.img)
}

pub fn save_line_chart(path: &Path, series: &[Series], log_y: bool) -> Result<()> {
    line_chart(series, 640, 400, log_y)?.save_png(path)
}

pub fn save_paired_histogram(path: &Path, a: &[f64], b: &[f64], bins: usize) -> Result<()> {
    paired_histogram(a, b, bins, 640, 400)?.save_png(path)
}

/// Moving average with a trailing window, for smoothing noisy loss curves.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
