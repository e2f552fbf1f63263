//! PCA-to-RGB embedding timelines, a between-state variance score and a
//! small deterministic RGB rasterizer with PNG output.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{tile_windows, Recording};
use crate::diff::Real;
use crate::error::{LayaError, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::probe::{embed_batch, Features};

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GREY: Rgb = [200, 200, 200];
pub const RED: Rgb = [220, 40, 40];

/// Plot colors cycled by series index.
pub const PALETTE: [Rgb; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Canvas {
            width,
            height,
            pixels: fill.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    /// Fills `[x0, x1) x [y0, y1)`, clipped.
    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0.max(0)..y1.min(self.height as i64) {
            for x in x0.max(0)..x1.min(self.width as i64) {
                self.set(x, y, c);
            }
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
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

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| LayaError::InvalidArgument(format!("png header: {e}")))?;
            writer
                .write_image_data(&self.pixels)
                .map_err(|e| LayaError::InvalidArgument(format!("png data: {e}")))?;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(|e| LayaError::io(path, e))
    }
}

/// Principal axes of row-major `n x d` data, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors, same order as `eigenvalues`.
    pub axes: Vec<Vec<f64>>,
}

pub fn pca(z: &[f64], n: usize, d: usize) -> Result<Pca> {
    if n == 0 || d == 0 || z.len() != n * d {
        return Err(LayaError::shape("pca", format!("{} values for {n} x {d}", z.len())));
    }
    let mut mean = vec![0.0; d];
    for row in z.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| z[i * d + j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Ok(Pca {
        mean,
        eigenvalues: order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect(),
        axes: order
            .iter()
            .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
            .collect(),
    })
}

/// Per-row colors from the top three principal components, each
/// min-max scaled to `[0, 1]` and signed so its skewness is
/// nonnegative. Missing components (rank < 3) are 0.5.
pub fn pca_rgb(z: &[f64], n: usize, d: usize) -> Result<Vec<[f64; 3]>> {
    if n < 4 {
        return Err(LayaError::InvalidArgument(format!("pca_rgb needs at least 4 rows, got {n}")));
    }
    let p = pca(z, n, d)?;
    let top = p.eigenvalues.first().copied().unwrap_or(0.0);
    let scale = p.mean.iter().chain(z).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut colors = vec![[0.5; 3]; n];
    for k in 0..3.min(d) {
        let lam = p.eigenvalues[k];
        if !(lam > 1e-10 * top) || lam.sqrt() < 1e-12 * scale {
            continue;
        }
        let mut s: Vec<f64> = z
            .chunks(d)
            .map(|row| row.iter().zip(&p.mean).zip(&p.axes[k]).map(|((v, m), a)| (v - m) * a).sum())
            .collect();
        let m3 = s.iter().map(|v| v * v * v).sum::<f64>() / n as f64;
        let flip = if m3.abs() > 1e-9 * lam.powf(1.5) {
            m3 < 0.0
        } else {
            // symmetric components: orient by the first clearly nonzero score
            s.iter().find(|v| v.abs() > 1e-9 * lam.sqrt()).is_some_and(|&v| v < 0.0)
        };
        if flip {
            s.iter_mut().for_each(|v| *v = -*v);
        }
        let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for (c, v) in colors.iter_mut().zip(&s) {
            c[k] = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        }
    }
    Ok(colors)
}

/// Between-state sum of squares over total sum of squares, pooled over
/// dimensions. Constant embeddings score 0.
pub fn state_shift_score(z: &[f64], n: usize, d: usize, labels: &[u32]) -> Result<f64> {
    if labels.len() != n || z.len() != n * d {
        return Err(LayaError::shape(
            "state_shift_score",
            format!("{} labels and {} values for {n} x {d}", labels.len(), z.len()),
        ));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l as usize] += 1);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(LayaError::InvalidArgument("state shift needs at least 2 states".into()));
    }
    let mut mean = vec![0.0; d];
    let mut group = vec![vec![0.0; d]; k];
    for (row, &l) in z.chunks(d).zip(labels) {
        for j in 0..d {
            mean[j] += row[j] / n as f64;
            group[l as usize][j] += row[j] / counts[l as usize] as f64;
        }
    }
    let total: f64 = z
        .chunks(d)
        .map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum();
    let between: f64 = (0..k)
        .map(|g| counts[g] as f64 * group[g].iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum();
    if total <= f64::MIN_POSITIVE {
        return Ok(0.0);
    }
    Ok((between / total).clamp(0.0, 1.0))
}

/// Full-pass patch embeddings of a recording tiled into consecutive
/// windows, with the label of each patch's centre sample. Trailing
/// samples that do not fill a window are dropped.
pub fn recording_patches<F: Real>(
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    recording: &Recording,
    window_seconds: f64,
    chunk: usize,
) -> Result<(Features, Option<Vec<u32>>)> {
    let batch = tile_windows(std::slice::from_ref(recording), window_seconds, window_seconds, cfg.patch_len)?;
    let (z, _) = embed_batch(store, cfg, &batch, chunk, true)?;
    let z = z.expect("patches kept");
    let p = cfg.patch_len;
    let labels = recording.state_labels.as_ref().map(|_| {
        (0..z.rows)
            .map(|i| recording.label_at_sample(i * p + p / 2).unwrap_or(0))
            .collect()
    });
    Ok((z, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineStyle {
    pub width: usize,
    pub height: usize,
    pub strip_height: usize,
    pub max_channels: usize,
}

impl Default for TimelineStyle {
    fn default() -> Self {
        TimelineStyle {
            width: 1200,
            height: 600,
            strip_height: 40,
            max_channels: 19,
        }
    }
}

/// Pixel column ranges of `n` strip segments across `width`.
pub fn strip_segments(width: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * width / n, (i + 1) * width / n)).collect()
}

const EVENT_BAR: usize = 8;
const MARGIN: usize = 4;

/// Channel traces on top, an embedding color strip with one segment per
/// patch below them, and event spans as red bars between the two.
pub fn render_timeline(
    recording: &Recording,
    patch_len: usize,
    colors: &[[f64; 3]],
    spans: &[(f64, f64)],
    style: &TimelineStyle,
) -> Result<Canvas> {
    let n = recording.samples() / patch_len;
    if colors.len() != n {
        return Err(LayaError::shape(
            "render_timeline",
            format!("{} colors for {n} patches", colors.len()),
        ));
    }
    let trace_h = style
        .height
        .checked_sub(style.strip_height + EVENT_BAR + 3 * MARGIN)
        .filter(|&h| h > 0)
        .ok_or_else(|| LayaError::config("viz.height", "too small for the strip and event bar"))?;
    if style.width < n.max(2) {
        return Err(LayaError::config(
            "viz.width",
            format!("{} px cannot hold {n} patch segments", style.width),
        ));
    }
    let w = style.width;
    let mut canvas = Canvas::new(w, style.height, WHITE);
    let shown = recording.channels.min(style.max_channels).max(1);
    let row_h = trace_h as f64 / shown as f64;
    let used = n * patch_len;

    for ch in 0..shown {
        let x = &recording.channel(ch)[..used];
        let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE) as f64;
        let mid = MARGIN as f64 + (ch as f64 + 0.5) * row_h;
        let amp = 0.45 * row_h / peak;
        let mut prev: Option<(i64, i64)> = None;
        for col in 0..w {
            let (a, b) = (col * used / w, ((col + 1) * used / w).max(col * used / w + 1).min(used));
            let (lo, hi) = x[a..b]
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let y_hi = (mid - hi as f64 * amp).round() as i64;
            let y_lo = (mid - lo as f64 * amp).round() as i64;
            let c = col as i64;
            canvas.line(c, y_hi, c, y_lo, BLACK);
            if let Some((pc, py)) = prev {
                canvas.line(pc, py, c, y_hi, BLACK);
            }
            prev = Some((c, y_lo));
        }
    }

    let bar_y = (2 * MARGIN + trace_h) as i64;
    let duration = used as f64 / recording.sample_rate;
    for &(s, e) in spans {
        let x0 = (s.max(0.0) / duration * w as f64).floor() as i64;
        let x1 = (e.min(duration) / duration * w as f64).ceil() as i64;
        canvas.fill_rect(x0, bar_y, x1, bar_y + EVENT_BAR as i64, RED);
    }

    let strip_y = bar_y + (EVENT_BAR + MARGIN) as i64;
    for ((x0, x1), c) in strip_segments(w, n).into_iter().zip(colors) {
        let rgb = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        canvas.fill_rect(x0 as i64, strip_y, x1 as i64, strip_y + style.strip_height as i64, rgb);
    }
    Ok(canvas)
}

/// One polyline per series over a shared x grid, with light horizontal
/// gridlines at tenths of the y range. Points with NaN are skipped.
pub fn plot_lines(series: &[Vec<f64>], y_range: (f64, f64), width: usize, height: usize) -> Result<Canvas> {
    let points = series.iter().map(Vec::len).max().unwrap_or(0);
    if points < 2 || width < 40 || height < 40 || !(y_range.1 > y_range.0) {
        return Err(LayaError::InvalidArgument("plot needs >= 2 points, a 40 px canvas and a valid y range".into()));
    }
    let mut canvas = Canvas::new(width, height, WHITE);
    let (left, right, top, bottom) = (30i64, width as i64 - 10, 10i64, height as i64 - 20);
    let to_y = |v: f64| {
        let t = ((v - y_range.0) / (y_range.1 - y_range.0)).clamp(0.0, 1.0);
        (bottom as f64 - t * (bottom - top) as f64).round() as i64
    };
    let to_x = |i: usize| left + ((right - left) as f64 * i as f64 / (points - 1) as f64).round() as i64;
    for g in 0..=10 {
        let y = to_y(y_range.0 + (y_range.1 - y_range.0) * g as f64 / 10.0);
        canvas.line(left, y, right, y, GREY);
    }
    for i in 0..points {
        let x = to_x(i);
        canvas.line(x, bottom, x, bottom + 4, BLACK);
    }
    canvas.line(left, top, left, bottom, BLACK);
    canvas.line(left, bottom, right, bottom, BLACK);
    for (si, s) in series.iter().enumerate() {
        let c = PALETTE[si % PALETTE.len()];
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = (to_x(i), to_y(v));
            canvas.fill_rect(p.0 - 2, p.1 - 2, p.0 + 3, p.1 + 3, c);
            if let Some(q) = prev {
                canvas.line(q.0, q.1, p.0, p.1, c);
                canvas.line(q.0, q.1 + 1, p.0, p.1 + 1, c);
            }
            prev = Some(p);
        }
        // legend swatch
        let ly = top + 4 + 10 * si as i64;
        canvas.fill_rect(right - 24, ly, right - 4, ly + 6, c);
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_embeddings_are_grey() {
        let c = pca_rgb(&[1.5; 10 * 4], 10, 4).unwrap();
        assert!(c.iter().all(|v| *v == [0.5; 3]));
    }

    #[test]
    fn two_clusters_give_a_red_step() {
        let (n, d) = (20, 3);
        let z: Vec<f64> = (0..n).flat_map(|i| if i < n / 2 { [1.0, 2.0, -1.0] } else { [-1.0, -2.0, 1.0] }).collect();
        let c = pca_rgb(&z, n, d).unwrap();
        let first = c[0][0];
        assert!(first == 0.0 || first == 1.0);
        assert!(c[..n / 2].iter().all(|v| v[0] == first));
        assert!(c[n / 2..].iter().all(|v| v[0] == 1.0 - first));
        assert!(c.iter().all(|v| v[1] == 0.5 && v[2] == 0.5));
    }

    #[test]
    fn perfect_separation_scores_one() {
        let z = [0.0, 0.0, 0.0, 5.0, 5.0, 5.0];
        assert!((state_shift_score(&z, 6, 1, &[0, 0, 0, 1, 1, 1]).unwrap() - 1.0).abs() < 1e-12);
        assert!(state_shift_score(&z, 6, 1, &[1; 6]).is_err());
    }

    #[test]
    fn png_roundtrip_header() {
        let mut c = Canvas::new(8, 4, WHITE);
        c.line(0, 0, 7, 3, RED);
        let bytes = c.encode_png().unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert_eq!(c.pixel(7, 3), RED);
    }
}
