use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::Polyline;
use crate::error::{Error, Result};

/// Row-major grayscale image, ink = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayRaster {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayRaster {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterOptions {
    /// Blank border in pixels of the final image.
    pub margin: usize,
    /// Draw at `factor` times the resolution, then box-average down.
    pub supersample: usize,
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self {
            margin: 1,
            supersample: 1,
        }
    }
}

/// Integer line from `a` to `b`, endpoints included.
fn draw_line(a: (i64, i64), b: (i64, i64), mut plot: impl FnMut(i64, i64)) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let dy = -(y1 - y0).abs();
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        plot(x0, y0);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Fits the polylines into `height x width` preserving aspect ratio and
/// draws 1-pixel lines. Row index grows with y. A single-point input is a
/// centered dot.
pub fn rasterize(
    lines: &[Polyline],
    height: usize,
    width: usize,
    opts: RasterOptions,
) -> Result<GrayRaster> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("raster dimensions must be positive".into()));
    }
    let f = opts.supersample.max(1);
    let (h, w) = (height * f, width * f);
    let margin = (opts.margin * f) as f64;
    let mut ink = vec![false; h * w];

    let pts: Vec<[f64; 2]> = lines.iter().flat_map(|l| l.points().iter().copied()).collect();
    if !pts.is_empty() {
        let min_x = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let max_x = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let max_y = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let (bw, bh) = (max_x - min_x, max_y - min_y);
        let avail_w = (w as f64 - 1.0 - 2.0 * margin).max(0.0);
        let avail_h = (h as f64 - 1.0 - 2.0 * margin).max(0.0);
        let scale = match (bw > 0.0, bh > 0.0) {
            (true, true) => (avail_w / bw).min(avail_h / bh),
            (true, false) => avail_w / bw,
            (false, true) => avail_h / bh,
            (false, false) => 0.0,
        };
        let off_x = margin + (avail_w - bw * scale) / 2.0;
        let off_y = margin + (avail_h - bh * scale) / 2.0;
        let to_px = |p: &[f64; 2]| -> (i64, i64) {
            (
                (off_x + (p[0] - min_x) * scale).round() as i64,
                (off_y + (p[1] - min_y) * scale).round() as i64,
            )
        };
        let mut plot = |x: i64, y: i64| {
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                ink[y as usize * w + x as usize] = true;
            }
        };
        for line in lines {
            let px: Vec<(i64, i64)> = line.points().iter().map(to_px).collect();
            match px.len() {
                0 => {}
                1 => plot(px[0].0, px[0].1),
                _ => {
                    for seg in px.windows(2) {
                        draw_line(seg[0], seg[1], &mut plot);
                    }
                }
            }
        }
    }

    let mut pixels = vec![0.0; height * width];
    let norm = (f * f) as f64;
    for r in 0..height {
        for c in 0..width {
            let mut count = 0usize;
            for dy in 0..f {
                for dx in 0..f {
                    if ink[(r * f + dy) * w + c * f + dx] {
                        count += 1;
                    }
                }
            }
            pixels[r * width + c] = count as f64 / norm;
        }
    }
    Ok(GrayRaster {
        height,
        width,
        pixels,
    })
}

/// Binary PGM (P5), ink drawn black on white.
pub fn write_pgm(raster: &GrayRaster, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = raster
        .pixels
        .iter()
        .map(|p| (255.0 * (1.0 - p.clamp(0.0, 1.0))).round() as u8)
        .collect();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    enc.write_image(
        &bytes,
        raster.width as u32,
        raster.height as u32,
        ExtendedColorType::L8,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn horizontal_line_inks_one_row() {
        let lines = [Polyline(vec![[0.0, 0.0], [5.0, 0.0]])];
        let r = rasterize(&lines, 8, 32, RasterOptions::default()).unwrap();
        let rows: BTreeSet<usize> = (0..8)
            .filter(|&row| (0..32).any(|c| r.get(row, c) > 0.0))
            .collect();
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn ink_count_translation_invariant() {
        let base = vec![
            Polyline(vec![[0.0, 0.0], [3.0, 2.0], [7.0, -1.0]]),
            Polyline(vec![[8.0, 0.0], [9.0, 3.0]]),
        ];
        let moved: Vec<Polyline> = base
            .iter()
            .map(|l| Polyline(l.0.iter().map(|p| [p[0] - 40.0, p[1] + 12.0]).collect()))
            .collect();
        let a = rasterize(&base, 32, 64, RasterOptions::default()).unwrap();
        let b = rasterize(&moved, 32, 64, RasterOptions::default()).unwrap();
        assert_eq!(a.ink_count(), b.ink_count());
        assert_eq!(a, b);
    }

    #[test]
    fn single_point_is_centered_dot() {
        let r = rasterize(&[Polyline(vec![[3.0, 3.0]])], 9, 9, RasterOptions::default()).unwrap();
        assert_eq!(r.ink_count(), 1);
        assert_eq!(r.get(4, 4), 1.0);
    }

    /// Exact-rational rounding of the line `y = y0 + (x - x0) * dy / dx`
    /// for x-major segments with odd `dx` (no rounding ties).
    fn oracle_line(a: (i64, i64), b: (i64, i64)) -> BTreeSet<(i64, i64)> {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        assert!(dx > 0 && dx % 2 == 1 && dy.abs() <= dx);
        (0..=dx)
            .map(|i| {
                let round = |n: i64| (2 * i * n + dx).div_euclid(2 * dx);
                let y = if dy >= 0 { round(dy) } else { -round(-dy) };
                (a.0 + i, a.1 + y)
            })
            .collect()
    }

    #[test]
    fn bresenham_matches_rounding_oracle() {
        for (a, b) in [((0, 0), (7, 7)), ((2, 1), (11, 5)), ((0, 9), (13, 2)), ((1, 1), (6, 1))] {
            let mut got = BTreeSet::new();
            draw_line(a, b, |x, y| {
                got.insert((x, y));
            });
            assert_eq!(got, oracle_line(a, b), "{a:?} -> {b:?}");
        }
    }

    #[test]
    fn supersampled_values_in_unit_interval() {
        let lines = [Polyline(vec![[0.0, 0.0], [10.0, 4.0]])];
        let opts = RasterOptions {
            margin: 1,
            supersample: 3,
        };
        let r = rasterize(&lines, 10, 20, opts).unwrap();
        assert!(r.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(r.pixels.iter().any(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn pgm_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let r = rasterize(&[Polyline(vec![[0.0, 0.0], [1.0, 1.0]])], 4, 6, RasterOptions::default())
            .unwrap();
        write_pgm(&r, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert!(rasterize(&[], 0, 4, RasterOptions::default()).is_err());
    }
}
