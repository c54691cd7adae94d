//! Line-delimited record format, style-image loading and the IAM-OnDB
//! stroke-file adapter.
//!
//! Each line of a record file is one JSON object:
//!
//! ```text
//! {"text": "hello", "writer": "w01", "points": [[dx, dy, lift], ...], "style_image": "img/w01.png"}
//! ```
//!
//! `lift` is 0 or 1. `style_image` is resolved relative to the record file;
//! when it is absent the record's own strokes are rasterized instead. An
//! optional `id` field is carried through unchanged.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::stroke::{DatasetRecord, StrokeSequence, StyleImage};
use crate::error::{Error, Result};
use crate::render::{rasterize, to_polylines, RasterOptions};

pub const DEFAULT_STYLE_HEIGHT: usize = 64;
pub const DEFAULT_STYLE_WIDTH: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    #[serde(default)]
    pub writer: String,
    pub points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_image: Option<String>,
}

impl LineRecord {
    pub fn strokes(&self) -> Result<StrokeSequence> {
        let mut offsets = Vec::with_capacity(self.points.len());
        let mut lifts = Vec::with_capacity(self.points.len());
        for p in &self.points {
            let lift = match p[2] {
                v if v == 0.0 => false,
                v if v == 1.0 => true,
                v => return Err(Error::Data(format!("pen flag must be 0 or 1, got {v}"))),
            };
            offsets.push([p[0], p[1]]);
            lifts.push(lift);
        }
        StrokeSequence::new(offsets, lifts)
    }

    pub fn from_record(record: &DatasetRecord) -> Self {
        Self {
            id: Some(record.id.clone()),
            text: record.text.clone(),
            writer: record.writer_id.clone(),
            points: record
                .strokes
                .iter()
                .map(|(o, l)| [o[0], o[1], if l { 1.0 } else { 0.0 }])
                .collect(),
            style_image: record.style_path.clone(),
        }
    }
}

/// Target raster size for style images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleDims {
    pub height: usize,
    pub width: usize,
}

impl Default for StyleDims {
    fn default() -> Self {
        Self {
            height: DEFAULT_STYLE_HEIGHT,
            width: DEFAULT_STYLE_WIDTH,
        }
    }
}

/// Loads an image file as a style raster: grayscale, inverted so ink is 1,
/// resized to the target height keeping aspect ratio, then cropped or
/// zero-padded on the right to the target width.
pub fn load_style_image(path: &Path, dims: StyleDims) -> Result<StyleImage> {
    let img = image::open(path)?.to_luma8();
    Ok(fit_style_raster(&img, dims))
}

pub fn fit_style_raster(img: &image::GrayImage, dims: StyleDims) -> StyleImage {
    let (w, h) = img.dimensions();
    let scaled_w = ((w as f64) * dims.height as f64 / h.max(1) as f64)
        .round()
        .max(1.0) as u32;
    let resized = image::imageops::resize(img, scaled_w, dims.height as u32, FilterType::Triangle);
    let mut pixels = vec![0.0; dims.height * dims.width];
    for y in 0..dims.height {
        for x in 0..dims.width.min(scaled_w as usize) {
            let v = resized.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0;
            pixels[y * dims.width + x] = 1.0 - v;
        }
    }
    StyleImage::new(dims.height, dims.width, pixels).expect("values in [0, 1]")
}

/// The record's own strokes drawn into a style raster.
pub fn self_style(strokes: &StrokeSequence, dims: StyleDims) -> StyleImage {
    let raster = rasterize(&to_polylines(strokes), dims.height, dims.width, RasterOptions::default())
        .expect("positive dims");
    StyleImage::new(dims.height, dims.width, raster.pixels).expect("values in [0, 1]")
}

fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    match base {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path,
    }
}

pub fn parse_line(line: &str, index: usize, base: Option<&Path>, dims: StyleDims) -> Result<DatasetRecord> {
    let lr: LineRecord = serde_json::from_str(line)
        .map_err(|e| Error::Data(format!("record line {}: {e}", index + 1)))?;
    let strokes = lr.strokes()?;
    let (style_image, style_path) = match &lr.style_image {
        Some(p) if !p.is_empty() => {
            let full = resolve(base, p);
            (
                load_style_image(&full, dims)?,
                Some(full.to_string_lossy().into_owned()),
            )
        }
        _ => (self_style(&strokes, dims), None),
    };
    Ok(DatasetRecord {
        id: lr.id.unwrap_or_else(|| index.to_string()),
        strokes,
        text: lr.text,
        writer_id: lr.writer,
        style_image,
        style_path,
    })
}

pub fn read_records(path: &Path, dims: StyleDims) -> Result<Vec<DatasetRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i, base, dims)?);
    }
    Ok(out)
}

pub fn record_to_line(record: &DatasetRecord) -> Result<String> {
    Ok(serde_json::to_string(&LineRecord::from_record(record))?)
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", record_to_line(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Converts an IAM-OnDB `StrokeSet` XML document into offsets. The first
/// point is the origin; the last point of each `<Stroke>` carries the lift.
pub fn iam_strokes(xml: &str) -> Result<StrokeSequence> {
    let doc = roxmltree::Document::parse(xml)?;
    let mut points: Vec<(f64, f64, bool)> = Vec::new();
    for stroke in doc.descendants().filter(|n| n.has_tag_name("Stroke")) {
        let pts: Vec<roxmltree::Node> = stroke
            .children()
            .filter(|n| n.has_tag_name("Point"))
            .collect();
        for (i, p) in pts.iter().enumerate() {
            let get = |a: &str| -> Result<f64> {
                p.attribute(a)
                    .ok_or_else(|| Error::Data(format!("Point without {a}")))?
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("Point {a}: {e}")))
            };
            points.push((get("x")?, get("y")?, i + 1 == pts.len()));
        }
    }
    if points.is_empty() {
        return Err(Error::Data("no stroke points in document".into()));
    }
    let offsets: Vec<(f64, f64, bool)> = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0, w[1].1 - w[0].1, w[1].2))
        .collect();
    StrokeSequence::from_points(&offsets)
}
