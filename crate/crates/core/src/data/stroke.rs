use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pen offsets paired with pen-lift flags.
///
/// `pen_lift[i] == true` means the pen is lifted after drawing offset `i`,
/// so the next offset is a pen-up move that starts a new run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StrokeSequence {
    offsets: Vec<[f64; 2]>,
    pen_lift: Vec<bool>,
}

impl StrokeSequence {
    pub fn new(offsets: Vec<[f64; 2]>, pen_lift: Vec<bool>) -> Result<Self> {
        if offsets.len() != pen_lift.len() {
            return Err(Error::Shape(format!(
                "{} offsets but {} pen flags",
                offsets.len(),
                pen_lift.len()
            )));
        }
        if offsets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stroke offset".into()));
        }
        Ok(Self { offsets, pen_lift })
    }

    /// Builds from `(dx, dy, lift)` triples.
    pub fn from_points(points: &[(f64, f64, bool)]) -> Result<Self> {
        Self::new(
            points.iter().map(|&(x, y, _)| [x, y]).collect(),
            points.iter().map(|&(_, _, l)| l).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[[f64; 2]] {
        &self.offsets
    }

    pub fn pen_lift(&self) -> &[bool] {
        &self.pen_lift
    }

    pub fn iter(&self) -> impl Iterator<Item = ([f64; 2], bool)> + '_ {
        self.offsets.iter().copied().zip(self.pen_lift.iter().copied())
    }

    /// Offsets flattened as `[dx0, dy0, dx1, dy1, ...]`.
    pub fn flat_offsets(&self) -> Vec<f64> {
        self.offsets.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64], pen_lift: Vec<bool>) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::Shape("odd number of offset components".into()));
        }
        Self::new(flat.chunks(2).map(|c| [c[0], c[1]]).collect(), pen_lift)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            offsets: self
                .offsets
                .iter()
                .map(|[x, y]| [x * factor, y * factor])
                .collect(),
            pen_lift: self.pen_lift.clone(),
        }
    }

    /// Absolute position after each offset, starting from the origin.
    pub fn cumulative(&self) -> Vec<[f64; 2]> {
        let mut pos = [0.0, 0.0];
        self.offsets
            .iter()
            .map(|o| {
                pos[0] += o[0];
                pos[1] += o[1];
                pos
            })
            .collect()
    }

    /// Population standard deviation of all offset components pooled.
    pub fn pooled_std(&self) -> f64 {
        let n = (self.offsets.len() * 2) as f64;
        if n == 0.0 {
            return 0.0;
        }
        let mean = self.offsets.iter().flatten().sum::<f64>() / n;
        let var = self
            .offsets
            .iter()
            .flatten()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n;
        var.sqrt()
    }

    /// Lengths (in points) of the pen-down runs, split after every lift.
    pub fn run_lengths(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = 0;
        for &lift in &self.pen_lift {
            current += 1;
            if lift {
                runs.push(current);
                current = 0;
            }
        }
        if current > 0 {
            runs.push(current);
        }
        runs
    }
}

/// Grayscale raster with values in `[0, 1]`; ink is 1, background 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl StyleImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "style image {height}x{width} given {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("style image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub strokes: StrokeSequence,
    pub text: String,
    pub writer_id: String,
    pub style_image: StyleImage,
    /// Where the style image came from, if it was loaded from disk.
    pub style_path: Option<String>,
}

impl DatasetRecord {
    pub fn validate(&self, max_height: usize, max_width: usize) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::Data(format!("record {}: empty text", self.id)));
        }
        if self.style_image.height() > max_height || self.style_image.width() > max_width {
            return Err(Error::Data(format!(
                "record {}: style image {}x{} exceeds {max_height}x{max_width}",
                self.id,
                self.style_image.height(),
                self.style_image.width()
            )));
        }
        Ok(())
    }
}
