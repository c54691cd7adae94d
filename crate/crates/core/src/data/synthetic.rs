//! Deterministic synthetic handwriting, for tests and demos when no real
//! corpus is at hand.
//!
//! Each character maps to a fixed glyph of a few straight segments; every
//! segment is drawn as several equal collinear offsets, so collinear merging
//! has work to do. Writers differ by slant and scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{self_style, StyleDims};
use super::stroke::{DatasetRecord, StrokeSequence};

#[derive(Debug, Clone, Copy)]
pub struct WriterStyle {
    pub slant: f64,
    pub scale: f64,
}

/// Segments `(dx, dy)` of a character glyph in a unit box, derived from
/// the character code.
fn glyph(c: char) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(c as u64 * 7919 + 17);
    let n = rng.gen_range(2..=3);
    (0..n)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let len = rng.gen_range(0.6..1.2);
            [len * angle.cos(), len * angle.sin()]
        })
        .collect()
}

/// Offsets for `text` in the given style. `subdivide` equal pieces per
/// glyph segment; a pen-up move of `gap` follows each character.
pub fn synth_strokes(text: &str, style: WriterStyle, subdivide: usize) -> StrokeSequence {
    let subdivide = subdivide.max(1);
    let mut pts: Vec<(f64, f64, bool)> = Vec::new();
    for c in text.chars() {
        if c == ' ' {
            if let Some(last) = pts.last_mut() {
                last.2 = true;
            }
            pts.push((0.8 * style.scale, 0.0, false));
            continue;
        }
        let segs = glyph(c);
        for (si, s) in segs.iter().enumerate() {
            let dx = (s[0] + style.slant * s[1]) * style.scale;
            let dy = s[1] * style.scale;
            for k in 0..subdivide {
                let last = si + 1 == segs.len() && k + 1 == subdivide;
                pts.push((dx / subdivide as f64, dy / subdivide as f64, last));
            }
        }
        // Pen-up move to the next character cell.
        pts.push((0.9 * style.scale, 0.1 * style.scale, false));
    }
    if let Some(last) = pts.last_mut() {
        last.2 = true;
    }
    StrokeSequence::from_points(&pts).expect("finite synthetic offsets")
}

/// A record per `(text, writer)` pair, with a self-rendered style image.
pub fn synth_corpus(
    texts: &[&str],
    writers: &[WriterStyle],
    subdivide: usize,
    dims: StyleDims,
) -> Vec<DatasetRecord> {
    let mut out = Vec::new();
    for (wi, w) in writers.iter().enumerate() {
        for (ti, t) in texts.iter().enumerate() {
            let strokes = synth_strokes(t, *w, subdivide);
            out.push(DatasetRecord {
                id: format!("w{wi}-t{ti}"),
                style_image: self_style(&strokes, dims),
                strokes,
                text: (*t).to_string(),
                writer_id: format!("w{wi}"),
                style_path: None,
            });
        }
    }
    out
}

/// "Words" made of straight horizontal and vertical runs, each drawn as
/// many unit offsets: the case where merging should collapse most points.
pub fn straight_line_word(rng: &mut impl Rng, runs: usize) -> StrokeSequence {
    let mut pts = Vec::new();
    for r in 0..runs {
        let len = rng.gen_range(2..8);
        let dir = match rng.gen_range(0..4) {
            0 => [1.0, 0.0],
            1 => [0.0, 1.0],
            2 => [-1.0, 0.0],
            _ => [0.0, -1.0],
        };
        let step = rng.gen_range(0.5..2.0);
        for i in 0..len {
            let lift = i + 1 == len && (r % 2 == 1 || r + 1 == runs);
            pts.push((dir[0] * step, dir[1] * step, lift));
        }
    }
    StrokeSequence::from_points(&pts).expect("finite offsets")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_merge_friendly() {
        let s = WriterStyle { slant: 0.2, scale: 1.0 };
        let a = synth_strokes("abc", s, 3);
        assert_eq!(a, synth_strokes("abc", s, 3));
        let merged = crate::data::merge_collinear(&a, crate::data::DEFAULT_ANGLE_TOL);
        assert!(merged.len() < a.len());
        assert_eq!(*a.pen_lift().last().unwrap(), true);
    }
}
