use crate::data::StrokeSequence;

/// Absolute points of one pen-down run.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline(pub Vec<[f64; 2]>);

impl Polyline {
    pub fn points(&self) -> &[[f64; 2]] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Splits the cumulative path into pen-down runs. The pen starts at the
/// origin, which opens the first run; every lift closes the current run and
/// the next point opens a new one.
pub fn to_polylines(strokes: &StrokeSequence) -> Vec<Polyline> {
    let mut lines = Vec::new();
    let mut current = vec![[0.0, 0.0]];
    let mut pos = [0.0f64, 0.0f64];
    for (o, lift) in strokes.iter() {
        pos = [pos[0] + o[0], pos[1] + o[1]];
        current.push(pos);
        if lift {
            lines.push(Polyline(std::mem::take(&mut current)));
        }
    }
    if !current.is_empty() {
        lines.push(Polyline(current));
    }
    lines
}

/// Inverse of [`to_polylines`] on the offsets: differences of consecutive
/// points across all runs, with the origin as the first point.
pub fn polylines_to_offsets(lines: &[Polyline]) -> Vec<[f64; 2]> {
    let mut prev: Option<[f64; 2]> = None;
    let mut out = Vec::new();
    for p in lines.iter().flat_map(|l| l.0.iter()) {
        if let Some(q) = prev {
            out.push([p[0] - q[0], p[1] - q[1]]);
        }
        prev = Some(*p);
    }
    out
}
