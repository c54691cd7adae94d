//! Per-record scaling, outlier removal and collinear-offset merging.

use serde::{Deserialize, Serialize};

use super::stroke::{DatasetRecord, StrokeSequence};
use crate::error::{Error, Result};

/// Default merge tolerance: 5 degrees.
pub const DEFAULT_ANGLE_TOL: f64 = 5.0 * std::f64::consts::PI / 180.0;
pub const DEFAULT_OUTLIER_K: f64 = 15.0;

/// Divides the record's offsets by their pooled standard deviation.
/// Returns the record and the scale that was divided out.
pub fn normalize(record: &DatasetRecord) -> Result<(DatasetRecord, f64)> {
    if record.strokes.len() < 2 {
        return Err(Error::Degenerate(format!(
            "record {}: need at least 2 points, got {}",
            record.id,
            record.strokes.len()
        )));
    }
    let std = record.strokes.pooled_std();
    let max_abs = record
        .strokes
        .flat_offsets()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if !(std > 1e-12 * max_abs) || !std.is_finite() {
        return Err(Error::Degenerate(format!(
            "record {}: offsets have zero variance",
            record.id
        )));
    }
    let mut out = record.clone();
    out.strokes = record.strokes.scaled(1.0 / std);
    Ok((out, std))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NormalizationMode {
    /// Each record divided by its own pooled std.
    #[default]
    PerExample,
    /// Every record divided by the pooled std of the whole corpus.
    Corpus,
}

/// Normalizes a corpus. Degenerate records are skipped and reported.
/// The returned scale is the factor generation multiplies back in: the mean
/// per-record std, or the corpus std.
pub fn normalize_all(
    records: &[DatasetRecord],
    mode: NormalizationMode,
) -> (Vec<DatasetRecord>, f64, Vec<String>) {
    let mut rejected = Vec::new();
    match mode {
        NormalizationMode::PerExample => {
            let mut kept = Vec::new();
            let mut scales = Vec::new();
            for r in records {
                match normalize(r) {
                    Ok((n, s)) => {
                        kept.push(n);
                        scales.push(s);
                    }
                    Err(e) => rejected.push(e.to_string()),
                }
            }
            let scale = if scales.is_empty() {
                1.0
            } else {
                scales.iter().sum::<f64>() / scales.len() as f64
            };
            (kept, scale, rejected)
        }
        NormalizationMode::Corpus => {
            let all: Vec<f64> = records
                .iter()
                .flat_map(|r| r.strokes.flat_offsets())
                .collect();
            let n = all.len() as f64;
            let mean = all.iter().sum::<f64>() / n.max(1.0);
            let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1.0)).sqrt();
            if !(std > 0.0) {
                rejected.push("corpus offsets have zero variance".into());
                return (Vec::new(), 1.0, rejected);
            }
            let kept = records
                .iter()
                .map(|r| {
                    let mut o = r.clone();
                    o.strokes = r.strokes.scaled(1.0 / std);
                    o
                })
                .collect();
            (kept, std, rejected)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub index: usize,
    pub id: String,
    pub max_magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub mean: f64,
    pub std: f64,
    pub k: f64,
    pub threshold: f64,
    pub total: usize,
    pub dropped: Vec<DroppedRecord>,
}

impl DropReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "records: {}\ndropped: {}\nmagnitude mean: {:.6}\nmagnitude std: {:.6}\nk: {}\nthreshold: {:.6}\n",
            self.total,
            self.dropped.len(),
            self.mean,
            self.std,
            self.k,
            self.threshold
        );
        for d in &self.dropped {
            s.push_str(&format!(
                "drop {} id={} max_magnitude={:.6}\n",
                d.index, d.id, d.max_magnitude
            ));
        }
        s
    }
}

fn magnitude(o: &[f64; 2]) -> f64 {
    o[0].hypot(o[1])
}

/// Drops every record holding an offset longer than `mean + k * std`, with
/// the statistics taken over all offset magnitudes in `records`.
pub fn filter_outliers(
    records: &[DatasetRecord],
    k: f64,
) -> Result<(Vec<DatasetRecord>, DropReport)> {
    if records.is_empty() {
        return Err(Error::Data("cannot filter an empty dataset".into()));
    }
    if k.is_nan() {
        return Err(Error::InvalidArgument("outlier k is NaN".into()));
    }
    let mags: Vec<f64> = records
        .iter()
        .flat_map(|r| r.strokes.offsets().iter().map(magnitude))
        .collect();
    let n = mags.len().max(1) as f64;
    let mean = mags.iter().sum::<f64>() / n;
    let std = (mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = if k.is_infinite() { f64::INFINITY } else { mean + k * std };

    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = Vec::new();
    for (index, r) in records.iter().enumerate() {
        let max = r
            .strokes
            .offsets()
            .iter()
            .map(magnitude)
            .fold(0.0, f64::max);
        if max > threshold {
            dropped.push(DroppedRecord {
                index,
                id: r.id.clone(),
                max_magnitude: max,
            });
        } else {
            kept.push(r.clone());
        }
    }
    Ok((
        kept,
        DropReport {
            mean,
            std,
            k,
            threshold,
            total: records.len(),
            dropped,
        },
    ))
}

/// Angle between two vectors in `[0, pi]`; zero when either is zero.
fn angle_between(a: [f64; 2], b: [f64; 2]) -> f64 {
    let cross = a[0] * b[1] - a[1] * b[0];
    let dot = a[0] * b[0] + a[1] * b[1];
    if (a[0] == 0.0 && a[1] == 0.0) || (b[0] == 0.0 && b[1] == 0.0) {
        return 0.0;
    }
    cross.abs().atan2(dot)
}

fn merge_pass(strokes: &StrokeSequence, angle_tol: f64) -> StrokeSequence {
    let mut offsets: Vec<[f64; 2]> = Vec::with_capacity(strokes.len());
    let mut lifts: Vec<bool> = Vec::with_capacity(strokes.len());
    for (o, lift) in strokes.iter() {
        if let (Some(last), Some(last_lift)) = (offsets.last_mut(), lifts.last_mut()) {
            if !*last_lift && angle_between(*last, o) <= angle_tol {
                last[0] += o[0];
                last[1] += o[1];
                *last_lift = lift;
                continue;
            }
        }
        offsets.push(o);
        lifts.push(lift);
    }
    StrokeSequence::new(offsets, lifts).expect("merge keeps lengths paired")
}

/// Sums runs of consecutive pen-down offsets pointing within `angle_tol`
/// radians of each other. Repeats until nothing merges, so the result is a
/// fixed point and applying it again changes nothing.
pub fn merge_collinear(strokes: &StrokeSequence, angle_tol: f64) -> StrokeSequence {
    let mut current = merge_pass(strokes, angle_tol.max(0.0));
    loop {
        let next = merge_pass(&current, angle_tol.max(0.0));
        if next.len() == current.len() {
            return current;
        }
        current = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub angle_tol: f64,
    pub outlier_k: f64,
    pub mode: NormalizationMode,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            angle_tol: DEFAULT_ANGLE_TOL,
            outlier_k: DEFAULT_OUTLIER_K,
            mode: NormalizationMode::PerExample,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub records: Vec<DatasetRecord>,
    pub drop_report: DropReport,
    pub rejected: Vec<String>,
    /// Factor that maps normalized offsets back to input units.
    pub scale: f64,
    pub points_before: usize,
    pub points_after: usize,
}

/// normalize, then filter outliers, then merge collinear offsets.
pub fn prepare(records: &[DatasetRecord], opts: &PrepareOptions) -> Result<Prepared> {
    let (normalized, scale, rejected) = normalize_all(records, opts.mode);
    let (filtered, drop_report) = filter_outliers(&normalized, opts.outlier_k)?;
    let points_before = filtered.iter().map(|r| r.strokes.len()).sum();
    let merged: Vec<DatasetRecord> = filtered
        .into_iter()
        .map(|mut r| {
            r.strokes = merge_collinear(&r.strokes, opts.angle_tol);
            r
        })
        .collect();
    let points_after = merged.iter().map(|r| r.strokes.len()).sum();
    Ok(Prepared {
        records: merged,
        drop_report,
        rejected,
        scale,
        points_before,
        points_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stroke::StyleImage;
    use proptest::prelude::*;

    fn record(id: &str, points: &[(f64, f64, bool)]) -> DatasetRecord {
        DatasetRecord {
            id: id.into(),
            strokes: StrokeSequence::from_points(points).unwrap(),
            text: "a".into(),
            writer_id: "w".into(),
            style_image: StyleImage::blank(2, 2),
            style_path: None,
        }
    }

    #[test]
    fn normalize_hand_value() {
        let r = record("r", &[(1.0, 0.0, false), (-1.0, 0.0, true)]);
        let (n, s) = normalize(&r).unwrap();
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
        let o = n.strokes.offsets();
        assert!((o[0][0] - 2f64.sqrt()).abs() < 1e-12);
        assert!((o[1][0] + 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(o[0][1], 0.0);
        assert_eq!(n.strokes.pen_lift(), r.strokes.pen_lift());
    }

    #[test]
    fn normalize_rejects_constant_offsets() {
        let r = record("r", &[(0.7, 0.7, false), (0.7, 0.7, false), (0.7, 0.7, true)]);
        assert!(matches!(normalize(&r), Err(Error::Degenerate(_))));
        let short = record("s", &[(1.0, 2.0, false)]);
        assert!(normalize(&short).is_err());
    }

    #[test]
    fn filter_identity_cases() {
        let recs = vec![
            record("a", &[(1.0, 0.0, false), (0.0, 1.0, false)]),
            record("b", &[(50.0, 0.0, false), (0.0, 1.0, false)]),
        ];
        let (kept, rep) = filter_outliers(&recs, f64::INFINITY).unwrap();
        assert_eq!(kept, recs);
        assert!(rep.dropped.is_empty());

        let same = vec![
            record("a", &[(3.0, 4.0, false), (0.0, 5.0, false)]),
            record("b", &[(5.0, 0.0, false)]),
        ];
        let (kept, rep) = filter_outliers(&same, 15.0).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(rep.std, 0.0);
        assert!(filter_outliers(&[], 15.0).is_err());
    }

    #[test]
    fn merge_examples() {
        let s = StrokeSequence::from_points(&[(1.0, 0.0, false), (2.0, 0.0, false)]).unwrap();
        let m = merge_collinear(&s, 0.1);
        assert_eq!(m.offsets(), &[[3.0, 0.0]]);
        assert_eq!(m.pen_lift(), &[false]);

        let s = StrokeSequence::from_points(&[(1.0, 0.0, false), (0.0, 1.0, false)]).unwrap();
        assert_eq!(merge_collinear(&s, 0.1), s);
    }

    #[test]
    fn merge_never_crosses_a_lift() {
        let s = StrokeSequence::from_points(&[
            (1.0, 0.0, true),
            (1.0, 0.0, false),
            (1.0, 0.0, true),
        ])
        .unwrap();
        let m = merge_collinear(&s, 0.1);
        assert_eq!(m.offsets(), &[[1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(m.pen_lift(), &[true, true]);
    }

    fn run_endpoints(s: &StrokeSequence) -> Vec<[f64; 2]> {
        // Independent prefix sum: position at every lift plus the final one.
        let mut x = 0.0;
        let mut y = 0.0;
        let mut ends = Vec::new();
        for i in 0..s.len() {
            x += s.offsets()[i][0];
            y += s.offsets()[i][1];
            if s.pen_lift()[i] || i + 1 == s.len() {
                ends.push([x, y]);
            }
        }
        ends
    }

    fn arb_strokes() -> impl Strategy<Value = StrokeSequence> {
        prop::collection::vec(
            (-3.0f64..3.0, -3.0f64..3.0, prop::bool::weighted(0.15), 0usize..3),
            1..60,
        )
        .prop_map(|pts| {
            // Repeat some offsets to make merges likely.
            let mut v = Vec::new();
            for (x, y, l, rep) in pts {
                for _ in 0..rep {
                    v.push((x, y, false));
                }
                v.push((x, y, l));
            }
            StrokeSequence::from_points(&v).unwrap()
        })
    }

    proptest! {
        #[test]
        fn merge_preserves_run_endpoints(s in arb_strokes(), tol in 0.0f64..0.5) {
            let m = merge_collinear(&s, tol);
            let a = run_endpoints(&s);
            let b = run_endpoints(&m);
            prop_assert_eq!(a.len(), b.len());
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6);
            }
            prop_assert_eq!(s.pen_lift().iter().filter(|l| **l).count(),
                            m.pen_lift().iter().filter(|l| **l).count());
        }

        #[test]
        fn merge_is_idempotent(s in arb_strokes(), tol in 0.0f64..0.5) {
            let once = merge_collinear(&s, tol);
            let twice = merge_collinear(&once, tol);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn normalized_pooled_std_is_one(s in arb_strokes()) {
            prop_assume!(s.len() >= 2 && s.pooled_std() > 1e-9);
            let r = DatasetRecord { strokes: s, ..record("x", &[(0.0, 0.0, false)]) };
            let (n, _) = normalize(&r).unwrap();
            prop_assert!((n.strokes.pooled_std() - 1.0).abs() < 1e-6);
        }
    }
}
