use std::fmt::Write as _;
use std::path::Path;

use super::Polyline;
use crate::error::{Error, Result};

fn fmt4(v: f64) -> String {
    // `+ 0.0` turns -0.0 into 0.0.
    let s = format!("{:.4}", v + 0.0);
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

/// SVG 1.1 document with one `<path>` per run (a `<circle>` for single-point
/// runs). The y axis is flipped so positive y points up, and coordinates are
/// written relative to the bounding-box corner, so translating the input
/// leaves the output unchanged.
pub fn svg_string(lines: &[Polyline], stroke_width: f64) -> Result<String> {
    if lines.is_empty() || lines.iter().all(|l| l.is_empty()) {
        return Err(Error::InvalidArgument("nothing to render".into()));
    }
    let flipped: Vec<Vec<[f64; 2]>> = lines
        .iter()
        .map(|l| l.points().iter().map(|p| [p[0], -p[1]]).collect())
        .collect();
    let all = flipped.iter().flatten();
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in all {
        min_x = min_x.min(p[0]);
        min_y = min_y.min(p[1]);
        max_x = max_x.max(p[0]);
        max_y = max_y.max(p[1]);
    }
    let w = max_x - min_x;
    let h = max_y - min_y;
    let extent = w.max(h);
    let margin = if extent > 0.0 { 0.05 * extent } else { 1.0 };

    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"{} {} {} {}\">",
        fmt4(-margin),
        fmt4(-margin),
        fmt4(w + 2.0 * margin),
        fmt4(h + 2.0 * margin)
    );
    for line in &flipped {
        match line.len() {
            0 => {}
            1 => {
                let _ = writeln!(
                    s,
                    "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"black\"/>",
                    fmt4(line[0][0] - min_x),
                    fmt4(line[0][1] - min_y),
                    fmt4(stroke_width / 2.0)
                );
            }
            _ => {
                let mut d = String::new();
                for (i, p) in line.iter().enumerate() {
                    if i > 0 {
                        d.push(' ');
                    }
                    d.push_str(if i == 0 { "M " } else { "L " });
                    let _ = write!(d, "{} {}", fmt4(p[0] - min_x), fmt4(p[1] - min_y));
                }
                let _ = writeln!(
                    s,
                    "<path d=\"{d}\" fill=\"none\" stroke=\"black\" stroke-width=\"{}\" stroke-linecap=\"round\" stroke-linejoin=\"round\"/>",
                    fmt4(stroke_width)
                );
            }
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_svg(lines: &[Polyline], path: &Path, stroke_width: f64) -> Result<()> {
    let s = svg_string(lines, stroke_width)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLDEN_HLINE: &str = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"-0.5000 -0.5000 11.0000 1.0000\">\n\
<path d=\"M 0.0000 0.0000 L 4.0000 0.0000 L 10.0000 0.0000\" fill=\"none\" stroke=\"black\" stroke-width=\"0.5000\" stroke-linecap=\"round\" stroke-linejoin=\"round\"/>\n\
</svg>\n";

    #[test]
    fn horizontal_line_golden() {
        let lines = [Polyline(vec![[0.0, 0.0], [4.0, 0.0], [10.0, 0.0]])];
        let s = svg_string(&lines, 0.5).unwrap();
        assert_eq!(s, GOLDEN_HLINE);
        assert_eq!(s.matches("<path").count(), 1);
    }

    #[test]
    fn dots_for_single_points() {
        let lines = [
            Polyline(vec![[0.0, 0.0], [1.0, 1.0]]),
            Polyline(vec![[3.0, 0.5]]),
        ];
        let s = svg_string(&lines, 0.2).unwrap();
        assert_eq!(s.matches("<path").count(), 1);
        assert_eq!(s.matches("<circle").count(), 1);
    }

    fn parse_viewbox(s: &str) -> [f64; 4] {
        let start = s.find("viewBox=\"").unwrap() + 9;
        let end = start + s[start..].find('"').unwrap();
        let v: Vec<f64> = s[start..end].split(' ').map(|x| x.parse().unwrap()).collect();
        [v[0], v[1], v[2], v[3]]
    }

    fn parse_points(s: &str) -> Vec<[f64; 2]> {
        let mut pts = Vec::new();
        for chunk in s.split("d=\"").skip(1) {
            let d = &chunk[..chunk.find('"').unwrap()];
            let nums: Vec<f64> = d
                .split(' ')
                .filter(|t| *t != "M" && *t != "L")
                .map(|t| t.parse().unwrap())
                .collect();
            pts.extend(nums.chunks(2).map(|c| [c[0], c[1]]));
        }
        pts
    }

    #[test]
    fn viewbox_contains_all_points() {
        let lines = [
            Polyline(vec![[0.0, 0.0], [3.0, -2.0], [5.5, 1.25]]),
            Polyline(vec![[7.0, 4.0], [6.0, 3.0]]),
        ];
        let s = svg_string(&lines, 0.3).unwrap();
        let [x, y, w, h] = parse_viewbox(&s);
        for p in parse_points(&s) {
            assert!(p[0] >= x && p[0] <= x + w && p[1] >= y && p[1] <= y + h);
        }
    }

    #[test]
    fn translation_invariant() {
        let base = vec![
            Polyline(vec![[0.0, 0.0], [3.0, -2.0], [5.5, 1.25]]),
            Polyline(vec![[7.0, 4.0]]),
        ];
        let moved: Vec<Polyline> = base
            .iter()
            .map(|l| Polyline(l.0.iter().map(|p| [p[0] + 17.0, p[1] - 5.0]).collect()))
            .collect();
        assert_eq!(svg_string(&base, 1.0).unwrap(), svg_string(&moved, 1.0).unwrap());
    }

    #[test]
    fn empty_input_rejected() {
        assert!(svg_string(&[], 1.0).is_err());
    }
}
