//! WIDER FACE-style box lists and FDDB-style ellipse lists.
//!
//! WIDER blocks: an image path line, a count line, then `count` lines of
//! `x y w h` followed by integer attribute flags. A count of 0 is followed by
//! one all-zero placeholder line.
//!
//! FDDB blocks: an image path line, a count line, then `count` lines of
//! `major_radius minor_radius angle center_x center_y 1` (angle in radians,
//! major axis along x at angle 0).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub major: f64,
    pub minor: f64,
    pub angle: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Ellipse {
    /// Axis-aligned bounding box of the rotated ellipse.
    pub fn bounding_box(&self) -> BBox {
        let (s, c) = self.angle.sin_cos();
        let hw = ((self.major * c).powi(2) + (self.minor * s).powi(2)).sqrt();
        let hh = ((self.major * s).powi(2) + (self.minor * c).powi(2)).sqrt();
        BBox {
            x1: self.cx - hw,
            y1: self.cy - hh,
            x2: self.cx + hw,
            y2: self.cy + hh,
        }
    }

    /// Point at parameter `t` on the boundary.
    pub fn point(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (self.major * t.cos(), self.minor * t.sin());
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationRecord {
    pub image: String,
    pub boxes: Vec<BBox>,
    /// WIDER attribute flags per box, verbatim.
    pub attributes: Vec<Vec<i64>>,
    /// Source ellipses for FDDB records, parallel to `boxes`.
    pub ellipses: Vec<Ellipse>,
}

struct Lines<'a> {
    name: &'a str,
    iter: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, name: &'a str) -> Self {
        Lines {
            name,
            iter: text.lines().enumerate().peekable(),
            last: 0,
        }
    }

    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.name.to_string(),
            line,
            message: message.into(),
        }
    }

    fn skip_blank(&mut self) {
        while matches!(self.iter.peek(), Some((_, l)) if l.trim().is_empty()) {
            self.iter.next();
        }
    }

    /// Next non-blank line with its 1-based number.
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.skip_blank();
        match self.iter.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l.trim()))
            }
            None => Err(self.err(self.last + 1, format!("unexpected end of input, expected {what}"))),
        }
    }

    fn peek_numeric(&mut self) -> bool {
        self.skip_blank();
        matches!(self.iter.peek(), Some((_, l)) if l.split_whitespace().all(|t| t.parse::<f64>().is_ok()))
    }

    fn done(&mut self) -> bool {
        self.skip_blank();
        self.iter.peek().is_none()
    }

    fn count(&mut self) -> Result<usize> {
        let (ln, l) = self.next("a box count")?;
        l.parse().map_err(|_| self.err(ln, format!("expected a box count, found `{l}`")))
    }

    fn numbers(&self, ln: usize, l: &str, min: usize) -> Result<Vec<f64>> {
        let v = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| self.err(ln, format!("`{t}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() < min {
            return Err(self.err(ln, format!("expected at least {min} values, found {}", v.len())));
        }
        Ok(v)
    }
}

pub fn parse_wider(text: &str, source_name: &str) -> Result<Vec<AnnotationRecord>> {
    let mut lines = Lines::new(text, source_name);
    let mut out = Vec::new();
    while !lines.done() {
        let (_, path) = lines.next("an image path")?;
        let count = lines.count()?;
        let mut rec = AnnotationRecord {
            image: path.to_string(),
            ..Default::default()
        };
        for _ in 0..count {
            let (ln, l) = lines.next("a box line")?;
            let v = lines.numbers(ln, l, 4)?;
            let (x, y, w, h) = (v[0], v[1], v[2], v[3]);
            if w < 0.0 || h < 0.0 {
                return Err(lines.err(ln, "negative box size"));
            }
            rec.boxes.push(BBox {
                x1: x,
                y1: y,
                x2: x + w,
                y2: y + h,
            });
            let attrs = v[4..]
                .iter()
                .map(|a| {
                    if a.fract() == 0.0 {
                        Ok(*a as i64)
                    } else {
                        Err(lines.err(ln, format!("attribute `{a}` is not an integer")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rec.attributes.push(attrs);
        }
        if count == 0 && lines.peek_numeric() {
            lines.next("placeholder")?;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_wider(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\n{}", r.image, r.boxes.len());
        if r.boxes.is_empty() {
            out.push_str("0 0 0 0 0 0 0 0 0 0\n");
        }
        for (i, b) in r.boxes.iter().enumerate() {
            let _ = write!(out, "{} {} {} {}", b.x1, b.y1, b.width(), b.height());
            for a in r.attributes.get(i).into_iter().flatten() {
                let _ = write!(out, " {a}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn parse_fddb(text: &str, source_name: &str) -> Result<Vec<AnnotationRecord>> {
    let mut lines = Lines::new(text, source_name);
    let mut out = Vec::new();
    while !lines.done() {
        let (_, path) = lines.next("an image path")?;
        let count = lines.count()?;
        let mut rec = AnnotationRecord {
            image: path.to_string(),
            ..Default::default()
        };
        for _ in 0..count {
            let (ln, l) = lines.next("an ellipse line")?;
            let v = lines.numbers(ln, l, 5)?;
            if v[0] < 0.0 || v[1] < 0.0 {
                return Err(lines.err(ln, "negative ellipse radius"));
            }
            let e = Ellipse {
                major: v[0],
                minor: v[1],
                angle: v[2],
                cx: v[3],
                cy: v[4],
            };
            rec.boxes.push(e.bounding_box());
            rec.ellipses.push(e);
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_fddb(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\n{}", r.image, r.ellipses.len());
        for e in &r.ellipses {
            let _ = writeln!(out, "{} {} {} {} {}  1", e.major, e.minor, e.angle, e.cx, e.cy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;

    #[test]
    fn wider_single_block() {
        let recs = parse_wider("img.jpg\n1\n0 0 10 10 0 0 0 0 0 0\n", "t").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].image, "img.jpg");
        assert_eq!(recs[0].boxes, vec![BBox::new(0., 0., 10., 10.).unwrap()]);
        assert_eq!(recs[0].attributes, vec![vec![0; 6]]);
    }

    #[test]
    fn wider_empty_block_with_placeholder() {
        let text = "a.jpg\n0\n0 0 0 0 0 0 0 0 0 0\nb.jpg\n1\n5 6 7 8 1 0 0 0 0 0\n";
        let recs = parse_wider(text, "t").unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[0].boxes.is_empty());
        assert_eq!(recs[1].boxes[0], BBox::new(5., 6., 12., 14.).unwrap());
        assert_eq!(recs[1].attributes[0], vec![1, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn wider_truncated_block_reports_line() {
        let err = parse_wider("a.jpg\n2\n1 2 3 4 0 0 0 0 0 0\n", "wider.txt").unwrap_err();
        match err {
            Error::Parse { line, source_name, .. } => {
                assert_eq!(source_name, "wider.txt");
                assert_eq!(line, 4);
            }
            e => panic!("{e}"),
        }
        let err = parse_wider("a.jpg\ntwo\n", "w").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_wider("a.jpg\n1\n1 2 x 4\n", "w").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn wider_round_trip() {
        let text = "x/a.jpg\n2\n449 330 122 149 0 0 0 0 0 0\n1 2 3 4 2 1 0 1 0 0\ny/b.jpg\n0\n0 0 0 0 0 0 0 0 0 0\n";
        let recs = parse_wider(text, "t").unwrap();
        assert_eq!(write_wider(&recs), text);
        assert_eq!(parse_wider(&write_wider(&recs), "t").unwrap(), recs);
    }

    #[test]
    fn fddb_axis_aligned() {
        let recs = parse_fddb("img\n1\n10 5 0 50 50  1\n", "f").unwrap();
        assert_eq!(recs[0].boxes[0], BBox::new(40., 45., 60., 55.).unwrap());
    }

    #[test]
    fn fddb_rotation_swaps_extents() {
        let e = Ellipse {
            major: 10.0,
            minor: 5.0,
            angle: FRAC_PI_2,
            cx: 50.0,
            cy: 50.0,
        };
        let b = e.bounding_box();
        assert!((b.width() - 10.0).abs() < 1e-12 && (b.height() - 20.0).abs() < 1e-12);
        let circle = |angle| Ellipse { major: 7.0, minor: 7.0, angle, cx: 1.0, cy: 2.0 }.bounding_box();
        for a in [0.0, 0.3, 1.2, 2.9] {
            let (c0, c) = (circle(0.0), circle(a));
            for (p, q) in c0.to_array().iter().zip(c.to_array()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fddb_errors_have_line_numbers() {
        let err = parse_fddb("img\n1\n10 5 0 50\n", "f").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = parse_fddb("img\n2\n10 5 0 50 50 1\n", "f").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }));
    }
}
