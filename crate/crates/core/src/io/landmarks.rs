//! Landmark files: six lines, each either `x y z` or a vertex index.

use std::fmt::Write as _;
use std::path::Path;

use crate::evaluation::{LandmarkSource, LANDMARK_COUNT};
use crate::{Error, Result, Vec3};

pub fn parse_landmarks(text: &str, path: &Path) -> Result<LandmarkSource> {
    let lines: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .collect();
    if lines.len() != LANDMARK_COUNT {
        return Err(Error::format(path, format!("expected {LANDMARK_COUNT} landmark lines, found {}", lines.len())));
    }
    let widths: Vec<usize> = lines.iter().map(|l| l.split_whitespace().count()).collect();
    if widths.iter().all(|&w| w == 1) {
        let idx = lines
            .iter()
            .map(|l| {
                l.parse::<usize>()
                    .map_err(|_| Error::format(path, format!("bad vertex index {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(LandmarkSource::Vertices(idx));
    }
    if widths.iter().all(|&w| w == 3) {
        let pts = lines
            .iter()
            .map(|l| {
                let v: Vec<f64> = l
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::format(path, format!("bad coordinates {l:?}")))?;
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::format(path, format!("non-finite coordinates {l:?}")));
                }
                Ok(Vec3::new(v[0], v[1], v[2]))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(LandmarkSource::Points(pts));
    }
    Err(Error::format(path, "landmark lines must all be `x y z` or all be a single vertex index"))
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSource> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text, path)
}

pub fn landmarks_string(source: &LandmarkSource) -> String {
    let mut s = String::new();
    match source {
        LandmarkSource::Vertices(idx) => idx.iter().for_each(|i| {
            let _ = writeln!(s, "{i}");
        }),
        LandmarkSource::Points(pts) => pts.iter().for_each(|p| {
            let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
        }),
    }
    s
}

pub fn write_landmarks(path: &Path, source: &LandmarkSource) -> Result<()> {
    std::fs::write(path, landmarks_string(source)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("lm.txt")
    }

    #[test]
    fn both_forms_round_trip() {
        let idx = LandmarkSource::Vertices(vec![3, 1, 4, 1, 5, 9]);
        assert_eq!(parse_landmarks(&landmarks_string(&idx), p()).unwrap(), idx);
        let pts = LandmarkSource::Points((0..6).map(|k| Vec3::new(k as f64 / 3.0, -0.1, 1e-5)).collect());
        assert_eq!(parse_landmarks(&landmarks_string(&pts), p()).unwrap(), pts);
    }

    #[test]
    fn rejects_wrong_count_and_mixed_lines() {
        assert!(parse_landmarks("1\n2\n3\n", p()).is_err());
        assert!(parse_landmarks("1\n2\n3\n4\n5\n0 0 0\n", p()).is_err());
        assert!(parse_landmarks("1\n2\n3\n4\n5\n-6\n", p()).is_err());
        assert!(parse_landmarks("1 2\n2\n3\n4\n5\n6\n", p()).is_err());
    }
}
