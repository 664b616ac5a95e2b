//! PLY meshes. Output is binary little-endian with double-precision
//! positions and an optional per-vertex `quality` scalar. Input accepts
//! `ascii` and `binary_little_endian`.

use std::path::Path;

use crate::geometry::Mesh;
use crate::{Error, Result, Vec3};

pub fn ply_bytes(mesh: &Mesh, quality: Option<&[f64]>) -> Result<Vec<u8>> {
    if let Some(q) = quality {
        if q.len() != mesh.positions.len() {
            return Err(Error::SizeMismatch {
                expected: mesh.positions.len(),
                actual: q.len(),
            });
        }
    }
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        mesh.positions.len()
    );
    if quality.is_some() {
        header.push_str("property double quality\n");
    }
    header.push_str(&format!(
        "element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.faces.len()
    ));
    let mut out = header.into_bytes();
    for (j, p) in mesh.positions.iter().enumerate() {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(q) = quality {
            out.extend_from_slice(&q[j].to_le_bytes());
        }
    }
    for f in &mesh.faces {
        out.push(3);
        for &v in f {
            out.extend_from_slice(&(v as i32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_ply(path: &Path, mesh: &Mesh, quality: Option<&[f64]>) -> Result<()> {
    std::fs::write(path, ply_bytes(mesh, quality)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Scalar stream over an element body.
trait Source {
    fn scalar(&mut self, t: Scalar) -> Option<f64>;
}

struct Binary<'a> {
    bytes: &'a [u8],
}

impl Source for Binary<'_> {
    fn scalar(&mut self, t: Scalar) -> Option<f64> {
        let n = t.size();
        if self.bytes.len() < n {
            return None;
        }
        let v = t.decode(&self.bytes[..n]);
        self.bytes = &self.bytes[n..];
        Some(v)
    }
}

struct Ascii<'a> {
    tokens: std::str::SplitWhitespace<'a>,
}

impl Source for Ascii<'_> {
    fn scalar(&mut self, _: Scalar) -> Option<f64> {
        self.tokens.next()?.parse().ok()
    }
}

fn read_elements(elements: &[Element], src: &mut dyn Source, path: &Path) -> Result<Mesh> {
    let truncated = || Error::format(path, "truncated or malformed element data");
    let mut positions = Vec::new();
    let mut faces = Vec::new();
    for el in elements {
        for _ in 0..el.count {
            let mut xyz = [f64::NAN; 3];
            let mut indices: Vec<f64> = Vec::new();
            for prop in &el.properties {
                match prop {
                    Property::Scalar(name, t) => {
                        let v = src.scalar(*t).ok_or_else(truncated)?;
                        if el.name == "vertex" {
                            match name.as_str() {
                                "x" => xyz[0] = v,
                                "y" => xyz[1] = v,
                                "z" => xyz[2] = v,
                                _ => {}
                            }
                        }
                    }
                    Property::List(name, count_t, item_t) => {
                        let count = src.scalar(*count_t).ok_or_else(truncated)?;
                        if !(count >= 0.0 && count <= 1e6) {
                            return Err(truncated());
                        }
                        let items = (0..count as usize)
                            .map(|_| src.scalar(*item_t).ok_or_else(truncated))
                            .collect::<Result<Vec<_>>>()?;
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            indices = items;
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => {
                    if xyz.iter().any(|v| v.is_nan()) {
                        return Err(Error::format(path, "vertex lacks x, y or z"));
                    }
                    positions.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                }
                "face" => {
                    if indices.len() < 3 || indices.iter().any(|&i| i < 0.0) {
                        return Err(Error::format(path, "face needs at least 3 non-negative indices"));
                    }
                    for k in 1..indices.len() - 1 {
                        faces.push([indices[0] as usize, indices[k] as usize, indices[k + 1] as usize]);
                    }
                }
                _ => {}
            }
        }
    }
    Mesh::new(positions, faces).map_err(|e| Error::format(path, e.to_string()))
}

/// Parses a triangle mesh; polygons are fan-triangulated and other
/// properties and elements are skipped.
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<Mesh> {
    let end = b"end_header";
    let pos = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let mut body_start = pos + end.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(Error::format(path, "missing ply magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", fmt, _] => format = Some(fmt.to_string()),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::format(path, format!("bad element count {count:?}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", c, i, name] => {
                let (Some(c), Some(i)) = (Scalar::parse(c), Scalar::parse(i)) else {
                    return Err(Error::format(path, format!("unknown list types in {line:?}")));
                };
                elements
                    .last_mut()
                    .ok_or_else(|| Error::format(path, "property before element"))?
                    .properties
                    .push(Property::List(name.to_string(), c, i));
            }
            ["property", t, name] => {
                let t = Scalar::parse(t).ok_or_else(|| Error::format(path, format!("unknown type in {line:?}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::format(path, "property before element"))?
                    .properties
                    .push(Property::Scalar(name.to_string(), t));
            }
            [] | ["comment", ..] | ["obj_info", ..] => {}
            _ => return Err(Error::format(path, format!("unrecognized header line {line:?}"))),
        }
    }
    let body = &bytes[body_start..];
    match format.as_deref() {
        Some("binary_little_endian") => read_elements(&elements, &mut Binary { bytes: body }, path),
        Some("ascii") => {
            let text = std::str::from_utf8(body).map_err(|_| Error::format(path, "ascii body is not UTF-8"))?;
            read_elements(
                &elements,
                &mut Ascii {
                    tokens: text.split_whitespace(),
                },
                path,
            )
        }
        Some(other) => Err(Error::format(path, format!("unsupported PLY format {other:?}"))),
        None => Err(Error::format(path, "missing format line")),
    }
}

pub fn read_ply(path: &Path) -> Result<Mesh> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("t.ply")
    }

    fn tetra() -> Mesh {
        Mesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0 / 3.0, 0.0, 0.0),
                Vec3::new(0.0, 1e-300, 0.0),
                Vec3::new(0.0, 0.0, -7.25),
            ],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let m = tetra();
        let bytes = ply_bytes(&m, Some(&[0.0, 1.0, 2.0, 3.5])).unwrap();
        let back = parse_ply(&bytes, p()).unwrap();
        assert_eq!(back.positions, m.positions);
        assert_eq!(back.faces, m.faces);
    }

    #[test]
    fn quality_must_match_vertex_count() {
        assert!(ply_bytes(&tetra(), Some(&[1.0])).is_err());
    }

    #[test]
    fn reads_ascii_with_extra_properties_and_quads() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255\n1 0 0 0\n1 1 0 0\n0 1 0 0\n4 0 1 2 3\n";
        let m = parse_ply(text.as_bytes(), p()).unwrap();
        assert_eq!(m.positions.len(), 4);
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let bytes = ply_bytes(&tetra(), None).unwrap();
        assert!(matches!(parse_ply(&bytes[..bytes.len() - 2], p()), Err(Error::Format { .. })));
        assert!(parse_ply(b"not a ply", p()).is_err());
        let be = String::from_utf8_lossy(&bytes).replace("binary_little_endian", "binary_big_endian");
        assert!(parse_ply(be.as_bytes(), p()).is_err());
    }
}
