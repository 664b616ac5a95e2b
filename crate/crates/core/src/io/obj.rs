//! Wavefront OBJ: template loading (positions, UVs, triangles with a
//! one-to-one vertex/UV pairing) and mesh writing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::geometry::{Mesh, TemplateMesh};
use crate::{Error, Result, Vec2, Vec3};

struct Corner {
    v: usize,
    vt: Option<usize>,
}

struct RawObj {
    positions: Vec<Vec3>,
    uvs: Vec<Vec2>,
    faces: Vec<Vec<Corner>>,
}

/// Resolves a 1-based (or negative, relative) OBJ index against `count`.
fn resolve(token: &str, count: usize, what: &str, line: usize, path: &Path) -> Result<usize> {
    let i: i64 = token
        .parse()
        .map_err(|_| Error::format(path, format!("line {line}: bad {what} index {token:?}")))?;
    let idx = if i > 0 { i - 1 } else { count as i64 + i };
    if i == 0 || idx < 0 || idx >= count as i64 {
        return Err(Error::format(path, format!("line {line}: {what} index {i} out of range (have {count})")));
    }
    Ok(idx as usize)
}

fn numbers<const N: usize>(fields: &[&str], line: usize, path: &Path) -> Result<[f64; N]> {
    if fields.len() < N {
        return Err(Error::format(path, format!("line {line}: expected {N} numbers")));
    }
    let mut out = [0.0f64; N];
    for (k, f) in fields.iter().take(N).enumerate() {
        out[k] = f
            .parse()
            .map_err(|_| Error::format(path, format!("line {line}: bad number {f:?}")))?;
        if !out[k].is_finite() {
            return Err(Error::format(path, format!("line {line}: non-finite value {f:?}")));
        }
    }
    Ok(out)
}

fn parse(text: &str, path: &Path) -> Result<RawObj> {
    let mut raw = RawObj {
        positions: Vec::new(),
        uvs: Vec::new(),
        faces: Vec::new(),
    };
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.split('#').next().unwrap_or("");
        let mut fields = line.split_whitespace();
        let Some(tag) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        match tag {
            "v" => {
                let [x, y, z] = numbers::<3>(&rest, line_no, path)?;
                raw.positions.push(Vec3::new(x, y, z));
            }
            "vt" => {
                let [u, v] = numbers::<2>(&rest, line_no, path)?;
                raw.uvs.push(Vec2::new(u, v));
            }
            "f" => {
                if rest.len() < 3 {
                    return Err(Error::format(path, format!("line {line_no}: face with fewer than 3 corners")));
                }
                let corners = rest
                    .iter()
                    .map(|c| {
                        let mut parts = c.split('/');
                        let v = resolve(parts.next().unwrap_or(""), raw.positions.len(), "vertex", line_no, path)?;
                        let vt = match parts.next() {
                            Some(t) if !t.is_empty() => Some(resolve(t, raw.uvs.len(), "texture", line_no, path)?),
                            _ => None,
                        };
                        Ok(Corner { v, vt })
                    })
                    .collect::<Result<Vec<_>>>()?;
                raw.faces.push(corners);
            }
            _ => {}
        }
    }
    Ok(raw)
}

/// Loads a template. Every face must be a triangle with texture indices, and
/// vertex and texture indices must pair one-to-one; the UV of vertex `j` is
/// the texture coordinate it is paired with.
pub fn parse_template_obj(text: &str, path: &Path) -> Result<TemplateMesh> {
    let raw = parse(text, path)?;
    let n = raw.positions.len();
    let mut vt_of = vec![None; n];
    let mut v_of: HashMap<usize, usize> = HashMap::new();
    let mut faces = Vec::with_capacity(raw.faces.len());
    for (f, corners) in raw.faces.iter().enumerate() {
        if corners.len() != 3 {
            return Err(Error::format(path, format!("face {f} has {} corners; only triangles are supported", corners.len())));
        }
        let mut tri = [0; 3];
        for (k, c) in corners.iter().enumerate() {
            let vt = c
                .vt
                .ok_or_else(|| Error::format(path, format!("face {f} lacks texture indices")))?;
            match vt_of[c.v] {
                None => vt_of[c.v] = Some(vt),
                Some(prev) if prev != vt => {
                    return Err(Error::format(
                        path,
                        format!("vertex {} uses texture coordinates {} and {}; vertex/UV pairing must be one-to-one", c.v + 1, prev + 1, vt + 1),
                    ))
                }
                _ => {}
            }
            if let Some(&other) = v_of.get(&vt) {
                if other != c.v {
                    return Err(Error::format(
                        path,
                        format!("texture coordinate {} is shared by vertices {} and {}", vt + 1, other + 1, c.v + 1),
                    ));
                }
            } else {
                v_of.insert(vt, c.v);
            }
            tri[k] = c.v;
        }
        faces.push(tri);
    }
    let uv = vt_of
        .iter()
        .enumerate()
        .map(|(j, vt)| {
            vt.map(|t| raw.uvs[t])
                .ok_or_else(|| Error::format(path, format!("vertex {} is not used by any face", j + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    TemplateMesh::new(raw.positions, uv, faces)
}

pub fn read_template_obj(path: &Path) -> Result<TemplateMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_template_obj(&text, path)
}

/// Loads positions and faces, fan-triangulating polygons.
pub fn parse_mesh_obj(text: &str, path: &Path) -> Result<Mesh> {
    let raw = parse(text, path)?;
    let mut faces = Vec::new();
    for corners in &raw.faces {
        for k in 1..corners.len() - 1 {
            faces.push([corners[0].v, corners[k].v, corners[k + 1].v]);
        }
    }
    Mesh::new(raw.positions, faces)
}

pub fn read_mesh_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mesh_obj(&text, path)
}

/// Writes `v` (and `vt` when given, one per vertex) lines and 1-based faces.
/// Floats use the shortest representation that reads back exactly.
pub fn obj_string(positions: &[Vec3], uv: Option<&[Vec2]>, faces: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(40 * (positions.len() + faces.len()));
    for p in positions {
        let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
    }
    if let Some(uv) = uv {
        for c in uv {
            let _ = writeln!(s, "vt {} {}", c.x, c.y);
        }
    }
    for f in faces {
        let [a, b, c] = f.map(|v| v + 1);
        if uv.is_some() {
            let _ = writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}");
        } else {
            let _ = writeln!(s, "f {a} {b} {c}");
        }
    }
    s
}

pub fn write_obj(path: &Path, positions: &[Vec3], uv: Option<&[Vec2]>, faces: &[[usize; 3]]) -> Result<()> {
    std::fs::write(path, obj_string(positions, uv, faces)).map_err(|e| Error::io(path, e))
}

pub fn write_template_obj(path: &Path, template: &TemplateMesh) -> Result<()> {
    write_obj(path, template.positions(), Some(template.uv()), template.faces())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("t.obj")
    }

    const SQUARE: &str = "\
# two triangles
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
vt 0.1 0.1
vt 0.9 0.1
vt 0.9 0.9
vt 0.1 0.9
f 1/1 2/2 3/3
f 1/1 3/3 4/4
";

    #[test]
    fn loads_paired_template() {
        let t = parse_template_obj(SQUARE, p()).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.uv()[2], Vec2::new(0.9, 0.9));
        assert_eq!(t.faces(), &[[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn pairing_may_permute_indices() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0.5 0.5\nvt 0.1 0.1\nvt 0.9 0.1\nf 1/2 2/3 3/1\n";
        let t = parse_template_obj(text, p()).unwrap();
        assert_eq!(t.uv()[0], Vec2::new(0.1, 0.1));
        assert_eq!(t.uv()[2], Vec2::new(0.5, 0.5));
    }

    #[test]
    fn rejects_broken_pairing() {
        let seam = SQUARE.replace("f 1/1 3/3 4/4", "f 1/4 3/3 4/4");
        assert!(matches!(parse_template_obj(&seam, p()), Err(Error::Format { .. })));
        let shared = SQUARE.replace("f 1/1 3/3 4/4", "f 1/1 3/3 4/3");
        assert!(matches!(parse_template_obj(&shared, p()), Err(Error::Format { .. })));
        let bare = SQUARE.replace("f 1/1 3/3 4/4", "f 1 3 4");
        assert!(parse_template_obj(&bare, p()).is_err());
        let quad = SQUARE.replace("f 1/1 2/2 3/3\nf 1/1 3/3 4/4", "f 1/1 2/2 3/3 4/4");
        assert!(parse_template_obj(&quad, p()).is_err());
        let unused = format!("{SQUARE}v 5 5 5\n");
        assert!(parse_template_obj(&unused, p()).is_err());
        assert!(parse_template_obj("v 0 0 0\nf 1/1 1/1 1/1\n", p()).is_err());
    }

    #[test]
    fn negative_indices_are_relative() {
        let text = SQUARE.replace("f 1/1 3/3 4/4", "f -4/-4 -2/-2 -1/-1");
        let t = parse_template_obj(&text, p()).unwrap();
        assert_eq!(t.faces()[1], [0, 2, 3]);
    }

    #[test]
    fn write_then_read_is_exact() {
        let positions = vec![
            Vec3::new(0.1, 1.0 / 3.0, -2e-9),
            Vec3::new(1.0, 0.0, std::f64::consts::PI),
            Vec3::new(0.0, 1.0, 1e300),
        ];
        let uv = vec![Vec2::new(0.1, 0.2), Vec2::new(1.0 / 7.0, 0.5), Vec2::new(0.9, 0.9)];
        let text = obj_string(&positions, Some(&uv), &[[0, 1, 2]]);
        let t = parse_template_obj(&text, p()).unwrap();
        assert_eq!(t.positions(), &positions[..]);
        assert_eq!(t.uv(), &uv[..]);
        let m = parse_mesh_obj(&obj_string(&positions, None, &[[0, 1, 2]]), p()).unwrap();
        assert_eq!(m.positions, positions);
    }

    #[test]
    fn polygons_are_fan_triangulated() {
        let m = parse_mesh_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n", p()).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }
}
