//! Triangle mesh container and ASCII PLY/OBJ ingestion.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Indexed triangle mesh in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
}

const MIN_FACE_AREA: f64 = 1e-12;

impl TriangleMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        for (fi, f) in faces.iter().enumerate() {
            for &vi in f {
                if vi >= vertices.len() {
                    return Err(Error::invalid(
                        "TriangleMesh",
                        format!("face {fi} references vertex {vi} of {}", vertices.len()),
                    ));
                }
            }
            let area = triangle_area(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]);
            if area <= MIN_FACE_AREA {
                return Err(Error::invalid(
                    "TriangleMesh",
                    format!("face {fi} is degenerate (area {area:.3e})"),
                ));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face_vertices(&self, fi: usize) -> [&Vector3<f64>; 3] {
        let f = &self.faces[fi];
        [&self.vertices[f[0]], &self.vertices[f[1]], &self.vertices[f[2]]]
    }

    /// Unit face normal in world coordinates (right-handed winding).
    pub fn face_normal(&self, fi: usize) -> Vector3<f64> {
        let [a, b, c] = self.face_vertices(fi);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Loads a mesh from an ASCII PLY or OBJ file, dispatching on extension.
    pub fn load(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("ply") => Self::load_ply(path),
            Some("obj") => Self::load_obj(path),
            other => Err(Error::parse(
                path.display().to_string(),
                format!("unsupported mesh extension {other:?}, expected .ply or .obj"),
            )),
        }
    }

    pub fn load_ply(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        parse_ply(&text).map_err(|reason| Error::parse(path.display().to_string(), reason))
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        parse_obj(&text).map_err(|reason| Error::parse(path.display().to_string(), reason))
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut s = String::new();
        for v in &self.vertices {
            writeln!(s, "v {} {} {}", v.x, v.y, v.z).unwrap();
        }
        for f in &self.faces {
            writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

pub fn triangle_area(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

fn parse_ply(text: &str) -> std::result::Result<TriangleMesh, String> {
    let mut lines = text.lines();
    if lines.next().map(|l| l.trim()) != Some("ply") {
        return Err("not a PLY file".into());
    }
    let mut vertex_count = None;
    let mut face_count = None;
    let mut vertex_props = 0usize;
    let mut in_vertex_element = false;
    for line in lines.by_ref() {
        let line = line.trim();
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(format!("only ASCII PLY is supported, got format {fmt}"));
                }
            }
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse::<usize>().map_err(|e| e.to_string())?);
                in_vertex_element = true;
            }
            ["element", "face", n] => {
                face_count = Some(n.parse::<usize>().map_err(|e| e.to_string())?);
                in_vertex_element = false;
            }
            ["element", ..] => in_vertex_element = false,
            ["property", "list", ..] => {}
            ["property", ..] if in_vertex_element => vertex_props += 1,
            ["end_header"] => break,
            _ => {}
        }
    }
    let nv = vertex_count.ok_or("missing vertex element")?;
    let nf = face_count.ok_or("missing face element")?;
    if vertex_props < 3 {
        return Err("vertex element needs at least x y z properties".into());
    }
    let mut vertices = Vec::with_capacity(nv);
    let mut faces = Vec::with_capacity(nf);
    let mut body = lines.filter(|l| !l.trim().is_empty());
    for i in 0..nv {
        let line = body.next().ok_or_else(|| format!("missing vertex {i}"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|v| v.parse().map_err(|e| format!("bad vertex {i}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if vals.len() != 3 {
            return Err(format!("vertex {i} has fewer than 3 coordinates"));
        }
        vertices.push(Vector3::new(vals[0], vals[1], vals[2]));
    }
    for i in 0..nf {
        let line = body.next().ok_or_else(|| format!("missing face {i}"))?;
        let vals: Vec<usize> = line
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| format!("bad face {i}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        let count = *vals.first().ok_or_else(|| format!("empty face {i}"))?;
        if count != 3 {
            return Err(format!(
                "face {i} has {count} vertices; only triangles are supported"
            ));
        }
        if vals.len() != 4 {
            return Err(format!("face {i} list length mismatch"));
        }
        faces.push([vals[1], vals[2], vals[3]]);
    }
    TriangleMesh::new(vertices, faces).map_err(|e| e.to_string())
}

fn parse_obj(text: &str) -> std::result::Result<TriangleMesh, String> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let vals: Vec<f64> = parts
                    .take(3)
                    .map(|v| v.parse().map_err(|e| format!("line {}: {e}", ln + 1)))
                    .collect::<std::result::Result<_, _>>()?;
                if vals.len() != 3 {
                    return Err(format!("line {}: vertex needs 3 coordinates", ln + 1));
                }
                vertices.push(Vector3::new(vals[0], vals[1], vals[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|spec| {
                        // "v", "v/vt", "v/vt/vn" and "v//vn" forms
                        let v = spec.split('/').next().unwrap_or(spec);
                        v.parse::<usize>()
                            .map_err(|e| format!("line {}: bad face index {spec}: {e}", ln + 1))
                    })
                    .collect::<std::result::Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(format!(
                        "line {}: face has {} vertices; only triangles are supported",
                        ln + 1,
                        idx.len()
                    ));
                }
                for &i in &idx {
                    if i == 0 {
                        return Err(format!("line {}: OBJ indices are 1-based", ln + 1));
                    }
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces).map_err(|e| e.to_string())
}
