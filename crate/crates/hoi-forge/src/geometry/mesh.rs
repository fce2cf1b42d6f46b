//! Triangle meshes: construction, per-face normals, the edge-pairing
//! watertightness check, and an OBJ-subset reader/writer (v/f lines,
//! triangles only).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

use super::{cross3, norm3, sub3, unit3, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= vertices.len() {
                    return Err(Error::contract(format!(
                        "face {fi} references vertex {v} of {}",
                        vertices.len()
                    )));
                }
            }
        }
        Ok(TriMesh { vertices, faces })
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        let n = cross3(
            sub3(self.vertices[b], self.vertices[a]),
            sub3(self.vertices[c], self.vertices[a]),
        );
        unit3(n).unwrap_or([0.0, 0.0, 1.0])
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        0.5 * norm3(cross3(
            sub3(self.vertices[b], self.vertices[a]),
            sub3(self.vertices[c], self.vertices[a]),
        ))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Signed volume via the divergence theorem; positive when faces wind
    /// counter-clockwise seen from outside.
    pub fn signed_volume(&self) -> f64 {
        let mut v6 = 0.0;
        for f in &self.faces {
            let a = self.vertices[f[0]];
            let b = self.vertices[f[1]];
            let c = self.vertices[f[2]];
            v6 += super::dot3(a, cross3(b, c));
        }
        v6 / 6.0
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    /// Edge-pairing watertightness: every undirected edge must be used by
    /// exactly two faces, once in each direction.
    pub fn check_watertight(&self) -> Result<()> {
        let mut edges: HashMap<(usize, usize), i64> = HashMap::new();
        for f in &self.faces {
            for e in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (e.0.min(e.1), e.0.max(e.1));
                // +1 for the canonical direction, -1 for the reverse; a
                // paired manifold edge sums to 0.
                *edges.entry(key).or_insert(0) += if e.0 < e.1 { 1 } else { -1 };
            }
        }
        let unmatched: Vec<(usize, usize)> = edges
            .iter()
            .filter(|&(_, &bal)| bal != 0)
            .map(|(&e, _)| e)
            .collect();
        if unmatched.is_empty() {
            Ok(())
        } else {
            let mut sorted = unmatched;
            sorted.sort_unstable();
            let shown: Vec<String> = sorted.iter().take(8).map(|e| format!("{e:?}")).collect();
            Err(Error::contract(format!(
                "mesh is not watertight: {} unmatched edges, first: {}",
                sorted.len(),
                shown.join(", ")
            )))
        }
    }

    pub fn transformed(&self, pose: &super::RigidPose6) -> TriMesh {
        TriMesh {
            vertices: super::apply_rigid(pose, &self.vertices),
            faces: self.faces.clone(),
        }
    }

    /// Write the OBJ subset: `v x y z` and 1-based `f a b c` lines.
    pub fn write_obj(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read the OBJ subset; non-triangle faces are a parse error. Lines
    /// other than `v`/`f` (comments, normals, etc.) are skipped.
    pub fn read_obj(path: &Path) -> Result<TriMesh> {
        let body = std::fs::read_to_string(path)?;
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in body.lines().enumerate() {
            let at = lineno as u64 + 1;
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let mut p = [0.0; 3];
                    for slot in &mut p {
                        let tok = it
                            .next()
                            .ok_or_else(|| Error::parse(at, "vertex line with < 3 coordinates"))?;
                        *slot = tok
                            .parse()
                            .map_err(|_| Error::parse(at, format!("bad coordinate `{tok}`")))?;
                    }
                    vertices.push(p);
                }
                Some("f") => {
                    let idx: Vec<&str> = it.collect();
                    if idx.len() != 3 {
                        return Err(Error::parse(
                            at,
                            format!("face with {} vertices; only triangles supported", idx.len()),
                        ));
                    }
                    let mut f = [0usize; 3];
                    for (slot, tok) in f.iter_mut().zip(&idx) {
                        // Accept `i`, `i/..` and `i//..` forms.
                        let head = tok.split('/').next().unwrap_or("");
                        let one_based: usize = head
                            .parse()
                            .map_err(|_| Error::parse(at, format!("bad face index `{tok}`")))?;
                        if one_based == 0 {
                            return Err(Error::parse(at, "face index 0 (OBJ is 1-based)"));
                        }
                        *slot = one_based - 1;
                    }
                    faces.push(f);
                }
                _ => {}
            }
        }
        TriMesh::new(vertices, faces)
    }
}

/// Axis-aligned box mesh (12 triangles, outward winding), watertight.
pub fn box_mesh(min: Vec3, max: Vec3) -> TriMesh {
    let [x0, y0, z0] = min;
    let [x1, y1, z1] = max;
    let vertices = vec![
        [x0, y0, z0], // 0
        [x1, y0, z0], // 1
        [x1, y1, z0], // 2
        [x0, y1, z0], // 3
        [x0, y0, z1], // 4
        [x1, y0, z1], // 5
        [x1, y1, z1], // 6
        [x0, y1, z1], // 7
    ];
    let faces = vec![
        // bottom (z = z0, normal -z)
        [0, 2, 1],
        [0, 3, 2],
        // top (z = z1, normal +z)
        [4, 5, 6],
        [4, 6, 7],
        // front (y = y0, normal -y)
        [0, 1, 5],
        [0, 5, 4],
        // back (y = y1, normal +y)
        [2, 3, 7],
        [2, 7, 6],
        // left (x = x0, normal -x)
        [0, 4, 7],
        [0, 7, 3],
        // right (x = x1, normal +x)
        [1, 2, 6],
        [1, 6, 5],
    ];
    TriMesh { vertices, faces }
}

/// Regular tetrahedron scaled by `edge`, centered at the origin.
pub fn tetrahedron_mesh(edge: f64) -> TriMesh {
    let s = edge / (2.0f64).sqrt() / 2.0;
    let vertices = vec![
        [s, s, s],
        [s, -s, -s],
        [-s, s, -s],
        [-s, -s, s],
    ];
    let faces = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    let mesh = TriMesh { vertices, faces };
    debug_assert!(mesh.signed_volume() > 0.0);
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::scale3;

    #[test]
    fn box_is_watertight_with_correct_volume() {
        let m = box_mesh([0.0; 3], [1.0, 2.0, 3.0]);
        m.check_watertight().unwrap();
        assert!((m.signed_volume() - 6.0).abs() < 1e-12);
        assert!((m.surface_area() - 22.0).abs() < 1e-12);
    }

    #[test]
    fn missing_face_breaks_watertightness() {
        let mut m = box_mesh([0.0; 3], [1.0; 3]);
        m.faces.pop();
        let err = m.check_watertight().unwrap_err();
        assert!(err.to_string().contains("unmatched"));
    }

    #[test]
    fn tetrahedron_volume_matches_formula() {
        let edge = 0.04;
        let m = tetrahedron_mesh(edge);
        m.check_watertight().unwrap();
        let expected = edge.powi(3) / (6.0 * (2.0f64).sqrt());
        assert!((m.signed_volume() - expected).abs() < 1e-12);
    }

    #[test]
    fn obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        let m = box_mesh([-0.5, 0.0, 0.25], [0.5, 1.0, 1.25]);
        m.write_obj(&path).unwrap();
        let back = TriMesh::read_obj(&path).unwrap();
        assert_eq!(m.faces, back.faces);
        for (a, b) in m.vertices.iter().zip(&back.vertices) {
            assert!(super::super::dist3(*a, *b) < 1e-12);
        }
    }

    #[test]
    fn obj_rejects_quads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("quad.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        match TriMesh::read_obj(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn obj_accepts_slash_forms() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slash.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2//2 3\n").unwrap();
        let m = TriMesh::read_obj(&path).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn face_normals_point_outward_on_box() {
        let m = box_mesh([0.0; 3], [1.0; 3]);
        for f in 0..m.faces.len() {
            let n = m.face_normal(f);
            let [a, b, c] = m.faces[f];
            let centroid = scale3(
                super::super::add3(super::super::add3(m.vertices[a], m.vertices[b]), m.vertices[c]),
                1.0 / 3.0,
            );
            let outward = sub3(centroid, [0.5; 3]);
            assert!(super::super::dot3(n, outward) > 0.0, "face {f} normal {n:?}");
        }
    }
}
