use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Fallback normal for vertices with no incident non-degenerate face.
pub const ISOLATED_NORMAL: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Vec<Vector3<f64>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some((fi, f)) = faces
            .iter()
            .enumerate()
            .find(|(_, f)| f.iter().any(|&v| v >= n))
        {
            return Err(Error::Shape(format!(
                "face {fi} references vertex {:?} but mesh has {n} vertices",
                f
            )));
        }
        let normals = compute_vertex_normals(&vertices, &faces);
        Ok(TriangleMesh {
            vertices,
            faces,
            normals,
        })
    }

    /// Replaces vertex positions and refreshes normals.
    pub fn with_vertices(&self, vertices: Vec<Vector3<f64>>) -> TriangleMesh {
        debug_assert_eq!(vertices.len(), self.vertices.len());
        let normals = compute_vertex_normals(&vertices, &self.faces);
        TriangleMesh {
            vertices,
            faces: self.faces.clone(),
            normals,
        }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Mean length of the edges incident to each vertex (0 for isolated ones).
    pub fn mean_incident_edge_length(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.vertices.len()];
        let mut count = vec![0usize; self.vertices.len()];
        for f in &self.faces {
            for e in 0..3 {
                let a = f[e];
                let b = f[(e + 1) % 3];
                let l = (self.vertices[a] - self.vertices[b]).norm();
                sum[a] += l;
                sum[b] += l;
                count[a] += 1;
                count[b] += 1;
            }
        }
        sum.iter()
            .zip(&count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }
}

fn accumulate_face_normals(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for f in faces {
        let a = vertices[f[0]];
        // cross product magnitude is twice the area, so the sum is area weighted
        let c = (vertices[f[1]] - a).cross(&(vertices[f[2]] - a));
        for &v in f {
            acc[v] += c;
        }
    }
    acc
}

/// Area-weighted unit vertex normals.
pub fn compute_vertex_normals(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> Vec<Vector3<f64>> {
    accumulate_face_normals(vertices, faces)
        .into_iter()
        .map(|m| {
            let n = m.norm();
            if n > 0.0 {
                m / n
            } else {
                ISOLATED_NORMAL
            }
        })
        .collect()
}

/// Pulls gradients on unit vertex normals back to vertex positions.
pub fn vertex_normals_backward(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    grad_normals: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    let acc = accumulate_face_normals(vertices, faces);
    let grad_acc: Vec<Vector3<f64>> = acc
        .iter()
        .zip(grad_normals)
        .map(|(m, g)| {
            let len = m.norm();
            if len > 0.0 {
                let n = m / len;
                (Matrix3::identity() - n * n.transpose()) * g / len
            } else {
                Vector3::zeros()
            }
        })
        .collect();
    let mut out = vec![Vector3::zeros(); vertices.len()];
    for f in faces {
        let gc: Vector3<f64> = f.iter().map(|&v| grad_acc[v]).sum();
        if gc == Vector3::zeros() {
            continue;
        }
        let a = vertices[f[0]];
        let e1 = vertices[f[1]] - a;
        let e2 = vertices[f[2]] - a;
        let g1 = e2.cross(&gc);
        let g2 = gc.cross(&e1);
        out[f[0]] -= g1 + g2;
        out[f[1]] += g1;
        out[f[2]] += g2;
    }
    out
}
