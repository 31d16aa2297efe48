//! Procedural stand-in for a parametric human template: one capsule per
//! bone, skinned to the two nearest bone segments.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BodyModel, SkinWeights};
use crate::error::{Error, Result};
use crate::geometry::TriangleMesh;

/// Bones that influence each vertex.
pub const SKIN_INFLUENCES: usize = 2;
/// Exponent of the inverse-distance falloff.
pub const SKIN_FALLOFF_POWER: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneSpec {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest joint position (meters).
    pub head: [f64; 3],
    pub tail: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBodySpec {
    pub bones: Vec<BoneSpec>,
    /// Latitude rings per capsule, poles excluded.
    pub rings: usize,
    /// Vertices per ring.
    pub segments: usize,
    /// Max random twist of each ring, as a fraction of the segment angle.
    pub ring_jitter: f64,
}

fn bone(name: &str, parent: Option<usize>, head: [f64; 3], tail: [f64; 3], radius: f64) -> BoneSpec {
    BoneSpec {
        name: name.to_string(),
        parent,
        head,
        tail,
        radius,
    }
}

impl Default for ToyBodySpec {
    /// Nine bones, ~1.7 m tall, T-pose, y up.
    fn default() -> Self {
        ToyBodySpec {
            bones: vec![
                bone("torso", None, [0.0, 0.95, 0.0], [0.0, 1.55, 0.0], 0.14),
                bone("l_upper_arm", Some(0), [0.17, 1.42, 0.0], [0.45, 1.42, 0.0], 0.05),
                bone("l_forearm", Some(1), [0.45, 1.42, 0.0], [0.72, 1.42, 0.0], 0.045),
                bone("r_upper_arm", Some(0), [-0.17, 1.42, 0.0], [-0.45, 1.42, 0.0], 0.05),
                bone("r_forearm", Some(3), [-0.45, 1.42, 0.0], [-0.72, 1.42, 0.0], 0.045),
                bone("l_thigh", Some(0), [0.09, 0.90, 0.0], [0.09, 0.50, 0.0], 0.07),
                bone("l_shin", Some(5), [0.09, 0.50, 0.0], [0.09, 0.08, 0.0], 0.055),
                bone("r_thigh", Some(0), [-0.09, 0.90, 0.0], [-0.09, 0.50, 0.0], 0.07),
                bone("r_shin", Some(7), [-0.09, 0.50, 0.0], [-0.09, 0.08, 0.0], 0.055),
            ],
            rings: 8,
            segments: 8,
            ring_jitter: 0.25,
        }
    }
}

impl ToyBodySpec {
    /// Two-bone vertical chain, the smallest valid body.
    pub fn minimal() -> Self {
        ToyBodySpec {
            bones: vec![
                bone("lower", None, [0.0, 0.0, 0.0], [0.0, 0.4, 0.0], 0.06),
                bone("upper", Some(0), [0.0, 0.4, 0.0], [0.0, 0.8, 0.0], 0.06),
            ],
            rings: 6,
            segments: 6,
            ring_jitter: 0.0,
        }
    }

    /// Three-bone bent chain with few vertices, sized for gradient checks.
    pub fn small_chain() -> Self {
        ToyBodySpec {
            bones: vec![
                bone("base", None, [0.0, 0.0, 0.0], [0.0, 0.35, 0.0], 0.08),
                bone("mid", Some(0), [0.0, 0.35, 0.0], [0.25, 0.55, 0.0], 0.06),
                bone("tip", Some(1), [0.25, 0.55, 0.0], [0.45, 0.6, 0.1], 0.05),
            ],
            rings: 4,
            segments: 4,
            ring_jitter: 0.2,
        }
    }

    pub fn vertices_per_bone(&self) -> usize {
        self.rings * self.segments + 2
    }

    fn validate(&self) -> Result<()> {
        if self.bones.len() < 2 {
            return Err(Error::Config("toy body needs at least 2 bones".into()));
        }
        if self.vertices_per_bone() < 8 || self.segments < 3 {
            return Err(Error::Config(format!(
                "toy body needs at least 8 vertices per bone and 3 segments, got {} and {}",
                self.vertices_per_bone(),
                self.segments
            )));
        }
        for (i, b) in self.bones.iter().enumerate() {
            let len = (Vector3::from(b.tail) - Vector3::from(b.head)).norm();
            if !(len > 1e-9) {
                return Err(Error::Config(format!("bone {i} ({}) has zero length", b.name)));
            }
            if !(b.radius > 0.0) {
                return Err(Error::Config(format!("bone {i} ({}) has non-positive radius", b.name)));
            }
        }
        Ok(())
    }
}

fn perpendicular(a: &Vector3<f64>) -> Vector3<f64> {
    let helper = if a.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    (helper - a * a.dot(&helper)).normalize()
}

/// Appends one capsule (rings plus two poles) to the mesh buffers.
fn capsule(
    b: &BoneSpec,
    rings: usize,
    segments: usize,
    jitter: f64,
    rng: &mut ChaCha8Rng,
    verts: &mut Vec<Vector3<f64>>,
    faces: &mut Vec<[usize; 3]>,
) {
    let head = Vector3::from(b.head);
    let axis_full = Vector3::from(b.tail) - head;
    let len = axis_full.norm();
    let a = axis_full / len;
    let u = perpendicular(&a);
    let v = a.cross(&u);
    let r = b.radius;
    let cap = 0.5 * PI * r;
    let profile = 2.0 * cap + len;
    let base = verts.len();
    let step = 2.0 * PI / segments as f64;
    for i in 0..rings {
        let s = (i + 1) as f64 / (rings + 1) as f64 * profile;
        let (axial, radial) = if s < cap {
            let phi = s / r - 0.5 * PI;
            (r * phi.sin(), r * phi.cos())
        } else if s < cap + len {
            (s - cap, r)
        } else {
            let phi = (s - cap - len) / r;
            (len + r * phi.sin(), r * phi.cos())
        };
        let twist = if jitter > 0.0 {
            rng.random_range(0.0..jitter) * step
        } else {
            0.0
        };
        for j in 0..segments {
            let theta = j as f64 * step + twist;
            verts.push(head + a * axial + (u * theta.cos() + v * theta.sin()) * radial);
        }
    }
    let south = verts.len();
    verts.push(head - a * r);
    let north = verts.len();
    verts.push(head + a * (len + r));
    let idx = |i: usize, j: usize| base + i * segments + (j % segments);
    for i in 0..rings - 1 {
        for j in 0..segments {
            faces.push([idx(i, j), idx(i, j + 1), idx(i + 1, j)]);
            faces.push([idx(i, j + 1), idx(i + 1, j + 1), idx(i + 1, j)]);
        }
    }
    for j in 0..segments {
        faces.push([south, idx(0, j + 1), idx(0, j)]);
        faces.push([north, idx(rings - 1, j), idx(rings - 1, j + 1)]);
    }
}

fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Inverse-distance weights over the nearest [`SKIN_INFLUENCES`] bones.
pub(crate) fn falloff_weights(p: &Vector3<f64>, bones: &[BoneSpec]) -> Vec<f64> {
    let mut dist: Vec<(f64, usize)> = bones
        .iter()
        .enumerate()
        .map(|(k, b)| {
            (
                segment_distance(p, &Vector3::from(b.head), &Vector3::from(b.tail)),
                k,
            )
        })
        .collect();
    dist.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut w = vec![0.0; bones.len()];
    let picked = &dist[..SKIN_INFLUENCES.min(dist.len())];
    let raw: Vec<f64> = picked
        .iter()
        .map(|(d, _)| 1.0 / d.max(1e-4).powi(SKIN_FALLOFF_POWER))
        .collect();
    let total: f64 = raw.iter().sum();
    for ((_, k), r) in picked.iter().zip(raw) {
        w[*k] = r / total;
    }
    w
}

/// Deterministic capsule body; the seed only twists the vertex rings.
pub fn make_toy_body(spec: &ToyBodySpec, seed: u64) -> Result<BodyModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for b in &spec.bones {
        capsule(b, spec.rings, spec.segments, spec.ring_jitter, &mut rng, &mut verts, &mut faces);
    }
    let n_b = spec.bones.len();
    let mut weights = Vec::with_capacity(verts.len() * n_b);
    for p in &verts {
        weights.extend(falloff_weights(p, &spec.bones));
    }
    let mesh = TriangleMesh::new(verts, faces)?;
    BodyModel::new(
        mesh,
        spec.bones.iter().map(|b| Vector3::from(b.head)).collect(),
        spec.bones.iter().map(|b| b.parent).collect(),
        SkinWeights::new(n_b, weights)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_body_shape() {
        let body = make_toy_body(&ToyBodySpec::default(), 0).unwrap();
        assert_eq!(body.n_bones(), 9);
        assert_eq!(body.n_vertices(), 9 * 66);
        assert!(body.skin_weights.first_invalid_row(1e-9).is_none());
        assert_eq!(body.root(), 0);
        let (lo, hi) = body
            .template
            .vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.y), hi.max(v.y)));
        assert!((hi - lo - 1.67).abs() < 0.05, "height {}", hi - lo);
        for row in 0..body.n_vertices() {
            let nz = body.skin_weights.row(row).iter().filter(|&&w| w > 0.0).count();
            assert!(nz <= SKIN_INFLUENCES);
        }
    }

    #[test]
    fn normals_point_outward_from_bone_axis() {
        let spec = ToyBodySpec::default();
        let body = make_toy_body(&spec, 0).unwrap();
        let per = spec.vertices_per_bone();
        for (k, b) in spec.bones.iter().enumerate() {
            let head = Vector3::from(b.head);
            let tail = Vector3::from(b.tail);
            for i in k * per..(k + 1) * per {
                let v = body.template.vertices[i];
                let ab = tail - head;
                let t = ((v - head).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                let radial = (v - (head + ab * t)).normalize();
                assert!(body.template.normals[i].dot(&radial) > 0.7, "bone {k} vertex {i}");
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = make_toy_body(&ToyBodySpec::default(), 42).unwrap();
        let b = make_toy_body(&ToyBodySpec::default(), 42).unwrap();
        assert_eq!(a, b);
        let c = make_toy_body(&ToyBodySpec::default(), 43).unwrap();
        assert_ne!(a.template.vertices, c.template.vertices);
    }

    #[test]
    fn minimal_chain_weight_falloff() {
        let spec = ToyBodySpec::minimal();
        let body = make_toy_body(&spec, 0).unwrap();
        let per = spec.vertices_per_bone();
        let joint = Vector3::new(0.0, 0.4, 0.0);
        let mut saw_mixed = false;
        for i in 0..body.n_vertices() {
            let own = i / per;
            let v = body.template.vertices[i];
            let w = body.skin_weights.row(i);
            let y_along = v.y;
            let near_end = if own == 0 { y_along < 0.1 } else { y_along > 0.7 };
            if near_end {
                assert!(w[own] >= 0.9, "vertex {i} at {v:?} has {w:?}");
            }
            if (v - joint).norm() < 0.07 && w[0] > 0.3 && w[1] > 0.3 {
                saw_mixed = true;
            }
            // the oracle: inverse-square falloff to both segments
            let d0 = segment_distance(&v, &Vector3::zeros(), &joint).max(1e-4);
            let d1 = segment_distance(&v, &joint, &Vector3::new(0.0, 0.8, 0.0)).max(1e-4);
            let expect0 = (1.0 / (d0 * d0)) / (1.0 / (d0 * d0) + 1.0 / (d1 * d1));
            assert!((w[0] - expect0).abs() < 1e-12);
        }
        assert!(saw_mixed);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = ToyBodySpec::minimal();
        s.bones.truncate(1);
        assert!(make_toy_body(&s, 0).is_err());
        let mut s = ToyBodySpec::minimal();
        s.bones[1].tail = s.bones[1].head;
        assert!(matches!(make_toy_body(&s, 0), Err(Error::Config(m)) if m.contains("zero length")));
        let mut s = ToyBodySpec::minimal();
        s.rings = 1;
        s.segments = 3;
        assert!(make_toy_body(&s, 0).is_err());
    }
}
