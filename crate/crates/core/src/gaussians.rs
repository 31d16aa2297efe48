//! The splat cloud, its covariance, initialization on the body template
//! and skinning into posed world space.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, BoneGrads, BoneTransforms, SkinWeights};
use crate::error::{Error, Result};
use crate::geometry::rotation::{
    nearest_rotation, nearest_rotation_backward, raw_quat_backward, raw_quat_to_rotmat,
};
use crate::geometry::{quat_to_rotmat, Quaternion};

/// Degree-0 color assigned at initialization.
pub const INIT_GRAY: f64 = 0.5;
/// Initial isotropic scale as a fraction of the mean incident edge length.
pub const INIT_SCALE_FRACTION: f64 = 0.5;

/// How Gaussians are tied to the body surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BindingMode {
    /// Free centers, fixed skinning weights, no geometric prior.
    #[serde(rename = "none")]
    NoConstraint,
    /// Free centers with learnable skinning-weight offsets.
    Lsw,
    /// Centers pinned to their template vertex.
    Gom,
    /// Free centers held near the surface by the mesh-embedded loss.
    Camel,
}

impl BindingMode {
    pub const ALL: [BindingMode; 4] = [
        BindingMode::NoConstraint,
        BindingMode::Lsw,
        BindingMode::Gom,
        BindingMode::Camel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BindingMode::NoConstraint => "none",
            BindingMode::Lsw => "lsw",
            BindingMode::Gom => "gom",
            BindingMode::Camel => "camel",
        }
    }

    pub fn parse(s: &str) -> Option<BindingMode> {
        BindingMode::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for BindingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Canonical-space splats. Quaternions are stored raw and normalized on use.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub centers: Vec<Vector3<f64>>,
    pub quats: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    /// Degree-1 coefficients per basis function, each an RGB triple.
    pub sh1: Option<Vec<[[f64; 3]; 3]>>,
    pub skin_weights: SkinWeights,
    /// Learnable offsets, zero unless the binding mode is [`BindingMode::Lsw`].
    pub skin_weight_deltas: SkinWeights,
    /// Template vertex each Gaussian was spawned on.
    pub anchors: Option<Vec<usize>>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `R diag(s)² Rᵀ` for a quaternion and positive scales.
pub fn covariance(q: Quaternion, scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !scale.iter().all(|s| *s > 0.0) {
        return Err(Error::Domain(format!("scales must be positive, got {scale:?}")));
    }
    let r = quat_to_rotmat(q)?;
    Ok(covariance_from_rotation(&r, scale))
}

pub fn covariance_from_rotation(r: &Matrix3<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&scale.component_mul(scale));
    r * d * r.transpose()
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn n_bones(&self) -> usize {
        self.skin_weights.n_bones()
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scales(&self, i: usize) -> Vector3<f64> {
        self.log_scales[i].map(f64::exp)
    }

    /// Checks array lengths and the skinning-weight invariants.
    pub fn validate(&self, mode: BindingMode) -> Result<()> {
        let n = self.len();
        let lens = [
            ("quats", self.quats.len()),
            ("log_scales", self.log_scales.len()),
            ("opacity_logits", self.opacity_logits.len()),
            ("colors", self.colors.len()),
            ("skin_weights", self.skin_weights.rows()),
            ("skin_weight_deltas", self.skin_weight_deltas.rows()),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(Error::Shape(format!("{name} has {len} rows for {n} Gaussians")));
            }
        }
        if let Some(sh) = &self.sh1 {
            if sh.len() != n {
                return Err(Error::Shape(format!("sh1 has {} rows for {n} Gaussians", sh.len())));
            }
        }
        if let Some(a) = &self.anchors {
            if a.len() != n {
                return Err(Error::Shape(format!("{} anchors for {n} Gaussians", a.len())));
            }
        }
        if self.skin_weight_deltas.n_bones() != self.n_bones() {
            return Err(Error::Shape("weight deltas and weights differ in bone count".into()));
        }
        if let Some((row, sum)) = self.skin_weights.first_invalid_row(1e-9) {
            return Err(Error::Domain(format!("Gaussian {row} skin weights sum to {sum}")));
        }
        if mode != BindingMode::Lsw && self.skin_weight_deltas.as_slice().iter().any(|d| *d != 0.0) {
            return Err(Error::Domain(format!(
                "skin weight deltas must be zero in {mode} mode"
            )));
        }
        if mode == BindingMode::Gom && self.anchors.is_none() {
            return Err(Error::Config("gom binding needs vertex anchors".into()));
        }
        Ok(())
    }
}

/// One Gaussian per template vertex, gray, half opaque and isotropic.
pub fn init_on_mesh(model: &BodyModel) -> GaussianCloud {
    let n = model.n_vertices();
    let edge = model.template.mean_incident_edge_length();
    GaussianCloud {
        centers: model.template.vertices.clone(),
        quats: vec![Quaternion::IDENTITY.to_array(); n],
        log_scales: edge
            .iter()
            .map(|e| Vector3::repeat((INIT_SCALE_FRACTION * e.max(1e-6)).ln()))
            .collect(),
        opacity_logits: vec![0.0; n],
        colors: vec![[INIT_GRAY; 3]; n],
        sh1: None,
        skin_weights: model.skin_weights.clone(),
        skin_weight_deltas: SkinWeights::zeros(n, model.n_bones()),
        anchors: Some((0..n).collect()),
    }
}

/// Splats in world space, plus what the reverse pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedCloud {
    pub centers: Vec<Vector3<f64>>,
    /// World rotation of each splat's principal frame.
    pub rotations: Vec<Matrix3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub sh1: Option<Vec<[[f64; 3]; 3]>>,
    cache: DeformCache,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct DeformCache {
    /// Canonical centers actually skinned (anchor vertices in GoM mode).
    sources: Vec<Vector3<f64>>,
    blends: Vec<Matrix3<f64>>,
    polar: Vec<Matrix3<f64>>,
    stretch: Vec<Matrix3<f64>>,
    local: Vec<Matrix3<f64>>,
    unit_quats: Vec<[f64; 4]>,
    quat_norms: Vec<f64>,
    weights: Vec<f64>,
    /// Sum of active offset weights, or `None` for a fallback row.
    lsw_sums: Vec<Option<f64>>,
}

impl PosedCloud {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn scales(&self, i: usize) -> Vector3<f64> {
        self.log_scales[i].map(f64::exp)
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    /// Gaussians whose offset weights were all clamped and fell back to
    /// their base weights.
    pub fn lsw_fallbacks(&self) -> usize {
        self.cache.lsw_sums.iter().filter(|s| s.is_none()).count()
    }

    /// Pattern of active offset weights, used to detect kinks.
    pub fn lsw_signature(&self) -> Vec<bool> {
        self.cache.weights.iter().map(|w| *w > 0.0).collect()
    }
}

/// Gradients mirroring [`PosedCloud`].
#[derive(Debug, Clone, PartialEq)]
pub struct PosedGrad {
    pub centers: Vec<Vector3<f64>>,
    pub rotations: Vec<Matrix3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub sh1: Option<Vec<[[f64; 3]; 3]>>,
}

impl PosedGrad {
    pub fn zeros(n: usize, with_sh1: bool) -> Self {
        PosedGrad {
            centers: vec![Vector3::zeros(); n],
            rotations: vec![Matrix3::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
            sh1: with_sh1.then(|| vec![[[0.0; 3]; 3]; n]),
        }
    }

    pub fn add_assign(&mut self, o: &PosedGrad) {
        for (a, b) in self.centers.iter_mut().zip(&o.centers) {
            *a += b;
        }
        for (a, b) in self.rotations.iter_mut().zip(&o.rotations) {
            *a += b;
        }
        for (a, b) in self.log_scales.iter_mut().zip(&o.log_scales) {
            *a += b;
        }
        for (a, b) in self.opacity_logits.iter_mut().zip(&o.opacity_logits) {
            *a += b;
        }
        for (a, b) in self.colors.iter_mut().zip(&o.colors) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
        if let (Some(a), Some(b)) = (&mut self.sh1, &o.sh1) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..3 {
                    for c in 0..3 {
                        x[k][c] += y[k][c];
                    }
                }
            }
        }
    }
}

/// Gradients mirroring the optimizable fields of [`GaussianCloud`].
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrad {
    pub centers: Vec<Vector3<f64>>,
    pub quats: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub sh1: Option<Vec<[[f64; 3]; 3]>>,
    pub skin_weight_deltas: Vec<f64>,
}

fn effective_weights(base: &[f64], delta: &[f64], out: &mut [f64]) -> Option<f64> {
    let mut sum = 0.0;
    for (b, d) in base.iter().zip(delta) {
        let c = b + d;
        if c > 0.0 {
            sum += c;
        }
    }
    if !(sum > 1e-12) {
        out.copy_from_slice(base);
        return None;
    }
    if delta.iter().all(|d| *d == 0.0) {
        // bit-identical to the base weights
        out.copy_from_slice(base);
        return Some(sum);
    }
    for ((o, b), d) in out.iter_mut().zip(base).zip(delta) {
        let c = b + d;
        *o = if c > 0.0 { c / sum } else { 0.0 };
    }
    Some(sum)
}

/// Skins the cloud into world space.
///
/// Centers follow the blended bone transform; each splat frame is rotated
/// by the nearest rotation to the blended rotation block.
pub fn deform_cloud(
    cloud: &GaussianCloud,
    body: &BodyModel,
    transforms: &BoneTransforms,
    mode: BindingMode,
) -> Result<PosedCloud> {
    let n = cloud.len();
    let n_b = cloud.n_bones();
    if transforms.len() != n_b || body.n_bones() != n_b {
        return Err(Error::Shape(format!(
            "cloud has {n_b} bones, transforms {}, body {}",
            transforms.len(),
            body.n_bones()
        )));
    }
    cloud.validate(mode)?;
    let mut cache = DeformCache {
        sources: Vec::with_capacity(n),
        blends: Vec::with_capacity(n),
        polar: Vec::with_capacity(n),
        stretch: Vec::with_capacity(n),
        local: Vec::with_capacity(n),
        unit_quats: Vec::with_capacity(n),
        quat_norms: Vec::with_capacity(n),
        weights: vec![0.0; n * n_b],
        lsw_sums: Vec::new(),
    };
    let mut centers = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    for i in 0..n {
        let base = cloud.skin_weights.row(i);
        let w = &mut cache.weights[i * n_b..(i + 1) * n_b];
        if mode == BindingMode::Lsw {
            let s = effective_weights(base, cloud.skin_weight_deltas.row(i), w);
            cache.lsw_sums.push(s);
        } else {
            w.copy_from_slice(base);
        }
        let source = match (mode, &cloud.anchors) {
            (BindingMode::Gom, Some(a)) => {
                let v = a[i];
                if v >= body.n_vertices() {
                    return Err(Error::Shape(format!("anchor {v} out of range")));
                }
                body.template.vertices[v]
            }
            _ => cloud.centers[i],
        };
        let (m, mu) = transforms.blend(w, &source);
        let (polar, stretch) = nearest_rotation(&m);
        let (local, unit, norm) = raw_quat_to_rotmat(cloud.quats[i]);
        if !(norm > 0.0) {
            return Err(Error::DegenerateInput(format!("Gaussian {i} has a zero quaternion")));
        }
        centers.push(mu);
        rotations.push(polar * local);
        cache.sources.push(source);
        cache.blends.push(m);
        cache.polar.push(polar);
        cache.stretch.push(stretch);
        cache.local.push(local);
        cache.unit_quats.push(unit);
        cache.quat_norms.push(norm);
    }
    Ok(PosedCloud {
        centers,
        rotations,
        log_scales: cloud.log_scales.clone(),
        opacity_logits: cloud.opacity_logits.clone(),
        colors: cloud.colors.clone(),
        sh1: cloud.sh1.clone(),
        cache,
    })
}

/// Reverse pass of [`deform_cloud`].
pub fn deform_cloud_backward(
    cloud: &GaussianCloud,
    transforms: &BoneTransforms,
    posed: &PosedCloud,
    mode: BindingMode,
    grad: &PosedGrad,
) -> Result<(CloudGrad, BoneGrads)> {
    let n = cloud.len();
    let n_b = cloud.n_bones();
    if posed.len() != n || grad.centers.len() != n || posed.cache.blends.len() != n {
        return Err(Error::ContractViolation(
            "deform backward called with a posed cloud from different inputs".into(),
        ));
    }
    let c = &posed.cache;
    let mut bones = BoneGrads::zeros(n_b);
    let mut out = CloudGrad {
        centers: vec![Vector3::zeros(); n],
        quats: vec![[0.0; 4]; n],
        log_scales: grad.log_scales.clone(),
        opacity_logits: grad.opacity_logits.clone(),
        colors: grad.colors.clone(),
        sh1: grad.sh1.clone(),
        skin_weight_deltas: vec![0.0; n * n_b],
    };
    let mut gw = vec![0.0; n_b];
    for i in 0..n {
        let g_mu = grad.centers[i];
        let g_rot = grad.rotations[i];
        let w = &c.weights[i * n_b..(i + 1) * n_b];
        let g_local = c.polar[i].transpose() * g_rot;
        out.quats[i] = raw_quat_backward(c.unit_quats[i], c.quat_norms[i], &g_local);
        let g_blend = g_mu * c.sources[i].transpose()
            + nearest_rotation_backward(&c.polar[i], &c.stretch[i], &(g_rot * c.local[i].transpose()));
        if mode != BindingMode::Gom {
            out.centers[i] = c.blends[i].transpose() * g_mu;
        }
        for k in 0..n_b {
            if w[k] != 0.0 {
                bones.rotation[k] += g_blend * w[k];
                bones.translation[k] += g_mu * w[k];
            }
        }
        if mode == BindingMode::Lsw {
            if let Some(sum) = c.lsw_sums[i] {
                let mut dot = 0.0;
                for k in 0..n_b {
                    gw[k] = g_blend.dot(&transforms.bones[k].rotation)
                        + g_mu.dot(&transforms.bones[k].translation);
                    dot += gw[k] * w[k];
                }
                let base = cloud.skin_weights.row(i);
                let delta = cloud.skin_weight_deltas.row(i);
                for k in 0..n_b {
                    if base[k] + delta[k] > 0.0 {
                        out.skin_weight_deltas[i * n_b + k] = (gw[k] - dot) / sum;
                    }
                }
            }
        }
    }
    Ok((out, bones))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{
        forward_kinematics, forward_kinematics_backward, make_toy_body, PoseState, ToyBodySpec,
    };
    use crate::geometry::RigidTransform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn covariance_examples() {
        let c = covariance(Quaternion::IDENTITY, &Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(c, Matrix3::identity());
        let c = covariance(Quaternion::IDENTITY, &Vector3::new(2.0, 1.0, 1.0)).unwrap();
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
        assert!(matches!(
            covariance(Quaternion::IDENTITY, &Vector3::new(0.0, 1.0, 1.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn covariance_matches_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let q = Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let s = Vector3::new(
                rng.random_range(0.1..1.0),
                rng.random_range(1.2..2.0),
                rng.random_range(2.2..3.0),
            );
            let r = quat_to_rotmat(q).unwrap();
            let eig = covariance(q, &s).unwrap().symmetric_eigen();
            for axis in 0..3 {
                let want = s[axis] * s[axis];
                let (j, val) = eig
                    .eigenvalues
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - want).abs().total_cmp(&(b.1 - want).abs()))
                    .unwrap();
                assert!((val - want).abs() < 1e-10);
                let dot = eig.eigenvectors.column(j).dot(&r.column(axis));
                assert!((dot.abs() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn init_copies_vertices_and_weights() {
        let body = make_toy_body(&ToyBodySpec::default(), 0).unwrap();
        let cloud = init_on_mesh(&body);
        assert_eq!(cloud.len(), body.n_vertices());
        assert_eq!(cloud.centers, body.template.vertices);
        assert_eq!(cloud.skin_weights, body.skin_weights);
        assert!(cloud.opacity_logits.iter().all(|&o| sigmoid(o) == 0.5));
        assert!(cloud.log_scales.iter().all(|s| s.x == s.y && s.y == s.z));
        cloud.validate(BindingMode::Camel).unwrap();
    }

    #[test]
    fn identity_transforms_leave_cloud_in_place() {
        let body = make_toy_body(&ToyBodySpec::minimal(), 0).unwrap();
        let cloud = init_on_mesh(&body);
        let t = BoneTransforms::identity(body.n_bones());
        let posed = deform_cloud(&cloud, &body, &t, BindingMode::Camel).unwrap();
        for i in 0..cloud.len() {
            assert!((posed.centers[i] - cloud.centers[i]).norm() < 1e-12);
            assert!((posed.rotations[i] - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn translation_shifts_centers_only() {
        let body = make_toy_body(&ToyBodySpec::minimal(), 0).unwrap();
        let cloud = init_on_mesh(&body);
        let shift = Vector3::new(0.3, -1.0, 2.0);
        let t = BoneTransforms::from_bones(vec![
            RigidTransform {
                rotation: Matrix3::identity(),
                translation: shift,
            };
            body.n_bones()
        ]);
        let posed = deform_cloud(&cloud, &body, &t, BindingMode::NoConstraint).unwrap();
        for i in 0..cloud.len() {
            assert!((posed.centers[i] - cloud.centers[i] - shift).norm() < 1e-12);
            assert!((posed.rotations[i] - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn half_half_blend_moves_halfway() {
        let body = make_toy_body(&ToyBodySpec::minimal(), 0).unwrap();
        let mut cloud = init_on_mesh(&body);
        cloud.skin_weights.row_mut(0).copy_from_slice(&[0.5, 0.5]);
        let t = BoneTransforms::from_bones(vec![
            RigidTransform::identity(),
            RigidTransform {
                rotation: Matrix3::identity(),
                translation: Vector3::new(2.0, 0.0, 0.0),
            },
        ]);
        let posed = deform_cloud(&cloud, &body, &t, BindingMode::Camel).unwrap();
        let d = posed.centers[0] - cloud.centers[0];
        assert!((d - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    fn random_pose(n: usize, rng: &mut ChaCha8Rng, amp: f64) -> PoseState {
        let mut p = PoseState::identity(n);
        for r in &mut p.joint_rotations {
            *r = Vector3::new(
                rng.random_range(-amp..amp),
                rng.random_range(-amp..amp),
                rng.random_range(-amp..amp),
            );
        }
        p.global_translation = Vector3::new(0.1, -0.2, 0.3);
        p
    }

    #[test]
    fn modes_agree_except_gom() {
        let body = make_toy_body(&ToyBodySpec::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cloud = init_on_mesh(&body);
        for c in &mut cloud.centers {
            c.x += rng.random_range(-0.01..0.01);
        }
        let t = forward_kinematics(&body, &random_pose(body.n_bones(), &mut rng, 0.5)).unwrap();
        let a = deform_cloud(&cloud, &body, &t, BindingMode::Camel).unwrap();
        let b = deform_cloud(&cloud, &body, &t, BindingMode::NoConstraint).unwrap();
        let c = deform_cloud(&cloud, &body, &t, BindingMode::Lsw).unwrap();
        assert_eq!(a.centers, b.centers);
        assert_eq!(a.rotations, b.rotations);
        assert_eq!(a.centers, c.centers);
        assert_eq!(a.rotations, c.rotations);
        let g = deform_cloud(&cloud, &body, &t, BindingMode::Gom).unwrap();
        let lbs = crate::body::lbs_vertices(&body, &t);
        for i in 0..cloud.len() {
            assert!((g.centers[i] - lbs.vertices[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn nonzero_deltas_rejected_outside_lsw() {
        let body = make_toy_body(&ToyBodySpec::minimal(), 0).unwrap();
        let mut cloud = init_on_mesh(&body);
        cloud.skin_weight_deltas.row_mut(0)[0] = 0.1;
        let t = BoneTransforms::identity(2);
        assert!(deform_cloud(&cloud, &body, &t, BindingMode::Camel).is_err());
        assert!(deform_cloud(&cloud, &body, &t, BindingMode::Lsw).is_ok());
    }

    #[test]
    fn all_clamped_row_falls_back() {
        let body = make_toy_body(&ToyBodySpec::minimal(), 0).unwrap();
        let mut cloud = init_on_mesh(&body);
        cloud.skin_weight_deltas.row_mut(3).copy_from_slice(&[-5.0, -5.0]);
        let t = BoneTransforms::identity(2);
        let posed = deform_cloud(&cloud, &body, &t, BindingMode::Lsw).unwrap();
        assert_eq!(posed.lsw_fallbacks(), 1);
    }

    /// Scalar probe `Σ a_i·μ'_i + Σ ⟨B_i, R'_i⟩` and its analytic gradients.
    struct Probe {
        a: Vec<Vector3<f64>>,
        b: Vec<Matrix3<f64>>,
    }

    impl Probe {
        fn eval(&self, p: &PosedCloud) -> f64 {
            (0..p.len())
                .map(|i| self.a[i].dot(&p.centers[i]) + self.b[i].dot(&p.rotations[i]))
                .sum()
        }

        fn grad(&self, n: usize) -> PosedGrad {
            let mut g = PosedGrad::zeros(n, false);
            g.centers = self.a.clone();
            g.rotations = self.b.clone();
            g
        }
    }

    fn rel(a: f64, f: f64) -> f64 {
        (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
    }

    fn check_mode(mode: BindingMode) {
        let body = make_toy_body(&ToyBodySpec::small_chain(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cloud = init_on_mesh(&body);
        for i in 0..cloud.len() {
            cloud.centers[i] += Vector3::new(0.01, -0.02, 0.015) * rng.random_range(-1.0..1.0);
            cloud.quats[i] = [
                1.0,
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            if mode == BindingMode::Lsw {
                for d in cloud.skin_weight_deltas.row_mut(i) {
                    *d = rng.random_range(-0.2..0.2);
                }
            }
        }
        let pose = random_pose(body.n_bones(), &mut rng, 0.6);
        let n = cloud.len();
        let probe = Probe {
            a: (0..n)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
            b: (0..n)
                .map(|_| Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        };
        let loss = |cloud: &GaussianCloud, pose: &PoseState| {
            let t = forward_kinematics(&body, pose).unwrap();
            probe.eval(&deform_cloud(cloud, &body, &t, mode).unwrap())
        };
        let t = forward_kinematics(&body, &pose).unwrap();
        let posed = deform_cloud(&cloud, &body, &t, mode).unwrap();
        let (cg, bg) = deform_cloud_backward(&cloud, &t, &posed, mode, &probe.grad(n)).unwrap();
        let pg = forward_kinematics_backward(&body, &pose, &t, &bg);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in (0..n).step_by(5) {
            for d in 0..3 {
                let mut p = cloud.clone();
                p.centers[i][d] += h;
                let mut m = cloud.clone();
                m.centers[i][d] -= h;
                let fd = (loss(&p, &pose) - loss(&m, &pose)) / (2.0 * h);
                if mode == BindingMode::Gom {
                    assert_eq!(cg.centers[i][d], 0.0);
                    assert!(fd.abs() < 1e-9);
                } else {
                    worst = worst.max(rel(cg.centers[i][d], fd));
                }
            }
            for d in 0..4 {
                let mut p = cloud.clone();
                p.quats[i][d] += h;
                let mut m = cloud.clone();
                m.quats[i][d] -= h;
                let fd = (loss(&p, &pose) - loss(&m, &pose)) / (2.0 * h);
                worst = worst.max(rel(cg.quats[i][d], fd));
            }
            if mode == BindingMode::Lsw {
                for k in 0..body.n_bones() {
                    let mut p = cloud.clone();
                    p.skin_weight_deltas.row_mut(i)[k] += h;
                    let mut m = cloud.clone();
                    m.skin_weight_deltas.row_mut(i)[k] -= h;
                    let fd = (loss(&p, &pose) - loss(&m, &pose)) / (2.0 * h);
                    worst = worst.max(rel(cg.skin_weight_deltas[i * body.n_bones() + k], fd));
                }
            }
        }
        for j in 0..body.n_bones() {
            for d in 0..3 {
                let mut p = pose.clone();
                p.joint_rotations[j][d] += h;
                let mut m = pose.clone();
                m.joint_rotations[j][d] -= h;
                let fd = (loss(&cloud, &p) - loss(&cloud, &m)) / (2.0 * h);
                worst = worst.max(rel(pg.joint_rotations[j][d], fd));
            }
        }
        for d in 0..3 {
            let mut p = pose.clone();
            p.global_translation[d] += h;
            let mut m = pose.clone();
            m.global_translation[d] -= h;
            let fd = (loss(&cloud, &p) - loss(&cloud, &m)) / (2.0 * h);
            worst = worst.max(rel(pg.global_translation[d], fd));
        }
        assert!(worst < 1e-5, "{mode}: worst relative error {worst}");
    }

    #[test]
    fn deform_gradients_match_finite_differences() {
        for mode in BindingMode::ALL {
            check_mode(mode);
        }
    }

    #[test]
    fn binding_mode_names_round_trip() {
        for m in BindingMode::ALL {
            assert_eq!(BindingMode::parse(m.name()), Some(m));
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
    }
}
