//! Articulated body: template mesh, kinematic tree, skinning weights and
//! linear blend skinning.

mod template;
mod toy;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::rotation::{axis_angle_to_rotmat, axis_angle_to_rotmat_backward, wrap_axis_angle};
use crate::geometry::{RigidTransform, TriangleMesh};

pub use template::{load_body_template, save_body_template, BodyTemplateFile};
pub use toy::{make_toy_body, BoneSpec, ToyBodySpec};

/// Row-stochastic weights over bones, stored row-major (`rows × n_bones`).
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights {
    n_bones: usize,
    data: Vec<f64>,
}

impl SkinWeights {
    pub fn new(n_bones: usize, data: Vec<f64>) -> Result<Self> {
        if n_bones == 0 || data.len() % n_bones != 0 {
            return Err(Error::Shape(format!(
                "{} weights do not divide into rows of {n_bones}",
                data.len()
            )));
        }
        Ok(SkinWeights { n_bones, data })
    }

    pub fn zeros(rows: usize, n_bones: usize) -> Self {
        SkinWeights {
            n_bones,
            data: vec![0.0; rows * n_bones],
        }
    }

    pub fn n_bones(&self) -> usize {
        self.n_bones
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.n_bones
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_bones..(i + 1) * self.n_bones]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_bones..(i + 1) * self.n_bones]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// First row whose entries are negative or do not sum to 1 within `tol`.
    pub fn first_invalid_row(&self, tol: f64) -> Option<(usize, f64)> {
        (0..self.rows()).find_map(|i| {
            let r = self.row(i);
            let s: f64 = r.iter().sum();
            let bad = (s - 1.0).abs() > tol || r.iter().any(|w| !(*w >= 0.0));
            bad.then_some((i, s))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub template: TriangleMesh,
    pub joints_rest: Vec<Vector3<f64>>,
    pub parents: Vec<Option<usize>>,
    pub skin_weights: SkinWeights,
    order: Vec<usize>,
}

impl BodyModel {
    pub fn new(
        template: TriangleMesh,
        joints_rest: Vec<Vector3<f64>>,
        parents: Vec<Option<usize>>,
        skin_weights: SkinWeights,
    ) -> Result<Self> {
        let n_b = joints_rest.len();
        if parents.len() != n_b {
            return Err(Error::Shape(format!(
                "{} parents for {n_b} joints",
                parents.len()
            )));
        }
        if skin_weights.n_bones() != n_b || skin_weights.rows() != template.len() {
            return Err(Error::Shape(format!(
                "skin weights are {}x{}, expected {}x{n_b}",
                skin_weights.rows(),
                skin_weights.n_bones(),
                template.len()
            )));
        }
        let order = topological_order(&parents)?;
        if let Some((row, sum)) = skin_weights.first_invalid_row(1e-9) {
            return Err(Error::Domain(format!(
                "skinning weight row {row} sums to {sum} or has negative entries"
            )));
        }
        Ok(BodyModel {
            template,
            joints_rest,
            parents,
            skin_weights,
            order,
        })
    }

    pub fn n_bones(&self) -> usize {
        self.joints_rest.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

fn topological_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let n = parents.len();
    let roots: Vec<usize> = (0..n).filter(|&i| parents[i].is_none()).collect();
    if roots.len() != 1 {
        return Err(Error::Domain(format!(
            "kinematic tree needs exactly one root, found {}",
            roots.len()
        )));
    }
    let mut children = vec![Vec::new(); n];
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = *p {
            if p >= n || p == i {
                return Err(Error::Domain(format!("joint {i} has invalid parent {p}")));
            }
            children[p].push(i);
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![roots[0]];
    while let Some(j) = stack.pop() {
        order.push(j);
        for &c in children[j].iter().rev() {
            stack.push(c);
        }
    }
    if order.len() != n {
        return Err(Error::Domain("kinematic tree contains a cycle".into()));
    }
    Ok(order)
}

/// Per-joint axis-angle rotations (the root's is the global orientation)
/// plus a global translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseState {
    pub joint_rotations: Vec<Vector3<f64>>,
    pub global_translation: Vector3<f64>,
}

impl PoseState {
    pub fn identity(n_bones: usize) -> Self {
        PoseState {
            joint_rotations: vec![Vector3::zeros(); n_bones],
            global_translation: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.global_translation.iter().all(|v| v.is_finite())
            && self
                .joint_rotations
                .iter()
                .all(|r| r.iter().all(|v| v.is_finite()))
    }

    /// Keeps every axis-angle magnitude at or below π.
    pub fn wrap(&mut self) {
        for r in &mut self.joint_rotations {
            *r = wrap_axis_angle(r);
        }
    }

    /// Largest absolute component difference of the joint rotations.
    pub fn max_rotation_delta(&self, other: &PoseState) -> f64 {
        self.joint_rotations
            .iter()
            .zip(&other.joint_rotations)
            .flat_map(|(a, b)| (a - b).iter().map(|d| d.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoneTransforms {
    /// Rest-space to posed world-space transform per bone.
    pub bones: Vec<RigidTransform>,
    pub posed_joints: Vec<Vector3<f64>>,
    local_rotations: Vec<Matrix3<f64>>,
}

impl BoneTransforms {
    pub fn identity(n_bones: usize) -> Self {
        BoneTransforms {
            bones: vec![RigidTransform::identity(); n_bones],
            posed_joints: vec![Vector3::zeros(); n_bones],
            local_rotations: vec![Matrix3::identity(); n_bones],
        }
    }

    /// Transforms built directly from rigid bone motions (no pose behind them).
    pub fn from_bones(bones: Vec<RigidTransform>) -> Self {
        let n = bones.len();
        BoneTransforms {
            bones,
            posed_joints: vec![Vector3::zeros(); n],
            local_rotations: vec![Matrix3::identity(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }

    /// Applies the skinning-weight blend of the bone transforms to `p`.
    pub fn blend(&self, weights: &[f64], p: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
        let mut m = Matrix3::zeros();
        let mut t = Vector3::zeros();
        for (k, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                m += self.bones[k].rotation * w;
                t += self.bones[k].translation * w;
            }
        }
        (m, m * p + t)
    }
}

/// Gradients with respect to each bone's rotation block and translation.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneGrads {
    pub rotation: Vec<Matrix3<f64>>,
    pub translation: Vec<Vector3<f64>>,
}

impl BoneGrads {
    pub fn zeros(n_bones: usize) -> Self {
        BoneGrads {
            rotation: vec![Matrix3::zeros(); n_bones],
            translation: vec![Vector3::zeros(); n_bones],
        }
    }

    pub fn add_assign(&mut self, other: &BoneGrads) {
        for (a, b) in self.rotation.iter_mut().zip(&other.rotation) {
            *a += b;
        }
        for (a, b) in self.translation.iter_mut().zip(&other.translation) {
            *a += b;
        }
    }

    /// Accumulates the gradient of `M p + t` where `(M, t)` is the blend
    /// of bone transforms under `weights`.
    pub fn accumulate_blend(&mut self, weights: &[f64], p: &Vector3<f64>, g: &Vector3<f64>) {
        let outer = g * p.transpose();
        for (k, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                self.rotation[k] += outer * w;
                self.translation[k] += g * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGrad {
    pub joint_rotations: Vec<Vector3<f64>>,
    pub global_translation: Vector3<f64>,
}

impl PoseGrad {
    pub fn zeros(n_bones: usize) -> Self {
        PoseGrad {
            joint_rotations: vec![Vector3::zeros(); n_bones],
            global_translation: Vector3::zeros(),
        }
    }
}

/// Composes joint rotations down the tree. The root rotates about its rest
/// joint and is then shifted by the global translation.
pub fn forward_kinematics(model: &BodyModel, pose: &PoseState) -> Result<BoneTransforms> {
    let n = model.n_bones();
    if pose.joint_rotations.len() != n {
        return Err(Error::Shape(format!(
            "pose has {} joint rotations, body has {n} bones",
            pose.joint_rotations.len()
        )));
    }
    let mut out = BoneTransforms::identity(n);
    let mut global_rot = vec![Matrix3::identity(); n];
    for &k in model.order() {
        let local = axis_angle_to_rotmat(&pose.joint_rotations[k]);
        out.local_rotations[k] = local;
        let (rot, joint) = match model.parents[k] {
            None => (local, model.joints_rest[k] + pose.global_translation),
            Some(p) => (
                global_rot[p] * local,
                global_rot[p] * (model.joints_rest[k] - model.joints_rest[p]) + out.posed_joints[p],
            ),
        };
        global_rot[k] = rot;
        out.posed_joints[k] = joint;
        out.bones[k] = RigidTransform {
            rotation: rot,
            translation: joint - rot * model.joints_rest[k],
        };
    }
    Ok(out)
}

/// Reverse pass of [`forward_kinematics`].
pub fn forward_kinematics_backward(
    model: &BodyModel,
    pose: &PoseState,
    transforms: &BoneTransforms,
    grads: &BoneGrads,
) -> PoseGrad {
    let n = model.n_bones();
    let mut g_rot: Vec<Matrix3<f64>> = Vec::with_capacity(n);
    let mut g_joint: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        // t_k = J_k − A_k j_k
        g_joint.push(grads.translation[k]);
        g_rot.push(grads.rotation[k] - grads.translation[k] * model.joints_rest[k].transpose());
    }
    let mut out = PoseGrad::zeros(n);
    for &k in model.order().iter().rev() {
        let local = transforms.local_rotations[k];
        match model.parents[k] {
            None => {
                out.joint_rotations[k] =
                    axis_angle_to_rotmat_backward(&pose.joint_rotations[k], &g_rot[k]);
                out.global_translation = g_joint[k];
            }
            Some(p) => {
                let parent_rot = transforms.bones[p].rotation;
                let g_local = parent_rot.transpose() * g_rot[k];
                out.joint_rotations[k] =
                    axis_angle_to_rotmat_backward(&pose.joint_rotations[k], &g_local);
                let offset = model.joints_rest[k] - model.joints_rest[p];
                let add_rot = g_rot[k] * local.transpose() + g_joint[k] * offset.transpose();
                let add_joint = g_joint[k];
                g_rot[p] += add_rot;
                g_joint[p] += add_joint;
            }
        }
    }
    out
}

/// Posed mesh from linear blend skinning of the template.
pub fn lbs_vertices(model: &BodyModel, transforms: &BoneTransforms) -> TriangleMesh {
    let verts = model
        .template
        .vertices
        .iter()
        .enumerate()
        .map(|(i, v)| transforms.blend(model.skin_weights.row(i), v).1)
        .collect();
    model.template.with_vertices(verts)
}

/// Reverse pass of [`lbs_vertices`] for gradients on posed vertex positions.
pub fn lbs_vertices_backward(model: &BodyModel, grad_vertices: &[Vector3<f64>]) -> BoneGrads {
    let mut out = BoneGrads::zeros(model.n_bones());
    for (i, g) in grad_vertices.iter().enumerate() {
        if *g != Vector3::zeros() {
            out.accumulate_blend(model.skin_weights.row(i), &model.template.vertices[i], g);
        }
    }
    out
}

/// Posed world-space joint locations.
pub fn joint_positions(model: &BodyModel, pose: &PoseState) -> Result<Vec<Vector3<f64>>> {
    Ok(forward_kinematics(model, pose)?.posed_joints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation::axis_angle_to_rotmat;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> PoseState {
        PoseState {
            joint_rotations: (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-scale..scale),
                        rng.random_range(-scale..scale),
                        rng.random_range(-scale..scale),
                    )
                })
                .collect(),
            global_translation: Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        }
    }

    fn two_bone_chain() -> BodyModel {
        let template = TriangleMesh::new(
            vec![
                Vector3::new(0.0, 0.5, 0.0),
                Vector3::new(0.0, 1.5, 0.0),
                Vector3::new(0.1, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        BodyModel::new(
            template,
            vec![Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)],
            vec![None, Some(0)],
            SkinWeights::new(2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_pose_keeps_rest_joints() {
        let body = make_toy_body(&ToyBodySpec::default(), 0).unwrap();
        let t = forward_kinematics(&body, &PoseState::identity(body.n_bones())).unwrap();
        for (k, b) in t.bones.iter().enumerate() {
            assert!((b.rotation - Matrix3::identity()).abs().max() < 1e-15);
            assert!(b.translation.norm() < 1e-15);
            assert!((t.posed_joints[k] - body.joints_rest[k]).norm() < 1e-15);
        }
    }

    #[test]
    fn translation_shifts_every_joint() {
        let body = make_toy_body(&ToyBodySpec::default(), 0).unwrap();
        let mut pose = PoseState::identity(body.n_bones());
        pose.global_translation = Vector3::new(0.0, 0.0, 1.0);
        let joints = joint_positions(&body, &pose).unwrap();
        for (j, r) in joints.iter().zip(&body.joints_rest) {
            assert!((j - r - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn wrong_rotation_count_is_a_shape_error() {
        let body = two_bone_chain();
        assert!(matches!(
            forward_kinematics(&body, &PoseState::identity(3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn child_rotation_matches_hand_composition() {
        let body = two_bone_chain();
        let mut pose = PoseState::identity(2);
        pose.joint_rotations[1] = Vector3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        let t = forward_kinematics(&body, &pose).unwrap();
        // child bone runs from (0,1,0) to (0,2,0) at rest; rotating 90° about x
        // at its joint sends the endpoint to (0,1,1)
        let end = t.bones[1].apply(&Vector3::new(0.0, 2.0, 0.0));
        assert!((end - Vector3::new(0.0, 1.0, 1.0)).norm() < 1e-12);
        // the root bone is untouched
        assert!((t.bones[0].apply(&Vector3::new(0.0, 1.0, 0.0)) - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn lbs_identity_and_translation() {
        let body = make_toy_body(&ToyBodySpec::default(), 1).unwrap();
        let id = lbs_vertices(&body, &BoneTransforms::identity(body.n_bones()));
        for (a, b) in id.vertices.iter().zip(&body.template.vertices) {
            assert!((a - b).norm() < 1e-12);
        }
        let shift = Vector3::new(0.3, -0.2, 1.5);
        let moved = lbs_vertices(
            &body,
            &BoneTransforms::from_bones(vec![
                RigidTransform {
                    rotation: Matrix3::identity(),
                    translation: shift
                };
                body.n_bones()
            ]),
        );
        for (a, b) in moved.vertices.iter().zip(&body.template.vertices) {
            assert!((a - b - shift).norm() < 1e-12);
        }
        assert_eq!(moved.faces, body.template.faces);
    }

    #[test]
    fn half_half_blend_moves_halfway() {
        let body = two_bone_chain();
        let t = BoneTransforms::from_bones(vec![
            RigidTransform::identity(),
            RigidTransform {
                rotation: Matrix3::identity(),
                translation: Vector3::new(2.0, 0.0, 0.0),
            },
        ]);
        let posed = lbs_vertices(&body, &t);
        assert!((posed.vertices[2] - body.template.vertices[2] - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn joint_positions_match_bone_transforms() {
        let body = make_toy_body(&ToyBodySpec::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = random_pose(&mut rng, body.n_bones(), 0.8);
        let t = forward_kinematics(&body, &pose).unwrap();
        let joints = joint_positions(&body, &pose).unwrap();
        for k in 0..body.n_bones() {
            assert!((t.bones[k].apply(&body.joints_rest[k]) - joints[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn lbs_commutes_with_global_rigid_motion() {
        let body = make_toy_body(&ToyBodySpec::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pose = random_pose(&mut rng, body.n_bones(), 0.5);
        let t = forward_kinematics(&body, &pose).unwrap();
        let g = RigidTransform {
            rotation: axis_angle_to_rotmat(&Vector3::new(0.4, -1.1, 0.3)),
            translation: Vector3::new(1.0, 2.0, -0.5),
        };
        let posed = lbs_vertices(&body, &t);
        let moved_bones = BoneTransforms::from_bones(t.bones.iter().map(|b| g.compose(b)).collect());
        let posed2 = lbs_vertices(&body, &moved_bones);
        for (a, b) in posed.vertices.iter().zip(&posed2.vertices) {
            assert!((g.apply(a) - b).norm() < 1e-9);
        }
    }

    #[test]
    fn posed_vertices_gradient_matches_finite_differences() {
        let body = make_toy_body(&ToyBodySpec::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pose = random_pose(&mut rng, body.n_bones(), 0.6);
        let weights: Vec<Vector3<f64>> = (0..body.n_vertices())
            .map(|i| Vector3::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 0.2))
            .collect();
        let objective = |pose: &PoseState| -> f64 {
            let t = forward_kinematics(&body, pose).unwrap();
            lbs_vertices(&body, &t)
                .vertices
                .iter()
                .zip(&weights)
                .map(|(v, w)| v.dot(w))
                .sum()
        };
        let t = forward_kinematics(&body, &pose).unwrap();
        let bone_grads = lbs_vertices_backward(&body, &weights);
        let analytic = forward_kinematics_backward(&body, &pose, &t, &bone_grads);
        let h = 1e-6;
        let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
        for k in 0..body.n_bones() {
            for c in 0..3 {
                let mut p = pose.clone();
                let mut m = pose.clone();
                p.joint_rotations[k][c] += h;
                m.joint_rotations[k][c] -= h;
                let fd = (objective(&p) - objective(&m)) / (2.0 * h);
                assert!(rel(analytic.joint_rotations[k][c], fd) < 1e-5, "joint {k} comp {c}");
            }
        }
        for c in 0..3 {
            let mut p = pose.clone();
            let mut m = pose.clone();
            p.global_translation[c] += h;
            m.global_translation[c] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!(rel(analytic.global_translation[c], fd) < 1e-5);
        }
    }

    #[test]
    fn tree_validation() {
        assert!(topological_order(&[None, Some(0), Some(1)]).is_ok());
        assert!(topological_order(&[None, None]).is_err());
        assert!(topological_order(&[Some(1), Some(0)]).is_err());
        assert!(topological_order(&[None, Some(2), Some(1)]).is_err());
        assert_eq!(topological_order(&[Some(2), None, Some(1)]).unwrap(), vec![1, 2, 0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn wrap_keeps_pose_within_pi(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pose = random_pose(&mut rng, 4, 6.0);
            let before: Vec<Matrix3<f64>> = pose.joint_rotations.iter().map(axis_angle_to_rotmat).collect();
            pose.wrap();
            for (r, b) in pose.joint_rotations.iter().zip(&before) {
                prop_assert!(r.norm() <= std::f64::consts::PI + 1e-12);
                prop_assert!((axis_angle_to_rotmat(r) - b).abs().max() < 1e-10);
            }
        }
    }
}
