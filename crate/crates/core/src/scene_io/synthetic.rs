//! Ground-truth sequences rendered by the module renderer, with noisy
//! initial poses standing in for an upstream pose estimator.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Baseline, Frame, Scene};
use crate::body::{forward_kinematics, joint_positions, make_toy_body, BodyModel, PoseState, ToyBodySpec};
use crate::error::{Error, Result};
use crate::gaussians::{deform_cloud, init_on_mesh, logit, BindingMode, GaussianCloud};
use crate::geometry::{Camera, Quaternion};
use crate::metrics::{mpjpe, pa_mpjpe};
use crate::raster::mask_count;
use crate::renderer::{render, RenderSettings};

/// Smallest fraction of pixels the body must cover in every frame.
pub const MIN_COVERAGE: f64 = 0.01;
/// Ratio of tangent to normal scale of the ground-truth splats.
pub const GT_FLATNESS: f64 = 4.0;
pub const GT_OPACITY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels per pixel of image width.
    pub focal_per_width: f64,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    /// Total azimuth swept by the camera over the sequence (radians).
    pub orbit_arc: f64,
    /// Peak joint rotation of the animation (radians).
    pub anim_amplitude: f64,
    /// Animation periods over the sequence.
    pub anim_cycles: f64,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    /// Std of additive Gaussian depth noise on valid pixels (meters).
    pub depth_noise: f64,
    /// Tangent scale of the ground-truth splats relative to the local edge length.
    pub splat_scale: f64,
    pub seed: u64,
    pub body: ToyBodySpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            frames: 30,
            width: 64,
            height: 64,
            focal_per_width: 1.375,
            orbit_radius: 3.0,
            orbit_height: 1.0,
            orbit_arc: PI,
            anim_amplitude: 0.3,
            anim_cycles: 1.0,
            sigma_rot: 0.1,
            sigma_trans: 0.05,
            depth_noise: 0.0,
            splat_scale: 0.6,
            seed: 0,
            body: ToyBodySpec::default(),
        }
    }
}

impl SceneSpec {
    /// The 16-frame scene used for smoke runs.
    pub fn mini() -> Self {
        SceneSpec {
            frames: 16,
            width: 48,
            height: 48,
            ..SceneSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width < 8 || self.height < 8 {
            return Err(Error::Config("scene needs at least one frame of at least 8x8 pixels".into()));
        }
        let positive = [
            ("focal_per_width", self.focal_per_width),
            ("orbit_radius", self.orbit_radius),
            ("splat_scale", self.splat_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("anim_amplitude", self.anim_amplitude),
            ("sigma_rot", self.sigma_rot),
            ("sigma_trans", self.sigma_trans),
            ("depth_noise", self.depth_noise),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !self.orbit_arc.is_finite() || !self.orbit_height.is_finite() || !self.anim_cycles.is_finite() {
            return Err(Error::Config("orbit and animation parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Independent stream per purpose so changing one does not shift the others.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Flattened, normal-aligned, procedurally colored splats on every vertex.
pub fn ground_truth_cloud(body: &BodyModel, splat_scale: f64, seed: u64) -> GaussianCloud {
    let mut cloud = init_on_mesh(body);
    let edge = body.template.mean_incident_edge_length();
    let mut rng = stream(seed, 1);
    let palette: Vec<[f64; 3]> = (0..body.n_bones())
        .map(|_| [rng.random_range(0.15..0.9), rng.random_range(0.15..0.9), rng.random_range(0.15..0.9)])
        .collect();
    let ln_tau = GT_FLATNESS.ln();
    for i in 0..cloud.len() {
        let n = body.template.normals[i];
        let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let t1 = n.cross(&helper).normalize();
        let t2 = n.cross(&t1);
        let frame = Matrix3::from_columns(&[t1, t2, n]);
        cloud.quats[i] = Quaternion::from_rotmat(&frame).to_array();
        let lt = (splat_scale * edge[i].max(1e-6)).ln();
        cloud.log_scales[i] = Vector3::new(lt, lt, lt - ln_tau);
        cloud.opacity_logits[i] = logit(GT_OPACITY);
        let row = body.skin_weights.row(i);
        let bone = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
        let p = body.template.vertices[i];
        let stripe = 0.5 + 0.5 * (2.0 * PI * 6.0 * p.y).sin() * (2.0 * PI * 3.0 * (p.x + p.z)).cos();
        let base = palette[bone];
        cloud.colors[i] = base.map(|c| (c * (0.6 + 0.4 * stripe)).clamp(0.0, 1.0));
    }
    cloud
}

fn animated_pose(n_bones: usize, phases: &[Vector3<f64>], axes: &[Vector3<f64>], amp: f64, t: f64) -> PoseState {
    let mut pose = PoseState::identity(n_bones);
    for k in 0..n_bones {
        let s = (2.0 * PI * t + phases[k].x).sin();
        let scale = if k == 0 { 0.3 } else { 1.0 };
        pose.joint_rotations[k] = axes[k] * (amp * scale * s);
    }
    pose.global_translation = Vector3::new(0.05 * (2.0 * PI * t).sin(), 0.0, 0.05 * (2.0 * PI * t).cos());
    pose
}

fn orbit_camera(spec: &SceneSpec, k: usize) -> Result<Camera> {
    let frac = if spec.frames > 1 { k as f64 / (spec.frames - 1) as f64 } else { 0.0 };
    let az = spec.orbit_arc * (frac - 0.5);
    let eye = Vector3::new(spec.orbit_radius * az.sin(), spec.orbit_height, spec.orbit_radius * az.cos());
    let f = spec.focal_per_width * spec.width as f64;
    Camera::look_at(eye, Vector3::new(0.0, 0.85, 0.0), Vector3::y(), f, f, spec.width, spec.height)
}

/// Builds the body, ground-truth cloud, animation, orbit and noisy
/// initial poses; deterministic in `spec`.
pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let body = make_toy_body(&spec.body, spec.seed)?;
    let gt_cloud = ground_truth_cloud(&body, spec.splat_scale, spec.seed);
    let nb = body.n_bones();

    let mut rng = stream(spec.seed, 2);
    let phases: Vec<Vector3<f64>> = (0..nb).map(|_| Vector3::new(rng.random_range(0.0..2.0 * PI), 0.0, 0.0)).collect();
    let axes: Vec<Vector3<f64>> = (0..nb)
        .map(|_| {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() < 1e-3 { Vector3::z() } else { v.normalize() }
        })
        .collect();

    let mut noise_rng = stream(spec.seed, 3);
    let rot = Normal::new(0.0, spec.sigma_rot).map_err(|e| Error::Config(e.to_string()))?;
    let trans = Normal::new(0.0, spec.sigma_trans).map_err(|e| Error::Config(e.to_string()))?;
    let mut frames_meta = Vec::with_capacity(spec.frames);
    for k in 0..spec.frames {
        let t = spec.anim_cycles * k as f64 / spec.frames as f64;
        let gt = animated_pose(nb, &phases, &axes, spec.anim_amplitude, t);
        let mut init = gt.clone();
        for r in &mut init.joint_rotations {
            for c in r.iter_mut() {
                *c += rot.sample(&mut noise_rng);
            }
        }
        for c in init.global_translation.iter_mut() {
            *c += trans.sample(&mut noise_rng);
        }
        frames_meta.push((orbit_camera(spec, k)?, gt, init));
    }

    let settings = RenderSettings::default();
    let rendered: Vec<Result<Frame>> = frames_meta
        .into_par_iter()
        .map(|(camera, gt, init)| {
            let transforms = forward_kinematics(&body, &gt)?;
            let posed = deform_cloud(&gt_cloud, &body, &transforms, BindingMode::Camel)?;
            let out = render(&posed, &camera, &settings)?;
            let mask = out.alpha.map(|&a| a > 0.5);
            Ok(Frame {
                color: out.color,
                depth: out.depth,
                mask,
                camera,
                init_pose: init,
                gt_pose: Some(gt),
            })
        })
        .collect();
    let mut frames = rendered.into_iter().collect::<Result<Vec<_>>>()?;

    for (k, f) in frames.iter().enumerate() {
        let frac = mask_count(&f.mask) as f64 / f.mask.len() as f64;
        if frac < MIN_COVERAGE {
            return Err(Error::DegenerateScene(format!(
                "body covers {:.3}% of frame {k}, below {}%",
                100.0 * frac,
                100.0 * MIN_COVERAGE
            )));
        }
    }
    if spec.depth_noise > 0.0 {
        let mut drng = stream(spec.seed, 4);
        let d = Normal::new(0.0, spec.depth_noise).map_err(|e| Error::Config(e.to_string()))?;
        for f in &mut frames {
            for v in f.depth.as_mut_slice() {
                if *v > 0.0 {
                    *v = (*v + d.sample(&mut drng)).max(1e-6);
                }
            }
        }
    }
    let baseline = Baseline::measure(&body, &frames)?;
    Ok(Scene {
        body,
        frames,
        gt_cloud: Some(gt_cloud),
        baseline: Some(baseline),
        spec: Some(spec.clone()),
    })
}

impl Baseline {
    /// Errors of each frame's initial pose against its ground truth.
    pub fn measure(body: &BodyModel, frames: &[Frame]) -> Result<Baseline> {
        let mut per_frame_mpjpe = Vec::new();
        let mut per_frame_pa_mpjpe = Vec::new();
        for f in frames {
            let Some(gt) = &f.gt_pose else {
                return Err(Error::Domain("baseline needs ground-truth poses".into()));
            };
            let pj = joint_positions(body, &f.init_pose)?;
            let gj = joint_positions(body, gt)?;
            per_frame_mpjpe.push(mpjpe(&pj, &gj)?);
            per_frame_pa_mpjpe.push(pa_mpjpe(&pj, &gj)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok(Baseline {
            mean_mpjpe: mean(&per_frame_mpjpe),
            mean_pa_mpjpe: mean(&per_frame_pa_mpjpe),
            per_frame_mpjpe,
            per_frame_pa_mpjpe,
        })
    }
}
