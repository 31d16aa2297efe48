//! Objective terms: the mesh-embedded geometric prior (band, coverage,
//! flatness, normal alignment), photometric L1 + SSIM, masked rendered
//! depth, Gaussian-center depth, and the full weighted objective with its
//! gradient through rendering, skinning and kinematics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{
    forward_kinematics, forward_kinematics_backward, lbs_vertices, lbs_vertices_backward,
    BodyModel, PoseGrad, PoseState,
};
use crate::error::{Error, Result};
use crate::gaussians::{
    deform_cloud, deform_cloud_backward, BindingMode, CloudGrad, GaussianCloud, PosedCloud,
    PosedGrad,
};
use crate::geometry::{inverse_project, vertex_normals_backward, Neighbor, PointGrid, TriangleMesh};
use crate::hash::Fnv;
use crate::metrics::{channel, SsimChannel, Window};
use crate::raster::{ColorImage, DepthMap, Mask, Raster};
use crate::renderer::{render, render_backward, RenderOutput, RenderSettings, RenderSignature, RenderUpstream};
use crate::scene_io::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_p2mesh: f64,
    pub lambda_coverage: f64,
    pub lambda_flatness: f64,
    pub lambda_surface: f64,
    pub lambda_ssim: f64,
    pub lambda_depth: f64,
    pub lambda_camel: f64,
    /// Cloth margin: half-thickness of the band around the surface (m).
    pub delta: f64,
    /// Coverage margin (m).
    pub delta_cov: f64,
    /// Target ratio of tangent to normal scale.
    pub tau: f64,
    /// Scale of the robust center-to-depth penalty (m).
    pub eps_huber: f64,
    pub eps_alpha: f64,
    pub eps_vis: f64,
    /// Pixels added around the mask bounding box for the photometric region.
    pub region_margin: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p2mesh: 1.0,
            lambda_coverage: 1.0,
            lambda_flatness: 0.1,
            lambda_surface: 0.1,
            lambda_ssim: 0.2,
            lambda_depth: 0.5,
            lambda_camel: 1.0,
            delta: 0.02,
            delta_cov: 0.02,
            tau: 4.0,
            eps_huber: 0.01,
            eps_alpha: 1e-2,
            eps_vis: 1e-3,
            region_margin: 4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_p2mesh", self.lambda_p2mesh),
            ("lambda_coverage", self.lambda_coverage),
            ("lambda_flatness", self.lambda_flatness),
            ("lambda_surface", self.lambda_surface),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_depth", self.lambda_depth),
            ("lambda_camel", self.lambda_camel),
            ("eps_alpha", self.eps_alpha),
            ("eps_vis", self.eps_vis),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        for (name, v) in [("delta", self.delta), ("delta_cov", self.delta_cov), ("eps_huber", self.eps_huber)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.tau > 1.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must exceed 1, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            eps_alpha: self.eps_alpha,
            eps_vis: self.eps_vis,
        }
    }
}

/// Gradients of geometric terms on posed splats and the posed mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct GeomGrad {
    pub centers: Vec<Vector3<f64>>,
    pub rotations: Vec<Matrix3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub vertices: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
}

impl GeomGrad {
    pub fn zeros(n_gaussians: usize, n_vertices: usize) -> Self {
        GeomGrad {
            centers: vec![Vector3::zeros(); n_gaussians],
            rotations: vec![Matrix3::zeros(); n_gaussians],
            log_scales: vec![Vector3::zeros(); n_gaussians],
            vertices: vec![Vector3::zeros(); n_vertices],
            normals: vec![Vector3::zeros(); n_vertices],
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn nn_to_mesh(centers: &[Vector3<f64>], mesh: &TriangleMesh) -> Vec<Neighbor> {
    PointGrid::new(&mesh.vertices).nearest_many(centers)
}

fn p2mesh_acc(
    centers: &[Vector3<f64>],
    mesh: &TriangleMesh,
    nn: &[Neighbor],
    delta: f64,
    scale: f64,
    g: &mut GeomGrad,
    sig: &mut Fnv,
) -> f64 {
    if centers.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / centers.len() as f64;
    let mut total = 0.0;
    for (i, mu) in centers.iter().enumerate() {
        let j = nn[i].index;
        let n = mesh.normals[j];
        let off = mu - mesh.vertices[j];
        let d = off.dot(&n);
        sig.word(j as u64);
        let excess = d.abs() - delta;
        sig.sign(excess);
        if excess > 0.0 {
            total += excess;
            let s = sign(d) * inv * scale;
            g.centers[i] += n * s;
            g.vertices[j] -= n * s;
            g.normals[j] += off * s;
        }
    }
    total * inv
}

fn coverage_acc(
    mesh: &TriangleMesh,
    centers: &[Vector3<f64>],
    delta_cov: f64,
    scale: f64,
    g: &mut GeomGrad,
    sig: &mut Fnv,
) -> Result<f64> {
    if centers.is_empty() {
        return Err(Error::Domain("coverage is undefined for an empty cloud".into()));
    }
    if mesh.vertices.is_empty() {
        return Ok(0.0);
    }
    let nn = PointGrid::new(centers).nearest_many(&mesh.vertices);
    let inv = 1.0 / mesh.vertices.len() as f64;
    let mut total = 0.0;
    for (v, nb) in mesh.vertices.iter().zip(&nn) {
        sig.word(nb.index as u64);
        let excess = nb.distance - delta_cov;
        sig.sign(excess);
        if excess > 0.0 {
            total += excess;
            let dir = (v - centers[nb.index]) / nb.distance;
            let _ = v;
            g.centers[nb.index] -= dir * (inv * scale);
        }
    }
    // vertex gradients are added in a second pass to keep borrows simple
    for (k, nb) in nn.iter().enumerate() {
        let excess = nb.distance - delta_cov;
        if excess > 0.0 {
            let dir = (mesh.vertices[k] - centers[nb.index]) / nb.distance;
            g.vertices[k] += dir * (inv * scale);
        }
    }
    Ok(total * inv)
}

/// Axes sorted by scale, ties broken by axis index.
fn sorted_axes(ls: &Vector3<f64>) -> [usize; 3] {
    let mut ax = [0, 1, 2];
    ax.sort_by(|&a, &b| ls[a].total_cmp(&ls[b]).then(a.cmp(&b)));
    ax
}

fn flatness_acc(log_scales: &[Vector3<f64>], tau: f64, scale: f64, g: &mut GeomGrad, sig: &mut Fnv) -> f64 {
    if log_scales.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / log_scales.len() as f64;
    let lt = tau.ln();
    let mut total = 0.0;
    for (i, ls) in log_scales.iter().enumerate() {
        let [a0, a1, a2] = sorted_axes(ls);
        sig.word((a0 * 9 + a1 * 3 + a2) as u64);
        for ak in [a1, a2] {
            let r = ls[ak] - ls[a0] - lt;
            sig.sign(r);
            total += r.abs();
            let s = sign(r) * inv * scale;
            g.log_scales[i][ak] += s;
            g.log_scales[i][a0] -= s;
        }
    }
    total * inv
}

fn surface_acc(
    rotations: &[Matrix3<f64>],
    log_scales: &[Vector3<f64>],
    mesh: &TriangleMesh,
    nn: &[Neighbor],
    scale: f64,
    g: &mut GeomGrad,
    sig: &mut Fnv,
) -> f64 {
    if rotations.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / rotations.len() as f64;
    let mut total = 0.0;
    for (i, r) in rotations.iter().enumerate() {
        let axis = sorted_axes(&log_scales[i])[0];
        let a: Vector3<f64> = r.column(axis).into();
        let j = nn[i].index;
        let n = mesh.normals[j];
        let c = a.dot(&n);
        sig.word(axis as u64);
        sig.sign(c);
        total += 1.0 - c.abs();
        let s = -sign(c) * inv * scale;
        let mut col = g.rotations[i].column_mut(axis);
        col += n * s;
        g.normals[j] += a * s;
    }
    total * inv
}

/// Mean band violation of posed centers against the nearest vertex plane.
pub fn p2mesh_loss(cloud: &PosedCloud, mesh: &TriangleMesh, delta: f64) -> (f64, GeomGrad) {
    let mut g = GeomGrad::zeros(cloud.len(), mesh.len());
    let nn = nn_to_mesh(&cloud.centers, mesh);
    let v = p2mesh_acc(&cloud.centers, mesh, &nn, delta, 1.0, &mut g, &mut Fnv::new());
    (v, g)
}

/// Mean distance beyond `delta_cov` from each vertex to its nearest center.
pub fn coverage_loss(mesh: &TriangleMesh, cloud: &PosedCloud, delta_cov: f64) -> Result<(f64, GeomGrad)> {
    let mut g = GeomGrad::zeros(cloud.len(), mesh.len());
    let v = coverage_acc(mesh, &cloud.centers, delta_cov, 1.0, &mut g, &mut Fnv::new())?;
    Ok((v, g))
}

/// Penalizes deviation of both tangent-to-normal scale ratios from `tau`.
pub fn flatness_loss(log_scales: &[Vector3<f64>], tau: f64) -> (f64, Vec<Vector3<f64>>) {
    let mut g = GeomGrad::zeros(log_scales.len(), 0);
    let v = flatness_acc(log_scales, tau, 1.0, &mut g, &mut Fnv::new());
    (v, g.log_scales)
}

/// Mean misalignment of each splat's shortest axis with the nearest normal.
pub fn surface_align_loss(cloud: &PosedCloud, mesh: &TriangleMesh) -> (f64, GeomGrad) {
    let mut g = GeomGrad::zeros(cloud.len(), mesh.len());
    let nn = nn_to_mesh(&cloud.centers, mesh);
    let v = surface_acc(&cloud.rotations, &cloud.log_scales, mesh, &nn, 1.0, &mut g, &mut Fnv::new());
    (v, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CamelReport {
    pub p2mesh: f64,
    pub coverage: f64,
    pub flatness: f64,
    pub surface: f64,
    /// Weighted sum of the four terms.
    pub total: f64,
}

fn camel_acc(
    cloud: &PosedCloud,
    mesh: &TriangleMesh,
    w: &LossWeights,
    scale: f64,
    g: &mut GeomGrad,
    sig: &mut Fnv,
) -> Result<CamelReport> {
    let nn = nn_to_mesh(&cloud.centers, mesh);
    let p2mesh = p2mesh_acc(&cloud.centers, mesh, &nn, w.delta, scale * w.lambda_p2mesh, g, sig);
    let coverage = coverage_acc(mesh, &cloud.centers, w.delta_cov, scale * w.lambda_coverage, g, sig)?;
    let flatness = flatness_acc(&cloud.log_scales, w.tau, scale * w.lambda_flatness, g, sig);
    let surface = surface_acc(&cloud.rotations, &cloud.log_scales, mesh, &nn, scale * w.lambda_surface, g, sig);
    Ok(CamelReport {
        p2mesh,
        coverage,
        flatness,
        surface,
        total: w.lambda_p2mesh * p2mesh
            + w.lambda_coverage * coverage
            + w.lambda_flatness * flatness
            + w.lambda_surface * surface,
    })
}

/// Weighted mesh-embedded prior on a posed cloud and mesh.
pub fn camel_loss(cloud: &PosedCloud, mesh: &TriangleMesh, w: &LossWeights) -> Result<(CamelReport, GeomGrad)> {
    let mut g = GeomGrad::zeros(cloud.len(), mesh.len());
    let r = camel_acc(cloud, mesh, w, 1.0, &mut g, &mut Fnv::new())?;
    Ok((r, g))
}

/// Bounding box of the mask grown by `margin` pixels.
pub fn photometric_region(mask: &Mask, margin: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut lo = (usize::MAX, usize::MAX);
    let mut hi = (0, 0);
    for v in 0..h {
        for u in 0..w {
            if mask[(u, v)] {
                lo = (lo.0.min(u), lo.1.min(v));
                hi = (hi.0.max(u), hi.1.max(v));
            }
        }
    }
    let mut out = Raster::new(w, h, false);
    if lo.0 == usize::MAX {
        return out;
    }
    for v in lo.1.saturating_sub(margin)..=(hi.1 + margin).min(h - 1) {
        for u in lo.0.saturating_sub(margin)..=(hi.0 + margin).min(w - 1) {
            out[(u, v)] = true;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PhotometricTerm {
    pub value: f64,
    pub l1: f64,
    pub ssim: f64,
    pub grad: ColorImage,
    pub empty_region: bool,
}

fn photometric_impl(
    rendered: &ColorImage,
    observed: &ColorImage,
    region: &Mask,
    lambda_ssim: f64,
    sig: &mut Fnv,
) -> Result<PhotometricTerm> {
    if !rendered.same_shape(observed) || !rendered.same_shape(region) {
        return Err(Error::Shape("photometric inputs differ in size".into()));
    }
    let (w, h) = (rendered.width(), rendered.height());
    let count = region.as_slice().iter().filter(|&&m| m).count();
    let mut grad = Raster::new(w, h, [0.0; 3]);
    if count == 0 {
        return Ok(PhotometricTerm {
            value: 0.0,
            l1: 0.0,
            ssim: 1.0,
            grad,
            empty_region: true,
        });
    }
    let norm = 1.0 / (3 * count) as f64;
    let mut l1 = 0.0;
    for (p, &m) in region.as_slice().iter().enumerate() {
        if !m {
            continue;
        }
        let (r, o) = (rendered.as_slice()[p], observed.as_slice()[p]);
        for c in 0..3 {
            let d = r[c] - o[c];
            sig.sign(d);
            l1 += d.abs();
            grad.as_mut_slice()[p][c] = sign(d) * norm;
        }
    }
    l1 *= norm;
    let mut ssim = 1.0;
    if lambda_ssim > 0.0 {
        let win = Window::new(w, h);
        let weight: Vec<f64> = region.as_slice().iter().map(|&m| if m { norm } else { 0.0 }).collect();
        ssim = 0.0;
        for c in 0..3 {
            let x = channel(rendered, c);
            let y = channel(observed, c);
            let s = SsimChannel::new(&win, &x, &y);
            ssim += s.map.iter().zip(region.as_slice()).filter(|(_, &m)| m).map(|(a, _)| a).sum::<f64>();
            let gx = s.backward(&win, &x, &y, &weight);
            for (p, gp) in gx.iter().enumerate() {
                grad.as_mut_slice()[p][c] -= lambda_ssim * gp;
            }
        }
        // One division keeps identical images at exactly 1.
        ssim /= (3 * count) as f64;
    }
    Ok(PhotometricTerm {
        value: l1 + lambda_ssim * (1.0 - ssim),
        l1,
        ssim,
        grad,
        empty_region: false,
    })
}

/// L1 plus weighted structural dissimilarity over `region`.
pub fn photometric_loss(
    rendered: &ColorImage,
    observed: &ColorImage,
    region: &Mask,
    lambda_ssim: f64,
) -> Result<PhotometricTerm> {
    photometric_impl(rendered, observed, region, lambda_ssim, &mut Fnv::new())
}

fn depth2d_impl(rendered: &DepthMap, gt: &DepthMap, mask: &Mask, sig: &mut Fnv) -> Result<(f64, DepthMap)> {
    if !rendered.same_shape(gt) || !rendered.same_shape(mask) {
        return Err(Error::Shape("depth inputs differ in size".into()));
    }
    let valid: Vec<usize> = (0..gt.len())
        .filter(|&p| gt.as_slice()[p] > 0.0 && mask.as_slice()[p])
        .collect();
    let mut grad = Raster::new(gt.width(), gt.height(), 0.0);
    if valid.is_empty() {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / valid.len() as f64;
    let mut total = 0.0;
    for &p in &valid {
        let r = rendered.as_slice()[p];
        let d = r - gt.as_slice()[p];
        // rendered depth drops to 0 where coverage is below eps_alpha
        sig.sign(r);
        sig.sign(d);
        total += d.abs();
        grad.as_mut_slice()[p] = sign(d) * inv;
    }
    Ok((total * inv, grad))
}

/// Mean absolute depth error over pixels with positive truth inside the mask.
pub fn depth2d_loss(rendered: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<(f64, DepthMap)> {
    depth2d_impl(rendered, gt, mask, &mut Fnv::new())
}

/// Charbonnier-style penalty on a squared distance.
pub fn robust_penalty(u: f64, eps: f64) -> f64 {
    (u + eps * eps).sqrt() - eps
}

fn depth3d_impl(
    centers: &[Vector3<f64>],
    visibility: &[bool],
    points: &PointGrid,
    eps: f64,
    sig: &mut Fnv,
) -> (f64, Vec<Vector3<f64>>, bool) {
    let mut grad = vec![Vector3::zeros(); centers.len()];
    let visible: Vec<usize> = (0..centers.len()).filter(|&i| visibility[i]).collect();
    if visible.is_empty() || points.is_empty() {
        return (0.0, grad, true);
    }
    let queries: Vec<Vector3<f64>> = visible.iter().map(|&i| centers[i]).collect();
    let nn = points.nearest_many(&queries);
    let inv = 1.0 / (2.0 * visible.len() as f64);
    let mut total = 0.0;
    for (k, &i) in visible.iter().enumerate() {
        sig.word(nn[k].index as u64);
        let diff = centers[i] - points.points()[nn[k].index];
        let u = diff.norm_squared();
        let root = (u + eps * eps).sqrt();
        total += root - eps;
        grad[i] = diff * (inv / root);
    }
    (total * inv, grad, false)
}

/// Robust nearest-neighbor distance from visible centers to the observed
/// depth points. Returns the value, center gradients and a flag set when
/// no Gaussian is visible.
pub fn depth3d_loss(
    centers: &[Vector3<f64>],
    visibility: &[bool],
    points: &PointGrid,
    eps_huber: f64,
) -> (f64, Vec<Vector3<f64>>, bool) {
    depth3d_impl(centers, visibility, points, eps_huber, &mut Fnv::new())
}

/// Per-frame quantities derived once from the observations.
#[derive(Debug, Clone)]
pub struct FrameTargets {
    /// Observed depth back-projected to world space (masked).
    pub points: PointGrid,
    pub region: Mask,
}

impl FrameTargets {
    pub fn new(frame: &Frame, weights: &LossWeights) -> Result<Self> {
        let masked = Raster::from_vec(
            frame.depth.width(),
            frame.depth.height(),
            frame
                .depth
                .as_slice()
                .iter()
                .zip(frame.mask.as_slice())
                .map(|(&d, &m)| if m { d } else { 0.0 })
                .collect(),
        )
        .ok_or_else(|| Error::Shape("depth and mask differ in size".into()))?;
        let cam_points = inverse_project(&masked, &frame.camera)?;
        let world: Vec<Vector3<f64>> = cam_points.iter().map(|p| frame.camera.to_world(p)).collect();
        Ok(FrameTargets {
            points: PointGrid::new(&world),
            region: photometric_region(&frame.mask, weights.region_margin),
        })
    }
}

/// Which terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub weights: LossWeights,
    pub mode: BindingMode,
    pub camel: bool,
    pub depth: bool,
}

impl Objective {
    pub fn new(weights: LossWeights, mode: BindingMode) -> Self {
        Objective {
            weights,
            mode,
            camel: mode == BindingMode::Camel,
            depth: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub color: f64,
    pub l1: f64,
    pub ssim: f64,
    pub depth2d: f64,
    pub depth3d: f64,
    pub camel: CamelReport,
    pub total: f64,
    pub empty_region: bool,
    pub no_visible: bool,
}

impl LossReport {
    /// Recomputes the weighted total from the parts.
    pub fn recombine(&self, obj: &Objective) -> f64 {
        let w = &obj.weights;
        let mut t = self.color;
        if obj.depth {
            t += w.lambda_depth * (self.depth2d + self.depth3d);
        }
        if obj.camel {
            t += w.lambda_camel * self.camel.total;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub cloud: CloudGrad,
    pub pose: PoseGrad,
}

/// Discrete state of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub render: RenderSignature,
    pub terms: u64,
    pub lsw: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: LossReport,
    pub grad: Option<GradientBundle>,
    pub signature: Signature,
    pub render: RenderOutput,
    pub posed: PosedCloud,
    pub mesh: TriangleMesh,
}

/// Evaluates the full objective for one frame, with gradients when asked.
pub fn evaluate(
    frame: &Frame,
    targets: &FrameTargets,
    cloud: &GaussianCloud,
    body: &BodyModel,
    pose: &PoseState,
    obj: &Objective,
    want_grad: bool,
) -> Result<Evaluation> {
    let w = &obj.weights;
    let transforms = forward_kinematics(body, pose)?;
    let mesh = lbs_vertices(body, &transforms);
    let posed = deform_cloud(cloud, body, &transforms, obj.mode)?;
    let out = render(&posed, &frame.camera, &w.render_settings())?;
    let mut sig = Fnv::new();

    let photo = photometric_impl(&out.color, &frame.color, &targets.region, w.lambda_ssim, &mut sig)?;
    let mut report = LossReport {
        color: photo.value,
        l1: photo.l1,
        ssim: photo.ssim,
        empty_region: photo.empty_region,
        ..Default::default()
    };
    let mut upstream = RenderUpstream {
        color: Some(photo.grad),
        ..Default::default()
    };
    let mut depth3d_grad = None;
    if obj.depth {
        let (d2, mut g2) = depth2d_impl(&out.depth, &frame.depth, &frame.mask, &mut sig)?;
        for g in g2.as_mut_slice() {
            *g *= w.lambda_depth;
        }
        upstream.depth = Some(g2);
        let (d3, g3, none) = depth3d_impl(&posed.centers, &out.visibility, &targets.points, w.eps_huber, &mut sig);
        report.depth2d = d2;
        report.depth3d = d3;
        report.no_visible = none;
        depth3d_grad = Some(g3);
    }
    let mut geom = GeomGrad::zeros(posed.len(), mesh.len());
    if obj.camel {
        report.camel = camel_acc(&posed, &mesh, w, w.lambda_camel, &mut geom, &mut sig)?;
    }
    report.total = report.recombine(obj);

    let grad = if want_grad {
        let mut pg: PosedGrad = render_backward(&posed, &frame.camera, &out, &upstream)?;
        if let Some(g3) = depth3d_grad {
            for (a, b) in pg.centers.iter_mut().zip(g3) {
                *a += b * w.lambda_depth;
            }
        }
        if obj.camel {
            for i in 0..posed.len() {
                pg.centers[i] += geom.centers[i];
                pg.rotations[i] += geom.rotations[i];
                pg.log_scales[i] += geom.log_scales[i];
            }
        }
        let (cloud_grad, mut bone_grads) = deform_cloud_backward(cloud, &transforms, &posed, obj.mode, &pg)?;
        if obj.camel {
            let mut gv = vertex_normals_backward(&mesh.vertices, &mesh.faces, &geom.normals);
            for (a, b) in gv.iter_mut().zip(&geom.vertices) {
                *a += b;
            }
            bone_grads.add_assign(&lbs_vertices_backward(body, &gv));
        }
        let pose_grad = forward_kinematics_backward(body, pose, &transforms, &bone_grads);
        Some(GradientBundle {
            cloud: cloud_grad,
            pose: pose_grad,
        })
    } else {
        None
    };
    Ok(Evaluation {
        report,
        grad,
        signature: Signature {
            render: out.signature.clone(),
            terms: sig.0,
            lsw: posed.lsw_signature(),
        },
        render: out,
        posed,
        mesh,
    })
}

/// Full objective and its gradient for one frame.
pub fn total_loss(
    frame: &Frame,
    targets: &FrameTargets,
    cloud: &GaussianCloud,
    body: &BodyModel,
    pose: &PoseState,
    obj: &Objective,
) -> Result<(LossReport, GradientBundle)> {
    let e = evaluate(frame, targets, cloud, body, pose, obj, true)?;
    Ok((e.report, e.grad.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{make_toy_body, BoneTransforms, ToyBodySpec};
    use crate::gaussians::init_on_mesh;
    use crate::metrics::tests::{random_image, reference_ssim_map};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (BodyModel, GaussianCloud, PosedCloud, TriangleMesh) {
        let body = make_toy_body(&ToyBodySpec::default(), 0).unwrap();
        let cloud = init_on_mesh(&body);
        let t = BoneTransforms::identity(body.n_bones());
        let posed = deform_cloud(&cloud, &body, &t, BindingMode::Camel).unwrap();
        let mesh = lbs_vertices(&body, &t);
        (body, cloud, posed, mesh)
    }

    #[test]
    fn on_mesh_init_has_zero_band_and_coverage() {
        let (_, _, posed, mesh) = toy();
        assert_eq!(p2mesh_loss(&posed, &mesh, 0.02).0, 0.0);
        assert_eq!(coverage_loss(&mesh, &posed, 0.02).unwrap().0, 0.0);
    }

    #[test]
    fn band_hinge_examples() {
        let (_, _, mut posed, mesh) = toy();
        posed.centers.truncate(1);
        posed.rotations.truncate(1);
        posed.log_scales.truncate(1);
        let n = mesh.normals[0];
        let delta = 0.02;
        posed.centers[0] = mesh.vertices[0] + n * (delta / 2.0);
        assert_eq!(p2mesh_loss(&posed, &mesh, delta).0, 0.0);
        posed.centers[0] = mesh.vertices[0] + n * (2.0 * delta);
        let (v, g) = p2mesh_loss(&posed, &mesh, delta);
        assert!((v - delta).abs() < 1e-12);
        assert!((g.centers[0] - n).norm() < 1e-12);
    }

    #[test]
    fn coverage_examples() {
        let mesh = TriangleMesh::new(vec![Vector3::new(0.02, 0.0, 0.0)], vec![]).unwrap();
        let body = make_toy_body(&ToyBodySpec::minimal(), 0).unwrap();
        let mut cloud = init_on_mesh(&body);
        let t = BoneTransforms::identity(body.n_bones());
        let mut posed = deform_cloud(&cloud, &body, &t, BindingMode::Camel).unwrap();
        posed.centers = vec![Vector3::zeros()];
        assert_eq!(coverage_loss(&mesh, &posed, 0.02).unwrap().0, 0.0);
        let far = TriangleMesh::new(vec![Vector3::new(0.0, 1.02, 0.0)], vec![]).unwrap();
        assert!((coverage_loss(&far, &posed, 0.02).unwrap().0 - 1.0).abs() < 1e-12);
        posed.centers.clear();
        assert!(matches!(coverage_loss(&mesh, &posed, 0.02), Err(Error::Domain(_))));
        cloud.centers.clear();
    }

    #[test]
    fn flatness_examples() {
        let tau: f64 = 4.0;
        let l = |s: [f64; 3]| Vector3::new(s[0].ln(), s[1].ln(), s[2].ln());
        assert!(flatness_loss(&[l([1.0, tau, tau])], tau).0.abs() < 1e-12);
        assert!((flatness_loss(&[l([1.0, 1.0, 1.0])], tau).0 - 2.0 * tau.ln()).abs() < 1e-12);
        assert!((flatness_loss(&[l([1.0, tau * tau, tau])], tau).0 - tau.ln()).abs() < 1e-12);
    }

    #[test]
    fn surface_alignment_examples() {
        let (_, _, mut posed, mesh) = toy();
        posed.centers.truncate(1);
        posed.centers[0] = mesh.vertices[0];
        posed.rotations.truncate(1);
        posed.log_scales.truncate(1);
        posed.log_scales[0] = Vector3::new(-3.0, -4.0, -3.0);
        let n = mesh.normals[0];
        let frame_with_y = |y: Vector3<f64>| {
            let x = y.cross(&Vector3::new(0.3, 0.5, 0.8)).normalize();
            let z = x.cross(&y);
            Matrix3::from_columns(&[x, y, z])
        };
        posed.rotations[0] = frame_with_y(n);
        assert!(surface_align_loss(&posed, &mesh).0.abs() < 1e-12);
        let orth = n.cross(&Vector3::new(0.3, 0.5, 0.8)).normalize();
        posed.rotations[0] = frame_with_y(orth);
        assert!((surface_align_loss(&posed, &mesh).0 - 1.0).abs() < 1e-12);
        let sixty = (n * 0.5 + orth * (3f64.sqrt() / 2.0)).normalize();
        posed.rotations[0] = frame_with_y(sixty);
        assert!((surface_align_loss(&posed, &mesh).0 - 0.5).abs() < 1e-12);
    }

    fn perturbed() -> (BodyModel, GaussianCloud, PosedCloud, TriangleMesh) {
        let (body, mut cloud, _, _) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..cloud.len() {
            cloud.centers[i] += Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
            cloud.quats[i] = [1.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            cloud.log_scales[i] += Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let t = BoneTransforms::identity(body.n_bones());
        let posed = deform_cloud(&cloud, &body, &t, BindingMode::Camel).unwrap();
        let mesh = lbs_vertices(&body, &t);
        (body, cloud, posed, mesh)
    }

    #[test]
    fn camel_recombines_and_selects() {
        let (_, _, posed, mesh) = perturbed();
        let w = LossWeights::default();
        let (r, _) = camel_loss(&posed, &mesh, &w).unwrap();
        let sum = w.lambda_p2mesh * p2mesh_loss(&posed, &mesh, w.delta).0
            + w.lambda_coverage * coverage_loss(&mesh, &posed, w.delta_cov).unwrap().0
            + w.lambda_flatness * flatness_loss(&posed.log_scales, w.tau).0
            + w.lambda_surface * surface_align_loss(&posed, &mesh).0;
        assert!((r.total - sum).abs() < 1e-12);
        let zero = LossWeights {
            lambda_p2mesh: 0.0,
            lambda_coverage: 0.0,
            lambda_flatness: 0.0,
            lambda_surface: 0.0,
            ..w
        };
        assert_eq!(camel_loss(&posed, &mesh, &zero).unwrap().0.total, 0.0);
        let only = LossWeights {
            lambda_p2mesh: 1.0,
            ..zero
        };
        assert_eq!(camel_loss(&posed, &mesh, &only).unwrap().0.total, p2mesh_loss(&posed, &mesh, w.delta).0);
    }

    #[test]
    fn camel_gradients_match_finite_differences() {
        let (_, _, posed, mesh) = perturbed();
        let w = LossWeights::default();
        let (_, g) = camel_loss(&posed, &mesh, &w).unwrap();
        let f = |p: &PosedCloud, m: &TriangleMesh| camel_loss(p, m, &w).unwrap().0.total;
        let sig = |p: &PosedCloud, m: &TriangleMesh| {
            let mut s = Fnv::new();
            camel_acc(p, m, &w, 1.0, &mut GeomGrad::zeros(p.len(), m.len()), &mut s).unwrap();
            s.0
        };
        let base = sig(&posed, &mesh);
        let h = 1e-6;
        let mut worst = 0.0f64;
        let mut n_checked = 0;
        for i in (0..posed.len()).step_by(7) {
            for d in 0..3 {
                let (mut p, mut m) = (posed.clone(), posed.clone());
                p.centers[i][d] += h;
                m.centers[i][d] -= h;
                if sig(&p, &mesh) == base && sig(&m, &mesh) == base {
                    let fd = (f(&p, &mesh) - f(&m, &mesh)) / (2.0 * h);
                    worst = worst.max((fd - g.centers[i][d]).abs());
                    n_checked += 1;
                }
                let (mut p, mut m) = (posed.clone(), posed.clone());
                p.log_scales[i][d] += h;
                m.log_scales[i][d] -= h;
                if sig(&p, &mesh) == base && sig(&m, &mesh) == base {
                    let fd = (f(&p, &mesh) - f(&m, &mesh)) / (2.0 * h);
                    worst = worst.max((fd - g.log_scales[i][d]).abs());
                }
                for r in 0..3 {
                    let (mut p, mut m) = (posed.clone(), posed.clone());
                    p.rotations[i][(r, d)] += h;
                    m.rotations[i][(r, d)] -= h;
                    let fd = (f(&p, &mesh) - f(&m, &mesh)) / (2.0 * h);
                    worst = worst.max((fd - g.rotations[i][(r, d)]).abs());
                }
            }
        }
        for j in (0..mesh.len()).step_by(11) {
            for d in 0..3 {
                let (mut p, mut m) = (mesh.clone(), mesh.clone());
                p.vertices[j][d] += h;
                m.vertices[j][d] -= h;
                let fd = (f(&posed, &p) - f(&posed, &m)) / (2.0 * h);
                worst = worst.max((fd - g.vertices[j][d]).abs());
                let (mut p, mut m) = (mesh.clone(), mesh.clone());
                p.normals[j][d] += h;
                m.normals[j][d] -= h;
                let fd = (f(&posed, &p) - f(&posed, &m)) / (2.0 * h);
                worst = worst.max((fd - g.normals[j][d]).abs());
            }
        }
        assert!(n_checked > 100);
        assert!(worst < 1e-7, "worst abs error {worst}");
    }

    #[test]
    fn photometric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(16, 16, &mut rng).map(|p| [p[0] * 0.8, p[1] * 0.8, p[2] * 0.8]);
        let region = Raster::new(16, 16, true);
        let t = photometric_loss(&a, &a, &region, 0.2).unwrap();
        assert!(t.value.abs() < 1e-12);
        let b = a.map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]);
        let t = photometric_loss(&b, &a, &region, 0.0).unwrap();
        assert!((t.value - 0.1).abs() < 1e-12);
        let t = photometric_loss(&b, &a, &Raster::new(16, 16, false), 0.2).unwrap();
        assert!(t.empty_region && t.value == 0.0);
    }

    #[test]
    fn photometric_ssim_matches_reference_on_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(18, 14, &mut rng);
        let b = random_image(18, 14, &mut rng);
        let mut mask = Raster::new(18, 14, false);
        mask[(7, 6)] = true;
        mask[(9, 8)] = true;
        let region = photometric_region(&mask, 2);
        let count = region.as_slice().iter().filter(|&&m| m).count();
        assert_eq!(count, 7 * 7);
        let t = photometric_loss(&a, &b, &region, 0.3).unwrap();
        let mut want = 0.0;
        for c in 0..3 {
            let map = reference_ssim_map(&channel(&a, c), &channel(&b, c), 18, 14);
            want += map.iter().zip(region.as_slice()).filter(|(_, &m)| m).map(|(s, _)| s).sum::<f64>();
        }
        want /= (3 * count) as f64;
        assert!((t.ssim - want).abs() < 1e-12);
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(14, 12, &mut rng);
        let b = random_image(14, 12, &mut rng);
        let mut mask = Raster::new(14, 12, false);
        mask[(5, 5)] = true;
        let region = photometric_region(&mask, 3);
        let t = photometric_loss(&a, &b, &region, 0.2).unwrap();
        let h = 1e-6;
        for p in 0..a.len() {
            for c in 0..3 {
                let mut ap = a.clone();
                ap.as_mut_slice()[p][c] += h;
                let mut am = a.clone();
                am.as_mut_slice()[p][c] -= h;
                let fd = (photometric_loss(&ap, &b, &region, 0.2).unwrap().value
                    - photometric_loss(&am, &b, &region, 0.2).unwrap().value)
                    / (2.0 * h);
                assert!((fd - t.grad.as_slice()[p][c]).abs() < 1e-7, "pixel {p} channel {c}");
            }
        }
    }

    #[test]
    fn depth2d_examples() {
        let gt = Raster::new(4, 4, 2.0);
        let mask = Raster::new(4, 4, true);
        assert_eq!(depth2d_loss(&gt, &gt, &mask).unwrap().0, 0.0);
        let zero = Raster::new(4, 4, 0.0);
        assert_eq!(depth2d_loss(&gt, &zero, &mask).unwrap().0, 0.0);
        let mut one = Raster::new(4, 4, 0.0);
        one[(1, 2)] = 1.0;
        let mut r = Raster::new(4, 4, 5.0);
        r[(1, 2)] = 1.25;
        assert!((depth2d_loss(&r, &one, &mask).unwrap().0 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn depth3d_examples() {
        let pts = PointGrid::new(&[Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0)]);
        let at = vec![Vector3::new(0.0, 0.0, 1.0)];
        assert_eq!(depth3d_loss(&at, &[true], &pts, 0.01).0, 0.0);
        assert_eq!(depth3d_loss(&at, &[true], &pts, 0.02).0, 0.0);
        let eps = 0.01;
        let off = vec![Vector3::new(0.0, eps, 1.0)];
        let (v, _, _) = depth3d_loss(&off, &[true], &pts, eps);
        assert!((v - (2f64.sqrt() - 1.0) * eps / 2.0).abs() < 1e-15);
        let (v, _, none) = depth3d_loss(&off, &[false], &pts, eps);
        assert!(v == 0.0 && none);
    }

    #[test]
    fn depth3d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Vector3<f64>> = (0..200).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0))).collect();
        let grid = PointGrid::new(&pts);
        let centers: Vec<Vector3<f64>> = (0..30).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0))).collect();
        let vis: Vec<bool> = (0..30).map(|i| i % 3 != 0).collect();
        let (_, g, _) = depth3d_loss(&centers, &vis, &grid, 0.01);
        let h = 1e-7;
        for i in 0..30 {
            for d in 0..3 {
                let mut p = centers.clone();
                p[i][d] += h;
                let mut m = centers.clone();
                m[i][d] -= h;
                let fd = (depth3d_loss(&p, &vis, &grid, 0.01).0 - depth3d_loss(&m, &vis, &grid, 0.01).0) / (2.0 * h);
                assert!((fd - g[i][d]).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn band_and_coverage_are_rigid_invariant(seed in 0u64..1000, ax in -2.0f64..2.0, ay in -2.0f64..2.0) {
            let (_, _, posed, mesh) = perturbed();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = nalgebra::Rotation3::new(Vector3::new(ax, ay, rng.random_range(-1.0..1.0))).into_inner();
            let t = Vector3::new(rng.random_range(-1.0..1.0), 0.5, 2.0);
            let mut p2 = posed.clone();
            for c in &mut p2.centers {
                *c = r * *c + t;
            }
            let m2 = mesh.with_vertices(mesh.vertices.iter().map(|v| r * v + t).collect());
            let a = p2mesh_loss(&posed, &mesh, 0.02).0;
            let b = p2mesh_loss(&p2, &m2, 0.02).0;
            prop_assert!((a - b).abs() < 1e-9);
            let a = coverage_loss(&mesh, &posed, 0.02).unwrap().0;
            let b = coverage_loss(&m2, &p2, 0.02).unwrap().0;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn flatness_ignores_uniform_scaling(s0 in -3.0f64..0.0, s1 in -3.0f64..0.0, s2 in -3.0f64..0.0, k in -2.0f64..2.0) {
            let a = flatness_loss(&[Vector3::new(s0, s1, s2)], 4.0).0;
            let b = flatness_loss(&[Vector3::new(s0 + k, s1 + k, s2 + k)], 4.0).0;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn camel_is_linear_in_weights(l1 in 0.0f64..3.0, l2 in 0.0f64..3.0, l3 in 0.0f64..3.0, l4 in 0.0f64..3.0) {
            let (_, _, posed, mesh) = perturbed();
            let w = LossWeights { lambda_p2mesh: l1, lambda_coverage: l2, lambda_flatness: l3, lambda_surface: l4, ..Default::default() };
            let (r, _) = camel_loss(&posed, &mesh, &w).unwrap();
            let w2 = LossWeights { lambda_p2mesh: 2.0 * l1, lambda_coverage: 2.0 * l2, lambda_flatness: 2.0 * l3, lambda_surface: 2.0 * l4, ..w };
            let (r2, _) = camel_loss(&posed, &mesh, &w2).unwrap();
            prop_assert!((r2.total - 2.0 * r.total).abs() < 1e-12 * (1.0 + r.total));
        }
    }
}
