//! Differentiable splat rasterizer.
//!
//! Each Gaussian is projected with the local affine approximation of the
//! pinhole map, depth sorted once, and alpha composited front to back per
//! pixel. Footprints use a C¹ truncation of the Gaussian at a Mahalanobis
//! radius of 3, so the image is continuously differentiable in every
//! parameter and the 3σ bounding box is exact.
//!
//! Work is split into fixed 8-row bands. Per-band gradient buffers are
//! merged in band order, so results do not depend on the thread count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::{sigmoid, PosedCloud, PosedGrad};
use crate::geometry::{Camera, NEAR_PLANE};
use crate::hash::Fnv;
use crate::raster::{ColorImage, DepthMap, Raster};

pub const TILE: usize = 8;
/// Squared Mahalanobis radius where the footprint reaches zero.
pub const CUTOFF_Q: f64 = 9.0;
pub const ALPHA_MAX: f64 = 0.99;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Screen-space low-pass dilation added to every projected covariance (px²).
pub const DILATION: f64 = 0.3;
/// Real spherical-harmonic constant of the degree-1 band.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Minimum accumulated weight for a pixel to carry depth. Below about
    /// 1e-2 the normalized depth becomes too curved for finite differences.
    pub eps_alpha: f64,
    /// Minimum total weight for a Gaussian to count as visible.
    pub eps_vis: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            eps_alpha: 1e-2,
            eps_vis: 1e-3,
        }
    }
}

/// Footprint value and derivative with respect to `q`.
pub fn kernel(q: f64) -> (f64, f64) {
    if q >= CUTOFF_Q {
        return (0.0, 0.0);
    }
    let ec = (-0.5 * CUTOFF_Q).exp();
    let norm = 1.0 - ec * (1.0 + 0.5 * CUTOFF_Q);
    let e = (-0.5 * q).exp();
    (
        (e - ec + 0.5 * ec * (q - CUTOFF_Q)) / norm,
        0.5 * (ec - e) / norm,
    )
}

/// Projected splat. `index` refers to the posed cloud.
#[derive(Debug, Clone)]
struct Splat {
    index: usize,
    cam: Vector3<f64>,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    jac: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    opacity: f64,
    color: [f64; 3],
    /// Unit view direction, present only with degree-1 color.
    dir: Option<(Vector3<f64>, f64)>,
    x_range: (usize, usize),
    y_range: (usize, usize),
}

fn view_color(base: &[f64; 3], sh: &[[f64; 3]; 3], d: &Vector3<f64>) -> [f64; 3] {
    let b = [-d.y, d.z, -d.x];
    let mut c = *base;
    for k in 0..3 {
        for ch in 0..3 {
            c[ch] += SH_C1 * b[k] * sh[k][ch];
        }
    }
    c
}

fn project(cloud: &PosedCloud, cam: &Camera) -> (Vec<Splat>, Vec<bool>) {
    let n = cloud.len();
    let rw = cam.world_to_camera.rotation;
    let eye = cam.center();
    let mut out = Vec::with_capacity(n);
    let mut culled = vec![true; n];
    for i in 0..n {
        let mu = cloud.centers[i];
        let p = cam.to_camera(&mu);
        if !(p.z > NEAR_PLANE) {
            continue;
        }
        let (x, y, z) = (p.x, p.y, p.z);
        let jac = Matrix2x3::new(
            cam.fx / z,
            0.0,
            -cam.fx * x / (z * z),
            0.0,
            cam.fy / z,
            -cam.fy * y / (z * z),
        );
        let s2 = cloud.log_scales[i].map(|l| (2.0 * l).exp());
        let r = rw * cloud.rotations[i];
        let cov_cam = r * Matrix3::from_diagonal(&s2) * r.transpose();
        let cov2 = jac * cov_cam * jac.transpose() + Matrix2::identity() * DILATION;
        let det = cov2.determinant();
        if !(det > 0.0) {
            continue;
        }
        let conic = Matrix2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(1, 0)], cov2[(0, 0)]) / det;
        let mean = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
        let ru = (CUTOFF_Q * cov2[(0, 0)]).sqrt();
        let rv = (CUTOFF_Q * cov2[(1, 1)]).sqrt();
        let lo_u = (mean.x - ru).ceil().max(0.0);
        let hi_u = (mean.x + ru).floor().min(cam.width as f64 - 1.0);
        let lo_v = (mean.y - rv).ceil().max(0.0);
        let hi_v = (mean.y + rv).floor().min(cam.height as f64 - 1.0);
        if !(lo_u <= hi_u && lo_v <= hi_v) {
            continue;
        }
        let (color, dir) = match &cloud.sh1 {
            Some(sh) => {
                let v = mu - eye;
                let len = v.norm();
                let d = v / len;
                (view_color(&cloud.colors[i], &sh[i], &d), Some((d, len)))
            }
            None => (cloud.colors[i], None),
        };
        culled[i] = false;
        out.push(Splat {
            index: i,
            cam: p,
            mean,
            conic,
            jac,
            cov_cam,
            opacity: sigmoid(cloud.opacity_logits[i]),
            color,
            dir,
            x_range: (lo_u as usize, hi_u as usize),
            y_range: (lo_v as usize, hi_v as usize),
        });
    }
    out.sort_by(|a, b| a.cam.z.total_cmp(&b.cam.z).then(a.index.cmp(&b.index)));
    (out, culled)
}

/// Splat lists per tile, in depth order.
fn bin(splats: &[Splat], width: usize, height: usize) -> (usize, Vec<Vec<u32>>) {
    let tx = width.div_ceil(TILE);
    let ty = height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tx * ty];
    for (s, sp) in splats.iter().enumerate() {
        for ty_i in sp.y_range.0 / TILE..=sp.y_range.1 / TILE {
            for tx_i in sp.x_range.0 / TILE..=sp.x_range.1 / TILE {
                tiles[ty_i * tx + tx_i].push(s as u32);
            }
        }
    }
    (tx, tiles)
}

/// Discrete state of a forward pass; finite-difference probes that change
/// it straddle a non-differentiable event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderSignature {
    pub order: Vec<u32>,
    pub culled: Vec<bool>,
    pub visible: Vec<bool>,
    /// Hash of alpha clamps and early exits. Which pixels carry a valid
    /// depth is visible in `depth` itself (0 where invalid).
    pub events: u64,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ColorImage,
    pub depth: DepthMap,
    pub alpha: Raster<f64>,
    pub visibility: Vec<bool>,
    /// Total compositing weight each Gaussian contributed.
    pub contribution: Vec<f64>,
    pub signature: RenderSignature,
    weight_sum: Raster<f64>,
    depth_sum: Raster<f64>,
    settings: RenderSettings,
    fingerprint: u64,
}

/// Upstream gradients on the rendered images; absent images count as zero.
#[derive(Debug, Clone, Default)]
pub struct RenderUpstream {
    pub color: Option<ColorImage>,
    pub depth: Option<DepthMap>,
    pub alpha: Option<Raster<f64>>,
}

fn fingerprint(cloud: &PosedCloud, cam: &Camera) -> u64 {
    let mut h = Fnv::new();
    h.word(cloud.len() as u64);
    for i in 0..cloud.len() {
        cloud.centers[i].iter().for_each(|&x| h.f(x));
        cloud.rotations[i].iter().for_each(|&x| h.f(x));
        cloud.log_scales[i].iter().for_each(|&x| h.f(x));
        h.f(cloud.opacity_logits[i]);
        cloud.colors[i].iter().for_each(|&x| h.f(x));
    }
    if let Some(sh) = &cloud.sh1 {
        sh.iter().flatten().flatten().for_each(|&x| h.f(x));
    }
    for x in [cam.fx, cam.fy, cam.cx, cam.cy] {
        h.f(x);
    }
    h.word(cam.width as u64);
    h.word(cam.height as u64);
    cam.world_to_camera.rotation.iter().for_each(|&x| h.f(x));
    cam.world_to_camera.translation.iter().for_each(|&x| h.f(x));
    h.0
}

/// One composited layer at a pixel.
#[derive(Debug, Clone, Copy)]
struct Layer {
    splat: u32,
    alpha: f64,
    /// Transmittance in front of this layer.
    trans: f64,
    footprint: f64,
    dfootprint: f64,
    offset: Vector2<f64>,
    clamped: bool,
}

/// Front-to-back compositing at pixel `(u, v)`; returns the final
/// transmittance and whether the loop stopped early.
fn composite(splats: &[Splat], list: &[u32], u: usize, v: usize, layers: &mut Vec<Layer>) -> (f64, bool) {
    layers.clear();
    let px = Vector2::new(u as f64, v as f64);
    let mut t = 1.0;
    for &s in list {
        let sp = &splats[s as usize];
        if u < sp.x_range.0 || u > sp.x_range.1 || v < sp.y_range.0 || v > sp.y_range.1 {
            continue;
        }
        let d = px - sp.mean;
        let q = d.dot(&(sp.conic * d));
        let (g, dg) = kernel(q);
        if g <= 0.0 {
            continue;
        }
        let raw = sp.opacity * g;
        let clamped = raw > ALPHA_MAX;
        let a = if clamped { ALPHA_MAX } else { raw };
        layers.push(Layer {
            splat: s,
            alpha: a,
            trans: t,
            footprint: g,
            dfootprint: dg,
            offset: d,
            clamped,
        });
        t *= 1.0 - a;
        if t < TRANSMITTANCE_MIN {
            return (t, true);
        }
    }
    (t, false)
}

struct BandForward {
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    wsum: Vec<f64>,
    zsum: Vec<f64>,
    contribution: Vec<(u32, f64)>,
    events: Vec<u64>,
}

pub fn render(cloud: &PosedCloud, cam: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    cam.validate()?;
    let n = cloud.len();
    let (w, h) = (cam.width, cam.height);
    let (splats, culled) = project(cloud, cam);
    let (tx, tiles) = bin(&splats, w, h);
    let bands: Vec<BandForward> = (0..h.div_ceil(TILE))
        .into_par_iter()
        .map(|band| {
            let rows = band * TILE..((band + 1) * TILE).min(h);
            let len = rows.len() * w;
            let mut out = BandForward {
                color: vec![[0.0; 3]; len],
                depth: vec![0.0; len],
                alpha: vec![0.0; len],
                wsum: vec![0.0; len],
                zsum: vec![0.0; len],
                contribution: Vec::new(),
                events: Vec::new(),
            };
            let mut contrib = vec![0.0; splats.len()];
            let mut touched = Vec::new();
            let mut layers = Vec::new();
            for v in rows.clone() {
                for u in 0..w {
                    let list = &tiles[(v / TILE) * tx + u / TILE];
                    let (t, early) = composite(&splats, list, u, v, &mut layers);
                    let pix = (v - rows.start) * w + u;
                    let mut c = [0.0; 3];
                    let (mut ws, mut zs) = (0.0, 0.0);
                    for (li, l) in layers.iter().enumerate() {
                        let sp = &splats[l.splat as usize];
                        let wt = l.alpha * l.trans;
                        for ch in 0..3 {
                            c[ch] += sp.color[ch] * wt;
                        }
                        ws += wt;
                        zs += sp.cam.z * wt;
                        if contrib[l.splat as usize] == 0.0 {
                            touched.push(l.splat);
                        }
                        contrib[l.splat as usize] += wt;
                        if l.clamped {
                            out.events.push(((v * w + u) as u64) << 20 | li as u64 | 1 << 62);
                        }
                    }
                    if early {
                        out.events.push(((v * w + u) as u64) << 20 | layers.len() as u64 | 1 << 61);
                    }
                    let valid = ws > settings.eps_alpha;
                    out.color[pix] = c;
                    out.depth[pix] = if valid { zs / ws } else { 0.0 };
                    out.alpha[pix] = 1.0 - t;
                    out.wsum[pix] = ws;
                    out.zsum[pix] = zs;
                }
            }
            touched.sort_unstable();
            out.contribution = touched.into_iter().map(|s| (s, contrib[s as usize])).collect();
            out
        })
        .collect();

    let mut color = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut alpha = Vec::with_capacity(w * h);
    let mut wsum = Vec::with_capacity(w * h);
    let mut zsum = Vec::with_capacity(w * h);
    let mut contribution = vec![0.0; n];
    let mut events = Fnv::new();
    for b in bands {
        color.extend(b.color);
        depth.extend(b.depth);
        alpha.extend(b.alpha);
        wsum.extend(b.wsum);
        zsum.extend(b.zsum);
        for (s, c) in b.contribution {
            contribution[splats[s as usize].index] += c;
        }
        for e in b.events {
            events.word(e);
        }
    }
    let visibility: Vec<bool> = contribution.iter().map(|&c| c > settings.eps_vis).collect();
    Ok(RenderOutput {
        color: Raster::from_vec(w, h, color).expect("color size"),
        depth: Raster::from_vec(w, h, depth).expect("depth size"),
        alpha: Raster::from_vec(w, h, alpha).expect("alpha size"),
        signature: RenderSignature {
            order: splats.iter().map(|s| s.index as u32).collect(),
            culled,
            visible: visibility.clone(),
            events: events.0,
        },
        visibility,
        contribution,
        weight_sum: Raster::from_vec(w, h, wsum).expect("weight size"),
        depth_sum: Raster::from_vec(w, h, zsum).expect("depth sum size"),
        settings: *settings,
        fingerprint: fingerprint(cloud, cam),
    })
}

/// Screen-space gradients of one splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector2<f64>,
    /// Gradient with respect to the full (symmetric) conic matrix.
    conic: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
    z: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.opacity += o.opacity;
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
        self.z += o.z;
    }
}

/// Reverse pass of [`render`] for the same cloud and camera.
pub fn render_backward(
    cloud: &PosedCloud,
    cam: &Camera,
    forward: &RenderOutput,
    upstream: &RenderUpstream,
) -> Result<PosedGrad> {
    if fingerprint(cloud, cam) != forward.fingerprint {
        return Err(Error::ContractViolation(
            "render_backward inputs differ from the forward pass".into(),
        ));
    }
    let (w, h) = (cam.width, cam.height);
    for (name, ok) in [
        ("color", upstream.color.as_ref().is_none_or(|g| g.width() == w && g.height() == h)),
        ("depth", upstream.depth.as_ref().is_none_or(|g| g.width() == w && g.height() == h)),
        ("alpha", upstream.alpha.as_ref().is_none_or(|g| g.width() == w && g.height() == h)),
    ] {
        if !ok {
            return Err(Error::Shape(format!("upstream {name} gradient does not match the image")));
        }
    }
    let n = cloud.len();
    let mut out = PosedGrad::zeros(n, cloud.sh1.is_some());
    let (splats, _) = project(cloud, cam);
    let (tx, tiles) = bin(&splats, w, h);
    let eps_alpha = forward.settings.eps_alpha;

    let bands: Vec<Vec<(u32, SplatGrad)>> = (0..h.div_ceil(TILE))
        .into_par_iter()
        .map(|band| {
            let rows = band * TILE..((band + 1) * TILE).min(h);
            let mut acc = vec![SplatGrad::default(); splats.len()];
            let mut touched = vec![false; splats.len()];
            let mut layers = Vec::new();
            for v in rows {
                for u in 0..w {
                    let gc = upstream.color.as_ref().map_or([0.0; 3], |g| g[(u, v)]);
                    let gd = upstream.depth.as_ref().map_or(0.0, |g| g[(u, v)]);
                    let ga = upstream.alpha.as_ref().map_or(0.0, |g| g[(u, v)]);
                    if gc == [0.0; 3] && gd == 0.0 && ga == 0.0 {
                        continue;
                    }
                    let list = &tiles[(v / TILE) * tx + u / TILE];
                    let (t_final, _) = composite(&splats, list, u, v, &mut layers);
                    let ws = forward.weight_sum[(u, v)];
                    let (gz, gw) = if ws > eps_alpha {
                        let zs = forward.depth_sum[(u, v)];
                        (gd / ws, -gd * zs / (ws * ws))
                    } else {
                        (0.0, 0.0)
                    };
                    // suffix sum of e_j w_j over layers behind the current one
                    let mut suffix = -ga * t_final;
                    for l in layers.iter().rev() {
                        let si = l.splat as usize;
                        let sp = &splats[si];
                        let wt = l.alpha * l.trans;
                        let e = gc[0] * sp.color[0]
                            + gc[1] * sp.color[1]
                            + gc[2] * sp.color[2]
                            + gz * sp.cam.z
                            + gw;
                        let g_alpha = e * l.trans - suffix / (1.0 - l.alpha);
                        suffix += e * wt;
                        let a = &mut acc[si];
                        touched[si] = true;
                        for ch in 0..3 {
                            a.color[ch] += gc[ch] * wt;
                        }
                        a.z += gz * wt;
                        if !l.clamped {
                            a.opacity += g_alpha * l.footprint;
                            let gq = g_alpha * sp.opacity * l.dfootprint;
                            // q = dᵀ Q d with d = pixel − mean
                            a.mean -= (sp.conic * l.offset) * (2.0 * gq);
                            a.conic += l.offset * l.offset.transpose() * gq;
                        }
                    }
                }
            }
            touched
                .iter()
                .enumerate()
                .filter(|(_, &t)| t)
                .map(|(s, _)| (s as u32, acc[s]))
                .collect()
        })
        .collect();

    let mut acc = vec![SplatGrad::default(); splats.len()];
    for band in bands {
        for (s, g) in band {
            acc[s as usize].add(&g);
        }
    }

    let rw = cam.world_to_camera.rotation;
    for (sp, g) in splats.iter().zip(&acc) {
        let i = sp.index;
        let o = sp.opacity;
        out.opacity_logits[i] = g.opacity * o * (1.0 - o);

        // conic = Σ2⁻¹
        let g_cov2 = -(sp.conic * g.conic * sp.conic);
        let g_cov_cam = sp.jac.transpose() * g_cov2 * sp.jac;
        let g_jac = (g_cov2 + g_cov2.transpose()) * sp.jac * sp.cov_cam;
        let r = rw * cloud.rotations[i];
        let s2 = cloud.log_scales[i].map(|l| (2.0 * l).exp());
        let d = Matrix3::from_diagonal(&s2);
        let g_sym = g_cov_cam + g_cov_cam.transpose();
        // Σc = R D Rᵀ with R the camera-frame rotation
        let g_r = g_sym * r * d;
        let inner = r.transpose() * g_cov_cam * r;
        for k in 0..3 {
            out.log_scales[i][k] = 2.0 * s2[k] * inner[(k, k)];
        }
        out.rotations[i] = rw.transpose() * g_r;

        let (x, y, z) = (sp.cam.x, sp.cam.y, sp.cam.z);
        let (fx, fy) = (cam.fx, cam.fy);
        let z2 = z * z;
        let z3 = z2 * z;
        let mut gp = Vector3::new(
            g.mean.x * fx / z,
            g.mean.y * fy / z,
            -g.mean.x * fx * x / z2 - g.mean.y * fy * y / z2 + g.z,
        );
        gp.x += -g_jac[(0, 2)] * fx / z2;
        gp.y += -g_jac[(1, 2)] * fy / z2;
        gp.z += -g_jac[(0, 0)] * fx / z2 - g_jac[(1, 1)] * fy / z2
            + g_jac[(0, 2)] * 2.0 * fx * x / z3
            + g_jac[(1, 2)] * 2.0 * fy * y / z3;
        let mut g_mu = rw.transpose() * gp;

        match (&cloud.sh1, &mut out.sh1, sp.dir) {
            (Some(sh), Some(gsh), Some((dir, len))) => {
                let b = [-dir.y, dir.z, -dir.x];
                let mut g_b = [0.0; 3];
                for k in 0..3 {
                    for ch in 0..3 {
                        gsh[i][k][ch] = SH_C1 * b[k] * g.color[ch];
                        g_b[k] += SH_C1 * sh[i][k][ch] * g.color[ch];
                    }
                }
                let g_dir = Vector3::new(-g_b[2], -g_b[0], g_b[1]);
                g_mu += (g_dir - dir * dir.dot(&g_dir)) / len;
                out.colors[i] = g.color;
            }
            _ => out.colors[i] = g.color,
        }
        out.centers[i] = g_mu;
    }
    Ok(out)
}
