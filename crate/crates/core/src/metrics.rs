//! Pose accuracy (MPJPE, PA-MPJPE, V2V) and image quality (PSNR, SSIM).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ColorImage;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub v2v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderErrorReport {
    pub psnr: f64,
    pub ssim: f64,
}

fn check_counts(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predicted points vs {b} ground truth")));
    }
    Ok(())
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>], shift: Vector3<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(p, g)| (p + shift - g).norm()).sum::<f64>() / a.len() as f64
}

/// Mean joint error in millimeters after centering both sets on joint 0.
pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    mpjpe_with_root(pred, gt, 0)
}

pub fn mpjpe_with_root(pred: &[Vector3<f64>], gt: &[Vector3<f64>], root: usize) -> Result<f64> {
    check_counts(pred.len(), gt.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    if root >= pred.len() {
        return Err(Error::Shape(format!("root {root} out of range")));
    }
    Ok(1000.0 * mean_distance(pred, gt, gt[root] - pred[root]))
}

/// Mean vertex error in millimeters. With `roots`, both meshes are first
/// centered on their respective root joint positions.
pub fn v2v(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    roots: Option<(Vector3<f64>, Vector3<f64>)>,
) -> Result<f64> {
    check_counts(pred.len(), gt.len())?;
    let shift = roots.map_or(Vector3::zeros(), |(p, g)| g - p);
    Ok(1000.0 * mean_distance(pred, gt, shift))
}

/// `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

fn centered(points: &[Vector3<f64>]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    (mean, points.iter().map(|p| p - mean).collect())
}

fn is_collinear(points: &[Vector3<f64>]) -> bool {
    let m: Matrix3<f64> = points.iter().map(|p| p * p.transpose()).sum();
    let sv = m.symmetric_eigenvalues();
    let mut s = [sv[0], sv[1], sv[2]];
    s.sort_by(|a, b| b.total_cmp(a));
    !(s[0] > 0.0) || s[1] <= 1e-12 * s[0]
}

/// Least-squares similarity taking `pred` onto `gt`, restricted to proper
/// rotations.
pub fn procrustes_align(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Similarity> {
    check_counts(pred.len(), gt.len())?;
    if pred.len() < 3 {
        return Err(Error::AlignmentDegenerate(format!("{} points, need 3", pred.len())));
    }
    let (mp, p) = centered(pred);
    let (mg, g) = centered(gt);
    if is_collinear(&p) || is_collinear(&g) {
        return Err(Error::AlignmentDegenerate("points are collinear".into()));
    }
    let cov: Matrix3<f64> = g.iter().zip(&p).map(|(g, p)| g * p.transpose()).sum();
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u * vt).determinant() < 0.0 {
        // singular values are sorted descending; flip the smallest
        d[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * vt;
    let var_p: f64 = p.iter().map(|x| x.norm_squared()).sum();
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[i]).sum();
    let scale = trace / var_p;
    Ok(Similarity {
        scale,
        rotation,
        translation: mg - rotation * mp * scale,
    })
}

/// Mean joint error in millimeters after the optimal similarity alignment.
pub fn pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let sim = procrustes_align(pred, gt)?;
    let aligned: Vec<Vector3<f64>> = pred.iter().map(|p| sim.apply(p)).collect();
    Ok(1000.0 * mean_distance(&aligned, gt, Vector3::zeros()))
}

pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("psnr inputs differ in size".into()));
    }
    let n = (a.len() * 3) as f64;
    let mse: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian blur restricted to the image, plus its transpose.
#[derive(Debug, Clone)]
pub(crate) struct Blur1d {
    taps: Vec<f64>,
    /// Total in-bounds tap weight at each output position.
    norm: Vec<f64>,
}

impl Blur1d {
    pub(crate) fn new(len: usize) -> Self {
        let r = (SSIM_WINDOW / 2) as isize;
        let taps: Vec<f64> = (-r..=r)
            .map(|d| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
            .collect();
        let norm = (0..len as isize)
            .map(|p| {
                (-r..=r)
                    .filter(|d| (0..len as isize).contains(&(p + d)))
                    .map(|d| taps[(d + r) as usize])
                    .sum()
            })
            .collect();
        Blur1d { taps, norm }
    }

    fn apply(&self, src: &[f64], dst: &mut [f64], stride: usize, len: usize, transpose: bool) {
        let r = (SSIM_WINDOW / 2) as isize;
        for p in 0..len as isize {
            let mut acc = 0.0;
            for d in -r..=r {
                let q = p + d;
                if q < 0 || q >= len as isize {
                    continue;
                }
                let k = self.taps[(d + r) as usize];
                acc += if transpose {
                    k * src[q as usize * stride] / self.norm[q as usize]
                } else {
                    k * src[q as usize * stride]
                };
            }
            dst[p as usize * stride] = if transpose { acc } else { acc / self.norm[p as usize] };
        }
    }
}

/// Separable windowed mean over a `w × h` plane, renormalized at borders.
#[derive(Debug, Clone)]
pub(crate) struct Window {
    w: usize,
    h: usize,
    rows: Blur1d,
    cols: Blur1d,
}

impl Window {
    pub(crate) fn new(w: usize, h: usize) -> Self {
        Window {
            w,
            h,
            rows: Blur1d::new(w),
            cols: Blur1d::new(h),
        }
    }

    fn pass(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        let mut out = vec![0.0; w * h];
        if transpose {
            for u in 0..w {
                self.cols.apply(&x[u..], &mut tmp[u..], w, h, true);
            }
            for v in 0..h {
                self.rows.apply(&tmp[v * w..], &mut out[v * w..], 1, w, true);
            }
        } else {
            for v in 0..h {
                self.rows.apply(&x[v * w..], &mut tmp[v * w..], 1, w, false);
            }
            for u in 0..w {
                self.cols.apply(&tmp[u..], &mut out[u..], w, h, false);
            }
        }
        out
    }

    pub(crate) fn blur(&self, x: &[f64]) -> Vec<f64> {
        self.pass(x, false)
    }

    pub(crate) fn blur_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.pass(x, true)
    }
}

/// Per-pixel SSIM of one channel and, optionally, its gradient with respect
/// to `x` given per-pixel weights on the map.
pub(crate) struct SsimChannel {
    pub map: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    n1: Vec<f64>,
    n2: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl SsimChannel {
    pub(crate) fn new(win: &Window, x: &[f64], y: &[f64]) -> Self {
        let mu_x = win.blur(x);
        let mu_y = win.blur(y);
        let xx = win.blur(&x.iter().map(|v| v * v).collect::<Vec<_>>());
        let yy = win.blur(&y.iter().map(|v| v * v).collect::<Vec<_>>());
        let xy = win.blur(&x.iter().zip(y).map(|(a, b)| a * b).collect::<Vec<_>>());
        let n = x.len();
        let (mut n1, mut n2, mut d1, mut d2, mut map) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for p in 0..n {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let sxx = xx[p] - mx * mx;
            let syy = yy[p] - my * my;
            let sxy = xy[p] - mx * my;
            n1[p] = 2.0 * mx * my + SSIM_C1;
            n2[p] = 2.0 * sxy + SSIM_C2;
            d1[p] = mx * mx + my * my + SSIM_C1;
            d2[p] = sxx + syy + SSIM_C2;
            map[p] = n1[p] * n2[p] / (d1[p] * d2[p]);
        }
        SsimChannel {
            map,
            mu_x,
            mu_y,
            n1,
            n2,
            d1,
            d2,
        }
    }

    /// Gradient of `Σ_p weight_p · map_p` with respect to `x`.
    ///
    /// Written in centered form so that every term carries a factor that is
    /// exactly zero when `x == y`, making the gradient at a perfect match
    /// exactly zero rather than rounding noise.
    pub(crate) fn backward(&self, win: &Window, x: &[f64], y: &[f64], weight: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut ga = vec![0.0; n];
        let mut gb = vec![0.0; n];
        let mut gc = vec![0.0; n];
        let mut gbm = vec![0.0; n];
        let mut gcm = vec![0.0; n];
        for p in 0..n {
            if weight[p] == 0.0 {
                continue;
            }
            let s = self.map[p];
            let (mx, my) = (self.mu_x[p], self.mu_y[p]);
            // ∂S/∂μx, with σ terms held fixed
            let d_mu = 2.0 / self.d1[p] * (my * (self.n2[p] / self.d2[p]) - mx * s);
            // ∂S/∂x_q = w_pq [d_mu − b (x_q − μx) + c (y_q − μy)]
            let b = 2.0 / self.d2[p] * s;
            let c = 2.0 / self.d2[p] * (self.n1[p] / self.d1[p]);
            ga[p] = weight[p] * d_mu;
            gb[p] = weight[p] * b;
            gc[p] = weight[p] * c;
            gbm[p] = gb[p] * mx;
            gcm[p] = gc[p] * my;
        }
        let ta = win.blur_transpose(&ga);
        let tb = win.blur_transpose(&gb);
        let tc = win.blur_transpose(&gc);
        let tbm = win.blur_transpose(&gbm);
        let tcm = win.blur_transpose(&gcm);
        (0..n)
            .map(|q| ta[q] + (y[q] * tc[q] - x[q] * tb[q]) + (tbm[q] - tcm[q]))
            .collect()
    }
}

pub(crate) fn channel(img: &ColorImage, c: usize) -> Vec<f64> {
    img.as_slice().iter().map(|p| p[c]).collect()
}

/// Mean local SSIM over all pixels and channels.
pub fn ssim_metric(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("ssim inputs differ in size".into()));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let win = Window::new(a.width(), a.height());
    let mut total = 0.0;
    for c in 0..3 {
        let s = SsimChannel::new(&win, &channel(a, c), &channel(b, c));
        total += s.map.iter().sum::<f64>();
    }
    Ok(total / (3 * a.len()) as f64)
}

pub fn render_errors(pred: &ColorImage, gt: &ColorImage) -> Result<RenderErrorReport> {
    Ok(RenderErrorReport {
        psnr: psnr(pred, gt)?,
        ssim: ssim_metric(pred, gt)?,
    })
}
