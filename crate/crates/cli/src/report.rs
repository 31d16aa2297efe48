//! Evaluation of a trained cloud and poses, plus the run artefacts built
//! from it (loss history rows, text summaries, the ablation table).

use std::fmt::Write as _;

use camelsplat::body::{forward_kinematics, lbs_vertices, PoseState};
use camelsplat::gaussians::{BindingMode, GaussianCloud};
use camelsplat::geometry::Camera;
use camelsplat::losses::LossReport;
use camelsplat::metrics::{render_errors, PoseErrorReport, RenderErrorReport};
use camelsplat::optim::{pose_report, render_posed};
use camelsplat::renderer::{RenderOutput, RenderSettings};
use camelsplat::scene_io::Scene;
use camelsplat::Result;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub train: bool,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub train_frames: Vec<usize>,
    pub test_frames: Vec<usize>,
    /// Optimized poses on training frames against ground truth.
    pub train_pose: Option<PoseErrorReport>,
    /// Initial poses on training frames against ground truth.
    pub initial_pose: Option<PoseErrorReport>,
    pub train_render: RenderErrorReport,
    /// Held-out frames, rendered at their ground-truth pose when present.
    pub test_render: Option<RenderErrorReport>,
    pub per_frame: Vec<FrameMetrics>,
}

/// Poses for every scene frame: optimized ones on training frames,
/// ground truth (or the initial guess) on held-out frames.
pub fn full_poses(scene: &Scene, train: &[usize], trained: &[PoseState]) -> Vec<PoseState> {
    let mut out: Vec<PoseState> = scene
        .frames
        .iter()
        .map(|f| f.gt_pose.clone().unwrap_or_else(|| f.init_pose.clone()))
        .collect();
    for (&k, p) in train.iter().zip(trained) {
        out[k] = p.clone();
    }
    out
}

fn mean_render(items: &[&FrameMetrics]) -> Option<RenderErrorReport> {
    if items.is_empty() {
        return None;
    }
    let n = items.len() as f64;
    Some(RenderErrorReport {
        psnr: items.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: items.iter().map(|m| m.ssim).sum::<f64>() / n,
    })
}

/// Renders every frame and scores poses and images. Returns the renders
/// in frame order alongside the report.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_run(
    scene: &Scene,
    split_name: &str,
    train: &[usize],
    test: &[usize],
    cloud: &GaussianCloud,
    trained: &[PoseState],
    mode: BindingMode,
    settings: &RenderSettings,
) -> Result<(EvalReport, Vec<RenderOutput>)> {
    let poses = full_poses(scene, train, trained);
    let init: Vec<PoseState> = scene.frames.iter().map(|f| f.init_pose.clone()).collect();
    let mut renders = Vec::with_capacity(scene.frames.len());
    let mut per_frame = Vec::with_capacity(scene.frames.len());
    for (k, f) in scene.frames.iter().enumerate() {
        let out = render_posed(scene, cloud, &poses[k], mode, &f.camera, settings)?;
        let e = render_errors(&out.color, &f.color)?;
        per_frame.push(FrameMetrics {
            frame: k,
            train: train.contains(&k),
            psnr: e.psnr,
            ssim: e.ssim,
        });
        renders.push(out);
    }
    let train_m: Vec<&FrameMetrics> = per_frame.iter().filter(|m| m.train).collect();
    let test_m: Vec<&FrameMetrics> = per_frame.iter().filter(|m| !m.train).collect();
    let report = EvalReport {
        split: split_name.to_string(),
        train_frames: train.to_vec(),
        test_frames: test.to_vec(),
        train_pose: pose_report(scene, &poses, train)?,
        initial_pose: pose_report(scene, &init, train)?,
        train_render: mean_render(&train_m).expect("at least one training frame"),
        test_render: mean_render(&test_m),
        per_frame,
    };
    Ok((report, renders))
}

impl EvalReport {
    /// Image metrics on held-out frames, or on training frames without any.
    pub fn headline_render(&self) -> RenderErrorReport {
        self.test_render.unwrap_or(self.train_render)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "split {}: {} training, {} held-out frames",
            self.split,
            self.train_frames.len(),
            self.test_frames.len()
        );
        let pose_line = |s: &mut String, label: &str, p: &Option<PoseErrorReport>| {
            if let Some(p) = p {
                let _ = writeln!(
                    s,
                    "{label:<16} mpjpe {:8.2} mm  pa-mpjpe {:8.2} mm  v2v {:8.2} mm",
                    p.mpjpe, p.pa_mpjpe, p.v2v
                );
            }
        };
        pose_line(&mut s, "initial pose", &self.initial_pose);
        pose_line(&mut s, "optimized pose", &self.train_pose);
        let _ = writeln!(
            s,
            "{:<16} psnr {:7.2} dB  ssim {:.4}",
            "train render", self.train_render.psnr, self.train_render.ssim
        );
        if let Some(t) = &self.test_render {
            let _ = writeln!(s, "{:<16} psnr {:7.2} dB  ssim {:.4}", "held-out render", t.psnr, t.ssim);
        }
        s
    }
}

/// One row of `loss_history.csv`.
#[derive(Debug, Serialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub frame: usize,
    pub total: f64,
    pub color: f64,
    pub l1: f64,
    pub ssim: f64,
    pub depth2d: f64,
    pub depth3d: f64,
    pub camel: f64,
    pub p2mesh: f64,
    pub coverage: f64,
    pub flatness: f64,
    pub surface: f64,
}

impl HistoryRow {
    pub fn new(iteration: usize, frame: usize, r: &LossReport) -> Self {
        HistoryRow {
            iteration,
            frame,
            total: r.total,
            color: r.color,
            l1: r.l1,
            ssim: r.ssim,
            depth2d: r.depth2d,
            depth3d: r.depth3d,
            camel: r.camel.total,
            p2mesh: r.camel.p2mesh,
            coverage: r.camel.coverage,
            flatness: r.camel.flatness,
            surface: r.camel.surface,
        }
    }
}

/// `n` cameras on a horizontal circle through the first frame's camera,
/// centered above the mean posed mesh vertex and sharing its intrinsics.
pub fn orbit_cameras(scene: &Scene, pose: &PoseState, n: usize) -> Result<Vec<Camera>> {
    let t = forward_kinematics(&scene.body, pose)?;
    let verts = lbs_vertices(&scene.body, &t).vertices;
    let target = verts.iter().sum::<Vector3<f64>>() / verts.len().max(1) as f64;
    let cam0 = &scene.frames[0].camera;
    let eye0 = cam0.center();
    let rel = eye0 - target;
    let radius = (rel.x * rel.x + rel.z * rel.z).sqrt().max(1e-3);
    let phase = rel.z.atan2(rel.x);
    (0..n)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
            let eye = Vector3::new(target.x + radius * a.cos(), eye0.y, target.z + radius * a.sin());
            Camera::look_at(eye, target, Vector3::y(), cam0.fx, cam0.fy, cam0.width, cam0.height)
        })
        .collect()
}

pub const ABLATION_METRICS: [&str; 5] = ["psnr", "ssim", "mpjpe", "pa_mpjpe", "v2v"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
    pub v2v: Option<f64>,
}

impl CellMetrics {
    pub fn from_report(r: &EvalReport) -> Self {
        let img = r.headline_render();
        CellMetrics {
            psnr: img.psnr,
            ssim: img.ssim,
            mpjpe: r.train_pose.map(|p| p.mpjpe),
            pa_mpjpe: r.train_pose.map(|p| p.pa_mpjpe),
            v2v: r.train_pose.map(|p| p.v2v),
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "psnr" => Some(self.psnr),
            "ssim" => Some(self.ssim),
            "mpjpe" => self.mpjpe,
            "pa_mpjpe" => self.pa_mpjpe,
            "v2v" => self.v2v,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub metrics: Option<CellMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub cells: Vec<Cell>,
    /// Median over the seeds that finished, per metric.
    pub median: Vec<Option<f64>>,
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl AblationRow {
    pub fn new(name: &str, cells: Vec<Cell>) -> Self {
        let median = ABLATION_METRICS
            .iter()
            .map(|m| median(cells.iter().filter_map(|c| c.metrics.as_ref()?.get(m)).collect()))
            .collect();
        AblationRow {
            name: name.to_string(),
            cells,
            median,
        }
    }
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<16}", "row");
    for m in ABLATION_METRICS {
        let _ = write!(s, " {m:>10}");
    }
    let _ = writeln!(s, " {:>6}", "failed");
    for r in rows {
        let _ = write!(s, "{:<16}", r.name);
        for v in &r.median {
            match v {
                Some(v) => {
                    let _ = write!(s, " {v:>10.4}");
                }
                None => {
                    let _ = write!(s, " {:>10}", "-");
                }
            }
        }
        let failed = r.cells.iter().filter(|c| c.error.is_some()).count();
        let _ = writeln!(s, " {failed:>6}");
    }
    s
}

/// Writes an image's rendered color next to its depth.
pub fn write_render(out: &RenderOutput, stem: &std::path::Path) -> Result<()> {
    camelsplat::scene_io::write_color_png(&out.color, &stem.with_extension("png"))?;
    camelsplat::scene_io::write_pfm(&out.depth, &stem.with_extension("pfm"))
}
