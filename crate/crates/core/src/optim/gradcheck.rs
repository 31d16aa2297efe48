//! Central finite differences of the full objective against the analytic
//! gradient, parameter by parameter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cloud_grad_values, cloud_values, pose_grad_values, pose_values, set_cloud_values, set_pose_values, Group, OptimConfig};
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::losses::{evaluate, FrameTargets};
use crate::scene_io::Scene;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub frame: usize,
    /// Multiplies the analytic gradient; anything but 1 should fail.
    pub analytic_scale: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-4,
            tolerance: 1e-3,
            frame: 0,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: Group,
    pub checked: usize,
    /// Probes whose perturbation crossed a kink (changed a discrete choice)
    /// at every tried step.
    pub excluded_kink: usize,
    /// Checked probes that needed a step below `step` to avoid a kink.
    pub refined: usize,
    /// Probes with both gradients at or below the magnitude floor.
    pub excluded_small: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: Option<usize>,
    /// Analytic and finite-difference values at `worst_index`.
    pub worst_values: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub pass: bool,
}

/// Number of steps tried per probe: `step`, `step / 10`, `step / 100`.
pub const REFINEMENTS: usize = 3;

/// Gradients this small on both sides are left out of the error maximum.
pub const GRAD_FLOOR: f64 = 1e-8;

pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

/// Checks every enabled parameter of `cloud` and of the pose of one frame.
pub fn gradcheck(scene: &Scene, config: &OptimConfig, cloud: &GaussianCloud, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    config.validate()?;
    scene.validate()?;
    cloud.validate(config.binding_mode)?;
    if !(opts.step > 0.0) || !(opts.tolerance > 0.0) {
        return Err(Error::Config("gradcheck step and tolerance must be positive".into()));
    }
    let frame = scene
        .frames
        .get(opts.frame)
        .ok_or_else(|| Error::Config(format!("frame {} out of range", opts.frame)))?;
    let obj = config.objective();
    let targets = FrameTargets::new(frame, &config.weights)?;
    let pose = &frame.init_pose;
    let base = evaluate(frame, &targets, cloud, &scene.body, pose, &obj, true)?;
    let grad = base.grad.as_ref().expect("gradient requested");

    let mut probes = Vec::new();
    for g in config.cloud_groups(cloud) {
        let a = cloud_grad_values(&grad.cloud, g);
        probes.extend((0..a.len()).map(|i| (g, i, a[i])));
    }
    for g in config.pose_groups() {
        let a = pose_grad_values(&grad.pose, g);
        probes.extend((0..a.len()).map(|i| (g, i, a[i])));
    }

    let eval_at = |g: Group, i: usize, delta: f64| -> Result<(f64, bool)> {
        let mut c = cloud.clone();
        let mut p = pose.clone();
        if Group::POSE.contains(&g) {
            let mut v = pose_values(&p, g);
            v[i] += delta;
            set_pose_values(&mut p, g, &v);
        } else {
            let mut v = cloud_values(&c, g);
            v[i] += delta;
            set_cloud_values(&mut c, g, &v);
        }
        let e = evaluate(frame, &targets, &c, &scene.body, &p, &obj, false)?;
        Ok((e.report.total, e.signature == base.signature))
    };
    // A probe whose ±step crosses a kink is retried at smaller steps before
    // it is excluded; whole-body translations almost always flip some
    // nearest-neighbor choice at the full step.
    let results: Vec<Result<(Option<(f64, bool)>, f64)>> = probes
        .par_iter()
        .map(|&(g, i, a)| {
            for (k, h) in (0..REFINEMENTS).map(|k| (k, opts.step / 10f64.powi(k as i32))) {
                let (fp, sp) = eval_at(g, i, h)?;
                let (fm, sm) = eval_at(g, i, -h)?;
                if sp && sm {
                    return Ok((Some(((fp - fm) / (2.0 * h), k > 0)), a * opts.analytic_scale));
                }
            }
            Ok((None, a * opts.analytic_scale))
        })
        .collect();

    let mut groups: Vec<GroupCheck> = Vec::new();
    for (&(g, i, _), r) in probes.iter().zip(results) {
        let (fd, a) = r?;
        if groups.last().is_none_or(|c| c.group != g) {
            groups.push(GroupCheck {
                group: g,
                checked: 0,
                excluded_kink: 0,
                refined: 0,
                excluded_small: 0,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                worst_index: None,
                worst_values: None,
            });
        }
        let c = groups.last_mut().expect("pushed above");
        let Some((fd, refined)) = fd else {
            c.excluded_kink += 1;
            continue;
        };
        c.refined += refined as usize;
        if a.abs().max(fd.abs()) <= GRAD_FLOOR {
            c.excluded_small += 1;
            continue;
        }
        c.checked += 1;
        c.max_abs_error = c.max_abs_error.max((a - fd).abs());
        let e = relative_error(a, fd);
        if e > c.max_rel_error || c.worst_index.is_none() {
            c.max_rel_error = c.max_rel_error.max(e);
            c.worst_index = Some(i);
            c.worst_values = Some((a, fd));
        }
    }
    let max_rel_error = groups.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let checked: usize = groups.iter().map(|c| c.checked).sum();
    Ok(GradcheckReport {
        pass: checked > 0 && max_rel_error <= opts.tolerance,
        max_rel_error,
        tolerance: opts.tolerance,
        loss: base.report.total,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_convention() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
