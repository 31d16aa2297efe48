//! Adam, parameter groups, the joint cloud and pose optimization loop, and
//! the finite-difference gradient check.

mod gradcheck;
mod run;

use serde::{Deserialize, Serialize};

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, GroupCheck};
pub use run::{
    initial_cloud, load_checkpoint, optimize_scene, pose_report, render_posed, save_checkpoint, RunResult, RunState, Runner, StageTimings,
    CHECKPOINT_VERSION,
};

use crate::body::{PoseGrad, PoseState};
use crate::error::{Error, Result};
use crate::gaussians::{BindingMode, CloudGrad, GaussianCloud};
use crate::losses::{LossWeights, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Centers,
    Quats,
    LogScales,
    OpacityLogits,
    Colors,
    Sh1,
    SkinWeightDeltas,
    PoseRotations,
    GlobalTranslation,
}

impl Group {
    pub const CLOUD: [Group; 7] = [
        Group::Centers,
        Group::Quats,
        Group::LogScales,
        Group::OpacityLogits,
        Group::Colors,
        Group::Sh1,
        Group::SkinWeightDeltas,
    ];
    pub const POSE: [Group; 2] = [Group::PoseRotations, Group::GlobalTranslation];

    pub fn name(self) -> &'static str {
        match self {
            Group::Centers => "centers",
            Group::Quats => "quats",
            Group::LogScales => "log_scales",
            Group::OpacityLogits => "opacity_logits",
            Group::Colors => "colors",
            Group::Sh1 => "sh1",
            Group::SkinWeightDeltas => "skin_weight_deltas",
            Group::PoseRotations => "pose_rotations",
            Group::GlobalTranslation => "global_translation",
        }
    }
}

fn flat<const K: usize>(v: impl IntoIterator<Item = [f64; K]>) -> Vec<f64> {
    v.into_iter().flatten().collect()
}

pub fn cloud_values(cloud: &GaussianCloud, g: Group) -> Vec<f64> {
    match g {
        Group::Centers => flat(cloud.centers.iter().map(|c| [c.x, c.y, c.z])),
        Group::Quats => flat(cloud.quats.iter().copied()),
        Group::LogScales => flat(cloud.log_scales.iter().map(|c| [c.x, c.y, c.z])),
        Group::OpacityLogits => cloud.opacity_logits.clone(),
        Group::Colors => flat(cloud.colors.iter().copied()),
        Group::Sh1 => cloud.sh1.iter().flatten().flatten().flatten().copied().collect(),
        Group::SkinWeightDeltas => cloud.skin_weight_deltas.as_slice().to_vec(),
        Group::PoseRotations | Group::GlobalTranslation => Vec::new(),
    }
}

pub fn set_cloud_values(cloud: &mut GaussianCloud, g: Group, v: &[f64]) {
    match g {
        Group::Centers => cloud.centers.iter_mut().zip(v.chunks_exact(3)).for_each(|(c, x)| c.copy_from_slice(x)),
        Group::Quats => cloud.quats.iter_mut().zip(v.chunks_exact(4)).for_each(|(c, x)| c.copy_from_slice(x)),
        Group::LogScales => cloud.log_scales.iter_mut().zip(v.chunks_exact(3)).for_each(|(c, x)| c.copy_from_slice(x)),
        Group::OpacityLogits => cloud.opacity_logits.copy_from_slice(v),
        Group::Colors => cloud.colors.iter_mut().zip(v.chunks_exact(3)).for_each(|(c, x)| c.copy_from_slice(x)),
        Group::Sh1 => {
            if let Some(sh) = &mut cloud.sh1 {
                for (c, x) in sh.iter_mut().zip(v.chunks_exact(9)) {
                    for (b, row) in c.iter_mut().enumerate() {
                        row.copy_from_slice(&x[3 * b..3 * b + 3]);
                    }
                }
            }
        }
        Group::SkinWeightDeltas => cloud.skin_weight_deltas.as_mut_slice().copy_from_slice(v),
        Group::PoseRotations | Group::GlobalTranslation => {}
    }
}

pub fn cloud_grad_values(grad: &CloudGrad, g: Group) -> Vec<f64> {
    match g {
        Group::Centers => flat(grad.centers.iter().map(|c| [c.x, c.y, c.z])),
        Group::Quats => flat(grad.quats.iter().copied()),
        Group::LogScales => flat(grad.log_scales.iter().map(|c| [c.x, c.y, c.z])),
        Group::OpacityLogits => grad.opacity_logits.clone(),
        Group::Colors => flat(grad.colors.iter().copied()),
        Group::Sh1 => grad.sh1.iter().flatten().flatten().flatten().copied().collect(),
        Group::SkinWeightDeltas => grad.skin_weight_deltas.clone(),
        Group::PoseRotations | Group::GlobalTranslation => Vec::new(),
    }
}

pub fn pose_values(pose: &PoseState, g: Group) -> Vec<f64> {
    match g {
        Group::PoseRotations => flat(pose.joint_rotations.iter().map(|c| [c.x, c.y, c.z])),
        Group::GlobalTranslation => pose.global_translation.iter().copied().collect(),
        _ => Vec::new(),
    }
}

pub fn set_pose_values(pose: &mut PoseState, g: Group, v: &[f64]) {
    match g {
        Group::PoseRotations => pose
            .joint_rotations
            .iter_mut()
            .zip(v.chunks_exact(3))
            .for_each(|(c, x)| c.copy_from_slice(x)),
        Group::GlobalTranslation => pose.global_translation.copy_from_slice(v),
        _ => {}
    }
}

pub fn pose_grad_values(grad: &PoseGrad, g: Group) -> Vec<f64> {
    match g {
        Group::PoseRotations => flat(grad.joint_rotations.iter().map(|c| [c.x, c.y, c.z])),
        Group::GlobalTranslation => grad.global_translation.iter().copied().collect(),
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub centers: f64,
    pub quats: f64,
    pub log_scales: f64,
    pub opacity_logits: f64,
    pub colors: f64,
    pub sh1: f64,
    pub skin_weight_deltas: f64,
    pub pose_rotations: f64,
    pub global_translation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            centers: 5e-4,
            quats: 1e-3,
            log_scales: 5e-3,
            opacity_logits: 5e-2,
            colors: 2.5e-3,
            sh1: 1.25e-4,
            skin_weight_deltas: 1e-4,
            pose_rotations: 5e-3,
            global_translation: 5e-3,
        }
    }
}

impl LearningRates {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Centers => self.centers,
            Group::Quats => self.quats,
            Group::LogScales => self.log_scales,
            Group::OpacityLogits => self.opacity_logits,
            Group::Colors => self.colors,
            Group::Sh1 => self.sh1,
            Group::SkinWeightDeltas => self.skin_weight_deltas,
            Group::PoseRotations => self.pose_rotations,
            Group::GlobalTranslation => self.global_translation,
        }
    }

    pub fn zero() -> Self {
        LearningRates {
            centers: 0.0,
            quats: 0.0,
            log_scales: 0.0,
            opacity_logits: 0.0,
            colors: 0.0,
            sh1: 0.0,
            skin_weight_deltas: 0.0,
            pose_rotations: 0.0,
            global_translation: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    pub binding_mode: BindingMode,
    pub pose_opt: bool,
    pub depth_loss: bool,
    /// Mesh prior on or off; unset means on exactly in CAMEL binding.
    pub camel_loss: Option<bool>,
    /// Pose stays frozen before this iteration.
    pub pose_unfreeze_iteration: usize,
    /// Learning-rate multiplier reached at the last iteration, decaying
    /// exponentially from 1.
    pub lr_final_factor: f64,
    /// Write a checkpoint every this many iterations (CLI runs).
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            iterations: 2000,
            binding_mode: BindingMode::Camel,
            pose_opt: true,
            depth_loss: true,
            camel_loss: None,
            pose_unfreeze_iteration: 0,
            lr_final_factor: 1.0,
            checkpoint_every: None,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for g in Group::CLOUD.iter().chain(&Group::POSE) {
            let lr = self.lr.get(*g);
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate for {} must be nonnegative, got {lr}", g.name())));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.lr_final_factor > 0.0 && self.lr_final_factor.is_finite()) {
            return Err(Error::Config("eps and lr_final_factor must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        let mut obj = Objective::new(self.weights, self.binding_mode);
        obj.depth = self.depth_loss;
        if let Some(c) = self.camel_loss {
            obj.camel = c;
        }
        obj
    }

    /// Cloud groups updated (and checked) under this configuration.
    pub fn cloud_groups(&self, cloud: &GaussianCloud) -> Vec<Group> {
        Group::CLOUD
            .into_iter()
            .filter(|g| match g {
                Group::Sh1 => cloud.sh1.is_some(),
                Group::SkinWeightDeltas => self.binding_mode == BindingMode::Lsw,
                _ => true,
            })
            .collect()
    }

    pub fn pose_groups(&self) -> Vec<Group> {
        if self.pose_opt {
            Group::POSE.to_vec()
        } else {
            Vec::new()
        }
    }

    pub fn lr_at(&self, g: Group, iteration: usize) -> f64 {
        let base = self.lr.get(g);
        if self.lr_final_factor == 1.0 || self.iterations <= 1 {
            return base;
        }
        let t = iteration as f64 / (self.iterations - 1) as f64;
        base * self.lr_final_factor.powf(t)
    }
}

/// First and second moments plus the step count for one parameter vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: AdamParams, group: &str) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "group `{group}`: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { group: group.to_string() });
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= hp.lr * mh / (vh.sqrt() + hp.eps);
    }
    Ok(())
}
