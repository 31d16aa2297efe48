//! The optimization loop over a frame sequence, its resumable state and
//! checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, cloud_grad_values, cloud_values, pose_grad_values, pose_values, set_cloud_values, set_pose_values,
    AdamParams, AdamState, Group, OptimConfig,
};
use crate::body::{forward_kinematics, lbs_vertices, PoseState};
use crate::error::{Error, Result};
use crate::gaussians::{deform_cloud, init_on_mesh, BindingMode, GaussianCloud};
use crate::geometry::Camera;
use crate::renderer::{render, RenderOutput, RenderSettings};
use crate::losses::{evaluate, CamelReport, FrameTargets, LossReport, Objective};
use crate::metrics::{mpjpe, pa_mpjpe, v2v, PoseErrorReport};
use crate::scene_io::{put_cloud, put_poses, take_cloud, take_poses, Array, ArrayFile, Scene};

pub const CHECKPOINT_VERSION: u32 = 1;
/// Half-width of the seeded jitter applied to the initial gray colors.
const INIT_COLOR_JITTER: f64 = 0.02;

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub iteration: usize,
    pub cloud: GaussianCloud,
    pub poses: Vec<PoseState>,
    pub cloud_adam: BTreeMap<Group, AdamState>,
    /// Per-frame pose optimizer state.
    pub pose_adam: Vec<BTreeMap<Group, AdamState>>,
    pub history: Vec<LossReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub setup: f64,
    pub loss_and_gradient: f64,
    pub update: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub cloud: GaussianCloud,
    pub poses: Vec<PoseState>,
    pub history: Vec<LossReport>,
    /// Wall-clock seconds per stage.
    pub timings: StageTimings,
}

/// On-mesh gray splats with a small seeded color jitter.
pub fn initial_cloud(scene: &Scene, config: &OptimConfig) -> GaussianCloud {
    let mut cloud = init_on_mesh(&scene.body);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for c in &mut cloud.colors {
        for v in c.iter_mut() {
            *v += rng.random_range(-INIT_COLOR_JITTER..INIT_COLOR_JITTER);
        }
    }
    cloud
}

impl RunState {
    pub fn new(scene: &Scene, config: &OptimConfig, cloud: GaussianCloud) -> Self {
        let cloud_adam = config
            .cloud_groups(&cloud)
            .into_iter()
            .map(|g| (g, AdamState::new(cloud_values(&cloud, g).len())))
            .collect();
        let poses: Vec<PoseState> = scene.frames.iter().map(|f| f.init_pose.clone()).collect();
        let pose_adam = poses
            .iter()
            .map(|p| {
                config
                    .pose_groups()
                    .into_iter()
                    .map(|g| (g, AdamState::new(pose_values(p, g).len())))
                    .collect()
            })
            .collect();
        RunState {
            iteration: 0,
            cloud,
            poses,
            cloud_adam,
            pose_adam,
            history: Vec::new(),
        }
    }
}

pub struct Runner<'a> {
    scene: &'a Scene,
    config: OptimConfig,
    objective: Objective,
    targets: Vec<FrameTargets>,
    state: RunState,
    timings: StageTimings,
}

impl<'a> Runner<'a> {
    pub fn new(scene: &'a Scene, config: &OptimConfig) -> Result<Self> {
        let cloud = initial_cloud(scene, config);
        let state = RunState::new(scene, config, cloud);
        Runner::from_state(scene, config, state)
    }

    pub fn from_state(scene: &'a Scene, config: &OptimConfig, state: RunState) -> Result<Self> {
        let t0 = Instant::now();
        config.validate()?;
        scene.validate()?;
        state.cloud.validate(config.binding_mode)?;
        if state.cloud.is_empty() {
            return Err(Error::DegenerateScene("cloud has no Gaussians".into()));
        }
        if state.cloud.n_bones() != scene.body.n_bones() {
            return Err(Error::Shape("cloud and body differ in bone count".into()));
        }
        if state.poses.len() != scene.frames.len() || state.pose_adam.len() != scene.frames.len() {
            return Err(Error::Shape(format!(
                "state has {} poses for {} frames",
                state.poses.len(),
                scene.frames.len()
            )));
        }
        for g in config.cloud_groups(&state.cloud) {
            let n = cloud_values(&state.cloud, g).len();
            if state.cloud_adam.get(&g).is_none_or(|s| s.m.len() != n) {
                return Err(Error::Shape(format!("optimizer state for {} does not match the cloud", g.name())));
            }
        }
        let targets = scene
            .frames
            .iter()
            .map(|f| FrameTargets::new(f, &config.weights))
            .collect::<Result<Vec<_>>>()?;
        Ok(Runner {
            scene,
            config: config.clone(),
            objective: config.objective(),
            targets,
            state,
            timings: StageTimings {
                setup: t0.elapsed().as_secs_f64(),
                ..Default::default()
            },
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn done(&self) -> bool {
        self.state.iteration >= self.config.iterations
    }

    /// One iteration on the next frame in round-robin order.
    pub fn step(&mut self) -> Result<LossReport> {
        let it = self.state.iteration;
        let k = it % self.scene.frames.len();
        let cfg = &self.config;
        let t0 = Instant::now();
        let eval = evaluate(
            &self.scene.frames[k],
            &self.targets[k],
            &self.state.cloud,
            &self.scene.body,
            &self.state.poses[k],
            &self.objective,
            true,
        )?;
        let report = eval.report;
        if !report.total.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                value: report.total,
            });
        }
        let grad = eval.grad.expect("gradient requested");
        let t1 = Instant::now();
        self.timings.loss_and_gradient += (t1 - t0).as_secs_f64();

        let hp = |g: Group| AdamParams {
            lr: cfg.lr_at(g, it),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        };
        let cloud = &mut self.state.cloud;
        for (g, st) in self.state.cloud_adam.iter_mut() {
            let h = hp(*g);
            if h.lr == 0.0 {
                continue;
            }
            let before = (*g == Group::Quats).then(|| cloud.quats.clone());
            let mut v = cloud_values(cloud, *g);
            adam_step(&mut v, &cloud_grad_values(&grad.cloud, *g), st, h, g.name())?;
            set_cloud_values(cloud, *g, &v);
            match g {
                Group::Quats => {
                    // Untouched quaternions keep their exact bits.
                    for (q, old) in cloud.quats.iter_mut().zip(before.iter().flatten()) {
                        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if q != old && n > 0.0 && n.is_finite() {
                            q.iter_mut().for_each(|x| *x /= n);
                        }
                    }
                }
                Group::Colors => cloud.colors.iter_mut().flatten().for_each(|c| *c = c.clamp(0.0, 1.0)),
                _ => {}
            }
        }
        if it >= cfg.pose_unfreeze_iteration {
            let pose = &mut self.state.poses[k];
            let mut moved = false;
            for (g, st) in self.state.pose_adam[k].iter_mut() {
                let h = hp(*g);
                if h.lr == 0.0 {
                    continue;
                }
                let mut v = pose_values(pose, *g);
                adam_step(&mut v, &pose_grad_values(&grad.pose, *g), st, h, g.name())?;
                set_pose_values(pose, *g, &v);
                moved = true;
            }
            if moved {
                pose.wrap();
            }
            if !pose.is_finite() {
                return Err(Error::Divergence {
                    iteration: it,
                    value: f64::NAN,
                });
            }
        }
        self.timings.update += t1.elapsed().as_secs_f64();
        self.state.history.push(report);
        self.state.iteration += 1;
        Ok(report)
    }

    /// Runs to the configured iteration count, calling `hook` after every step.
    pub fn run(&mut self, mut hook: impl FnMut(&RunState) -> Result<()>) -> Result<()> {
        while !self.done() {
            self.step()?;
            hook(&self.state)?;
        }
        Ok(())
    }

    pub fn into_result(self) -> RunResult {
        RunResult {
            cloud: self.state.cloud,
            poses: self.state.poses,
            history: self.state.history,
            timings: self.timings,
        }
    }

    pub fn into_state(self) -> RunState {
        self.state
    }
}

/// Renders `cloud` bound to `body` at `pose` through `camera`.
pub fn render_posed(
    scene: &Scene,
    cloud: &GaussianCloud,
    pose: &PoseState,
    mode: BindingMode,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    let t = forward_kinematics(&scene.body, pose)?;
    let posed = deform_cloud(cloud, &scene.body, &t, mode)?;
    render(&posed, camera, settings)
}

/// Pose errors of `poses` against the scene's ground truth, averaged over
/// `frames`; `None` without ground truth.
pub fn pose_report(scene: &Scene, poses: &[PoseState], frames: &[usize]) -> Result<Option<PoseErrorReport>> {
    let mut acc = PoseErrorReport {
        mpjpe: 0.0,
        pa_mpjpe: 0.0,
        v2v: 0.0,
    };
    if frames.is_empty() {
        return Ok(None);
    }
    for &k in frames {
        let Some(gt) = &scene.frames[k].gt_pose else {
            return Ok(None);
        };
        let pt = forward_kinematics(&scene.body, &poses[k])?;
        let gtt = forward_kinematics(&scene.body, gt)?;
        let (pj, gj) = (&pt.posed_joints, &gtt.posed_joints);
        acc.mpjpe += mpjpe(pj, gj)?;
        acc.pa_mpjpe += pa_mpjpe(pj, gj)?;
        let pv = lbs_vertices(&scene.body, &pt).vertices;
        let gv = lbs_vertices(&scene.body, &gtt).vertices;
        acc.v2v += v2v(&pv, &gv, Some((pj[0], gj[0])))?;
    }
    let n = frames.len() as f64;
    Ok(Some(PoseErrorReport {
        mpjpe: acc.mpjpe / n,
        pa_mpjpe: acc.pa_mpjpe / n,
        v2v: acc.v2v / n,
    }))
}

pub fn optimize_scene(scene: &Scene, config: &OptimConfig) -> Result<RunResult> {
    let mut r = Runner::new(scene, config)?;
    r.run(|_| Ok(()))?;
    Ok(r.into_result())
}

const HISTORY_COLUMNS: usize = 13;

fn report_row(r: &LossReport) -> [f64; HISTORY_COLUMNS] {
    [
        r.color,
        r.l1,
        r.ssim,
        r.depth2d,
        r.depth3d,
        r.camel.p2mesh,
        r.camel.coverage,
        r.camel.flatness,
        r.camel.surface,
        r.camel.total,
        r.total,
        r.empty_region as u8 as f64,
        r.no_visible as u8 as f64,
    ]
}

fn row_report(c: &[f64]) -> LossReport {
    LossReport {
        color: c[0],
        l1: c[1],
        ssim: c[2],
        depth2d: c[3],
        depth3d: c[4],
        camel: CamelReport {
            p2mesh: c[5],
            coverage: c[6],
            flatness: c[7],
            surface: c[8],
            total: c[9],
        },
        total: c[10],
        empty_region: c[11] != 0.0,
        no_visible: c[12] != 0.0,
    }
}

fn put_adam(file: &mut ArrayFile, prefix: &str, states: &BTreeMap<Group, AdamState>) {
    for (g, s) in states {
        let key = format!("{prefix}{}", g.name());
        file.insert(&format!("{key}.m"), Array::new(vec![s.m.len()], s.m.clone()));
        file.insert(&format!("{key}.v"), Array::new(vec![s.v.len()], s.v.clone()));
        file.insert(&format!("{key}.t"), Array::scalar(s.t as f64));
    }
}

fn take_adam(file: &ArrayFile, prefix: &str, path: &Path) -> Result<BTreeMap<Group, AdamState>> {
    let mut out = BTreeMap::new();
    for g in Group::CLOUD.into_iter().chain(Group::POSE) {
        let key = format!("{prefix}{}", g.name());
        if !file.arrays.contains_key(&format!("{key}.m")) {
            continue;
        }
        let m = file.expect(&format!("{key}.m"), &[None], path)?;
        let v = file.expect(&format!("{key}.v"), &[Some(m.dims[0])], path)?;
        let t = file.expect(&format!("{key}.t"), &[], path)?;
        out.insert(
            g,
            AdamState {
                m: m.data.clone(),
                v: v.data.clone(),
                t: t.data[0] as u64,
            },
        );
    }
    Ok(out)
}

pub fn checkpoint_file(state: &RunState) -> ArrayFile {
    let mut f = ArrayFile::default();
    f.insert("iteration", Array::scalar(state.iteration as f64));
    put_cloud(&mut f, "cloud.", &state.cloud);
    put_poses(&mut f, "poses.", &state.poses);
    put_adam(&mut f, "adam.cloud.", &state.cloud_adam);
    for (k, a) in state.pose_adam.iter().enumerate() {
        put_adam(&mut f, &format!("adam.frame{k:04}."), a);
    }
    let rows: Vec<f64> = state.history.iter().flat_map(report_row).collect();
    f.insert("history", Array::new(vec![state.history.len(), HISTORY_COLUMNS], rows));
    f
}

pub fn save_checkpoint(state: &RunState, path: impl AsRef<Path>) -> Result<()> {
    if state.cloud.is_empty() {
        return Err(Error::Domain("refusing to checkpoint an empty cloud".into()));
    }
    checkpoint_file(state).write(path.as_ref(), CHECKPOINT_VERSION)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RunState> {
    let path = path.as_ref();
    let f = ArrayFile::read(path, CHECKPOINT_VERSION)?;
    let it = f.expect("iteration", &[], path)?.data[0];
    let cloud = take_cloud(&f, "cloud.", path)?;
    let poses = take_poses(&f, "poses.", path)?;
    let cloud_adam = take_adam(&f, "adam.cloud.", path)?;
    let pose_adam = (0..poses.len())
        .map(|k| take_adam(&f, &format!("adam.frame{k:04}."), path))
        .collect::<Result<Vec<_>>>()?;
    let h = f.expect("history", &[None, Some(HISTORY_COLUMNS)], path)?;
    let history = h.data.chunks_exact(HISTORY_COLUMNS).map(row_report).collect();
    Ok(RunState {
        iteration: it as usize,
        cloud,
        poses,
        cloud_adam,
        pose_adam,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::LearningRates;
    use crate::scene_io::{generate_synthetic_scene, SceneSpec};

    fn small_scene() -> Scene {
        generate_synthetic_scene(&SceneSpec {
            frames: 3,
            width: 24,
            height: 24,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    fn cfg(iters: usize) -> OptimConfig {
        OptimConfig {
            iterations: iters,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn zero_learning_rates_change_nothing() {
        let scene = small_scene();
        let c = OptimConfig {
            lr: LearningRates::zero(),
            ..cfg(6)
        };
        let init = initial_cloud(&scene, &c);
        let r = optimize_scene(&scene, &c).unwrap();
        assert_eq!(r.cloud, init);
        for (p, f) in r.poses.iter().zip(&scene.frames) {
            assert_eq!(p, &f.init_pose);
        }
        assert_eq!(r.history.len(), 6);
    }

    #[test]
    fn runs_are_bit_identical_and_resume_exactly() {
        let scene = small_scene();
        for mode in [crate::gaussians::BindingMode::Camel, crate::gaussians::BindingMode::Lsw] {
            let c = OptimConfig {
                binding_mode: mode,
                ..cfg(8)
            };
            let a = optimize_scene(&scene, &c).unwrap();
            let b = optimize_scene(&scene, &c).unwrap();
            assert_eq!((&a.cloud, &a.poses, &a.history), (&b.cloud, &b.poses, &b.history));

            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("mid.ckpt");
            let mut r = Runner::new(&scene, &c).unwrap();
            for _ in 0..3 {
                r.step().unwrap();
            }
            save_checkpoint(r.state(), &p).unwrap();
            drop(r);
            let state = load_checkpoint(&p).unwrap();
            let mut r = Runner::from_state(&scene, &c, state).unwrap();
            r.run(|_| Ok(())).unwrap();
            let resumed = r.into_state();
            let mut straight = Runner::new(&scene, &c).unwrap();
            straight.run(|_| Ok(())).unwrap();
            assert_eq!(resumed, straight.into_state());
        }
    }

    #[test]
    fn frozen_pose_stays_put() {
        let scene = small_scene();
        let c = OptimConfig {
            pose_opt: false,
            ..cfg(4)
        };
        let r = optimize_scene(&scene, &c).unwrap();
        for (p, f) in r.poses.iter().zip(&scene.frames) {
            assert_eq!(p, &f.init_pose);
        }
        assert_ne!(r.cloud, initial_cloud(&scene, &c));
    }

    #[test]
    fn checkpoint_round_trip_and_version() {
        let scene = small_scene();
        let mut r = Runner::new(&scene, &cfg(2)).unwrap();
        r.step().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(r.state(), &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(&back, r.state());
        assert_eq!(back.cloud.len(), scene.body.n_vertices());
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 9;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Incompatible { found: 9, .. })));
    }
}
