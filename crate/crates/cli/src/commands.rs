//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use camelsplat::gaussians::BindingMode;
use camelsplat::optim::{
    gradcheck as run_gradcheck, initial_cloud, load_checkpoint, save_checkpoint, GradcheckOptions, OptimConfig,
    RunState, Runner,
};
use camelsplat::scene_io::{generate_synthetic_scene, load_scene, save_scene, Scene, SceneSpec, Split};
use camelsplat::Error;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::report::{
    ablation_table, evaluate_run, full_poses, orbit_cameras, write_render, AblationRow, Cell, CellMetrics, EvalReport,
    HistoryRow,
};
use crate::{AblateArgs, EvaluateArgs, GenSceneArgs, GradcheckArgs, OptimizeArgs, RenderArgs, RunFlags};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Output { path: PathBuf, message: String },
    GradcheckFailed { max_rel_error: f64, tolerance: f64 },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Output { path, message } => write!(f, "cannot write {}: {message}", path.display()),
            CliError::GradcheckFailed {
                max_rel_error,
                tolerance,
            } => write!(f, "gradient check failed: max relative error {max_rel_error:.3e} > {tolerance:.1e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Config(_)) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) | CliError::Output { .. } => 2,
            CliError::GradcheckFailed { .. } => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn output_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid JSON in {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| output_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| output_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| output_err(path, e))
}

fn base_config(path: Option<&Path>) -> CliResult<OptimConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(OptimConfig::default()),
    }
}

pub fn run_config(flags: &RunFlags) -> CliResult<OptimConfig> {
    let mut c = base_config(flags.config.as_deref())?;
    if let Some(s) = flags.seed {
        c.seed = s;
    }
    if let Some(m) = flags.binding_mode {
        c.binding_mode = m;
    }
    if flags.no_pose_opt {
        c.pose_opt = false;
    }
    if flags.no_depth_loss {
        c.depth_loss = false;
    }
    if let Some(n) = flags.iters {
        c.iterations = n;
    }
    if !c.pose_opt {
        c.lr.pose_rotations = 0.0;
        c.lr.global_translation = 0.0;
    }
    c.validate()?;
    Ok(c)
}

pub fn gen_scene(a: &GenSceneArgs) -> CliResult<()> {
    let mut spec = match &a.config {
        Some(p) => read_json(p)?,
        None if a.mini => SceneSpec::mini(),
        None => SceneSpec::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.frames {
        spec.frames = v;
    }
    if let Some(v) = a.width {
        spec.width = v;
    }
    if let Some(v) = a.height {
        spec.height = v;
    }
    if let Some(v) = a.sigma_rot {
        spec.sigma_rot = v;
    }
    if let Some(v) = a.sigma_trans {
        spec.sigma_trans = v;
    }
    if let Some(v) = a.depth_noise {
        spec.depth_noise = v;
    }
    spec.validate()?;
    let scene = generate_synthetic_scene(&spec)?;
    save_scene(&scene, &a.out)?;
    print!(
        "wrote {} frames ({}x{}) to {}",
        scene.frames.len(),
        spec.width,
        spec.height,
        a.out.display()
    );
    if let Some(b) = &scene.baseline {
        print!("; initial mpjpe {:.2} mm, pa-mpjpe {:.2} mm", b.mean_mpjpe, b.mean_pa_mpjpe);
    }
    println!();
    Ok(())
}

/// A loaded scene with its split applied.
struct SplitScene {
    full: Scene,
    train_scene: Scene,
    split: Split,
    train: Vec<usize>,
    test: Vec<usize>,
}

fn load_split(dir: &Path, split: &str) -> CliResult<SplitScene> {
    let split = Split::parse(split)?;
    let full = load_scene(dir)?;
    let (train, test) = split.indices(full.frames.len())?;
    let train_scene = full.subset(&train)?;
    Ok(SplitScene {
        full,
        train_scene,
        split,
        train,
        test,
    })
}

fn evaluate_state(s: &SplitScene, state: &RunState, config: &OptimConfig) -> CliResult<(EvalReport, Vec<camelsplat::renderer::RenderOutput>)> {
    if state.poses.len() != s.train.len() {
        return Err(CliError::Usage(format!(
            "checkpoint has {} poses but split {} trains on {} frames",
            state.poses.len(),
            s.split.name(),
            s.train.len()
        )));
    }
    Ok(evaluate_run(
        &s.full,
        &s.split.name(),
        &s.train,
        &s.test,
        &state.cloud,
        &state.poses,
        config.binding_mode,
        &config.weights.render_settings(),
    )?)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    scene: &'a Path,
    split: String,
    train_frames: &'a [usize],
    test_frames: &'a [usize],
    resumed_from: Option<&'a Path>,
    config: &'a OptimConfig,
}

#[derive(Serialize)]
struct OptimizeReport<'a> {
    iterations: usize,
    final_loss: Option<f64>,
    timings: camelsplat::optim::StageTimings,
    evaluation: &'a EvalReport,
}

pub fn optimize(a: &OptimizeArgs) -> CliResult<()> {
    let mut config = run_config(&a.run)?;
    if a.checkpoint_every.is_some() {
        config.checkpoint_every = a.checkpoint_every;
        config.validate()?;
    }
    let s = load_split(&a.scene, &a.split)?;
    let mut runner = match &a.resume {
        Some(p) => Runner::from_state(&s.train_scene, &config, load_checkpoint(p)?)?,
        None => Runner::new(&s.train_scene, &config)?,
    };
    let ckpt_dir = a.out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_json(
        &a.out.join("run.json"),
        &RunRecord {
            scene: &a.scene,
            split: s.split.name(),
            train_frames: &s.train,
            test_frames: &s.test,
            resumed_from: a.resume.as_deref(),
            config: &config,
        },
    )?;

    let every = config.checkpoint_every;
    runner.run(|st| match every {
        Some(k) if st.iteration % k == 0 => save_checkpoint(st, ckpt_dir.join(format!("iter_{:06}.ckpt", st.iteration))),
        _ => Ok(()),
    })?;
    let state = runner.state().clone();
    let result = runner.into_result();
    save_checkpoint(&state, ckpt_dir.join("final.ckpt"))?;

    let hist_path = a.out.join("loss_history.csv");
    let mut w = csv::Writer::from_path(&hist_path).map_err(|e| output_err(&hist_path, e))?;
    for (it, r) in state.history.iter().enumerate() {
        let frame = s.train[it % s.train.len()];
        w.serialize(HistoryRow::new(it, frame, r)).map_err(|e| output_err(&hist_path, e))?;
    }
    w.flush().map_err(|e| output_err(&hist_path, e))?;

    let (eval, renders) = evaluate_state(&s, &state, &config)?;
    let render_dir = a.out.join("renders");
    create_dir(&render_dir)?;
    for (k, out) in renders.iter().enumerate() {
        write_render(out, &render_dir.join(format!("{k:04}")))?;
    }
    let report = OptimizeReport {
        iterations: state.iteration,
        final_loss: state.history.last().map(|r| r.total),
        timings: result.timings,
        evaluation: &eval,
    };
    write_json(&a.out.join("report.json"), &report)?;
    let mut text = format!(
        "{} iterations, binding {}, final loss {:.6}\n",
        state.iteration,
        config.binding_mode,
        report.final_loss.unwrap_or(f64::NAN)
    );
    text += &eval.to_text();
    text += &format!(
        "time: setup {:.2}s, loss+gradient {:.2}s, update {:.2}s\n",
        result.timings.setup, result.timings.loss_and_gradient, result.timings.update
    );
    let txt_path = a.out.join("report.txt");
    fs::write(&txt_path, &text).map_err(|e| output_err(&txt_path, e))?;
    print!("{text}");
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let config = run_config(&a.run)?;
    let scene = load_scene(&a.scene)?;
    if a.frame >= scene.frames.len() {
        return Err(CliError::Usage(format!(
            "frame {} out of range ({} frames)",
            a.frame,
            scene.frames.len()
        )));
    }
    let cloud = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.cloud,
        None => initial_cloud(&scene, &config),
    };
    let opts = GradcheckOptions {
        step: a.step,
        tolerance: a.gradcheck_tol,
        frame: a.frame,
        analytic_scale: 1.0,
    };
    let report = run_gradcheck(&scene, &config, &cloud, &opts)?;
    println!(
        "{:<22} {:>8} {:>8} {:>6} {:>6} {:>12}",
        "group", "checked", "refined", "kink", "small", "max rel err"
    );
    for g in &report.groups {
        println!(
            "{:<22} {:>8} {:>8} {:>6} {:>6} {:>12.3e}",
            g.group.name(),
            g.checked,
            g.refined,
            g.excluded_kink,
            g.excluded_small,
            g.max_rel_error
        );
    }
    println!(
        "{}: max relative error {:.3e} (tolerance {:.1e})",
        if report.pass { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.tolerance
    );
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    if !report.pass {
        return Err(CliError::GradcheckFailed {
            max_rel_error: report.max_rel_error,
            tolerance: report.tolerance,
        });
    }
    Ok(())
}

fn view_config(config: Option<&Path>, mode: Option<BindingMode>) -> CliResult<OptimConfig> {
    let mut c = base_config(config)?;
    if let Some(m) = mode {
        c.binding_mode = m;
    }
    c.validate()?;
    Ok(c)
}

pub fn render(a: &RenderArgs) -> CliResult<()> {
    let config = view_config(a.config.as_deref(), a.binding_mode)?;
    let s = load_split(&a.scene, &a.split)?;
    let state = load_checkpoint(&a.checkpoint)?;
    if state.poses.len() != s.train.len() {
        return Err(CliError::Usage(format!(
            "checkpoint has {} poses but split {} trains on {} frames",
            state.poses.len(),
            s.split.name(),
            s.train.len()
        )));
    }
    let settings = config.weights.render_settings();
    let poses = full_poses(&s.full, &s.train, &state.poses);
    create_dir(&a.out)?;
    if let Some(n) = a.orbit {
        if n == 0 {
            return Err(CliError::Usage("--orbit needs at least one view".into()));
        }
        for (i, cam) in orbit_cameras(&s.full, &poses[0], n)?.iter().enumerate() {
            let out = camelsplat::optim::render_posed(&s.full, &state.cloud, &poses[0], config.binding_mode, cam, &settings)?;
            write_render(&out, &a.out.join(format!("orbit_{i:03}")))?;
        }
        println!("wrote {n} orbit views to {}", a.out.display());
        return Ok(());
    }
    let frames = match &a.frames {
        Some(f) => f.clone(),
        None if !s.test.is_empty() => s.test.clone(),
        None => (0..s.full.frames.len()).collect(),
    };
    for &k in &frames {
        let Some(f) = s.full.frames.get(k) else {
            return Err(CliError::Usage(format!("frame {k} out of range ({} frames)", s.full.frames.len())));
        };
        let out = camelsplat::optim::render_posed(&s.full, &state.cloud, &poses[k], config.binding_mode, &f.camera, &settings)?;
        let e = camelsplat::metrics::render_errors(&out.color, &f.color)?;
        write_render(&out, &a.out.join(format!("{k:04}")))?;
        println!(
            "frame {k:4} ({}): psnr {:6.2} dB  ssim {:.4}",
            if s.train.contains(&k) { "train" } else { "held-out" },
            e.psnr,
            e.ssim
        );
    }
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let config = view_config(a.config.as_deref(), a.binding_mode)?;
    let s = load_split(&a.scene, &a.split)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let (eval, _) = evaluate_state(&s, &state, &config)?;
    print!("{}", eval.to_text());
    if let Some(p) = &a.out {
        write_json(p, &eval)?;
    }
    Ok(())
}

/// The ablation rows as (name, config derived from `base`).
pub fn ablation_rows(base: &OptimConfig) -> Vec<(&'static str, OptimConfig)> {
    let full = OptimConfig {
        binding_mode: BindingMode::Camel,
        camel_loss: None,
        pose_opt: true,
        depth_loss: true,
        ..base.clone()
    };
    let mut no_pose = full.clone();
    no_pose.pose_opt = false;
    no_pose.lr.pose_rotations = 0.0;
    no_pose.lr.global_translation = 0.0;
    let mode = |m: BindingMode, camel: Option<bool>| OptimConfig {
        binding_mode: m,
        camel_loss: camel,
        ..full.clone()
    };
    vec![
        ("Full", full.clone()),
        ("w/o SMPL Opt.", no_pose),
        ("w/o Depth Loss", OptimConfig { depth_loss: false, ..full.clone() }),
        ("w/ LSW", mode(BindingMode::Lsw, Some(true))),
        ("NoConstraint", mode(BindingMode::NoConstraint, Some(false))),
        ("LSW", mode(BindingMode::Lsw, Some(false))),
        ("GoM", mode(BindingMode::Gom, Some(false))),
        ("CAMEL", mode(BindingMode::Camel, None)),
    ]
}

fn run_cell(s: &SplitScene, config: &OptimConfig) -> Result<CellMetrics, String> {
    let mut runner = Runner::new(&s.train_scene, config).map_err(|e| e.to_string())?;
    runner.run(|_| Ok(())).map_err(|e| e.to_string())?;
    let state = runner.into_state();
    let (eval, _) = evaluate_state(s, &state, config).map_err(|e| e.to_string())?;
    Ok(CellMetrics::from_report(&eval))
}

pub fn ablate(a: &AblateArgs) -> CliResult<()> {
    let mut base = base_config(a.config.as_deref())?;
    if let Some(n) = a.iters {
        base.iterations = n;
    }
    base.validate()?;
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    let s = load_split(&a.scene, &a.split)?;
    create_dir(&a.out)?;
    let rows = ablation_rows(&base);

    // Rows with identical settings share one run per seed.
    let mut unique: Vec<String> = Vec::new();
    let mut jobs: Vec<(usize, u64, OptimConfig)> = Vec::new();
    let mut cell_job: Vec<Vec<usize>> = Vec::new();
    for (_, cfg) in &rows {
        let mut ids = Vec::new();
        for &seed in &a.seeds {
            let c = OptimConfig { seed, ..cfg.clone() };
            let key = serde_json::to_string(&c).expect("config serializes");
            let id = match unique.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    unique.push(key);
                    jobs.push((unique.len() - 1, seed, c));
                    unique.len() - 1
                }
            };
            ids.push(id);
        }
        cell_job.push(ids);
    }
    let run = |(_, _, c): &(usize, u64, OptimConfig)| run_cell(&s, c);
    let results: Vec<Result<CellMetrics, String>> = if a.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter()
            .map(|j| {
                let r = run(j);
                eprintln!("cell {}/{} done", j.0 + 1, jobs.len());
                r
            })
            .collect()
    };
    let table_rows: Vec<AblationRow> = rows
        .iter()
        .zip(&cell_job)
        .map(|((name, _), ids)| {
            let cells = ids
                .iter()
                .zip(&a.seeds)
                .map(|(&id, &seed)| match &results[id] {
                    Ok(m) => Cell {
                        seed,
                        metrics: Some(m.clone()),
                        error: None,
                    },
                    Err(e) => Cell {
                        seed,
                        metrics: None,
                        error: Some(e.clone()),
                    },
                })
                .collect();
            AblationRow::new(name, cells)
        })
        .collect();
    let table = ablation_table(&table_rows);
    write_json(&a.out.join("ablation.json"), &table_rows)?;
    let txt = a.out.join("ablation.txt");
    fs::write(&txt, &table).map_err(|e| output_err(&txt, e))?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags() -> RunFlags {
        RunFlags {
            config: None,
            seed: None,
            binding_mode: None,
            no_pose_opt: false,
            no_depth_loss: false,
            iters: None,
        }
    }

    #[test]
    fn flags_override_the_config() {
        let c = run_config(&RunFlags {
            seed: Some(7),
            binding_mode: Some(BindingMode::Gom),
            no_pose_opt: true,
            no_depth_loss: true,
            iters: Some(12),
            ..flags()
        })
        .unwrap();
        assert_eq!((c.seed, c.binding_mode, c.iterations), (7, BindingMode::Gom, 12));
        assert!(!c.pose_opt && !c.depth_loss);
        assert_eq!(c.lr.pose_rotations, 0.0);
        assert_eq!(c.lr.global_translation, 0.0);
    }

    #[test]
    fn invalid_config_maps_to_exit_1() {
        let e = run_config(&RunFlags {
            iters: Some(0),
            ..flags()
        })
        .unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"iterations": 5, "typo": 1}"#).unwrap();
        let e = run_config(&RunFlags {
            config: Some(p),
            ..flags()
        })
        .unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn numerical_errors_map_to_exit_3() {
        let e = CliError::from(Error::Divergence {
            iteration: 4,
            value: f64::NAN,
        });
        assert_eq!(e.exit_code(), 3);
        assert_eq!(CliError::from(Error::DegenerateScene("x".into())).exit_code(), 2);
    }

    #[test]
    fn ablation_rows_have_the_table_shape() {
        let rows = ablation_rows(&OptimConfig::default());
        assert_eq!(rows.len(), 8);
        let get = |n: &str| rows.iter().find(|(m, _)| *m == n).unwrap().1.clone();
        assert_eq!(get("Full"), get("CAMEL"));
        assert!(!get("w/o SMPL Opt.").pose_opt);
        assert!(!get("w/o Depth Loss").depth_loss);
        let lsw = get("w/ LSW");
        assert_eq!((lsw.binding_mode, lsw.objective().camel), (BindingMode::Lsw, true));
        for (n, m) in [("NoConstraint", BindingMode::NoConstraint), ("LSW", BindingMode::Lsw), ("GoM", BindingMode::Gom)] {
            let c = get(n);
            assert_eq!(c.binding_mode, m);
            assert!(!c.objective().camel);
        }
        assert!(get("CAMEL").objective().camel && get("Full").objective().camel);
    }
}
