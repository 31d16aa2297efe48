//! Scenes, frames, synthetic generation and on-disk formats.
//!
//! A scene directory holds `manifest.json`, `body.json`, an optional
//! `gt_cloud.ckpt` and per-frame `frames/<idx>_color.png`,
//! `frames/<idx>_depth.pfm`, `frames/<idx>_mask.png`. PNG and PFM are
//! lossy for f64 data, so each frame also gets `frames/<idx>_exact.bin`
//! carrying the exact color and depth; loaders prefer it when listed.

mod container;
mod images;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use container::{put_cloud, put_poses, take_cloud, take_poses, Array, ArrayFile, MAGIC};
pub use images::{read_color_png, read_mask_png, read_pfm, write_color_png, write_mask_png, write_pfm};
pub use synthetic::{generate_synthetic_scene, ground_truth_cloud, SceneSpec, GT_FLATNESS, GT_OPACITY, MIN_COVERAGE};

use crate::body::{load_body_template, save_body_template, BodyModel, PoseState};
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::geometry::Camera;
use crate::raster::{ColorImage, DepthMap, Mask, Raster};

pub const MANIFEST_VERSION: u32 = 1;
/// Version of frame sidecars and ground-truth cloud files.
pub const DATA_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub color: ColorImage,
    /// Meters along the optical axis, 0 where invalid.
    pub depth: DepthMap,
    pub mask: Mask,
    pub camera: Camera,
    pub init_pose: PoseState,
    pub gt_pose: Option<PoseState>,
}

impl Frame {
    pub fn validate(&self, n_bones: usize) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.camera.width, self.camera.height);
        for (name, ww, hh) in [
            ("color", self.color.width(), self.color.height()),
            ("depth", self.depth.width(), self.depth.height()),
            ("mask", self.mask.width(), self.mask.height()),
        ] {
            if (ww, hh) != (w, h) {
                return Err(Error::Shape(format!("{name} is {ww}x{hh}, camera is {w}x{h}")));
            }
        }
        for p in std::iter::once(&self.init_pose).chain(self.gt_pose.as_ref()) {
            if p.joint_rotations.len() != n_bones {
                return Err(Error::Shape(format!(
                    "pose has {} joints, body has {n_bones}",
                    p.joint_rotations.len()
                )));
            }
        }
        Ok(())
    }
}

/// Initial pose errors recorded when a synthetic scene is generated (millimeters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub mean_mpjpe: f64,
    pub mean_pa_mpjpe: f64,
    pub per_frame_mpjpe: Vec<f64>,
    pub per_frame_pa_mpjpe: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub body: BodyModel,
    pub frames: Vec<Frame>,
    pub gt_cloud: Option<GaussianCloud>,
    pub baseline: Option<Baseline>,
    pub spec: Option<SceneSpec>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::DegenerateScene("scene has no frames".into()));
        }
        for f in &self.frames {
            f.validate(self.body.n_bones())?;
        }
        Ok(())
    }
}

impl Scene {
    /// The scene restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Scene> {
        let frames = indices
            .iter()
            .map(|&k| {
                self.frames
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("frame {k} out of range ({} frames)", self.frames.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        let baseline = match &self.baseline {
            Some(b) if b.per_frame_mpjpe.len() == self.frames.len() => {
                let pick = |v: &[f64]| indices.iter().map(|&k| v[k]).collect::<Vec<f64>>();
                let (m, p) = (pick(&b.per_frame_mpjpe), pick(&b.per_frame_pa_mpjpe));
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
                Some(Baseline {
                    mean_mpjpe: mean(&m),
                    mean_pa_mpjpe: mean(&p),
                    per_frame_mpjpe: m,
                    per_frame_pa_mpjpe: p,
                })
            }
            _ => None,
        };
        Ok(Scene {
            body: self.body.clone(),
            frames,
            gt_cloud: self.gt_cloud.clone(),
            baseline,
            spec: self.spec.clone(),
        })
    }
}

/// Train/test frame split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Train on everything.
    All,
    /// Every fifth frame held out.
    Uniform80,
    /// The final 20% held out.
    First80,
    /// Train on this many evenly spaced frames.
    Views(usize),
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "all" => Ok(Split::All),
            "uniform80" => Ok(Split::Uniform80),
            "first80" => Ok(Split::First80),
            _ => match s.strip_prefix("views:").map(str::parse::<usize>) {
                Some(Ok(n)) if n > 0 => Ok(Split::Views(n)),
                _ => Err(Error::Config(format!(
                    "unknown split `{s}` (expected all, uniform80, first80 or views:N)"
                ))),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            Split::All => "all".into(),
            Split::Uniform80 => "uniform80".into(),
            Split::First80 => "first80".into(),
            Split::Views(n) => format!("views:{n}"),
        }
    }

    /// Training and held-out frame indices for `n` frames.
    pub fn indices(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let train: Vec<usize> = match *self {
            Split::All => (0..n).collect(),
            Split::Uniform80 => (0..n).filter(|k| k % 5 != 4).collect(),
            Split::First80 => (0..(n * 4 / 5).max(1)).collect(),
            Split::Views(v) => {
                if v > n {
                    return Err(Error::Config(format!("views:{v} asks for more frames than the scene's {n}")));
                }
                if v == 1 {
                    vec![0]
                } else {
                    (0..v).map(|i| (i * (n - 1) + (v - 1) / 2) / (v - 1)).collect()
                }
            }
        };
        if train.is_empty() {
            return Err(Error::Config("split leaves no training frames".into()));
        }
        let test = (0..n).filter(|k| !train.contains(k)).collect();
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub color: FileRef,
    pub depth: FileRef,
    pub mask: FileRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<FileRef>,
    pub camera: Camera,
    pub init_pose: PoseState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<PoseState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub body: FileRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_cloud: Option<FileRef>,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SceneSpec>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_ref(root: &Path, rel: &str) -> Result<FileRef> {
    Ok(FileRef {
        path: rel.to_string(),
        sha256: sha256_file(&root.join(rel))?,
    })
}

/// Resolves a manifest entry and checks that the file exists and its hash matches.
fn checked(root: &Path, r: &FileRef) -> Result<PathBuf> {
    let rel = Path::new(&r.path);
    if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::load(root.join(rel), "manifest paths must stay inside the scene directory"));
    }
    let p = root.join(rel);
    if !p.is_file() {
        return Err(Error::load(&p, "referenced file is missing"));
    }
    let got = sha256_file(&p)?;
    if got != r.sha256 {
        return Err(Error::load(&p, format!("checksum mismatch: manifest {}, file {got}", r.sha256)));
    }
    Ok(p)
}

pub fn save_scene(scene: &Scene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    scene.validate()?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    save_body_template(&scene.body, dir.join("body.json"))?;
    let gt_cloud = match &scene.gt_cloud {
        Some(c) => {
            let mut f = ArrayFile::default();
            put_cloud(&mut f, "", c);
            f.write(&dir.join("gt_cloud.ckpt"), DATA_FILE_VERSION)?;
            Some(file_ref(dir, "gt_cloud.ckpt")?)
        }
        None => None,
    };
    let mut entries = Vec::with_capacity(scene.frames.len());
    for (k, f) in scene.frames.iter().enumerate() {
        let name = |s: &str| format!("frames/{k:04}_{s}");
        write_color_png(&f.color, &dir.join(name("color.png")))?;
        write_pfm(&f.depth, &dir.join(name("depth.pfm")))?;
        write_mask_png(&f.mask, &dir.join(name("mask.png")))?;
        let mut exact = ArrayFile::default();
        let (w, h) = (f.color.width(), f.color.height());
        exact.insert("color", Array::new(vec![h, w, 3], f.color.as_slice().iter().flatten().copied().collect()));
        exact.insert("depth", Array::new(vec![h, w], f.depth.as_slice().to_vec()));
        exact.write(&dir.join(name("exact.bin")), DATA_FILE_VERSION)?;
        entries.push(FrameEntry {
            color: file_ref(dir, &name("color.png"))?,
            depth: file_ref(dir, &name("depth.pfm"))?,
            mask: file_ref(dir, &name("mask.png"))?,
            exact: Some(file_ref(dir, &name("exact.bin"))?),
            camera: f.camera.clone(),
            init_pose: f.init_pose.clone(),
            gt_pose: f.gt_pose.clone(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        body: file_ref(dir, "body.json")?,
        gt_cloud,
        frames: entries,
        baseline: scene.baseline.clone(),
        generator: scene.spec.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::load(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Incompatible {
            path,
            found: m.version,
            expected: MANIFEST_VERSION,
        });
    }
    Ok(m)
}

pub fn load_scene(dir: impl AsRef<Path>) -> Result<Scene> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let body = load_body_template(checked(dir, &m.body)?)?;
    let gt_cloud = match &m.gt_cloud {
        Some(r) => {
            let p = checked(dir, r)?;
            let c = take_cloud(&ArrayFile::read(&p, DATA_FILE_VERSION)?, "", &p)?;
            if c.n_bones() != body.n_bones() {
                return Err(Error::load(&p, "cloud and body differ in bone count"));
            }
            Some(c)
        }
        None => None,
    };
    let mut frames = Vec::with_capacity(m.frames.len());
    for e in &m.frames {
        let mut color = read_color_png(&checked(dir, &e.color)?)?;
        let mut depth = read_pfm(&checked(dir, &e.depth)?)?;
        let mask = read_mask_png(&checked(dir, &e.mask)?)?;
        if let Some(r) = &e.exact {
            let p = checked(dir, r)?;
            let f = ArrayFile::read(&p, DATA_FILE_VERSION)?;
            let (w, h) = (color.width(), color.height());
            let c = f.expect("color", &[Some(h), Some(w), Some(3)], &p)?;
            let d = f.expect("depth", &[Some(h), Some(w)], &p)?;
            color = Raster::from_vec(w, h, c.data.chunks_exact(3).map(|x| [x[0], x[1], x[2]]).collect())
                .ok_or_else(|| Error::load(&p, "color size mismatch"))?;
            depth = Raster::from_vec(w, h, d.data.clone()).ok_or_else(|| Error::load(&p, "depth size mismatch"))?;
        }
        let frame = Frame {
            color,
            depth,
            mask,
            camera: e.camera.clone(),
            init_pose: e.init_pose.clone(),
            gt_pose: e.gt_pose.clone(),
        };
        frame
            .validate(body.n_bones())
            .map_err(|err| Error::load(dir.join(&e.color.path), err.to_string()))?;
        frames.push(frame);
    }
    let scene = Scene {
        body,
        frames,
        gt_cloud,
        baseline: m.baseline,
        spec: m.generator,
    };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> Scene {
        generate_synthetic_scene(&SceneSpec {
            frames: 3,
            width: 24,
            height: 24,
            depth_noise: 0.0,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn splits() {
        let (tr, te) = Split::First80.indices(30).unwrap();
        assert_eq!((tr.len(), te[0]), (24, 24));
        let (tr, te) = Split::Uniform80.indices(10).unwrap();
        assert_eq!((tr, te), (vec![0, 1, 2, 3, 5, 6, 7, 8], vec![4, 9]));
        let (tr, _) = Split::Views(4).indices(10).unwrap();
        assert_eq!(tr, vec![0, 3, 6, 9]);
        assert_eq!(Split::parse("views:3").unwrap(), Split::Views(3));
        assert!(Split::parse("views:0").is_err() && Split::parse("half").is_err());
        assert!(Split::Views(11).indices(10).is_err());
        let s = scene();
        let sub = s.subset(&[2, 0]).unwrap();
        assert_eq!(sub.frames[0], s.frames[2]);
        assert_eq!(sub.baseline.unwrap().per_frame_mpjpe[1], s.baseline.as_ref().unwrap().per_frame_mpjpe[0]);
        assert!(s.subset(&[3]).is_err());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let s = scene();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&s, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn missing_depth_file_is_named() {
        let s = scene();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&s, dir.path()).unwrap();
        fs::remove_file(dir.path().join("frames/0001_depth.pfm")).unwrap();
        let err = load_scene(dir.path()).unwrap_err().to_string();
        assert!(err.contains("0001_depth.pfm"), "{err}");
    }

    #[test]
    fn checksum_mismatch_is_named() {
        let s = scene();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&s, dir.path()).unwrap();
        let p = dir.path().join("frames/0002_mask.png");
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&p, bytes).unwrap();
        let err = load_scene(dir.path()).unwrap_err().to_string();
        assert!(err.contains("0002_mask.png") && err.contains("checksum"), "{err}");
    }

    #[test]
    fn manifest_paths_cannot_escape() {
        let s = scene();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&s, dir.path()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.body.path = "../body.json".into();
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(load_scene(dir.path()).is_err());
    }
}
