//! Named f64 arrays in one binary file, used for checkpoints, ground-truth
//! clouds and exact frame sidecars. Layout is documented in `docs/formats.md`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::body::{PoseState, SkinWeights};
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;

pub const MAGIC: &[u8; 8] = b"CSPLCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Array { dims, data }
    }

    pub fn scalar(v: f64) -> Self {
        Array::new(vec![], vec![v])
    }
}

/// Arrays keyed by name; written in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArrayFile {
    pub arrays: BTreeMap<String, Array>,
}

impl ArrayFile {
    pub fn insert(&mut self, name: &str, array: Array) {
        self.arrays.insert(name.to_string(), array);
    }

    pub fn get(&self, name: &str, path: &Path) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::load(path, format!("missing array `{name}`")))
    }

    /// Fetches an array and checks its shape; `None` dims match anything.
    pub fn expect(&self, name: &str, dims: &[Option<usize>], path: &Path) -> Result<&Array> {
        let a = self.get(name, path)?;
        let ok = a.dims.len() == dims.len() && a.dims.iter().zip(dims).all(|(d, e)| e.is_none_or(|e| e == *d));
        if !ok {
            return Err(Error::load(path, format!("array `{name}` has shape {:?}", a.dims)));
        }
        Ok(a)
    }

    pub fn to_bytes(&self, version: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
            for d in &a.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: &Path, version: u32) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes(version)).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], expected_version: u32, path: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::load(path, "not a camelsplat array file"));
        }
        let version = r.u32()?;
        if version != expected_version {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                found: version,
                expected: expected_version,
            });
        }
        let mut out = ArrayFile::default();
        for _ in 0..r.u32()? {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::load(path, "array name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::load(path, format!("array `{name}` is larger than the file")))?;
            let raw = r.take(8 * count)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            out.arrays.insert(name, Array { dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::load(path, "trailing bytes after last array"));
        }
        Ok(out)
    }

    pub fn read(path: &Path, expected_version: u32) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        ArrayFile::from_bytes(&bytes, expected_version, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::load(self.path, "file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn flat3(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflat3(d: &[f64]) -> Vec<Vector3<f64>> {
    d.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// Stores a cloud under `prefix`-qualified names.
pub fn put_cloud(file: &mut ArrayFile, prefix: &str, cloud: &GaussianCloud) {
    let n = cloud.len();
    let b = cloud.n_bones();
    let key = |s: &str| format!("{prefix}{s}");
    file.insert(&key("centers"), Array::new(vec![n, 3], flat3(&cloud.centers)));
    file.insert(&key("quats"), Array::new(vec![n, 4], cloud.quats.iter().flatten().copied().collect()));
    file.insert(&key("log_scales"), Array::new(vec![n, 3], flat3(&cloud.log_scales)));
    file.insert(&key("opacity_logits"), Array::new(vec![n], cloud.opacity_logits.clone()));
    file.insert(&key("colors"), Array::new(vec![n, 3], cloud.colors.iter().flatten().copied().collect()));
    if let Some(sh) = &cloud.sh1 {
        let data = sh.iter().flatten().flatten().copied().collect();
        file.insert(&key("sh1"), Array::new(vec![n, 3, 3], data));
    }
    file.insert(&key("skin_weights"), Array::new(vec![n, b], cloud.skin_weights.as_slice().to_vec()));
    file.insert(
        &key("skin_weight_deltas"),
        Array::new(vec![n, b], cloud.skin_weight_deltas.as_slice().to_vec()),
    );
    if let Some(a) = &cloud.anchors {
        file.insert(&key("anchors"), Array::new(vec![n], a.iter().map(|&i| i as f64).collect()));
    }
}

pub fn take_cloud(file: &ArrayFile, prefix: &str, path: &Path) -> Result<GaussianCloud> {
    let key = |s: &str| format!("{prefix}{s}");
    let centers = file.expect(&key("centers"), &[None, Some(3)], path)?;
    let n = centers.dims[0];
    if n == 0 {
        return Err(Error::load(path, "cloud has no Gaussians"));
    }
    let quats = file.expect(&key("quats"), &[Some(n), Some(4)], path)?;
    let log_scales = file.expect(&key("log_scales"), &[Some(n), Some(3)], path)?;
    let opacity = file.expect(&key("opacity_logits"), &[Some(n)], path)?;
    let colors = file.expect(&key("colors"), &[Some(n), Some(3)], path)?;
    let weights = file.expect(&key("skin_weights"), &[Some(n), None], path)?;
    let b = weights.dims[1];
    let deltas = file.expect(&key("skin_weight_deltas"), &[Some(n), Some(b)], path)?;
    let sh1 = match file.arrays.get(&key("sh1")) {
        Some(_) => {
            let a = file.expect(&key("sh1"), &[Some(n), Some(3), Some(3)], path)?;
            Some(
                a.data
                    .chunks_exact(9)
                    .map(|c| [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]])
                    .collect(),
            )
        }
        None => None,
    };
    let anchors = match file.arrays.get(&key("anchors")) {
        Some(_) => {
            let a = file.expect(&key("anchors"), &[Some(n)], path)?;
            if a.data.iter().any(|&i| i < 0.0 || i.fract() != 0.0) {
                return Err(Error::load(path, "anchors must be nonnegative integers"));
            }
            Some(a.data.iter().map(|&i| i as usize).collect())
        }
        None => None,
    };
    let wrap = |e: Error| Error::load(path, e.to_string());
    Ok(GaussianCloud {
        centers: unflat3(&centers.data),
        quats: quats.data.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        log_scales: unflat3(&log_scales.data),
        opacity_logits: opacity.data.clone(),
        colors: colors.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        sh1,
        skin_weights: SkinWeights::new(b, weights.data.clone()).map_err(wrap)?,
        skin_weight_deltas: SkinWeights::new(b, deltas.data.clone()).map_err(wrap)?,
        anchors,
    })
}

pub fn put_poses(file: &mut ArrayFile, prefix: &str, poses: &[PoseState]) {
    let f = poses.len();
    let b = poses.first().map_or(0, |p| p.joint_rotations.len());
    let rot = poses.iter().flat_map(|p| flat3(&p.joint_rotations)).collect();
    let trans = poses.iter().flat_map(|p| [p.global_translation.x, p.global_translation.y, p.global_translation.z]).collect();
    file.insert(&format!("{prefix}joint_rotations"), Array::new(vec![f, b, 3], rot));
    file.insert(&format!("{prefix}global_translations"), Array::new(vec![f, 3], trans));
}

pub fn take_poses(file: &ArrayFile, prefix: &str, path: &Path) -> Result<Vec<PoseState>> {
    let rot = file.expect(&format!("{prefix}joint_rotations"), &[None, None, Some(3)], path)?;
    let (f, b) = (rot.dims[0], rot.dims[1]);
    let trans = file.expect(&format!("{prefix}global_translations"), &[Some(f), Some(3)], path)?;
    Ok((0..f)
        .map(|k| PoseState {
            joint_rotations: unflat3(&rot.data[k * b * 3..(k + 1) * b * 3]),
            global_translation: Vector3::new(trans.data[3 * k], trans.data[3 * k + 1], trans.data[3 * k + 2]),
        })
        .collect())
}
