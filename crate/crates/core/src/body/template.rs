//! JSON body template files.
//!
//! Keys: `vertices` (N×3), `faces` (F×3), `joints` (n_b×3), `parents`
//! (n_b, −1 for the root), `weights` (N×n_b). Unknown keys are ignored.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{BodyModel, SkinWeights};
use crate::error::{Error, Result};
use crate::geometry::TriangleMesh;

/// Rows summing to 1 within this tolerance are accepted and renormalized.
pub const WEIGHT_ROW_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyTemplateFile {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub joints: Vec<[f64; 3]>,
    pub parents: Vec<i64>,
    pub weights: Vec<Vec<f64>>,
}

impl BodyTemplateFile {
    pub fn from_model(model: &BodyModel) -> Self {
        BodyTemplateFile {
            vertices: model.template.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces: model.template.faces.clone(),
            joints: model.joints_rest.iter().map(|j| [j.x, j.y, j.z]).collect(),
            parents: model
                .parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            weights: (0..model.n_vertices())
                .map(|i| model.skin_weights.row(i).to_vec())
                .collect(),
        }
    }

    pub fn into_model(self, path: &Path) -> Result<BodyModel> {
        let n_b = self.joints.len();
        let mut parents = Vec::with_capacity(n_b);
        for (i, &p) in self.parents.iter().enumerate() {
            parents.push(match p {
                -1 => None,
                p if p >= 0 && (p as usize) < n_b => Some(p as usize),
                p => return Err(Error::load(path, format!("joint {i} has parent {p}"))),
            });
        }
        if self.weights.len() != self.vertices.len() {
            return Err(Error::load(
                path,
                format!(
                    "{} weight rows for {} vertices",
                    self.weights.len(),
                    self.vertices.len()
                ),
            ));
        }
        let mut flat = Vec::with_capacity(self.vertices.len() * n_b);
        for (i, row) in self.weights.iter().enumerate() {
            if row.len() != n_b {
                return Err(Error::load(
                    path,
                    format!("weight row {i} has {} entries, expected {n_b}", row.len()),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_ROW_TOLERANCE || row.iter().any(|w| !(*w >= 0.0)) {
                return Err(Error::load(
                    path,
                    format!("weight row {i} sums to {sum} or has negative entries"),
                ));
            }
            // exact rows stay untouched so a save/load round trip is lossless
            if (sum - 1.0).abs() > 1e-12 {
                flat.extend(row.iter().map(|w| w / sum));
            } else {
                flat.extend_from_slice(row);
            }
        }
        let mesh = TriangleMesh::new(self.vertices.iter().map(|&v| Vector3::from(v)).collect(), self.faces)
            .map_err(|e| Error::load(path, e.to_string()))?;
        let weights = SkinWeights::new(n_b.max(1), flat).map_err(|e| Error::load(path, e.to_string()))?;
        BodyModel::new(
            mesh,
            self.joints.iter().map(|&j| Vector3::from(j)).collect(),
            parents,
            weights,
        )
        .map_err(|e| Error::load(path, e.to_string()))
    }
}

pub fn load_body_template(path: impl AsRef<Path>) -> Result<BodyModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: BodyTemplateFile =
        serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))?;
    file.into_model(path)
}

pub fn save_body_template(model: &BodyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&BodyTemplateFile::from_model(model))
        .map_err(|e| Error::load(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
